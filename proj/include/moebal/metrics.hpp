#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "moebal/routing.hpp"

namespace moebal {

enum class LoadGranularity { batch, computation_batch, global };

struct LoadCounter {
  std::vector<std::int64_t> counts;
  LoadGranularity granularity = LoadGranularity::batch;
  std::int64_t tokens_seen = 0;

  static LoadCounter for_experts(std::size_t experts, LoadGranularity g);
  /// Adds every selected (token, expert) pair of the assignment.
  void add(const RoutingAssignment& a);
  void merge(const LoadCounter& other);
};

/// (max_i c_i - mean c) / mean c.
double maxvio(const LoadCounter& counter);
double maxvio(std::span<const std::int64_t> counts);

/// One MaxVio value per step, each computed from that step's assignment.
std::vector<double> maxvio_batch(std::span<const RoutingAssignment> per_step);
double maxvio_global(const LoadCounter& accumulated);

struct WindowedMaxVio {
  std::vector<double> windows;  // one per full window, in order
  std::optional<double> tail;   // leftover samples that do not fill a window
};

/// Expert counts of every sample (sequence) in an assignment whose tokens
/// are laid out as consecutive runs of seq_len.
std::vector<std::vector<std::int64_t>> per_sample_loads(const RoutingAssignment& a,
                                                        std::size_t seq_len);

/// MaxVio over consecutive windows of micro_batch_size * ep_parallel samples.
WindowedMaxVio maxvio_computation_batch(std::span<const std::vector<std::int64_t>> sample_loads,
                                        std::size_t micro_batch_size, std::size_t ep_parallel);

double layer_average(std::span<const double> per_layer);

}  // namespace moebal
