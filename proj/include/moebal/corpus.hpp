#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

namespace moebal {

enum class CorpusKind { markov2, file };

struct CorpusSpec {
  CorpusKind kind = CorpusKind::markov2;
  std::size_t size = 200000;   // tokens to generate (markov2)
  std::uint64_t seed = 1;
  std::size_t alphabet = 32;   // symbols 0..alphabet-1
  std::size_t branching = 4;   // successors per order-2 context
  double skew = 1.0;           // Zipf exponent for successor popularity; 0 = uniform
  std::string path;            // file kind
};

/// Order-2 Markov stream: each context (a, b) draws `branching` successor
/// symbols from a Zipf(skew) popularity law and fixed random weights.
std::vector<std::int32_t> generate_markov2(std::size_t size, std::uint64_t seed,
                                           std::size_t alphabet, std::size_t branching,
                                           double skew);

/// One token per byte of the file.
std::vector<std::int32_t> read_byte_corpus(const std::string& path);

std::vector<std::int32_t> gen_corpus(const CorpusSpec& spec);

void write_byte_corpus(const std::vector<std::int32_t>& tokens, const std::string& path);

struct CorpusSplit {
  std::vector<std::int32_t> train;
  std::vector<std::int32_t> validation;
};

/// The trailing `validation_fraction` of the stream becomes validation data.
CorpusSplit split_corpus(const std::vector<std::int32_t>& tokens, double validation_fraction);

}  // namespace moebal
