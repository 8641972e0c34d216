// Checkpoint layout, all integers little-endian:
//   "MOEBALCK"                      8 bytes
//   u32 format version
//   u64 config length, config text  (key = value lines)
//   u32 tensor count
//   per tensor: u32 name length, name, u32 rank, u64 dims[rank], f64 data[]

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>

#include "moebal/errors.hpp"
#include "moebal/model.hpp"

namespace moebal {

namespace {

constexpr char kMagic[8] = {'M', 'O', 'E', 'B', 'A', 'L', 'C', 'K'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void put(std::string& out, T v) {
  static_assert(std::is_trivially_copyable_v<T>);
  unsigned char bytes[sizeof(T)];
  std::memcpy(bytes, &v, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  out.append(reinterpret_cast<const char*>(bytes), sizeof(T));
}

class Reader {
 public:
  Reader(std::string data, std::string path) : data_(std::move(data)), path_(std::move(path)) {}

  template <typename T>
  T get() {
    unsigned char bytes[sizeof(T)];
    std::memcpy(bytes, take(sizeof(T)), sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
    T v;
    std::memcpy(&v, bytes, sizeof(T));
    return v;
  }

  std::string bytes(std::size_t n) { return std::string(take(n), n); }
  bool done() const { return pos_ == data_.size(); }

 private:
  const char* take(std::size_t n) {
    if (n > data_.size() - pos_) throw IoError(path_ + ": truncated checkpoint");
    const char* p = data_.data() + pos_;
    pos_ += n;
    return p;
  }

  std::string data_;
  std::string path_;
  std::size_t pos_ = 0;
};

std::vector<NamedTensor> checkpoint_tensors(const MoEModel& model) {
  auto out = model.parameters();
  const auto biases = model.bias_states();
  std::size_t l = 0;
  for (std::size_t b = 0; b < model.blocks().size(); ++b) {
    if (!model.blocks()[b].moe) continue;
    const auto& bias = biases[l++]->bias;
    out.push_back({"block" + std::to_string(b) + ".moe.bias",
                   ad::Tensor::from({bias.size()}, bias)});
  }
  return out;
}

}  // namespace

void save_checkpoint(const MoEModel& model, const std::string& path) {
  std::string out(kMagic, sizeof(kMagic));
  put<std::uint32_t>(out, kVersion);
  const auto cfg = format_key_values(model.config().to_key_values());
  put<std::uint64_t>(out, cfg.size());
  out += cfg;
  const auto tensors = checkpoint_tensors(model);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) put<std::uint64_t>(out, d);
    for (double v : t.data()) put<double>(out, v);
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError(path + ": cannot open for writing");
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw IoError(path + ": write failed");
}

MoEModel load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError(path + ": cannot open for reading");
  Reader r(std::string(std::istreambuf_iterator<char>(f), {}), path);
  if (r.bytes(sizeof(kMagic)) != std::string(kMagic, sizeof(kMagic)))
    throw IoError(path + ": not a moebal checkpoint");
  if (const auto v = r.get<std::uint32_t>(); v != kVersion)
    throw IoError(path + ": unsupported checkpoint version " + std::to_string(v));
  const auto cfg_len = r.get<std::uint64_t>();
  ModelConfig cfg;
  const auto unknown = cfg.apply(parse_key_values(r.bytes(cfg_len)));
  if (!unknown.empty()) throw IoError(path + ": unknown config key '" + unknown.front().first + "'");
  MoEModel model(cfg);

  std::map<std::string, ad::Tensor> slots;
  for (auto& p : model.parameters()) slots.emplace(p.name, p.tensor);
  std::map<std::string, ExpertBiasState*> bias_slots;
  {
    auto biases = model.bias_states();
    std::size_t l = 0;
    for (std::size_t b = 0; b < model.blocks().size(); ++b)
      if (model.blocks()[b].moe) bias_slots.emplace("block" + std::to_string(b) + ".moe.bias", biases[l++]);
  }

  const auto count = r.get<std::uint32_t>();
  if (count != slots.size() + bias_slots.size())
    throw IoError(path + ": expected " + std::to_string(slots.size() + bias_slots.size()) +
                  " tensors, found " + std::to_string(count));
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name = r.bytes(r.get<std::uint32_t>());
    const auto rank = r.get<std::uint32_t>();
    ad::Shape shape(rank);
    for (auto& d : shape) d = r.get<std::uint64_t>();
    std::vector<double> values(ad::shape_numel(shape));
    for (double& v : values) v = r.get<double>();
    if (auto it = slots.find(name); it != slots.end()) {
      if (it->second.shape() != shape)
        throw IoError(path + ": tensor '" + name + "' has shape " + ad::shape_str(shape) +
                      ", model expects " + ad::shape_str(it->second.shape()));
      std::copy(values.begin(), values.end(), it->second.mutable_data().begin());
      slots.erase(it);
    } else if (auto bt = bias_slots.find(name); bt != bias_slots.end()) {
      if (values.size() != bt->second->bias.size())
        throw IoError(path + ": bias '" + name + "' has the wrong length");
      bt->second->bias = std::move(values);
      bias_slots.erase(bt);
    } else {
      throw IoError(path + ": unexpected tensor '" + name + "'");
    }
  }
  if (!r.done()) throw IoError(path + ": trailing bytes after the last tensor");
  return model;
}

}  // namespace moebal
