#include "moebal/corpus.hpp"

#include <cmath>
#include <fstream>
#include <iterator>
#include <random>

#include "moebal/errors.hpp"

namespace moebal {

std::vector<std::int32_t> generate_markov2(std::size_t size, std::uint64_t seed,
                                           std::size_t alphabet, std::size_t branching,
                                           double skew) {
  if (alphabet < 2 || alphabet > 256) throw ContractError("markov2: alphabet must be in [2, 256]");
  if (branching == 0) throw ContractError("markov2: branching must be positive");
  std::mt19937_64 rng(seed);

  std::vector<double> popularity(alphabet);
  for (std::size_t s = 0; s < alphabet; ++s)
    popularity[s] = 1.0 / std::pow(static_cast<double>(s + 1), skew);
  std::discrete_distribution<std::size_t> popular(popularity.begin(), popularity.end());
  std::uniform_real_distribution<double> unit(0.05, 1.0);

  const std::size_t contexts = alphabet * alphabet;
  std::vector<std::vector<std::size_t>> successors(contexts);
  std::vector<std::discrete_distribution<std::size_t>> pick(contexts);
  for (std::size_t c = 0; c < contexts; ++c) {
    std::vector<double> w(branching);
    for (std::size_t j = 0; j < branching; ++j) {
      successors[c].push_back(popular(rng));
      w[j] = unit(rng);
    }
    pick[c] = std::discrete_distribution<std::size_t>(w.begin(), w.end());
  }

  std::vector<std::int32_t> out;
  out.reserve(size);
  std::uniform_int_distribution<std::size_t> any(0, alphabet - 1);
  std::size_t a = any(rng), b = any(rng);
  for (std::size_t i = 0; i < size; ++i) {
    const std::size_t ctx = a * alphabet + b;
    const std::size_t next = successors[ctx][pick[ctx](rng)];
    out.push_back(static_cast<std::int32_t>(next));
    a = b;
    b = next;
  }
  return out;
}

std::vector<std::int32_t> read_byte_corpus(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError(path + ": cannot open corpus file");
  std::vector<std::int32_t> out;
  for (auto it = std::istreambuf_iterator<char>(f); it != std::istreambuf_iterator<char>(); ++it)
    out.push_back(static_cast<std::int32_t>(static_cast<unsigned char>(*it)));
  return out;
}

std::vector<std::int32_t> gen_corpus(const CorpusSpec& spec) {
  if (spec.kind == CorpusKind::file) return read_byte_corpus(spec.path);
  return generate_markov2(spec.size, spec.seed, spec.alphabet, spec.branching, spec.skew);
}

void write_byte_corpus(const std::vector<std::int32_t>& tokens, const std::string& path) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError(path + ": cannot open for writing");
  for (auto t : tokens) {
    if (t < 0 || t > 255) throw ContractError("write_byte_corpus: token outside byte range");
    f.put(static_cast<char>(t));
  }
  if (!f) throw IoError(path + ": write failed");
}

CorpusSplit split_corpus(const std::vector<std::int32_t>& tokens, double validation_fraction) {
  if (!(validation_fraction > 0.0 && validation_fraction < 1.0))
    throw ContractError("validation fraction must be in (0, 1)");
  const auto n_val = static_cast<std::size_t>(static_cast<double>(tokens.size()) * validation_fraction);
  CorpusSplit s;
  s.train.assign(tokens.begin(), tokens.end() - static_cast<std::ptrdiff_t>(n_val));
  s.validation.assign(tokens.end() - static_cast<std::ptrdiff_t>(n_val), tokens.end());
  return s;
}

}  // namespace moebal
