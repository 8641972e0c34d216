#include <doctest.h>

#include <array>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <memory>
#include <regex>

#include <sys/wait.h>
#include <unistd.h>

#include <nlohmann/json.hpp>

#include "moebal/errors.hpp"
#include "moebal/experiment.hpp"
#include "moebal/plot.hpp"

using namespace moebal;
namespace fs = std::filesystem;

namespace {

const char* kTiny = R"(# small and fast
vocab_size = 16
d_model = 8
n_layers = 2
seq_len = 8
d_ff = 16
routed_experts = 4
top_k = 2
d_expert = 4
steps = 12
batch_size = 2
corpus_size = 3000
corpus_alphabet = 16
max_eval_sequences = 16
)";

struct TempDir {
  fs::path path;
  TempDir() {
    static int counter = 0;
    path = fs::temp_directory_path() / ("moebal_harness_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string operator/(const std::string& name) const { return (path / name).string(); }
};

std::string slurp(const std::string& p) {
  std::ifstream f(p, std::ios::binary);
  REQUIRE(f);
  return {std::istreambuf_iterator<char>(f), {}};
}

struct CommandResult {
  int status;
  std::string output;
};

CommandResult run_cli(const std::string& args) {
  const char* cli = std::getenv("MOEBAL_CLI");
  REQUIRE_MESSAGE(cli != nullptr, "MOEBAL_CLI is not set");
  const std::string cmd = std::string(cli) + " " + args + " 2>&1";
  std::unique_ptr<FILE, int (*)(FILE*)> pipe(popen(cmd.c_str(), "r"), pclose);
  REQUIRE(pipe);
  std::string out;
  std::array<char, 512> buf;
  while (std::fgets(buf.data(), buf.size(), pipe.get())) out += buf.data();
  const int raw = pclose(pipe.release());
  return {WEXITSTATUS(raw), out};
}

}  // namespace

TEST_CASE("experiment config") {
  const auto c = ExperimentConfig::from_text(kTiny);
  CHECK(c.steps == 12);
  CHECK(c.model.d_model == 8);
  CHECK(c.seeds == std::vector<std::uint64_t>{1});

  CHECK_THROWS_AS(ExperimentConfig::from_text("stepz = 3\n"), ConfigError);
  CHECK_THROWS_AS(ExperimentConfig::from_text("steps = three\n"), ConfigError);
  CHECK_THROWS_AS(ExperimentConfig::from_text("steps = 3\nsteps = 4\n"), ConfigError);
  CHECK_THROWS_AS(ExperimentConfig::from_text("seeds = \n"), ConfigError);

  const auto back = ExperimentConfig::from_text(format_key_values(c.to_key_values()));
  CHECK(back.to_key_values() == c.to_key_values());

  const auto s = ExperimentConfig::from_text("seed = 7\n");
  CHECK(s.seeds == std::vector<std::uint64_t>{7});

  SUBCASE("softmax gate defaults to the proportional rule") {
    const auto soft = ExperimentConfig::from_text("gate = softmax\n");
    CHECK(soft.model.update_rule == UpdateRule::proportional);
    CHECK(soft.model.update_rate == 1e-3);
    const auto explicit_sign = ExperimentConfig::from_text("gate = softmax\nupdate_rule = sign\n");
    CHECK(explicit_sign.model.update_rule == UpdateRule::sign);
    CHECK(ExperimentConfig::from_text("").model.update_rule == UpdateRule::sign);
  }
}

TEST_CASE("corpus generation and ingestion") {
  CorpusSpec spec;
  spec.size = 5000;
  CHECK(gen_corpus(spec) == gen_corpus(spec));
  auto other = spec;
  other.seed = 2;
  CHECK(gen_corpus(spec) != gen_corpus(other));
  for (auto t : gen_corpus(spec)) CHECK((t >= 0 && t < 32));

  TempDir dir;
  {
    std::ofstream f(dir / "bytes.bin", std::ios::binary);
    for (int i = 0; i < 1234; ++i) f.put(static_cast<char>(i * 7));
  }
  CorpusSpec file;
  file.kind = CorpusKind::file;
  file.path = dir / "bytes.bin";
  const auto tokens = gen_corpus(file);
  CHECK(tokens.size() == 1234);
  CHECK(tokens[3] == 21);
  CHECK(tokens[100] == (700 & 0xFF));
  write_byte_corpus(tokens, dir / "copy.bin");
  CHECK(slurp(dir / "copy.bin") == slurp(dir / "bytes.bin"));

  file.path = dir / "missing.bin";
  CHECK_THROWS_AS(gen_corpus(file), IoError);

  const auto split = split_corpus(tokens, 0.25);
  CHECK(split.train.size() + split.validation.size() == tokens.size());
  CHECK(split.validation.back() == tokens.back());
}

TEST_CASE("batch sampler is deterministic") {
  std::vector<std::int32_t> stream(500);
  for (std::size_t i = 0; i < stream.size(); ++i) stream[i] = static_cast<std::int32_t>(i % 13);
  BatchSampler a(stream, 8, 4, 5), b(stream, 8, 4, 5);
  for (int i = 0; i < 10; ++i) {
    const auto x = a.next(), y = b.next();
    CHECK(x.tokens == y.tokens);
    CHECK(x.tokens.size() == 4 * 9);
  }
  CHECK_THROWS_AS(BatchSampler(std::vector<std::int32_t>(8), 8, 1, 0), ContractError);
}

TEST_CASE("run outputs") {
  TempDir dir;
  auto cfg = ExperimentConfig::from_text(kTiny);

  SUBCASE("zero steps") {
    cfg.steps = 0;
    const auto r = run_experiment(cfg, 1, dir / "zero");
    CHECK(r.records.empty());
    const auto metrics = parse_csv(slurp(dir / "zero/metrics.csv"));
    CHECK(metrics.rows.empty());
    CHECK(metrics.header.front() == "step");
    const auto loaded = load_checkpoint(dir / "zero/checkpoint.bin");
    ModelConfig mc = cfg.model;
    mc.seed = 1;
    const MoEModel fresh(mc);
    const auto a = loaded.parameters(), b = fresh.parameters();
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i)
      CHECK(std::vector<double>(a[i].tensor.data().begin(), a[i].tensor.data().end()) ==
            std::vector<double>(b[i].tensor.data().begin(), b[i].tensor.data().end()));
  }

  SUBCASE("files and summary") {
    cfg.model.strategy = RoutingStrategy::loss_free;
    cfg.dump_bias = true;
    const auto r = run_experiment(cfg, 3, dir / "lf");
    CHECK(r.records.size() == 12);
    const auto text = slurp(dir / "lf/metrics.csv");
    CHECK(text.rfind("# moebal-metrics v1\n", 0) == 0);
    const auto t = parse_csv(text);
    CHECK(t.header == std::vector<std::string>{"step", "lm_loss", "aux_loss", "maxvio_batch", "bias_min",
                                               "bias_max", "maxvio_layer1"});
    REQUIRE(t.rows.size() == 12);
    for (std::size_t i = 0; i < 12; ++i) CHECK(t.rows[i][0] == static_cast<double>(i));
    CHECK(t.rows[5][1] == r.records[5].lm_loss);  // shortest round-trip formatting

    const auto j = nlohmann::json::parse(slurp(dir / "lf/summary.json"));
    CHECK(j["perplexity"].get<double>() == r.summary.perplexity);
    CHECK(j["maxvio_global"].get<double>() == r.summary.maxvio_global);
    CHECK(j["strategy"] == "loss-free");
    CHECK(fs::exists(dir / "lf/timing.csv"));
    CHECK(parse_csv(slurp(dir / "lf/bias.csv")).rows.size() == 12 * 4);
    CHECK(r.summary.computation_batch_curve.front().window == 1);
  }

  SUBCASE("unwritable output") {
    { std::ofstream(dir / "blocker") << "x"; }
    CHECK_THROWS_AS(run_experiment(cfg, 1, dir / "blocker/run"), IoError);
  }
}

TEST_CASE("determinism across repeats and thread counts") {
  TempDir dir;
  auto cfg = ExperimentConfig::from_text(kTiny);
  cfg.model.strategy = RoutingStrategy::expert_choice;
  cfg.model.ec_chunk_size = 4;
  cfg.model.ec_shuffle = true;
  std::vector<std::function<RunResult()>> jobs;
  for (int i = 0; i < 4; ++i) {
    const auto d = dir / ("r" + std::to_string(i));
    jobs.push_back([cfg, d, i] { return run_experiment(cfg, 1 + i % 2, d); });
  }
  run_jobs(jobs, 1);
  const auto m0 = slurp(dir / "r0/metrics.csv"), c0 = slurp(dir / "r0/checkpoint.bin");
  const auto m1 = slurp(dir / "r1/metrics.csv");
  CHECK(m0 == slurp(dir / "r2/metrics.csv"));
  CHECK(c0 == slurp(dir / "r2/checkpoint.bin"));
  CHECK(m0 != m1);
  run_jobs(jobs, 3);
  CHECK(m0 == slurp(dir / "r0/metrics.csv"));
  CHECK(c0 == slurp(dir / "r0/checkpoint.bin"));
  CHECK(m1 == slurp(dir / "r3/metrics.csv"));
}

TEST_CASE("sweeps") {
  TempDir dir;
  auto cfg = ExperimentConfig::from_text(kTiny);
  cfg.seeds = {1, 2};

  SUBCASE("u = 0 reproduces vanilla") {
    const auto sweep = sweep_update_rate(cfg, {0.0, 1e-2}, dir / "u");
    for (std::size_t s = 0; s < 2; ++s) {
      const auto vanilla = run_experiment(cfg, cfg.seeds[s], "");
      const auto& zero = sweep.runs[0][s];
      REQUIRE(zero.records.size() == vanilla.records.size());
      for (std::size_t i = 0; i < zero.records.size(); ++i) {
        CHECK(zero.records[i].lm_loss == vanilla.records[i].lm_loss);
        CHECK(zero.records[i].maxvio_batch == vanilla.records[i].maxvio_batch);
      }
    }
    const auto table = parse_csv(slurp(dir / "u/sweep_u.csv"));
    CHECK(table.rows.size() == 4);
    const auto curves = parse_csv(slurp(dir / "u/sweep_u_curves.csv"));
    CHECK(curves.header == std::vector<std::string>{"step", "u=0", "u=0.01"});
    CHECK(fs::exists(dir / "u/sweep_u.svg"));
  }
  SUBCASE("alpha sweep sets the strategy") {
    const auto sweep = sweep_alpha(cfg, {0.0, 1e-2}, dir / "a");
    CHECK(sweep.runs[1][0].summary.strategy == RoutingStrategy::aux_loss);
    CHECK(sweep.runs[0][0].records[3].aux_loss == 0.0);
    CHECK(sweep.runs[1][0].records[3].aux_loss > 0.0);
  }
  SUBCASE("chunk probe files") {
    const auto probe = chunk_probe(cfg, {{0, false}, {4, true}}, dir / "cp");
    CHECK(probe.final_loss.size() == 2);
    const auto t = parse_csv(slurp(dir / "cp/chunk4_shuffle.csv"));
    CHECK(t.header == std::vector<std::string>{"seed", "step", "loss"});
    CHECK(t.rows.size() == 2 * 12);
    CHECK(fs::exists(dir / "cp/chunk0_noshuffle.csv"));
  }
}

TEST_CASE("windows") {
  std::vector<TrainRecord> recs(20);
  for (std::size_t i = 0; i < 20; ++i) recs[i].maxvio_batch = static_cast<double>(i);
  auto mv = [](const TrainRecord& r) { return r.maxvio_batch; };
  CHECK(window_mean(recs, 0.0, 0.1, mv) == 0.5);
  CHECK(window_mean(recs, 0.75, 1.0, mv) == 17.0);
  CHECK(window_mean(recs, 0.0, 0.01, mv) == 0.0);

  EvalResult e;
  e.sample_loads = {{{4, 0}, {0, 4}, {4, 0}, {0, 4}, {3, 1}}};
  const auto curve = computation_batch_curve(e);
  REQUIRE(curve.size() == 3);
  CHECK(curve[0].window == 1);
  CHECK(curve[0].maxvio == doctest::Approx((1 + 1 + 1 + 1 + 0.5) / 5.0));
  CHECK(curve[1].window == 2);
  CHECK(curve[1].maxvio == 0.0);
  CHECK(curve[2].window == 4);
}

TEST_CASE("plot parse-back") {
  TempDir dir;
  {
    std::ofstream f(dir / "m.csv");
    f << "# comment\nstep,loss_a,loss_b,loss_c\n0,3,4,5\n1,2.5,3.5,4\n2,2,3,3.5\n";
  }
  plot_csv({dir / "m.csv"}, "step", "", dir / "m.svg");
  const auto svg = slurp(dir / "m.svg");
  const std::regex poly("<polyline data-series=\"([^\"]*)\"[^>]*points=\"([^\"]*)\"");
  std::vector<std::string> names;
  for (auto it = std::sregex_iterator(svg.begin(), svg.end(), poly); it != std::sregex_iterator(); ++it) {
    names.push_back((*it)[1]);
    CHECK(std::count((*it)[2].first, (*it)[2].second, ',') == 3);
  }
  CHECK(names == std::vector<std::string>{"loss_a", "loss_b", "loss_c"});
  std::smatch m;
  REQUIRE(std::regex_search(svg, m, std::regex("class=\"x-label\"[^>]*>([^<]*)<")));
  CHECK(m[1] == "step");

  {
    std::ofstream f(dir / "n.csv");
    f << "step,loss\n0,1\n1,2\n";
  }
  CHECK_THROWS_AS(plot_csv({dir / "m.csv", dir / "n.csv"}, "step", "loss_a", dir / "bad.svg"), ContractError);
  CHECK_THROWS_AS(plot_csv({dir / "m.csv", dir / "n.csv"}, "step", "", dir / "x.svg"), ContractError);
  CHECK_THROWS_AS(read_csv(dir / "none.csv"), IoError);
}

TEST_CASE("command line") {
  TempDir dir;
  {
    const auto r = run_cli("leakage-bound --k 2 --experts 16 --layers 9");
    CHECK(r.status == 0);
    CHECK(r.output.find("bound_bits_per_token=50.53") != std::string::npos);
  }
  {
    const auto r = run_cli("leakage-channel --experts 16 --k 2 --tokens 64 --message 10110001");
    CHECK(r.status == 0);
    CHECK(r.output.find("received=10110001 errors=0") != std::string::npos);
  }
  CHECK(run_cli("maxvio --counts 2,1,1,0").output == "1\n");
  {
    std::ofstream(dir / "cfg.txt") << kTiny << "seeds = 1,2\n";
    const auto r = run_cli("train --config " + (dir / "cfg.txt") + " --seed 4 --strategy loss-free --out " + dir.path.string());
    CHECK(r.status == 0);
    CHECK(fs::exists(dir / "run/seed4/metrics.csv"));
    CHECK(!fs::exists(dir / "run/seed1"));
    const auto e = run_cli("eval --config " + (dir / "cfg.txt") + " " + (dir / "run/seed4/checkpoint.bin"));
    CHECK(e.status == 0);
    CHECK(nlohmann::json::parse(e.output)["perplexity"].get<double>() > 1.0);
    CHECK(run_cli("plot " + (dir / "run/seed4/metrics.csv") + " --out " + (dir / "p.svg")).status == 0);
  }
  {
    const auto r = run_cli("gen-corpus --size 777 --seed 3 --out " + (dir / "c.bin"));
    CHECK(r.status == 0);
    CHECK(fs::file_size(dir / "c.bin") == 777);
  }

  // Failures: nonzero status, one line, "error: <kind>: <reason>".
  const std::regex one_line("error: [a-z]+: [^\n]+\n");
  for (const auto& args : {std::string("train --config ") + (dir / "nope.txt"),
                           std::string("train --strategy greedy"),
                           std::string("leakage-channel --experts 16 --k 2 --tokens 64 --bits 200"),
                           std::string("leakage-bound --k 16 --experts 16"),
                           std::string("maxvio --counts 0,0"),
                           std::string("frobnicate")}) {
    const auto r = run_cli(args);
    INFO(args << " -> " << r.output);
    CHECK(r.status != 0);
    CHECK(std::regex_match(r.output, one_line));
  }
  {
    std::ofstream(dir / "typo.txt") << "stpes = 3\n";
    const auto r = run_cli("train --config " + (dir / "typo.txt"));
    CHECK(r.output.rfind("error: config: ", 0) == 0);
    CHECK(r.output.find("stpes") != std::string::npos);
  }
}
