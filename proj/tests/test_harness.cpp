#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>

#include "mist/answer.hpp"
#include "mist/harness.hpp"
#include "support.hpp"

using namespace mist;
using namespace mist::testing;
namespace fs = std::filesystem;

namespace {

// Multiply-accumulates of one forward pass at the default dims, from an
// independent closed-form evaluation.
struct FrozenCost {
  ModelKind kind;
  Ablation ablation;
  std::uint64_t macs;
};
const FrozenCost kFrozenCosts[] = {
    {ModelKind::mist, Ablation::none, 3043968},         {ModelKind::meanpool, Ablation::none, 1152},
    {ModelKind::trans_frame, Ablation::none, 307328},   {ModelKind::trans_patch, Ablation::none, 19968128},
    {ModelKind::divided_sta, Ablation::none, 6299776},  {ModelKind::mist, Ablation::no_ss, 24766592},
    {ModelKind::mist, Ablation::no_rs, 4147840},        {ModelKind::mist, Ablation::no_sta, 504448},
};
const double kDenseOverMistQuadratic = 10.778061224489797;

TrainConfig quick_config() {
  TrainConfig tc = tiny_gradcheck_config();
  tc.noise_std = 0.1;
  tc.steps = 12;
  tc.batch_size = 3;
  tc.eval_samples = 10;
  tc.eval_every = 5;
  return tc;
}

std::string metrics_csv(const MetricsLog& log) {
  std::ostringstream os;
  write_metrics_csv(log, os);
  return os.str();
}

fs::path temp_file(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "mist_test_harness";
  fs::create_directories(dir);
  return dir / name;
}

class ThreadsEnv {
 public:
  explicit ThreadsEnv(const char* value) {
    if (const char* old = std::getenv("MIST_THREADS")) saved_ = old;
    ::setenv("MIST_THREADS", value, 1);
  }
  ~ThreadsEnv() {
    if (saved_) {
      ::setenv("MIST_THREADS", saved_->c_str(), 1);
    } else {
      ::unsetenv("MIST_THREADS");
    }
  }

 private:
  std::optional<std::string> saved_;
};

}  // namespace

TEST_SUITE("config") {
  TEST_CASE("JSON round-trip preserves every field") {
    TrainConfig tc;
    tc.kind = ModelKind::divided_sta;
    tc.K = 4;
    tc.frames = 12;
    tc.noise_std = 0.25;
    tc.region_selector = SelectorKind::gumbel_with_replacement;
    tc.question_pool = PoolMode::first_token;
    tc.task = TaskKind::multi_event_order;
    tc.seed = 123456789012345ull;
    const nlohmann::json j = to_json(tc);
    CHECK(to_json(train_config_from_json(j)) == j);
    CHECK(j.size() == 39);
  }

  TEST_CASE("absent keys take defaults") {
    const TrainConfig tc = train_config_from_json(nlohmann::json{{"layers", 1}});
    CHECK(tc.layers == 1);
    CHECK(tc.K == 8);
    CHECK(tc.frames == 32);
    CHECK(tc.steps == 1500);
    CHECK(model_config(tc).T == 4);
  }

  TEST_CASE("unknown and ill-typed keys are all named") {
    try {
      train_config_from_json(nlohmann::json{{"Kk", 3}, {"topk", 2}, {"noise_std", "high"}, {"layers", -1}});
      FAIL("accepted a bad config");
    } catch (const std::invalid_argument& e) {
      const std::string msg = e.what();
      for (const char* key : {"Kk", "topk", "noise_std", "layers"}) CHECK_MESSAGE(msg.find(key) != std::string::npos, key);
    }
  }

  TEST_CASE("semantic errors name the key") {
    auto message = [](nlohmann::json j) {
      try {
        train_config_from_json(j);
      } catch (const std::invalid_argument& e) {
        return std::string(e.what());
      }
      return std::string();
    };
    CHECK(message({{"frames", 30}}).find("frames") != std::string::npos);
    CHECK(message({{"learning_rate", 0.0}}).find("learning_rate") != std::string::npos);
    CHECK(message({{"D", 30}}).find("divisible") != std::string::npos);
    CHECK_FALSE(message({{"top_j", 17}}).empty());
  }

  TEST_CASE("nonparametric selection coerces to one layer") {
    TrainConfig tc;
    tc.segment_selector = SelectorKind::nonparametric;
    tc.layers = 2;
    CHECK_NOTHROW(validate(tc));
    CHECK(model_config(tc).layers == 1);
  }

  TEST_CASE("temperature anneals linearly from start to end") {
    TrainConfig tc;
    tc.steps = 11;
    CHECK(temperature_at(tc, 0) == 1.0);
    CHECK(std::abs(temperature_at(tc, 5) - 0.75) < 1e-15);
    CHECK(temperature_at(tc, 10) == 0.5);
    CHECK(temperature_at(tc, 50) == 0.5);
  }

  TEST_CASE("config files: bad JSON and missing files") {
    const fs::path p = temp_file("bad.json");
    std::ofstream(p) << "{\"K\": 8,";
    CHECK_THROWS_AS(load_train_config(p), std::invalid_argument);
    CHECK_THROWS_AS(load_train_config(temp_file("absent.json")), std::runtime_error);
  }
}

TEST_SUITE("baselines") {
  TEST_CASE("meanpool on constant features with identity projection returns the constant") {
    ModelConfig c;
    c.kind = ModelKind::meanpool;
    c.K = 2;
    c.T = 2;
    c.N = 3;
    c.D = 4;
    c.M = 2;
    c.A = 2;
    c.heads = 2;
    c.top_k = 1;
    c.top_j = 1;
    ParamStore p = init_params(c, 1);
    p.at("pos.temporal").fill(0.0);
    Tensor eye = Tensor::matrix(4, 4);
    for (std::size_t i = 0; i < 4; ++i) eye.at(i, i) = 1.0;
    p.at("base.pool_proj.weight") = eye;
    SynthSample s;
    s.video.x = Tensor({2, 2, 3, 4}, 0.625);
    s.question.w = Tensor({2, 4}, 1.0);
    s.answers.a = Tensor({2, 4}, 1.0);
    const Tensor out = baseline_forward(ModelKind::meanpool, view_of(s), p, c);
    for (double v : out.values()) CHECK(v == 0.625);
  }

  TEST_CASE("trans_frame and trans_patch attend over frame or patch tokens plus words") {
    Gen g(90);
    ModelConfig c;
    c.K = 2;
    c.T = 3;
    c.N = 4;
    c.D = 8;
    c.M = 2;
    c.A = 3;
    c.heads = 2;
    c.top_k = 1;
    c.top_j = 1;
    for (bool words : {true, false}) {
      c.words_in_attention = words;
      for (ModelKind kind : {ModelKind::trans_frame, ModelKind::trans_patch}) {
        c.kind = kind;
        const MeasuredCost m = measure_cost(c);
        const std::size_t visual = kind == ModelKind::trans_frame ? 6 : 24;
        CHECK(m.attention_sites == std::vector<std::size_t>{visual + (words ? 2 : 0)});
      }
    }
  }

  TEST_CASE("divided_sta with K=T=1 and a silent temporal block equals trans_patch") {
    Gen g(91);
    ModelConfig c;
    c.K = 1;
    c.T = 1;
    c.N = 5;
    c.D = 8;
    c.M = 3;
    c.A = 3;
    c.heads = 2;
    c.top_k = 1;
    c.top_j = 1;
    c.words_in_attention = false;
    c.kind = ModelKind::divided_sta;
    ParamStore sta = init_params(c, 2);
    for (auto& [name, t] : sta) {
      if (name.rfind("base.temporal.", 0) == 0) t.fill(0.0);
    }
    ParamStore dense;
    for (const auto& [name, t] : sta) {
      if (name.rfind("base.spatial.mha", 0) == 0) {
        dense["base.mha" + name.substr(16)] = t;
      } else if (name.rfind("base.spatial.ln", 0) == 0) {
        dense["base.ln" + name.substr(15)] = t;
      } else if (name.rfind("base.temporal.", 0) != 0) {
        dense[name] = t;
      }
    }
    SynthSample s;
    s.video.x = g.tensor({1, 1, 5, 8});
    s.question.w = g.tensor({3, 8});
    s.answers.a = g.tensor({3, 8});
    const Tensor a = baseline_forward(ModelKind::divided_sta, view_of(s), sta, c);
    const Tensor b = baseline_forward(ModelKind::trans_patch, view_of(s), dense, c);
    CHECK(max_abs_diff(a, b) < 1e-12);
  }

  TEST_CASE("divided_sta mixes same-position patches across frames") {
    Gen g(92);
    ModelConfig c;
    c.kind = ModelKind::divided_sta;
    c.K = 2;
    c.T = 2;
    c.N = 3;
    c.D = 4;
    c.M = 2;
    c.A = 2;
    c.heads = 2;
    c.top_k = 1;
    c.top_j = 1;
    const ParamStore p = init_params(c, 3);
    SynthSample s;
    s.video.x = g.tensor({2, 2, 3, 4});
    s.question.w = g.tensor({2, 4});
    s.answers.a = g.tensor({2, 4});
    const Tensor base = baseline_forward(ModelKind::divided_sta, view_of(s), p, c);
    // Swapping two patches in one frame changes their temporal partners.
    SynthSample t = s;
    for (std::size_t d = 0; d < 4; ++d) std::swap(t.video.x[(0 * 3 + 0) * 4 + d], t.video.x[(0 * 3 + 1) * 4 + d]);
    CHECK(max_abs_diff(base, baseline_forward(ModelKind::divided_sta, view_of(t), p, c)) > 1e-9);
    const MeasuredCost m = measure_cost(c);
    CHECK(m.attention_sites == std::vector<std::size_t>{4, 4, 4, 3, 3, 3, 3});
  }

  TEST_CASE("mist is not a baseline and ablations need mist") {
    ModelConfig c;
    Tape tape;
    ParamStore p = init_params(c, 0);
    ParamBinder b(tape, p);
    SynthSample s = generate_synthetic(SynthConfig{}, 0);
    CHECK_THROWS_AS(ad::baseline_forward(b, c, view_of(s)), std::invalid_argument);
  }
}

TEST_SUITE("cost") {
  TEST_CASE("default-dim estimates match the frozen closed forms") {
    for (const FrozenCost& f : kFrozenCosts) {
      ModelConfig c;
      c.kind = f.kind;
      c.ablation = f.ablation;
      CHECK_MESSAGE(cost_estimate(c).total_macs == f.macs, to_string(f.kind), " ", to_string(f.ablation));
    }
  }

  TEST_CASE("mist attends over 112 tokens against 520 for dense patches") {
    ModelConfig c;
    const CostReport mist = cost_estimate(c);
    CHECK(mist.sites.size() == 2);
    CHECK(mist.sites[0].tokens == 112);
    c.kind = ModelKind::trans_patch;
    const CostReport dense = cost_estimate(c);
    CHECK(dense.sites[0].tokens == 520);
    CHECK(std::abs(static_cast<double>(dense.quadratic_macs) / mist.quadratic_macs - kDenseOverMistQuadratic) < 1e-12);
    CHECK(std::abs(mist.quadratic_ratio_vs_dense - 1.0 / kDenseOverMistQuadratic) < 1e-15);
    CHECK(mist.quadratic_ratio_vs_dense <= 1.0 / 8.0);
  }

  TEST_CASE("property: the estimate equals the instrumented count for random configs") {
    Gen g(93);
    for (int trial = 0; trial < 60; ++trial) {
      ModelConfig c;
      c.kind = static_cast<ModelKind>(g.size(0, 4));
      c.K = g.size(1, 4);
      c.T = g.size(1, 3);
      c.N = g.size(2, 5);
      c.heads = g.size(1, 2);
      c.D = c.heads * g.size(1, 4);
      c.M = g.size(1, 3);
      c.A = g.size(2, 4);
      c.layers = g.size(1, 3);
      c.top_k = g.size(1, 3);
      c.top_j = g.size(1, c.N);
      c.words_in_attention = g.size(0, 1) == 1;
      if (c.kind == ModelKind::mist) {
        c.ablation = static_cast<Ablation>(g.size(0, 3));
        if (g.size(0, 3) == 0) {
          c.segment_selector = SelectorKind::nonparametric;
          c.region_selector = SelectorKind::nonparametric;
          c.layers = 1;
          c.top_k = std::min(c.top_k, c.K);
        }
      }
      const CostReport est = cost_estimate(c);
      const MeasuredCost m = measure_cost(c);
      CHECK(est.total_macs == m.macs);
      std::vector<std::size_t> expected_sites;
      for (const AttentionSite& s : est.sites) expected_sites.insert(expected_sites.end(), s.count, s.tokens);
      std::vector<std::size_t> measured = m.attention_sites;
      std::sort(expected_sites.begin(), expected_sites.end());
      std::sort(measured.begin(), measured.end());
      CHECK(measured == expected_sites);
    }
  }

  TEST_CASE("report JSON carries the totals") {
    const nlohmann::json j = to_json(cost_estimate(ModelConfig{}));
    CHECK(j["total_macs"] == 3043968);
    CHECK(j["attention_sites"].size() == 2);
    CHECK(j["kind"] == "mist");
  }
}

TEST_SUITE("training") {
  TEST_CASE("same config and seed give a byte-identical metrics CSV") {
    const TrainConfig tc = quick_config();
    const TrainResult a = train(tc), b = train(tc);
    CHECK(metrics_csv(a.log) == metrics_csv(b.log));
    CHECK(a.params == b.params);
    TrainConfig other = tc;
    other.seed = 1;
    CHECK(metrics_csv(train(other).log) != metrics_csv(a.log));
  }

  TEST_CASE("worker count does not change results") {
    const TrainConfig tc = quick_config();
    std::string one, four;
    {
      ThreadsEnv env("1");
      one = metrics_csv(train(tc).log);
    }
    {
      ThreadsEnv env("4");
      four = metrics_csv(train(tc).log);
    }
    CHECK(one == four);
  }

  TEST_CASE("a config re-read from its own JSON reproduces the run") {
    const TrainConfig tc = quick_config();
    const TrainConfig back = train_config_from_json(nlohmann::json::parse(to_json(tc).dump()));
    CHECK(metrics_csv(train(tc).log) == metrics_csv(train(back).log));
  }

  TEST_CASE("metrics CSV layout") {
    TrainConfig tc = quick_config();
    std::vector<MetricsRow> seen;
    const TrainResult r = train(tc, [&](const MetricsRow& row) { seen.push_back(row); });
    CHECK(seen.size() == tc.steps);
    std::istringstream in(metrics_csv(r.log));
    std::string line;
    std::getline(in, line);
    CHECK(line == "step,loss,acc,hit_rate,mmacs");
    std::size_t n = 0;
    double last_macs = 0.0;
    while (std::getline(in, line)) {
      ++n;
      std::vector<std::string> cols;
      std::stringstream ss(line);
      for (std::string col; std::getline(ss, col, ',');) cols.push_back(col);
      if (line.back() == ',') cols.push_back("");
      REQUIRE(cols.size() == 5);
      CHECK(std::stoul(cols[0]) == n);
      const bool evaluated = n % 5 == 0 || n == tc.steps;
      CHECK(cols[2].empty() != evaluated);
      CHECK(cols[3].empty() != evaluated);
      const double macs = std::stod(cols[4]);
      CHECK(macs > last_macs);
      last_macs = macs;
    }
    CHECK(n == tc.steps);
    CHECK(r.log.accuracy.has_value());
  }

  TEST_CASE("the loss falls on the single-event task") {
    TrainConfig tc = quick_config();
    tc.steps = 150;
    tc.batch_size = 4;
    tc.eval_every = 0;
    tc.learning_rate = 3e-3;
    const TrainResult r = train(tc);
    double head = 0.0, tail = 0.0;
    for (std::size_t i = 0; i < 20; ++i) {
      head += r.log.rows[i].loss;
      tail += r.log.rows[r.log.rows.size() - 1 - i].loss;
    }
    CHECK(tail < head);
  }

  TEST_CASE("baselines and ablations train and report hit rate only with segment selection") {
    for (ModelKind kind : {ModelKind::meanpool, ModelKind::trans_frame, ModelKind::trans_patch, ModelKind::divided_sta}) {
      TrainConfig tc = quick_config();
      tc.kind = kind;
      tc.steps = 3;
      const TrainResult r = train(tc);
      CHECK(r.log.accuracy.has_value());
      CHECK_FALSE(r.log.hit_rate.has_value());
    }
    for (Ablation a : {Ablation::no_ss, Ablation::no_rs, Ablation::no_sta}) {
      TrainConfig tc = quick_config();
      tc.ablation = a;
      tc.steps = 3;
      CHECK(train(tc).log.hit_rate.has_value() == (a != Ablation::no_ss));
    }
  }

  TEST_CASE("evaluation") {
    const TrainConfig tc = quick_config();
    const ParamStore p = init_params(model_config(tc), 0);
    const MetricsLog a = evaluate(p, tc, 30, 5), b = evaluate(p, tc, 30, 5);
    CHECK(a.accuracy == b.accuracy);
    CHECK(a.eval_loss == b.eval_loss);
    CHECK(*a.accuracy >= 0.0);
    CHECK(*a.accuracy <= 1.0);
    CHECK(evaluate(p, tc, 0, 5).rows.empty());
    CHECK_FALSE(evaluate(p, tc, 0, 5).accuracy.has_value());
  }

  TEST_CASE("planted hit checks every layer's segments") {
    PlantedInfo planted;
    planted.answer_segment = 3;
    AttentionTrace trace(2);
    trace[0].temporal_selected = {1, 1};
    trace[1].temporal_selected = {2, 0};
    CHECK_FALSE(planted_hit(trace, planted));
    trace[1].temporal_selected = {2, 3};
    CHECK(planted_hit(trace, planted));
  }

  TEST_CASE("MIST_THREADS parsing") {
    {
      ThreadsEnv env("3");
      CHECK(worker_threads() == 3);
    }
    {
      ThreadsEnv env("0");
      CHECK_THROWS_AS(worker_threads(), std::invalid_argument);
    }
    {
      ThreadsEnv env("two");
      CHECK_THROWS_AS(worker_threads(), std::invalid_argument);
    }
  }
}

TEST_SUITE("gradient check") {
  TEST_CASE("tiny config passes for every architecture") {
    for (ModelKind kind : {ModelKind::mist, ModelKind::meanpool, ModelKind::trans_frame, ModelKind::trans_patch, ModelKind::divided_sta}) {
      TrainConfig tc = tiny_gradcheck_config();
      tc.kind = kind;
      const GradCheckReport r = model_grad_check(tc);
      CHECK_MESSAGE(r.max_rel_error < 1e-4, to_string(kind), " worst ", r.worst_param_path);
      CHECK(r.checked > 0);
    }
    for (Ablation a : {Ablation::no_ss, Ablation::no_rs, Ablation::no_sta}) {
      TrainConfig tc = tiny_gradcheck_config();
      tc.ablation = a;
      const GradCheckReport r = model_grad_check(tc);
      CHECK_MESSAGE(r.max_rel_error < 1e-4, to_string(a), " worst ", r.worst_param_path);
    }
  }

  TEST_CASE("property: mist passes across seeds and selector kinds") {
    for (std::uint64_t seed = 0; seed < 6; ++seed) {
      TrainConfig tc = tiny_gradcheck_config();
      tc.seed = seed;
      tc.layers = seed % 2 ? 1 : 2;
      tc.segment_selector = seed % 3 ? SelectorKind::gumbel_with_replacement : SelectorKind::gumbel_without_replacement;
      const GradCheckReport r = model_grad_check(tc);
      CHECK_MESSAGE(r.max_rel_error < 1e-4, "seed ", seed, " worst ", r.worst_param_path);
    }
  }
}

TEST_SUITE("sweep") {
  TEST_CASE("axes parse, L is an alias, and bad values are rejected before any training") {
    CHECK(sweep_axis_from_string("L") == SweepAxis::layers);
    CHECK(sweep_axis_from_string("top_j") == SweepAxis::top_j);
    CHECK_THROWS(sweep_axis_from_string("depth"));
    TrainConfig tc = quick_config();
    std::size_t rows = 0;
    CHECK_THROWS_AS(sweep(tc, SweepAxis::top_j, {1, 99}, {0}, [&](const SweepRow&) { ++rows; }), std::invalid_argument);
    CHECK(rows == 0);
    CHECK(with_axis(tc, SweepAxis::layers, 3).layers == 3);
  }

  TEST_CASE("rows cover every value and seed in order") {
    TrainConfig tc = quick_config();
    tc.steps = 2;
    const auto rows = sweep(tc, SweepAxis::layers, {1, 2}, {0, 7});
    REQUIRE(rows.size() == 4);
    CHECK(rows[0].value == 1);
    CHECK(rows[1].seed == 7);
    CHECK(rows[3].value == 2);
    std::ostringstream os;
    write_sweep_csv(rows, os);
    std::istringstream in(os.str());
    std::string line;
    std::getline(in, line);
    CHECK(line == "axis,value,seed,loss,acc,hit_rate,mmacs");
    std::getline(in, line);
    CHECK(line.rfind("layers,1,0,", 0) == 0);
  }

  TEST_CASE("median") {
    CHECK(median({3.0, 1.0, 2.0}) == 2.0);
    CHECK(median({4.0, 1.0}) == 2.5);
    CHECK_THROWS(median({}));
  }
}

TEST_SUITE("parameter files") {
  TEST_CASE("round-trip is exact and carries the config") {
    TrainConfig tc = quick_config();
    tc.layers = 1;
    const ParamStore p = init_params(model_config(tc), 4);
    const fs::path path = temp_file("params.bin");
    save_params(p, tc, path);
    const ParamFile f = load_params(path);
    CHECK(f.params == p);
    CHECK(to_json(f.config) == to_json(tc));
  }

  TEST_CASE("fault injection") {
    const TrainConfig tc = quick_config();
    const fs::path good = temp_file("good.bin"), bad = temp_file("bad.bin");
    save_params(init_params(model_config(tc), 4), tc, good);
    std::ifstream in(good, std::ios::binary);
    const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    auto write = [&](const std::string& b) { std::ofstream(bad, std::ios::binary) << b; };

    write("X" + bytes.substr(1));
    CHECK_THROWS_WITH_AS(load_params(bad), doctest::Contains("bad magic"), std::runtime_error);
    write(bytes.substr(0, bytes.size() - 8));
    CHECK_THROWS_WITH_AS(load_params(bad), doctest::Contains("shorter"), std::runtime_error);
    write(bytes + "12345678");
    CHECK_THROWS_WITH_AS(load_params(bad), doctest::Contains("longer"), std::runtime_error);
    std::string nan = bytes;
    const double q = NAN;
    std::memcpy(nan.data() + nan.size() - 8, &q, 8);
    write(nan);
    CHECK_THROWS_WITH_AS(load_params(bad), doctest::Contains("non-finite"), std::runtime_error);
  }
}
