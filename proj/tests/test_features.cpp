#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <json.hpp>

#include "mist/features.hpp"
#include "support.hpp"

using namespace mist;
using namespace mist::testing;
namespace fs = std::filesystem;

namespace {

VideoFeatures random_video(Gen& g, std::size_t K, std::size_t T, std::size_t N, std::size_t D) {
  VideoFeatures v;
  v.x = g.tensor({K, T, N, D});
  return v;
}

fs::path temp_file(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "mist_test_features";
  fs::create_directories(dir);
  return dir / name;
}

std::vector<unsigned char> read_bytes(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

void write_bytes(const fs::path& p, const std::vector<unsigned char>& bytes) {
  std::ofstream os(p, std::ios::binary | std::ios::trunc);
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

bool bit_equal(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() && std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

// Reads the label back from planted metadata alone.
std::size_t label_oracle(const PlantedInfo& p) {
  if (p.kind == TaskKind::single_event) return p.events.at(0).class_id;
  const PlantedEvent* cue = nullptr;
  for (const auto& e : p.events) {
    if (e.class_id == *p.cue_class) cue = &e;
  }
  for (const auto& e : p.events) {
    if (e.segment > cue->segment) return e.class_id;
  }
  throw std::logic_error("no event after the cue");
}

// Nearest prototype of a noiseless video row.
std::size_t nearest_prototype(const Tensor& protos, const double* row) {
  std::vector<double> dots(protos.rows());
  for (std::size_t a = 0; a < protos.rows(); ++a) {
    for (std::size_t d = 0; d < protos.cols(); ++d) dots[a] += protos.at(a, d) * row[d];
  }
  return argmax_oracle(dots);
}

}  // namespace

TEST_SUITE("pool_hierarchy") {
  TEST_CASE("constant features pool to the constant") {
    VideoFeatures v;
    v.x = Tensor({3, 2, 4, 5}, 1.75);
    const PooledVideo p = pool_hierarchy(v, PoolMode::mean);
    CHECK(p.frames.shape() == std::vector<std::size_t>{3, 2, 5});
    CHECK(p.segments.shape() == std::vector<std::size_t>{3, 5});
    for (double x : p.frames.values()) CHECK(x == 1.75);
    for (double x : p.segments.values()) CHECK(x == 1.75);
  }

  TEST_CASE("K=1 T=2 N=2 D=1 patches [[1,3],[5,7]]") {
    VideoFeatures v;
    v.x = Tensor({1, 2, 2, 1}, {1.0, 3.0, 5.0, 7.0});
    const PooledVideo p = pool_hierarchy(v, PoolMode::mean);
    CHECK(p.frames[0] == 2.0);
    CHECK(p.frames[1] == 6.0);
    CHECK(p.segments[0] == 4.0);
  }

  TEST_CASE("random K=2 T=3 N=4 matches nested-loop averaging") {
    Gen g(21);
    const VideoFeatures v = random_video(g, 2, 3, 4, 5);
    const PooledVideo p = pool_hierarchy(v, PoolMode::mean);
    for (std::size_t k = 0; k < 2; ++k) {
      for (std::size_t d = 0; d < 5; ++d) {
        double seg = 0.0;
        for (std::size_t t = 0; t < 3; ++t) {
          double frame = 0.0;
          for (std::size_t n = 0; n < 4; ++n) frame += v.x[((k * 3 + t) * 4 + n) * 5 + d];
          frame /= 4.0;
          CHECK(std::abs(p.frames[(k * 3 + t) * 5 + d] - frame) < 1e-15);
          seg += frame / 3.0;
        }
        CHECK(std::abs(p.segments[k * 5 + d] - seg) < 1e-15);
      }
    }
  }

  TEST_CASE("first_token takes the CLS patch per frame and averages frames") {
    Gen g(22);
    VideoFeatures v = random_video(g, 2, 3, 4, 2);
    v.has_cls_patch = true;
    const PooledVideo p = pool_hierarchy(v, PoolMode::first_token);
    for (std::size_t f = 0; f < 6; ++f) {
      for (std::size_t d = 0; d < 2; ++d) CHECK(p.frames[f * 2 + d] == v.x[(f * 4) * 2 + d]);
    }
    for (std::size_t d = 0; d < 2; ++d) {
      const double seg = (p.frames[0 + d] + p.frames[2 + d] + p.frames[4 + d]) / 3.0;
      CHECK(std::abs(p.segments[d] - seg) < 1e-15);
    }
  }

  TEST_CASE("first_token without a CLS slot is rejected") {
    Gen g(23);
    CHECK_THROWS_AS(pool_hierarchy(random_video(g, 1, 1, 2, 2), PoolMode::first_token), std::invalid_argument);
  }

  TEST_CASE("non-finite features are rejected") {
    VideoFeatures v;
    v.x = Tensor({1, 1, 2, 2}, 0.0);
    v.x[3] = NAN;
    CHECK_THROWS_AS(pool_hierarchy(v, PoolMode::mean), std::invalid_argument);
  }
}

TEST_SUITE("pool_question") {
  TEST_CASE("a single word is returned under both modes") {
    const QuestionFeatures q{Tensor({1, 3}, {0.5, -1.0, 2.0})};
    CHECK(pool_question(q, PoolMode::mean) == Tensor::vector({0.5, -1.0, 2.0}));
    CHECK(pool_question(q, PoolMode::first_token) == Tensor::vector({0.5, -1.0, 2.0}));
  }

  TEST_CASE("rows [1,0],[0,1] average to [0.5,0.5]") {
    const QuestionFeatures q{Tensor({2, 2}, {1.0, 0.0, 0.0, 1.0})};
    CHECK(pool_question(q, PoolMode::mean) == Tensor::vector({0.5, 0.5}));
  }

  TEST_CASE("random M=6 first_token equals row 0 exactly") {
    Gen g(24);
    const QuestionFeatures q{g.tensor({6, 7})};
    const Tensor out = pool_question(q, PoolMode::first_token);
    for (std::size_t d = 0; d < 7; ++d) CHECK(out[d] == q.w.at(0, d));
  }
}

TEST_SUITE("add_positions") {
  TEST_CASE("zero table is the identity") {
    Gen g(25);
    const VideoFeatures v = random_video(g, 2, 3, 2, 4);
    const VideoFeatures out = add_positions(v, PositionTable{Tensor({7, 4}, 0.0), Tensor({3, 4}, 0.0)});
    CHECK(out.x == v.x);
    CHECK(out.positions_added);
  }

  TEST_CASE("zero features take their frame's table row") {
    Gen g(26);
    VideoFeatures v;
    v.x = Tensor({2, 3, 2, 4}, 0.0);
    const PositionTable table{g.tensor({7, 4}), Tensor({3, 4}, 0.0)};
    const VideoFeatures out = add_positions(v, table);
    for (std::size_t k = 0; k < 2; ++k) {
      for (std::size_t t = 0; t < 3; ++t) {
        for (std::size_t n = 0; n < 2; ++n) {
          for (std::size_t d = 0; d < 4; ++d) {
            CHECK(out.x[(((k * 3 + t) * 2) + n) * 4 + d] == table.temporal.at(k * 3 + t + 1, d));
          }
        }
      }
    }
  }

  TEST_CASE("equal frames at different indices differ by the table-row difference") {
    Gen g(27);
    VideoFeatures v;
    v.x = Tensor({2, 2, 1, 3}, 0.4);
    const PositionTable table{g.tensor({5, 3}), Tensor({3, 3}, 0.0)};
    const VideoFeatures out = add_positions(v, table);
    // Frame (0,1) vs frame (1,0): table rows 2 and 3.
    for (std::size_t d = 0; d < 3; ++d) {
      const double diff = out.x[(1 * 1) * 3 + d] - out.x[(2 * 1) * 3 + d];
      CHECK(std::abs(diff - (table.temporal.at(2, d) - table.temporal.at(3, d))) < 1e-15);
    }
  }

  TEST_CASE("a second application is refused") {
    Gen g(28);
    const PositionTable table{g.tensor({3, 2}), Tensor({3, 2}, 0.0)};
    const VideoFeatures once = add_positions(random_video(g, 1, 2, 2, 2), table);
    CHECK_THROWS_AS(add_positions(once, table), std::logic_error);
  }

  TEST_CASE("table row count must be K*T+1") {
    Gen g(29);
    CHECK_THROWS_AS(add_positions(random_video(g, 2, 2, 1, 2), PositionTable{Tensor({4, 2}), Tensor({3, 2})}),
                    std::invalid_argument);
  }
}

TEST_SUITE("feature files") {
  TEST_CASE("property: generated samples round-trip bit-exactly") {
    for (std::uint64_t seed = 0; seed < 40; ++seed) {
      SynthConfig cfg;
      cfg.task = seed % 2 ? TaskKind::multi_event_order : TaskKind::single_event;
      const SynthSample s = generate_synthetic(cfg, seed);
      const fs::path p = temp_file("roundtrip.mistfeat");
      save_features(s.video, s.question, s.answers, p);
      const FeatureBundle b = load_features(p);
      CHECK(bit_equal(b.video.x, s.video.x));
      CHECK(bit_equal(b.question.w, s.question.w));
      CHECK(bit_equal(b.answers.a, s.answers.a));
      CHECK(b.answers.labels == s.answers.labels);
      CHECK_FALSE(b.video.has_cls_patch);
    }
  }

  TEST_CASE("single-precision payloads of random data round-trip bit-exactly, CLS flags included") {
    Gen g(30);
    VideoFeatures v = random_video(g, 2, 3, 4, 5);
    for (double& x : v.x.values()) x = static_cast<float>(x);
    v.has_cls_patch = true;
    QuestionFeatures q{g.tensor({3, 5})};
    for (double& x : q.w.values()) x = static_cast<float>(x);
    AnswerBank a{g.tensor({4, 5}), {}};
    for (double& x : a.a.values()) x = static_cast<float>(x);
    const fs::path p = temp_file("random.mistfeat");
    save_features(v, q, a, p);
    const FeatureBundle b = load_features(p);
    CHECK(bit_equal(b.video.x, v.x));
    CHECK(bit_equal(b.question.w, q.w));
    CHECK(bit_equal(b.answers.a, a.a));
    CHECK(b.video.has_cls_patch);
    CHECK_FALSE(b.video.has_cls_frame);
  }

  TEST_CASE("layout: magic, little-endian header length, JSON header, f32 payload") {
    const SynthSample s = generate_synthetic(SynthConfig{}, 3);
    const fs::path p = temp_file("layout.mistfeat");
    save_features(s.video, s.question, s.answers, p);
    const auto bytes = read_bytes(p);
    REQUIRE(bytes.size() > 12);
    CHECK(std::memcmp(bytes.data(), "MISTFEAT", 8) == 0);
    const std::uint32_t hlen = bytes[8] | (bytes[9] << 8) | (bytes[10] << 16) | (static_cast<std::uint32_t>(bytes[11]) << 24);
    const std::string header(bytes.begin() + 12, bytes.begin() + 12 + hlen);
    const auto j = nlohmann::json::parse(header);
    CHECK(j["version"] == 1);
    CHECK(j["dtype"] == "f32");
    CHECK(j["K"] == 8);
    CHECK(j["T"] == 4);
    CHECK(j["cls_patch"] == false);
    const std::size_t floats = 8 * 4 * 16 * 32 + 8 * 32 + 4 * 32;
    CHECK(bytes.size() == 12 + hlen + 4 * floats);
    float first;
    std::memcpy(&first, bytes.data() + 12 + hlen, 4);
    CHECK(static_cast<double>(first) == s.video.x[0]);
  }

  TEST_CASE("fault injection") {
    const SynthSample s = generate_synthetic(SynthConfig{}, 4);
    const fs::path good = temp_file("good.mistfeat"), bad = temp_file("bad.mistfeat");
    save_features(s.video, s.question, s.answers, good);
    const auto bytes = read_bytes(good);
    const std::uint32_t hlen = bytes[8] | (bytes[9] << 8) | (bytes[10] << 16) | (static_cast<std::uint32_t>(bytes[11]) << 24);

    SUBCASE("bad magic") {
      auto b = bytes;
      b[0] = 'X';
      write_bytes(bad, b);
      CHECK_THROWS_WITH_AS(load_features(bad), doctest::Contains("bad magic"), std::runtime_error);
    }
    SUBCASE("truncated payload") {
      auto b = bytes;
      b.resize(b.size() - 4);
      write_bytes(bad, b);
      CHECK_THROWS_WITH_AS(load_features(bad), doctest::Contains("length mismatch"), std::runtime_error);
    }
    SUBCASE("header declaring a different K") {
      auto j = nlohmann::json::parse(std::string(bytes.begin() + 12, bytes.begin() + 12 + hlen));
      j["K"] = 7;
      const std::string text = j.dump();
      std::vector<unsigned char> b(bytes.begin(), bytes.begin() + 8);
      for (int s = 0; s < 32; s += 8) b.push_back(static_cast<unsigned char>(text.size() >> s));
      b.insert(b.end(), text.begin(), text.end());
      b.insert(b.end(), bytes.begin() + 12 + hlen, bytes.end());
      write_bytes(bad, b);
      CHECK_THROWS_WITH_AS(load_features(bad), doctest::Contains("length mismatch"), std::runtime_error);
    }
    SUBCASE("non-finite payload value") {
      auto b = bytes;
      const float nan = NAN;
      std::memcpy(b.data() + 12 + hlen + 4 * 10, &nan, 4);
      write_bytes(bad, b);
      CHECK_THROWS_WITH_AS(load_features(bad), doctest::Contains("non-finite"), std::runtime_error);
    }
    SUBCASE("header length past the end") {
      auto b = bytes;
      b[11] = 0x7f;
      write_bytes(bad, b);
      CHECK_THROWS_AS(load_features(bad), std::runtime_error);
    }
    SUBCASE("missing file") { CHECK_THROWS_AS(load_features(temp_file("absent.mistfeat")), std::runtime_error); }
  }
}

TEST_SUITE("generate_synthetic") {
  TEST_CASE("prototypes are orthonormal and shared across samples") {
    SynthConfig cfg;
    const Tensor p = class_prototypes(cfg);
    for (std::size_t a = 0; a < cfg.A; ++a) {
      for (std::size_t b = 0; b < cfg.A; ++b) {
        double dot = 0.0;
        for (std::size_t d = 0; d < cfg.D; ++d) dot += p.at(a, d) * p.at(b, d);
        CHECK(dot == (a == b ? 1.0 : 0.0));
      }
    }
    CHECK(generate_synthetic(cfg, 1).answers.a == p);
    CHECK(generate_synthetic(cfg, 2).answers.a == p);
  }

  TEST_CASE("same seed gives identical samples, different seeds differ") {
    SynthConfig cfg;
    const SynthSample a = generate_synthetic(cfg, 9), b = generate_synthetic(cfg, 9), c = generate_synthetic(cfg, 10);
    CHECK(a.video.x == b.video.x);
    CHECK(a.question.w == b.question.w);
    CHECK(a.label == b.label);
    CHECK_FALSE(a.video.x == c.video.x);
  }

  TEST_CASE("noise_std = 0: every planted row equals its class prototype") {
    SynthConfig cfg;
    cfg.noise_std = 0.0;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      const SynthSample s = generate_synthetic(cfg, seed);
      const Tensor protos = class_prototypes(cfg);
      for (const auto& e : s.planted.events) {
        for (std::size_t t = 0; t < cfg.T; ++t) {
          for (std::size_t n : e.patches) {
            const double* row = s.video.x.data() + (((e.segment * cfg.T + t) * cfg.N) + n) * cfg.D;
            for (std::size_t d = 0; d < cfg.D; ++d) CHECK(row[d] == protos.at(e.class_id, d));
            CHECK(nearest_prototype(protos, row) == e.class_id);
          }
        }
      }
    }
  }

  TEST_CASE("multi_event_order with events in segments (2,5) answers with the segment-5 class") {
    SynthConfig cfg;
    cfg.task = TaskKind::multi_event_order;
    bool seen = false;
    for (std::uint64_t seed = 0; seed < 2000 && !seen; ++seed) {
      const SynthSample s = generate_synthetic(cfg, seed);
      const auto& ev = s.planted.events;
      if (ev[0].segment != 2 || ev[1].segment != 5) continue;
      seen = true;
      CHECK(ev[0].class_id == *s.planted.cue_class);
      CHECK(s.label == ev[1].class_id);
      CHECK(s.planted.answer_segment == 5);
    }
    CHECK(seen);
  }

  TEST_CASE("property: the metadata oracle reproduces every label and indices stay in bounds") {
    for (TaskKind kind : {TaskKind::single_event, TaskKind::multi_event_order}) {
      SynthConfig cfg;
      cfg.task = kind;
      for (std::uint64_t seed = 0; seed < 1000; ++seed) {
        const SynthSample s = generate_synthetic(cfg, seed);
        REQUIRE(s.label < cfg.A);
        REQUIRE(label_oracle(s.planted) == s.label);
        for (const auto& e : s.planted.events) {
          REQUIRE(e.segment < cfg.K);
          REQUIRE(e.class_id < cfg.A);
          for (std::size_t n : e.patches) REQUIRE(n < cfg.N);
        }
        if (kind == TaskKind::multi_event_order) REQUIRE(s.planted.events[0].segment != s.planted.events[1].segment);
      }
    }
  }

  TEST_CASE("property: random configs keep events and clutter on disjoint patches") {
    Gen g(31);
    for (int trial = 0; trial < 100; ++trial) {
      SynthConfig cfg;
      cfg.K = g.size(2, 6);
      cfg.T = g.size(1, 4);
      cfg.N = g.size(2, 10);
      cfg.D = g.size(4, 12);
      cfg.A = g.size(2, std::min<std::size_t>(cfg.D, 6));
      cfg.M = g.size(1, 5);
      cfg.event_patches = g.size(1, cfg.N / 2);
      cfg.clutter_patches = g.size(0, cfg.N - cfg.event_patches);
      cfg.task = trial % 2 ? TaskKind::multi_event_order : TaskKind::single_event;
      const SynthSample s = generate_synthetic(cfg, g.size(0, 1u << 30));
      CHECK(s.video.x.shape() == std::vector<std::size_t>{cfg.K, cfg.T, cfg.N, cfg.D});
      CHECK(s.question.w.shape() == std::vector<std::size_t>{cfg.M, cfg.D});
      CHECK(label_oracle(s.planted) == s.label);
      for (const auto& cl : s.planted.clutter) {
        for (const auto& e : s.planted.events) {
          if (e.segment != cl.segment) continue;
          for (std::size_t n : cl.patches) CHECK(std::find(e.patches.begin(), e.patches.end(), n) == e.patches.end());
          CHECK(cl.class_id != e.class_id);
        }
      }
    }
  }

  TEST_CASE("the multi-event question names the cue class") {
    SynthConfig cfg;
    cfg.task = TaskKind::multi_event_order;
    const SynthSample s = generate_synthetic(cfg, 5);
    const Tensor protos = class_prototypes(cfg);
    for (std::size_t d = 0; d < cfg.D; ++d) CHECK(s.question.w.at(0, d) == protos.at(*s.planted.cue_class, d));
  }

  TEST_CASE("A > D is rejected") {
    SynthConfig cfg;
    cfg.D = 3;
    cfg.A = 4;
    CHECK_THROWS_AS(generate_synthetic(cfg, 0), std::invalid_argument);
  }

  TEST_CASE("task kind names round-trip") {
    CHECK(task_kind_from_string(to_string(TaskKind::multi_event_order)) == TaskKind::multi_event_order);
    CHECK_THROWS(task_kind_from_string("order"));
  }
}
