#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <sstream>

#include <json.hpp>

#include "mist/answer.hpp"
#include "mist/cli.hpp"
#include "mist/harness.hpp"
#include "mist/rng.hpp"
#include "mist/selection.hpp"

namespace py = pybind11;
using nlohmann::json;

namespace {

// Dicts cross the boundary as JSON text; the Python side parses it.
mist::TrainConfig config_of(const std::string& text) { return mist::train_config_from_json(json::parse(text)); }

py::array_t<double> to_array(const mist::Tensor& t) {
  py::array_t<double> a(std::vector<py::ssize_t>(t.shape().begin(), t.shape().end()));
  std::copy(t.values().begin(), t.values().end(), a.mutable_data());
  return a;
}

mist::Tensor from_array(const py::array_t<double, py::array::c_style | py::array::forcecast>& a) {
  std::vector<std::size_t> shape(a.shape(), a.shape() + a.ndim());
  return mist::Tensor(shape, std::vector<double>(a.data(), a.data() + a.size()));
}

std::string log_json(const mist::MetricsLog& log) {
  std::ostringstream csv;
  mist::write_metrics_csv(log, csv);
  return json{{"accuracy", log.accuracy ? json(*log.accuracy) : json(nullptr)},
              {"hit_rate", log.hit_rate ? json(*log.hit_rate) : json(nullptr)},
              {"eval_loss", log.eval_loss},
              {"eval_samples", log.eval_samples},
              {"macs", log.macs},
              {"metrics_csv", csv.str()}}
      .dump();
}

py::dict sample_dict(const mist::SynthSample& s) {
  py::dict d;
  d["video"] = to_array(s.video.x);
  d["question"] = to_array(s.question.w);
  d["answers"] = to_array(s.answers.a);
  d["label"] = s.label;
  d["task"] = mist::to_string(s.planted.kind);
  d["answer_segment"] = s.planted.answer_segment;
  return d;
}

}  // namespace

PYBIND11_MODULE(_mist, m) {
  m.doc() = "Iterative spatial-temporal attention for video QA on synthetic features";

  m.def("default_config", [] { return mist::to_json(mist::TrainConfig{}).dump(); });
  m.def("tiny_config", [] { return mist::to_json(mist::tiny_gradcheck_config()).dump(); });
  m.def("resolve_config", [](const std::string& c) { return mist::to_json(config_of(c)).dump(); });

  m.def("synth", [](const std::string& c, std::uint64_t seed) {
    return sample_dict(mist::generate_synthetic(mist::synth_config(config_of(c)), seed));
  });

  m.def("gumbel_topk",
        [](const std::vector<double>& scores, std::size_t k, bool with_replacement, double temperature,
           std::uint64_t seed) {
          const mist::Tensor s = mist::Tensor::vector(scores);
          mist::Tensor values = mist::Tensor::matrix(scores.size(), 1);
          for (std::size_t i = 0; i < scores.size(); ++i) values.at(i, 0) = static_cast<double>(i);
          mist::SelectorMode mode;
          mode.kind = with_replacement ? mist::SelectorKind::gumbel_with_replacement
                                       : mist::SelectorKind::gumbel_without_replacement;
          mode.temperature = temperature;
          mist::Rng rng(seed);
          return mist::gumbel_topk(s, values, k, mode, rng).indices;
        },
        py::arg("scores"), py::arg("k"), py::arg("with_replacement") = true, py::arg("temperature") = 1.0,
        py::arg("seed") = 0);

  m.def("score_answers", [](const py::array_t<double>& x, const py::array_t<double>& bank, bool cosine) {
    return to_array(mist::score_answers(from_array(x), mist::AnswerBank{from_array(bank), {}}, cosine));
  }, py::arg("x"), py::arg("bank"), py::arg("cosine") = false);

  m.def("cost", [](const std::string& c) {
    const mist::ModelConfig mc = mist::model_config(config_of(c));
    json j = mist::to_json(mist::cost_estimate(mc));
    const mist::MeasuredCost measured = mist::measure_cost(mc);
    j["measured_macs"] = measured.macs;
    j["measured_sites"] = measured.attention_sites;
    return j.dump();
  });

  m.def("grad_check", [](const std::string& c) {
    const mist::GradCheckReport r = mist::model_grad_check(config_of(c));
    return json{{"max_rel_error", r.max_rel_error}, {"worst_param_path", r.worst_param_path}, {"checked", r.checked}}
        .dump();
  });

  m.def("train", [](const std::string& c, const std::optional<std::filesystem::path>& params_path) {
    const mist::TrainConfig tc = config_of(c);
    mist::TrainResult r;
    {
      py::gil_scoped_release release;
      r = mist::train(tc);
    }
    if (params_path) mist::save_params(r.params, tc, *params_path);
    return log_json(r.log);
  }, py::arg("config"), py::arg("params_path") = std::nullopt);

  m.def("evaluate", [](const std::filesystem::path& params_path, std::size_t n, std::uint64_t seed) {
    const mist::ParamFile pf = mist::load_params(params_path);
    return log_json(mist::evaluate(pf.params, pf.config, n, seed));
  });

  m.def("trace", [](const std::filesystem::path& params_path, std::uint64_t sample_seed) {
    const mist::ParamFile pf = mist::load_params(params_path);
    const mist::ModelConfig mc = mist::model_config(pf.config);
    const mist::SynthSample s = mist::generate_synthetic(mist::synth_config(pf.config), sample_seed);
    mist::ForwardOptions opts;
    opts.training = false;
    const mist::MistOutput o = mist::mist_forward(mist::view_of(s), pf.params, mc, opts);
    return mist::trace_to_json(o.trace).dump();
  });

  m.def("validate_trace", [](const std::string& trace, const std::string& c) {
    return mist::validate_trace_json(json::parse(trace), mist::model_config(config_of(c)));
  });

  m.def("save_features", [](const py::array_t<double>& video, const py::array_t<double>& question,
                            const py::array_t<double>& answers, const std::filesystem::path& path) {
    mist::VideoFeatures v;
    v.x = from_array(video);
    mist::save_features(v, mist::QuestionFeatures{from_array(question)}, mist::AnswerBank{from_array(answers), {}},
                        path);
  });

  m.def("load_features", [](const std::filesystem::path& path) {
    const mist::FeatureBundle b = mist::load_features(path);
    py::dict d;
    d["video"] = to_array(b.video.x);
    d["question"] = to_array(b.question.w);
    d["answers"] = to_array(b.answers.a);
    return d;
  });

  m.def("run_cli", [](const std::vector<std::string>& args) {
    std::ostringstream out, err;
    const int code = mist::run_cli(args, out, err);
    return py::make_tuple(code, out.str(), err.str());
  });

  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const std::invalid_argument& e) {
      PyErr_SetString(PyExc_ValueError, e.what());
    } catch (const std::out_of_range& e) {
      PyErr_SetString(PyExc_IndexError, e.what());
    }
  });
}
