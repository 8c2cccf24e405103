#pragma once

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "cvt/checkpoint.hpp"
#include "cvt/data_stream.hpp"
#include "cvt/evaluation.hpp"
#include "cvt/image_folder.hpp"
#include "cvt/model.hpp"
#include "cvt/trainer.hpp"

namespace cvt {

inline const std::vector<std::string>& known_methods() {
  static const std::vector<std::string> m{"cvt", "cvt_no_fc", "cvt_scl", "cvt_no_dual", "sgd_baseline", "er_baseline"};
  return m;
}

struct ExperimentConfig {
  std::string dataset = "synthetic-10";
  std::uint64_t data_seed = 2022;
  int train_per_class = 500;
  int test_per_class = 100;
  int num_tasks = 5;
  std::string method = "cvt";
  std::vector<std::string> protocols{"task_free", "task_aware"};
  std::vector<std::uint64_t> seeds{0, 1, 2};
  std::string output_dir = "results";
  bool save_checkpoints = true;
  TrainConfig train;
  CvtConfig model;

  void validate() const {
    if (seeds.empty()) throw ConfigError("experiment: seeds must not be empty");
    if (std::find(known_methods().begin(), known_methods().end(), method) == known_methods().end()) {
      throw ConfigError("experiment: unknown method '" + method + "'");
    }
    if (protocols.empty()) throw ConfigError("experiment: at least one protocol is required");
    for (const auto& p : protocols) parse_protocol(p);
    if (num_tasks < 1) throw ConfigError("experiment: num_tasks must be positive");
    if (train_per_class < 1 || test_per_class < 1) throw ConfigError("experiment: per-class counts must be positive");
    if (output_dir.empty()) throw ConfigError("experiment: output_dir must not be empty");
    train.validate();
    model.validate();
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ExperimentConfig, dataset, data_seed, train_per_class,
                                                test_per_class, num_tasks, method, protocols, seeds, output_dir,
                                                save_checkpoints, train, model)

/// Parses a JSON config, mapping every parse or type failure to ConfigError.
inline ExperimentConfig parse_experiment_config(const std::string& text) {
  ExperimentConfig cfg;
  try {
    cfg = nlohmann::json::parse(text).get<ExperimentConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  return cfg;
}

inline ExperimentConfig load_experiment_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("config: cannot open '" + path + "'");
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_experiment_config(ss.str());
}

/// Training configuration realising a named method on top of `base`.
inline TrainConfig method_train_config(const std::string& method, TrainConfig base) {
  Ablation& a = base.ablation;
  a = Ablation{};
  if (method == "cvt") {
  } else if (method == "cvt_no_fc") {
    a.no_fc = true;
  } else if (method == "cvt_scl") {
    a.scl_instead_of_fc = true;
  } else if (method == "cvt_no_dual") {
    a.no_dual_classifier = true;
  } else if (method == "er_baseline") {
    a.no_fc = true;
    a.no_dual_classifier = true;
  } else if (method == "sgd_baseline") {
    a.no_fc = true;
    a.no_dual_classifier = true;
    base.buffer_capacity = 0;
  } else {
    throw ConfigError("unknown method '" + method + "'");
  }
  return base;
}

/// Trainable parameters the method actually uses (an unused injection head
/// or focus bank is not counted).
template <class T>
long method_parameter_count(CvtModel<T>& model, const TrainConfig& tc) {
  long n = 0;
  for (auto* p : model.parameters()) {
    if (!p->trainable) continue;
    if (tc.ablation.no_dual_classifier && p->name.starts_with("head.injection")) continue;
    if (!tc.uses_focuses() && p->name == "focuses") continue;
    n += long(p->value.size());
  }
  return n;
}

/// "synthetic-10", or "folder:<path>" for a directory of per-class PNGs.
inline Dataset load_dataset(const ExperimentConfig& cfg) {
  if (cfg.dataset == "synthetic-10") return make_synthetic10(cfg.train_per_class, cfg.test_per_class, cfg.data_seed);
  if (cfg.dataset.starts_with("folder:")) return load_image_folder(cfg.dataset.substr(7), cfg.model.image_size);
  throw ConfigError("unknown dataset '" + cfg.dataset + "'");
}

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;  // standard deviation over the seeds, n in the denominator
};

inline MeanStd mean_std(const std::vector<double>& v) {
  if (v.empty()) throw StructuralError("mean_std: no values");
  MeanStd r;
  for (double x : v) r.mean += x;
  r.mean /= double(v.size());
  if (v.size() > 1) {
    double ss = 0.0;
    for (double x : v) ss += (x - r.mean) * (x - r.mean);
    r.std = std::sqrt(ss / double(v.size()));
  }
  return r;
}

/// A_i and F_i after every boundary, each from the rows seen so far.
inline nlohmann::json per_boundary(const AccuracyMatrix& m) {
  nlohmann::json out = nlohmann::json::array();
  for (std::size_t i = 1; i <= m.tasks(); ++i) {
    const auto prefix = m.prefix(i);
    const auto f = forgetting(prefix);
    out.push_back({{"task", i}, {"A_i", overall_accuracy(prefix)}, {"F_i", f ? nlohmann::json(*f) : nlohmann::json()}});
  }
  return out;
}

inline std::string matrix_csv(const AccuracyMatrix& m) {
  std::ostringstream os;
  os << "after_task";
  for (std::size_t t = 0; t < m.tasks(); ++t) os << ",task_" << t + 1;
  os << '\n';
  os << std::setprecision(10);
  for (std::size_t i = 0; i < m.tasks(); ++i) {
    os << i + 1;
    for (std::size_t t = 0; t < m.tasks(); ++t) {
      os << ',';
      if (t <= i) os << m.at(i, t);
    }
    os << '\n';
  }
  return os.str();
}

namespace detail {

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot write '" + path.string() + "'");
  f << text;
}

inline nlohmann::json mean_std_json(const std::vector<double>& v) {
  const auto ms = mean_std(v);
  return {{"mean", ms.mean}, {"std", ms.std}, {"values", v}};
}

inline std::string fmt(double v, int digits = 2) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

}  // namespace detail

struct SeedResult {
  std::uint64_t seed = 0;
  std::map<Protocol, AccuracyMatrix> matrices;
};

/// Trains and evaluates one seed, writing its result files under `dir`.
/// A TrainingAbort propagates after abort.json and the completed boundaries
/// have been written.
inline SeedResult run_seed(const ExperimentConfig& cfg, const Dataset& data, std::uint64_t seed,
                           const std::filesystem::path& dir, long* num_parameters = nullptr) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  TrainConfig tc = method_train_config(cfg.method, cfg.train);
  tc.seed = seed;
  CvtConfig mc = cfg.model;
  mc.num_classes = data.num_classes;
  mc.in_channels = data.channels;
  mc.image_size = data.height;

  const auto split = make_task_splits(data, cfg.num_tasks, seed);
  detail::write_text(dir / "split.json", split_manifest(split).dump(2) + "\n");

  CvtModel<float> model(mc, seed);
  if (num_parameters != nullptr) *num_parameters = method_parameter_count(model, tc);
  Trainer<float> trainer(model, tc);
  auto stream = stream_batches(data, split, tc.stream_batch_size, seed);

  SeedResult result;
  result.seed = seed;
  std::vector<Protocol> protocols;
  for (const auto& p : cfg.protocols) protocols.push_back(parse_protocol(p));
  for (auto p : protocols) result.matrices[p] = AccuracyMatrix();

  nlohmann::json resolved = cfg;
  resolved["train"] = tc;
  resolved["model"] = mc;

  auto write_results = [&]() {
    for (auto p : protocols) {
      const auto& m = result.matrices[p];
      nlohmann::json j{{"protocol", to_string(p)},
                       {"seed", seed},
                       {"method", cfg.method},
                       {"num_parameters", method_parameter_count(model, tc)},
                       {"accuracy_matrix", m.rows()},
                       {"per_boundary", per_boundary(m)},
                       {"config", resolved}};
      j["overall_accuracy"] = m.tasks() > 0 ? nlohmann::json(overall_accuracy(m)) : nlohmann::json();
      const auto f = m.tasks() > 0 ? forgetting(m) : std::nullopt;
      j["forgetting"] = f ? nlohmann::json(*f) : nlohmann::json();
      detail::write_text(dir / ("results_" + to_string(p) + ".json"), j.dump(2) + "\n");
      detail::write_text(dir / ("accuracy_" + to_string(p) + ".csv"), matrix_csv(m));
    }
  };

  std::ofstream log(dir / "train_log.jsonl", std::ios::binary);
  std::vector<int> seen;
  auto on_boundary = [&](const TaskSpec& task, std::size_t index) {
    seen.insert(seen.end(), task.class_ids.begin(), task.class_ids.end());
    for (auto p : protocols) {
      std::vector<double> row;
      for (std::size_t t = 0; t <= index; ++t) {
        row.push_back(evaluate_task(model, task_test_set(data, split[t]), p, seen, split[t].class_ids));
      }
      result.matrices[p].add_row(std::move(row));
    }
    if (cfg.save_checkpoints) {
      fs::create_directories(dir / "checkpoints");
      save_checkpoint((dir / "checkpoints" / ("task_" + std::to_string(task.task_id) + ".ckpt")).string(), model,
                      &trainer.buffer());
    }
    write_results();
  };

  try {
    trainer.run_stream(stream, on_boundary, &log);
  } catch (const TrainingAbort& e) {
    nlohmann::json abort{{"seed", seed},
                         {"component", e.component()},
                         {"message", e.what()},
                         {"optimizer_steps", trainer.optimizer_steps()},
                         {"completed_tasks", result.matrices.begin()->second.tasks()}};
    detail::write_text(dir / "abort.json", abort.dump(2) + "\n");
    write_results();
    throw;
  }
  return result;
}

/// Aggregate of every completed seed for one method.
inline nlohmann::json summarize(const ExperimentConfig& cfg, const std::vector<SeedResult>& results,
                                long num_parameters) {
  nlohmann::json s{{"method", cfg.method}, {"num_parameters", num_parameters}, {"num_tasks", cfg.num_tasks}};
  nlohmann::json seeds = nlohmann::json::array();
  for (const auto& r : results) seeds.push_back(r.seed);
  s["seeds"] = seeds;
  nlohmann::json protocols = nlohmann::json::object();
  for (const auto& name : cfg.protocols) {
    const Protocol p = parse_protocol(name);
    std::vector<double> a_final, f_final;
    std::vector<std::vector<double>> a_curve, f_curve;
    for (const auto& r : results) {
      const auto& m = r.matrices.at(p);
      if (m.tasks() == 0) continue;
      a_final.push_back(overall_accuracy(m));
      if (auto f = forgetting(m)) f_final.push_back(*f);
      for (std::size_t i = 1; i <= m.tasks(); ++i) {
        if (a_curve.size() < i) a_curve.resize(i);
        if (f_curve.size() < i) f_curve.resize(i);
        const auto prefix = m.prefix(i);
        a_curve[i - 1].push_back(overall_accuracy(prefix));
        if (auto f = forgetting(prefix)) f_curve[i - 1].push_back(*f);
      }
    }
    if (a_final.empty()) continue;
    nlohmann::json entry{{"A_T", detail::mean_std_json(a_final)}};
    entry["F_T"] = f_final.empty() ? nlohmann::json() : detail::mean_std_json(f_final);
    nlohmann::json curve = nlohmann::json::array();
    for (std::size_t i = 0; i < a_curve.size(); ++i) {
      nlohmann::json point{{"task", i + 1}, {"A_i", mean_std(a_curve[i]).mean}};
      point["F_i"] = f_curve[i].empty() ? nlohmann::json() : nlohmann::json(mean_std(f_curve[i]).mean);
      curve.push_back(point);
    }
    entry["curve"] = curve;
    protocols[name] = entry;
  }
  s["protocols"] = protocols;
  return s;
}

// ---------------------------------------------------------------------------
// Reporting

inline std::string format_mean_std(const nlohmann::json& ms) {
  if (ms.is_null()) return "n/a";
  return detail::fmt(ms.at("mean").get<double>()) + " ± " + detail::fmt(ms.at("std").get<double>());
}

/// One markdown table row per summary: method, #paras, task-free A_T,
/// task-aware A_T, F_T (task-free when available).
inline std::string summary_table(const std::vector<nlohmann::json>& summaries) {
  std::ostringstream os;
  os << "| method | #paras (M) | task-free A_T | task-aware A_T | F_T |\n";
  os << "|---|---|---|---|---|\n";
  for (const auto& s : summaries) {
    const auto& p = s.at("protocols");
    auto cell = [&](const char* protocol, const char* key) {
      return p.contains(protocol) ? format_mean_std(p.at(protocol).at(key)) : std::string("n/a");
    };
    const char* f_protocol = p.contains("task_free") ? "task_free" : "task_aware";
    os << "| " << s.at("method").get<std::string>() << " | "
       << detail::fmt(double(s.at("num_parameters").get<long>()) / 1e6, 3) << " | " << cell("task_free", "A_T")
       << " | " << cell("task_aware", "A_T") << " | " << cell(f_protocol, "F_T") << " |\n";
  }
  return os.str();
}

struct Curve {
  std::string label;
  std::vector<std::pair<int, double>> points;  // (task boundary, value)
};

/// Per-boundary curves of `metric` ("A_i" or "F_i") under one protocol.
/// Undefined points (F_1) are left out.
inline std::vector<Curve> build_curves(const std::vector<nlohmann::json>& summaries, const std::string& protocol,
                                       const std::string& metric) {
  std::vector<Curve> out;
  for (const auto& s : summaries) {
    const auto& p = s.at("protocols");
    if (!p.contains(protocol)) continue;
    Curve c;
    c.label = s.at("method").get<std::string>();
    for (const auto& pt : p.at(protocol).at("curve")) {
      if (!pt.at(metric).is_null()) c.points.emplace_back(pt.at("task").get<int>(), pt.at(metric).get<double>());
    }
    out.push_back(std::move(c));
  }
  return out;
}

/// Line chart of the curves as a standalone SVG document.
inline std::string render_svg(const std::vector<Curve>& curves, const std::string& title, const std::string& y_label) {
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf"};
  const double W = 560, H = 360, left = 60, right = 150, top = 40, bottom = 50;
  int max_task = 1;
  double lo = 0.0, hi = 100.0;
  for (const auto& c : curves) {
    for (const auto& [t, v] : c.points) {
      max_task = std::max(max_task, t);
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
  }
  auto x_of = [&](int t) { return left + (max_task == 1 ? 0.5 : double(t - 1) / (max_task - 1)) * (W - left - right); };
  auto y_of = [&](double v) { return top + (hi - v) / (hi - lo) * (H - top - bottom); };
  std::ostringstream os;
  os << std::fixed << std::setprecision(1);
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << W / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">" << title << "</text>\n";
  os << "<line x1=\"" << left << "\" y1=\"" << H - bottom << "\" x2=\"" << W - right << "\" y2=\"" << H - bottom << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << left << "\" y1=\"" << top << "\" x2=\"" << left << "\" y2=\"" << H - bottom << "\" stroke=\"black\"/>\n";
  for (int t = 1; t <= max_task; ++t) {
    os << "<text x=\"" << x_of(t) << "\" y=\"" << H - bottom + 18 << "\" text-anchor=\"middle\">" << t << "</text>\n";
  }
  for (int k = 0; k <= 4; ++k) {
    const double v = lo + (hi - lo) * k / 4.0;
    os << "<text x=\"" << left - 8 << "\" y=\"" << y_of(v) + 4 << "\" text-anchor=\"end\">" << v << "</text>\n";
    os << "<line x1=\"" << left << "\" y1=\"" << y_of(v) << "\" x2=\"" << W - right << "\" y2=\"" << y_of(v) << "\" stroke=\"#ddd\"/>\n";
  }
  os << "<text x=\"" << (left + W - right) / 2 << "\" y=\"" << H - 12 << "\" text-anchor=\"middle\">tasks learned</text>\n";
  os << "<text x=\"16\" y=\"" << (top + H - bottom) / 2 << "\" transform=\"rotate(-90 16 " << (top + H - bottom) / 2
     << ")\" text-anchor=\"middle\">" << y_label << "</text>\n";
  for (std::size_t i = 0; i < curves.size(); ++i) {
    const char* color = colors[i % 7];
    const auto& c = curves[i];
    os << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
    for (const auto& [t, v] : c.points) os << x_of(t) << "," << y_of(v) << " ";
    os << "\"/>\n";
    for (const auto& [t, v] : c.points) {
      os << "<circle cx=\"" << x_of(t) << "\" cy=\"" << y_of(v) << "\" r=\"3\" fill=\"" << color << "\"/>\n";
    }
    const double ly = top + 16.0 * double(i);
    os << "<line x1=\"" << W - right + 10 << "\" y1=\"" << ly << "\" x2=\"" << W - right + 30 << "\" y2=\"" << ly
       << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
    os << "<text x=\"" << W - right + 35 << "\" y=\"" << ly + 4 << "\">" << c.label << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

/// Summaries found directly in `dir` or one level below it, sorted by method.
inline std::vector<nlohmann::json> collect_summaries(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw ConfigError("report: '" + dir.string() + "' is not a directory");
  std::vector<fs::path> files;
  if (fs::exists(dir / "summary.json")) files.push_back(dir / "summary.json");
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_directory() && fs::exists(e.path() / "summary.json")) files.push_back(e.path() / "summary.json");
  }
  std::vector<nlohmann::json> out;
  for (const auto& f : files) {
    std::ifstream in(f);
    try {
      out.push_back(nlohmann::json::parse(in));
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("report: malformed '" + f.string() + "': " + e.what());
    }
  }
  std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) {
    return a.at("method").template get<std::string>() < b.at("method").template get<std::string>();
  });
  return out;
}

/// Writes report.md plus accuracy and forgetting SVG curves per protocol.
/// Returns the paths written.
inline std::vector<std::filesystem::path> emit_report(const std::filesystem::path& dir) {
  const auto summaries = collect_summaries(dir);
  if (summaries.empty()) throw ConfigError("report: no summary.json under '" + dir.string() + "'");
  std::vector<std::filesystem::path> written;
  std::ostringstream md;
  md << "# Results\n\n" << summary_table(summaries) << "\nValues are mean ± standard deviation over seeds (n in the denominator).\n";
  for (const std::string protocol : {"task_free", "task_aware"}) {
    const auto acc = build_curves(summaries, protocol, "A_i");
    if (acc.empty()) continue;
    const auto forget = build_curves(summaries, protocol, "F_i");
    const auto acc_path = dir / ("accuracy_" + protocol + ".svg");
    const auto forget_path = dir / ("forgetting_" + protocol + ".svg");
    detail::write_text(acc_path, render_svg(acc, "Accuracy on tasks seen so far (" + protocol + ")", "A_i (%)"));
    detail::write_text(forget_path, render_svg(forget, "Average forgetting (" + protocol + ")", "F_i (%)"));
    md << "\n![" << protocol << " accuracy](" << acc_path.filename().string() << ")\n";
    md << "![" << protocol << " forgetting](" << forget_path.filename().string() << ")\n";
    written.push_back(acc_path);
    written.push_back(forget_path);
  }
  detail::write_text(dir / "report.md", md.str());
  written.push_back(dir / "report.md");
  return written;
}

/// Runs every seed of the configured method into `<output_dir>/<method>/`,
/// then writes summary.json and summary.md there.
inline nlohmann::json run_experiment(const ExperimentConfig& cfg) {
  namespace fs = std::filesystem;
  cfg.validate();
  const Dataset data = load_dataset(cfg);
  const fs::path root = fs::path(cfg.output_dir) / cfg.method;
  fs::create_directories(root);
  std::vector<SeedResult> results;
  long num_parameters = 0;
  auto finish = [&]() {
    auto s = summarize(cfg, results, num_parameters);
    detail::write_text(root / "summary.json", s.dump(2) + "\n");
    detail::write_text(root / "summary.md", summary_table({s}));
    return s;
  };
  for (auto seed : cfg.seeds) {
    try {
      results.push_back(run_seed(cfg, data, seed, root / ("seed_" + std::to_string(seed)), &num_parameters));
    } catch (const TrainingAbort&) {
      finish();
      throw;
    }
  }
  return finish();
}

}  // namespace cvt
