// Acceptance checks, one PASS/FAIL line per criterion.
//
//   acceptance [--only <criterion>] [--out DIR]
//
// Exit status is 0 only when every selected criterion passes.

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>

#include "oracles.hpp"

using namespace cvt;
using cvt::testing::Md;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail += (detail.empty() ? "" : "; ") + std::string("violated: ") + what;
    }
  }
  void note(const std::string& what) { detail += (detail.empty() ? "" : "; ") + what; }
};

std::string num(double v, int digits = 3) {
  std::ostringstream os;
  os.precision(digits);
  os << v;
  return os.str();
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

// ---------------------------------------------------------------------------

Outcome loss_oracles() {
  Outcome o;
  std::mt19937_64 rng(1);
  double worst = 0.0;
  bool identical = true;
  for (int trial = 0; trial < 1000; ++trial) {
    const auto c = cvt::testing::random_contrastive_case(rng);
    const double fc = fc_loss<double>(c.z, c.y, c.focus, c.focus_class, {c.tau, c.mu}).value;
    worst = std::max(worst, std::abs(fc - cvt::testing::contrastive_oracle(c.z, c.y, c.focus, c.focus_class, c.tau, c.mu)));
    const double scl = scl_loss<double>(c.z, c.y, c.tau).value;
    worst = std::max(worst, std::abs(scl - cvt::testing::contrastive_oracle(c.z, c.y, Md::Zero(0, c.z.cols()), {},
                                                                            c.tau, 1.0)));
    const auto empty = fc_loss<double>(c.z, c.y, Md::Zero(0, c.z.cols()), {}, {c.tau, c.mu});
    const auto plain = scl_loss<double>(c.z, c.y, c.tau);
    identical = identical && empty.value == plain.value && empty.grad_z == plain.grad_z;
  }
  o.require(worst <= 1e-6, "oracle agreement within 1e-6");
  o.require(identical, "focal loss equals supervised loss without focuses");
  o.note("1000 batches, max |loss - oracle| = " + num(worst));
  return o;
}

Outcome gradients() {
  Outcome o;
  std::mt19937_64 rng(2);
  // focal loss w.r.t. embeddings and focuses
  double loss_err = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const auto c = cvt::testing::random_contrastive_case(rng);
    const auto loss = cvt::detail::contrastive<double>(c.z, c.y, c.focus, c.focus_class, c.tau, c.mu);
    auto value = [&](const Md& z, const Md& f) {
      return cvt::detail::contrastive<double>(z, c.y, f, c.focus_class, c.tau, c.mu).value;
    };
    for (int which = 0; which < 2; ++which) {
      const Md& analytic = which == 0 ? loss.grad_z : loss.grad_focuses;
      for (Eigen::Index i = 0; i < analytic.size(); ++i) {
        Md z = c.z, f = c.focus;
        double& x = (which == 0 ? z : f).data()[i];
        const double h = 1e-6;
        x += h;
        const double up = value(z, f);
        x -= 2 * h;
        const double down = value(z, f);
        const double n = (up - down) / (2 * h), a = analytic.data()[i];
        loss_err = std::max(loss_err, std::abs(a - n) / std::max({cvt::testing::kFloor, std::abs(a), std::abs(n)}));
      }
    }
  }
  o.require(loss_err <= 1e-4, "focal loss gradients within 1e-4");
  o.note("focal loss rel err " + num(loss_err));

  // external attention parameters
  double attn_err = 0.0;
  for (auto norm : {AttentionNorm::batch_norm, AttentionNorm::identity}) {
    std::mt19937_64 init(3);
    ExternalAttention<double> ea("ea", {8, 4, 2, 4}, init, norm);
    ea.attention_bias().value = cvt::testing::random_matrix(4, 8, rng, 0.5);
    const Md x = cvt::testing::random_matrix(8, 8, rng), w = cvt::testing::random_matrix(8, 1, rng);
    ParameterList<double> params{&ea.query().weight(), &ea.external_key(), &ea.attention_bias()};
    auto f = [&](bool backward) {
      ag::Tape<double> t;
      auto loss = ag::sum(ag::matmul(ea.forward(t.constant(x), {true, nullptr}).out, t.constant(w)));
      if (backward) t.backward(loss);
      return loss.scalar();
    };
    attn_err = std::max(attn_err, cvt::testing::max_parameter_error(params, f));
  }
  o.require(attn_err <= 1e-4, "attention parameter gradients within 1e-4");
  o.note("attention rel err " + num(attn_err));

  // total training objective through the whole network
  const auto c = cvt::testing::tiny_config();
  CvtModel<double> model(c, 8);
  TrainConfig tc;
  tc.tau = 0.5;
  Trainer<double> trainer(model, tc);
  const auto stream = cvt::testing::random_samples(3, c.num_classes, 3, c.image_size, rng);
  const auto memory = cvt::testing::random_samples(2, c.num_classes, 3, c.image_size, rng, 3);
  model.focus_bank().activate(labels_of(stream));
  auto f = [&](bool backward) {
    ag::Tape<double> tape;
    std::mt19937_64 views(2);
    auto obj = trainer.objective(tape, stream, memory, views);
    if (backward) tape.backward(obj.total);
    return obj.total.scalar();
  };
  const double net_err = cvt::testing::max_parameter_error(model.parameters(), f);
  o.require(net_err <= 1e-3, "total loss gradients within 1e-3");
  o.note("full network rel err " + num(net_err));
  return o;
}

Outcome attention() {
  Outcome o;
  std::mt19937_64 rng(4);
  double worst_sum = 0.0;
  for (auto norm : {AttentionNorm::batch_norm, AttentionNorm::identity}) {
    for (bool train : {true, false}) {
      std::mt19937_64 init(5);
      ExternalAttention<double> ea("ea", {8, 4, 2, 4}, init, norm);
      ag::Tape<double> t;
      const Md a = ea.forward(t.constant(cvt::testing::random_matrix(12, 8, rng, 2.0)), {train, nullptr})
                       .attention.value();
      for (Eigen::Index r = 0; r < a.rows(); ++r) {
        for (int h = 0; h < 2; ++h) {
          worst_sum = std::max(worst_sum, std::abs(a.row(r).segment(h * ea.slots(), ea.slots()).sum() - 1.0));
        }
      }
    }
  }
  o.require(worst_sum <= 1e-6, "rows sum to 1");

  std::mt19937_64 init(6);
  ExternalAttention<double> uniform("ea", {6, 4, 2, 3}, init, AttentionNorm::batch_norm);
  uniform.query().weight().value.setZero();
  uniform.query().bias().value.setZero();
  ag::Tape<double> t;
  const Md u = uniform.forward(t.constant(cvt::testing::random_matrix(6, 6, rng)), {true, nullptr}).attention.value();
  bool exact = true;
  for (Eigen::Index i = 0; i < u.size(); ++i) exact = exact && u.data()[i] == 1.0 / 3.0;
  o.require(exact, "uniform logits give exactly 1/m");

  ExternalAttention<double> hand("ea", {2, 2, 1, 2}, init, AttentionNorm::identity);
  hand.query().weight().value << 1, 0, 0, 2;
  hand.query().bias().value.setZero();
  hand.external_key().value << 1, 1, 0, 1;
  hand.attention_bias().value << 0, 0.5, -1, 0;
  hand.value().weight().value.setIdentity();
  hand.value().bias().value.setZero();
  ag::Tape<double> t2;
  const Md out = hand.forward(t2.constant(Md::Identity(2, 2)), {false, nullptr}).out.value();
  // softmax([1, 0.5] / sqrt 2) and softmax([1, 2] / sqrt 2), evaluated by hand
  const double r = 1.0 / std::sqrt(2.0);
  const double a0 = 1.0 / (1.0 + std::exp(-0.5 * r)), a1 = 1.0 / (1.0 + std::exp(1.0 * r));
  Md expect(2, 2);
  expect << a0, 1 - a0, a1, 1 - a1;
  const double hand_err = (out - expect).cwiseAbs().maxCoeff();
  o.require(hand_err <= 1e-6, "2x2 hand oracle");
  o.note("max |row sum - 1| = " + num(worst_sum) + ", hand oracle err " + num(hand_err));
  return o;
}

Outcome reservoir() {
  Outcome o;
  constexpr int kCapacity = 100, kStream = 1000, kTrials = 10000;
  std::vector<Sample> stream;
  for (int i = 0; i < kStream; ++i) stream.push_back(Sample{{}, 0, i});
  std::vector<int> hits(kStream, 0);
  for (int trial = 0; trial < kTrials; ++trial) {
    MemoryBuffer buf(kCapacity, std::uint64_t(trial) * 104729 + 7);
    buf.reservoir_update(stream);
    for (const auto& s : buf.items()) ++hits[std::size_t(s.id)];
  }
  const double p = double(kCapacity) / kStream, sigma = std::sqrt(kTrials * p * (1 - p));
  double worst = 0.0;
  int within_3 = 0;
  for (int h : hits) {
    const double z = std::abs(h - kTrials * p) / sigma;
    worst = std::max(worst, z);
    within_3 += z <= 3.0;
  }
  for (int id : {0, 99, 100, 500, 999}) {
    o.require(std::abs(hits[std::size_t(id)] - kTrials * p) <= 3 * sigma, "item " + std::to_string(id) + " within 3 sigma");
  }
  o.require(worst <= 4.42, "every item within the Bonferroni bound");
  o.require(within_3 >= 990, "at least 99% of items within 3 sigma");
  o.note(std::to_string(within_3) + "/1000 items within 3 sigma, worst " + num(worst) + " sigma");
  return o;
}

Outcome metrics() {
  Outcome o;
  std::mt19937_64 rng(9);
  bool exact = true;
  for (int trial = 0; trial < 1000; ++trial) {
    const auto rows = cvt::testing::random_accuracy_rows(rng);
    const AccuracyMatrix m(rows);
    exact = exact && overall_accuracy(m) == cvt::testing::overall_oracle(rows);
    const auto f = forgetting(m), g = cvt::testing::forgetting_oracle(rows);
    exact = exact && f.has_value() == g.has_value() && (!f || *f == *g);
  }
  o.require(exact, "exact agreement with brute force on 1000 matrices");
  const AccuracyMatrix worked({{80}, {60, 70}});
  o.require(overall_accuracy(worked) == 65.0 && forgetting(worked) == 20.0, "worked example A_2 = 65, F_2 = 20");
  return o;
}

// ---------------------------------------------------------------------------

ExperimentConfig desk_config(const std::string& method, const fs::path& out) {
  ExperimentConfig cfg;  // synthetic-10, 5 tasks, buffer 200, batch 10, seeds 0 1 2
  cfg.method = method;
  cfg.output_dir = out.string();
  return cfg;
}

Outcome desk_experiment(const fs::path& out) {
  Outcome o;
  const auto start = std::chrono::steady_clock::now();
  std::map<std::string, nlohmann::json> s;
  for (const std::string method : {"sgd_baseline", "cvt_no_fc", "cvt_scl", "cvt"}) {
    s[method] = run_experiment(desk_config(method, out));
  }
  emit_report(out);
  const double minutes = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count() / 60.0;
  auto mean = [&](const std::string& m, const char* protocol, const char* metric) {
    return s[m]["protocols"][protocol][metric]["mean"].get<double>();
  };
  const double cvt_a = mean("cvt", "task_free", "A_T"), sgd_a = mean("sgd_baseline", "task_free", "A_T");
  const double scl_a = mean("cvt_scl", "task_free", "A_T"), nofc_a = mean("cvt_no_fc", "task_free", "A_T");
  const double cvt_f = mean("cvt", "task_free", "F_T"), sgd_f = mean("sgd_baseline", "task_free", "F_T");
  const double nofc_f = mean("cvt_no_fc", "task_free", "F_T");
  o.require(cvt_a - sgd_a >= 10.0, "(a) CVT beats sgd_baseline by 10 points");
  o.require(cvt_f < sgd_f, "(b) CVT forgets less than sgd_baseline");
  o.require(cvt_a >= scl_a && scl_a >= nofc_a, "(c) A_T ordering CVT >= SCL >= no FC");
  o.require(cvt_f < nofc_f, "(c) CVT forgets less than no FC");
  for (const auto& [m, summary] : s) {
    o.require(mean(m, "task_aware", "A_T") >= mean(m, "task_free", "A_T"), "(d) task-aware >= task-free for " + m);
  }
  o.require(minutes < 15.0, "runtime under 15 minutes");
  o.note("task-free A_T cvt " + num(cvt_a) + ", scl " + num(scl_a) + ", no_fc " + num(nofc_a) + ", sgd " +
         num(sgd_a) + "; F_T cvt " + num(cvt_f) + ", no_fc " + num(nofc_f) + ", sgd " + num(sgd_f) + "; " +
         num(minutes, 2) + " min");
  return o;
}

Outcome determinism(const fs::path& out) {
  Outcome o;
  auto run = [&](const std::string& tag) {
    ExperimentConfig cfg;
    cfg.train_per_class = 60;
    cfg.test_per_class = 20;
    cfg.seeds = {5};
    cfg.output_dir = (out / tag).string();
    run_experiment(cfg);
    return fs::path(cfg.output_dir) / cfg.method;
  };
  fs::remove_all(out);
  const auto a = run("first"), b = run("second");
  o.require(slurp(a / "summary.json") == slurp(b / "summary.json"), "summary JSON byte-identical");
  int compared = 0;
  for (const auto& e : fs::directory_iterator(a / "seed_5" / "checkpoints")) {
    const auto other = b / "seed_5" / "checkpoints" / e.path().filename();
    o.require(fs::exists(other) && slurp(e.path()) == slurp(other), "checkpoint " + e.path().filename().string());
    ++compared;
  }
  o.require(compared == 5, "one checkpoint per task");
  o.note(std::to_string(compared) + " checkpoints and summary.json compared, fnv1a " +
         std::to_string(fnv1a(Archive::read((a / "seed_5" / "checkpoints" / "task_5.ckpt").string()).serialize())));
  return o;
}

Outcome single_pass() {
  Outcome o;
  const Dataset data = make_synthetic10(100, 10, 2022);
  CvtModel<float> model(CvtConfig{}, 0);
  Trainer<float> trainer(model, TrainConfig{});
  const auto split = make_task_splits(data, 5, 0);
  auto stream = stream_batches(data, split, 10, 0);
  std::vector<std::size_t> steps_at_boundary;
  const auto reports = trainer.run_stream(stream, [&](const TaskSpec&, std::size_t) {
    steps_at_boundary.push_back(trainer.optimizer_steps());
  });
  const auto& ids = trainer.consumed_ids();
  std::vector<int> count(data.train.size(), 0);
  for (int id : ids) ++count.at(std::size_t(id));
  o.require(std::all_of(count.begin(), count.end(), [](int c) { return c == 1; }), "each sample consumed once");
  o.require(trainer.optimizer_steps() == stream.total_batches(), "one optimizer step per stream batch");
  o.require(reports.size() == stream.total_batches(), "one report per stream batch");
  o.require(steps_at_boundary == std::vector<std::size_t>{20, 40, 60, 80, 100}, "steps per task");
  o.note(std::to_string(ids.size()) + " samples, " + std::to_string(trainer.optimizer_steps()) + " steps over " +
         std::to_string(stream.total_batches()) + " batches");
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance checks"};
  std::string only;
  std::string out = "acceptance_runs";
  app.add_option("--only", only, "run a single criterion");
  app.add_option("--out", out, "directory for experiment outputs");
  CLI11_PARSE(app, argc, argv);

  const fs::path root(out);
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"loss_oracles", loss_oracles},
      {"gradients", gradients},
      {"attention", attention},
      {"reservoir", reservoir},
      {"metrics", metrics},
      {"desk_experiment", [&] { return desk_experiment(root / "desk"); }},
      {"determinism", [&] { return determinism(root / "determinism"); }},
      {"single_pass", single_pass},
  };
  bool all = true, matched = false;
  for (const auto& [name, check] : criteria) {
    if (!only.empty() && only != name) continue;
    matched = true;
    Outcome r;
    try {
      r = check();
    } catch (const std::exception& e) {
      r.pass = false;
      r.detail = std::string("exception: ") + e.what();
    }
    std::cout << (r.pass ? "PASS " : "FAIL ") << name << ": " << r.detail << std::endl;
    all = all && r.pass;
  }
  if (!matched) {
    std::cerr << "unknown criterion '" << only << "'\n";
    return 2;
  }
  return all ? 0 : 1;
}
