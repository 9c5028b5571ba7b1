// Acceptance suite: one PASS/FAIL line per criterion.
//
//   segreg_acceptance            run all criteria
//   segreg_acceptance 3 4        run a subset
//
// Exit status is 0 only when every selected criterion passes.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <numbers>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "segreg/grad_check.hpp"
#include "segreg/platform.hpp"
#include "segreg/runs.hpp"

using namespace segreg;
using Td = Tensor<double>;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string num(double v, int precision = 6) {
  std::ostringstream s;
  s.precision(precision);
  s << v;
  return s.str();
}

double rel(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-300}); }

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

Td random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = u(rng);
  return Td(std::move(shape), std::move(v));
}

// ---------------------------------------------------------------------------

Outcome epps_pulley_consistency() {
  std::mt19937_64 rng(2024);
  std::uniform_int_distribution<std::size_t> size(1, 512);
  std::uniform_real_distribution<double> u(-6, 6);
  double worst = 0;
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> z(size(rng));
    for (auto& v : z) v = u(rng);
    worst = std::max(worst, rel(epps_pulley_closed(z), epps_pulley_quadrature(z)));
  }
  // Zeros: each pair contributes 1 and the cross term sqrt(2), so
  // T(n, 0^n) = n (1 - sqrt 2 + 1/sqrt 3).
  const double single = 1.0 - std::numbers::sqrt2 + 1.0 / std::numbers::sqrt3;
  const std::vector<double> one{0.0}, four(4, 0.0);
  const double t1 = epps_pulley_closed(one), t4 = epps_pulley_closed(four);
  const double q1 = epps_pulley_quadrature(one), q4 = epps_pulley_quadrature(four);
  const bool fixed = std::abs(t1 - 0.16314) < 1e-5 && std::abs(q1 - 0.16314) < 1e-5 && std::abs(t4 - 0.65255) < 1e-5 &&
                     std::abs(q4 - 0.65255) < 1e-5 && std::abs(4 * single - 0.65255) < 1e-5;
  return {worst < 1e-6 && fixed,
          "max rel gap " + num(worst, 3) + ", T(1,0)=" + num(t1, 7) + ", T(4,0)=" + num(t4, 7)};
}

Outcome gradient_integrity() {
  std::mt19937_64 rng(7);
  double worst_op = 0;
  auto project = [&](const Td& y) {
    std::mt19937_64 prng(99);
    return sum(mul(y, random_tensor(y.shape(), prng)));
  };
  auto check = [&](auto f, const Td& x) { worst_op = std::max(worst_op, grad_check(f, x)); };
  auto away = [&](Shape s) {
    auto t = random_tensor(std::move(s), rng, 0.1, 1.0);
    std::bernoulli_distribution sign(0.5);
    std::vector<double> v(t.data().begin(), t.data().end());
    for (auto& x : v) x = sign(rng) ? x : -x;
    return Td(t.shape(), v);
  };
  auto other = random_tensor({2, 3}, rng);
  auto rhs = random_tensor({3, 4}, rng);
  auto img = random_tensor({2, 2, 4, 6}, rng);
  auto w = random_tensor({3, 2, 3, 3}, rng);
  auto b = random_tensor({3}, rng);
  auto tail = random_tensor({2, 1, 3, 2}, rng);
  const std::vector<std::size_t> rows{2, 0, 2};
  for (auto [kind, name] : kOpNames) {
    switch (kind) {
      case OpKind::add: check([&](const Td& x) { return project(add(x, other)); }, random_tensor({2, 3}, rng)); break;
      case OpKind::sub: check([&](const Td& x) { return project(sub(other, x)); }, random_tensor({2, 3}, rng)); break;
      case OpKind::mul: check([&](const Td& x) { return project(mul(x, other)); }, random_tensor({2, 3}, rng)); break;
      case OpKind::div: check([&](const Td& x) { return project(div(other, x)); }, random_tensor({2, 3}, rng, 0.5, 2)); break;
      case OpKind::matmul: check([&](const Td& x) { return project(matmul(x, rhs)); }, random_tensor({2, 3}, rng)); break;
      case OpKind::conv2d:
        check([&](const Td& x) { return project(conv2d(x, w, b)); }, img);
        check([&](const Td& x) { return project(conv2d(img, x, b)); }, w);
        check([&](const Td& x) { return project(conv2d(img, w, x)); }, b);
        break;
      case OpKind::upsample2: check([&](const Td& x) { return project(upsample2(x)); }, random_tensor({2, 2, 3, 2}, rng)); break;
      case OpKind::maxpool2: check([&](const Td& x) { return project(maxpool2(x)); }, random_tensor({1, 2, 4, 4}, rng)); break;
      case OpKind::concat_channels:
        check([&](const Td& x) { return project(concat_channels(x, tail)); }, random_tensor({2, 2, 3, 2}, rng));
        break;
      case OpKind::relu: check([&](const Td& x) { return project(relu(x)); }, away({2, 5})); break;
      case OpKind::leaky_relu: check([&](const Td& x) { return project(leaky_relu(x, 0.01)); }, away({2, 5})); break;
      case OpKind::exp: check([&](const Td& x) { return project(segreg::exp(x)); }, random_tensor({2, 3}, rng)); break;
      case OpKind::log: check([&](const Td& x) { return project(segreg::log(x)); }, random_tensor({2, 3}, rng, 0.5, 2)); break;
      case OpKind::square: check([&](const Td& x) { return project(square(x)); }, random_tensor({2, 3}, rng)); break;
      case OpKind::sqrt: check([&](const Td& x) { return project(segreg::sqrt(x)); }, random_tensor({2, 3}, rng, 0.5, 2)); break;
      case OpKind::sum: check([&](const Td& x) { return square(sum(x)); }, random_tensor({2, 3}, rng)); break;
      case OpKind::mean: check([&](const Td& x) { return square(mean(x)); }, random_tensor({2, 3}, rng)); break;
      case OpKind::softmax_channels:
        check([&](const Td& x) { return project(softmax_channels(x)); }, random_tensor({2, 3, 2, 2}, rng));
        break;
      case OpKind::gather_rows: check([&](const Td& x) { return project(gather_rows(x, rows)); }, random_tensor({3, 2}, rng)); break;
      case OpKind::scalar_scale: check([&](const Td& x) { return project(scale(x, 2.5)); }, random_tensor({2, 3}, rng)); break;
    }
  }

  // Losses.
  double worst_loss = 0;
  std::normal_distribution<double> normal(0.2, 1.3);
  const LabelBatch labels{1, 4, 4, {0, 1, 1, 0, 2, 2, 0, 1, 0, 0, 2, 1, 1, 0, 0, 2}};
  const std::vector<int> lab(labels.values.begin(), labels.values.end());
  auto proj = sample_projections(3, 8, 5);
  for (auto mode : {EppsPulleyMode::closed, EppsPulleyMode::quadrature}) {
    auto f = [&](const Td& x) { return sigreg_loss(LatentBatch<double>{x, lab, 2}, proj, {mode}); };
    worst_loss = std::max(worst_loss, grad_check(f, random_tensor({16, 3}, rng, -2, 2)));
  }
  worst_loss = std::max(worst_loss, grad_check([&](const Td& x) {
    LatentBatch<double> lb{x, lab, 2};
    return invariance_loss(lb, prototypes(lb));
  }, random_tensor({16, 3}, rng)));
  worst_loss = std::max(worst_loss, grad_check([&](const Td& x) { return dice_loss(softmax_channels(x), labels); },
                                               random_tensor({1, 3, 4, 4}, rng, -2, 2)));
  worst_loss = std::max(worst_loss, grad_check([&](const Td& x) { return cross_entropy_loss(x, labels); },
                                               random_tensor({1, 3, 4, 4}, rng, -2, 2)));

  // SegReg objective through an 8x8 model.
  ChannelPlan plan;
  plan.widths = {2, 3, 4, 3, 2};
  auto params = init_params<double>(7, 2, plan);
  auto image = random_tensor({1, 1, 8, 8}, rng, 0, 1);
  LabelBatch l{1, 8, 8, std::vector<std::uint8_t>(64, 0)};
  for (std::size_t i = 0; i < 64; ++i) l.values[i] = static_cast<std::uint8_t>(i / 8 < 3 ? 1 : (i % 8 < 4 ? 2 : 0));
  auto mproj = sample_projections(plan.latent_dim(), 4, 3);
  const double worst_model = grad_check_params(
      [&] {
        auto out = forward(params, image);
        return segreg_total(out.logits, extract_latent_batch(out, l, PixelSampler{64, 1}), l, SegRegWeights{}, mproj).total;
      },
      params.tensors);
  return {worst_op < 1e-4 && worst_loss < 1e-4 && worst_model < 1e-3,
          "ops " + num(worst_op, 2) + ", losses " + num(worst_loss, 2) + ", model " + num(worst_model, 2)};
}

Outcome metric_oracle() {
  ScoreMatrix s;
  s.R = {{0.90, 0.50}, {0.85, 0.88}};
  s.b = {0.90, 0.87};
  const auto m = continual_metrics(s);
  // By hand: mean(0.85, 0.88); 0.85 - 0.90; 0.50 - 0.87.
  const bool ok = std::abs(m.mean_dsc - 0.865) < 1e-12 && std::abs(m.bwt + 0.05) < 1e-12 && std::abs(m.fwt + 0.37) < 1e-12;
  return {ok, "(" + num(m.mean_dsc, 15) + ", " + num(m.bwt, 15) + ", " + num(m.fwt, 15) + ")"};
}

double log_density(const GaussianMoments& m, const Eigen::LLT<Eigen::MatrixXd>& llt, const Eigen::VectorXd& x) {
  const Eigen::VectorXd r = x - m.mean;
  double logdet = 0;
  for (Eigen::Index i = 0; i < m.cov.rows(); ++i) logdet += 2 * std::log(llt.matrixL()(i, i));
  return -0.5 * (r.dot(llt.solve(r)) + logdet + static_cast<double>(m.cov.rows()) * std::log(2 * std::numbers::pi));
}

Outcome kl_oracle() {
  std::mt19937_64 rng(321);
  std::normal_distribution<double> normal;
  double worst = 0;
  for (int pair = 0; pair < 20; ++pair) {
    const std::size_t d = 1 + pair % 4;
    GaussianMoments g[2];
    for (auto& m : g) {
      Eigen::MatrixXd a(d, d);
      for (Eigen::Index i = 0; i < a.size(); ++i) a.data()[i] = 0.5 * normal(rng);
      m.cov = a * a.transpose() + 0.5 * Eigen::MatrixXd::Identity(d, d);
      m.mean = Eigen::VectorXd(d);
      for (Eigen::Index i = 0; i < m.mean.size(); ++i) m.mean(i) = 0.5 * normal(rng);
    }
    const Eigen::LLT<Eigen::MatrixXd> la(g[0].cov), lb(g[1].cov);
    const Eigen::MatrixXd L = la.matrixL();
    double acc = 0;
    Eigen::VectorXd e(d);
    const std::size_t draws = 100000;
    for (std::size_t s = 0; s < draws; ++s) {
      for (Eigen::Index i = 0; i < e.size(); ++i) e(i) = normal(rng);
      const Eigen::VectorXd x = g[0].mean + L * e;
      acc += log_density(g[0], la, x) - log_density(g[1], lb, x);
    }
    worst = std::max(worst, rel(acc / draws, gaussian_kl(g[0], g[1])));
  }
  GaussianMoments a{Eigen::VectorXd::Zero(1), Eigen::MatrixXd::Identity(1, 1)};
  GaussianMoments b{Eigen::VectorXd::Ones(1), Eigen::MatrixXd::Identity(1, 1)};
  const double half = gaussian_kl(a, b);
  return {worst < 0.02 && std::abs(half - 0.5) < 1e-12,
          "max MC rel gap " + num(worst, 3) + ", KL(N(0,1)||N(1,1))=" + num(half, 17)};
}

Outcome entropy_ordering() {
  const double g = entropy::gaussian(1.0), l = entropy::laplace(1.0), u = entropy::uniform(1.0);
  // Independent closed forms: 0.5 ln(2 pi e), 1 + ln(sqrt 2), ln(2 sqrt 3).
  const double g0 = 0.5 * std::log(2 * std::numbers::pi * std::numbers::e), l0 = 1 + 0.5 * std::log(2.0),
               u0 = std::log(2 * std::sqrt(3.0));
  const bool values = std::abs(g - g0) < 1e-12 && std::abs(l - l0) < 1e-12 && std::abs(u - u0) < 1e-12 &&
                      std::abs(g - 1.41894) < 1e-5 && std::abs(l - 1.34657) < 1e-5 && std::abs(u - 1.24245) < 1e-5;
  return {values && g > l && l > u, "h(gauss)=" + num(g) + " > h(laplace)=" + num(l) + " > h(uniform)=" + num(u)};
}

Outcome sliced_loss_behaviour() {
  const std::size_t n = 512, d = 8;
  std::mt19937_64 rng(0);
  std::uniform_real_distribution<double> u(0.0, 0.01);
  std::vector<double> v(n * d);
  for (auto& x : v) x = u(rng);
  std::vector<Td> z{Td({n, d}, v, true)};
  const std::vector<int> labels(n, 0);
  const auto probe = sample_projections(d, 64, 999);
  auto statistic = [&] {
    NoGradGuard guard;
    return sigreg_loss(LatentBatch<double>{z[0], labels, 0}, probe).item();
  };
  const double before = statistic();
  SgdMomentum<double> gd(1.0, 0.0);
  for (std::size_t step = 0; step < 500; ++step) {
    z[0].zero_grad();
    sigreg_loss(LatentBatch<double>{z[0], labels, 0}, sample_projections(d, 16, 1000 + step)).backward();
    gd.step(z);
  }
  const double after = statistic();
  const auto data = z[0].data();
  double worst_mean = 0, worst_var = 0;
  for (std::size_t j = 0; j < d; ++j) {
    double m = 0, q = 0;
    for (std::size_t i = 0; i < n; ++i) m += data[i * d + j];
    m /= n;
    for (std::size_t i = 0; i < n; ++i) q += (data[i * d + j] - m) * (data[i * d + j] - m);
    q /= n - 1;
    worst_mean = std::max(worst_mean, std::abs(m));
    worst_var = std::max(worst_var, std::abs(q - 1));
  }
  const double reduction = 1 - after / before;
  return {reduction >= 0.9 && worst_mean < 0.1 && worst_var <= 0.15,
          "statistic " + num(before, 4) + " -> " + num(after, 4) + " (" + num(100 * reduction, 4) + "% lower), max|m| " +
              num(worst_mean, 3) + ", max|var-1| " + num(worst_var, 3)};
}

// The presets are 32x32, a quarter of the pixels of a 64x64 volume slice, so
// per-stage training runs four times the default epochs to keep compute matched.
constexpr std::size_t kStageEpochs = 120;

std::vector<Dataset> preset_data(const std::string& name) {
  std::vector<Dataset> out;
  for (const auto& s : preset_tasks(name)) out.push_back(generate_task(s));
  return out;
}

Outcome segreg_in_domain() {
  const auto tasks = preset_data("cardiac-like");
  std::vector<double> plain, reg;
  for (std::uint64_t seed : {0, 1, 2}) {
    for (Method m : {Method::seq, Method::segreg}) {
      MethodConfig cfg;
      cfg.method = m;
      cfg.run_seed = seed;
      cfg.optim.epochs = kStageEpochs;
      auto params = init_params<float>(seed, tasks[0].spec.num_classes());
      auto carry = CarryState::for_method(m);
      train_stage(params, tasks[0], cfg, carry, 0);
      (m == Method::seq ? plain : reg).push_back(mean_of(evaluate(params, tasks[0])));
    }
  }
  const double a = 100 * median(plain), b = 100 * median(reg);
  return {b >= a - 2.0, "median test DSC: none " + num(a, 4) + ", SegReg " + num(b, 4) + " (gap " + num(b - a, 3) + " pp)"};
}

Outcome continual_direction() {
  const auto tasks = preset_data("hippocampus-like");
  std::vector<double> fwt_seq, fwt_sr, dsc_seq, dsc_sr, dsc_reh, drift_seq, drift_sr;
  for (std::uint64_t seed : {0, 1, 2}) {
    MethodConfig base;
    base.run_seed = seed;
    base.optim.epochs = kStageEpochs;
    const auto baselines = train_baselines(tasks, base);
    for (Method m : {Method::seq, Method::segreg, Method::rehearsal}) {
      MethodConfig cfg = base;
      cfg.method = m;
      const auto res = run_sequence(tasks, cfg, baselines);
      const auto metrics = continual_metrics(res.scores);
      const double drift = drift_report(res.snapshots).total;
      if (m == Method::seq) fwt_seq.push_back(metrics.fwt), dsc_seq.push_back(metrics.mean_dsc), drift_seq.push_back(drift);
      if (m == Method::segreg) fwt_sr.push_back(metrics.fwt), dsc_sr.push_back(metrics.mean_dsc), drift_sr.push_back(drift);
      if (m == Method::rehearsal) dsc_reh.push_back(metrics.mean_dsc);
      std::cout << "  seed " << seed << " " << method_name(m) << ": mean_dsc " << num(100 * metrics.mean_dsc, 4) << " bwt "
                << num(100 * metrics.bwt, 4) << " fwt " << num(100 * metrics.fwt, 4) << " drift " << num(drift, 4) << "\n";
    }
  }
  const bool a = median(fwt_sr) >= median(fwt_seq), b = median(dsc_sr) >= median(dsc_seq),
             c = median(dsc_reh) >= median(dsc_seq), d = median(drift_sr) < median(drift_seq);
  auto mark = [](bool x) { return x ? "ok" : "FAILED"; };
  return {a && b && c && d,
          std::string("(a) FWT ") + num(100 * median(fwt_sr), 4) + " vs " + num(100 * median(fwt_seq), 4) + " " + mark(a) +
              "; (b) DSC " + num(100 * median(dsc_sr), 4) + " vs " + num(100 * median(dsc_seq), 4) + " " + mark(b) +
              "; (c) rehearsal " + num(100 * median(dsc_reh), 4) + " " + mark(c) + "; (d) drift " +
              num(median(drift_sr), 4) + " vs " + num(median(drift_seq), 4) + " " + mark(d)};
}

Outcome reproducibility() {
  const fs::path root = fs::temp_directory_path() / "segreg_acceptance_replay";
  fs::remove_all(root);
  RunConfig cfg;
  cfg.experiment = "replay";
  cfg.preset = "prostate-like";
  cfg.data_dir = (root / "data").string();
  cfg.out_dir = (root / "first").string();
  cfg.method.method = Method::segreg_ewc;
  cfg.method.optim.epochs = 2;
  cfg.method.run_seed = 11;
  cmd_generate(cfg, cfg.data_dir);
  cmd_continual(cfg);
  auto replay = load_run_config(root / "first" / "manifest.json");
  replay.out_dir = (root / "second").string();
  cmd_continual(replay);
  std::vector<std::string> differing;
  for (const char* f : {"scores.csv", "metrics.json", "drift.json"}) {
    if (detail::read_file(root / "first" / f) != detail::read_file(root / "second" / f)) differing.push_back(f);
  }
  fs::remove_all(root);
  std::string detail = differing.empty() ? "scores.csv, metrics.json, drift.json identical" : "differs:";
  for (const auto& f : differing) detail += " " + f;
  return {differing.empty(), detail};
}

struct Criterion {
  int id;
  const char* name;
  std::function<Outcome()> run;
  double budget_s;  // runtime limit, 0 for none
};

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  const std::vector<Criterion> all = {
      {1, "Epps-Pulley consistency", epps_pulley_consistency, 10},
      {2, "gradient integrity", gradient_integrity, 60},
      {3, "metric oracle", metric_oracle, 1},
      {4, "Gaussian KL oracle", kl_oracle, 30},
      {5, "entropy ordering", entropy_ordering, 1},
      {6, "sliced loss behaviour", sliced_loss_behaviour, 60},
      {7, "SegReg does not hurt in-domain", segreg_in_domain, 600},
      {8, "continual directional reproduction", continual_direction, 1800},
      {9, "reproducibility", reproducibility, 0},
  };
  std::vector<int> selected;
  for (int i = 1; i < argc; ++i) selected.push_back(std::stoi(argv[i]));
  bool ok = true;
  for (const auto& c : all) {
    if (!selected.empty() && std::find(selected.begin(), selected.end(), c.id) == selected.end()) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (c.budget_s > 0 && secs > c.budget_s) {
      o.pass = false;
      o.detail += "; over the " + num(c.budget_s) + "s budget";
    }
    std::printf("criterion %d %s: %s (%s; %.1fs)\n", c.id, o.pass ? "PASS" : "FAIL", c.name, o.detail.c_str(), secs);
    std::fflush(stdout);
    ok = ok && o.pass;
  }
  return ok ? 0 : 1;
}
