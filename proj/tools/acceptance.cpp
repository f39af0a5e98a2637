// Acceptance checks: one PASS/FAIL line per criterion, tolerances pinned below.
//
// usage: semstg_acceptance [--only NAME]... [--expect-fail NAME]...
//
// Exit status is 0 when the set of failing criteria equals the --expect-fail
// set, so a known failure stays visible in the output without hiding new ones.

#include "semstg/semstg.hpp"

#include <CLI11.hpp>
#include <Eigen/Eigenvalues>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

using namespace semstg;

namespace
{

// gradient integrity
constexpr double kGradStep = 1e-5;
constexpr double kGradThreshold = 1e-4;
constexpr double kGradMaxSeconds = 120.0;
constexpr std::size_t kGradPointsPerOp = 3;
// adjacency algebra
constexpr std::size_t kVamWindows = 100;
constexpr std::size_t kEigenMatrices = 20;
constexpr double kEigenSlack = 1e-9;
// metric oracle
constexpr std::size_t kMetricCases = 50;
constexpr double kMetricTol = 1e-9;
constexpr double kMetricMaxSeconds = 60.0;
// ablation degeneracy and permutation equivariance
constexpr std::size_t kForwardWindows = 10;
constexpr double kForwardTol = 1e-10;
// overfit capacity
constexpr std::size_t kOverfitSteps = 500;
constexpr double kOverfitLr = 1e-3;
constexpr double kOverfitTargetPx = 1.0;
constexpr double kOverfitMaxSeconds = 300.0;
// semantic signal
constexpr std::size_t kSignalSeeds = 5;
constexpr std::size_t kSignalTrainScenes = 500;
constexpr std::size_t kSignalTestScenes = 200;
constexpr std::size_t kSignalEpochs = 150;
constexpr double kSignalLr = 1e-3;
constexpr std::size_t kSignalBatch = 16;
constexpr std::size_t kEvalSamples = 20;
constexpr std::uint64_t kEvalSeed = 77;
constexpr double kSignalMinGain = 0.10;
constexpr double kNullMaxGap = 0.05;
constexpr double kSignalMaxSeconds = 1800.0;
// parameter accounting
constexpr std::size_t kParamMin = 5000;
constexpr std::size_t kParamMax = 15000;

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome
{
  bool pass = false;
  std::string detail;
};

std::string fmt(const char * f, auto... args)
{
  char buf[512];
  std::snprintf(buf, sizeof(buf), f, args...);
  return buf;
}

double max_abs_diff(const Tensor & a, const Tensor & b)
{
  if (a.shape() != b.shape()) return std::numeric_limits<double>::infinity();
  const auto av = a.values();
  const auto bv = b.values();
  double m = 0;
  for (std::size_t i = 0; i < av.size(); ++i) m = std::max(m, std::fabs(av[i] - bv[i]));
  return m;
}

Window random_window(std::mt19937_64 & rng, std::size_t n, std::size_t num_classes)
{
  std::uniform_real_distribution<double> pos(0.0, 200.0);
  std::uniform_int_distribution<std::size_t> cls(0, num_classes - 1);
  Window w;
  w.scene_id = "random";
  for (std::size_t i = 0; i < n; ++i) {
    w.labels.push_back(cls(rng));
    w.track_ids.push_back(static_cast<std::int64_t>(i));
  }
  w.positions.resize(n * w.num_frames() * 2);
  for (double & p : w.positions) p = pos(rng);
  return w;
}

// ---------------------------------------------------------------------------

Outcome gradient_integrity()
{
  const auto t0 = Clock::now();
  const Window w = gradcheck_window(0);
  const auto outcomes = run_gradcheck_suite(gradcheck_cases(0, kGradPointsPerOp, true), kGradStep, kGradThreshold);
  const double secs = seconds_since(t0);
  double worst = 0;
  std::string worst_op, failed;
  bool has_model = false;
  for (const auto & o : outcomes) {
    if (o.max_rel_error >= worst) worst = o.max_rel_error, worst_op = o.name;
    if (!o.passed) failed += " " + o.name;
    has_model = has_model || o.name == "model_nll";
  }
  const bool window_ok = w.num_objects() == 3 && w.t_obs == 8;
  return {failed.empty() && has_model && window_ok && secs < kGradMaxSeconds,
          fmt("%zu ops, worst %s %.3g (< %g), %.1f s (< %g s)%s", outcomes.size(), worst_op.c_str(), worst,
              kGradThreshold, secs, kGradMaxSeconds, failed.empty() ? "" : (" failed:" + failed).c_str())};
}

Outcome encoding_fidelity()
{
  const ClassVocabulary vocab;
  const std::size_t c = vocab.size();
  // objects: Ped1, Biker1, Ped2
  Window w;
  w.labels = {vocab.index_of("Pedestrian"), vocab.index_of("Biker"), vocab.index_of("Pedestrian")};
  const Tensor inter = build_intersection(one_hot_labels(w, vocab));
  // expected (column-object class, row-object class) per entry, written out by hand
  const std::vector<std::vector<std::pair<std::string, std::string>>> expected{
    {{"Pedestrian", "Pedestrian"}, {"Biker", "Pedestrian"}, {"Pedestrian", "Pedestrian"}},
    {{"Pedestrian", "Biker"}, {"Biker", "Biker"}, {"Pedestrian", "Biker"}},
    {{"Pedestrian", "Pedestrian"}, {"Biker", "Pedestrian"}, {"Pedestrian", "Pedestrian"}},
  };
  if (inter.shape() != Shape{3, 3, 2 * c}) return {false, "intersection shape " + shape_str(inter.shape())};
  const auto v = inter.values();
  std::size_t exact = 0;
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t j = 0; j < 3; ++j) {
      std::vector<double> want(2 * c, 0.0);
      want[vocab.index_of(expected[i][j].first)] = 1.0;
      want[c + vocab.index_of(expected[i][j].second)] = 1.0;
      if (std::equal(want.begin(), want.end(), v.begin() + static_cast<std::ptrdiff_t>((i * 3 + j) * 2 * c))) ++exact;
    }
  }
  return {exact == 9, fmt("%zu/9 entries exact", exact)};
}

Outcome adjacency_algebra()
{
  std::mt19937_64 rng(11);
  std::uniform_int_distribution<std::size_t> nodes(1, 7);
  std::size_t vam_ok = 0;
  for (std::size_t k = 0; k < kVamWindows; ++k) {
    const Window w = random_window(rng, nodes(rng), 6);
    const Tensor a = build_vam(to_velocities(w));
    const std::size_t n = w.num_objects();
    const auto av = a.values();
    bool ok = true;
    for (std::size_t t = 0; t < w.t_obs; ++t) {
      for (std::size_t i = 0; i < n; ++i) {
        ok = ok && av[(t * n + i) * n + i] == 0.0;
        for (std::size_t j = 0; j < n; ++j) ok = ok && av[(t * n + i) * n + j] == av[(t * n + j) * n + i];
      }
    }
    vam_ok += ok;
  }

  bool zero_ok = true;
  for (std::size_t n = 1; n <= 6; ++n) {
    const Tensor l = normalize_laplacian(Tensor::zeros({3, n, n}));
    const auto lv = l.values();
    for (std::size_t t = 0; t < 3; ++t) {
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) zero_ok = zero_ok && lv[(t * n + i) * n + j] == (i == j ? 1.0 : 0.0);
      }
    }
  }

  std::uniform_real_distribution<double> u(0.0, 3.0);
  double lo = 0, hi = 0;
  std::size_t eig_ok = 0;
  for (std::size_t k = 0; k < kEigenMatrices; ++k) {
    std::vector<double> a(25);
    for (std::size_t i = 0; i < 5; ++i) {
      for (std::size_t j = i; j < 5; ++j) a[i * 5 + j] = a[j * 5 + i] = (k % 4 == 0 && i != j && u(rng) < 1.5) ? 0.0 : u(rng);
    }
    const Tensor l = normalize_laplacian(Tensor::from_values({1, 5, 5}, a));
    const auto lv = l.values();
    Eigen::Matrix<double, 5, 5> m;
    for (std::size_t i = 0; i < 5; ++i) {
      for (std::size_t j = 0; j < 5; ++j) m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = lv[i * 5 + j];
    }
    const Eigen::SelfAdjointEigenSolver<Eigen::Matrix<double, 5, 5>> es(m, Eigen::EigenvaluesOnly);
    const auto ev = es.eigenvalues();
    lo = std::min(lo, ev.minCoeff());
    hi = std::max(hi, ev.maxCoeff());
    eig_ok += ev.minCoeff() >= -1.0 - kEigenSlack && ev.maxCoeff() <= 1.0 + kEigenSlack;
  }
  return {vam_ok == kVamWindows && zero_ok && eig_ok == kEigenMatrices,
          fmt("VAM symmetric/zero-diagonal %zu/%zu; L(0) == I %s; eigenvalues in [%.12f, %.12f], %zu/%zu within "
              "[-1, 1] +- %g",
              vam_ok, kVamWindows, zero_ok ? "yes" : "no", lo, hi, eig_ok, kEigenMatrices, kEigenSlack)};
}

Outcome metric_oracle()
{
  const auto t0 = Clock::now();
  std::mt19937_64 rng(5);
  std::uniform_int_distribution<std::size_t> nn(1, 5), ss(1, 10), tt(1, 12);
  std::uniform_real_distribution<double> u(-30.0, 30.0);
  double worst = 0;
  std::size_t order_ok = 0;
  for (std::size_t k = 0; k < kMetricCases; ++k) {
    const std::size_t n = nn(rng), s = ss(rng), t_len = tt(rng);
    std::vector<double> samples(s * n * t_len * 2), truth(n * t_len * 2);
    for (double & v : samples) v = u(rng);
    for (double & v : truth) v = u(rng);
    SampledTrajectories st{Tensor::from_values({s, n, t_len, 2}, samples), 0};
    const Tensor tr = Tensor::from_values({n, t_len, 2}, truth);
    const auto [made, mfde] = made_mfde(st, tr);
    const auto [aade, afde] = aade_afde(st, tr);

    // brute force: full error table, then reduce each convention separately
    std::vector<std::vector<std::vector<double>>> err(n, std::vector<std::vector<double>>(s, std::vector<double>(t_len)));
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t q = 0; q < s; ++q) {
        for (std::size_t t = 0; t < t_len; ++t) {
          const double dx = samples[((q * n + i) * t_len + t) * 2] - truth[(i * t_len + t) * 2];
          const double dy = samples[((q * n + i) * t_len + t) * 2 + 1] - truth[(i * t_len + t) * 2 + 1];
          err[i][q][t] = std::sqrt(dx * dx + dy * dy);
        }
      }
    }
    double b_made = 0, b_mfde = 0, b_aade = 0, b_afde = 0;
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<double> ade(s), fde(s);
      for (std::size_t q = 0; q < s; ++q) {
        ade[q] = std::accumulate(err[i][q].begin(), err[i][q].end(), 0.0) / static_cast<double>(t_len);
        fde[q] = err[i][q].back();
      }
      b_made += *std::min_element(ade.begin(), ade.end());
      b_mfde += *std::min_element(fde.begin(), fde.end());
      b_aade += std::accumulate(ade.begin(), ade.end(), 0.0) / static_cast<double>(s);
      b_afde += std::accumulate(fde.begin(), fde.end(), 0.0) / static_cast<double>(s);
    }
    const double dn = static_cast<double>(n);
    for (double d : {made - b_made / dn, mfde - b_mfde / dn, aade - b_aade / dn, afde - b_afde / dn}) {
      worst = std::max(worst, std::fabs(d));
    }
    order_ok += made <= aade;
  }
  const double secs = seconds_since(t0);
  return {worst <= kMetricTol && order_ok == kMetricCases && secs < kMetricMaxSeconds,
          fmt("%zu cases, max |lib - brute force| %.3g (<= %g), mADE <= aADE on %zu/%zu, %.2f s", kMetricCases, worst,
              kMetricTol, order_ok, kMetricCases, secs)};
}

Outcome ablation_degeneracy()
{
  ModelConfig sem_cfg, abl_cfg;
  abl_cfg.semantic = false;
  std::mt19937_64 rng(21);
  std::uniform_int_distribution<std::size_t> nodes(1, 6);
  double worst = 0;
  for (std::size_t k = 0; k < kForwardWindows; ++k) {
    ModelParams sem = ModelParams::init(sem_cfg, 100 + k);
    sem.get("sam.fuse.weight") = Tensor::from_values({2, 1}, {1.0, 0.0});
    sem.get("sam.fuse.bias") = Tensor::from_values({1}, {0.0});
    const ModelParams abl_template = ModelParams::init(abl_cfg, 0);
    ModelParams abl;
    for (const auto & p : abl_template.all()) abl.add(p.name, sem.get(p.name));
    const Window w = random_window(rng, nodes(rng), sem_cfg.num_classes);
    NoGradGuard g;
    const auto a = model_forward(w, sem_cfg, sem).pred;
    const auto b = model_forward(w, abl_cfg, abl).pred;
    worst = std::max({worst, max_abs_diff(a.mu, b.mu), max_abs_diff(a.sigma, b.sigma), max_abs_diff(a.rho, b.rho)});
  }
  return {worst <= kForwardTol, fmt("%zu windows, max |semantic - label-blind| %.3g (<= %g)", kForwardWindows, worst, kForwardTol)};
}

Outcome overfit_capacity()
{
  const auto t0 = Clock::now();
  const ClassVocabulary vocab;
  SynthConfig sc = SynthConfig::interaction_default();
  sc.min_objects = sc.max_objects = 4;
  const std::vector<Window> data = synth_generate(31, 1, sc, vocab);
  const ModelConfig cfg;
  ModelParams p = ModelParams::init(cfg, 31);
  AdamState st = AdamState::for_params(p);
  TrainConfig tc;
  tc.learning_rate = kOverfitLr;
  tc.effective_batch = 1;
  tc.seed = 31;
  const Tensor weights = class_weights(data, vocab);
  auto mean_sigma = [&] {
    NoGradGuard g;
    const Tensor s = model_forward(data[0], cfg, p).pred.sigma;
    const auto v = s.values();
    return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  };
  const double sigma0 = mean_sigma();
  for (std::size_t step = 0; step < kOverfitSteps; ++step) train_epoch(data, cfg, p, st, tc, weights, step);
  const double sigma1 = mean_sigma();
  const double aade = evaluate(data, cfg, p, vocab, kEvalSamples, kEvalSeed).overall.aade;
  const double secs = seconds_since(t0);
  return {aade < kOverfitTargetPx && sigma1 < sigma0 && secs < kOverfitMaxSeconds,
          fmt("4-object window, %zu steps at lr %g: aADE %.3f px (target < %g), mean sigma %.3f -> %.3f px, %.1f s",
              kOverfitSteps, kOverfitLr, aade, kOverfitTargetPx, sigma0, sigma1, secs)};
}

struct SignalRun
{
  double aade = 0;
  std::string checkpoint;
  std::string report;
};

/// Train on one synthetic corpus for the semantic-signal experiment and evaluate on held-out scenes.
SignalRun signal_run(const SynthConfig & sc, std::uint64_t seed, bool semantic)
{
  const ClassVocabulary vocab;
  const auto train = synth_generate(1000 + seed, kSignalTrainScenes, sc, vocab);
  const auto test = synth_generate(2000 + seed, kSignalTestScenes, sc, vocab);
  ModelConfig cfg;
  cfg.semantic = semantic;
  TrainConfig tc;
  tc.learning_rate = kSignalLr;
  tc.effective_batch = kSignalBatch;
  tc.epochs = kSignalEpochs;
  tc.seed = seed;
  Checkpoint ck;
  ck.model = cfg;
  ck.vocabulary = vocab.names();
  ck.params = ModelParams::init(cfg, seed);
  ck.adam = AdamState::for_params(ck.params);
  const Tensor weights = class_weights(train, vocab);
  for (std::size_t e = 0; e < tc.epochs; ++e) train_epoch(train, cfg, ck.params, ck.adam, tc, weights, e);
  ck.train_state = {{"epoch", tc.epochs}, {"init_seed", seed}, {"train", tc}};
  const auto rep = evaluate(test, cfg, ck.params, vocab, kEvalSamples, kEvalSeed);
  return {rep.overall.aade, serialize_checkpoint(ck), report_to_json(rep).dump()};
}

double median(std::vector<double> v)
{
  std::sort(v.begin(), v.end());
  const std::size_t m = v.size() / 2;
  return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

SignalRun g_reference_run;  // seed 1, interaction corpus, semantic model; reused by the reproducibility check

Outcome semantic_signal()
{
  const auto t0 = Clock::now();
  std::vector<double> inter_sem, inter_abl, null_sem, null_abl;
  for (std::uint64_t s = 1; s <= kSignalSeeds; ++s) {
    auto r = signal_run(SynthConfig::interaction_default(), s, true);
    inter_sem.push_back(r.aade);
    if (s == 1) g_reference_run = std::move(r);
    inter_abl.push_back(signal_run(SynthConfig::interaction_default(), s, false).aade);
    null_sem.push_back(signal_run(SynthConfig::null_default(), s, true).aade);
    null_abl.push_back(signal_run(SynthConfig::null_default(), s, false).aade);
    std::cerr << fmt("  seed %llu: interaction sem %.3f abl %.3f | null sem %.3f abl %.3f\n",
                     static_cast<unsigned long long>(s), inter_sem.back(), inter_abl.back(), null_sem.back(),
                     null_abl.back());
  }
  const double gain = (median(inter_abl) - median(inter_sem)) / median(inter_abl);
  const double gap = std::fabs(median(null_sem) - median(null_abl)) / median(null_abl);
  const double secs = seconds_since(t0);
  return {gain >= kSignalMinGain && gap < kNullMaxGap && secs < kSignalMaxSeconds,
          fmt("interaction median aADE sem %.3f vs label-blind %.3f (%.1f%% lower, need >= %.0f%%); null %.3f vs %.3f "
              "(%.2f%% apart, need < %.0f%%); %zu seeds, %.0f s",
              median(inter_sem), median(inter_abl), 100 * gain, 100 * kSignalMinGain, median(null_sem),
              median(null_abl), 100 * gap, 100 * kNullMaxGap, kSignalSeeds, secs)};
}

Outcome parameter_accounting()
{
  ModelConfig sem, abl;
  abl.semantic = false;
  const std::size_t ns = param_count(ModelParams::init(sem, 0));
  const std::size_t na = param_count(ModelParams::init(abl, 0));
  const std::size_t expected_diff = 2 * sem.num_classes + 4;
  return {ns >= kParamMin && ns <= kParamMax && ns - na == expected_diff,
          fmt("semantic %zu, label-blind %zu, difference %zu (2C+4 = %zu), range [%zu, %zu]", ns, na, ns - na,
              expected_diff, kParamMin, kParamMax)};
}

Outcome reproducibility()
{
  if (g_reference_run.checkpoint.empty()) g_reference_run = signal_run(SynthConfig::interaction_default(), 1, true);
  const auto again = signal_run(SynthConfig::interaction_default(), 1, true);
  const bool ck_same = again.checkpoint == g_reference_run.checkpoint;
  const bool rep_same = again.report == g_reference_run.report;
  return {ck_same && rep_same,
          fmt("two %zu-epoch runs (%zu scenes, seed 1): checkpoint %zu bytes %s, metric report %s", kSignalEpochs,
              kSignalTrainScenes, again.checkpoint.size(), ck_same ? "identical" : "DIFFERS",
              rep_same ? "identical" : "DIFFERS")};
}

Outcome permutation_equivariance()
{
  const ModelConfig cfg;
  std::mt19937_64 rng(41);
  double worst = 0;
  for (std::size_t k = 0; k < kForwardWindows; ++k) {
    const Window w = random_window(rng, 4, cfg.num_classes);
    const ModelParams p = ModelParams::init(cfg, 200 + k);
    std::vector<std::size_t> perm{0, 1, 2, 3};
    do std::shuffle(perm.begin(), perm.end(), rng);
    while (std::is_sorted(perm.begin(), perm.end()));
    // permuted window: new node m is old node perm[m]
    Window pw = w;
    const std::size_t f = w.num_frames();
    for (std::size_t m = 0; m < 4; ++m) {
      pw.labels[m] = w.labels[perm[m]];
      pw.track_ids[m] = w.track_ids[perm[m]];
      std::copy_n(w.positions.begin() + static_cast<std::ptrdiff_t>(perm[m] * f * 2), f * 2,
                  pw.positions.begin() + static_cast<std::ptrdiff_t>(m * f * 2));
    }
    NoGradGuard g;
    const auto a = model_forward(w, cfg, p).pred;
    const auto b = model_forward(pw, cfg, p).pred;
    const auto am = a.mu.values(), bm = b.mu.values(), as = a.sigma.values(), bs = b.sigma.values();
    const auto ar = a.rho.values(), br = b.rho.values();
    for (std::size_t t = 0; t < cfg.t_pred; ++t) {
      for (std::size_t m = 0; m < 4; ++m) {
        for (std::size_t d = 0; d < 2; ++d) {
          worst = std::max(worst, std::fabs(bm[(t * 4 + m) * 2 + d] - am[(t * 4 + perm[m]) * 2 + d]));
          worst = std::max(worst, std::fabs(bs[(t * 4 + m) * 2 + d] - as[(t * 4 + perm[m]) * 2 + d]));
        }
        worst = std::max(worst, std::fabs(br[t * 4 + m] - ar[t * 4 + perm[m]]));
      }
    }
  }
  return {worst <= kForwardTol, fmt("%zu windows, max deviation %.3g (<= %g)", kForwardWindows, worst, kForwardTol)};
}

struct Criterion
{
  std::string name;
  std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char ** argv)
{
  CLI::App app{"semstg acceptance checks"};
  std::vector<std::string> only, expect_fail;
  app.add_option("--only", only, "Run only the named criteria");
  app.add_option("--expect-fail", expect_fail, "Criteria known to fail; exit 0 only if exactly these fail");
  CLI11_PARSE(app, argc, argv);

  const std::vector<Criterion> criteria{
    {"gradient_integrity", gradient_integrity},
    {"encoding_fidelity", encoding_fidelity},
    {"adjacency_algebra", adjacency_algebra},
    {"metric_oracle", metric_oracle},
    {"ablation_degeneracy", ablation_degeneracy},
    {"overfit_capacity", overfit_capacity},
    {"semantic_signal", semantic_signal},
    {"parameter_accounting", parameter_accounting},
    {"reproducibility", reproducibility},
    {"permutation_equivariance", permutation_equivariance},
  };
  for (const auto & n : only) {
    if (std::none_of(criteria.begin(), criteria.end(), [&](const auto & c) { return c.name == n; })) {
      std::cerr << "unknown criterion '" << n << "'\n";
      return 1;
    }
  }

  std::set<std::string> failed;
  for (const auto & c : criteria) {
    if (!only.empty() && std::find(only.begin(), only.end(), c.name) == only.end()) continue;
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception & e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    std::cout << (o.pass ? "PASS " : "FAIL ") << c.name << ": " << o.detail << std::endl;
    if (!o.pass) failed.insert(c.name);
  }

  std::set<std::string> expected;
  for (const auto & n : expect_fail) {
    if (only.empty() || std::find(only.begin(), only.end(), n) != only.end()) expected.insert(n);
  }
  if (failed != expected) {
    for (const auto & n : failed) {
      if (!expected.count(n)) std::cout << "unexpected failure: " << n << '\n';
    }
    for (const auto & n : expected) {
      if (!failed.count(n)) std::cout << "expected failure now passes: " << n << " (update --expect-fail)\n";
    }
    return 1;
  }
  return 0;
}
