#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <numeric>
#include <vector>

#include "doctest.h"
#include "ovcp/checkpoint.hpp"
#include "ovcp/data.hpp"
#include "ovcp/training.hpp"
#include "test_util.hpp"

using namespace ovcp;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path dir;
  TempDir() {
    dir = fs::temp_directory_path() / ("ovcp_train_test_" + std::to_string(::getpid()) + "_" +
                                       std::to_string(counter()++));
    fs::create_directories(dir);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(dir, ec);
  }
  std::string path(const std::string& name) const { return (dir / name).string(); }
  static int& counter() {
    static int c = 0;
    return c;
  }
};

// A tiny rendered classification world: a handful of catalog classes, a few
// clips each, and a prompt bank over exactly those classes.
struct TinyWorld {
  ModelConfig mcfg;
  VideoSet videos;
  ClassPromptBank bank;
};

TinyWorld make_world(int n_classes, int per_class, int frames_t, double temperature,
                     uint64_t seed) {
  TinyWorld w;
  w.mcfg.frame_size = 8;
  w.mcfg.patch_size = 4;
  w.mcfg.frames_t = frames_t;
  w.mcfg.embed_dim = 32;
  w.mcfg.num_layers = 1;
  w.mcfg.num_heads = 2;
  w.mcfg.window = 1;
  w.mcfg.temperature = temperature;

  DataConfig dcfg;
  dcfg.frame_size = 8;
  dcfg.frames_t = frames_t;

  auto catalog = build_catalog(seed);
  REQUIRE(static_cast<int>(catalog.size()) >= n_classes);
  w.videos.n = n_classes * per_class;
  w.videos.t = frames_t;
  w.videos.h = 8;
  w.videos.w = 8;
  w.videos.c = 3;
  w.videos.pixels.resize(static_cast<size_t>(w.videos.n) * w.videos.video_numel());
  std::vector<ClassPrompt> prompts;
  for (int ci = 0; ci < n_classes; ++ci) {
    const ClassDef& cls = catalog[static_cast<size_t>(ci)];
    prompts.push_back({cls.id, cls.prompt_tokens()});
    for (int s = 0; s < per_class; ++s) {
      w.videos.class_ids.push_back(cls.id);
      int vi = ci * per_class + s;
      render_video(dcfg, cls, s, seed, frames_t, w.videos.video(vi));
    }
  }
  w.bank = ClassPromptBank::build(prompts, w.mcfg.embed_dim, seed);
  w.videos.validate();
  return w;
}

std::vector<int> all_indices(const VideoSet& vs) {
  std::vector<int> idx(static_cast<size_t>(vs.n));
  std::iota(idx.begin(), idx.end(), 0);
  return idx;
}

// Reports must agree field for field (committed steps are deterministic).
void check_reports_equal(const std::vector<LossReport>& a, const std::vector<LossReport>& b) {
  REQUIRE(a.size() == b.size());
  for (size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].step == b[i].step);
    CHECK(a[i].lr == b[i].lr);
    CHECK(a[i].base_loss == b[i].base_loss);
    CHECK(a[i].reg_loss == b[i].reg_loss);
    CHECK(a[i].alpha == b[i].alpha);
    CHECK(a[i].beta == b[i].beta);
    CHECK(a[i].grad_norm == b[i].grad_norm);
  }
}

template <typename S>
void check_values_equal(const ParamVectorT<S>& a, const ParamVectorT<S>& b) {
  REQUIRE(a.values.size() == b.values.size());
  size_t diff = 0;
  for (size_t i = 0; i < a.values.size(); ++i) {
    if (!(a.values[i] == b.values[i])) ++diff;
  }
  CHECK(diff == 0);
}

}  // namespace

TEST_SUITE("training") {

TEST_CASE("cosine schedule hits the configured endpoints") {
  LrSchedule s{3.33e-6, 3.33e-8, 4, 15};

  CHECK(cosine_lr(0, s) == 3.33e-8);  // warm-up starts at the floor rate
  double mid_warm = 3.33e-8 + (3.33e-6 - 3.33e-8) * 0.5;
  CHECK(cosine_lr(2, s) == doctest::Approx(mid_warm).epsilon(1e-15));
  CHECK(cosine_lr(4, s) == 3.33e-6);   // first post-warm-up step is the peak
  CHECK(cosine_lr(14, s) == 3.33e-8);  // last scheduled step is the floor

  // Cosine symmetry: the middle of the decay phase is the arithmetic mean.
  double mean = 0.5 * (3.33e-6 + 3.33e-8);
  CHECK(cosine_lr(9, s) == doctest::Approx(mean).epsilon(1e-12));

  // Monotone decay after warm-up.
  for (int64_t t = 5; t <= 14; ++t) CHECK(cosine_lr(t, s) < cosine_lr(t - 1, s));

  // Past the schedule the rate stays at the floor.
  CHECK(cosine_lr(15, s) == 3.33e-8);
  CHECK(cosine_lr(500, s) == 3.33e-8);

  // No warm-up: step 0 is already the peak.
  LrSchedule nw{1e-3, 1e-5, 0, 11};
  CHECK(cosine_lr(0, nw) == 1e-3);
  CHECK(cosine_lr(10, nw) == 1e-5);

  CHECK_THROWS_AS(cosine_lr(-1, s), UsageError);
  CHECK_THROWS_AS(cosine_lr(0, LrSchedule{1e-3, 1e-5, 10, 10}), UsageError);
  CHECK_THROWS_AS(cosine_lr(0, LrSchedule{1e-5, 1e-3, 0, 10}), UsageError);
}

TEST_CASE("steps_per_epoch and schedule assembly") {
  CHECK(steps_per_epoch(8, 2) == 4);
  CHECK(steps_per_epoch(9, 2) == 4);   // with-replacement sampling drops the remainder
  CHECK(steps_per_epoch(3, 8) == 1);   // never below one step per epoch
  CHECK_THROWS_AS(steps_per_epoch(0, 2), UsageError);

  TrainConfig cfg;
  cfg.warmup_epochs = 2;
  cfg.epochs = 3;
  LrSchedule s = make_lr_schedule(cfg, 4);
  CHECK(s.warmup_steps == 8);
  CHECK(s.total_steps == 20);
  CHECK(s.lr_init == cfg.lr_init);
  CHECK(s.lr_final == cfg.lr_final);
}

TEST_CASE("alpha draws stay in the open interval with the right mean") {
  Rng rng(seed_stream(11, "alpha"));
  const int n = 100000;
  double sum = 0.0;
  for (int i = 0; i < n; ++i) {
    double a = sample_alpha(0.6, rng);
    REQUIRE(a > 0.0);
    REQUIRE(a < 0.6);
    sum += a;
  }
  CHECK(sum / n == doctest::Approx(0.3).epsilon(0.034));  // R/2 within +-0.01 absolute

  // Same seed, same sequence.
  Rng r1(42), r2(42);
  for (int i = 0; i < 100; ++i) CHECK(sample_alpha(0.37, r1) == sample_alpha(0.37, r2));

  Rng r3(1);
  CHECK_THROWS_AS(sample_alpha(0.0, r3), UsageError);
  CHECK_THROWS_AS(sample_alpha(1.0, r3), UsageError);
  CHECK_THROWS_AS(sample_alpha(1.2, r3), UsageError);
  CHECK_THROWS_AS(sample_alpha(-0.1, r3), UsageError);
}

TEST_CASE("train config validation") {
  TrainConfig ok;
  CHECK_NOTHROW(ok.validate());

  auto expect_bad = [](std::function<void(TrainConfig&)> mutate) {
    TrainConfig c;
    mutate(c);
    CHECK_THROWS_AS(c.validate(), UsageError);
  };
  expect_bad([](TrainConfig& c) { c.mode = "dropout"; });
  expect_bad([](TrainConfig& c) { c.optimizer = "lbfgs"; });
  expect_bad([](TrainConfig& c) { c.precision = "f16"; });
  expect_bad([](TrainConfig& c) { c.batch_size = 1; });
  expect_bad([](TrainConfig& c) { c.alpha_max = 0.0; });
  expect_bad([](TrainConfig& c) { c.alpha_max = 1.0; });
  expect_bad([](TrainConfig& c) { c.reg_coef = -0.5; });
  expect_bad([](TrainConfig& c) { c.l2_mu = -1.0; });
  expect_bad([](TrainConfig& c) { c.lr_final = 1.0; });  // above lr_init
  expect_bad([](TrainConfig& c) { c.lr_init = 0.0; });
  expect_bad([](TrainConfig& c) { c.momentum = 1.0; });
  expect_bad([](TrainConfig& c) { c.warmup_epochs = -1; });
  expect_bad([](TrainConfig& c) { c.epochs = -1; });
  expect_bad([](TrainConfig& c) { c.swa_cycle = 0; });
  expect_bad([](TrainConfig& c) { c.max_bad_steps = -1; });
}

TEST_CASE("contrastive loss sits near ln K at random init with unit temperature") {
  // Random video and prompt embeddings are nearly uncorrelated, so with a
  // temperature of 1 the logits are close to uniform and the cross entropy
  // lands near ln K. (Sharper temperatures amplify the residual similarity
  // spread and move the init loss well away from ln K, so the check pins the
  // temperature explicitly.)
  const int k = 6;
  for (uint64_t seed : {3u, 17u, 99u}) {
    TinyWorld w = make_world(k, 2, 2, /*temperature=*/1.0, seed);
    ParamVector theta = init_params(w.mcfg, seed + 1);
    auto idx = all_indices(w.videos);
    double loss = contrastive_loss<float>(w.videos, idx, w.bank, theta, w.mcfg);
    CHECK(std::abs(loss - std::log(static_cast<double>(k))) < 0.1);
  }
}

TEST_CASE("contrastive loss is a batch mean and handles degenerate banks") {
  TinyWorld w = make_world(3, 2, 2, 0.07, 5);
  ParamVector theta = init_params(w.mcfg, 6);

  // Duplicating an example cannot change a mean.
  std::vector<int> one = {2};
  std::vector<int> two = {2, 2};
  double l1 = contrastive_loss<float>(w.videos, one, w.bank, theta, w.mcfg);
  double l2 = contrastive_loss<float>(w.videos, two, w.bank, theta, w.mcfg);
  CHECK(l1 == l2);

  // A single-candidate bank gives certainty: -log softmax over one logit is 0.
  TinyWorld w1 = make_world(1, 2, 2, 0.07, 5);
  ParamVector theta1 = init_params(w1.mcfg, 6);
  std::vector<int> idx1 = {0, 1};
  CHECK(contrastive_loss<float>(w1.videos, idx1, w1.bank, theta1, w1.mcfg) == 0.0);

  // A class missing from the bank is a caller error.
  TinyWorld w3 = make_world(3, 1, 2, 0.07, 5);
  std::vector<int> keep = {w3.bank.ids()[0], w3.bank.ids()[1]};
  ClassPromptBank partial = w3.bank.subset(keep);
  auto idx3 = all_indices(w3.videos);
  CHECK_THROWS(contrastive_loss<float>(w3.videos, idx3, partial, theta, w3.mcfg));

  // Geometry mismatches are rejected before any encoding happens.
  TinyWorld w4 = make_world(2, 1, 3, 0.07, 5);  // 3-frame clips
  auto idx4 = all_indices(w4.videos);
  CHECK_THROWS_AS(contrastive_loss<float>(w4.videos, idx4, w4.bank, theta, w.mcfg), UsageError);

  std::vector<int> empty;
  CHECK_THROWS_AS(contrastive_loss<float>(w.videos, empty, w.bank, theta, w.mcfg), UsageError);
  std::vector<int> oob = {w.videos.n};
  CHECK_THROWS_AS(contrastive_loss<float>(w.videos, oob, w.bank, theta, w.mcfg), UsageError);
}

TEST_CASE("loss assembly reaches zero in the separable limit") {
  // Mirror of the loss graph with hand-constructed embeddings: the true
  // prompt at cosine +1, the distractor at -1, and a sharp temperature. The
  // cross entropy must collapse to ~exp(-2/tau).
  TapeD tape;
  MatD emb(1, 4);
  emb.v = {2.0, 0.0, 0.0, 0.0};  // normalizes to e0
  MatD prompts(4, 2);            // columns: e0 and -e0
  prompts.v = {1.0, -1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0};
  auto logits = tape.scale(
      tape.matmul(tape.l2_normalize_rows(tape.constant(emb)), tape.constant(prompts)), 1.0 / 0.01);
  auto loss = tape.cross_entropy(logits, 0);
  CHECK(tape.value(loss).v[0] < 1e-12);

  // And exact ln K on exactly uniform logits, the symmetric worst case.
  MatD flat(1, 5);
  flat.v = {0.7, 0.7, 0.7, 0.7, 0.7};
  auto uniform_loss = tape.cross_entropy(tape.constant(flat), 3);
  CHECK(tape.value(uniform_loss).v[0] == doctest::Approx(std::log(5.0)).epsilon(1e-14));
}

TEST_CASE("backprop gradient of the batch loss matches finite differences") {
  TinyWorld w = make_world(3, 1, 2, 0.07, 21);
  ParamVectorD theta = widen(init_params(w.mcfg, 22));
  std::vector<int> batch = {0, 1, 2};

  auto g = loss_and_grad(w.videos, batch, w.bank, theta, w.mcfg);
  CHECK(std::isfinite(g.loss));
  CHECK(g.grad.size() == theta.size());

  std::function<double(const ParamVectorD&)> f = [&](const ParamVectorD& p) {
    return contrastive_loss<double>(w.videos, batch, w.bank, p, w.mcfg);
  };
  Rng pick(23);
  std::vector<int64_t> coords;
  for (int i = 0; i < 64; ++i) {
    coords.push_back(static_cast<int64_t>(pick.integer(static_cast<uint64_t>(theta.size()))));
  }
  std::vector<double> fd = finite_difference_gradient<double>(f, theta, 1e-5, coords);
  std::vector<double> bp;
  for (int64_t c : coords) bp.push_back(g.grad.values[static_cast<size_t>(c)]);
  // Floor at the central-difference noise scale (~eps*|f|/h ~ 1e-11) so
  // near-zero coordinates do not dominate the relative measure.
  CHECK(max_rel_deviation(bp, fd, 1e-4) <= 1e-6);
}

TEST_CASE("combined objective gradient matches finite differences") {
  TinyWorld w = make_world(3, 1, 2, 0.07, 31);
  ParamVectorD theta = widen(init_params(w.mcfg, 32));
  ParamVectorD anchor = widen(init_params(w.mcfg, 33));
  std::vector<int> batch = {0, 2};
  const double alpha = 0.3;
  const double c_reg = 0.5;
  const double beta = c_reg / (1.0 - alpha);

  // Two-pass combined gradient, the closed form the optimizer consumes.
  auto g1 = loss_and_grad(w.videos, batch, w.bank, theta, w.mcfg);
  ParamVectorD mixed = interpolate(anchor, theta, alpha);
  auto g2 = loss_and_grad(w.videos, batch, w.bank, mixed, w.mcfg);
  std::vector<double> combined(theta.values.size());
  for (size_t i = 0; i < combined.size(); ++i) {
    combined[i] = g1.grad.values[i] + c_reg * g2.grad.values[i];
  }

  std::function<double(const ParamVectorD&)> f = [&](const ParamVectorD& p) {
    double base = contrastive_loss<double>(w.videos, batch, w.bank, p, w.mcfg);
    ParamVectorD m = interpolate(anchor, p, alpha);
    return base + beta * contrastive_loss<double>(w.videos, batch, w.bank, m, w.mcfg);
  };
  Rng pick(34);
  std::vector<int64_t> coords;
  for (int i = 0; i < 64; ++i) {
    coords.push_back(static_cast<int64_t>(pick.integer(static_cast<uint64_t>(theta.size()))));
  }
  std::vector<double> fd = finite_difference_gradient<double>(f, theta, 1e-5, coords);
  std::vector<double> bp;
  for (int64_t c : coords) bp.push_back(combined[static_cast<size_t>(c)]);
  CHECK(max_rel_deviation(bp, fd, 1e-4) <= 1e-6);
}

TEST_CASE("single-tape combined gradient equals the two-pass sum") {
  TinyWorld w = make_world(3, 1, 2, 0.07, 41);
  ParamVectorD theta = widen(init_params(w.mcfg, 42));
  ParamVectorD anchor = widen(init_params(w.mcfg, 43));
  std::vector<int> batch = {0, 1};

  for (double alpha : {0.1, 0.3, 0.59}) {
    double dev = check_grad_identity(theta, anchor, w.videos, batch, w.bank, w.mcfg, alpha, 0.5);
    CHECK(dev <= 1e-9);
  }

  // No regularizer: both sides are the same computation.
  CHECK(check_grad_identity(theta, anchor, w.videos, batch, w.bank, w.mcfg, 0.3, 0.0) == 0.0);

  CHECK_THROWS_AS(
      check_grad_identity(theta, anchor, w.videos, batch, w.bank, w.mcfg, 1.0, 0.5), UsageError);
  CHECK_THROWS_AS(
      check_grad_identity(theta, anchor, w.videos, batch, w.bank, w.mcfg, 0.3, -1.0), UsageError);
}

TEST_CASE("alpha zero folds the regularizer into a (1 + C) rescale") {
  TinyWorld w = make_world(3, 1, 2, 0.07, 51);
  ParamVectorD theta = widen(init_params(w.mcfg, 52));
  ParamVectorD anchor = widen(init_params(w.mcfg, 53));
  std::vector<int> batch = {1, 2};
  const double c_reg = 0.5;

  auto g1 = loss_and_grad(w.videos, batch, w.bank, theta, w.mcfg);
  ParamVectorD mixed = interpolate(anchor, theta, 0.0);  // exactly theta
  auto g2 = loss_and_grad(w.videos, batch, w.bank, mixed, w.mcfg);

  std::vector<double> combined(theta.values.size()), scaled(theta.values.size());
  for (size_t i = 0; i < combined.size(); ++i) {
    combined[i] = g1.grad.values[i] + c_reg * g2.grad.values[i];
    scaled[i] = (1.0 + c_reg) * g1.grad.values[i];
  }
  CHECK(max_rel_deviation(combined, scaled) <= 1e-12);
}

TEST_CASE("iwr step bookkeeping: beta, alpha echo and finite report") {
  TinyWorld w = make_world(3, 2, 2, 0.07, 61);
  ParamVector theta = init_params(w.mcfg, 62);
  ParamVector anchor = theta;
  TrainConfig cfg;
  cfg.reg_coef = 0.5;
  OptStateT<float> opt = init_opt_state(theta);
  std::vector<int> batch = {0, 3};

  LossReport r = iwr_step(theta, anchor, w.videos, batch, w.bank, w.mcfg, cfg, 0.5, 1e-3, opt);
  CHECK(r.alpha == 0.5);
  CHECK(r.beta == 1.0);  // C / (1 - alpha) with C = 0.5, alpha = 0.5
  CHECK(r.lr == 1e-3);
  CHECK(r.base_loss > 0.0);
  CHECK(r.reg_loss > 0.0);
  CHECK(r.grad_norm > 0.0);
  CHECK_NOTHROW(r.require_finite());
  CHECK(opt.t == 1);

  CHECK_THROWS_AS(
      iwr_step(theta, anchor, w.videos, batch, w.bank, w.mcfg, cfg, 1.0, 1e-3, opt), UsageError);
}

TEST_CASE("l2 penalty gradient is exact against finite differences") {
  TinyWorld w = make_world(2, 1, 2, 0.07, 71);
  ParamVectorD theta = widen(init_params(w.mcfg, 72));
  ParamVectorD anchor = widen(init_params(w.mcfg, 73));
  const double mu = 0.5;

  // The penalty is a pure quadratic, so central differences are exact up to
  // rounding; a generous step keeps the rounding term negligible.
  std::function<double(const ParamVectorD&)> f = [&](const ParamVectorD& p) {
    double acc = 0.0;
    for (size_t i = 0; i < p.values.size(); ++i) {
      double d = p.values[i] - anchor.values[i];
      acc += d * d;
    }
    return mu * acc;
  };
  Rng pick(74);
  std::vector<int64_t> coords;
  for (int i = 0; i < 40; ++i) {
    coords.push_back(static_cast<int64_t>(pick.integer(static_cast<uint64_t>(theta.size()))));
  }
  std::vector<double> fd = finite_difference_gradient<double>(f, theta, 1e-1, coords);
  std::vector<double> analytic;
  for (int64_t c : coords) {
    analytic.push_back(2.0 * mu * (theta.values[static_cast<size_t>(c)] -
                                   anchor.values[static_cast<size_t>(c)]));
  }
  CHECK(max_rel_deviation(analytic, fd, 1e-10) <= 1e-9);
}

TEST_CASE("l2 step with mu zero is exactly a plain step") {
  TinyWorld w = make_world(3, 2, 2, 0.07, 81);
  ParamVector start = init_params(w.mcfg, 82);
  ParamVector anchor = init_params(w.mcfg, 83);
  TrainConfig cfg;
  cfg.l2_mu = 0.0;
  std::vector<int> batch = {1, 4};

  ParamVector theta_a = start;
  OptStateT<float> opt_a = init_opt_state(start);
  l2_reg_step(theta_a, anchor, w.videos, batch, w.bank, w.mcfg, cfg, 1e-3, opt_a);

  ParamVector theta_b = start;
  OptStateT<float> opt_b = init_opt_state(start);
  plain_step(theta_b, w.videos, batch, w.bank, w.mcfg, cfg, 1e-3, opt_b);

  check_values_equal(theta_a, theta_b);
}

TEST_CASE("a strong anchor penalty keeps the weights near the anchor") {
  TinyWorld w = make_world(2, 2, 2, 0.07, 91);
  ParamVector start = init_params(w.mcfg, 92);
  ParamVector anchor = init_params(w.mcfg, 93);

  auto run = [&](double mu) {
    TrainConfig cfg;
    cfg.mode = "l2";
    cfg.l2_mu = mu;
    cfg.optimizer = "adamw";
    cfg.lr_init = 1e-2;
    cfg.lr_final = 1e-2;
    cfg.warmup_epochs = 0;
    cfg.epochs = 50;  // n=4, B=2 -> 2 steps/epoch -> 100 steps
    cfg.batch_size = 2;
    cfg.swa_start_step = 1 << 20;  // SWA out of the way
    auto res = train(w.mcfg, cfg, w.videos, w.bank, start, anchor, 7);
    return weight_distance(widen(res.theta), widen(anchor));
  };

  double pulled = run(1e3);
  double free_run = run(0.0);
  CHECK(pulled < free_run);
  CHECK(pulled < weight_distance(widen(start), widen(anchor)));
}

TEST_CASE("iwr with zero C trains bit-identically to plain mode") {
  TinyWorld w = make_world(3, 2, 2, 0.07, 101);
  ParamVector start = init_params(w.mcfg, 102);

  auto base_cfg = []() {
    TrainConfig c;
    c.lr_init = 1e-3;
    c.lr_final = 1e-5;
    c.warmup_epochs = 1;
    c.epochs = 2;
    c.batch_size = 2;
    c.swa_cycle = 2;
    return c;
  };
  TrainConfig iwr_cfg = base_cfg();
  iwr_cfg.mode = "iwr";
  iwr_cfg.reg_coef = 0.0;
  TrainConfig plain_cfg = base_cfg();
  plain_cfg.mode = "plain";

  auto a = train(w.mcfg, iwr_cfg, w.videos, w.bank, start, start, 13);
  auto b = train(w.mcfg, plain_cfg, w.videos, w.bank, start, start, 13);

  check_reports_equal(a.reports, b.reports);
  check_values_equal(a.theta, b.theta);
  CHECK(a.swa.count == b.swa.count);
  if (a.swa.count > 0) check_values_equal(a.swa.average(), b.swa.average());
  for (const auto& r : a.reports) {
    CHECK(r.alpha == 0.0);
    CHECK(r.beta == 0.0);
    CHECK(r.reg_loss == 0.0);
  }
}

TEST_CASE("swa triggers on the documented cycle and averages what it saw") {
  TinyWorld w = make_world(2, 4, 2, 0.07, 111);  // n = 8, B = 2 -> 4 steps/epoch
  ParamVector start = init_params(w.mcfg, 112);
  TrainConfig cfg;
  cfg.mode = "plain";
  cfg.lr_init = 1e-3;
  cfg.lr_final = 1e-4;
  cfg.warmup_epochs = 1;
  cfg.epochs = 2;    // 12 steps total; auto start = (1 + 1) * 4 = 8
  cfg.batch_size = 2;
  cfg.swa_cycle = 2;  // absorb at steps 10 and 12

  std::vector<int64_t> seen_steps;
  std::vector<ParamVector> snapshots;
  std::function<void(int64_t, const ParamVector&)> hook = [&](int64_t step,
                                                               const ParamVector& th) {
    seen_steps.push_back(step);
    snapshots.push_back(th);
  };
  auto res = train(w.mcfg, cfg, w.videos, w.bank, start, start, 19, hook);
  CHECK(res.total_steps == 12);
  REQUIRE(seen_steps == std::vector<int64_t>{10, 12});
  CHECK(res.swa.count == 2);

  // Post-hoc mean of the recorded snapshots matches the running average.
  const ParamVector& avg = res.swa.average();
  double worst = 0.0;
  for (size_t i = 0; i < avg.values.size(); ++i) {
    double mean = 0.0;
    for (const auto& s : snapshots) mean += s.values[i];
    mean /= static_cast<double>(snapshots.size());
    worst = std::max(worst, std::abs(mean - static_cast<double>(avg.values[i])));
  }
  CHECK(worst <= 1e-6);

  // An explicit start of 0 with cycle 1 absorbs every step.
  TrainConfig every = cfg;
  every.swa_start_step = 0;
  every.swa_cycle = 1;
  auto res2 = train(w.mcfg, every, w.videos, w.bank, start, start, 19);
  CHECK(res2.swa.count == 12);

  // A start past the end of the run leaves the average empty.
  TrainConfig never = cfg;
  never.swa_start_step = 1 << 20;
  auto res3 = train(w.mcfg, never, w.videos, w.bank, start, start, 19);
  CHECK(res3.swa.count == 0);
  CHECK_THROWS_AS(res3.swa.average(), InvariantError);
}

TEST_CASE("training is deterministic and zero epochs is the identity") {
  TinyWorld w = make_world(3, 2, 2, 0.07, 121);
  ParamVector start = init_params(w.mcfg, 122);
  TrainConfig cfg;
  cfg.mode = "iwr";
  cfg.lr_init = 1e-3;
  cfg.lr_final = 1e-4;
  cfg.warmup_epochs = 1;
  cfg.epochs = 2;
  cfg.batch_size = 2;

  auto a = train(w.mcfg, cfg, w.videos, w.bank, start, start, 5);
  auto b = train(w.mcfg, cfg, w.videos, w.bank, start, start, 5);
  check_reports_equal(a.reports, b.reports);
  check_values_equal(a.theta, b.theta);

  auto c = train(w.mcfg, cfg, w.videos, w.bank, start, start, 6);
  bool same = a.reports.size() == c.reports.size();
  if (same) {
    same = false;
    for (size_t i = 0; i < a.reports.size(); ++i) {
      if (a.reports[i].base_loss != c.reports[i].base_loss) same = true;
    }
    CHECK(same);  // a different seed must change the trajectory somewhere
  }

  TrainConfig idle = cfg;
  idle.warmup_epochs = 0;
  idle.epochs = 0;
  auto d = train(w.mcfg, idle, w.videos, w.bank, start, start, 5);
  CHECK(d.reports.empty());
  CHECK(d.total_steps == 0);
  CHECK(d.swa.count == 0);
  check_values_equal(d.theta, start);

  // A class with no prompt is rejected up front.
  std::vector<int> keep = {w.bank.ids()[0]};
  ClassPromptBank partial = w.bank.subset(keep);
  CHECK_THROWS_AS(train(w.mcfg, cfg, w.videos, partial, start, start, 5), UsageError);
}

TEST_CASE("a saved state resumes the identical trajectory") {
  TinyWorld w = make_world(3, 2, 2, 0.07, 131);
  ParamVector start = init_params(w.mcfg, 132);
  TrainConfig cfg;
  cfg.mode = "iwr";
  cfg.lr_init = 1e-3;
  cfg.lr_final = 1e-4;
  cfg.warmup_epochs = 1;
  cfg.epochs = 3;  // n=6, B=2 -> 3 steps/epoch -> 12 steps
  cfg.batch_size = 2;
  cfg.swa_cycle = 2;

  // Uninterrupted reference run.
  auto full = train(w.mcfg, cfg, w.videos, w.bank, start, start, 77);
  REQUIRE(full.total_steps == 12);

  // Stop at step 6, round-trip the state through disk, continue to the end.
  TempDir tmp;
  TrainState st = init_train_state(start, 77);
  std::vector<LossReport> first_half;
  train_steps(w.mcfg, cfg, w.videos, w.bank, start, st, 6, first_half);
  CHECK(st.next_step == 7);
  save_train_state(tmp.path("state.ovcp"), st);

  TrainState loaded = load_train_state(tmp.path("state.ovcp"));
  CHECK(loaded.next_step == 7);
  CHECK(loaded.opt.t == st.opt.t);
  check_values_equal(loaded.theta, st.theta);

  std::vector<LossReport> second_half;
  train_steps(w.mcfg, cfg, w.videos, w.bank, start, loaded, -1, second_half);
  check_values_equal(loaded.theta, full.theta);
  CHECK(loaded.swa.count == full.swa.count);
  if (full.swa.count > 0) check_values_equal(loaded.swa.average(), full.swa.average());

  REQUIRE(first_half.size() + second_half.size() == full.reports.size());
  std::vector<LossReport> stitched = first_half;
  stitched.insert(stitched.end(), second_half.begin(), second_half.end());
  check_reports_equal(stitched, full.reports);

  // Corrupt kinds are rejected.
  CHECK_THROWS_AS(load_train_state(tmp.path("missing.ovcp")), IoError);
  write_container(tmp.path("other.ovcp"), tensors_from_params(start),
                  nlohmann::json{{"kind", "dataset"}});
  CHECK_THROWS_AS(load_train_state(tmp.path("other.ovcp")), IoError);
}

TEST_CASE("a run that only produces non-finite steps aborts loudly") {
  TinyWorld w = make_world(2, 4, 2, 0.07, 141);
  ParamVector start = init_params(w.mcfg, 142);
  TrainConfig cfg;
  cfg.mode = "plain";
  cfg.optimizer = "sgd";
  cfg.lr_init = 1e30;  // drives the weights far enough to overflow attention
  cfg.lr_final = 1e30;
  cfg.warmup_epochs = 0;
  cfg.epochs = 5;  // 20 scheduled steps, plenty past the streak limit
  cfg.batch_size = 2;

  TrainState st = init_train_state(start, 3);
  std::vector<LossReport> reports;
  CHECK_THROWS_WITH_AS(
      train_steps(w.mcfg, cfg, w.videos, w.bank, start, st, -1, reports),
      doctest::Contains("aborted"), InvariantError);
  CHECK(st.bad_streak > cfg.max_bad_steps);
  CHECK(values_finite(st.theta));  // failed candidates were never committed
}

TEST_CASE("smoke: two hundred steps reduce the training loss") {
  // Median trend over five seeds; each run is tiny but real.
  std::vector<double> deltas;
  for (uint64_t seed : {1u, 2u, 3u, 4u, 5u}) {
    TinyWorld w = make_world(3, 4, 2, 0.07, 200 + seed);
    ParamVector start = init_params(w.mcfg, 300 + seed);
    TrainConfig cfg;
    cfg.mode = "plain";
    cfg.lr_init = 3e-3;  // desk-scale rate; the defaults assume a huge model
    cfg.lr_final = 3e-4;
    cfg.warmup_epochs = 1;
    cfg.epochs = 33;  // n=12, B=2 -> 6 steps/epoch -> 204 steps
    cfg.batch_size = 2;
    auto res = train(w.mcfg, cfg, w.videos, w.bank, start, start, seed);
    REQUIRE(res.reports.size() >= 20);
    double head = 0.0, tail = 0.0;
    for (int i = 0; i < 10; ++i) {
      head += res.reports[static_cast<size_t>(i)].base_loss;
      tail += res.reports[res.reports.size() - 1 - static_cast<size_t>(i)].base_loss;
    }
    deltas.push_back((tail - head) / 10.0);
  }
  std::sort(deltas.begin(), deltas.end());
  CHECK(deltas[2] < 0.0);  // median seed improved
}

}  // TEST_SUITE
