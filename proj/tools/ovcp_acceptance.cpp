// Behavioural acceptance suite: ten criteria, one pass/fail line each.
//
// 1-5 are numeric properties of the library (gradient identity, finite
// differences, swa/patch commutation, static-video equivalence, exact patch
// endpoints). 6-9 reproduce the qualitative training claims at desk scale on
// the synthetic corpus: temporal attention separates the motion-only pair,
// plain fine-tuning forgets the pretraining classes while the regularized +
// averaged run recovers the trade-off, the two ingredients are complementary,
// and the anchor penalty baseline trails at matched close-set accuracy.
// 10 drives the installed binary end to end and checks rerun determinism.
//
// Tolerances and thresholds are pinned next to each criterion. Experiments
// share one dataset; the five repetitions vary initialisation and batch
// order. Run with --criterion N for a single line, default runs all ten.

#include <sys/wait.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "CLI11.hpp"
#include "ovcp/checkpoint.hpp"
#include "ovcp/data.hpp"
#include "ovcp/eval.hpp"
#include "ovcp/model.hpp"
#include "ovcp/training.hpp"
#include "ovcp/weightspace.hpp"

namespace fs = std::filesystem;

namespace ovcp {
namespace {

// ---------------------------------------------------------------------------
// Shared helpers
// ---------------------------------------------------------------------------

struct Outcome {
  bool pass = false;
  std::string detail;
};

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::string fmt(double x, int prec = 3) {
  std::ostringstream ss;
  ss << std::setprecision(prec) << x;
  return ss.str();
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// Frames of a t=1 set repeated to full clip length: static clips whose labels
// are the original image classes.
VideoSet repeat_frames(const VideoSet& src, int t) {
  VideoSet out;
  out.n = src.n;
  out.t = t;
  out.h = src.h;
  out.w = src.w;
  out.c = src.c;
  out.class_ids = src.class_ids;
  out.pixels.reserve(static_cast<size_t>(src.n) * static_cast<size_t>(out.video_numel()));
  for (int i = 0; i < src.n; ++i) {
    std::vector<float> clip = gen_static_video(src.video(i), src.h, src.w, src.c, t);
    out.pixels.insert(out.pixels.end(), clip.begin(), clip.end());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Small world for the numeric criteria (1-5): one block, 8x8 frames, 64-bit
// checks run in well under a second.
// ---------------------------------------------------------------------------

struct SmallWorld {
  ModelConfig mcfg;
  DatasetBundle ds;
  ClassPromptBank bank;

  SmallWorld()
      : mcfg{},
        ds{make_ds()},
        bank{ClassPromptBank::build(ds.all_prompts(), 32, prompt_bank_seed(ds))} {
    mcfg.frame_size = 8;
    mcfg.patch_size = 4;
    mcfg.frames_t = 4;
    mcfg.embed_dim = 32;
    mcfg.num_layers = 1;
    mcfg.num_heads = 2;
    mcfg.window = 1;
    mcfg.temperature = 1.0;
  }

  static DatasetBundle make_ds() {
    DataConfig d;
    d.frame_size = 8;
    d.frames_t = 4;
    d.train_per_class = 3;
    d.eval_per_class = 1;
    return gen_dataset(d, 20240817ull);
  }
};

const SmallWorld& small_world() {
  static SmallWorld w;
  return w;
}

// ---------------------------------------------------------------------------
// Criterion 1: one backward pass through the interpolated weights equals the
// two-pass gradient combination, to 1e-9 relative (64-bit), across the alpha
// grid and five random batches, in under 30 seconds.
// ---------------------------------------------------------------------------

Outcome criterion1() {
  constexpr double kTol = 1e-9;
  constexpr double kBudgetSec = 30.0;
  const auto t0 = std::chrono::steady_clock::now();
  const SmallWorld& w = small_world();

  const ParamVectorD theta = widen(init_params(w.mcfg, 31));
  const ParamVectorD anchor = widen(init_params(w.mcfg, 32));
  const double alphas[] = {0.1, 0.3, 0.59};

  Rng rng(seed_stream(7, "acceptance batches"));
  double worst = 0.0;
  for (int b = 0; b < 5; ++b) {
    std::vector<int> batch(4);
    for (auto& i : batch) {
      i = static_cast<int>(rng.integer(static_cast<uint64_t>(w.ds.finetune_train.n)));
    }
    for (double a : alphas) {
      worst = std::max(worst, check_grad_identity(theta, anchor, w.ds.finetune_train, batch,
                                                  w.bank, w.mcfg, a, 0.5));
    }
  }
  const double dt = seconds_since(t0);
  Outcome o;
  o.pass = worst <= kTol && dt < kBudgetSec;
  o.detail = "gradient identity worst " + fmt(worst) + " (tol " + fmt(kTol) +
             ", alpha {0.1,0.3,0.59} x 5 batches, " + fmt(dt, 2) + "s)";
  return o;
}

// ---------------------------------------------------------------------------
// Criterion 2: backprop of the combined objective agrees with central finite
// differences to 1e-6 relative (64-bit) on >= 64 sampled coordinates. The
// relative deviation uses a 1e-4 absolute floor: central differences carry
// cancellation noise of order eps*|f|/h ~ 1e-11, so coordinates whose true
// gradient sits below the floor would compare noise against noise.
// ---------------------------------------------------------------------------

Outcome criterion2() {
  constexpr double kTol = 1e-6;
  constexpr double kStep = 1e-5;
  constexpr double kFloor = 1e-4;
  const SmallWorld& w = small_world();

  const ParamVectorD theta = widen(init_params(w.mcfg, 41));
  const ParamVectorD anchor = widen(init_params(w.mcfg, 42));
  const std::vector<int> batch = {0, 7, 13, 22};
  const double al = 0.3, reg = 0.5;

  std::vector<int64_t> coords;
  const int64_t stride = std::max<int64_t>(1, theta.size() / 64);
  for (int64_t i = 0; i < theta.size(); i += stride) coords.push_back(i);

  GradResultT<double> g1 = loss_and_grad<double>(w.ds.finetune_train, batch, w.bank, theta, w.mcfg);
  GradResultT<double> g2 = loss_and_grad<double>(w.ds.finetune_train, batch, w.bank,
                                                 interpolate(anchor, theta, al), w.mcfg);
  std::vector<double> bp;
  for (int64_t c : coords) {
    const size_t i = static_cast<size_t>(c);
    bp.push_back(g1.grad.values[i] + reg * g2.grad.values[i]);
  }

  std::function<double(const ParamVectorD&)> f = [&](const ParamVectorD& p) {
    const double l1 = contrastive_loss<double>(w.ds.finetune_train, batch, w.bank, p, w.mcfg);
    const double l2 = contrastive_loss<double>(w.ds.finetune_train, batch, w.bank,
                                               interpolate(anchor, p, al), w.mcfg);
    return l1 + reg / (1.0 - al) * l2;
  };
  std::vector<double> fd = finite_difference_gradient<double>(f, theta, kStep, coords);

  const double dev = max_rel_deviation(bp, fd, kFloor);
  Outcome o;
  o.pass = dev <= kTol;
  o.detail = "finite differences worst " + fmt(dev) + " rel (tol " + fmt(kTol) + ", " +
             std::to_string(coords.size()) + " coordinates)";
  return o;
}

// ---------------------------------------------------------------------------
// Criterion 3: averaging snapshots commutes with patching toward an anchor:
// <= 1e-6 in 32-bit and <= 1e-12 in 64-bit, for 1/8/32 snapshots and lambda
// in {0, 0.5, 1}.
// ---------------------------------------------------------------------------

Outcome criterion3() {
  constexpr double kTol32 = 1e-6;
  constexpr double kTol64 = 1e-12;
  const SmallWorld& w = small_world();

  const ParamVector anchor32 = init_params(w.mcfg, 51);
  const ParamVectorD anchor64 = widen(anchor32);
  double worst32 = 0.0, worst64 = 0.0;
  for (int n : {1, 8, 32}) {
    std::vector<ParamVector> snaps32;
    std::vector<ParamVectorD> snaps64;
    for (int i = 0; i < n; ++i) {
      snaps32.push_back(init_params(w.mcfg, 60 + static_cast<uint64_t>(i)));
      snaps64.push_back(widen(snaps32.back()));
    }
    for (double lam : {0.0, 0.5, 1.0}) {
      worst32 = std::max(worst32, check_swa_commutation(anchor32, snaps32, lam));
      worst64 = std::max(worst64, check_swa_commutation(anchor64, snaps64, lam));
    }
  }
  Outcome o;
  o.pass = worst32 <= kTol32 && worst64 <= kTol64;
  o.detail = "swa/patch commutation worst " + fmt(worst32) + " f32 / " + fmt(worst64) +
             " f64 (tol " + fmt(kTol32) + " / " + fmt(kTol64) + ", N {1,8,32}, lambda {0,0.5,1})";
  return o;
}

// ---------------------------------------------------------------------------
// Criterion 4: a clip of identical frames embeds exactly like its frame: the
// windowed encoder matches the frame-by-frame image encoder within 1e-5 per
// coordinate (32-bit) over 20 static videos and 5 random weight draws.
// ---------------------------------------------------------------------------

Outcome criterion4() {
  constexpr double kTol = 1e-5;
  const SmallWorld& w = small_world();

  VideoSet statics = repeat_frames(w.ds.pretrain_eval, w.mcfg.frames_t);
  const int n_videos = std::min(20, statics.n);
  Encoder<float> enc(w.mcfg);

  double worst = 0.0;
  for (uint64_t s = 71; s <= 75; ++s) {
    const ParamVector theta = init_params(w.mcfg, s);
    for (int i = 0; i < n_videos; ++i) {
      Tape t1;
      auto b1 = enc.bind(t1, theta, /*requires_grad=*/false);
      const auto& e1 = t1.value(enc.video_embedding(t1, b1, statics.video(i), w.mcfg.window)).v;
      Tape t2;
      auto b2 = enc.bind(t2, theta, /*requires_grad=*/false);
      const auto& e2 = t2.value(enc.frames_imagewise_embedding(t2, b2, statics.video(i))).v;
      for (size_t k = 0; k < e1.size(); ++k) {
        worst = std::max(worst, static_cast<double>(std::abs(e1[k] - e2[k])));
      }
    }
  }
  Outcome o;
  o.pass = worst <= kTol;
  o.detail = "static-video equivalence worst " + fmt(worst) + " (tol " + fmt(kTol) + ", " +
             std::to_string(n_videos) + " clips x 5 weight draws)";
  return o;
}

// ---------------------------------------------------------------------------
// Criterion 5: the lambda sweep's endpoints reproduce the direct evaluation
// of the two parent weight vectors bit for bit.
// ---------------------------------------------------------------------------

Outcome criterion5() {
  const SmallWorld& w = small_world();
  const ParamVector theta_clip = init_params(w.mcfg, 81);
  const ParamVector theta_end = init_params(w.mcfg, 82);

  const std::vector<int> cs_ids = w.ds.ids_in(Pool::kFinetune);
  const std::vector<int> zs_ids = w.ds.ids_in(Pool::kPretrain);
  const VideoSet zs_videos = repeat_frames(w.ds.pretrain_eval, w.mcfg.frames_t);
  const std::vector<double> grid = {0.0, 0.5, 1.0};

  TradeoffCurve curve = sweep_lambda(theta_clip, theta_end, grid, w.ds.finetune_eval, cs_ids,
                                     zs_videos, zs_ids, w.bank, w.mcfg);

  const double cs_end = zero_shot_accuracy(w.ds.finetune_eval, w.bank, cs_ids, theta_end, w.mcfg).top1;
  const double zs_end = zero_shot_accuracy(zs_videos, w.bank, zs_ids, theta_end, w.mcfg).top1;
  const double cs_clip =
      zero_shot_accuracy(w.ds.finetune_eval, w.bank, cs_ids, theta_clip, w.mcfg).top1;
  const double zs_clip = zero_shot_accuracy(zs_videos, w.bank, zs_ids, theta_clip, w.mcfg).top1;

  const bool exact = curve.front().closeset_top1 == cs_end && curve.front().zeroshot_top1 == zs_end &&
                     curve.back().closeset_top1 == cs_clip && curve.back().zeroshot_top1 == zs_clip;
  Outcome o;
  o.pass = exact;
  o.detail = std::string("sweep endpoints ") + (exact ? "bit-exact" : "DIFFER") +
             " (lambda 0 -> end weights, lambda 1 -> anchor weights)";
  return o;
}

// ---------------------------------------------------------------------------
// Desk-scale world for the behavioural criteria (6-9). One dataset; the five
// repetitions vary weight initialisation and batch order. Forgetting is read
// on two axes: unseen clips of the pretraining classes (what fine-tuning
// directly erodes) and the zero-shot pool (classes absent from both phases).
// ---------------------------------------------------------------------------

constexpr uint64_t kSeeds[] = {11, 12, 13, 14, 15};

struct DeskWorld {
  ModelConfig mcfg;  // video geometry, window 1
  DatasetBundle ds;
  ClassPromptBank bank;       // all prompts; per-prompt embeddings are stable
  ClassPromptBank bank_pre;   // pretraining label space
  ClassPromptBank bank_fine;  // fine-tuning label space
  VideoSet heldout_static;    // unseen clips of the pretraining classes
  std::vector<int> pretrain_ids, finetune_ids, zeroshot_ids;

  DeskWorld() {
    mcfg.frame_size = 12;
    mcfg.patch_size = 4;
    mcfg.frames_t = 4;
    mcfg.embed_dim = 32;
    mcfg.num_layers = 2;
    mcfg.num_heads = 4;
    mcfg.window = 1;
    mcfg.temperature = 0.07;

    DataConfig d;
    d.frame_size = 12;
    d.frames_t = 4;
    d.train_per_class = 24;
    d.eval_per_class = 10;
    ds = gen_dataset(d, 97);

    bank = ClassPromptBank::build(ds.all_prompts(), mcfg.embed_dim, prompt_bank_seed(ds));
    bank_pre =
        ClassPromptBank::build(ds.prompts_in(Pool::kPretrain), mcfg.embed_dim, prompt_bank_seed(ds));
    bank_fine =
        ClassPromptBank::build(ds.prompts_in(Pool::kFinetune), mcfg.embed_dim, prompt_bank_seed(ds));
    heldout_static = repeat_frames(ds.pretrain_eval, mcfg.frames_t);
    pretrain_ids = ds.ids_in(Pool::kPretrain);
    finetune_ids = ds.ids_in(Pool::kFinetune);
    zeroshot_ids = ds.ids_in(Pool::kZeroshot);
  }
};

const DeskWorld& desk_world() {
  static DeskWorld w;
  return w;
}

TrainConfig pretrain_config() {
  TrainConfig t;
  t.mode = "plain";
  t.lr_init = 2e-3;
  t.lr_final = 2e-5;
  t.warmup_epochs = 1;
  t.epochs = 20;
  t.batch_size = 8;
  t.swa_start_step = int64_t{1} << 40;  // averaging plays no role here
  return t;
}

// Fine-tuning deliberately stays gentle (mild rate, short run, a warm tail):
// pushed harder, every run forgets so completely that the retention axis
// collapses and patching has nothing left to recover. The regularized run
// gets twice the epochs: it converges more slowly by design, and the average
// only starts once the trajectory has settled (last 30%, five-step cycle).
TrainConfig finetune_config(const std::string& mode) {
  TrainConfig t;
  t.mode = mode;
  t.lr_init = 1e-3;
  t.lr_final = 3e-4;
  t.warmup_epochs = 1;
  t.epochs = mode == "iwr" ? 60 : 30;
  t.batch_size = 8;
  t.alpha_max = 0.6;
  t.reg_coef = 0.5;
  t.swa_cycle = 5;
  const int64_t spe = steps_per_epoch(desk_world().ds.finetune_train.n, t.batch_size);
  t.swa_start_step =
      static_cast<int64_t>(0.7 * static_cast<double>((t.warmup_epochs + t.epochs) * spe));
  return t;
}

// Per-seed training stages, cached lazily so each criterion's process only
// pays for the runs it actually reads.

// Pretrained anchor: single frames, window closed; the weights are
// shape-compatible with the video geometry.
const ParamVector& anchor(uint64_t seed) {
  static std::map<uint64_t, ParamVector> cache;
  auto it = cache.find(seed);
  if (it != cache.end()) return it->second;
  const DeskWorld& w = desk_world();
  ModelConfig img = w.mcfg;
  img.frames_t = 1;
  img.window = 0;
  ParamVector theta = train<float>(img, pretrain_config(), w.ds.pretrain_train, w.bank_pre,
                                   init_params(img, seed), init_params(img, seed), seed)
                          .theta;
  return cache.emplace(seed, std::move(theta)).first->second;
}

// Fine-tuning runs for criteria 7-9, all starting from the seed's anchor.
struct SeedMethods {
  ParamVector plain_final;  // plain fine-tune endpoint
  ParamVector plain_swa;    // its swa average (the "no IWR" ablation)
  ParamVector iwr_final;    // regularized endpoint (the "no SWA" ablation)
  ParamVector iwr_swa;      // full method
  std::map<double, ParamVector> l2_final;  // anchor-penalty endpoints by mu
};

const SeedMethods& methods(uint64_t seed) {
  static std::map<uint64_t, SeedMethods> cache;
  auto it = cache.find(seed);
  if (it != cache.end()) return it->second;

  const DeskWorld& w = desk_world();
  const ParamVector& theta_a = anchor(seed);
  auto finetune = [&](TrainConfig tc) {
    return train<float>(w.mcfg, tc, w.ds.finetune_train, w.bank_fine, theta_a, theta_a, seed);
  };

  SeedMethods m;
  TrainResult plain = finetune(finetune_config("plain"));
  m.plain_final = std::move(plain.theta);
  m.plain_swa = plain.swa.average();

  TrainResult iwr = finetune(finetune_config("iwr"));
  m.iwr_final = std::move(iwr.theta);
  m.iwr_swa = iwr.swa.average();

  for (double mu : {1e-4, 1e-3, 1e-2}) {
    TrainConfig tc = finetune_config("l2");
    tc.l2_mu = mu;
    m.l2_final[mu] = finetune(tc).theta;
  }

  return cache.emplace(seed, std::move(m)).first->second;
}

double closeset_top1(const ParamVector& theta) {
  const DeskWorld& w = desk_world();
  return zero_shot_accuracy(w.ds.finetune_eval, w.bank, w.finetune_ids, theta, w.mcfg).top1;
}

double heldout_top1(const ParamVector& theta) {
  const DeskWorld& w = desk_world();
  return zero_shot_accuracy(w.heldout_static, w.bank, w.pretrain_ids, theta, w.mcfg).top1;
}

double zeroshot_top1(const ParamVector& theta) {
  const DeskWorld& w = desk_world();
  return zero_shot_accuracy(w.ds.zeroshot_eval, w.bank, w.zeroshot_ids, theta, w.mcfg).top1;
}

// Patched trade-off curve of a fine-tuned endpoint against the seed's anchor:
// close-set axis on the fine-tuning classes, zero-shot axis on the held-out
// pretraining clips ("-h" keys) or the zero-shot pool ("-z" keys).
const TradeoffCurve& cached_curve(uint64_t seed, const std::string& key,
                                  const ParamVector& theta_end) {
  static std::map<std::pair<uint64_t, std::string>, TradeoffCurve> cache;
  const auto k = std::make_pair(seed, key);
  auto it = cache.find(k);
  if (it != cache.end()) return it->second;
  const DeskWorld& w = desk_world();
  const bool pool_axis = key.size() >= 2 && key.compare(key.size() - 2, 2, "-z") == 0;
  const VideoSet& zs_videos = pool_axis ? w.ds.zeroshot_eval : w.heldout_static;
  const std::vector<int>& zs_ids = pool_axis ? w.zeroshot_ids : w.pretrain_ids;
  TradeoffCurve c = sweep_lambda(anchor(seed), theta_end, default_lambda_grid(),
                                 w.ds.finetune_eval, w.finetune_ids, zs_videos, zs_ids, w.bank,
                                 w.mcfg);
  return cache.emplace(k, std::move(c)).first->second;
}

// Best zero-shot accuracy among grid points whose close-set accuracy stays
// within `slack` of the reference; -1 when no point qualifies.
double best_zs_at(const TradeoffCurve& c, double cs_ref, double slack) {
  double best = -1.0;
  for (const auto& p : c) {
    if (p.closeset_top1 >= cs_ref - slack) best = std::max(best, p.zeroshot_top1);
  }
  return best;
}

double max_cs(const TradeoffCurve& c) {
  double best = 0.0;
  for (const auto& p : c) best = std::max(best, p.closeset_top1);
  return best;
}

// ---------------------------------------------------------------------------
// Criterion 6: the window is what separates the motion-only pair. A plain
// fine-tune on just the two motion classes reaches >= 90% pairwise accuracy
// with window 1; the same run with the window closed caps at <= 60% (the two
// directions sweep the same positions in a different order, so a frame-wise
// model sees identical marginals). Medians over five seeds, within a
// 10-minute budget. The pair-only run is long and hot by the standards of
// criteria 7-9: nothing needs retaining here, the question is purely whether
// the information is reachable.
// ---------------------------------------------------------------------------

std::pair<int, int> motion_only_pair(const DatasetBundle& ds) {
  const std::vector<int> ids = ds.ids_in(Pool::kFinetune);
  for (size_t i = 0; i < ids.size(); ++i) {
    for (size_t j = i + 1; j < ids.size(); ++j) {
      const ClassDef& a = ds.class_of(ids[i]);
      const ClassDef& b = ds.class_of(ids[j]);
      if (a.shape == b.shape && a.color == b.color && a.speed == b.speed &&
          a.direction != b.direction) {
        return {a.id, b.id};
      }
    }
  }
  throw InvariantError("no motion-only pair in the finetune pool");
}

Outcome criterion6() {
  constexpr double kBudgetSec = 600.0;
  const auto t0 = std::chrono::steady_clock::now();
  const DeskWorld& w = desk_world();

  const auto [id_a, id_b] = motion_only_pair(w.ds);
  const std::vector<int> pair_ids = {id_a, id_b};
  const VideoSet pair_train = w.ds.finetune_train.filter_classes(pair_ids);
  const VideoSet pair_eval = w.ds.finetune_eval.filter_classes(pair_ids);
  const ClassPromptBank pair_bank = ClassPromptBank::build(
      std::vector<ClassPrompt>{w.ds.class_of(id_a).prompt(), w.ds.class_of(id_b).prompt()},
      w.mcfg.embed_dim, prompt_bank_seed(w.ds));

  TrainConfig tc;
  tc.mode = "plain";
  tc.lr_init = 5e-3;
  tc.lr_final = 5e-5;
  tc.warmup_epochs = 1;
  tc.epochs = 150;
  tc.batch_size = 8;
  tc.swa_start_step = int64_t{1} << 40;

  ModelConfig w0 = w.mcfg;
  w0.window = 0;

  std::vector<double> acc_w1, acc_w0;
  for (uint64_t seed : kSeeds) {
    const ParamVector& theta_a = anchor(seed);
    const ParamVector t1 =
        train<float>(w.mcfg, tc, pair_train, pair_bank, theta_a, theta_a, seed).theta;
    const ParamVector t0w =
        train<float>(w0, tc, pair_train, pair_bank, theta_a, theta_a, seed).theta;
    acc_w1.push_back(zero_shot_accuracy(pair_eval, w.bank, pair_ids, t1, w.mcfg).top1);
    acc_w0.push_back(zero_shot_accuracy(pair_eval, w.bank, pair_ids, t0w, w0).top1);
  }
  const double med1 = median(acc_w1), med0 = median(acc_w0);
  const double dt = seconds_since(t0);
  Outcome o;
  o.pass = med1 >= 0.90 && med0 <= 0.60 && dt <= kBudgetSec;
  o.detail = "motion pair acc median " + fmt(med1 * 100, 4) + "% with window vs " +
             fmt(med0 * 100, 4) + "% without (need >= 90 / <= 60, " + fmt(dt, 3) + "s)";
  return o;
}

// ---------------------------------------------------------------------------
// Criterion 7: plain fine-tuning forgets the pretraining classes by >= 5
// points; the full method, patched at its best grid lambda whose close-set
// accuracy stays within 2 points of plain's, wins the held-out axis back by
// >= 5 points over plain. Medians over five seeds.
// ---------------------------------------------------------------------------

Outcome criterion7() {
  constexpr double kDropPts = 5.0;
  constexpr double kGainPts = 5.0;
  constexpr double kCsSlack = 0.02;

  std::vector<double> drops, gains, cs_gaps;
  for (uint64_t seed : kSeeds) {
    const SeedMethods& m = methods(seed);
    const double zs_anchor = heldout_top1(anchor(seed));
    const double zs_plain = heldout_top1(m.plain_final);
    const double cs_plain = closeset_top1(m.plain_final);
    drops.push_back((zs_anchor - zs_plain) * 100.0);

    const TradeoffCurve& full = cached_curve(seed, "full-h", m.iwr_swa);
    double best_zs = -1.0, best_cs = -1.0;
    for (const auto& p : full) {
      if (p.closeset_top1 >= cs_plain - kCsSlack && p.zeroshot_top1 > best_zs) {
        best_zs = p.zeroshot_top1;
        best_cs = p.closeset_top1;
      }
    }
    if (best_zs < 0.0) {
      gains.push_back(-100.0);  // no lambda kept close-set accuracy; count as a miss
      cs_gaps.push_back(-100.0);
    } else {
      gains.push_back((best_zs - zs_plain) * 100.0);
      cs_gaps.push_back((best_cs - cs_plain) * 100.0);
    }
  }
  const double med_drop = median(drops), med_gain = median(gains);
  Outcome o;
  o.pass = med_drop >= kDropPts && med_gain >= kGainPts;
  o.detail = "plain forgets " + fmt(med_drop, 4) + " pts (need >= " + fmt(kDropPts) +
             "); best-lambda recovery +" + fmt(med_gain, 4) + " pts zero-shot at close-set gap " +
             fmt(median(cs_gaps), 3) + " pts (need >= " + fmt(kGainPts) + " within -2)";
  return o;
}

// ---------------------------------------------------------------------------
// Criterion 8: removing either ingredient hurts. At the close-set level every
// variant can reach, the full method's best zero-shot (on the zero-shot pool)
// must be >= both ablations' (averaging only, regularization only); majority
// over the five seeds, medians reported.
// ---------------------------------------------------------------------------

Outcome criterion8() {
  constexpr double kCsSlack = 0.02;

  int wins = 0;
  std::vector<double> d_no_swa, d_no_iwr;
  for (uint64_t seed : kSeeds) {
    const SeedMethods& m = methods(seed);
    const TradeoffCurve& full = cached_curve(seed, "full-z", m.iwr_swa);
    const TradeoffCurve& no_swa = cached_curve(seed, "iwr-only-z", m.iwr_final);
    const TradeoffCurve& no_iwr = cached_curve(seed, "swa-only-z", m.plain_swa);

    const double cs_star = std::min({max_cs(full), max_cs(no_swa), max_cs(no_iwr)});
    const double zs_full = best_zs_at(full, cs_star, kCsSlack);
    const double zs_no_swa = best_zs_at(no_swa, cs_star, kCsSlack);
    const double zs_no_iwr = best_zs_at(no_iwr, cs_star, kCsSlack);

    d_no_swa.push_back((zs_full - zs_no_swa) * 100.0);
    d_no_iwr.push_back((zs_full - zs_no_iwr) * 100.0);
    if (zs_full >= zs_no_swa && zs_full >= zs_no_iwr) ++wins;
  }
  Outcome o;
  o.pass = wins >= 3;
  o.detail = "full vs ablations at matched close-set: median +" + fmt(median(d_no_swa), 4) +
             " pts over averaging-only ablation, +" + fmt(median(d_no_iwr), 4) +
             " pts over regularization-only; " + std::to_string(wins) + "/5 seeds (need >= 3)";
  return o;
}

// ---------------------------------------------------------------------------
// Criterion 9: the anchor penalty baseline trails the full method on the
// zero-shot axis at matched close-set accuracy (within 2 points), median over
// five seeds, for every mu in {1e-4, 1e-3, 1e-2}. Each penalty run is taken
// at its own endpoint - the point the penalty was tuned to sit at - and the
// full method must offer at least its zero-shot accuracy somewhere on the
// patch grid without giving up close-set accuracy beyond the slack.
// ---------------------------------------------------------------------------

Outcome criterion9() {
  constexpr double kCsSlack = 0.02;
  const double mus[] = {1e-4, 1e-3, 1e-2};

  bool all_pass = true;
  std::string per_mu;
  for (double mu : mus) {
    std::vector<double> margins;
    for (uint64_t seed : kSeeds) {
      const SeedMethods& m = methods(seed);
      const TradeoffCurve& full = cached_curve(seed, "full-z", m.iwr_swa);
      const ParamVector& l2_theta = m.l2_final.at(mu);
      const double cs_l2 = closeset_top1(l2_theta);
      const double zs_l2 = zeroshot_top1(l2_theta);
      const double zs_full = best_zs_at(full, cs_l2, kCsSlack);
      margins.push_back(zs_full < 0.0 ? -100.0 : (zs_full - zs_l2) * 100.0);
    }
    const double med = median(margins);
    all_pass = all_pass && med >= 0.0;
    if (!per_mu.empty()) per_mu += ", ";
    per_mu += "mu " + fmt(mu) + ": +" + fmt(med, 4) + " pts";
  }
  Outcome o;
  o.pass = all_pass;
  o.detail = "zero-shot margin over anchor penalty at matched close-set (" + per_mu +
             "; need >= 0 each)";
  return o;
}

// ---------------------------------------------------------------------------
// Criterion 10: rerunning any command with the same config and seed yields
// byte-identical artifacts. Drives the actual binary end to end.
// ---------------------------------------------------------------------------

struct TempDir {
  fs::path dir;
  TempDir() {
    dir = fs::temp_directory_path() / ("ovcp_acc_" + std::to_string(::getpid()));
    fs::remove_all(dir);
    fs::create_directories(dir);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(dir, ec);
  }
  std::string path(const std::string& name) const { return (dir / name).string(); }
};

int run_tool(const std::string& args) {
  const std::string cmd = std::string(OVCP_BIN) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

Outcome criterion10() {
  TempDir tmp;
  {
    std::ofstream cfg(tmp.path("cfg.json"));
    cfg << R"({"seed": 7,
               "model": {"frame_size": 8, "patch_size": 4, "frames_t": 4, "embed_dim": 32,
                         "num_layers": 1, "num_heads": 2, "window": 1, "temperature": 1.0},
               "train": {"lr_init": 1e-3, "lr_final": 1e-5, "warmup_epochs": 1, "epochs": 2,
                         "batch_size": 4, "swa_cycle": 3},
               "data": {"frame_size": 8, "frames_t": 4, "train_per_class": 3,
                        "eval_per_class": 2}})";
  }
  const std::string c = " -c " + tmp.path("cfg.json");

  std::vector<std::string> mismatches;
  auto expect_equal = [&](const std::string& what, const std::string& p1, const std::string& p2) {
    const std::string b1 = slurp(p1), b2 = slurp(p2);
    if (b1.empty() || b1 != b2) mismatches.push_back(what);
  };
  auto expect_ok = [&](int rc, const std::string& what) {
    if (rc != 0) mismatches.push_back(what + " exited " + std::to_string(rc));
  };

  for (const char* rep : {"a", "b"}) {
    const std::string r = tmp.path(rep);
    fs::create_directories(r);
    expect_ok(run_tool("gen-data" + c + " -o " + r + "/data"), "gen-data");
    expect_ok(run_tool("pretrain" + c + " --data " + r + "/data/dataset.ovcp -o " + r + "/pre"),
              "pretrain");
    expect_ok(run_tool("train" + c + " --data " + r + "/data/dataset.ovcp --init " + r +
                       "/pre/pretrained.ovcp -o " + r + "/ft"),
              "train");
    expect_ok(run_tool("patch --clip " + r + "/pre/pretrained.ovcp --swa " + r +
                       "/ft/swa.ovcp --lam 0.3 -o " + r + "/patched.ovcp"),
              "patch");
    expect_ok(run_tool("eval" + c + " --ckpt " + r + "/patched.ovcp --data " + r +
                       "/data/dataset.ovcp --protocol ep2 -o " + r + "/e2"),
              "eval");
  }
  const std::string a = tmp.path("a"), b = tmp.path("b");
  expect_equal("dataset blob", a + "/data/dataset.ovcp", b + "/data/dataset.ovcp");
  expect_equal("manifest", a + "/data/manifest.json", b + "/data/manifest.json");
  expect_equal("pretrained checkpoint", a + "/pre/pretrained.ovcp", b + "/pre/pretrained.ovcp");
  expect_equal("pretrain metrics", a + "/pre/metrics.jsonl", b + "/pre/metrics.jsonl");
  expect_equal("finetuned checkpoint", a + "/ft/finetuned.ovcp", b + "/ft/finetuned.ovcp");
  expect_equal("swa checkpoint", a + "/ft/swa.ovcp", b + "/ft/swa.ovcp");
  expect_equal("train metrics", a + "/ft/metrics.jsonl", b + "/ft/metrics.jsonl");
  expect_equal("patched checkpoint", a + "/patched.ovcp", b + "/patched.ovcp");
  expect_equal("eval output", a + "/e2/ep2.json", b + "/e2/ep2.json");

  Outcome o;
  o.pass = mismatches.empty();
  if (o.pass) {
    o.detail = "rerun of gen-data/pretrain/train/patch/eval produced byte-identical artifacts";
  } else {
    o.detail = "mismatches:";
    for (const auto& m : mismatches) o.detail += " " + m + ";";
  }
  return o;
}

int run_acceptance(int criterion) {
  using Fn = Outcome (*)();
  const Fn table[] = {criterion1, criterion2, criterion3, criterion4, criterion5,
                      criterion6, criterion7, criterion8, criterion9, criterion10};
  int failures = 0;
  for (int i = 1; i <= 10; ++i) {
    if (criterion != 0 && criterion != i) continue;
    Outcome o = table[i - 1]();
    std::cout << "criterion " << i << ": " << (o.pass ? "pass" : "FAIL") << " - " << o.detail
              << "\n";
    if (!o.pass) ++failures;
  }
  return failures == 0 ? 0 : 2;
}

}  // namespace
}  // namespace ovcp

int main(int argc, char** argv) {
  CLI::App app{"behavioural acceptance suite"};
  int criterion = 0;
  app.add_option("--criterion", criterion, "run a single criterion 1-10 (default: all)")
      ->check(CLI::Range(1, 10));
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }
  try {
    return ovcp::run_acceptance(criterion);
  } catch (const ovcp::UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const ovcp::InvariantError& e) {
    std::cerr << "invariant failure: " << e.what() << "\n";
    return 2;
  } catch (const ovcp::IoError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return 3;
  }
}
