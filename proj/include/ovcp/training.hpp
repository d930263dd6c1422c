#pragma once
// Fine-tuning engine. One step evaluates the contrastive loss at the current
// weights and (in iwr mode) a second time at a random interpolation toward the
// frozen anchor weights; the two gradients are combined as g + C * g_interp
// and fed to the optimizer. A running weight average (SWA) is absorbed on a
// fixed step cycle once past the start step. Everything is driven by named
// rng sub-streams so a run is a pure function of (config, seed) and a resumed
// run replays the exact same trajectory.

#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "ovcp/common.hpp"
#include "ovcp/model.hpp"
#include "ovcp/tensor.hpp"
#include "ovcp/video.hpp"
#include "ovcp/weightspace.hpp"

namespace ovcp {

// ---------------------------------------------------------------------------
// Configuration.
// ---------------------------------------------------------------------------

struct TrainConfig {
  std::string mode = "iwr";         // iwr | plain | l2
  std::string optimizer = "adamw";  // adamw | sgd
  std::string precision = "f32";    // f32 | f64

  double lr_init = 3.33e-6;
  double lr_final = 3.33e-8;  // also the warm-up starting rate
  int warmup_epochs = 2;
  int epochs = 20;  // fine-tuning epochs after warm-up
  int batch_size = 8;

  double alpha_max = 0.6;  // interpolation draws are uniform on (0, alpha_max)
  double reg_coef = 0.5;   // C; weight of the interpolated-loss gradient
  double l2_mu = 1e-3;     // anchor penalty strength in l2 mode

  double weight_decay = 0.0;  // decoupled decay (adamw) / plain decay (sgd)
  double momentum = 0.9;      // sgd only

  int64_t swa_start_step = -1;  // -1: after warm-up plus one epoch
  int64_t swa_cycle = 50;       // absorb every c-th step past the start

  int max_bad_steps = 10;  // consecutive non-finite steps before aborting

  void validate() const {
    if (mode != "iwr" && mode != "plain" && mode != "l2") {
      throw UsageError("TrainConfig: mode must be iwr, plain or l2, got '" + mode + "'");
    }
    if (optimizer != "adamw" && optimizer != "sgd") {
      throw UsageError("TrainConfig: optimizer must be adamw or sgd, got '" + optimizer + "'");
    }
    if (precision != "f32" && precision != "f64") {
      throw UsageError("TrainConfig: precision must be f32 or f64, got '" + precision + "'");
    }
    if (!(lr_init > 0.0) || !std::isfinite(lr_init)) {
      throw UsageError("TrainConfig: lr_init must be positive and finite");
    }
    if (!(lr_final > 0.0) || lr_final > lr_init) {
      throw UsageError("TrainConfig: lr_final must satisfy 0 < lr_final <= lr_init");
    }
    if (warmup_epochs < 0 || epochs < 0) {
      throw UsageError("TrainConfig: epoch counts must be non-negative");
    }
    if (batch_size < 2) throw UsageError("TrainConfig: batch_size must be at least 2");
    if (!(alpha_max > 0.0 && alpha_max < 1.0)) {
      throw UsageError("TrainConfig: alpha_max must lie in (0, 1)");
    }
    if (!(reg_coef >= 0.0) || !std::isfinite(reg_coef)) {
      throw UsageError("TrainConfig: reg_coef must be non-negative and finite");
    }
    if (!(l2_mu >= 0.0) || !std::isfinite(l2_mu)) {
      throw UsageError("TrainConfig: l2_mu must be non-negative and finite");
    }
    if (!(weight_decay >= 0.0)) throw UsageError("TrainConfig: weight_decay must be non-negative");
    if (!(momentum >= 0.0 && momentum < 1.0)) {
      throw UsageError("TrainConfig: momentum must lie in [0, 1)");
    }
    if (swa_cycle < 1) throw UsageError("TrainConfig: swa_cycle must be at least 1");
    if (max_bad_steps < 0) throw UsageError("TrainConfig: max_bad_steps must be non-negative");
  }
};

// One committed optimizer step. Failed (non-finite) steps never produce a
// report; every field here is finite by construction.
struct LossReport {
  int64_t step = 0;  // 1-based position in the overall schedule
  double lr = 0.0;
  double base_loss = 0.0;  // contrastive loss at the current weights
  double reg_loss = 0.0;   // beta-weighted interpolated loss (iwr) or penalty (l2)
  double alpha = 0.0;      // interpolation draw; 0 when no second pass ran
  double beta = 0.0;       // reg_coef / (1 - alpha); 0 when no second pass ran
  double grad_norm = 0.0;  // l2 norm of the combined gradient

  void require_finite() const {
    const double fields[] = {lr, base_loss, reg_loss, alpha, beta, grad_norm};
    for (double f : fields) {
      if (!std::isfinite(f)) {
        throw InvariantError("LossReport: non-finite field at step " + std::to_string(step));
      }
    }
  }

  nlohmann::json to_json() const {
    return nlohmann::json{{"step", step},       {"lr", lr},
                          {"base_loss", base_loss}, {"reg_loss", reg_loss},
                          {"alpha", alpha},     {"beta", beta},
                          {"grad_norm", grad_norm}};
  }
};

// ---------------------------------------------------------------------------
// Learning-rate schedule: linear warm-up from lr_final to lr_init, then a
// cosine from lr_init down to lr_final at the last step. `step` is 0-based.
// ---------------------------------------------------------------------------

struct LrSchedule {
  double lr_init = 0.0;
  double lr_final = 0.0;
  int64_t warmup_steps = 0;
  int64_t total_steps = 0;
};

inline double cosine_lr(int64_t step, const LrSchedule& s) {
  if (step < 0) throw UsageError("cosine_lr: step must be non-negative");
  if (s.total_steps < 1 || s.warmup_steps < 0 || s.warmup_steps >= s.total_steps) {
    throw UsageError("cosine_lr: schedule needs 0 <= warmup_steps < total_steps");
  }
  if (!(s.lr_final > 0.0) || s.lr_final > s.lr_init) {
    throw UsageError("cosine_lr: rates must satisfy 0 < lr_final <= lr_init");
  }
  if (step >= s.total_steps) return s.lr_final;
  if (step < s.warmup_steps) {
    double frac = static_cast<double>(step) / static_cast<double>(s.warmup_steps);
    return s.lr_final + (s.lr_init - s.lr_final) * frac;
  }
  // Cosine phase covers steps [warmup, total); the last step lands exactly on
  // lr_final. A one-step phase degenerates to lr_final (the endpoint wins).
  const int64_t span = s.total_steps - 1 - s.warmup_steps;
  if (span <= 0) return s.lr_final;
  if (step == s.warmup_steps) return s.lr_init;       // exact endpoints: the
  if (step == s.total_steps - 1) return s.lr_final;   // formula only rounds to them
  double u = static_cast<double>(step - s.warmup_steps) / static_cast<double>(span);
  return s.lr_final + 0.5 * (s.lr_init - s.lr_final) * (1.0 + std::cos(u * 3.14159265358979323846));
}

// With-replacement sampling keeps every epoch the same length regardless of
// divisibility; a set smaller than one batch still yields one step.
inline int64_t steps_per_epoch(int64_t n_examples, int batch_size) {
  if (n_examples < 1) throw UsageError("steps_per_epoch: empty training set");
  return std::max<int64_t>(1, n_examples / batch_size);
}

inline LrSchedule make_lr_schedule(const TrainConfig& cfg, int64_t spe) {
  LrSchedule s;
  s.lr_init = cfg.lr_init;
  s.lr_final = cfg.lr_final;
  s.warmup_steps = cfg.warmup_epochs * spe;
  s.total_steps = (cfg.warmup_epochs + cfg.epochs) * spe;
  return s;
}

// ---------------------------------------------------------------------------
// Interpolation draw: uniform on the open interval (0, alpha_max).
// ---------------------------------------------------------------------------

inline double sample_alpha(double alpha_max, Rng& rng) {
  if (!(alpha_max > 0.0 && alpha_max < 1.0)) {
    throw UsageError("sample_alpha: alpha_max must lie in (0, 1), got " +
                     std::to_string(alpha_max));
  }
  double u = 0.0;
  do {
    u = rng.uniform();
  } while (u == 0.0);  // keep the interval open at 0
  return u * alpha_max;
}

// ---------------------------------------------------------------------------
// Contrastive loss over a frozen prompt bank. Video embeddings are unit-
// normalized, scored against every bank row by cosine similarity, divided by
// the temperature and pushed through a cross entropy against the true class.
// ---------------------------------------------------------------------------

// Graph for the mean loss of a batch, built on the caller's tape against an
// already-bound parameter set (plain or interpolated).
template <typename S>
typename TapeT<S>::Node batch_loss_node(TapeT<S>& tape, const Encoder<S>& enc,
                                        const typename Encoder<S>::Bound& bound,
                                        const VideoSet& videos, std::span<const int> indices,
                                        const ClassPromptBank& bank) {
  using Node = typename TapeT<S>::Node;
  const ModelConfig& cfg = enc.config();
  if (indices.empty()) throw UsageError("batch_loss_node: empty batch");
  if (videos.t != cfg.frames_t || videos.h != cfg.frame_size || videos.w != cfg.frame_size ||
      videos.c != ModelConfig::kChannels) {
    throw UsageError("batch_loss_node: video geometry does not match the model config");
  }
  if (bank.dim() != cfg.embed_dim) {
    throw UsageError("batch_loss_node: prompt bank dim " + std::to_string(bank.dim()) +
                     " does not match embed_dim " + std::to_string(cfg.embed_dim));
  }

  // One constant [dim x K] matrix of prompt embeddings shared by the batch.
  MatT<S> bank_t(cfg.embed_dim, bank.size());
  for (int k = 0; k < bank.size(); ++k) {
    auto row = bank.embedding(bank.ids()[k]);
    for (int j = 0; j < cfg.embed_dim; ++j) {
      bank_t.v[static_cast<size_t>(j) * bank.size() + k] = static_cast<S>(row[j]);
    }
  }
  Node prompts = tape.constant(std::move(bank_t));
  const S inv_tau = static_cast<S>(1.0 / cfg.temperature);

  std::vector<Node> losses;
  losses.reserve(indices.size());
  for (int idx : indices) {
    if (idx < 0 || idx >= videos.n) {
      throw UsageError("batch_loss_node: video index " + std::to_string(idx) + " out of range");
    }
    int target = bank.index_of(videos.class_ids[static_cast<size_t>(idx)]);
    Node emb = enc.video_embedding(tape, bound, videos.video(idx), cfg.window);
    Node logits = tape.scale(tape.matmul(tape.l2_normalize_rows(emb), prompts), inv_tau);
    losses.push_back(tape.cross_entropy(logits, target));
  }
  Node sum = losses[0];
  for (size_t i = 1; i < losses.size(); ++i) sum = tape.add(sum, losses[i]);
  return tape.scale(sum, static_cast<S>(1.0 / static_cast<double>(losses.size())));
}

// Value-level loss at fixed weights (no gradients).
template <typename S>
double contrastive_loss(const VideoSet& videos, std::span<const int> indices,
                        const ClassPromptBank& bank, const ParamVectorT<S>& theta,
                        const ModelConfig& cfg) {
  Encoder<S> enc(cfg);
  TapeT<S> tape;
  auto bound = enc.bind(tape, theta, /*requires_grad=*/false);
  auto loss = batch_loss_node(tape, enc, bound, videos, indices, bank);
  return static_cast<double>(tape.value(loss).v[0]);
}

// Loss plus full gradient at theta. Entries the loss does not reach keep a
// zero gradient so the result is always shaped like theta.
template <typename S>
struct GradResultT {
  double loss = 0.0;
  ParamVectorT<S> grad;
};

template <typename S>
GradResultT<S> extract_grads(TapeT<S>& tape, const typename Encoder<S>::Bound& bound,
                             typename TapeT<S>::Node loss, const ParamVectorT<S>& theta) {
  tape.backward(loss);
  GradResultT<S> out;
  out.loss = static_cast<double>(tape.value(loss).v[0]);
  out.grad = zeros_like(theta);
  for (size_t i = 0; i < theta.entries.size(); ++i) {
    if (!tape.has_grad(bound.nodes[i])) continue;
    const MatT<S>& g = tape.gradient(bound.nodes[i]);
    auto dst = out.grad.data(theta.entries[i]);
    std::copy(g.v.begin(), g.v.end(), dst.begin());
  }
  return out;
}

template <typename S>
GradResultT<S> loss_and_grad(const VideoSet& videos, std::span<const int> indices,
                             const ClassPromptBank& bank, const ParamVectorT<S>& theta,
                             const ModelConfig& cfg) {
  Encoder<S> enc(cfg);
  TapeT<S> tape;
  auto bound = enc.bind(tape, theta, /*requires_grad=*/true);
  auto loss = batch_loss_node(tape, enc, bound, videos, indices, bank);
  return extract_grads(tape, bound, loss, theta);
}

// ---------------------------------------------------------------------------
// Optimizers. AdamW keeps decoupled decay; sgd is plain momentum. Moments are
// stored as ParamVectors so resume can serialize them like any weight set.
// ---------------------------------------------------------------------------

template <typename S>
struct OptStateT {
  ParamVectorT<S> m;    // adam first moment
  ParamVectorT<S> v;    // adam second moment
  ParamVectorT<S> buf;  // sgd momentum buffer
  int64_t t = 0;        // adam bias-correction counter
};

template <typename S>
OptStateT<S> init_opt_state(const ParamVectorT<S>& theta) {
  OptStateT<S> s;
  s.m = zeros_like(theta);
  s.v = zeros_like(theta);
  s.buf = zeros_like(theta);
  return s;
}

template <typename S>
void apply_update(ParamVectorT<S>& theta, const ParamVectorT<S>& grad, double lr,
                  const TrainConfig& cfg, OptStateT<S>& opt) {
  require_compatible(theta, grad, "apply_update");
  const size_t n = theta.values.size();
  if (cfg.optimizer == "adamw") {
    constexpr double kBeta1 = 0.9, kBeta2 = 0.999, kEps = 1e-8;
    opt.t += 1;
    const double c1 = 1.0 - std::pow(kBeta1, static_cast<double>(opt.t));
    const double c2 = 1.0 - std::pow(kBeta2, static_cast<double>(opt.t));
    for (size_t i = 0; i < n; ++i) {
      const double g = static_cast<double>(grad.values[i]);
      const double m = kBeta1 * static_cast<double>(opt.m.values[i]) + (1.0 - kBeta1) * g;
      const double v = kBeta2 * static_cast<double>(opt.v.values[i]) + (1.0 - kBeta2) * g * g;
      opt.m.values[i] = static_cast<S>(m);
      opt.v.values[i] = static_cast<S>(v);
      const double step = (m / c1) / (std::sqrt(v / c2) + kEps);
      const double w = static_cast<double>(theta.values[i]);
      theta.values[i] = static_cast<S>(w - lr * (step + cfg.weight_decay * w));
    }
  } else {  // sgd
    for (size_t i = 0; i < n; ++i) {
      const double g = static_cast<double>(grad.values[i]);
      const double b = cfg.momentum * static_cast<double>(opt.buf.values[i]) + g;
      opt.buf.values[i] = static_cast<S>(b);
      const double w = static_cast<double>(theta.values[i]);
      theta.values[i] = static_cast<S>(w - lr * (b + cfg.weight_decay * w));
    }
  }
}

// ---------------------------------------------------------------------------
// Single optimizer steps. Each computes a candidate update and commits it
// only when every involved quantity is finite; otherwise the weights and
// optimizer state are left untouched and an InvariantError describes the
// failure. The caller decides whether a failed step is fatal.
// ---------------------------------------------------------------------------

template <typename S>
bool values_finite(const ParamVectorT<S>& p) {
  for (S x : p.values) {
    if (!std::isfinite(static_cast<double>(x))) return false;
  }
  return true;
}

template <typename S>
double grad_l2_norm(const ParamVectorT<S>& g) {
  double acc = 0.0;
  for (S x : g.values) acc += static_cast<double>(x) * static_cast<double>(x);
  return std::sqrt(acc);
}

namespace detail {

// Commit helper shared by all step flavors: candidate update on copies, then
// swap in only if the new weights are finite.
template <typename S>
LossReport commit_step(ParamVectorT<S>& theta, const ParamVectorT<S>& grad, double lr,
                       const TrainConfig& cfg, OptStateT<S>& opt, LossReport report) {
  if (!values_finite(grad)) throw InvariantError("train step: non-finite gradient");
  report.lr = lr;
  report.grad_norm = grad_l2_norm(grad);
  report.require_finite();
  ParamVectorT<S> cand = theta;
  OptStateT<S> opt_cand = opt;
  apply_update(cand, grad, lr, cfg, opt_cand);
  if (!values_finite(cand)) throw InvariantError("train step: non-finite weights after update");
  theta = std::move(cand);
  opt = std::move(opt_cand);
  return report;
}

}  // namespace detail

// Plain fine-tuning: one gradient at theta.
template <typename S>
LossReport plain_step(ParamVectorT<S>& theta, const VideoSet& videos, std::span<const int> indices,
                      const ClassPromptBank& bank, const ModelConfig& mcfg,
                      const TrainConfig& cfg, double lr, OptStateT<S>& opt) {
  auto g = loss_and_grad(videos, indices, bank, theta, mcfg);
  LossReport r;
  r.base_loss = g.loss;
  return detail::commit_step(theta, g.grad, lr, cfg, opt, r);
}

// Interpolated-weight-regularized step: gradients at theta and at
// theta~ = alpha * anchor + (1 - alpha) * theta are combined as
// g + reg_coef * g_interp; the reported reg_loss carries the
// beta = reg_coef / (1 - alpha) weight of the underlying objective.
// reg_coef == 0 runs no second pass and is bit-identical to plain_step.
template <typename S>
LossReport iwr_step(ParamVectorT<S>& theta, const ParamVectorT<S>& anchor, const VideoSet& videos,
                    std::span<const int> indices, const ClassPromptBank& bank,
                    const ModelConfig& mcfg, const TrainConfig& cfg, double alpha, double lr,
                    OptStateT<S>& opt) {
  if (cfg.reg_coef == 0.0) {
    return plain_step(theta, videos, indices, bank, mcfg, cfg, lr, opt);
  }
  if (!(alpha >= 0.0 && alpha < 1.0)) {
    throw UsageError("iwr_step: alpha must lie in [0, 1), got " + std::to_string(alpha));
  }
  require_compatible(theta, anchor, "iwr_step");
  auto g1 = loss_and_grad(videos, indices, bank, theta, mcfg);
  ParamVectorT<S> mixed = interpolate(anchor, theta, alpha);
  auto g2 = loss_and_grad(videos, indices, bank, mixed, mcfg);
  ParamVectorT<S> grad = zeros_like(theta);
  const S c = static_cast<S>(cfg.reg_coef);
  for (size_t i = 0; i < grad.values.size(); ++i) {
    grad.values[i] = g1.grad.values[i] + c * g2.grad.values[i];
  }
  const double beta = cfg.reg_coef / (1.0 - alpha);
  LossReport r;
  r.base_loss = g1.loss;
  r.alpha = alpha;
  r.beta = beta;
  r.reg_loss = beta * g2.loss;
  return detail::commit_step(theta, grad, lr, cfg, opt, r);
}

// Anchor-penalty baseline: one step on loss + mu * ||theta - anchor||^2.
// The penalty gradient 2 * mu * (theta - anchor) is added analytically.
template <typename S>
LossReport l2_reg_step(ParamVectorT<S>& theta, const ParamVectorT<S>& anchor,
                       const VideoSet& videos, std::span<const int> indices,
                       const ClassPromptBank& bank, const ModelConfig& mcfg,
                       const TrainConfig& cfg, double lr, OptStateT<S>& opt) {
  require_compatible(theta, anchor, "l2_reg_step");
  auto g1 = loss_and_grad(videos, indices, bank, theta, mcfg);
  ParamVectorT<S> grad = zeros_like(theta);
  const double mu = cfg.l2_mu;
  double dist_sq = 0.0;
  for (size_t i = 0; i < grad.values.size(); ++i) {
    const double d = static_cast<double>(theta.values[i]) - static_cast<double>(anchor.values[i]);
    dist_sq += d * d;
    grad.values[i] = g1.grad.values[i] + static_cast<S>(2.0 * mu * d);
  }
  LossReport r;
  r.base_loss = g1.loss;
  r.reg_loss = mu * dist_sq;
  return detail::commit_step(theta, grad, lr, cfg, opt, r);
}

// ---------------------------------------------------------------------------
// Gradient identity check (64-bit): backprop through the combined objective
// loss(theta) + beta * loss(alpha * anchor + (1 - alpha) * theta) on a single
// tape must equal the two-pass sum g|theta + reg_coef * g|mixed, coordinate
// for coordinate. Deviations are measured against the gradient's own scale
// (its largest coordinate): some coordinates are mathematically zero -- a
// key bias shifts every attention logit equally and cancels in the softmax --
// so both sides carry only rounding residue there and a self-relative
// comparison would amplify noise against noise.
// ---------------------------------------------------------------------------

inline double check_grad_identity(const ParamVectorD& theta, const ParamVectorD& anchor,
                                  const VideoSet& videos, std::span<const int> indices,
                                  const ClassPromptBank& bank, const ModelConfig& mcfg,
                                  double alpha, double reg_coef) {
  if (!(alpha >= 0.0 && alpha < 1.0)) {
    throw UsageError("check_grad_identity: alpha must lie in [0, 1)");
  }
  if (!(reg_coef >= 0.0)) throw UsageError("check_grad_identity: reg_coef must be non-negative");

  Encoder<double> enc(mcfg);

  // Combined objective on one tape; gradients flow through the interpolation.
  TapeD tape;
  auto bound = enc.bind(tape, theta, /*requires_grad=*/true);
  auto loss1 = batch_loss_node(tape, enc, bound, videos, indices, bank);
  TapeD::Node total = loss1;
  if (reg_coef > 0.0) {
    auto mixed_bound = enc.bind_interpolated(tape, bound, anchor, alpha);
    auto loss2 = batch_loss_node(tape, enc, mixed_bound, videos, indices, bank);
    total = tape.add(loss1, tape.scale(loss2, reg_coef / (1.0 - alpha)));
  }
  auto lhs = extract_grads(tape, bound, total, theta);

  // Two independent passes combined per the closed-form gradient.
  auto g1 = loss_and_grad(videos, indices, bank, theta, mcfg);
  ParamVectorD rhs = g1.grad;
  if (reg_coef > 0.0) {
    ParamVectorD mixed = interpolate(anchor, theta, alpha);
    auto g2 = loss_and_grad(videos, indices, bank, mixed, mcfg);
    for (size_t i = 0; i < rhs.values.size(); ++i) {
      rhs.values[i] += reg_coef * g2.grad.values[i];
    }
  }
  double scale = 0.0;
  for (size_t i = 0; i < rhs.values.size(); ++i) {
    scale = std::max({scale, std::abs(lhs.grad.values[i]), std::abs(rhs.values[i])});
  }
  double worst = 0.0;
  for (size_t i = 0; i < rhs.values.size(); ++i) {
    worst = std::max(worst, std::abs(lhs.grad.values[i] - rhs.values[i]));
  }
  return worst / std::max(scale, 1e-30);
}

// ---------------------------------------------------------------------------
// Training loop. State is explicit so a run can be stopped, serialized and
// resumed; the rng sub-streams ("batch", "alpha") advance deterministically
// with the step counter, never with wall-clock or thread order.
// ---------------------------------------------------------------------------

template <typename S>
struct TrainStateT {
  ParamVectorT<S> theta;
  OptStateT<S> opt;
  SwaStateT<S> swa;
  int64_t next_step = 1;  // 1-based step about to execute
  int bad_streak = 0;
  Rng batch_rng{0};
  Rng alpha_rng{0};
};

template <typename S>
struct TrainResultT {
  ParamVectorT<S> theta;
  SwaStateT<S> swa;
  std::vector<LossReport> reports;
  int64_t total_steps = 0;
};

using TrainState = TrainStateT<float>;
using TrainResult = TrainResultT<float>;

template <typename S>
TrainStateT<S> init_train_state(const ParamVectorT<S>& theta_start, uint64_t seed) {
  TrainStateT<S> st;
  st.theta = theta_start;
  st.opt = init_opt_state(theta_start);
  st.batch_rng = Rng(seed_stream(seed, "batch"));
  st.alpha_rng = Rng(seed_stream(seed, "alpha"));
  return st;
}

// Advance the state until `stop_after_step` (inclusive; -1 means run to the
// end of the schedule). Reports for the executed steps are appended to
// `reports`; `on_swa` fires after every absorbed snapshot.
template <typename S>
void train_steps(const ModelConfig& mcfg, const TrainConfig& cfg, const VideoSet& videos,
                 const ClassPromptBank& bank, const ParamVectorT<S>& anchor, TrainStateT<S>& st,
                 int64_t stop_after_step, std::vector<LossReport>& reports,
                 const std::function<void(int64_t, const ParamVectorT<S>&)>& on_swa = {}) {
  cfg.validate();
  mcfg.validate();
  for (int id : videos.class_ids) {
    if (!bank.has(id)) {
      throw UsageError("train: class " + std::to_string(id) + " has no prompt in the bank");
    }
  }
  const int64_t spe = steps_per_epoch(videos.n, cfg.batch_size);
  const LrSchedule sched = make_lr_schedule(cfg, spe);
  const int64_t total = sched.total_steps;
  const int64_t swa_start =
      cfg.swa_start_step >= 0 ? cfg.swa_start_step : (cfg.warmup_epochs + 1) * spe;
  const int64_t stop = stop_after_step < 0 ? total : std::min(stop_after_step, total);

  std::vector<int> batch(static_cast<size_t>(cfg.batch_size));
  std::string last_error;
  for (int64_t s = st.next_step; s <= stop; ++s) {
    const double lr = cosine_lr(s - 1, sched);
    for (auto& idx : batch) {
      idx = static_cast<int>(st.batch_rng.integer(static_cast<uint64_t>(videos.n)));
    }
    const bool reg_pass = cfg.mode == "iwr" && cfg.reg_coef > 0.0;
    const double alpha = reg_pass ? sample_alpha(cfg.alpha_max, st.alpha_rng) : 0.0;
    try {
      LossReport r;
      if (cfg.mode == "iwr") {
        r = iwr_step(st.theta, anchor, videos, batch, bank, mcfg, cfg, alpha, lr, st.opt);
      } else if (cfg.mode == "l2") {
        r = l2_reg_step(st.theta, anchor, videos, batch, bank, mcfg, cfg, lr, st.opt);
      } else {
        r = plain_step(st.theta, videos, batch, bank, mcfg, cfg, lr, st.opt);
      }
      r.step = s;
      reports.push_back(r);
      st.bad_streak = 0;
      if (s > swa_start && (s - swa_start) % cfg.swa_cycle == 0) {
        st.swa.update(st.theta);
        if (on_swa) on_swa(s, st.theta);
      }
    } catch (const InvariantError& e) {
      // Divergence shows up as a non-finite value somewhere in the step; the
      // weights keep their last committed state and we try the next batch.
      st.bad_streak += 1;
      last_error = e.what();
      if (st.bad_streak > cfg.max_bad_steps) {
        throw InvariantError("training aborted at step " + std::to_string(s) + " after " +
                             std::to_string(st.bad_streak) +
                             " consecutive non-finite steps; last failure: " + last_error);
      }
    }
    st.next_step = s + 1;
  }
}

template <typename S>
TrainResultT<S> train(const ModelConfig& mcfg, const TrainConfig& cfg, const VideoSet& videos,
                      const ClassPromptBank& bank, const ParamVectorT<S>& theta_start,
                      const ParamVectorT<S>& anchor, uint64_t seed,
                      const std::function<void(int64_t, const ParamVectorT<S>&)>& on_swa = {}) {
  TrainStateT<S> st = init_train_state(theta_start, seed);
  TrainResultT<S> out;
  train_steps(mcfg, cfg, videos, bank, anchor, st, /*stop_after_step=*/-1, out.reports, on_swa);
  out.theta = std::move(st.theta);
  out.swa = std::move(st.swa);
  out.total_steps = st.next_step - 1;
  return out;
}

// ---------------------------------------------------------------------------
// State persistence (f32 runs only; the container stores f32 tensors). The
// rng engines serialize exactly, so a loaded state replays the identical
// remaining trajectory.
// ---------------------------------------------------------------------------

void save_train_state(const std::string& path, const TrainState& st);
TrainState load_train_state(const std::string& path);

// Config <-> JSON, used by the run-config plumbing. from_json expects every
// field to be present; callers that want defaults overlay onto a serialized
// default config first.
nlohmann::json train_config_to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const nlohmann::json& j);

}  // namespace ovcp
