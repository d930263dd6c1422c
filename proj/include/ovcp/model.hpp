#pragma once
// The video-text encoder pair.
//
// Vision side: a small ViT. Each frame is split into patches, linearly
// embedded, prefixed with a class token and given (spatial) position
// embeddings. Attention is the only place frames interact: queries attend to
// the keys/values of all frames within +/- `window` of their own frame, so
// window = 0 reproduces a frame-by-frame image encoder with the exact same
// weights, and growing the window adds temporal context without adding a
// single parameter. The video embedding is the projected mean over frames of
// the final per-frame class tokens.
//
// Text side: class prompts are bags of tokens; each token has a frozen random
// embedding, the bag sum is passed through a frozen random linear mixer and
// normalized. This stands in for a text tower: it is deterministic in
// (tokens, seed), shares the embedding dimension with the vision tower, and
// composes attribute tokens so related prompts land near each other.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "ovcp/common.hpp"
#include "ovcp/tensor.hpp"
#include "ovcp/video.hpp"
#include "ovcp/weightspace.hpp"

namespace ovcp {

struct ModelConfig {
  int frame_size = 16;   // square frames
  int patch_size = 4;
  int frames_t = 8;      // clip length the encoder expects
  int embed_dim = 64;
  int num_layers = 4;
  int num_heads = 4;
  int window = 1;        // temporal attention half-width; 0 = image behaviour
  double temperature = 0.07;  // fixed logit scale for the contrastive loss

  static constexpr int kChannels = 3;

  void validate() const;
  int patches_per_side() const { return frame_size / patch_size; }
  int num_patches() const { return patches_per_side() * patches_per_side(); }
  int tokens() const { return num_patches() + 1; }
  int patch_dim() const { return patch_size * patch_size * kChannels; }
  int head_dim() const { return embed_dim / num_heads; }
};

nlohmann::json model_config_to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const nlohmann::json& j);

// Shape-defining fields must agree for two configs to share weights; clip
// length, window and temperature are free (the whole point of the method is
// reusing image-shaped weights at other clip lengths and windows).
void require_shape_compatible(const ModelConfig& have, const ModelConfig& want,
                              const std::string& ctx);

// Canonical parameter name/shape table for a config, in binding order.
std::vector<std::pair<std::string, std::vector<int64_t>>> param_table(const ModelConfig& cfg);

// Seeded initialization; entry streams are keyed by name so the same (cfg,
// seed) always produces the same weights.
ParamVector init_params(const ModelConfig& cfg, uint64_t seed);

// ---------------------------------------------------------------------------
// Text prompts.
// ---------------------------------------------------------------------------

struct ClassPrompt {
  int class_id = -1;
  std::vector<std::string> tokens;
};

class ClassPromptBank {
 public:
  // Embeddings are a pure function of (tokens, dim, seed) per class, so a
  // bank built over a subset of classes carries bit-identical rows.
  static ClassPromptBank build(const std::vector<ClassPrompt>& prompts, int dim, uint64_t seed);

  ClassPromptBank subset(std::span<const int> ids) const;

  int dim() const { return dim_; }
  int size() const { return static_cast<int>(ids_.size()); }
  const std::vector<int>& ids() const { return ids_; }
  bool has(int class_id) const;
  int index_of(int class_id) const;  // throws on unknown id
  std::span<const float> embedding(int class_id) const;  // unit row
  const std::vector<float>& rows() const { return rows_; }  // size x dim
  const std::vector<std::string>& tokens_of(int class_id) const;

 private:
  int dim_ = 0;
  uint64_t seed_ = 0;
  std::vector<int> ids_;  // ascending
  std::vector<std::vector<std::string>> tokens_;
  std::vector<float> rows_;
};

// encode_text is a bank lookup: prompts are frozen, so their embeddings are
// precomputed at bank construction.
inline std::span<const float> encode_text(const ClassPromptBank& bank, int class_id) {
  return bank.embedding(class_id);
}

// ---------------------------------------------------------------------------
// Similarity.
// ---------------------------------------------------------------------------

template <typename S>
double similarity(std::span<const S> a, std::span<const S> b) {
  if (a.size() != b.size()) throw UsageError("similarity: dimension mismatch");
  if (a.empty()) throw UsageError("similarity: empty vectors");
  double dot = 0, na = 0, nb = 0;
  for (size_t i = 0; i < a.size(); ++i) {
    dot += static_cast<double>(a[i]) * static_cast<double>(b[i]);
    na += static_cast<double>(a[i]) * static_cast<double>(a[i]);
    nb += static_cast<double>(b[i]) * static_cast<double>(b[i]);
  }
  if (na == 0.0 || nb == 0.0) throw InvariantError("similarity: zero-norm vector");
  double s = dot / (std::sqrt(na) * std::sqrt(nb));
  if (!std::isfinite(s)) throw InvariantError("similarity: non-finite result");
  return s;
}

// ---------------------------------------------------------------------------
// Patch extraction: one frame (h, w, c row-major) to a [num_patches x
// patch_dim] matrix, patches in raster order, each flattened (y, x, c).
// ---------------------------------------------------------------------------

template <typename S>
MatT<S> frame_patches(const ModelConfig& cfg, const float* frame) {
  const int ps = cfg.patch_size;
  const int grid = cfg.patches_per_side();
  const int W = cfg.frame_size;
  MatT<S> out(cfg.num_patches(), cfg.patch_dim());
  for (int pr = 0; pr < grid; ++pr) {
    for (int pc = 0; pc < grid; ++pc) {
      S* dst = &out.v[static_cast<size_t>((pr * grid + pc) * cfg.patch_dim())];
      for (int y = 0; y < ps; ++y) {
        const float* src = frame + ((pr * ps + y) * W + pc * ps) * ModelConfig::kChannels;
        for (int x = 0; x < ps * ModelConfig::kChannels; ++x) {
          *dst++ = static_cast<S>(src[x]);
        }
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Windowed temporal attention over per-frame token matrices.
// ---------------------------------------------------------------------------

// q, k, v hold one node per frame, each [tokens x embed_dim]. For frame t the
// keys/values of frames [t-window, t+window] (clipped to the clip bounds) are
// stacked, so every query can look at its temporal neighbourhood. Returns the
// per-frame attention outputs (heads re-concatenated, no output projection).
template <typename S>
std::vector<typename TapeT<S>::Node> windowed_attention(
    TapeT<S>& tape, std::span<const typename TapeT<S>::Node> q,
    std::span<const typename TapeT<S>::Node> k, std::span<const typename TapeT<S>::Node> v,
    int num_heads, int window) {
  using Node = typename TapeT<S>::Node;
  const int frames = static_cast<int>(q.size());
  if (frames == 0 || k.size() != q.size() || v.size() != q.size()) {
    throw UsageError("windowed_attention: q/k/v must list the same nonzero frame count");
  }
  if (window < 0) throw UsageError("windowed_attention: window must be >= 0");
  const int64_t d = tape.value(q[0]).cols;
  if (num_heads <= 0 || d % num_heads != 0) {
    throw UsageError("windowed_attention: num_heads must divide the embedding dim");
  }
  const int64_t dh = d / num_heads;
  const S scale = static_cast<S>(1.0 / std::sqrt(static_cast<double>(dh)));

  std::vector<Node> out(static_cast<size_t>(frames));
  for (int t = 0; t < frames; ++t) {
    const int lo = std::max(0, t - window);
    const int hi = std::min(frames - 1, t + window);
    std::vector<Node> head_outs;
    head_outs.reserve(static_cast<size_t>(num_heads));
    for (int h = 0; h < num_heads; ++h) {
      const int64_t c0 = h * dh, c1 = (h + 1) * dh;
      Node qh = tape.slice_cols(q[static_cast<size_t>(t)], c0, c1);
      std::vector<Node> kwin, vwin;
      for (int j = lo; j <= hi; ++j) {
        kwin.push_back(tape.slice_cols(k[static_cast<size_t>(j)], c0, c1));
        vwin.push_back(tape.slice_cols(v[static_cast<size_t>(j)], c0, c1));
      }
      Node kcat = tape.concat_rows(kwin);
      Node vcat = tape.concat_rows(vwin);
      Node logits = tape.scale(tape.matmul(qh, tape.transpose(kcat)), scale);
      Node probs = tape.softmax(logits, 1);
      head_outs.push_back(tape.matmul(probs, vcat));
    }
    out[static_cast<size_t>(t)] = tape.concat_cols(head_outs);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Encoder: binds a ParamVector onto a tape and builds embedding graphs.
// ---------------------------------------------------------------------------

template <typename S>
class Encoder {
 public:
  using Node = typename TapeT<S>::Node;

  explicit Encoder(const ModelConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    table_ = param_table(cfg_);
  }

  const ModelConfig& config() const { return cfg_; }

  struct Bound {
    std::vector<Node> nodes;  // parallel to param_table order
  };

  // Check theta against the canonical table and create one leaf per entry.
  Bound bind(TapeT<S>& tape, const ParamVectorT<S>& theta, bool requires_grad) const {
    require_table_match(theta);
    Bound b;
    b.nodes.reserve(table_.size());
    for (size_t i = 0; i < table_.size(); ++i) {
      const auto& e = theta.entries[i];
      auto src = theta.data(e);
      MatT<S> m(e.shape.size() == 1 ? 1 : e.shape[0],
                e.shape.size() == 1 ? e.shape[0] : e.shape[1]);
      std::copy(src.begin(), src.end(), m.v.begin());
      b.nodes.push_back(tape.leaf(std::move(m), requires_grad));
    }
    return b;
  }

  // theta~ = (1 - alpha) * bound + alpha * anchor, built on the same tape so
  // gradients flow through the interpolation into the bound leaves.
  Bound bind_interpolated(TapeT<S>& tape, const Bound& base, const ParamVectorT<S>& anchor,
                          double alpha) const {
    require_table_match(anchor);
    if (!(alpha >= 0.0 && alpha <= 1.0)) {
      throw UsageError("bind_interpolated: alpha must be in [0, 1]");
    }
    Bound out;
    out.nodes.reserve(base.nodes.size());
    for (size_t i = 0; i < base.nodes.size(); ++i) {
      const auto& e = anchor.entries[i];
      auto src = anchor.data(e);
      MatT<S> m(e.shape.size() == 1 ? 1 : e.shape[0],
                e.shape.size() == 1 ? e.shape[0] : e.shape[1]);
      for (size_t j = 0; j < src.size(); ++j) m.v[j] = static_cast<S>(alpha) * src[j];
      Node scaled_anchor = tape.constant(std::move(m));
      Node scaled_base = tape.scale(base.nodes[i], static_cast<S>(1.0 - alpha));
      out.nodes.push_back(tape.add(scaled_base, scaled_anchor));
    }
    return out;
  }

  // Embedding graph for one video (pixels [frames_t, h, w, c]); returns an
  // unnormalized [1 x embed_dim] node.
  Node video_embedding(TapeT<S>& tape, const Bound& b, const float* video, int window) const {
    auto cls_frames = backbone_cls(tape, b, video, window);
    Node pooled = tape.mean_rows(tape.concat_rows(cls_frames));
    return tape.matmul(pooled, b.nodes[idx_("proj.weight")]);
  }

  // Frame-by-frame image encoding (window forced to 0) with the projection
  // applied per frame before pooling. Because the projection is linear this
  // matches video_embedding(window=0) up to float rounding.
  Node frames_imagewise_embedding(TapeT<S>& tape, const Bound& b, const float* video) const {
    auto cls_frames = backbone_cls(tape, b, video, 0);
    std::vector<Node> projected;
    projected.reserve(cls_frames.size());
    for (Node e : cls_frames) projected.push_back(tape.matmul(e, b.nodes[idx_("proj.weight")]));
    return tape.mean_rows(tape.concat_rows(projected));
  }

  // Value-level batch encodes (fresh tape per video, no gradients).
  std::vector<S> encode_videos(const VideoSet& vs, const ParamVectorT<S>& theta) const {
    return encode_impl(vs, theta, /*imagewise=*/false);
  }
  std::vector<S> encode_frames_imagewise(const VideoSet& vs, const ParamVectorT<S>& theta) const {
    return encode_impl(vs, theta, /*imagewise=*/true);
  }

 private:
  ModelConfig cfg_;
  std::vector<std::pair<std::string, std::vector<int64_t>>> table_;

  size_t idx_(const std::string& name) const {
    for (size_t i = 0; i < table_.size(); ++i) {
      if (table_[i].first == name) return i;
    }
    throw InvariantError("Encoder: no parameter named '" + name + "'");
  }

  void require_table_match(const ParamVectorT<S>& theta) const {
    std::string missing, extra;
    for (const auto& [name, shape] : table_) {
      const ParamEntry* e = theta.find(name);
      if (!e) {
        missing += missing.empty() ? name : ", " + name;
      } else if (e->shape != shape) {
        throw InvariantError("Encoder: shape mismatch for '" + name + "': expected " +
                             shape_to_string(shape) + ", got " + shape_to_string(e->shape));
      }
    }
    for (const auto& e : theta.entries) {
      bool known = false;
      for (const auto& [name, shape] : table_) {
        if (name == e.name) {
          known = true;
          break;
        }
      }
      if (!known) extra += extra.empty() ? e.name : ", " + e.name;
    }
    if (!missing.empty() || !extra.empty()) {
      std::string msg = "Encoder: parameter table mismatch";
      if (!missing.empty()) msg += "; missing: [" + missing + "]";
      if (!extra.empty()) msg += "; unexpected: [" + extra + "]";
      throw InvariantError(msg);
    }
    // order must match the canonical table so bindings stay positional
    for (size_t i = 0; i < table_.size(); ++i) {
      if (theta.entries[i].name != table_[i].first) {
        throw InvariantError("Encoder: parameter order mismatch at entry " + std::to_string(i) +
                             " ('" + theta.entries[i].name + "' vs '" + table_[i].first + "')");
      }
    }
  }

  // Run the backbone and return the post-norm class token of every frame.
  std::vector<Node> backbone_cls(TapeT<S>& tape, const Bound& b, const float* video,
                                 int window) const {
    const int T = cfg_.frames_t;
    std::vector<Node> x(static_cast<size_t>(T));
    Node cls = b.nodes[idx_("class_token")];
    Node pos = b.nodes[idx_("pos_embed")];
    Node pw = b.nodes[idx_("patch_proj.weight")];
    Node pb = b.nodes[idx_("patch_proj.bias")];
    for (int t = 0; t < T; ++t) {
      Node patches = tape.constant(frame_patches<S>(
          cfg_, video + t * cfg_.frame_size * cfg_.frame_size * ModelConfig::kChannels));
      Node emb = tape.add_row(tape.matmul(patches, pw), pb);
      std::vector<Node> stack{cls, emb};
      x[static_cast<size_t>(t)] = tape.add(tape.concat_rows(stack), pos);
    }

    for (int l = 0; l < cfg_.num_layers; ++l) {
      const std::string p = "blocks." + std::to_string(l) + ".";
      Node g1 = b.nodes[idx_(p + "ln1.gain")], b1 = b.nodes[idx_(p + "ln1.bias")];
      Node wq = b.nodes[idx_(p + "attn.q.weight")], bq = b.nodes[idx_(p + "attn.q.bias")];
      Node wk = b.nodes[idx_(p + "attn.k.weight")], bk = b.nodes[idx_(p + "attn.k.bias")];
      Node wv = b.nodes[idx_(p + "attn.v.weight")], bv = b.nodes[idx_(p + "attn.v.bias")];
      Node wo = b.nodes[idx_(p + "attn.out.weight")], bo = b.nodes[idx_(p + "attn.out.bias")];
      Node g2 = b.nodes[idx_(p + "ln2.gain")], b2 = b.nodes[idx_(p + "ln2.bias")];
      Node w1 = b.nodes[idx_(p + "mlp.fc1.weight")], bm1 = b.nodes[idx_(p + "mlp.fc1.bias")];
      Node w2 = b.nodes[idx_(p + "mlp.fc2.weight")], bm2 = b.nodes[idx_(p + "mlp.fc2.bias")];

      std::vector<Node> q(static_cast<size_t>(T)), k(static_cast<size_t>(T)), v(static_cast<size_t>(T));
      for (int t = 0; t < T; ++t) {
        Node h = layer_norm(tape, x[static_cast<size_t>(t)], g1, b1);
        q[static_cast<size_t>(t)] = tape.add_row(tape.matmul(h, wq), bq);
        k[static_cast<size_t>(t)] = tape.add_row(tape.matmul(h, wk), bk);
        v[static_cast<size_t>(t)] = tape.add_row(tape.matmul(h, wv), bv);
      }
      auto att = windowed_attention<S>(tape, q, k, v, cfg_.num_heads, window);
      for (int t = 0; t < T; ++t) {
        Node& xt = x[static_cast<size_t>(t)];
        xt = tape.add(xt, tape.add_row(tape.matmul(att[static_cast<size_t>(t)], wo), bo));
        Node h2 = layer_norm(tape, xt, g2, b2);
        Node m = tape.add_row(tape.matmul(tape.gelu(tape.add_row(tape.matmul(h2, w1), bm1)), w2), bm2);
        xt = tape.add(xt, m);
      }
    }

    Node pg = b.nodes[idx_("ln_post.gain")];
    Node pbias = b.nodes[idx_("ln_post.bias")];
    std::vector<Node> cls_frames(static_cast<size_t>(T));
    for (int t = 0; t < T; ++t) {
      Node c = tape.slice_rows(x[static_cast<size_t>(t)], 0, 1);
      cls_frames[static_cast<size_t>(t)] = layer_norm(tape, c, pg, pbias);
    }
    return cls_frames;
  }

  std::vector<S> encode_impl(const VideoSet& vs, const ParamVectorT<S>& theta, bool imagewise) const {
    vs.validate();
    if (vs.t != cfg_.frames_t) {
      throw UsageError("encode: video clip length " + std::to_string(vs.t) +
                       " does not match configured frames_t " + std::to_string(cfg_.frames_t));
    }
    if (vs.h != cfg_.frame_size || vs.w != cfg_.frame_size || vs.c != ModelConfig::kChannels) {
      throw UsageError("encode: video frame geometry does not match the model config");
    }
    const int d = cfg_.embed_dim;
    std::vector<S> out(static_cast<size_t>(vs.n) * static_cast<size_t>(d));
    parallel_for(vs.n, [&](int64_t i) {
      TapeT<S> tape;
      Bound b = bind(tape, theta, false);
      Node e = imagewise ? frames_imagewise_embedding(tape, b, vs.video(static_cast<int>(i)))
                         : video_embedding(tape, b, vs.video(static_cast<int>(i)), cfg_.window);
      const auto& row = tape.value(e);
      std::copy(row.v.begin(), row.v.end(), out.begin() + i * d);
    });
    return out;
  }
};

using EncoderF = Encoder<float>;
using EncoderD = Encoder<double>;

}  // namespace ovcp
