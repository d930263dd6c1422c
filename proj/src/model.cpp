#include "ovcp/model.hpp"

#include <algorithm>

namespace ovcp {

void ModelConfig::validate() const {
  if (frame_size <= 0 || patch_size <= 0 || frames_t <= 0 || embed_dim <= 0 || num_layers <= 0 ||
      num_heads <= 0) {
    throw UsageError("ModelConfig: all sizes must be positive");
  }
  if (frame_size % patch_size != 0) {
    throw UsageError("ModelConfig: frame_size " + std::to_string(frame_size) +
                     " is not divisible by patch_size " + std::to_string(patch_size));
  }
  if (embed_dim % num_heads != 0) {
    throw UsageError("ModelConfig: embed_dim " + std::to_string(embed_dim) +
                     " is not divisible by num_heads " + std::to_string(num_heads));
  }
  if (window < 0) throw UsageError("ModelConfig: window must be >= 0");
  if (!(temperature > 0.0)) throw UsageError("ModelConfig: temperature must be positive");
}

nlohmann::json model_config_to_json(const ModelConfig& cfg) {
  return nlohmann::json{{"frame_size", cfg.frame_size}, {"patch_size", cfg.patch_size},
                        {"frames_t", cfg.frames_t},     {"embed_dim", cfg.embed_dim},
                        {"num_layers", cfg.num_layers}, {"num_heads", cfg.num_heads},
                        {"window", cfg.window},         {"temperature", cfg.temperature}};
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig cfg;
  cfg.frame_size = j.at("frame_size").get<int>();
  cfg.patch_size = j.at("patch_size").get<int>();
  cfg.frames_t = j.at("frames_t").get<int>();
  cfg.embed_dim = j.at("embed_dim").get<int>();
  cfg.num_layers = j.at("num_layers").get<int>();
  cfg.num_heads = j.at("num_heads").get<int>();
  cfg.window = j.at("window").get<int>();
  cfg.temperature = j.at("temperature").get<double>();
  cfg.validate();
  return cfg;
}

void require_shape_compatible(const ModelConfig& have, const ModelConfig& want,
                              const std::string& ctx) {
  auto differ = [&](const char* field, int a, int b) {
    if (a != b) {
      throw InvariantError(ctx + ": incompatible model config, " + field + " is " +
                           std::to_string(a) + " but " + std::to_string(b) + " is required");
    }
  };
  differ("frame_size", have.frame_size, want.frame_size);
  differ("patch_size", have.patch_size, want.patch_size);
  differ("embed_dim", have.embed_dim, want.embed_dim);
  differ("num_layers", have.num_layers, want.num_layers);
  differ("num_heads", have.num_heads, want.num_heads);
}

std::vector<std::pair<std::string, std::vector<int64_t>>> param_table(const ModelConfig& cfg) {
  cfg.validate();
  const int64_t d = cfg.embed_dim;
  std::vector<std::pair<std::string, std::vector<int64_t>>> t;
  t.emplace_back("patch_proj.weight", std::vector<int64_t>{cfg.patch_dim(), d});
  t.emplace_back("patch_proj.bias", std::vector<int64_t>{d});
  t.emplace_back("class_token", std::vector<int64_t>{d});
  t.emplace_back("pos_embed", std::vector<int64_t>{cfg.tokens(), d});
  for (int l = 0; l < cfg.num_layers; ++l) {
    const std::string p = "blocks." + std::to_string(l) + ".";
    t.emplace_back(p + "ln1.gain", std::vector<int64_t>{d});
    t.emplace_back(p + "ln1.bias", std::vector<int64_t>{d});
    t.emplace_back(p + "attn.q.weight", std::vector<int64_t>{d, d});
    t.emplace_back(p + "attn.q.bias", std::vector<int64_t>{d});
    t.emplace_back(p + "attn.k.weight", std::vector<int64_t>{d, d});
    t.emplace_back(p + "attn.k.bias", std::vector<int64_t>{d});
    t.emplace_back(p + "attn.v.weight", std::vector<int64_t>{d, d});
    t.emplace_back(p + "attn.v.bias", std::vector<int64_t>{d});
    t.emplace_back(p + "attn.out.weight", std::vector<int64_t>{d, d});
    t.emplace_back(p + "attn.out.bias", std::vector<int64_t>{d});
    t.emplace_back(p + "ln2.gain", std::vector<int64_t>{d});
    t.emplace_back(p + "ln2.bias", std::vector<int64_t>{d});
    t.emplace_back(p + "mlp.fc1.weight", std::vector<int64_t>{d, 4 * d});
    t.emplace_back(p + "mlp.fc1.bias", std::vector<int64_t>{4 * d});
    t.emplace_back(p + "mlp.fc2.weight", std::vector<int64_t>{4 * d, d});
    t.emplace_back(p + "mlp.fc2.bias", std::vector<int64_t>{d});
  }
  t.emplace_back("ln_post.gain", std::vector<int64_t>{d});
  t.emplace_back("ln_post.bias", std::vector<int64_t>{d});
  t.emplace_back("proj.weight", std::vector<int64_t>{d, d});
  return t;
}

ParamVector init_params(const ModelConfig& cfg, uint64_t seed) {
  ParamVector p;
  for (const auto& [name, shape] : param_table(cfg)) {
    p.add(name, shape);
    auto dst = p.data(name);
    Rng rng(seed_stream(seed, "init:" + name));

    const bool is_gain = name.ends_with("ln1.gain") || name.ends_with("ln2.gain") ||
                         name.ends_with("ln_post.gain");
    const bool is_bias = name.ends_with(".bias");
    if (is_gain) {
      std::fill(dst.begin(), dst.end(), 1.0f);
    } else if (is_bias) {
      std::fill(dst.begin(), dst.end(), 0.0f);
    } else if (name == "class_token") {
      for (auto& v : dst) v = static_cast<float>(rng.normal() * 0.02);
    } else if (name == "pos_embed") {
      // Position embeddings start at content scale: where a token sits is as
      // informative as what it contains (moving-shape clips separate classes
      // purely by token geometry), and a faint start buries that signal.
      for (auto& v : dst) v = static_cast<float>(rng.normal() * 0.5);
    } else {
      // matmul weights: fan-in scaled normal
      const double std_dev = 1.0 / std::sqrt(static_cast<double>(shape[0]));
      for (auto& v : dst) v = static_cast<float>(rng.normal() * std_dev);
    }
  }
  p.check_finite("init_params");
  return p;
}

// ---------------------------------------------------------------------------
// ClassPromptBank
// ---------------------------------------------------------------------------

namespace {

std::vector<double> token_vector(const std::string& token, int dim, uint64_t seed) {
  Rng rng(seed_stream(seed, "token:" + token));
  std::vector<double> v(static_cast<size_t>(dim));
  const double scale = 1.0 / std::sqrt(static_cast<double>(dim));
  for (auto& x : v) x = rng.normal() * scale;
  return v;
}

std::vector<double> mixer_matrix(int dim, uint64_t seed) {
  Rng rng(seed_stream(seed, "mixer"));
  std::vector<double> m(static_cast<size_t>(dim) * static_cast<size_t>(dim));
  const double scale = 1.0 / std::sqrt(static_cast<double>(dim));
  for (auto& x : m) x = rng.normal() * scale;
  return m;
}

}  // namespace

ClassPromptBank ClassPromptBank::build(const std::vector<ClassPrompt>& prompts, int dim,
                                       uint64_t seed) {
  if (dim <= 0) throw UsageError("ClassPromptBank: dim must be positive");
  if (prompts.empty()) throw UsageError("ClassPromptBank: no prompts");

  std::vector<ClassPrompt> sorted = prompts;
  std::sort(sorted.begin(), sorted.end(),
            [](const ClassPrompt& a, const ClassPrompt& b) { return a.class_id < b.class_id; });
  for (size_t i = 0; i < sorted.size(); ++i) {
    if (sorted[i].class_id < 0) throw UsageError("ClassPromptBank: negative class id");
    if (sorted[i].tokens.empty()) {
      throw UsageError("ClassPromptBank: class " + std::to_string(sorted[i].class_id) +
                       " has an empty prompt");
    }
    if (i > 0 && sorted[i].class_id == sorted[i - 1].class_id) {
      throw UsageError("ClassPromptBank: duplicate class id " + std::to_string(sorted[i].class_id));
    }
    if (i > 0 && sorted[i].tokens == sorted[i - 1].tokens) {
      throw InvariantError("ClassPromptBank: classes " + std::to_string(sorted[i - 1].class_id) +
                           " and " + std::to_string(sorted[i].class_id) +
                           " have identical prompts");
    }
  }
  // identical prompts between non-adjacent ids: O(n^2) scan, class counts are tiny
  for (size_t i = 0; i < sorted.size(); ++i) {
    for (size_t j = i + 1; j < sorted.size(); ++j) {
      if (sorted[i].tokens == sorted[j].tokens) {
        throw InvariantError("ClassPromptBank: classes " + std::to_string(sorted[i].class_id) +
                             " and " + std::to_string(sorted[j].class_id) +
                             " have identical prompts");
      }
    }
  }

  ClassPromptBank bank;
  bank.dim_ = dim;
  bank.seed_ = seed;
  const auto mixer = mixer_matrix(dim, seed);
  for (const auto& p : sorted) {
    std::vector<double> bag(static_cast<size_t>(dim), 0.0);
    for (const auto& tok : p.tokens) {
      auto tv = token_vector(tok, dim, seed);
      for (int i = 0; i < dim; ++i) bag[static_cast<size_t>(i)] += tv[static_cast<size_t>(i)];
    }
    std::vector<double> mixed(static_cast<size_t>(dim), 0.0);
    for (int i = 0; i < dim; ++i) {
      for (int j = 0; j < dim; ++j) {
        mixed[static_cast<size_t>(j)] += bag[static_cast<size_t>(i)] * mixer[static_cast<size_t>(i * dim + j)];
      }
    }
    double norm = 0.0;
    for (double x : mixed) norm += x * x;
    norm = std::sqrt(norm);
    if (norm < 1e-30) {
      throw InvariantError("ClassPromptBank: zero-norm embedding for class " +
                           std::to_string(p.class_id));
    }
    bank.ids_.push_back(p.class_id);
    bank.tokens_.push_back(p.tokens);
    for (double x : mixed) bank.rows_.push_back(static_cast<float>(x / norm));
  }
  return bank;
}

ClassPromptBank ClassPromptBank::subset(std::span<const int> ids) const {
  if (ids.empty()) throw UsageError("ClassPromptBank::subset: empty id list");
  ClassPromptBank out;
  out.dim_ = dim_;
  out.seed_ = seed_;
  std::vector<int> wanted(ids.begin(), ids.end());
  std::sort(wanted.begin(), wanted.end());
  for (size_t i = 1; i < wanted.size(); ++i) {
    if (wanted[i] == wanted[i - 1]) {
      throw UsageError("ClassPromptBank::subset: duplicate id " + std::to_string(wanted[i]));
    }
  }
  for (int id : wanted) {
    int at = index_of(id);  // throws on unknown
    out.ids_.push_back(id);
    out.tokens_.push_back(tokens_[static_cast<size_t>(at)]);
    auto row = embedding(id);
    out.rows_.insert(out.rows_.end(), row.begin(), row.end());
  }
  return out;
}

bool ClassPromptBank::has(int class_id) const {
  return std::binary_search(ids_.begin(), ids_.end(), class_id);
}

int ClassPromptBank::index_of(int class_id) const {
  auto it = std::lower_bound(ids_.begin(), ids_.end(), class_id);
  if (it == ids_.end() || *it != class_id) {
    throw UsageError("ClassPromptBank: unknown class id " + std::to_string(class_id));
  }
  return static_cast<int>(it - ids_.begin());
}

std::span<const float> ClassPromptBank::embedding(int class_id) const {
  int at = index_of(class_id);
  return std::span<const float>(rows_.data() + static_cast<size_t>(at) * static_cast<size_t>(dim_),
                                static_cast<size_t>(dim_));
}

const std::vector<std::string>& ClassPromptBank::tokens_of(int class_id) const {
  return tokens_[static_cast<size_t>(index_of(class_id))];
}

}  // namespace ovcp
