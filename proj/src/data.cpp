#include "ovcp/data.hpp"

#include <algorithm>
#include <array>
#include <set>

#include "ovcp/checkpoint.hpp"

namespace ovcp {

namespace {

const std::array<std::string, 6> kShapes{"square", "circle", "triangle", "cross", "ring", "diamond"};
const std::array<std::string, 6> kColors{"red", "green", "blue", "yellow", "magenta", "cyan"};
const std::array<std::string, 4> kDirections{"left", "right", "up", "down"};
const std::array<std::string, 2> kSpeeds{"slow", "fast"};

struct Rgb {
  float r, g, b;
};

Rgb color_rgb(const std::string& color) {
  if (color == "red") return {0.9f, 0.15f, 0.15f};
  if (color == "green") return {0.15f, 0.9f, 0.15f};
  if (color == "blue") return {0.15f, 0.15f, 0.9f};
  if (color == "yellow") return {0.9f, 0.9f, 0.15f};
  if (color == "magenta") return {0.9f, 0.15f, 0.9f};
  if (color == "cyan") return {0.15f, 0.9f, 0.9f};
  throw UsageError("unknown color '" + color + "'");
}

// Shape membership test in patch-relative coordinates (ox, oy) in [-r, r].
bool in_shape(const std::string& shape, int ox, int oy, int r) {
  const int d2 = ox * ox + oy * oy;
  if (shape == "square") return std::abs(ox) <= r && std::abs(oy) <= r;
  if (shape == "circle") return d2 <= r * r;
  if (shape == "diamond") return std::abs(ox) + std::abs(oy) <= r;
  if (shape == "ring") return d2 <= r * r && 4 * d2 >= r * r;
  if (shape == "cross") {
    const int arm = std::max(1, r / 3);
    return (std::abs(ox) <= arm || std::abs(oy) <= arm) && std::abs(ox) <= r && std::abs(oy) <= r;
  }
  if (shape == "triangle") {
    // upward-pointing: apex at oy = -r, base at oy = r
    return oy >= -r && oy <= r && 2 * std::abs(ox) <= (oy + r);
  }
  throw UsageError("unknown shape '" + shape + "'");
}

void direction_vector(const std::string& direction, int& dx, int& dy) {
  if (direction == "left") {
    dx = -1;
    dy = 0;
  } else if (direction == "right") {
    dx = 1;
    dy = 0;
  } else if (direction == "up") {
    dx = 0;
    dy = -1;
  } else if (direction == "down") {
    dx = 0;
    dy = 1;
  } else {
    throw UsageError("unknown direction '" + direction + "'");
  }
}

int speed_px(const std::string& speed) {
  if (speed == "slow") return 2;
  if (speed == "fast") return 3;
  throw UsageError("unknown speed '" + speed + "'");
}

int wrap(int a, int m) { return ((a % m) + m) % m; }

// Offset along the motion axis at frame t, in units of the per-step speed:
// the shape swings 0, +1, 0, -1, ... around its anchor, leading with the
// class direction. Two constraints shape this pattern. First, for clips that
// agree on everything but direction, the two directions visit the same
// multiset of offsets (swap +1 and -1 and the multiset is unchanged), so a
// model that is blind to frame order sees the same evenly balanced smear for
// both and only the noise differs; remainders after the last full cycle are
// padded to keep that balance (T=4k+2 parks the final frame at the anchor,
// T=4k+3 closes with 0, +1, -1). Second, the visiting order must not be its
// own time reversal, or attention across frames could not read the arrow of
// motion either: leading with +1 and closing each cycle at -1 guarantees
// that for every T >= 3. T=2 degenerates to a single hop, which frame order
// alone can never sign.
int trajectory_offset(int t, int frames) {
  if (frames <= 2) return t;
  const int rem = frames % 4;
  if (rem == 2 && t == frames - 1) return 0;
  if (rem == 3 && t >= frames - 3) {
    const int last3[3] = {0, 1, -1};
    return last3[t - (frames - 3)];
  }
  static const int cycle[4] = {0, 1, 0, -1};
  return cycle[t % 4];
}

VideoSet make_set(int t, int h, int w) {
  VideoSet vs;
  vs.t = t;
  vs.h = h;
  vs.w = w;
  vs.c = ModelConfig::kChannels;
  return vs;
}

void append_video(VideoSet& vs, const std::vector<float>& pixels, int class_id) {
  vs.pixels.insert(vs.pixels.end(), pixels.begin(), pixels.end());
  vs.class_ids.push_back(class_id);
  vs.n += 1;
}

}  // namespace

const char* pool_name(Pool p) {
  switch (p) {
    case Pool::kPretrain: return "pretrain";
    case Pool::kFinetune: return "finetune";
    case Pool::kZeroshot: return "zeroshot";
  }
  return "?";
}

Pool pool_from_name(const std::string& s) {
  if (s == "pretrain") return Pool::kPretrain;
  if (s == "finetune") return Pool::kFinetune;
  if (s == "zeroshot") return Pool::kZeroshot;
  throw UsageError("unknown pool '" + s + "'");
}

std::vector<std::string> ClassDef::prompt_tokens() const {
  std::vector<std::string> t{"a", "video", "of", "a", color, shape};
  if (!is_static()) {
    t.push_back("moving");
    t.push_back(direction);
    t.push_back(speed);
  }
  return t;
}

void DataConfig::validate() const {
  if (frame_size <= 0 || frames_t <= 0) throw UsageError("DataConfig: sizes must be positive");
  if (train_per_class <= 0 || eval_per_class <= 0) {
    throw UsageError("DataConfig: per-class sample counts must be positive");
  }
  if (noise_level < 0.0 || noise_level > 0.5) {
    throw UsageError("DataConfig: noise_level must be in [0, 0.5]");
  }
  if (2 * radius() + 1 > frame_size) {
    throw UsageError("DataConfig: shape of radius " + std::to_string(radius()) +
                     " does not fit a " + std::to_string(frame_size) + "px frame");
  }
}

nlohmann::json data_config_to_json(const DataConfig& cfg) {
  return nlohmann::json{{"frame_size", cfg.frame_size},
                        {"frames_t", cfg.frames_t},
                        {"train_per_class", cfg.train_per_class},
                        {"eval_per_class", cfg.eval_per_class},
                        {"noise_level", cfg.noise_level},
                        {"shape_radius", cfg.shape_radius}};
}

DataConfig data_config_from_json(const nlohmann::json& j) {
  DataConfig cfg;
  cfg.frame_size = j.at("frame_size").get<int>();
  cfg.frames_t = j.at("frames_t").get<int>();
  cfg.train_per_class = j.at("train_per_class").get<int>();
  cfg.eval_per_class = j.at("eval_per_class").get<int>();
  cfg.noise_level = j.at("noise_level").get<double>();
  cfg.shape_radius = j.at("shape_radius").get<int>();
  cfg.validate();
  return cfg;
}

std::vector<ClassDef> build_catalog(uint64_t seed) {
  // Enumerate the 36 (shape, color) bases along shuffled Latin-square
  // diagonals: every run of 6 consecutive bases covers all shapes and all
  // colors, so each pool sees every attribute token.
  Rng rng(seed_stream(seed, "catalog"));
  std::vector<int> shape_order{0, 1, 2, 3, 4, 5};
  std::vector<int> color_order{0, 1, 2, 3, 4, 5};
  std::vector<int> diag_order{0, 1, 2, 3, 4, 5};
  rng.shuffle(shape_order);
  rng.shuffle(color_order);
  rng.shuffle(diag_order);

  std::vector<std::pair<std::string, std::string>> bases;
  for (int di = 0; di < 6; ++di) {
    const int d = diag_order[static_cast<size_t>(di)];
    for (int i = 0; i < 6; ++i) {
      bases.emplace_back(kShapes[static_cast<size_t>(shape_order[static_cast<size_t>(i)])],
                         kColors[static_cast<size_t>(color_order[static_cast<size_t>((i + d) % 6)])]);
    }
  }

  std::vector<ClassDef> catalog;
  int next_id = 0;
  auto add = [&](const std::string& shape, const std::string& color, const std::string& dir,
                 const std::string& speed, Pool pool) {
    ClassDef c;
    c.id = next_id++;
    c.shape = shape;
    c.color = color;
    c.direction = dir;
    c.speed = speed;
    c.pool = pool;
    c.name = color + " " + shape;
    if (!dir.empty()) c.name += " moving " + dir + " " + speed;
    catalog.push_back(std::move(c));
  };

  // ids 0..23: pretrain statics over the first four diagonals
  for (int i = 0; i < 24; ++i) add(bases[static_cast<size_t>(i)].first, bases[static_cast<size_t>(i)].second, "", "", Pool::kPretrain);

  // ids 24..35: six motion-only pairs, each splitting a pretrain-seen base by
  // direction alone, so separating any finetune class from its twin takes
  // temporal information; axes and speeds rotate so every motion token occurs
  // in the finetune pool
  const int axis_offset = static_cast<int>(rng.integer(2));
  const int speed_offset = static_cast<int>(rng.integer(2));
  for (int i = 0; i < 6; ++i) {
    const bool horizontal = ((i + axis_offset) % 2) == 0;
    const std::string& spd = kSpeeds[static_cast<size_t>((i + speed_offset) % 2)];
    add(bases[static_cast<size_t>(i)].first, bases[static_cast<size_t>(i)].second,
        horizontal ? "left" : "up", spd, Pool::kFinetune);
    add(bases[static_cast<size_t>(i)].first, bases[static_cast<size_t>(i)].second,
        horizontal ? "right" : "down", spd, Pool::kFinetune);
  }

  // ids 36..41: zero-shot motion on bases never seen as motion
  for (int i = 0; i < 6; ++i) {
    add(bases[static_cast<size_t>(12 + i)].first, bases[static_cast<size_t>(12 + i)].second,
        kDirections[static_cast<size_t>((i + axis_offset) % 4)],
        kSpeeds[static_cast<size_t>((i + speed_offset + 1) % 2)], Pool::kZeroshot);
  }

  // ids 42..47: held-out statics on the fifth diagonal (bases absent from
  // pretrain entirely)
  for (int i = 0; i < 6; ++i) {
    add(bases[static_cast<size_t>(24 + i)].first, bases[static_cast<size_t>(24 + i)].second, "", "", Pool::kZeroshot);
  }

  return catalog;
}

void render_video(const DataConfig& cfg, const ClassDef& cls, int sample_idx, uint64_t seed,
                  int frames, float* out) {
  cfg.validate();
  if (frames <= 0) throw UsageError("render_video: frames must be positive");
  const int H = cfg.frame_size, W = cfg.frame_size, C = ModelConfig::kChannels;
  const int r = cfg.radius();

  // Stream keyed WITHOUT the direction: the motion-only pair shares noise
  // and starting position, so only the trajectory separates its classes.
  Rng rng(seed_stream(seed, "render:" + cls.shape + ":" + cls.color + ":" + cls.speed + ":" +
                                std::to_string(sample_idx)));

  // Statics land anywhere; movers anchor near the frame centre (plus or minus
  // one pixel of jitter) so the swing stays inside the frame and clips of one
  // class differ only by jitter and noise, not by where the action happens.
  int start_x, start_y;
  if (cls.is_static()) {
    start_x = static_cast<int>(rng.integer(static_cast<uint64_t>(W)));
    start_y = static_cast<int>(rng.integer(static_cast<uint64_t>(H)));
  } else {
    start_x = W / 2 - 1 + static_cast<int>(rng.integer(3));
    start_y = H / 2 - 1 + static_cast<int>(rng.integer(3));
  }

  // background + noise for every frame first (one contiguous stream)
  for (int64_t i = 0; i < static_cast<int64_t>(frames) * H * W * C; ++i) {
    out[i] = std::min(1.0f, std::max(0.0f, 0.1f + static_cast<float>(rng.uniform() * cfg.noise_level)));
  }

  int dx = 0, dy = 0;
  if (!cls.is_static()) {
    direction_vector(cls.direction, dx, dy);
    const int s = speed_px(cls.speed);
    dx *= s;
    dy *= s;
  }

  const Rgb rgb = color_rgb(cls.color);
  for (int t = 0; t < frames; ++t) {
    float* frame = out + static_cast<int64_t>(t) * H * W * C;
    const int hop = trajectory_offset(t, frames);
    const int cx = wrap(start_x + hop * dx, W);
    const int cy = wrap(start_y + hop * dy, H);
    for (int oy = -r; oy <= r; ++oy) {
      for (int ox = -r; ox <= r; ++ox) {
        if (!in_shape(cls.shape, ox, oy, r)) continue;
        const int px = wrap(cx + ox, W);
        const int py = wrap(cy + oy, H);
        float* pix = frame + (py * W + px) * C;
        pix[0] = rgb.r;
        pix[1] = rgb.g;
        pix[2] = rgb.b;
      }
    }
  }
}

std::vector<float> gen_static_video(const float* frame, int h, int w, int c, int t) {
  if (h <= 0 || w <= 0 || c <= 0 || t <= 0) throw UsageError("gen_static_video: bad dims");
  const int64_t fn = static_cast<int64_t>(h) * w * c;
  std::vector<float> out(static_cast<size_t>(fn) * static_cast<size_t>(t));
  for (int i = 0; i < t; ++i) std::copy(frame, frame + fn, out.begin() + i * fn);
  return out;
}

const ClassDef& DatasetBundle::class_of(int id) const {
  for (const auto& c : classes) {
    if (c.id == id) return c;
  }
  throw UsageError("dataset has no class with id " + std::to_string(id));
}

std::vector<int> DatasetBundle::ids_in(Pool p) const {
  std::vector<int> out;
  for (const auto& c : classes) {
    if (c.pool == p) out.push_back(c.id);
  }
  return out;
}

std::vector<ClassPrompt> DatasetBundle::prompts_in(Pool p) const {
  std::vector<ClassPrompt> out;
  for (const auto& c : classes) {
    if (c.pool == p) out.push_back(c.prompt());
  }
  return out;
}

std::vector<ClassPrompt> DatasetBundle::all_prompts() const {
  std::vector<ClassPrompt> out;
  for (const auto& c : classes) out.push_back(c.prompt());
  return out;
}

std::vector<int> DatasetBundle::zeroshot_static_ids() const {
  std::vector<int> out;
  for (const auto& c : classes) {
    if (c.pool == Pool::kZeroshot && c.is_static()) out.push_back(c.id);
  }
  return out;
}

std::vector<int> DatasetBundle::zeroshot_motion_ids() const {
  std::vector<int> out;
  for (const auto& c : classes) {
    if (c.pool == Pool::kZeroshot && !c.is_static()) out.push_back(c.id);
  }
  return out;
}

nlohmann::json DatasetBundle::manifest() const {
  nlohmann::json classes_json = nlohmann::json::array();
  for (const auto& c : classes) {
    classes_json.push_back({{"id", c.id},
                            {"name", c.name},
                            {"shape", c.shape},
                            {"color", c.color},
                            {"direction", c.direction},
                            {"speed", c.speed},
                            {"pool", pool_name(c.pool)},
                            {"prompt", c.prompt_tokens()}});
  }
  return nlohmann::json{{"kind", "dataset"},
                        {"seed", seed},
                        {"data_config", data_config_to_json(config)},
                        {"classes", classes_json},
                        {"counts",
                         {{"pretrain", ids_in(Pool::kPretrain).size()},
                          {"finetune", ids_in(Pool::kFinetune).size()},
                          {"zeroshot", ids_in(Pool::kZeroshot).size()}}}};
}

DatasetBundle gen_dataset(const DataConfig& cfg, uint64_t seed) {
  cfg.validate();
  DatasetBundle b;
  b.config = cfg;
  b.seed = seed;
  b.classes = build_catalog(seed);

  b.pretrain_train = make_set(1, cfg.frame_size, cfg.frame_size);
  b.pretrain_eval = make_set(1, cfg.frame_size, cfg.frame_size);
  b.finetune_train = make_set(cfg.frames_t, cfg.frame_size, cfg.frame_size);
  b.finetune_eval = make_set(cfg.frames_t, cfg.frame_size, cfg.frame_size);
  b.zeroshot_eval = make_set(cfg.frames_t, cfg.frame_size, cfg.frame_size);

  const int64_t frame_numel = static_cast<int64_t>(cfg.frame_size) * cfg.frame_size * ModelConfig::kChannels;
  std::vector<float> clip(static_cast<size_t>(frame_numel) * static_cast<size_t>(cfg.frames_t));
  std::vector<float> image(static_cast<size_t>(frame_numel));

  for (const auto& cls : b.classes) {
    switch (cls.pool) {
      case Pool::kPretrain:
        for (int i = 0; i < cfg.train_per_class; ++i) {
          render_video(cfg, cls, i, seed, 1, image.data());
          append_video(b.pretrain_train, image, cls.id);
        }
        for (int i = 0; i < cfg.eval_per_class; ++i) {
          render_video(cfg, cls, cfg.train_per_class + i, seed, 1, image.data());
          append_video(b.pretrain_eval, image, cls.id);
        }
        break;
      case Pool::kFinetune:
        for (int i = 0; i < cfg.train_per_class; ++i) {
          render_video(cfg, cls, i, seed, cfg.frames_t, clip.data());
          append_video(b.finetune_train, clip, cls.id);
        }
        for (int i = 0; i < cfg.eval_per_class; ++i) {
          render_video(cfg, cls, cfg.train_per_class + i, seed, cfg.frames_t, clip.data());
          append_video(b.finetune_eval, clip, cls.id);
        }
        break;
      case Pool::kZeroshot:
        for (int i = 0; i < cfg.eval_per_class; ++i) {
          // eval-sample indices line up with the other pools' eval range
          const int idx = cfg.train_per_class + i;
          if (cls.is_static()) {
            render_video(cfg, cls, idx, seed, 1, image.data());
            auto rep = gen_static_video(image.data(), cfg.frame_size, cfg.frame_size,
                                        ModelConfig::kChannels, cfg.frames_t);
            append_video(b.zeroshot_eval, rep, cls.id);
          } else {
            render_video(cfg, cls, idx, seed, cfg.frames_t, clip.data());
            append_video(b.zeroshot_eval, clip, cls.id);
          }
        }
        break;
    }
  }

  b.pretrain_train.validate();
  b.pretrain_eval.validate();
  b.finetune_train.validate();
  b.finetune_eval.validate();
  b.zeroshot_eval.validate();
  return b;
}

namespace {

NamedTensor pixels_tensor(const std::string& name, const VideoSet& vs) {
  NamedTensor t;
  t.name = name + ".pixels";
  t.shape = {vs.n, vs.t, vs.h, vs.w, vs.c};
  t.data = vs.pixels;
  return t;
}

NamedTensor ids_tensor(const std::string& name, const VideoSet& vs) {
  NamedTensor t;
  t.name = name + ".class_ids";
  t.shape = {vs.n};
  t.data.reserve(vs.class_ids.size());
  for (int id : vs.class_ids) t.data.push_back(static_cast<float>(id));
  return t;
}

VideoSet set_from_container(const Container& c, const std::string& name) {
  const NamedTensor& px = c.tensor(name + ".pixels");
  const NamedTensor& ids = c.tensor(name + ".class_ids");
  if (px.shape.size() != 5) throw IoError("dataset: '" + px.name + "' must be rank 5");
  VideoSet vs;
  vs.n = static_cast<int>(px.shape[0]);
  vs.t = static_cast<int>(px.shape[1]);
  vs.h = static_cast<int>(px.shape[2]);
  vs.w = static_cast<int>(px.shape[3]);
  vs.c = static_cast<int>(px.shape[4]);
  vs.pixels = px.data;
  vs.class_ids.reserve(ids.data.size());
  for (float f : ids.data) vs.class_ids.push_back(static_cast<int>(f));
  vs.validate();
  return vs;
}

}  // namespace

void save_dataset(const std::string& path, const DatasetBundle& bundle) {
  std::vector<NamedTensor> tensors;
  tensors.push_back(pixels_tensor("pretrain_train", bundle.pretrain_train));
  tensors.push_back(ids_tensor("pretrain_train", bundle.pretrain_train));
  tensors.push_back(pixels_tensor("pretrain_eval", bundle.pretrain_eval));
  tensors.push_back(ids_tensor("pretrain_eval", bundle.pretrain_eval));
  tensors.push_back(pixels_tensor("finetune_train", bundle.finetune_train));
  tensors.push_back(ids_tensor("finetune_train", bundle.finetune_train));
  tensors.push_back(pixels_tensor("finetune_eval", bundle.finetune_eval));
  tensors.push_back(ids_tensor("finetune_eval", bundle.finetune_eval));
  tensors.push_back(pixels_tensor("zeroshot_eval", bundle.zeroshot_eval));
  tensors.push_back(ids_tensor("zeroshot_eval", bundle.zeroshot_eval));
  write_container(path, tensors, bundle.manifest());
}

DatasetBundle load_dataset(const std::string& path) {
  Container c = read_container(path);
  if (c.meta.value("kind", std::string()) != "dataset") {
    throw IoError(path + ": container is not a dataset");
  }
  DatasetBundle b;
  b.seed = c.meta.at("seed").get<uint64_t>();
  b.config = data_config_from_json(c.meta.at("data_config"));
  for (const auto& cj : c.meta.at("classes")) {
    ClassDef cls;
    cls.id = cj.at("id").get<int>();
    cls.name = cj.at("name").get<std::string>();
    cls.shape = cj.at("shape").get<std::string>();
    cls.color = cj.at("color").get<std::string>();
    cls.direction = cj.at("direction").get<std::string>();
    cls.speed = cj.at("speed").get<std::string>();
    cls.pool = pool_from_name(cj.at("pool").get<std::string>());
    b.classes.push_back(std::move(cls));
  }
  b.pretrain_train = set_from_container(c, "pretrain_train");
  b.pretrain_eval = set_from_container(c, "pretrain_eval");
  b.finetune_train = set_from_container(c, "finetune_train");
  b.finetune_eval = set_from_container(c, "finetune_eval");
  b.zeroshot_eval = set_from_container(c, "zeroshot_eval");
  return b;
}

}  // namespace ovcp
