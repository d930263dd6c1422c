#pragma once
// Synthetic video-text corpus: colored shapes on a noisy background, either
// static (image classes) or drifting with a fixed direction and speed (motion
// classes). The catalog is split into three pools:
//
//   pretrain  - 24 static (shape, color) classes, rendered as single frames;
//   finetune  - 12 motion classes over pretrain-seen (shape, color) bases,
//               including one forced pair that differs ONLY in direction;
//   zeroshot  - 6 motion classes on bases never seen as motion plus 6 static
//               classes whose (shape, color) pair never appears in pretrain.
//
// Rendering is seeded per (shape, color, speed, sample index) and explicitly
// NOT per direction, so the two classes of the motion-only pair share their
// noise field and starting position: their clips are bit-identical on frame
// zero and diverge only through motion. Motion wraps around the frame edges,
// which keeps the visible shape mass constant and the marginal distribution
// of single frames independent of direction.

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include "ovcp/common.hpp"
#include "ovcp/model.hpp"
#include "ovcp/video.hpp"

namespace ovcp {

enum class Pool { kPretrain, kFinetune, kZeroshot };

const char* pool_name(Pool p);
Pool pool_from_name(const std::string& s);

struct ClassDef {
  int id = -1;
  std::string name;
  std::string shape;
  std::string color;
  std::string direction;  // empty for static classes
  std::string speed;      // empty for static classes
  Pool pool = Pool::kPretrain;

  bool is_static() const { return direction.empty(); }
  std::vector<std::string> prompt_tokens() const;
  ClassPrompt prompt() const { return {id, prompt_tokens()}; }
};

struct DataConfig {
  int frame_size = 16;
  int frames_t = 8;
  int train_per_class = 40;
  int eval_per_class = 20;
  double noise_level = 0.02;
  int shape_radius = 0;  // 0 = frame_size / 4

  int radius() const { return shape_radius > 0 ? shape_radius : frame_size / 4; }
  void validate() const;
};

nlohmann::json data_config_to_json(const DataConfig& cfg);
DataConfig data_config_from_json(const nlohmann::json& j);

// Fixed-size catalog (24 + 12 + 12 classes) with seeded pool assignment.
std::vector<ClassDef> build_catalog(uint64_t seed);

// Render one clip of `frames` frames into out[frames * h * w * c].
void render_video(const DataConfig& cfg, const ClassDef& cls, int sample_idx, uint64_t seed,
                  int frames, float* out);

// Repeat a single frame into a clip of length t (pixels copied verbatim).
std::vector<float> gen_static_video(const float* frame, int h, int w, int c, int t);

struct DatasetBundle {
  DataConfig config;
  uint64_t seed = 0;
  std::vector<ClassDef> classes;

  VideoSet pretrain_train;  // t = 1
  VideoSet pretrain_eval;   // t = 1
  VideoSet finetune_train;  // t = frames_t
  VideoSet finetune_eval;   // t = frames_t
  VideoSet zeroshot_eval;   // t = frames_t (static classes are repeated frames)

  const ClassDef& class_of(int id) const;
  std::vector<int> ids_in(Pool p) const;
  std::vector<ClassPrompt> prompts_in(Pool p) const;
  std::vector<ClassPrompt> all_prompts() const;
  // zeroshot split by kind, for the forgetting measurements
  std::vector<int> zeroshot_static_ids() const;
  std::vector<int> zeroshot_motion_ids() const;

  nlohmann::json manifest() const;
};

DatasetBundle gen_dataset(const DataConfig& cfg, uint64_t seed);

void save_dataset(const std::string& path, const DatasetBundle& bundle);
DatasetBundle load_dataset(const std::string& path);

// Prompt-bank seed derived from the dataset's own seed, so every command that
// touches the same dataset builds identical text embeddings regardless of the
// run seed. (Embeddings are per-prompt deterministic, so banks built over
// different class subsets agree on the classes they share.)
inline uint64_t prompt_bank_seed(const DatasetBundle& b) {
  return seed_stream(b.seed, "prompt bank");
}

}  // namespace ovcp
