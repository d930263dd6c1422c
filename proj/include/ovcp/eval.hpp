#pragma once
// Evaluation: top-k classification accuracy against a prompt bank, half-class
// resampled protocol, text<->video retrieval recall, and the patching
// trade-off sweep. Evaluation is float-only and read-only over the weights;
// videos are encoded once per weight set and scored against every candidate
// prompt by cosine similarity. Ties go to the lowest class id so degenerate
// toy inputs stay deterministic.

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "ovcp/model.hpp"
#include "ovcp/video.hpp"
#include "ovcp/weightspace.hpp"

namespace ovcp {

struct Metrics {
  double top1 = 0.0;
  double top5 = 0.0;                // top-min(5, K) when fewer candidates exist
  std::map<int, double> per_class;  // class id -> top-1 accuracy
  int n_samples = 0;

  nlohmann::json to_json() const;
};

// Pure scoring core: embeddings are n rows of `dim` floats, labels[i] is the
// true class of row i, candidates are the class ids in play. Exposed so the
// ranking logic can be exercised with hand-built embeddings.
Metrics score_embeddings(std::span<const float> embeddings, int dim,
                         std::span<const int> labels, const ClassPromptBank& bank,
                         std::span<const int> candidates);

// Encode-and-score: top-1/top-5 over the candidate prompts.
Metrics zero_shot_accuracy(const VideoSet& videos, const ClassPromptBank& bank,
                           std::span<const int> candidates, const ParamVector& theta,
                           const ModelConfig& cfg);

// Half-class protocol: `repeats` seeded draws of half the candidate classes;
// each repeat scores only the videos whose label was drawn. Mean and standard
// deviation (population) are over the repeats' top-1/top-5.
struct Ep1Result {
  double top1_mean = 0.0;
  double top1_std = 0.0;
  double top5_mean = 0.0;
  double top5_std = 0.0;
  std::vector<Metrics> runs;

  nlohmann::json to_json() const;
};

Ep1Result ep1_eval(const VideoSet& videos, const ClassPromptBank& bank,
                   std::span<const int> classes, const ParamVector& theta,
                   const ModelConfig& cfg, int repeats, uint64_t seed);

// Retrieval over a bijective pairing: row i of the video embeddings matches
// row i of the text embeddings. recall@N in both directions.
struct RetrievalResult {
  double t2v = 0.0;
  double v2t = 0.0;

  nlohmann::json to_json() const;
};

RetrievalResult retrieval_recall(std::span<const float> video_emb,
                                 std::span<const float> text_emb, int dim, int topn);

// Trade-off sweep: for every lambda in the grid, patch the weights as
// lambda * theta_clip + (1 - lambda) * theta_end and evaluate both axes.
// Endpoints bypass the blend entirely, so lambda 0 / 1 reproduce the direct
// evaluation of theta_end / theta_clip bit for bit.
struct TradeoffPoint {
  double lambda = 0.0;
  double closeset_top1 = 0.0;
  double zeroshot_top1 = 0.0;
};
using TradeoffCurve = std::vector<TradeoffPoint>;

inline const std::vector<double>& default_lambda_grid() {
  static const std::vector<double> grid = {0.0, 0.1, 0.2, 0.3, 0.4, 0.5,
                                           0.6, 0.7, 0.8, 0.9, 1.0};
  return grid;
}

TradeoffCurve sweep_lambda(const ParamVector& theta_clip, const ParamVector& theta_end,
                           std::span<const double> grid, const VideoSet& closeset,
                           std::span<const int> closeset_candidates, const VideoSet& zeroshot,
                           std::span<const int> zeroshot_candidates, const ClassPromptBank& bank,
                           const ModelConfig& cfg);

// One CSV row per grid point: lambda,closeset_top1,zeroshot_top1.
std::string curve_to_csv(const TradeoffCurve& curve);
nlohmann::json curve_to_json(const TradeoffCurve& curve);

}  // namespace ovcp
