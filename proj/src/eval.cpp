#include "ovcp/eval.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "ovcp/common.hpp"

namespace ovcp {

namespace {

// Candidates arrive as an arbitrary id list; scoring wants them ascending and
// unique so tie-breaking is "lowest id wins" by construction.
std::vector<int> checked_candidates(std::span<const int> candidates, const ClassPromptBank& bank) {
  if (candidates.empty()) throw UsageError("eval: candidate set is empty");
  std::vector<int> sorted(candidates.begin(), candidates.end());
  std::sort(sorted.begin(), sorted.end());
  for (size_t i = 0; i + 1 < sorted.size(); ++i) {
    if (sorted[i] == sorted[i + 1]) {
      throw UsageError("eval: duplicate candidate class " + std::to_string(sorted[i]));
    }
  }
  for (int id : sorted) {
    if (!bank.has(id)) {
      throw UsageError("eval: candidate class " + std::to_string(id) + " has no prompt");
    }
  }
  return sorted;
}

double cosine(std::span<const float> a, std::span<const float> b) {
  return similarity<float>(a, b);
}

}  // namespace

nlohmann::json Metrics::to_json() const {
  nlohmann::json per;
  for (const auto& [id, acc] : per_class) per[std::to_string(id)] = acc;
  return nlohmann::json{
      {"top1", top1}, {"top5", top5}, {"n_samples", n_samples}, {"per_class", per}};
}

Metrics score_embeddings(std::span<const float> embeddings, int dim, std::span<const int> labels,
                         const ClassPromptBank& bank, std::span<const int> candidates) {
  if (dim <= 0) throw UsageError("score_embeddings: dim must be positive");
  if (embeddings.size() != labels.size() * static_cast<size_t>(dim)) {
    throw UsageError("score_embeddings: embedding/label size mismatch");
  }
  if (labels.empty()) throw UsageError("score_embeddings: no samples");
  std::vector<int> cand = checked_candidates(candidates, bank);
  const int k_top = std::min<int>(5, static_cast<int>(cand.size()));

  std::map<int, int> class_total, class_hit;
  for (int id : cand) {
    class_total[id] = 0;
    class_hit[id] = 0;
  }

  Metrics m;
  m.n_samples = static_cast<int>(labels.size());
  int hit1 = 0, hit5 = 0;
  for (size_t i = 0; i < labels.size(); ++i) {
    const int truth = labels[i];
    if (!std::binary_search(cand.begin(), cand.end(), truth)) {
      throw UsageError("score_embeddings: label " + std::to_string(truth) +
                       " outside the candidate set");
    }
    auto row = embeddings.subspan(i * static_cast<size_t>(dim), static_cast<size_t>(dim));
    // One pass in ascending id order: strict improvement moves the argmax, so
    // equal scores keep the lowest id. The true class's rank counts strictly
    // better candidates plus equal-scored ones with a lower id.
    double best = 0.0;
    int best_id = -1;
    double truth_sim = 0.0;
    std::vector<double> sims(cand.size());
    for (size_t c = 0; c < cand.size(); ++c) {
      sims[c] = cosine(row, bank.embedding(cand[c]));
      if (best_id < 0 || sims[c] > best) {
        best = sims[c];
        best_id = cand[c];
      }
      if (cand[c] == truth) truth_sim = sims[c];
    }
    int rank = 0;
    for (size_t c = 0; c < cand.size(); ++c) {
      if (sims[c] > truth_sim || (sims[c] == truth_sim && cand[c] < truth)) ++rank;
    }
    class_total[truth] += 1;
    if (best_id == truth) {
      ++hit1;
      class_hit[truth] += 1;
    }
    if (rank < k_top) ++hit5;
  }
  m.top1 = static_cast<double>(hit1) / m.n_samples;
  m.top5 = static_cast<double>(hit5) / m.n_samples;
  for (const auto& [id, total] : class_total) {
    if (total > 0) m.per_class[id] = static_cast<double>(class_hit[id]) / total;
  }
  if (m.top1 > m.top5) throw InvariantError("score_embeddings: top1 exceeded top5");
  return m;
}

Metrics zero_shot_accuracy(const VideoSet& videos, const ClassPromptBank& bank,
                           std::span<const int> candidates, const ParamVector& theta,
                           const ModelConfig& cfg) {
  Encoder<float> enc(cfg);
  std::vector<float> emb = enc.encode_videos(videos, theta);
  return score_embeddings(emb, cfg.embed_dim, videos.class_ids, bank, candidates);
}

nlohmann::json Ep1Result::to_json() const {
  nlohmann::json runs_json = nlohmann::json::array();
  for (const auto& r : runs) runs_json.push_back(r.to_json());
  return nlohmann::json{{"top1_mean", top1_mean},
                        {"top1_std", top1_std},
                        {"top5_mean", top5_mean},
                        {"top5_std", top5_std},
                        {"repeats", runs.size()},
                        {"runs", runs_json}};
}

Ep1Result ep1_eval(const VideoSet& videos, const ClassPromptBank& bank,
                   std::span<const int> classes, const ParamVector& theta, const ModelConfig& cfg,
                   int repeats, uint64_t seed) {
  std::vector<int> pool = checked_candidates(classes, bank);
  if (pool.size() < 2) throw UsageError("ep1_eval: need at least two classes");
  if (repeats < 1) throw UsageError("ep1_eval: repeats must be at least 1");

  // Encode every video once; each repeat only re-scores a subset of rows.
  Encoder<float> enc(cfg);
  std::vector<float> emb = enc.encode_videos(videos, theta);
  const size_t dim = static_cast<size_t>(cfg.embed_dim);

  Ep1Result out;
  for (int r = 0; r < repeats; ++r) {
    Rng rng(seed_stream(seed, "ep1", static_cast<uint64_t>(r)));
    std::vector<int> shuffled = pool;
    rng.shuffle(shuffled);
    shuffled.resize(pool.size() / 2);
    std::sort(shuffled.begin(), shuffled.end());

    std::vector<float> sub_emb;
    std::vector<int> sub_labels;
    for (int i = 0; i < videos.n; ++i) {
      int label = videos.class_ids[static_cast<size_t>(i)];
      if (!std::binary_search(shuffled.begin(), shuffled.end(), label)) continue;
      sub_labels.push_back(label);
      auto row = std::span<const float>(emb).subspan(static_cast<size_t>(i) * dim, dim);
      sub_emb.insert(sub_emb.end(), row.begin(), row.end());
    }
    if (sub_labels.empty()) {
      throw UsageError("ep1_eval: a half-class draw matched no videos; "
                       "the video set does not cover the class pool");
    }
    out.runs.push_back(score_embeddings(sub_emb, cfg.embed_dim, sub_labels, bank, shuffled));
  }

  auto mean_std = [&](auto pick) {
    double mean = 0.0;
    for (const auto& m : out.runs) mean += pick(m);
    mean /= static_cast<double>(out.runs.size());
    double var = 0.0;
    for (const auto& m : out.runs) {
      double d = pick(m) - mean;
      var += d * d;
    }
    var /= static_cast<double>(out.runs.size());
    return std::pair<double, double>(mean, std::sqrt(var));
  };
  std::tie(out.top1_mean, out.top1_std) = mean_std([](const Metrics& m) { return m.top1; });
  std::tie(out.top5_mean, out.top5_std) = mean_std([](const Metrics& m) { return m.top5; });
  return out;
}

nlohmann::json RetrievalResult::to_json() const {
  return nlohmann::json{{"t2v", t2v}, {"v2t", v2t}};
}

RetrievalResult retrieval_recall(std::span<const float> video_emb,
                                 std::span<const float> text_emb, int dim, int topn) {
  if (topn < 1) throw UsageError("retrieval_recall: topn must be at least 1");
  if (dim <= 0) throw UsageError("retrieval_recall: dim must be positive");
  if (video_emb.size() != text_emb.size() || video_emb.size() % static_cast<size_t>(dim) != 0) {
    throw UsageError("retrieval_recall: embedding sizes must match and divide dim");
  }
  const size_t n = video_emb.size() / static_cast<size_t>(dim);
  if (n == 0) throw UsageError("retrieval_recall: empty corpus");

  auto row = [&](std::span<const float> all, size_t i) {
    return all.subspan(i * static_cast<size_t>(dim), static_cast<size_t>(dim));
  };
  // rank of the true match for query i over the opposite corpus: strictly
  // better scores, plus equal scores at a lower index (deterministic ties).
  auto hits = [&](std::span<const float> queries, std::span<const float> corpus) {
    size_t hit = 0;
    for (size_t i = 0; i < n; ++i) {
      double truth = cosine(row(queries, i), row(corpus, i));
      size_t rank = 0;
      for (size_t j = 0; j < n; ++j) {
        if (j == i) continue;
        double s = cosine(row(queries, i), row(corpus, j));
        if (s > truth || (s == truth && j < i)) ++rank;
      }
      if (rank < static_cast<size_t>(topn)) ++hit;
    }
    return static_cast<double>(hit) / static_cast<double>(n);
  };
  RetrievalResult out;
  out.t2v = hits(text_emb, video_emb);
  out.v2t = hits(video_emb, text_emb);
  return out;
}

TradeoffCurve sweep_lambda(const ParamVector& theta_clip, const ParamVector& theta_end,
                           std::span<const double> grid, const VideoSet& closeset,
                           std::span<const int> closeset_candidates, const VideoSet& zeroshot,
                           std::span<const int> zeroshot_candidates, const ClassPromptBank& bank,
                           const ModelConfig& cfg) {
  if (grid.empty()) throw UsageError("sweep_lambda: empty lambda grid");
  for (size_t i = 0; i < grid.size(); ++i) {
    if (!(grid[i] >= 0.0 && grid[i] <= 1.0)) {
      throw UsageError("sweep_lambda: lambda must lie in [0, 1]");
    }
    if (i > 0 && grid[i] <= grid[i - 1]) {
      throw UsageError("sweep_lambda: lambda grid must be strictly increasing");
    }
  }
  require_compatible(theta_clip, theta_end, "sweep_lambda");

  TradeoffCurve curve;
  for (double lambda : grid) {
    // interpolate() returns the exact operand at the endpoints, so the
    // endpoint rows of the curve are direct evaluations of theta_end/theta_clip.
    ParamVector patched = interpolate(theta_clip, theta_end, lambda);
    TradeoffPoint p;
    p.lambda = lambda;
    p.closeset_top1 =
        zero_shot_accuracy(closeset, bank, closeset_candidates, patched, cfg).top1;
    p.zeroshot_top1 =
        zero_shot_accuracy(zeroshot, bank, zeroshot_candidates, patched, cfg).top1;
    curve.push_back(p);
  }
  return curve;
}

std::string curve_to_csv(const TradeoffCurve& curve) {
  std::ostringstream os;
  os << "lambda,closeset_top1,zeroshot_top1\n";
  os.precision(10);
  for (const auto& p : curve) {
    os << p.lambda << ',' << p.closeset_top1 << ',' << p.zeroshot_top1 << '\n';
  }
  return os.str();
}

nlohmann::json curve_to_json(const TradeoffCurve& curve) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& p : curve) {
    rows.push_back(nlohmann::json{{"lambda", p.lambda},
                                  {"closeset_top1", p.closeset_top1},
                                  {"zeroshot_top1", p.zeroshot_top1}});
  }
  return rows;
}

}  // namespace ovcp
