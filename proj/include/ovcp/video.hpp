#pragma once
// Video storage shared by the data, model and eval modules. Pixels are
// float32 in [0, 1], laid out [n, t, h, w, c] row-major with c = RGB.

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "ovcp/common.hpp"

namespace ovcp {

struct VideoSet {
  int n = 0, t = 0, h = 0, w = 0, c = 3;
  std::vector<float> pixels;
  std::vector<int> class_ids;

  int64_t video_numel() const {
    return static_cast<int64_t>(t) * h * w * c;
  }
  int64_t frame_numel() const { return static_cast<int64_t>(h) * w * c; }

  const float* video(int i) const { return pixels.data() + static_cast<int64_t>(i) * video_numel(); }
  float* video(int i) { return pixels.data() + static_cast<int64_t>(i) * video_numel(); }

  void validate() const {
    if (n < 0 || t <= 0 || h <= 0 || w <= 0 || c <= 0) {
      throw InvariantError("VideoSet: non-positive dims");
    }
    if (static_cast<int64_t>(pixels.size()) != static_cast<int64_t>(n) * video_numel()) {
      throw InvariantError("VideoSet: pixel buffer size does not match [n, t, h, w, c]");
    }
    if (static_cast<int>(class_ids.size()) != n) {
      throw InvariantError("VideoSet: class_ids length does not match n");
    }
    for (float p : pixels) {
      if (!(p >= 0.0f && p <= 1.0f)) {  // also rejects NaN
        throw InvariantError("VideoSet: pixel outside [0, 1]");
      }
    }
    for (int id : class_ids) {
      if (id < 0) throw InvariantError("VideoSet: negative class id");
    }
  }

  VideoSet subset(std::span<const int> idx) const {
    VideoSet out;
    out.n = static_cast<int>(idx.size());
    out.t = t;
    out.h = h;
    out.w = w;
    out.c = c;
    out.pixels.resize(static_cast<size_t>(out.n) * static_cast<size_t>(video_numel()));
    out.class_ids.resize(static_cast<size_t>(out.n));
    for (size_t k = 0; k < idx.size(); ++k) {
      int i = idx[k];
      if (i < 0 || i >= n) throw UsageError("VideoSet::subset: index out of range");
      const float* src = video(i);
      std::copy(src, src + video_numel(), out.pixels.begin() + static_cast<int64_t>(k) * video_numel());
      out.class_ids[k] = class_ids[static_cast<size_t>(i)];
    }
    return out;
  }

  // Videos whose class id is in `keep`, preserving order.
  VideoSet filter_classes(std::span<const int> keep) const {
    std::vector<int> idx;
    for (int i = 0; i < n; ++i) {
      for (int k : keep) {
        if (class_ids[static_cast<size_t>(i)] == k) {
          idx.push_back(i);
          break;
        }
      }
    }
    return subset(idx);
  }
};

}  // namespace ovcp
