#pragma once
// Weight-space utilities. A ParamVector is a named, ordered, flat view of all
// model parameters; interpolation, running averages and distance all operate
// on that flat view. Two vectors are compatible when their name tables agree
// entry-for-entry (same names, same order, same shapes).

#include <cstdint>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "ovcp/common.hpp"

namespace ovcp {

struct ParamEntry {
  std::string name;
  std::vector<int64_t> shape;
  int64_t offset = 0;
  int64_t size = 0;
};

inline std::string shape_to_string(const std::vector<int64_t>& shape) {
  std::string s = "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ", ";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

template <typename S>
struct ParamVectorT {
  std::vector<ParamEntry> entries;
  std::vector<S> values;

  int64_t size() const { return static_cast<int64_t>(values.size()); }

  void add(const std::string& name, const std::vector<int64_t>& shape) {
    int64_t n = 1;
    for (int64_t d : shape) {
      if (d <= 0) throw InvariantError("ParamVector: non-positive dim in '" + name + "'");
      n *= d;
    }
    for (const auto& e : entries) {
      if (e.name == name) throw InvariantError("ParamVector: duplicate entry '" + name + "'");
    }
    entries.push_back({name, shape, static_cast<int64_t>(values.size()), n});
    values.resize(values.size() + static_cast<size_t>(n), S(0));
  }

  const ParamEntry* find(const std::string& name) const {
    for (const auto& e : entries) {
      if (e.name == name) return &e;
    }
    return nullptr;
  }

  std::span<S> data(const ParamEntry& e) {
    return std::span<S>(values.data() + e.offset, static_cast<size_t>(e.size));
  }
  std::span<const S> data(const ParamEntry& e) const {
    return std::span<const S>(values.data() + e.offset, static_cast<size_t>(e.size));
  }

  std::span<S> data(const std::string& name) {
    const ParamEntry* e = find(name);
    if (!e) throw InvariantError("ParamVector: no entry named '" + name + "'");
    return data(*e);
  }
  std::span<const S> data(const std::string& name) const {
    const ParamEntry* e = find(name);
    if (!e) throw InvariantError("ParamVector: no entry named '" + name + "'");
    return data(*e);
  }

  void check_finite(const std::string& what) const {
    for (const auto& e : entries) {
      for (S v : data(e)) {
        if (!std::isfinite(static_cast<double>(v))) {
          throw InvariantError(what + ": non-finite value in '" + e.name + "'");
        }
      }
    }
  }
};

using ParamVector = ParamVectorT<float>;
using ParamVectorD = ParamVectorT<double>;

// Structural compatibility: identical name tables in identical order.
template <typename S, typename U>
void require_compatible(const ParamVectorT<S>& a, const ParamVectorT<U>& b, const std::string& ctx) {
  if (a.entries.size() != b.entries.size()) {
    throw InvariantError(ctx + ": entry count mismatch (" + std::to_string(a.entries.size()) +
                         " vs " + std::to_string(b.entries.size()) + ")");
  }
  for (size_t i = 0; i < a.entries.size(); ++i) {
    const auto& ea = a.entries[i];
    const auto& eb = b.entries[i];
    if (ea.name != eb.name) {
      throw InvariantError(ctx + ": entry " + std::to_string(i) + " name mismatch ('" + ea.name +
                           "' vs '" + eb.name + "')");
    }
    if (ea.shape != eb.shape) {
      throw InvariantError(ctx + ": shape mismatch for '" + ea.name + "' (" +
                           shape_to_string(ea.shape) + " vs " + shape_to_string(eb.shape) + ")");
    }
  }
}

template <typename S>
ParamVectorT<S> zeros_like(const ParamVectorT<S>& a) {
  ParamVectorT<S> out;
  out.entries = a.entries;
  out.values.assign(a.values.size(), S(0));
  return out;
}

inline ParamVectorD widen(const ParamVector& a) {
  ParamVectorD out;
  out.entries = a.entries;
  out.values.assign(a.values.begin(), a.values.end());
  return out;
}

inline ParamVector narrow(const ParamVectorD& a) {
  ParamVector out;
  out.entries = a.entries;
  out.values.resize(a.values.size());
  for (size_t i = 0; i < a.values.size(); ++i) out.values[i] = static_cast<float>(a.values[i]);
  return out;
}

// theta = lambda*a + (1-lambda)*b. The endpoints branch to an exact copy so
// lambda=0 / lambda=1 are bitwise identical to b / a (no signed-zero or
// rounding artifacts from the arithmetic path).
template <typename S>
ParamVectorT<S> interpolate(const ParamVectorT<S>& a, const ParamVectorT<S>& b, double lambda) {
  if (!std::isfinite(lambda) || lambda < 0.0 || lambda > 1.0) {
    throw UsageError("interpolate: lambda must be in [0, 1], got " + std::to_string(lambda));
  }
  require_compatible(a, b, "interpolate");
  if (lambda == 1.0) return a;
  if (lambda == 0.0) return b;
  ParamVectorT<S> out = zeros_like(a);
  const S lam = static_cast<S>(lambda);
  const S one_minus = static_cast<S>(1.0 - lambda);
  for (size_t i = 0; i < out.values.size(); ++i) {
    out.values[i] = lam * a.values[i] + one_minus * b.values[i];
  }
  out.check_finite("interpolate");
  return out;
}

template <typename S>
double weight_distance(const ParamVectorT<S>& a, const ParamVectorT<S>& b) {
  require_compatible(a, b, "weight_distance");
  double acc = 0.0;
  for (size_t i = 0; i < a.values.size(); ++i) {
    double d = static_cast<double>(a.values[i]) - static_cast<double>(b.values[i]);
    acc += d * d;
  }
  return std::sqrt(acc);
}

// Running average of a weight trajectory: after k updates the state holds the
// arithmetic mean of the k absorbed vectors.
template <typename S>
struct SwaStateT {
  ParamVectorT<S> mean;
  int64_t count = 0;

  bool empty() const { return count == 0; }

  void update(const ParamVectorT<S>& theta) {
    if (count == 0) {
      mean = theta;
      count = 1;
      return;
    }
    require_compatible(mean, theta, "SwaState::update");
    const S k = static_cast<S>(count);
    const S inv = S(1) / static_cast<S>(count + 1);
    for (size_t i = 0; i < mean.values.size(); ++i) {
      mean.values[i] = (mean.values[i] * k + theta.values[i]) * inv;
    }
    ++count;
    mean.check_finite("SwaState::update");
  }

  const ParamVectorT<S>& average() const {
    if (count == 0) throw InvariantError("SwaState::average: no snapshots absorbed");
    return mean;
  }
};

using SwaState = SwaStateT<float>;

// Max absolute gap between interpolate(theta_a, swa(run), lambda) and the
// running average of per-snapshot interpolations interpolate(theta_a, w_i,
// lambda). Interpolation toward a fixed anchor is affine, so both orders
// describe the same point; the gap is pure floating-point noise and the
// verification tests pin it near zero in 64-bit mode.
template <typename S>
double check_swa_commutation(const ParamVectorT<S>& theta_a,
                             const std::vector<ParamVectorT<S>>& snapshots, double lambda) {
  if (snapshots.empty()) throw UsageError("check_swa_commutation: need at least one snapshot");
  SwaStateT<S> plain;
  SwaStateT<S> patched;
  for (const auto& w : snapshots) {
    plain.update(w);
    patched.update(interpolate(theta_a, w, lambda));
  }
  ParamVectorT<S> lhs = interpolate(theta_a, plain.average(), lambda);
  const ParamVectorT<S>& rhs = patched.average();
  double worst = 0.0;
  for (size_t i = 0; i < lhs.values.size(); ++i) {
    double d = std::abs(static_cast<double>(lhs.values[i]) - static_cast<double>(rhs.values[i]));
    if (d > worst) worst = d;
  }
  return worst;
}

}  // namespace ovcp
