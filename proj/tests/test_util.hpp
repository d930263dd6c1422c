#pragma once
// Shared helpers for the unit tests: seeded random matrices and single-entry
// ParamVectors used to drive the finite-difference oracle.

#include <vector>

#include "ovcp/common.hpp"
#include "ovcp/tensor.hpp"
#include "ovcp/weightspace.hpp"

namespace ovcp::testutil {

template <typename S>
MatT<S> random_mat(int64_t r, int64_t c, uint64_t seed, double scale = 1.0) {
  Rng rng(seed);
  MatT<S> m(r, c);
  for (auto& x : m.v) x = static_cast<S>(rng.normal() * scale);
  return m;
}

// Wrap a matrix into a one-entry ParamVector so it can be perturbed by the
// finite-difference driver.
template <typename S>
ParamVectorT<S> wrap_param(const MatT<S>& m, const std::string& name = "x") {
  ParamVectorT<S> theta;
  theta.add(name, {m.rows, m.cols});
  auto dst = theta.data(name);
  for (size_t i = 0; i < dst.size(); ++i) dst[i] = m.v[i];
  return theta;
}

template <typename S>
MatT<S> unwrap_param(const ParamVectorT<S>& theta, int64_t r, int64_t c,
                     const std::string& name = "x") {
  MatT<S> m(r, c);
  auto src = theta.data(name);
  for (size_t i = 0; i < src.size(); ++i) m.v[i] = src[i];
  return m;
}

}  // namespace ovcp::testutil
