#pragma once
// Binary container for named float tensors plus a JSON metadata blob. One
// format serves both checkpoints and dataset files.
//
// Layout (all integers little-endian):
//   "OVCP"                      4-byte magic
//   u32 version                 currently 1
//   u32 n_tensors
//   per tensor:
//     u32 name_len, name bytes (UTF-8)
//     u32 ndim, u64 dims[ndim]
//     f32 values[prod(dims)]
//   u64 meta_len, meta bytes    JSON (UTF-8)
// The file ends exactly after the metadata; trailing bytes are an error.
//
// The metadata always records the tensor name table under "tensor_names";
// a disagreement between that table and the binary entries is reported as
// its own error class rather than a generic parse failure.

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include "ovcp/weightspace.hpp"

namespace ovcp {

inline constexpr uint32_t kContainerVersion = 1;

struct NamedTensor {
  std::string name;
  std::vector<int64_t> shape;
  std::vector<float> data;
};

struct Container {
  std::vector<NamedTensor> tensors;
  nlohmann::json meta;

  const NamedTensor& tensor(const std::string& name) const;
  bool has(const std::string& name) const;
};

void write_container(const std::string& path, const std::vector<NamedTensor>& tensors,
                     const nlohmann::json& meta);
Container read_container(const std::string& path);

// ParamVector <-> tensor list, preserving entry order.
std::vector<NamedTensor> tensors_from_params(const ParamVector& params);
ParamVector params_from_tensors(const std::vector<NamedTensor>& tensors);

// Checkpoints are containers whose tensors are the model parameters and whose
// metadata carries at least {"role", "model", "seed"}. Roles in use:
// "pretrained", "finetuned", "swa", "patched".
struct Checkpoint {
  ParamVector params;
  nlohmann::json meta;

  std::string role() const { return meta.value("role", std::string("?")); }
};

void save_checkpoint(const std::string& path, const ParamVector& params, const nlohmann::json& meta);
Checkpoint load_checkpoint(const std::string& path);

// FNV-1a over the raw file bytes; used for determinism checks and for
// recording parent fingerprints in patched checkpoints.
std::string file_hash_hex(const std::string& path);

}  // namespace ovcp
