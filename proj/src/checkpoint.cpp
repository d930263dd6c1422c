#include "ovcp/checkpoint.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "ovcp/common.hpp"

static_assert(std::endian::native == std::endian::little,
              "container I/O assumes a little-endian host");

namespace ovcp {

namespace {

constexpr char kMagic[4] = {'O', 'V', 'C', 'P'};

void put_u32(std::ostream& os, uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); }
void put_u64(std::ostream& os, uint64_t v) { os.write(reinterpret_cast<const char*>(&v), 8); }

uint32_t get_u32(std::istream& is, const std::string& path) {
  uint32_t v = 0;
  if (!is.read(reinterpret_cast<char*>(&v), 4)) throw IoError(path + ": truncated container");
  return v;
}

uint64_t get_u64(std::istream& is, const std::string& path) {
  uint64_t v = 0;
  if (!is.read(reinterpret_cast<char*>(&v), 8)) throw IoError(path + ": truncated container");
  return v;
}

void check_tensor(const NamedTensor& t, const std::string& ctx) {
  if (t.name.empty()) throw InvariantError(ctx + ": empty tensor name");
  int64_t n = 1;
  for (int64_t d : t.shape) {
    if (d <= 0) throw InvariantError(ctx + ": non-positive dim in '" + t.name + "'");
    n *= d;
  }
  if (static_cast<int64_t>(t.data.size()) != n) {
    throw InvariantError(ctx + ": data size mismatch in '" + t.name + "' (" +
                         std::to_string(t.data.size()) + " values for " + shape_to_string(t.shape) + ")");
  }
  for (float v : t.data) {
    if (!std::isfinite(v)) throw InvariantError(ctx + ": non-finite value in '" + t.name + "'");
  }
}

}  // namespace

const NamedTensor& Container::tensor(const std::string& name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return t;
  }
  throw IoError("container has no tensor named '" + name + "'");
}

bool Container::has(const std::string& name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return true;
  }
  return false;
}

void write_container(const std::string& path, const std::vector<NamedTensor>& tensors,
                     const nlohmann::json& meta) {
  for (size_t i = 0; i < tensors.size(); ++i) {
    check_tensor(tensors[i], "write_container");
    for (size_t j = i + 1; j < tensors.size(); ++j) {
      if (tensors[i].name == tensors[j].name) {
        throw InvariantError("write_container: duplicate tensor name '" + tensors[i].name + "'");
      }
    }
  }

  nlohmann::json full_meta = meta;
  auto& names = full_meta["tensor_names"] = nlohmann::json::array();
  for (const auto& t : tensors) names.push_back(t.name);
  const std::string meta_bytes = full_meta.dump();

  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError(path + ": cannot open for writing");
  os.write(kMagic, 4);
  put_u32(os, kContainerVersion);
  put_u32(os, static_cast<uint32_t>(tensors.size()));
  for (const auto& t : tensors) {
    put_u32(os, static_cast<uint32_t>(t.name.size()));
    os.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
    put_u32(os, static_cast<uint32_t>(t.shape.size()));
    for (int64_t d : t.shape) put_u64(os, static_cast<uint64_t>(d));
    os.write(reinterpret_cast<const char*>(t.data.data()),
             static_cast<std::streamsize>(t.data.size() * sizeof(float)));
  }
  put_u64(os, meta_bytes.size());
  os.write(meta_bytes.data(), static_cast<std::streamsize>(meta_bytes.size()));
  if (!os) throw IoError(path + ": write failed");
}

Container read_container(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError(path + ": cannot open");

  char magic[4] = {};
  if (!is.read(magic, 4)) throw IoError(path + ": truncated container");
  if (std::memcmp(magic, kMagic, 4) != 0) throw IoError(path + ": bad magic, not a container file");

  const uint32_t version = get_u32(is, path);
  if (version != kContainerVersion) {
    throw IoError(path + ": unsupported container version " + std::to_string(version) +
                  " (expected " + std::to_string(kContainerVersion) + ")");
  }

  Container c;
  const uint32_t n_tensors = get_u32(is, path);
  c.tensors.resize(n_tensors);
  for (auto& t : c.tensors) {
    const uint32_t name_len = get_u32(is, path);
    t.name.resize(name_len);
    if (!is.read(t.name.data(), name_len)) throw IoError(path + ": truncated container");
    const uint32_t ndim = get_u32(is, path);
    t.shape.resize(ndim);
    int64_t numel = 1;
    for (auto& d : t.shape) {
      d = static_cast<int64_t>(get_u64(is, path));
      if (d <= 0) throw IoError(path + ": bad shape in '" + t.name + "'");
      numel *= d;
    }
    t.data.resize(static_cast<size_t>(numel));
    if (!is.read(reinterpret_cast<char*>(t.data.data()),
                 static_cast<std::streamsize>(t.data.size() * sizeof(float)))) {
      throw IoError(path + ": truncated container");
    }
  }

  const uint64_t meta_len = get_u64(is, path);
  std::string meta_bytes(meta_len, '\0');
  if (!is.read(meta_bytes.data(), static_cast<std::streamsize>(meta_len))) {
    throw IoError(path + ": truncated container");
  }
  if (is.peek() != std::ifstream::traits_type::eof()) {
    throw IoError(path + ": trailing data after metadata");
  }
  try {
    c.meta = nlohmann::json::parse(meta_bytes);
  } catch (const nlohmann::json::exception& e) {
    throw IoError(path + ": bad metadata JSON: " + e.what());
  }

  // Cross-check the recorded name table against the binary entries.
  if (!c.meta.contains("tensor_names") || !c.meta["tensor_names"].is_array() ||
      c.meta["tensor_names"].size() != c.tensors.size()) {
    throw IoError(path + ": name table mismatch (metadata does not list the stored tensors)");
  }
  for (size_t i = 0; i < c.tensors.size(); ++i) {
    if (c.meta["tensor_names"][i].get<std::string>() != c.tensors[i].name) {
      throw IoError(path + ": name table mismatch ('" +
                    c.meta["tensor_names"][i].get<std::string>() + "' vs '" + c.tensors[i].name + "')");
    }
  }

  for (const auto& t : c.tensors) check_tensor(t, path);
  return c;
}

std::vector<NamedTensor> tensors_from_params(const ParamVector& params) {
  std::vector<NamedTensor> out;
  out.reserve(params.entries.size());
  for (const auto& e : params.entries) {
    NamedTensor t;
    t.name = e.name;
    t.shape = e.shape;
    auto src = params.data(e);
    t.data.assign(src.begin(), src.end());
    out.push_back(std::move(t));
  }
  return out;
}

ParamVector params_from_tensors(const std::vector<NamedTensor>& tensors) {
  ParamVector p;
  for (const auto& t : tensors) {
    p.add(t.name, t.shape);
    auto dst = p.data(t.name);
    for (size_t i = 0; i < dst.size(); ++i) dst[i] = t.data[i];
  }
  return p;
}

void save_checkpoint(const std::string& path, const ParamVector& params, const nlohmann::json& meta) {
  if (!meta.contains("role")) throw UsageError("save_checkpoint: metadata must carry a 'role'");
  params.check_finite("save_checkpoint");
  write_container(path, tensors_from_params(params), meta);
}

Checkpoint load_checkpoint(const std::string& path) {
  Container c = read_container(path);
  if (!c.meta.contains("role")) {
    throw IoError(path + ": container is not a checkpoint (no 'role' in metadata)");
  }
  Checkpoint cp;
  cp.params = params_from_tensors(c.tensors);
  cp.meta = std::move(c.meta);
  cp.params.check_finite(path);
  return cp;
}

std::string file_hash_hex(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError(path + ": cannot open for hashing");
  uint64_t h = 0xcbf29ce484222325ull;
  char buf[1 << 15];
  while (is.read(buf, sizeof(buf)) || is.gcount() > 0) {
    const std::streamsize got = is.gcount();
    for (std::streamsize i = 0; i < got; ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 0x100000001b3ull;
    }
    if (got < static_cast<std::streamsize>(sizeof(buf))) break;
  }
  std::ostringstream os;
  os << std::hex << h;
  return os.str();
}

}  // namespace ovcp
