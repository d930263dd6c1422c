#pragma once
// Shared plumbing: error taxonomy, deterministic RNG streams, hashing,
// and the worker-count knob used by the few parallel loops we have.

#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

namespace ovcp {

// ---------------------------------------------------------------------------
// Errors. The CLI maps these onto distinct exit codes, so every throw site
// should pick the class that matches what actually went wrong:
//   UsageError     -> bad flags / bad config / caller misuse      (exit 1)
//   InvariantError -> a numeric or structural invariant broke     (exit 2)
//   IoError        -> filesystem & serialization problems         (exit 3)
// ---------------------------------------------------------------------------

struct UsageError : std::runtime_error {
  explicit UsageError(const std::string& msg) : std::runtime_error(msg) {}
};

struct InvariantError : std::runtime_error {
  explicit InvariantError(const std::string& msg) : std::runtime_error(msg) {}
};

struct IoError : std::runtime_error {
  explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

// ---------------------------------------------------------------------------
// Hashing. splitmix64 is the mixing function; fnv1a64 hashes strings. Both
// are fixed algorithms so every platform derives the same streams (std::hash
// is not pinned by the standard and must not leak into anything seeded).
// ---------------------------------------------------------------------------

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

inline uint64_t fnv1a64(std::string_view s) {
  uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

// Combine a seed with sub-stream labels so independent consumers never share
// a sequence (batch sampling vs. alpha draws vs. init, etc.).
inline uint64_t seed_stream(uint64_t seed, std::string_view label) {
  return splitmix64(seed ^ splitmix64(fnv1a64(label)));
}

inline uint64_t seed_stream(uint64_t seed, std::string_view label, uint64_t index) {
  return splitmix64(seed_stream(seed, label) ^ splitmix64(index + 0x51ed270b9uLL));
}

// ---------------------------------------------------------------------------
// Rng: mt19937_64 with hand-rolled uniform/normal transforms. The standard
// pins the mt19937_64 sequence but not the distribution adapters, so we do
// the float conversion and Box-Muller ourselves to keep runs reproducible
// across standard libraries.
// ---------------------------------------------------------------------------

class Rng {
 public:
  explicit Rng(uint64_t seed) : eng_(seed) {}

  uint64_t next_u64() { return eng_(); }

  // Uniform in [0, 1): 53 random bits scaled.
  double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Standard normal via Box-Muller; caches the second variate.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = 0.0;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  // Integer in [0, n). Modulo bias is ~n/2^64 and irrelevant at our scales.
  uint64_t integer(uint64_t n) {
    if (n == 0) throw UsageError("Rng::integer: n must be positive");
    return eng_() % n;
  }

  // Fisher-Yates shuffle, driven by this stream only.
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = static_cast<size_t>(integer(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  // State round-trips through the standard stream operators (used by
  // training resume so a resumed run replays the exact same draws).
  std::string serialize() const {
    std::ostringstream os;
    os << eng_ << ' ' << (has_spare_ ? 1 : 0) << ' ';
    os.precision(17);
    os << spare_;
    return os.str();
  }

  static Rng deserialize(const std::string& s) {
    Rng r;
    std::istringstream is(s);
    int spare_flag = 0;
    is >> r.eng_ >> spare_flag >> r.spare_;
    if (is.fail()) throw IoError("Rng::deserialize: malformed state string");
    r.has_spare_ = spare_flag != 0;
    return r;
  }

 private:
  Rng() : eng_(0) {}
  std::mt19937_64 eng_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// ---------------------------------------------------------------------------
// Worker count: OVCP_THREADS caps the worker pool; unset means "one worker
// per hardware thread". Everything we parallelize is embarrassingly parallel
// with preassigned output slots, so the worker count never changes results.
// ---------------------------------------------------------------------------

inline int worker_count() {
  if (const char* env = std::getenv("OVCP_THREADS")) {
    char* end = nullptr;
    long v = std::strtol(env, &end, 10);
    if (end == env || *end != '\0' || v < 1) {
      throw UsageError(std::string("OVCP_THREADS must be a positive integer, got '") + env + "'");
    }
    return static_cast<int>(v);
  }
  unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : static_cast<int>(hw);
}

// Run fn(i) for i in [0, n). Work is split into contiguous chunks; each index
// writes only its own slot, so scheduling cannot affect the outcome.
template <typename Fn>
void parallel_for(int64_t n, Fn&& fn) {
  int workers = worker_count();
  if (workers <= 1 || n <= 1) {
    for (int64_t i = 0; i < n; ++i) fn(i);
    return;
  }
  if (static_cast<int64_t>(workers) > n) workers = static_cast<int>(n);
  std::vector<std::thread> pool;
  pool.reserve(workers);
  int64_t chunk = (n + workers - 1) / workers;
  for (int w = 0; w < workers; ++w) {
    int64_t lo = w * chunk;
    int64_t hi = std::min(n, lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back([lo, hi, &fn] {
      for (int64_t i = lo; i < hi; ++i) fn(i);
    });
  }
  for (auto& t : pool) t.join();
}

}  // namespace ovcp
