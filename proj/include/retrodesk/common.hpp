#pragma once

#include <cmath>
#include <condition_variable>
#include <cstdint>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <functional>
#include <mutex>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace retrodesk {

using TokenId = uint32_t;

// Byte-level vocabulary: token 0 is the pad token, bytes are stored shifted
// by +1, so document token ids live in [1, 257).
inline constexpr TokenId kPadToken = 0;
inline constexpr uint32_t kVocabSize = 257;

// Malformed or truncated input files (bad magic, version, field). CLI exit 3.
class FormatError : public std::runtime_error {
 public:
  explicit FormatError(const std::string& what) : std::runtime_error(what) {}
};

// Non-finite loss or similar numeric failure. CLI exit 4.
class NumericError : public std::runtime_error {
 public:
  explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

// SplitMix64: all seeded randomness in the project flows through this.
struct SplitMix64 {
  uint64_t state;
  explicit SplitMix64(uint64_t seed) : state(seed) {}
  uint64_t next() {
    uint64_t z = (state += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }
  // Uniform in [0, 1).
  double next_double() { return (next() >> 11) * 0x1.0p-53; }
  // Uniform integer in [0, n).
  uint64_t next_below(uint64_t n) { return next() % n; }
  // Standard normal via Box-Muller (cosine branch).
  double next_gaussian() {
    double u1 = next_double();
    double u2 = next_double();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }
};

// Stateless 64-bit mix of a key pair, for counter-based random tables.
inline uint64_t hash_mix(uint64_t a, uint64_t b) {
  SplitMix64 rng(a * 0x9e3779b97f4a7c15ull + b);
  return rng.next();
}

// Worker cap: RETRO_DESK_THREADS overrides hardware concurrency.
inline int worker_count() {
  static const int cached = [] {
    int n = static_cast<int>(std::thread::hardware_concurrency());
    if (n <= 0) n = 1;
    if (const char* env = std::getenv("RETRO_DESK_THREADS")) {
      int cap = std::atoi(env);
      if (cap >= 1 && cap < n) n = cap;
    }
    return n;
  }();
  return cached;
}

namespace detail {

// Persistent worker pool; spawning a thread per loop is far too slow for the
// small kernels this project runs.
class ThreadPool {
 public:
  static ThreadPool& instance() {
    static ThreadPool pool(worker_count() - 1);
    return pool;
  }

  // Runs fn over [0, n) split into contiguous stripes. Blocks until done.
  void run(int64_t n, const std::function<void(int64_t, int64_t)>& fn) {
    const int parts = static_cast<int>(workers_.size()) + 1;
    if (parts == 1 || n == 0) {
      if (n > 0) fn(0, n);
      return;
    }
    {
      std::unique_lock<std::mutex> lock(mu_);
      job_ = &fn;
      job_n_ = n;
      job_parts_ = parts;
      remaining_ = static_cast<int>(workers_.size());
      ++generation_;
    }
    cv_.notify_all();
    fn(0, n / parts);  // stripe 0 on the calling thread
    std::unique_lock<std::mutex> lock(mu_);
    done_cv_.wait(lock, [&] { return remaining_ == 0; });
    job_ = nullptr;
  }

 private:
  explicit ThreadPool(int extra_workers) {
    for (int w = 0; w < extra_workers; ++w) {
      workers_.emplace_back([this, w] {
        uint64_t seen = 0;
        for (;;) {
          const std::function<void(int64_t, int64_t)>* job;
          int64_t n;
          int parts;
          {
            std::unique_lock<std::mutex> lock(mu_);
            cv_.wait(lock, [&] { return stop_ || generation_ != seen; });
            if (stop_) return;
            seen = generation_;
            job = job_;
            n = job_n_;
            parts = job_parts_;
          }
          int64_t lo = n * (w + 1) / parts;
          int64_t hi = n * (w + 2) / parts;
          if (lo < hi) (*job)(lo, hi);
          {
            std::unique_lock<std::mutex> lock(mu_);
            if (--remaining_ == 0) done_cv_.notify_all();
          }
        }
      });
    }
  }
  ~ThreadPool() {
    {
      std::unique_lock<std::mutex> lock(mu_);
      stop_ = true;
    }
    cv_.notify_all();
    for (auto& t : workers_) t.join();
  }

  std::vector<std::thread> workers_;
  std::mutex mu_;
  std::condition_variable cv_, done_cv_;
  const std::function<void(int64_t, int64_t)>* job_ = nullptr;
  int64_t job_n_ = 0;
  int job_parts_ = 1;
  int remaining_ = 0;
  uint64_t generation_ = 0;
  bool stop_ = false;
};

}  // namespace detail

// Parallel loop over [0, n). Each index is handled by exactly one worker and
// results must be written to disjoint slots, so the outcome is independent of
// the number of workers. `work_hint` approximates the total operation count;
// small loops run inline.
inline void parallel_for(int64_t n, const std::function<void(int64_t)>& fn,
                         int64_t work_hint = -1) {
  if (work_hint < 0) work_hint = n * 4096;
  if (n < 2 || worker_count() == 1 || work_hint < 65536) {
    for (int64_t i = 0; i < n; ++i) fn(i);
    return;
  }
  detail::ThreadPool::instance().run(n, [&](int64_t lo, int64_t hi) {
    for (int64_t i = lo; i < hi; ++i) fn(i);
  });
}

// ---- little-endian binary IO helpers ----

template <typename T>
void write_pod(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is, const std::string& context) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw FormatError("truncated read (" + context + ")");
  return v;
}

template <typename T>
void write_vec(std::ostream& os, const std::vector<T>& v) {
  if (!v.empty())
    os.write(reinterpret_cast<const char*>(v.data()),
             static_cast<std::streamsize>(v.size() * sizeof(T)));
}

template <typename T>
void read_vec(std::istream& is, std::vector<T>& v, size_t count,
              const std::string& context) {
  v.resize(count);
  if (count == 0) return;
  is.read(reinterpret_cast<char*>(v.data()),
          static_cast<std::streamsize>(count * sizeof(T)));
  if (!is) throw FormatError("truncated read (" + context + ")");
}

inline void write_magic(std::ostream& os, const char magic[4]) {
  os.write(magic, 4);
}

inline void expect_magic(std::istream& is, const char magic[4],
                         const std::string& path) {
  char buf[4] = {0, 0, 0, 0};
  is.read(buf, 4);
  if (!is || std::memcmp(buf, magic, 4) != 0)
    throw FormatError(path + ": bad magic, expected '" +
                      std::string(magic, 4) + "'");
}

inline void expect_version(std::istream& is, uint32_t want,
                           const std::string& path) {
  uint32_t got = read_pod<uint32_t>(is, path + " version");
  if (got != want)
    throw FormatError(path + ": unsupported version " + std::to_string(got));
}

inline std::ofstream open_out(const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open for writing: " + path);
  return os;
}

inline std::ifstream open_in(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open for reading: " + path);
  return is;
}

}  // namespace retrodesk
