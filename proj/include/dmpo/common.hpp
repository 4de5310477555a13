#pragma once

#include <atomic>
#include <cmath>
#include <cstdlib>
#include <condition_variable>
#include <cstdint>
#include <functional>
#include <mutex>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace dmpo {

// ---------------------------------------------------------------------------
// Error types. Everything user-facing throws one of these; the CLI maps them
// to process exit codes (config -> 1, runtime/numerical -> 2).
// ---------------------------------------------------------------------------

struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

struct ConfigError : Error {
  explicit ConfigError(const std::string& msg) : Error("config error: " + msg) {}
};

struct DimError : Error {
  explicit DimError(const std::string& msg) : Error("dimension error: " + msg) {}
};

struct StateError : Error {
  explicit StateError(const std::string& msg) : Error("state error: " + msg) {}
};

struct NumericError : Error {
  explicit NumericError(const std::string& msg) : Error("numeric error: " + msg) {}
};

struct IoError : Error {
  explicit IoError(const std::string& msg) : Error("io error: " + msg) {}
};

struct IndexError : Error {
  explicit IndexError(const std::string& msg) : Error("index error: " + msg) {}
};

// Parse failures carry the byte offset of the offending input.
struct ParseError : Error {
  ParseError(const std::string& msg, std::uint64_t byte_offset)
      : Error("parse error at byte " + std::to_string(byte_offset) + ": " + msg),
        offset(byte_offset) {}
  std::uint64_t offset;
};

// ---------------------------------------------------------------------------
// splitmix64: the portable PRNG used for every random decision in the
// project (datasets, splits, shuffles, weight init). Chosen so that a
// re-implementation in another language reproduces identical streams.
// ---------------------------------------------------------------------------

inline std::uint64_t splitmix64_scramble(std::uint64_t z) {
  z ^= z >> 30;
  z *= 0xBF58476D1CE4E5B9ULL;
  z ^= z >> 27;
  z *= 0x94D049BB133111EBULL;
  z ^= z >> 31;
  return z;
}

class SplitMix64 {
 public:
  explicit SplitMix64(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    state_ += 0x9E3779B97F4A7C15ULL;
    return splitmix64_scramble(state_);
  }

  // Uniform in [0, 1), 53-bit resolution.
  double next_unit() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double next_range(double lo, double hi) { return lo + (hi - lo) * next_unit(); }

  // Uniform integer in [0, n). n must be positive.
  std::uint64_t next_below(std::uint64_t n) {
    return static_cast<std::uint64_t>(next_unit() * static_cast<double>(n)) % n;
  }

  // Standard normal via Box-Muller (one value per call; the sine branch is
  // discarded to keep the stream layout trivial to reproduce).
  double next_normal() {
    double u1 = next_unit();
    double u2 = next_unit();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

 private:
  std::uint64_t state_;
};

// Derive a named sub-stream seed: sub_seed(seed, k) for sample indices,
// sub_seed(seed, hash64(tag)) for role tags ("data", "init", "shuffle").
inline std::uint64_t sub_seed(std::uint64_t seed, std::uint64_t key) {
  return splitmix64_scramble(seed + 0x9E3779B97F4A7C15ULL * (key + 1));
}

// FNV-1a, for hashing role tags into sub-seed keys.
inline std::uint64_t hash64(const std::string& s) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001B3ULL;
  }
  return h;
}

// ---------------------------------------------------------------------------
// Thread pool. Work is split into fixed-size chunks pulled from an atomic
// counter; every chunk is computed start-to-finish by a single worker, so
// results are bitwise independent of the number of threads.
// ---------------------------------------------------------------------------

class ThreadPool {
 public:
  static ThreadPool& instance() {
    static ThreadPool pool;
    return pool;
  }

  int threads() const { return n_threads_; }

  void set_threads(int n) {
    std::lock_guard<std::mutex> lk(api_mutex_);
    stop_workers();
    n_threads_ = n < 1 ? 1 : n;
    start_workers();
  }

  // fn(chunk_begin, chunk_end) over [0, n) in chunks of `grain`.
  void run(std::int64_t n, std::int64_t grain, const std::function<void(std::int64_t, std::int64_t)>& fn) {
    if (n <= 0) return;
    if (grain < 1) grain = 1;
    if (n_threads_ == 1 || n <= grain) {
      fn(0, n);
      return;
    }
    std::lock_guard<std::mutex> lk(api_mutex_);
    job_fn_ = &fn;
    job_n_ = n;
    job_grain_ = grain;
    next_chunk_.store(0, std::memory_order_relaxed);
    pending_.store(n_threads_ - 1, std::memory_order_release);
    {
      std::lock_guard<std::mutex> g(wake_mutex_);
      ++epoch_;
      epoch_atomic_.store(epoch_, std::memory_order_release);
    }
    wake_cv_.notify_all();
    work();  // caller participates
    while (pending_.load(std::memory_order_acquire) != 0) std::this_thread::yield();
    job_fn_ = nullptr;
  }

 private:
  ThreadPool() {
    // kernel-level parallelism is opt-in: on small hosts the wake latency of
    // a second worker outweighs its contribution, and callers get better
    // scaling by running independent seeds in parallel threads instead
    n_threads_ = 1;
    if (const char* env = std::getenv("DMPO_THREADS")) {
      const int n = std::atoi(env);
      if (n >= 1) n_threads_ = n;
    }
    start_workers();
  }

  ~ThreadPool() { stop_workers(); }

  void start_workers() {
    stop_ = false;
    stop_atomic_.store(false, std::memory_order_release);
    for (int i = 0; i < n_threads_ - 1; ++i) {
      workers_.emplace_back([this] { worker_loop(); });
    }
  }

  void stop_workers() {
    {
      std::lock_guard<std::mutex> g(wake_mutex_);
      stop_ = true;
      stop_atomic_.store(true, std::memory_order_release);
      ++epoch_;
      epoch_atomic_.store(epoch_, std::memory_order_release);
    }
    wake_cv_.notify_all();
    for (auto& t : workers_) t.join();
    workers_.clear();
  }

  void worker_loop() {
    std::uint64_t seen = 0;
    for (;;) {
      {
        std::unique_lock<std::mutex> g(wake_mutex_);
        wake_cv_.wait(g, [&] { return epoch_ != seen || stop_; });
        seen = epoch_;
        if (stop_) return;
      }
      work();
      pending_.fetch_sub(1, std::memory_order_acq_rel);
    }
  }

  void work() {
    const auto* fn = job_fn_;
    if (!fn) return;
    for (;;) {
      std::int64_t begin = next_chunk_.fetch_add(job_grain_, std::memory_order_relaxed);
      if (begin >= job_n_) return;
      std::int64_t end = begin + job_grain_;
      if (end > job_n_) end = job_n_;
      (*fn)(begin, end);
    }
  }

  int n_threads_ = 1;
  std::vector<std::thread> workers_;
  std::mutex api_mutex_;
  std::mutex wake_mutex_;
  std::condition_variable wake_cv_;
  std::uint64_t epoch_ = 0;
  std::atomic<std::uint64_t> epoch_atomic_{0};
  bool stop_ = false;
  std::atomic<bool> stop_atomic_{false};
  const std::function<void(std::int64_t, std::int64_t)>* job_fn_ = nullptr;
  std::int64_t job_n_ = 0;
  std::int64_t job_grain_ = 1;
  std::atomic<std::int64_t> next_chunk_{0};
  std::atomic<int> pending_{0};
};

inline void set_threads(int n) { ThreadPool::instance().set_threads(n); }

inline void parallel_for(std::int64_t n, std::int64_t grain,
                         const std::function<void(std::int64_t, std::int64_t)>& fn) {
  ThreadPool::instance().run(n, grain, fn);
}

}  // namespace dmpo
