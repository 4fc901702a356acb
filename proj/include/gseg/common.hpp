// Shared error types, deterministic RNG and small utilities.
#ifndef GSEG_COMMON_HPP_
#define GSEG_COMMON_HPP_

#include <atomic>
#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace gseg {

// Error taxonomy mirrors the CLI exit codes: usage(2), io(3), data(4), numeric(5).
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct UsageError : Error {
  using Error::Error;
};
struct IoError : Error {
  using Error::Error;
};
struct DataError : Error {
  using Error::Error;
};
struct NumericError : Error {
  using Error::Error;
};

namespace detail {
inline void format_into(std::ostringstream&) {}
template <class T, class... Rest>
void format_into(std::ostringstream& os, const T& v, const Rest&... rest) {
  os << v;
  format_into(os, rest...);
}
}  // namespace detail

template <class... Args>
std::string format_msg(const Args&... args) {
  std::ostringstream os;
  detail::format_into(os, args...);
  return os.str();
}

template <class E, class... Args>
[[noreturn]] void raise(const Args&... args) {
  throw E(format_msg(args...));
}

// Deterministic RNG. Distributions are hand-rolled on top of mt19937_64 so
// streams are identical across standard library implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : eng_(seed) {}

  std::uint64_t next_u64() { return eng_(); }

  // uniform in [0, 1)
  double uniform() {
    return (eng_() >> 11) * (1.0 / 9007199254740992.0);  // 53-bit mantissa
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // uniform integer in [0, n)
  std::uint64_t uniform_index(std::uint64_t n) {
    if (n == 0) raise<UsageError>("uniform_index: n must be positive");
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() / n * n;
    std::uint64_t x;
    do {
      x = eng_();
    } while (x >= limit);
    return x % n;
  }

  bool bernoulli(double p_true) { return uniform() < p_true; }

  // Box-Muller; one value per call keeps the stream position predictable.
  double normal(double mean = 0.0, double sd = 1.0) {
    double u1 = uniform();
    double u2 = uniform();
    if (u1 <= 0.0) u1 = 5e-324;
    const double r = std::sqrt(-2.0 * std::log(u1));
    return mean + sd * r * std::cos(6.283185307179586477 * u2);
  }

  // Derives an independent stream (e.g. per-epoch, per-volume).
  Rng fork(std::uint64_t salt) {
    return Rng(eng_() ^ (salt * 0x9E3779B97F4A7C15ull + 0x632BE59BD9B4E019ull));
  }

 private:
  std::mt19937_64 eng_;
};

// Process-wide worker count used by the dense convolution path. Default 1
// keeps every run reproducible; parallel split is across output channels,
// so results are identical for any count.
inline std::atomic<int>& thread_count_ref() {
  static std::atomic<int> n{1};
  return n;
}
inline void set_thread_count(int n) { thread_count_ref() = n < 1 ? 1 : n; }
inline int thread_count() { return thread_count_ref(); }

// Runs fn(i) for i in [0, n). Each index must touch disjoint output.
template <class Fn>
void parallel_for(std::int64_t n, const Fn& fn) {
  const int workers = thread_count();
  if (workers <= 1 || n <= 1) {
    for (std::int64_t i = 0; i < n; ++i) fn(i);
    return;
  }
  const int use = static_cast<int>(std::min<std::int64_t>(workers, n));
  std::vector<std::thread> pool;
  pool.reserve(use);
  for (int w = 0; w < use; ++w) {
    pool.emplace_back([&, w] {
      for (std::int64_t i = w; i < n; i += use) fn(i);
    });
  }
  for (auto& t : pool) t.join();
}

}  // namespace gseg

#endif  // GSEG_COMMON_HPP_
