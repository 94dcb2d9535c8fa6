#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <Eigen/Dense>

namespace odtr {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ── deterministic RNG ────────────────────────────────────────────────────────

inline std::uint64_t splitmix64(std::uint64_t& state) {
  state += 0x9e3779b97f4a7c15ULL;
  std::uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// Derives an independent stream id from a master seed; used to hand each
// fold / stage / replicate its own reproducible substream.
inline std::uint64_t mix_seed(std::uint64_t master, std::uint64_t stream) {
  std::uint64_t s = master ^ (0x9e3779b97f4a7c15ULL + (stream << 6) + (stream >> 2));
  splitmix64(s);
  return splitmix64(s);
}

// Generator with hand-rolled variate transforms so that sequences depend only
// on the seed, not on the standard library's distribution implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {
    // warm up so nearby seeds decorrelate
    splitmix64(state_);
    splitmix64(state_);
  }

  std::uint64_t next_u64() { return splitmix64(state_); }

  // uniform on [0, 1)
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Box-Muller; one normal per call, two uniforms consumed
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  double bernoulli(double p) { return uniform() < p ? 1.0 : 0.0; }

  // Fisher-Yates
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(next_u64() % i);
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::uint64_t state_;
};

// ── small numeric helpers ────────────────────────────────────────────────────

inline double expit(double x) { return 1.0 / (1.0 + std::exp(-x)); }

inline double mean(const Vector& v) {
  if (v.size() == 0) throw Error("mean of empty vector");
  return v.mean();
}

// sample standard deviation (n-1 denominator)
inline double sample_sd(const Vector& v) {
  const Eigen::Index n = v.size();
  if (n < 2) return 0.0;
  const double m = v.mean();
  return std::sqrt((v.array() - m).square().sum() / static_cast<double>(n - 1));
}

// Inverse standard normal CDF, Acklam's rational approximation refined with
// one Halley step against erfc; good to ~1e-15 over (0,1).
inline double normal_quantile(double p) {
  if (!(p > 0.0 && p < 1.0)) throw Error("normal_quantile: p must be in (0,1)");
  static const double a[] = {-3.969683028665376e+01, 2.209460984245205e+02,
                             -2.759285104469687e+02, 1.383577518672690e+02,
                             -3.066479806614716e+01, 2.506628277459239e+00};
  static const double b[] = {-5.447609879822406e+01, 1.615858368580409e+02,
                             -1.556989798598866e+02, 6.680131188771972e+01,
                             -1.328068155288572e+01};
  static const double c[] = {-7.784894002430293e-03, -3.223964580411365e-01,
                             -2.400758277161838e+00, -2.549732539343734e+00,
                             4.374664141464968e+00,  2.938163982698783e+00};
  static const double d[] = {7.784695709041462e-03, 3.224671290700398e-01,
                             2.445134137142996e+00, 3.754408661907416e+00};
  const double plow = 0.02425, phigh = 1 - plow;
  double x;
  if (p < plow) {
    const double q = std::sqrt(-2 * std::log(p));
    x = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1);
  } else if (p <= phigh) {
    const double q = p - 0.5, r = q * q;
    x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
        (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1);
  } else {
    const double q = std::sqrt(-2 * std::log(1 - p));
    x = -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1);
  }
  // Halley refinement
  const double e = 0.5 * std::erfc(-x / std::sqrt(2.0)) - p;
  const double u = e * std::sqrt(2.0 * M_PI) * std::exp(x * x / 2.0);
  x = x - u / (1 + x * u / 2);
  return x;
}

// ── feature matrix with named columns ────────────────────────────────────────

struct DesignMatrix {
  std::vector<std::string> names;
  Matrix values;  // n x p, column j holds names[j]

  Eigen::Index rows() const { return values.rows(); }
  Eigen::Index cols() const { return values.cols(); }

  int col_index(const std::string& name) const {
    for (std::size_t j = 0; j < names.size(); ++j)
      if (names[j] == name) return static_cast<int>(j);
    throw Error("design matrix has no column '" + name + "'");
  }

  void set_column(const std::string& name, double value) {
    values.col(col_index(name)).setConstant(value);
  }

  void set_column(const std::string& name, const Vector& v) {
    if (v.size() != values.rows()) throw Error("set_column: length mismatch");
    values.col(col_index(name)) = v;
  }
};

// ── thread pool helper ───────────────────────────────────────────────────────

inline int hardware_threads() {
  const unsigned hc = std::thread::hardware_concurrency();
  return hc == 0 ? 1 : static_cast<int>(hc);
}

// Runs fn(i) for i in [0, count). Work items must be independent; results
// must be written to pre-sized slots so the outcome does not depend on
// scheduling order.
template <typename Fn>
void parallel_for(std::size_t count, int threads, Fn&& fn) {
  if (threads <= 1 || count <= 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> workers;
  const int n_workers = std::min<std::size_t>(static_cast<std::size_t>(threads), count);
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(n_workers));
  for (int w = 0; w < n_workers; ++w) {
    workers.emplace_back([&, w] {
      try {
        for (;;) {
          const std::size_t i = next.fetch_add(1);
          if (i >= count) break;
          fn(i);
        }
      } catch (...) {
        errors[static_cast<std::size_t>(w)] = std::current_exception();
        next.store(count);
      }
    });
  }
  for (auto& t : workers) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace odtr
