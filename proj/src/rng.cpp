#include "permanence/rng.hpp"

#include <algorithm>
#include <cmath>

#include <boost/math/distributions/normal.hpp>

namespace permanence {

double Rng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  // Marsaglia polar method.
  double u, v, s;
  do {
    u = 2.0 * uniform() - 1.0;
    v = 2.0 * uniform() - 1.0;
    s = u * u + v * v;
  } while (s >= 1.0 || s == 0.0);
  const double factor = std::sqrt(-2.0 * std::log(s) / s);
  spare_ = v * factor;
  has_spare_ = true;
  return u * factor;
}

double Rng::truncated_normal(double mean, double sd, double lo, double hi) {
  if (sd <= 0.0) return std::clamp(mean, lo, hi);
  for (int attempt = 0; attempt < 64; ++attempt) {
    const double x = normal(mean, sd);
    if (x >= lo && x <= hi) return x;
  }
  // Far-tail window: invert the CDF restricted to [lo, hi].
  const boost::math::normal_distribution<double> dist(mean, sd);
  const double a = boost::math::cdf(dist, lo);
  const double b = boost::math::cdf(dist, hi);
  if (!(b > a)) return std::clamp(mean, lo, hi);
  const double p = a + (b - a) * uniform_open();
  return std::clamp(boost::math::quantile(dist, p), lo, hi);
}

}  // namespace permanence
