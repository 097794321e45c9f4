#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "backchain/errors.hpp"

namespace backchain::stats {

inline double mean(const std::vector<double>& xs) {
    if (xs.empty()) throw InvalidArgument("mean of empty sample");
    double s = 0;
    for (double x : xs) s += x;
    return s / static_cast<double>(xs.size());
}

inline double sample_stddev(const std::vector<double>& xs) {
    if (xs.size() < 2) throw InvalidArgument("stddev needs >= 2 samples");
    const double m = mean(xs);
    double s = 0;
    for (double x : xs) s += (x - m) * (x - m);
    return std::sqrt(s / static_cast<double>(xs.size() - 1));
}

struct ConfidenceInterval {
    double mean = 0;
    double lo = 0;
    double hi = 0;

    bool contains(double v) const { return lo <= v && v <= hi; }
};

// Normal-approximation CI over run means.
inline ConfidenceInterval normal_ci(const std::vector<double>& xs, double z = 1.959964) {
    ConfidenceInterval ci;
    ci.mean = mean(xs);
    const double se = sample_stddev(xs) / std::sqrt(static_cast<double>(xs.size()));
    ci.lo = ci.mean - z * se;
    ci.hi = ci.mean + z * se;
    return ci;
}

inline double chi_square_statistic(const std::vector<uint64_t>& observed,
                                   const std::vector<double>& expected) {
    if (observed.size() != expected.size()) throw InvalidArgument("chi-square size mismatch");
    double stat = 0;
    for (size_t i = 0; i < observed.size(); ++i) {
        if (expected[i] <= 0) throw InvalidArgument("chi-square expects positive expected counts");
        const double d = static_cast<double>(observed[i]) - expected[i];
        stat += d * d / expected[i];
    }
    return stat;
}

// Upper quantile via the Wilson-Hilferty cube approximation; accurate to a
// fraction of a unit for the df used here (>= 11).
inline double chi_square_critical(int df, double significance) {
    if (df < 1) throw InvalidArgument("chi-square df must be >= 1");
    double z;
    if (significance == 0.001) z = 3.090232;
    else if (significance == 0.01) z = 2.326348;
    else if (significance == 0.05) z = 1.644854;
    else throw InvalidArgument("unsupported significance level");
    const double k = static_cast<double>(df);
    const double t = 1.0 - 2.0 / (9.0 * k) + z * std::sqrt(2.0 / (9.0 * k));
    return k * t * t * t;
}

}  // namespace backchain::stats
