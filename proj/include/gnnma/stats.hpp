// SPDX-License-Identifier: Apache-2.0
//
// Special functions and distribution fitting: regularized incomplete gamma,
// digamma/trigamma, three-parameter gamma maximum-likelihood fit, gamma
// sampling, and the one-sample Kolmogorov-Smirnov statistic. All functions
// are pure; safe for unrestricted parallel use.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <sstream>
#include <vector>

#include "gnnma/common.hpp"
#include "gnnma/rng.hpp"

namespace gnnma::stats {

namespace detail {

// Lower regularized incomplete gamma by power series; converges fast for x < s + 1.
inline double gamma_p_series(double s, double x) {
    double term = 1.0 / s;
    double sum = term;
    for (int n = 1; n < 10000; ++n) {
        term *= x / (s + n);
        sum += term;
        if (std::abs(term) < std::abs(sum) * 1e-17) {
            return sum * std::exp(s * std::log(x) - x - std::lgamma(s));
        }
    }
    throw NumericError("incomplete gamma series failed to converge");
}

// Upper regularized incomplete gamma via modified Lentz continued fraction;
// used for x >= s + 1.
inline double gamma_q_continued_fraction(double s, double x) {
    const double tiny = 1e-300;
    double b = x + 1.0 - s;
    double c = 1.0 / tiny;
    double d = 1.0 / b;
    double h = d;
    for (int i = 1; i < 10000; ++i) {
        double an = -static_cast<double>(i) * (static_cast<double>(i) - s);
        b += 2.0;
        d = an * d + b;
        if (std::abs(d) < tiny) d = tiny;
        c = b + an / c;
        if (std::abs(c) < tiny) c = tiny;
        d = 1.0 / d;
        double delta = d * c;
        h *= delta;
        if (std::abs(delta - 1.0) < 1e-16) {
            return h * std::exp(s * std::log(x) - x - std::lgamma(s));
        }
    }
    throw NumericError("incomplete gamma continued fraction failed to converge");
}

} // namespace detail

/// P(s, x): regularized lower incomplete gamma, series for x < s+1 and
/// continued fraction otherwise.
inline double regularized_lower_incomplete_gamma(double s, double x) {
    if (!(s > 0.0)) throw ValidationError("incomplete gamma: s must be > 0");
    if (!(x >= 0.0)) throw ValidationError("incomplete gamma: x must be >= 0");
    if (x == 0.0) return 0.0;
    if (x < s + 1.0) return detail::gamma_p_series(s, x);
    return 1.0 - detail::gamma_q_continued_fraction(s, x);
}

/// Digamma: recurrence up to x >= 6, then the Bernoulli asymptotic series.
inline double digamma(double x) {
    if (!(x > 0.0)) throw ValidationError("digamma: positive argument required");
    double result = 0.0;
    while (x < 6.0) {
        result -= 1.0 / x;
        x += 1.0;
    }
    double inv = 1.0 / x;
    double inv2 = inv * inv;
    // ln x - 1/(2x) - sum B_{2n} / (2n x^{2n})
    double series = inv2 * (1.0 / 12.0 -
                    inv2 * (1.0 / 120.0 -
                    inv2 * (1.0 / 252.0 -
                    inv2 * (1.0 / 240.0 -
                    inv2 * (1.0 / 132.0 -
                    inv2 * (691.0 / 32760.0 -
                    inv2 * (1.0 / 12.0)))))));
    return result + std::log(x) - 0.5 * inv - series;
}

/// Trigamma via recurrence plus asymptotic series, used by the MLE Newton step.
inline double trigamma(double x) {
    if (!(x > 0.0)) throw ValidationError("trigamma: positive argument required");
    double result = 0.0;
    while (x < 6.0) {
        result += 1.0 / (x * x);
        x += 1.0;
    }
    double inv = 1.0 / x;
    double inv2 = inv * inv;
    double series = 1.0 +
                    inv * 0.5 +
                    inv2 * (1.0 / 6.0 -
                    inv2 * (1.0 / 30.0 -
                    inv2 * (1.0 / 42.0 -
                    inv2 * (1.0 / 30.0 -
                    inv2 * (5.0 / 66.0 -
                    inv2 * (691.0 / 2730.0 -
                    inv2 * (7.0 / 6.0)))))));
    return result + inv * series;
}

/// Three-parameter gamma: shape alpha, location shift, scale theta.
/// CDF(x) = 0 for x <= loc.
struct GammaFit {
    double shape = 1.0;
    double loc = 0.0;
    double scale = 1.0;
    double log_likelihood = 0.0;
};

inline double gamma_cdf(double x, const GammaFit& fit) {
    if (x <= fit.loc) return 0.0;
    return regularized_lower_incomplete_gamma(fit.shape, (x - fit.loc) / fit.scale);
}

inline double gamma_pdf(double x, const GammaFit& fit) {
    if (x <= fit.loc) return 0.0;
    double y = (x - fit.loc) / fit.scale;
    return std::exp((fit.shape - 1.0) * std::log(y) - y - std::lgamma(fit.shape)) / fit.scale;
}

/// Maximum-likelihood gamma fit with a plug-in location just below the sample
/// minimum (joint MLE for the location is ill-posed). Shape is solved by Newton
/// on ln(alpha) - digamma(alpha) = ln(mean) - mean(ln), initialized from the
/// Choi-Wette closed form; scale follows as mean / alpha.
inline GammaFit gamma_mle_fit(std::span<const double> samples) {
    const size_t n = samples.size();
    if (n < 30) throw ValidationError("gamma_mle_fit: need at least 30 samples");
    double mn = samples[0], mx = samples[0];
    for (double v : samples) {
        if (std::isnan(v)) throw ValidationError("gamma_mle_fit: NaN in samples");
        mn = std::min(mn, v);
        mx = std::max(mx, v);
    }
    if (!(mx > mn)) throw ValidationError("gamma_mle_fit: degenerate sample (all values equal)");

    const double delta = 1e-9 * (mx - mn) + 1e-12;
    const double loc = mn - delta;

    double mean = 0.0, mean_log = 0.0;
    for (double v : samples) {
        double y = v - loc;
        mean += y;
        mean_log += std::log(y);
    }
    mean /= static_cast<double>(n);
    mean_log /= static_cast<double>(n);

    const double s = std::log(mean) - mean_log; // > 0 for non-degenerate data
    double alpha = (3.0 - s + std::sqrt((s - 3.0) * (s - 3.0) + 24.0 * s)) / (12.0 * s);

    bool converged = false;
    for (int it = 0; it < 100; ++it) {
        double f = std::log(alpha) - digamma(alpha) - s;
        double fp = 1.0 / alpha - trigamma(alpha);
        double step = f / fp;
        double next = alpha - step;
        if (next <= 0.0) next = alpha * 0.5;
        double rel = std::abs(next - alpha) / alpha;
        alpha = next;
        if (rel <= 1e-10) {
            converged = true;
            break;
        }
    }
    if (!converged) {
        std::ostringstream os;
        os << "gamma_mle_fit: Newton iteration did not converge (s=" << s << ", alpha=" << alpha << ")";
        throw NumericError(os.str());
    }

    GammaFit fit;
    fit.shape = alpha;
    fit.loc = loc;
    fit.scale = mean / alpha;

    double ll = 0.0;
    for (double v : samples) {
        double y = v - loc;
        ll += (alpha - 1.0) * std::log(y) - y / fit.scale;
    }
    ll -= static_cast<double>(n) * (std::lgamma(alpha) + alpha * std::log(fit.scale));
    fit.log_likelihood = ll;
    return fit;
}

/// One-sample Kolmogorov-Smirnov statistic:
/// D_n = max_i max(i/n - F(x_(i)), F(x_(i)) - (i-1)/n) over the sorted sample.
inline double ks_statistic(std::span<const double> samples, const std::function<double(double)>& cdf) {
    const size_t n = samples.size();
    if (n == 0) throw ValidationError("ks_statistic: empty sample");
    std::vector<double> sorted(samples.begin(), samples.end());
    for (double v : sorted)
        if (std::isnan(v)) throw ValidationError("ks_statistic: NaN in samples");
    std::sort(sorted.begin(), sorted.end());
    double d = 0.0;
    const double nd = static_cast<double>(n);
    for (size_t i = 0; i < n; ++i) {
        double f = cdf(sorted[i]);
        double upper = static_cast<double>(i + 1) / nd - f;
        double lower = f - static_cast<double>(i) / nd;
        d = std::max(d, std::max(upper, lower));
    }
    return d;
}

/// Marsaglia-Tsang rejection sampling of the fitted gamma, shifted by loc and
/// scaled by theta. For shape < 1 the boosting identity
/// Gamma(a) = Gamma(a+1) * U^{1/a} is applied.
inline std::vector<double> sample_gamma(const GammaFit& fit, int n, Rng& rng) {
    if (n < 1) throw ValidationError("sample_gamma: n must be >= 1");
    if (!(fit.shape > 0.0) || !(fit.scale > 0.0)) throw ValidationError("sample_gamma: invalid fit");
    std::vector<double> out(static_cast<size_t>(n));
    const bool boosted = fit.shape < 1.0;
    const double a = boosted ? fit.shape + 1.0 : fit.shape;
    const double d = a - 1.0 / 3.0;
    const double c = 1.0 / std::sqrt(9.0 * d);
    for (auto& slot : out) {
        double g;
        for (;;) {
            double x = rng.normal();
            double v = 1.0 + c * x;
            if (v <= 0.0) continue;
            v = v * v * v;
            double u = rng.uniform01();
            if (u == 0.0) continue;
            double x2 = x * x;
            if (u < 1.0 - 0.0331 * x2 * x2 || std::log(u) < 0.5 * x2 + d * (1.0 - v + std::log(v))) {
                g = d * v;
                break;
            }
        }
        if (boosted) {
            double u = rng.uniform01();
            while (u == 0.0) u = rng.uniform01();
            g *= std::pow(u, 1.0 / fit.shape);
        }
        slot = fit.loc + fit.scale * g;
    }
    return out;
}

} // namespace gnnma::stats
