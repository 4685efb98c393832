#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "fever/ndgrad/array.hpp"
#include "fever/triplet.hpp"

// Straight-line scalar reimplementations of the losses, written from the formulas
// and sharing no code with the graph-based versions.
namespace fever::testing {

using Rows = std::vector<std::vector<double>>;

inline Rows to_rows(const ndgrad::Array<double>& a) {
    const std::size_t n = a.dim(0), d = a.size() / n;
    Rows r(n, std::vector<double>(d));
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) r[i][j] = a[i * d + j];
    return r;
}

inline double oracle_sq_dist(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0;
    for (std::size_t k = 0; k < a.size(); ++k) s += (a[k] - b[k]) * (a[k] - b[k]);
    return s;
}

inline std::vector<double> oracle_unit(std::vector<double> a) {
    double s = 0;
    for (double v : a) s += v * v;
    const double n = std::sqrt(s);
    for (double& v : a) v = n > 1e-12 ? v / n : 0.0;
    return a;
}

inline double oracle_smooth_l1(double x, double y) {
    const double d = std::abs(x - y);
    return d <= 1.0 ? 0.5 * d * d : d - 0.5;
}

// Pre-hinge terms (d_ab + m - d_ac, d_ab + m - d_bc) for every triplet.
inline std::vector<double> oracle_triplet_terms(Rows v, const std::vector<SimilarPair>& labels, double margin,
                                                bool normalize) {
    if (normalize)
        for (auto& r : v) r = oracle_unit(r);
    std::vector<double> terms;
    for (std::size_t t = 0; t < labels.size(); ++t) {
        const auto& x1 = v[3 * t];
        const auto& x2 = v[3 * t + 1];
        const auto& x3 = v[3 * t + 2];
        double d_pair, d_other1, d_other2;
        if (labels[t] == SimilarPair::p12) {
            d_pair = oracle_sq_dist(x1, x2), d_other1 = oracle_sq_dist(x1, x3), d_other2 = oracle_sq_dist(x2, x3);
        } else if (labels[t] == SimilarPair::p13) {
            d_pair = oracle_sq_dist(x1, x3), d_other1 = oracle_sq_dist(x1, x2), d_other2 = oracle_sq_dist(x3, x2);
        } else {
            d_pair = oracle_sq_dist(x2, x3), d_other1 = oracle_sq_dist(x2, x1), d_other2 = oracle_sq_dist(x3, x1);
        }
        terms.push_back(d_pair + margin - d_other1);
        terms.push_back(d_pair + margin - d_other2);
    }
    return terms;
}

inline double oracle_triplet_loss(const Rows& v, const std::vector<SimilarPair>& labels, double margin,
                                  bool normalize) {
    double total = 0;
    for (double t : oracle_triplet_terms(v, labels, margin, normalize)) total += t > 0 ? t : 0;
    return total / static_cast<double>(labels.size());
}

inline double oracle_cross_entropy(const Rows& logits, const std::vector<std::size_t>& y) {
    double total = 0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        double mx = logits[i][0];
        for (double v : logits[i]) mx = std::max(mx, v);
        double s = 0;
        for (double v : logits[i]) s += std::exp(v - mx);
        total += -(logits[i][y[i]] - mx - std::log(s));
    }
    return total / static_cast<double>(logits.size());
}

inline double oracle_rkd_distance(const Rows& s, const Rows& t) {
    const std::size_t n = s.size();
    auto normalised = [n](const Rows& x) {
        std::vector<double> d;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = i + 1; j < n; ++j) d.push_back(std::sqrt(oracle_sq_dist(x[i], x[j])));
        double mean = 0;
        for (double v : d) mean += v;
        mean /= static_cast<double>(d.size());
        for (double& v : d) v = mean > 1e-12 ? v / mean : 0.0;
        return d;
    };
    const auto ds = normalised(s), dt = normalised(t);
    double total = 0;
    for (std::size_t p = 0; p < ds.size(); ++p) total += oracle_smooth_l1(ds[p], dt[p]);
    return total / static_cast<double>(ds.size());
}

inline double oracle_cos_angle(const std::vector<double>& a, const std::vector<double>& b,
                               const std::vector<double>& c) {
    std::vector<double> u(a.size()), w(a.size());
    for (std::size_t k = 0; k < a.size(); ++k) {
        u[k] = a[k] - b[k];
        w[k] = c[k] - b[k];
    }
    u = oracle_unit(u);
    w = oracle_unit(w);
    double dot = 0;
    for (std::size_t k = 0; k < a.size(); ++k) dot += u[k] * w[k];
    return dot;
}

inline double oracle_rkd_angle(const Rows& s, const Rows& t) {
    const std::size_t n = s.size();
    double total = 0;
    std::size_t count = 0;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t k = i + 1; k < n; ++k)
            for (std::size_t j = 0; j < n; ++j) {
                if (j == i || j == k) continue;
                total += oracle_smooth_l1(oracle_cos_angle(s[i], s[j], s[k]), oracle_cos_angle(t[i], t[j], t[k]));
                ++count;
            }
    return total / static_cast<double>(count);
}

}  // namespace fever::testing
