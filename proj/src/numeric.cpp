#include "r2d/numeric.hpp"

#include <algorithm>
#include <cmath>

namespace r2d {

double sigmoid(double x) {
    if (x >= 0.0) {
        return 1.0 / (1.0 + std::exp(-x));
    }
    const double e = std::exp(x);
    return e / (1.0 + e);
}

void softmax_into(std::span<const double> logits, double temperature, std::span<double> out) {
    if (logits.empty()) {
        throw Error("empty logits");
    }
    if (!(temperature > 0.0)) {
        throw Error("temperature must be positive");
    }
    if (out.size() != logits.size()) {
        throw Error("softmax output size mismatch");
    }
    const double top = *std::max_element(logits.begin(), logits.end());
    double total = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        out[i] = std::exp((logits[i] - top) / temperature);
        total += out[i];
    }
    for (double& v : out) {
        v /= total;
    }
}

Vec softmax(std::span<const double> logits, double temperature) {
    Vec out(logits.size());
    softmax_into(logits, temperature, out);
    return out;
}

double entropy_bits(std::span<const double> p) {
    double h = 0.0;
    for (double v : p) {
        if (v > 0.0) {
            h -= v * std::log2(v);
        }
    }
    return h;
}

double kl_divergence(std::span<const double> p, std::span<const double> q) {
    if (p.size() != q.size()) {
        throw Error("length mismatch");
    }
    double kl = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        if (p[i] <= 0.0) {
            continue;
        }
        if (q[i] <= 0.0) {
            throw Error("divergent support");
        }
        kl += p[i] * std::log(p[i] / q[i]);
    }
    // Rounding can leave a tiny negative residue for p ~= q.
    return std::max(kl, 0.0);
}

double l1_distance(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) {
        throw Error("length mismatch");
    }
    double d = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        d += std::abs(a[i] - b[i]);
    }
    return d;
}

double pairwise_sum(std::span<const double> values) {
    constexpr std::size_t kLeaf = 8;
    if (values.size() <= kLeaf) {
        double s = 0.0;
        for (double v : values) {
            s += v;
        }
        return s;
    }
    const std::size_t half = values.size() / 2;
    return pairwise_sum(values.first(half)) + pairwise_sum(values.subspan(half));
}

bool is_prob_vector(std::span<const double> p, double tol) {
    if (p.empty()) {
        return false;
    }
    double total = 0.0;
    for (double v : p) {
        if (!(v >= 0.0)) {
            return false;
        }
        total += v;
    }
    return std::abs(total - 1.0) <= tol;
}

}  // namespace r2d
