#pragma once

// Reference implementations used only by the tests: direct formulas in long
// double, no shared code with the library.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <vector>

#include "r2d/response.hpp"

namespace oracle {

using r2d::DecodedBox;
using r2d::ResponseBundle;

inline long double sigmoid(long double x) { return 1.0L / (1.0L + std::exp(-x)); }

inline std::vector<long double> softmax(const std::vector<double>& z, long double t = 1.0L) {
    std::vector<long double> e(z.size());
    long double sum = 0.0L;
    for (std::size_t i = 0; i < z.size(); ++i) {
        e[i] = std::exp(static_cast<long double>(z[i]) / t);
        sum += e[i];
    }
    for (auto& v : e) {
        v /= sum;
    }
    return e;
}

inline long double kl(const std::vector<long double>& p, const std::vector<long double>& q) {
    long double s = 0.0L;
    for (std::size_t i = 0; i < p.size(); ++i) {
        if (p[i] > 0.0L) {
            s += p[i] * std::log(p[i] / q[i]);
        }
    }
    return s;
}

inline long double entropy_bits(const std::vector<long double>& p) {
    long double s = 0.0L;
    for (long double v : p) {
        if (v > 0.0L) {
            s -= v * std::log2(v);
        }
    }
    return s;
}

inline double area(const DecodedBox& b) { return std::max(0.0, b.x2 - b.x1) * std::max(0.0, b.y2 - b.y1); }

inline double iou(const DecodedBox& a, const DecodedBox& b) {
    const double iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
    const double ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
    const double inter = iw > 0 && ih > 0 ? iw * ih : 0.0;
    const double uni = area(a) + area(b) - inter;
    return uni > 0 ? inter / uni : 0.0;
}

// O(n^2) suppressor: a box survives iff no surviving box that outranks it
// overlaps it by more than the threshold.
inline std::vector<std::size_t> nms(const std::vector<DecodedBox>& boxes, double thr) {
    const std::size_t n = boxes.size();
    auto outranks = [&](std::size_t a, std::size_t b) {
        return boxes[a].score > boxes[b].score || (boxes[a].score == boxes[b].score && boxes[a].node < boxes[b].node);
    };
    std::vector<int> state(n, -1);  // -1 unknown, 0 suppressed, 1 kept
    bool changed = true;
    while (changed) {
        changed = false;
        for (std::size_t i = 0; i < n; ++i) {
            if (state[i] != -1) {
                continue;
            }
            bool pending = false;
            bool suppressed = false;
            for (std::size_t j = 0; j < n; ++j) {
                if (j == i || !outranks(j, i)) {
                    continue;
                }
                if (state[j] == -1) {
                    pending = true;
                } else if (state[j] == 1 && oracle::iou(boxes[i], boxes[j]) > thr) {
                    suppressed = true;
                }
            }
            if (suppressed) {
                state[i] = 0;
                changed = true;
            } else if (!pending) {
                state[i] = 1;
                changed = true;
            }
        }
    }
    std::vector<std::size_t> kept;
    for (std::size_t i = 0; i < n; ++i) {
        if (state[i] == 1) {
            kept.push_back(boxes[i].node);
        }
    }
    std::sort(kept.begin(), kept.end());
    return kept;
}

inline ResponseBundle random_bundle(std::mt19937_64& gen, int width, int height, std::size_t classes,
                                    std::size_t bins, double cls_scale = 3.0, double cls_shift = -2.0,
                                    double reg_scale = 2.0) {
    std::normal_distribution<double> nd(0.0, 1.0);
    ResponseBundle b;
    b.grid.levels = {{width, height, 8.0}};
    const std::size_t n = b.grid.node_count();
    b.cls.num_classes = classes;
    b.cls.logits.resize(n * classes);
    for (auto& v : b.cls.logits) {
        v = cls_shift + cls_scale * nd(gen);
    }
    b.reg.bins = bins;
    b.reg.bin_width = 1.0;
    b.reg.logits.resize(n * r2d::kEdges * bins);
    for (auto& v : b.reg.logits) {
        v = reg_scale * nd(gen);
    }
    return b;
}

inline ResponseBundle perturbed(const ResponseBundle& b, std::mt19937_64& gen, double scale) {
    std::normal_distribution<double> nd(0.0, scale);
    ResponseBundle s = b;
    s.role = r2d::Role::student;
    for (auto& v : s.cls.logits) {
        v += nd(gen);
    }
    for (auto& v : s.reg.logits) {
        v += nd(gen);
    }
    return s;
}

inline std::vector<DecodedBox> random_boxes(std::mt19937_64& gen, std::size_t n, double extent = 100.0) {
    std::uniform_real_distribution<double> pos(0.0, extent);
    std::uniform_real_distribution<double> size(1.0, extent / 3.0);
    // Coarse scores so exact ties are exercised.
    std::uniform_int_distribution<int> score(0, 20);
    std::vector<DecodedBox> boxes(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double x = pos(gen);
        const double y = pos(gen);
        boxes[i] = {i, x, y, x + size(gen), y + size(gen), score(gen) / 20.0};
    }
    return boxes;
}

}  // namespace oracle
