#include "r2d/regions.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>

#include "json.hpp"

namespace r2d {

void RegionConfig::validate() const {
    if (!(theta >= 0.0 && theta <= 1.0)) {
        throw Error("theta must lie in [0, 1]");
    }
    if (!(nms_iou > 0.0 && nms_iou <= 1.0)) {
        throw Error("nms_iou must lie in (0, 1]");
    }
    if (em_max_iters < 1 || !(em_tol > 0.0) || !(variance_floor > 0.0)) {
        throw Error("EM settings must be positive");
    }
}

NodeIndices select_candidates(const QualityScores& q, double theta) {
    NodeIndices out;
    for (std::size_t i = 0; i < q.values.size(); ++i) {
        if (q.values[i] > theta) {
            out.push_back(i);
        }
    }
    return out;
}

namespace {

constexpr double kLogSqrt2Pi = 0.91893853320467274178;  // ln(sqrt(2*pi))

double log_gauss(double x, double mean, double var) {
    const double d = x - mean;
    return -kLogSqrt2Pi - 0.5 * std::log(var) - 0.5 * d * d / var;
}

double percentile(const Vec& sorted, double p) {
    const double pos = p * static_cast<double>(sorted.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

// Responsibility of component 1 given the two weighted log densities.
double responsibility(double log_a0, double log_a1) {
    const double top = std::max(log_a0, log_a1);
    const double e0 = std::exp(log_a0 - top);
    const double e1 = std::exp(log_a1 - top);
    return e1 / (e0 + e1);
}

double log_weight(double w) { return w > 0.0 ? std::log(w) : -std::numeric_limits<double>::infinity(); }

}  // namespace

double posterior_high(const GmmModel& model, double x) {
    if (model.degenerate) {
        return 1.0;
    }
    const double a0 = log_weight(model.weight[0]) + log_gauss(x, model.mean[0], model.variance[0]);
    const double a1 = log_weight(model.weight[1]) + log_gauss(x, model.mean[1], model.variance[1]);
    return responsibility(a0, a1);
}

GmmModel fit_gmm(std::span<const double> values, const RegionConfig& cfg) {
    if (values.empty()) {
        throw Error("no candidate values");
    }
    const std::size_t n = values.size();
    GmmModel m;

    Vec sorted(values.begin(), values.end());
    std::sort(sorted.begin(), sorted.end());
    const double mu = pairwise_sum(sorted) / static_cast<double>(n);
    if (sorted.back() - sorted.front() < 1e-12) {
        m.degenerate = true;
        m.weight[0] = 0.0;
        m.weight[1] = 1.0;
        m.mean[0] = m.mean[1] = mu;
        m.variance[0] = m.variance[1] = cfg.variance_floor;
        m.posterior_high.assign(n, 1.0);
        return m;
    }

    Vec sq(n);
    for (std::size_t i = 0; i < n; ++i) {
        sq[i] = (values[i] - mu) * (values[i] - mu);
    }
    const double var0 = std::max(pairwise_sum(sq) / static_cast<double>(n), cfg.variance_floor);
    m.mean[0] = percentile(sorted, 0.2);
    m.mean[1] = percentile(sorted, 0.8);
    m.variance[0] = m.variance[1] = var0;

    Vec resp(n);
    Vec terms(n);
    Vec w0(n);
    Vec w1(n);
    // E-step under the current parameters; returns the log-likelihood.
    auto expectation = [&] {
        const double lw0 = log_weight(m.weight[0]);
        const double lw1 = log_weight(m.weight[1]);
        for (std::size_t i = 0; i < n; ++i) {
            const double a0 = lw0 + log_gauss(values[i], m.mean[0], m.variance[0]);
            const double a1 = lw1 + log_gauss(values[i], m.mean[1], m.variance[1]);
            const double top = std::max(a0, a1);
            terms[i] = top + std::log(std::exp(a0 - top) + std::exp(a1 - top));
            resp[i] = responsibility(a0, a1);
        }
        const double ll = pairwise_sum(terms);
        m.log_likelihood_trace.push_back(ll);
        return ll;
    };

    double prev = expectation();
    for (int it = 0; it < cfg.em_max_iters; ++it) {
        for (std::size_t i = 0; i < n; ++i) {
            w1[i] = resp[i];
            w0[i] = 1.0 - resp[i];
        }
        const double nn[2] = {pairwise_sum(w0), pairwise_sum(w1)};
        const Vec* ws[2] = {&w0, &w1};
        for (int k = 0; k < 2; ++k) {
            m.weight[k] = nn[k] / static_cast<double>(n);
            if (nn[k] <= 0.0) {
                // Component lost all mass; keep its parameters frozen.
                continue;
            }
            for (std::size_t i = 0; i < n; ++i) {
                terms[i] = (*ws[k])[i] * values[i];
            }
            const double mean = pairwise_sum(terms) / nn[k];
            for (std::size_t i = 0; i < n; ++i) {
                const double d = values[i] - mean;
                terms[i] = (*ws[k])[i] * d * d;
            }
            m.mean[k] = mean;
            m.variance[k] = std::max(pairwise_sum(terms) / nn[k], cfg.variance_floor);
        }
        m.iterations = it + 1;
        const double ll = expectation();
        if (ll - prev < cfg.em_tol) {
            break;
        }
        prev = ll;
    }

    if (m.mean[0] > m.mean[1]) {
        std::swap(m.weight[0], m.weight[1]);
        std::swap(m.mean[0], m.mean[1]);
        std::swap(m.variance[0], m.variance[1]);
        for (double& r : resp) {
            r = 1.0 - r;
        }
    }
    m.posterior_high = std::move(resp);
    return m;
}

RegionPartition partition(const QualityScores& q, const NodeIndices& candidates, const RegionConfig& cfg,
                          GmmModel* model_out) {
    RegionPartition part;
    part.head = q.head;
    part.candidates = candidates;
    std::sort(part.candidates.begin(), part.candidates.end());
    if (part.candidates.empty()) {
        if (model_out != nullptr) {
            *model_out = GmmModel{};
        }
        return part;
    }
    Vec values;
    values.reserve(part.candidates.size());
    for (std::size_t idx : part.candidates) {
        if (idx >= q.values.size()) {
            throw Error("candidate index out of range");
        }
        values.push_back(q.values[idx]);
    }
    GmmModel model = fit_gmm(values, cfg);
    for (std::size_t i = 0; i < part.candidates.size(); ++i) {
        if (model.degenerate || model.posterior_high[i] >= 0.5) {
            part.high.push_back(part.candidates[i]);
        } else {
            part.low.push_back(part.candidates[i]);
        }
    }
    if (model_out != nullptr) {
        *model_out = std::move(model);
    }
    return part;
}

NmsSelection nms(std::vector<DecodedBox> boxes, double iou_thr) {
    std::sort(boxes.begin(), boxes.end(), [](const DecodedBox& a, const DecodedBox& b) {
        if (a.score != b.score) {
            return a.score > b.score;
        }
        return a.node < b.node;
    });
    std::vector<const DecodedBox*> kept;
    for (const auto& box : boxes) {
        const bool suppressed = std::any_of(kept.begin(), kept.end(),
                                            [&](const DecodedBox* k) { return iou(*k, box) > iou_thr; });
        if (!suppressed) {
            kept.push_back(&box);
        }
    }
    NmsSelection sel;
    for (const auto* k : kept) {
        sel.kept.push_back(k->node);
    }
    std::sort(sel.kept.begin(), sel.kept.end());
    return sel;
}

namespace {

NmsSelection nms_over(const NodeIndices& nodes, const ResponseBundle& teacher, const QualityScores& q_cls,
                      double iou_thr) {
    std::vector<DecodedBox> boxes;
    boxes.reserve(nodes.size());
    for (std::size_t idx : nodes) {
        boxes.push_back(decode_box(idx, teacher.grid, teacher.reg, q_cls.values[idx]));
    }
    return nms(std::move(boxes), iou_thr);
}

}  // namespace

RefinedRegions refine_regions(const ResponseBundle& teacher, const RegionConfig& cfg, RegionMode mode) {
    cfg.validate();
    RefinedRegions r;
    r.q_cls = classification_quality(teacher.cls);
    r.q_reg = regression_quality(teacher.cls, teacher.reg);

    NodeIndices cand;
    if (mode == RegionMode::all) {
        cand.resize(teacher.node_count());
        std::iota(cand.begin(), cand.end(), std::size_t{0});
    } else {
        cand = select_candidates(r.q_cls, cfg.theta);
    }

    if (mode == RegionMode::refine) {
        r.cls = partition(r.q_cls, cand, cfg, &r.cls_gmm);
        r.reg = partition(r.q_reg, cand, cfg, &r.reg_gmm);
        r.reg_high = nms_over(r.reg.high, teacher, r.q_cls, cfg.nms_iou);
        r.reg_low = nms_over(r.reg.low, teacher, r.q_cls, cfg.nms_iou);
    } else {
        // Unrefined ablations: L1 on every selected node for classification and
        // LD at the high temperature on every selected node for regression.
        r.cls = {Head::cls, cand, {}, cand};
        r.reg = {Head::reg, cand, cand, {}};
        r.reg_high.kept = cand;
    }
    return r;
}

std::vector<std::vector<int>> region_raster(const RegionPartition& partition, const NodeGrid& grid,
                                            std::size_t level) {
    if (level >= grid.levels.size()) {
        throw Error("level out of range");
    }
    const auto& lv = grid.levels[level];
    std::vector<std::vector<int>> raster(static_cast<std::size_t>(lv.height),
                                         std::vector<int>(static_cast<std::size_t>(lv.width), 0));
    const std::size_t begin = grid.level_offset(level);
    const std::size_t end = begin + static_cast<std::size_t>(lv.width) * static_cast<std::size_t>(lv.height);
    auto mark = [&](const NodeIndices& nodes, int value) {
        for (std::size_t idx : nodes) {
            if (idx >= begin && idx < end) {
                const std::size_t local = idx - begin;
                raster[local / static_cast<std::size_t>(lv.width)][local % static_cast<std::size_t>(lv.width)] = value;
            }
        }
    };
    mark(partition.low, 1);
    mark(partition.high, 2);
    return raster;
}

void export_region_raster(const RegionPartition& partition, const NodeGrid& grid, std::size_t level,
                          const std::filesystem::path& path) {
    const auto raster = region_raster(partition, grid, level);
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw Error("cannot write " + path.string());
    }
    for (const auto& row : raster) {
        for (std::size_t c = 0; c < row.size(); ++c) {
            out << (c == 0 ? "" : ",") << row[c];
        }
        out << '\n';
    }
    if (!out) {
        throw Error("write failed for " + path.string());
    }
}

std::string regions_to_json(const RefinedRegions& regions, int indent) {
    using nlohmann::json;
    auto part = [](const RegionPartition& p) {
        return json{{"candidates", p.candidates}, {"high", p.high}, {"low", p.low}};
    };
    json j;
    j["cls"] = part(regions.cls);
    j["reg"] = part(regions.reg);
    j["nms"] = {{"high", regions.reg_high.kept}, {"low", regions.reg_low.kept}};
    return j.dump(indent);
}

const char* to_string(RegionMode mode) {
    switch (mode) {
        case RegionMode::refine:
            return "refine";
        case RegionMode::candidates:
            return "cand";
        case RegionMode::all:
            return "all";
    }
    return "refine";
}

RegionMode region_mode_from_string(const std::string& s) {
    if (s == "refine") {
        return RegionMode::refine;
    }
    if (s == "cand" || s == "candidates") {
        return RegionMode::candidates;
    }
    if (s == "all") {
        return RegionMode::all;
    }
    throw Error("unknown region mode '" + s + "'");
}

}  // namespace r2d
