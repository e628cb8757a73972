#include "r2d/losses.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <sstream>

#include "json.hpp"

namespace r2d {

void LossWeights::validate() const {
    for (double l : {lambda1, lambda2, lambda3, lambda4, lambda5, lambda6}) {
        if (!(l >= 0.0)) {
            throw Error("loss weights must be non-negative");
        }
    }
    if (!(t1 > 0.0) || !(t2 > 0.0)) {
        throw Error("temperatures must be positive");
    }
}

LossWeights LossWeights::scaled(double c) const {
    LossWeights w = *this;
    w.lambda1 *= c;
    w.lambda2 *= c;
    return w;
}

std::size_t argmax(std::span<const double> values) {
    return static_cast<std::size_t>(std::max_element(values.begin(), values.end()) - values.begin());
}

namespace {

// Softmax of `z` with index `skip` removed.
void softmax_without(std::span<const double> z, std::size_t skip, Vec& out) {
    out.clear();
    for (std::size_t i = 0; i < z.size(); ++i) {
        if (i != skip) {
            out.push_back(z[i]);
        }
    }
    softmax_into(out, 1.0, out);
}

struct NodeDecoupling {
    Vec full;  // softmax over all classes
    double p_max = 0.0;
    double p_not_max = 0.0;
    Vec p_hat;
};

void decouple_into(std::span<const double> z, std::size_t m, NodeDecoupling& d) {
    d.full.resize(z.size());
    softmax_into(z, 1.0, d.full);
    d.p_max = d.full[m];
    d.p_not_max = 0.0;
    for (std::size_t i = 0; i < z.size(); ++i) {
        if (i != m) {
            d.p_not_max += d.full[i];
        }
    }
    softmax_without(z, m, d.p_hat);
}

void require_nodes(const NodeIndices& nodes, std::size_t count) {
    for (std::size_t idx : nodes) {
        if (idx >= count) {
            throw MisalignedError("distilled node index out of range");
        }
    }
}

double mean_of(Vec& values) {
    return values.empty() ? 0.0 : pairwise_sum(values) / static_cast<double>(values.size());
}

}  // namespace

DecoupledProbs decouple_probs(std::span<const double> logits, std::size_t max_index) {
    if (logits.size() < 2) {
        throw Error("non-max set empty");
    }
    if (max_index >= logits.size()) {
        throw Error("max index out of range");
    }
    NodeDecoupling d;
    decouple_into(logits, max_index, d);
    return {max_index, d.p_max, d.p_not_max, std::move(d.p_hat)};
}

DcdTerms dcd_loss(std::span<const double> teacher_z, std::span<const double> student_z, const LossWeights& w) {
    if (teacher_z.size() != student_z.size()) {
        throw MisalignedError("teacher/student class count mismatch");
    }
    if (teacher_z.size() < 2) {
        throw Error("non-max set empty");
    }
    const std::size_t m = argmax(teacher_z);
    NodeDecoupling t;
    NodeDecoupling s;
    decouple_into(teacher_z, m, t);
    decouple_into(student_z, m, s);
    const double bt[2] = {t.p_max, t.p_not_max};
    const double bs[2] = {s.p_max, s.p_not_max};
    DcdTerms out;
    out.l_max = kl_divergence(bt, bs);
    out.l_not_max = kl_divergence(t.p_hat, s.p_hat);
    out.l_high = w.lambda3 * out.l_max + w.lambda4 * out.l_not_max;
    return out;
}

DcdTerms dcd_region_loss(const ClassificationResponse& teacher, const ClassificationResponse& student,
                         const NodeIndices& nodes, const LossWeights& w) {
    require_nodes(nodes, std::min(teacher.node_count(), student.node_count()));
    Vec l_max;
    Vec l_not_max;
    for (std::size_t idx : nodes) {
        const DcdTerms t = dcd_loss(teacher.node(idx), student.node(idx), w);
        l_max.push_back(t.l_max);
        l_not_max.push_back(t.l_not_max);
    }
    DcdTerms out;
    out.l_max = mean_of(l_max);
    out.l_not_max = mean_of(l_not_max);
    out.l_high = w.lambda3 * out.l_max + w.lambda4 * out.l_not_max;
    return out;
}

double l1_cls_loss(const ClassificationResponse& teacher, const ClassificationResponse& student,
                   const NodeIndices& nodes) {
    if (teacher.num_classes != student.num_classes) {
        throw MisalignedError("teacher/student class count mismatch");
    }
    require_nodes(nodes, std::min(teacher.node_count(), student.node_count()));
    Vec per_node;
    for (std::size_t idx : nodes) {
        per_node.push_back(l1_distance(teacher.node(idx), student.node(idx)));
    }
    return mean_of(per_node);
}

double ld_loss(const RegressionResponse& teacher, const RegressionResponse& student, const NodeIndices& nodes,
               double temperature) {
    if (teacher.bins != student.bins) {
        throw MisalignedError("teacher/student bin count mismatch");
    }
    require_nodes(nodes, std::min(teacher.node_count(), student.node_count()));
    Vec per_edge;
    Vec pt(teacher.bins);
    Vec ps(teacher.bins);
    for (std::size_t idx : nodes) {
        for (std::size_t e = 0; e < kEdges; ++e) {
            softmax_into(teacher.edge(idx, e), temperature, pt);
            softmax_into(student.edge(idx, e), temperature, ps);
            per_edge.push_back(kl_divergence(pt, ps));
        }
    }
    return mean_of(per_edge);
}

void cls_distill_loss(const ResponseBundle& teacher, const ResponseBundle& student, const RegionPartition& part,
                      const LossWeights& w, DistillLossReport& report) {
    report.l_max_cls_high = report.l_not_max_cls_high = report.l_cls_high = report.l_cls_low = 0.0;
    report.alpha = report.beta = report.l_cls_distill = 0.0;
    if (part.candidates.empty()) {
        return;
    }
    const auto cand = static_cast<double>(part.candidates.size());
    report.alpha = static_cast<double>(part.high.size()) / cand;
    report.beta = static_cast<double>(part.low.size()) / cand;
    if (!part.high.empty()) {
        const DcdTerms t = dcd_region_loss(teacher.cls, student.cls, part.high, w);
        report.l_max_cls_high = t.l_max;
        report.l_not_max_cls_high = t.l_not_max;
        report.l_cls_high = t.l_high;
    }
    if (!part.low.empty()) {
        report.l_cls_low = l1_cls_loss(teacher.cls, student.cls, part.low);
    }
    report.l_cls_distill = report.alpha * report.l_cls_high + report.beta * report.l_cls_low;
}

void reg_distill_loss(const ResponseBundle& teacher, const ResponseBundle& student, const NmsSelection& high,
                      const NmsSelection& low, const LossWeights& w, DistillLossReport& report) {
    report.l_reg_high = high.kept.empty() ? 0.0 : ld_loss(teacher.reg, student.reg, high.kept, w.t1);
    report.l_reg_low = low.kept.empty() ? 0.0 : ld_loss(teacher.reg, student.reg, low.kept, w.t2);
    report.l_reg_distill = w.lambda5 * report.l_reg_high + w.lambda6 * report.l_reg_low;
}

void check_aligned(const ResponseBundle& teacher, const ResponseBundle& student) {
    if (!(teacher.grid == student.grid) || teacher.cls.num_classes != student.cls.num_classes ||
        teacher.reg.bins != student.reg.bins || teacher.cls.logits.size() != student.cls.logits.size() ||
        teacher.reg.logits.size() != student.reg.logits.size()) {
        throw MisalignedError("misaligned detectors");
    }
}

DistillLossReport distill_loss(const ResponseBundle& teacher, const ResponseBundle& student,
                               const RefinedRegions& regions, const LossWeights& w) {
    check_aligned(teacher, student);
    w.validate();
    DistillLossReport r;
    cls_distill_loss(teacher, student, regions.cls, w, r);
    reg_distill_loss(teacher, student, regions.reg_high, regions.reg_low, w, r);
    r.l_distill_total = w.lambda1 * r.l_cls_distill + w.lambda2 * r.l_reg_distill;
    return r;
}

DistillLossReport total_distill_loss(const ResponseBundle& teacher, const ResponseBundle& student,
                                     const RegionConfig& cfg, const LossWeights& w, RegionMode mode) {
    check_aligned(teacher, student);
    return distill_loss(teacher, student, refine_regions(teacher, cfg, mode), w);
}

namespace {

void add_dcd_gradient(std::span<const double> tz, std::span<const double> sz, const LossWeights& w, double scale,
                      std::span<double> grad) {
    const std::size_t m = argmax(tz);
    NodeDecoupling t;
    NodeDecoupling s;
    decouple_into(tz, m, t);
    decouple_into(sz, m, s);
    const double pt = t.p_max;
    const double ps = s.p_max;
    // Binary term: d/dz_m = ps - pt; d/dz_j = s_j*pt - (1-pt)*ps*phat_s_j for j != m.
    grad[m] += scale * w.lambda3 * (ps - pt);
    std::size_t k = 0;
    for (std::size_t j = 0; j < sz.size(); ++j) {
        if (j == m) {
            continue;
        }
        const double g_max = s.full[j] * pt - t.p_not_max * ps * s.p_hat[k];
        const double g_not_max = s.p_hat[k] - t.p_hat[k];
        grad[j] += scale * (w.lambda3 * g_max + w.lambda4 * g_not_max);
        ++k;
    }
}

void add_ld_gradient(const RegressionResponse& teacher, const RegressionResponse& student, std::size_t node,
                     double temperature, double scale, Vec& grad) {
    Vec pt(teacher.bins);
    Vec ps(teacher.bins);
    for (std::size_t e = 0; e < kEdges; ++e) {
        softmax_into(teacher.edge(node, e), temperature, pt);
        softmax_into(student.edge(node, e), temperature, ps);
        double* g = grad.data() + node * student.node_stride() + e * student.bins;
        for (std::size_t k = 0; k < pt.size(); ++k) {
            g[k] += scale * (ps[k] - pt[k]) / temperature;
        }
    }
}

double sign(double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); }

}  // namespace

StudentGradients distill_gradients(const ResponseBundle& teacher, const ResponseBundle& student,
                                   const RefinedRegions& regions, const LossWeights& w) {
    check_aligned(teacher, student);
    w.validate();
    StudentGradients g{Vec(student.cls.logits.size(), 0.0), Vec(student.reg.logits.size(), 0.0)};
    const std::size_t n_cls = student.cls.num_classes;

    const auto& part = regions.cls;
    if (!part.candidates.empty()) {
        const auto cand = static_cast<double>(part.candidates.size());
        if (!part.high.empty()) {
            // lambda1 * alpha * mean over high nodes.
            const double scale = w.lambda1 * (static_cast<double>(part.high.size()) / cand) /
                                 static_cast<double>(part.high.size());
            for (std::size_t idx : part.high) {
                add_dcd_gradient(teacher.cls.node(idx), student.cls.node(idx), w, scale,
                                 std::span<double>(g.cls.data() + idx * n_cls, n_cls));
            }
        }
        if (!part.low.empty()) {
            const double scale =
                w.lambda1 * (static_cast<double>(part.low.size()) / cand) / static_cast<double>(part.low.size());
            for (std::size_t idx : part.low) {
                const auto tz = teacher.cls.node(idx);
                const auto sz = student.cls.node(idx);
                for (std::size_t j = 0; j < n_cls; ++j) {
                    g.cls[idx * n_cls + j] += scale * sign(sz[j] - tz[j]);
                }
            }
        }
    }

    const auto& high = regions.reg_high.kept;
    const auto& low = regions.reg_low.kept;
    if (!high.empty()) {
        const double scale = w.lambda2 * w.lambda5 / (static_cast<double>(kEdges) * static_cast<double>(high.size()));
        for (std::size_t idx : high) {
            add_ld_gradient(teacher.reg, student.reg, idx, w.t1, scale, g.reg);
        }
    }
    if (!low.empty()) {
        const double scale = w.lambda2 * w.lambda6 / (static_cast<double>(kEdges) * static_cast<double>(low.size()));
        for (std::size_t idx : low) {
            add_ld_gradient(teacher.reg, student.reg, idx, w.t2, scale, g.reg);
        }
    }
    return g;
}

StudentGradients distill_gradients(const ResponseBundle& teacher, const ResponseBundle& student,
                                   const RegionConfig& cfg, const LossWeights& w, RegionMode mode) {
    check_aligned(teacher, student);
    return distill_gradients(teacher, student, refine_regions(teacher, cfg, mode), w);
}

double relative_error(double analytic, double numeric, double floor) {
    const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
    return std::abs(analytic - numeric) / denom;
}

GradCheckResult check_distill_gradients(const ResponseBundle& teacher, const ResponseBundle& student,
                                        const RegionConfig& cfg, const LossWeights& w, double h, RegionMode mode) {
    check_aligned(teacher, student);
    const RefinedRegions regions = refine_regions(teacher, cfg, mode);
    const StudentGradients g = distill_gradients(teacher, student, regions, w);
    ResponseBundle probe = student;
    GradCheckResult res;
    auto check = [&](Vec& params, const Vec& analytic) {
        for (std::size_t i = 0; i < params.size(); ++i) {
            const double saved = params[i];
            params[i] = saved + h;
            const double up = distill_loss(teacher, probe, regions, w).l_distill_total;
            params[i] = saved - h;
            const double down = distill_loss(teacher, probe, regions, w).l_distill_total;
            params[i] = saved;
            const double numeric = (up - down) / (2.0 * h);
            res.max_rel_error = std::max(res.max_rel_error, relative_error(analytic[i], numeric));
            res.max_abs_error = std::max(res.max_abs_error, std::abs(analytic[i] - numeric));
            ++res.coordinates;
        }
    };
    check(probe.cls.logits, g.cls);
    check(probe.reg.logits, g.reg);
    return res;
}

std::string format_double(double v) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

namespace {

std::vector<std::pair<const char*, double>> report_fields(const DistillLossReport& r) {
    return {{"L_max_cls_H", r.l_max_cls_high},
            {"L_not_max_cls_H", r.l_not_max_cls_high},
            {"L_cls_H", r.l_cls_high},
            {"L_cls_L", r.l_cls_low},
            {"alpha", r.alpha},
            {"beta", r.beta},
            {"L_cls_distill", r.l_cls_distill},
            {"L_reg_H", r.l_reg_high},
            {"L_reg_L", r.l_reg_low},
            {"L_reg_distill", r.l_reg_distill},
            {"L_distill_total", r.l_distill_total}};
}

}  // namespace

std::string report_to_json(const DistillLossReport& r, int indent) {
    nlohmann::ordered_json j;
    for (const auto& [k, v] : report_fields(r)) {
        j[k] = v;
    }
    return j.dump(indent);
}

std::string report_to_text(const DistillLossReport& r) {
    std::ostringstream out;
    for (const auto& [k, v] : report_fields(r)) {
        std::string key = k;
        key.resize(16, ' ');
        out << key << "= " << format_double(v) << '\n';
    }
    return out.str();
}

std::string report_csv_header() {
    std::string h;
    for (const auto& [k, v] : report_fields({})) {
        h += (h.empty() ? "" : ",") + std::string(k);
    }
    return h;
}

std::string report_to_csv_row(const DistillLossReport& r) {
    std::string row;
    bool first = true;
    for (const auto& [k, v] : report_fields(r)) {
        row += (first ? "" : ",") + format_double(v);
        first = false;
    }
    return row;
}

}  // namespace r2d
