#include "r2d/sim.hpp"

#include <algorithm>
#include <cmath>
#include <future>
#include <numeric>
#include <set>
#include <sstream>

#include "json.hpp"

namespace r2d {

void WorldConfig::validate() const {
    if (num_classes < 1 || class_dim < num_classes + 1) {
        throw Error("class_dim must exceed num_classes");
    }
    if (!(homogeneity >= 0.0 && homogeneity < 1.0)) {
        throw Error("homogeneity must lie in [0, 1)");
    }
    if (std::sqrt(2.0 * (1.0 - homogeneity)) < min_class_separation) {
        throw Error("class means closer than the configured separation");
    }
    if (!(noise >= 0.0) || grid_width < 1 || grid_height < 1 || !(stride > 0.0) || bins < 2 ||
        !(bin_width > 0.0)) {
        throw Error("invalid world geometry");
    }
    if (!(past_object_rate >= 0.0 && past_object_rate <= 1.0)) {
        throw Error("past_object_rate must lie in [0, 1]");
    }
    if (objects_min < 0 || objects_max < objects_min || box_min < 0 || box_max < box_min) {
        throw Error("invalid object ranges");
    }
    if (static_cast<double>(box_max) > static_cast<double>(bins - 1) * bin_width) {
        throw Error("boxes larger than the distance bins can express");
    }
}

SyntheticWorld::SyntheticWorld(WorldConfig cfg) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(Rng::derive(cfg_.seed, 0xC1A55));
    const auto dim = static_cast<std::size_t>(cfg_.class_dim);
    // Orthonormal basis: one shared direction plus one unique direction per class.
    std::vector<Vec> basis;
    while (basis.size() < static_cast<std::size_t>(cfg_.num_classes) + 1) {
        Vec v(dim);
        for (double& x : v) {
            x = rng.normal();
        }
        for (const auto& b : basis) {
            const double d = std::inner_product(v.begin(), v.end(), b.begin(), 0.0);
            for (std::size_t i = 0; i < dim; ++i) {
                v[i] -= d * b[i];
            }
        }
        const double norm = std::sqrt(std::inner_product(v.begin(), v.end(), v.begin(), 0.0));
        if (norm < 1e-6) {
            continue;
        }
        for (double& x : v) {
            x /= norm;
        }
        basis.push_back(std::move(v));
    }
    const double shared = std::sqrt(cfg_.homogeneity);
    const double unique = std::sqrt(1.0 - cfg_.homogeneity);
    for (int c = 0; c < cfg_.num_classes; ++c) {
        Vec m(dim);
        for (std::size_t i = 0; i < dim; ++i) {
            m[i] = shared * basis[0][i] + unique * basis[static_cast<std::size_t>(c) + 1][i];
        }
        means_.push_back(std::move(m));
    }
}

std::size_t SyntheticWorld::feature_dim() const {
    return static_cast<std::size_t>(cfg_.class_dim) + kEdges * static_cast<std::size_t>(cfg_.bins);
}

NodeGrid SyntheticWorld::grid() const { return NodeGrid{{{cfg_.grid_width, cfg_.grid_height, cfg_.stride}}}; }

DecodedBox SceneObject::box(double stride) const {
    return {0, (col0 + 0.5) * stride, (row0 + 0.5) * stride, (col1 + 0.5) * stride, (row1 + 0.5) * stride, 1.0};
}

Scene generate_scene(const SyntheticWorld& world, std::span<const int> active_classes, Rng& rng,
                     std::span<const int> unlabeled_classes, double unlabeled_rate) {
    if (active_classes.empty()) {
        throw Error("no active classes");
    }
    const WorldConfig& cfg = world.config();
    Scene scene;
    scene.grid = world.grid();
    scene.feature_dim = world.feature_dim();
    const std::size_t n = scene.grid.node_count();

    const int count = rng.uniform_int(cfg.objects_min, cfg.objects_max);
    for (int o = 0; o < count; ++o) {
        bool placed = false;
        for (int attempt = 0; attempt < 200 && !placed; ++attempt) {
            SceneObject obj;
            const bool past = !unlabeled_classes.empty() && unlabeled_rate > 0.0 && rng.uniform() < unlabeled_rate;
            const auto pool = past ? unlabeled_classes : active_classes;
            obj.class_id = pool[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(pool.size()) - 1))];
            obj.labeled = !past;
            const int w = rng.uniform_int(cfg.box_min, cfg.box_max);
            const int h = rng.uniform_int(cfg.box_min, cfg.box_max);
            if (w >= cfg.grid_width || h >= cfg.grid_height) {
                continue;
            }
            obj.col0 = rng.uniform_int(0, cfg.grid_width - 1 - w);
            obj.row0 = rng.uniform_int(0, cfg.grid_height - 1 - h);
            obj.col1 = obj.col0 + w;
            obj.row1 = obj.row0 + h;
            // Keep a one-node gap between objects.
            const bool clash = std::any_of(scene.objects.begin(), scene.objects.end(), [&](const SceneObject& o2) {
                return obj.col0 <= o2.col1 + 1 && o2.col0 <= obj.col1 + 1 && obj.row0 <= o2.row1 + 1 &&
                       o2.row0 <= obj.row1 + 1;
            });
            if (!clash) {
                scene.objects.push_back(obj);
                placed = true;
            }
        }
        if (!placed) {
            throw Error("scene overconstrained");
        }
    }

    scene.node_class.assign(n, -1);
    scene.node_labeled.assign(n, 0);
    scene.node_bins.assign(n, {0, 0, 0, 0});
    for (const auto& obj : scene.objects) {
        for (int r = obj.row0; r <= obj.row1; ++r) {
            for (int c = obj.col0; c <= obj.col1; ++c) {
                const auto idx = static_cast<std::size_t>(r * cfg.grid_width + c);
                scene.node_class[idx] = obj.class_id;
                scene.node_labeled[idx] = obj.labeled ? 1 : 0;
                scene.node_bins[idx] = {r - obj.row0, obj.row1 - r, c - obj.col0, obj.col1 - c};
            }
        }
    }

    const std::size_t dim = scene.feature_dim;
    const auto cdim = static_cast<std::size_t>(cfg.class_dim);
    scene.features.assign(n * dim, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        double* f = scene.features.data() + i * dim;
        for (std::size_t k = 0; k < dim; ++k) {
            f[k] = cfg.noise == 0.0 ? 0.0 : cfg.noise * rng.normal();
        }
        if (scene.node_class[i] < 0) {
            continue;
        }
        const Vec& mean = world.class_mean(scene.node_class[i]);
        for (std::size_t k = 0; k < cdim; ++k) {
            f[k] += mean[k];
        }
        for (std::size_t e = 0; e < kEdges; ++e) {
            const auto bin = static_cast<std::size_t>(std::lround(scene.node_bins[i][e] / cfg.bin_width));
            f[cdim + e * static_cast<std::size_t>(cfg.bins) + bin] += cfg.geometry_gain;
        }
    }
    return scene;
}

void HeadParams::axpy(double a, const HeadParams& g) {
    auto apply = [a](Vec& x, const Vec& y) {
        for (std::size_t i = 0; i < x.size(); ++i) {
            x[i] += a * y[i];
        }
    };
    apply(w_cls, g.w_cls);
    apply(b_cls, g.b_cls);
    apply(w_reg, g.w_reg);
    apply(b_reg, g.b_reg);
}

ToyDetector::ToyDetector(std::size_t feature_dim, std::size_t bins, double bin_width)
    : dim_(feature_dim), bins_(bins), bin_width_(bin_width) {
    params_.w_reg.assign(kEdges * bins_ * dim_, 0.0);
    params_.b_reg.assign(kEdges * bins_, 0.0);
}

void ToyDetector::add_classes(std::span<const int> class_ids) {
    for (int c : class_ids) {
        if (column_of(c) >= 0) {
            throw Error("class already known to the detector");
        }
        classes_.push_back(c);
        params_.w_cls.resize(params_.w_cls.size() + dim_, 0.0);
        params_.b_cls.push_back(0.0);
    }
}

void ToyDetector::randomize(Rng& rng, double scale) {
    for (Vec* v : {&params_.w_cls, &params_.b_cls, &params_.w_reg, &params_.b_reg}) {
        for (double& x : *v) {
            x = scale * rng.normal();
        }
    }
}

int ToyDetector::column_of(int class_id) const {
    const auto it = std::find(classes_.begin(), classes_.end(), class_id);
    return it == classes_.end() ? -1 : static_cast<int>(it - classes_.begin());
}

HeadParams ToyDetector::zero_like() const {
    return {Vec(params_.w_cls.size(), 0.0), Vec(params_.b_cls.size(), 0.0), Vec(params_.w_reg.size(), 0.0),
            Vec(params_.b_reg.size(), 0.0)};
}

ResponseBundle ToyDetector::forward(const Scene& scene) const {
    if (scene.feature_dim != dim_) {
        throw Error("scene feature dimension does not match detector");
    }
    ResponseBundle out;
    out.grid = scene.grid;
    out.role = Role::student;
    const std::size_t n = scene.node_count();
    const std::size_t nc = classes_.size();
    const std::size_t nr = kEdges * bins_;
    out.cls.num_classes = nc;
    out.cls.logits.resize(n * nc);
    out.reg.bins = bins_;
    out.reg.bin_width = bin_width_;
    out.reg.logits.resize(n * nr);
    for (std::size_t i = 0; i < n; ++i) {
        const double* f = scene.features.data() + i * dim_;
        for (std::size_t k = 0; k < nc; ++k) {
            const double* w = params_.w_cls.data() + k * dim_;
            out.cls.logits[i * nc + k] = params_.b_cls[k] + std::inner_product(f, f + dim_, w, 0.0);
        }
        for (std::size_t k = 0; k < nr; ++k) {
            const double* w = params_.w_reg.data() + k * dim_;
            out.reg.logits[i * nr + k] = params_.b_reg[k] + std::inner_product(f, f + dim_, w, 0.0);
        }
    }
    return out;
}

void ToyDetector::backward(const Scene& scene, std::span<const double> grad_cls, std::span<const double> grad_reg,
                           HeadParams& out) const {
    const std::size_t n = scene.node_count();
    const std::size_t nc = classes_.size();
    const std::size_t nr = kEdges * bins_;
    for (std::size_t i = 0; i < n; ++i) {
        const double* f = scene.features.data() + i * dim_;
        for (std::size_t k = 0; k < nc; ++k) {
            const double g = grad_cls[i * nc + k];
            if (g == 0.0) {
                continue;
            }
            double* w = out.w_cls.data() + k * dim_;
            for (std::size_t d = 0; d < dim_; ++d) {
                w[d] += g * f[d];
            }
            out.b_cls[k] += g;
        }
        for (std::size_t k = 0; k < nr; ++k) {
            const double g = grad_reg[i * nr + k];
            if (g == 0.0) {
                continue;
            }
            double* w = out.w_reg.data() + k * dim_;
            for (std::size_t d = 0; d < dim_; ++d) {
                w[d] += g * f[d];
            }
            out.b_reg[k] += g;
        }
    }
}

namespace {

double softplus(double x) { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

}  // namespace

DetectorLoss detector_loss_logits(const ToyDetector& det, const Scene& scene, const ResponseBundle& out) {
    DetectorLoss L;
    const std::size_t n = scene.node_count();
    const std::size_t nc = det.num_classes();
    const std::size_t bins = det.bins();
    L.num_nodes = n;
    L.grad_cls.assign(n * nc, 0.0);
    L.grad_reg.assign(out.reg.logits.size(), 0.0);

    std::vector<int> target(n, -1);
    for (std::size_t i = 0; i < n; ++i) {
        if (scene.node_class[i] >= 0 && scene.node_labeled[i] != 0) {
            target[i] = det.column_of(scene.node_class[i]);
            if (target[i] >= 0) {
                ++L.num_pos;
            }
        }
    }
    const double norm = static_cast<double>(std::max<std::size_t>(1, L.num_pos));

    Vec pos_terms;
    Vec neg_terms;
    Vec reg_terms;
    Vec p(bins);
    for (std::size_t i = 0; i < n; ++i) {
        const auto z = out.cls.node(i);
        for (std::size_t k = 0; k < nc; ++k) {
            const bool positive = target[i] == static_cast<int>(k);
            // BCE with logits: softplus(z) - y*z
            const double bce = softplus(z[k]) - (positive ? z[k] : 0.0);
            (positive ? pos_terms : neg_terms).push_back(bce);
            L.grad_cls[i * nc + k] = (sigmoid(z[k]) - (positive ? 1.0 : 0.0)) / norm;
        }
        if (target[i] < 0) {
            continue;
        }
        for (std::size_t e = 0; e < kEdges; ++e) {
            const auto logits = out.reg.edge(i, e);
            softmax_into(logits, 1.0, p);
            const auto bin = static_cast<std::size_t>(
                std::lround(scene.node_bins[i][e] / det.bin_width()));
            const double top = *std::max_element(logits.begin(), logits.end());
            double lse = 0.0;
            for (double v : logits) {
                lse += std::exp(v - top);
            }
            reg_terms.push_back(top + std::log(lse) - logits[bin]);
            double* g = L.grad_reg.data() + i * kEdges * bins + e * bins;
            for (std::size_t k = 0; k < bins; ++k) {
                g[k] = (p[k] - (k == bin ? 1.0 : 0.0)) / norm;
            }
        }
    }
    L.cls_pos_sum = pairwise_sum(pos_terms);
    L.cls_neg_sum = pairwise_sum(neg_terms);
    L.reg_sum = pairwise_sum(reg_terms);
    L.loss = (L.cls_pos_sum + L.cls_neg_sum + L.reg_sum) / norm;
    return L;
}

DetectorLoss detector_loss(const ToyDetector& det, const Scene& scene, HeadParams* grad) {
    const ResponseBundle out = det.forward(scene);
    DetectorLoss L = detector_loss_logits(det, scene, out);
    if (grad != nullptr) {
        det.backward(scene, L.grad_cls, L.grad_reg, *grad);
    }
    return L;
}

const char* to_string(Protocol p) {
    switch (p) {
        case Protocol::joint:
            return "joint";
        case Protocol::finetune:
            return "finetune";
        case Protocol::r2d:
            return "r2d";
    }
    return "r2d";
}

Protocol protocol_from_string(const std::string& s) {
    if (s == "joint") {
        return Protocol::joint;
    }
    if (s == "finetune") {
        return Protocol::finetune;
    }
    if (s == "r2d") {
        return Protocol::r2d;
    }
    throw Error("unknown protocol '" + s + "'");
}

void ProtocolConfig::validate(const WorldConfig& world) const {
    if (steps.empty()) {
        throw Error("protocol needs at least one step");
    }
    std::set<int> seen;
    for (const auto& step : steps) {
        if (step.empty()) {
            throw Error("empty step");
        }
        for (int c : step) {
            if (c < 0 || c >= world.num_classes) {
                throw Error("step class outside the world");
            }
            if (!seen.insert(c).second) {
                throw Error("step class sets must be disjoint");
            }
        }
    }
    if (epochs < 0 || batch_size < 1 || !(learning_rate > 0.0)) {
        throw Error("invalid optimizer settings");
    }
    weights.validate();
    regions.validate();
}

double SimMetrics::final_score(int group) const {
    for (auto it = records.rbegin(); it != records.rend(); ++it) {
        if (it->group == group) {
            return it->score;
        }
    }
    throw Error("group never evaluated");
}

double SimMetrics::initial_score(int group) const {
    for (const auto& r : records) {
        if (r.group == group) {
            return r.score;
        }
    }
    throw Error("group never evaluated");
}

double SimMetrics::retention(int group) const {
    const double init = initial_score(group);
    return init > 0.0 ? final_score(group) / init : 1.0;
}

namespace {

std::uint64_t group_stream(std::span<const int> classes) {
    std::uint64_t h = 0xE7A1;
    for (int c : classes) {
        h = h * 1000003ULL + static_cast<std::uint64_t>(c + 1);
    }
    return h;
}

}  // namespace

double evaluate(const ToyDetector& det, const SyntheticWorld& world, std::span<const int> group_classes) {
    const WorldConfig& cfg = world.config();
    if (cfg.eval_scenes <= 0) {
        throw Error("no eval scenes");
    }
    for (int c : group_classes) {
        if (det.column_of(c) < 0) {
            throw Error("evaluation group contains an untrained class");
        }
    }
    Rng rng(Rng::derive(cfg.seed, group_stream(group_classes)));
    std::size_t hits = 0;
    std::size_t total = 0;
    for (int s = 0; s < cfg.eval_scenes; ++s) {
        const Scene scene = generate_scene(world, group_classes, rng);
        const ResponseBundle out = det.forward(scene);
        const QualityScores q = classification_quality(out.cls);
        std::vector<DecodedBox> boxes;
        for (std::size_t i = 0; i < q.values.size(); ++i) {
            if (q.values[i] > 0.05) {
                boxes.push_back(decode_box(i, out.grid, out.reg, q.values[i]));
            }
        }
        const NmsSelection kept = nms(boxes, 0.6);
        std::vector<DecodedBox> dets;
        for (const auto& b : boxes) {
            if (std::binary_search(kept.kept.begin(), kept.kept.end(), b.node)) {
                dets.push_back(b);
            }
        }
        std::sort(dets.begin(), dets.end(), [](const DecodedBox& a, const DecodedBox& b) {
            return a.score != b.score ? a.score > b.score : a.node < b.node;
        });
        std::vector<bool> matched(scene.objects.size(), false);
        for (const auto& d : dets) {
            int best = -1;
            double best_iou = 0.5;
            for (std::size_t g = 0; g < scene.objects.size(); ++g) {
                if (matched[g]) {
                    continue;
                }
                const double v = iou(d, scene.objects[g].box(cfg.stride));
                if (v >= best_iou) {
                    best_iou = v;
                    best = static_cast<int>(g);
                }
            }
            if (best < 0) {
                continue;
            }
            matched[static_cast<std::size_t>(best)] = true;
            const auto col = argmax(out.cls.node(d.node));
            if (det.classes()[col] == scene.objects[static_cast<std::size_t>(best)].class_id) {
                ++hits;
            }
        }
        total += scene.objects.size();
    }
    return total == 0 ? 0.0 : static_cast<double>(hits) / static_cast<double>(total);
}

StepContext make_step_context(const ToyDetector* teacher, const std::vector<Scene>& scenes,
                              const ProtocolConfig& cfg) {
    StepContext ctx;
    ctx.teacher = teacher;
    if (teacher == nullptr) {
        return ctx;
    }
    for (const auto& scene : scenes) {
        ResponseBundle out = teacher->forward(scene);
        out.role = Role::teacher;
        ctx.regions.push_back(refine_regions(out, cfg.regions, cfg.region_mode));
        ctx.teacher_out.push_back(std::move(out));
    }
    return ctx;
}

double training_loss(const ToyDetector& student, const Scene& scene, const StepContext& ctx, std::size_t scene_index,
                     const ProtocolConfig& cfg, HeadParams* grad) {
    const ResponseBundle out = student.forward(scene);
    DetectorLoss L = detector_loss_logits(student, scene, out);
    double loss = L.loss;
    if (ctx.teacher != nullptr) {
        const ResponseBundle& t = ctx.teacher_out[scene_index];
        const std::size_t nt = t.cls.num_classes;
        const std::size_t ns = student.num_classes();
        // Distillation covers the teacher's classes, which are the student's leading columns.
        ResponseBundle view;
        view.grid = out.grid;
        view.role = Role::student;
        view.cls.num_classes = nt;
        view.cls.logits.resize(out.cls.node_count() * nt);
        for (std::size_t i = 0; i < out.cls.node_count(); ++i) {
            std::copy_n(out.cls.logits.data() + i * ns, nt, view.cls.logits.data() + i * nt);
        }
        view.reg = out.reg;
        const RefinedRegions& regions = ctx.regions[scene_index];
        loss += distill_loss(t, view, regions, cfg.weights).l_distill_total;
        if (grad != nullptr) {
            const StudentGradients g = distill_gradients(t, view, regions, cfg.weights);
            for (std::size_t i = 0; i < out.cls.node_count(); ++i) {
                for (std::size_t k = 0; k < nt; ++k) {
                    L.grad_cls[i * ns + k] += g.cls[i * nt + k];
                }
            }
            for (std::size_t i = 0; i < g.reg.size(); ++i) {
                L.grad_reg[i] += g.reg[i];
            }
        }
    }
    if (grad != nullptr) {
        student.backward(scene, L.grad_cls, L.grad_reg, *grad);
    }
    return loss;
}

void train_epoch(ToyDetector& student, const std::vector<Scene>& scenes, const StepContext& ctx,
                 const ProtocolConfig& cfg, Rng& rng, int step, int epoch) {
    std::vector<std::size_t> order(scenes.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    for (std::size_t i = order.size(); i > 1; --i) {
        std::swap(order[i - 1], order[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(i) - 1))]);
    }
    const auto batch = static_cast<std::size_t>(cfg.batch_size);
    for (std::size_t start = 0; start < order.size(); start += batch) {
        const std::size_t end = std::min(order.size(), start + batch);
        HeadParams grad = student.zero_like();
        double loss = 0.0;
        const std::string where = "loss diverged at step " + std::to_string(step) + ", epoch " + std::to_string(epoch);
        try {
            for (std::size_t b = start; b < end; ++b) {
                loss += training_loss(student, scenes[order[b]], ctx, order[b], cfg, &grad);
            }
        } catch (const MisalignedError&) {
            throw;
        } catch (const Error& e) {
            throw DivergenceError(where + " (" + e.what() + ")");
        }
        if (!std::isfinite(loss)) {
            throw DivergenceError(where);
        }
        student.params().axpy(-cfg.learning_rate / static_cast<double>(end - start), grad);
    }
}

std::vector<Scene> training_scenes(const SyntheticWorld& world, std::span<const int> classes, std::uint64_t seed,
                                   int step, std::span<const int> past, bool label_past) {
    Rng rng(Rng::derive(seed, 100 + static_cast<std::uint64_t>(step)));
    std::vector<Scene> scenes;
    for (int i = 0; i < world.config().train_scenes; ++i) {
        Scene scene = generate_scene(world, classes, rng, past, world.config().past_object_rate);
        if (label_past) {
            for (auto& obj : scene.objects) {
                obj.labeled = true;
            }
            for (std::size_t n = 0; n < scene.node_count(); ++n) {
                scene.node_labeled[n] = scene.node_class[n] >= 0 ? 1 : 0;
            }
        }
        scenes.push_back(std::move(scene));
    }
    return scenes;
}

namespace {

void train_step(ToyDetector& det, const std::vector<Scene>& scenes, const StepContext& ctx,
                const ProtocolConfig& cfg, int step) {
    Rng rng(Rng::derive(cfg.seed, 200 + static_cast<std::uint64_t>(step)));
    for (int e = 0; e < cfg.epochs; ++e) {
        train_epoch(det, scenes, ctx, cfg, rng, step, e);
    }
}

}  // namespace

SimMetrics run_protocol(const ProtocolConfig& cfg, const SyntheticWorld& world, ToyDetector* final_out) {
    cfg.validate(world.config());
    const WorldConfig& wc = world.config();
    ToyDetector det(world.feature_dim(), static_cast<std::size_t>(wc.bins), wc.bin_width);
    SimMetrics metrics;
    const std::string name = to_string(cfg.protocol);
    std::vector<double> introduced(cfg.steps.size(), 0.0);

    auto record = [&](int step, int group) {
        const double s = evaluate(det, world, cfg.steps[static_cast<std::size_t>(group)]);
        if (step == group || cfg.protocol == Protocol::joint) {
            introduced[static_cast<std::size_t>(group)] = s;
        }
        metrics.records.push_back({name, step, group, s, introduced[static_cast<std::size_t>(group)] - s});
    };

    Rng init_rng(Rng::derive(cfg.seed, 1));
    if (cfg.protocol == Protocol::joint) {
        std::vector<Scene> scenes;
        std::vector<int> past;
        for (std::size_t k = 0; k < cfg.steps.size(); ++k) {
            det.add_classes(cfg.steps[k]);
            auto s = training_scenes(world, cfg.steps[k], cfg.seed, static_cast<int>(k), past, true);
            past.insert(past.end(), cfg.steps[k].begin(), cfg.steps[k].end());
            std::move(s.begin(), s.end(), std::back_inserter(scenes));
        }
        det.randomize(init_rng, cfg.init_scale);
        train_step(det, scenes, StepContext{}, cfg, 0);
        const int last = static_cast<int>(cfg.steps.size()) - 1;
        for (int g = 0; g <= last; ++g) {
            record(last, g);
        }
    } else {
        std::vector<int> past;
        for (std::size_t k = 0; k < cfg.steps.size(); ++k) {
            const auto step = static_cast<int>(k);
            const std::vector<Scene> scenes = training_scenes(world, cfg.steps[k], cfg.seed, step, past);
            past.insert(past.end(), cfg.steps[k].begin(), cfg.steps[k].end());
            if (k == 0) {
                det.add_classes(cfg.steps[k]);
                det.randomize(init_rng, cfg.init_scale);
                train_step(det, scenes, StepContext{}, cfg, step);
            } else {
                const ToyDetector teacher = det;
                det.add_classes(cfg.steps[k]);
                const StepContext ctx =
                    make_step_context(cfg.protocol == Protocol::r2d ? &teacher : nullptr, scenes, cfg);
                train_step(det, scenes, ctx, cfg, step);
            }
            for (int g = 0; g <= step; ++g) {
                record(step, g);
            }
        }
    }
    if (final_out != nullptr) {
        *final_out = det;
    }
    return metrics;
}

std::string metrics_to_csv(const SimMetrics& m) {
    std::ostringstream out;
    out << "protocol,step,group,score,forgetting\n";
    for (const auto& r : m.records) {
        out << r.protocol << ',' << r.step << ',' << r.group << ',' << format_double(r.score) << ','
            << format_double(r.forgetting) << '\n';
    }
    return out.str();
}

std::string metrics_to_json(const SimMetrics& m, int indent) {
    nlohmann::ordered_json arr = nlohmann::ordered_json::array();
    for (const auto& r : m.records) {
        nlohmann::ordered_json j;
        j["protocol"] = r.protocol;
        j["step"] = r.step;
        j["group"] = r.group;
        j["score"] = r.score;
        j["forgetting"] = r.forgetting;
        arr.push_back(std::move(j));
    }
    return arr.dump(indent);
}

std::vector<std::vector<int>> default_steps(const WorldConfig& world) {
    std::vector<int> base;
    std::vector<int> novel;
    for (int c = 0; c < world.num_classes; ++c) {
        (c < world.num_classes / 2 ? base : novel).push_back(c);
    }
    if (novel.empty()) {
        return {base};
    }
    return {base, novel};
}

std::vector<std::vector<int>> contiguous_steps(const WorldConfig& world, int k) {
    if (k < 1 || k > world.num_classes) {
        throw Error("step count must lie in [1, num_classes]");
    }
    std::vector<std::vector<int>> steps(static_cast<std::size_t>(k));
    for (int c = 0; c < world.num_classes; ++c) {
        steps[static_cast<std::size_t>(c * k / world.num_classes)].push_back(c);
    }
    return steps;
}

const GoldenRun& SimGolden::run(const std::string& name) const {
    for (const auto& r : runs) {
        if (r.name == name) {
            return r;
        }
    }
    throw Error("golden file lacks run '" + name + "'");
}

SimGolden compute_golden(const WorldConfig& world_cfg, std::uint64_t seed, int jobs) {
    const SyntheticWorld world(world_cfg);
    struct Job {
        const char* name;
        Protocol protocol;
        RegionMode mode;
    };
    const std::vector<Job> plan = {{"joint", Protocol::joint, RegionMode::refine},
                                   {"finetune", Protocol::finetune, RegionMode::refine},
                                   {"r2d", Protocol::r2d, RegionMode::refine},
                                   {"r2d_cand", Protocol::r2d, RegionMode::candidates},
                                   {"r2d_all", Protocol::r2d, RegionMode::all}};
    auto run_one = [&](const Job& job) {
        ProtocolConfig pc;
        pc.protocol = job.protocol;
        pc.region_mode = job.mode;
        pc.seed = seed;
        pc.steps = default_steps(world_cfg);
        const SimMetrics m = run_protocol(pc, world);
        return GoldenRun{job.name, m.initial_score(0), m.final_score(0), m.final_score(1), m.retention(0)};
    };
    SimGolden g;
    g.seed = seed;
    g.world_seed = world_cfg.seed;
    g.eval_scenes = world_cfg.eval_scenes;
    if (jobs <= 1) {
        for (const auto& job : plan) {
            g.runs.push_back(run_one(job));
        }
        return g;
    }
    std::vector<std::future<GoldenRun>> futures;
    for (const auto& job : plan) {
        futures.push_back(std::async(std::launch::async, run_one, job));
    }
    for (auto& f : futures) {
        g.runs.push_back(f.get());
    }
    return g;
}

std::string golden_to_json(const SimGolden& g) {
    nlohmann::ordered_json j;
    j["seed"] = g.seed;
    j["world_seed"] = g.world_seed;
    j["eval_scenes"] = g.eval_scenes;
    nlohmann::ordered_json runs = nlohmann::ordered_json::array();
    for (const auto& r : g.runs) {
        runs.push_back({{"name", r.name},
                        {"base_initial", r.base_initial},
                        {"base_final", r.base_final},
                        {"novel_final", r.novel_final},
                        {"retention", r.retention}});
    }
    j["runs"] = std::move(runs);
    return j.dump(2) + "\n";
}

SimGolden golden_from_json(const std::string& text) {
    SimGolden g;
    try {
        const auto j = nlohmann::json::parse(text);
        g.seed = j.at("seed").get<std::uint64_t>();
        g.world_seed = j.at("world_seed").get<std::uint64_t>();
        g.eval_scenes = j.at("eval_scenes").get<int>();
        for (const auto& r : j.at("runs")) {
            g.runs.push_back({r.at("name").get<std::string>(), r.at("base_initial").get<double>(),
                              r.at("base_final").get<double>(), r.at("novel_final").get<double>(),
                              r.at("retention").get<double>()});
        }
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("malformed golden file: ") + e.what());
    }
    return g;
}

std::pair<ResponseBundle, ResponseBundle> fixture_bundles(std::uint64_t seed) {
    WorldConfig wc;
    wc.num_classes = 3;
    wc.class_dim = 6;
    wc.grid_width = 10;
    wc.grid_height = 10;
    wc.bins = 8;
    wc.box_max = 3;
    wc.objects_max = 2;
    wc.train_scenes = 24;
    wc.seed = seed;
    const SyntheticWorld world(wc);
    const std::vector<int> classes = {0, 1, 2};

    ProtocolConfig pc;
    pc.protocol = Protocol::finetune;
    pc.steps = {classes};
    pc.seed = seed;
    pc.epochs = 3;
    ToyDetector student(world.feature_dim(), static_cast<std::size_t>(wc.bins), wc.bin_width);
    wc.eval_scenes = 1;
    run_protocol(pc, world, &student);
    pc.epochs = 30;
    ToyDetector teacher = student;
    run_protocol(pc, world, &teacher);

    Rng rng(Rng::derive(seed, 0xF1C));
    const Scene scene = generate_scene(world, classes, rng);
    ResponseBundle t = teacher.forward(scene);
    t.role = Role::teacher;
    ResponseBundle s = student.forward(scene);
    s.role = Role::student;
    return {std::move(t), std::move(s)};
}

}  // namespace r2d
