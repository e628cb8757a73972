#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "r2d/losses.hpp"
#include "r2d/regions.hpp"
#include "r2d/response.hpp"
#include "r2d/rng.hpp"

namespace r2d {

// Synthetic scenes on a single-level node grid. A node inside an object box
// carries the object's class mean (unit norm, pairwise cosine `homogeneity`)
// plus a geometry block that encodes its binned distances to the 4 box edges;
// background nodes carry noise only.
struct WorldConfig {
    int num_classes = 6;
    int class_dim = 12;
    double homogeneity = 0.5;
    double noise = 0.3;
    double geometry_gain = 1.0;
    double min_class_separation = 0.5;
    int grid_width = 16;
    int grid_height = 16;
    double stride = 8.0;
    int bins = 10;
    double bin_width = 1.0;
    int objects_min = 1;
    int objects_max = 3;
    int box_min = 2;  // box span in nodes (last - first), per axis
    int box_max = 6;
    double past_object_rate = 0.0;  // chance an object in a later-step training scene is an unannotated earlier class
    int train_scenes = 48;
    int eval_scenes = 150;
    std::uint64_t seed = 7;

    void validate() const;
};

class SyntheticWorld {
public:
    explicit SyntheticWorld(WorldConfig cfg);

    const WorldConfig& config() const { return cfg_; }
    std::size_t feature_dim() const;
    const Vec& class_mean(int c) const { return means_[static_cast<std::size_t>(c)]; }
    NodeGrid grid() const;

private:
    WorldConfig cfg_;
    std::vector<Vec> means_;
};

struct SceneObject {
    int class_id = 0;
    int col0 = 0;  // first/last covered node column and row
    int row0 = 0;
    int col1 = 0;
    int row1 = 0;
    bool labeled = true;

    /// Pixel box whose edges pass through the centers of the border nodes.
    DecodedBox box(double stride) const;
};

struct Scene {
    NodeGrid grid;
    std::size_t feature_dim = 0;
    Vec features;                             // node-major
    std::vector<SceneObject> objects;
    std::vector<int> node_class;              // -1 for background
    std::vector<char> node_labeled;           // 1 when the covering object is annotated
    std::vector<std::array<int, 4>> node_bins;  // ground-truth bin per edge (top, bottom, left, right)

    std::size_t node_count() const { return node_class.size(); }
    std::span<const double> feature(std::size_t node) const {
        return {features.data() + node * feature_dim, feature_dim};
    }
};

/// Places objects of the active classes; with probability `unlabeled_rate` an
/// object is drawn from `unlabeled_classes` instead and left unannotated.
/// Throws Error("scene overconstrained") when objects cannot be fitted.
Scene generate_scene(const SyntheticWorld& world, std::span<const int> active_classes, Rng& rng,
                     std::span<const int> unlabeled_classes = {}, double unlabeled_rate = 0.0);

/// Linear per-node heads; column k of the classification head predicts class `classes[k]`.
struct HeadParams {
    Vec w_cls;  // num_classes x dim
    Vec b_cls;
    Vec w_reg;  // 4*bins x dim
    Vec b_reg;

    void axpy(double a, const HeadParams& g);
    bool operator==(const HeadParams&) const = default;
};

class ToyDetector {
public:
    ToyDetector(std::size_t feature_dim, std::size_t bins, double bin_width);

    /// Appends zero-initialized classification rows for new classes.
    void add_classes(std::span<const int> class_ids);
    /// Small random initialization of every parameter.
    void randomize(Rng& rng, double scale);

    std::size_t num_classes() const { return classes_.size(); }
    std::size_t feature_dim() const { return dim_; }
    std::size_t bins() const { return bins_; }
    double bin_width() const { return bin_width_; }
    const std::vector<int>& classes() const { return classes_; }
    /// Column of a class id, or -1 when the detector does not know it.
    int column_of(int class_id) const;

    const HeadParams& params() const { return params_; }
    HeadParams& params() { return params_; }
    HeadParams zero_like() const;

    ResponseBundle forward(const Scene& scene) const;
    /// Accumulates d loss / d params given per-node logit gradients.
    void backward(const Scene& scene, std::span<const double> grad_cls, std::span<const double> grad_reg,
                  HeadParams& out) const;

private:
    std::size_t dim_;
    std::size_t bins_;
    double bin_width_;
    std::vector<int> classes_;
    HeadParams params_;
};

struct DetectorLoss {
    double loss = 0.0;
    double cls_pos_sum = 0.0;  // BCE summed over positive (node, class) pairs
    double cls_neg_sum = 0.0;
    double reg_sum = 0.0;      // edge cross-entropy summed over positive nodes
    std::size_t num_pos = 0;
    std::size_t num_nodes = 0;
    Vec grad_cls;  // d loss / d classification logits
    Vec grad_reg;
};

/// Sigmoid BCE over every (node, class) plus edge cross-entropy on positive
/// nodes, both summed and divided by max(1, positives). Unannotated objects
/// count as background.
DetectorLoss detector_loss_logits(const ToyDetector& det, const Scene& scene, const ResponseBundle& out);
DetectorLoss detector_loss(const ToyDetector& det, const Scene& scene, HeadParams* grad = nullptr);

enum class Protocol { joint, finetune, r2d };
const char* to_string(Protocol p);
Protocol protocol_from_string(const std::string& s);

struct ProtocolConfig {
    Protocol protocol = Protocol::r2d;
    std::vector<std::vector<int>> steps;
    int epochs = 30;
    double learning_rate = 0.5;
    int batch_size = 8;
    double init_scale = 0.01;
    LossWeights weights;
    RegionConfig regions;
    RegionMode region_mode = RegionMode::refine;
    std::uint64_t seed = 2024;

    void validate(const WorldConfig& world) const;
};

struct SimRecord {
    std::string protocol;
    int step = 0;
    int group = 0;
    double score = 0.0;
    double forgetting = 0.0;
};

struct SimMetrics {
    std::vector<SimRecord> records;

    /// Score of `group` after the final step.
    double final_score(int group) const;
    /// Score of `group` right after the step that introduced it.
    double initial_score(int group) const;
    /// final / initial (1 when the initial score is 0).
    double retention(int group) const;
};

/// Hit-rate proxy on the fixed evaluation scenes of `group_classes`: nodes
/// with Q_cls > 0.05 are decoded, NMS'd, and greedily matched to ground truth
/// at IoU >= 0.5; a ground-truth object counts when its match has the right class.
double evaluate(const ToyDetector& det, const SyntheticWorld& world, std::span<const int> group_classes);

/// One epoch-free training pass over `scenes` (one minibatch step per batch).
/// `teacher` may be null (no distillation).
struct StepContext {
    const ToyDetector* teacher = nullptr;
    std::vector<ResponseBundle> teacher_out;
    std::vector<RefinedRegions> regions;
};

StepContext make_step_context(const ToyDetector* teacher, const std::vector<Scene>& scenes,
                              const ProtocolConfig& cfg);

/// Combined detector + distillation loss over one scene and its parameter gradient.
double training_loss(const ToyDetector& student, const Scene& scene, const StepContext& ctx, std::size_t scene_index,
                     const ProtocolConfig& cfg, HeadParams* grad);

void train_epoch(ToyDetector& student, const std::vector<Scene>& scenes, const StepContext& ctx,
                 const ProtocolConfig& cfg, Rng& rng, int step, int epoch);

/// Scenes of `classes`; earlier-step classes in `past` appear at the world's
/// past_object_rate, annotated only when `label_past` is set (joint training).
std::vector<Scene> training_scenes(const SyntheticWorld& world, std::span<const int> classes, std::uint64_t seed,
                                   int step, std::span<const int> past = {}, bool label_past = false);

SimMetrics run_protocol(const ProtocolConfig& cfg, const SyntheticWorld& world, ToyDetector* final_out = nullptr);

std::string metrics_to_csv(const SimMetrics& m);
std::string metrics_to_json(const SimMetrics& m, int indent = -1);

/// Two-step summary of one protocol run on the default split.
struct GoldenRun {
    std::string name;  // joint, finetune, r2d, r2d_cand, r2d_all
    double base_initial = 0.0;
    double base_final = 0.0;
    double novel_final = 0.0;
    double retention = 0.0;
};

struct SimGolden {
    std::uint64_t seed = 0;
    std::uint64_t world_seed = 0;
    int eval_scenes = 0;
    std::vector<GoldenRun> runs;

    const GoldenRun& run(const std::string& name) const;
};

/// Runs joint, finetune and r2d in all three region modes on the default
/// split; `jobs` > 1 runs them concurrently (results do not depend on it).
SimGolden compute_golden(const WorldConfig& world, std::uint64_t seed, int jobs = 1);
std::string golden_to_json(const SimGolden& g);
SimGolden golden_from_json(const std::string& text);

/// Aligned teacher/student bundles on a 10x10 grid: a detector trained on
/// three classes and a less-trained copy, both applied to one fresh scene.
std::pair<ResponseBundle, ResponseBundle> fixture_bundles(std::uint64_t seed);

/// Default class split used by the CLI and the acceptance suite: 3 base + 3 novel.
std::vector<std::vector<int>> default_steps(const WorldConfig& world);
/// Classes 0..num_classes-1 cut into `k` contiguous groups of near-equal size.
std::vector<std::vector<int>> contiguous_steps(const WorldConfig& world, int k);

}  // namespace r2d
