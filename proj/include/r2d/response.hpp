#pragma once

#include <array>
#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "r2d/numeric.hpp"

namespace r2d {

struct GridLevel {
    int width = 1;
    int height = 1;
    double stride = 8.0;  // pixels per node

    bool operator==(const GridLevel&) const = default;
};

struct NodeLocation {
    std::size_t level = 0;
    int row = 0;
    int col = 0;
};

/// Feature-map grid levels; nodes are numbered level-major, then row-major.
struct NodeGrid {
    std::vector<GridLevel> levels;

    std::size_t node_count() const;
    std::size_t level_offset(std::size_t level) const;
    NodeLocation locate(std::size_t node) const;
    /// Pixel coordinates of the node center: ((col+0.5)*stride, (row+0.5)*stride).
    std::array<double, 2> center(std::size_t node) const;
    double stride_of(std::size_t node) const;
    void validate() const;

    bool operator==(const NodeGrid&) const = default;
};

enum class Head { cls, reg };
enum class Role { teacher, student };

/// Per-node classification logits, stored node-major.
struct ClassificationResponse {
    std::size_t num_classes = 0;
    Vec logits;

    std::size_t node_count() const { return num_classes == 0 ? 0 : logits.size() / num_classes; }
    std::span<const double> node(std::size_t i) const {
        return {logits.data() + i * num_classes, num_classes};
    }
    std::span<double> node(std::size_t i) { return {logits.data() + i * num_classes, num_classes}; }
};

inline constexpr std::size_t kEdges = 4;
/// Edge order inside a node's general distribution: top, bottom, left, right.
enum Edge : std::size_t { kTop = 0, kBottom = 1, kLeft = 2, kRight = 3 };

/// Per-node box distributions: 4 edges x `bins` logits per node.
struct RegressionResponse {
    std::size_t bins = 0;
    double bin_width = 1.0;  // in stride units
    Vec logits;

    std::size_t node_stride() const { return kEdges * bins; }
    std::size_t node_count() const { return bins == 0 ? 0 : logits.size() / node_stride(); }
    std::span<const double> edge(std::size_t node, std::size_t e) const {
        return {logits.data() + node * node_stride() + e * bins, bins};
    }
    std::span<double> edge(std::size_t node, std::size_t e) {
        return {logits.data() + node * node_stride() + e * bins, bins};
    }
    std::span<const double> node(std::size_t i) const {
        return {logits.data() + i * node_stride(), node_stride()};
    }
};

struct ResponseBundle {
    NodeGrid grid;
    ClassificationResponse cls;
    RegressionResponse reg;
    Role role = Role::teacher;

    std::size_t node_count() const { return grid.node_count(); }
    /// Throws Error when shapes disagree with the grid or contain non-finite values.
    void validate() const;
};

struct QualityScores {
    Head head = Head::cls;
    Vec values;
};

struct DecodedBox {
    std::size_t node = 0;
    double x1 = 0.0;
    double y1 = 0.0;
    double x2 = 0.0;
    double y2 = 0.0;
    double score = 0.0;
};

/// Max over classes of sigmoid(logit), per node.
QualityScores classification_quality(const ClassificationResponse& cls);

/// -ln(1 - Q_cls) times the largest edge entropy (bits) of the softened
/// distributions at that node.
QualityScores regression_quality(const QualityScores& q_cls, const RegressionResponse& reg);

/// Same quantity computed from the logits directly, so saturated nodes
/// (sigmoid rounding to 1.0) stay finite.
QualityScores regression_quality(const ClassificationResponse& cls, const RegressionResponse& reg);

/// Expected distance (in pixels) of one edge distribution: sum_k k*p_k * bin_width * stride.
double expected_edge_distance(std::span<const double> edge_logits, double bin_width, double stride);

DecodedBox decode_box(std::size_t node, const NodeGrid& grid, const RegressionResponse& reg,
                      double score);

double iou(const DecodedBox& a, const DecodedBox& b);

// JSON schema:
//   {"grid": {"levels": [{"w": int, "h": int, "stride": real}, ...]},
//    "cls": [[logit, ...] per node],
//    "reg": {"bins": M, "bin_width": real, "nodes": [[[M logits] x 4] per node]},
//    "role": "teacher" | "student"}          (role optional, default teacher)
std::string bundle_to_json(const ResponseBundle& bundle, int indent = -1);
/// Throws ParseError (with byte offset when the text is not JSON) or Error.
ResponseBundle bundle_from_json(const std::string& text);
ResponseBundle load_bundle(const std::filesystem::path& path);
void save_bundle(const ResponseBundle& bundle, const std::filesystem::path& path);

}  // namespace r2d
