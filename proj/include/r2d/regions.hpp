#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "r2d/response.hpp"

namespace r2d {

struct RegionConfig {
    double theta = 0.05;
    double nms_iou = 0.6;
    int em_max_iters = 100;
    double em_tol = 1e-6;
    double variance_floor = 1e-8;

    void validate() const;
};

/// Two-component 1-D Gaussian mixture. Component 0 has the smaller mean.
struct GmmModel {
    double weight[2] = {0.5, 0.5};
    double mean[2] = {0.0, 0.0};
    double variance[2] = {1.0, 1.0};
    Vec log_likelihood_trace;
    /// Responsibility of component 1 (the larger mean) for every input value.
    Vec posterior_high;
    bool degenerate = false;
    int iterations = 0;
};

using NodeIndices = std::vector<std::size_t>;

struct RegionPartition {
    Head head = Head::cls;
    NodeIndices candidates;
    NodeIndices high;
    NodeIndices low;
};

struct NmsSelection {
    NodeIndices kept;
};

/// Which nodes are distilled. `refine` is the full coarse-to-fine pipeline;
/// `candidates` skips clustering and NMS; `all` distills every node.
enum class RegionMode { refine, candidates, all };

struct RefinedRegions {
    QualityScores q_cls;
    QualityScores q_reg;
    RegionPartition cls;
    RegionPartition reg;
    NmsSelection reg_high;
    NmsSelection reg_low;
    GmmModel cls_gmm;
    GmmModel reg_gmm;
};

/// Indices with quality strictly greater than theta, ascending.
NodeIndices select_candidates(const QualityScores& q, double theta);

GmmModel fit_gmm(std::span<const double> values, const RegionConfig& cfg = {});

/// Responsibility of the larger-mean component for a single value.
double posterior_high(const GmmModel& model, double x);

RegionPartition partition(const QualityScores& q, const NodeIndices& candidates,
                          const RegionConfig& cfg = {}, GmmModel* model_out = nullptr);

/// Greedy NMS; descending score, ties to the lower node index. Returned
/// indices are sorted ascending.
NmsSelection nms(std::vector<DecodedBox> boxes, double iou_thr);

RefinedRegions refine_regions(const ResponseBundle& teacher, const RegionConfig& cfg = {},
                              RegionMode mode = RegionMode::refine);

/// CSV raster (height rows x width columns) for one grid level:
/// 0 outside, 1 low-value candidate, 2 high-value candidate.
std::vector<std::vector<int>> region_raster(const RegionPartition& partition, const NodeGrid& grid,
                                            std::size_t level);
void export_region_raster(const RegionPartition& partition, const NodeGrid& grid, std::size_t level,
                          const std::filesystem::path& path);

std::string regions_to_json(const RefinedRegions& regions, int indent = -1);

const char* to_string(RegionMode mode);
RegionMode region_mode_from_string(const std::string& s);

}  // namespace r2d
