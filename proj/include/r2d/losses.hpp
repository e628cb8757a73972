#pragma once

#include <string>

#include "r2d/regions.hpp"
#include "r2d/response.hpp"

namespace r2d {

struct LossWeights {
    double lambda1 = 1.0;  // classification distillation
    double lambda2 = 1.0;  // localization distillation
    double lambda3 = 1.0;  // max-class KL
    double lambda4 = 1.0;  // non-max-class KL
    double lambda5 = 1.0;  // LD on high-value nodes
    double lambda6 = 1.0;  // LD on low-value nodes
    double t1 = 10.0;      // temperature for high-value nodes
    double t2 = 5.0;       // temperature for low-value nodes

    void validate() const;
    LossWeights scaled(double c) const;
};

/// Binary (max vs rest) split of a softmax plus the renormalized non-max part.
struct DecoupledProbs {
    std::size_t max_index = 0;
    double p_max = 0.0;
    double p_not_max = 0.0;
    Vec p_hat;  // length N-1, index max_index removed
};

DecoupledProbs decouple_probs(std::span<const double> logits, std::size_t max_index);

/// Index of the largest logit; ties go to the lowest index.
std::size_t argmax(std::span<const double> values);

struct DcdTerms {
    double l_max = 0.0;
    double l_not_max = 0.0;
    double l_high = 0.0;  // lambda3*l_max + lambda4*l_not_max
};

/// Decoupled max/non-max KL for one node, split at the teacher's argmax.
DcdTerms dcd_loss(std::span<const double> teacher_z, std::span<const double> student_z,
                  const LossWeights& w = {});

/// Mean DCD terms over `nodes`; all zero for an empty set.
DcdTerms dcd_region_loss(const ClassificationResponse& teacher, const ClassificationResponse& student,
                         const NodeIndices& nodes, const LossWeights& w = {});

/// Mean over nodes of the L1 distance between raw logits.
double l1_cls_loss(const ClassificationResponse& teacher, const ClassificationResponse& student,
                   const NodeIndices& nodes);

/// Mean over nodes and the 4 edges of KL(softmax(t/T) || softmax(s/T)).
double ld_loss(const RegressionResponse& teacher, const RegressionResponse& student, const NodeIndices& nodes,
               double temperature);

struct DistillLossReport {
    double l_max_cls_high = 0.0;
    double l_not_max_cls_high = 0.0;
    double l_cls_high = 0.0;
    double l_cls_low = 0.0;
    double alpha = 0.0;
    double beta = 0.0;
    double l_cls_distill = 0.0;
    double l_reg_high = 0.0;
    double l_reg_low = 0.0;
    double l_reg_distill = 0.0;
    double l_distill_total = 0.0;
};

/// Fills the classification fields (alpha, beta and the cls terms) of `report`.
void cls_distill_loss(const ResponseBundle& teacher, const ResponseBundle& student, const RegionPartition& part,
                      const LossWeights& w, DistillLossReport& report);

/// Fills the localization fields of `report`.
void reg_distill_loss(const ResponseBundle& teacher, const ResponseBundle& student, const NmsSelection& high,
                      const NmsSelection& low, const LossWeights& w, DistillLossReport& report);

/// Throws MisalignedError unless both bundles share grid, class count and bins.
void check_aligned(const ResponseBundle& teacher, const ResponseBundle& student);

/// Loss over regions already derived from the teacher.
DistillLossReport distill_loss(const ResponseBundle& teacher, const ResponseBundle& student,
                               const RefinedRegions& regions, const LossWeights& w);

DistillLossReport total_distill_loss(const ResponseBundle& teacher, const ResponseBundle& student,
                                     const RegionConfig& cfg = {}, const LossWeights& w = {},
                                     RegionMode mode = RegionMode::refine);

/// d L_distill_total / d student logits, laid out like the student's responses.
struct StudentGradients {
    Vec cls;
    Vec reg;
};

StudentGradients distill_gradients(const ResponseBundle& teacher, const ResponseBundle& student,
                                   const RefinedRegions& regions, const LossWeights& w);

StudentGradients distill_gradients(const ResponseBundle& teacher, const ResponseBundle& student,
                                   const RegionConfig& cfg = {}, const LossWeights& w = {},
                                   RegionMode mode = RegionMode::refine);

struct GradCheckResult {
    double max_rel_error = 0.0;
    double max_abs_error = 0.0;
    std::size_t coordinates = 0;
};

/// Relative error with the denominator floored at `floor`, so coordinates
/// whose true gradient is ~0 are judged by absolute error.
double relative_error(double analytic, double numeric, double floor = 1e-3);

/// Central finite differences (step h) of L_distill_total over every student logit.
GradCheckResult check_distill_gradients(const ResponseBundle& teacher, const ResponseBundle& student,
                                        const RegionConfig& cfg, const LossWeights& w, double h = 1e-5,
                                        RegionMode mode = RegionMode::refine);

std::string report_to_json(const DistillLossReport& r, int indent = -1);
std::string report_to_text(const DistillLossReport& r);
std::string report_csv_header();
std::string report_to_csv_row(const DistillLossReport& r);

/// Shortest round-trip decimal representation.
std::string format_double(double v);

}  // namespace r2d
