#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "dualseg/image.hpp"

namespace dualseg::metrics {

struct ConfusionCounts {
    std::int64_t tp = 0;
    std::int64_t fp = 0;
    std::int64_t tn = 0;
    std::int64_t fn = 0;

    std::int64_t total() const { return tp + fp + tn + fn; }
    bool operator==(const ConfusionCounts&) const = default;
};

// Any ratio whose denominator is zero is reported as 0 and flagged.
struct MetricSet {
    double acc = 0.0;
    double se = 0.0;
    double sp = 0.0;
    double f1 = 0.0;
    bool se_undefined = false;
    bool sp_undefined = false;
    bool f1_undefined = false;

    bool warning() const { return se_undefined || sp_undefined || f1_undefined; }
};

struct RocPoint {
    double threshold;  // pixel predicted positive iff p >= threshold
    double fpr;        // 1 - SP
    double tpr;        // SE
};

struct RocCurve {
    std::vector<RocPoint> points;
    double auc = 0.0;
};

// Mean BCE over all pixels with probabilities clamped to [1e-7, 1 - 1e-7].
double bce_loss(const ProbabilityMap& p, const LabelMask& g);

// 1 iff p > threshold (strict). threshold must lie in (0, 1).
LabelMask binarize(const ProbabilityMap& p, double threshold = 0.5);

// Counts over pixels where region == 1, or all pixels without a region.
// Vessel (1) is the positive class.
ConfusionCounts confusion(const LabelMask& pred, const LabelMask& gt,
                          const LabelMask* region = nullptr);

MetricSet compute(const ConfusionCounts& counts);

// Threshold sweep over every distinct predicted value inside the region,
// from (0, 0) to (1, 1); AUC by the trapezoidal rule. Ties form diagonal
// segments, so the area equals the Mann-Whitney statistic with ties = 1/2.
RocCurve roc_auc(const ProbabilityMap& p, const LabelMask& gt, const LabelMask* region = nullptr);

// Throws ContractError unless every pixel is 0 or 1.
void require_binary(const LabelMask& mask, const char* what);

}  // namespace dualseg::metrics
