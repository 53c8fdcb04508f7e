#include "dualseg/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "dualseg/errors.hpp"
#include "dualseg/ops.hpp"

namespace dualseg::metrics {

namespace {

void require_same_shape(const auto& a, const auto& b, const char* what) {
    if (!a.same_shape(b)) {
        throw DimensionError(std::string(what) + ": " + std::to_string(a.height) + "x" +
                             std::to_string(a.width) + " vs " + std::to_string(b.height) + "x" +
                             std::to_string(b.width));
    }
}

bool in_region(const LabelMask* region, std::size_t i) {
    return region == nullptr || region->pixels[i] != 0;
}

double ratio(std::int64_t num, std::int64_t den, bool& undefined) {
    if (den == 0) {
        undefined = true;
        return 0.0;
    }
    return static_cast<double>(num) / static_cast<double>(den);
}

}  // namespace

void require_binary(const LabelMask& mask, const char* what) {
    for (auto v : mask.pixels) {
        if (v > 1) {
            throw ContractError(std::string(what) + " must be binary (0/1), found value " +
                                std::to_string(static_cast<int>(v)));
        }
    }
}

double bce_loss(const ProbabilityMap& p, const LabelMask& g) {
    require_same_shape(p, g, "bce_loss");
    if (p.size() == 0) {
        throw ContractError("bce_loss: empty map");
    }
    std::vector<double> probs(p.pixels.begin(), p.pixels.end());
    std::vector<double> labels(g.pixels.begin(), g.pixels.end());
    const Shape shape{p.height, p.width};
    return ops::bce(Tensor<double>(shape, std::move(probs)), Tensor<double>(shape, std::move(labels)))
        .item();
}

LabelMask binarize(const ProbabilityMap& p, double threshold) {
    if (!(threshold > 0.0 && threshold < 1.0)) {
        throw ParameterError("binarize: threshold must lie in (0, 1), got " + std::to_string(threshold));
    }
    LabelMask out(p.height, p.width, 0);
    for (std::size_t i = 0; i < p.pixels.size(); ++i) {
        out.pixels[i] = static_cast<double>(p.pixels[i]) > threshold ? 1 : 0;
    }
    return out;
}

ConfusionCounts confusion(const LabelMask& pred, const LabelMask& gt, const LabelMask* region) {
    require_same_shape(pred, gt, "confusion");
    require_binary(pred, "prediction");
    require_binary(gt, "ground truth");
    if (region != nullptr) {
        require_same_shape(pred, *region, "confusion region");
        require_binary(*region, "evaluation region");
    }
    ConfusionCounts c;
    for (std::size_t i = 0; i < pred.pixels.size(); ++i) {
        if (!in_region(region, i)) {
            continue;
        }
        const bool p = pred.pixels[i] != 0;
        const bool g = gt.pixels[i] != 0;
        if (p && g) {
            ++c.tp;
        } else if (p) {
            ++c.fp;
        } else if (g) {
            ++c.fn;
        } else {
            ++c.tn;
        }
    }
    return c;
}

MetricSet compute(const ConfusionCounts& c) {
    if (c.total() <= 0) {
        throw ContractError("metrics: no evaluated pixels");
    }
    MetricSet m;
    bool unused = false;
    m.acc = ratio(c.tp + c.tn, c.total(), unused);
    m.se = ratio(c.tp, c.tp + c.fn, m.se_undefined);
    m.sp = ratio(c.tn, c.tn + c.fp, m.sp_undefined);
    m.f1 = ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn, m.f1_undefined);
    return m;
}

RocCurve roc_auc(const ProbabilityMap& p, const LabelMask& gt, const LabelMask* region) {
    require_same_shape(p, gt, "roc_auc");
    require_binary(gt, "ground truth");
    if (region != nullptr) {
        require_same_shape(p, *region, "roc_auc region");
        require_binary(*region, "evaluation region");
    }
    std::vector<std::pair<float, bool>> samples;
    samples.reserve(p.pixels.size());
    std::int64_t positives = 0;
    for (std::size_t i = 0; i < p.pixels.size(); ++i) {
        if (in_region(region, i)) {
            samples.emplace_back(p.pixels[i], gt.pixels[i] != 0);
            positives += gt.pixels[i] != 0;
        }
    }
    const auto negatives = static_cast<std::int64_t>(samples.size()) - positives;
    if (positives == 0 || negatives == 0) {
        throw ContractError("roc_auc: ground truth inside the region has a single class");
    }
    std::sort(samples.begin(), samples.end(),
              [](const auto& a, const auto& b) { return a.first > b.first; });

    RocCurve curve;
    curve.points.push_back({std::numeric_limits<double>::infinity(), 0.0, 0.0});
    std::int64_t tp = 0, fp = 0;
    double area = 0.0;
    std::size_t i = 0;
    while (i < samples.size()) {
        const float value = samples[i].first;
        while (i < samples.size() && samples[i].first == value) {
            samples[i].second ? ++tp : ++fp;
            ++i;
        }
        const RocPoint& prev = curve.points.back();
        RocPoint next{value, static_cast<double>(fp) / static_cast<double>(negatives),
                      static_cast<double>(tp) / static_cast<double>(positives)};
        area += (next.fpr - prev.fpr) * (next.tpr + prev.tpr) * 0.5;
        curve.points.push_back(next);
    }
    if (curve.points.back().threshold > 0.0) {
        curve.points.push_back({0.0, 1.0, 1.0});
    }
    curve.auc = area;
    return curve;
}

}  // namespace dualseg::metrics
