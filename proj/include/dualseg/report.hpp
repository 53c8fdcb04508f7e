#pragma once

#include <string>
#include <vector>

#include "dualseg/image.hpp"

namespace dualseg::metrics {

// Metrics of one image at threshold 0.5, restricted to the region.
struct ImageRow {
    std::string id;
    double acc = 0.0;
    double se = 0.0;
    double sp = 0.0;
    double f1 = 0.0;
    double auc = 0.0;
    // Some ratio had a zero denominator (or the region held a single class,
    // which leaves AUC undefined); the value is reported as 0.
    bool warning = false;
};

struct Report {
    std::vector<ImageRow> rows;
    ImageRow mean;  // arithmetic mean of the rows, id "mean"
};

ImageRow evaluate_image(const std::string& id, const ProbabilityMap& p, const LabelMask& gt,
                        const LabelMask* region = nullptr);

// Throws ContractError on an empty row list.
Report summarize(std::vector<ImageRow> rows);

// Plain-text table:
//   id            ACC       SE        SP        F1        AUC
//   synth_0000    0.962311  0.804102  0.981200  0.801944  0.957133
//   ...
//   mean          ...
// Values printed with 6 decimals; rows with an undefined ratio end in " *".
std::string format_table(const Report& report);

// Dataset means, one "KEY VALUE" line each for ACC, SE, SP, F1, AUC.
std::string format_keyvalue(const Report& report);

// Writes the table to `path` and the key-value file to `path + ".kv"`.
void write_report(const Report& report, const std::string& path);

}  // namespace dualseg::metrics
