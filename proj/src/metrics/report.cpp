#include "dualseg/report.hpp"

#include <algorithm>
#include <array>
#include <cstdio>
#include <fstream>

#include "dualseg/errors.hpp"
#include "dualseg/metrics.hpp"

namespace dualseg::metrics {

namespace {

std::string fixed6(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return buf;
}

std::array<double, 5> values(const ImageRow& r) { return {r.acc, r.se, r.sp, r.f1, r.auc}; }

constexpr std::array<const char*, 5> keys = {"ACC", "SE", "SP", "F1", "AUC"};

void write_text(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out << text;
    if (!out) throw IoError("cannot write report '" + path + "'");
}

}  // namespace

ImageRow evaluate_image(const std::string& id, const ProbabilityMap& p, const LabelMask& gt,
                        const LabelMask* region) {
    const auto counts = confusion(binarize(p), gt, region);
    const auto m = compute(counts);
    ImageRow row{id, m.acc, m.se, m.sp, m.f1, 0.0, m.warning()};
    const bool both = counts.tp + counts.fn > 0 && counts.tn + counts.fp > 0;
    if (both) {
        row.auc = roc_auc(p, gt, region).auc;
    } else {
        row.warning = true;
    }
    return row;
}

Report summarize(std::vector<ImageRow> rows) {
    if (rows.empty()) throw ContractError("evaluate: empty dataset");
    Report r;
    r.mean.id = "mean";
    const double n = static_cast<double>(rows.size());
    for (const auto& row : rows) {
        r.mean.acc += row.acc;
        r.mean.se += row.se;
        r.mean.sp += row.sp;
        r.mean.f1 += row.f1;
        r.mean.auc += row.auc;
        r.mean.warning = r.mean.warning || row.warning;
    }
    r.mean.acc /= n;
    r.mean.se /= n;
    r.mean.sp /= n;
    r.mean.f1 /= n;
    r.mean.auc /= n;
    r.rows = std::move(rows);
    return r;
}

std::string format_table(const Report& report) {
    std::size_t width = 4;
    for (const auto& row : report.rows) width = std::max(width, row.id.size());
    width += 2;
    auto pad = [&](const std::string& s, std::size_t w) { return s + std::string(w > s.size() ? w - s.size() : 1, ' '); };
    std::string out = pad("id", width);
    for (std::size_t k = 0; k < keys.size(); ++k) out += k + 1 < keys.size() ? pad(keys[k], 10) : keys[k];
    out += "\n";
    auto line = [&](const ImageRow& row) {
        out += pad(row.id, width);
        const auto v = values(row);
        for (std::size_t k = 0; k < v.size(); ++k) out += k + 1 < v.size() ? pad(fixed6(v[k]), 10) : fixed6(v[k]);
        out += row.warning ? " *\n" : "\n";
    };
    for (const auto& row : report.rows) line(row);
    line(report.mean);
    return out;
}

std::string format_keyvalue(const Report& report) {
    std::string out;
    const auto v = values(report.mean);
    for (std::size_t k = 0; k < keys.size(); ++k) out += std::string(keys[k]) + " " + fixed6(v[k]) + "\n";
    return out;
}

void write_report(const Report& report, const std::string& path) {
    write_text(path, format_table(report));
    write_text(path + ".kv", format_keyvalue(report));
}

}  // namespace dualseg::metrics
