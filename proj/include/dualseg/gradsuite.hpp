#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace dualseg::gradsuite {

enum class Scope { ops, attention, model };

// Throws ConfigError for anything but "ops", "attention" or "model".
Scope parse_scope(const std::string& name);
const char* to_string(Scope scope);

inline constexpr double op_tolerance = 1e-5;
inline constexpr double model_tolerance = 1e-4;
inline constexpr double step = 1e-5;

struct Entry {
    std::string target;
    std::int64_t cases = 0;        // random shapes checked
    std::int64_t coordinates = 0;  // compared scalars over all cases
    // Probes whose ±h evaluations cross a relu or max kink. Skipped for the
    // op targets, redrawn for the model.
    std::int64_t skipped = 0;
    double max_error = 0.0;
    double tolerance = 0.0;
    // Relative error by default. Absolute for targets whose exact gradient
    // is zero, where only rounding noise would be compared.
    bool absolute = false;

    bool passed() const { return coordinates > 0 && max_error < tolerance; }
};

// 64-bit central differences (h = 1e-5) against autodiff. Each primitive is
// checked on at least five random shapes drawn from `seed`; every input
// that carries a gradient is probed at every coordinate. The model scope
// probes 50 scalars drawn uniformly over all parameters of a small network
// (base 4, 16x16 input, dropout off).
std::vector<Entry> run(Scope scope, std::uint64_t seed);

bool all_passed(const std::vector<Entry>& entries);

// One line per entry: target, cases, coordinates, max error, tolerance,
// PASS/FAIL.
std::string format(const std::vector<Entry>& entries);

}  // namespace dualseg::gradsuite
