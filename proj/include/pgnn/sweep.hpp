#pragma once

#include <cstddef>
#include <iosfwd>
#include <string>
#include <vector>

#include "pgnn/config.hpp"

namespace pgnn {

enum class SweepAxis { patch_count, lambda };

// Accepts "patch_count" or "lambda"; anything else throws.
SweepAxis parse_sweep_axis(const std::string& name);

struct SweepRow {
    std::string label;           // "patches=16" or "lambda=1,1,0.8,1"
    bool ok = false;
    std::string error;           // set when the cell failed
    std::size_t patches = 0;     // patch axis
    std::vector<double> lambdas; // lambda axis, four entries
    double precision = 0.0;
    double recall = 0.0;
};

struct SweepReport {
    SweepAxis axis = SweepAxis::patch_count;
    std::vector<SweepRow> rows; // one per cell, axis cardinality
    bool all_ok() const;
};

// One full pipeline run per cell (dataset generation, attention training,
// pseudo labels, evaluation against ground truth), every cell reusing the
// base config's seed so rows differ only by the swept value. The patch axis
// varies the grid between 2x2 and 8x8 on 64-pixel images; the lambda axis
// tries five weightings around the defaults. Cell failures are recorded in
// the row and do not stop the remaining cells.
SweepReport run_sweep(const ExperimentConfig& base, SweepAxis axis);

// CSV with precision/recall per row. Failed cells become `# error ...`
// comment lines so partial tables are visibly partial.
void write_sweep_csv(std::ostream& out, const SweepReport& report);
void save_sweep_csv(const std::string& path, const SweepReport& report);

} // namespace pgnn
