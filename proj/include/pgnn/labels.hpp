#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "pgnn/attention.hpp"
#include "pgnn/pgm.hpp"

namespace pgnn {

// Pseudo-label maps (class index per pixel, 0 = background), the
// foreground-preferring label update rule, and segmentation metrics with
// per-class confusion counters.

struct LabelMap {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<std::uint8_t> values; // row-major class indices

    bool operator==(const LabelMap&) const = default;
};

// Argmax over per-class attention maps: a pixel takes the class of its
// strongest map if that value exceeds background_threshold, otherwise 0.
// Ties go to the lowest class index. All maps must share one size and have
// distinct class ids >= 1.
LabelMap maps_to_labels(const std::vector<AttentionMap>& maps,
                        double background_threshold);

// Per pixel: keep the current label where the prediction is background,
// otherwise take the prediction. Background can only shrink.
LabelMap mutual_update(const LabelMap& current, const LabelMap& predicted);

struct ClassCounts {
    std::uint64_t tp = 0;
    std::uint64_t fp = 0;
    std::uint64_t fn = 0;
};

struct ConfusionCounts {
    std::vector<ClassCounts> per_class; // index 0..num_classes

    ConfusionCounts& operator+=(const ConfusionCounts& other);
};

// Per-class true/false positives and false negatives over classes
// 0..num_classes. Pixels whose ground truth equals ignore_index are
// excluded entirely (pass a negative value to keep every pixel).
ConfusionCounts confusion(const LabelMap& predicted, const LabelMap& truth,
                          std::size_t num_classes, int ignore_index = -1);

// Class-averaged ratios. A class absent from both maps is excluded from the
// average; a present class with a zero denominator contributes 0. The
// background row is skipped unless include_background is set.
double miou(const ConfusionCounts& counts, bool include_background = false);
double precision(const ConfusionCounts& counts,
                 bool include_background = false);
double recall(const ConfusionCounts& counts, bool include_background = false);

// Class indices stored directly as 8-bit pixel values.
PgmImage label_to_pgm(const LabelMap& map);
LabelMap label_from_pgm(const PgmImage& img, std::size_t num_classes);

} // namespace pgnn
