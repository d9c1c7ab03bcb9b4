#include "pgnn/labels.hpp"

#include <set>
#include <stdexcept>
#include <string>

namespace pgnn {

LabelMap maps_to_labels(const std::vector<AttentionMap>& maps,
                        double background_threshold) {
    if (maps.empty())
        throw std::invalid_argument("maps_to_labels: no attention maps given");
    if (!(background_threshold > 0.0 && background_threshold < 1.0))
        throw std::invalid_argument(
            "maps_to_labels: background threshold must lie in (0,1)");
    const std::size_t h = maps.front().height;
    const std::size_t w = maps.front().width;
    std::set<std::size_t> seen;
    for (const auto& m : maps) {
        if (m.height != h || m.width != w)
            throw std::invalid_argument(
                "maps_to_labels: map sizes differ for image " + m.image_id);
        if (m.class_id == 0 || m.class_id > 255 || !seen.insert(m.class_id).second)
            throw std::invalid_argument(
                "maps_to_labels: class ids must be distinct and in 1..255");
    }

    LabelMap out;
    out.height = h;
    out.width = w;
    out.values.assign(h * w, 0);
    for (std::size_t i = 0; i < h * w; ++i) {
        double best = background_threshold;
        std::size_t best_class = 0;
        for (const auto& m : maps) {
            // Strictly-better wins; on equal strength the lower class index
            // is kept, so scan order does not matter.
            if (m.values[i] > best ||
                (m.values[i] == best && best_class != 0 &&
                 m.class_id < best_class)) {
                best = m.values[i];
                best_class = m.class_id;
            }
        }
        out.values[i] = static_cast<std::uint8_t>(best_class);
    }
    return out;
}

LabelMap mutual_update(const LabelMap& current, const LabelMap& predicted) {
    if (current.height != predicted.height ||
        current.width != predicted.width)
        throw std::invalid_argument("mutual_update: label map sizes differ");
    LabelMap out = current;
    for (std::size_t i = 0; i < out.values.size(); ++i)
        if (predicted.values[i] != 0) out.values[i] = predicted.values[i];
    return out;
}

ConfusionCounts& ConfusionCounts::operator+=(const ConfusionCounts& other) {
    if (per_class.size() < other.per_class.size())
        per_class.resize(other.per_class.size());
    for (std::size_t c = 0; c < other.per_class.size(); ++c) {
        per_class[c].tp += other.per_class[c].tp;
        per_class[c].fp += other.per_class[c].fp;
        per_class[c].fn += other.per_class[c].fn;
    }
    return *this;
}

ConfusionCounts confusion(const LabelMap& predicted, const LabelMap& truth,
                          std::size_t num_classes, int ignore_index) {
    if (predicted.height != truth.height || predicted.width != truth.width)
        throw std::invalid_argument("confusion: label map sizes differ");
    ConfusionCounts counts;
    counts.per_class.assign(num_classes + 1, ClassCounts{});
    for (std::size_t i = 0; i < truth.values.size(); ++i) {
        const std::size_t gt = truth.values[i];
        const std::size_t pr = predicted.values[i];
        if (ignore_index >= 0 && gt == static_cast<std::size_t>(ignore_index))
            continue;
        if (gt > num_classes || pr > num_classes)
            throw std::invalid_argument(
                "confusion: label value exceeds class count " +
                std::to_string(num_classes));
        if (pr == gt) {
            counts.per_class[gt].tp += 1;
        } else {
            counts.per_class[pr].fp += 1;
            counts.per_class[gt].fn += 1;
        }
    }
    return counts;
}

namespace {

// Shared averaging rule: classes absent from both maps drop out; a present
// class with an empty denominator contributes 0.
template <typename Ratio>
double class_average(const ConfusionCounts& counts, bool include_background,
                     Ratio&& ratio) {
    double total = 0.0;
    std::size_t counted = 0;
    for (std::size_t c = include_background ? 0 : 1;
         c < counts.per_class.size(); ++c) {
        const ClassCounts& k = counts.per_class[c];
        if (k.tp + k.fp + k.fn == 0) continue;
        total += ratio(k);
        ++counted;
    }
    return counted == 0 ? 0.0 : total / static_cast<double>(counted);
}

double safe_div(std::uint64_t num, std::uint64_t den) {
    return den == 0 ? 0.0
                    : static_cast<double>(num) / static_cast<double>(den);
}

} // namespace

double miou(const ConfusionCounts& counts, bool include_background) {
    return class_average(counts, include_background, [](const ClassCounts& k) {
        return safe_div(k.tp, k.tp + k.fp + k.fn);
    });
}

double precision(const ConfusionCounts& counts, bool include_background) {
    return class_average(counts, include_background, [](const ClassCounts& k) {
        return safe_div(k.tp, k.tp + k.fp);
    });
}

double recall(const ConfusionCounts& counts, bool include_background) {
    return class_average(counts, include_background, [](const ClassCounts& k) {
        return safe_div(k.tp, k.tp + k.fn);
    });
}

PgmImage label_to_pgm(const LabelMap& map) {
    PgmImage img;
    img.width = map.width;
    img.height = map.height;
    img.pixels = map.values;
    return img;
}

LabelMap label_from_pgm(const PgmImage& img, std::size_t num_classes) {
    LabelMap map;
    map.height = img.height;
    map.width = img.width;
    map.values = img.pixels;
    for (std::uint8_t v : map.values)
        if (v > num_classes)
            throw std::runtime_error(
                "label_from_pgm: pixel value " + std::to_string(v) +
                " exceeds class count " + std::to_string(num_classes));
    return map;
}

} // namespace pgnn
