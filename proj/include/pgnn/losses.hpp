#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "pgnn/attention.hpp"
#include "pgnn/encoder.hpp"
#include "pgnn/patch_graph.hpp"
#include "pgnn/tensor.hpp"

namespace pgnn {

// The training objective: an erase/preserve pair of class scores driven by
// attention masks, a smoothness term on the spliced maps, and a multi-label
// classification term.
//
//   total = w.erase * erase - w.preserve * preserve
//         + w.smoothness * smoothness + w.classification * classification
//
// combined left to right; LossBreakdown stores the four term values and the
// total produced by exactly that combination.

struct LossWeights {
    double erase = 1.0;
    double preserve = 1.0;
    double smoothness = 0.8;
    double classification = 1.0;
};

struct LossBreakdown {
    double erase = 0.0;          // log P(class | erased features)
    double preserve = 0.0;       // log P(class | attended features)
    double smoothness = 0.0;     // total-variation of the spliced maps
    double classification = 0.0; // mean BCE against the image labels
    double total = 0.0;
    Tensor total_tensor; // same value, on the gradient tape
};

// Keeps values strictly above the threshold, zeroes the rest.
// threshold must lie in (0,1).
AttentionMap threshold_map(const AttentionMap& map, double threshold);

// Resizes the [h, w] mask to the feature resolution and multiplies every
// channel by it. The complement variant multiplies by (1 - mask) such that
// mask_apply(m, f) + mask_apply_complement(m, f) == f holds exactly.
Tensor mask_apply(const Tensor& mask, const Tensor& features);
Tensor mask_apply_complement(const Tensor& mask, const Tensor& features);

// log P(y = batch class | features masked by the complement of the previous
// epoch's attention map). Each node of the image is masked by its own region
// of the map; node logits are averaged, passed through a sigmoid, clamped at
// 1e-12, and logged. A zero map leaves the features untouched.
Tensor erase_score(const AttentionMap& previous_map, const PatchGraph& graph,
                   const std::vector<Tensor>& features,
                   const std::string& image_id, const EncoderParams& params);

// log P(y = batch class | features masked by the current spliced map).
// Differentiable through both the mask and the features.
Tensor preserve_score(const SplicedMap& current_map, const PatchGraph& graph,
                      const std::vector<Tensor>& features,
                      const std::string& image_id, const EncoderParams& params);

// sqrt of the summed squared horizontal and vertical neighbor differences;
// one square root over the whole sum. Maps without neighbor pairs give 0.
Tensor tv_loss(const Tensor& map);

// Mean binary cross-entropy of sigmoid(logits) against a {0,1} multi-hot
// label vector, with probabilities clamped at 1e-12.
Tensor classification_loss(const Tensor& logits,
                           const std::vector<std::uint8_t>& labels);

// Full objective over a mini-batch graph. previous_maps and current_maps are
// per image in batch order (first epoch: all-zero previous maps); features
// are the updated node features parallel to graph.nodes; labels is the
// multi-hot vector per image.
LossBreakdown soft_complementary_loss(
    const std::vector<AttentionMap>& previous_maps,
    const std::vector<SplicedMap>& current_maps, const PatchGraph& graph,
    const std::vector<Tensor>& features,
    const std::vector<std::vector<std::uint8_t>>& labels,
    const EncoderParams& params, const LossWeights& weights);

} // namespace pgnn
