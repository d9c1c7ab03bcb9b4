#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "pgnn/config.hpp"
#include "pgnn/labels.hpp"
#include "pgnn/patch_graph.hpp"
#include "pgnn/tensor.hpp"

namespace pgnn {

// One synthetic training image. The ground-truth map exists for evaluation
// only; the trainers read image, labels and boxes.
struct SyntheticScene {
    std::string id;
    Tensor image;                // [3, H, W], values in [0, 1]
    std::vector<std::uint8_t> labels; // multi-hot over classes 1..K
    LabelMap ground_truth;       // 0 background, 1..K object classes
    std::vector<ScoredBox> boxes; // noisy object proposals plus one decoy

    bool has_class(std::size_t c) const { return labels.at(c - 1) != 0; }
};

// Seeded scene synthesis. Objects share one fabric body color and differ by
// shape plus a small saturated core patch, so class identity hinges on the
// core while plain body texture stays ambiguous; fabric-colored distractor
// blobs in the background make that ambiguity cost something. 70% of scenes
// hold one object, the rest two of distinct classes.
std::vector<SyntheticScene> generate_dataset(const ExperimentConfig& config);

// Indices of scenes whose label set contains class c, in dataset order.
std::vector<std::size_t> images_with_class(const std::vector<SyntheticScene>& dataset,
                                           std::size_t c);

// Uniform sample of `size` distinct scene indices containing class c.
// Throws when fewer than `size` scenes qualify.
std::vector<std::size_t> sample_batch(const std::vector<SyntheticScene>& dataset,
                                      std::size_t c, std::size_t size,
                                      std::mt19937_64& rng);

// On-disk layout: images/<id>.tensor, ground_truth/<id>.pgm, labels.txt
// (header `num_classes K`, then `<id> <K flags>` per line), boxes.txt.
void save_dataset(const std::string& dir, const std::vector<SyntheticScene>& dataset,
                  std::size_t num_classes);
std::vector<SyntheticScene> load_dataset(const std::string& dir);

} // namespace pgnn
