#pragma once

#include <cstddef>
#include <iosfwd>
#include <string>

#include "pgnn/losses.hpp"

namespace pgnn {

// Every knob of a training run. Serialized as a key=value file (one pair per
// line, '#' starts a comment) so any run can be reproduced from its snapshot
// alone. Field names double as the file keys.
struct ExperimentConfig {
    unsigned long long seed = 7;
    std::size_t image_size = 32;
    std::size_t num_classes = 4; // foreground classes; label 0 is background
    std::size_t dataset_size = 200;

    std::string patch_mode = "grid"; // "grid" or "proposals"
    std::size_t grid_side = 4;       // grid_side^2 patches per image
    std::size_t proposal_top_k = 2;
    std::size_t proposal_node_size = 8;

    double lambda_erase = 1.0;
    double lambda_preserve = 1.0;
    double lambda_smoothness = 0.8;
    double lambda_classification = 1.0;

    // Support cut for maps carried into the next epoch's erase term.
    double attention_threshold = 0.3;
    // Peak-vs-background cut when maps are collapsed into label maps.
    double background_threshold = 0.3;

    std::size_t epochs = 8;
    // Leading epochs trained on the classification term alone. Erasing an
    // untrained classifier's maps tears the representation apart before it
    // can form; the erase and preserve terms engage once the warm-up ends
    // and then score against real previous-epoch maps.
    std::size_t warmup_epochs = 3;
    double learning_rate = 0.01;
    std::size_t batch_size = 3;

    std::size_t segmenter_epochs = 4;
    double segmenter_learning_rate = 0.05;

    std::size_t attention_dim = 16; // width of the Q/K and V projections

    // Throws std::invalid_argument naming the offending field.
    void validate() const;

    LossWeights loss_weights() const;
};

// Applies a single `key=value` assignment. Unknown keys and malformed or
// out-of-range values throw std::runtime_error.
void set_config_value(ExperimentConfig& config, const std::string& key,
                      const std::string& value);

ExperimentConfig parse_config(std::istream& in);
ExperimentConfig load_config_file(const std::string& path);

void write_config(std::ostream& out, const ExperimentConfig& config);
void save_config_file(const std::string& path, const ExperimentConfig& config);

} // namespace pgnn
