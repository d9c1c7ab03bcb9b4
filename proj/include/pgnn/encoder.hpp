#pragma once

#include <cstddef>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "pgnn/tensor.hpp"

namespace pgnn {

// Small convolutional backbone plus a multi-label classification head.
// Images and patches are [3, h, w] tensors; features come out as
// [channels, h', w'] where h', w' are the input dims divided by the pool
// window (1 disables pooling).

struct EncoderConfig {
    std::vector<std::size_t> conv_channels{8, 16, 16};
    std::size_t kernel_size = 3; // odd, stride 1, zero-padded to keep dims
    std::size_t pool_window = 2; // applied once, after the first conv; 1 = off
    std::size_t num_classes = 4; // foreground classes (background excluded)
};

struct EncoderParams {
    EncoderConfig config;
    std::vector<Tensor> conv_kernels; // [out, in, k, k] per layer
    std::vector<Tensor> conv_biases;  // [out] per layer
    // The class head is a bias-free 1x1 convolution. A per-class bias would
    // add a spatially constant offset to every score map, which survives
    // normalization as a uniform lift and washes out the spatial contrast
    // the maps exist to provide.
    Tensor classifier_weight; // [num_classes, channels, 1, 1]

    // Scaled-uniform init (+-sqrt(6/fan_in)) for weights, zeros for biases.
    static EncoderParams init(const EncoderConfig& config, std::mt19937_64& rng);

    std::size_t out_channels() const { return config.conv_channels.back(); }

    // Trainable tensors, in a stable order shared with named_parameters().
    std::vector<Tensor> parameters() const;
    std::vector<std::pair<std::string, Tensor>> named_parameters() const;
};

// conv -> relu for each layer, with one average pool after the first layer.
// Requires h, w >= 8 so the pooled map keeps usable extent.
Tensor embed(const EncoderParams& params, const Tensor& image);

// Per-class score maps [num_classes, h', w'] from a feature map, via the
// 1x1 classifier convolution. The spatial mean of each map is exactly the
// logit classify() reports for that class.
Tensor cam(const EncoderParams& params, const Tensor& features);

// Pre-sigmoid logits [num_classes]; P(class c present) = sigmoid(logit_c).
Tensor classify(const EncoderParams& params, const Tensor& features);

} // namespace pgnn
