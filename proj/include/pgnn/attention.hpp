#pragma once

#include <cstddef>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "pgnn/patch_graph.hpp"
#include "pgnn/pgm.hpp"
#include "pgnn/tensor.hpp"

namespace pgnn {

// Cross-patch attention over the node set: tokens are spatially pooled node
// features, edges are the row-stochastic attention weights, and each node's
// feature map is updated residually from the attended token mix.

struct TransformerParams {
    Tensor w_q; // [channels, d_k]
    Tensor w_k; // [channels, d_k]
    Tensor w_v; // [channels, d_v]
    Tensor w_o; // [d_v, channels]
    Tensor conv_kernel; // [channels, channels, k, k]
    Tensor conv_bias;   // [channels]
    Tensor ln_gain;     // [channels]
    Tensor ln_bias;     // [channels]
    double ln_eps = 1e-5;

    static TransformerParams init(std::size_t channels, std::size_t d_k,
                                  std::size_t d_v, std::mt19937_64& rng);

    std::size_t d_k() const { return w_q.shape()[1]; }
    std::size_t d_v() const { return w_v.shape()[1]; }
    std::size_t channels() const { return w_q.shape()[0]; }

    std::vector<Tensor> parameters() const;
    std::vector<std::pair<std::string, Tensor>> named_parameters() const;
};

// One token per node: the spatial mean of its feature map, stacked in node
// order into an [n, channels] matrix.
Tensor node_vectors(const std::vector<PatchNode>& nodes);

struct AttentionResult {
    Tensor output;  // [n, d_v] = weights x V
    Tensor weights; // [n, n], rows sum to 1
};

// softmax(Q K^T / sqrt(d_k)) V. d_k is validated against the projection
// width so the scale always matches the shapes.
AttentionResult attention(const Tensor& q, const Tensor& k, const Tensor& v,
                          std::size_t d_k);

// The attention weight matrix used as graph edges.
Tensor edge_weights(const PatchGraph& graph, const TransformerParams& params);

struct TransformerResult {
    std::vector<Tensor> features; // updated node features, input shapes kept
    Tensor edge_weights;          // [n, n]
};

// Per node: the attended token (projected back to channel space) is added
// over the node's spatial grid, a convolutional branch is added residually,
// and the result is layer-normalized over channels with learned gain/bias.
// Zeroing w_v and the conv reduces the block to layernorm(input).
TransformerResult transformer_block(const PatchGraph& graph,
                                    const TransformerParams& params);

struct SplicedMap {
    std::string image_id;
    std::size_t class_id = 0;
    Tensor map; // [H, W] in [0,1], on the gradient tape
};

// Detached snapshot of a spliced map, for storage and export.
struct AttentionMap {
    std::string image_id;
    std::size_t class_id = 0;
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<double> values; // row-major, in [0,1]
};

AttentionMap snapshot(const SplicedMap& m);

// Places each foreground node's class map (row batch_class-1 of its score
// maps, resized to the node's region) back into the full image frame, one
// map per image. Grid regions must tile their crop exactly; proposal
// regions fuse overlaps by per-pixel max and leave uncovered pixels 0.
// The assembled map is normalized to [0,1] by clipping negatives and
// dividing by the positive peak; a map without positive response
// normalizes to all zeros.
std::vector<SplicedMap> splice_attention(
    const PatchGraph& graph, const std::vector<Tensor>& node_score_maps,
    const std::vector<std::pair<std::string, Tensor>>& images);

// 8-bit grayscale export, value = round(255 * A).
PgmImage attention_to_pgm(const AttentionMap& map);

} // namespace pgnn
