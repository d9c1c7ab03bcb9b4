#pragma once

#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "pgnn/encoder.hpp"
#include "pgnn/tensor.hpp"

namespace pgnn {

// Cropping of images into patch nodes, in two modes: an even S x S grid over
// the central square crop, or externally scored proposal boxes plus one
// background node per image.

enum class PatchMode { grid, proposals };

struct PatchSpec {
    PatchMode mode = PatchMode::grid;
    std::string image_id;
    // Region in original-image pixel coordinates.
    std::size_t top = 0;
    std::size_t left = 0;
    std::size_t height = 0;
    std::size_t width = 0;
};

struct Patch {
    PatchSpec spec;
    Tensor pixels; // [3, h, w] constant crop (resized in proposal mode)
};

struct PatchNode {
    Tensor feature;              // [channels, fh, fw], on the gradient tape
    std::size_t class_index = 0; // 0 = background, 1..K = foreground classes
    PatchSpec spec;
    std::size_t node_id = 0;
};

struct ScoredBox {
    std::string image_id;
    std::size_t top = 0;
    std::size_t left = 0;
    std::size_t height = 0;
    std::size_t width = 0;
    double score = 0.0;
};

// One line per box: `image_id top left height width score`.
std::vector<ScoredBox> read_boxes(const std::string& path);
std::vector<ScoredBox> boxes_for_image(const std::vector<ScoredBox>& boxes,
                                       const std::string& image_id);

// S*S square, non-overlapping patches of side floor(min(H,W)/S) tiling the
// central square crop, in raster order. Requires min(H,W) >= 8*S so each
// patch clears the encoder minimum.
std::vector<Patch> crop_grid(const Tensor& image, const std::string& image_id,
                             std::size_t side_count);

struct ProposalCrops {
    std::vector<Patch> foreground; // top-k boxes by score, file order on ties
    Patch background;              // whole image with selected boxes zeroed
};

// Selects the k highest-scoring boxes (all of them, with a warning on
// stderr, if fewer are given) and resizes each crop to node_size square.
// The background patch is the full image with the selected regions zeroed,
// resized the same way.
ProposalCrops crop_proposals(const Tensor& image, const std::string& image_id,
                             const std::vector<ScoredBox>& boxes,
                             std::size_t top_k, std::size_t node_size);

// Background nodes get class 0; every foreground node carries the class
// shared by its mini-batch.
std::size_t assign_class(bool is_background, std::size_t batch_class);

// Embeds each patch and adds its class-embedding vector (row class_index of
// the [K+1, channels] table) uniformly over spatial positions. Gradients
// reach both the encoder and the embedding table.
std::vector<PatchNode> build_nodes(const std::vector<Patch>& patches,
                                   const std::vector<std::size_t>& class_indices,
                                   const EncoderParams& params,
                                   const Tensor& class_embeddings);

struct PatchGraph {
    std::vector<PatchNode> nodes;
    Tensor edge_weights; // [n, n], row-stochastic; filled by the attention pass
    std::vector<std::string> image_ids; // batch order
    std::size_t batch_class = 0;        // shared foreground class
};

// Assembles the node set for a mini-batch of same-class images. In grid mode
// every image contributes side_count^2 foreground nodes; in proposal mode,
// up to top_k foreground nodes plus one background node. Node order is
// image order x patch order, so identical input yields an identical graph.
PatchGraph build_graph(const std::vector<std::pair<std::string, Tensor>>& images,
                       std::size_t batch_class, const EncoderParams& params,
                       const Tensor& class_embeddings, PatchMode mode,
                       std::size_t side_count, const std::vector<ScoredBox>& boxes,
                       std::size_t top_k, std::size_t node_size);

} // namespace pgnn
