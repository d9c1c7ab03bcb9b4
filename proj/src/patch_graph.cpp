#include "pgnn/patch_graph.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <sstream>
#include <stdexcept>

namespace pgnn {

namespace {

Tensor crop_pixels(const Tensor& image, std::size_t top, std::size_t left,
                   std::size_t height, std::size_t width) {
    const std::size_t H = image.shape()[1];
    const std::size_t W = image.shape()[2];
    std::vector<double> out(3 * height * width);
    for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t i = 0; i < height; ++i)
            for (std::size_t j = 0; j < width; ++j)
                out[(c * height + i) * width + j] =
                    image.data()[(c * H + top + i) * W + left + j];
    return Tensor::from_data({3, height, width}, std::move(out));
}

void check_image(const char* op, const Tensor& image) {
    if (image.rank() != 3 || image.shape()[0] != 3)
        throw std::invalid_argument(std::string(op) +
                                    ": expected [3, h, w] image, got " +
                                    shape_str(image.shape()));
}

} // namespace

std::vector<ScoredBox> read_boxes(const std::string& path) {
    std::ifstream in(path);
    if (!in)
        throw std::runtime_error("read_boxes: cannot open " + path);
    std::vector<ScoredBox> boxes;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty() || line[0] == '#') continue;
        std::istringstream fields(line);
        ScoredBox b;
        if (!(fields >> b.image_id >> b.top >> b.left >> b.height >> b.width >>
              b.score))
            throw std::runtime_error("read_boxes: malformed line " +
                                     std::to_string(line_no) + " in " + path);
        if (!std::isfinite(b.score))
            throw std::runtime_error("read_boxes: non-finite score on line " +
                                     std::to_string(line_no) + " in " + path);
        boxes.push_back(std::move(b));
    }
    return boxes;
}

std::vector<ScoredBox> boxes_for_image(const std::vector<ScoredBox>& boxes,
                                       const std::string& image_id) {
    std::vector<ScoredBox> out;
    for (const auto& b : boxes)
        if (b.image_id == image_id) out.push_back(b);
    return out;
}

std::vector<Patch> crop_grid(const Tensor& image, const std::string& image_id,
                             std::size_t side_count) {
    check_image("crop_grid", image);
    if (side_count == 0)
        throw std::invalid_argument("crop_grid: side count must be >= 1");
    const std::size_t H = image.shape()[1];
    const std::size_t W = image.shape()[2];
    if (std::min(H, W) < 8 * side_count)
        throw std::invalid_argument(
            "crop_grid: image " + shape_str(image.shape()) +
            " too small for " + std::to_string(side_count) + "x" +
            std::to_string(side_count) + " patches of at least 8px");
    const std::size_t side = std::min(H, W) / side_count;
    const std::size_t crop = side * side_count;
    const std::size_t top0 = (H - crop) / 2;
    const std::size_t left0 = (W - crop) / 2;

    std::vector<Patch> patches;
    patches.reserve(side_count * side_count);
    for (std::size_t r = 0; r < side_count; ++r)
        for (std::size_t c = 0; c < side_count; ++c) {
            Patch p;
            p.spec.mode = PatchMode::grid;
            p.spec.image_id = image_id;
            p.spec.top = top0 + r * side;
            p.spec.left = left0 + c * side;
            p.spec.height = side;
            p.spec.width = side;
            p.pixels = crop_pixels(image, p.spec.top, p.spec.left, side, side);
            patches.push_back(std::move(p));
        }
    return patches;
}

ProposalCrops crop_proposals(const Tensor& image, const std::string& image_id,
                             const std::vector<ScoredBox>& boxes,
                             std::size_t top_k, std::size_t node_size) {
    check_image("crop_proposals", image);
    if (top_k == 0)
        throw std::invalid_argument("crop_proposals: top_k must be >= 1");
    if (node_size < 8)
        throw std::invalid_argument("crop_proposals: node_size must be >= 8");
    if (boxes.empty())
        throw std::runtime_error("crop_proposals: no boxes for image " +
                                 image_id);
    const std::size_t H = image.shape()[1];
    const std::size_t W = image.shape()[2];
    for (const auto& b : boxes) {
        if (b.height == 0 || b.width == 0 || b.top + b.height > H ||
            b.left + b.width > W)
            throw std::invalid_argument(
                "crop_proposals: box [" + std::to_string(b.top) + "," +
                std::to_string(b.left) + "," + std::to_string(b.height) + "," +
                std::to_string(b.width) + "] outside " +
                shape_str(image.shape()) + " image " + image_id);
    }

    // Highest score first; stable sort keeps file order on equal scores.
    std::vector<ScoredBox> ranked = boxes;
    std::stable_sort(ranked.begin(), ranked.end(),
                     [](const ScoredBox& a, const ScoredBox& b) {
                         return a.score > b.score;
                     });
    if (ranked.size() < top_k)
        std::cerr << "crop_proposals: image " << image_id << " has only "
                  << ranked.size() << " boxes, wanted top " << top_k << "\n";
    const std::size_t take = std::min<std::size_t>(top_k, ranked.size());

    ProposalCrops out;
    for (std::size_t i = 0; i < take; ++i) {
        const auto& b = ranked[i];
        Patch p;
        p.spec.mode = PatchMode::proposals;
        p.spec.image_id = image_id;
        p.spec.top = b.top;
        p.spec.left = b.left;
        p.spec.height = b.height;
        p.spec.width = b.width;
        p.pixels = bilinear_resize(crop_pixels(image, b.top, b.left, b.height,
                                               b.width),
                                   node_size, node_size);
        out.foreground.push_back(std::move(p));
    }

    // Undetected area: the image with every selected box blanked out.
    std::vector<double> masked = image.data();
    for (std::size_t i = 0; i < take; ++i) {
        const auto& b = ranked[i];
        for (std::size_t c = 0; c < 3; ++c)
            for (std::size_t r = b.top; r < b.top + b.height; ++r)
                for (std::size_t col = b.left; col < b.left + b.width; ++col)
                    masked[(c * H + r) * W + col] = 0.0;
    }
    out.background.spec.mode = PatchMode::proposals;
    out.background.spec.image_id = image_id;
    out.background.spec.top = 0;
    out.background.spec.left = 0;
    out.background.spec.height = H;
    out.background.spec.width = W;
    out.background.pixels = bilinear_resize(
        Tensor::from_data({3, H, W}, std::move(masked)), node_size, node_size);
    return out;
}

std::size_t assign_class(bool is_background, std::size_t batch_class) {
    if (!is_background && batch_class == 0)
        throw std::invalid_argument(
            "assign_class: foreground nodes need a class index >= 1");
    return is_background ? 0 : batch_class;
}

std::vector<PatchNode> build_nodes(const std::vector<Patch>& patches,
                                   const std::vector<std::size_t>& class_indices,
                                   const EncoderParams& params,
                                   const Tensor& class_embeddings) {
    if (patches.size() != class_indices.size())
        throw std::invalid_argument(
            "build_nodes: " + std::to_string(patches.size()) + " patches vs " +
            std::to_string(class_indices.size()) + " class indices");
    if (class_embeddings.rank() != 2 ||
        class_embeddings.shape()[1] != params.out_channels())
        throw std::invalid_argument(
            "build_nodes: class embedding table " +
            shape_str(class_embeddings.shape()) + " does not match " +
            std::to_string(params.out_channels()) + " encoder channels");

    const std::size_t channels = params.out_channels();
    std::vector<PatchNode> nodes;
    nodes.reserve(patches.size());
    for (std::size_t i = 0; i < patches.size(); ++i) {
        if (class_indices[i] >= class_embeddings.shape()[0])
            throw std::invalid_argument(
                "build_nodes: class index " + std::to_string(class_indices[i]) +
                " outside embedding table " +
                shape_str(class_embeddings.shape()));
        PatchNode n;
        n.node_id = i;
        n.spec = patches[i].spec;
        n.class_index = class_indices[i];
        Tensor row = reshape(
            slice(class_embeddings, 0, class_indices[i], 1), {channels});
        n.feature = channel_add(embed(params, patches[i].pixels), row);
        if (!nodes.empty() && n.feature.shape() != nodes.front().feature.shape())
            throw std::invalid_argument(
                "build_nodes: feature shape " + shape_str(n.feature.shape()) +
                " differs from " + shape_str(nodes.front().feature.shape()));
        nodes.push_back(std::move(n));
    }
    return nodes;
}

PatchGraph build_graph(const std::vector<std::pair<std::string, Tensor>>& images,
                       std::size_t batch_class, const EncoderParams& params,
                       const Tensor& class_embeddings, PatchMode mode,
                       std::size_t side_count, const std::vector<ScoredBox>& boxes,
                       std::size_t top_k, std::size_t node_size) {
    if (images.empty())
        throw std::invalid_argument("build_graph: empty image batch");

    std::vector<Patch> patches;
    std::vector<std::size_t> class_indices;
    PatchGraph graph;
    graph.batch_class = batch_class;
    for (const auto& [id, image] : images) {
        graph.image_ids.push_back(id);
        if (mode == PatchMode::grid) {
            for (auto& p : crop_grid(image, id, side_count)) {
                patches.push_back(std::move(p));
                class_indices.push_back(assign_class(false, batch_class));
            }
        } else {
            auto crops = crop_proposals(image, id, boxes_for_image(boxes, id),
                                        top_k, node_size);
            for (auto& p : crops.foreground) {
                patches.push_back(std::move(p));
                class_indices.push_back(assign_class(false, batch_class));
            }
            patches.push_back(std::move(crops.background));
            class_indices.push_back(assign_class(true, batch_class));
        }
    }
    graph.nodes = build_nodes(patches, class_indices, params, class_embeddings);
    return graph;
}

} // namespace pgnn
