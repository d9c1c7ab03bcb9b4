#include "pgnn/attention.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>

namespace pgnn {

namespace {

Tensor init_matrix(std::size_t rows, std::size_t cols, std::mt19937_64& rng) {
    const double bound = std::sqrt(6.0 / static_cast<double>(rows));
    return Tensor::uniform({rows, cols}, -bound, bound, rng,
                           /*requires_grad=*/true);
}

// Embeds a [h, w] map into an [H, W] zero frame at (top, left) with
// gradient-carrying concatenation; zero pads are constants.
Tensor pad_into_frame(const Tensor& m, std::size_t top, std::size_t left,
                      std::size_t H, std::size_t W) {
    const std::size_t h = m.shape()[0];
    const std::size_t w = m.shape()[1];
    std::vector<Tensor> row_parts;
    if (left > 0) row_parts.push_back(Tensor::zeros({h, left}));
    row_parts.push_back(m);
    if (left + w < W) row_parts.push_back(Tensor::zeros({h, W - left - w}));
    Tensor band = row_parts.size() == 1 ? row_parts[0] : concat(row_parts, 1);

    std::vector<Tensor> col_parts;
    if (top > 0) col_parts.push_back(Tensor::zeros({top, W}));
    col_parts.push_back(band);
    if (top + h < H) col_parts.push_back(Tensor::zeros({H - top - h, W}));
    return col_parts.size() == 1 ? col_parts[0] : concat(col_parts, 0);
}

// Scales an assembled map to [0,1]: negative responses clip to zero, the
// positive peak divides the rest. A map with no positive response carries
// no signal and collapses to zeros.
Tensor peak_normalize(const Tensor& m) {
    Tensor mx = reduce_max(m);
    if (mx.item() < 1e-12) return Tensor::zeros(m.shape());
    return div(relu(m), mx);
}

struct PlacedMap {
    std::size_t top, left, height, width;
    Tensor map; // resized to the region
};

Tensor assemble_grid(const std::vector<PlacedMap>& placed, std::size_t H,
                     std::size_t W, const std::string& image_id) {
    std::vector<PlacedMap> cells = placed;
    std::sort(cells.begin(), cells.end(),
              [](const PlacedMap& a, const PlacedMap& b) {
                  return a.top != b.top ? a.top < b.top : a.left < b.left;
              });
    const auto bad_tiling = [&]() {
        return std::invalid_argument(
            "splice_attention: grid patches of image " + image_id +
            " do not tile a square crop");
    };

    std::vector<Tensor> bands;
    std::size_t row = 0, expected_top = cells[0].top;
    const std::size_t left0 = cells[0].left;
    std::size_t crop_width = 0;
    while (row < cells.size()) {
        const std::size_t top = cells[row].top;
        if (top != expected_top) throw bad_tiling();
        const std::size_t height = cells[row].height;
        std::vector<Tensor> row_maps;
        std::size_t next_left = left0;
        std::size_t end = row;
        while (end < cells.size() && cells[end].top == top) {
            if (cells[end].left != next_left || cells[end].height != height)
                throw bad_tiling();
            next_left += cells[end].width;
            row_maps.push_back(cells[end].map);
            ++end;
        }
        if (crop_width == 0)
            crop_width = next_left - left0;
        else if (next_left - left0 != crop_width)
            throw bad_tiling();
        bands.push_back(row_maps.size() == 1 ? row_maps[0]
                                             : concat(row_maps, 1));
        expected_top = top + height;
        row = end;
    }
    Tensor crop = bands.size() == 1 ? bands[0] : concat(bands, 0);
    return pad_into_frame(crop, cells[0].top, left0, H, W);
}

Tensor assemble_proposals(const std::vector<PlacedMap>& placed, std::size_t H,
                          std::size_t W) {
    Tensor fused;
    for (const auto& p : placed) {
        Tensor frame = pad_into_frame(p.map, p.top, p.left, H, W);
        fused = fused.defined() ? maximum(fused, frame) : frame;
    }
    return fused;
}

} // namespace

TransformerParams TransformerParams::init(std::size_t channels, std::size_t d_k,
                                          std::size_t d_v,
                                          std::mt19937_64& rng) {
    if (channels < 2)
        throw std::invalid_argument(
            "transformer: needs at least 2 channels to normalize over");
    if (d_k == 0 || d_v == 0)
        throw std::invalid_argument("transformer: d_k and d_v must be >= 1");
    TransformerParams p;
    p.w_q = init_matrix(channels, d_k, rng);
    p.w_k = init_matrix(channels, d_k, rng);
    p.w_v = init_matrix(channels, d_v, rng);
    // The output projection starts at zero so the mixing branch begins as a
    // no-op and node features pass through unchanged. Mixed-in tokens are
    // near-identical across nodes early on, and any nonzero projection smears
    // that shared component over every score map before the per-node signal
    // has formed. Gradients still reach w_o through the attention output, so
    // the branch grows only as the losses ask for it.
    p.w_o = Tensor::zeros({d_v, channels}, /*requires_grad=*/true);
    const double bound = std::sqrt(6.0 / static_cast<double>(channels * 9));
    p.conv_kernel = Tensor::uniform({channels, channels, 3, 3}, -bound, bound,
                                    rng, /*requires_grad=*/true);
    p.conv_bias = Tensor::zeros({channels}, /*requires_grad=*/true);
    p.ln_gain = Tensor::ones({channels}, /*requires_grad=*/true);
    p.ln_bias = Tensor::zeros({channels}, /*requires_grad=*/true);
    return p;
}

std::vector<Tensor> TransformerParams::parameters() const {
    std::vector<Tensor> out;
    for (const auto& [name, t] : named_parameters()) {
        (void)name;
        out.push_back(t);
    }
    return out;
}

std::vector<std::pair<std::string, Tensor>>
TransformerParams::named_parameters() const {
    return {
        {"transformer.query.weight", w_q},
        {"transformer.key.weight", w_k},
        {"transformer.value.weight", w_v},
        {"transformer.output.weight", w_o},
        {"transformer.conv.weight", conv_kernel},
        {"transformer.conv.bias", conv_bias},
        {"transformer.norm.gain", ln_gain},
        {"transformer.norm.bias", ln_bias},
    };
}

Tensor node_vectors(const std::vector<PatchNode>& nodes) {
    if (nodes.empty())
        throw std::invalid_argument("node_vectors: empty node list");
    const Shape& shape = nodes.front().feature.shape();
    std::vector<Tensor> rows;
    rows.reserve(nodes.size());
    for (const auto& n : nodes) {
        if (n.feature.shape() != shape)
            throw std::invalid_argument(
                "node_vectors: feature shape " + shape_str(n.feature.shape()) +
                " differs from " + shape_str(shape));
        rows.push_back(reshape(spatial_mean(n.feature), {1, shape[0]}));
    }
    return rows.size() == 1 ? rows[0] : concat(rows, 0);
}

AttentionResult attention(const Tensor& q, const Tensor& k, const Tensor& v,
                          std::size_t d_k) {
    if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2)
        throw std::invalid_argument("attention: Q, K, V must be matrices");
    if (q.shape()[1] != d_k || k.shape()[1] != d_k)
        throw std::invalid_argument(
            "attention: projection width " + std::to_string(d_k) +
            " does not match Q " + shape_str(q.shape()) + " / K " +
            shape_str(k.shape()));
    if (k.shape()[0] != v.shape()[0])
        throw std::invalid_argument("attention: K rows " +
                                    shape_str(k.shape()) + " vs V rows " +
                                    shape_str(v.shape()));
    Tensor scores =
        scale(matmul(q, transpose(k)), 1.0 / std::sqrt(static_cast<double>(d_k)));
    Tensor weights = softmax(scores, 1);
    return {matmul(weights, v), weights};
}

namespace {

AttentionResult graph_attention(const PatchGraph& graph,
                                const TransformerParams& params) {
    Tensor tokens = node_vectors(graph.nodes);
    if (tokens.shape()[1] != params.channels())
        throw std::invalid_argument(
            "transformer: token width " + shape_str(tokens.shape()) +
            " does not match projections for " +
            std::to_string(params.channels()) + " channels");
    return attention(matmul(tokens, params.w_q), matmul(tokens, params.w_k),
                     matmul(tokens, params.w_v), params.d_k());
}

} // namespace

Tensor edge_weights(const PatchGraph& graph, const TransformerParams& params) {
    return graph_attention(graph, params).weights;
}

TransformerResult transformer_block(const PatchGraph& graph,
                                    const TransformerParams& params) {
    AttentionResult attn = graph_attention(graph, params);
    Tensor mixed = matmul(attn.output, params.w_o); // [n, channels]

    TransformerResult out;
    out.edge_weights = attn.weights;
    out.features.reserve(graph.nodes.size());
    for (std::size_t j = 0; j < graph.nodes.size(); ++j) {
        Tensor token = reshape(slice(mixed, 0, j, 1), {params.channels()});
        Tensor h = channel_add(graph.nodes[j].feature, token);
        Tensor t = add(h, relu(conv2d(h, params.conv_kernel, params.conv_bias)));
        Tensor normed = layernorm(t, 0, params.ln_eps);
        out.features.push_back(
            channel_add(channel_mul(normed, params.ln_gain), params.ln_bias));
    }
    return out;
}

AttentionMap snapshot(const SplicedMap& m) {
    AttentionMap out;
    out.image_id = m.image_id;
    out.class_id = m.class_id;
    out.height = m.map.shape()[0];
    out.width = m.map.shape()[1];
    out.values = m.map.data();
    return out;
}

std::vector<SplicedMap> splice_attention(
    const PatchGraph& graph, const std::vector<Tensor>& node_score_maps,
    const std::vector<std::pair<std::string, Tensor>>& images) {
    if (node_score_maps.size() != graph.nodes.size())
        throw std::invalid_argument(
            "splice_attention: " + std::to_string(node_score_maps.size()) +
            " score maps for " + std::to_string(graph.nodes.size()) + " nodes");
    if (graph.batch_class == 0)
        throw std::invalid_argument(
            "splice_attention: graph has no foreground class");
    const std::size_t class_row = graph.batch_class - 1;
    for (const auto& m : node_score_maps)
        if (m.rank() != 3 || m.shape()[0] <= class_row)
            throw std::invalid_argument(
                "splice_attention: score map " + shape_str(m.shape()) +
                " has no row for class " + std::to_string(graph.batch_class));

    std::map<std::string, std::pair<std::size_t, std::size_t>> sizes;
    for (const auto& [id, image] : images)
        sizes[id] = {image.shape()[1], image.shape()[2]};

    std::vector<SplicedMap> out;
    for (const auto& id : graph.image_ids) {
        auto size_it = sizes.find(id);
        if (size_it == sizes.end())
            throw std::invalid_argument(
                "splice_attention: no image provided for id " + id);
        const auto [H, W] = size_it->second;

        std::vector<PlacedMap> placed;
        PatchMode mode = PatchMode::grid;
        for (std::size_t j = 0; j < graph.nodes.size(); ++j) {
            const PatchNode& n = graph.nodes[j];
            if (n.spec.image_id != id || n.class_index != graph.batch_class)
                continue; // background nodes carry no class map
            mode = n.spec.mode;
            const Shape& s = node_score_maps[j].shape();
            Tensor patch_map =
                reshape(slice(node_score_maps[j], 0, class_row, 1),
                        {s[1], s[2]});
            placed.push_back({n.spec.top, n.spec.left, n.spec.height,
                              n.spec.width,
                              bilinear_resize(patch_map, n.spec.height,
                                              n.spec.width)});
        }
        if (placed.empty())
            throw std::invalid_argument(
                "splice_attention: image " + id + " has no foreground nodes");

        Tensor full = mode == PatchMode::grid
                          ? assemble_grid(placed, H, W, id)
                          : assemble_proposals(placed, H, W);
        out.push_back({id, graph.batch_class, peak_normalize(full)});
    }
    return out;
}

PgmImage attention_to_pgm(const AttentionMap& map) {
    PgmImage img;
    img.width = map.width;
    img.height = map.height;
    img.pixels.reserve(map.values.size());
    for (double v : map.values) {
        if (!(v >= 0.0 && v <= 1.0))
            throw std::invalid_argument(
                "attention_to_pgm: value outside [0,1]");
        img.pixels.push_back(
            static_cast<std::uint8_t>(std::lround(255.0 * v)));
    }
    return img;
}

} // namespace pgnn
