#include "pgnn/losses.hpp"

#include <cmath>
#include <stdexcept>

namespace pgnn {

namespace {

constexpr double kLogClamp = 1e-12;

void check_batch_alignment(const PatchGraph& graph,
                           const std::vector<Tensor>& features) {
    if (features.size() != graph.nodes.size())
        throw std::invalid_argument(
            "loss: " + std::to_string(features.size()) + " features for " +
            std::to_string(graph.nodes.size()) + " nodes");
    if (graph.batch_class == 0)
        throw std::invalid_argument("loss: graph has no foreground class");
}

// Indices of the nodes belonging to one image, in node order.
std::vector<std::size_t> image_node_indices(const PatchGraph& graph,
                                            const std::string& image_id) {
    std::vector<std::size_t> out;
    for (std::size_t j = 0; j < graph.nodes.size(); ++j)
        if (graph.nodes[j].spec.image_id == image_id) out.push_back(j);
    if (out.empty())
        throw std::invalid_argument("loss: no nodes for image " + image_id);
    return out;
}

// The sub-rectangle of a stored map covering one node's region, as a
// constant tensor.
Tensor region_of(const AttentionMap& map, const PatchSpec& spec) {
    if (spec.top + spec.height > map.height ||
        spec.left + spec.width > map.width)
        throw std::invalid_argument(
            "loss: node region outside the " + std::to_string(map.height) +
            "x" + std::to_string(map.width) + " attention map");
    std::vector<double> vals(spec.height * spec.width);
    for (std::size_t i = 0; i < spec.height; ++i)
        for (std::size_t j = 0; j < spec.width; ++j)
            vals[i * spec.width + j] =
                map.values[(spec.top + i) * map.width + spec.left + j];
    return Tensor::from_data({spec.height, spec.width}, std::move(vals));
}

// The same sub-rectangle from a live map, kept on the tape.
Tensor region_of(const Tensor& map, const PatchSpec& spec) {
    if (map.rank() != 2 || spec.top + spec.height > map.shape()[0] ||
        spec.left + spec.width > map.shape()[1])
        throw std::invalid_argument("loss: node region outside map " +
                                    shape_str(map.shape()));
    return slice(slice(map, 0, spec.top, spec.height), 1, spec.left,
                 spec.width);
}

// Mean class logit over an image's nodes, each masked by its region of the
// attention map (or its complement). Passing an undefined mask source keeps
// the features unmasked.
template <typename RegionFn>
Tensor image_class_logit(const PatchGraph& graph,
                         const std::vector<Tensor>& features,
                         const std::string& image_id,
                         const EncoderParams& params, RegionFn&& region_fn) {
    const std::vector<std::size_t> idx = image_node_indices(graph, image_id);
    Tensor acc;
    for (std::size_t j : idx) {
        Tensor masked = region_fn(graph.nodes[j].spec, features[j]);
        Tensor logits = classify(params, masked);
        Tensor entry = slice(logits, 0, graph.batch_class - 1, 1);
        acc = acc.defined() ? add(acc, entry) : entry;
    }
    return scale(acc, 1.0 / static_cast<double>(idx.size()));
}

Tensor clamped_log_sigmoid(const Tensor& logit) {
    Tensor p = sigmoid(logit);
    return log(maximum(p, Tensor::full(p.shape(), kLogClamp)));
}

} // namespace

AttentionMap threshold_map(const AttentionMap& map, double threshold) {
    if (!(threshold > 0.0 && threshold < 1.0))
        throw std::invalid_argument(
            "threshold_map: threshold must lie in (0,1), got " +
            std::to_string(threshold));
    AttentionMap out = map;
    for (double& v : out.values)
        if (!(v > threshold)) v = 0.0;
    return out;
}

Tensor mask_apply(const Tensor& mask, const Tensor& features) {
    if (features.rank() != 3)
        throw std::invalid_argument("mask_apply: features must be [c, h, w]");
    return plane_mul(features, bilinear_resize(mask, features.shape()[1],
                                               features.shape()[2]));
}

Tensor mask_apply_complement(const Tensor& mask, const Tensor& features) {
    if (features.rank() != 3)
        throw std::invalid_argument(
            "mask_apply_complement: features must be [c, h, w]");
    return plane_mul_complement(features,
                                bilinear_resize(mask, features.shape()[1],
                                                features.shape()[2]));
}

Tensor erase_score(const AttentionMap& previous_map, const PatchGraph& graph,
                   const std::vector<Tensor>& features,
                   const std::string& image_id, const EncoderParams& params) {
    check_batch_alignment(graph, features);
    Tensor logit = image_class_logit(
        graph, features, image_id, params,
        [&](const PatchSpec& spec, const Tensor& f) {
            return mask_apply_complement(region_of(previous_map, spec), f);
        });
    return clamped_log_sigmoid(logit);
}

Tensor preserve_score(const SplicedMap& current_map, const PatchGraph& graph,
                      const std::vector<Tensor>& features,
                      const std::string& image_id,
                      const EncoderParams& params) {
    check_batch_alignment(graph, features);
    Tensor logit = image_class_logit(
        graph, features, image_id, params,
        [&](const PatchSpec& spec, const Tensor& f) {
            return mask_apply(region_of(current_map.map, spec), f);
        });
    return clamped_log_sigmoid(logit);
}

Tensor tv_loss(const Tensor& map) {
    if (map.rank() != 2)
        throw std::invalid_argument("tv_loss: expected [h, w] map, got " +
                                    shape_str(map.shape()));
    const std::size_t h = map.shape()[0];
    const std::size_t w = map.shape()[1];
    Tensor squares;
    if (w >= 2) {
        Tensor dh = sub(slice(map, 1, 0, w - 1), slice(map, 1, 1, w - 1));
        squares = sum(mul(dh, dh));
    }
    if (h >= 2) {
        Tensor dv = sub(slice(map, 0, 0, h - 1), slice(map, 0, 1, h - 1));
        Tensor s = sum(mul(dv, dv));
        squares = squares.defined() ? add(squares, s) : s;
    }
    if (!squares.defined()) return Tensor::scalar(0.0); // no neighbor pairs
    return sqrt(squares);
}

Tensor classification_loss(const Tensor& logits,
                           const std::vector<std::uint8_t>& labels) {
    if (logits.rank() != 1 || logits.shape()[0] != labels.size())
        throw std::invalid_argument(
            "classification_loss: logits " + shape_str(logits.shape()) +
            " vs " + std::to_string(labels.size()) + " labels");
    if (labels.empty())
        throw std::invalid_argument("classification_loss: empty label vector");
    std::vector<double> y(labels.size());
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] > 1)
            throw std::invalid_argument(
                "classification_loss: labels must be 0 or 1, got " +
                std::to_string(static_cast<int>(labels[i])));
        y[i] = static_cast<double>(labels[i]);
    }
    const std::size_t k = labels.size();
    Tensor target = Tensor::from_data({k}, std::move(y));
    Tensor ones = Tensor::ones({k});
    Tensor clamp = Tensor::full({k}, kLogClamp);
    Tensor p = sigmoid(logits);
    Tensor hit = mul(target, log(maximum(p, clamp)));
    Tensor miss = mul(sub(ones, target), log(maximum(sub(ones, p), clamp)));
    return scale(sum(add(hit, miss)), -1.0 / static_cast<double>(k));
}

LossBreakdown soft_complementary_loss(
    const std::vector<AttentionMap>& previous_maps,
    const std::vector<SplicedMap>& current_maps, const PatchGraph& graph,
    const std::vector<Tensor>& features,
    const std::vector<std::vector<std::uint8_t>>& labels,
    const EncoderParams& params, const LossWeights& weights) {
    check_batch_alignment(graph, features);
    const std::size_t batch = graph.image_ids.size();
    if (previous_maps.size() != batch || current_maps.size() != batch ||
        labels.size() != batch)
        throw std::invalid_argument(
            "loss: maps and labels must match the batch of " +
            std::to_string(batch) + " images");
    for (double w : {weights.erase, weights.preserve, weights.smoothness,
                     weights.classification})
        if (!std::isfinite(w) || w < 0.0)
            throw std::invalid_argument(
                "loss: weights must be finite and non-negative");
    for (std::size_t i = 0; i < batch; ++i) {
        if (previous_maps[i].image_id != graph.image_ids[i] ||
            current_maps[i].image_id != graph.image_ids[i])
            throw std::invalid_argument(
                "loss: maps out of order for image " + graph.image_ids[i]);
    }

    Tensor erase_acc, preserve_acc, smooth_acc, cls_acc;
    const auto fold = [](Tensor& acc, const Tensor& term) {
        acc = acc.defined() ? add(acc, term) : term;
    };
    for (std::size_t i = 0; i < batch; ++i) {
        const std::string& id = graph.image_ids[i];
        fold(erase_acc,
             erase_score(previous_maps[i], graph, features, id, params));
        fold(preserve_acc,
             preserve_score(current_maps[i], graph, features, id, params));
        fold(smooth_acc, tv_loss(current_maps[i].map));

        Tensor logit_acc;
        const auto idx = image_node_indices(graph, id);
        for (std::size_t j : idx) fold(logit_acc, classify(params, features[j]));
        fold(cls_acc,
             classification_loss(
                 scale(logit_acc, 1.0 / static_cast<double>(idx.size())),
                 labels[i]));
    }
    const double inv = 1.0 / static_cast<double>(batch);
    Tensor l_erase = scale(erase_acc, inv);
    Tensor l_preserve = scale(preserve_acc, inv);
    Tensor l_smooth = scale(smooth_acc, inv);
    Tensor l_cls = scale(cls_acc, inv);

    LossBreakdown out;
    out.total_tensor =
        add(add(sub(scale(l_erase, weights.erase),
                    scale(l_preserve, weights.preserve)),
                scale(l_smooth, weights.smoothness)),
            scale(l_cls, weights.classification));
    out.erase = l_erase.item();
    out.preserve = l_preserve.item();
    out.smoothness = l_smooth.item();
    out.classification = l_cls.item();
    out.total = out.total_tensor.item();
    return out;
}

} // namespace pgnn
