#include "pgnn/encoder.hpp"

#include <cmath>
#include <stdexcept>

namespace pgnn {

namespace {

Tensor init_conv(std::size_t out_c, std::size_t in_c, std::size_t k,
                 std::mt19937_64& rng) {
    const double bound = std::sqrt(6.0 / static_cast<double>(in_c * k * k));
    return Tensor::uniform({out_c, in_c, k, k}, -bound, bound, rng,
                           /*requires_grad=*/true);
}

} // namespace

EncoderParams EncoderParams::init(const EncoderConfig& config,
                                  std::mt19937_64& rng) {
    if (config.conv_channels.empty())
        throw std::invalid_argument("encoder: conv_channels must be non-empty");
    if (config.kernel_size % 2 == 0 || config.kernel_size == 0)
        throw std::invalid_argument("encoder: kernel_size must be odd");
    if (config.pool_window == 0)
        throw std::invalid_argument("encoder: pool_window must be >= 1");
    if (config.num_classes == 0)
        throw std::invalid_argument("encoder: num_classes must be >= 1");

    EncoderParams p;
    p.config = config;
    std::size_t in_c = 3;
    for (std::size_t out_c : config.conv_channels) {
        p.conv_kernels.push_back(init_conv(out_c, in_c, config.kernel_size, rng));
        p.conv_biases.push_back(Tensor::zeros({out_c}, /*requires_grad=*/true));
        in_c = out_c;
    }
    p.classifier_weight = init_conv(config.num_classes, in_c, 1, rng);
    return p;
}

std::vector<Tensor> EncoderParams::parameters() const {
    std::vector<Tensor> out;
    for (const auto& [name, t] : named_parameters()) {
        (void)name;
        out.push_back(t);
    }
    return out;
}

std::vector<std::pair<std::string, Tensor>>
EncoderParams::named_parameters() const {
    std::vector<std::pair<std::string, Tensor>> out;
    for (std::size_t i = 0; i < conv_kernels.size(); ++i) {
        const std::string layer = "encoder.conv" + std::to_string(i + 1);
        out.emplace_back(layer + ".weight", conv_kernels[i]);
        out.emplace_back(layer + ".bias", conv_biases[i]);
    }
    out.emplace_back("encoder.classifier.weight", classifier_weight);
    return out;
}

Tensor embed(const EncoderParams& params, const Tensor& image) {
    if (image.rank() != 3 || image.shape()[0] != 3)
        throw std::invalid_argument("embed: expected [3, h, w] input, got " +
                                    shape_str(image.shape()));
    if (image.shape()[1] < 8 || image.shape()[2] < 8)
        throw std::invalid_argument("embed: input " + shape_str(image.shape()) +
                                    " is smaller than the 8x8 minimum");
    Tensor x = image;
    for (std::size_t i = 0; i < params.conv_kernels.size(); ++i) {
        x = relu(conv2d(x, params.conv_kernels[i], params.conv_biases[i]));
        if (i == 0 && params.config.pool_window > 1)
            x = avgpool2d(x, params.config.pool_window);
    }
    return x;
}

Tensor cam(const EncoderParams& params, const Tensor& features) {
    if (features.rank() != 3 ||
        features.shape()[0] != params.out_channels())
        throw std::invalid_argument(
            "cam: feature shape " + shape_str(features.shape()) +
            " does not match classifier input channels " +
            std::to_string(params.out_channels()));
    return conv2d(features, params.classifier_weight);
}

Tensor classify(const EncoderParams& params, const Tensor& features) {
    return spatial_mean(cam(params, features));
}

} // namespace pgnn
