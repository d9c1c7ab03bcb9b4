#include "pgnn/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <utility>

#include "pgnn/pgm.hpp"

namespace pgnn {

namespace {

namespace fs = std::filesystem;

std::string real_str(double v) {
    std::ostringstream out;
    out << std::setprecision(std::numeric_limits<double>::max_digits10) << v;
    return out.str();
}

std::string epoch_checkpoint_name(std::size_t epoch) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "epoch_%03zu.ckpt", epoch);
    return buf;
}

EncoderConfig encoder_config_for(const ExperimentConfig& config) {
    EncoderConfig ec;
    ec.num_classes = config.num_classes;
    return ec;
}

PatchMode patch_mode_of(const ExperimentConfig& config) {
    return config.patch_mode == "grid" ? PatchMode::grid : PatchMode::proposals;
}

void check_dataset(const ExperimentConfig& config,
                   const std::vector<SyntheticScene>& dataset, const char* who) {
    if (dataset.empty())
        throw std::invalid_argument(std::string(who) + ": empty dataset");
    for (const SyntheticScene& scene : dataset)
        if (scene.labels.size() != config.num_classes)
            throw std::invalid_argument(std::string(who) + ": scene " + scene.id +
                                        " carries " + std::to_string(scene.labels.size()) +
                                        " label flags, config says " +
                                        std::to_string(config.num_classes));
}

// Rescale to [0,1] the same way spliced maps are normalized: negatives clip
// to zero, the positive peak divides the rest. No positive response means an
// empty map.
AttentionMap normalized_map(const std::string& image_id, std::size_t class_id,
                            const Tensor& map) {
    const auto& v = map.data();
    AttentionMap out;
    out.image_id = image_id;
    out.class_id = class_id;
    out.height = map.shape()[0];
    out.width = map.shape()[1];
    out.values.assign(v.size(), 0.0);
    const double mx = *std::max_element(v.begin(), v.end());
    if (mx >= 1e-12)
        for (std::size_t i = 0; i < v.size(); ++i)
            out.values[i] = std::max(v[i], 0.0) / mx;
    return out;
}

void write_attention_pgms(const std::string& dir, const std::vector<AttentionMap>& maps) {
    fs::create_directories(dir);
    for (const AttentionMap& m : maps)
        write_pgm((fs::path(dir) / (m.image_id + "_class" + std::to_string(m.class_id) +
                                    ".pgm"))
                      .string(),
                  attention_to_pgm(m));
}

void write_label_pgms(const std::string& dir,
                      const std::map<std::string, LabelMap>& labels) {
    fs::create_directories(dir);
    for (const auto& [id, map] : labels)
        write_pgm((fs::path(dir) / (id + ".pgm")).string(), label_to_pgm(map));
}

std::uint64_t background_count(const std::map<std::string, LabelMap>& labels) {
    std::uint64_t count = 0;
    for (const auto& [id, map] : labels)
        for (std::uint8_t v : map.values)
            if (v == 0) ++count;
    return count;
}

void sgd_step(const std::vector<Tensor>& params, double lr) {
    for (Tensor p : params)
        if (p.has_grad()) p.gradient_step(lr);
}

[[noreturn]] void report_divergence(const char* who, std::size_t epoch, std::size_t step,
                                    double value) {
    throw std::runtime_error(std::string(who) + ": non-finite loss " + real_str(value) +
                             " at epoch " + std::to_string(epoch) + ", step " +
                             std::to_string(step));
}

} // namespace

void write_loss_csv(const std::string& path, const std::vector<StepLoss>& history) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("write_loss_csv: cannot write '" + path + "'");
    out << "epoch,step,l_D,l_P,l_TV,l_c,total\n";
    for (const StepLoss& s : history)
        out << s.epoch << ',' << s.step << ',' << real_str(s.loss.erase) << ','
            << real_str(s.loss.preserve) << ',' << real_str(s.loss.smoothness) << ','
            << real_str(s.loss.classification) << ',' << real_str(s.loss.total) << "\n";
    if (!out) throw std::runtime_error("write_loss_csv: failed writing '" + path + "'");
}

PgnnModel PgnnModel::init(const ExperimentConfig& config, std::mt19937_64& rng) {
    PgnnModel model;
    model.encoder = EncoderParams::init(encoder_config_for(config), rng);
    model.transformer = TransformerParams::init(model.encoder.out_channels(),
                                                config.attention_dim, config.attention_dim,
                                                rng);
    // Embeddings start at zero so early training reads patch content rather
    // than the batch tag. A random embedding is a class marker stamped on
    // every node of the batch, and the classifier latches onto it before it
    // learns anything spatial.
    model.class_embeddings = Tensor::zeros(
        {config.num_classes + 1, model.encoder.out_channels()}, true);
    return model;
}

std::vector<Tensor> PgnnModel::parameters() const {
    std::vector<Tensor> params = encoder.parameters();
    for (const Tensor& t : transformer.parameters()) params.push_back(t);
    params.push_back(class_embeddings);
    return params;
}

Checkpoint PgnnModel::to_checkpoint() const {
    Checkpoint ckpt;
    for (const auto& [name, t] : encoder.named_parameters()) ckpt.add(name, t);
    for (const auto& [name, t] : transformer.named_parameters()) ckpt.add(name, t);
    ckpt.add("class_embeddings", class_embeddings);
    return ckpt;
}

PgnnModel PgnnModel::from_checkpoint(const Checkpoint& ckpt,
                                     const ExperimentConfig& config) {
    std::mt19937_64 scratch(0);
    PgnnModel model = init(config, scratch);
    auto restore = [&](const std::string& name, Tensor target) {
        const Tensor stored = ckpt.get(name);
        if (stored.shape() != target.shape())
            throw std::runtime_error("from_checkpoint: shape of '" + name +
                                     "' does not match the configured model");
        target.mutable_data() = stored.data();
    };
    for (const auto& [name, t] : model.encoder.named_parameters()) restore(name, t);
    for (const auto& [name, t] : model.transformer.named_parameters()) restore(name, t);
    restore("class_embeddings", model.class_embeddings);
    return model;
}

std::vector<AttentionMap> pgnn_attention_maps(const PgnnModel& model,
                                              const ExperimentConfig& config,
                                              const std::vector<SyntheticScene>& dataset) {
    check_dataset(config, dataset, "pgnn_attention_maps");
    const PatchMode mode = patch_mode_of(config);
    std::vector<AttentionMap> maps;
    for (const SyntheticScene& scene : dataset) {
        for (std::size_t c = 1; c <= config.num_classes; ++c) {
            if (!scene.has_class(c)) continue;
            const std::vector<std::pair<std::string, Tensor>> images{{scene.id, scene.image}};
            PatchGraph graph =
                build_graph(images, c, model.encoder, model.class_embeddings, mode,
                            config.grid_side, scene.boxes, config.proposal_top_k,
                            config.proposal_node_size);
            TransformerResult tr = transformer_block(graph, model.transformer);
            std::vector<Tensor> score_maps;
            score_maps.reserve(tr.features.size());
            for (const Tensor& f : tr.features) score_maps.push_back(cam(model.encoder, f));
            std::vector<SplicedMap> spliced = splice_attention(graph, score_maps, images);
            maps.push_back(snapshot(spliced.at(0)));
        }
    }
    return maps;
}

std::vector<AttentionMap> cam_attention_maps(const EncoderParams& encoder,
                                             const std::vector<SyntheticScene>& dataset) {
    std::vector<AttentionMap> maps;
    for (const SyntheticScene& scene : dataset) {
        const Tensor class_maps = cam(encoder, embed(encoder, scene.image));
        const std::size_t fh = class_maps.shape()[1];
        const std::size_t fw = class_maps.shape()[2];
        for (std::size_t c = 1; c <= scene.labels.size(); ++c) {
            if (!scene.has_class(c)) continue;
            const Tensor plane = reshape(slice(class_maps, 0, c - 1, 1), {fh, fw});
            const Tensor resized =
                bilinear_resize(plane, scene.image.shape()[1], scene.image.shape()[2]);
            maps.push_back(normalized_map(scene.id, c, resized));
        }
    }
    return maps;
}

std::map<std::string, LabelMap> labels_from_maps(const std::vector<AttentionMap>& maps,
                                                 double background_threshold) {
    std::map<std::string, std::vector<AttentionMap>> grouped;
    for (const AttentionMap& m : maps) grouped[m.image_id].push_back(m);
    std::map<std::string, LabelMap> labels;
    for (const auto& [id, group] : grouped)
        labels.emplace(id, maps_to_labels(group, background_threshold));
    return labels;
}

PgnnTrainResult train_pgnn(const ExperimentConfig& config,
                           const std::vector<SyntheticScene>& dataset,
                           const std::string& run_dir) {
    config.validate();
    check_dataset(config, dataset, "train_pgnn");
    const bool persist = !run_dir.empty();
    if (persist) {
        fs::create_directories(fs::path(run_dir) / "checkpoints");
        save_config_file((fs::path(run_dir) / "config.snapshot").string(), config);
    }

    std::mt19937_64 rng(config.seed);
    PgnnTrainResult result;
    result.model = PgnnModel::init(config, rng);
    const PatchMode mode = patch_mode_of(config);
    const LossWeights full_weights = config.loss_weights();
    // During warm-up only the classification term trains; the adversarial
    // terms would otherwise shred an untrained classifier (the erase term
    // outweighs the class-averaged BCE roughly num_classes to one). The
    // batch-global channels stay frozen for the same stretch: the class
    // embeddings at zero and the attention output projection at zero. Both
    // are shortcuts for a classification loss over single-class batches (a
    // batch tag stamped on every node, through the embedding or through the
    // pooled batch content), and once the classifier reads the tag the score
    // maps carry no spatial contrast. With the tag channels shut the warm-up
    // classifier can only read patch content, which is the map structure the
    // erase term needs as a starting point.
    LossWeights warmup_weights = full_weights;
    warmup_weights.erase = 0.0;
    warmup_weights.preserve = 0.0;
    warmup_weights.smoothness = 0.0;
    std::vector<Tensor> warmup_params = result.model.encoder.parameters();
    for (const auto& [name, t] : result.model.transformer.named_parameters())
        if (name != "transformer.output.weight") warmup_params.push_back(t);

    // Thresholded maps from the previous epoch, and raw maps from the
    // current one, keyed by (scene id, class).
    std::map<std::pair<std::string, std::size_t>, AttentionMap> previous;
    std::map<std::pair<std::string, std::size_t>, AttentionMap> latest;
    std::size_t step_count = 0;

    for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
        const LossWeights& weights =
            epoch <= config.warmup_epochs ? warmup_weights : full_weights;
        for (std::size_t c = 1; c <= config.num_classes; ++c) {
            std::vector<std::size_t> pool = images_with_class(dataset, c);
            if (pool.empty())
                throw std::runtime_error("train_pgnn: no scene contains class " +
                                         std::to_string(c));
            std::shuffle(pool.begin(), pool.end(), rng);

            for (std::size_t start = 0; start < pool.size(); start += config.batch_size) {
                std::vector<std::pair<std::string, Tensor>> images;
                std::vector<ScoredBox> boxes;
                std::vector<std::vector<std::uint8_t>> batch_labels;
                std::vector<AttentionMap> prev_maps;
                for (std::size_t j = 0; j < config.batch_size; ++j) {
                    const SyntheticScene& scene = dataset[pool[(start + j) % pool.size()]];
                    images.emplace_back(scene.id, scene.image);
                    boxes.insert(boxes.end(), scene.boxes.begin(), scene.boxes.end());
                    batch_labels.push_back(scene.labels);
                    const auto found = previous.find({scene.id, c});
                    if (found != previous.end()) {
                        prev_maps.push_back(found->second);
                    } else {
                        AttentionMap zero;
                        zero.image_id = scene.id;
                        zero.class_id = c;
                        zero.height = scene.image.shape()[1];
                        zero.width = scene.image.shape()[2];
                        zero.values.assign(zero.height * zero.width, 0.0);
                        prev_maps.push_back(std::move(zero));
                    }
                }

                PatchGraph graph = build_graph(images, c, result.model.encoder,
                                               result.model.class_embeddings, mode,
                                               config.grid_side, boxes,
                                               config.proposal_top_k,
                                               config.proposal_node_size);
                TransformerResult tr = transformer_block(graph, result.model.transformer);
                std::vector<Tensor> score_maps;
                score_maps.reserve(tr.features.size());
                for (const Tensor& f : tr.features)
                    score_maps.push_back(cam(result.model.encoder, f));
                std::vector<SplicedMap> spliced =
                    splice_attention(graph, score_maps, images);

                LossBreakdown lb = soft_complementary_loss(
                    prev_maps, spliced, graph, tr.features, batch_labels,
                    result.model.encoder, weights);
                ++step_count;
                if (!std::isfinite(lb.total))
                    report_divergence("train_pgnn", epoch, step_count, lb.total);
                StepLoss entry{epoch, step_count, lb};
                // The archived copy must not pin this step's graph in memory.
                entry.loss.total_tensor = Tensor();
                result.history.push_back(std::move(entry));

                backward(lb.total_tensor);
                sgd_step(epoch <= config.warmup_epochs ? warmup_params
                                                       : result.model.parameters(),
                         config.learning_rate);

                for (const SplicedMap& m : spliced)
                    latest[{m.image_id, c}] = snapshot(m);
            }
        }
        // Maps produced while the erase term was disabled never become erase
        // references: the first full-loss epoch starts from zero maps, the
        // same convention as epoch one. Warm-up maps are uniformly lit (the
        // classifier has no reason to dim anything yet) and erasing against
        // them would leave nothing to learn from.
        if (epoch > config.warmup_epochs)
            for (const auto& [key, map] : latest)
                previous[key] = threshold_map(map, config.attention_threshold);
        if (persist)
            result.model.to_checkpoint().save(
                (fs::path(run_dir) / "checkpoints" / epoch_checkpoint_name(epoch)).string());
    }

    result.attention_maps = pgnn_attention_maps(result.model, config, dataset);
    result.pseudo_labels =
        labels_from_maps(result.attention_maps, config.background_threshold);

    if (persist) {
        write_loss_csv((fs::path(run_dir) / "losses.csv").string(), result.history);
        write_attention_pgms((fs::path(run_dir) / "attention").string(),
                             result.attention_maps);
        write_label_pgms((fs::path(run_dir) / "pseudo_labels").string(),
                         result.pseudo_labels);
    }
    return result;
}

CamTrainResult train_cam_baseline(const ExperimentConfig& config,
                                  const std::vector<SyntheticScene>& dataset,
                                  const std::string& run_dir) {
    config.validate();
    check_dataset(config, dataset, "train_cam_baseline");
    const bool persist = !run_dir.empty();
    if (persist) {
        fs::create_directories(fs::path(run_dir) / "checkpoints");
        save_config_file((fs::path(run_dir) / "config.snapshot").string(), config);
    }

    std::mt19937_64 rng(config.seed);
    CamTrainResult result;
    result.encoder = EncoderParams::init(encoder_config_for(config), rng);

    std::vector<std::size_t> order(dataset.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    std::size_t step_count = 0;
    for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
            Tensor batch_loss;
            for (std::size_t j = 0; j < config.batch_size; ++j) {
                const SyntheticScene& scene = dataset[order[(start + j) % order.size()]];
                const Tensor logits =
                    classify(result.encoder, embed(result.encoder, scene.image));
                const Tensor item = classification_loss(logits, scene.labels);
                batch_loss = batch_loss.defined() ? add(batch_loss, item) : item;
            }
            batch_loss = scale(batch_loss, 1.0 / static_cast<double>(config.batch_size));

            ++step_count;
            const double value = batch_loss.item();
            if (!std::isfinite(value))
                report_divergence("train_cam_baseline", epoch, step_count, value);
            StepLoss entry;
            entry.epoch = epoch;
            entry.step = step_count;
            entry.loss.classification = value;
            entry.loss.total = value;
            result.history.push_back(entry);

            backward(batch_loss);
            sgd_step(result.encoder.parameters(), config.learning_rate);
        }
        if (persist) {
            Checkpoint ckpt;
            for (const auto& [name, t] : result.encoder.named_parameters())
                ckpt.add(name, t);
            ckpt.save(
                (fs::path(run_dir) / "checkpoints" / epoch_checkpoint_name(epoch)).string());
        }
    }

    result.attention_maps = cam_attention_maps(result.encoder, dataset);
    result.pseudo_labels =
        labels_from_maps(result.attention_maps, config.background_threshold);

    if (persist) {
        write_loss_csv((fs::path(run_dir) / "losses.csv").string(), result.history);
        write_attention_pgms((fs::path(run_dir) / "attention").string(),
                             result.attention_maps);
        write_label_pgms((fs::path(run_dir) / "pseudo_labels").string(),
                         result.pseudo_labels);
    }
    return result;
}

SegmenterParams SegmenterParams::init(std::size_t num_classes, std::mt19937_64& rng) {
    if (num_classes < 1)
        throw std::invalid_argument("SegmenterParams: need at least one class");
    SegmenterParams params;
    const std::vector<std::size_t> widths{3, 8, 16, num_classes + 1};
    for (std::size_t layer = 0; layer + 1 < widths.size(); ++layer) {
        const std::size_t fan_in = widths[layer] * 9;
        const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
        params.kernels.push_back(Tensor::uniform({widths[layer + 1], widths[layer], 3, 3},
                                                 -bound, bound, rng, true));
        params.biases.push_back(Tensor::zeros({widths[layer + 1]}, true));
    }
    return params;
}

std::vector<Tensor> SegmenterParams::parameters() const {
    std::vector<Tensor> out;
    for (std::size_t i = 0; i < kernels.size(); ++i) {
        out.push_back(kernels[i]);
        out.push_back(biases[i]);
    }
    return out;
}

std::vector<std::pair<std::string, Tensor>> SegmenterParams::named_parameters() const {
    std::vector<std::pair<std::string, Tensor>> out;
    for (std::size_t i = 0; i < kernels.size(); ++i) {
        const std::string base = "segmenter.conv" + std::to_string(i + 1);
        out.emplace_back(base + ".weight", kernels[i]);
        out.emplace_back(base + ".bias", biases[i]);
    }
    return out;
}

Tensor segment_logits(const SegmenterParams& params, const Tensor& image) {
    Tensor x = image;
    for (std::size_t layer = 0; layer < params.kernels.size(); ++layer) {
        x = conv2d(x, params.kernels[layer], params.biases[layer]);
        if (layer + 1 < params.kernels.size()) x = relu(x);
    }
    return x;
}

Tensor pixel_cross_entropy(const Tensor& logits, const LabelMap& target) {
    if (logits.rank() != 3)
        throw std::invalid_argument("pixel_cross_entropy: logits must be [classes, h, w]");
    const std::size_t planes = logits.shape()[0];
    const std::size_t h = logits.shape()[1];
    const std::size_t w = logits.shape()[2];
    if (target.height != h || target.width != w)
        throw std::invalid_argument("pixel_cross_entropy: target is " +
                                    std::to_string(target.height) + "x" +
                                    std::to_string(target.width) + ", logits are " +
                                    std::to_string(h) + "x" + std::to_string(w));
    const std::size_t pixels = h * w;
    std::vector<double> onehot(planes * pixels, 0.0);
    for (std::size_t p = 0; p < pixels; ++p) {
        const std::uint8_t cls = target.values[p];
        if (cls >= planes)
            throw std::invalid_argument("pixel_cross_entropy: target class " +
                                        std::to_string(cls) + " exceeds the " +
                                        std::to_string(planes) + " logit planes");
        onehot[cls * pixels + p] = 1.0;
    }
    const Tensor probs = softmax(reshape(logits, {planes, pixels}), 0);
    const Tensor log_probs = log(maximum(probs, Tensor::full({planes, pixels}, 1e-12)));
    const Tensor picked = mul(log_probs, Tensor::from_data({planes, pixels}, onehot));
    return scale(sum(picked), -1.0 / static_cast<double>(pixels));
}

LabelMap argmax_labels(const Tensor& logits) {
    if (logits.rank() != 3)
        throw std::invalid_argument("argmax_labels: logits must be [classes, h, w]");
    const std::size_t planes = logits.shape()[0];
    const std::size_t h = logits.shape()[1];
    const std::size_t w = logits.shape()[2];
    const auto& v = logits.data();
    LabelMap out;
    out.height = h;
    out.width = w;
    out.values.assign(h * w, 0);
    for (std::size_t p = 0; p < h * w; ++p) {
        std::size_t best = 0;
        double best_value = v[p];
        for (std::size_t cls = 1; cls < planes; ++cls) {
            const double value = v[cls * h * w + p];
            if (value > best_value) {
                best_value = value;
                best = cls;
            }
        }
        out.values[p] = static_cast<std::uint8_t>(best);
    }
    return out;
}

RefineResult train_segmenter(const ExperimentConfig& config,
                             const std::vector<SyntheticScene>& dataset,
                             const std::map<std::string, LabelMap>& pseudo_labels,
                             const std::string& run_dir) {
    config.validate();
    check_dataset(config, dataset, "train_segmenter");
    std::string missing;
    for (const SyntheticScene& scene : dataset)
        if (!pseudo_labels.count(scene.id)) missing += missing.empty() ? scene.id : ", " + scene.id;
    if (!missing.empty())
        throw std::invalid_argument("train_segmenter: no pseudo labels for: " + missing);

    const bool persist = !run_dir.empty();
    if (persist) {
        fs::create_directories(run_dir);
        save_config_file((fs::path(run_dir) / "config.snapshot").string(), config);
    }

    std::mt19937_64 rng(config.seed);
    RefineResult result;
    result.segmenter = SegmenterParams::init(config.num_classes, rng);

    std::map<std::string, LabelMap> current;
    for (const SyntheticScene& scene : dataset)
        current.emplace(scene.id, pseudo_labels.at(scene.id));
    result.per_epoch_labels.push_back(current);
    result.background_pixels.push_back(background_count(current));

    std::vector<std::size_t> order(dataset.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    std::size_t step_count = 0;
    for (std::size_t epoch = 1; epoch <= config.segmenter_epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        for (std::size_t index : order) {
            const SyntheticScene& scene = dataset[index];
            const Tensor loss = pixel_cross_entropy(
                segment_logits(result.segmenter, scene.image), current.at(scene.id));
            ++step_count;
            const double value = loss.item();
            if (!std::isfinite(value))
                report_divergence("train_segmenter", epoch, step_count, value);
            StepLoss entry;
            entry.epoch = epoch;
            entry.step = step_count;
            entry.loss.classification = value;
            entry.loss.total = value;
            result.history.push_back(entry);
            backward(loss);
            sgd_step(result.segmenter.parameters(), config.segmenter_learning_rate);
        }

        for (const SyntheticScene& scene : dataset) {
            const LabelMap predicted =
                argmax_labels(segment_logits(result.segmenter, scene.image));
            LabelMap& slot = current.at(scene.id);
            slot = mutual_update(slot, predicted);
        }
        result.per_epoch_labels.push_back(current);
        result.background_pixels.push_back(background_count(current));
        if (result.background_pixels[epoch] > result.background_pixels[epoch - 1])
            throw std::logic_error("train_segmenter: background grew during epoch " +
                                   std::to_string(epoch));
    }
    result.refined_labels = current;

    if (persist) {
        write_label_pgms((fs::path(run_dir) / "refined_labels").string(),
                         result.refined_labels);
        std::ofstream log((fs::path(run_dir) / "refine_log.csv").string());
        if (!log)
            throw std::runtime_error("train_segmenter: cannot write refine_log.csv in " +
                                     run_dir);
        log << "epoch,background_pixels\n";
        for (std::size_t e = 0; e < result.background_pixels.size(); ++e)
            log << e << ',' << result.background_pixels[e] << "\n";
    }
    return result;
}

EvalResult evaluate_labels(const std::map<std::string, LabelMap>& predicted,
                           const std::map<std::string, LabelMap>& truth,
                           std::size_t num_classes) {
    std::string missing_pred;
    std::string missing_truth;
    for (const auto& [id, map] : truth)
        if (!predicted.count(id))
            missing_pred += (missing_pred.empty() ? "" : ", ") + id;
    for (const auto& [id, map] : predicted)
        if (!truth.count(id))
            missing_truth += (missing_truth.empty() ? "" : ", ") + id;
    if (!missing_pred.empty() || !missing_truth.empty()) {
        std::string message = "evaluate_labels: file sets differ";
        if (!missing_pred.empty())
            message += "; ids missing from predictions: " + missing_pred;
        if (!missing_truth.empty())
            message += "; ids missing from ground truth: " + missing_truth;
        throw std::runtime_error(message);
    }

    EvalResult result;
    result.total.per_class.assign(num_classes + 1, ClassCounts{});
    for (const auto& [id, truth_map] : truth) {
        ConfusionCounts counts = confusion(predicted.at(id), truth_map, num_classes);
        result.total += counts;
        result.per_image.emplace(id, std::move(counts));
    }
    result.miou = miou(result.total);
    result.precision = precision(result.total);
    result.recall = recall(result.total);
    return result;
}

std::map<std::string, LabelMap> ground_truth_store(
    const std::vector<SyntheticScene>& dataset) {
    std::map<std::string, LabelMap> store;
    for (const SyntheticScene& scene : dataset)
        store.emplace(scene.id, scene.ground_truth);
    return store;
}

} // namespace pgnn
