#pragma once

#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "pgnn/attention.hpp"
#include "pgnn/config.hpp"
#include "pgnn/dataset.hpp"
#include "pgnn/encoder.hpp"
#include "pgnn/labels.hpp"
#include "pgnn/losses.hpp"
#include "pgnn/serialize.hpp"

namespace pgnn {

struct StepLoss {
    std::size_t epoch = 0; // 1-based
    std::size_t step = 0;  // 1-based, over the whole run
    LossBreakdown loss;
};

// One row per step: epoch,step,l_D,l_P,l_TV,l_c,total.
void write_loss_csv(const std::string& path, const std::vector<StepLoss>& history);

// Patch encoder, attention block and class-embedding table trained together.
struct PgnnModel {
    EncoderParams encoder;
    TransformerParams transformer;
    Tensor class_embeddings; // [K+1, channels]; row 0 is the background

    static PgnnModel init(const ExperimentConfig& config, std::mt19937_64& rng);

    std::vector<Tensor> parameters() const;
    Checkpoint to_checkpoint() const;
    static PgnnModel from_checkpoint(const Checkpoint& ckpt,
                                     const ExperimentConfig& config);
};

// Spliced map per (scene, labeled class), one scene per graph, in dataset
// order with classes ascending within a scene.
std::vector<AttentionMap> pgnn_attention_maps(const PgnnModel& model,
                                              const ExperimentConfig& config,
                                              const std::vector<SyntheticScene>& dataset);

// Class activation maps of a plain classifier, resized to the image frame
// and peak-normalized; same ordering as pgnn_attention_maps.
std::vector<AttentionMap> cam_attention_maps(const EncoderParams& encoder,
                                             const std::vector<SyntheticScene>& dataset);

// Collapses each scene's maps into a label map (argmax over classes, cut
// against background_threshold). Maps are grouped by image id.
std::map<std::string, LabelMap> labels_from_maps(const std::vector<AttentionMap>& maps,
                                                 double background_threshold);

struct PgnnTrainResult {
    PgnnModel model;
    std::vector<StepLoss> history;
    std::vector<AttentionMap> attention_maps;      // recomputed after training
    std::map<std::string, LabelMap> pseudo_labels; // per scene id
};

// Attention training with epoch-carried maps: same-class mini-batches, one
// graph per batch, losses scored against the previous epoch's thresholded
// maps (zero maps on the first epoch), plain SGD. When run_dir is non-empty
// it receives config.snapshot, losses.csv, checkpoints/, attention/*.pgm and
// pseudo_labels/*.pgm. Ground truth is never read.
PgnnTrainResult train_pgnn(const ExperimentConfig& config,
                           const std::vector<SyntheticScene>& dataset,
                           const std::string& run_dir = "");

struct CamTrainResult {
    EncoderParams encoder;
    std::vector<StepLoss> history;
    std::vector<AttentionMap> attention_maps;
    std::map<std::string, LabelMap> pseudo_labels;
};

// Whole-image multi-label classifier without the graph; its activation maps
// are the no-propagation reference point for the attention pipeline.
CamTrainResult train_cam_baseline(const ExperimentConfig& config,
                                  const std::vector<SyntheticScene>& dataset,
                                  const std::string& run_dir = "");

// Small full-resolution conv head for the label-refinement stage.
struct SegmenterParams {
    std::vector<Tensor> kernels; // 3 -> 8 -> 16 -> K+1 channels, 3x3 each
    std::vector<Tensor> biases;

    static SegmenterParams init(std::size_t num_classes, std::mt19937_64& rng);
    std::vector<Tensor> parameters() const;
    std::vector<std::pair<std::string, Tensor>> named_parameters() const;
};

// Per-pixel class logits, [K+1, H, W] at image resolution.
Tensor segment_logits(const SegmenterParams& params, const Tensor& image);

// Mean negative log-likelihood of the target class per pixel.
Tensor pixel_cross_entropy(const Tensor& logits, const LabelMap& target);

// Per-pixel argmax over the logit planes; ties go to the lower class.
LabelMap argmax_labels(const Tensor& logits);

struct RefineResult {
    SegmenterParams segmenter;
    std::vector<StepLoss> history;
    // Entry e holds the labels after e update rounds; entry 0 is the input.
    std::vector<std::map<std::string, LabelMap>> per_epoch_labels;
    std::vector<std::uint64_t> background_pixels; // parallel to per_epoch_labels
    std::map<std::string, LabelMap> refined_labels;
};

// Trains the segmenter on the current pseudo labels, then folds its
// predictions back in after every epoch: predicted foreground overwrites,
// background never grows. run_dir (optional) receives config.snapshot,
// refine_log.csv and refined_labels/*.pgm.
RefineResult train_segmenter(const ExperimentConfig& config,
                             const std::vector<SyntheticScene>& dataset,
                             const std::map<std::string, LabelMap>& pseudo_labels,
                             const std::string& run_dir = "");

struct EvalResult {
    std::map<std::string, ConfusionCounts> per_image;
    ConfusionCounts total;
    double miou = 0.0;      // foreground classes only
    double precision = 0.0;
    double recall = 0.0;
};

// Aggregates confusion counts over matching ids. Mismatched id sets throw
// with every missing id listed.
EvalResult evaluate_labels(const std::map<std::string, LabelMap>& predicted,
                           const std::map<std::string, LabelMap>& truth,
                           std::size_t num_classes);

std::map<std::string, LabelMap> ground_truth_store(const std::vector<SyntheticScene>& dataset);

} // namespace pgnn
