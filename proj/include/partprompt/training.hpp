// SPDX-License-Identifier: Apache-2.0
//
// Losses, the interactive click simulator and the optimization loop.
//
// Every shape step encodes the shape once, then plays `rounds` simulated clicks
// against one ground-truth part: the first click lands in the part's central
// band, every later click at the error point farthest from the correct region.
// The first round decodes three candidates and trains only the best one.

#pragma once

#include "partprompt/data.hpp"
#include "partprompt/model.hpp"

#include <filesystem>
#include <functional>
#include <map>
#include <optional>

namespace partprompt::training {

struct LossConfig {
    Real lambda_triplet = 0.5;
    Real focal_alpha = 0.25;
    Real focal_gamma = 2.0;
    Real iou_head_weight = 1.0;
    Real triplet_margin = 1.0;
    int triplet_samples = 256;

    void validate() const;
};

struct TrainConfig {
    int iterations = 20000;
    int batch_size = 8;
    Real lr = 5e-4;
    Real lr_decay = 0.7;
    int decay_every = 4000;
    int rounds = 9;
    std::uint64_t seed = 0;

    Real weight_decay = 0.01;
    Real beta1 = 0.9;
    Real beta2 = 0.999;
    Real adam_eps = 1e-8;
    /// Global gradient-norm clip; 0 disables.
    Real grad_clip = 0.0;
    /// Ground-truth parts simulated per shape per step (sharing one encode).
    int masks_per_shape = 1;
    int checkpoint_every = 1000;
    int log_every = 1;
    /// Single seeded sampling stream. Batches are assembled sequentially either
    /// way, so this is recorded rather than switching anything.
    bool strict = true;
    bool augment = false;
    data::AugmentationConfig augmentation;
    /// Triplet-only steps on the frozen branch before it is frozen and copied
    /// into the learnable branch. 0 keeps the frozen branch at its random init.
    int frozen_pretrain_iterations = 0;
    Real frozen_pretrain_lr = 1e-3;
    /// Stop after this many seconds of wall time (0 = no limit).
    Real max_seconds = 0.0;

    /// 250k iterations, batch 4, lr 5e-4 decayed by 0.7 every 50k.
    static TrainConfig reference();
    void validate() const;
    Real lr_at(int iteration) const;
};

// ---- losses on probabilities (reporting and tests) ----

/// Mean alpha-balanced focal loss; probabilities are clamped to [1e-6, 1 - 1e-6].
Real focal_loss(const std::vector<Real>& probabilities, const PartMask& gt, const LossConfig& cfg);
/// 1 - (2 sum(p g) + 1) / (sum p + sum g + 1).
Real dice_loss(const std::vector<Real>& probabilities, const PartMask& gt);

struct TripletResult {
    ag::Var loss;  // 1 x 1
    bool degenerate = false;
};

/// Hinge on sampled (anchor, positive, negative) feature distances; anchor and
/// positive share a mask, the negative comes from another. Fewer than two
/// usable masks gives a zero loss flagged degenerate.
TripletResult triplet_loss(const TriplaneField& field, const std::vector<PartMask>& gt_masks, const PointCloud& cloud,
                           Real margin, int samples, std::uint64_t seed);

// ---- click simulation ----

/// Index of a point drawn uniformly from the center-most third of the mask's
/// distance-to-background range (the single deepest point if that band is
/// empty; uniform over the mask when there is no background).
Index sample_first_prompt(const PartMask& gt, const PointCloud& cloud, std::uint64_t seed);

struct NextPrompt {
    Index index = -1;
    bool positive = true;
};

/// Error point farthest from the correctly predicted points; positive when it is
/// a missed foreground point. std::nullopt once prediction equals gt.
std::optional<NextPrompt> sample_next_prompt(const PartMask& pred, const PartMask& gt, const PointCloud& cloud);

enum class FirstRoundSelection { min_loss, predicted_iou };

struct RoundRecord {
    Index prompt = -1;
    bool positive = true;
    int selected = 0;  // candidate index used as this round's prediction
    Real iou = 0.0;
    Real loss = 0.0;   // focal + dice of the selected candidate
    Real predicted_iou = 0.0;
};

struct SimulationTrace {
    std::vector<RoundRecord> rounds;
    bool converged = false;
    MaskPrediction last;

    std::vector<Real> iou() const;
    /// IoU after round k (1-based); rounds past convergence repeat the last value.
    Real iou_at(int k) const;
};

/// Plays up to `rounds` clicks against `gt` using an existing encoding.
SimulationTrace simulate_interactive(const PromptableModel& model, const Encoding& encoding, const PartMask& gt,
                                     int rounds, std::uint64_t seed,
                                     FirstRoundSelection selection = FirstRoundSelection::predicted_iou,
                                     const LossConfig& loss_cfg = {});
SimulationTrace simulate_interactive(const PromptableModel& model, const data::LabeledShape& shape, int gt_index,
                                     int rounds, std::uint64_t seed,
                                     FirstRoundSelection selection = FirstRoundSelection::min_loss,
                                     const LossConfig& loss_cfg = {});

// ---- differentiable objective ----

struct LossTerms {
    Real total = 0.0;
    Real focal = 0.0;
    Real dice = 0.0;
    Real iou_head = 0.0;
    Real triplet = 0.0;
    int selected = 0;
};

struct LossResult {
    ag::Var total;
    LossTerms terms;
};

/// min over candidates of (focal + dice), plus the weighted squared error of
/// every candidate's predicted IoU, plus lambda * triplet (if given).
LossResult total_loss(const DecodeOutput& out, const PartMask& gt, const std::optional<ag::Var>& triplet,
                      const LossConfig& cfg);

struct ShapeLoss {
    ag::Var loss;  // mean over rounds of the mask + IoU terms
    LossTerms terms;  // round means
    std::vector<Real> iou;
};

/// Differentiable simulation: one graph over all rounds (previous logits enter
/// as constants). Round 1 trains the min-loss candidate.
ShapeLoss simulate_training(const Model& model, const TriplaneField& field, const TokenSet& tokens,
                            const DecoderContext& ctx, const PointCloud& cloud, const PartMask& gt, int rounds,
                            std::uint64_t seed, const LossConfig& cfg);

// ---- optimizer ----

class AdamW {
public:
    AdamW() = default;
    AdamW(Real beta1, Real beta2, Real eps, Real weight_decay)
        : beta1_(beta1), beta2_(beta2), eps_(eps), weight_decay_(weight_decay) {}

    /// One update of every named parameter that has a gradient.
    void step(const std::vector<std::pair<std::string, nn::ParamTable*>>& tables, Real lr);
    long steps() const { return t_; }

    void save(TensorArchive& archive) const;
    void load(const TensorArchive& archive);

private:
    Real beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8, weight_decay_ = 0.0;
    long t_ = 0;
    std::map<std::string, std::pair<Mat, Mat>> moments_;  // "group/name" -> (m, v)
};

/// Scales every gradient so the global norm is at most `max_norm`; returns the pre-clip norm.
Real clip_gradients(const std::vector<std::pair<std::string, nn::ParamTable*>>& tables, Real max_norm);

// ---- loop ----

struct StepMetrics {
    int iter = 0;
    Real lr = 0.0;
    LossTerms loss;
    Real seconds = 0.0;
};

io::json to_json(const StepMetrics& m);

class TrainingAborted : public std::runtime_error {
public:
    TrainingAborted(const std::string& what, std::filesystem::path last_good)
        : std::runtime_error(what), last_good_(std::move(last_good)) {}
    const std::filesystem::path& last_good_checkpoint() const { return last_good_; }

private:
    std::filesystem::path last_good_;
};

struct TrainResult {
    std::unique_ptr<Model> model;
    int iterations_done = 0;
    std::filesystem::path checkpoint;
    std::vector<StepMetrics> history;
};

struct TrainOptions {
    /// Checkpoints and metrics.jsonl go here; empty keeps everything in memory.
    std::filesystem::path out_dir;
    /// Continue from out_dir/checkpoint.ppm when it exists.
    bool resume = false;
    std::function<void(const StepMetrics&)> on_step;
};

inline constexpr const char* kCheckpointFile = "checkpoint.ppm";

/// Triplet-only pre-training of the frozen branch, then freezes it and copies
/// the weights into the learnable branch. Returns the final triplet loss.
Real pretrain_frozen_branch(Model& model, const std::vector<data::LabeledShape>& dataset, const TrainConfig& cfg,
                            const LossConfig& loss_cfg);

TrainResult train(const std::vector<data::LabeledShape>& dataset, const TrainConfig& train_cfg,
                  const LossConfig& loss_cfg, const ModelConfig& model_cfg, const TrainOptions& options = {});

// ---- flat key = value configuration ----

struct TrainingSetup {
    TrainConfig train;
    LossConfig loss;
    ModelConfig model;
};

/// Parses `key = value` lines ('#' comments). Keys are prefixed `train.`,
/// `loss.`, `encoder.`, `decoder.` or `model.`; unknown keys throw.
TrainingSetup parse_training_config(const std::string& text);
TrainingSetup load_training_config(const std::filesystem::path& path);
io::json to_json(const TrainConfig& c);
io::json to_json(const LossConfig& c);

}  // namespace partprompt::training
