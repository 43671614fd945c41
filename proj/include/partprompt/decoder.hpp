// SPDX-License-Identifier: Apache-2.0
//
// Prompt-guided mask decoder. Prompts become field features plus a Fourier
// position code plus a sign embedding; together with the output tokens and the
// IoU token they attend back and forth with the patch tokens. Refined patch
// tokens are interpolated to every point and dotted with per-mask vectors
// produced from the refined output tokens.

#pragma once

#include "partprompt/encoder.hpp"

#include <optional>

namespace partprompt {

struct PromptSet {
    Points points;
    std::vector<bool> signs;  // true = positive
    std::optional<std::vector<Real>> prev_logits;

    Index size() const { return points.rows(); }
    void push(const Vec3& p, bool positive);
};

struct DecoderConfig {
    int layers = 2;
    int width = 64;
    int n_masks = 3;
    int heads = 4;
    int upsample_k = 3;
    Real fourier_sigma = 1.5;

    /// Large preset: 4 layers, width 256, 3 masks.
    static DecoderConfig reference();
    void validate() const;
};

struct MaskPrediction {
    std::vector<Real> logits;
    std::vector<Real> probabilities;
    PartMask mask;
    Real predicted_iou = 0;

    /// Builds probabilities and the binarized mask (probability > 0.5).
    static MaskPrediction from_logits(std::vector<Real> logits, Real predicted_iou);
};

/// Differentiable decoder output: one logit column and one IoU per emitted mask.
struct DecodeOutput {
    ag::Var logits;  // N x m
    ag::Var iou;     // 1 x m, in (0, 1)
    int count() const { return static_cast<int>(logits.cols()); }
    std::vector<MaskPrediction> predictions() const;
};

/// Per-shape decoder state reused across prompts and rounds.
struct DecoderContext {
    ag::SparseRows upsample;  // N_c -> N inverse-distance weights
    ag::Var point_skip;       // N x width
    Mat token_pe;             // N_c x width
    Index n_points = 0;
};

class Decoder {
public:
    Decoder() = default;
    Decoder(nn::ParamTable& decoder_table, nn::ParamTable& heads_table, const DecoderConfig& cfg, int field_channels,
            Rng& rng);

    const DecoderConfig& config() const { return cfg_; }

    /// N_p x width prompt embeddings.
    ag::Var embed_prompts(const TriplaneField& field, const PromptSet& prompts) const;
    /// Adds the projected per-patch mean of `prev_logits` to each token.
    TokenSet apply_prev_mask(const TokenSet& tokens, const std::vector<Real>& prev_logits) const;
    /// Scalar features of a patch-mean logit fed to the previous-mask projection.
    static Mat prev_mask_features(const std::vector<Real>& patch_means);

    DecoderContext prepare(const TriplaneField& field, const TokenSet& tokens, const PointCloud& cloud) const;
    /// Applies prompts.prev_logits (if any) then decodes. Emits n_masks outputs
    /// for a single prompt and only the first otherwise.
    DecodeOutput operator()(const DecoderContext& ctx, const TriplaneField& field, const TokenSet& tokens,
                            const PromptSet& prompts) const;

private:
    struct Block {
        nn::LayerNorm norm_self, norm_q1, norm_k1, norm_mlp, norm_q2, norm_k2;
        nn::Attention self_attn, to_tokens, to_queries;
        nn::Mlp mlp;
    };

    DecoderConfig cfg_;
    nn::FourierEmbedding pe_;
    nn::Linear prompt_proj_;
    ag::Var sign_embed_;   // 2 x width, row 0 negative, row 1 positive
    ag::Var out_tokens_;   // n_masks x width
    ag::Var iou_token_;    // 1 x width
    nn::Linear token_in_;
    nn::Linear prev_proj_;
    nn::Linear skip_;
    std::vector<Block> blocks_;
    nn::LayerNorm final_q_, final_k_, final_norm_;
    nn::Attention final_attn_;
    std::vector<nn::Mlp> hyper_;
    nn::Mlp iou_head_;
};

}  // namespace partprompt
