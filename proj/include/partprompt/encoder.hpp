// SPDX-License-Identifier: Apache-2.0
//
// Triplane encoder. Each branch lifts points to features, mean-splats them
// bilinearly onto three axis-aligned planes, refines the planes with a
// transformer over 8x8 plane patches and adds the result back. The fused field
// is the sum of a frozen branch (positions only) and a learnable branch that
// also sees normals and colors through a zero-initialized layer. Tokens are
// max-pooled patch features around farthest-point centers.

#pragma once

#include "partprompt/geometry.hpp"
#include "partprompt/nn.hpp"

#include <array>

namespace partprompt {

struct EncoderConfig {
    int resolution = 64;
    int channels = 64;
    int transformer_layers = 2;
    int n_patches = 256;
    int patch_k = 8;
    bool extra_attribute_fusion = true;
    int heads = 4;
    int plane_patch = 8;
    int lift_hidden = 64;
    int fourier_width = 32;
    Real fourier_sigma = 1.0;

    /// Large preset: R=512, C=448, 6 layers, 2000 patches.
    static EncoderConfig reference();
    void validate() const;
};

enum class BranchTag { frozen, learnable, fused };

/// Three R x R x C planes stacked into one (3 R^2) x C matrix; plane p owns rows
/// [p R^2, (p+1) R^2), cell (u, v) of a plane is row v R + u. Plane 0 spans
/// (x, y), plane 1 (x, z), plane 2 (y, z).
struct TriplaneField {
    ag::Var planes;
    int resolution = 0;
    int channels = 0;
    BranchTag tag = BranchTag::fused;

    /// Rows of one plane as an R^2 x C block.
    Mat plane(int p) const;
};

/// Continuous grid coordinate in [0, R-1] for u in [-1, 1] (nodes at the ends).
inline Real grid_coordinate(Real u, int resolution) { return (u + 1.0) * 0.5 * (resolution - 1); }

/// Bilinear mean-splat map from N points onto the 3 R^2 stacked cells.
ag::SparseRows splat_map(const Points& positions, int resolution);

/// Bilinear sample-and-sum map from the stacked cells to Q queries. Coordinates
/// outside [-1, 1] are clamped; `clamped` (if given) receives how many queries were.
ag::SparseRows sample_map(const Points& coords, int resolution, int* clamped = nullptr);

/// Q x C features: sum over the three planes of the bilinear sample at each coordinate.
ag::Var sample_field(const TriplaneField& field, const Points& coords, int* clamped = nullptr);

struct TokenSet {
    ag::Var tokens;  // N_c x C
    Points centers;
    IndexList center_index;
    std::vector<IndexList> patch_members;
};

/// Per-point features fed to the lifting network.
Mat lift_inputs(const Points& positions, const nn::FourierEmbedding& fourier);

class TriplaneBranch {
public:
    TriplaneBranch() = default;
    TriplaneBranch(nn::ParamTable& table, const EncoderConfig& cfg, bool with_attributes, Rng& rng);

    /// Lifted per-point features (N x C), before splatting.
    ag::Var lift(const PointCloud& cloud) const;
    /// Raw splatted planes, before the plane transformer.
    ag::Var splat(const PointCloud& cloud) const;
    TriplaneField operator()(const PointCloud& cloud, BranchTag tag) const;
    bool with_attributes() const { return with_attributes_; }

private:
    EncoderConfig cfg_;
    bool with_attributes_ = false;
    nn::FourierEmbedding fourier_;
    nn::Mlp lift_;
    nn::Mlp fusion_;
    nn::Linear embed_;
    nn::Linear unembed_;
    ag::Var position_;
    std::vector<nn::TransformerBlock> blocks_;
    nn::LayerNorm norm_;
    IndexList patch_order_;
    IndexList cell_order_;
};

class Tokenizer {
public:
    Tokenizer() = default;
    Tokenizer(nn::ParamTable& table, const EncoderConfig& cfg, Rng& rng);

    /// Offsets from the patch center are scaled by this before entering the MLP.
    static constexpr Real kOffsetScale = 10.0;

    TokenSet operator()(const TriplaneField& field, const PointCloud& cloud, const FpsOptions& fps_options = {}) const;

private:
    EncoderConfig cfg_;
    nn::Mlp point_mlp_;
    nn::Linear proj_;
};

/// Parameter tables and networks of both branches and the tokenizer.
class Encoder {
public:
    Encoder(const EncoderConfig& cfg, std::uint64_t seed);
    Encoder(const Encoder&) = delete;
    Encoder& operator=(const Encoder&) = delete;

    const EncoderConfig& config() const { return cfg_; }

    TriplaneField encode_frozen(const PointCloud& cloud) const;
    TriplaneField encode_learnable(const PointCloud& cloud) const;
    /// Elementwise sum of both branch fields. Throws if the cloud is not normalized.
    TriplaneField encode(const PointCloud& cloud) const;
    static TriplaneField fuse(const TriplaneField& frozen, const TriplaneField& learnable);
    TokenSet tokenize(const TriplaneField& field, const PointCloud& cloud, const FpsOptions& fps_options = {}) const;

    nn::ParamTable frozen_table;
    nn::ParamTable learnable_table;
    nn::ParamTable tokenizer_table;

    const TriplaneBranch& frozen_branch() const { return frozen_; }
    const TriplaneBranch& learnable_branch() const { return learnable_; }

    /// Starts the learnable branch from the (pre-trained) frozen weights; the
    /// attribute fusion layer keeps its zero initialization.
    void seed_learnable_from_frozen();

private:
    EncoderConfig cfg_;
    TriplaneBranch frozen_;
    TriplaneBranch learnable_;
    Tokenizer tokenizer_;
};

/// Throws InvalidArgument unless every coordinate lies in [-1, 1] (small slack).
void require_normalized(const PointCloud& cloud);

}  // namespace partprompt
