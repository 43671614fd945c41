// SPDX-License-Identifier: Apache-2.0
//
// Layer building blocks on top of the autograd tape. Parameters live in a
// ParamTable so whole networks can be enumerated, copied, frozen and
// serialized by name.

#pragma once

#include "partprompt/autograd.hpp"

#include <map>
#include <string>
#include <utility>
#include <vector>

namespace partprompt::nn {

using ag::Var;

/// Ordered name -> parameter map. Registration order is the serialization order.
class ParamTable {
public:
    Var& add(const std::string& name, Mat init);
    Var& get(const std::string& name);
    const Var& get(const std::string& name) const;
    bool contains(const std::string& name) const { return index_.count(name) != 0; }

    std::vector<std::pair<std::string, Var>>& entries() { return entries_; }
    const std::vector<std::pair<std::string, Var>>& entries() const { return entries_; }
    std::size_t size() const { return entries_.size(); }
    Index scalar_count() const;

    void set_trainable(bool on);
    void zero_grad();
    /// Copies values from `other` (same names and shapes).
    void copy_values_from(const ParamTable& other);
    /// Copies every entry of `other` whose name also exists here; returns the count.
    std::size_t copy_matching_from(const ParamTable& other);

private:
    std::vector<std::pair<std::string, Var>> entries_;
    std::map<std::string, std::size_t> index_;
};

/// Glorot-uniform initialized weight (in x out).
Mat glorot(Index in, Index out, Rng& rng);

class Linear {
public:
    Linear() = default;
    Linear(ParamTable& table, const std::string& name, Index in, Index out, Rng& rng, bool bias = true,
           bool zero_init = false);
    Var operator()(const Var& x) const;
    Index in() const { return in_; }
    Index out() const { return out_; }
    const Var& weight() const { return weight_; }

private:
    Var weight_;
    Var bias_;
    Index in_ = 0;
    Index out_ = 0;
};

class LayerNorm {
public:
    LayerNorm() = default;
    LayerNorm(ParamTable& table, const std::string& name, Index width);
    Var operator()(const Var& x) const;

private:
    Var gamma_;
    Var beta_;
};

/// Linear -> GELU -> ... -> Linear.
class Mlp {
public:
    Mlp() = default;
    Mlp(ParamTable& table, const std::string& name, const std::vector<Index>& widths, Rng& rng,
        bool zero_last = false);
    Var operator()(const Var& x) const;

private:
    std::vector<Linear> layers_;
};

/// Multi-head scaled dot-product attention with separate q/k/v/out projections.
class Attention {
public:
    Attention() = default;
    Attention(ParamTable& table, const std::string& name, Index width, Index heads, Rng& rng);
    Var operator()(const Var& q, const Var& k, const Var& v) const;

private:
    Linear q_, k_, v_, o_;
    Index width_ = 0;
    Index heads_ = 1;
};

/// Pre-norm transformer encoder block (self-attention + GELU MLP).
class TransformerBlock {
public:
    TransformerBlock() = default;
    TransformerBlock(ParamTable& table, const std::string& name, Index width, Index heads, Rng& rng);
    Var operator()(const Var& x) const;

private:
    LayerNorm norm1_, norm2_;
    Attention attn_;
    Mlp mlp_;
};

/// Random Fourier features of 3D coordinates: [sin(2 pi x B), cos(2 pi x B)].
/// B is fixed (not trained) and drawn from a seeded Gaussian.
class FourierEmbedding {
public:
    FourierEmbedding() = default;
    FourierEmbedding(Index width, Real sigma, std::uint64_t seed);
    Mat operator()(const Points& xyz) const;
    Index width() const { return 2 * basis_.cols(); }

private:
    Mat basis_;  // 3 x width/2
};

}  // namespace partprompt::nn
