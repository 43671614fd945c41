// SPDX-License-Identifier: Apache-2.0

#include "partprompt/nn.hpp"

#include <cmath>

namespace partprompt::nn {

Var& ParamTable::add(const std::string& name, Mat init) {
    if (contains(name)) throw InvalidArgument("ParamTable: duplicate parameter " + name);
    index_[name] = entries_.size();
    entries_.emplace_back(name, Var(std::move(init), true));
    return entries_.back().second;
}

Var& ParamTable::get(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw InvalidArgument("ParamTable: unknown parameter " + name);
    return entries_[it->second].second;
}

const Var& ParamTable::get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw InvalidArgument("ParamTable: unknown parameter " + name);
    return entries_[it->second].second;
}

Index ParamTable::scalar_count() const {
    Index n = 0;
    for (const auto& [_, v] : entries_) n += v.rows() * v.cols();
    return n;
}

void ParamTable::set_trainable(bool on) {
    for (auto& [_, v] : entries_) v.set_requires_grad(on);
}

void ParamTable::zero_grad() {
    for (auto& [_, v] : entries_) v.zero_grad();
}

void ParamTable::copy_values_from(const ParamTable& other) {
    if (other.size() != size()) throw InvalidArgument("ParamTable::copy_values_from: size mismatch");
    for (std::size_t i = 0; i < entries_.size(); ++i) {
        const auto& src = other.entries_[i].second.value();
        auto& dst = entries_[i].second.mutable_value();
        if (src.rows() != dst.rows() || src.cols() != dst.cols())
            throw InvalidArgument("ParamTable::copy_values_from: shape mismatch at " + entries_[i].first);
        dst = src;
    }
}

std::size_t ParamTable::copy_matching_from(const ParamTable& other) {
    std::size_t copied = 0;
    for (const auto& [name, src] : other.entries_) {
        if (!contains(name)) continue;
        Mat& dst = get(name).mutable_value();
        if (src.rows() != dst.rows() || src.cols() != dst.cols())
            throw InvalidArgument("ParamTable::copy_matching_from: shape mismatch at " + name);
        dst = src.value();
        ++copied;
    }
    return copied;
}

Mat glorot(Index in, Index out, Rng& rng) {
    const Real limit = std::sqrt(6.0 / static_cast<Real>(in + out));
    Mat w(in, out);
    for (Index i = 0; i < w.size(); ++i) w.data()[i] = rng.uniform(-limit, limit);
    return w;
}

Linear::Linear(ParamTable& table, const std::string& name, Index in, Index out, Rng& rng, bool bias,
               bool zero_init)
    : in_(in), out_(out) {
    weight_ = table.add(name + ".weight", zero_init ? Mat::Zero(in, out) : glorot(in, out, rng));
    if (bias) bias_ = table.add(name + ".bias", Mat::Zero(1, out));
}

Var Linear::operator()(const Var& x) const {
    Var y = ag::matmul(x, weight_);
    return bias_.defined() ? ag::add_row(y, bias_) : y;
}

LayerNorm::LayerNorm(ParamTable& table, const std::string& name, Index width) {
    gamma_ = table.add(name + ".gamma", Mat::Ones(1, width));
    beta_ = table.add(name + ".beta", Mat::Zero(1, width));
}

Var LayerNorm::operator()(const Var& x) const { return ag::layer_norm(x, gamma_, beta_); }

Mlp::Mlp(ParamTable& table, const std::string& name, const std::vector<Index>& widths, Rng& rng, bool zero_last) {
    if (widths.size() < 2) throw InvalidArgument("Mlp: need at least input and output width");
    for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
        const bool last = i + 2 == widths.size();
        layers_.emplace_back(table, name + "." + std::to_string(i), widths[i], widths[i + 1], rng, true,
                             last && zero_last);
    }
}

Var Mlp::operator()(const Var& x) const {
    Var h = x;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        h = layers_[i](h);
        if (i + 1 < layers_.size()) h = ag::gelu(h);
    }
    return h;
}

Attention::Attention(ParamTable& table, const std::string& name, Index width, Index heads, Rng& rng)
    : width_(width), heads_(heads) {
    if (heads < 1 || width % heads != 0) throw InvalidArgument("Attention: width must be divisible by heads");
    q_ = Linear(table, name + ".q", width, width, rng);
    k_ = Linear(table, name + ".k", width, width, rng);
    v_ = Linear(table, name + ".v", width, width, rng);
    o_ = Linear(table, name + ".o", width, width, rng);
}

Var Attention::operator()(const Var& q, const Var& k, const Var& v) const {
    Var Q = q_(q);
    Var K = k_(k);
    Var V = v_(v);
    const Index dh = width_ / heads_;
    const Real inv_sqrt = 1.0 / std::sqrt(static_cast<Real>(dh));
    std::vector<Var> heads;
    heads.reserve(heads_);
    for (Index h = 0; h < heads_; ++h) {
        Var qh = heads_ == 1 ? Q : ag::slice_cols(Q, h * dh, dh);
        Var kh = heads_ == 1 ? K : ag::slice_cols(K, h * dh, dh);
        Var vh = heads_ == 1 ? V : ag::slice_cols(V, h * dh, dh);
        Var weights = ag::softmax_rows(ag::scale(ag::matmul_nt(qh, kh), inv_sqrt));
        heads.push_back(ag::matmul(weights, vh));
    }
    return o_(heads_ == 1 ? heads.front() : ag::concat_cols(heads));
}

TransformerBlock::TransformerBlock(ParamTable& table, const std::string& name, Index width, Index heads, Rng& rng) {
    norm1_ = LayerNorm(table, name + ".norm1", width);
    attn_ = Attention(table, name + ".attn", width, heads, rng);
    norm2_ = LayerNorm(table, name + ".norm2", width);
    mlp_ = Mlp(table, name + ".mlp", {width, 2 * width, width}, rng);
}

Var TransformerBlock::operator()(const Var& x) const {
    Var h = norm1_(x);
    Var y = ag::add(x, attn_(h, h, h));
    return ag::add(y, mlp_(norm2_(y)));
}

FourierEmbedding::FourierEmbedding(Index width, Real sigma, std::uint64_t seed) {
    if (width < 2 || width % 2 != 0) throw InvalidArgument("FourierEmbedding: width must be even and >= 2");
    Rng rng(seed);
    basis_.resize(3, width / 2);
    for (Index i = 0; i < basis_.size(); ++i) basis_.data()[i] = sigma * rng.normal();
}

Mat FourierEmbedding::operator()(const Points& xyz) const {
    Mat proj = (xyz * basis_) * (2.0 * M_PI);
    Mat out(xyz.rows(), 2 * basis_.cols());
    out.leftCols(basis_.cols()) = proj.array().sin();
    out.rightCols(basis_.cols()) = proj.array().cos();
    return out;
}

}  // namespace partprompt::nn
