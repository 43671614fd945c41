// SPDX-License-Identifier: Apache-2.0
//
// Minimal reverse-mode automatic differentiation over dense row-major
// matrices. Every op records a closure that pushes the output gradient to its
// inputs; `backward` walks the recorded graph in reverse topological order.
//
// Graph recording is skipped when no input requires a gradient or when a
// NoGradGuard is active on the calling thread, so inference paths allocate no
// graph and are reentrant.

#pragma once

#include "partprompt/common.hpp"

#include <functional>
#include <memory>
#include <vector>

namespace partprompt::ag {

struct Node {
    Mat value;
    Mat grad;  // empty until a gradient arrives
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;

    void accumulate(const Mat& g);
    /// Gradient storage, zero-filled on first use, for scatter-style backward passes.
    Mat& grad_buffer();
};

class Var {
public:
    Var() = default;
    explicit Var(Mat value, bool requires_grad = false);
    explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

    bool defined() const { return node_ != nullptr; }
    const Mat& value() const { return node_->value; }
    /// Mutable access for parameters (optimizer updates, finite differences).
    Mat& mutable_value() { return node_->value; }
    const Mat& grad() const { return node_->grad; }
    Mat& mutable_grad() { return node_->grad; }
    bool requires_grad() const { return node_ && node_->requires_grad; }
    void set_requires_grad(bool on) { node_->requires_grad = on; }
    void zero_grad() { node_->grad.resize(0, 0); }
    Index rows() const { return node_->value.rows(); }
    Index cols() const { return node_->value.cols(); }
    Real item() const;
    const std::shared_ptr<Node>& node() const { return node_; }

private:
    std::shared_ptr<Node> node_;
};

bool grad_enabled();

class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

/// Seeds d(root)/d(root) = 1 for a 1x1 root and propagates to every leaf that
/// requires a gradient. Leaf gradients accumulate across calls.
void backward(const Var& root);

Var constant(Mat value);
Var detach(const Var& v);

/// Row-sparse linear map: out.row(r) = sum_k weight[k] * in.row(col[k]) for k in
/// [offsets[r], offsets[r+1]).
struct SparseRows {
    Index n_out = 0;
    Index n_in = 0;
    std::vector<int> offsets{0};
    std::vector<int> cols;
    std::vector<Real> weights;

    void push(int col, Real w) {
        cols.push_back(col);
        weights.push_back(w);
    }
    void end_row() {
        offsets.push_back(static_cast<int>(cols.size()));
        ++n_out;
    }
    Mat apply(const Mat& in) const;
};

// Linear algebra.
Var matmul(const Var& a, const Var& b);
/// a * b^T.
Var matmul_nt(const Var& a, const Var& b);
Var transpose(const Var& a);

// Elementwise.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, Real s);
/// a + row, with `row` (1 x C) broadcast over every row of a.
Var add_row(const Var& a, const Var& row);
/// a (R x C) times column (R x 1) broadcast across columns.
Var mul_col(const Var& a, const Var& col);
Var gelu(const Var& a);
Var relu(const Var& a);
Var tanh(const Var& a);
Var sigmoid(const Var& a);
Var sqrt_eps(const Var& a, Real eps);

// Normalization and attention helpers.
Var layer_norm(const Var& x, const Var& gamma, const Var& beta, Real eps = 1e-5);
Var softmax_rows(const Var& a);

// Shape manipulation.
Var concat_rows(const std::vector<Var>& parts);
Var concat_cols(const std::vector<Var>& parts);
Var slice_rows(const Var& a, Index start, Index count);
Var slice_cols(const Var& a, Index start, Index count);
Var gather_rows(const Var& a, const std::vector<int>& index);
/// Reinterprets the row-major buffer with a new shape.
Var reshape(const Var& a, Index rows, Index cols);
Var sparse_rows(const Var& a, const SparseRows& map);
/// out.row(g) = elementwise max over rows in groups[g].
Var group_max(const Var& a, const std::vector<IndexList>& groups);

// Reductions.
Var sum(const Var& a);
Var mean(const Var& a);
/// Per-row sum, R x 1.
Var row_sum(const Var& a);

/// Mean alpha-balanced focal loss on logits with binary targets. Evaluated
/// through log-sigmoid so saturated logits keep a usable gradient.
Var focal_loss_logits(const Var& logits, const std::vector<std::uint8_t>& target, Real alpha, Real gamma);
/// 1 - (2 sum(p g) + smooth) / (sum p + sum g + smooth) on sigmoid(logits).
Var dice_loss_logits(const Var& logits, const std::vector<std::uint8_t>& target, Real smooth = 1.0);

}  // namespace partprompt::ag
