// SPDX-License-Identifier: Apache-2.0

#include "partprompt/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

namespace partprompt::ag {

namespace {

thread_local bool g_grad_enabled = true;

// tanh through the vectorized exp; accurate to a few ulp away from zero,
// ~1e-16 absolute near it.
Mat fast_tanh(const Mat& y) {
    const auto e = (2.0 * y.array().cwiseMax(-40.0).cwiseMin(40.0)).exp();
    return (1.0 - 2.0 / (e + 1.0)).matrix();
}

bool needs(const Node& self, std::size_t i) { return self.parents[i]->requires_grad; }

template <class Fn>
Var make(Mat value, std::initializer_list<const Var*> inputs, Fn&& fn) {
    auto node = std::make_shared<Node>();
    node->value = std::move(value);
    if (!g_grad_enabled) return Var(node);
    bool any = false;
    for (const Var* v : inputs) any = any || v->requires_grad();
    if (!any) return Var(node);
    node->requires_grad = true;
    for (const Var* v : inputs) node->parents.push_back(v->node());
    node->backward_fn = std::forward<Fn>(fn);
    return Var(node);
}

template <class Fn>
Var make_n(Mat value, const std::vector<Var>& inputs, Fn&& fn) {
    auto node = std::make_shared<Node>();
    node->value = std::move(value);
    if (!g_grad_enabled) return Var(node);
    bool any = false;
    for (const Var& v : inputs) any = any || v.requires_grad();
    if (!any) return Var(node);
    node->requires_grad = true;
    for (const Var& v : inputs) node->parents.push_back(v.node());
    node->backward_fn = std::forward<Fn>(fn);
    return Var(node);
}

void check_same_shape(const Var& a, const Var& b, const char* op) {
    if (a.rows() != b.rows() || a.cols() != b.cols())
        throw InvalidArgument(std::string(op) + ": shape mismatch (" + std::to_string(a.rows()) + "x" +
                              std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                              std::to_string(b.cols()) + ")");
}

Real log_sigmoid(Real u) { return -(std::max(-u, 0.0) + std::log1p(std::exp(-std::abs(u)))); }
Real sigmoid_scalar(Real u) {
    if (u >= 0) return 1.0 / (1.0 + std::exp(-u));
    const Real e = std::exp(u);
    return e / (1.0 + e);
}

}  // namespace

void Node::accumulate(const Mat& g) {
    if (grad.size() == 0)
        grad = g;
    else
        grad += g;
}

Mat& Node::grad_buffer() {
    if (grad.size() == 0) grad = Mat::Zero(value.rows(), value.cols());
    return grad;
}

Var::Var(Mat value, bool requires_grad) : node_(std::make_shared<Node>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
}

Real Var::item() const {
    if (rows() != 1 || cols() != 1) throw InvalidArgument("Var::item on non-scalar");
    return node_->value(0, 0);
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

void backward(const Var& root) {
    if (!root.defined() || root.rows() != 1 || root.cols() != 1)
        throw InvalidArgument("backward: root must be a defined 1x1 value");
    if (!root.requires_grad()) return;

    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack{{root.node().get(), 0}};
    seen.insert(root.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node* p = node->parents[next++].get();
            if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    root.node()->accumulate(Mat::Ones(1, 1));
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (!n->backward_fn || n->grad.size() == 0) continue;
        n->backward_fn(*n);
        n->grad.resize(0, 0);
    }
}

Var constant(Mat value) { return Var(std::move(value), false); }
Var detach(const Var& v) { return Var(v.value(), false); }

Mat SparseRows::apply(const Mat& in) const {
    Mat out = Mat::Zero(n_out, in.cols());
    for (Index r = 0; r < n_out; ++r)
        for (int k = offsets[r]; k < offsets[r + 1]; ++k) out.row(r) += weights[k] * in.row(cols[k]);
    return out;
}

Var matmul(const Var& a, const Var& b) {
    if (a.cols() != b.rows()) throw InvalidArgument("matmul: inner dimension mismatch");
    return make(a.value() * b.value(), {&a, &b}, [](Node& self) {
        const Mat& A = self.parents[0]->value;
        const Mat& B = self.parents[1]->value;
        if (needs(self, 0)) self.parents[0]->accumulate(self.grad * B.transpose());
        if (needs(self, 1)) self.parents[1]->accumulate(A.transpose() * self.grad);
    });
}

Var matmul_nt(const Var& a, const Var& b) {
    if (a.cols() != b.cols()) throw InvalidArgument("matmul_nt: inner dimension mismatch");
    return make(a.value() * b.value().transpose(), {&a, &b}, [](Node& self) {
        const Mat& A = self.parents[0]->value;
        const Mat& B = self.parents[1]->value;
        if (needs(self, 0)) self.parents[0]->accumulate(self.grad * B);
        if (needs(self, 1)) self.parents[1]->accumulate(self.grad.transpose() * A);
    });
}

Var transpose(const Var& a) {
    return make(a.value().transpose(), {&a},
                [](Node& self) { self.parents[0]->accumulate(self.grad.transpose()); });
}

Var add(const Var& a, const Var& b) {
    check_same_shape(a, b, "add");
    return make(a.value() + b.value(), {&a, &b}, [](Node& self) {
        if (needs(self, 0)) self.parents[0]->accumulate(self.grad);
        if (needs(self, 1)) self.parents[1]->accumulate(self.grad);
    });
}

Var sub(const Var& a, const Var& b) {
    check_same_shape(a, b, "sub");
    return make(a.value() - b.value(), {&a, &b}, [](Node& self) {
        if (needs(self, 0)) self.parents[0]->accumulate(self.grad);
        if (needs(self, 1)) self.parents[1]->accumulate(-self.grad);
    });
}

Var mul(const Var& a, const Var& b) {
    check_same_shape(a, b, "mul");
    return make(a.value().cwiseProduct(b.value()), {&a, &b}, [](Node& self) {
        if (needs(self, 0)) self.parents[0]->accumulate(self.grad.cwiseProduct(self.parents[1]->value));
        if (needs(self, 1)) self.parents[1]->accumulate(self.grad.cwiseProduct(self.parents[0]->value));
    });
}

Var scale(const Var& a, Real s) {
    return make(a.value() * s, {&a}, [s](Node& self) { self.parents[0]->accumulate(self.grad * s); });
}

Var add_row(const Var& a, const Var& row) {
    if (row.rows() != 1 || row.cols() != a.cols()) throw InvalidArgument("add_row: row must be 1 x cols");
    Mat out = a.value();
    out.rowwise() += row.value().row(0);
    return make(std::move(out), {&a, &row}, [](Node& self) {
        if (needs(self, 0)) self.parents[0]->accumulate(self.grad);
        if (needs(self, 1)) self.parents[1]->accumulate(self.grad.colwise().sum());
    });
}

Var mul_col(const Var& a, const Var& col) {
    if (col.cols() != 1 || col.rows() != a.rows()) throw InvalidArgument("mul_col: column must be rows x 1");
    Mat out = a.value().array().colwise() * col.value().col(0).array();
    return make(std::move(out), {&a, &col}, [](Node& self) {
        const Mat& A = self.parents[0]->value;
        const Mat& c = self.parents[1]->value;
        if (needs(self, 0)) {
            Mat g = self.grad.array().colwise() * c.col(0).array();
            self.parents[0]->accumulate(g);
        }
        if (needs(self, 1)) self.parents[1]->accumulate(self.grad.cwiseProduct(A).rowwise().sum());
    });
}

Var gelu(const Var& a) {
    static constexpr Real k = 0.7978845608028654;
    static constexpr Real c = 0.044715;
    const auto x = a.value().array();
    Mat t = fast_tanh((k * (x + c * x.cube())).matrix());
    Mat out = 0.5 * x * (1.0 + t.array());
    return make(std::move(out), {&a}, [t = std::move(t)](Node& self) {
        const auto x = self.parents[0]->value.array();
        const auto ta = t.array();
        Mat d = 0.5 * (1.0 + ta) + 0.5 * x * (1.0 - ta.square()) * k * (1.0 + 3.0 * c * x.square());
        self.parents[0]->accumulate(self.grad.cwiseProduct(d));
    });
}

Var relu(const Var& a) {
    return make(a.value().cwiseMax(0.0), {&a}, [](Node& self) {
        Mat d = (self.parents[0]->value.array() > 0.0).cast<Real>();
        self.parents[0]->accumulate(self.grad.cwiseProduct(d));
    });
}

Var tanh(const Var& a) {
    Mat out = fast_tanh(a.value());
    return make(std::move(out), {&a}, [](Node& self) {
        Mat d = 1.0 - self.value.array().square();
        self.parents[0]->accumulate(self.grad.cwiseProduct(d));
    });
}

Var sigmoid(const Var& a) {
    Mat out = 0.5 * (1.0 + fast_tanh(0.5 * a.value()).array());
    return make(std::move(out), {&a}, [](Node& self) {
        Mat d = self.value.array() * (1.0 - self.value.array());
        self.parents[0]->accumulate(self.grad.cwiseProduct(d));
    });
}

Var sqrt_eps(const Var& a, Real eps) {
    Mat out = (a.value().array() + eps).sqrt();
    return make(out, {&a}, [](Node& self) {
        Mat d = 0.5 / self.value.array();
        self.parents[0]->accumulate(self.grad.cwiseProduct(d));
    });
}

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, Real eps) {
    const Index n = x.rows();
    const Index c = x.cols();
    if (gamma.cols() != c || beta.cols() != c) throw InvalidArgument("layer_norm: parameter width mismatch");
    Mat xhat(n, c);
    Eigen::VectorXd inv_std(n);
    for (Index r = 0; r < n; ++r) {
        const Real mu = x.value().row(r).mean();
        const Real var = (x.value().row(r).array() - mu).square().mean();
        inv_std(r) = 1.0 / std::sqrt(var + eps);
        xhat.row(r) = (x.value().row(r).array() - mu) * inv_std(r);
    }
    Mat out = xhat.array().rowwise() * gamma.value().row(0).array();
    out.rowwise() += beta.value().row(0);
    return make(std::move(out), {&x, &gamma, &beta}, [xhat, inv_std](Node& self) {
        const Mat& g = self.grad;
        const Mat& gam = self.parents[1]->value;
        if (needs(self, 1)) self.parents[1]->accumulate(g.cwiseProduct(xhat).colwise().sum());
        if (needs(self, 2)) self.parents[2]->accumulate(g.colwise().sum());
        if (needs(self, 0)) {
            Mat dxhat = g.array().rowwise() * gam.row(0).array();
            Mat dx(dxhat.rows(), dxhat.cols());
            for (Index r = 0; r < dxhat.rows(); ++r) {
                const Real m1 = dxhat.row(r).mean();
                const Real m2 = dxhat.row(r).cwiseProduct(xhat.row(r)).mean();
                dx.row(r) = (dxhat.row(r).array() - m1 - xhat.row(r).array() * m2) * inv_std(r);
            }
            self.parents[0]->accumulate(dx);
        }
    });
}

Var softmax_rows(const Var& a) {
    Mat out = a.value();
    for (Index r = 0; r < out.rows(); ++r) {
        const Real m = out.row(r).maxCoeff();
        out.row(r) = (out.row(r).array() - m).exp();
        out.row(r) /= out.row(r).sum();
    }
    return make(out, {&a}, [](Node& self) {
        const Mat& y = self.value;
        Eigen::VectorXd dots = self.grad.cwiseProduct(y).rowwise().sum();
        Mat dx = y.array() * (self.grad.array().colwise() - dots.array());
        self.parents[0]->accumulate(dx);
    });
}

Var concat_rows(const std::vector<Var>& parts) {
    if (parts.empty()) throw InvalidArgument("concat_rows: no inputs");
    Index rows = 0;
    const Index cols = parts.front().cols();
    for (const auto& p : parts) {
        if (p.cols() != cols) throw InvalidArgument("concat_rows: column mismatch");
        rows += p.rows();
    }
    Mat out(rows, cols);
    Index at = 0;
    for (const auto& p : parts) {
        out.middleRows(at, p.rows()) = p.value();
        at += p.rows();
    }
    return make_n(std::move(out), parts, [](Node& self) {
        Index at = 0;
        for (auto& p : self.parents) {
            const Index r = p->value.rows();
            if (p->requires_grad) p->accumulate(self.grad.middleRows(at, r));
            at += r;
        }
    });
}

Var concat_cols(const std::vector<Var>& parts) {
    if (parts.empty()) throw InvalidArgument("concat_cols: no inputs");
    Index cols = 0;
    const Index rows = parts.front().rows();
    for (const auto& p : parts) {
        if (p.rows() != rows) throw InvalidArgument("concat_cols: row mismatch");
        cols += p.cols();
    }
    Mat out(rows, cols);
    Index at = 0;
    for (const auto& p : parts) {
        out.middleCols(at, p.cols()) = p.value();
        at += p.cols();
    }
    return make_n(std::move(out), parts, [](Node& self) {
        Index at = 0;
        for (auto& p : self.parents) {
            const Index c = p->value.cols();
            if (p->requires_grad) p->accumulate(self.grad.middleCols(at, c));
            at += c;
        }
    });
}

Var slice_rows(const Var& a, Index start, Index count) {
    if (start < 0 || count < 0 || start + count > a.rows()) throw InvalidArgument("slice_rows: out of range");
    return make(a.value().middleRows(start, count), {&a}, [start, count](Node& self) {
        self.parents[0]->grad_buffer().middleRows(start, count) += self.grad;
    });
}

Var slice_cols(const Var& a, Index start, Index count) {
    if (start < 0 || count < 0 || start + count > a.cols()) throw InvalidArgument("slice_cols: out of range");
    return make(a.value().middleCols(start, count), {&a}, [start, count](Node& self) {
        self.parents[0]->grad_buffer().middleCols(start, count) += self.grad;
    });
}

Var gather_rows(const Var& a, const std::vector<int>& index) {
    Mat out(static_cast<Index>(index.size()), a.cols());
    for (std::size_t i = 0; i < index.size(); ++i) {
        if (index[i] < 0 || index[i] >= a.rows()) throw InvalidArgument("gather_rows: index out of range");
        out.row(static_cast<Index>(i)) = a.value().row(index[i]);
    }
    return make(std::move(out), {&a}, [index](Node& self) {
        Mat& g = self.parents[0]->grad_buffer();
        for (std::size_t i = 0; i < index.size(); ++i) g.row(index[i]) += self.grad.row(static_cast<Index>(i));
    });
}

Var reshape(const Var& a, Index rows, Index cols) {
    if (rows * cols != a.rows() * a.cols()) throw InvalidArgument("reshape: element count mismatch");
    Mat out = Eigen::Map<const Mat>(a.value().data(), rows, cols);
    return make(std::move(out), {&a}, [](Node& self) {
        const Mat& p = self.parents[0]->value;
        Mat g = Eigen::Map<const Mat>(self.grad.data(), p.rows(), p.cols());
        self.parents[0]->accumulate(g);
    });
}

Var sparse_rows(const Var& a, const SparseRows& map) {
    if (map.n_in != a.rows()) throw InvalidArgument("sparse_rows: input row count mismatch");
    return make(map.apply(a.value()), {&a}, [map](Node& self) {
        Mat& g = self.parents[0]->grad_buffer();
        for (Index r = 0; r < map.n_out; ++r)
            for (int k = map.offsets[r]; k < map.offsets[r + 1]; ++k)
                g.row(map.cols[k]) += map.weights[k] * self.grad.row(r);
    });
}

Var group_max(const Var& a, const std::vector<IndexList>& groups) {
    const Index c = a.cols();
    Mat out(static_cast<Index>(groups.size()), c);
    Eigen::Matrix<int, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> arg(groups.size(), c);
    for (std::size_t g = 0; g < groups.size(); ++g) {
        if (groups[g].empty()) throw InvalidArgument("group_max: empty group");
        for (Index j = 0; j < c; ++j) {
            int best = groups[g][0];
            for (int r : groups[g])
                if (a.value()(r, j) > a.value()(best, j)) best = r;
            arg(static_cast<Index>(g), j) = best;
            out(static_cast<Index>(g), j) = a.value()(best, j);
        }
    }
    return make(std::move(out), {&a}, [arg](Node& self) {
        Mat& g = self.parents[0]->grad_buffer();
        for (Index r = 0; r < arg.rows(); ++r)
            for (Index j = 0; j < arg.cols(); ++j) g(arg(r, j), j) += self.grad(r, j);
    });
}

Var sum(const Var& a) {
    Mat out(1, 1);
    out(0, 0) = a.value().sum();
    return make(std::move(out), {&a}, [](Node& self) {
        const Mat& p = self.parents[0]->value;
        self.parents[0]->accumulate(Mat::Constant(p.rows(), p.cols(), self.grad(0, 0)));
    });
}

Var mean(const Var& a) {
    const Real n = static_cast<Real>(a.rows() * a.cols());
    return scale(sum(a), 1.0 / n);
}

Var row_sum(const Var& a) {
    Mat out = a.value().rowwise().sum();
    return make(std::move(out), {&a}, [](Node& self) {
        const Mat& p = self.parents[0]->value;
        Mat g = self.grad.col(0).replicate(1, p.cols());
        self.parents[0]->accumulate(g);
    });
}

Var focal_loss_logits(const Var& logits, const std::vector<std::uint8_t>& target, Real alpha, Real gamma) {
    const Index n = logits.rows() * logits.cols();
    if (static_cast<Index>(target.size()) != n) throw InvalidArgument("focal_loss: length mismatch");
    const Real* z = logits.value().data();
    Real total = 0.0;
    Mat grad_z(logits.rows(), logits.cols());
    for (Index i = 0; i < n; ++i) {
        const Real s = target[i] ? 1.0 : -1.0;
        const Real a = target[i] ? alpha : 1.0 - alpha;
        const Real u = s * z[i];
        const Real log_pt = log_sigmoid(u);
        const Real pt = std::exp(log_pt);
        const Real q = sigmoid_scalar(-u);
        const Real qg = gamma == 2.0 ? q * q : std::pow(q, gamma);
        total += -a * qg * log_pt;
        grad_z.data()[i] = s * a * qg * (gamma * pt * log_pt - q) / static_cast<Real>(n);
    }
    Mat out(1, 1);
    out(0, 0) = total / static_cast<Real>(n);
    return make(std::move(out), {&logits}, [grad_z](Node& self) {
        self.parents[0]->accumulate(grad_z * self.grad(0, 0));
    });
}

Var dice_loss_logits(const Var& logits, const std::vector<std::uint8_t>& target, Real smooth) {
    const Index n = logits.rows() * logits.cols();
    if (static_cast<Index>(target.size()) != n) throw InvalidArgument("dice_loss: length mismatch");
    const Real* z = logits.value().data();
    std::vector<Real> p(n);
    Real sum_pg = 0, sum_p = 0, sum_g = 0;
    for (Index i = 0; i < n; ++i) {
        p[i] = sigmoid_scalar(z[i]);
        sum_p += p[i];
        sum_g += target[i];
        sum_pg += p[i] * target[i];
    }
    const Real A = 2.0 * sum_pg + smooth;
    const Real B = sum_p + sum_g + smooth;
    Mat grad_z(logits.rows(), logits.cols());
    for (Index i = 0; i < n; ++i) {
        const Real dp = -(2.0 * target[i] * B - A) / (B * B);
        grad_z.data()[i] = dp * p[i] * (1.0 - p[i]);
    }
    Mat out(1, 1);
    out(0, 0) = 1.0 - A / B;
    return make(std::move(out), {&logits}, [grad_z](Node& self) {
        self.parents[0]->accumulate(grad_z * self.grad(0, 0));
    });
}

}  // namespace partprompt::ag
