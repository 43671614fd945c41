// SPDX-License-Identifier: Apache-2.0
//
// Shared helpers for the unit tests and the acceptance runner: finite
// differences, small model presets and scripted stand-ins for the network.

#pragma once

#include "partprompt/data.hpp"
#include "partprompt/model.hpp"
#include "partprompt/training.hpp"

#include <atomic>
#include <cmath>
#include <functional>
#include <map>
#include <thread>

namespace partprompt::testing {

/// Central-difference check of d loss / d param at one entry.
struct GradProbe {
    Real analytic = 0;
    Real numeric = 0;
    Real rel_error() const {
        const Real denom = std::max({std::abs(analytic), std::abs(numeric), 1e-6});
        return std::abs(analytic - numeric) / denom;
    }
};

/// `loss` must rebuild the graph from the current parameter values on each call.
inline GradProbe probe_gradient(ag::Var& param, Index entry, const std::function<ag::Var()>& loss, Real h = 1e-3) {
    param.zero_grad();
    const ag::Var l = loss();
    ag::backward(l);
    GradProbe g;
    g.analytic = param.grad().size() ? param.grad().data()[entry] : 0.0;
    param.zero_grad();
    ag::NoGradGuard guard;
    Real& x = param.mutable_value().data()[entry];
    const Real saved = x;
    x = saved + h;
    const Real up = loss().item();
    x = saved - h;
    const Real down = loss().item();
    x = saved;
    g.numeric = (up - down) / (2 * h);
    return g;
}

inline ModelConfig tiny_model_config(std::uint64_t seed = 1) {
    ModelConfig c;
    c.encoder.resolution = 16;
    c.encoder.channels = 8;
    c.encoder.transformer_layers = 1;
    c.encoder.n_patches = 16;
    c.encoder.patch_k = 4;
    c.encoder.heads = 2;
    c.encoder.plane_patch = 4;
    c.encoder.lift_hidden = 8;
    c.encoder.fourier_width = 8;
    c.decoder.layers = 1;
    c.decoder.width = 8;
    c.decoder.heads = 2;
    c.seed = seed;
    return c;
}

/// A shape on a random cloud whose parts are consecutive index runs of the
/// given sizes; points past the last run belong to no part.
inline data::LabeledShape partitioned_shape(const std::vector<int>& sizes, int n_points, std::uint64_t seed = 0) {
    data::LabeledShape s;
    Rng rng(seed);
    s.cloud.positions.resize(n_points, 3);
    for (Index i = 0; i < s.cloud.positions.size(); ++i) s.cloud.positions.data()[i] = rng.uniform(-1, 1);
    s.cloud.normals = Points::Zero(n_points, 3);
    s.cloud.normals.col(2).setOnes();
    s.cloud.colors = Points::Constant(n_points, 3, 0.5);
    s.cloud.normalized = true;
    int at = 0;
    for (int size : sizes) {
        IndexList idx(size);
        for (int k = 0; k < size; ++k) idx[k] = at++;
        s.parts.push_back(PartMask::from_indices(n_points, idx, MaskSource::ground_truth));
    }
    s.shape_id = "parts" + std::to_string(sizes.size());
    return s;
}

/// Plain encoding for stubs that only need the cloud.
inline std::shared_ptr<const Encoding> stub_encoding(const PointCloud& cloud) {
    auto e = std::make_shared<Encoding>();
    e->cloud = cloud;
    return e;
}

inline MaskPrediction prediction_from_mask(const PartMask& m, Real predicted_iou) {
    std::vector<Real> logits(m.size());
    for (std::size_t i = 0; i < m.size(); ++i) logits[i] = m.member[i] ? 8.0 : -8.0;
    return MaskPrediction::from_logits(std::move(logits), predicted_iou);
}

/// A mask with exactly the requested IoU against `gt` (rounded to 1/|gt|):
/// the first round(iou |gt|) foreground points.
inline PartMask mask_with_iou(const PartMask& gt, Real iou) {
    const IndexList fg = gt.indices();
    const auto keep = static_cast<std::size_t>(std::llround(iou * static_cast<Real>(fg.size())));
    PartMask m(gt.size(), MaskSource::predicted);
    for (std::size_t i = 0; i < keep && i < fg.size(); ++i) m.member[fg[i]] = 1;
    return m;
}

/// Returns the mask most consistent with the prompts among a fixed list of
/// candidate parts: the part containing the last positive prompt.
class PartLookupStub : public PromptableModel {
public:
    explicit PartLookupStub(std::vector<PartMask> parts, Real confidence = 0.95)
        : parts_(std::move(parts)), confidence_(confidence) {}

    std::shared_ptr<const Encoding> encode(const PointCloud& cloud) const override {
        ++encodes;
        return stub_encoding(cloud);
    }

    std::vector<MaskPrediction> decode(const Encoding& enc, const PromptSet& prompts) const override {
        ++decodes;
        Index target = -1;
        for (Index p = prompts.size() - 1; p >= 0 && target < 0; --p) {
            if (!prompts.signs[static_cast<std::size_t>(p)]) continue;
            const Vec3 q = prompts.points.row(p);
            Index best = 0;
            (enc.cloud.positions.rowwise() - q).rowwise().squaredNorm().minCoeff(&best);
            target = best;
        }
        PartMask out(static_cast<std::size_t>(enc.cloud.size()), MaskSource::predicted);
        if (target >= 0)
            for (const auto& part : parts_)
                if (part.member[static_cast<std::size_t>(target)]) {
                    out = part;
                    break;
                }
        std::vector<MaskPrediction> preds;
        const int n = prompts.size() == 1 ? 3 : 1;
        for (int m = 0; m < n; ++m) preds.push_back(prediction_from_mask(out, confidence_ - 0.01 * m));
        return preds;
    }

    mutable std::atomic<long> encodes{0};
    mutable std::atomic<long> decodes{0};

private:
    std::vector<PartMask> parts_;
    Real confidence_;
};

/// Replays a fixed IoU per round against one ground-truth mask. Round r is
/// inferred from the prompt count.
class ScriptedTraceStub : public PromptableModel {
public:
    ScriptedTraceStub(PartMask gt, std::vector<Real> trace) : gt_(std::move(gt)), trace_(std::move(trace)) {}

    std::shared_ptr<const Encoding> encode(const PointCloud& cloud) const override { return stub_encoding(cloud); }

    std::vector<MaskPrediction> decode(const Encoding&, const PromptSet& prompts) const override {
        const std::size_t r = std::min<std::size_t>(static_cast<std::size_t>(prompts.size()), trace_.size()) - 1;
        const PartMask m = mask_with_iou(gt_, trace_[r]);
        std::vector<MaskPrediction> preds;
        const int n = prompts.size() == 1 ? 3 : 1;
        for (int k = 0; k < n; ++k) preds.push_back(prediction_from_mask(m, 0.9));
        return preds;
    }

private:
    PartMask gt_;
    std::vector<Real> trace_;
};

/// Predicts the complement of a fixed mask on every round.
class ComplementStub : public PromptableModel {
public:
    explicit ComplementStub(PartMask gt) : gt_(std::move(gt)) {}
    std::shared_ptr<const Encoding> encode(const PointCloud& cloud) const override { return stub_encoding(cloud); }
    std::vector<MaskPrediction> decode(const Encoding&, const PromptSet& prompts) const override {
        PartMask c = gt_;
        for (auto& v : c.member) v = !v;
        std::vector<MaskPrediction> preds;
        for (int k = 0; k < (prompts.size() == 1 ? 3 : 1); ++k) preds.push_back(prediction_from_mask(c, 0.9));
        return preds;
    }

private:
    PartMask gt_;
};

/// Independent coin-flip masks, seeded from the prompt coordinates.
class RandomMaskStub : public PromptableModel {
public:
    std::shared_ptr<const Encoding> encode(const PointCloud& cloud) const override { return stub_encoding(cloud); }
    std::vector<MaskPrediction> decode(const Encoding& enc, const PromptSet& prompts) const override {
        std::uint64_t h = static_cast<std::uint64_t>(prompts.size());
        for (Index i = 0; i < prompts.points.size(); ++i)
            h = h * 1000003ULL + static_cast<std::uint64_t>(std::llround(prompts.points.data()[i] * 1e6));
        Rng rng(h);
        std::vector<MaskPrediction> preds;
        for (int k = 0; k < (prompts.size() == 1 ? 3 : 1); ++k) {
            PartMask m(static_cast<std::size_t>(enc.cloud.size()), MaskSource::predicted);
            for (auto& v : m.member) v = rng.uniform() < 0.5;
            preds.push_back(prediction_from_mask(m, rng.uniform()));
        }
        return preds;
    }
};

/// Each pseudo mask has its own IoU script and confidence. Masks are validated
/// in order, so the n-th first-round decode starts the n-th script.
class PerMaskScriptStub : public PromptableModel {
public:
    struct Entry {
        PartMask mask;
        std::vector<Real> trace;
        Real confidence = 0.9;
    };
    explicit PerMaskScriptStub(std::vector<Entry> entries) : entries_(std::move(entries)) {}

    std::shared_ptr<const Encoding> encode(const PointCloud& cloud) const override { return stub_encoding(cloud); }

    std::vector<MaskPrediction> decode(const Encoding&, const PromptSet& prompts) const override {
        if (prompts.size() == 1) ++current_;
        const Entry& e = entries_.at(current_ - 1);
        const std::size_t r = std::min<std::size_t>(static_cast<std::size_t>(prompts.size()), e.trace.size()) - 1;
        std::vector<MaskPrediction> out;
        for (int k = 0; k < (prompts.size() == 1 ? 3 : 1); ++k)
            out.push_back(prediction_from_mask(mask_with_iou(e.mask, e.trace[r]), e.confidence));
        return out;
    }

private:
    std::vector<Entry> entries_;
    mutable std::size_t current_ = 0;
};

/// Rises linearly from `first` to `last` over ten rounds.
inline std::vector<Real> ramp(Real first, Real last) {
    std::vector<Real> t(10);
    for (int k = 0; k < 10; ++k) t[k] = first + (last - first) * k / 9.0;
    return t;
}

/// Output depends only on the session's own cloud and history: the mask holds
/// the first |history| points and the score identifies the cloud.
class HistoryEchoStub : public PromptableModel {
public:
    std::shared_ptr<const Encoding> encode(const PointCloud& cloud) const override {
        ++encodes;
        return stub_encoding(cloud);
    }
    std::vector<MaskPrediction> decode(const Encoding& enc, const PromptSet& prompts) const override {
        std::this_thread::sleep_for(std::chrono::microseconds(200));
        PartMask m(static_cast<std::size_t>(enc.cloud.size()), MaskSource::predicted);
        for (Index i = 0; i < prompts.size() && i < enc.cloud.size(); ++i) m.member[static_cast<std::size_t>(i)] = 1;
        return {prediction_from_mask(m, fingerprint(enc.cloud))};
    }
    static Real fingerprint(const PointCloud& c) { return 0.5 + 0.25 * c.positions(0, 0); }
    mutable std::atomic<long> encodes{0};
};

/// Ray-triangle intersection parameter (Moller-Trumbore), or a negative value.
inline Real ray_hit(const Vec3& o, const Vec3& d, const Vec3& a, const Vec3& b, const Vec3& c) {
    const Vec3 e1 = b - a, e2 = c - a;
    const Vec3 p = d.cross(e2);
    const Real det = e1.dot(p);
    if (std::abs(det) < 1e-14) return -1;
    const Vec3 t = o - a;
    const Real u = t.dot(p) / det;
    if (u < 0 || u > 1) return -1;
    const Vec3 q = t.cross(e1);
    const Real v = d.dot(q) / det;
    if (v < 0 || u + v > 1) return -1;
    return e2.dot(q) / det;
}

/// True if some point of `part` is unoccluded from one of the 26 grid
/// directions at distance 4, tested by casting rays against every triangle.
inline bool part_visible(const data::LabeledShape& s, int part) {
    const TriangleMesh& m = *s.mesh;
    for (int i : s.parts[part].indices()) {
        const Vec3 x = s.cloud.positions.row(i);
        for (int dx = -1; dx <= 1; ++dx)
            for (int dy = -1; dy <= 1; ++dy)
                for (int dz = -1; dz <= 1; ++dz) {
                    if (!dx && !dy && !dz) continue;
                    const Vec3 eye = Vec3(dx, dy, dz).normalized() * 4.0;
                    const Vec3 dir = x - eye;
                    bool blocked = false;
                    for (Index f = 0; f < m.face_count() && !blocked; ++f) {
                        if (s.cloud.face_of[i] == f) continue;
                        const Real t = ray_hit(eye, dir, m.vertices.row(m.faces(f, 0)), m.vertices.row(m.faces(f, 1)),
                                               m.vertices.row(m.faces(f, 2)));
                        blocked = t > 0 && t < 1 - 1e-9;
                    }
                    if (!blocked) return true;
                }
    }
    return false;
}

/// Scalar objective through the whole network on one shape: fused field,
/// tokens, a decode for `n_prompts` prompts and every loss term. With
/// `freeze_targets` the objective is rebuilt from primitive ops and the
/// non-differentiable choices (selected candidate, binarized IoU targets) are
/// taken from the first evaluation after reset(), so finite differences see a
/// function that is smooth wherever the network itself is.
struct FullLoss {
    const Model& model;
    const data::LabeledShape& shape;
    int part = 0;
    int n_prompts = 1;
    training::LossConfig cfg = {};
    bool freeze_targets = true;

    struct Frozen {
        int selected = 0;
        Mat iou_target;
    };
    std::shared_ptr<std::optional<Frozen>> frozen = std::make_shared<std::optional<Frozen>>();

    void reset() const { frozen->reset(); }

    PromptSet prompts() const {
        const PointCloud& cloud = shape.cloud;
        const PartMask& gt = shape.parts[static_cast<std::size_t>(part)];
        PromptSet p;
        const IndexList fg = gt.indices();
        for (int k = 0; k < n_prompts; ++k)
            p.push(cloud.positions.row(fg[static_cast<std::size_t>(k) * fg.size() / n_prompts]), k % 3 != 2);
        if (n_prompts > 1) {
            std::vector<Real> prev(static_cast<std::size_t>(cloud.size()));
            for (std::size_t i = 0; i < prev.size(); ++i) prev[i] = gt[i] ? 1.5 : -0.5 - 0.001 * static_cast<Real>(i % 7);
            p.prev_logits = prev;
        }
        return p;
    }

    ag::Var operator()() const {
        const PointCloud& cloud = shape.cloud;
        const TriplaneField field = Encoder::fuse(model.encoder.encode_frozen(cloud), model.encoder.encode_learnable(cloud));
        const TokenSet tokens = model.encoder.tokenize(field, cloud);
        const DecoderContext ctx = model.decoder.prepare(field, tokens, cloud);
        const PartMask& gt = shape.parts[static_cast<std::size_t>(part)];
        const DecodeOutput out = model.decoder(ctx, field, tokens, prompts());
        const auto triplet = training::triplet_loss(field, shape.parts, cloud, cfg.triplet_margin, 64, 7);
        if (!freeze_targets) return training::total_loss(out, gt, triplet.loss, cfg).total;
        if (!frozen->has_value()) {
            const auto r = training::total_loss(out, gt, std::nullopt, cfg);
            Frozen f;
            f.selected = r.terms.selected;
            f.iou_target.resize(1, out.count());
            for (int c = 0; c < out.count(); ++c) {
                PartMask pred(gt.size(), MaskSource::predicted);
                for (std::size_t i = 0; i < gt.size(); ++i) pred.member[i] = out.logits.value()(static_cast<Index>(i), c) > 0;
                f.iou_target(0, c) = point_iou(pred, gt);
            }
            *frozen = f;
        }
        const Frozen& f = **frozen;
        const ag::Var col = ag::slice_cols(out.logits, f.selected, 1);
        const ag::Var mask = ag::add(ag::focal_loss_logits(col, gt.member, cfg.focal_alpha, cfg.focal_gamma),
                                     ag::dice_loss_logits(col, gt.member));
        const ag::Var diff = ag::sub(out.iou, ag::constant(f.iou_target));
        const ag::Var iou = ag::scale(ag::mean(ag::mul(diff, diff)), cfg.iou_head_weight);
        return ag::add(ag::add(mask, iou), ag::scale(triplet.loss, cfg.lambda_triplet));
    }
};

struct ProbeRecord {
    std::string where;
    GradProbe probe;
};

/// Central-difference probes of randomly chosen trainable entries (tensor
/// uniform over each table, entry uniform within the tensor).
inline std::vector<ProbeRecord> probe_model(Model& model, const FullLoss& loss, int count, std::uint64_t seed,
                                            Real h = 1e-3) {
    std::vector<ProbeRecord> out;
    Rng rng(seed);
    auto tables = model.trainable_tables();
    for (int k = 0; k < count; ++k) {
        auto& [group, table] = tables[static_cast<std::size_t>(k) % tables.size()];
        auto& entries = table->entries();
        auto& [name, var] = entries[rng.below(entries.size())];
        const Index e = static_cast<Index>(rng.below(static_cast<std::uint64_t>(var.value().size())));
        for (auto& [g, t] : tables) t->zero_grad();
        loss.reset();
        out.push_back({group + "/" + name + "[" + std::to_string(e) + "]", probe_gradient(var, e, loss, h)});
    }
    for (auto& [g, t] : tables) t->zero_grad();
    return out;
}

}  // namespace partprompt::testing
