// SPDX-License-Identifier: Apache-2.0

#include "partprompt/eval.hpp"

#include <algorithm>
#include <chrono>
#include <limits>
#include <sstream>

namespace partprompt::eval {

Real EvalReport::monotone_share() const {
    if (shapes.empty()) return 1.0;
    int ok = 0;
    for (const auto& s : shapes) ok += std::is_sorted(s.kept.begin(), s.kept.end()) ? 1 : 0;
    return static_cast<Real>(ok) / static_cast<Real>(shapes.size());
}

Real EvalReport::mean_at(Real key) const {
    for (std::size_t i = 0; i < keys.size(); ++i)
        if (std::abs(keys[i] - key) < 1e-9) return mean[i];
    throw InvalidArgument("EvalReport: no entry for the requested key");
}

io::json to_json(const EvalReport& r) {
    io::json traces = io::json::array();
    for (const auto& t : r.traces) traces.push_back({{"shape_id", t.shape_id}, {"part", t.part}, {"iou", t.iou}});
    io::json shapes = io::json::array();
    for (const auto& s : r.shapes) shapes.push_back({{"shape_id", s.shape_id}, {"kept", s.kept}, {"best_iou", s.best_iou}});
    io::json j = {{"protocol", r.protocol}, {"keys", r.keys},       {"mean", r.mean},     {"instances", r.instances},
                  {"traces", traces},       {"config", r.config}, {"seconds", r.seconds}};
    if (r.protocol == "auto") {
        j["best_candidate_iou"] = r.best_candidate_iou;
        j["shapes"] = shapes;
        j["monotone_share"] = r.monotone_share();
    }
    if (r.empty_warning) j["warning"] = "no candidates survived filtering";
    return j;
}

std::string to_csv(const EvalReport& r) {
    std::ostringstream out;
    out.precision(6);
    out << "metric,value\n";
    if (r.protocol == "interactive") {
        for (std::size_t i = 0; i < r.keys.size(); ++i) out << "IoU@" << static_cast<int>(r.keys[i]) << ',' << r.mean[i] << '\n';
    } else {
        out << "best_candidate_iou," << r.best_candidate_iou << '\n';
        for (std::size_t i = 0; i < r.keys.size(); ++i) out << "kept_masks@T=" << r.keys[i] << ',' << r.mean[i] << '\n';
    }
    return out.str();
}

EvalReport eval_interactive(const PromptableModel& model, const std::vector<data::LabeledShape>& dataset,
                            std::vector<int> ks, std::uint64_t seed) {
    if (ks.empty()) throw InvalidArgument("eval_interactive: no k values");
    std::sort(ks.begin(), ks.end());
    ks.erase(std::unique(ks.begin(), ks.end()), ks.end());
    if (ks.front() < 1) throw InvalidArgument("eval_interactive: k must be >= 1");
    const auto t0 = std::chrono::steady_clock::now();
    EvalReport r;
    r.protocol = "interactive";
    for (int k : ks) r.keys.push_back(k);
    r.mean.assign(ks.size(), 0.0);
    r.config = {{"ks", ks}, {"seed", seed}, {"first_round_selection", "predicted_iou"}};
    for (const auto& shape : dataset) {
        const auto enc = model.encode(shape.cloud);
        for (std::size_t p = 0; p < shape.parts.size(); ++p) {
            const PartMask& gt = shape.parts[p];
            if (gt.count() == 0) continue;
            // Seed depends only on the shape and part, so results do not depend on the k list or on order.
            Rng mixer(seed ^ std::hash<std::string>{}(shape.shape_id));
            for (std::size_t j = 0; j <= p; ++j) mixer.next();
            const auto trace = training::simulate_interactive(model, *enc, gt, ks.back(), mixer.next(),
                                                              training::FirstRoundSelection::predicted_iou);
            InstanceTrace t{shape.shape_id, static_cast<int>(p), {}};
            for (std::size_t i = 0; i < ks.size(); ++i) {
                t.iou.push_back(trace.iou_at(ks[i]));
                r.mean[i] += t.iou.back();
            }
            r.traces.push_back(std::move(t));
            ++r.instances;
        }
    }
    if (r.instances > 0)
        for (auto& m : r.mean) m /= r.instances;
    r.seconds = std::chrono::duration<Real>(std::chrono::steady_clock::now() - t0).count();
    return r;
}

IndexList max_weight_assignment(const Mat& weights) {
    // Hungarian method (potentials form) on costs = -weights, with rows <= cols
    // arranged by transposing when needed.
    const bool transposed = weights.rows() > weights.cols();
    const Mat w = transposed ? Mat(weights.transpose()) : weights;
    const Index n = w.rows(), m = w.cols();
    IndexList result(static_cast<std::size_t>(weights.rows()), -1);
    if (n == 0 || m == 0) return result;
    const Real inf = std::numeric_limits<Real>::infinity();
    std::vector<Real> u(n + 1, 0), v(m + 1, 0);
    std::vector<Index> p(m + 1, 0), way(m + 1, 0);
    for (Index i = 1; i <= n; ++i) {
        p[0] = i;
        Index j0 = 0;
        std::vector<Real> minv(m + 1, inf);
        std::vector<bool> used(m + 1, false);
        do {
            used[j0] = true;
            const Index i0 = p[j0];
            Real delta = inf;
            Index j1 = 0;
            for (Index j = 1; j <= m; ++j) {
                if (used[j]) continue;
                const Real cur = -w(i0 - 1, j - 1) - u[i0] - v[j];
                if (cur < minv[j]) {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if (minv[j] < delta) {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for (Index j = 0; j <= m; ++j) {
                if (used[j]) {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
        } while (p[j0] != 0);
        do {
            const Index j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
        } while (j0);
    }
    for (Index j = 1; j <= m; ++j) {
        if (p[j] == 0) continue;
        if (transposed)
            result[static_cast<std::size_t>(j - 1)] = static_cast<int>(p[j] - 1);
        else
            result[static_cast<std::size_t>(p[j] - 1)] = static_cast<int>(j - 1);
    }
    return result;
}

std::vector<Real> best_match_iou(const std::vector<PartMask>& gt, const std::vector<PartMask>& candidates,
                                 bool hungarian) {
    Mat iou(static_cast<Index>(gt.size()), static_cast<Index>(candidates.size()));
    for (std::size_t g = 0; g < gt.size(); ++g)
        for (std::size_t c = 0; c < candidates.size(); ++c) iou(Index(g), Index(c)) = point_iou(gt[g], candidates[c]);
    std::vector<Real> out(gt.size(), 0.0);
    if (candidates.empty()) return out;
    if (!hungarian) {
        for (std::size_t g = 0; g < gt.size(); ++g) out[g] = iou.row(Index(g)).maxCoeff();
        return out;
    }
    const IndexList a = max_weight_assignment(iou);
    for (std::size_t g = 0; g < gt.size(); ++g)
        if (a[g] >= 0) out[g] = iou(Index(g), a[g]);
    return out;
}

EvalReport eval_auto(const PromptableModel& model, const std::vector<data::LabeledShape>& dataset,
                     const AutoEvalConfig& cfg) {
    if (cfg.t_values.empty()) throw InvalidArgument("eval_auto: no T values");
    std::vector<Real> ts = cfg.t_values;
    std::sort(ts.begin(), ts.end());
    const auto t0 = std::chrono::steady_clock::now();
    EvalReport r;
    r.protocol = "auto";
    r.keys = ts;
    r.mean.assign(ts.size(), 0.0);
    r.config = {{"t_values", ts},
                {"n_prompts", cfg.n_prompts},
                {"min_predicted_iou", cfg.min_predicted_iou},
                {"hungarian", cfg.hungarian}};
    Real total = 0;
    bool any_candidate = false;
    for (const auto& shape : dataset) {
        const auto enc = model.encode(shape.cloud);
        const auto candidates = autoseg::candidate_masks(model, *enc, cfg.n_prompts);
        ShapeAutoStats stats;
        stats.shape_id = shape.shape_id;
        std::vector<PartMask> pool;
        for (std::size_t i = 0; i < ts.size(); ++i) {
            autoseg::AutoSegConfig ac;
            ac.n_prompts = cfg.n_prompts;
            ac.nms_threshold = ts[i];
            ac.min_predicted_iou = cfg.min_predicted_iou;
            const auto seg = autoseg::select_masks(candidates, shape.cloud.size(), ac);
            stats.kept.push_back(static_cast<int>(seg.masks.size()));
            r.mean[i] += static_cast<Real>(seg.masks.size());
            for (const auto& m : seg.masks) {
                const bool seen = std::any_of(pool.begin(), pool.end(), [&](const PartMask& q) { return q.member == m.mask.member; });
                if (!seen) pool.push_back(m.mask);
            }
        }
        any_candidate = any_candidate || !pool.empty();
        std::vector<PartMask> gt;
        for (const auto& p : shape.parts)
            if (p.count() > 0) gt.push_back(p);
        stats.best_iou = best_match_iou(gt, pool, cfg.hungarian);
        for (Real v : stats.best_iou) total += v;
        r.instances += static_cast<int>(gt.size());
        r.shapes.push_back(std::move(stats));
    }
    if (!dataset.empty())
        for (auto& m : r.mean) m /= static_cast<Real>(dataset.size());
    r.best_candidate_iou = r.instances > 0 ? total / r.instances : 0.0;
    r.empty_warning = !any_candidate;
    r.seconds = std::chrono::duration<Real>(std::chrono::steady_clock::now() - t0).count();
    return r;
}

}  // namespace partprompt::eval
