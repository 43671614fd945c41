// SPDX-License-Identifier: Apache-2.0

#include "partprompt/autoseg.hpp"

#include <algorithm>
#include <cmath>
#include <future>
#include <map>
#include <numeric>

namespace partprompt::autoseg {

void AutoSegConfig::validate() const {
    if (n_prompts < 1) throw InvalidArgument("autoseg: n_prompts must be >= 1");
    if (!(nms_threshold > 0.0 && nms_threshold < 1.0)) throw InvalidArgument("autoseg: T must lie in (0, 1)");
    if (min_predicted_iou < 0.0 || min_predicted_iou > 1.0)
        throw InvalidArgument("autoseg: min_predicted_iou must lie in [0, 1]");
    if (threads < 1) throw InvalidArgument("autoseg: threads must be >= 1");
}

IndexList nms(const std::vector<PartMask>& masks, const std::vector<Real>& scores, Real threshold) {
    if (masks.size() != scores.size()) throw InvalidArgument("nms: masks and scores differ in length");
    IndexList order(masks.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return scores[a] > scores[b]; });
    IndexList kept;
    for (int i : order) {
        bool keep = true;
        for (int k : kept)
            if (point_iou(masks[i], masks[k]) > threshold) {
                keep = false;
                break;
            }
        if (keep) kept.push_back(i);
    }
    return kept;
}

std::vector<ScoredMask> candidate_masks(const PromptableModel& model, const Encoding& encoding, int n_prompts,
                                        int threads) {
    const PointCloud& cloud = encoding.cloud;
    const int k = std::min<int>(n_prompts, static_cast<int>(cloud.size()));
    const IndexList seeds = fps(cloud, k);
    std::vector<std::vector<MaskPrediction>> per_prompt(seeds.size());
    auto work = [&](std::size_t begin, std::size_t end) {
        for (std::size_t i = begin; i < end; ++i) {
            PromptSet p;
            p.push(cloud.positions.row(seeds[i]), true);
            per_prompt[i] = model.decode(encoding, p);
        }
    };
    if (threads <= 1 || seeds.size() < 2) {
        work(0, seeds.size());
    } else {
        const std::size_t t = std::min<std::size_t>(threads, seeds.size());
        std::vector<std::future<void>> jobs;
        for (std::size_t j = 0; j < t; ++j)
            jobs.push_back(std::async(std::launch::async, work, j * seeds.size() / t, (j + 1) * seeds.size() / t));
        for (auto& f : jobs) f.get();
    }
    std::vector<ScoredMask> out;
    for (auto& preds : per_prompt)
        for (auto& p : preds) out.push_back({std::move(p.mask), p.predicted_iou});
    return out;
}

SegmentationResult select_masks(const std::vector<ScoredMask>& candidates, Index n_points, const AutoSegConfig& cfg) {
    cfg.validate();
    SegmentationResult r;
    r.config_echo = cfg;
    std::vector<PartMask> masks;
    std::vector<Real> scores;
    for (const auto& c : candidates) {
        if (static_cast<Index>(c.mask.size()) != n_points) throw InvalidArgument("select_masks: mask length mismatch");
        if (c.predicted_iou < cfg.min_predicted_iou || c.mask.count() == 0) continue;
        masks.push_back(c.mask);
        scores.push_back(c.predicted_iou);
    }
    for (int i : nms(masks, scores, cfg.nms_threshold)) r.masks.push_back({masks[i], scores[i]});
    r.empty_warning = r.masks.empty();
    // Kept masks are already in descending score order, so the first claim wins.
    r.point_labels.assign(static_cast<std::size_t>(n_points), -1);
    for (std::size_t m = 0; m < r.masks.size(); ++m)
        for (std::size_t i = 0; i < r.point_labels.size(); ++i)
            if (r.point_labels[i] < 0 && r.masks[m].mask.member[i]) r.point_labels[i] = static_cast<int>(m);
    return r;
}

SegmentationResult segment_every_part(const PromptableModel& model, const Encoding& encoding, const AutoSegConfig& cfg) {
    cfg.validate();
    return select_masks(candidate_masks(model, encoding, cfg.n_prompts, cfg.threads), encoding.cloud.size(), cfg);
}

SegmentationResult segment_every_part(const PromptableModel& model, const PointCloud& cloud, const AutoSegConfig& cfg) {
    cfg.validate();
    const auto enc = model.encode(cloud);
    return segment_every_part(model, *enc, cfg);
}

IndexList assign_face_labels(const TriangleMesh& mesh, const PointCloud& cloud, const IndexList& point_labels) {
    if (static_cast<Index>(point_labels.size()) != cloud.size())
        throw InvalidArgument("assign_face_labels: label count differs from point count");
    if (static_cast<Index>(cloud.face_of.size()) != cloud.size())
        throw InvalidArgument("assign_face_labels: cloud carries no face provenance");
    const Index F = mesh.face_count();
    std::vector<std::map<int, int>> votes(static_cast<std::size_t>(F));
    for (std::size_t i = 0; i < point_labels.size(); ++i) {
        const int f = cloud.face_of[i];
        if (f < 0 || f >= F) throw InvalidArgument("assign_face_labels: face index out of range");
        ++votes[f][point_labels[i]];
    }
    IndexList out(static_cast<std::size_t>(F), -1);
    std::vector<bool> sampled(static_cast<std::size_t>(F), false);
    for (Index f = 0; f < F; ++f) {
        const auto& v = votes[f];
        if (v.empty()) continue;
        sampled[f] = true;
        int best = -1, best_count = 0;
        for (const auto& [label, count] : v) {  // ascending label order, so ties keep the lower label
            if (label < 0) continue;
            if (count > best_count) {
                best = label;
                best_count = count;
            }
        }
        out[f] = best;
    }
    IndexList labeled;
    for (std::size_t i = 0; i < point_labels.size(); ++i)
        if (point_labels[i] >= 0) labeled.push_back(static_cast<int>(i));
    if (labeled.empty()) return out;
    Points ref(static_cast<Index>(labeled.size()), 3);
    for (std::size_t i = 0; i < labeled.size(); ++i) ref.row(Index(i)) = cloud.positions.row(labeled[i]);
    IndexList missing;
    for (Index f = 0; f < F; ++f)
        if (!sampled[f]) missing.push_back(static_cast<int>(f));
    if (missing.empty()) return out;
    Points q(static_cast<Index>(missing.size()), 3);
    for (std::size_t i = 0; i < missing.size(); ++i) q.row(Index(i)) = mesh.face_centroid(missing[i]);
    const auto nn = knn_query(ref, q, 1);
    for (std::size_t i = 0; i < missing.size(); ++i) out[missing[i]] = point_labels[labeled[nn[i][0]]];
    return out;
}

io::json to_json(const SegmentationResult& r) {
    io::json masks = io::json::array();
    for (const auto& m : r.masks) masks.push_back({{"indices", m.mask.indices()}, {"predicted_iou", m.predicted_iou}});
    io::json j = {{"masks", masks},
                  {"point_labels", r.point_labels},
                  {"config", {{"n_prompts", r.config_echo.n_prompts},
                              {"T", r.config_echo.nms_threshold},
                              {"min_predicted_iou", r.config_echo.min_predicted_iou}}}};
    j["face_labels"] = r.face_labels ? io::json(*r.face_labels) : io::json(nullptr);
    if (r.empty_warning) j["warning"] = "all candidates were filtered out";
    return j;
}

Vec3 label_color(int label) {
    if (label < 0) return Vec3(0.6, 0.6, 0.6);
    // Golden-angle hue walk at fixed saturation and value.
    const Real h = std::fmod(static_cast<Real>(label) * 0.618033988749895, 1.0) * 6.0;
    const int sector = static_cast<int>(h);
    const Real f = h - sector, v = 0.9, s = 0.7;
    const Real p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
    switch (sector) {
        case 0: return Vec3(v, t, p);
        case 1: return Vec3(q, v, p);
        case 2: return Vec3(p, v, t);
        case 3: return Vec3(p, q, v);
        case 4: return Vec3(t, p, v);
        default: return Vec3(v, p, q);
    }
}

TriangleMesh colorize(const TriangleMesh& mesh, const IndexList& face_labels) {
    if (static_cast<Index>(face_labels.size()) != mesh.face_count())
        throw InvalidArgument("colorize: one label per face required");
    TriangleMesh out = mesh;
    out.face_colors.resize(mesh.face_count(), 3);
    for (Index f = 0; f < mesh.face_count(); ++f) out.face_colors.row(f) = label_color(face_labels[f]);
    return out;
}

}  // namespace partprompt::autoseg
