// SPDX-License-Identifier: Apache-2.0
//
// Automatic whole-shape decomposition: prompt at farthest-point samples, keep
// confident candidates, deduplicate them with point-IoU NMS. The NMS threshold
// T is the granularity knob (higher T keeps more, finer masks).

#pragma once

#include "partprompt/model.hpp"

#include <optional>

namespace partprompt::autoseg {

struct AutoSegConfig {
    int n_prompts = 64;
    Real nms_threshold = 0.5;
    Real min_predicted_iou = 0.7;
    /// Worker threads for candidate decoding (results do not depend on it).
    int threads = 1;

    void validate() const;
};

struct ScoredMask {
    PartMask mask;
    Real predicted_iou = 0;
};

struct SegmentationResult {
    std::vector<ScoredMask> masks;
    IndexList point_labels;  // -1 = unassigned
    std::optional<IndexList> face_labels;
    AutoSegConfig config_echo;
    bool empty_warning = false;
};

/// Greedy NMS: visit by descending score (ties to the lower index) and keep a
/// mask iff its point IoU with every kept mask is <= T. Returns kept indices in
/// visiting order.
IndexList nms(const std::vector<PartMask>& masks, const std::vector<Real>& scores, Real threshold);

/// Every single-prompt candidate for the FPS prompts (3 per prompt), unfiltered.
std::vector<ScoredMask> candidate_masks(const PromptableModel& model, const Encoding& encoding, int n_prompts,
                                        int threads = 1);

/// Confidence filter, empty-mask drop, NMS and point labeling over given candidates.
SegmentationResult select_masks(const std::vector<ScoredMask>& candidates, Index n_points, const AutoSegConfig& cfg);

SegmentationResult segment_every_part(const PromptableModel& model, const PointCloud& cloud, const AutoSegConfig& cfg);
SegmentationResult segment_every_part(const PromptableModel& model, const Encoding& encoding, const AutoSegConfig& cfg);

/// Majority label of each face's samples (ties to the lower label; -1 votes are
/// ignored unless nothing else was sampled); unsampled faces copy the label of
/// the labeled point nearest to their centroid.
IndexList assign_face_labels(const TriangleMesh& mesh, const PointCloud& cloud, const IndexList& point_labels);

io::json to_json(const SegmentationResult& r);

/// Copy of `mesh` with one distinct color per face label (gray for -1).
TriangleMesh colorize(const TriangleMesh& mesh, const IndexList& face_labels);
/// Distinct, deterministic RGB for a label.
Vec3 label_color(int label);

}  // namespace partprompt::autoseg
