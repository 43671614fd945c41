// SPDX-License-Identifier: Apache-2.0
//
// Model-in-the-loop annotation. Candidate masks come from clustering field
// features at several granularities; a mask is kept only if the interactive
// model can reproduce it (good after one click, or after ten), and a shape is
// kept only if enough of its masks survive.

#pragma once

#include "partprompt/data.hpp"
#include "partprompt/training.hpp"

namespace partprompt::annotate {

struct ValidityRule {
    Real iou1_min = 0.60;
    Real iou10_min = 0.90;
    int min_valid_masks = 6;
    int rounds = 10;

    void validate() const;
};

io::json to_json(const ValidityRule& r);
ValidityRule validity_rule_from_json(const io::json& j);

struct PseudoLabelSet {
    std::vector<PartMask> masks;
    IndexList source_scales;  // cluster count that produced each mask
};

struct MaskValidation {
    bool valid = false;
    Real iou_at_1 = 0;
    Real iou_at_10 = 0;
    /// Predicted IoU of the first-round selection; orders overlapping masks.
    Real confidence = 0;
};

MaskValidation validate_mask(const PromptableModel& model, const Encoding& encoding, const PartMask& pseudo,
                             const ValidityRule& rule, std::uint64_t seed = 0);

struct AnnotationReport {
    std::string shape_id;
    int masks_tested = 0;
    int masks_valid = 0;
    int masks_kept = 0;  // after overlap resolution
    bool accepted = false;
};

io::json to_json(const AnnotationReport& r);

struct AnnotationResult {
    AnnotationReport report;
    std::optional<data::LabeledShape> shape;  // set when accepted
};

/// Validates every pseudo mask, resolves overlaps (higher confidence claims
/// first, emptied masks are dropped) and accepts the shape iff at least
/// rule.min_valid_masks remain.
AnnotationResult annotate_shape(const PromptableModel& model, const data::LabeledShape& shape,
                                const PseudoLabelSet& pseudo, const ValidityRule& rule, std::uint64_t seed = 0);

/// Seeded k-means (k-means++ start, Lloyd iterations) of the feature rows at
/// each requested cluster count; every nonempty cluster becomes a mask.
PseudoLabelSet cluster_masks(const Mat& features, const std::vector<int>& scales, std::uint64_t seed);

/// Clusters the frozen-branch field sampled at every point of the shape.
PseudoLabelSet generate_pseudo_labels(const Encoder& encoder, const PointCloud& cloud, const std::vector<int>& scales,
                                      std::uint64_t seed = 0);

struct CorpusAnnotation {
    std::vector<data::LabeledShape> accepted;
    std::vector<AnnotationReport> reports;
};

/// One pass over a corpus: pseudo labels from the model's frozen branch, then
/// annotate_shape. Accepted shapes get the `_mitl` id suffix.
CorpusAnnotation annotate_corpus(const Model& model, const std::vector<data::LabeledShape>& corpus,
                                 const std::vector<int>& scales, const ValidityRule& rule, std::uint64_t seed = 0);

}  // namespace partprompt::annotate
