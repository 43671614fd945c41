// SPDX-License-Identifier: Apache-2.0

#include "partprompt/annotate.hpp"

#include <algorithm>
#include <limits>
#include <numeric>

namespace partprompt::annotate {

void ValidityRule::validate() const {
    if (rounds < 10) throw InvalidArgument("validity rule: rounds must be >= 10 to read IoU@10");
    if (min_valid_masks < 0) throw InvalidArgument("validity rule: min_valid_masks must be >= 0");
}

io::json to_json(const ValidityRule& r) {
    return {{"iou1_min", r.iou1_min}, {"iou10_min", r.iou10_min}, {"min_valid_masks", r.min_valid_masks}, {"rounds", r.rounds}};
}

ValidityRule validity_rule_from_json(const io::json& j) {
    ValidityRule r;
    r.iou1_min = j.value("iou1_min", r.iou1_min);
    r.iou10_min = j.value("iou10_min", r.iou10_min);
    r.min_valid_masks = j.value("min_valid_masks", r.min_valid_masks);
    r.rounds = j.value("rounds", r.rounds);
    r.validate();
    return r;
}

io::json to_json(const AnnotationReport& r) {
    return {{"shape_id", r.shape_id},
            {"masks_tested", r.masks_tested},
            {"masks_valid", r.masks_valid},
            {"masks_kept", r.masks_kept},
            {"accepted", r.accepted}};
}

MaskValidation validate_mask(const PromptableModel& model, const Encoding& encoding, const PartMask& pseudo,
                             const ValidityRule& rule, std::uint64_t seed) {
    rule.validate();
    if (pseudo.count() == 0) throw InvalidArgument("validate_mask: empty pseudo mask");
    const auto trace = training::simulate_interactive(model, encoding, pseudo, rule.rounds, seed,
                                                      training::FirstRoundSelection::predicted_iou);
    MaskValidation v;
    v.iou_at_1 = trace.iou_at(1);
    v.iou_at_10 = trace.iou_at(10);
    v.confidence = trace.rounds.front().predicted_iou;
    v.valid = v.iou_at_1 > rule.iou1_min || v.iou_at_10 > rule.iou10_min;
    return v;
}

AnnotationResult annotate_shape(const PromptableModel& model, const data::LabeledShape& shape,
                                const PseudoLabelSet& pseudo, const ValidityRule& rule, std::uint64_t seed) {
    rule.validate();
    AnnotationResult result;
    result.report.shape_id = shape.shape_id;
    const auto enc = model.encode(shape.cloud);
    struct Kept {
        PartMask mask;
        Real confidence;
        std::size_t order;
    };
    std::vector<Kept> valid;
    for (std::size_t m = 0; m < pseudo.masks.size(); ++m) {
        if (pseudo.masks[m].count() == 0) continue;
        ++result.report.masks_tested;
        const MaskValidation v = validate_mask(model, *enc, pseudo.masks[m], rule, seed + m);
        if (v.valid) valid.push_back({pseudo.masks[m], v.confidence, m});
    }
    result.report.masks_valid = static_cast<int>(valid.size());

    std::stable_sort(valid.begin(), valid.end(), [](const Kept& a, const Kept& b) { return a.confidence > b.confidence; });
    std::vector<std::uint8_t> claimed(static_cast<std::size_t>(shape.cloud.size()), 0);
    std::vector<PartMask> parts;
    for (auto& k : valid) {
        PartMask m(claimed.size(), MaskSource::pseudo_label);
        bool any = false;
        for (std::size_t i = 0; i < claimed.size(); ++i)
            if (k.mask.member[i] && !claimed[i]) {
                m.member[i] = 1;
                claimed[i] = 1;
                any = true;
            }
        if (any) parts.push_back(std::move(m));
    }
    result.report.masks_kept = static_cast<int>(parts.size());
    result.report.accepted = result.report.masks_kept >= rule.min_valid_masks;
    if (result.report.accepted) {
        data::LabeledShape out;
        out.cloud = shape.cloud;
        out.parts = std::move(parts);
        out.provenance = data::Provenance::model_in_the_loop;
        out.shape_id = shape.shape_id + "_mitl";
        result.shape = std::move(out);
    }
    return result;
}

namespace {

IndexList kmeans(const Mat& x, int k, Rng& rng) {
    const Index n = x.rows();
    Mat centers(k, x.cols());
    // k-means++ seeding.
    centers.row(0) = x.row(static_cast<Index>(rng.below(static_cast<std::uint64_t>(n))));
    Eigen::VectorXd d2 = (x.rowwise() - centers.row(0)).rowwise().squaredNorm();
    for (int c = 1; c < k; ++c) {
        const Real total = d2.sum();
        Index pick = 0;
        if (total <= 0) {
            pick = static_cast<Index>(rng.below(static_cast<std::uint64_t>(n)));
        } else {
            Real u = rng.uniform() * total;
            for (pick = 0; pick < n - 1; ++pick) {
                u -= d2(pick);
                if (u < 0) break;
            }
        }
        centers.row(c) = x.row(pick);
        d2 = d2.cwiseMin((x.rowwise() - centers.row(c)).rowwise().squaredNorm());
    }
    IndexList label(static_cast<std::size_t>(n), -1);
    for (int iter = 0; iter < 100; ++iter) {
        bool changed = false;
        // Squared distances for feature rows of any width.
        const Mat dist = (-2.0 * x * centers.transpose()).colwise() + x.rowwise().squaredNorm();
        const Eigen::RowVectorXd cn = centers.rowwise().squaredNorm().transpose();
        for (Index i = 0; i < n; ++i) {
            Index best;
            (dist.row(i) + cn).minCoeff(&best);
            if (label[i] != best) {
                label[i] = static_cast<int>(best);
                changed = true;
            }
        }
        if (!changed) break;
        Mat sum = Mat::Zero(k, x.cols());
        std::vector<int> count(static_cast<std::size_t>(k), 0);
        for (Index i = 0; i < n; ++i) {
            sum.row(label[i]) += x.row(i);
            ++count[label[i]];
        }
        for (int c = 0; c < k; ++c)
            if (count[c] > 0) centers.row(c) = sum.row(c) / static_cast<Real>(count[c]);
    }
    return label;
}

}  // namespace

PseudoLabelSet cluster_masks(const Mat& features, const std::vector<int>& scales, std::uint64_t seed) {
    const Index n = features.rows();
    if (n == 0) throw InvalidArgument("cluster_masks: no features");
    PseudoLabelSet out;
    Rng rng(seed);
    for (int scale : scales) {
        if (scale < 1) throw InvalidArgument("cluster_masks: scale must be >= 1");
        const int k = static_cast<int>(std::min<Index>(scale, n));
        const IndexList label = kmeans(features, k, rng);
        std::vector<PartMask> masks(static_cast<std::size_t>(k), PartMask(static_cast<std::size_t>(n), MaskSource::pseudo_label));
        for (Index i = 0; i < n; ++i) masks[label[i]].member[i] = 1;
        for (auto& m : masks)
            if (m.count() > 0) {
                out.masks.push_back(std::move(m));
                out.source_scales.push_back(scale);
            }
    }
    if (out.masks.empty()) throw InvalidArgument("cluster_masks: no scales requested");
    return out;
}

PseudoLabelSet generate_pseudo_labels(const Encoder& encoder, const PointCloud& cloud, const std::vector<int>& scales,
                                      std::uint64_t seed) {
    ag::NoGradGuard guard;
    const TriplaneField field = encoder.encode_frozen(cloud);
    return cluster_masks(sample_field(field, cloud.positions).value(), scales, seed);
}

CorpusAnnotation annotate_corpus(const Model& model, const std::vector<data::LabeledShape>& corpus,
                                 const std::vector<int>& scales, const ValidityRule& rule, std::uint64_t seed) {
    CorpusAnnotation out;
    for (std::size_t s = 0; s < corpus.size(); ++s) {
        const PseudoLabelSet pseudo = generate_pseudo_labels(model.encoder, corpus[s].cloud, scales, seed + s);
        AnnotationResult r = annotate_shape(model, corpus[s], pseudo, rule, seed + 1000003 * s);
        out.reports.push_back(r.report);
        if (r.shape) out.accepted.push_back(std::move(*r.shape));
    }
    return out;
}

}  // namespace partprompt::annotate
