// SPDX-License-Identifier: Apache-2.0
//
// Evaluation protocols: interactive IoU@k over simulated clicks, and
// class-agnostic best-candidate IoU of the automatic pipeline over a sweep of
// NMS thresholds.

#pragma once

#include "partprompt/autoseg.hpp"
#include "partprompt/data.hpp"
#include "partprompt/training.hpp"

namespace partprompt::eval {

struct InstanceTrace {
    std::string shape_id;
    int part = 0;
    std::vector<Real> iou;  // IoU at each requested k
};

struct ShapeAutoStats {
    std::string shape_id;
    std::vector<int> kept;  // kept-mask count per T
    std::vector<Real> best_iou;  // per ground-truth part
};

struct EvalReport {
    std::string protocol;  // "interactive" or "auto"
    std::vector<Real> keys;  // k values (interactive) or T values (auto), ascending
    std::vector<Real> mean;  // interactive: mean IoU per k; auto: mean kept-mask count per T
    Real best_candidate_iou = 0;  // auto only
    int instances = 0;
    std::vector<InstanceTrace> traces;
    std::vector<ShapeAutoStats> shapes;
    io::json config = io::json::object();
    Real seconds = 0;
    bool empty_warning = false;

    /// Share of shapes whose kept count never decreases along the T sweep.
    Real monotone_share() const;
    Real mean_at(Real key) const;
};

io::json to_json(const EvalReport& r);
/// Two-column CSV table (`metric,value`).
std::string to_csv(const EvalReport& r);

EvalReport eval_interactive(const PromptableModel& model, const std::vector<data::LabeledShape>& dataset,
                            std::vector<int> ks = {1, 3, 5, 7, 10}, std::uint64_t seed = 0);

struct AutoEvalConfig {
    std::vector<Real> t_values{0.1, 0.3, 0.5, 0.7};
    int n_prompts = 64;
    Real min_predicted_iou = 0.7;
    /// One-to-one matching between parts and candidates instead of per-part max.
    bool hungarian = false;
};

EvalReport eval_auto(const PromptableModel& model, const std::vector<data::LabeledShape>& dataset,
                     const AutoEvalConfig& cfg = {});

/// Best IoU per ground-truth mask against a candidate pool: the per-mask max,
/// or the optimal one-to-one assignment (unmatched masks score 0).
std::vector<Real> best_match_iou(const std::vector<PartMask>& gt, const std::vector<PartMask>& candidates,
                                 bool hungarian = false);

/// Maximum-weight assignment of rows to distinct columns; entry r is the column
/// given to row r, or -1 when there are more rows than columns and r lost out.
IndexList max_weight_assignment(const Mat& weights);

}  // namespace partprompt::eval
