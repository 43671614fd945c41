// SPDX-License-Identifier: Apache-2.0

#include "partprompt/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

namespace partprompt::training {

void LossConfig::validate() const {
    if (lambda_triplet < 0) throw InvalidArgument("loss: lambda_triplet must be >= 0");
    if (focal_alpha < 0 || focal_alpha > 1) throw InvalidArgument("loss: focal_alpha must lie in [0, 1]");
    if (focal_gamma < 0 || iou_head_weight < 0 || triplet_margin < 0)
        throw InvalidArgument("loss: gamma, iou weight and margin must be >= 0");
    if (triplet_samples < 1) throw InvalidArgument("loss: triplet_samples must be >= 1");
}

TrainConfig TrainConfig::reference() {
    TrainConfig c;
    c.iterations = 250000;
    c.batch_size = 4;
    c.lr = 5e-4;
    c.lr_decay = 0.7;
    c.decay_every = 50000;
    return c;
}

void TrainConfig::validate() const {
    if (rounds < 1) throw InvalidArgument("train: rounds must be >= 1");
    if (iterations < 0 || batch_size < 1 || masks_per_shape < 1) throw InvalidArgument("train: bad iteration or batch size");
    if (lr < 0 || lr_decay <= 0 || decay_every < 1) throw InvalidArgument("train: bad learning-rate schedule");
    if (beta1 < 0 || beta1 >= 1 || beta2 < 0 || beta2 >= 1 || adam_eps <= 0 || weight_decay < 0)
        throw InvalidArgument("train: bad optimizer settings");
    if (checkpoint_every < 1 || log_every < 1) throw InvalidArgument("train: checkpoint/log period must be >= 1");
    if (augment) augmentation.validate();
}

Real TrainConfig::lr_at(int iteration) const {
    return lr * std::pow(lr_decay, static_cast<Real>((iteration - 1) / decay_every));
}

// ---------------------------------------------------------------------------
// Losses

Real focal_loss(const std::vector<Real>& probabilities, const PartMask& gt, const LossConfig& cfg) {
    if (probabilities.size() != gt.size()) throw InvalidArgument("focal_loss: length mismatch");
    if (probabilities.empty()) return 0.0;
    Real total = 0.0;
    for (std::size_t i = 0; i < probabilities.size(); ++i) {
        const Real p = std::clamp(probabilities[i], 1e-6, 1.0 - 1e-6);
        const Real pt = gt.member[i] ? p : 1.0 - p;
        const Real a = gt.member[i] ? cfg.focal_alpha : 1.0 - cfg.focal_alpha;
        total += -a * std::pow(1.0 - pt, cfg.focal_gamma) * std::log(pt);
    }
    return total / static_cast<Real>(probabilities.size());
}

Real dice_loss(const std::vector<Real>& probabilities, const PartMask& gt) {
    if (probabilities.size() != gt.size()) throw InvalidArgument("dice_loss: length mismatch");
    Real pg = 0, ps = 0, gs = 0;
    for (std::size_t i = 0; i < probabilities.size(); ++i) {
        pg += probabilities[i] * gt.member[i];
        ps += probabilities[i];
        gs += gt.member[i];
    }
    return 1.0 - (2.0 * pg + 1.0) / (ps + gs + 1.0);
}

TripletResult triplet_loss(const TriplaneField& field, const std::vector<PartMask>& gt_masks, const PointCloud& cloud,
                           Real margin, int samples, std::uint64_t seed) {
    std::vector<IndexList> members;
    for (const auto& m : gt_masks) {
        if (static_cast<Index>(m.size()) != cloud.size()) throw InvalidArgument("triplet_loss: mask length mismatch");
        IndexList idx = m.indices();
        if (!idx.empty()) members.push_back(std::move(idx));
    }
    TripletResult r;
    std::vector<int> anchor_masks;
    for (std::size_t i = 0; i < members.size(); ++i)
        if (members[i].size() >= 2) anchor_masks.push_back(static_cast<int>(i));
    if (members.size() < 2 || anchor_masks.empty()) {
        r.loss = ag::constant(Mat::Zero(1, 1));
        r.degenerate = true;
        return r;
    }
    Rng rng(seed);
    const Index T = samples;
    Points pts(3 * T, 3);
    for (Index t = 0; t < T; ++t) {
        const int a_mask = anchor_masks[rng.below(anchor_masks.size())];
        const auto& am = members[a_mask];
        const std::size_t ai = rng.below(am.size());
        std::size_t pi = rng.below(am.size() - 1);
        if (pi >= ai) ++pi;
        std::size_t n_mask = rng.below(members.size() - 1);
        if (n_mask >= static_cast<std::size_t>(a_mask)) ++n_mask;
        const auto& nm = members[n_mask];
        pts.row(t) = cloud.positions.row(am[ai]);
        pts.row(T + t) = cloud.positions.row(am[pi]);
        pts.row(2 * T + t) = cloud.positions.row(nm[rng.below(nm.size())]);
    }
    const ag::Var f = sample_field(field, pts);
    const ag::Var fa = ag::slice_rows(f, 0, T), fp = ag::slice_rows(f, T, T), fn = ag::slice_rows(f, 2 * T, T);
    auto dist = [](const ag::Var& a, const ag::Var& b) {
        const ag::Var d = ag::sub(a, b);
        return ag::sqrt_eps(ag::row_sum(ag::mul(d, d)), 1e-12);
    };
    const ag::Var hinge =
        ag::relu(ag::add(ag::sub(dist(fa, fp), dist(fa, fn)), ag::constant(Mat::Constant(T, 1, margin))));
    r.loss = ag::mean(hinge);
    return r;
}

// ---------------------------------------------------------------------------
// Click simulation

Index sample_first_prompt(const PartMask& gt, const PointCloud& cloud, std::uint64_t seed) {
    if (static_cast<Index>(gt.size()) != cloud.size()) throw InvalidArgument("sample_first_prompt: mask length mismatch");
    const IndexList fg = gt.indices();
    if (fg.empty()) throw InvalidArgument("sample_first_prompt: empty mask");
    Rng rng(seed);
    if (fg.size() == gt.size()) return fg[rng.below(fg.size())];
    const std::vector<Real> d = distance_to_background(gt, cloud);
    const auto [lo, hi] = std::minmax_element(d.begin(), d.end());
    const Real cut = *lo + (2.0 / 3.0) * (*hi - *lo);
    IndexList band;
    for (std::size_t i = 0; i < fg.size(); ++i)
        if (d[i] >= cut) band.push_back(fg[i]);
    if (band.empty()) return fg[static_cast<std::size_t>(hi - d.begin())];
    return band[rng.below(band.size())];
}

std::optional<NextPrompt> sample_next_prompt(const PartMask& pred, const PartMask& gt, const PointCloud& cloud) {
    if (pred.size() != gt.size() || static_cast<Index>(gt.size()) != cloud.size())
        throw InvalidArgument("sample_next_prompt: length mismatch");
    PartMask error(gt.size(), MaskSource::predicted);
    bool any = false, all = true;
    for (std::size_t i = 0; i < gt.size(); ++i) {
        error.member[i] = pred.member[i] != gt.member[i];
        any = any || error.member[i];
        all = all && error.member[i];
    }
    if (!any) return std::nullopt;
    NextPrompt next;
    if (all) {
        // Nothing is right: fall back to the deepest point of the ground truth.
        next.positive = gt.count() > 0;
        next.index = next.positive ? sample_first_prompt(gt, cloud, 0) : 0;
        return next;
    }
    const std::vector<Real> d = distance_to_background(error, cloud);
    const IndexList idx = error.indices();
    const std::size_t best = static_cast<std::size_t>(std::max_element(d.begin(), d.end()) - d.begin());
    next.index = idx[best];
    next.positive = gt.member[static_cast<std::size_t>(next.index)] != 0;
    return next;
}

std::vector<Real> SimulationTrace::iou() const {
    std::vector<Real> out;
    for (const auto& r : rounds) out.push_back(r.iou);
    return out;
}

Real SimulationTrace::iou_at(int k) const {
    if (rounds.empty() || k < 1) throw InvalidArgument("iou_at: empty trace or k < 1");
    return rounds[static_cast<std::size_t>(std::min<int>(k, static_cast<int>(rounds.size())) - 1)].iou;
}

namespace {

Real candidate_loss(const MaskPrediction& p, const PartMask& gt, const LossConfig& cfg) {
    return focal_loss(p.probabilities, gt, cfg) + dice_loss(p.probabilities, gt);
}

std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
    Rng r(a ^ (b * 0x9e3779b97f4a7c15ULL));
    return r.next();
}

}  // namespace

SimulationTrace simulate_interactive(const PromptableModel& model, const Encoding& encoding, const PartMask& gt,
                                     int rounds, std::uint64_t seed, FirstRoundSelection selection,
                                     const LossConfig& loss_cfg) {
    if (rounds < 1) throw InvalidArgument("simulate_interactive: rounds must be >= 1");
    const PointCloud& cloud = encoding.cloud;
    SimulationTrace trace;
    PromptSet prompts;
    const Index first = sample_first_prompt(gt, cloud, seed);
    prompts.push(cloud.positions.row(first), true);
    RoundRecord rec;
    rec.prompt = first;
    for (int round = 1; round <= rounds; ++round) {
        const std::vector<MaskPrediction> preds = model.decode(encoding, prompts);
        if (preds.empty()) throw InvalidArgument("simulate_interactive: model returned no prediction");
        int sel = 0;
        std::vector<Real> losses(preds.size());
        for (std::size_t m = 0; m < preds.size(); ++m) losses[m] = candidate_loss(preds[m], gt, loss_cfg);
        for (std::size_t m = 1; m < preds.size(); ++m) {
            const bool better = selection == FirstRoundSelection::min_loss ? losses[m] < losses[sel]
                                                                           : preds[m].predicted_iou > preds[sel].predicted_iou;
            if (better) sel = static_cast<int>(m);
        }
        rec.selected = sel;
        rec.iou = point_iou(preds[sel].mask, gt);
        rec.loss = losses[sel];
        rec.predicted_iou = preds[sel].predicted_iou;
        trace.rounds.push_back(rec);
        trace.last = preds[sel];
        if (round == rounds) break;
        const auto next = sample_next_prompt(preds[sel].mask, gt, cloud);
        if (!next) {
            trace.converged = true;
            break;
        }
        prompts.push(cloud.positions.row(next->index), next->positive);
        prompts.prev_logits = preds[sel].logits;
        rec = RoundRecord{};
        rec.prompt = next->index;
        rec.positive = next->positive;
    }
    return trace;
}

SimulationTrace simulate_interactive(const PromptableModel& model, const data::LabeledShape& shape, int gt_index,
                                     int rounds, std::uint64_t seed, FirstRoundSelection selection,
                                     const LossConfig& loss_cfg) {
    if (gt_index < 0 || gt_index >= static_cast<int>(shape.parts.size()))
        throw InvalidArgument("simulate_interactive: part index out of range");
    const auto enc = model.encode(shape.cloud);
    return simulate_interactive(model, *enc, shape.parts[static_cast<std::size_t>(gt_index)], rounds, seed, selection,
                                loss_cfg);
}

// ---------------------------------------------------------------------------
// Objective

LossResult total_loss(const DecodeOutput& out, const PartMask& gt, const std::optional<ag::Var>& triplet,
                      const LossConfig& cfg) {
    const int m = out.count();
    if (m < 1) throw InvalidArgument("total_loss: no candidates");
    if (static_cast<Index>(gt.size()) != out.logits.rows()) throw InvalidArgument("total_loss: mask length mismatch");
    LossResult r;
    std::vector<ag::Var> focal(m), dice(m);
    Mat true_iou(1, m);
    const Mat& L = out.logits.value();
    int best = 0;
    Real best_value = 0;
    for (int c = 0; c < m; ++c) {
        const ag::Var col = ag::slice_cols(out.logits, c, 1);
        focal[c] = ag::focal_loss_logits(col, gt.member, cfg.focal_alpha, cfg.focal_gamma);
        dice[c] = ag::dice_loss_logits(col, gt.member);
        const Real v = focal[c].item() + dice[c].item();
        if (c == 0 || v < best_value) {
            best = c;
            best_value = v;
        }
        PartMask pred(gt.size(), MaskSource::predicted);
        for (std::size_t i = 0; i < gt.size(); ++i) pred.member[i] = L(static_cast<Index>(i), c) > 0.0;
        true_iou(0, c) = point_iou(pred, gt);
    }
    const ag::Var diff = ag::sub(out.iou, ag::constant(true_iou));
    const ag::Var iou_term = ag::scale(ag::mean(ag::mul(diff, diff)), cfg.iou_head_weight);
    r.total = ag::add(ag::add(focal[best], dice[best]), iou_term);
    r.terms.selected = best;
    r.terms.focal = focal[best].item();
    r.terms.dice = dice[best].item();
    r.terms.iou_head = iou_term.item();
    if (triplet) {
        r.terms.triplet = triplet->item();
        if (cfg.lambda_triplet != 0.0) r.total = ag::add(r.total, ag::scale(*triplet, cfg.lambda_triplet));
    }
    r.terms.total = r.total.item();
    return r;
}

ShapeLoss simulate_training(const Model& model, const TriplaneField& field, const TokenSet& tokens,
                            const DecoderContext& ctx, const PointCloud& cloud, const PartMask& gt, int rounds,
                            std::uint64_t seed, const LossConfig& cfg) {
    ShapeLoss out;
    PromptSet prompts;
    prompts.push(cloud.positions.row(sample_first_prompt(gt, cloud, seed)), true);
    std::vector<ag::Var> round_losses;
    for (int round = 1; round <= rounds; ++round) {
        const DecodeOutput dec = model.decoder(ctx, field, tokens, prompts);
        const LossResult lr = total_loss(dec, gt, std::nullopt, cfg);
        round_losses.push_back(lr.total);
        out.terms.focal += lr.terms.focal;
        out.terms.dice += lr.terms.dice;
        out.terms.iou_head += lr.terms.iou_head;
        const Mat& L = dec.logits.value();
        std::vector<Real> logits(static_cast<std::size_t>(L.rows()));
        PartMask pred(gt.size(), MaskSource::predicted);
        for (Index i = 0; i < L.rows(); ++i) {
            logits[static_cast<std::size_t>(i)] = L(i, lr.terms.selected);
            pred.member[static_cast<std::size_t>(i)] = L(i, lr.terms.selected) > 0.0;
        }
        out.iou.push_back(point_iou(pred, gt));
        if (round == rounds) break;
        const auto next = sample_next_prompt(pred, gt, cloud);
        if (!next) break;
        prompts.push(cloud.positions.row(next->index), next->positive);
        prompts.prev_logits = std::move(logits);
    }
    ag::Var sum = round_losses[0];
    for (std::size_t i = 1; i < round_losses.size(); ++i) sum = ag::add(sum, round_losses[i]);
    const Real n = static_cast<Real>(round_losses.size());
    out.loss = ag::scale(sum, 1.0 / n);
    out.terms.focal /= n;
    out.terms.dice /= n;
    out.terms.iou_head /= n;
    out.terms.total = out.loss.item();
    return out;
}

// ---------------------------------------------------------------------------
// Optimizer

void AdamW::step(const std::vector<std::pair<std::string, nn::ParamTable*>>& tables, Real lr) {
    ++t_;
    const Real bc1 = 1.0 - std::pow(beta1_, static_cast<Real>(t_));
    const Real bc2 = 1.0 - std::pow(beta2_, static_cast<Real>(t_));
    for (const auto& [group, table] : tables) {
        for (auto& [name, param] : table->entries()) {
            if (param.grad().size() == 0) continue;
            auto& [m, v] = moments_[group + "/" + name];
            if (m.size() == 0) {
                m = Mat::Zero(param.rows(), param.cols());
                v = Mat::Zero(param.rows(), param.cols());
            }
            const Mat& g = param.grad();
            m = beta1_ * m + (1.0 - beta1_) * g;
            v = beta2_ * v + (1.0 - beta2_) * g.cwiseProduct(g);
            Mat& p = param.mutable_value();
            p -= (lr * weight_decay_) * p;
            p.array() -= lr * (m.array() / bc1) / ((v.array() / bc2).sqrt() + eps_);
        }
    }
}

void AdamW::save(TensorArchive& archive) const {
    for (const auto& [key, mv] : moments_) {
        archive.entries.emplace_back("adam_m", key, mv.first);
        archive.entries.emplace_back("adam_v", key, mv.second);
    }
    archive.meta["adam_steps"] = t_;
}

void AdamW::load(const TensorArchive& archive) {
    moments_.clear();
    for (const auto& [group, name, value] : archive.entries) {
        if (group == "adam_m") moments_[name].first = value;
        if (group == "adam_v") moments_[name].second = value;
    }
    t_ = archive.meta.value("adam_steps", 0L);
}

Real clip_gradients(const std::vector<std::pair<std::string, nn::ParamTable*>>& tables, Real max_norm) {
    Real sq = 0;
    for (const auto& [_, table] : tables)
        for (auto& [name, p] : table->entries())
            if (p.grad().size()) sq += p.grad().squaredNorm();
    const Real norm = std::sqrt(sq);
    if (max_norm > 0 && norm > max_norm) {
        const Real s = max_norm / norm;
        for (const auto& [_, table] : tables)
            for (auto& [name, p] : table->entries())
                if (p.grad().size()) p.mutable_grad() *= s;
    }
    return norm;
}

// ---------------------------------------------------------------------------
// Loop

io::json to_json(const StepMetrics& m) {
    return {{"iter", m.iter},
            {"loss_total", m.loss.total},
            {"loss_focal", m.loss.focal},
            {"loss_dice", m.loss.dice},
            {"loss_triplet", m.loss.triplet},
            {"loss_iou_head", m.loss.iou_head},
            {"lr", m.lr},
            {"seconds", m.seconds}};
}

namespace {

bool all_finite(const std::vector<std::pair<std::string, nn::ParamTable*>>& tables) {
    for (const auto& [_, table] : tables)
        for (auto& [name, p] : table->entries())
            if (p.grad().size() && !p.grad().allFinite()) return false;
    return true;
}

// Shape order for global sample s: epoch-wise permutations, reproducible from
// the seed alone so that a resumed run draws the same batches.
class BatchSampler {
public:
    BatchSampler(std::size_t n, std::uint64_t seed) : n_(n), seed_(seed) {}
    std::size_t at(std::uint64_t s) {
        const std::uint64_t epoch = s / n_;
        if (epoch != epoch_ || perm_.empty()) {
            perm_.resize(n_);
            std::iota(perm_.begin(), perm_.end(), std::size_t{0});
            Rng rng(mix(seed_, epoch + 1));
            shuffle(perm_, rng);
            epoch_ = epoch;
        }
        return perm_[s % n_];
    }

private:
    std::size_t n_;
    std::uint64_t seed_;
    std::uint64_t epoch_ = 0;
    std::vector<std::size_t> perm_;
};

IndexList nonempty_parts(const data::LabeledShape& s) {
    IndexList out;
    for (std::size_t i = 0; i < s.parts.size(); ++i)
        if (s.parts[i].count() > 0 && s.parts[i].count() < s.parts[i].size()) out.push_back(static_cast<int>(i));
    return out;
}

}  // namespace

Real pretrain_frozen_branch(Model& model, const std::vector<data::LabeledShape>& dataset, const TrainConfig& cfg,
                            const LossConfig& loss_cfg) {
    if (dataset.empty()) throw InvalidArgument("pretrain: empty dataset");
    auto& table = model.encoder.frozen_table;
    const std::vector<std::pair<std::string, nn::ParamTable*>> tables{{"frozen_branch", &table}};
    table.set_trainable(true);
    AdamW opt(cfg.beta1, cfg.beta2, cfg.adam_eps, 0.0);
    BatchSampler sampler(dataset.size(), mix(cfg.seed, 0xf207e7));
    Real last = 0;
    for (int it = 1; it <= cfg.frozen_pretrain_iterations; ++it) {
        Real batch_loss = 0;
        for (int b = 0; b < cfg.batch_size; ++b) {
            const std::uint64_t s = static_cast<std::uint64_t>(it - 1) * cfg.batch_size + b;
            const auto& shape = dataset[sampler.at(s)];
            const TriplaneField f = model.encoder.encode_frozen(shape.cloud);
            const TripletResult t =
                triplet_loss(f, shape.parts, shape.cloud, loss_cfg.triplet_margin, loss_cfg.triplet_samples, mix(cfg.seed, s));
            if (t.degenerate) continue;
            ag::backward(ag::scale(t.loss, 1.0 / cfg.batch_size));
            batch_loss += t.loss.item() / cfg.batch_size;
        }
        if (cfg.grad_clip > 0) clip_gradients(tables, cfg.grad_clip);
        opt.step(tables, cfg.frozen_pretrain_lr);
        table.zero_grad();
        last = batch_loss;
    }
    table.set_trainable(false);
    model.encoder.seed_learnable_from_frozen();
    return last;
}

TrainResult train(const std::vector<data::LabeledShape>& dataset, const TrainConfig& cfg, const LossConfig& loss_cfg,
                  const ModelConfig& model_cfg, const TrainOptions& options) {
    if (dataset.empty()) throw InvalidArgument("train: empty dataset");
    cfg.validate();
    loss_cfg.validate();
    for (const auto& s : dataset)
        if (nonempty_parts(s).empty()) throw InvalidArgument("train: shape " + s.shape_id + " has no usable part");

    TrainResult result;
    AdamW opt(cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay);
    int start = 0;
    const bool to_disk = !options.out_dir.empty();
    const auto ckpt_path = to_disk ? options.out_dir / kCheckpointFile : std::filesystem::path{};
    if (to_disk) std::filesystem::create_directories(options.out_dir);

    if (to_disk && options.resume && std::filesystem::exists(ckpt_path)) {
        const TensorArchive a = read_archive(ckpt_path);
        result.model = model_from_archive(a);
        opt.load(a);
        start = a.meta.value("iter", 0);
        result.checkpoint = ckpt_path;
    } else {
        result.model = std::make_unique<Model>(model_cfg);
        if (cfg.frozen_pretrain_iterations > 0) pretrain_frozen_branch(*result.model, dataset, cfg, loss_cfg);
    }
    Model& model = *result.model;
    auto tables = model.trainable_tables();

    auto save = [&](int iter) {
        if (!to_disk) return;
        TensorArchive a = model_archive(model);
        a.meta["iter"] = iter;
        a.meta["train"] = to_json(cfg);
        a.meta["loss"] = to_json(loss_cfg);
        opt.save(a);
        write_archive(ckpt_path, a);
        result.checkpoint = ckpt_path;
    };

    std::ofstream metrics;
    if (to_disk) metrics.open(options.out_dir / "metrics.jsonl", start > 0 ? std::ios::app : std::ios::trunc);

    // Without augmentation the frozen field of a shape never changes.
    const bool cache_frozen = !cfg.augment && dataset.size() <= 64;
    std::vector<std::optional<Mat>> frozen_cache(cache_frozen ? dataset.size() : 0);

    BatchSampler sampler(dataset.size(), cfg.seed);
    const auto t0 = std::chrono::steady_clock::now();
    for (int it = start + 1; it <= cfg.iterations; ++it) {
        const Real lr = cfg.lr_at(it);
        LossTerms sum;
        int count = 0;
        for (int b = 0; b < cfg.batch_size; ++b) {
            const std::uint64_t s = static_cast<std::uint64_t>(it - 1) * cfg.batch_size + b;
            const std::size_t si = sampler.at(s);
            Rng rng(mix(cfg.seed, s + 0x5eed));
            data::LabeledShape augmented;
            const data::LabeledShape* shape = &dataset[si];
            if (cfg.augment) {
                data::AugmentationConfig ac = cfg.augmentation;
                ac.seed = rng.next();
                augmented = data::augment(*shape, ac);
                augmented.cloud = data::default_gray(augmented.cloud);
                shape = &augmented;
            }
            const PointCloud& cloud = shape->cloud;

            TriplaneField frozen;
            if (cache_frozen && frozen_cache[si]) {
                frozen.planes = ag::constant(*frozen_cache[si]);
                frozen.resolution = model.encoder.config().resolution;
                frozen.channels = model.encoder.config().channels;
                frozen.tag = BranchTag::frozen;
            } else {
                frozen = model.encoder.encode_frozen(cloud);
                if (cache_frozen) frozen_cache[si] = frozen.planes.value();
            }
            const TriplaneField field = Encoder::fuse(frozen, model.encoder.encode_learnable(cloud));
            FpsOptions fps_options;
            if (cfg.augment) fps_options.seed = rng.next();
            const TokenSet tokens = model.encoder.tokenize(field, cloud, fps_options);
            const DecoderContext ctx = model.decoder.prepare(field, tokens, cloud);

            IndexList parts = nonempty_parts(*shape);
            shuffle(parts, rng);
            const int n_masks = std::min<int>(cfg.masks_per_shape, static_cast<int>(parts.size()));
            ag::Var shape_loss;
            LossTerms terms;
            for (int k = 0; k < n_masks; ++k) {
                const ShapeLoss sl = simulate_training(model, field, tokens, ctx, cloud, shape->parts[parts[k]],
                                                       cfg.rounds, rng.next(), loss_cfg);
                shape_loss = k == 0 ? sl.loss : ag::add(shape_loss, sl.loss);
                terms.focal += sl.terms.focal / n_masks;
                terms.dice += sl.terms.dice / n_masks;
                terms.iou_head += sl.terms.iou_head / n_masks;
            }
            shape_loss = ag::scale(shape_loss, 1.0 / n_masks);
            if (loss_cfg.lambda_triplet > 0) {
                const TripletResult t = triplet_loss(field, shape->parts, cloud, loss_cfg.triplet_margin,
                                                     loss_cfg.triplet_samples, rng.next());
                terms.triplet = t.loss.item();
                if (!t.degenerate) shape_loss = ag::add(shape_loss, ag::scale(t.loss, loss_cfg.lambda_triplet));
            }
            terms.total = shape_loss.item();
            if (!std::isfinite(terms.total))
                throw TrainingAborted("train: non-finite loss at iteration " + std::to_string(it), result.checkpoint);
            ag::backward(ag::scale(shape_loss, 1.0 / cfg.batch_size));
            sum.total += terms.total;
            sum.focal += terms.focal;
            sum.dice += terms.dice;
            sum.iou_head += terms.iou_head;
            sum.triplet += terms.triplet;
            ++count;
        }
        if (!all_finite(tables))
            throw TrainingAborted("train: non-finite gradient at iteration " + std::to_string(it), result.checkpoint);
        if (cfg.grad_clip > 0) clip_gradients(tables, cfg.grad_clip);
        opt.step(tables, lr);
        for (auto& [_, t] : tables) t->zero_grad();

        StepMetrics m;
        m.iter = it;
        m.lr = lr;
        m.loss.total = sum.total / count;
        m.loss.focal = sum.focal / count;
        m.loss.dice = sum.dice / count;
        m.loss.iou_head = sum.iou_head / count;
        m.loss.triplet = sum.triplet / count;
        m.seconds = std::chrono::duration<Real>(std::chrono::steady_clock::now() - t0).count();
        result.history.push_back(m);
        result.iterations_done = it;
        if (metrics && it % cfg.log_every == 0) metrics << to_json(m).dump() << '\n' << std::flush;
        if (options.on_step) options.on_step(m);
        const bool out_of_time = cfg.max_seconds > 0 && m.seconds >= cfg.max_seconds;
        if (it % cfg.checkpoint_every == 0 || it == cfg.iterations || out_of_time) save(it);
        if (out_of_time) break;
    }
    if (result.iterations_done == 0) {
        result.iterations_done = start;
        if (start == 0) save(0);
    }
    return result;
}

// ---------------------------------------------------------------------------
// Config files

io::json to_json(const TrainConfig& c) {
    return {{"iterations", c.iterations},     {"batch_size", c.batch_size},
            {"lr", c.lr},                     {"lr_decay", c.lr_decay},
            {"decay_every", c.decay_every},   {"rounds", c.rounds},
            {"seed", c.seed},                 {"weight_decay", c.weight_decay},
            {"beta1", c.beta1},               {"beta2", c.beta2},
            {"adam_eps", c.adam_eps},         {"grad_clip", c.grad_clip},
            {"masks_per_shape", c.masks_per_shape}, {"checkpoint_every", c.checkpoint_every},
            {"log_every", c.log_every},       {"strict", c.strict},
            {"augment", c.augment},           {"frozen_pretrain_iterations", c.frozen_pretrain_iterations},
            {"frozen_pretrain_lr", c.frozen_pretrain_lr}, {"max_seconds", c.max_seconds}};
}

io::json to_json(const LossConfig& c) {
    return {{"lambda_triplet", c.lambda_triplet}, {"focal_alpha", c.focal_alpha},
            {"focal_gamma", c.focal_gamma},       {"iou_head_weight", c.iou_head_weight},
            {"triplet_margin", c.triplet_margin}, {"triplet_samples", c.triplet_samples}};
}

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

// Converts a raw config value into the JSON type already held at `slot`.
void assign(io::json& slot, const std::string& key, const std::string& raw) {
    try {
        if (slot.is_boolean()) {
            if (raw == "true" || raw == "1") slot = true;
            else if (raw == "false" || raw == "0") slot = false;
            else throw InvalidArgument("");
        } else if (slot.is_number_unsigned()) {
            slot = static_cast<std::uint64_t>(std::stoull(raw));
        } else if (slot.is_number_integer()) {
            std::size_t used = 0;
            const long long v = std::stoll(raw, &used);
            if (used != raw.size()) throw InvalidArgument("");
            slot = v;
        } else {
            std::size_t used = 0;
            const double v = std::stod(raw, &used);
            if (used != raw.size()) throw InvalidArgument("");
            slot = v;
        }
    } catch (const std::exception&) {
        throw InvalidArgument("config: bad value for " + key + ": '" + raw + "'");
    }
}

}  // namespace

TrainingSetup parse_training_config(const std::string& text) {
    TrainingSetup setup;
    io::json train = to_json(setup.train), loss = to_json(setup.loss);
    io::json enc = to_json(setup.model.encoder), dec = to_json(setup.model.decoder);
    io::json model = {{"seed", setup.model.seed}};
    io::json aug = {{"rotation", "z_only"}, {"scale_min", 0.8}, {"scale_max", 1.25}, {"flip_prob", 0.5},
                    {"shift_range", 0.1}, {"renormalize", true}};
    std::istringstream in(text);
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw InvalidArgument("config line " + std::to_string(line_no) + ": expected key = value");
        const std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
        const auto dot = key.find('.');
        const std::string section = dot == std::string::npos ? "" : key.substr(0, dot);
        const std::string field = dot == std::string::npos ? key : key.substr(dot + 1);
        io::json* target = section == "train" ? &train
                         : section == "loss" ? &loss
                         : section == "encoder" ? &enc
                         : section == "decoder" ? &dec
                         : section == "model" ? &model
                         : section == "augment" ? &aug
                                                : nullptr;
        if (!target || !target->contains(field)) throw InvalidArgument("config: unknown key '" + key + "'");
        if (section == "augment" && field == "rotation") {
            if (value != "none" && value != "z_only" && value != "full_so3")
                throw InvalidArgument("config: augment.rotation must be none, z_only or full_so3");
            (*target)[field] = value;
        } else {
            assign((*target)[field], key, value);
        }
    }
    TrainConfig& t = setup.train;
    t.iterations = train["iterations"];
    t.batch_size = train["batch_size"];
    t.lr = train["lr"];
    t.lr_decay = train["lr_decay"];
    t.decay_every = train["decay_every"];
    t.rounds = train["rounds"];
    t.seed = train["seed"];
    t.weight_decay = train["weight_decay"];
    t.beta1 = train["beta1"];
    t.beta2 = train["beta2"];
    t.adam_eps = train["adam_eps"];
    t.grad_clip = train["grad_clip"];
    t.masks_per_shape = train["masks_per_shape"];
    t.checkpoint_every = train["checkpoint_every"];
    t.log_every = train["log_every"];
    t.strict = train["strict"];
    t.augment = train["augment"];
    t.frozen_pretrain_iterations = train["frozen_pretrain_iterations"];
    t.frozen_pretrain_lr = train["frozen_pretrain_lr"];
    t.max_seconds = train["max_seconds"];
    const std::string rot = aug["rotation"];
    t.augmentation.rotation = rot == "none" ? data::RotationMode::none
                            : rot == "full_so3" ? data::RotationMode::full_so3
                                                : data::RotationMode::z_only;
    t.augmentation.scale_range = {aug["scale_min"].get<Real>(), aug["scale_max"].get<Real>()};
    t.augmentation.flip_prob = aug["flip_prob"];
    t.augmentation.shift_range = aug["shift_range"];
    t.augmentation.renormalize = aug["renormalize"];
    LossConfig& l = setup.loss;
    l.lambda_triplet = loss["lambda_triplet"];
    l.focal_alpha = loss["focal_alpha"];
    l.focal_gamma = loss["focal_gamma"];
    l.iou_head_weight = loss["iou_head_weight"];
    l.triplet_margin = loss["triplet_margin"];
    l.triplet_samples = loss["triplet_samples"];
    setup.model.encoder = encoder_config_from_json(enc);
    setup.model.decoder = decoder_config_from_json(dec);
    setup.model.seed = model["seed"];
    t.validate();
    l.validate();
    setup.model.encoder.validate();
    setup.model.decoder.validate();
    return setup;
}

TrainingSetup load_training_config(const std::filesystem::path& path) { return parse_training_config(io::read_file(path)); }

}  // namespace partprompt::training
