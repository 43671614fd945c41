// SPDX-License-Identifier: Apache-2.0

#include "partprompt/decoder.hpp"

#include <cmath>

namespace partprompt {

namespace {

constexpr std::uint64_t kPeSeed = 0x9e0c0deULL;
constexpr int kPrevFeatures = 3;

Mat small_normal(Index rows, Index cols, Real std, Rng& rng) {
    Mat m(rows, cols);
    for (Index i = 0; i < m.size(); ++i) m.data()[i] = std * rng.normal();
    return m;
}

}  // namespace

void PromptSet::push(const Vec3& p, bool positive) {
    points.conservativeResize(points.rows() + 1, 3);
    points.row(points.rows() - 1) = p;
    signs.push_back(positive);
}

DecoderConfig DecoderConfig::reference() {
    DecoderConfig c;
    c.layers = 4;
    c.width = 256;
    c.n_masks = 3;
    c.heads = 8;
    return c;
}

void DecoderConfig::validate() const {
    if (n_masks < 1) throw InvalidArgument("decoder: n_masks must be >= 1");
    if (layers < 0 || width < 2 || width % 2 != 0 || heads < 1 || width % heads != 0)
        throw InvalidArgument("decoder: width must be even and a multiple of heads");
    if (upsample_k < 1) throw InvalidArgument("decoder: upsample_k must be >= 1");
}

MaskPrediction MaskPrediction::from_logits(std::vector<Real> logits, Real predicted_iou) {
    MaskPrediction p;
    p.probabilities.resize(logits.size());
    p.mask = PartMask(logits.size(), MaskSource::predicted);
    for (std::size_t i = 0; i < logits.size(); ++i) {
        p.probabilities[i] = 1.0 / (1.0 + std::exp(-logits[i]));
        p.mask.member[i] = p.probabilities[i] > 0.5;
    }
    p.logits = std::move(logits);
    p.predicted_iou = predicted_iou;
    return p;
}

std::vector<MaskPrediction> DecodeOutput::predictions() const {
    std::vector<MaskPrediction> out;
    const Mat& L = logits.value();
    for (Index m = 0; m < L.cols(); ++m) {
        std::vector<Real> col(static_cast<std::size_t>(L.rows()));
        for (Index i = 0; i < L.rows(); ++i) col[static_cast<std::size_t>(i)] = L(i, m);
        out.push_back(MaskPrediction::from_logits(std::move(col), iou.value()(0, m)));
    }
    return out;
}

Decoder::Decoder(nn::ParamTable& table, nn::ParamTable& heads, const DecoderConfig& cfg, int field_channels, Rng& rng)
    : cfg_(cfg) {
    cfg.validate();
    const Index D = cfg.width, C = field_channels;
    pe_ = nn::FourierEmbedding(D, cfg.fourier_sigma, kPeSeed);
    prompt_proj_ = nn::Linear(table, "prompt_proj", C, D, rng);
    sign_embed_ = table.add("sign_embed", small_normal(2, D, 0.5, rng));
    out_tokens_ = table.add("out_tokens", small_normal(cfg.n_masks, D, 0.5, rng));
    iou_token_ = table.add("iou_token", small_normal(1, D, 0.5, rng));
    token_in_ = nn::Linear(table, "token_in", C, D, rng);
    prev_proj_ = nn::Linear(table, "prev_proj", kPrevFeatures, C, rng, /*bias=*/false, /*zero_init=*/true);
    skip_ = nn::Linear(table, "skip", C, D, rng);
    for (int l = 0; l < cfg.layers; ++l) {
        const std::string n = "block" + std::to_string(l);
        Block b;
        b.norm_self = nn::LayerNorm(table, n + ".norm_self", D);
        b.self_attn = nn::Attention(table, n + ".self_attn", D, cfg.heads, rng);
        b.norm_q1 = nn::LayerNorm(table, n + ".norm_q1", D);
        b.norm_k1 = nn::LayerNorm(table, n + ".norm_k1", D);
        b.to_tokens = nn::Attention(table, n + ".to_tokens", D, cfg.heads, rng);
        b.norm_mlp = nn::LayerNorm(table, n + ".norm_mlp", D);
        b.mlp = nn::Mlp(table, n + ".mlp", {D, 2 * D, D}, rng);
        b.norm_q2 = nn::LayerNorm(table, n + ".norm_q2", D);
        b.norm_k2 = nn::LayerNorm(table, n + ".norm_k2", D);
        b.to_queries = nn::Attention(table, n + ".to_queries", D, cfg.heads, rng);
        blocks_.push_back(std::move(b));
    }
    final_q_ = nn::LayerNorm(table, "final_q", D);
    final_k_ = nn::LayerNorm(table, "final_k", D);
    final_attn_ = nn::Attention(table, "final_attn", D, cfg.heads, rng);
    final_norm_ = nn::LayerNorm(table, "final_norm", D);
    for (int m = 0; m < cfg.n_masks; ++m) hyper_.emplace_back(heads, "hyper" + std::to_string(m), std::vector<Index>{D, D, D}, rng);
    iou_head_ = nn::Mlp(heads, "iou_head", {D, D, cfg.n_masks}, rng);
}

ag::Var Decoder::embed_prompts(const TriplaneField& field, const PromptSet& prompts) const {
    if (prompts.size() == 0) throw InvalidArgument("decode: empty prompt set");
    if (static_cast<Index>(prompts.signs.size()) != prompts.size())
        throw InvalidArgument("decode: one sign per prompt required");
    IndexList sign_rows;
    for (bool s : prompts.signs) sign_rows.push_back(s ? 1 : 0);
    ag::Var emb = prompt_proj_(sample_field(field, prompts.points));
    emb = ag::add(emb, ag::constant(pe_(prompts.points.cwiseMax(-1.0).cwiseMin(1.0))));
    return ag::add(emb, ag::gather_rows(sign_embed_, sign_rows));
}

Mat Decoder::prev_mask_features(const std::vector<Real>& patch_means) {
    Mat f(static_cast<Index>(patch_means.size()), kPrevFeatures);
    for (std::size_t t = 0; t < patch_means.size(); ++t) {
        const Real m = patch_means[t];
        f(Index(t), 0) = std::tanh(m / 2.0);
        f(Index(t), 1) = std::tanh(m / 8.0);
        f(Index(t), 2) = std::tanh(m / 32.0);
    }
    return f;
}

TokenSet Decoder::apply_prev_mask(const TokenSet& tokens, const std::vector<Real>& prev_logits) const {
    std::vector<Real> means;
    means.reserve(tokens.patch_members.size());
    for (const auto& patch : tokens.patch_members) {
        Real s = 0;
        for (int i : patch) {
            if (static_cast<std::size_t>(i) >= prev_logits.size())
                throw InvalidArgument("apply_prev_mask: logits shorter than the cloud");
            s += prev_logits[static_cast<std::size_t>(i)];
        }
        means.push_back(s / static_cast<Real>(patch.size()));
    }
    TokenSet out = tokens;
    out.tokens = ag::add(tokens.tokens, prev_proj_(ag::constant(prev_mask_features(means))));
    return out;
}

DecoderContext Decoder::prepare(const TriplaneField& field, const TokenSet& tokens, const PointCloud& cloud) const {
    DecoderContext ctx;
    ctx.n_points = cloud.size();
    const int k = std::min<int>(cfg_.upsample_k, static_cast<int>(tokens.centers.rows()));
    const IdwWeights w = idw_weights(tokens.centers, cloud.positions, k);
    ctx.upsample.n_in = tokens.centers.rows();
    for (std::size_t q = 0; q < w.neighbors.size(); ++q) {
        for (std::size_t j = 0; j < w.neighbors[q].size(); ++j) ctx.upsample.push(w.neighbors[q][j], w.weights[q][j]);
        ctx.upsample.end_row();
    }
    ctx.point_skip = skip_(sample_field(field, cloud.positions));
    ctx.token_pe = pe_(tokens.centers);
    return ctx;
}

DecodeOutput Decoder::operator()(const DecoderContext& ctx, const TriplaneField& field, const TokenSet& tokens_in,
                                 const PromptSet& prompts) const {
    if (prompts.prev_logits && static_cast<Index>(prompts.prev_logits->size()) != ctx.n_points)
        throw InvalidArgument("decode: prev_logits length must equal the point count");
    const TokenSet tokens = prompts.prev_logits ? apply_prev_mask(tokens_in, *prompts.prev_logits) : tokens_in;

    const ag::Var prompt_emb = embed_prompts(field, prompts);
    const ag::Var query_pe = ag::concat_rows({prompt_emb, out_tokens_, iou_token_});
    const ag::Var key_pe = ag::constant(ctx.token_pe);
    ag::Var Q = query_pe;
    ag::Var K = token_in_(tokens.tokens);

    for (const auto& b : blocks_) {
        ag::Var a = b.norm_self(Q);
        ag::Var qa = ag::add(a, query_pe);
        Q = ag::add(Q, b.self_attn(qa, qa, a));

        a = b.norm_q1(Q);
        ag::Var kk = b.norm_k1(K);
        Q = ag::add(Q, b.to_tokens(ag::add(a, query_pe), ag::add(kk, key_pe), kk));

        Q = ag::add(Q, b.mlp(b.norm_mlp(Q)));

        a = b.norm_q2(Q);
        kk = b.norm_k2(K);
        K = ag::add(K, b.to_queries(ag::add(kk, key_pe), ag::add(a, query_pe), a));
    }
    {
        ag::Var a = final_q_(Q);
        ag::Var kk = final_k_(K);
        Q = ag::add(Q, final_attn_(ag::add(a, query_pe), ag::add(kk, key_pe), kk));
        Q = final_norm_(Q);
    }

    const Index n_p = prompts.size();
    const int emitted = n_p == 1 ? cfg_.n_masks : 1;
    ag::Var point_emb = ag::gelu(ag::add(ag::sparse_rows(K, ctx.upsample), ctx.point_skip));
    std::vector<ag::Var> hyper;
    for (int m = 0; m < emitted; ++m) hyper.push_back(hyper_[m](ag::slice_rows(Q, n_p + m, 1)));
    DecodeOutput out;
    out.logits = ag::matmul_nt(point_emb, ag::concat_rows(hyper));
    ag::Var iou = ag::sigmoid(iou_head_(ag::slice_rows(Q, n_p + cfg_.n_masks, 1)));
    out.iou = emitted == cfg_.n_masks ? iou : ag::slice_cols(iou, 0, emitted);
    return out;
}

}  // namespace partprompt
