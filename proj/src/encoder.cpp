// SPDX-License-Identifier: Apache-2.0

#include "partprompt/encoder.hpp"

#include <algorithm>
#include <cmath>

namespace partprompt {

namespace {

constexpr std::uint64_t kFourierSeed = 0x7a1b5eedULL;

// Projected coordinates of each plane: (x, y), (x, z), (y, z).
constexpr int kPlaneAxes[3][2] = {{0, 1}, {0, 2}, {1, 2}};

struct Bilinear {
    int i0, j0;
    Real tu, tv;
};

Bilinear bilinear(Real u, Real v, int resolution) {
    const Real gu = grid_coordinate(u, resolution);
    const Real gv = grid_coordinate(v, resolution);
    Bilinear b;
    b.i0 = std::clamp(static_cast<int>(std::floor(gu)), 0, resolution - 2);
    b.j0 = std::clamp(static_cast<int>(std::floor(gv)), 0, resolution - 2);
    b.tu = gu - b.i0;
    b.tv = gv - b.j0;
    return b;
}

template <typename Fn>
void for_each_corner(const Bilinear& b, int resolution, Fn&& fn) {
    const Real w[4] = {(1 - b.tu) * (1 - b.tv), b.tu * (1 - b.tv), (1 - b.tu) * b.tv, b.tu * b.tv};
    const int cells[4] = {b.j0 * resolution + b.i0, b.j0 * resolution + b.i0 + 1, (b.j0 + 1) * resolution + b.i0,
                          (b.j0 + 1) * resolution + b.i0 + 1};
    for (int c = 0; c < 4; ++c) fn(cells[c], w[c]);
}

}  // namespace

EncoderConfig EncoderConfig::reference() {
    EncoderConfig c;
    c.resolution = 512;
    c.channels = 448;
    c.transformer_layers = 6;
    c.n_patches = 2000;
    c.patch_k = 32;
    c.heads = 8;
    c.lift_hidden = 256;
    return c;
}

void EncoderConfig::validate() const {
    if (resolution < 2 || (resolution & (resolution - 1)) != 0)
        throw InvalidArgument("encoder: resolution must be a power of two");
    if (plane_patch < 1 || resolution % plane_patch != 0)
        throw InvalidArgument("encoder: plane patch must divide the resolution");
    if (channels < 1 || heads < 1 || channels % heads != 0)
        throw InvalidArgument("encoder: channels must be a positive multiple of heads");
    if (n_patches < 1 || patch_k < 1) throw InvalidArgument("encoder: n_patches and patch_k must be >= 1");
    if (transformer_layers < 0 || lift_hidden < 1 || fourier_width < 2 || fourier_width % 2 != 0)
        throw InvalidArgument("encoder: bad layer or width settings");
}

Mat TriplaneField::plane(int p) const {
    const Index cells = static_cast<Index>(resolution) * resolution;
    return planes.value().middleRows(p * cells, cells);
}

ag::SparseRows splat_map(const Points& positions, int resolution) {
    const Index cells = static_cast<Index>(resolution) * resolution;
    std::vector<std::vector<std::pair<int, Real>>> bucket(static_cast<std::size_t>(3 * cells));
    for (Index i = 0; i < positions.rows(); ++i)
        for (int p = 0; p < 3; ++p) {
            const Bilinear b = bilinear(positions(i, kPlaneAxes[p][0]), positions(i, kPlaneAxes[p][1]), resolution);
            for_each_corner(b, resolution, [&](int cell, Real w) {
                if (w > 0) bucket[static_cast<std::size_t>(p * cells + cell)].emplace_back(static_cast<int>(i), w);
            });
        }
    ag::SparseRows map;
    map.n_in = positions.rows();
    for (const auto& entries : bucket) {
        Real total = 0;
        for (const auto& [_, w] : entries) total += w;
        for (const auto& [i, w] : entries) map.push(i, w / total);
        map.end_row();
    }
    return map;
}

ag::SparseRows sample_map(const Points& coords, int resolution, int* clamped) {
    const Index cells = static_cast<Index>(resolution) * resolution;
    ag::SparseRows map;
    map.n_in = 3 * cells;
    int n_clamped = 0;
    for (Index q = 0; q < coords.rows(); ++q) {
        Vec3 c = coords.row(q);
        const Vec3 inside = c.cwiseMax(-1.0).cwiseMin(1.0);
        if (inside != c) ++n_clamped;
        for (int p = 0; p < 3; ++p) {
            const Bilinear b = bilinear(inside(kPlaneAxes[p][0]), inside(kPlaneAxes[p][1]), resolution);
            for_each_corner(b, resolution, [&](int cell, Real w) { map.push(static_cast<int>(p * cells + cell), w); });
        }
        map.end_row();
    }
    if (clamped) *clamped = n_clamped;
    return map;
}

ag::Var sample_field(const TriplaneField& field, const Points& coords, int* clamped) {
    return ag::sparse_rows(field.planes, sample_map(coords, field.resolution, clamped));
}

Mat lift_inputs(const Points& positions, const nn::FourierEmbedding& fourier) {
    const Mat f = fourier(positions);
    Mat out(positions.rows(), 3 + f.cols());
    out.leftCols(3) = positions;
    out.rightCols(f.cols()) = f;
    return out;
}

void require_normalized(const PointCloud& cloud) {
    if (cloud.size() == 0) throw InvalidArgument("encode: empty cloud");
    const Real extent = cloud.positions.cwiseAbs().maxCoeff();
    if (!(extent <= 1.0 + 1e-6)) throw InvalidArgument("encode: cloud is not normalized to [-1, 1]");
}

TriplaneBranch::TriplaneBranch(nn::ParamTable& table, const EncoderConfig& cfg, bool with_attributes, Rng& rng)
    : cfg_(cfg), with_attributes_(with_attributes) {
    cfg.validate();
    const Index C = cfg.channels;
    fourier_ = nn::FourierEmbedding(cfg.fourier_width, cfg.fourier_sigma, kFourierSeed);
    lift_ = nn::Mlp(table, "lift", {3 + cfg.fourier_width, cfg.lift_hidden, C}, rng);
    if (with_attributes) fusion_ = nn::Mlp(table, "fusion", {6, cfg.lift_hidden, C}, rng, /*zero_last=*/true);

    const int R = cfg.resolution, P = cfg.plane_patch, G = R / P;
    const Index patch_width = static_cast<Index>(P) * P * C;
    embed_ = nn::Linear(table, "embed", patch_width, C, rng);
    Mat pos(3 * G * G, C);
    for (Index i = 0; i < pos.size(); ++i) pos.data()[i] = 0.02 * rng.normal();
    position_ = table.add("position", pos);
    for (int l = 0; l < cfg.transformer_layers; ++l)
        blocks_.emplace_back(table, "block" + std::to_string(l), C, cfg.heads, rng);
    norm_ = nn::LayerNorm(table, "norm", C);
    unembed_ = nn::Linear(table, "unembed", C, patch_width, rng);

    const int cells = R * R;
    patch_order_.reserve(static_cast<std::size_t>(3 * cells));
    for (int p = 0; p < 3; ++p)
        for (int pv = 0; pv < G; ++pv)
            for (int pu = 0; pu < G; ++pu)
                for (int dv = 0; dv < P; ++dv)
                    for (int du = 0; du < P; ++du) patch_order_.push_back(p * cells + (pv * P + dv) * R + pu * P + du);
    cell_order_.assign(patch_order_.size(), 0);
    for (std::size_t k = 0; k < patch_order_.size(); ++k) cell_order_[static_cast<std::size_t>(patch_order_[k])] = static_cast<int>(k);
}

ag::Var TriplaneBranch::lift(const PointCloud& cloud) const {
    ag::Var h = lift_(ag::constant(lift_inputs(cloud.positions, fourier_)));
    if (with_attributes_) {
        Mat attr(cloud.size(), 6);
        if (cloud.has_normals && cloud.normals.rows() == cloud.size())
            attr.leftCols(3) = cloud.normals;
        else
            attr.leftCols(3).setZero();
        if (cloud.colors.rows() == cloud.size())
            attr.rightCols(3) = cloud.colors.array() - 0.5;
        else
            attr.rightCols(3).setZero();
        h = ag::add(h, fusion_(ag::constant(std::move(attr))));
    }
    return h;
}

ag::Var TriplaneBranch::splat(const PointCloud& cloud) const {
    return ag::sparse_rows(lift(cloud), splat_map(cloud.positions, cfg_.resolution));
}

TriplaneField TriplaneBranch::operator()(const PointCloud& cloud, BranchTag tag) const {
    const int R = cfg_.resolution, P = cfg_.plane_patch, G = R / P;
    const Index C = cfg_.channels;
    ag::Var raw = splat(cloud);
    ag::Var patches = ag::reshape(ag::gather_rows(raw, patch_order_), 3 * G * G, static_cast<Index>(P) * P * C);
    ag::Var tokens = ag::add(embed_(patches), position_);
    for (const auto& block : blocks_) tokens = block(tokens);
    ag::Var delta = ag::reshape(unembed_(norm_(tokens)), 3 * static_cast<Index>(R) * R, C);
    TriplaneField field;
    field.planes = ag::add(raw, ag::gather_rows(delta, cell_order_));
    field.resolution = R;
    field.channels = static_cast<int>(C);
    field.tag = tag;
    return field;
}

Tokenizer::Tokenizer(nn::ParamTable& table, const EncoderConfig& cfg, Rng& rng) : cfg_(cfg) {
    const Index C = cfg.channels;
    point_mlp_ = nn::Mlp(table, "point_mlp", {C + 3, C, C}, rng);
    proj_ = nn::Linear(table, "proj", C, C, rng);
}

TokenSet Tokenizer::operator()(const TriplaneField& field, const PointCloud& cloud, const FpsOptions& fps_options) const {
    if (cfg_.n_patches > cloud.size()) throw InvalidArgument("tokenize: more patches than points");
    if (cfg_.patch_k > cloud.size()) throw InvalidArgument("tokenize: patch size exceeds point count");
    TokenSet set;
    set.center_index = fps(cloud, cfg_.n_patches, fps_options);
    set.patch_members = knn_group(cloud, set.center_index, cfg_.patch_k);
    const Index n_c = cfg_.n_patches, k = cfg_.patch_k;
    set.centers.resize(n_c, 3);
    Points members(n_c * k, 3);
    Mat offsets(n_c * k, 3);
    std::vector<IndexList> groups(static_cast<std::size_t>(n_c));
    for (Index t = 0; t < n_c; ++t) {
        set.centers.row(t) = cloud.positions.row(set.center_index[t]);
        for (Index m = 0; m < k; ++m) {
            const Index row = t * k + m;
            members.row(row) = cloud.positions.row(set.patch_members[t][m]);
            offsets.row(row) = (members.row(row) - set.centers.row(t)) * kOffsetScale;
            groups[t].push_back(static_cast<int>(row));
        }
    }
    ag::Var feats = ag::concat_cols({sample_field(field, members), ag::constant(std::move(offsets))});
    set.tokens = proj_(ag::group_max(point_mlp_(feats), groups));
    return set;
}

Encoder::Encoder(const EncoderConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg.validate();
    Rng rng(seed);
    frozen_ = TriplaneBranch(frozen_table, cfg, false, rng);
    learnable_ = TriplaneBranch(learnable_table, cfg, cfg.extra_attribute_fusion, rng);
    tokenizer_ = Tokenizer(tokenizer_table, cfg, rng);
    frozen_table.set_trainable(false);
    seed_learnable_from_frozen();
}

void Encoder::seed_learnable_from_frozen() { learnable_table.copy_matching_from(frozen_table); }

TriplaneField Encoder::encode_frozen(const PointCloud& cloud) const {
    require_normalized(cloud);
    return frozen_(cloud, BranchTag::frozen);
}

TriplaneField Encoder::encode_learnable(const PointCloud& cloud) const {
    require_normalized(cloud);
    return learnable_(cloud, BranchTag::learnable);
}

TriplaneField Encoder::fuse(const TriplaneField& frozen, const TriplaneField& learnable) {
    TriplaneField out;
    out.planes = ag::add(frozen.planes, learnable.planes);
    out.resolution = frozen.resolution;
    out.channels = frozen.channels;
    out.tag = BranchTag::fused;
    return out;
}

TriplaneField Encoder::encode(const PointCloud& cloud) const {
    return fuse(encode_frozen(cloud), encode_learnable(cloud));
}

TokenSet Encoder::tokenize(const TriplaneField& field, const PointCloud& cloud, const FpsOptions& fps_options) const {
    return tokenizer_(field, cloud, fps_options);
}

}  // namespace partprompt
