// SPDX-License-Identifier: Apache-2.0

#include "partprompt/data.hpp"

#include <Eigen/Geometry>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

namespace partprompt::data {

std::string to_string(Provenance p) {
    switch (p) {
        case Provenance::synthetic: return "synthetic";
        case Provenance::scene_graph: return "scene_graph";
        case Provenance::connected_components: return "connected_components";
        case Provenance::model_in_the_loop: return "model_in_the_loop";
    }
    return "synthetic";
}

Provenance provenance_from_string(const std::string& s) {
    if (s == "synthetic") return Provenance::synthetic;
    if (s == "scene_graph") return Provenance::scene_graph;
    if (s == "connected_components") return Provenance::connected_components;
    if (s == "model_in_the_loop") return Provenance::model_in_the_loop;
    throw InvalidArgument("unknown provenance '" + s + "'");
}

std::string to_string(RejectReason r) {
    switch (r) {
        case RejectReason::too_few_parts: return "too_few_parts";
        case RejectReason::too_many_parts: return "too_many_parts";
        case RejectReason::no_geometry: return "no_geometry";
    }
    return "no_geometry";
}

std::size_t LabeledShape::total_part_points() const {
    std::size_t n = 0;
    for (const auto& p : parts) n += p.count();
    return n;
}

IndexList LabeledShape::point_labels() const {
    IndexList labels(cloud.size(), -1);
    for (std::size_t p = 0; p < parts.size(); ++p)
        for (std::size_t i = 0; i < parts[p].size(); ++i)
            if (parts[p].member[i]) labels[i] = static_cast<int>(p);
    return labels;
}

namespace {

constexpr Real kPi = 3.14159265358979323846;

// Primitive surfaces are built around the local z axis, then the axis is
// permuted into place: axis 0 maps local z to x, 1 to y, 2 keeps z.
Vec3 orient(Real x, Real y, Real z, int axis) {
    switch (axis) {
        case 0: return {z, x, y};
        case 1: return {y, z, x};
        default: return {x, y, z};
    }
}

struct MeshBuilder {
    std::vector<Vec3> verts;
    std::vector<std::array<int, 3>> faces;

    int vertex(const Vec3& v) {
        verts.push_back(v);
        return static_cast<int>(verts.size()) - 1;
    }
    void tri(int a, int b, int c) { faces.push_back({a, b, c}); }
    void quad(int a, int b, int c, int d) {
        tri(a, b, c);
        tri(a, c, d);
    }
    TriangleMesh build(const Vec3& offset) const {
        TriangleMesh m;
        m.vertices.resize(static_cast<Index>(verts.size()), 3);
        for (std::size_t i = 0; i < verts.size(); ++i) m.vertices.row(Index(i)) = verts[i] + offset;
        m.faces.resize(static_cast<Index>(faces.size()), 3);
        for (std::size_t i = 0; i < faces.size(); ++i)
            for (int c = 0; c < 3; ++c) m.faces(Index(i), c) = faces[i][c];
        return m;
    }
};

TriangleMesh make_box(const Vec3& c, const Vec3& h) {
    MeshBuilder b;
    int v[8];
    for (int i = 0; i < 8; ++i)
        v[i] = b.vertex(Vec3((i & 1) ? h(0) : -h(0), (i & 2) ? h(1) : -h(1), (i & 4) ? h(2) : -h(2)));
    b.quad(v[0], v[2], v[3], v[1]);  // -z
    b.quad(v[4], v[5], v[7], v[6]);  // +z
    b.quad(v[0], v[1], v[5], v[4]);  // -y
    b.quad(v[2], v[6], v[7], v[3]);  // +y
    b.quad(v[0], v[4], v[6], v[2]);  // -x
    b.quad(v[1], v[3], v[7], v[5]);  // +x
    return b.build(c);
}

/// Closed prism over a star or regular polygon cross-section.
TriangleMesh make_prism(const Vec3& c, const std::vector<std::pair<Real, Real>>& outline, Real half_height, int axis) {
    MeshBuilder b;
    const int n = static_cast<int>(outline.size());
    std::vector<int> bottom(n), top(n);
    for (int i = 0; i < n; ++i) {
        bottom[i] = b.vertex(orient(outline[i].first, outline[i].second, -half_height, axis));
        top[i] = b.vertex(orient(outline[i].first, outline[i].second, half_height, axis));
    }
    const int cb = b.vertex(orient(0, 0, -half_height, axis));
    const int ct = b.vertex(orient(0, 0, half_height, axis));
    for (int i = 0; i < n; ++i) {
        const int j = (i + 1) % n;
        b.quad(bottom[i], bottom[j], top[j], top[i]);
        b.tri(cb, bottom[j], bottom[i]);
        b.tri(ct, top[i], top[j]);
    }
    return b.build(c);
}

TriangleMesh make_cylinder(const Vec3& c, Real radius, Real half_height, int axis, int segs = 16) {
    std::vector<std::pair<Real, Real>> ring;
    for (int i = 0; i < segs; ++i) {
        const Real a = 2 * kPi * i / segs;
        ring.emplace_back(radius * std::cos(a), radius * std::sin(a));
    }
    return make_prism(c, ring, half_height, axis);
}

TriangleMesh make_star(const Vec3& c, Real outer, Real inner, Real half_height, int axis, int tips = 5) {
    std::vector<std::pair<Real, Real>> ring;
    for (int i = 0; i < 2 * tips; ++i) {
        const Real a = kPi * i / tips;
        const Real r = (i % 2 == 0) ? outer : inner;
        ring.emplace_back(r * std::cos(a), r * std::sin(a));
    }
    return make_prism(c, ring, half_height, axis);
}

TriangleMesh make_ellipsoid(const Vec3& c, const Vec3& radii, int rings = 8, int segs = 12) {
    MeshBuilder b;
    const int south = b.vertex(Vec3(0, 0, -radii(2)));
    std::vector<std::vector<int>> grid;
    for (int r = 1; r < rings; ++r) {
        const Real phi = -kPi / 2 + kPi * r / rings;
        std::vector<int> row;
        for (int s = 0; s < segs; ++s) {
            const Real th = 2 * kPi * s / segs;
            row.push_back(b.vertex(Vec3(radii(0) * std::cos(phi) * std::cos(th), radii(1) * std::cos(phi) * std::sin(th),
                                        radii(2) * std::sin(phi))));
        }
        grid.push_back(row);
    }
    const int north = b.vertex(Vec3(0, 0, radii(2)));
    for (int s = 0; s < segs; ++s) {
        const int t = (s + 1) % segs;
        b.tri(south, grid.front()[t], grid.front()[s]);
        b.tri(north, grid.back()[s], grid.back()[t]);
        for (std::size_t r = 0; r + 1 < grid.size(); ++r) b.quad(grid[r][s], grid[r][t], grid[r + 1][t], grid[r + 1][s]);
    }
    return b.build(c);
}

TriangleMesh make_torus(const Vec3& c, Real major, Real minor, int axis, int segs = 16, int tube = 8) {
    MeshBuilder b;
    std::vector<std::vector<int>> grid(segs, std::vector<int>(tube));
    for (int s = 0; s < segs; ++s) {
        const Real u = 2 * kPi * s / segs;
        for (int t = 0; t < tube; ++t) {
            const Real v = 2 * kPi * t / tube;
            const Real rr = major + minor * std::cos(v);
            grid[s][t] = b.vertex(orient(rr * std::cos(u), rr * std::sin(u), minor * std::sin(v), axis));
        }
    }
    for (int s = 0; s < segs; ++s)
        for (int t = 0; t < tube; ++t) {
            const int s2 = (s + 1) % segs, t2 = (t + 1) % tube;
            b.quad(grid[s][t], grid[s2][t], grid[s2][t2], grid[s][t2]);
        }
    return b.build(c);
}

struct Part {
    TriangleMesh mesh;
    Vec3 center;
    Vec3 half;  // axis-aligned half extent
};

enum class Kind { box, cylinder, sphere, torus, star };

/// A primitive of `kind` whose bounding box has roughly half-extent `size`
/// along its main axis and `radius` across it.
Part make_part(Kind kind, const Vec3& center, Real radius, Real half_len, int axis, Rng& rng) {
    Part p;
    p.center = center;
    Vec3 h = orient(radius, radius, half_len, axis).cwiseAbs();
    switch (kind) {
        case Kind::box: {
            const Vec3 jitter(rng.uniform(0.7, 1.0), rng.uniform(0.7, 1.0), 1.0);
            h = orient(radius * jitter(0), radius * jitter(1), half_len, axis).cwiseAbs();
            p.mesh = make_box(center, h);
            break;
        }
        case Kind::cylinder: p.mesh = make_cylinder(center, radius, half_len, axis); break;
        case Kind::sphere: {
            const Real r = std::max(radius, half_len);
            h = Vec3(r, r, r);
            p.mesh = make_ellipsoid(center, h);
            break;
        }
        case Kind::torus: {
            const Real minor = std::max(0.25 * radius, 0.02);
            const Real major = std::max(radius - minor, minor * 1.5);
            h = orient(major + minor, major + minor, minor, axis).cwiseAbs();
            p.mesh = make_torus(center, major, minor, axis);
            break;
        }
        case Kind::star: p.mesh = make_star(center, radius, 0.5 * radius, half_len, axis); break;
    }
    p.half = h;
    return p;
}

Kind random_kind(Rng& rng, bool allow_torus = true) {
    const int n = allow_torus ? 5 : 4;
    const int k = static_cast<int>(rng.below(n));
    static const Kind kinds[] = {Kind::box, Kind::cylinder, Kind::sphere, Kind::star, Kind::torus};
    return kinds[k];
}

/// Distance from `c` along unit `d` to the boundary of the box `half` around c.
Real box_reach(const Vec3& half, const Vec3& d) {
    Real t = std::numeric_limits<Real>::infinity();
    for (int a = 0; a < 3; ++a)
        if (std::abs(d(a)) > 1e-9) t = std::min(t, half(a) / std::abs(d(a)));
    return t;
}

std::pair<Vec3, Real> normalization_of(const Points& pts) {
    const Vec3 lo = pts.colwise().minCoeff();
    const Vec3 hi = pts.colwise().maxCoeff();
    const Real longest = (hi - lo).maxCoeff();
    return {0.5 * (lo + hi), longest > 0 ? 2.0 / longest : 1.0};
}

}  // namespace

LabeledShape shape_from_mesh(const TriangleMesh& mesh, const IndexList& face_part, int n_points, std::uint64_t seed,
                             Provenance provenance, const std::string& shape_id) {
    if (static_cast<Index>(face_part.size()) != mesh.face_count())
        throw InvalidArgument("shape_from_mesh: face_part length mismatch");
    LabeledShape shape;
    shape.shape_id = shape_id;
    shape.provenance = provenance;
    PointCloud raw = sample_mesh_points(mesh, n_points, seed);
    const auto [center, s] = normalization_of(raw.positions);
    shape.cloud = normalize(raw);
    TriangleMesh m = mesh;
    m.vertices = (mesh.vertices.rowwise() - center) * s;
    shape.mesh = std::move(m);
    shape.face_part = face_part;
    const int n_parts = face_part.empty() ? 0 : *std::max_element(face_part.begin(), face_part.end()) + 1;
    shape.parts.assign(n_parts, PartMask(static_cast<std::size_t>(n_points), MaskSource::ground_truth));
    for (int i = 0; i < n_points; ++i) {
        const int p = face_part[shape.cloud.face_of[i]];
        if (p >= 0) shape.parts[p].member[i] = 1;
    }
    return shape;
}

LabeledShape generate_synthetic(std::uint64_t seed, int min_parts, int max_parts, const SyntheticOptions& options) {
    if (min_parts < 2 || min_parts > max_parts || max_parts > 50)
        throw InvalidArgument("generate_synthetic: need 2 <= min <= max <= 50");
    Rng rng(seed);
    const int n_parts = rng.range(min_parts, max_parts);
    const bool interior = rng.uniform() < options.interior_probability;

    std::vector<Part> parts;
    Vec3 body_center(0, 0, 0);
    Vec3 body_half;
    if (interior) {
        // Closed hull around a hidden core.
        if (rng.uniform() < 0.5) {
            const Real r = rng.uniform(0.5, 0.65);
            body_half = Vec3(r, r, r);
            parts.push_back(Part{make_ellipsoid(body_center, body_half, 10, 16), body_center, body_half});
        } else {
            body_half = Vec3(rng.uniform(0.45, 0.65), rng.uniform(0.45, 0.65), rng.uniform(0.45, 0.65));
            parts.push_back(Part{make_box(body_center, body_half), body_center, body_half});
        }
        const Real core = 0.45 * body_half.minCoeff();
        const Vec3 offset(rng.uniform(-0.1, 0.1), rng.uniform(-0.1, 0.1), rng.uniform(-0.1, 0.1));
        const Vec3 core_center = offset * body_half.minCoeff();
        parts.push_back(make_part(random_kind(rng, false), core_center, core * rng.uniform(0.6, 1.0),
                                  core * rng.uniform(0.6, 1.0), static_cast<int>(rng.below(3)), rng));
    } else {
        const Kind kind = random_kind(rng, false);
        const Real radius = rng.uniform(0.3, 0.6);
        const Real half_len = rng.uniform(0.15, 0.5);
        parts.push_back(make_part(kind, body_center, radius, half_len, 2, rng));
        body_half = parts.back().half;
    }

    int remaining = n_parts - static_cast<int>(parts.size());
    const int mode = static_cast<int>(rng.below(3));  // 0 legs, 1 stack, 2 cluster only

    if (mode == 0 && remaining >= 3) {
        const int legs = std::min(remaining, rng.range(3, 6));
        const Real leg_len = rng.uniform(0.2, 0.45);
        const Real leg_r = rng.uniform(0.04, 0.08);
        const Kind leg_kind = rng.uniform() < 0.5 ? Kind::cylinder : Kind::box;
        for (int i = 0; i < legs; ++i) {
            const Real a = 2 * kPi * (i + 0.5) / legs;
            const Vec3 c(0.75 * body_half(0) * std::cos(a), 0.75 * body_half(1) * std::sin(a),
                         body_center(2) - body_half(2) - leg_len);
            parts.push_back(make_part(leg_kind, c, leg_r, leg_len, 2, rng));
        }
        remaining -= legs;
    } else if (mode == 1 && remaining >= 1) {
        const int stack = std::min(remaining, rng.range(1, 3));
        Real top = body_center(2) + body_half(2);
        Real width = body_half.head<2>().minCoeff();
        for (int i = 0; i < stack; ++i) {
            width *= rng.uniform(0.55, 0.85);
            const Real hl = rng.uniform(0.08, 0.2);
            const Kind kind = random_kind(rng, false);
            Part p = make_part(kind, Vec3(0, 0, 0), width, hl, 2, rng);
            const Vec3 c(0, 0, top + p.half(2) + 0.01);
            p = make_part(kind, c, width, hl, 2, rng);
            top = c(2) + p.half(2);
            parts.push_back(std::move(p));
        }
        remaining -= stack;
    }

    if (remaining > 0) {
        // Attachments spread over the body by a Fibonacci lattice of directions,
        // sized so neighbouring attachments do not collide.
        const Real twist = rng.uniform(0, 2 * kPi);
        const Real golden = kPi * (3.0 - std::sqrt(5.0));
        const bool skip_bottom = mode == 0;
        const int lattice = skip_bottom ? remaining + remaining / 3 + 1 : remaining;
        const Real spacing = std::sqrt(4 * kPi / std::max(lattice, 1));
        int placed = 0;
        for (int i = 0; i < lattice && placed < remaining; ++i) {
            const Real z = 1.0 - 2.0 * (i + 0.5) / lattice;
            if (skip_bottom && z < -0.5 && lattice - i > remaining - placed) continue;
            const Real rxy = std::sqrt(std::max(0.0, 1.0 - z * z));
            const Real th = golden * i + twist;
            const Vec3 d(rxy * std::cos(th), rxy * std::sin(th), z);
            const Real reach = box_reach(body_half, d);
            const Real size = std::clamp(0.32 * spacing * (reach + 0.2), 0.035, 0.22) * rng.uniform(0.75, 1.0);
            const Kind kind = random_kind(rng);
            // Main axis follows the dominant direction component.
            int axis = 0;
            d.cwiseAbs().maxCoeff(&axis);
            const Real half_len = size * rng.uniform(0.6, 1.4);
            Part p = make_part(kind, Vec3(0, 0, 0), size, half_len, axis, rng);
            const Real out = box_reach(p.half, d);
            const Vec3 c = body_center + d * (reach + out + 0.01);
            parts.push_back(make_part(kind, c, size, half_len, axis, rng));
            ++placed;
        }
    }

    // Surface samples: half by area share, half uniform across parts, so
    // small attachments still carry a usable number of points.
    const int P = static_cast<int>(parts.size());
    std::vector<Real> area(P, 0.0);
    Real total_area = 0;
    for (int p = 0; p < P; ++p) {
        for (Index f = 0; f < parts[p].mesh.face_count(); ++f) area[p] += parts[p].mesh.face_area(f);
        total_area += area[p];
    }
    const int n = options.n_points;
    if (n < P) throw InvalidArgument("generate_synthetic: fewer points than parts");
    std::vector<int> counts(P);
    std::vector<std::pair<Real, int>> frac;
    int assigned = 0;
    for (int p = 0; p < P; ++p) {
        const Real w = 0.5 * area[p] / total_area + 0.5 / P;
        const Real exact = w * n;
        counts[p] = std::max(1, static_cast<int>(std::floor(exact)));
        frac.emplace_back(exact - std::floor(exact), p);
        assigned += counts[p];
    }
    std::sort(frac.begin(), frac.end(), [](auto& a, auto& b) { return a.first > b.first || (a.first == b.first && a.second < b.second); });
    for (std::size_t i = 0; assigned < n; i = (i + 1) % frac.size()) {
        ++counts[frac[i].second];
        ++assigned;
    }
    while (assigned > n) {
        const int p = static_cast<int>(std::max_element(counts.begin(), counts.end()) - counts.begin());
        --counts[p];
        --assigned;
    }

    const bool colored = rng.uniform() < 0.5;
    TriangleMesh mesh;
    mesh.vertices.resize(0, 3);
    mesh.faces.resize(0, 3);
    IndexList face_part;
    PointCloud cloud;
    cloud.positions.resize(n, 3);
    cloud.normals.resize(n, 3);
    cloud.colors.resize(n, 3);
    cloud.face_of.resize(n);
    cloud.has_colors = colored;
    LabeledShape shape;
    shape.parts.assign(P, PartMask(static_cast<std::size_t>(n), MaskSource::ground_truth));
    int at = 0;
    for (int p = 0; p < P; ++p) {
        Vec3 color(0.5, 0.5, 0.5);
        if (colored) color = Vec3(rng.uniform(0.1, 0.9), rng.uniform(0.1, 0.9), rng.uniform(0.1, 0.9));
        TriangleMesh pm = parts[p].mesh;
        pm.face_colors = Points::Constant(pm.face_count(), 3, 0.0);
        pm.face_colors.rowwise() = color;
        const Index face_offset = mesh.face_count();
        const PointCloud samples = sample_mesh_points(pm, counts[p], rng.split());
        for (int i = 0; i < counts[p]; ++i, ++at) {
            cloud.positions.row(at) = samples.positions.row(i);
            cloud.normals.row(at) = samples.normals.row(i);
            cloud.colors.row(at) = samples.colors.row(i);
            cloud.face_of[at] = samples.face_of[i] + static_cast<int>(face_offset);
            shape.parts[p].member[at] = 1;
        }
        mesh.append(pm);
        face_part.insert(face_part.end(), pm.face_count(), p);
    }
    if (!colored) mesh.face_colors.resize(0, 3);

    const auto [center, s] = normalization_of(cloud.positions);
    shape.cloud = normalize(cloud);
    mesh.vertices = (mesh.vertices.rowwise() - center) * s;
    shape.mesh = std::move(mesh);
    shape.face_part = std::move(face_part);
    shape.provenance = Provenance::synthetic;
    shape.shape_id = "syn_" + std::to_string(seed);
    return shape;
}

CurationResult curate_filter(const LabeledShape& shape, const CurationThresholds& th) {
    CurationResult result;
    result.shape = shape;
    auto& report = result.report;
    const Index n = shape.cloud.size();
    if (n == 0) {
        result.shape.parts.clear();
        report.kept = false;
        report.reject_reason = RejectReason::no_geometry;
        return result;
    }
    std::vector<PartMask> kept;
    for (const auto& part : shape.parts) {
        const Real share = static_cast<Real>(part.count()) / static_cast<Real>(n);
        if (share < th.min_share) {
            ++report.parts_dropped_small;
        } else if (share > th.max_share) {
            ++report.parts_dropped_large;
        } else {
            kept.push_back(part);
        }
    }
    result.shape.parts = std::move(kept);
    if (!result.shape.face_part.empty() && (report.parts_dropped_small || report.parts_dropped_large)) {
        // Re-index face labels to the surviving parts.
        IndexList remap(shape.parts.size(), -1);
        int next = 0;
        for (std::size_t p = 0; p < shape.parts.size(); ++p) {
            const Real share = static_cast<Real>(shape.parts[p].count()) / static_cast<Real>(n);
            if (share >= th.min_share && share <= th.max_share) remap[p] = next++;
        }
        for (int& f : result.shape.face_part)
            if (f >= 0) f = remap[f];
    }
    const int count = static_cast<int>(result.shape.parts.size());
    if (count < th.min_parts) {
        report.kept = false;
        report.reject_reason = RejectReason::too_few_parts;
    } else if (count > th.max_parts) {
        report.kept = false;
        report.reject_reason = RejectReason::too_many_parts;
    }
    return result;
}

SceneGraphExtraction extract_scene_graph_parts(const io::GltfScene& scene, int n_points, std::uint64_t seed,
                                               const std::string& shape_id, const CurationThresholds& thresholds) {
    SceneGraphExtraction out;
    if (scene.nodes.empty()) {
        out.shape.shape_id = shape_id;
        out.report.kept = false;
        out.report.reject_reason = RejectReason::no_geometry;
        return out;
    }
    const TriangleMesh merged = scene.merged();
    IndexList face_part;
    Provenance provenance;
    if (scene.nodes.size() > 1) {
        face_part = scene.merged_face_node();
        provenance = Provenance::scene_graph;
    } else {
        face_part = connected_components(merged);
        provenance = Provenance::connected_components;
    }
    Real area = 0;
    for (Index f = 0; f < merged.face_count(); ++f) area += merged.face_area(f);
    if (!(area > 0)) {
        out.shape.shape_id = shape_id;
        out.report.kept = false;
        out.report.reject_reason = RejectReason::no_geometry;
        return out;
    }
    LabeledShape shape = shape_from_mesh(merged, face_part, n_points, seed, provenance, shape_id);
    auto curated = curate_filter(shape, thresholds);
    out.shape = std::move(curated.shape);
    out.report = curated.report;
    return out;
}

AugmentationConfig AugmentationConfig::identity() {
    AugmentationConfig c;
    c.rotation = RotationMode::none;
    c.scale_range = {1.0, 1.0};
    c.flip_axes = {false, false, false};
    c.shift_range = 0.0;
    c.chromatic = {0.0, 0.0, 0.0};
    return c;
}

void AugmentationConfig::validate() const {
    if (!(scale_range[0] > 0) || scale_range[0] > scale_range[1]) throw InvalidArgument("augment: need 0 < lo <= hi");
    if (flip_prob < 0 || flip_prob > 1 || chromatic.auto_contrast_prob < 0 || chromatic.auto_contrast_prob > 1)
        throw InvalidArgument("augment: probabilities must lie in [0,1]");
    if (shift_range < 0 || chromatic.translation_std < 0 || chromatic.jitter_std < 0)
        throw InvalidArgument("augment: ranges must be non-negative");
}

LabeledShape augment(const LabeledShape& shape, const AugmentationConfig& cfg) {
    cfg.validate();
    Rng rng(cfg.seed);
    Eigen::Matrix3d rot = Eigen::Matrix3d::Identity();
    if (cfg.rotation == RotationMode::z_only) {
        rot = Eigen::AngleAxisd(rng.uniform(0, 2 * kPi), Eigen::Vector3d::UnitZ()).toRotationMatrix();
    } else if (cfg.rotation == RotationMode::full_so3) {
        Eigen::Quaterniond q(rng.normal(), rng.normal(), rng.normal(), rng.normal());
        q.normalize();
        rot = q.toRotationMatrix();
    }
    Eigen::Vector3d scale;
    for (int a = 0; a < 3; ++a) scale(a) = rng.uniform(cfg.scale_range[0], cfg.scale_range[1]);
    Eigen::Vector3d flip(1, 1, 1);
    for (int a = 0; a < 3; ++a)
        if (cfg.flip_axes[a] && rng.uniform() < cfg.flip_prob) flip(a) = -1;
    Eigen::Vector3d shift;
    for (int a = 0; a < 3; ++a) shift(a) = rng.uniform(-cfg.shift_range, cfg.shift_range);

    const Eigen::Matrix3d linear = rot * scale.asDiagonal() * flip.asDiagonal();
    const Eigen::Matrix3d normal_map = rot * flip.asDiagonal();

    LabeledShape out = shape;
    auto& c = out.cloud;
    c.positions = (shape.cloud.positions * linear.transpose()).rowwise() + shift.transpose();
    if (c.has_normals) c.normals = shape.cloud.normals * normal_map.transpose();
    if (out.mesh) out.mesh->vertices = (shape.mesh->vertices * linear.transpose()).rowwise() + shift.transpose();

    const auto& ch = cfg.chromatic;
    if (rng.uniform() < ch.auto_contrast_prob) {
        const Vec3 lo = c.colors.colwise().minCoeff();
        const Vec3 hi = c.colors.colwise().maxCoeff();
        const Real blend = rng.uniform();
        for (int a = 0; a < 3; ++a) {
            const Real span = hi(a) - lo(a);
            if (span <= 1e-9) continue;
            c.colors.col(a) = (1 - blend) * c.colors.col(a) + blend * ((c.colors.col(a).array() - lo(a)) / span).matrix();
        }
    }
    if (ch.translation_std > 0) {
        const Vec3 t(rng.normal() * ch.translation_std, rng.normal() * ch.translation_std, rng.normal() * ch.translation_std);
        c.colors.rowwise() += t;
    }
    if (ch.jitter_std > 0)
        for (Index i = 0; i < c.colors.size(); ++i) c.colors.data()[i] += rng.normal() * ch.jitter_std;
    c.colors = c.colors.cwiseMax(0.0).cwiseMin(1.0);

    if (cfg.renormalize) {
        const auto [center, s] = normalization_of(c.positions);
        c = normalize(c);
        if (out.mesh) out.mesh->vertices = (out.mesh->vertices.rowwise() - center) * s;
    } else {
        c.normalized = false;
    }
    return out;
}

PointCloud default_gray(const PointCloud& cloud) {
    if (cloud.has_colors) return cloud;
    PointCloud out = cloud;
    out.colors = Points::Constant(cloud.size(), 3, 0.5);
    return out;
}

io::json to_json(const ManifestRecord& r) {
    return {{"shape_id", r.shape_id},
            {"provenance", to_string(r.provenance)},
            {"n_points", r.n_points},
            {"n_parts", r.n_parts},
            {"file", r.file}};
}

ManifestRecord manifest_record_from_json(const io::json& j) {
    ManifestRecord r;
    r.shape_id = j.at("shape_id");
    r.provenance = provenance_from_string(j.at("provenance"));
    r.n_points = j.at("n_points");
    r.n_parts = j.at("n_parts");
    r.file = j.at("file");
    return r;
}

ManifestRecord write_shape(const std::filesystem::path& dir, const LabeledShape& shape) {
    io::CloudRecord rec;
    rec.cloud = shape.cloud;
    rec.int_fields["part"] = shape.point_labels();
    rec.attributes = {{"shape_id", shape.shape_id},
                      {"provenance", to_string(shape.provenance)},
                      {"n_parts", shape.parts.size()}};
    const std::string file = shape.shape_id + ".ppc";
    io::write_cloud(dir / file, rec);
    return {shape.shape_id, shape.provenance, shape.cloud.size(), static_cast<int>(shape.parts.size()), file};
}

LabeledShape read_shape(const std::filesystem::path& file) {
    io::CloudRecord rec = io::read_cloud(file);
    LabeledShape shape;
    shape.cloud = std::move(rec.cloud);
    shape.shape_id = rec.attributes.value("shape_id", file.stem().string());
    shape.provenance = provenance_from_string(rec.attributes.value("provenance", std::string("synthetic")));
    const int n_parts = rec.attributes.value("n_parts", 0);
    shape.parts.assign(n_parts, PartMask(static_cast<std::size_t>(shape.cloud.size()), MaskSource::ground_truth));
    auto it = rec.int_fields.find("part");
    if (it != rec.int_fields.end())
        for (std::size_t i = 0; i < it->second.size(); ++i) {
            const int p = it->second[i];
            if (p >= n_parts) throw IngestError("shape " + shape.shape_id + ": part label out of range");
            if (p >= 0) shape.parts[p].member[i] = 1;
        }
    return shape;
}

void write_manifest(const std::filesystem::path& path, const std::vector<ManifestRecord>& records) {
    std::string text;
    for (const auto& r : records) text += to_json(r).dump() + "\n";
    io::write_file(path, text);
}

std::vector<ManifestRecord> read_manifest(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IngestError("cannot open manifest " + path.string());
    std::vector<ManifestRecord> out;
    std::string line;
    std::size_t offset = 0;
    while (std::getline(in, line)) {
        const std::size_t start = offset;
        offset += line.size() + 1;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            out.push_back(manifest_record_from_json(io::json::parse(line)));
        } catch (const io::json::exception& e) {
            throw IngestError(std::string("manifest: ") + e.what(), start);
        }
    }
    return out;
}

std::vector<LabeledShape> load_dataset(const std::filesystem::path& dir) {
    std::vector<LabeledShape> shapes;
    for (const auto& r : read_manifest(dir / "manifest.jsonl")) shapes.push_back(read_shape(dir / r.file));
    return shapes;
}

void save_dataset(const std::filesystem::path& dir, const std::vector<LabeledShape>& shapes) {
    std::filesystem::create_directories(dir);
    std::vector<ManifestRecord> records;
    for (const auto& s : shapes) records.push_back(write_shape(dir, s));
    write_manifest(dir / "manifest.jsonl", records);
}

}  // namespace partprompt::data
