// SPDX-License-Identifier: Apache-2.0

#include "partprompt/geometry.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>

namespace partprompt {

void PointCloud::validate() const {
    const Index n = size();
    if (n < 1) throw InvalidArgument("PointCloud: empty");
    if (normals.rows() != n || colors.rows() != n) throw InvalidArgument("PointCloud: field length mismatch");
    if (!face_of.empty() && static_cast<Index>(face_of.size()) != n)
        throw InvalidArgument("PointCloud: face_of length mismatch");
    if (has_normals) {
        for (Index i = 0; i < n; ++i)
            if (std::abs(normals.row(i).norm() - 1.0) > 1e-4)
                throw InvalidArgument("PointCloud: normal " + std::to_string(i) + " is not unit length");
    }
}

void TriangleMesh::validate() const {
    const Index v = vertex_count();
    for (Index f = 0; f < face_count(); ++f) {
        for (int c = 0; c < 3; ++c)
            if (faces(f, c) < 0 || faces(f, c) >= v)
                throw InvalidArgument("TriangleMesh: face " + std::to_string(f) + " references a missing vertex");
        if (faces(f, 0) == faces(f, 1) || faces(f, 1) == faces(f, 2) || faces(f, 0) == faces(f, 2))
            throw InvalidArgument("TriangleMesh: face " + std::to_string(f) + " is degenerate");
    }
    if (face_colors.rows() != 0 && face_colors.rows() != face_count())
        throw InvalidArgument("TriangleMesh: face color count mismatch");
}

Real TriangleMesh::face_area(Index f) const {
    const Vec3 a = vertices.row(faces(f, 0));
    const Vec3 b = vertices.row(faces(f, 1));
    const Vec3 c = vertices.row(faces(f, 2));
    return 0.5 * (b - a).cross(c - a).norm();
}

Vec3 TriangleMesh::face_normal(Index f) const {
    const Vec3 a = vertices.row(faces(f, 0));
    const Vec3 b = vertices.row(faces(f, 1));
    const Vec3 c = vertices.row(faces(f, 2));
    Vec3 n = (b - a).cross(c - a);
    const Real len = n.norm();
    return len > 0 ? Vec3(n / len) : Vec3(0, 0, 1);
}

Vec3 TriangleMesh::face_centroid(Index f) const {
    return (vertices.row(faces(f, 0)) + vertices.row(faces(f, 1)) + vertices.row(faces(f, 2))) / 3.0;
}

void TriangleMesh::append(const TriangleMesh& other) {
    const Index v0 = vertex_count();
    const Index f0 = face_count();
    const bool colored = face_colors.rows() == f0 && f0 > 0;
    const bool other_colored = other.face_colors.rows() == other.face_count() && other.face_count() > 0;
    Points verts(v0 + other.vertex_count(), 3);
    verts << vertices, other.vertices;
    vertices = std::move(verts);
    decltype(faces) fs(f0 + other.face_count(), 3);
    fs.topRows(f0) = faces;
    fs.bottomRows(other.face_count()) = other.faces.array() + static_cast<int>(v0);
    faces = std::move(fs);
    if (colored || other_colored || (f0 == 0 && other_colored)) {
        Points cols(faces.rows(), 3);
        cols.topRows(f0) = colored ? face_colors : Points(Points::Constant(f0, 3, 0.5));
        cols.bottomRows(other.face_count()) =
            other_colored ? other.face_colors : Points(Points::Constant(other.face_count(), 3, 0.5));
        face_colors = std::move(cols);
    }
}

PartMask PartMask::from_indices(std::size_t n, const IndexList& indices, MaskSource src) {
    PartMask m(n, src);
    for (int i : indices) {
        if (i < 0 || static_cast<std::size_t>(i) >= n) throw InvalidArgument("PartMask: index out of range");
        m.member[i] = 1;
    }
    return m;
}

std::size_t PartMask::count() const { return static_cast<std::size_t>(std::count(member.begin(), member.end(), 1)); }

IndexList PartMask::indices() const {
    IndexList out;
    for (std::size_t i = 0; i < member.size(); ++i)
        if (member[i]) out.push_back(static_cast<int>(i));
    return out;
}

IndexList fps(const Points& positions, int k, const FpsOptions& options) {
    const Index n = positions.rows();
    if (k < 1 || k > n) throw InvalidArgument("fps: k must be in [1, N]");
    int first = 0;
    if (options.first) {
        if (*options.first < 0 || *options.first >= n) throw InvalidArgument("fps: first index out of range");
        first = *options.first;
    } else if (options.seed) {
        Rng rng(*options.seed);
        first = static_cast<int>(rng.below(static_cast<std::uint64_t>(n)));
    }
    IndexList picks;
    picks.reserve(k);
    picks.push_back(first);
    std::vector<Real> min_d(n, std::numeric_limits<Real>::infinity());
    int last = first;
    for (int step = 1; step < k; ++step) {
        const Vec3 p = positions.row(last);
        int best = -1;
        Real best_d = -1.0;
        for (Index i = 0; i < n; ++i) {
            const Real d = (positions.row(i) - p).squaredNorm();
            if (d < min_d[i]) min_d[i] = d;
            if (min_d[i] > best_d) {
                best_d = min_d[i];
                best = static_cast<int>(i);
            }
        }
        // Every chosen point has min_d = 0, so it can only win once all
        // remaining points coincide with chosen ones; skip those duplicates.
        if (best_d <= 0.0) {
            std::vector<std::uint8_t> taken(n, 0);
            for (int c : picks) taken[c] = 1;
            best = -1;
            for (Index i = 0; i < n && best < 0; ++i)
                if (!taken[i]) best = static_cast<int>(i);
        }
        picks.push_back(best);
        last = best;
    }
    return picks;
}

namespace {

/// Exact k-nearest search over a uniform grid of the reference points.
class UniformGrid {
public:
    explicit UniformGrid(const Points& reference) : ref_(reference) {
        lo_ = reference.colwise().minCoeff();
        const Vec3 hi = reference.colwise().maxCoeff();
        const Vec3 extent = (hi - lo_).cwiseMax(1e-9);
        const Real volume = extent.prod();
        cell_ = std::cbrt(volume * 4.0 / static_cast<Real>(reference.rows()));
        cell_ = std::max(cell_, extent.maxCoeff() / 256.0);
        for (int a = 0; a < 3; ++a) dims_[a] = std::max(1, static_cast<int>(std::ceil(extent(a) / cell_)));
        buckets_.resize(static_cast<std::size_t>(dims_[0]) * dims_[1] * dims_[2]);
        for (Index i = 0; i < reference.rows(); ++i) buckets_[flat(cell_of(reference.row(i)))].push_back(int(i));
    }

    IndexList query(const Vec3& q, int k) const {
        std::vector<std::pair<Real, int>> found;
        const auto c = cell_of(q);
        const int max_ring = std::max({dims_[0], dims_[1], dims_[2]});
        for (int r = 0; r <= max_ring; ++r) {
            for (int x = c[0] - r; x <= c[0] + r; ++x)
                for (int y = c[1] - r; y <= c[1] + r; ++y)
                    for (int z = c[2] - r; z <= c[2] + r; ++z) {
                        if (std::max({std::abs(x - c[0]), std::abs(y - c[1]), std::abs(z - c[2])}) != r) continue;
                        if (x < 0 || y < 0 || z < 0 || x >= dims_[0] || y >= dims_[1] || z >= dims_[2]) continue;
                        for (int i : buckets_[flat({x, y, z})])
                            found.emplace_back((ref_.row(i) - q).squaredNorm(), i);
                    }
            if (static_cast<int>(found.size()) >= k) {
                std::nth_element(found.begin(), found.begin() + (k - 1), found.end());
                const Real kth = found[k - 1].first;
                const Real reach = r * cell_;
                if (kth <= reach * reach) break;
            }
        }
        std::sort(found.begin(), found.end());
        IndexList out;
        for (int i = 0; i < k && i < static_cast<int>(found.size()); ++i) out.push_back(found[i].second);
        return out;
    }

private:
    std::array<int, 3> cell_of(const Vec3& p) const {
        std::array<int, 3> c{};
        for (int a = 0; a < 3; ++a)
            c[a] = std::clamp(static_cast<int>(std::floor((p(a) - lo_(a)) / cell_)), 0, dims_[a] - 1);
        return c;
    }
    std::size_t flat(const std::array<int, 3>& c) const {
        return (static_cast<std::size_t>(c[0]) * dims_[1] + c[1]) * dims_[2] + c[2];
    }

    const Points& ref_;
    Vec3 lo_;
    Real cell_ = 1.0;
    std::array<int, 3> dims_{1, 1, 1};
    std::vector<IndexList> buckets_;
};

IndexList brute_knn(const Points& reference, const Vec3& q, int k) {
    std::vector<std::pair<Real, int>> d(reference.rows());
    for (Index i = 0; i < reference.rows(); ++i) d[i] = {(reference.row(i) - q).squaredNorm(), static_cast<int>(i)};
    std::partial_sort(d.begin(), d.begin() + k, d.end());
    IndexList out(k);
    for (int i = 0; i < k; ++i) out[i] = d[i].second;
    return out;
}

}  // namespace

std::vector<IndexList> knn_query(const Points& reference, const Points& queries, int k) {
    if (k < 1 || k > reference.rows()) throw InvalidArgument("knn: k must be in [1, M]");
    std::vector<IndexList> out(queries.rows());
    if (reference.rows() <= kBruteForceLimit) {
        for (Index q = 0; q < queries.rows(); ++q) out[q] = brute_knn(reference, queries.row(q), k);
    } else {
        UniformGrid grid(reference);
        for (Index q = 0; q < queries.rows(); ++q) out[q] = grid.query(queries.row(q), k);
    }
    return out;
}

std::vector<IndexList> knn_group(const Points& positions, const IndexList& centers, int k) {
    if (k < 1 || k > positions.rows()) throw InvalidArgument("knn_group: k must be in [1, N]");
    Points q(centers.size(), 3);
    for (std::size_t i = 0; i < centers.size(); ++i) {
        if (centers[i] < 0 || centers[i] >= positions.rows()) throw InvalidArgument("knn_group: bad center");
        q.row(static_cast<Index>(i)) = positions.row(centers[i]);
    }
    auto groups = knn_query(positions, q, k);
    for (std::size_t i = 0; i < centers.size(); ++i) {
        auto& g = groups[i];
        auto it = std::find(g.begin(), g.end(), centers[i]);
        if (it == g.end()) {
            // A coincident duplicate displaced the center; it takes the last slot's place.
            g.pop_back();
            g.insert(g.begin(), centers[i]);
        } else {
            std::rotate(g.begin(), it, it + 1);
        }
    }
    return groups;
}

Real point_iou(const PartMask& a, const PartMask& b) {
    if (a.size() != b.size()) throw InvalidArgument("point_iou: mask length mismatch");
    std::size_t inter = 0, uni = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        inter += (a.member[i] & b.member[i]);
        uni += (a.member[i] | b.member[i]);
    }
    return uni == 0 ? 1.0 : static_cast<Real>(inter) / static_cast<Real>(uni);
}

std::vector<Real> distance_to_background(const PartMask& mask, const PointCloud& cloud) {
    if (static_cast<Index>(mask.size()) != cloud.size())
        throw InvalidArgument("distance_to_background: mask length mismatch");
    IndexList fg, bg;
    for (std::size_t i = 0; i < mask.size(); ++i) (mask.member[i] ? fg : bg).push_back(static_cast<int>(i));
    if (fg.empty()) throw InvalidArgument("distance_to_background: mask has no foreground");
    if (bg.empty()) throw DegenerateMask("distance_to_background: mask has no background");
    Points bg_pts(bg.size(), 3), fg_pts(fg.size(), 3);
    for (std::size_t i = 0; i < bg.size(); ++i) bg_pts.row(Index(i)) = cloud.positions.row(bg[i]);
    for (std::size_t i = 0; i < fg.size(); ++i) fg_pts.row(Index(i)) = cloud.positions.row(fg[i]);
    std::vector<Real> out(fg.size());
    if (bg_pts.rows() <= kBruteForceLimit) {
        for (Index i = 0; i < fg_pts.rows(); ++i)
            out[i] = std::sqrt((bg_pts.rowwise() - fg_pts.row(i)).rowwise().squaredNorm().minCoeff());
    } else {
        auto nn = knn_query(bg_pts, fg_pts, 1);
        for (Index i = 0; i < fg_pts.rows(); ++i) out[i] = (bg_pts.row(nn[i][0]) - fg_pts.row(i)).norm();
    }
    return out;
}

IdwWeights idw_weights(const Points& centers, const Points& queries, int k, Real eps) {
    if (k < 1 || k > centers.rows()) throw InvalidArgument("inverse_distance_interpolate: need 1 <= k <= M");
    IdwWeights w;
    w.neighbors = knn_query(centers, queries, k);
    w.weights.resize(queries.rows());
    for (Index q = 0; q < queries.rows(); ++q) {
        auto& nb = w.neighbors[q];
        auto& ws = w.weights[q];
        ws.resize(nb.size());
        const Real d0 = (centers.row(nb[0]) - queries.row(q)).norm();
        if (d0 == 0.0) {
            nb.resize(1);
            ws.assign(1, 1.0);
            continue;
        }
        Real total = 0.0;
        for (std::size_t j = 0; j < nb.size(); ++j) {
            ws[j] = 1.0 / ((centers.row(nb[j]) - queries.row(q)).norm() + eps);
            total += ws[j];
        }
        for (auto& x : ws) x /= total;
    }
    return w;
}

Mat inverse_distance_interpolate(const Mat& values, const Points& centers, const Points& queries, int k) {
    if (values.rows() != centers.rows()) throw InvalidArgument("inverse_distance_interpolate: value count mismatch");
    const auto w = idw_weights(centers, queries, k);
    Mat out = Mat::Zero(queries.rows(), values.cols());
    for (Index q = 0; q < queries.rows(); ++q)
        for (std::size_t j = 0; j < w.neighbors[q].size(); ++j)
            out.row(q) += w.weights[q][j] * values.row(w.neighbors[q][j]);
    return out;
}

IndexList connected_components(const TriangleMesh& mesh) {
    const Index nv = mesh.vertex_count();
    std::vector<int> parent(nv);
    std::iota(parent.begin(), parent.end(), 0);
    auto find = [&](int x) {
        while (parent[x] != x) {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        return x;
    };
    for (Index f = 0; f < mesh.face_count(); ++f) {
        const int r0 = find(mesh.faces(f, 0));
        for (int c = 1; c < 3; ++c) {
            const int rc = find(mesh.faces(f, c));
            if (rc != r0) parent[rc] = r0;
        }
    }
    IndexList labels(mesh.face_count());
    std::vector<int> label_of_root(nv, -1);
    int next = 0;
    for (Index f = 0; f < mesh.face_count(); ++f) {
        const int root = find(mesh.faces(f, 0));
        if (label_of_root[root] < 0) label_of_root[root] = next++;
        labels[f] = label_of_root[root];
    }
    return labels;
}

PointCloud normalize(const PointCloud& cloud) {
    if (cloud.size() < 1) throw InvalidArgument("normalize: empty cloud");
    PointCloud out = cloud;
    const Vec3 lo = cloud.positions.colwise().minCoeff();
    const Vec3 hi = cloud.positions.colwise().maxCoeff();
    const Vec3 center = 0.5 * (lo + hi);
    const Real longest = (hi - lo).maxCoeff();
    const Real s = longest > 0.0 ? 2.0 / longest : 1.0;
    out.positions = (cloud.positions.rowwise() - center) * s;
    out.normalized = true;
    return out;
}

PointCloud sample_mesh_points(const TriangleMesh& mesh, int n, std::uint64_t seed) {
    if (n < 1) throw InvalidArgument("sample_mesh_points: n must be positive");
    const Index nf = mesh.face_count();
    std::vector<Real> cumulative(nf);
    Real total = 0.0;
    for (Index f = 0; f < nf; ++f) {
        total += mesh.face_area(f);
        cumulative[f] = total;
    }
    if (!(total > 0.0)) throw InvalidArgument("sample_mesh_points: mesh has zero surface area");

    const bool colored = mesh.face_colors.rows() == nf && nf > 0;
    PointCloud cloud;
    cloud.positions.resize(n, 3);
    cloud.normals.resize(n, 3);
    cloud.colors.resize(n, 3);
    cloud.face_of.resize(n);
    cloud.has_colors = colored;
    Rng rng(seed);
    for (int i = 0; i < n; ++i) {
        const Real u = rng.uniform() * total;
        Index f = std::upper_bound(cumulative.begin(), cumulative.end(), u) - cumulative.begin();
        f = std::min(f, nf - 1);
        while (f > 0 && mesh.face_area(f) == 0.0) --f;
        const Real r1 = std::sqrt(rng.uniform());
        const Real r2 = rng.uniform();
        const Vec3 a = mesh.vertices.row(mesh.faces(f, 0));
        const Vec3 b = mesh.vertices.row(mesh.faces(f, 1));
        const Vec3 c = mesh.vertices.row(mesh.faces(f, 2));
        cloud.positions.row(i) = (1.0 - r1) * a + r1 * (1.0 - r2) * b + r1 * r2 * c;
        cloud.normals.row(i) = mesh.face_normal(f);
        cloud.colors.row(i) = colored ? Vec3(mesh.face_colors.row(f)) : Vec3(0.5, 0.5, 0.5);
        cloud.face_of[i] = static_cast<int>(f);
    }
    return cloud;
}

Mat pairwise_sq_distances(const Points& queries, const Points& reference) {
    Mat d(queries.rows(), reference.rows());
    for (Index i = 0; i < queries.rows(); ++i) d.row(i) = (reference.rowwise() - queries.row(i)).rowwise().squaredNorm().transpose();
    return d;
}

}  // namespace partprompt
