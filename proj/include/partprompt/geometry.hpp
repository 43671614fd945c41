// SPDX-License-Identifier: Apache-2.0
//
// Geometric kernel: point clouds, meshes, masks and the sampling, grouping,
// distance and connectivity primitives everything else is built on. All
// functions are pure and safe to call concurrently on shared inputs.

#pragma once

#include "partprompt/common.hpp"

#include <optional>
#include <vector>

namespace partprompt {

struct PointCloud {
    Points positions;
    Points normals;
    Points colors;
    /// Source mesh face per point; empty when the cloud has no mesh provenance.
    IndexList face_of;
    bool has_normals = true;
    bool has_colors = true;
    bool normalized = false;

    Index size() const { return positions.rows(); }
    /// Throws InvalidArgument if field sizes disagree or normals are not unit length.
    void validate() const;
};

struct TriangleMesh {
    Points vertices;
    Eigen::Matrix<int, Eigen::Dynamic, 3, Eigen::RowMajor> faces;
    /// Optional per-face RGB in [0,1]; empty when the mesh is uncolored.
    Points face_colors;

    Index vertex_count() const { return vertices.rows(); }
    Index face_count() const { return faces.rows(); }
    void validate() const;
    Real face_area(Index f) const;
    Vec3 face_normal(Index f) const;
    Vec3 face_centroid(Index f) const;
    /// Concatenates `other`, offsetting its vertex indices.
    void append(const TriangleMesh& other);
};

enum class MaskSource { ground_truth, predicted, pseudo_label };

struct PartMask {
    std::vector<std::uint8_t> member;
    MaskSource source = MaskSource::predicted;

    PartMask() = default;
    explicit PartMask(std::size_t n, MaskSource src = MaskSource::predicted) : member(n, 0), source(src) {}
    static PartMask from_indices(std::size_t n, const IndexList& indices, MaskSource src = MaskSource::predicted);

    std::size_t size() const { return member.size(); }
    std::size_t count() const;
    bool empty() const { return count() == 0; }
    bool operator[](std::size_t i) const { return member[i] != 0; }
    IndexList indices() const;
    bool operator==(const PartMask& other) const { return member == other.member; }
};

struct FpsOptions {
    /// When set, the first pick is drawn from this seed instead of index 0.
    std::optional<std::uint64_t> seed;
    /// Explicit first pick; takes precedence over `seed`.
    std::optional<int> first;
};

/// Farthest point sampling. Ties resolve to the lowest index.
IndexList fps(const Points& positions, int k, const FpsOptions& options = {});
inline IndexList fps(const PointCloud& cloud, int k, const FpsOptions& options = {}) {
    return fps(cloud.positions, k, options);
}

/// k nearest neighbours of each center, ascending by distance, center first.
std::vector<IndexList> knn_group(const Points& positions, const IndexList& centers, int k);
inline std::vector<IndexList> knn_group(const PointCloud& cloud, const IndexList& centers, int k) {
    return knn_group(cloud.positions, centers, k);
}

/// k nearest of `reference` for arbitrary query coordinates (ascending distance,
/// ties by index). Exact; uses a uniform grid above the brute-force threshold.
std::vector<IndexList> knn_query(const Points& reference, const Points& queries, int k);

Real point_iou(const PartMask& a, const PartMask& b);

/// Euclidean distance from each foreground point (in index order) to the
/// nearest background point.
std::vector<Real> distance_to_background(const PartMask& mask, const PointCloud& cloud);

struct IdwWeights {
    std::vector<IndexList> neighbors;
    std::vector<std::vector<Real>> weights;
};

/// Normalized 1/(d + eps) weights over the k nearest centers; a query that
/// coincides with a center gets weight 1 on that center alone.
IdwWeights idw_weights(const Points& centers, const Points& queries, int k, Real eps = 1e-8);
Mat inverse_distance_interpolate(const Mat& values, const Points& centers, const Points& queries, int k);

/// Per-face component label under shared-vertex adjacency, numbered by first
/// occurrence.
IndexList connected_components(const TriangleMesh& mesh);

/// Centers the bounding box at the origin and scales the longest side to 2.
PointCloud normalize(const PointCloud& cloud);

/// Area-uniform surface samples with face provenance and face normals. Colors
/// come from the face colors or default to gray.
PointCloud sample_mesh_points(const TriangleMesh& mesh, int n, std::uint64_t seed);

/// Squared distances from each query row to each reference row (Q x M).
Mat pairwise_sq_distances(const Points& queries, const Points& reference);

/// Number of points above which neighbour searches switch to the grid.
inline constexpr Index kBruteForceLimit = 50000;

}  // namespace partprompt
