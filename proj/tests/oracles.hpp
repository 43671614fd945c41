// SPDX-License-Identifier: Apache-2.0
//
// Slow, obviously-correct reference implementations used by the unit tests and
// the acceptance runner.

#pragma once

#include "partprompt/geometry.hpp"

#include <algorithm>
#include <limits>
#include <numeric>
#include <optional>
#include <queue>
#include <set>

namespace partprompt::testing {

inline Points random_points(Index n, Rng& rng) {
    Points p(n, 3);
    for (Index i = 0; i < p.size(); ++i) p.data()[i] = rng.uniform(-1, 1);
    return p;
}

inline PartMask random_mask(std::size_t n, Rng& rng, Real p) {
    PartMask m(n);
    for (auto& v : m.member) v = rng.uniform() < p;
    return m;
}

inline long double sq_dist(const Points& a, Index i, const Points& b, Index j) {
    long double s = 0;
    for (int c = 0; c < 3; ++c) {
        const long double d = static_cast<long double>(a(i, c)) - b(j, c);
        s += d * d;
    }
    return s;
}

/// Quadratic farthest-point sampling recomputing every min distance from scratch.
inline IndexList fps_oracle(const Points& p, int k, int first) {
    IndexList picks{first};
    while (static_cast<int>(picks.size()) < k) {
        int best = -1;
        long double best_d = -1;
        for (Index i = 0; i < p.rows(); ++i) {
            if (std::find(picks.begin(), picks.end(), i) != picks.end()) continue;
            long double d = std::numeric_limits<long double>::infinity();
            for (int c : picks) d = std::min(d, sq_dist(p, i, p, c));
            if (d > best_d) {
                best_d = d;
                best = static_cast<int>(i);
            }
        }
        picks.push_back(best);
    }
    return picks;
}

inline IndexList knn_oracle(const Points& ref, const Points& q, Index row, int k) {
    IndexList idx(ref.rows());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(),
                     [&](int a, int b) { return sq_dist(q, row, ref, a) < sq_dist(q, row, ref, b); });
    idx.resize(k);
    return idx;
}

/// Face components by breadth-first search over the face-vertex incidence.
inline IndexList components_oracle(const TriangleMesh& mesh) {
    const Index nf = mesh.face_count();
    std::vector<IndexList> faces_of(mesh.vertex_count());
    for (Index f = 0; f < nf; ++f)
        for (int c = 0; c < 3; ++c) faces_of[mesh.faces(f, c)].push_back(static_cast<int>(f));
    IndexList label(nf, -1);
    int next = 0;
    for (Index s = 0; s < nf; ++s) {
        if (label[s] >= 0) continue;
        std::queue<int> todo;
        todo.push(static_cast<int>(s));
        label[s] = next;
        while (!todo.empty()) {
            const int f = todo.front();
            todo.pop();
            for (int c = 0; c < 3; ++c)
                for (int g : faces_of[mesh.faces(f, c)])
                    if (label[g] < 0) {
                        label[g] = next;
                        todo.push(g);
                    }
        }
        ++next;
    }
    return label;
}

inline TriangleMesh random_soup(Rng& rng, int n_vertices, int n_faces) {
    TriangleMesh m;
    m.vertices = random_points(n_vertices, rng);
    m.faces.resize(n_faces, 3);
    for (int f = 0; f < n_faces; ++f) {
        const int a = static_cast<int>(rng.below(n_vertices));
        int b = static_cast<int>(rng.below(n_vertices));
        while (b == a) b = static_cast<int>(rng.below(n_vertices));
        int c = static_cast<int>(rng.below(n_vertices));
        while (c == a || c == b) c = static_cast<int>(rng.below(n_vertices));
        m.faces.row(f) << a, b, c;
    }
    return m;
}

/// |A n B| / |A u B| from sorted index lists; two empty masks score 1.
inline Real iou_oracle(const PartMask& a, const PartMask& b) {
    const IndexList ia = a.indices(), ib = b.indices();
    IndexList inter, uni;
    std::set_intersection(ia.begin(), ia.end(), ib.begin(), ib.end(), std::back_inserter(inter));
    std::set_union(ia.begin(), ia.end(), ib.begin(), ib.end(), std::back_inserter(uni));
    return uni.empty() ? 1.0 : Real(inter.size()) / Real(uni.size());
}

/// Normalized 1 / (d + eps) weights over the k nearest centers of query `q`.
inline std::vector<Real> idw_oracle(const Points& centers, const Points& queries, Index q, int k, Real eps = 1e-8) {
    std::vector<Real> raw;
    Real total = 0;
    for (int c : knn_oracle(centers, queries, q, k)) {
        raw.push_back(1.0 / ((centers.row(c) - queries.row(q)).norm() + eps));
        total += raw.back();
    }
    for (Real& r : raw) r /= total;
    return raw;
}

/// Exhaustive NMS check: the kept set is the unique subset S in which a mask is
/// in S exactly when no earlier-visited member of S overlaps it by more than T
/// (visiting order: score descending, ties to the lower index). Empty result
/// if no subset, or more than one, satisfies that.
inline std::optional<std::set<int>> brute_force_nms(const std::vector<PartMask>& masks, const std::vector<Real>& scores,
                                                    Real t) {
    const int m = static_cast<int>(masks.size());
    auto before = [&](int a, int b) { return scores[a] > scores[b] || (scores[a] == scores[b] && a < b); };
    std::vector<std::set<int>> fixed_points;
    for (int bits = 0; bits < (1 << m); ++bits) {
        bool ok = true;
        for (int i = 0; i < m && ok; ++i) {
            bool blocked = false;
            for (int j = 0; j < m; ++j)
                if (j != i && (bits >> j & 1) && before(j, i) && iou_oracle(masks[i], masks[j]) > t) blocked = true;
            ok = ((bits >> i & 1) != 0) == !blocked;
        }
        if (ok) {
            std::set<int> s;
            for (int i = 0; i < m; ++i)
                if (bits >> i & 1) s.insert(i);
            fixed_points.push_back(s);
        }
    }
    if (fixed_points.size() != 1) return std::nullopt;
    return fixed_points[0];
}

/// Random candidate set for NMS checks: noisy copies of a few base masks, so
/// overlaps straddle T, with coarse scores so ties occur.
struct NmsCase {
    std::vector<PartMask> masks;
    std::vector<Real> scores;
    Real threshold = 0.5;
};

inline NmsCase random_nms_case(Rng& rng, int max_masks = 10, int max_points = 200) {
    NmsCase c;
    const int n = 1 + static_cast<int>(rng.below(max_points));
    const int m = 1 + static_cast<int>(rng.below(max_masks));
    c.threshold = 0.05 + 0.9 * rng.uniform();
    std::vector<PartMask> bases;
    for (int b = 0; b < 3; ++b) bases.push_back(random_mask(n, rng, 0.4));
    for (int k = 0; k < m; ++k) {
        const PartMask& base = bases[rng.below(3)];
        const Real flip = 0.3 * rng.uniform();
        PartMask pm(static_cast<std::size_t>(n));
        for (int i = 0; i < n; ++i) pm.member[i] = rng.uniform() < flip ? !base.member[i] : base.member[i];
        c.masks.push_back(pm);
        c.scores.push_back(std::floor(rng.uniform() * 5) / 5);
    }
    return c;
}

}  // namespace partprompt::testing
