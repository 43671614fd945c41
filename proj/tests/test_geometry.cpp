// SPDX-License-Identifier: Apache-2.0

#include "oracles.hpp"

#include <catch_amalgamated.hpp>

#include <algorithm>

using namespace partprompt;
using namespace partprompt::testing;

TEST_CASE("fps agrees with the quadratic oracle for N <= 64") {
    Rng rng(11);
    for (int trial = 0; trial < 200; ++trial) {
        const Index n = 1 + static_cast<Index>(rng.below(64));
        const Points p = random_points(n, rng);
        const int k = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(n)));
        const int first = static_cast<int>(rng.below(static_cast<std::uint64_t>(n)));
        FpsOptions opt;
        opt.first = first;
        REQUIRE(fps(p, k, opt) == fps_oracle(p, k, first));
    }
}

TEST_CASE("fps starts at index 0 by default and a seed picks a reproducible start") {
    Rng rng(3);
    const Points p = random_points(40, rng);
    CHECK(fps(p, 5).front() == 0);
    FpsOptions a, b;
    a.seed = 77;
    b.seed = 77;
    CHECK(fps(p, 10, a) == fps(p, 10, b));
}

TEST_CASE("fps skips duplicate points while distinct ones remain") {
    Points p(5, 3);
    p << 0, 0, 0, 0, 0, 0, 1, 0, 0, 1, 0, 0, 0, 1, 0;
    const IndexList picks = fps(p, 5);
    IndexList sorted = picks;
    std::sort(sorted.begin(), sorted.end());
    CHECK(sorted == IndexList{0, 1, 2, 3, 4});
    CHECK_THROWS_AS(fps(p, 6), InvalidArgument);
}

TEST_CASE("knn_query matches sorting, both below and above the grid threshold") {
    Rng rng(5);
    for (Index n : {Index(200), kBruteForceLimit + 5000}) {
        const Points ref = random_points(n, rng);
        const Points q = random_points(50, rng);
        const auto got = knn_query(ref, q, 6);
        for (Index r = 0; r < q.rows(); ++r) REQUIRE(got[r] == knn_oracle(ref, q, r, 6));
    }
}

TEST_CASE("knn_group lists the center first") {
    Rng rng(6);
    const Points p = random_points(100, rng);
    const auto groups = knn_group(p, {4, 50}, 5);
    CHECK(groups[0].front() == 4);
    CHECK(groups[1].front() == 50);
    CHECK(groups[0].size() == 5);
}

TEST_CASE("point_iou equals the set-based ratio on random masks") {
    Rng rng(7);
    for (int trial = 0; trial < 500; ++trial) {
        const std::size_t n = 1 + rng.below(200);
        const PartMask a = random_mask(n, rng, rng.uniform());
        const PartMask b = random_mask(n, rng, rng.uniform());
        const Real want = iou_oracle(a, b);
        REQUIRE(point_iou(a, b) == want);
    }
    CHECK_THROWS_AS(point_iou(PartMask(3), PartMask(4)), InvalidArgument);
}

TEST_CASE("connected_components matches breadth-first search") {
    Rng rng(8);
    for (int trial = 0; trial < 200; ++trial) {
        const int nv = 3 + static_cast<int>(rng.below(60));
        const int nf = 1 + static_cast<int>(rng.below(40));
        const TriangleMesh m = random_soup(rng, nv, nf);
        REQUIRE(connected_components(m) == components_oracle(m));
    }
}

TEST_CASE("connected_components numbers components by first face") {
    TriangleMesh m;
    m.vertices = Points::Zero(9, 3);
    m.faces.resize(3, 3);
    m.faces << 6, 7, 8, 0, 1, 2, 3, 4, 7;
    CHECK(connected_components(m) == IndexList{0, 1, 0});
}

TEST_CASE("idw weights match the closed form within 1e-5") {
    Rng rng(9);
    for (int trial = 0; trial < 100; ++trial) {
        const Points centers = random_points(20, rng);
        const Points queries = random_points(10, rng);
        const auto w = idw_weights(centers, queries, 3);
        for (Index q = 0; q < queries.rows(); ++q) {
            const IndexList nb = knn_oracle(centers, queries, q, 3);
            REQUIRE(w.neighbors[q] == nb);
            const std::vector<Real> raw = idw_oracle(centers, queries, q, 3);
            for (std::size_t j = 0; j < raw.size(); ++j) REQUIRE(std::abs(w.weights[q][j] - raw[j]) <= 1e-5);
        }
    }
}

TEST_CASE("idw interpolation reproduces values at the centers and constants everywhere") {
    Rng rng(10);
    const Points centers = random_points(15, rng);
    Mat values(15, 2);
    for (Index i = 0; i < values.size(); ++i) values.data()[i] = rng.uniform(-3, 3);
    const Mat at_centers = inverse_distance_interpolate(values, centers, centers, 3);
    CHECK((at_centers - values).cwiseAbs().maxCoeff() <= 1e-12);
    const Mat constant = inverse_distance_interpolate(Mat::Constant(15, 1, 4.0), centers, random_points(30, rng), 3);
    CHECK((constant.array() - 4.0).abs().maxCoeff() <= 1e-12);
}

TEST_CASE("distance_to_background matches brute force and rejects degenerate masks") {
    Rng rng(12);
    PointCloud cloud;
    cloud.positions = random_points(120, rng);
    const PartMask m = random_mask(120, rng, 0.4);
    const auto d = distance_to_background(m, cloud);
    const IndexList fg = m.indices();
    REQUIRE(d.size() == fg.size());
    for (std::size_t i = 0; i < fg.size(); ++i) {
        long double best = std::numeric_limits<long double>::infinity();
        for (Index j = 0; j < 120; ++j)
            if (!m[j]) best = std::min(best, sq_dist(cloud.positions, fg[i], cloud.positions, j));
        CHECK(d[i] == Catch::Approx(std::sqrt(static_cast<double>(best))).epsilon(1e-12));
    }
    PartMask all(120);
    std::fill(all.member.begin(), all.member.end(), 1);
    CHECK_THROWS_AS(distance_to_background(all, cloud), DegenerateMask);
}

TEST_CASE("normalize centers the box and scales the longest side to 2") {
    Rng rng(13);
    PointCloud c;
    c.positions = random_points(50, rng);
    c.positions.col(0) *= 7.0;
    c.positions.col(1).array() += 3.0;
    const PointCloud n = normalize(c);
    const Vec3 lo = n.positions.colwise().minCoeff(), hi = n.positions.colwise().maxCoeff();
    CHECK((hi - lo).maxCoeff() == Catch::Approx(2.0));
    CHECK((lo + hi).norm() <= 1e-12);
    CHECK(n.normalized);
}

TEST_CASE("mesh sampling is deterministic, area weighted and tracks faces") {
    TriangleMesh m;
    m.vertices.resize(6, 3);
    m.vertices << 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0, 1, 3, 0, 1, 0, 3, 1;
    m.faces.resize(2, 3);
    m.faces << 0, 1, 2, 3, 4, 5;  // areas 0.5 and 4.5
    const PointCloud a = sample_mesh_points(m, 4000, 1);
    const PointCloud b = sample_mesh_points(m, 4000, 1);
    CHECK(a.positions == b.positions);
    const auto big = std::count(a.face_of.begin(), a.face_of.end(), 1);
    CHECK(static_cast<Real>(big) / 4000.0 == Catch::Approx(0.9).margin(0.03));
    for (Index i = 0; i < a.size(); ++i) CHECK(a.positions(i, 2) == Catch::Approx(a.face_of[i] == 1 ? 1.0 : 0.0).margin(1e-12));
    a.validate();
}

TEST_CASE("pairwise squared distances agree with direct evaluation") {
    Rng rng(14);
    const Points q = random_points(7, rng), r = random_points(9, rng);
    const Mat d = pairwise_sq_distances(q, r);
    for (Index i = 0; i < 7; ++i)
        for (Index j = 0; j < 9; ++j) CHECK(d(i, j) == Catch::Approx(double(sq_dist(q, i, r, j))).margin(1e-12));
}
