// SPDX-License-Identifier: Apache-2.0

#include "partprompt/autoseg.hpp"
#include "oracles.hpp"
#include "support.hpp"

#include <catch_amalgamated.hpp>

using namespace partprompt;
using namespace partprompt::autoseg;
using namespace partprompt::testing;


TEST_CASE("NMS matches the exhaustive oracle on random sets") {
    Rng rng(11);
    for (int trial = 0; trial < 1000; ++trial) {
        const NmsCase c = random_nms_case(rng);
        const IndexList kept = nms(c.masks, c.scores, c.threshold);
        const std::set<int> got(kept.begin(), kept.end());
        REQUIRE(got.size() == kept.size());
        const auto want = brute_force_nms(c.masks, c.scores, c.threshold);
        REQUIRE(want);
        CHECK(got == *want);
        for (std::size_t a = 1; a < kept.size(); ++a) {  // visiting order
            const int p = kept[a - 1], q = kept[a];
            CHECK((c.scores[p] > c.scores[q] || (c.scores[p] == c.scores[q] && p < q)));
        }
    }
}

TEST_CASE("NMS edge cases") {
    CHECK(nms({}, {}, 0.5).empty());
    const PartMask a = PartMask::from_indices(4, {0, 1});
    CHECK(nms({a, a}, {0.5, 0.5}, 0.5) == IndexList{0});
    CHECK(nms({a, a}, {0.4, 0.5}, 0.5) == IndexList{1});
    // IoU exactly T is kept.
    const PartMask b = PartMask::from_indices(4, {1, 2});
    CHECK(point_iou(a, b) == Catch::Approx(1.0 / 3.0));
    CHECK(nms({a, b}, {1, 0.9}, 1.0 / 3.0).size() == 2);
    CHECK(nms({a, b}, {1, 0.9}, 0.3).size() == 1);
    CHECK_THROWS_AS(nms({a}, {}, 0.5), InvalidArgument);
}

TEST_CASE("mask selection filters, deduplicates and labels points") {
    const std::vector<ScoredMask> cands{
        {PartMask::from_indices(6, {0, 1, 2}), 0.9},
        {PartMask::from_indices(6, {0, 1, 2}), 0.95},   // duplicate, higher score
        {PartMask::from_indices(6, {2, 3}), 0.8},       // overlaps the first by 1/4
        {PartMask::from_indices(6, {4}), 0.6},          // below the confidence floor
        {PartMask(6), 0.99},                            // empty
    };
    AutoSegConfig cfg;
    const SegmentationResult r = select_masks(cands, 6, cfg);
    REQUIRE(r.masks.size() == 2);
    CHECK(r.masks[0].predicted_iou == 0.95);
    CHECK(r.masks[1].predicted_iou == 0.8);
    CHECK(r.point_labels == IndexList{0, 0, 0, 1, -1, -1});
    CHECK_FALSE(r.empty_warning);
    cfg.min_predicted_iou = 1.0;
    const SegmentationResult none = select_masks(cands, 6, cfg);
    CHECK(none.empty_warning);
    CHECK(to_json(none).contains("warning"));
    CHECK_THROWS_AS(select_masks(cands, 7, AutoSegConfig{}), InvalidArgument);
    AutoSegConfig bad;
    bad.nms_threshold = 1.0;
    CHECK_THROWS_AS(bad.validate(), InvalidArgument);
}

TEST_CASE("segmenting with an oracle recovers every part and honours T") {
    const data::LabeledShape s = partitioned_shape({50, 30, 70, 50}, 200, 9);
    const PartLookupStub oracle(s.parts);
    for (Real t : {0.1, 0.3, 0.5, 0.7}) {
        AutoSegConfig cfg;
        cfg.nms_threshold = t;
        cfg.n_prompts = 32;
        const auto r = segment_every_part(oracle, s.cloud, cfg);
        CHECK(r.masks.size() == s.parts.size());
        for (const auto& part : s.parts) {
            Real best = 0;
            for (const auto& m : r.masks) best = std::max(best, point_iou(m.mask, part));
            CHECK(best == 1.0);
        }
        for (std::size_t a = 0; a < r.masks.size(); ++a)
            for (std::size_t b = a + 1; b < r.masks.size(); ++b) CHECK(point_iou(r.masks[a].mask, r.masks[b].mask) <= t);
    }
    CHECK(oracle.encodes == 4);
}

TEST_CASE("threaded candidate decoding gives the same candidates") {
    const data::LabeledShape s = partitioned_shape({100, 100}, 200, 2);
    const RandomMaskStub stub;
    const auto enc = stub.encode(s.cloud);
    const auto one = candidate_masks(stub, *enc, 20, 1);
    const auto four = candidate_masks(stub, *enc, 20, 4);
    REQUIRE(one.size() == 60);
    REQUIRE(four.size() == 60);
    for (std::size_t i = 0; i < one.size(); ++i) {
        CHECK(one[i].mask.member == four[i].mask.member);
        CHECK(one[i].predicted_iou == four[i].predicted_iou);
    }
}

TEST_CASE("kept count grows with T on random candidates") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const data::LabeledShape s = partitioned_shape({}, 120, seed);
        const RandomMaskStub stub;
        const auto enc = stub.encode(s.cloud);
        const auto cands = candidate_masks(stub, *enc, 30);
        std::size_t last = 0;
        for (Real t : {0.1, 0.3, 0.5, 0.7}) {
            AutoSegConfig cfg;
            cfg.nms_threshold = t;
            cfg.min_predicted_iou = 0.0;
            const std::size_t kept = select_masks(cands, 120, cfg).masks.size();
            CHECK(kept >= last);
            last = kept;
        }
    }
}

TEST_CASE("face labels: majority vote and nearest fill") {
    TriangleMesh mesh;
    mesh.vertices.resize(6, 3);
    mesh.vertices << 0, 0, 0, 1, 0, 0, 0, 1, 0, 5, 0, 0, 6, 0, 0, 5, 1, 0;
    mesh.faces.resize(3, 3);
    mesh.faces << 0, 1, 2, 3, 4, 5, 0, 1, 5;
    PointCloud cloud;
    cloud.positions.resize(6, 3);
    cloud.positions << 0.2, 0.2, 0, 0.3, 0.2, 0, 0.2, 0.3, 0, 5.2, 0.2, 0, 5.3, 0.2, 0, 5.2, 0.3, 0;
    cloud.normals = Points::Zero(6, 3);
    cloud.colors = Points::Constant(6, 3, 0.5);
    cloud.face_of = {0, 0, 0, 1, 1, 1};
    SECTION("majority, ties to the lower label, and -1 ignored") {
        const IndexList f = assign_face_labels(mesh, cloud, {2, 2, 1, -1, 4, 3});
        CHECK(f[0] == 2);
        CHECK(f[1] == 3);
        // Face 2 has centroid (2, 1/3, 0): nearest labeled point is (0.3, 0.2).
        CHECK(f[2] == 2);
    }
    SECTION("a face sampled only by unlabeled points stays unlabeled") {
        const IndexList f = assign_face_labels(mesh, cloud, {0, 0, 0, -1, -1, -1});
        CHECK(f[1] == -1);
    }
    SECTION("missing provenance is rejected") {
        cloud.face_of.clear();
        CHECK_THROWS_AS(assign_face_labels(mesh, cloud, IndexList(6, 0)), InvalidArgument);
    }
    SECTION("colorizing paints each face by label") {
        const TriangleMesh c = colorize(mesh, {0, 1, -1});
        CHECK(c.face_colors.row(0).isApprox(label_color(0)));
        CHECK(c.face_colors.row(2).isApprox(Vec3(0.6, 0.6, 0.6)));
        CHECK_THROWS_AS(colorize(mesh, {0}), InvalidArgument);
    }
}

TEST_CASE("label colors are distinct and in range") {
    std::vector<Vec3> seen;
    for (int l = 0; l < 24; ++l) {
        const Vec3 c = label_color(l);
        CHECK(c.minCoeff() >= 0.0);
        CHECK(c.maxCoeff() <= 1.0);
        for (const auto& o : seen) CHECK((o - c).norm() > 1e-3);
        seen.push_back(c);
    }
    CHECK(label_color(3) == label_color(3));
}
