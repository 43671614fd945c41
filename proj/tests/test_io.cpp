// SPDX-License-Identifier: Apache-2.0

#include "partprompt/io.hpp"

#include <catch_amalgamated.hpp>

#include <filesystem>

using namespace partprompt;
using namespace partprompt::io;

namespace {

PointCloud sample_cloud(Index n) {
    Rng rng(4);
    PointCloud c;
    c.positions.resize(n, 3);
    c.normals = Points::Zero(n, 3);
    c.colors.resize(n, 3);
    for (Index i = 0; i < n; ++i) {
        c.positions.row(i) << rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1);
        c.normals(i, static_cast<Index>(rng.below(3))) = 1;
        c.colors.row(i) << rng.uniform(), rng.uniform(), rng.uniform();
    }
    c.normalized = true;
    return c;
}

}  // namespace

TEST_CASE("cloud containers round-trip bit for bit") {
    CloudRecord rec;
    rec.cloud = sample_cloud(37);
    rec.int_fields["part"] = std::vector<int>(37, 3);
    rec.attributes["shape_id"] = "x";
    const CloudRecord back = decode_cloud(encode_cloud(rec));
    CHECK(back.cloud.positions == rec.cloud.positions);
    CHECK(back.cloud.normals == rec.cloud.normals);
    CHECK(back.cloud.colors == rec.cloud.colors);
    CHECK(back.int_fields.at("part") == rec.int_fields.at("part"));
    CHECK(back.attributes.at("shape_id") == "x");
    CHECK(back.cloud.normalized);
    CHECK(cloud_header(rec).at("N") == 37);
}

TEST_CASE("cloud container errors carry byte positions") {
    CloudRecord rec;
    rec.cloud = sample_cloud(5);
    const std::string bytes = encode_cloud(rec);
    CHECK_THROWS_AS(decode_cloud("garbage!"), IngestError);
    try {
        decode_cloud(bytes.substr(0, bytes.size() - 7));
        FAIL("expected truncation error");
    } catch (const IngestError& e) {
        CHECK(e.position() != IngestError::npos);
    }
    std::string bad_version = bytes;
    bad_version[8] = 9;
    CHECK_THROWS_AS(decode_cloud(bad_version), IngestError);
}

TEST_CASE("files and sidecars") {
    const auto path = std::filesystem::temp_directory_path() / "pp_io_cloud.ppc";
    CloudRecord rec;
    rec.cloud = sample_cloud(9);
    write_cloud(path, rec);
    CHECK(std::filesystem::exists(path.string() + ".json"));
    CHECK(read_cloud(path).cloud.positions == rec.cloud.positions);
    std::filesystem::remove(path);
    std::filesystem::remove(path.string() + ".json");
}

TEST_CASE("OBJ parsing: polygons, negative indices and errors") {
    const TriangleMesh m = parse_obj(
        "# quad\n"
        "v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\n"
        "vn 0 0 1\n"
        "f 1//1 2//1 3//1 4//1\n"
        "f -4 -3 -1\n");
    CHECK(m.vertex_count() == 4);
    CHECK(m.face_count() == 3);
    CHECK_THROWS_AS(parse_obj("v 0 0\n"), IngestError);
    CHECK_THROWS_AS(parse_obj("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 9\n"), IngestError);
    CHECK_THROWS_AS(parse_obj("# nothing\n"), IngestError);
}

TEST_CASE("OBJ write-read keeps geometry and face colors") {
    TriangleMesh m;
    m.vertices.resize(4, 3);
    m.vertices << 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0, 1;
    m.faces.resize(2, 3);
    m.faces << 0, 1, 2, 0, 1, 3;
    m.face_colors.resize(2, 3);
    m.face_colors << 1, 0, 0, 0, 0, 1;
    const TriangleMesh back = parse_obj(format_obj(m));
    REQUIRE(back.face_count() == 2);
    for (Index f = 0; f < 2; ++f) {
        CHECK(back.face_area(f) == Catch::Approx(m.face_area(f)));
        REQUIRE(back.face_colors.rows() == 2);
        CHECK(back.face_colors.row(f).isApprox(m.face_colors.row(f), 1e-6));
    }
}

TEST_CASE("glTF and GLB parsing") {
    TriangleMesh a;
    a.vertices.resize(3, 3);
    a.vertices << 0, 0, 0, 1, 0, 0, 0, 1, 0;
    a.faces.resize(1, 3);
    a.faces << 0, 1, 2;
    TriangleMesh b = a;
    b.vertices.col(2).array() += 1;
    const std::string text = format_gltf({{"a", a}, {"b", b}});
    const GltfScene scene = parse_gltf(text);
    REQUIRE(scene.nodes.size() == 2);
    CHECK(scene.nodes[0].name == "a");
    CHECK(scene.merged().face_count() == 2);
    CHECK(scene.merged_face_node() == IndexList{0, 1});
    CHECK(scene.nodes[1].mesh.vertices.isApprox(b.vertices.cast<Real>(), 1e-6));

    // Wrap the same document in a GLB container (JSON chunk only).
    std::string json_chunk = text;
    while (json_chunk.size() % 4) json_chunk += ' ';
    auto u32 = [](std::uint32_t v) { return std::string(reinterpret_cast<const char*>(&v), 4); };
    const std::string glb = "glTF" + u32(2) + u32(static_cast<std::uint32_t>(12 + 8 + json_chunk.size())) +
                            u32(static_cast<std::uint32_t>(json_chunk.size())) + "JSON" + json_chunk;
    CHECK(parse_gltf(glb).nodes.size() == 2);
    CHECK_THROWS_AS(parse_gltf("{\"nodes\": []}"), IngestError);
}

TEST_CASE("base64 round-trips arbitrary bytes") {
    std::string bytes;
    for (int i = 0; i < 256; ++i) bytes.push_back(static_cast<char>(i));
    for (std::size_t n : {0u, 1u, 2u, 3u, 256u}) CHECK(base64_decode(base64_encode(bytes.substr(0, n))) == bytes.substr(0, n));
    CHECK_THROWS_AS(base64_decode("a*b="), IngestError);
}
