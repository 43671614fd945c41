// SPDX-License-Identifier: Apache-2.0
//
// File formats: the columnar point-cloud container (binary body + JSON
// header, also written as a sidecar), Wavefront OBJ, and glTF 2.0 (.gltf with
// embedded or external buffers, and .glb). glTF support covers triangle
// geometry and the node hierarchy only.

#pragma once

#include "partprompt/geometry.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace partprompt::io {

using json = nlohmann::json;

inline constexpr char kCloudMagic[8] = {'P', 'P', 'C', 'L', 'O', 'U', 'D', '\0'};
inline constexpr std::uint32_t kCloudVersion = 1;

/// A point cloud plus any extra named integer columns (for example per-point
/// part labels) and free-form header attributes.
struct CloudRecord {
    PointCloud cloud;
    std::map<std::string, std::vector<int>> int_fields;
    json attributes = json::object();
};

/// JSON header describing a container: N, field list, normalization flag.
json cloud_header(const CloudRecord& record);
std::string encode_cloud(const CloudRecord& record);
CloudRecord decode_cloud(const std::string& bytes);

/// Writes `path` (binary) and `path + ".json"` (sidecar header).
void write_cloud(const std::filesystem::path& path, const CloudRecord& record);
CloudRecord read_cloud(const std::filesystem::path& path);

TriangleMesh parse_obj(const std::string& text);
TriangleMesh load_obj(const std::filesystem::path& path);
/// Writes one vertex triple per face so per-face colors survive as vertex colors.
void write_obj(const std::filesystem::path& path, const TriangleMesh& mesh);
std::string format_obj(const TriangleMesh& mesh);

struct GltfNodeGeometry {
    int node = -1;
    std::string name;
    bool leaf = true;
    TriangleMesh mesh;  // world space
};

struct GltfScene {
    std::vector<GltfNodeGeometry> nodes;  // geometry-bearing nodes in traversal order
    TriangleMesh merged() const;
    /// Face -> index into `nodes` for the merged mesh.
    IndexList merged_face_node() const;
};

/// Parses .gltf JSON or .glb bytes. External buffer URIs resolve against `base_dir`.
GltfScene parse_gltf(const std::string& bytes, const std::filesystem::path& base_dir = {});
GltfScene load_gltf(const std::filesystem::path& path);

/// One mesh node per entry under a single root; buffers embedded as data URIs.
std::string format_gltf(const std::vector<std::pair<std::string, TriangleMesh>>& parts);

/// Loads OBJ / glTF / GLB by extension or content sniffing.
TriangleMesh load_mesh(const std::filesystem::path& path);

std::string base64_encode(const std::string& bytes);
std::string base64_decode(const std::string& text);

std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, const std::string& bytes);

}  // namespace partprompt::io
