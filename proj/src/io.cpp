// SPDX-License-Identifier: Apache-2.0

#include "partprompt/io.hpp"

#include <Eigen/Geometry>

#include <array>
#include <cstring>
#include <fstream>
#include <sstream>

namespace partprompt::io {

namespace {

template <typename T>
void put(std::string& out, const T& v) {
    out.append(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T take(const std::string& in, std::size_t& at) {
    if (at + sizeof(T) > in.size()) throw IngestError("cloud container truncated", at);
    T v;
    std::memcpy(&v, in.data() + at, sizeof(T));
    at += sizeof(T);
    return v;
}

void put_reals(std::string& out, const Points& p) {
    for (Index i = 0; i < p.rows(); ++i)
        for (int c = 0; c < 3; ++c) put<double>(out, p(i, c));
}

Points take_reals(const std::string& in, std::size_t& at, Index n) {
    Points p(n, 3);
    for (Index i = 0; i < n; ++i)
        for (int c = 0; c < 3; ++c) p(i, c) = take<double>(in, at);
    return p;
}

}  // namespace

json cloud_header(const CloudRecord& record) {
    const auto& c = record.cloud;
    json fields = json::array();
    fields.push_back({{"name", "positions"}, {"dtype", "f64"}, {"cols", 3}});
    fields.push_back({{"name", "normals"}, {"dtype", "f64"}, {"cols", 3}});
    fields.push_back({{"name", "colors"}, {"dtype", "f64"}, {"cols", 3}});
    if (!c.face_of.empty()) fields.push_back({{"name", "face_of"}, {"dtype", "i32"}, {"cols", 1}});
    for (const auto& [name, _] : record.int_fields) fields.push_back({{"name", name}, {"dtype", "i32"}, {"cols", 1}});
    return {{"N", c.size()},
            {"fields", fields},
            {"normalized", c.normalized},
            {"has_normals", c.has_normals},
            {"has_colors", c.has_colors},
            {"version", kCloudVersion},
            {"attributes", record.attributes}};
}

std::string encode_cloud(const CloudRecord& record) {
    const auto& c = record.cloud;
    const Index n = c.size();
    for (const auto& [name, v] : record.int_fields)
        if (static_cast<Index>(v.size()) != n) throw InvalidArgument("encode_cloud: field " + name + " length mismatch");
    const std::string header = cloud_header(record).dump();
    std::string out(kCloudMagic, kCloudMagic + 8);
    put<std::uint32_t>(out, kCloudVersion);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(header.size()));
    out += header;
    put_reals(out, c.positions);
    put_reals(out, c.normals);
    put_reals(out, c.colors);
    if (!c.face_of.empty())
        for (int f : c.face_of) put<std::int32_t>(out, f);
    for (const auto& [_, v] : record.int_fields)
        for (int x : v) put<std::int32_t>(out, x);
    return out;
}

CloudRecord decode_cloud(const std::string& bytes) {
    if (bytes.size() < 16 || std::memcmp(bytes.data(), kCloudMagic, 8) != 0)
        throw IngestError("not a point-cloud container (bad magic)", 0);
    std::size_t at = 8;
    const auto version = take<std::uint32_t>(bytes, at);
    if (version != kCloudVersion) throw IngestError("unsupported cloud container version " + std::to_string(version), 8);
    const auto header_len = take<std::uint32_t>(bytes, at);
    if (at + header_len > bytes.size()) throw IngestError("cloud container header truncated", at);
    json header;
    try {
        header = json::parse(bytes.substr(at, header_len));
    } catch (const json::parse_error& e) {
        throw IngestError(std::string("cloud container header: ") + e.what(), at + e.byte);
    }
    at += header_len;
    CloudRecord rec;
    const Index n = header.at("N").get<Index>();
    rec.cloud.normalized = header.value("normalized", false);
    rec.cloud.has_normals = header.value("has_normals", true);
    rec.cloud.has_colors = header.value("has_colors", true);
    rec.attributes = header.value("attributes", json::object());
    for (const auto& f : header.at("fields")) {
        const std::string name = f.at("name");
        const std::string dtype = f.at("dtype");
        if (dtype == "f64") {
            Points p = take_reals(bytes, at, n);
            if (name == "positions") rec.cloud.positions = std::move(p);
            else if (name == "normals") rec.cloud.normals = std::move(p);
            else if (name == "colors") rec.cloud.colors = std::move(p);
            else throw IngestError("unknown real field " + name, at);
        } else if (dtype == "i32") {
            std::vector<int> v(n);
            for (Index i = 0; i < n; ++i) v[i] = take<std::int32_t>(bytes, at);
            if (name == "face_of") rec.cloud.face_of = std::move(v);
            else rec.int_fields[name] = std::move(v);
        } else {
            throw IngestError("unknown dtype " + dtype, at);
        }
    }
    if (rec.cloud.positions.rows() != n) throw IngestError("cloud container lacks positions", at);
    if (rec.cloud.normals.rows() != n) rec.cloud.normals = Points::Zero(n, 3), rec.cloud.has_normals = false;
    if (rec.cloud.colors.rows() != n) rec.cloud.colors = Points::Constant(n, 3, 0.5), rec.cloud.has_colors = false;
    return rec;
}

void write_cloud(const std::filesystem::path& path, const CloudRecord& record) {
    write_file(path, encode_cloud(record));
    write_file(path.string() + ".json", cloud_header(record).dump(2) + "\n");
}

CloudRecord read_cloud(const std::filesystem::path& path) { return decode_cloud(read_file(path)); }

TriangleMesh parse_obj(const std::string& text) {
    std::vector<Vec3> verts;
    std::vector<Vec3> vcolors;
    std::vector<std::array<int, 3>> faces;
    std::istringstream in(text);
    std::string line;
    std::size_t offset = 0;
    while (std::getline(in, line)) {
        const std::size_t line_start = offset;
        offset += line.size() + 1;
        std::istringstream ls(line);
        std::string tag;
        if (!(ls >> tag) || tag[0] == '#') continue;
        if (tag == "v") {
            Real x, y, z;
            if (!(ls >> x >> y >> z)) throw IngestError("OBJ: malformed vertex", line_start);
            verts.emplace_back(x, y, z);
            Real r, g, b;
            if (ls >> r >> g >> b) vcolors.emplace_back(r, g, b);
        } else if (tag == "f") {
            std::vector<int> idx;
            std::string tok;
            while (ls >> tok) {
                const std::string head = tok.substr(0, tok.find('/'));
                int v = 0;
                try {
                    v = std::stoi(head);
                } catch (...) {
                    throw IngestError("OBJ: malformed face index '" + tok + "'", line_start);
                }
                v = v < 0 ? static_cast<int>(verts.size()) + v : v - 1;
                if (v < 0 || v >= static_cast<int>(verts.size()))
                    throw IngestError("OBJ: face index out of range", line_start);
                idx.push_back(v);
            }
            if (idx.size() < 3) throw IngestError("OBJ: face with fewer than 3 vertices", line_start);
            for (std::size_t k = 1; k + 1 < idx.size(); ++k) {
                std::array<int, 3> f{idx[0], idx[k], idx[k + 1]};
                if (f[0] == f[1] || f[1] == f[2] || f[0] == f[2]) continue;
                faces.push_back(f);
            }
        }
    }
    if (verts.empty() || faces.empty()) throw IngestError("OBJ: no geometry", 0);
    TriangleMesh mesh;
    mesh.vertices.resize(static_cast<Index>(verts.size()), 3);
    for (std::size_t i = 0; i < verts.size(); ++i) mesh.vertices.row(Index(i)) = verts[i];
    mesh.faces.resize(static_cast<Index>(faces.size()), 3);
    for (std::size_t i = 0; i < faces.size(); ++i)
        for (int c = 0; c < 3; ++c) mesh.faces(Index(i), c) = faces[i][c];
    if (vcolors.size() == verts.size()) {
        mesh.face_colors.resize(mesh.face_count(), 3);
        for (Index f = 0; f < mesh.face_count(); ++f)
            mesh.face_colors.row(f) =
                (vcolors[mesh.faces(f, 0)] + vcolors[mesh.faces(f, 1)] + vcolors[mesh.faces(f, 2)]) / 3.0;
    }
    return mesh;
}

TriangleMesh load_obj(const std::filesystem::path& path) { return parse_obj(read_file(path)); }

std::string format_obj(const TriangleMesh& mesh) {
    std::ostringstream out;
    out.precision(9);
    const bool colored = mesh.face_colors.rows() == mesh.face_count() && mesh.face_count() > 0;
    for (Index f = 0; f < mesh.face_count(); ++f)
        for (int c = 0; c < 3; ++c) {
            const auto v = mesh.vertices.row(mesh.faces(f, c));
            out << "v " << v(0) << ' ' << v(1) << ' ' << v(2);
            if (colored) out << ' ' << mesh.face_colors(f, 0) << ' ' << mesh.face_colors(f, 1) << ' ' << mesh.face_colors(f, 2);
            out << '\n';
        }
    for (Index f = 0; f < mesh.face_count(); ++f)
        out << "f " << 3 * f + 1 << ' ' << 3 * f + 2 << ' ' << 3 * f + 3 << '\n';
    return out.str();
}

void write_obj(const std::filesystem::path& path, const TriangleMesh& mesh) { write_file(path, format_obj(mesh)); }

TriangleMesh GltfScene::merged() const {
    TriangleMesh out;
    out.vertices.resize(0, 3);
    out.faces.resize(0, 3);
    for (const auto& n : nodes) out.append(n.mesh);
    return out;
}

IndexList GltfScene::merged_face_node() const {
    IndexList out;
    for (std::size_t i = 0; i < nodes.size(); ++i) out.insert(out.end(), nodes[i].mesh.face_count(), static_cast<int>(i));
    return out;
}

namespace {

using Mat4 = Eigen::Matrix4d;

Mat4 node_transform(const json& node) {
    Mat4 m = Mat4::Identity();
    if (node.contains("matrix")) {
        const auto& a = node["matrix"];
        if (!a.is_array() || a.size() != 16) throw IngestError("glTF: node matrix must have 16 entries");
        for (int c = 0; c < 4; ++c)
            for (int r = 0; r < 4; ++r) m(r, c) = a[c * 4 + r].get<Real>();  // column-major
        return m;
    }
    Eigen::Vector3d t(0, 0, 0), s(1, 1, 1);
    Eigen::Quaterniond q(1, 0, 0, 0);
    if (node.contains("translation")) {
        const auto& a = node["translation"];
        t = {a[0].get<Real>(), a[1].get<Real>(), a[2].get<Real>()};
    }
    if (node.contains("rotation")) {
        const auto& a = node["rotation"];
        q = Eigen::Quaterniond(a[3].get<Real>(), a[0].get<Real>(), a[1].get<Real>(), a[2].get<Real>());
        q.normalize();
    }
    if (node.contains("scale")) {
        const auto& a = node["scale"];
        s = {a[0].get<Real>(), a[1].get<Real>(), a[2].get<Real>()};
    }
    m.topLeftCorner<3, 3>() = q.toRotationMatrix() * s.asDiagonal();
    m.topRightCorner<3, 1>() = t;
    return m;
}

struct GltfDoc {
    json doc;
    std::vector<std::string> buffers;
};

std::string accessor_bytes(const GltfDoc& g, int accessor_index, int& count, int& component_type, int& components,
                           std::size_t& stride) {
    const auto& accessors = g.doc.at("accessors");
    if (accessor_index < 0 || accessor_index >= static_cast<int>(accessors.size()))
        throw IngestError("glTF: accessor index out of range");
    const auto& acc = accessors[accessor_index];
    if (acc.contains("sparse")) throw IngestError("glTF: sparse accessors are not supported");
    count = acc.at("count").get<int>();
    component_type = acc.at("componentType").get<int>();
    const std::string type = acc.at("type");
    components = type == "SCALAR" ? 1 : type == "VEC2" ? 2 : type == "VEC3" ? 3 : type == "VEC4" ? 4 : 0;
    if (components == 0) throw IngestError("glTF: unsupported accessor type " + type);
    const std::size_t comp_size = component_type == 5126 || component_type == 5125 ? 4
                                  : component_type == 5123 || component_type == 5122 ? 2
                                  : component_type == 5121 || component_type == 5120 ? 1
                                                                                      : 0;
    if (comp_size == 0) throw IngestError("glTF: unsupported component type " + std::to_string(component_type));
    const auto& view = g.doc.at("bufferViews").at(acc.at("bufferView").get<int>());
    const int buffer = view.at("buffer").get<int>();
    if (buffer < 0 || buffer >= static_cast<int>(g.buffers.size())) throw IngestError("glTF: buffer index out of range");
    const std::size_t offset = view.value("byteOffset", 0) + acc.value("byteOffset", 0);
    const std::size_t elem = comp_size * components;
    stride = view.value("byteStride", 0);
    if (stride == 0) stride = elem;
    const std::size_t needed = count == 0 ? 0 : offset + stride * (count - 1) + elem;
    if (needed > g.buffers[buffer].size()) throw IngestError("glTF: accessor exceeds buffer");
    return g.buffers[buffer].substr(offset, needed - offset);
}

Real read_component(const char* p, int type) {
    switch (type) {
        case 5126: { float f; std::memcpy(&f, p, 4); return f; }
        case 5125: { std::uint32_t v; std::memcpy(&v, p, 4); return v; }
        case 5123: { std::uint16_t v; std::memcpy(&v, p, 2); return v; }
        case 5122: { std::int16_t v; std::memcpy(&v, p, 2); return v; }
        case 5121: return static_cast<unsigned char>(*p);
        case 5120: return static_cast<signed char>(*p);
        default: throw IngestError("glTF: bad component type");
    }
}

TriangleMesh mesh_geometry(const GltfDoc& g, int mesh_index, const Mat4& world) {
    const auto& mesh = g.doc.at("meshes").at(mesh_index);
    TriangleMesh out;
    out.vertices.resize(0, 3);
    out.faces.resize(0, 3);
    for (const auto& prim : mesh.at("primitives")) {
        if (prim.value("mode", 4) != 4) continue;
        if (!prim.at("attributes").contains("POSITION")) continue;
        int count, type, comps;
        std::size_t stride;
        const std::string pos = accessor_bytes(g, prim["attributes"]["POSITION"].get<int>(), count, type, comps, stride);
        if (comps != 3 || type != 5126) throw IngestError("glTF: POSITION must be float VEC3");
        TriangleMesh part;
        part.vertices.resize(count, 3);
        const std::size_t csize = 4;
        for (int i = 0; i < count; ++i) {
            Eigen::Vector4d v(read_component(pos.data() + i * stride, type),
                              read_component(pos.data() + i * stride + csize, type),
                              read_component(pos.data() + i * stride + 2 * csize, type), 1.0);
            part.vertices.row(i) = (world * v).head<3>().transpose();
        }
        std::vector<int> idx;
        if (prim.contains("indices")) {
            int icount, itype, icomps;
            std::size_t istride;
            const std::string ib = accessor_bytes(g, prim["indices"].get<int>(), icount, itype, icomps, istride);
            for (int i = 0; i < icount; ++i) idx.push_back(static_cast<int>(read_component(ib.data() + i * istride, itype)));
        } else {
            for (int i = 0; i < count; ++i) idx.push_back(i);
        }
        std::vector<std::array<int, 3>> tris;
        for (std::size_t i = 0; i + 2 < idx.size(); i += 3) {
            std::array<int, 3> f{idx[i], idx[i + 1], idx[i + 2]};
            for (int v : f)
                if (v < 0 || v >= count) throw IngestError("glTF: index out of range");
            if (f[0] == f[1] || f[1] == f[2] || f[0] == f[2]) continue;
            tris.push_back(f);
        }
        part.faces.resize(static_cast<Index>(tris.size()), 3);
        for (std::size_t i = 0; i < tris.size(); ++i)
            for (int c = 0; c < 3; ++c) part.faces(Index(i), c) = tris[i][c];
        out.append(part);
    }
    return out;
}

std::string load_buffer(const json& buf, const std::filesystem::path& base_dir, const std::string* glb_bin) {
    if (!buf.contains("uri")) {
        if (!glb_bin) throw IngestError("glTF: buffer without uri outside a GLB container");
        return *glb_bin;
    }
    const std::string uri = buf["uri"];
    if (uri.rfind("data:", 0) == 0) {
        const auto comma = uri.find(',');
        if (comma == std::string::npos || uri.find(";base64") == std::string::npos)
            throw IngestError("glTF: only base64 data URIs are supported");
        return base64_decode(uri.substr(comma + 1));
    }
    return read_file(base_dir / uri);
}

}  // namespace

GltfScene parse_gltf(const std::string& bytes, const std::filesystem::path& base_dir) {
    GltfDoc g;
    std::string glb_bin;
    const std::string* bin_ptr = nullptr;
    std::string json_text = bytes;
    std::size_t json_offset = 0;
    if (bytes.size() >= 12 && bytes.compare(0, 4, "glTF") == 0) {
        std::size_t at = 12;
        json_text.clear();
        while (at + 8 <= bytes.size()) {
            std::uint32_t len, type;
            std::memcpy(&len, bytes.data() + at, 4);
            std::memcpy(&type, bytes.data() + at + 4, 4);
            if (at + 8 + len > bytes.size()) throw IngestError("GLB: chunk exceeds file", at);
            if (type == 0x4E4F534A) {
                json_text = bytes.substr(at + 8, len);
                json_offset = at + 8;
            } else if (type == 0x004E4942) {
                glb_bin = bytes.substr(at + 8, len);
                bin_ptr = &glb_bin;
            }
            at += 8 + len;
        }
        if (json_text.empty()) throw IngestError("GLB: missing JSON chunk", 12);
    }
    try {
        g.doc = json::parse(json_text);
    } catch (const json::parse_error& e) {
        throw IngestError(std::string("glTF: ") + e.what(), json_offset + (e.byte > 0 ? e.byte - 1 : 0));
    }
    if (!g.doc.is_object() || !g.doc.contains("asset")) throw IngestError("glTF: missing asset block", json_offset);
    try {
        for (const auto& b : g.doc.value("buffers", json::array())) g.buffers.push_back(load_buffer(b, base_dir, bin_ptr));

        const auto& nodes = g.doc.value("nodes", json::array());
        std::vector<int> roots;
        if (g.doc.contains("scenes") && !g.doc["scenes"].empty()) {
            const int scene = g.doc.value("scene", 0);
            for (const auto& r : g.doc["scenes"].at(scene).value("nodes", json::array())) roots.push_back(r.get<int>());
        } else {
            std::vector<bool> is_child(nodes.size(), false);
            for (const auto& n : nodes)
                for (const auto& c : n.value("children", json::array())) is_child.at(c.get<int>()) = true;
            for (std::size_t i = 0; i < nodes.size(); ++i)
                if (!is_child[i]) roots.push_back(static_cast<int>(i));
        }

        GltfScene scene;
        std::vector<std::pair<int, Mat4>> stack;
        for (auto it = roots.rbegin(); it != roots.rend(); ++it) stack.emplace_back(*it, Mat4::Identity());
        std::size_t guard = 0;
        while (!stack.empty()) {
            auto [index, parent] = stack.back();
            stack.pop_back();
            if (++guard > 1000000) throw IngestError("glTF: node hierarchy has a cycle");
            const auto& node = nodes.at(index);
            const Mat4 world = parent * node_transform(node);
            const auto children = node.value("children", json::array());
            if (node.contains("mesh")) {
                GltfNodeGeometry geo;
                geo.node = index;
                geo.name = node.value("name", "node" + std::to_string(index));
                geo.leaf = children.empty();
                geo.mesh = mesh_geometry(g, node["mesh"].get<int>(), world);
                if (geo.mesh.face_count() > 0) scene.nodes.push_back(std::move(geo));
            }
            for (auto it = children.rbegin(); it != children.rend(); ++it) stack.emplace_back(it->get<int>(), world);
        }
        return scene;
    } catch (const json::exception& e) {
        throw IngestError(std::string("glTF: ") + e.what(), json_offset);
    }
}

GltfScene load_gltf(const std::filesystem::path& path) { return parse_gltf(read_file(path), path.parent_path()); }

std::string format_gltf(const std::vector<std::pair<std::string, TriangleMesh>>& parts) {
    std::string bin;
    json doc;
    doc["asset"] = {{"version", "2.0"}, {"generator", "partprompt"}};
    doc["scene"] = 0;
    json nodes = json::array(), meshes = json::array(), accessors = json::array(), views = json::array();
    json root_children = json::array();
    nodes.push_back({{"name", "root"}});
    for (std::size_t p = 0; p < parts.size(); ++p) {
        const auto& m = parts[p].second;
        const std::size_t pos_off = bin.size();
        Vec3 lo = m.vertices.colwise().minCoeff(), hi = m.vertices.colwise().maxCoeff();
        for (Index i = 0; i < m.vertex_count(); ++i)
            for (int c = 0; c < 3; ++c) put<float>(bin, static_cast<float>(m.vertices(i, c)));
        const std::size_t idx_off = bin.size();
        for (Index f = 0; f < m.face_count(); ++f)
            for (int c = 0; c < 3; ++c) put<std::uint32_t>(bin, static_cast<std::uint32_t>(m.faces(f, c)));
        const int vpos = static_cast<int>(views.size());
        views.push_back({{"buffer", 0}, {"byteOffset", pos_off}, {"byteLength", idx_off - pos_off}});
        views.push_back({{"buffer", 0}, {"byteOffset", idx_off}, {"byteLength", bin.size() - idx_off}});
        const int apos = static_cast<int>(accessors.size());
        accessors.push_back({{"bufferView", vpos},
                             {"componentType", 5126},
                             {"count", m.vertex_count()},
                             {"type", "VEC3"},
                             {"min", {lo(0), lo(1), lo(2)}},
                             {"max", {hi(0), hi(1), hi(2)}}});
        accessors.push_back({{"bufferView", vpos + 1}, {"componentType", 5125}, {"count", 3 * m.face_count()}, {"type", "SCALAR"}});
        meshes.push_back({{"primitives", {{{"attributes", {{"POSITION", apos}}}, {"indices", apos + 1}, {"mode", 4}}}}});
        root_children.push_back(static_cast<int>(nodes.size()));
        nodes.push_back({{"name", parts[p].first}, {"mesh", static_cast<int>(p)}});
    }
    nodes[0]["children"] = root_children;
    doc["nodes"] = nodes;
    doc["meshes"] = meshes;
    doc["accessors"] = accessors;
    doc["bufferViews"] = views;
    doc["buffers"] = {{{"byteLength", bin.size()}, {"uri", "data:application/octet-stream;base64," + base64_encode(bin)}}};
    doc["scenes"] = {{{"nodes", {0}}}};
    return doc.dump();
}

TriangleMesh load_mesh(const std::filesystem::path& path) {
    const std::string ext = path.extension().string();
    if (ext == ".gltf" || ext == ".glb") return load_gltf(path).merged();
    if (ext == ".obj") return load_obj(path);
    const std::string bytes = read_file(path);
    if (bytes.compare(0, 4, "glTF") == 0 || (!bytes.empty() && bytes.front() == '{'))
        return parse_gltf(bytes, path.parent_path()).merged();
    return parse_obj(bytes);
}

std::string base64_encode(const std::string& bytes) {
    static const char* table = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
    std::string out;
    out.reserve((bytes.size() + 2) / 3 * 4);
    std::size_t i = 0;
    for (; i + 2 < bytes.size(); i += 3) {
        const std::uint32_t v = (std::uint8_t(bytes[i]) << 16) | (std::uint8_t(bytes[i + 1]) << 8) | std::uint8_t(bytes[i + 2]);
        out += table[(v >> 18) & 63];
        out += table[(v >> 12) & 63];
        out += table[(v >> 6) & 63];
        out += table[v & 63];
    }
    if (i < bytes.size()) {
        std::uint32_t v = std::uint8_t(bytes[i]) << 16;
        if (i + 1 < bytes.size()) v |= std::uint8_t(bytes[i + 1]) << 8;
        out += table[(v >> 18) & 63];
        out += table[(v >> 12) & 63];
        out += i + 1 < bytes.size() ? table[(v >> 6) & 63] : '=';
        out += '=';
    }
    return out;
}

std::string base64_decode(const std::string& text) {
    auto value = [](char c) -> int {
        if (c >= 'A' && c <= 'Z') return c - 'A';
        if (c >= 'a' && c <= 'z') return c - 'a' + 26;
        if (c >= '0' && c <= '9') return c - '0' + 52;
        if (c == '+' || c == '-') return 62;
        if (c == '/' || c == '_') return 63;
        return -1;
    };
    std::string out;
    std::uint32_t acc = 0;
    int bits = 0;
    for (std::size_t i = 0; i < text.size(); ++i) {
        const char c = text[i];
        if (c == '=') break;
        if (c == '\n' || c == '\r' || c == ' ') continue;
        const int v = value(c);
        if (v < 0) throw IngestError("base64: invalid character", i);
        acc = (acc << 6) | static_cast<std::uint32_t>(v);
        bits += 6;
        if (bits >= 8) {
            bits -= 8;
            out += static_cast<char>((acc >> bits) & 0xFF);
        }
    }
    return out;
}

std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IngestError("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_file(const std::filesystem::path& path, const std::string& bytes) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace partprompt::io
