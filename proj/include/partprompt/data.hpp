// SPDX-License-Identifier: Apache-2.0
//
// Part-labeled shapes: procedural synthetic generation, glTF scene-graph part
// mining, curation filters, augmentation and the on-disk dataset layout.

#pragma once

#include "partprompt/geometry.hpp"
#include "partprompt/io.hpp"

#include <array>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace partprompt::data {

enum class Provenance { synthetic, scene_graph, connected_components, model_in_the_loop };

std::string to_string(Provenance p);
Provenance provenance_from_string(const std::string& s);

struct LabeledShape {
    PointCloud cloud;
    std::vector<PartMask> parts;
    Provenance provenance = Provenance::synthetic;
    std::string shape_id;
    /// Source surface (same coordinate frame as the cloud) when known.
    std::optional<TriangleMesh> mesh;
    /// Part index per mesh face (-1 for unlabeled faces); empty without a mesh.
    IndexList face_part;

    std::size_t total_part_points() const;
    /// Per-point part index, -1 where no part claims the point.
    IndexList point_labels() const;
};

enum class RejectReason { too_few_parts, too_many_parts, no_geometry };
std::string to_string(RejectReason r);

struct CurationReport {
    bool kept = true;
    std::optional<RejectReason> reject_reason;
    int parts_dropped_small = 0;
    int parts_dropped_large = 0;
};

struct CurationThresholds {
    Real min_share = 0.001;
    Real max_share = 0.8;
    int min_parts = 3;
    int max_parts = 50;
};

struct SyntheticOptions {
    int n_points = 2048;
    /// Probability that a shape is built as a closed shell around a hidden core.
    Real interior_probability = 0.3;
};

/// Deterministic composite of primitives; one ground-truth part per primitive.
/// Part count is uniform over [min_parts, max_parts].
LabeledShape generate_synthetic(std::uint64_t seed, int min_parts, int max_parts, const SyntheticOptions& options = {});

struct SceneGraphExtraction {
    LabeledShape shape;
    CurationReport report;
};

/// One part per geometry-bearing node when there are several, otherwise one
/// part per connected component of the merged mesh; then curated.
SceneGraphExtraction extract_scene_graph_parts(const io::GltfScene& scene, int n_points, std::uint64_t seed,
                                               const std::string& shape_id = "gltf",
                                               const CurationThresholds& thresholds = {});

struct CurationResult {
    LabeledShape shape;
    CurationReport report;
};

CurationResult curate_filter(const LabeledShape& shape, const CurationThresholds& thresholds = {});

enum class RotationMode { none, z_only, full_so3 };

struct ChromaticConfig {
    Real auto_contrast_prob = 0.2;
    Real translation_std = 0.05;
    Real jitter_std = 0.02;
};

struct AugmentationConfig {
    RotationMode rotation = RotationMode::z_only;
    std::array<Real, 2> scale_range{0.8, 1.25};
    std::array<bool, 3> flip_axes{true, true, false};
    Real flip_prob = 0.5;
    Real shift_range = 0.1;
    ChromaticConfig chromatic;
    bool renormalize = true;
    std::uint64_t seed = 0;

    /// A configuration that leaves shapes unchanged.
    static AugmentationConfig identity();
    void validate() const;
};

LabeledShape augment(const LabeledShape& shape, const AugmentationConfig& cfg);

/// Colorless clouds get uniform RGB (0.5, 0.5, 0.5); colored clouds pass through.
PointCloud default_gray(const PointCloud& cloud);

// Dataset storage: one container per shape plus a JSON-lines manifest.
struct ManifestRecord {
    std::string shape_id;
    Provenance provenance = Provenance::synthetic;
    Index n_points = 0;
    int n_parts = 0;
    std::string file;
};

io::json to_json(const ManifestRecord& r);
ManifestRecord manifest_record_from_json(const io::json& j);

/// Writes `dir/<shape_id>.ppc` (+ sidecar) and returns its manifest record.
ManifestRecord write_shape(const std::filesystem::path& dir, const LabeledShape& shape);
LabeledShape read_shape(const std::filesystem::path& file);

void write_manifest(const std::filesystem::path& path, const std::vector<ManifestRecord>& records);
std::vector<ManifestRecord> read_manifest(const std::filesystem::path& path);

/// Loads every shape listed in `dir/manifest.jsonl`.
std::vector<LabeledShape> load_dataset(const std::filesystem::path& dir);
void save_dataset(const std::filesystem::path& dir, const std::vector<LabeledShape>& shapes);

/// Builds a labeled shape from a mesh and a per-face part index.
LabeledShape shape_from_mesh(const TriangleMesh& mesh, const IndexList& face_part, int n_points, std::uint64_t seed,
                             Provenance provenance, const std::string& shape_id);

}  // namespace partprompt::data
