// SPDX-License-Identifier: Apache-2.0
//
// Encode-once / decode-many segmentation service. `SegmentationService` holds
// shapes and per-shape sessions and is usable directly; `HttpServer` exposes it
// as JSON over HTTP under /v1.
//
//   POST /v1/shapes                     raw OBJ / glTF / GLB / cloud container
//   GET  /v1/shapes/{id}/points         columnar JSON, or the binary container
//                                       with Accept: application/octet-stream
//   POST /v1/shapes/{id}/segment        {points, signs, reset}
//   POST /v1/shapes/{id}/autosegment    {n_prompts, T, min_predicted_iou}
//   GET  /v1/metrics                    {encode_count, shapes, cached}

#pragma once

#include "partprompt/autoseg.hpp"

#include <atomic>
#include <chrono>
#include <list>
#include <memory>
#include <mutex>
#include <thread>
#include <unordered_map>

namespace httplib {
class Server;
}

namespace partprompt::service {

struct ServiceConfig {
    std::size_t max_cached = 32;
    std::size_t max_upload_bytes = 64u << 20;
    int n_points = 8192;
    std::size_t history_limit = 64;
    /// Uploaded shapes are written here as cloud containers when non-empty.
    std::filesystem::path spool_dir;
    std::uint64_t seed = 0;
};

/// Error carrying the HTTP status it maps to.
class ServiceError : public std::runtime_error {
public:
    ServiceError(int status, const std::string& what) : std::runtime_error(what), status_(status) {}
    int status() const { return status_; }

private:
    int status_;
};

struct UploadResult {
    std::string shape_id;
    Index n_points = 0;
};

struct Candidate {
    IndexList indices;
    Real predicted_iou = 0;
};

struct SegmentRequest {
    Points points;
    std::vector<bool> signs;
    bool reset = false;
};

struct SegmentResponse {
    std::vector<Candidate> candidates;
    int round = 0;
    int clamped = 0;  // prompts moved onto the [-1, 1]^3 box
};

class SegmentationService {
public:
    SegmentationService(std::shared_ptr<const PromptableModel> model, ServiceConfig cfg = {});

    /// Parses mesh (OBJ, glTF, GLB) or cloud-container bytes. Throws ServiceError 400/413.
    UploadResult upload(const std::string& bytes);
    UploadResult add_cloud(const PointCloud& cloud);

    /// Throws 404 for an unknown id, 422 for malformed prompts.
    SegmentResponse segment(const std::string& shape_id, const SegmentRequest& request);
    autoseg::SegmentationResult autosegment(const std::string& shape_id, const autoseg::AutoSegConfig& cfg);
    PointCloud points(const std::string& shape_id) const;

    /// Number of model encodes performed so far.
    long encode_count() const { return encodes_.load(); }
    std::size_t shape_count() const;
    std::size_t cached_count() const;
    int round(const std::string& shape_id) const;

    const ServiceConfig& config() const { return cfg_; }

private:
    struct Session {
        PointCloud cloud;
        std::mutex mutex;  // serializes rounds and the lazy encode
        std::shared_ptr<const Encoding> encoding;
        PromptSet history;
        std::optional<std::vector<Real>> last_logits;
        int round = 0;
        std::chrono::steady_clock::time_point created_at;
    };

    std::shared_ptr<Session> find(const std::string& shape_id) const;
    std::shared_ptr<const Encoding> encoding_for(const std::string& shape_id, Session& s);

    std::shared_ptr<const PromptableModel> model_;
    ServiceConfig cfg_;
    mutable std::mutex mutex_;  // guards the maps below
    std::unordered_map<std::string, std::shared_ptr<Session>> sessions_;
    std::list<std::string> lru_;  // most recently used encoding first
    std::atomic<long> encodes_{0};
    std::atomic<long> next_id_{0};
};

io::json to_json(const SegmentResponse& r);
/// Columnar JSON: {n_points, positions: {x, y, z}, normals?, colors?}.
io::json points_json(const PointCloud& cloud);
SegmentRequest segment_request_from_json(const io::json& j);
autoseg::AutoSegConfig autoseg_config_from_json(const io::json& j);

class HttpServer {
public:
    explicit HttpServer(SegmentationService& service);
    ~HttpServer();
    HttpServer(const HttpServer&) = delete;
    HttpServer& operator=(const HttpServer&) = delete;

    /// Binds and serves on a background thread; returns the bound port (0 = pick one).
    int start(const std::string& host = "127.0.0.1", int port = 0);
    /// Blocks serving on the calling thread.
    bool listen(const std::string& host, int port);
    void stop();

private:
    SegmentationService& service_;
    std::unique_ptr<httplib::Server> server_;
    std::thread thread_;
};

}  // namespace partprompt::service
