// SPDX-License-Identifier: Apache-2.0

#include "partprompt/service.hpp"

#include "partprompt/data.hpp"

#include <httplib.h>

#include <cstring>

namespace partprompt::service {

SegmentationService::SegmentationService(std::shared_ptr<const PromptableModel> model, ServiceConfig cfg)
    : model_(std::move(model)), cfg_(std::move(cfg)) {
    if (!model_) throw InvalidArgument("service: model required");
    if (cfg_.max_cached < 1) throw InvalidArgument("service: max_cached must be >= 1");
    if (cfg_.n_points < 1) throw InvalidArgument("service: n_points must be >= 1");
    if (!cfg_.spool_dir.empty()) std::filesystem::create_directories(cfg_.spool_dir);
}

UploadResult SegmentationService::upload(const std::string& bytes) {
    if (bytes.size() > cfg_.max_upload_bytes) throw ServiceError(413, "upload exceeds the size limit");
    if (bytes.empty()) throw ServiceError(400, "empty upload");
    PointCloud cloud;
    try {
        if (bytes.size() >= 8 && std::memcmp(bytes.data(), io::kCloudMagic, 8) == 0) {
            cloud = io::decode_cloud(bytes).cloud;
            cloud.validate();
            if (cloud.size() == 0) throw IngestError("cloud has no points");
        } else {
            TriangleMesh mesh;
            if (bytes.compare(0, 4, "glTF") == 0 || bytes.front() == '{')
                mesh = io::parse_gltf(bytes).merged();
            else
                mesh = io::parse_obj(bytes);
            mesh.validate();
            if (mesh.face_count() == 0) throw IngestError("mesh has no faces");
            cloud = sample_mesh_points(mesh, cfg_.n_points, cfg_.seed + static_cast<std::uint64_t>(next_id_.load()));
        }
    } catch (const ServiceError&) {
        throw;
    } catch (const std::exception& e) {
        throw ServiceError(400, std::string("could not parse upload: ") + e.what());
    }
    return add_cloud(cloud);
}

UploadResult SegmentationService::add_cloud(const PointCloud& input) {
    PointCloud cloud = data::default_gray(normalize(input));
    auto s = std::make_shared<Session>();
    s->cloud = std::move(cloud);
    s->created_at = std::chrono::steady_clock::now();
    const std::string id = "s" + std::to_string(next_id_.fetch_add(1));
    if (!cfg_.spool_dir.empty()) {
        io::CloudRecord rec;
        rec.cloud = s->cloud;
        rec.attributes["shape_id"] = id;
        io::write_cloud(cfg_.spool_dir / (id + ".ppc"), rec);
    }
    UploadResult r{id, s->cloud.size()};
    std::lock_guard lock(mutex_);
    sessions_.emplace(id, std::move(s));
    return r;
}

std::shared_ptr<SegmentationService::Session> SegmentationService::find(const std::string& shape_id) const {
    std::lock_guard lock(mutex_);
    const auto it = sessions_.find(shape_id);
    if (it == sessions_.end()) throw ServiceError(404, "unknown shape id '" + shape_id + "'");
    return it->second;
}

std::shared_ptr<const Encoding> SegmentationService::encoding_for(const std::string& shape_id, Session& s) {
    // Caller holds s.mutex, so at most one encode per shape is in flight.
    {
        std::lock_guard lock(mutex_);
        if (s.encoding) {
            lru_.remove(shape_id);
            lru_.push_front(shape_id);
            return s.encoding;
        }
    }
    std::shared_ptr<const Encoding> enc = model_->encode(s.cloud);
    ++encodes_;
    std::lock_guard lock(mutex_);
    s.encoding = enc;
    lru_.remove(shape_id);
    lru_.push_front(shape_id);
    while (lru_.size() > cfg_.max_cached) {
        const auto it = sessions_.find(lru_.back());
        if (it != sessions_.end()) it->second->encoding.reset();
        lru_.pop_back();
    }
    return enc;
}

SegmentResponse SegmentationService::segment(const std::string& shape_id, const SegmentRequest& request) {
    const auto s = find(shape_id);
    if (request.points.rows() == 0 && !request.reset) throw ServiceError(422, "at least one prompt point is required");
    if (static_cast<Index>(request.signs.size()) != request.points.rows())
        throw ServiceError(422, "points and signs differ in length");
    if (!request.points.allFinite()) throw ServiceError(422, "prompt coordinates must be finite");

    std::lock_guard lock(s->mutex);
    if (request.reset) {
        s->history = PromptSet{};
        s->last_logits.reset();
        s->round = 0;
    }
    SegmentResponse r;
    if (request.points.rows() == 0) {
        r.round = s->round;
        return r;
    }
    if (s->history.size() + request.points.rows() > static_cast<Index>(cfg_.history_limit))
        throw ServiceError(422, "prompt history limit reached; reset the session");
    const auto enc = encoding_for(shape_id, *s);

    PromptSet prompts = s->history;
    for (Index i = 0; i < request.points.rows(); ++i) {
        Vec3 p = request.points.row(i);
        const Vec3 c = p.cwiseMax(-1.0).cwiseMin(1.0);
        if (c != p) ++r.clamped;
        prompts.push(c, request.signs[static_cast<std::size_t>(i)]);
    }
    prompts.prev_logits = s->last_logits;
    const std::vector<MaskPrediction> preds = model_->decode(*enc, prompts);
    if (preds.empty()) throw ServiceError(500, "model returned no candidates");
    std::size_t best = 0;
    for (std::size_t m = 0; m < preds.size(); ++m) {
        r.candidates.push_back({preds[m].mask.indices(), preds[m].predicted_iou});
        if (preds[m].predicted_iou > preds[best].predicted_iou) best = m;
    }
    prompts.prev_logits.reset();
    s->history = std::move(prompts);
    s->last_logits = preds[best].logits;
    r.round = ++s->round;
    return r;
}

autoseg::SegmentationResult SegmentationService::autosegment(const std::string& shape_id,
                                                            const autoseg::AutoSegConfig& cfg) {
    try {
        cfg.validate();
    } catch (const InvalidArgument& e) {
        throw ServiceError(422, e.what());
    }
    const auto s = find(shape_id);
    std::shared_ptr<const Encoding> enc;
    {
        std::lock_guard lock(s->mutex);
        enc = encoding_for(shape_id, *s);
    }
    auto result = autoseg::segment_every_part(*model_, *enc, cfg);
    for (std::size_t a = 0; a < result.masks.size(); ++a)
        for (std::size_t b = a + 1; b < result.masks.size(); ++b)
            if (point_iou(result.masks[a].mask, result.masks[b].mask) > cfg.nms_threshold)
                throw ServiceError(500, "internal error: kept masks violate the NMS threshold");
    return result;
}

PointCloud SegmentationService::points(const std::string& shape_id) const { return find(shape_id)->cloud; }

std::size_t SegmentationService::shape_count() const {
    std::lock_guard lock(mutex_);
    return sessions_.size();
}

std::size_t SegmentationService::cached_count() const {
    std::lock_guard lock(mutex_);
    return lru_.size();
}

int SegmentationService::round(const std::string& shape_id) const {
    const auto s = find(shape_id);
    std::lock_guard lock(s->mutex);
    return s->round;
}

// ---------------------------------------------------------------------------
// JSON

io::json to_json(const SegmentResponse& r) {
    io::json c = io::json::array();
    for (const auto& x : r.candidates) c.push_back({{"indices", x.indices}, {"predicted_iou", x.predicted_iou}});
    io::json j = {{"candidates", c}, {"round", r.round}, {"clamped", r.clamped}};
    if (r.clamped > 0) j["warning"] = "prompt points outside [-1, 1]^3 were clamped";
    return j;
}

io::json points_json(const PointCloud& cloud) {
    auto columns = [&](const Points& p) {
        std::vector<Real> x(p.rows()), y(p.rows()), z(p.rows());
        for (Index i = 0; i < p.rows(); ++i) {
            x[i] = p(i, 0);
            y[i] = p(i, 1);
            z[i] = p(i, 2);
        }
        return io::json{{"x", x}, {"y", y}, {"z", z}};
    };
    io::json j = {{"n_points", cloud.size()}, {"positions", columns(cloud.positions)}};
    if (cloud.has_normals) j["normals"] = columns(cloud.normals);
    if (cloud.has_colors) j["colors"] = columns(cloud.colors);
    return j;
}

SegmentRequest segment_request_from_json(const io::json& j) {
    if (!j.is_object()) throw ServiceError(422, "request body must be a JSON object");
    SegmentRequest r;
    r.reset = j.value("reset", false);
    const io::json pts = j.value("points", io::json::array());
    const io::json signs = j.value("signs", io::json::array());
    if (!pts.is_array() || !signs.is_array()) throw ServiceError(422, "points and signs must be arrays");
    r.points.resize(static_cast<Index>(pts.size()), 3);
    for (std::size_t i = 0; i < pts.size(); ++i) {
        if (!pts[i].is_array() || pts[i].size() != 3) throw ServiceError(422, "each point must be [x, y, z]");
        for (int c = 0; c < 3; ++c) {
            if (!pts[i][c].is_number()) throw ServiceError(422, "point coordinates must be numbers");
            r.points(Index(i), c) = pts[i][c].get<Real>();
        }
    }
    for (const auto& s : signs) {
        if (!s.is_boolean()) throw ServiceError(422, "signs must be booleans");
        r.signs.push_back(s.get<bool>());
    }
    return r;
}

autoseg::AutoSegConfig autoseg_config_from_json(const io::json& j) {
    autoseg::AutoSegConfig c;
    if (j.is_null()) return c;
    if (!j.is_object()) throw ServiceError(422, "request body must be a JSON object");
    try {
        c.n_prompts = j.value("n_prompts", c.n_prompts);
        c.nms_threshold = j.value("T", j.value("nms_threshold", c.nms_threshold));
        c.min_predicted_iou = j.value("min_predicted_iou", c.min_predicted_iou);
    } catch (const io::json::exception& e) {
        throw ServiceError(422, std::string("bad autosegment config: ") + e.what());
    }
    return c;
}

// ---------------------------------------------------------------------------
// HTTP

namespace {

void send_json(httplib::Response& res, int status, const io::json& body) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
}

template <typename F>
void guarded(httplib::Response& res, F&& f) {
    try {
        f();
    } catch (const ServiceError& e) {
        send_json(res, e.status(), {{"error", e.what()}});
    } catch (const io::json::exception& e) {
        send_json(res, 422, {{"error", std::string("malformed JSON: ") + e.what()}});
    } catch (const InvalidArgument& e) {
        send_json(res, 422, {{"error", e.what()}});
    } catch (const std::exception& e) {
        send_json(res, 500, {{"error", e.what()}});
    }
}

io::json parse_body(const std::string& body) {
    if (body.empty()) return io::json::object();
    return io::json::parse(body);
}

}  // namespace

HttpServer::HttpServer(SegmentationService& service) : service_(service), server_(std::make_unique<httplib::Server>()) {
    auto& srv = *server_;
    srv.set_payload_max_length(service_.config().max_upload_bytes);

    srv.Get("/v1/health", [](const httplib::Request&, httplib::Response& res) { send_json(res, 200, {{"ok", true}}); });

    srv.Get("/v1/metrics", [this](const httplib::Request&, httplib::Response& res) {
        send_json(res, 200,
                  {{"encode_count", service_.encode_count()},
                   {"shapes", service_.shape_count()},
                   {"cached", service_.cached_count()}});
    });

    srv.Post("/v1/shapes", [this](const httplib::Request& req, httplib::Response& res) {
        guarded(res, [&] {
            const UploadResult r = service_.upload(req.body);
            send_json(res, 200, {{"shape_id", r.shape_id}, {"n_points", r.n_points}});
        });
    });

    srv.Get(R"(/v1/shapes/([^/]+)/points)", [this](const httplib::Request& req, httplib::Response& res) {
        guarded(res, [&] {
            const PointCloud cloud = service_.points(req.matches[1]);
            if (req.get_header_value("Accept").find("application/octet-stream") != std::string::npos) {
                io::CloudRecord rec;
                rec.cloud = cloud;
                res.status = 200;
                res.set_content(io::encode_cloud(rec), "application/octet-stream");
            } else {
                send_json(res, 200, points_json(cloud));
            }
        });
    });

    srv.Post(R"(/v1/shapes/([^/]+)/segment)", [this](const httplib::Request& req, httplib::Response& res) {
        guarded(res, [&] {
            const std::string id = req.matches[1];
            service_.points(id);  // 404 before body validation
            const SegmentRequest r = segment_request_from_json(parse_body(req.body));
            send_json(res, 200, to_json(service_.segment(id, r)));
        });
    });

    srv.Post(R"(/v1/shapes/([^/]+)/autosegment)", [this](const httplib::Request& req, httplib::Response& res) {
        guarded(res, [&] {
            const std::string id = req.matches[1];
            service_.points(id);
            const autoseg::AutoSegConfig cfg = autoseg_config_from_json(parse_body(req.body));
            const auto t0 = std::chrono::steady_clock::now();
            const auto result = service_.autosegment(id, cfg);
            io::json j = autoseg::to_json(result);
            j["seconds"] = std::chrono::duration<Real>(std::chrono::steady_clock::now() - t0).count();
            send_json(res, 200, j);
        });
    });
}

HttpServer::~HttpServer() { stop(); }

int HttpServer::start(const std::string& host, int port) {
    int bound = port;
    if (port == 0)
        bound = server_->bind_to_any_port(host);
    else if (!server_->bind_to_port(host, port))
        bound = -1;
    if (bound < 0) throw std::runtime_error("service: could not bind " + host + ":" + std::to_string(port));
    thread_ = std::thread([this] { server_->listen_after_bind(); });
    server_->wait_until_ready();
    return bound;
}

bool HttpServer::listen(const std::string& host, int port) { return server_->listen(host, port); }

void HttpServer::stop() {
    if (server_) server_->stop();
    if (thread_.joinable()) thread_.join();
}

}  // namespace partprompt::service
