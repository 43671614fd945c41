// SPDX-License-Identifier: Apache-2.0
//
// Command-line front end: dataset generation and curation, training,
// automatic segmentation, model-in-the-loop annotation, evaluation, serving.

#include "partprompt/annotate.hpp"
#include "partprompt/autoseg.hpp"
#include "partprompt/eval.hpp"
#include "partprompt/service.hpp"
#include "partprompt/training.hpp"

#include <CLI11.hpp>

#include <csignal>
#include <iostream>

using namespace partprompt;
namespace fs = std::filesystem;

namespace {

std::vector<int> parse_int_list(const std::string& s) {
    std::vector<int> out;
    std::stringstream ss(s);
    std::string tok;
    while (std::getline(ss, tok, ',')) out.push_back(std::stoi(tok));
    return out;
}

std::vector<Real> parse_real_list(const std::string& s) {
    std::vector<Real> out;
    std::stringstream ss(s);
    std::string tok;
    while (std::getline(ss, tok, ',')) out.push_back(std::stod(tok));
    return out;
}

bool is_cloud_file(const fs::path& p) { return p.extension() == ".ppc"; }

int cmd_dataset_gen(const fs::path& out, int count, std::uint64_t seed, int min_parts, int max_parts, int n_points,
                    bool curate) {
    data::SyntheticOptions opts;
    opts.n_points = n_points;
    std::vector<data::LabeledShape> shapes;
    int rejected = 0;
    for (int i = 0; i < count; ++i) {
        auto s = data::generate_synthetic(seed + static_cast<std::uint64_t>(i), min_parts, max_parts, opts);
        if (curate) {
            auto c = data::curate_filter(s);
            if (!c.report.kept) {
                ++rejected;
                continue;
            }
            s = std::move(c.shape);
        }
        shapes.push_back(std::move(s));
    }
    data::save_dataset(out, shapes);
    std::cout << "wrote " << shapes.size() << " shapes to " << out << " (" << rejected << " rejected)\n";
    return 0;
}

int cmd_dataset_curate(const fs::path& in, const fs::path& out) {
    std::vector<data::LabeledShape> kept;
    io::json reports = io::json::array();
    for (auto& s : data::load_dataset(in)) {
        auto c = data::curate_filter(s);
        io::json r = {{"shape_id", s.shape_id},
                      {"kept", c.report.kept},
                      {"parts_dropped_small", c.report.parts_dropped_small},
                      {"parts_dropped_large", c.report.parts_dropped_large}};
        if (c.report.reject_reason) r["reject_reason"] = data::to_string(*c.report.reject_reason);
        reports.push_back(r);
        if (c.report.kept) kept.push_back(std::move(c.shape));
    }
    data::save_dataset(out, kept);
    std::cout << reports.dump(2) << '\n';
    return 0;
}

int cmd_dataset_ingest(const std::vector<std::string>& inputs, const fs::path& out, int n_points, std::uint64_t seed) {
    std::vector<data::LabeledShape> kept;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        const fs::path p = inputs[i];
        const auto ext = data::extract_scene_graph_parts(io::load_gltf(p), n_points, seed + i, p.stem().string());
        io::json r = {{"file", p.string()}, {"kept", ext.report.kept}, {"provenance", data::to_string(ext.shape.provenance)}};
        if (ext.report.reject_reason) r["reject_reason"] = data::to_string(*ext.report.reject_reason);
        std::cout << r.dump() << '\n';
        if (ext.report.kept) kept.push_back(ext.shape);
    }
    data::save_dataset(out, kept);
    return 0;
}

int cmd_train(const fs::path& config, const fs::path& dataset, const fs::path& out, bool resume) {
    const auto setup = training::load_training_config(config);
    const auto shapes = data::load_dataset(dataset);
    training::TrainOptions opts;
    opts.out_dir = out;
    opts.resume = resume;
    const int every = std::max(1, setup.train.iterations / 100);
    opts.on_step = [&](const training::StepMetrics& m) {
        if (m.iter % every == 0) std::cerr << training::to_json(m).dump() << '\n';
    };
    try {
        const auto r = training::train(shapes, setup.train, setup.loss, setup.model, opts);
        std::cout << "trained " << r.iterations_done << " iterations; checkpoint " << r.checkpoint << '\n';
    } catch (const training::TrainingAborted& e) {
        std::cerr << e.what() << "; last good checkpoint: " << e.last_good_checkpoint() << '\n';
        return 3;
    }
    return 0;
}

int cmd_segment(const fs::path& checkpoint, const fs::path& input, Real T, int nf, Real min_iou, const fs::path& out,
                const fs::path& obj_out, int n_points, std::uint64_t seed) {
    const auto model = load_model(checkpoint);
    autoseg::AutoSegConfig cfg;
    cfg.n_prompts = nf;
    cfg.nms_threshold = T;
    cfg.min_predicted_iou = min_iou;
    std::optional<TriangleMesh> mesh;
    PointCloud cloud;
    if (is_cloud_file(input)) {
        cloud = normalize(io::read_cloud(input).cloud);
    } else {
        const TriangleMesh raw = io::load_mesh(input);
        // Samples and normalizes mesh and cloud with one shared transform.
        auto shape = data::shape_from_mesh(raw, IndexList(static_cast<std::size_t>(raw.face_count()), -1), n_points,
                                           seed, data::Provenance::synthetic, input.stem().string());
        mesh = std::move(shape.mesh);
        cloud = std::move(shape.cloud);
    }
    cloud = data::default_gray(cloud);
    auto result = autoseg::segment_every_part(*model, cloud, cfg);
    if (mesh) result.face_labels = autoseg::assign_face_labels(*mesh, cloud, result.point_labels);
    io::write_file(out, autoseg::to_json(result).dump());
    if (!obj_out.empty()) {
        if (!mesh) throw InvalidArgument("--obj needs a mesh input");
        io::write_obj(obj_out, autoseg::colorize(*mesh, *result.face_labels));
    }
    std::cout << result.masks.size() << " parts" << (result.empty_warning ? " (warning: every candidate was filtered)" : "")
              << '\n';
    return 0;
}

int cmd_annotate(const fs::path& checkpoint, const fs::path& in, const fs::path& out, const fs::path& rule_file,
                 const std::string& scales, std::uint64_t seed) {
    const auto model = load_model(checkpoint);
    annotate::ValidityRule rule;
    if (!rule_file.empty()) rule = annotate::validity_rule_from_json(io::json::parse(io::read_file(rule_file)));
    auto corpus = data::load_dataset(in);
    const auto result = annotate::annotate_corpus(*model, corpus, parse_int_list(scales), rule, seed);
    for (const auto& r : result.reports) std::cout << annotate::to_json(r).dump() << '\n';
    corpus.insert(corpus.end(), result.accepted.begin(), result.accepted.end());
    data::save_dataset(out, corpus);
    return 0;
}

int cmd_eval(const std::string& protocol, const fs::path& checkpoint, const fs::path& dataset, const fs::path& out,
             const fs::path& csv, const std::string& ks, const std::string& ts, int nf, bool hungarian,
             std::uint64_t seed) {
    const auto model = load_model(checkpoint);
    const auto shapes = data::load_dataset(dataset);
    eval::EvalReport report;
    if (protocol == "interactive") {
        report = eval::eval_interactive(*model, shapes, parse_int_list(ks), seed);
    } else {
        eval::AutoEvalConfig cfg;
        cfg.t_values = parse_real_list(ts);
        cfg.n_prompts = nf;
        cfg.hungarian = hungarian;
        report = eval::eval_auto(*model, shapes, cfg);
    }
    io::write_file(out, eval::to_json(report).dump(2));
    if (!csv.empty()) io::write_file(csv, eval::to_csv(report));
    std::cout << eval::to_csv(report);
    return 0;
}

service::HttpServer* g_server = nullptr;

int cmd_serve(const fs::path& checkpoint, const std::string& host, int port, std::size_t max_cached, int n_points,
              const fs::path& spool) {
    std::shared_ptr<const PromptableModel> model = load_model(checkpoint);
    service::ServiceConfig cfg;
    cfg.max_cached = max_cached;
    cfg.n_points = n_points;
    cfg.spool_dir = spool;
    service::SegmentationService svc(model, cfg);
    service::HttpServer server(svc);
    g_server = &server;
    std::signal(SIGINT, [](int) {
        if (g_server) g_server->stop();
    });
    std::cout << "serving /v1 on " << host << ':' << port << std::endl;
    return server.listen(host, port) ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Promptable 3D part segmentation"};
    app.require_subcommand(1);

    auto* dataset = app.add_subcommand("dataset", "Build and curate part-labeled datasets");
    dataset->require_subcommand(1);
    fs::path ds_out, ds_in;
    int ds_count = 100, ds_min = 3, ds_max = 8, ds_points = 2048;
    std::uint64_t ds_seed = 0;
    bool ds_curate = false;
    auto* gen = dataset->add_subcommand("gen", "Generate synthetic shapes");
    gen->add_option("--out", ds_out, "Output directory")->required();
    gen->add_option("--count", ds_count, "Number of shapes");
    gen->add_option("--seed", ds_seed, "First seed");
    gen->add_option("--min-parts", ds_min);
    gen->add_option("--max-parts", ds_max);
    gen->add_option("--points", ds_points);
    gen->add_flag("--curate", ds_curate, "Apply the part-count and part-share filters");
    auto* curate = dataset->add_subcommand("curate", "Filter an existing dataset");
    curate->add_option("--in", ds_in)->required();
    curate->add_option("--out", ds_out)->required();
    std::vector<std::string> ingest_files;
    auto* ingest = dataset->add_subcommand("ingest", "Mine parts from glTF/GLB scene graphs");
    ingest->add_option("files", ingest_files)->required();
    ingest->add_option("--out", ds_out)->required();
    ingest->add_option("--points", ds_points);
    ingest->add_option("--seed", ds_seed);

    auto* train = app.add_subcommand("train", "Train a model");
    fs::path tr_config, tr_dataset, tr_out;
    bool tr_resume = false;
    train->add_option("--config", tr_config, "key = value config file")->required();
    train->add_option("--dataset", tr_dataset)->required();
    train->add_option("--out", tr_out)->required();
    train->add_flag("--resume", tr_resume, "Continue from OUT/checkpoint.ppm");

    auto* segment = app.add_subcommand("segment", "Segment every part of a mesh or cloud");
    fs::path sg_ckpt, sg_input, sg_out = "segmentation.json", sg_obj;
    Real sg_T = 0.5, sg_min_iou = 0.7;
    int sg_nf = 64, sg_points = 8192;
    std::uint64_t sg_seed = 0;
    segment->add_option("--checkpoint", sg_ckpt)->required();
    segment->add_option("--input", sg_input, "OBJ / glTF / GLB mesh or .ppc cloud")->required();
    segment->add_option("--T", sg_T, "NMS threshold (granularity)");
    segment->add_option("--nf", sg_nf, "Number of FPS prompts");
    segment->add_option("--min-iou", sg_min_iou, "Predicted-IoU filter");
    segment->add_option("--out", sg_out);
    segment->add_option("--obj", sg_obj, "Also write a colored OBJ");
    segment->add_option("--points", sg_points);
    segment->add_option("--seed", sg_seed);

    auto* annot = app.add_subcommand("annotate", "Model-in-the-loop annotation pass");
    fs::path an_ckpt, an_in, an_out, an_rule;
    std::string an_scales = "10,20,30";
    std::uint64_t an_seed = 0;
    annot->add_option("--checkpoint", an_ckpt)->required();
    annot->add_option("--in-corpus", an_in)->required();
    annot->add_option("--out-corpus", an_out)->required();
    annot->add_option("--rule", an_rule, "JSON validity rule");
    annot->add_option("--scales", an_scales, "Cluster counts");
    annot->add_option("--seed", an_seed);

    auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint");
    std::string ev_protocol, ev_ks = "1,3,5,7,10", ev_ts = "0.1,0.3,0.5,0.7";
    fs::path ev_ckpt, ev_dataset, ev_out = "report.json", ev_csv;
    int ev_nf = 64;
    bool ev_hungarian = false;
    std::uint64_t ev_seed = 0;
    ev->add_option("protocol", ev_protocol)->required()->check(CLI::IsMember({"interactive", "auto"}));
    ev->add_option("--checkpoint", ev_ckpt)->required();
    ev->add_option("--dataset", ev_dataset)->required();
    ev->add_option("--out", ev_out);
    ev->add_option("--csv", ev_csv);
    ev->add_option("--ks", ev_ks);
    ev->add_option("--T", ev_ts);
    ev->add_option("--nf", ev_nf);
    ev->add_flag("--hungarian", ev_hungarian, "One-to-one matching");
    ev->add_option("--seed", ev_seed);

    auto* serve = app.add_subcommand("serve", "Run the HTTP service");
    fs::path sv_ckpt, sv_spool;
    std::string sv_host = "127.0.0.1";
    int sv_port = 8080, sv_points = 8192;
    std::size_t sv_cached = 32;
    serve->add_option("--checkpoint", sv_ckpt)->required();
    serve->add_option("--host", sv_host);
    serve->add_option("--port", sv_port);
    serve->add_option("--max-cached", sv_cached);
    serve->add_option("--points", sv_points);
    serve->add_option("--spool", sv_spool);

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed()) return cmd_dataset_gen(ds_out, ds_count, ds_seed, ds_min, ds_max, ds_points, ds_curate);
        if (curate->parsed()) return cmd_dataset_curate(ds_in, ds_out);
        if (ingest->parsed()) return cmd_dataset_ingest(ingest_files, ds_out, ds_points, ds_seed);
        if (train->parsed()) return cmd_train(tr_config, tr_dataset, tr_out, tr_resume);
        if (segment->parsed())
            return cmd_segment(sg_ckpt, sg_input, sg_T, sg_nf, sg_min_iou, sg_out, sg_obj, sg_points, sg_seed);
        if (annot->parsed()) return cmd_annotate(an_ckpt, an_in, an_out, an_rule, an_scales, an_seed);
        if (ev->parsed())
            return cmd_eval(ev_protocol, ev_ckpt, ev_dataset, ev_out, ev_csv, ev_ks, ev_ts, ev_nf, ev_hungarian, ev_seed);
        if (serve->parsed()) return cmd_serve(sv_ckpt, sv_host, sv_port, sv_cached, sv_points, sv_spool);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
