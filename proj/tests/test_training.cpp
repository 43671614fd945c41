// SPDX-License-Identifier: Apache-2.0

#include "support.hpp"

#include <catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

using namespace partprompt;
using namespace partprompt::training;
using namespace partprompt::testing;

namespace {

/// Points on a line: x = i / (n - 1) mapped to [-1, 1].
PointCloud line_cloud(int n) {
    PointCloud c;
    c.positions = Points::Zero(n, 3);
    for (int i = 0; i < n; ++i) c.positions(i, 0) = -1.0 + 2.0 * i / (n - 1);
    c.normals = Points::Zero(n, 3);
    c.normals.col(2).setOnes();
    c.colors = Points::Constant(n, 3, 0.5);
    c.normalized = true;
    return c;
}

PartMask range_mask(int n, int lo, int hi) {
    PartMask m(static_cast<std::size_t>(n), MaskSource::ground_truth);
    for (int i = lo; i < hi; ++i) m.member[static_cast<std::size_t>(i)] = 1;
    return m;
}

/// Three first-round candidates of known quality, each with a chosen predicted IoU.
class FixedCandidatesStub : public PromptableModel {
public:
    FixedCandidatesStub(PartMask gt, std::vector<Real> ious, std::vector<Real> predicted)
        : gt_(std::move(gt)), ious_(std::move(ious)), predicted_(std::move(predicted)) {}
    std::shared_ptr<const Encoding> encode(const PointCloud& cloud) const override { return stub_encoding(cloud); }
    std::vector<MaskPrediction> decode(const Encoding&, const PromptSet& prompts) const override {
        std::vector<MaskPrediction> out;
        if (prompts.size() > 1) {
            out.push_back(prediction_from_mask(gt_, 0.99));
            return out;
        }
        for (std::size_t k = 0; k < ious_.size(); ++k) out.push_back(prediction_from_mask(mask_with_iou(gt_, ious_[k]), predicted_[k]));
        return out;
    }

private:
    PartMask gt_;
    std::vector<Real> ious_, predicted_;
};

std::vector<data::LabeledShape> tiny_dataset(int n, int n_points = 256) {
    std::vector<data::LabeledShape> out;
    data::SyntheticOptions opt;
    opt.n_points = n_points;
    for (int i = 0; i < n; ++i) {
        out.push_back(data::generate_synthetic(500 + i, 3, 4, opt));
        out.back().shape_id = "t" + std::to_string(i);
    }
    return out;
}

TrainConfig tiny_train(int iterations) {
    TrainConfig t;
    t.iterations = iterations;
    t.batch_size = 2;
    t.rounds = 3;
    t.lr = 1e-3;
    t.checkpoint_every = 2;
    t.seed = 3;
    return t;
}

std::vector<Mat> snapshot(const Model& m) {
    std::vector<Mat> out;
    for (const auto& [g, t] : m.tables())
        for (const auto& [n, v] : t->entries()) out.push_back(v.value());
    return out;
}

}  // namespace

TEST_CASE("focal and dice losses on probabilities") {
    const PartMask gt = PartMask::from_indices(4, {0, 1});
    const LossConfig cfg;
    SECTION("a perfect hard prediction has zero dice and near-zero focal") {
        CHECK(dice_loss({1, 1, 0, 0}, gt) == 0.0);
        CHECK(focal_loss({1, 1, 0, 0}, gt, cfg) < 1e-12);
    }
    SECTION("uncertain predictions") {
        const Real want = (2 * 0.25 + 2 * 0.75) * 0.25 * std::log(2.0) / 4;
        CHECK(focal_loss({0.5, 0.5, 0.5, 0.5}, gt, cfg) == Catch::Approx(want));
        CHECK(dice_loss({0.5, 0.5, 0.5, 0.5}, gt) == Catch::Approx(1.0 - 3.0 / 5.0));
    }
    SECTION("a fully wrong prediction is clamped and finite") {
        const Real f = focal_loss({0, 0, 1, 1}, gt, cfg);
        CHECK(std::isfinite(f));
        CHECK(f == Catch::Approx((2 * 0.25 + 2 * 0.75) * -std::log(1e-6) * (1 - 1e-6) * (1 - 1e-6) / 4));
        CHECK(dice_loss({0, 0, 1, 1}, gt) == Catch::Approx(1.0 - 1.0 / 5.0));
    }
}

TEST_CASE("triplet loss") {
    const PointCloud cloud = line_cloud(40);
    TriplaneField flat{ag::constant(Mat::Zero(3 * 8 * 8, 4)), 8, 4, BranchTag::fused};
    const std::vector<PartMask> two{range_mask(40, 0, 20), range_mask(40, 20, 40)};
    SECTION("a constant field pays exactly the margin") {
        const auto r = triplet_loss(flat, two, cloud, 0.7, 32, 1);
        CHECK_FALSE(r.degenerate);
        CHECK(r.loss.item() == Catch::Approx(0.7).epsilon(1e-9));
    }
    SECTION("one usable mask is degenerate") {
        const auto r = triplet_loss(flat, {range_mask(40, 0, 40)}, cloud, 1.0, 32, 1);
        CHECK(r.degenerate);
        CHECK(r.loss.item() == 0.0);
    }
    SECTION("well-separated features pay nothing") {
        // Channel 0 of plane (x, y) is +5 on the left half and -5 on the right (by grid column).
        Mat planes = Mat::Zero(3 * 8 * 8, 4);
        for (int v = 0; v < 8; ++v)
            for (int u = 0; u < 8; ++u) planes(v * 8 + u, 0) = u < 4 ? 5.0 : -5.0;
        const std::vector<PartMask> halves{range_mask(40, 0, 17), range_mask(40, 23, 40)};
        const auto r = triplet_loss({ag::constant(planes), 8, 4, BranchTag::fused}, halves, cloud, 1.0, 64, 2);
        CHECK(r.loss.item() == 0.0);
    }
}

TEST_CASE("first click lands in the central band") {
    const PointCloud cloud = line_cloud(101);
    const PartMask gt = range_mask(101, 20, 61);  // x in [-0.6, 0.2], center at index 40
    const auto d = distance_to_background(gt, cloud);
    const Real hi = *std::max_element(d.begin(), d.end()), lo = *std::min_element(d.begin(), d.end());
    std::set<Index> seen;
    for (std::uint64_t seed = 0; seed < 200; ++seed) {
        const Index i = sample_first_prompt(gt, cloud, seed);
        REQUIRE(gt[static_cast<std::size_t>(i)]);
        const Real di = d[static_cast<std::size_t>(i - 20)];
        CHECK(di >= lo + 2.0 / 3.0 * (hi - lo) - 1e-12);
        seen.insert(i);
    }
    CHECK(seen.size() > 3);
    CHECK(sample_first_prompt(gt, cloud, 5) == sample_first_prompt(gt, cloud, 5));
    // No background: uniform over the mask.
    CHECK(gt.size() == 101);
    const PartMask all = range_mask(101, 0, 101);
    CHECK(all[static_cast<std::size_t>(sample_first_prompt(all, cloud, 1))]);
}

TEST_CASE("next click goes to the deepest error") {
    const PointCloud cloud = line_cloud(101);
    const PartMask gt = range_mask(101, 20, 61);
    SECTION("missed foreground gives a positive click in the miss") {
        const PartMask pred = range_mask(101, 20, 31);
        const auto next = sample_next_prompt(pred, gt, cloud);
        REQUIRE(next);
        CHECK(next->positive);
        CHECK(next->index > 30);
        CHECK(next->index < 61);
        CHECK(std::abs(next->index - 45) <= 1);
    }
    SECTION("a false positive gives a negative click") {
        const PartMask pred = range_mask(101, 20, 91);
        const auto next = sample_next_prompt(pred, gt, cloud);
        REQUIRE(next);
        CHECK_FALSE(next->positive);
        CHECK(std::abs(next->index - 75) <= 1);
    }
    SECTION("a correct prediction ends the simulation") { CHECK_FALSE(sample_next_prompt(gt, gt, cloud)); }
    SECTION("an all-wrong prediction falls back to a positive click inside the part") {
        PartMask inverse = gt;
        for (auto& v : inverse.member) v = !v;
        const auto next = sample_next_prompt(inverse, gt, cloud);
        REQUIRE(next);
        CHECK(next->positive);
        CHECK(gt[static_cast<std::size_t>(next->index)]);
    }
}

TEST_CASE("simulation against scripted models") {
    const data::LabeledShape s = partitioned_shape({60, 60, 80}, 200, 4);
    SECTION("an oracle converges after one click") {
        const PartLookupStub oracle(s.parts);
        const auto enc = oracle.encode(s.cloud);
        const auto trace = simulate_interactive(oracle, *enc, s.parts[1], 10, 0);
        CHECK(trace.converged);
        CHECK(trace.rounds.size() == 1);
        CHECK(trace.iou_at(1) == 1.0);
        CHECK(trace.iou_at(10) == 1.0);
    }
    SECTION("a replayed IoU trace is reported round by round") {
        const std::vector<Real> script{0.5, 0.6, 0.7, 0.75, 0.8, 0.85, 0.9, 0.9, 0.95, 0.95};
        const ScriptedTraceStub stub(s.parts[0], script);
        const auto enc = stub.encode(s.cloud);
        const auto trace = simulate_interactive(stub, *enc, s.parts[0], 10, 0);
        REQUIRE(trace.rounds.size() == 10);
        for (int k = 1; k <= 10; ++k) CHECK(trace.iou_at(k) == Catch::Approx(script[k - 1]).margin(1.0 / 60));
        CHECK(trace.rounds[1].positive);
    }
    SECTION("a model that is always wrong stays at zero") {
        const ComplementStub stub(s.parts[2]);
        const auto enc = stub.encode(s.cloud);
        const auto trace = simulate_interactive(stub, *enc, s.parts[2], 5, 0);
        CHECK(trace.rounds.size() == 5);
        for (const auto& r : trace.rounds) CHECK(r.iou == 0.0);
    }
}

TEST_CASE("first-round selection: lowest loss for training, highest predicted IoU for inference") {
    const data::LabeledShape s = partitioned_shape({60, 60, 80}, 200, 4);
    const FixedCandidatesStub stub(s.parts[0], {0.3, 0.9, 0.6}, {0.9, 0.2, 0.5});
    const auto enc = stub.encode(s.cloud);
    const auto by_loss = simulate_interactive(stub, *enc, s.parts[0], 1, 0, FirstRoundSelection::min_loss);
    CHECK(by_loss.rounds[0].selected == 1);
    CHECK(by_loss.iou_at(1) == Catch::Approx(0.9).margin(0.01));
    const auto by_score = simulate_interactive(stub, *enc, s.parts[0], 1, 0, FirstRoundSelection::predicted_iou);
    CHECK(by_score.rounds[0].selected == 0);
}

TEST_CASE("total loss decomposes into its terms") {
    const PartMask gt = PartMask::from_indices(6, {0, 1, 2});
    Mat logits(6, 3);
    logits << 3, -1, 0.2, 2, -1, 0.1, 1, -2, -0.3, -2, 1, 0.4, -3, 1, -0.1, -1, 2, 0.0;
    Mat iou(1, 3);
    iou << 0.8, 0.1, 0.45;
    const DecodeOutput out{ag::Var(logits, true), ag::Var(iou, true)};
    const ag::Var trip = ag::constant(Mat::Constant(1, 1, 0.4));
    LossConfig cfg;
    cfg.lambda_triplet = 0.5;
    cfg.iou_head_weight = 2.0;
    const LossResult r = total_loss(out, gt, trip, cfg);
    CHECK(r.terms.selected == 0);
    std::vector<Real> p(6);
    for (int i = 0; i < 6; ++i) p[i] = 1 / (1 + std::exp(-logits(i, 0)));
    CHECK(r.terms.focal == Catch::Approx(focal_loss(p, gt, cfg)).epsilon(1e-9));
    CHECK(r.terms.dice == Catch::Approx(dice_loss(p, gt)).epsilon(1e-9));
    // True IoUs of the binarized candidates: 1, 0, 1/2.
    const Real mse = (std::pow(0.8 - 1.0, 2) + std::pow(0.1, 2) + std::pow(0.45 - 0.5, 2)) / 3;
    CHECK(r.terms.iou_head == Catch::Approx(2.0 * mse));
    CHECK(r.terms.triplet == Catch::Approx(0.4));
    CHECK(r.terms.total == Catch::Approx(r.terms.focal + r.terms.dice + r.terms.iou_head + 0.5 * 0.4));
    ag::backward(r.total);
    CHECK(out.logits.grad().col(1).cwiseAbs().maxCoeff() == 0.0);  // unselected masks get no mask gradient
    CHECK(out.iou.grad().cwiseAbs().minCoeff() > 0.0);               // every IoU prediction is supervised
}

TEST_CASE("learning-rate schedule") {
    TrainConfig t;
    t.lr = 1.0;
    t.lr_decay = 0.5;
    t.decay_every = 10;
    CHECK(t.lr_at(1) == 1.0);
    CHECK(t.lr_at(10) == 1.0);
    CHECK(t.lr_at(11) == 0.5);
    CHECK(t.lr_at(31) == 0.125);
    const TrainConfig ref = TrainConfig::reference();
    CHECK(ref.iterations == 250000);
    CHECK(ref.batch_size == 4);
    CHECK(ref.decay_every == 50000);
}

TEST_CASE("AdamW") {
    nn::ParamTable table;
    ag::Var& w = table.add("w", Mat::Constant(1, 2, 1.0));
    w.mutable_grad() = Mat::Constant(1, 2, 0.5);
    std::vector<std::pair<std::string, nn::ParamTable*>> tables{{"g", &table}};
    SECTION("lr 0 leaves parameters unchanged") {
        AdamW opt(0.9, 0.999, 1e-8, 0.1);
        opt.step(tables, 0.0);
        CHECK(w.value() == Mat::Constant(1, 2, 1.0));
    }
    SECTION("the first step moves each coordinate by lr (plus decoupled decay)") {
        AdamW opt(0.9, 0.999, 1e-8, 0.1);
        opt.step(tables, 0.01);
        CHECK(w.value()(0, 0) == Catch::Approx(1.0 - 0.01 * 0.1 - 0.01).epsilon(1e-9));
    }
    SECTION("clipping scales to the requested global norm") {
        const Real norm = clip_gradients(tables, 0.1);
        CHECK(norm == Catch::Approx(std::sqrt(0.5)));
        CHECK(w.grad().norm() == Catch::Approx(0.1));
    }
}

TEST_CASE("training runs, logs metrics and writes a loadable checkpoint") {
    const auto dir = std::filesystem::temp_directory_path() / "pp_train_basic";
    std::filesystem::remove_all(dir);
    const auto ds = tiny_dataset(3);
    std::vector<int> seen;
    TrainOptions opt;
    opt.out_dir = dir;
    opt.on_step = [&](const StepMetrics& m) { seen.push_back(m.iter); };
    const TrainResult r = train(ds, tiny_train(3), LossConfig{}, tiny_model_config(), opt);
    CHECK(r.iterations_done == 3);
    CHECK(seen == std::vector<int>{1, 2, 3});
    CHECK(std::filesystem::exists(dir / kCheckpointFile));
    std::ifstream in(dir / "metrics.jsonl");
    std::string line;
    int lines = 0;
    while (std::getline(in, line)) {
        const auto j = io::json::parse(line);
        for (const char* k : {"iter", "loss_total", "loss_focal", "loss_dice", "loss_triplet", "loss_iou_head", "lr"})
            CHECK(j.contains(k));
        CHECK(std::isfinite(j.at("loss_total").get<Real>()));
        ++lines;
    }
    CHECK(lines == 3);
    const auto loaded = load_model(dir / kCheckpointFile);
    CHECK(snapshot(*loaded) == snapshot(*r.model));
    std::filesystem::remove_all(dir);
}

TEST_CASE("lr 0 training leaves the model at its initialization") {
    TrainConfig t = tiny_train(2);
    t.lr = 0;
    const TrainResult r = train(tiny_dataset(2), t, LossConfig{}, tiny_model_config(8));
    const Model fresh(tiny_model_config(8));
    CHECK(snapshot(*r.model) == snapshot(fresh));
}

TEST_CASE("resuming reproduces an uninterrupted run exactly") {
    const auto a = std::filesystem::temp_directory_path() / "pp_train_a";
    const auto b = std::filesystem::temp_directory_path() / "pp_train_b";
    std::filesystem::remove_all(a);
    std::filesystem::remove_all(b);
    const auto ds = tiny_dataset(3);
    TrainOptions oa;
    oa.out_dir = a;
    const TrainResult full = train(ds, tiny_train(4), LossConfig{}, tiny_model_config(), oa);
    TrainOptions ob;
    ob.out_dir = b;
    train(ds, tiny_train(2), LossConfig{}, tiny_model_config(), ob);
    ob.resume = true;
    const TrainResult resumed = train(ds, tiny_train(4), LossConfig{}, tiny_model_config(), ob);
    CHECK(resumed.iterations_done == 4);
    CHECK(resumed.history.size() == 2);
    CHECK(snapshot(*resumed.model) == snapshot(*full.model));
    std::filesystem::remove_all(a);
    std::filesystem::remove_all(b);
}

TEST_CASE("a non-finite loss aborts and names the last good checkpoint") {
    const auto dir = std::filesystem::temp_directory_path() / "pp_train_nan";
    std::filesystem::remove_all(dir);
    auto ds = tiny_dataset(2);
    TrainOptions opt;
    opt.out_dir = dir;
    TrainConfig t = tiny_train(2);
    train(ds, t, LossConfig{}, tiny_model_config(), opt);
    ds[0].cloud.colors(0, 0) = std::numeric_limits<Real>::quiet_NaN();
    ds[1].cloud.colors(0, 0) = std::numeric_limits<Real>::quiet_NaN();
    opt.resume = true;
    t.iterations = 4;
    try {
        train(ds, t, LossConfig{}, tiny_model_config(), opt);
        FAIL("expected TrainingAborted");
    } catch (const TrainingAborted& e) {
        CHECK(e.last_good_checkpoint() == dir / kCheckpointFile);
        CHECK(read_archive(e.last_good_checkpoint()).meta.at("iter") == 2);
    }
    std::filesystem::remove_all(dir);
}

TEST_CASE("training configuration files") {
    const TrainingSetup s = parse_training_config(
        "# desk run\n"
        "train.iterations = 12\n"
        "train.lr = 2e-4   # comment\n"
        "train.augment = true\n"
        "augment.rotation = full_so3\n"
        "loss.lambda_triplet = 0\n"
        "encoder.resolution = 32\n"
        "decoder.layers = 1\n"
        "model.seed = 9\n");
    CHECK(s.train.iterations == 12);
    CHECK(s.train.lr == 2e-4);
    CHECK(s.train.augment);
    CHECK(s.train.augmentation.rotation == data::RotationMode::full_so3);
    CHECK(s.loss.lambda_triplet == 0.0);
    CHECK(s.model.encoder.resolution == 32);
    CHECK(s.model.decoder.layers == 1);
    CHECK(s.model.seed == 9);
    CHECK_THROWS_AS(parse_training_config("train.bogus = 1\n"), InvalidArgument);
    CHECK_THROWS_AS(parse_training_config("train.iterations = ten\n"), InvalidArgument);
    CHECK_THROWS_AS(parse_training_config("just words\n"), InvalidArgument);
    CHECK_THROWS_AS(parse_training_config("encoder.resolution = 12\n"), InvalidArgument);
}
