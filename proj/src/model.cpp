// SPDX-License-Identifier: Apache-2.0

#include "partprompt/model.hpp"

#include <cstring>

namespace partprompt {

io::json to_json(const EncoderConfig& c) {
    return {{"resolution", c.resolution},
            {"channels", c.channels},
            {"transformer_layers", c.transformer_layers},
            {"n_patches", c.n_patches},
            {"patch_k", c.patch_k},
            {"extra_attribute_fusion", c.extra_attribute_fusion},
            {"heads", c.heads},
            {"plane_patch", c.plane_patch},
            {"lift_hidden", c.lift_hidden},
            {"fourier_width", c.fourier_width},
            {"fourier_sigma", c.fourier_sigma}};
}

io::json to_json(const DecoderConfig& c) {
    return {{"layers", c.layers},
            {"width", c.width},
            {"n_masks", c.n_masks},
            {"heads", c.heads},
            {"upsample_k", c.upsample_k},
            {"fourier_sigma", c.fourier_sigma}};
}

io::json to_json(const ModelConfig& c) {
    return {{"encoder", to_json(c.encoder)}, {"decoder", to_json(c.decoder)}, {"seed", c.seed}};
}

EncoderConfig encoder_config_from_json(const io::json& j) {
    EncoderConfig c;
    c.resolution = j.value("resolution", c.resolution);
    c.channels = j.value("channels", c.channels);
    c.transformer_layers = j.value("transformer_layers", c.transformer_layers);
    c.n_patches = j.value("n_patches", c.n_patches);
    c.patch_k = j.value("patch_k", c.patch_k);
    c.extra_attribute_fusion = j.value("extra_attribute_fusion", c.extra_attribute_fusion);
    c.heads = j.value("heads", c.heads);
    c.plane_patch = j.value("plane_patch", c.plane_patch);
    c.lift_hidden = j.value("lift_hidden", c.lift_hidden);
    c.fourier_width = j.value("fourier_width", c.fourier_width);
    c.fourier_sigma = j.value("fourier_sigma", c.fourier_sigma);
    return c;
}

DecoderConfig decoder_config_from_json(const io::json& j) {
    DecoderConfig c;
    c.layers = j.value("layers", c.layers);
    c.width = j.value("width", c.width);
    c.n_masks = j.value("n_masks", c.n_masks);
    c.heads = j.value("heads", c.heads);
    c.upsample_k = j.value("upsample_k", c.upsample_k);
    c.fourier_sigma = j.value("fourier_sigma", c.fourier_sigma);
    return c;
}

ModelConfig model_config_from_json(const io::json& j) {
    ModelConfig c;
    c.encoder = encoder_config_from_json(j.at("encoder"));
    c.decoder = decoder_config_from_json(j.at("decoder"));
    c.seed = j.value("seed", std::uint64_t{0});
    return c;
}

namespace {

Rng decoder_rng(std::uint64_t seed) { return Rng(seed ^ 0xdec0de5eedULL); }

}  // namespace

Model::Model(const ModelConfig& cfg)
    : encoder(cfg.encoder, cfg.seed),
      decoder([&] {
          Rng rng = decoder_rng(cfg.seed);
          return Decoder(decoder_table, heads_table, cfg.decoder, cfg.encoder.channels, rng);
      }()),
      cfg_(cfg) {}

std::shared_ptr<const Encoding> Model::encode(const PointCloud& cloud) const {
    ag::NoGradGuard guard;
    auto enc = std::make_shared<ModelEncoding>();
    enc->cloud = cloud;
    enc->field = encoder.encode(cloud);
    enc->tokens = encoder.tokenize(enc->field, cloud);
    enc->context = decoder.prepare(enc->field, enc->tokens, cloud);
    return enc;
}

std::vector<MaskPrediction> Model::decode(const Encoding& encoding, const PromptSet& prompts) const {
    const auto* enc = dynamic_cast<const ModelEncoding*>(&encoding);
    if (!enc) throw InvalidArgument("Model::decode: encoding was not produced by this model type");
    ag::NoGradGuard guard;
    return decoder(enc->context, enc->field, enc->tokens, prompts).predictions();
}

std::vector<std::pair<std::string, nn::ParamTable*>> Model::tables() {
    return {{"frozen_branch", &encoder.frozen_table},
            {"learnable_branch", &encoder.learnable_table},
            {"tokenizer", &encoder.tokenizer_table},
            {"decoder", &decoder_table},
            {"heads", &heads_table}};
}

std::vector<std::pair<std::string, const nn::ParamTable*>> Model::tables() const {
    std::vector<std::pair<std::string, const nn::ParamTable*>> out;
    for (auto& [name, t] : const_cast<Model*>(this)->tables()) out.emplace_back(name, t);
    return out;
}

std::vector<std::pair<std::string, nn::ParamTable*>> Model::trainable_tables() {
    auto all = tables();
    all.erase(all.begin());
    return all;
}

Index Model::parameter_count(bool trainable_only) const {
    Index n = 0;
    for (const auto& [name, t] : tables())
        if (!trainable_only || name != "frozen_branch") n += t->scalar_count();
    return n;
}

void TensorArchive::add_table(const std::string& group, const nn::ParamTable& table) {
    for (const auto& [name, v] : table.entries()) entries.emplace_back(group, name, v.value());
}

bool TensorArchive::has_group(const std::string& group) const {
    for (const auto& e : entries)
        if (std::get<0>(e) == group) return true;
    return false;
}

void TensorArchive::load_table(const std::string& group, nn::ParamTable& table) const {
    std::size_t found = 0;
    for (const auto& [g, name, value] : entries) {
        if (g != group) continue;
        if (!table.contains(name)) throw IngestError("checkpoint: unknown parameter " + group + "/" + name);
        Mat& dst = table.get(name).mutable_value();
        if (dst.rows() != value.rows() || dst.cols() != value.cols())
            throw IngestError("checkpoint: shape mismatch for " + group + "/" + name);
        dst = value;
        ++found;
    }
    if (found != table.size()) throw IngestError("checkpoint: group " + group + " is incomplete");
}

void write_archive(const std::filesystem::path& path, const TensorArchive& archive) {
    io::json header = archive.meta;
    io::json index = io::json::array();
    std::size_t total = 0;
    for (const auto& [g, name, value] : archive.entries) {
        index.push_back({{"group", g}, {"name", name}, {"rows", value.rows()}, {"cols", value.cols()}});
        total += static_cast<std::size_t>(value.size());
    }
    header["tensors"] = index;
    const std::string text = header.dump();
    std::string bytes(kCheckpointMagic, 8);
    auto put_u32 = [&](std::uint32_t v) { bytes.append(reinterpret_cast<const char*>(&v), 4); };
    put_u32(kCheckpointVersion);
    put_u32(static_cast<std::uint32_t>(text.size()));
    bytes += text;
    bytes.reserve(bytes.size() + total * sizeof(Real));
    for (const auto& e : archive.entries) {
        const Mat& v = std::get<2>(e);
        bytes.append(reinterpret_cast<const char*>(v.data()), static_cast<std::size_t>(v.size()) * sizeof(Real));
    }
    // Write-then-rename so an interrupted save never leaves a torn checkpoint.
    const auto tmp = std::filesystem::path(path.string() + ".tmp");
    io::write_file(tmp, bytes);
    std::filesystem::rename(tmp, path);
}

TensorArchive read_archive(const std::filesystem::path& path) {
    const std::string bytes = io::read_file(path);
    if (bytes.size() < 16 || std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0)
        throw IngestError("checkpoint: bad magic in " + path.string(), 0);
    std::uint32_t version, length;
    std::memcpy(&version, bytes.data() + 8, 4);
    std::memcpy(&length, bytes.data() + 12, 4);
    if (version != kCheckpointVersion) throw IngestError("checkpoint: unsupported version", 8);
    if (16 + static_cast<std::size_t>(length) > bytes.size()) throw IngestError("checkpoint: truncated header", 12);
    TensorArchive archive;
    try {
        archive.meta = io::json::parse(bytes.substr(16, length));
    } catch (const io::json::exception& e) {
        throw IngestError(std::string("checkpoint header: ") + e.what(), 16);
    }
    std::size_t offset = 16 + length;
    for (const auto& t : archive.meta.at("tensors")) {
        const Index rows = t.at("rows"), cols = t.at("cols");
        const std::size_t n = static_cast<std::size_t>(rows * cols) * sizeof(Real);
        if (offset + n > bytes.size()) throw IngestError("checkpoint: truncated tensor data", offset);
        Mat m(rows, cols);
        std::memcpy(m.data(), bytes.data() + offset, n);
        offset += n;
        archive.entries.emplace_back(t.at("group").get<std::string>(), t.at("name").get<std::string>(), std::move(m));
    }
    archive.meta.erase("tensors");
    return archive;
}

TensorArchive model_archive(const Model& model) {
    TensorArchive a;
    a.meta["config"] = to_json(model.config());
    for (const auto& [name, t] : model.tables()) a.add_table(name, *t);
    return a;
}

void save_model(const std::filesystem::path& path, const Model& model, const io::json& extra_meta) {
    TensorArchive a = model_archive(model);
    if (extra_meta.is_object())
        for (auto it = extra_meta.begin(); it != extra_meta.end(); ++it) a.meta[it.key()] = it.value();
    write_archive(path, a);
}

std::unique_ptr<Model> model_from_archive(const TensorArchive& archive) {
    auto model = std::make_unique<Model>(model_config_from_json(archive.meta.at("config")));
    for (auto& [name, t] : model->tables()) archive.load_table(name, *t);
    return model;
}

std::unique_ptr<Model> load_model(const std::filesystem::path& path) { return model_from_archive(read_archive(path)); }

}  // namespace partprompt
