// SPDX-License-Identifier: Apache-2.0
//
// The full promptable model (encoder + decoder), the abstract interface that
// simulation, evaluation and annotation code is written against (so scripted
// stubs can stand in for a network), and the checkpoint container.

#pragma once

#include "partprompt/decoder.hpp"
#include "partprompt/io.hpp"

#include <filesystem>
#include <memory>
#include <tuple>

namespace partprompt {

/// Per-shape state produced once and reused by any number of decodes.
struct Encoding {
    virtual ~Encoding() = default;
    PointCloud cloud;
};

class PromptableModel {
public:
    virtual ~PromptableModel() = default;
    virtual std::shared_ptr<const Encoding> encode(const PointCloud& cloud) const = 0;
    /// n_masks predictions for a single prompt, one otherwise.
    virtual std::vector<MaskPrediction> decode(const Encoding& encoding, const PromptSet& prompts) const = 0;
};

struct ModelConfig {
    EncoderConfig encoder;
    DecoderConfig decoder;
    std::uint64_t seed = 0;
};

io::json to_json(const EncoderConfig& c);
io::json to_json(const DecoderConfig& c);
io::json to_json(const ModelConfig& c);
EncoderConfig encoder_config_from_json(const io::json& j);
DecoderConfig decoder_config_from_json(const io::json& j);
ModelConfig model_config_from_json(const io::json& j);

struct ModelEncoding : Encoding {
    TriplaneField field;
    TokenSet tokens;
    DecoderContext context;
};

class Model : public PromptableModel {
public:
    explicit Model(const ModelConfig& cfg);
    Model(const Model&) = delete;
    Model& operator=(const Model&) = delete;

    const ModelConfig& config() const { return cfg_; }

    std::shared_ptr<const Encoding> encode(const PointCloud& cloud) const override;
    std::vector<MaskPrediction> decode(const Encoding& encoding, const PromptSet& prompts) const override;

    Encoder encoder;
    nn::ParamTable decoder_table;
    nn::ParamTable heads_table;
    Decoder decoder;

    /// Checkpoint groups in serialization order.
    std::vector<std::pair<std::string, nn::ParamTable*>> tables();
    std::vector<std::pair<std::string, const nn::ParamTable*>> tables() const;
    /// Tables updated by the optimizer (everything except the frozen branch).
    std::vector<std::pair<std::string, nn::ParamTable*>> trainable_tables();
    Index parameter_count(bool trainable_only) const;

private:
    ModelConfig cfg_;
};

inline constexpr char kCheckpointMagic[8] = {'P', 'P', 'M', 'O', 'D', 'E', 'L', '\0'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Named matrices grouped by table, plus a JSON metadata block.
struct TensorArchive {
    io::json meta = io::json::object();
    std::vector<std::tuple<std::string, std::string, Mat>> entries;  // group, name, value

    void add_table(const std::string& group, const nn::ParamTable& table);
    /// Copies the group's entries into `table` (names and shapes must match).
    void load_table(const std::string& group, nn::ParamTable& table) const;
    bool has_group(const std::string& group) const;
};

void write_archive(const std::filesystem::path& path, const TensorArchive& archive);
TensorArchive read_archive(const std::filesystem::path& path);

/// Archive with every model table and `meta.config` set to the model config.
TensorArchive model_archive(const Model& model);
void save_model(const std::filesystem::path& path, const Model& model, const io::json& extra_meta = {});
std::unique_ptr<Model> model_from_archive(const TensorArchive& archive);
std::unique_ptr<Model> load_model(const std::filesystem::path& path);

}  // namespace partprompt
