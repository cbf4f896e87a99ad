#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <string>

#include <json.hpp>

namespace dtk {

/// Shape of a stack of transformer blocks.
struct StackConfig {
    std::size_t layers = 3;
    std::size_t hidden = 32;
    std::size_t heads = 4;
    std::size_t mlp_ratio = 4;
    double init_std = 0.02;

    std::size_t head_dim() const { return hidden / heads; }
    void validate(const std::string& what) const;
};

struct BackboneConfig {
    std::size_t layers = 3;         // L
    std::size_t fusion_layers = 2;  // M, the topmost blocks that take adaptation tokens
    std::size_t hidden = 32;        // D
    std::size_t heads = 4;
    std::size_t vocab_size = 0;
    std::size_t max_seq_len = 64;
    std::size_t mlp_ratio = 4;
    double init_std = 0.0;  // <= 0 selects default_init_std(hidden)

    StackConfig stack() const;
    void validate() const;
    std::size_t first_fusion_layer() const { return layers - fusion_layers; }
};

/// Frozen text encoder: its own embedding table over the shared vocabulary,
/// no positional table, mean-pooled output.
struct TextEncoderConfig {
    std::size_t layers = 1;
    std::size_t hidden = 32;
    std::size_t heads = 4;
    std::size_t mlp_ratio = 4;
    double init_std = 0.0;

    StackConfig stack() const;
};

struct PatchConfig {
    std::size_t patch = 25;
    std::size_t stride = 25;

    void validate() const;
};

enum class Variant { dual, time_only, text_only };

Variant parse_variant(const std::string& name);
std::string to_string(Variant v);

struct ModelConfig {
    BackboneConfig backbone;
    TextEncoderConfig text_encoder;
    std::size_t adapter_tokens = 4;  // P
    PatchConfig patch;
    std::array<std::size_t, 3> conv_widths{8, 16, 16};
    std::size_t conv_kernel = 3;
    std::size_t series_length = 250;  // T
    std::size_t channels = 2;         // d
    std::size_t n_classes = 2;
    Variant variant = Variant::dual;

    bool uses_text_primary() const { return variant != Variant::time_only; }
    bool uses_temporal_primary() const { return variant != Variant::text_only; }
    std::size_t temporal_tokens() const;
    void validate() const;
};

/// GPT-2's 0.02 at width 768, rescaled so narrower stacks keep the same
/// per-unit signal scale.
double default_init_std(std::size_t hidden);

ModelConfig desk_profile();
ModelConfig paper_shape_profile();
ModelConfig profile_by_name(const std::string& name);

void to_json(nlohmann::json& j, const BackboneConfig& c);
void from_json(const nlohmann::json& j, BackboneConfig& c);
void to_json(nlohmann::json& j, const TextEncoderConfig& c);
void from_json(const nlohmann::json& j, TextEncoderConfig& c);
void to_json(nlohmann::json& j, const PatchConfig& c);
void from_json(const nlohmann::json& j, PatchConfig& c);
void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

}  // namespace dtk
