#include "dtk/config.hpp"

#include <cmath>
#include <set>

#include "dtk/errors.hpp"

namespace dtk {

namespace {

void reject_unknown_keys(const nlohmann::json& j, const std::set<std::string>& allowed, const char* what) {
    if (!j.is_object()) {
        throw ConfigError(std::string(what) + " must be a JSON object");
    }
    for (const auto& [key, _] : j.items()) {
        if (!allowed.count(key)) {
            throw ConfigError(std::string(what) + ": unknown key \"" + key + "\"");
        }
    }
}

template <typename V>
void read(const nlohmann::json& j, const char* key, V& out) {
    if (j.contains(key)) {
        try {
            out = j.at(key).get<V>();
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError(std::string("bad value for \"") + key + "\": " + e.what());
        }
    }
}

}  // namespace

double default_init_std(std::size_t hidden) {
    return 0.02 * std::sqrt(768.0 / double(hidden));
}

void StackConfig::validate(const std::string& what) const {
    if (layers == 0 || hidden == 0 || heads == 0 || mlp_ratio == 0) {
        throw ConfigError(what + ": layer, hidden, head and mlp counts must be positive");
    }
    if (hidden % heads != 0) {
        throw ConfigError(what + ": hidden size " + std::to_string(hidden) + " is not divisible by " +
                          std::to_string(heads) + " heads");
    }
    if (!(init_std > 0)) {
        throw ConfigError(what + ": init_std must be positive");
    }
}

StackConfig BackboneConfig::stack() const {
    return StackConfig{layers, hidden, heads, mlp_ratio, init_std > 0 ? init_std : default_init_std(hidden)};
}

void BackboneConfig::validate() const {
    stack().validate("backbone");
    if (fusion_layers < 1 || fusion_layers > layers) {
        throw ConfigError("backbone: fusion layer count M=" + std::to_string(fusion_layers) +
                          " must satisfy 1 <= M <= L=" + std::to_string(layers));
    }
    if (vocab_size < 2 || max_seq_len == 0) {
        throw ConfigError("backbone: vocab_size must be >= 2 and max_seq_len positive");
    }
}

StackConfig TextEncoderConfig::stack() const {
    return StackConfig{layers, hidden, heads, mlp_ratio, init_std > 0 ? init_std : default_init_std(hidden)};
}

void PatchConfig::validate() const {
    if (patch == 0 || stride == 0) {
        throw ConfigError("patch size and stride must be >= 1");
    }
}

Variant parse_variant(const std::string& name) {
    if (name == "dual") return Variant::dual;
    if (name == "time_only") return Variant::time_only;
    if (name == "text_only") return Variant::text_only;
    throw ConfigError("unknown variant \"" + name + "\" (expected dual, time_only or text_only)");
}

std::string to_string(Variant v) {
    switch (v) {
        case Variant::dual: return "dual";
        case Variant::time_only: return "time_only";
        case Variant::text_only: return "text_only";
    }
    return "dual";
}

std::size_t ModelConfig::temporal_tokens() const {
    if (series_length <= patch.patch) {
        return 1;
    }
    const std::size_t span = series_length - patch.patch;
    return (span + patch.stride - 1) / patch.stride + 1;
}

void ModelConfig::validate() const {
    backbone.validate();
    text_encoder.stack().validate("text_encoder");
    patch.validate();
    if (adapter_tokens == 0) {
        throw ConfigError("adapter_tokens (P) must be >= 1");
    }
    for (std::size_t w : conv_widths) {
        if (w == 0) {
            throw ConfigError("conv widths must be positive");
        }
    }
    if (conv_kernel % 2 == 0) {
        throw ConfigError("conv_kernel must be odd");
    }
    if (series_length == 0 || channels == 0) {
        throw ConfigError("series_length and channels must be positive");
    }
    if (n_classes < 2) {
        throw ConfigError("n_classes must be >= 2");
    }
    if (temporal_tokens() > backbone.max_seq_len) {
        throw ConfigError("series yields " + std::to_string(temporal_tokens()) + " patches, above max_seq_len " +
                          std::to_string(backbone.max_seq_len));
    }
}

ModelConfig desk_profile() {
    ModelConfig c;
    c.backbone = BackboneConfig{3, 2, 32, 4, 0, 64, 4, 0.25};
    c.text_encoder = TextEncoderConfig{1, 32, 4, 4, 0.0};
    c.adapter_tokens = 4;
    c.patch = PatchConfig{10, 10};
    c.conv_widths = {8, 16, 16};
    c.series_length = 120;
    c.channels = 2;
    c.n_classes = 4;
    return c;
}

ModelConfig paper_shape_profile() {
    ModelConfig c;
    // GPT-2 small shape for the backbone, a BERT-base shape for the text encoder.
    c.backbone = BackboneConfig{12, 4, 768, 12, 50257, 1024, 4, 0.02};
    c.text_encoder = TextEncoderConfig{12, 768, 12, 4, 0.02};
    c.adapter_tokens = 10;
    c.patch = PatchConfig{25, 25};
    c.conv_widths = {32, 64, 128};
    c.series_length = 1000;
    c.channels = 12;
    c.n_classes = 5;
    return c;
}

ModelConfig profile_by_name(const std::string& name) {
    if (name == "desk") return desk_profile();
    if (name == "paper_shape") return paper_shape_profile();
    throw ConfigError("unknown profile \"" + name + "\" (expected desk or paper_shape)");
}

void to_json(nlohmann::json& j, const BackboneConfig& c) {
    j = {{"layers", c.layers},         {"fusion_layers", c.fusion_layers}, {"hidden", c.hidden},
         {"heads", c.heads},           {"vocab_size", c.vocab_size},       {"max_seq_len", c.max_seq_len},
         {"mlp_ratio", c.mlp_ratio},   {"init_std", c.stack().init_std}};
}

void from_json(const nlohmann::json& j, BackboneConfig& c) {
    reject_unknown_keys(j, {"layers", "fusion_layers", "hidden", "heads", "vocab_size", "max_seq_len", "mlp_ratio",
                            "init_std"},
                        "backbone");
    read(j, "layers", c.layers);
    read(j, "fusion_layers", c.fusion_layers);
    read(j, "hidden", c.hidden);
    read(j, "heads", c.heads);
    read(j, "vocab_size", c.vocab_size);
    read(j, "max_seq_len", c.max_seq_len);
    read(j, "mlp_ratio", c.mlp_ratio);
    read(j, "init_std", c.init_std);
}

void to_json(nlohmann::json& j, const TextEncoderConfig& c) {
    j = {{"layers", c.layers},
         {"hidden", c.hidden},
         {"heads", c.heads},
         {"mlp_ratio", c.mlp_ratio},
         {"init_std", c.stack().init_std}};
}

void from_json(const nlohmann::json& j, TextEncoderConfig& c) {
    reject_unknown_keys(j, {"layers", "hidden", "heads", "mlp_ratio", "init_std"}, "text_encoder");
    read(j, "layers", c.layers);
    read(j, "hidden", c.hidden);
    read(j, "heads", c.heads);
    read(j, "mlp_ratio", c.mlp_ratio);
    read(j, "init_std", c.init_std);
}

void to_json(nlohmann::json& j, const PatchConfig& c) {
    j = {{"patch", c.patch}, {"stride", c.stride}};
}

void from_json(const nlohmann::json& j, PatchConfig& c) {
    reject_unknown_keys(j, {"patch", "stride"}, "patch");
    read(j, "patch", c.patch);
    read(j, "stride", c.stride);
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
    j = {{"backbone", c.backbone},
         {"text_encoder", c.text_encoder},
         {"adapter_tokens", c.adapter_tokens},
         {"patch", c.patch},
         {"conv_widths", c.conv_widths},
         {"conv_kernel", c.conv_kernel},
         {"series_length", c.series_length},
         {"channels", c.channels},
         {"n_classes", c.n_classes},
         {"variant", to_string(c.variant)}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
    reject_unknown_keys(j, {"backbone", "text_encoder", "adapter_tokens", "patch", "conv_widths", "conv_kernel",
                            "series_length", "channels", "n_classes", "variant"},
                        "model");
    // Nested objects merge into the current values so partial overrides work.
    if (j.contains("backbone")) from_json(j.at("backbone"), c.backbone);
    if (j.contains("text_encoder")) from_json(j.at("text_encoder"), c.text_encoder);
    read(j, "adapter_tokens", c.adapter_tokens);
    if (j.contains("patch")) from_json(j.at("patch"), c.patch);
    read(j, "conv_widths", c.conv_widths);
    read(j, "conv_kernel", c.conv_kernel);
    read(j, "series_length", c.series_length);
    read(j, "channels", c.channels);
    read(j, "n_classes", c.n_classes);
    if (j.contains("variant")) {
        c.variant = parse_variant(j.at("variant").get<std::string>());
    }
}

}  // namespace dtk
