#pragma once

#include <filesystem>
#include <string>
#include <unordered_map>
#include <vector>

#include "dtk/backbone.hpp"

namespace dtk {

// ---------------------------------------------------------------- patching

/// ceil((T-p)/s) + 1 windows, or 1 when the series fits in one window.
std::size_t patch_count(std::size_t length, std::size_t patch, std::size_t stride);

/// [T×d] -> [T_s × p·d]. Window j covers timestamps [j·s, j·s+p); overrun is
/// filled with the last timestamp. Each window is flattened time-major.
template <typename T>
Tensor<T> patchify(const Tensor<T>& x, const PatchConfig& cfg);

// ---------------------------------------------------------------- vocabulary

/// Lowercased alphanumeric runs; everything else separates tokens.
std::vector<std::string> tokenize(const std::string& text);

class Vocab {
public:
    static constexpr std::int32_t kPad = 0;
    static constexpr std::int32_t kUnk = 1;

    Vocab();
    /// Ids ordered by descending count, ties by token. `max_size` counts
    /// PAD and UNK; 0 means unlimited.
    static Vocab build(const std::vector<std::string>& corpus, std::size_t max_size = 0);
    static Vocab load(const std::filesystem::path& path);
    void save(const std::filesystem::path& path) const;

    std::size_t size() const { return tokens_.size(); }
    std::int32_t id(const std::string& token) const;
    const std::string& token(std::int32_t id) const;
    /// Token ids truncated to `max_len`; text with no tokens becomes [UNK].
    std::vector<std::int32_t> encode(const std::string& text, std::size_t max_len) const;

private:
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, std::int32_t> index_;
};

// ---------------------------------------------------------------- layouts

std::vector<ParamSpec> temporal_encoder_layout(const ModelConfig& cfg);
/// Frozen table and blocks, trainable projector.
std::vector<ParamSpec> text_encoder_layout(const ModelConfig& cfg);
std::vector<ParamSpec> patch_embed_layout(const ModelConfig& cfg);

// ---------------------------------------------------------------- encoders

/// Three blocks of three same-padded conv1d layers with GELU after each,
/// mean-pooled over time, then a linear projector to D.
template <typename T>
class TemporalEncoder {
public:
    TemporalEncoder(const ModelConfig& cfg, const ParameterStore<T>& store);

    /// x [T×d] -> Z_s [1×D].
    Tensor<T> encode(const Tensor<T>& x) const;

private:
    struct Conv {
        Tensor<T> w, b;
    };
    std::vector<Conv> convs_;
    Tensor<T> proj_w_, proj_b_;
    std::size_t channels_;
};

/// Frozen mini-transformer over its own token table, no positions,
/// mean-pooled; a trainable projector maps the pooled vector to D.
template <typename T>
class TextEncoder {
public:
    TextEncoder(const ModelConfig& cfg, const ParameterStore<T>& store);

    Tensor<T> embed(std::span<const std::int32_t> ids) const;
    /// Frozen pooled features [1×D_text] of already-looked-up embeddings.
    Tensor<T> pooled(const Tensor<T>& embeddings) const;
    Tensor<T> project(const Tensor<T>& pooled) const;
    /// ids -> Z_t [1×D].
    Tensor<T> encode(std::span<const std::int32_t> ids) const;

private:
    Tensor<T> wte_;
    TransformerStack<T> stack_;
    Tensor<T> proj_w_, proj_b_;
};

/// Rows of the backbone token table for `ids`, plus positions.
template <typename T>
Tensor<T> embed_text_tokens(std::span<const std::int32_t> ids, const Backbone<T>& backbone);

}  // namespace dtk
