#pragma once

#include <optional>
#include <random>

#include "dtk/adapters.hpp"
#include "dtk/encoders.hpp"
#include "dtk/objectives.hpp"

namespace dtk {

/// Every parameter of a model with this config. Encoders, patch embedding
/// and adapters are registered only when the variant uses them.
std::vector<ParamSpec> model_layout(const ModelConfig& cfg);

/// Closed-form trainable count: M·P·D + M per adapter, plus the encoders,
/// projectors, patch embedding and classifier the variant uses.
std::size_t trainable_parameter_formula(const ModelConfig& cfg);

/// Model-ready form of one sample.
template <typename T>
struct EncodedSample {
    std::vector<std::int32_t> ids;  // already truncated to max_seq_len
    Tensor<T> x;                    // [T×d]
    Tensor<T> patches;              // [T_s × p·d]
};

/// Outputs of the frozen parts that depend only on the text. Valid until
/// the frozen weights change, which they never do.
template <typename T>
struct FrozenCache {
    Tensor<T> text_pooled;  // text encoder before its projector
    Tensor<T> text_prefix;  // backbone blocks [0, L-M) on the text tokens
};

/// Embedding-level corruption of the text modality.
struct TextNoise {
    double sigma = 0;
    std::uint64_t seed = 0;
};

/// Pooled last-layer outputs; a member is undefined when the variant has no
/// such adapter.
template <typename T>
struct AdapterOutputs {
    Tensor<T> h_s;  // textual-primary
    Tensor<T> h_t;  // temporal-primary
};

template <typename T>
class DualAdapterModel {
public:
    /// Fresh model; cfg.backbone.vocab_size must already be set.
    DualAdapterModel(const ModelConfig& cfg, std::uint64_t seed);
    /// Wraps loaded parameters; names and shapes must match the layout.
    DualAdapterModel(const ModelConfig& cfg, ParameterStore<T> store);

    const ModelConfig& config() const { return cfg_; }
    ParameterStore<T>& store() { return store_; }
    const ParameterStore<T>& store() const { return store_; }
    const Backbone<T>& backbone() const { return *backbone_; }
    const AdapterParams<T>& text_adapter() const { return *text_adapter_; }
    const AdapterParams<T>& time_adapter() const { return *time_adapter_; }
    const TemporalEncoder<T>& temporal_encoder() const { return *temporal_; }
    const TextEncoder<T>& text_encoder() const { return *text_; }
    const Tensor<T>& classifier_weight() const { return cls_w_; }
    const Tensor<T>& classifier_bias() const { return cls_b_; }

    EncodedSample<T> encode(const std::vector<std::int32_t>& ids, const Tensor<T>& x) const;
    /// Same sample with a new series (used for augmented views).
    EncodedSample<T> with_series(const EncodedSample<T>& s, const Tensor<T>& x) const;
    FrozenCache<T> frozen_cache(const EncodedSample<T>& s) const;

    /// `cache` may be null. With text noise the cache is bypassed, since the
    /// corrupted embeddings change every frozen output.
    AdapterOutputs<T> forward(const EncodedSample<T>& s, const FrozenCache<T>* cache = nullptr,
                              const TextNoise* noise = nullptr) const;
    /// h_s + h_t, or whichever one the variant has.
    Tensor<T> features(const AdapterOutputs<T>& out) const;
    Tensor<T> logits(const Tensor<T>& features) const;

private:
    void bind();

    ModelConfig cfg_;
    ParameterStore<T> store_;
    std::optional<Backbone<T>> backbone_;
    std::optional<AdapterParams<T>> text_adapter_, time_adapter_;
    std::optional<TemporalEncoder<T>> temporal_;
    std::optional<TextEncoder<T>> text_;
    Tensor<T> patch_w_, patch_b_, cls_w_, cls_b_;
};

}  // namespace dtk
