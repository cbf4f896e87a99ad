#pragma once

#include <string>
#include <vector>

#include "dtk/backbone.hpp"

namespace dtk {

/// textual-primary (text tokens through the backbone, series as the injected
/// embedding) or temporal-primary (patch tokens through the backbone, text
/// injected).
enum class AdapterKind { text, time };

std::string to_string(AdapterKind kind);

inline constexpr double kAdapterTokenStd = 0.02;

std::string adapter_param_name(AdapterKind kind, std::size_t layer, const char* field);

/// M token tensors [P×D] and M zero gates [1×1], one pair per fusion layer.
/// Layer indices are the 0-based backbone indices L-M .. L-1.
std::vector<ParamSpec> adapter_layout(AdapterKind kind, const BackboneConfig& cfg, std::size_t tokens);

template <typename T>
struct AdapterParams {
    AdapterKind kind = AdapterKind::text;
    std::size_t first_layer = 0;
    std::vector<Tensor<T>> tokens;
    std::vector<Tensor<T>> gates;

    /// Resolves handles from the store; the store keeps ownership.
    static AdapterParams from_store(AdapterKind kind, const BackboneConfig& cfg, const ParameterStore<T>& store);

    std::size_t fusion_layers() const { return tokens.size(); }
    const Tensor<T>& tokens_at(std::size_t layer) const;
    const Tensor<T>& gate_at(std::size_t layer) const;
};

/// T̃ = T + Z, with the 1×D row Z broadcast over all P rows.
template <typename T>
Tensor<T> fuse_tokens(const Tensor<T>& tokens, const Tensor<T>& z);

/// One fusion layer:
///   H̃ = LN1(MHA(H, H)) + H
///   Ĥ = LN1(MHA(H, T̃)) + H          (keys/values from the fused tokens)
///   G = gate·Ĥ + H̃,  out = LN2(MLP(G)) + G
template <typename T>
Tensor<T> multimodal_block_forward(const Backbone<T>& backbone, const Tensor<T>& h_prev, const Tensor<T>& fused,
                                   std::size_t layer, const Tensor<T>& gate);

/// Frozen blocks [0, L-M) applied to the position-encoded input. Depends on
/// no trainable parameter when the input does not, so callers may cache it.
template <typename T>
Tensor<T> frozen_prefix(const Backbone<T>& backbone, const Tensor<T>& h0);

/// Fusion blocks [L-M, L) on the prefix output, with Z fused into every
/// layer's tokens.
template <typename T>
Tensor<T> adapter_forward_from_prefix(const Backbone<T>& backbone, const AdapterParams<T>& adapter,
                                      const Tensor<T>& prefix, const Tensor<T>& z);

/// Full pass: H^L for the position-encoded primary embeddings h0.
template <typename T>
Tensor<T> adapter_forward(const Backbone<T>& backbone, const AdapterParams<T>& adapter, const Tensor<T>& h0,
                          const Tensor<T>& z);

}  // namespace dtk
