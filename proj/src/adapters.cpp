#include "dtk/adapters.hpp"

#include "dtk/errors.hpp"

namespace dtk {

std::string to_string(AdapterKind kind) {
    return kind == AdapterKind::text ? "text" : "time";
}

std::string adapter_param_name(AdapterKind kind, std::size_t layer, const char* field) {
    return "adapter." + to_string(kind) + ".layer." + std::to_string(layer) + "." + field;
}

std::vector<ParamSpec> adapter_layout(AdapterKind kind, const BackboneConfig& cfg, std::size_t tokens) {
    std::vector<ParamSpec> out;
    for (std::size_t l = cfg.first_fusion_layer(); l < cfg.layers; ++l) {
        out.push_back({adapter_param_name(kind, l, "tokens"), {tokens, cfg.hidden}, false, Init::normal,
                       kAdapterTokenStd});
        out.push_back({adapter_param_name(kind, l, "gate"), {1, 1}, false, Init::zeros, 0});
    }
    return out;
}

template <typename T>
AdapterParams<T> AdapterParams<T>::from_store(AdapterKind kind, const BackboneConfig& cfg,
                                              const ParameterStore<T>& store) {
    AdapterParams p;
    p.kind = kind;
    p.first_layer = cfg.first_fusion_layer();
    for (std::size_t l = p.first_layer; l < cfg.layers; ++l) {
        p.tokens.push_back(store.get(adapter_param_name(kind, l, "tokens")));
        p.gates.push_back(store.get(adapter_param_name(kind, l, "gate")));
    }
    return p;
}

template <typename T>
const Tensor<T>& AdapterParams<T>::tokens_at(std::size_t layer) const {
    if (layer < first_layer || layer - first_layer >= tokens.size()) {
        throw ContractError("layer " + std::to_string(layer) + " is not a fusion layer of the " + to_string(kind) +
                            " adapter");
    }
    return tokens[layer - first_layer];
}

template <typename T>
const Tensor<T>& AdapterParams<T>::gate_at(std::size_t layer) const {
    tokens_at(layer);
    return gates[layer - first_layer];
}

template <typename T>
Tensor<T> fuse_tokens(const Tensor<T>& tokens, const Tensor<T>& z) {
    if (z.rows() != 1 || z.cols() != tokens.cols()) {
        throw ShapeError("fuse_tokens: Z " + shape_str(z.shape()) + " does not match tokens " +
                         shape_str(tokens.shape()));
    }
    return add_row(tokens, z);
}

template <typename T>
Tensor<T> multimodal_block_forward(const Backbone<T>& backbone, const Tensor<T>& h_prev, const Tensor<T>& fused,
                                   std::size_t layer, const Tensor<T>& gate) {
    const BackboneConfig& cfg = backbone.config();
    if (layer < cfg.first_fusion_layer() || layer >= cfg.layers) {
        throw ContractError("layer " + std::to_string(layer) + " is not a fusion layer (fusion layers are " +
                            std::to_string(cfg.first_fusion_layer()) + ".." + std::to_string(cfg.layers - 1) + ")");
    }
    if (gate.numel() != 1) {
        throw ShapeError("gate must be a scalar, got " + shape_str(gate.shape()));
    }
    const auto& stack = backbone.stack();
    const Tensor<T> self = stack.attention_sublayer(h_prev, h_prev, h_prev, layer);
    const Tensor<T> cross = stack.attention_sublayer(h_prev, fused, h_prev, layer);
    return stack.mlp_sublayer(add(mul_scalar(cross, gate), self), layer);
}

template <typename T>
Tensor<T> frozen_prefix(const Backbone<T>& backbone, const Tensor<T>& h0) {
    return backbone.stack().run(h0, 0, backbone.config().first_fusion_layer());
}

template <typename T>
Tensor<T> adapter_forward_from_prefix(const Backbone<T>& backbone, const AdapterParams<T>& adapter,
                                      const Tensor<T>& prefix, const Tensor<T>& z) {
    const BackboneConfig& cfg = backbone.config();
    if (adapter.first_layer != cfg.first_fusion_layer() || adapter.fusion_layers() != cfg.fusion_layers) {
        throw ContractError("adapter has " + std::to_string(adapter.fusion_layers()) +
                            " fusion layers but the backbone expects " + std::to_string(cfg.fusion_layers));
    }
    Tensor<T> h = prefix;
    for (std::size_t l = cfg.first_fusion_layer(); l < cfg.layers; ++l) {
        h = multimodal_block_forward(backbone, h, fuse_tokens(adapter.tokens_at(l), z), l, adapter.gate_at(l));
    }
    return h;
}

template <typename T>
Tensor<T> adapter_forward(const Backbone<T>& backbone, const AdapterParams<T>& adapter, const Tensor<T>& h0,
                          const Tensor<T>& z) {
    if (h0.rows() > backbone.config().max_seq_len) {
        throw ShapeError("sequence of " + std::to_string(h0.rows()) + " tokens exceeds max_seq_len " +
                         std::to_string(backbone.config().max_seq_len));
    }
    return adapter_forward_from_prefix(backbone, adapter, frozen_prefix(backbone, h0), z);
}

#define DTK_INSTANTIATE_ADAPTERS(T)                                                                                   \
    template struct AdapterParams<T>;                                                                                 \
    template Tensor<T> fuse_tokens(const Tensor<T>&, const Tensor<T>&);                                               \
    template Tensor<T> multimodal_block_forward(const Backbone<T>&, const Tensor<T>&, const Tensor<T>&, std::size_t, \
                                                const Tensor<T>&);                                                    \
    template Tensor<T> frozen_prefix(const Backbone<T>&, const Tensor<T>&);                                           \
    template Tensor<T> adapter_forward_from_prefix(const Backbone<T>&, const AdapterParams<T>&, const Tensor<T>&,     \
                                                   const Tensor<T>&);                                                 \
    template Tensor<T> adapter_forward(const Backbone<T>&, const AdapterParams<T>&, const Tensor<T>&,                 \
                                       const Tensor<T>&);

DTK_INSTANTIATE_ADAPTERS(float)
DTK_INSTANTIATE_ADAPTERS(double)

}  // namespace dtk
