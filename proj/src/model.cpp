#include "dtk/model.hpp"

#include "dtk/errors.hpp"

namespace dtk {

namespace {

std::vector<ParamSpec> classifier_layout(const ModelConfig& cfg) {
    return {{"classifier.w", {cfg.backbone.hidden, cfg.n_classes}, false, Init::zeros, 0},
            {"classifier.b", {cfg.n_classes}, false, Init::zeros, 0}};
}

void append(std::vector<ParamSpec>& out, std::vector<ParamSpec> more) {
    out.insert(out.end(), std::make_move_iterator(more.begin()), std::make_move_iterator(more.end()));
}

}  // namespace

std::vector<ParamSpec> model_layout(const ModelConfig& cfg) {
    cfg.validate();
    std::vector<ParamSpec> out = backbone_layout(cfg.backbone);
    if (cfg.uses_text_primary()) {
        append(out, adapter_layout(AdapterKind::text, cfg.backbone, cfg.adapter_tokens));
        append(out, temporal_encoder_layout(cfg));
    }
    if (cfg.uses_temporal_primary()) {
        append(out, adapter_layout(AdapterKind::time, cfg.backbone, cfg.adapter_tokens));
        append(out, patch_embed_layout(cfg));
        append(out, text_encoder_layout(cfg));
    }
    append(out, classifier_layout(cfg));
    return out;
}

std::size_t trainable_parameter_formula(const ModelConfig& cfg) {
    const std::size_t D = cfg.backbone.hidden, M = cfg.backbone.fusion_layers, P = cfg.adapter_tokens;
    const std::size_t adapter = M * P * D + M;
    std::size_t temporal = 0, cin = cfg.channels;
    for (std::size_t width : cfg.conv_widths) {
        temporal += width * cin * cfg.conv_kernel + width;
        temporal += 2 * (width * width * cfg.conv_kernel + width);
        cin = width;
    }
    temporal += cin * D + D;
    const std::size_t text_proj = cfg.text_encoder.hidden * D + D;
    const std::size_t patch = cfg.patch.patch * cfg.channels * D + D;
    std::size_t total = D * cfg.n_classes + cfg.n_classes;
    if (cfg.uses_text_primary()) total += adapter + temporal;
    if (cfg.uses_temporal_primary()) total += adapter + patch + text_proj;
    return total;
}

template <typename T>
DualAdapterModel<T>::DualAdapterModel(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    store_.add_layout(model_layout(cfg_), seed);
    bind();
}

template <typename T>
DualAdapterModel<T>::DualAdapterModel(const ModelConfig& cfg, ParameterStore<T> store) : cfg_(cfg) {
    for (const ParamSpec& spec : model_layout(cfg_)) {
        if (!store.contains(spec.name)) {
            throw FormatError("checkpoint is missing parameter \"" + spec.name + "\"");
        }
        if (store.get(spec.name).shape() != spec.shape) {
            throw FormatError("parameter \"" + spec.name + "\" has shape " + shape_str(store.get(spec.name).shape()) +
                              ", config expects " + shape_str(spec.shape));
        }
        if (store.is_frozen(spec.name) != spec.frozen) {
            throw FormatError("parameter \"" + spec.name + "\" has the wrong frozen flag");
        }
    }
    if (store.size() != model_layout(cfg_).size()) {
        throw FormatError("checkpoint has " + std::to_string(store.size()) + " parameters, config expects " +
                          std::to_string(model_layout(cfg_).size()));
    }
    store_ = std::move(store);
    bind();
}

template <typename T>
void DualAdapterModel<T>::bind() {
    backbone_.emplace(cfg_.backbone, store_);
    if (cfg_.uses_text_primary()) {
        text_adapter_ = AdapterParams<T>::from_store(AdapterKind::text, cfg_.backbone, store_);
        temporal_.emplace(cfg_, store_);
    }
    if (cfg_.uses_temporal_primary()) {
        time_adapter_ = AdapterParams<T>::from_store(AdapterKind::time, cfg_.backbone, store_);
        text_.emplace(cfg_, store_);
        patch_w_ = store_.get("patch_embed.w");
        patch_b_ = store_.get("patch_embed.b");
    }
    cls_w_ = store_.get("classifier.w");
    cls_b_ = store_.get("classifier.b");
}

template <typename T>
EncodedSample<T> DualAdapterModel<T>::encode(const std::vector<std::int32_t>& ids, const Tensor<T>& x) const {
    if (x.rank() != 2 || x.rows() != cfg_.series_length || x.cols() != cfg_.channels) {
        throw ShapeError("series " + shape_str(x.shape()) + " does not match the model's [" +
                         std::to_string(cfg_.series_length) + "x" + std::to_string(cfg_.channels) + "]");
    }
    EncodedSample<T> s;
    s.ids.assign(ids.begin(), ids.begin() + std::min(ids.size(), cfg_.backbone.max_seq_len));
    if (s.ids.empty()) {
        s.ids.push_back(Vocab::kUnk);
    }
    for (std::int32_t id : s.ids) {
        if (id < 0 || static_cast<std::size_t>(id) >= cfg_.backbone.vocab_size) {
            throw ContractError("token id " + std::to_string(id) + " outside vocabulary of " +
                                std::to_string(cfg_.backbone.vocab_size));
        }
    }
    return with_series(s, x);
}

template <typename T>
EncodedSample<T> DualAdapterModel<T>::with_series(const EncodedSample<T>& s, const Tensor<T>& x) const {
    EncodedSample<T> out{s.ids, x, patchify(x, cfg_.patch)};
    return out;
}

template <typename T>
FrozenCache<T> DualAdapterModel<T>::frozen_cache(const EncodedSample<T>& s) const {
    NoTapeScope<T> no_tape;
    FrozenCache<T> c;
    if (cfg_.uses_text_primary()) {
        c.text_prefix = frozen_prefix(*backbone_, embed_text_tokens<T>(s.ids, *backbone_));
    }
    if (cfg_.uses_temporal_primary()) {
        c.text_pooled = text_->pooled(text_->embed(s.ids));
    }
    return c;
}

template <typename T>
AdapterOutputs<T> DualAdapterModel<T>::forward(const EncodedSample<T>& s, const FrozenCache<T>* cache,
                                               const TextNoise* noise) const {
    std::optional<std::mt19937_64> rng;
    if (noise != nullptr && noise->sigma > 0) {
        rng.emplace(noise->seed);
    }
    const Backbone<T>& bb = *backbone_;
    AdapterOutputs<T> out;
    if (cfg_.uses_text_primary()) {
        Tensor<T> prefix;
        if (!rng && cache != nullptr && cache->text_prefix.defined()) {
            prefix = cache->text_prefix;
        } else {
            Tensor<T> e = gather_rows(bb.token_table(), std::span<const std::int32_t>(s.ids));
            if (rng) {
                e = add(e, relative_noise(e, noise->sigma, *rng));
            }
            prefix = frozen_prefix(bb, bb.add_positions(e));
        }
        const Tensor<T> z_s = temporal_->encode(s.x);
        out.h_s = pool(adapter_forward_from_prefix(bb, *text_adapter_, prefix, z_s));
    }
    if (cfg_.uses_temporal_primary()) {
        Tensor<T> pooled;
        if (!rng && cache != nullptr && cache->text_pooled.defined()) {
            pooled = cache->text_pooled;
        } else {
            Tensor<T> e = text_->embed(s.ids);
            if (rng) {
                e = add(e, relative_noise(e, noise->sigma, *rng));
            }
            pooled = text_->pooled(e);
        }
        const Tensor<T> z_t = text_->project(pooled);
        const Tensor<T> h0 = bb.add_positions(linear(s.patches, patch_w_, patch_b_));
        out.h_t = pool(adapter_forward(bb, *time_adapter_, h0, z_t));
    }
    return out;
}

template <typename T>
Tensor<T> DualAdapterModel<T>::features(const AdapterOutputs<T>& out) const {
    if (out.h_s.defined() && out.h_t.defined()) {
        return add(out.h_s, out.h_t);
    }
    return out.h_s.defined() ? out.h_s : out.h_t;
}

template <typename T>
Tensor<T> DualAdapterModel<T>::logits(const Tensor<T>& features) const {
    return linear(features, cls_w_, cls_b_);
}

template class DualAdapterModel<float>;
template class DualAdapterModel<double>;

}  // namespace dtk
