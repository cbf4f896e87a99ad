#include "dtk/encoders.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <map>

#include "dtk/errors.hpp"

namespace dtk {

std::size_t patch_count(std::size_t length, std::size_t patch, std::size_t stride) {
    if (length == 0 || patch == 0 || stride == 0) {
        throw ShapeError("patch_count: length, patch and stride must be positive");
    }
    if (length <= patch) {
        return 1;
    }
    return (length - patch + stride - 1) / stride + 1;
}

template <typename T>
Tensor<T> patchify(const Tensor<T>& x, const PatchConfig& cfg) {
    if (x.rank() != 2 || x.rows() == 0 || x.cols() == 0) {
        throw ShapeError("patchify expects a non-empty [T×d] series, got " + shape_str(x.shape()));
    }
    cfg.validate();
    const std::size_t len = x.rows(), d = x.cols(), p = cfg.patch, s = cfg.stride;
    const std::size_t n = patch_count(len, p, s);
    const auto src = x.data();
    std::vector<T> out(n * p * d);
    for (std::size_t j = 0; j < n; ++j) {
        for (std::size_t t = 0; t < p; ++t) {
            const std::size_t row = std::min(j * s + t, len - 1);
            std::copy_n(src.begin() + row * d, d, out.begin() + (j * p + t) * d);
        }
    }
    return Tensor<T>::from({n, p * d}, std::move(out));
}

// ---------------------------------------------------------------- vocabulary

std::vector<std::string> tokenize(const std::string& text) {
    std::vector<std::string> out;
    std::string cur;
    for (unsigned char c : text) {
        if (std::isalnum(c)) {
            cur.push_back(static_cast<char>(std::tolower(c)));
        } else if (!cur.empty()) {
            out.push_back(std::move(cur));
            cur.clear();
        }
    }
    if (!cur.empty()) {
        out.push_back(std::move(cur));
    }
    return out;
}

Vocab::Vocab() : tokens_{"<pad>", "<unk>"} {
    index_["<pad>"] = kPad;
    index_["<unk>"] = kUnk;
}

Vocab Vocab::build(const std::vector<std::string>& corpus, std::size_t max_size) {
    std::map<std::string, std::size_t> counts;
    for (const std::string& text : corpus) {
        for (std::string& tok : tokenize(text)) {
            ++counts[std::move(tok)];
        }
    }
    std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
    std::stable_sort(ranked.begin(), ranked.end(),
                     [](const auto& a, const auto& b) { return a.second > b.second; });
    Vocab v;
    for (auto& [tok, _] : ranked) {
        if (max_size != 0 && v.tokens_.size() >= max_size) {
            break;
        }
        v.index_[tok] = static_cast<std::int32_t>(v.tokens_.size());
        v.tokens_.push_back(tok);
    }
    return v;
}

std::int32_t Vocab::id(const std::string& token) const {
    auto it = index_.find(token);
    return it == index_.end() ? kUnk : it->second;
}

const std::string& Vocab::token(std::int32_t id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
        throw ContractError("token id " + std::to_string(id) + " outside vocabulary of " +
                            std::to_string(tokens_.size()));
    }
    return tokens_[static_cast<std::size_t>(id)];
}

std::vector<std::int32_t> Vocab::encode(const std::string& text, std::size_t max_len) const {
    std::vector<std::int32_t> ids;
    for (const std::string& tok : tokenize(text)) {
        if (ids.size() == max_len) {
            break;
        }
        ids.push_back(id(tok));
    }
    if (ids.empty()) {
        ids.push_back(kUnk);
    }
    return ids;
}

void Vocab::save(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::trunc);
    if (!out) {
        throw FormatError("cannot write vocabulary " + path.string());
    }
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
        out << tokens_[i] << '\t' << i << '\n';
    }
}

Vocab Vocab::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw FormatError("cannot open vocabulary " + path.string());
    }
    Vocab v;
    v.tokens_.clear();
    v.index_.clear();
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const auto tab = line.find('\t');
        if (tab == std::string::npos) {
            throw FormatError(path.string() + ":" + std::to_string(line_no) + ": expected token<TAB>id");
        }
        const std::string tok = line.substr(0, tab);
        std::size_t id = 0;
        try {
            id = std::stoul(line.substr(tab + 1));
        } catch (const std::exception&) {
            throw FormatError(path.string() + ":" + std::to_string(line_no) + ": bad id");
        }
        if (id != v.tokens_.size() || v.index_.count(tok)) {
            throw FormatError(path.string() + ":" + std::to_string(line_no) + ": ids must be dense and unique");
        }
        v.index_[tok] = static_cast<std::int32_t>(id);
        v.tokens_.push_back(tok);
    }
    if (v.tokens_.size() < 2 || v.tokens_[kPad] != "<pad>" || v.tokens_[kUnk] != "<unk>") {
        throw FormatError(path.string() + ": vocabulary must start with <pad> and <unk>");
    }
    return v;
}

// ---------------------------------------------------------------- layouts

namespace {

std::string conv_name(std::size_t block, std::size_t layer, const char* field) {
    return "temporal_encoder.block." + std::to_string(block) + ".conv." + std::to_string(layer) + "." + field;
}

}  // namespace

std::vector<ParamSpec> temporal_encoder_layout(const ModelConfig& cfg) {
    std::vector<ParamSpec> out;
    const std::size_t k = cfg.conv_kernel;
    std::size_t cin = cfg.channels;
    for (std::size_t b = 0; b < 3; ++b) {
        const std::size_t cout = cfg.conv_widths[b];
        for (std::size_t c = 0; c < 3; ++c) {
            // He scaling keeps activations from shrinking through nine GELU layers.
            out.push_back({conv_name(b, c, "w"), {cout, cin, k}, false, Init::normal,
                           std::sqrt(2.0 / double(cin * k))});
            out.push_back({conv_name(b, c, "b"), {cout}, false, Init::zeros, 0});
            cin = cout;
        }
    }
    out.push_back({"temporal_encoder.proj.w", {cin, cfg.backbone.hidden}, false, Init::normal,
                   1.0 / std::sqrt(double(cin))});
    out.push_back({"temporal_encoder.proj.b", {cfg.backbone.hidden}, false, Init::zeros, 0});
    return out;
}

std::vector<ParamSpec> text_encoder_layout(const ModelConfig& cfg) {
    const StackConfig stack = cfg.text_encoder.stack();
    std::vector<ParamSpec> out = transformer_layout("text_encoder", stack);
    out.push_back({"text_encoder.wte", {cfg.backbone.vocab_size, stack.hidden}, true, Init::normal, stack.init_std});
    out.push_back({"text_encoder.proj.w", {stack.hidden, cfg.backbone.hidden}, false, Init::normal,
                   1.0 / std::sqrt(double(stack.hidden))});
    out.push_back({"text_encoder.proj.b", {cfg.backbone.hidden}, false, Init::zeros, 0});
    return out;
}

std::vector<ParamSpec> patch_embed_layout(const ModelConfig& cfg) {
    const std::size_t width = cfg.patch.patch * cfg.channels;
    return {{"patch_embed.w", {width, cfg.backbone.hidden}, false, Init::normal, 1.0 / std::sqrt(double(width))},
            {"patch_embed.b", {cfg.backbone.hidden}, false, Init::zeros, 0}};
}

// ---------------------------------------------------------------- encoders

template <typename T>
TemporalEncoder<T>::TemporalEncoder(const ModelConfig& cfg, const ParameterStore<T>& store)
    : proj_w_(store.get("temporal_encoder.proj.w")),
      proj_b_(store.get("temporal_encoder.proj.b")),
      channels_(cfg.channels) {
    for (std::size_t b = 0; b < 3; ++b) {
        for (std::size_t c = 0; c < 3; ++c) {
            convs_.push_back({store.get(conv_name(b, c, "w")), store.get(conv_name(b, c, "b"))});
        }
    }
}

template <typename T>
Tensor<T> TemporalEncoder<T>::encode(const Tensor<T>& x) const {
    if (x.rank() != 2 || x.cols() != channels_ || x.rows() == 0) {
        throw ShapeError("temporal encoder expects [T×" + std::to_string(channels_) + "], got " +
                         shape_str(x.shape()));
    }
    check_finite<T>(x.data(), "temporal encoder input");
    Tensor<T> h = x;
    for (const Conv& conv : convs_) {
        h = gelu(conv1d_same(h, conv.w, conv.b));
    }
    return linear(mean_rows(h), proj_w_, proj_b_);
}

template <typename T>
TextEncoder<T>::TextEncoder(const ModelConfig& cfg, const ParameterStore<T>& store)
    : wte_(store.get("text_encoder.wte")),
      stack_("text_encoder", cfg.text_encoder.stack(), store),
      proj_w_(store.get("text_encoder.proj.w")),
      proj_b_(store.get("text_encoder.proj.b")) {}

template <typename T>
Tensor<T> TextEncoder<T>::embed(std::span<const std::int32_t> ids) const {
    return gather_rows(wte_, ids);
}

template <typename T>
Tensor<T> TextEncoder<T>::pooled(const Tensor<T>& embeddings) const {
    return mean_rows(stack_.run(embeddings, 0, stack_.layers()));
}

template <typename T>
Tensor<T> TextEncoder<T>::project(const Tensor<T>& pooled) const {
    return linear(pooled, proj_w_, proj_b_);
}

template <typename T>
Tensor<T> TextEncoder<T>::encode(std::span<const std::int32_t> ids) const {
    return project(pooled(embed(ids)));
}

template <typename T>
Tensor<T> embed_text_tokens(std::span<const std::int32_t> ids, const Backbone<T>& backbone) {
    const std::size_t n = std::min(ids.size(), backbone.config().max_seq_len);
    return backbone.add_positions(gather_rows(backbone.token_table(), ids.first(n)));
}

template class TemporalEncoder<float>;
template class TemporalEncoder<double>;
template class TextEncoder<float>;
template class TextEncoder<double>;
template Tensor<float> patchify(const Tensor<float>&, const PatchConfig&);
template Tensor<double> patchify(const Tensor<double>&, const PatchConfig&);
template Tensor<float> embed_text_tokens(std::span<const std::int32_t>, const Backbone<float>&);
template Tensor<double> embed_text_tokens(std::span<const std::int32_t>, const Backbone<double>&);

}  // namespace dtk
