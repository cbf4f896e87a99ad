#include "dtk/backbone.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <random>

#include <zlib.h>

namespace dtk {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

std::uint64_t fnv1a(const std::string& s) {
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

}  // namespace

std::uint32_t crc32_bytes(const void* data, std::size_t size, std::uint32_t seed) {
    uLong crc = seed;
    const auto* p = static_cast<const Bytef*>(data);
    while (size > 0) {
        const auto chunk = static_cast<uInt>(std::min<std::size_t>(size, 1u << 30));
        crc = ::crc32(crc, p, chunk);
        p += chunk;
        size -= chunk;
    }
    return static_cast<std::uint32_t>(crc);
}

std::string parameter_group(const std::string& name) {
    const auto first = name.find('.');
    if (first == std::string::npos) {
        return name;
    }
    const auto second = name.find('.', first + 1);
    return second == std::string::npos ? name : name.substr(0, second);
}

ParamCensus census(const std::vector<ParamSpec>& layout) {
    ParamCensus c;
    for (const ParamSpec& p : layout) {
        const std::size_t n = shape_numel(p.shape);
        c.total += n;
        auto& group = c.groups[parameter_group(p.name)];
        if (p.frozen) {
            c.frozen += n;
            group.second += n;
        } else {
            c.trainable += n;
            group.first += n;
        }
    }
    return c;
}

std::vector<ParamSpec> transformer_layout(const std::string& prefix, const StackConfig& cfg) {
    const std::size_t d = cfg.hidden, inner = cfg.hidden * cfg.mlp_ratio;
    std::vector<ParamSpec> out;
    for (std::size_t l = 0; l < cfg.layers; ++l) {
        const std::string base = prefix + ".layer." + std::to_string(l) + ".";
        for (const char* w : {"attn.wq", "attn.wk", "attn.wv", "attn.wo"}) {
            out.push_back({base + w, {d, d}, true, Init::normal, cfg.init_std});
        }
        out.push_back({base + "ln1.gamma", {d}, true, Init::ones, 0});
        out.push_back({base + "ln1.beta", {d}, true, Init::zeros, 0});
        out.push_back({base + "mlp.fc1.w", {d, inner}, true, Init::normal, cfg.init_std});
        out.push_back({base + "mlp.fc1.b", {inner}, true, Init::zeros, 0});
        out.push_back({base + "mlp.fc2.w", {inner, d}, true, Init::normal, cfg.init_std});
        out.push_back({base + "mlp.fc2.b", {d}, true, Init::zeros, 0});
        out.push_back({base + "ln2.gamma", {d}, true, Init::ones, 0});
        out.push_back({base + "ln2.beta", {d}, true, Init::zeros, 0});
    }
    return out;
}

std::vector<ParamSpec> backbone_layout(const BackboneConfig& cfg) {
    const StackConfig stack = cfg.stack();
    std::vector<ParamSpec> out = transformer_layout("backbone", stack);
    out.push_back({"backbone.wte", {cfg.vocab_size, cfg.hidden}, true, Init::normal, stack.init_std});
    out.push_back({"backbone.wpe", {cfg.max_seq_len, cfg.hidden}, true, Init::normal, stack.init_std});
    return out;
}

// ---------------------------------------------------------------- store

template <typename T>
Tensor<T>& ParameterStore<T>::add(const ParamSpec& spec, std::uint64_t seed) {
    std::vector<T> values(shape_numel(spec.shape));
    switch (spec.init) {
        case Init::zeros: break;
        case Init::ones: std::fill(values.begin(), values.end(), T(1)); break;
        case Init::normal: {
            std::mt19937_64 rng(splitmix64(seed ^ fnv1a(spec.name)));
            std::normal_distribution<double> dist(0.0, spec.stddev);
            for (T& v : values) {
                v = static_cast<T>(dist(rng));
            }
            break;
        }
    }
    add_tensor(spec.name, Tensor<T>::from(spec.shape, std::move(values)), spec.frozen);
    return entries_.at(spec.name).value;
}

template <typename T>
void ParameterStore<T>::add_tensor(const std::string& name, Tensor<T> value, bool frozen) {
    if (entries_.count(name)) {
        throw ContractError("parameter \"" + name + "\" registered twice");
    }
    value.set_requires_grad(!frozen);
    entries_.emplace(name, Entry{std::move(value), frozen});
}

template <typename T>
void ParameterStore<T>::add_layout(const std::vector<ParamSpec>& layout, std::uint64_t seed) {
    for (const ParamSpec& spec : layout) {
        add(spec, seed);
    }
}

template <typename T>
const Tensor<T>& ParameterStore<T>::get(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) {
        throw ContractError("unknown parameter \"" + name + "\"");
    }
    return it->second.value;
}

template <typename T>
bool ParameterStore<T>::is_frozen(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) {
        throw ContractError("unknown parameter \"" + name + "\"");
    }
    return it->second.frozen;
}

template <typename T>
std::vector<std::string> ParameterStore<T>::trainable_names() const {
    std::vector<std::string> out;
    for (const auto& [name, e] : entries_) {
        if (!e.frozen) {
            out.push_back(name);
        }
    }
    return out;
}

template <typename T>
ParamCensus ParameterStore<T>::census() const {
    std::vector<ParamSpec> layout;
    for (const auto& [name, e] : entries_) {
        layout.push_back({name, e.value.shape(), e.frozen, Init::zeros, 0});
    }
    return dtk::census(layout);
}

template <typename T>
void ParameterStore<T>::zero_grad() {
    for (auto& [_, e] : entries_) {
        e.value.zero_grad();
    }
}

template <typename T>
void ParameterStore<T>::assign_from(const ParameterStore& other) {
    if (other.entries_.size() != entries_.size()) {
        throw FormatError("parameter count mismatch: have " + std::to_string(entries_.size()) + ", got " +
                          std::to_string(other.entries_.size()));
    }
    for (auto& [name, e] : entries_) {
        auto it = other.entries_.find(name);
        if (it == other.entries_.end()) {
            throw FormatError("missing parameter \"" + name + "\"");
        }
        if (it->second.value.shape() != e.value.shape()) {
            throw FormatError("parameter \"" + name + "\" has shape " + shape_str(it->second.value.shape()) +
                              ", expected " + shape_str(e.value.shape()));
        }
        if (it->second.frozen != e.frozen) {
            throw FormatError("parameter \"" + name + "\" frozen flag differs");
        }
        auto src = it->second.value.data();
        std::copy(src.begin(), src.end(), e.value.mutable_data().begin());
    }
}

template <typename T>
std::map<std::string, std::uint32_t> ParameterStore<T>::frozen_hashes() const {
    std::map<std::string, std::uint32_t> out;
    for (const auto& [name, e] : entries_) {
        if (e.frozen) {
            auto d = e.value.data();
            out[name] = crc32_bytes(d.data(), d.size_bytes());
        }
    }
    return out;
}

// ---------------------------------------------------------------- attention

template <typename T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v) {
    if (q.cols() != k.cols()) {
        throw ShapeError("attention: query width " + std::to_string(q.cols()) + " != key width " +
                         std::to_string(k.cols()));
    }
    if (k.rows() != v.rows()) {
        throw ShapeError("attention: " + std::to_string(k.rows()) + " keys but " + std::to_string(v.rows()) +
                         " values");
    }
    const T inv_sqrt = T(1) / std::sqrt(T(q.cols()));
    return matmul(softmax_rows(scale(matmul(q, transpose(k)), inv_sqrt)), v);
}

template <typename T>
TransformerStack<T>::TransformerStack(const std::string& prefix, const StackConfig& cfg,
                                      const ParameterStore<T>& store)
    : cfg_(cfg) {
    cfg_.validate(prefix);
    for (std::size_t l = 0; l < cfg.layers; ++l) {
        const std::string base = prefix + ".layer." + std::to_string(l) + ".";
        auto get = [&](const char* n) { return store.get(base + n); };
        layers_.push_back(LayerWeights{get("attn.wq"), get("attn.wk"), get("attn.wv"), get("attn.wo"),
                                       get("ln1.gamma"), get("ln1.beta"), get("ln2.gamma"), get("ln2.beta"),
                                       get("mlp.fc1.w"), get("mlp.fc1.b"), get("mlp.fc2.w"), get("mlp.fc2.b")});
    }
}

template <typename T>
const typename TransformerStack<T>::LayerWeights& TransformerStack<T>::layer(std::size_t l) const {
    if (l >= layers_.size()) {
        throw ContractError("layer index " + std::to_string(l) + " outside stack of " +
                            std::to_string(layers_.size()));
    }
    return layers_[l];
}

template <typename T>
Tensor<T> TransformerStack<T>::multi_head(const Tensor<T>& queries, const Tensor<T>& context, std::size_t l) const {
    const LayerWeights& w = layer(l);
    if (queries.cols() != cfg_.hidden || context.cols() != cfg_.hidden) {
        throw ShapeError("multi_head: inputs " + shape_str(queries.shape()) + " / " + shape_str(context.shape()) +
                         " do not have width " + std::to_string(cfg_.hidden));
    }
    const Tensor<T> q = matmul(queries, w.wq);
    const Tensor<T> k = matmul(context, w.wk);
    const Tensor<T> v = matmul(context, w.wv);
    const std::size_t dk = cfg_.head_dim();
    std::vector<Tensor<T>> heads;
    heads.reserve(cfg_.heads);
    for (std::size_t h = 0; h < cfg_.heads; ++h) {
        heads.push_back(attention(slice_cols(q, h * dk, dk), slice_cols(k, h * dk, dk), slice_cols(v, h * dk, dk)));
    }
    return matmul(cfg_.heads == 1 ? heads.front() : concat_cols(heads), w.wo);
}

template <typename T>
Tensor<T> TransformerStack<T>::attention_sublayer(const Tensor<T>& queries, const Tensor<T>& context,
                                                  const Tensor<T>& residual, std::size_t l) const {
    const LayerWeights& w = layer(l);
    return add(layer_norm(multi_head(queries, context, l), w.ln1_gamma, w.ln1_beta), residual);
}

template <typename T>
Tensor<T> TransformerStack<T>::mlp_sublayer(const Tensor<T>& x, std::size_t l) const {
    const LayerWeights& w = layer(l);
    const Tensor<T> hidden = gelu(linear(x, w.fc1_w, w.fc1_b));
    return add(layer_norm(linear(hidden, w.fc2_w, w.fc2_b), w.ln2_gamma, w.ln2_beta), x);
}

template <typename T>
Tensor<T> TransformerStack<T>::block(const Tensor<T>& h, std::size_t l) const {
    return mlp_sublayer(attention_sublayer(h, h, h, l), l);
}

template <typename T>
Tensor<T> TransformerStack<T>::run(Tensor<T> h, std::size_t first, std::size_t last) const {
    for (std::size_t l = first; l < last; ++l) {
        h = block(h, l);
    }
    return h;
}

template <typename T>
Backbone<T>::Backbone(const BackboneConfig& cfg, const ParameterStore<T>& store)
    : cfg_(cfg),
      stack_("backbone", cfg.stack(), store),
      wte_(store.get("backbone.wte")),
      wpe_(store.get("backbone.wpe")) {
    cfg_.validate();
}

template <typename T>
Tensor<T> Backbone<T>::add_positions(const Tensor<T>& embeddings) const {
    const std::size_t n = embeddings.rows();
    if (n > cfg_.max_seq_len) {
        throw ShapeError("sequence of " + std::to_string(n) + " tokens exceeds max_seq_len " +
                         std::to_string(cfg_.max_seq_len));
    }
    return add(embeddings, slice_rows(wpe_, 0, n));
}

template <typename T>
Tensor<T> Backbone<T>::standard_block_forward(const Tensor<T>& h_prev, std::size_t l) const {
    return stack_.block(h_prev, l);
}

template <typename T>
Tensor<T> Backbone<T>::forward(const Tensor<T>& h0) const {
    return stack_.run(h0, 0, cfg_.layers);
}

// ---------------------------------------------------------------- checkpoints

namespace {

class Writer {
public:
    template <typename V>
    void put(V value) {
        const auto* p = reinterpret_cast<const char*>(&value);
        bytes_.insert(bytes_.end(), p, p + sizeof(V));
    }
    void put_bytes(const void* data, std::size_t n) {
        const auto* p = static_cast<const char*>(data);
        bytes_.insert(bytes_.end(), p, p + n);
    }
    const std::vector<char>& bytes() const { return bytes_; }

private:
    std::vector<char> bytes_;
};

class Reader {
public:
    Reader(const char* data, std::size_t size) : data_(data), size_(size) {}

    template <typename V>
    V get(const char* what) {
        V v;
        std::memcpy(&v, take(sizeof(V), what), sizeof(V));
        return v;
    }
    const char* take(std::size_t n, const char* what) {
        if (n > size_ - pos_) {
            throw FormatError(std::string("checkpoint truncated while reading ") + what);
        }
        const char* p = data_ + pos_;
        pos_ += n;
        return p;
    }
    bool done() const { return pos_ == size_; }

private:
    const char* data_;
    std::size_t size_;
    std::size_t pos_ = 0;
};

constexpr std::uint8_t kTagF32 = 0;
constexpr std::uint8_t kTagF64 = 1;

template <typename T>
constexpr std::uint8_t dtype_tag() {
    return std::is_same_v<T, float> ? kTagF32 : kTagF64;
}

}  // namespace

template <typename T>
std::uint32_t save_checkpoint(const ParameterStore<T>& store, const std::filesystem::path& path) {
    Writer payload;
    payload.put<std::uint32_t>(static_cast<std::uint32_t>(store.size()));
    for (const auto& [name, e] : store.entries()) {
        auto data = e.value.data();
        check_finite<T>(data, "checkpoint tensor " + name);
        payload.put<std::uint32_t>(static_cast<std::uint32_t>(name.size()));
        payload.put_bytes(name.data(), name.size());
        payload.put<std::uint8_t>(dtype_tag<T>());
        payload.put<std::uint32_t>(static_cast<std::uint32_t>(e.value.rank()));
        for (std::size_t d : e.value.shape()) {
            payload.put<std::uint32_t>(static_cast<std::uint32_t>(d));
        }
        payload.put<std::uint8_t>(e.frozen ? 1 : 0);
        payload.put_bytes(data.data(), data.size_bytes());
    }
    const std::uint32_t crc = crc32_bytes(payload.bytes().data(), payload.bytes().size());

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw FormatError("cannot open " + path.string() + " for writing");
    }
    out.write(kCheckpointMagic, 4);
    const std::uint32_t version = kCheckpointVersion;
    out.write(reinterpret_cast<const char*>(&version), sizeof version);
    out.write(payload.bytes().data(), static_cast<std::streamsize>(payload.bytes().size()));
    out.write(reinterpret_cast<const char*>(&crc), sizeof crc);
    if (!out) {
        throw FormatError("failed writing " + path.string());
    }
    return crc;
}

template <typename T>
ParameterStore<T> load_checkpoint(const std::filesystem::path& path, std::uint32_t* crc_out) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw FormatError("cannot open checkpoint " + path.string());
    }
    const std::vector<char> file((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (file.size() < 12) {
        throw FormatError("checkpoint " + path.string() + " is truncated");
    }
    if (std::memcmp(file.data(), kCheckpointMagic, 4) != 0) {
        throw FormatError("checkpoint " + path.string() + " has a bad magic number");
    }
    std::uint32_t version;
    std::memcpy(&version, file.data() + 4, 4);
    if (version != kCheckpointVersion) {
        throw FormatError("checkpoint version " + std::to_string(version) + " is not supported");
    }
    const char* payload = file.data() + 8;
    const std::size_t payload_size = file.size() - 12;
    std::uint32_t stored_crc;
    std::memcpy(&stored_crc, file.data() + file.size() - 4, 4);
    const std::uint32_t crc = crc32_bytes(payload, payload_size);
    if (crc != stored_crc) {
        throw FormatError("checkpoint CRC mismatch (file corrupt or truncated)");
    }

    Reader r(payload, payload_size);
    ParameterStore<T> store;
    const auto count = r.get<std::uint32_t>("entry count");
    for (std::uint32_t i = 0; i < count; ++i) {
        const auto name_len = r.get<std::uint32_t>("name length");
        const std::string name(r.take(name_len, "name"), name_len);
        const auto tag = r.get<std::uint8_t>("dtype tag");
        if (tag != kTagF32 && tag != kTagF64) {
            throw FormatError("unknown dtype tag " + std::to_string(tag) + " for \"" + name + "\"");
        }
        const auto rank = r.get<std::uint32_t>("rank");
        if (rank == 0 || rank > 8) {
            throw FormatError("implausible rank " + std::to_string(rank) + " for \"" + name + "\"");
        }
        Shape shape;
        for (std::uint32_t k = 0; k < rank; ++k) {
            shape.push_back(r.get<std::uint32_t>("dims"));
        }
        const auto frozen = r.get<std::uint8_t>("frozen flag");
        const std::size_t n = shape_numel(shape);
        std::vector<T> values(n);
        if (tag == kTagF32) {
            const char* raw = r.take(n * sizeof(float), "tensor data");
            for (std::size_t k = 0; k < n; ++k) {
                float v;
                std::memcpy(&v, raw + k * sizeof(float), sizeof v);
                values[k] = static_cast<T>(v);
            }
        } else {
            const char* raw = r.take(n * sizeof(double), "tensor data");
            for (std::size_t k = 0; k < n; ++k) {
                double v;
                std::memcpy(&v, raw + k * sizeof(double), sizeof v);
                values[k] = static_cast<T>(v);
            }
        }
        try {
            store.add_tensor(name, Tensor<T>::from(shape, std::move(values)), frozen != 0);
        } catch (const Error& e) {
            throw FormatError(std::string("invalid checkpoint entry: ") + e.what());
        }
    }
    if (!r.done()) {
        throw FormatError("checkpoint has trailing bytes after " + std::to_string(count) + " entries");
    }
    if (crc_out != nullptr) {
        *crc_out = crc;
    }
    return store;
}

template class ParameterStore<float>;
template class ParameterStore<double>;
template class TransformerStack<float>;
template class TransformerStack<double>;
template class Backbone<float>;
template class Backbone<double>;
template Tensor<float> attention(const Tensor<float>&, const Tensor<float>&, const Tensor<float>&);
template Tensor<double> attention(const Tensor<double>&, const Tensor<double>&, const Tensor<double>&);
template std::uint32_t save_checkpoint(const ParameterStore<float>&, const std::filesystem::path&);
template std::uint32_t save_checkpoint(const ParameterStore<double>&, const std::filesystem::path&);
template ParameterStore<float> load_checkpoint(const std::filesystem::path&, std::uint32_t*);
template ParameterStore<double> load_checkpoint(const std::filesystem::path&, std::uint32_t*);

}  // namespace dtk
