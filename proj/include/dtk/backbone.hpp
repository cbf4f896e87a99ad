#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "dtk/config.hpp"
#include "dtk/ops.hpp"

namespace dtk {

enum class Init { normal, zeros, ones };

/// Declarative description of one parameter; layouts are computed without
/// allocating so parameter accounting works at any scale.
struct ParamSpec {
    std::string name;
    Shape shape;
    bool frozen = true;
    Init init = Init::normal;
    double stddev = 0.0;
};

struct ParamCensus {
    std::size_t total = 0;
    std::size_t trainable = 0;
    std::size_t frozen = 0;
    /// Trainable/frozen counts by group (name up to the second dot).
    std::map<std::string, std::pair<std::size_t, std::size_t>> groups;
};

ParamCensus census(const std::vector<ParamSpec>& layout);
std::string parameter_group(const std::string& name);

/// Parameters of `layers` transformer blocks named `{prefix}.layer.{l}.*`.
std::vector<ParamSpec> transformer_layout(const std::string& prefix, const StackConfig& cfg);
/// Backbone blocks plus its token and position tables, all frozen.
std::vector<ParamSpec> backbone_layout(const BackboneConfig& cfg);

/// Named parameter registry with a frozen/trainable flag per entry. Entries
/// are kept in name order, which fixes iteration and serialization order.
template <typename T>
class ParameterStore {
public:
    struct Entry {
        Tensor<T> value;
        bool frozen = true;
    };

    /// Registers and initializes one parameter. Each parameter draws from
    /// its own stream derived from (seed, name), so values do not depend on
    /// which other parameters exist.
    Tensor<T>& add(const ParamSpec& spec, std::uint64_t seed);
    void add_tensor(const std::string& name, Tensor<T> value, bool frozen);
    void add_layout(const std::vector<ParamSpec>& layout, std::uint64_t seed);

    bool contains(const std::string& name) const { return entries_.count(name) != 0; }
    const Tensor<T>& get(const std::string& name) const;
    bool is_frozen(const std::string& name) const;
    const std::map<std::string, Entry>& entries() const { return entries_; }
    std::size_t size() const { return entries_.size(); }

    std::vector<std::string> trainable_names() const;
    ParamCensus census() const;

    void zero_grad();
    /// Copies values (not handles) from `other`; names and shapes must match.
    void assign_from(const ParameterStore& other);
    /// CRC32 of every frozen tensor's bytes, by name.
    std::map<std::string, std::uint32_t> frozen_hashes() const;

private:
    std::map<std::string, Entry> entries_;
};

/// softmax(Q·Kᵀ/√d_k)·V with no masking.
template <typename T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v);

/// A stack of post-LN transformer blocks whose weights live in a store:
///   H̃ = LN1(MHA(H)) + H,  H_out = LN2(MLP(H̃)) + H̃.
/// The handles are resolved once; the store's tensors are shared, not copied.
template <typename T>
class TransformerStack {
public:
    struct LayerWeights {
        Tensor<T> wq, wk, wv, wo;
        Tensor<T> ln1_gamma, ln1_beta, ln2_gamma, ln2_beta;
        Tensor<T> fc1_w, fc1_b, fc2_w, fc2_b;
    };

    TransformerStack(const std::string& prefix, const StackConfig& cfg, const ParameterStore<T>& store);

    const StackConfig& config() const { return cfg_; }
    std::size_t layers() const { return layers_.size(); }
    const LayerWeights& layer(std::size_t l) const;

    /// Multi-head attention with queries from `queries` and keys/values from
    /// `context`, through the layer's projections and output projection.
    Tensor<T> multi_head(const Tensor<T>& queries, const Tensor<T>& context, std::size_t l) const;
    /// LN1(MHA(queries, context)) + residual.
    Tensor<T> attention_sublayer(const Tensor<T>& queries, const Tensor<T>& context, const Tensor<T>& residual,
                                 std::size_t l) const;
    /// LN2(MLP(x)) + x.
    Tensor<T> mlp_sublayer(const Tensor<T>& x, std::size_t l) const;
    Tensor<T> block(const Tensor<T>& h, std::size_t l) const;
    /// Runs blocks [first, last).
    Tensor<T> run(Tensor<T> h, std::size_t first, std::size_t last) const;

private:
    StackConfig cfg_;
    std::vector<LayerWeights> layers_;
};

/// The shared frozen backbone: token table, learned absolute positions and
/// L transformer blocks.
template <typename T>
class Backbone {
public:
    Backbone(const BackboneConfig& cfg, const ParameterStore<T>& store);

    const BackboneConfig& config() const { return cfg_; }
    const TransformerStack<T>& stack() const { return stack_; }
    const Tensor<T>& token_table() const { return wte_; }
    const Tensor<T>& position_table() const { return wpe_; }

    Tensor<T> add_positions(const Tensor<T>& embeddings) const;
    /// Standard (gate-free) block l on H_prev.
    Tensor<T> standard_block_forward(const Tensor<T>& h_prev, std::size_t l) const;
    /// All L blocks without any adapter.
    Tensor<T> forward(const Tensor<T>& h0) const;

private:
    BackboneConfig cfg_;
    TransformerStack<T> stack_;
    Tensor<T> wte_, wpe_;
};

inline constexpr char kCheckpointMagic[4] = {'D', 'T', 'K', '1'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Writes the store; returns the CRC32 recorded in the trailer.
template <typename T>
std::uint32_t save_checkpoint(const ParameterStore<T>& store, const std::filesystem::path& path);

/// Reads a checkpoint, verifying magic, version, structure and CRC. Stored
/// precision is converted to T. `crc_out` receives the verified checksum.
template <typename T>
ParameterStore<T> load_checkpoint(const std::filesystem::path& path, std::uint32_t* crc_out = nullptr);

std::uint32_t crc32_bytes(const void* data, std::size_t size, std::uint32_t seed = 0);

}  // namespace dtk
