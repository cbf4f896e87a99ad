#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "dtk/datasets.hpp"
#include "dtk/model.hpp"

namespace dtk {

// ---------------------------------------------------------------- optimizer

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// Adam with bias correction. State is positional: the i-th tensor passed
/// to step() must be the same parameter on every call.
template <typename T>
class Adam {
public:
    explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

    /// Throws ContractError when the lists disagree in length or a gradient
    /// has the wrong size.
    void step(const std::vector<Tensor<T>>& params, const std::vector<std::vector<T>>& grads);
    /// Uses each tensor's accumulated gradient; a tensor the loss never
    /// reached counts as a zero gradient.
    void step(const std::vector<Tensor<T>>& params);

    std::size_t steps() const { return t_; }
    const std::vector<T>& first_moment(std::size_t i) const { return m_.at(i); }
    const std::vector<T>& second_moment(std::size_t i) const { return v_.at(i); }
    const AdamConfig& config() const { return cfg_; }

private:
    AdamConfig cfg_;
    std::size_t t_ = 0;
    std::vector<std::vector<T>> m_, v_;
};

// ---------------------------------------------------------------- metrics

struct Metrics {
    std::size_t n_eval = 0;
    double accuracy = 0;
    double macro_f1 = 0;
    std::vector<double> precision, recall, f1;
    std::vector<std::vector<std::size_t>> confusion;  // [true][predicted]
};

/// Classes with no support or no predictions score 0 on the undefined ratio.
Metrics compute_metrics(const std::vector<int>& truth, const std::vector<int>& predicted, std::size_t n_classes);
nlohmann::json to_json(const Metrics& m);

// ---------------------------------------------------------------- config

enum class TrainMode { supervised, unsupervised, probe, fewshot };

TrainMode parse_mode(const std::string& name);
std::string to_string(TrainMode m);
LabelKind parse_label_kind(const std::string& name);
std::string to_string(LabelKind k);

struct TrainConfig {
    TrainMode mode = TrainMode::supervised;
    AdamConfig adam;
    std::size_t epochs = 30;
    std::size_t batch_size = 32;
    std::uint64_t seed = 0;
    std::uint64_t split_seed = 3;
    SplitRatios split;
    Variant variant = Variant::dual;
    LossConfig loss;
    std::string profile = "desk";
    /// Partial ModelConfig merged over the profile.
    nlohmann::json model_overrides = nlohmann::json::object();
    LabelKind labels = LabelKind::fine;
    std::size_t vocab_max = 2000;
    /// Probe and few-shot classifier training.
    double probe_lr = 1e-2;
    std::size_t probe_epochs = 300;
    std::vector<double> proportions{0.1, 0.2, 0.5, 1.0};
    std::vector<std::size_t> shots{5, 10, 15, 20, 50, 100};

    /// Throws ConfigError.
    void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
/// Merges into the current values; unknown keys are rejected.
void from_json(const nlohmann::json& j, TrainConfig& c);

/// The profile with overrides, data shape, label width, vocabulary size and
/// variant filled in.
ModelConfig resolve_model_config(const TrainConfig& cfg, const Dataset& data, std::size_t vocab_size);

// ---------------------------------------------------------------- session

/// A model bound to an encoded dataset, with frozen outputs precomputed.
template <typename T>
class Session {
public:
    Session(DualAdapterModel<T> model, const Vocab& vocab, const Dataset& data);

    DualAdapterModel<T>& model() { return model_; }
    const DualAdapterModel<T>& model() const { return model_; }
    const Dataset& data() const { return *data_; }
    const EncodedSample<T>& sample(std::size_t i) const { return samples_.at(i); }
    const FrozenCache<T>& cache(std::size_t i) const { return caches_.at(i); }

    std::vector<Tensor<T>> trainable() const;
    AdapterOutputs<T> forward(std::size_t i) const { return model_.forward(samples_[i], &caches_[i]); }
    /// Pooled features of the given rows, no tape. One row per sample.
    std::vector<std::vector<T>> features(const std::vector<std::size_t>& rows) const;
    /// Width check, then argmax of the model's classifier.
    Metrics evaluate(const std::vector<std::size_t>& rows, LabelKind kind) const;

    /// Mean cross-entropy over the batch; tape it to get gradients. The
    /// argmax of each row's logits goes to `predictions` when given.
    Tensor<T> supervised_batch_loss(const std::vector<std::size_t>& rows, LabelKind kind,
                                    std::vector<int>* predictions = nullptr) const;
    /// Contrastive objective on a batch. Only series and text enter; labels
    /// are not reachable from here.
    Tensor<T> unsupervised_batch_loss(const std::vector<std::size_t>& rows, const LossConfig& loss,
                                      std::mt19937_64& rng) const;

private:
    DualAdapterModel<T> model_;
    const Dataset* data_;
    std::vector<EncodedSample<T>> samples_;
    std::vector<FrozenCache<T>> caches_;
};

/// Gate values and parameter norms, for error reports.
template <typename T>
nlohmann::json model_diagnostics(const DualAdapterModel<T>& model);

// ---------------------------------------------------------------- protocols

using LogSink = std::function<void(const nlohmann::json&)>;

struct TrainResult {
    ModelConfig model_config;
    Vocab vocab;
    ParameterStore<float> params;
    SplitIndices split;
    std::vector<nlohmann::json> log;
    /// Test-split metrics for supervised runs.
    std::optional<Metrics> test;
    std::size_t steps = 0;
};

/// Supervised or unsupervised training. Each epoch appends one JSON line to
/// the log and hands it to `sink`. Non-finite values abort with a
/// NumericError carrying the model diagnostics.
TrainResult train(const TrainConfig& cfg, const Dataset& data, const LogSink& sink = {});

/// Trains a zero-initialized linear classifier on fixed features with
/// full-batch Adam and returns the predictions for `eval`.
std::vector<int> fit_linear_probe(const std::vector<std::vector<float>>& train_x, const std::vector<int>& train_y,
                                  const std::vector<std::vector<float>>& eval_x, std::size_t n_classes,
                                  double lr, std::size_t epochs);

struct ProbeResult {
    std::string setting;  // "q=0.1" or "K=5"
    std::size_t n_train = 0;
    Metrics test;
};

struct ProbeReport {
    std::vector<ProbeResult> results;
    /// Frozen tensor hashes before and after were byte-identical.
    bool frozen_audit = false;
};

/// Linear probe over `cfg.proportions` (fine labels) or few-shot transfer over
/// `cfg.shots`, on features of a trained model. All model parameters stay
/// fixed. Few-shot infeasibility raises SubsetError.
ProbeReport probe(const TrainConfig& cfg, const ModelConfig& model_config, const Vocab& vocab,
                  const ParameterStore<float>& params, const Dataset& data, const LogSink& sink = {});

/// Test-split metrics of the model's own classifier.
Metrics evaluate(const ModelConfig& model_config, const Vocab& vocab, const ParameterStore<float>& params,
                 const Dataset& data, const std::vector<std::size_t>& rows, LabelKind kind);

/// One CSV row per sample: id, then h_s and h_t values (empty when absent).
void export_embeddings(const ModelConfig& model_config, const Vocab& vocab, const ParameterStore<float>& params,
                       const Dataset& data, const std::filesystem::path& path);

// ---------------------------------------------------------------- gradient check

struct GroupCheck {
    std::string path;  // "supervised" or "unsupervised"
    std::string group;
    std::size_t n_params = 0;
    std::size_t n_checked = 0;
    double max_rel_error = 0;
    bool pass = false;
};

struct GradCheckReport {
    std::vector<GroupCheck> groups;
    /// Largest |gradient| found on any frozen tensor, per path.
    std::map<std::string, double> frozen_max_abs_grad;
    double tolerance = 1e-5;
    bool pass() const;
};

struct GradCheckConfig {
    /// "desk" (the desk profile's shape) or "tiny" (D=8, L=3, M=2, P=2).
    std::string profile = "desk";
    /// Elements differenced per tensor, drawn at random; 0 checks all. A
    /// full desk check takes about four minutes on one core.
    std::size_t max_per_tensor = 128;
    std::uint64_t seed = 0;
    std::size_t batch = 3;
    double step = 1e-6;
    double tolerance = 1e-5;
    Variant variant = Variant::dual;
    LossConfig loss;
};

/// Double-precision central differences against the tape for the trainable
/// scalars of a freshly built model.
GradCheckReport grad_check(const GradCheckConfig& cfg);
nlohmann::json to_json(const GradCheckReport& r);

}  // namespace dtk
