#include "dtk/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include "dtk/errors.hpp"

namespace dtk {

// ---------------------------------------------------------------- optimizer

template <typename T>
void Adam<T>::step(const std::vector<Tensor<T>>& params, const std::vector<std::vector<T>>& grads) {
    if (params.size() != grads.size()) {
        throw ContractError("adam: " + std::to_string(params.size()) + " parameters but " +
                            std::to_string(grads.size()) + " gradients");
    }
    if (m_.empty()) {
        for (const auto& p : params) {
            m_.emplace_back(p.numel(), T(0));
            v_.emplace_back(p.numel(), T(0));
        }
    }
    if (m_.size() != params.size()) throw ContractError("adam: parameter list changed between steps");
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (grads[i].size() != params[i].numel() || m_[i].size() != params[i].numel()) {
            throw ContractError("adam: gradient " + std::to_string(i) + " has " + std::to_string(grads[i].size()) +
                                " values for a parameter of " + std::to_string(params[i].numel()));
        }
    }
    ++t_;
    const double b1 = cfg_.beta1, b2 = cfg_.beta2;
    const double c1 = 1.0 - std::pow(b1, double(t_)), c2 = 1.0 - std::pow(b2, double(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor<T> p = params[i];
        auto w = p.mutable_data();
        auto& m = m_[i];
        auto& v = v_[i];
        for (std::size_t k = 0; k < w.size(); ++k) {
            const double g = double(grads[i][k]);
            m[k] = T(b1 * double(m[k]) + (1 - b1) * g);
            v[k] = T(b2 * double(v[k]) + (1 - b2) * g * g);
            const double mhat = double(m[k]) / c1, vhat = double(v[k]) / c2;
            w[k] = T(double(w[k]) - cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps));
        }
    }
}

template <typename T>
void Adam<T>::step(const std::vector<Tensor<T>>& params) {
    std::vector<std::vector<T>> grads;
    grads.reserve(params.size());
    for (const auto& p : params) {
        if (p.has_grad()) {
            auto g = p.grad();
            grads.emplace_back(g.begin(), g.end());
        } else {
            grads.emplace_back(p.numel(), T(0));
        }
    }
    step(params, grads);
}

template class Adam<float>;
template class Adam<double>;

// ---------------------------------------------------------------- metrics

Metrics compute_metrics(const std::vector<int>& truth, const std::vector<int>& predicted, std::size_t n_classes) {
    if (truth.size() != predicted.size()) throw ContractError("metrics: label and prediction counts differ");
    Metrics m;
    m.n_eval = truth.size();
    m.confusion.assign(n_classes, std::vector<std::size_t>(n_classes, 0));
    for (std::size_t i = 0; i < truth.size(); ++i) {
        if (truth[i] < 0 || std::size_t(truth[i]) >= n_classes || predicted[i] < 0 ||
            std::size_t(predicted[i]) >= n_classes) {
            throw ContractError("metrics: label outside [0, " + std::to_string(n_classes) + ")");
        }
        ++m.confusion[std::size_t(truth[i])][std::size_t(predicted[i])];
    }
    std::size_t diag = 0;
    for (std::size_t c = 0; c < n_classes; ++c) {
        diag += m.confusion[c][c];
        std::size_t support = 0, predicted_c = 0;
        for (std::size_t k = 0; k < n_classes; ++k) {
            support += m.confusion[c][k];
            predicted_c += m.confusion[k][c];
        }
        const double tp = double(m.confusion[c][c]);
        const double p = predicted_c ? tp / double(predicted_c) : 0.0;
        const double r = support ? tp / double(support) : 0.0;
        m.precision.push_back(p);
        m.recall.push_back(r);
        m.f1.push_back(p + r > 0 ? 2 * p * r / (p + r) : 0.0);
    }
    m.accuracy = m.n_eval ? double(diag) / double(m.n_eval) : 0.0;
    double sum = 0;
    for (double f : m.f1) sum += f;
    m.macro_f1 = n_classes ? sum / double(n_classes) : 0.0;
    return m;
}

nlohmann::json to_json(const Metrics& m) {
    return {{"n_eval", m.n_eval},       {"accuracy", m.accuracy}, {"macro_f1", m.macro_f1},
            {"precision", m.precision}, {"recall", m.recall},     {"f1", m.f1},
            {"confusion", m.confusion}};
}

// ---------------------------------------------------------------- config

TrainMode parse_mode(const std::string& name) {
    if (name == "supervised") return TrainMode::supervised;
    if (name == "unsupervised") return TrainMode::unsupervised;
    if (name == "probe") return TrainMode::probe;
    if (name == "fewshot") return TrainMode::fewshot;
    throw ConfigError("unknown mode \"" + name + "\"");
}

std::string to_string(TrainMode m) {
    switch (m) {
        case TrainMode::supervised: return "supervised";
        case TrainMode::unsupervised: return "unsupervised";
        case TrainMode::probe: return "probe";
        case TrainMode::fewshot: return "fewshot";
    }
    return "?";
}

LabelKind parse_label_kind(const std::string& name) {
    if (name == "coarse") return LabelKind::coarse;
    if (name == "fine") return LabelKind::fine;
    throw ConfigError("unknown label set \"" + name + "\" (expected coarse or fine)");
}

std::string to_string(LabelKind k) {
    return k == LabelKind::coarse ? "coarse" : "fine";
}

void TrainConfig::validate() const {
    auto fail = [](const std::string& m) { throw ConfigError(m); };
    if (!(adam.lr > 0)) fail("lr must be positive");
    if (!(adam.beta1 >= 0 && adam.beta1 < 1) || !(adam.beta2 >= 0 && adam.beta2 < 1)) fail("betas must lie in [0, 1)");
    if (!(adam.eps > 0)) fail("eps must be positive");
    if (epochs == 0) fail("epochs must be positive");
    if (batch_size == 0) fail("batch_size must be positive");
    if (split.train <= 0 || split.val < 0 || split.test < 0 ||
        std::abs(split.train + split.val + split.test - 1.0) > 1e-9) {
        fail("split ratios must be non-negative, with a positive train share, and sum to 1");
    }
    loss.validate();
    profile_by_name(profile);
    if (!model_overrides.is_object()) fail("model overrides must be a JSON object");
    if (!(probe_lr > 0)) fail("probe_lr must be positive");
    if (probe_epochs == 0) fail("probe_epochs must be positive");
    for (double q : proportions)
        if (!(q > 0 && q <= 1)) fail("proportions must lie in (0, 1]");
    for (std::size_t k : shots)
        if (k == 0) fail("shots must be positive");
    if (vocab_max != 0 && vocab_max < 3) fail("vocab_max must be 0 or at least 3");
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
    j = {{"mode", to_string(c.mode)},
         {"lr", c.adam.lr},
         {"beta1", c.adam.beta1},
         {"beta2", c.adam.beta2},
         {"eps", c.adam.eps},
         {"epochs", c.epochs},
         {"batch_size", c.batch_size},
         {"seed", c.seed},
         {"split_seed", c.split_seed},
         {"split", {{"train", c.split.train}, {"val", c.split.val}, {"test", c.split.test}}},
         {"variant", to_string(c.variant)},
         {"loss", c.loss},
         {"profile", c.profile},
         {"model", c.model_overrides},
         {"labels", to_string(c.labels)},
         {"vocab_max", c.vocab_max},
         {"probe_lr", c.probe_lr},
         {"probe_epochs", c.probe_epochs},
         {"proportions", c.proportions},
         {"shots", c.shots}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
    if (!j.is_object()) throw ConfigError("config must be a JSON object");
    for (const auto& [key, v] : j.items()) {
        try {
            if (key == "mode") c.mode = parse_mode(v.get<std::string>());
            else if (key == "lr") c.adam.lr = v.get<double>();
            else if (key == "beta1") c.adam.beta1 = v.get<double>();
            else if (key == "beta2") c.adam.beta2 = v.get<double>();
            else if (key == "eps") c.adam.eps = v.get<double>();
            else if (key == "epochs") c.epochs = v.get<std::size_t>();
            else if (key == "batch_size") c.batch_size = v.get<std::size_t>();
            else if (key == "seed") c.seed = v.get<std::uint64_t>();
            else if (key == "split_seed") c.split_seed = v.get<std::uint64_t>();
            else if (key == "split") {
                for (const auto& [k2, r] : v.items()) {
                    if (k2 == "train") c.split.train = r.get<double>();
                    else if (k2 == "val") c.split.val = r.get<double>();
                    else if (k2 == "test") c.split.test = r.get<double>();
                    else throw ConfigError("split: unknown key \"" + k2 + "\"");
                }
            } else if (key == "variant") c.variant = parse_variant(v.get<std::string>());
            else if (key == "loss") from_json(v, c.loss);
            else if (key == "profile") c.profile = v.get<std::string>();
            else if (key == "model") {
                if (!v.is_object()) throw ConfigError("model overrides must be a JSON object");
                c.model_overrides.merge_patch(v);
            } else if (key == "labels") c.labels = parse_label_kind(v.get<std::string>());
            else if (key == "vocab_max") c.vocab_max = v.get<std::size_t>();
            else if (key == "probe_lr") c.probe_lr = v.get<double>();
            else if (key == "probe_epochs") c.probe_epochs = v.get<std::size_t>();
            else if (key == "proportions") c.proportions = v.get<std::vector<double>>();
            else if (key == "shots") c.shots = v.get<std::vector<std::size_t>>();
            else throw ConfigError("unknown config key \"" + key + "\"");
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError("bad value for \"" + key + "\": " + e.what());
        }
    }
}

ModelConfig resolve_model_config(const TrainConfig& cfg, const Dataset& data, std::size_t vocab_size) {
    ModelConfig mc = profile_by_name(cfg.profile);
    from_json(cfg.model_overrides, mc);
    mc.series_length = data.length;
    mc.channels = data.channels;
    mc.n_classes = data.n_classes(cfg.labels);
    mc.variant = cfg.variant;
    if (mc.backbone.vocab_size < vocab_size) mc.backbone.vocab_size = vocab_size;
    mc.validate();
    return mc;
}

// ---------------------------------------------------------------- session

namespace {

template <typename T>
Tensor<T> series_tensor(const Sample& s, const Dataset& data) {
    return Tensor<T>::from({data.length, data.channels}, std::vector<T>(s.x.begin(), s.x.end()));
}

template <typename T>
int argmax(std::span<const T> v) {
    return int(std::max_element(v.begin(), v.end()) - v.begin());
}

}  // namespace

template <typename T>
Session<T>::Session(DualAdapterModel<T> model, const Vocab& vocab, const Dataset& data)
    : model_(std::move(model)), data_(&data) {
    if (data.length != model_.config().series_length || data.channels != model_.config().channels) {
        throw ContractError("dataset series shape [" + std::to_string(data.length) + "x" +
                            std::to_string(data.channels) + "] does not match the model");
    }
    samples_.reserve(data.size());
    caches_.reserve(data.size());
    const std::size_t max_len = model_.config().backbone.max_seq_len;
    for (const auto& s : data.samples) {
        samples_.push_back(model_.encode(vocab.encode(s.text, max_len), series_tensor<T>(s, data)));
        caches_.push_back(model_.frozen_cache(samples_.back()));
    }
}

template <typename T>
std::vector<Tensor<T>> Session<T>::trainable() const {
    std::vector<Tensor<T>> out;
    for (const auto& name : model_.store().trainable_names()) out.push_back(model_.store().get(name));
    return out;
}

template <typename T>
std::vector<std::vector<T>> Session<T>::features(const std::vector<std::size_t>& rows) const {
    NoTapeScope<T> off;
    std::vector<std::vector<T>> out;
    out.reserve(rows.size());
    for (std::size_t r : rows) {
        const auto f = model_.features(forward(r));
        out.emplace_back(f.data().begin(), f.data().end());
    }
    return out;
}

template <typename T>
Metrics Session<T>::evaluate(const std::vector<std::size_t>& rows, LabelKind kind) const {
    const std::size_t width = model_.classifier_bias().numel();
    if (data_->n_classes(kind) != width) {
        throw ContractError("dataset has " + std::to_string(data_->n_classes(kind)) + " " + to_string(kind) +
                            " classes but the classifier has " + std::to_string(width));
    }
    NoTapeScope<T> off;
    std::vector<int> truth, pred;
    for (std::size_t r : rows) {
        const auto logits = model_.logits(model_.features(forward(r)));
        pred.push_back(argmax(logits.data()));
        truth.push_back(data_->label(r, kind));
    }
    return compute_metrics(truth, pred, width);
}

template <typename T>
Tensor<T> Session<T>::supervised_batch_loss(const std::vector<std::size_t>& rows, LabelKind kind,
                                            std::vector<int>* predictions) const {
    std::vector<Tensor<T>> feats;
    std::vector<int> labels;
    for (std::size_t r : rows) {
        feats.push_back(model_.features(forward(r)));
        labels.push_back(data_->label(r, kind));
    }
    const Tensor<T> f = concat_rows(feats);
    if (predictions != nullptr) {
        NoTapeScope<T> off;
        const auto logits = model_.logits(f);
        const std::size_t c = logits.cols();
        for (std::size_t i = 0; i < rows.size(); ++i) predictions->push_back(argmax(logits.data().subspan(i * c, c)));
    }
    return supervised_loss(f, model_.classifier_weight(), model_.classifier_bias(), std::span<const int>(labels));
}

template <typename T>
Tensor<T> Session<T>::unsupervised_batch_loss(const std::vector<std::size_t>& rows, const LossConfig& loss,
                                              std::mt19937_64& rng) const {
    std::vector<Tensor<T>> hs, hs_aug, ht, ht_aug;
    for (std::size_t r : rows) {
        const auto clean = forward(r);
        const Tensor<T> x_aug = augment_series(samples_[r].x, loss.noise_sigma, rng);
        const TextNoise noise{loss.noise_sigma, rng()};
        const auto aug = model_.forward(model_.with_series(samples_[r], x_aug), nullptr, &noise);
        if (clean.h_s.defined()) {
            hs.push_back(clean.h_s);
            hs_aug.push_back(aug.h_s);
        }
        if (clean.h_t.defined()) {
            ht.push_back(clean.h_t);
            ht_aug.push_back(aug.h_t);
        }
    }
    auto stack = [](const std::vector<Tensor<T>>& v) { return v.empty() ? Tensor<T>() : concat_rows(v); };
    return unsup_total(stack(hs), stack(hs_aug), stack(ht), stack(ht_aug), loss, model_.config().variant);
}

template class Session<float>;
template class Session<double>;

template <typename T>
nlohmann::json model_diagnostics(const DualAdapterModel<T>& model) {
    nlohmann::json gates = nlohmann::json::object(), norms = nlohmann::json::object();
    for (const auto& [name, entry] : model.store().entries()) {
        const auto d = entry.value.data();
        double sq = 0;
        bool finite = true;
        for (T v : d) {
            sq += double(v) * double(v);
            finite = finite && std::isfinite(double(v));
        }
        if (name.ends_with(".gate")) gates[name] = double(d[0]);
        if (!entry.frozen) norms[name] = finite ? nlohmann::json(std::sqrt(sq)) : nlohmann::json("non-finite");
    }
    return {{"gates", gates}, {"norms", norms}};
}

template nlohmann::json model_diagnostics(const DualAdapterModel<float>&);
template nlohmann::json model_diagnostics(const DualAdapterModel<double>&);

// ---------------------------------------------------------------- protocols

namespace {

std::vector<std::vector<std::size_t>> batches_of(std::vector<std::size_t> order, std::size_t size,
                                                 std::mt19937_64& rng, bool drop_singletons) {
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<std::vector<std::size_t>> out;
    for (std::size_t i = 0; i < order.size(); i += size) {
        std::vector<std::size_t> b(order.begin() + std::ptrdiff_t(i),
                                   order.begin() + std::ptrdiff_t(std::min(order.size(), i + size)));
        if (drop_singletons && b.size() < 2) continue;
        out.push_back(std::move(b));
    }
    return out;
}

std::vector<std::string> texts_of(const Dataset& data, const std::vector<std::size_t>& rows) {
    std::vector<std::string> out;
    for (std::size_t r : rows) out.push_back(data.samples[r].text);
    return out;
}

[[noreturn]] void numeric_abort(const std::string& what, std::size_t epoch, const DualAdapterModel<float>& model) {
    nlohmann::json report = {{"epoch", epoch}, {"cause", what}, {"diagnostics", model_diagnostics(model)}};
    throw NumericError("training diverged: " + report.dump());
}

std::vector<std::vector<std::uint8_t>> all_bytes(const ParameterStore<float>& store) {
    std::vector<std::vector<std::uint8_t>> out;
    for (const auto& [_, e] : store.entries()) {
        const auto d = e.value.data();
        const auto* p = reinterpret_cast<const std::uint8_t*>(d.data());
        out.emplace_back(p, p + d.size_bytes());
    }
    return out;
}

}  // namespace

TrainResult train(const TrainConfig& cfg, const Dataset& data, const LogSink& sink) {
    cfg.validate();
    if (cfg.mode != TrainMode::supervised && cfg.mode != TrainMode::unsupervised) {
        throw ConfigError("train runs supervised or unsupervised mode, not " + to_string(cfg.mode));
    }
    if (data.empty()) throw ContractError("cannot train on an empty dataset");
    const bool supervised = cfg.mode == TrainMode::supervised;

    TrainResult result;
    result.split = split_indices(data, cfg.split, cfg.split_seed);
    if (result.split.train.empty()) throw ContractError("training split is empty");
    result.vocab = Vocab::build(texts_of(data, result.split.train), cfg.vocab_max);
    result.model_config = resolve_model_config(cfg, data, result.vocab.size());

    Session<float> session(DualAdapterModel<float>(result.model_config, cfg.seed), result.vocab, data);
    auto& model = session.model();
    const auto frozen_before = model.store().frozen_hashes();
    const auto params = session.trainable();
    Adam<float> opt(cfg.adam);
    std::mt19937_64 rng(cfg.seed ^ 0x5eed5eed5eedULL);

    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        double loss_sum = 0;
        std::size_t seen = 0, batches = 0, correct = 0;
        for (const auto& batch : batches_of(result.split.train, cfg.batch_size, rng, !supervised)) {
            float loss_value = 0;
            std::vector<int> pred;
            try {
                Tape<float> tape;
                TapeScope<float> scope(tape);
                const Tensor<float> loss = supervised ? session.supervised_batch_loss(batch, cfg.labels, &pred)
                                                      : session.unsupervised_batch_loss(batch, cfg.loss, rng);
                loss_value = loss.item();
                if (!std::isfinite(loss_value)) numeric_abort("non-finite loss", epoch, model);
                tape.backward(loss);
                opt.step(params);
            } catch (const NumericError& e) {
                if (std::string(e.what()).starts_with("training diverged")) throw;
                numeric_abort(e.what(), epoch, model);
            }
            model.store().zero_grad();
            for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == data.label(batch[i], cfg.labels);
            loss_sum += double(loss_value) * double(batch.size());
            seen += batch.size();
            ++batches;
        }
        nlohmann::json line = {{"epoch", epoch}, {"loss", seen ? loss_sum / double(seen) : 0.0}, {"batches", batches}};
        if (supervised) {
            // Running accuracy: each batch is scored just before its update.
            line["train_accuracy"] = seen ? double(correct) / double(seen) : 0.0;
            if (!result.split.val.empty()) {
                const auto val = session.evaluate(result.split.val, cfg.labels);
                line["val_accuracy"] = val.accuracy;
                line["val_macro_f1"] = val.macro_f1;
            }
        }
        result.log.push_back(line);
        if (sink) sink(line);
    }
    result.steps = opt.steps();

    if (model.store().frozen_hashes() != frozen_before) {
        throw ContractError("a frozen tensor changed during training");
    }
    if (supervised && !result.split.test.empty()) {
        result.test = session.evaluate(result.split.test, cfg.labels);
        nlohmann::json line = to_json(*result.test);
        line["final"] = true;
        line["split"] = "test";
        result.log.push_back(line);
        if (sink) sink(line);
    }
    result.params = model.store();
    return result;
}

std::vector<int> fit_linear_probe(const std::vector<std::vector<float>>& train_x, const std::vector<int>& train_y,
                                  const std::vector<std::vector<float>>& eval_x, std::size_t n_classes, double lr,
                                  std::size_t epochs) {
    if (train_x.empty() || train_x.size() != train_y.size()) throw ContractError("probe: bad training set");
    const std::size_t n = train_x.size(), dim = train_x[0].size();

    // Standardize with training statistics.
    std::vector<double> mean(dim, 0.0), sd(dim, 0.0);
    for (const auto& row : train_x)
        for (std::size_t c = 0; c < dim; ++c) mean[c] += row[c] / double(n);
    for (const auto& row : train_x)
        for (std::size_t c = 0; c < dim; ++c) sd[c] += (row[c] - mean[c]) * (row[c] - mean[c]) / double(n);
    for (double& s : sd) s = std::max(std::sqrt(s), 1e-6);
    auto standardize = [&](const std::vector<std::vector<float>>& rows) {
        std::vector<float> flat;
        flat.reserve(rows.size() * dim);
        for (const auto& row : rows) {
            if (row.size() != dim) throw ContractError("probe: ragged features");
            for (std::size_t c = 0; c < dim; ++c) flat.push_back(float((row[c] - mean[c]) / sd[c]));
        }
        return Tensor<float>::from({rows.size(), dim}, std::move(flat));
    };
    const Tensor<float> x = standardize(train_x);
    Tensor<float> w = Tensor<float>::zeros({dim, n_classes}, true), b = Tensor<float>::zeros({1, n_classes}, true);
    Adam<float> opt(AdamConfig{lr, 0.9, 0.999, 1e-8});
    for (std::size_t e = 0; e < epochs; ++e) {
        Tape<float> tape;
        TapeScope<float> scope(tape);
        tape.backward(supervised_loss(x, w, b, std::span<const int>(train_y)));
        opt.step({w, b});
        w.zero_grad();
        b.zero_grad();
    }
    std::vector<int> pred;
    if (eval_x.empty()) return pred;
    NoTapeScope<float> off;
    const auto logits = linear(standardize(eval_x), w, b);
    for (std::size_t r = 0; r < eval_x.size(); ++r) {
        pred.push_back(argmax(logits.data().subspan(r * n_classes, n_classes)));
    }
    return pred;
}

ProbeReport probe(const TrainConfig& cfg, const ModelConfig& model_config, const Vocab& vocab,
                  const ParameterStore<float>& params, const Dataset& data, const LogSink& sink) {
    cfg.validate();
    if (cfg.mode != TrainMode::probe && cfg.mode != TrainMode::fewshot) {
        throw ConfigError("probe runs probe or fewshot mode, not " + to_string(cfg.mode));
    }
    const bool fewshot = cfg.mode == TrainMode::fewshot;
    const LabelKind kind = fewshot ? LabelKind::fine : cfg.labels;
    const auto split = split_indices(data, cfg.split, cfg.split_seed);

    // Settle every subset before any work so infeasible K fails fast.
    std::vector<std::pair<std::string, std::vector<std::size_t>>> subsets;
    if (fewshot) {
        for (std::size_t k : cfg.shots)
            subsets.emplace_back("K=" + std::to_string(k), kshot_indices(data, split.train, k, cfg.seed, kind));
    } else {
        for (double q : cfg.proportions) {
            std::ostringstream name;
            name << "q=" << q;
            subsets.emplace_back(name.str(), proportion_indices(data, split.train, q, cfg.seed, kind));
        }
    }

    const auto before = all_bytes(params);
    Session<float> session(DualAdapterModel<float>(model_config, params), vocab, data);
    std::vector<std::size_t> all(data.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    const auto feats = session.features(all);

    std::vector<std::vector<float>> test_x;
    std::vector<int> test_y;
    for (std::size_t r : split.test) {
        test_x.push_back(feats[r]);
        test_y.push_back(data.label(r, kind));
    }

    ProbeReport report;
    for (const auto& [name, rows] : subsets) {
        std::vector<std::vector<float>> x;
        std::vector<int> y;
        for (std::size_t r : rows) {
            x.push_back(feats[r]);
            y.push_back(data.label(r, kind));
        }
        const auto pred = fit_linear_probe(x, y, test_x, data.n_classes(kind), cfg.probe_lr, cfg.probe_epochs);
        ProbeResult res{name, rows.size(), compute_metrics(test_y, pred, data.n_classes(kind))};
        nlohmann::json line = to_json(res.test);
        line["setting"] = res.setting;
        line["n_train"] = res.n_train;
        if (sink) sink(line);
        report.results.push_back(std::move(res));
    }
    report.frozen_audit = all_bytes(params) == before;
    return report;
}

Metrics evaluate(const ModelConfig& model_config, const Vocab& vocab, const ParameterStore<float>& params,
                 const Dataset& data, const std::vector<std::size_t>& rows, LabelKind kind) {
    Session<float> session(DualAdapterModel<float>(model_config, params), vocab, data);
    return session.evaluate(rows, kind);
}

void export_embeddings(const ModelConfig& model_config, const Vocab& vocab, const ParameterStore<float>& params,
                       const Dataset& data, const std::filesystem::path& path) {
    Session<float> session(DualAdapterModel<float>(model_config, params), vocab, data);
    std::ofstream out(path);
    if (!out) throw IngestError("cannot write " + path.string());
    const std::size_t D = model_config.backbone.hidden;
    out << "id";
    for (const char* tag : {"h_s", "h_t"})
        for (std::size_t c = 0; c < D; ++c) out << ',' << tag << '_' << c;
    out << '\n';
    NoTapeScope<float> off;
    out.precision(9);
    for (std::size_t i = 0; i < data.size(); ++i) {
        const auto o = session.forward(i);
        out << data.samples[i].id;
        for (const Tensor<float>* h : {&o.h_s, &o.h_t}) {
            for (std::size_t c = 0; c < D; ++c) {
                out << ',';
                if (h->defined()) out << h->data()[c];
            }
        }
        out << '\n';
    }
}

// ---------------------------------------------------------------- gradient check

bool GradCheckReport::pass() const {
    for (const auto& g : groups)
        if (!g.pass) return false;
    for (const auto& [_, v] : frozen_max_abs_grad)
        if (v != 0.0) return false;
    return !groups.empty();
}

nlohmann::json to_json(const GradCheckReport& r) {
    nlohmann::json groups = nlohmann::json::array();
    for (const auto& g : r.groups) {
        groups.push_back({{"path", g.path},
                          {"group", g.group},
                          {"n_params", g.n_params},
                          {"n_checked", g.n_checked},
                          {"max_rel_error", g.max_rel_error},
                          {"pass", g.pass}});
    }
    return {{"pass", r.pass()}, {"tolerance", r.tolerance}, {"groups", groups},
            {"frozen_max_abs_grad", r.frozen_max_abs_grad}};
}

namespace {

ModelConfig gradcheck_model(const GradCheckConfig& cfg) {
    ModelConfig mc;
    if (cfg.profile == "desk") {
        mc = desk_profile();
        mc.backbone.vocab_size = 40;
        mc.n_classes = 3;
        mc.variant = cfg.variant;
        mc.validate();
        return mc;
    }
    if (cfg.profile != "tiny") throw ConfigError("gradcheck profile must be desk or tiny, not " + cfg.profile);
    mc.backbone = BackboneConfig{3, 2, 8, 2, 12, 16, 2, 0.0};
    mc.text_encoder = TextEncoderConfig{1, 8, 2, 2, 0.0};
    mc.adapter_tokens = 2;
    mc.patch = PatchConfig{4, 4};
    mc.conv_widths = {3, 4, 4};
    mc.series_length = 12;
    mc.channels = 2;
    mc.n_classes = 3;
    mc.variant = cfg.variant;
    mc.validate();
    return mc;
}

}  // namespace

GradCheckReport grad_check(const GradCheckConfig& cfg) {
    cfg.loss.validate();
    const ModelConfig mc = gradcheck_model(cfg);
    DualAdapterModel<double> model(mc, cfg.seed);
    std::mt19937_64 rng(cfg.seed + 101);
    std::normal_distribution<double> gauss(0.0, 1.0);
    std::uniform_real_distribution<double> u01(0.0, 1.0);

    // Move every trainable value off its special initial point.
    for (const auto& name : model.store().trainable_names()) {
        Tensor<double> t = model.store().get(name);
        for (double& v : t.mutable_data()) {
            if (name.ends_with(".gate")) {
                v = (u01(rng) < 0.5 ? -1 : 1) * (0.3 + 0.4 * u01(rng));
            } else if (name.ends_with(".tokens") || name.starts_with("classifier.")) {
                v = 0.5 * gauss(rng);
            } else {
                v += 0.05 * gauss(rng);
            }
        }
    }

    std::vector<EncodedSample<double>> samples;
    std::vector<int> labels;
    for (std::size_t i = 0; i < cfg.batch; ++i) {
        std::vector<std::int32_t> ids(3 + rng() % 4);
        for (auto& id : ids) id = std::int32_t(2 + rng() % (mc.backbone.vocab_size - 2));
        std::vector<double> x(mc.series_length * mc.channels);
        for (double& v : x) v = gauss(rng);
        samples.push_back(model.encode(ids, Tensor<double>::from({mc.series_length, mc.channels}, x)));
        labels.push_back(int(rng() % mc.n_classes));
    }
    const std::uint64_t aug_seed = rng();
    // Frozen weights never move below, so their outputs can be reused.
    std::vector<FrozenCache<double>> caches;
    {
        NoTapeScope<double> off;
        for (const auto& s : samples) caches.push_back(model.frozen_cache(s));
    }

    auto supervised = [&] {
        std::vector<Tensor<double>> f;
        for (std::size_t i = 0; i < samples.size(); ++i) f.push_back(model.features(model.forward(samples[i], &caches[i])));
        return supervised_loss(concat_rows(f), model.classifier_weight(), model.classifier_bias(),
                               std::span<const int>(labels));
    };
    auto unsupervised = [&] {
        std::mt19937_64 aug(aug_seed);  // same views on every evaluation
        std::vector<Tensor<double>> hs, hs_aug, ht, ht_aug;
        for (std::size_t i = 0; i < samples.size(); ++i) {
            const auto& s = samples[i];
            const auto clean = model.forward(s, &caches[i]);
            const auto x_aug = augment_series(s.x, cfg.loss.noise_sigma, aug);
            const TextNoise noise{cfg.loss.noise_sigma, aug()};
            const auto view = model.forward(model.with_series(s, x_aug), nullptr, &noise);
            if (clean.h_s.defined()) {
                hs.push_back(clean.h_s);
                hs_aug.push_back(view.h_s);
            }
            if (clean.h_t.defined()) {
                ht.push_back(clean.h_t);
                ht_aug.push_back(view.h_t);
            }
        }
        auto stack = [](const std::vector<Tensor<double>>& v) {
            return v.empty() ? Tensor<double>() : concat_rows(v);
        };
        return unsup_total(stack(hs), stack(hs_aug), stack(ht), stack(ht_aug), cfg.loss, mc.variant);
    };

    GradCheckReport report;
    report.tolerance = cfg.tolerance;
    const auto names = model.store().trainable_names();
    for (const auto& [path, fn] : std::vector<std::pair<std::string, std::function<Tensor<double>()>>>{
             {"supervised", supervised}, {"unsupervised", unsupervised}}) {
        model.store().zero_grad();
        {
            Tape<double> tape;
            TapeScope<double> scope(tape);
            tape.backward(fn());
        }
        double frozen_max = 0;
        for (const auto& [name, e] : model.store().entries()) {
            if (!e.frozen || !e.value.has_grad()) continue;
            for (double g : e.value.grad()) frozen_max = std::max(frozen_max, std::abs(g));
        }
        report.frozen_max_abs_grad[path] = frozen_max;

        // Per group: max |analytic - numeric| over max magnitude of either.
        std::map<std::string, std::array<double, 4>> acc;  // diff, scale, checked, size
        NoTapeScope<double> off;
        for (const auto& name : names) {
            Tensor<double> t = model.store().get(name);
            const std::vector<double> analytic =
                t.has_grad() ? std::vector<double>(t.grad().begin(), t.grad().end()) : std::vector<double>(t.numel());
            auto& a = acc[parameter_group(name)];
            a[3] += double(t.numel());
            std::vector<std::size_t> picks(t.numel());
            std::iota(picks.begin(), picks.end(), std::size_t{0});
            if (cfg.max_per_tensor && picks.size() > cfg.max_per_tensor) {
                std::mt19937_64 pick_rng(cfg.seed ^ std::hash<std::string>{}(name));
                std::shuffle(picks.begin(), picks.end(), pick_rng);
                picks.resize(cfg.max_per_tensor);
            }
            for (std::size_t k : picks) {
                const double saved = t.data()[k];
                t.mutable_data()[k] = saved + cfg.step;
                const double up = fn().item();
                t.mutable_data()[k] = saved - cfg.step;
                const double down = fn().item();
                t.mutable_data()[k] = saved;
                const double numeric = (up - down) / (2 * cfg.step);
                a[0] = std::max(a[0], std::abs(numeric - analytic[k]));
                a[1] = std::max({a[1], std::abs(numeric), std::abs(analytic[k])});
                a[2] += 1;
            }
        }
        for (const auto& [group, a] : acc) {
            GroupCheck g;
            g.path = path;
            g.group = group;
            g.n_params = std::size_t(a[3]);
            g.n_checked = std::size_t(a[2]);
            g.max_rel_error = a[1] > 0 ? a[0] / a[1] : 0.0;
            g.pass = g.max_rel_error < cfg.tolerance;
            report.groups.push_back(g);
        }
    }
    model.store().zero_grad();
    return report;
}

}  // namespace dtk
