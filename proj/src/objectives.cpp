#include "dtk/objectives.hpp"

#include <cmath>

#include "dtk/errors.hpp"

namespace dtk {

void LossConfig::validate() const {
    if (!(tau > 0) || !std::isfinite(tau)) {
        throw ConfigError("tau must be positive");
    }
    if (!(noise_sigma >= 0) || !std::isfinite(noise_sigma)) {
        throw ConfigError("noise_sigma must be non-negative");
    }
}

void to_json(nlohmann::json& j, const LossConfig& c) {
    j = {{"tau", c.tau}, {"noise_sigma", c.noise_sigma}, {"standard_infonce", c.standard_infonce}};
}

void from_json(const nlohmann::json& j, LossConfig& c) {
    if (!j.is_object()) {
        throw ConfigError("loss must be a JSON object");
    }
    for (const auto& [key, value] : j.items()) {
        try {
            if (key == "tau") {
                c.tau = value.get<double>();
            } else if (key == "noise_sigma") {
                c.noise_sigma = value.get<double>();
            } else if (key == "standard_infonce") {
                c.standard_infonce = value.get<bool>();
            } else {
                throw ConfigError("loss: unknown key \"" + key + "\"");
            }
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError("loss: bad value for \"" + key + "\": " + e.what());
        }
    }
}

template <typename T>
Tensor<T> pool(const Tensor<T>& h) {
    return mean_rows(h);
}

template <typename T>
Tensor<T> supervised_loss(const Tensor<T>& features, const Tensor<T>& weight, const Tensor<T>& bias,
                          std::span<const int> labels) {
    const T inv = T(1) / T(labels.size());
    return scale(cross_entropy(linear(features, weight, bias), labels), inv);
}

template <typename T>
Tensor<T> supervised_loss(const Tensor<T>& h_s, const Tensor<T>& h_t, const Tensor<T>& weight, const Tensor<T>& bias,
                          int label) {
    const int labels[1] = {label};
    return supervised_loss(add(h_s, h_t), weight, bias, std::span<const int>(labels));
}

template <typename T>
Tensor<T> relative_noise(const Tensor<T>& ref, double sigma, std::mt19937_64& rng) {
    const std::size_t m = ref.rows(), n = ref.cols();
    const auto d = ref.data();
    std::vector<double> stddev(n, 0.0);
    for (std::size_t c = 0; c < n; ++c) {
        double mean = 0, var = 0;
        for (std::size_t r = 0; r < m; ++r) mean += d[r * n + c];
        mean /= double(m);
        for (std::size_t r = 0; r < m; ++r) var += (d[r * n + c] - mean) * (d[r * n + c] - mean);
        stddev[c] = sigma * std::sqrt(var / double(m));
    }
    std::normal_distribution<double> unit(0.0, 1.0);
    std::vector<T> out(m * n);
    for (std::size_t r = 0; r < m; ++r) {
        for (std::size_t c = 0; c < n; ++c) {
            out[r * n + c] = static_cast<T>(unit(rng) * stddev[c]);
        }
    }
    return Tensor<T>::from(ref.shape(), std::move(out));
}

template <typename T>
Tensor<T> augment_series(const Tensor<T>& x, double sigma, std::mt19937_64& rng) {
    if (sigma == 0) {
        return x;
    }
    NoTapeScope<T> no_tape;
    return add(x, relative_noise(x, sigma, rng));
}

namespace {

std::vector<std::uint8_t> off_diagonal(std::size_t b, bool include_diagonal) {
    std::vector<std::uint8_t> mask(b * b, 1);
    if (!include_diagonal) {
        for (std::size_t i = 0; i < b; ++i) mask[i * b + i] = 0;
    }
    return mask;
}

template <typename T>
void check_batch(const Tensor<T>& a, const Tensor<T>& b, const char* what) {
    if (a.shape() != b.shape() || a.rank() != 2) {
        throw ShapeError(std::string(what) + ": batches " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                         " differ");
    }
    if (a.rows() < 2) {
        throw ContractError(std::string(what) + " needs a batch of at least 2, got " + std::to_string(a.rows()));
    }
}

// Σ_i [ lse_k(S_ik) - P_i ]
template <typename T>
Tensor<T> contrast(const Tensor<T>& positives, const Tensor<T>& scores, bool include_diagonal) {
    const auto mask = off_diagonal(scores.rows(), include_diagonal);
    return sub(sum(logsumexp_rows_masked(scores, mask)), sum(positives));
}

}  // namespace

template <typename T>
Tensor<T> within_adapter_loss(const Tensor<T>& h, const Tensor<T>& h_aug, double tau, bool standard) {
    check_batch(h, h_aug, "within_adapter_loss");
    const T inv_tau = T(1.0 / tau);
    const Tensor<T> hn = l2_normalize_rows(h);
    const Tensor<T> an = l2_normalize_rows(h_aug);
    const Tensor<T> cross = scale(matmul(hn, transpose(an)), inv_tau);
    if (standard) {
        return contrast(diag(cross), cross, true);
    }
    return contrast(diag(cross), scale(matmul(hn, transpose(hn)), inv_tau), false);
}

template <typename T>
Tensor<T> cross_adapter_loss(const Tensor<T>& h_s, const Tensor<T>& h_t, double tau, bool standard) {
    check_batch(h_s, h_t, "cross_adapter_loss");
    const Tensor<T> s = scale(matmul(l2_normalize_rows(h_s), transpose(l2_normalize_rows(h_t))), T(1.0 / tau));
    const Tensor<T> pos = diag(s);
    return add(contrast(pos, s, standard), contrast(pos, transpose(s), standard));
}

template <typename T>
Tensor<T> unsup_total(const Tensor<T>& h_s, const Tensor<T>& h_s_aug, const Tensor<T>& h_t, const Tensor<T>& h_t_aug,
                      const LossConfig& cfg, Variant variant) {
    switch (variant) {
        case Variant::text_only: return within_adapter_loss(h_s, h_s_aug, cfg.tau, cfg.standard_infonce);
        case Variant::time_only: return within_adapter_loss(h_t, h_t_aug, cfg.tau, cfg.standard_infonce);
        case Variant::dual: break;
    }
    return add(add(within_adapter_loss(h_s, h_s_aug, cfg.tau, cfg.standard_infonce),
                   within_adapter_loss(h_t, h_t_aug, cfg.tau, cfg.standard_infonce)),
               cross_adapter_loss(h_s, h_t, cfg.tau, cfg.standard_infonce));
}

#define DTK_INSTANTIATE_OBJECTIVES(T)                                                                           \
    template Tensor<T> pool(const Tensor<T>&);                                                                  \
    template Tensor<T> supervised_loss(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, std::span<const int>); \
    template Tensor<T> supervised_loss(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, int); \
    template Tensor<T> relative_noise(const Tensor<T>&, double, std::mt19937_64&);                              \
    template Tensor<T> augment_series(const Tensor<T>&, double, std::mt19937_64&);                              \
    template Tensor<T> within_adapter_loss(const Tensor<T>&, const Tensor<T>&, double, bool);                   \
    template Tensor<T> cross_adapter_loss(const Tensor<T>&, const Tensor<T>&, double, bool);                    \
    template Tensor<T> unsup_total(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,       \
                                   const LossConfig&, Variant);

DTK_INSTANTIATE_OBJECTIVES(float)
DTK_INSTANTIATE_OBJECTIVES(double)

}  // namespace dtk
