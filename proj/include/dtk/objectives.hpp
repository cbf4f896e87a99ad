#pragma once

#include <cstdint>
#include <random>
#include <span>

#include "dtk/config.hpp"
#include "dtk/ops.hpp"

namespace dtk {

struct LossConfig {
    double tau = 0.1;
    double noise_sigma = 0.1;  // fraction of the per-channel std
    /// Off: negatives-only denominators (k != i), within-adapter negatives
    /// drawn from the un-augmented batch. On: standard InfoNCE, where the
    /// denominator runs over every k including the positive.
    bool standard_infonce = false;

    void validate() const;
};

void to_json(nlohmann::json& j, const LossConfig& c);
void from_json(const nlohmann::json& j, LossConfig& c);

/// Mean over token rows -> [1×D].
template <typename T>
Tensor<T> pool(const Tensor<T>& h);

/// Batched classification loss: mean cross-entropy of Linear(features).
template <typename T>
Tensor<T> supervised_loss(const Tensor<T>& features, const Tensor<T>& weight, const Tensor<T>& bias,
                          std::span<const int> labels);

/// Single-sample form: logits = Linear(h_s + h_t).
template <typename T>
Tensor<T> supervised_loss(const Tensor<T>& h_s, const Tensor<T>& h_t, const Tensor<T>& weight, const Tensor<T>& bias,
                          int label);

/// Constant Gaussian noise shaped like `ref`; column c has std sigma·std(ref[:, c]).
template <typename T>
Tensor<T> relative_noise(const Tensor<T>& ref, double sigma, std::mt19937_64& rng);

/// x + relative_noise(x). sigma = 0 returns x unchanged.
template <typename T>
Tensor<T> augment_series(const Tensor<T>& x, double sigma, std::mt19937_64& rng);

/// -Σ_i [ s(H_i, H'_i)/τ - log Σ_{k≠i} exp(s(H_i, H_k)/τ) ], s = cosine similarity.
template <typename T>
Tensor<T> within_adapter_loss(const Tensor<T>& h, const Tensor<T>& h_aug, double tau, bool standard = false);

/// Symmetric alignment of H_s and H_t rows, negatives k != i in both directions.
template <typename T>
Tensor<T> cross_adapter_loss(const Tensor<T>& h_s, const Tensor<T>& h_t, double tau, bool standard = false);

/// L_s + L_t + L_cross for dual; the single variants keep only their own
/// within-adapter term (the unused inputs may be undefined).
template <typename T>
Tensor<T> unsup_total(const Tensor<T>& h_s, const Tensor<T>& h_s_aug, const Tensor<T>& h_t, const Tensor<T>& h_t_aug,
                      const LossConfig& cfg, Variant variant = Variant::dual);

}  // namespace dtk
