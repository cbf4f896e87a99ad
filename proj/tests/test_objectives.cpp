#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "dtk/errors.hpp"
#include "dtk/objectives.hpp"
#include "fd_oracle.hpp"
#include "loss_oracle.hpp"

using namespace dtk;
using dtk::testing::brute_cross;
using dtk::testing::brute_within;
using dtk::testing::central_difference;
using dtk::testing::random_tensor;
using dtk::testing::relative_error;
using dtk::testing::Rows;

namespace {

Rows rows_of(const Tensor<double>& t) {
    Rows r(t.rows(), std::vector<double>(t.cols()));
    for (std::size_t i = 0; i < t.rows(); ++i)
        for (std::size_t c = 0; c < t.cols(); ++c) r[i][c] = t.at(i, c);
    return r;
}

Tensor<double> orthonormal_pair() {
    return Tensor<double>::from({2, 2}, {1.0, 0.0, 0.0, 1.0});
}

// Reference standard InfoNCE: denominator over every k, including the positive.
double brute_standard(const Rows& a, const Rows& p, double tau) {
    double total = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        double denom = 0;
        for (std::size_t k = 0; k < p.size(); ++k) denom += std::exp(dtk::testing::cosine(a[i], p[k]) / tau);
        total -= dtk::testing::cosine(a[i], p[i]) / tau - std::log(denom);
    }
    return total;
}

}  // namespace

TEST(Pool, SingleRowAndSymmetry) {
    auto one = Tensor<double>::from({1, 3}, {1.0, -2.0, 4.0});
    EXPECT_EQ(pool(one).at(0, 1), -2.0);
    auto opposite = Tensor<double>::from({2, 2}, {3.0, -1.0, -3.0, 1.0});
    EXPECT_EQ(pool(opposite).at(0, 0), 0.0);
    EXPECT_EQ(pool(opposite).at(0, 1), 0.0);
}

TEST(Pool, MatchesColumnMean) {
    std::mt19937_64 rng(1);
    auto h = random_tensor<double>({5, 8}, rng);
    const auto p = pool(h);
    for (std::size_t c = 0; c < 8; ++c) {
        double m = 0;
        for (std::size_t r = 0; r < 5; ++r) m += h.at(r, c);
        EXPECT_NEAR(p.at(0, c), m / 5, 1e-7);
    }
}

TEST(SupervisedLoss, UniformLogitsGiveLogC) {
    for (std::size_t classes : {2u, 4u, 7u}) {
        auto w = Tensor<double>::zeros({3, classes});
        auto b = Tensor<double>::zeros({classes});
        auto h = Tensor<double>::from({1, 3}, {0.3, -1.0, 2.0});
        EXPECT_NEAR(supervised_loss(h, h, w, b, 1).item(), std::log(double(classes)), 1e-12);
    }
}

TEST(SupervisedLoss, SaturatesAtLargeMargin) {
    auto w = Tensor<double>::zeros({1, 3});
    auto b = Tensor<double>::from({3}, {20.0, 0.0, 0.0});
    auto h = Tensor<double>::zeros({1, 1});
    EXPECT_LT(supervised_loss(h, h, w, b, 0).item(), 1e-8);
}

TEST(SupervisedLoss, MatchesLogSumExpOracle) {
    std::mt19937_64 rng(2);
    for (int trial = 0; trial < 20; ++trial) {
        auto hs = random_tensor<double>({1, 6}, rng);
        auto ht = random_tensor<double>({1, 6}, rng);
        auto w = random_tensor<double>({6, 4}, rng);
        auto b = random_tensor<double>({4}, rng);
        const int label = int(rng() % 4);
        std::vector<double> logits(4);
        for (std::size_t k = 0; k < 4; ++k) {
            logits[k] = b.data()[k];
            for (std::size_t c = 0; c < 6; ++c) logits[k] += (hs.at(0, c) + ht.at(0, c)) * w.at(c, k);
        }
        const double mx = *std::max_element(logits.begin(), logits.end());
        double z = 0;
        for (double l : logits) z += std::exp(l - mx);
        EXPECT_NEAR(supervised_loss(hs, ht, w, b, label).item(), mx + std::log(z) - logits[label], 1e-6);
    }
}

TEST(SupervisedLoss, ShiftInvarianceAndBadLabel) {
    std::mt19937_64 rng(3);
    auto h = random_tensor<double>({1, 4}, rng);
    auto w = random_tensor<double>({4, 3}, rng);
    auto b = random_tensor<double>({3}, rng);
    auto b_shift = Tensor<double>::from({3}, {b.data()[0] + 5, b.data()[1] + 5, b.data()[2] + 5});
    for (int label = 0; label < 3; ++label) {
        EXPECT_NEAR(supervised_loss(h, h, w, b, label).item(), supervised_loss(h, h, w, b_shift, label).item(), 1e-9);
    }
    EXPECT_THROW(supervised_loss(h, h, w, b, 3), ContractError);
    EXPECT_THROW(supervised_loss(h, h, w, b, -1), ContractError);
}

TEST(Augment, ZeroSigmaAndSeedDeterminism) {
    std::mt19937_64 rng(4);
    auto x = random_tensor<double>({50, 3}, rng);
    std::mt19937_64 a(9), b(9);
    EXPECT_TRUE(augment_series(x, 0.0, a).same_storage(x));
    const auto u = augment_series(x, 0.1, a);
    const auto v = augment_series(x, 0.1, b);
    const auto w = augment_series(x, 0.1, b);
    EXPECT_TRUE(std::equal(u.data().begin(), u.data().end(), v.data().begin()));
    EXPECT_FALSE(std::equal(u.data().begin(), u.data().end(), w.data().begin()));
}

TEST(Augment, NoiseStdMatchesTargetPerChannel) {
    std::mt19937_64 rng(5);
    std::vector<double> xs(200 * 2);
    for (std::size_t t = 0; t < 200; ++t) {
        xs[t * 2] = std::sin(0.1 * double(t));   // std ≈ 0.707
        xs[t * 2 + 1] = 10.0 * double(t % 7);   // std = 20
    }
    auto x = Tensor<double>::from({200, 2}, xs);
    double target[2];
    for (int c = 0; c < 2; ++c) {
        double mean = 0, var = 0;
        for (std::size_t t = 0; t < 200; ++t) mean += xs[t * 2 + c];
        mean /= 200;
        for (std::size_t t = 0; t < 200; ++t) var += (xs[t * 2 + c] - mean) * (xs[t * 2 + c] - mean);
        target[c] = 0.1 * std::sqrt(var / 200);
    }
    double sq[2] = {0, 0};
    std::size_t n = 0;
    std::mt19937_64 noise_rng(6);
    for (int draw = 0; draw < 50; ++draw) {  // 50 draws × 200 steps = 10⁴ samples per channel
        const auto y = augment_series(x, 0.1, noise_rng);
        for (std::size_t t = 0; t < 200; ++t) {
            for (int c = 0; c < 2; ++c) {
                const double diff = y.at(t, c) - x.at(t, c);
                sq[c] += diff * diff;
            }
        }
        n += 200;
    }
    for (int c = 0; c < 2; ++c) {
        EXPECT_NEAR(std::sqrt(sq[c] / double(n)) / target[c], 1.0, 0.05) << c;
    }
}

TEST(WithinLoss, OrthonormalHandValue) {
    const auto h = orthonormal_pair();
    EXPECT_NEAR(within_adapter_loss(h, h, 1.0).item(), -2.0, 1e-12);
}

TEST(CrossLoss, IdenticalPairHandValue) {
    const auto h = orthonormal_pair();
    EXPECT_NEAR(cross_adapter_loss(h, h, 1.0).item(), -4.0, 1e-12);
}

TEST(ContrastiveLosses, MatchBruteForceOracles) {
    std::mt19937_64 rng(7);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t b = std::size_t(2) << (trial % 3);
        const std::size_t d = trial % 2 ? 16 : 4;
        const double tau = 0.05 + 0.5 * double(rng() % 100) / 100.0;
        auto hs = random_tensor<double>({b, d}, rng), hs2 = random_tensor<double>({b, d}, rng);
        auto ht = random_tensor<double>({b, d}, rng), ht2 = random_tensor<double>({b, d}, rng);
        const double ls = within_adapter_loss(hs, hs2, tau).item();
        const double lt = within_adapter_loss(ht, ht2, tau).item();
        const double lc = cross_adapter_loss(hs, ht, tau).item();
        EXPECT_NEAR(ls, brute_within(rows_of(hs), rows_of(hs2), tau), 1e-6);
        EXPECT_NEAR(lt, brute_within(rows_of(ht), rows_of(ht2), tau), 1e-6);
        EXPECT_NEAR(lc, brute_cross(rows_of(hs), rows_of(ht), tau), 1e-6);
        LossConfig cfg;
        cfg.tau = tau;
        EXPECT_NEAR(unsup_total(hs, hs2, ht, ht2, cfg).item(), ls + lt + lc, 1e-7);
    }
}

TEST(ContrastiveLosses, ScaleInvariance) {
    std::mt19937_64 rng(8);
    auto h = random_tensor<double>({4, 6}, rng), a = random_tensor<double>({4, 6}, rng);
    auto h7 = scale(h, 7.0), a3 = scale(a, 0.3);
    EXPECT_NEAR(within_adapter_loss(h, a, 0.1).item(), within_adapter_loss(h7, a3, 0.1).item(), 1e-6);
    EXPECT_NEAR(cross_adapter_loss(h, a, 0.1).item(), cross_adapter_loss(h7, a3, 0.1).item(), 1e-6);
}

TEST(ContrastiveLosses, JointRowPermutationInvariance) {
    std::mt19937_64 rng(9);
    auto hs = random_tensor<double>({5, 4}, rng), ht = random_tensor<double>({5, 4}, rng);
    const std::vector<std::size_t> perm = {3, 0, 4, 2, 1};
    std::vector<double> ps, pt;
    for (std::size_t i : perm) {
        for (std::size_t c = 0; c < 4; ++c) {
            ps.push_back(hs.at(i, c));
            pt.push_back(ht.at(i, c));
        }
    }
    auto hs_p = Tensor<double>::from({5, 4}, ps), ht_p = Tensor<double>::from({5, 4}, pt);
    EXPECT_NEAR(cross_adapter_loss(hs, ht, 0.1).item(), cross_adapter_loss(hs_p, ht_p, 0.1).item(), 1e-9);
}

TEST(ContrastiveLosses, ErrorSurfaces) {
    auto zero_row = Tensor<double>::from({2, 2}, {0.0, 0.0, 1.0, 0.0});
    auto ok = orthonormal_pair();
    EXPECT_THROW(within_adapter_loss(zero_row, ok, 0.1), NumericError);
    EXPECT_THROW(cross_adapter_loss(ok, zero_row, 0.1), NumericError);
    auto single = Tensor<double>::from({1, 2}, {1.0, 0.0});
    EXPECT_THROW(within_adapter_loss(single, single, 0.1), ContractError);
    EXPECT_THROW(cross_adapter_loss(ok, Tensor<double>::zeros({3, 2}), 0.1), ShapeError);
    LossConfig bad;
    bad.tau = 0;
    EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(ContrastiveLosses, StandardInfoNceSwitch) {
    std::mt19937_64 rng(10);
    auto h = random_tensor<double>({4, 5}, rng), a = random_tensor<double>({4, 5}, rng);
    EXPECT_NEAR(within_adapter_loss(h, a, 0.2, true).item(), brute_standard(rows_of(h), rows_of(a), 0.2), 1e-9);
    EXPECT_NEAR(cross_adapter_loss(h, a, 0.2, true).item(),
                brute_standard(rows_of(h), rows_of(a), 0.2) + brute_standard(rows_of(a), rows_of(h), 0.2), 1e-9);
    EXPECT_GT(within_adapter_loss(h, a, 0.2, true).item(), 0.0);  // standard form is a proper cross-entropy
}

TEST(UnsupTotal, VariantsKeepOnlyTheirWithinLoss) {
    std::mt19937_64 rng(11);
    auto hs = random_tensor<double>({3, 4}, rng), hs2 = random_tensor<double>({3, 4}, rng);
    auto ht = random_tensor<double>({3, 4}, rng), ht2 = random_tensor<double>({3, 4}, rng);
    LossConfig cfg;
    EXPECT_EQ(unsup_total(hs, hs2, Tensor<double>(), Tensor<double>(), cfg, Variant::text_only).item(),
              within_adapter_loss(hs, hs2, cfg.tau).item());
    EXPECT_EQ(unsup_total(Tensor<double>(), Tensor<double>(), ht, ht2, cfg, Variant::time_only).item(),
              within_adapter_loss(ht, ht2, cfg.tau).item());
}

TEST(UnsupTotal, GradientMatchesFiniteDifferences) {
    std::mt19937_64 rng(12);
    std::vector<Tensor<double>> in = {random_tensor<double>({3, 4}, rng, true), random_tensor<double>({3, 4}, rng, true),
                                      random_tensor<double>({3, 4}, rng, true), random_tensor<double>({3, 4}, rng, true)};
    LossConfig cfg;
    cfg.tau = 0.3;
    auto f = [&] { return unsup_total(in[0], in[1], in[2], in[3], cfg); };
    {
        Tape<double> tape;
        TapeScope<double> scope(tape);
        tape.backward(f());
    }
    for (auto& t : in) {
        const auto fd = central_difference<double>(t, [&] { return f().item(); }, 1e-6);
        EXPECT_LT(relative_error<double>(t.grad(), fd), 1e-6);
    }
}

TEST(UnsupTotal, GradientDescentDecreasesLossOnSeparableEmbeddings) {
    // Two linear "adapters" over fixed inputs from 4 well-separated clusters.
    std::mt19937_64 rng(13);
    const std::size_t b = 8, in = 6, d = 4;
    std::vector<double> xs(b * in);
    std::normal_distribution<double> noise(0.0, 0.1);
    for (std::size_t i = 0; i < b; ++i)
        for (std::size_t c = 0; c < in; ++c) xs[i * in + c] = (c == i % 4 ? 2.0 : 0.0) + noise(rng);
    auto x = Tensor<double>::from({b, in}, xs);
    std::mt19937_64 aug_rng(14);
    auto x_aug = augment_series(x, 0.1, aug_rng);
    auto ws = random_tensor<double>({in, d}, rng, true, 0.5), wt = random_tensor<double>({in, d}, rng, true, 0.5);
    LossConfig cfg;
    std::vector<double> losses;
    for (int step = 0; step < 200; ++step) {
        ws.zero_grad();
        wt.zero_grad();
        Tape<double> tape;
        TapeScope<double> scope(tape);
        auto loss = unsup_total(matmul(x, ws), matmul(x_aug, ws), matmul(x, wt), matmul(x_aug, wt), cfg);
        losses.push_back(loss.item());
        tape.backward(loss);
        for (Tensor<double>* w : {&ws, &wt}) {
            auto g = w->grad();
            auto v = w->mutable_data();
            for (std::size_t k = 0; k < v.size(); ++k) v[k] -= 2e-4 * g[k];
        }
    }
    std::vector<double> smooth;
    for (std::size_t i = 0; i + 5 <= losses.size(); ++i) {
        smooth.push_back(std::accumulate(losses.begin() + long(i), losses.begin() + long(i) + 5, 0.0) / 5);
    }
    for (std::size_t i = 1; i < smooth.size(); ++i) EXPECT_LT(smooth[i], smooth[i - 1]) << i;
    EXPECT_LT(losses.back(), losses.front());
}
