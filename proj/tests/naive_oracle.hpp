#pragma once

// Loop-based reference implementations of the transformer pieces, written
// against raw parameter values. Nothing here touches the ops library.

#include <cmath>
#include <string>
#include <vector>

#include "dtk/backbone.hpp"

namespace dtk::testing {

using Mat = std::vector<std::vector<double>>;

inline Mat to_mat(const Tensor<double>& t) {
    Mat m(t.rows(), std::vector<double>(t.cols()));
    for (std::size_t r = 0; r < t.rows(); ++r)
        for (std::size_t c = 0; c < t.cols(); ++c) m[r][c] = t.at(r, c);
    return m;
}

inline Mat mm(const Mat& a, const Mat& b) {
    Mat out(a.size(), std::vector<double>(b[0].size(), 0.0));
    for (std::size_t i = 0; i < a.size(); ++i)
        for (std::size_t k = 0; k < b.size(); ++k)
            for (std::size_t j = 0; j < b[0].size(); ++j) out[i][j] += a[i][k] * b[k][j];
    return out;
}

inline Mat naive_attention(const Mat& q, const Mat& k, const Mat& v) {
    const double s = 1.0 / std::sqrt(double(q[0].size()));
    Mat out(q.size(), std::vector<double>(v[0].size(), 0.0));
    for (std::size_t i = 0; i < q.size(); ++i) {
        std::vector<double> w(k.size());
        double mx = -1e300;
        for (std::size_t j = 0; j < k.size(); ++j) {
            double dot = 0;
            for (std::size_t c = 0; c < q[0].size(); ++c) dot += q[i][c] * k[j][c];
            w[j] = dot * s;
            mx = std::max(mx, w[j]);
        }
        double z = 0;
        for (double& x : w) z += (x = std::exp(x - mx));
        for (std::size_t j = 0; j < k.size(); ++j)
            for (std::size_t c = 0; c < v[0].size(); ++c) out[i][c] += w[j] / z * v[j][c];
    }
    return out;
}

inline void layer_norm_rows(Mat& x, const std::vector<double>& gamma, const std::vector<double>& beta) {
    for (auto& row : x) {
        double mean = 0, var = 0;
        for (double v : row) mean += v;
        mean /= double(row.size());
        for (double v : row) var += (v - mean) * (v - mean);
        var /= double(row.size());
        for (std::size_t c = 0; c < row.size(); ++c)
            row[c] = (row[c] - mean) / std::sqrt(var + 1e-5) * gamma[c] + beta[c];
    }
}

inline std::vector<double> flat(const Tensor<double>& t) {
    auto d = t.data();
    return {d.begin(), d.end()};
}

inline double naive_gelu(double x) {
    return 0.5 * x * (1.0 + std::tanh(std::sqrt(2.0 / M_PI) * (x + 0.044715 * x * x * x)));
}

inline Mat plus(const Mat& a, const Mat& b) {
    Mat out = a;
    for (std::size_t i = 0; i < a.size(); ++i)
        for (std::size_t c = 0; c < a[i].size(); ++c) out[i][c] += b[i][c];
    return out;
}

inline Mat times(const Mat& a, double s) {
    Mat out = a;
    for (auto& row : out)
        for (double& v : row) v *= s;
    return out;
}

/// Straight-line coding of one layer's pieces, weights read by name.
struct NaiveLayer {
    const ParameterStore<double>& store;
    std::string base;  // e.g. "backbone.layer.2."
    std::size_t heads;

    Mat w(const char* n) const { return to_mat(store.get(base + n)); }
    std::vector<double> r(const char* n) const { return flat(store.get(base + n)); }

    // LN1(MHA(queries from h, keys/values from ctx)) + residual
    Mat attention_branch(const Mat& h, const Mat& ctx, const Mat& residual) const {
        const Mat q = mm(h, w("attn.wq")), k = mm(ctx, w("attn.wk")), v = mm(ctx, w("attn.wv"));
        const std::size_t d = h[0].size(), dk = d / heads;
        Mat concat(h.size(), std::vector<double>(d));
        for (std::size_t head = 0; head < heads; ++head) {
            auto cut = [&](const Mat& m) {
                Mat o(m.size(), std::vector<double>(dk));
                for (std::size_t i = 0; i < m.size(); ++i)
                    for (std::size_t c = 0; c < dk; ++c) o[i][c] = m[i][head * dk + c];
                return o;
            };
            const Mat o = naive_attention(cut(q), cut(k), cut(v));
            for (std::size_t i = 0; i < h.size(); ++i)
                for (std::size_t c = 0; c < dk; ++c) concat[i][head * dk + c] = o[i][c];
        }
        Mat a = mm(concat, w("attn.wo"));
        layer_norm_rows(a, r("ln1.gamma"), r("ln1.beta"));
        return plus(a, residual);
    }

    // LN2(MLP(x)) + x
    Mat mlp_branch(const Mat& x) const {
        Mat hid = mm(x, w("mlp.fc1.w"));
        const auto b1 = r("mlp.fc1.b");
        for (auto& row : hid)
            for (std::size_t c = 0; c < row.size(); ++c) row[c] = naive_gelu(row[c] + b1[c]);
        Mat m = mm(hid, w("mlp.fc2.w"));
        const auto b2 = r("mlp.fc2.b");
        for (auto& row : m)
            for (std::size_t c = 0; c < row.size(); ++c) row[c] += b2[c];
        layer_norm_rows(m, r("ln2.gamma"), r("ln2.beta"));
        return plus(m, x);
    }

    Mat block(const Mat& h) const { return mlp_branch(attention_branch(h, h, h)); }
};

}  // namespace dtk::testing
