#include "dtk/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace dtk {

namespace {

template <typename T>
void require_rank2(const Tensor<T>& x, const char* op) {
    if (x.rank() != 2) {
        throw ShapeError(std::string(op) + ": expected a matrix, got " + shape_str(x.shape()));
    }
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    }
}

}  // namespace

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    require_rank2(a, "matmul");
    require_rank2(b, "matmul");
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    if (b.rows() != k) {
        throw ShapeError("matmul: inner dimensions disagree, " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
    }
    std::vector<T> out(m * n, T(0));
    const T* pa = a.data().data();
    const T* pb = b.data().data();
    for (std::size_t i = 0; i < m; ++i) {
        T* row = out.data() + i * n;
        for (std::size_t kk = 0; kk < k; ++kk) {
            const T av = pa[i * k + kk];
            const T* brow = pb + kk * n;
            for (std::size_t j = 0; j < n; ++j) {
                row[j] += av * brow[j];
            }
        }
    }
    return make_op_result<T>("matmul", {m, n}, std::move(out), {a, b}, [a, b, m, k, n](Tensor<T>& c) mutable {
        const T* g = c.grad().data();
        if (a.requires_grad()) {
            T* ga = a.mutable_grad().data();
            const T* pb = b.data().data();
            for (std::size_t i = 0; i < m; ++i) {
                for (std::size_t kk = 0; kk < k; ++kk) {
                    T s = 0;
                    const T* brow = pb + kk * n;
                    const T* grow = g + i * n;
                    for (std::size_t j = 0; j < n; ++j) {
                        s += grow[j] * brow[j];
                    }
                    ga[i * k + kk] += s;
                }
            }
        }
        if (b.requires_grad()) {
            T* gb = b.mutable_grad().data();
            const T* pa = a.data().data();
            for (std::size_t i = 0; i < m; ++i) {
                const T* grow = g + i * n;
                for (std::size_t kk = 0; kk < k; ++kk) {
                    const T av = pa[i * k + kk];
                    T* gbrow = gb + kk * n;
                    for (std::size_t j = 0; j < n; ++j) {
                        gbrow[j] += av * grow[j];
                    }
                }
            }
        }
    });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& x) {
    require_rank2(x, "transpose");
    const std::size_t m = x.rows(), n = x.cols();
    std::vector<T> out(m * n);
    auto d = x.data();
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            out[j * m + i] = d[i * n + j];
        }
    }
    return make_op_result<T>("transpose", {n, m}, std::move(out), {x}, [x, m, n](Tensor<T>& y) mutable {
        auto g = y.grad();
        auto gx = x.mutable_grad();
        for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t j = 0; j < n; ++j) {
                gx[i * n + j] += g[j * m + i];
            }
        }
    });
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    require_same_shape(a, b, "add");
    auto da = a.data(), db = b.data();
    std::vector<T> out(da.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = da[i] + db[i];
    }
    return make_op_result<T>("add", a.shape(), std::move(out), {a, b}, [a, b](Tensor<T>& y) mutable {
        auto g = y.grad();
        for (const Tensor<T>* t : {&a, &b}) {
            if (t->requires_grad()) {
                auto gt = t->mutable_grad();
                for (std::size_t i = 0; i < g.size(); ++i) {
                    gt[i] += g[i];
                }
            }
        }
    });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    require_same_shape(a, b, "sub");
    auto da = a.data(), db = b.data();
    std::vector<T> out(da.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = da[i] - db[i];
    }
    return make_op_result<T>("sub", a.shape(), std::move(out), {a, b}, [a, b](Tensor<T>& y) mutable {
        auto g = y.grad();
        if (a.requires_grad()) {
            auto ga = a.mutable_grad();
            for (std::size_t i = 0; i < g.size(); ++i) {
                ga[i] += g[i];
            }
        }
        if (b.requires_grad()) {
            auto gb = b.mutable_grad();
            for (std::size_t i = 0; i < g.size(); ++i) {
                gb[i] -= g[i];
            }
        }
    });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    require_same_shape(a, b, "mul");
    auto da = a.data(), db = b.data();
    std::vector<T> out(da.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = da[i] * db[i];
    }
    return make_op_result<T>("mul", a.shape(), std::move(out), {a, b}, [a, b](Tensor<T>& y) mutable {
        auto g = y.grad();
        if (a.requires_grad()) {
            auto ga = a.mutable_grad();
            auto db = b.data();
            for (std::size_t i = 0; i < g.size(); ++i) {
                ga[i] += g[i] * db[i];
            }
        }
        if (b.requires_grad()) {
            auto gb = b.mutable_grad();
            auto da = a.data();
            for (std::size_t i = 0; i < g.size(); ++i) {
                gb[i] += g[i] * da[i];
            }
        }
    });
}

template <typename T>
Tensor<T> add_row(const Tensor<T>& x, const Tensor<T>& row) {
    require_rank2(x, "add_row");
    const std::size_t m = x.rows(), n = x.cols();
    if (row.numel() != n || row.rows() != 1) {
        throw ShapeError("add_row: row " + shape_str(row.shape()) + " does not broadcast over " +
                         shape_str(x.shape()));
    }
    auto dx = x.data(), dr = row.data();
    std::vector<T> out(m * n);
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            out[i * n + j] = dx[i * n + j] + dr[j];
        }
    }
    return make_op_result<T>("add_row", x.shape(), std::move(out), {x, row}, [x, row, m, n](Tensor<T>& y) mutable {
        auto g = y.grad();
        if (x.requires_grad()) {
            auto gx = x.mutable_grad();
            for (std::size_t i = 0; i < g.size(); ++i) {
                gx[i] += g[i];
            }
        }
        if (row.requires_grad()) {
            auto gr = row.mutable_grad();
            for (std::size_t i = 0; i < m; ++i) {
                for (std::size_t j = 0; j < n; ++j) {
                    gr[j] += g[i * n + j];
                }
            }
        }
    });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
    auto dx = x.data();
    std::vector<T> out(dx.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = dx[i] * factor;
    }
    return make_op_result<T>("scale", x.shape(), std::move(out), {x}, [x, factor](Tensor<T>& y) mutable {
        auto g = y.grad();
        auto gx = x.mutable_grad();
        for (std::size_t i = 0; i < g.size(); ++i) {
            gx[i] += g[i] * factor;
        }
    });
}

template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& x, const Tensor<T>& s) {
    if (s.numel() != 1) {
        throw ShapeError("mul_scalar: expected a 1-element scale, got " + shape_str(s.shape()));
    }
    const T sv = s.data()[0];
    auto dx = x.data();
    std::vector<T> out(dx.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = sv * dx[i];
    }
    return make_op_result<T>("mul_scalar", x.shape(), std::move(out), {x, s}, [x, s](Tensor<T>& y) mutable {
        auto g = y.grad();
        if (x.requires_grad()) {
            const T sv = s.data()[0];
            auto gx = x.mutable_grad();
            for (std::size_t i = 0; i < g.size(); ++i) {
                gx[i] += sv * g[i];
            }
        }
        if (s.requires_grad()) {
            auto dx = x.data();
            T acc = 0;
            for (std::size_t i = 0; i < g.size(); ++i) {
                acc += dx[i] * g[i];
            }
            s.mutable_grad()[0] += acc;
        }
    });
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
    constexpr T c = T(0.7978845608028654);  // sqrt(2/pi)
    constexpr T k = T(0.044715);
    auto dx = x.data();
    std::vector<T> out(dx.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const T v = dx[i];
        out[i] = T(0.5) * v * (T(1) + std::tanh(c * (v + k * v * v * v)));
    }
    return make_op_result<T>("gelu", x.shape(), std::move(out), {x}, [x](Tensor<T>& y) mutable {
        auto g = y.grad();
        auto dx = x.data();
        auto gx = x.mutable_grad();
        for (std::size_t i = 0; i < g.size(); ++i) {
            const T v = dx[i];
            const T th = std::tanh(c * (v + k * v * v * v));
            const T d = T(0.5) * (T(1) + th) + T(0.5) * v * (T(1) - th * th) * c * (T(1) + T(3) * k * v * v);
            gx[i] += g[i] * d;
        }
    });
}

template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x) {
    require_rank2(x, "softmax_rows");
    check_finite<T>(x.data(), "softmax_rows input");
    const std::size_t m = x.rows(), n = x.cols();
    auto dx = x.data();
    std::vector<T> out(m * n);
    for (std::size_t i = 0; i < m; ++i) {
        const T* row = dx.data() + i * n;
        T mx = *std::max_element(row, row + n);
        T z = 0;
        for (std::size_t j = 0; j < n; ++j) {
            out[i * n + j] = std::exp(row[j] - mx);
            z += out[i * n + j];
        }
        for (std::size_t j = 0; j < n; ++j) {
            out[i * n + j] /= z;
        }
    }
    return make_op_result<T>("softmax_rows", x.shape(), std::move(out), {x}, [x, m, n](Tensor<T>& y) mutable {
        auto g = y.grad();
        auto p = y.data();
        auto gx = x.mutable_grad();
        for (std::size_t i = 0; i < m; ++i) {
            T dot = 0;
            for (std::size_t j = 0; j < n; ++j) {
                dot += g[i * n + j] * p[i * n + j];
            }
            for (std::size_t j = 0; j < n; ++j) {
                gx[i * n + j] += p[i * n + j] * (g[i * n + j] - dot);
            }
        }
    });
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
    require_rank2(x, "layer_norm");
    const std::size_t m = x.rows(), n = x.cols();
    if (gamma.numel() != n || beta.numel() != n) {
        throw ShapeError("layer_norm: affine parameters " + shape_str(gamma.shape()) + "/" +
                         shape_str(beta.shape()) + " do not match row width " + std::to_string(n));
    }
    auto dx = x.data(), dg = gamma.data(), db = beta.data();
    std::vector<T> out(m * n);
    std::vector<T> xhat(m * n);
    std::vector<T> inv_std(m);
    for (std::size_t i = 0; i < m; ++i) {
        const T* row = dx.data() + i * n;
        T mean = 0;
        for (std::size_t j = 0; j < n; ++j) {
            mean += row[j];
        }
        mean /= T(n);
        T var = 0;
        for (std::size_t j = 0; j < n; ++j) {
            var += (row[j] - mean) * (row[j] - mean);
        }
        var /= T(n);
        inv_std[i] = T(1) / std::sqrt(var + eps);
        for (std::size_t j = 0; j < n; ++j) {
            const T h = (row[j] - mean) * inv_std[i];
            xhat[i * n + j] = h;
            out[i * n + j] = h * dg[j] + db[j];
        }
    }
    return make_op_result<T>(
        "layer_norm", x.shape(), std::move(out), {x, gamma, beta},
        [x, gamma, beta, m, n, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tensor<T>& y) mutable {
            auto g = y.grad();
            auto dg = gamma.data();
            if (x.requires_grad()) {
                auto gx = x.mutable_grad();
                std::vector<T> dh(n);
                for (std::size_t i = 0; i < m; ++i) {
                    T mean_dh = 0, mean_dh_h = 0;
                    for (std::size_t j = 0; j < n; ++j) {
                        dh[j] = g[i * n + j] * dg[j];
                        mean_dh += dh[j];
                        mean_dh_h += dh[j] * xhat[i * n + j];
                    }
                    mean_dh /= T(n);
                    mean_dh_h /= T(n);
                    for (std::size_t j = 0; j < n; ++j) {
                        gx[i * n + j] += inv_std[i] * (dh[j] - mean_dh - xhat[i * n + j] * mean_dh_h);
                    }
                }
            }
            if (gamma.requires_grad()) {
                auto gg = gamma.mutable_grad();
                for (std::size_t i = 0; i < m; ++i) {
                    for (std::size_t j = 0; j < n; ++j) {
                        gg[j] += g[i * n + j] * xhat[i * n + j];
                    }
                }
            }
            if (beta.requires_grad()) {
                auto gb = beta.mutable_grad();
                for (std::size_t i = 0; i < m; ++i) {
                    for (std::size_t j = 0; j < n; ++j) {
                        gb[j] += g[i * n + j];
                    }
                }
            }
        });
}

template <typename T>
Tensor<T> mean_rows(const Tensor<T>& x) {
    require_rank2(x, "mean_rows");
    const std::size_t m = x.rows(), n = x.cols();
    auto dx = x.data();
    std::vector<T> out(n, T(0));
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            out[j] += dx[i * n + j];
        }
    }
    for (T& v : out) {
        v /= T(m);
    }
    return make_op_result<T>("mean_rows", {1, n}, std::move(out), {x}, [x, m, n](Tensor<T>& y) mutable {
        auto g = y.grad();
        auto gx = x.mutable_grad();
        const T inv = T(1) / T(m);
        for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t j = 0; j < n; ++j) {
                gx[i * n + j] += g[j] * inv;
            }
        }
    });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
    T acc = 0;
    for (T v : x.data()) {
        acc += v;
    }
    return make_op_result<T>("sum", {1, 1}, {acc}, {x}, [x](Tensor<T>& y) mutable {
        const T g = y.grad()[0];
        for (T& v : x.mutable_grad()) {
            v += g;
        }
    });
}

template <typename T>
Tensor<T> sum_cols(const Tensor<T>& x) {
    require_rank2(x, "sum_cols");
    const std::size_t m = x.rows(), n = x.cols();
    auto dx = x.data();
    std::vector<T> out(m, T(0));
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            out[i] += dx[i * n + j];
        }
    }
    return make_op_result<T>("sum_cols", {m, 1}, std::move(out), {x}, [x, m, n](Tensor<T>& y) mutable {
        auto g = y.grad();
        auto gx = x.mutable_grad();
        for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t j = 0; j < n; ++j) {
                gx[i * n + j] += g[i];
            }
        }
    });
}

template <typename T>
Tensor<T> diag(const Tensor<T>& x) {
    require_rank2(x, "diag");
    const std::size_t n = x.rows();
    if (x.cols() != n) {
        throw ShapeError("diag: expected a square matrix, got " + shape_str(x.shape()));
    }
    auto dx = x.data();
    std::vector<T> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        out[i] = dx[i * n + i];
    }
    return make_op_result<T>("diag", {n, 1}, std::move(out), {x}, [x, n](Tensor<T>& y) mutable {
        auto g = y.grad();
        auto gx = x.mutable_grad();
        for (std::size_t i = 0; i < n; ++i) {
            gx[i * n + i] += g[i];
        }
    });
}

template <typename T>
Tensor<T> slice_cols(const Tensor<T>& x, std::size_t start, std::size_t count) {
    require_rank2(x, "slice_cols");
    const std::size_t m = x.rows(), n = x.cols();
    if (count == 0 || start + count > n) {
        throw ShapeError("slice_cols: range [" + std::to_string(start) + ", " + std::to_string(start + count) +
                         ") outside " + shape_str(x.shape()));
    }
    auto dx = x.data();
    std::vector<T> out(m * count);
    for (std::size_t i = 0; i < m; ++i) {
        std::copy_n(dx.data() + i * n + start, count, out.data() + i * count);
    }
    return make_op_result<T>("slice_cols", {m, count}, std::move(out), {x},
                             [x, m, n, start, count](Tensor<T>& y) mutable {
                                 auto g = y.grad();
                                 auto gx = x.mutable_grad();
                                 for (std::size_t i = 0; i < m; ++i) {
                                     for (std::size_t j = 0; j < count; ++j) {
                                         gx[i * n + start + j] += g[i * count + j];
                                     }
                                 }
                             });
}

template <typename T>
Tensor<T> slice_rows(const Tensor<T>& x, std::size_t start, std::size_t count) {
    require_rank2(x, "slice_rows");
    const std::size_t m = x.rows(), n = x.cols();
    if (count == 0 || start + count > m) {
        throw ShapeError("slice_rows: range [" + std::to_string(start) + ", " + std::to_string(start + count) +
                         ") outside " + shape_str(x.shape()));
    }
    auto dx = x.data();
    std::vector<T> out(dx.begin() + static_cast<long>(start * n), dx.begin() + static_cast<long>((start + count) * n));
    return make_op_result<T>("slice_rows", {count, n}, std::move(out), {x}, [x, n, start](Tensor<T>& y) mutable {
        auto g = y.grad();
        auto gx = x.mutable_grad();
        for (std::size_t i = 0; i < g.size(); ++i) {
            gx[start * n + i] += g[i];
        }
    });
}

template <typename T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts) {
    if (parts.empty()) {
        throw ShapeError("concat_cols: no inputs");
    }
    const std::size_t m = parts.front().rows();
    std::size_t n = 0;
    for (const auto& p : parts) {
        require_rank2(p, "concat_cols");
        if (p.rows() != m) {
            throw ShapeError("concat_cols: row count mismatch " + shape_str(parts.front().shape()) + " vs " +
                             shape_str(p.shape()));
        }
        n += p.cols();
    }
    std::vector<T> out(m * n);
    std::size_t offset = 0;
    for (const auto& p : parts) {
        const std::size_t w = p.cols();
        auto dp = p.data();
        for (std::size_t i = 0; i < m; ++i) {
            std::copy_n(dp.data() + i * w, w, out.data() + i * n + offset);
        }
        offset += w;
    }
    Tensor<T> result = make_op_result<T>("concat_cols", {m, n}, std::move(out), {}, {});
    Tape<T>* tape = active_tape<T>();
    const bool needs = std::any_of(parts.begin(), parts.end(), [](const auto& p) { return p.requires_grad(); });
    if (tape != nullptr && needs) {
        result.set_requires_grad(true);
        tape->record("concat_cols", parts, result, [parts, m, n](Tensor<T>& y) mutable {
            auto g = y.grad();
            std::size_t offset = 0;
            for (auto& p : parts) {
                const std::size_t w = p.cols();
                if (p.requires_grad()) {
                    auto gp = p.mutable_grad();
                    for (std::size_t i = 0; i < m; ++i) {
                        for (std::size_t j = 0; j < w; ++j) {
                            gp[i * w + j] += g[i * n + offset + j];
                        }
                    }
                }
                offset += w;
            }
        });
    }
    return result;
}

template <typename T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
    if (parts.empty()) {
        throw ShapeError("concat_rows: no inputs");
    }
    const std::size_t n = parts.front().cols();
    std::size_t m = 0;
    for (const auto& p : parts) {
        if (p.cols() != n) {
            throw ShapeError("concat_rows: column count mismatch " + shape_str(parts.front().shape()) + " vs " +
                             shape_str(p.shape()));
        }
        m += p.rows();
    }
    std::vector<T> out;
    out.reserve(m * n);
    for (const auto& p : parts) {
        out.insert(out.end(), p.data().begin(), p.data().end());
    }
    Tensor<T> result = make_op_result<T>("concat_rows", {m, n}, std::move(out), {}, {});
    Tape<T>* tape = active_tape<T>();
    const bool needs = std::any_of(parts.begin(), parts.end(), [](const auto& p) { return p.requires_grad(); });
    if (tape != nullptr && needs) {
        result.set_requires_grad(true);
        tape->record("concat_rows", parts, result, [parts](Tensor<T>& y) mutable {
            auto g = y.grad();
            std::size_t offset = 0;
            for (auto& p : parts) {
                const std::size_t count = p.numel();
                if (p.requires_grad()) {
                    auto gp = p.mutable_grad();
                    for (std::size_t i = 0; i < count; ++i) {
                        gp[i] += g[offset + i];
                    }
                }
                offset += count;
            }
        });
    }
    return result;
}

template <typename T>
Tensor<T> gather_rows(const Tensor<T>& table, std::span<const std::int32_t> ids) {
    require_rank2(table, "gather_rows");
    const std::size_t v = table.rows(), n = table.cols();
    if (ids.empty()) {
        throw ShapeError("gather_rows: empty id list");
    }
    auto dt = table.data();
    std::vector<T> out(ids.size() * n);
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= v) {
            throw ContractError("gather_rows: id " + std::to_string(ids[i]) + " outside table of " +
                                std::to_string(v) + " rows");
        }
        std::copy_n(dt.data() + static_cast<std::size_t>(ids[i]) * n, n, out.data() + i * n);
    }
    std::vector<std::int32_t> kept(ids.begin(), ids.end());
    return make_op_result<T>("gather_rows", {ids.size(), n}, std::move(out), {table},
                             [table, n, kept = std::move(kept)](Tensor<T>& y) mutable {
                                 auto g = y.grad();
                                 auto gt = table.mutable_grad();
                                 for (std::size_t i = 0; i < kept.size(); ++i) {
                                     const std::size_t r = static_cast<std::size_t>(kept[i]);
                                     for (std::size_t j = 0; j < n; ++j) {
                                         gt[r * n + j] += g[i * n + j];
                                     }
                                 }
                             });
}

template <typename T>
Tensor<T> conv1d_same(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
    require_rank2(x, "conv1d_same");
    if (weight.rank() != 3) {
        throw ShapeError("conv1d_same: weight must be [c_out x c_in x k], got " + shape_str(weight.shape()));
    }
    const std::size_t len = x.rows(), cin = x.cols();
    const std::size_t cout = weight.shape()[0], k = weight.shape()[2];
    if (weight.shape()[1] != cin) {
        throw ShapeError("conv1d_same: input channels " + std::to_string(cin) + " vs weight " +
                         shape_str(weight.shape()));
    }
    if (k % 2 == 0) {
        throw ShapeError("conv1d_same: kernel size must be odd, got " + std::to_string(k));
    }
    if (bias.numel() != cout) {
        throw ShapeError("conv1d_same: bias " + shape_str(bias.shape()) + " for " + std::to_string(cout) +
                         " output channels");
    }
    const long pad = static_cast<long>(k / 2);
    // Re-layout the kernel as [k][c_in][c_out] so the inner loop is contiguous.
    auto dw = weight.data();
    std::vector<T> wt(k * cin * cout);
    for (std::size_t o = 0; o < cout; ++o) {
        for (std::size_t c = 0; c < cin; ++c) {
            for (std::size_t j = 0; j < k; ++j) {
                wt[(j * cin + c) * cout + o] = dw[(o * cin + c) * k + j];
            }
        }
    }
    auto dx = x.data(), db = bias.data();
    std::vector<T> out(len * cout);
    for (std::size_t t = 0; t < len; ++t) {
        T* orow = out.data() + t * cout;
        std::copy_n(db.data(), cout, orow);
        for (std::size_t j = 0; j < k; ++j) {
            const long src = static_cast<long>(t) + static_cast<long>(j) - pad;
            if (src < 0 || src >= static_cast<long>(len)) {
                continue;
            }
            const T* xrow = dx.data() + static_cast<std::size_t>(src) * cin;
            for (std::size_t c = 0; c < cin; ++c) {
                const T xv = xrow[c];
                const T* wrow = wt.data() + (j * cin + c) * cout;
                for (std::size_t o = 0; o < cout; ++o) {
                    orow[o] += xv * wrow[o];
                }
            }
        }
    }
    return make_op_result<T>(
        "conv1d_same", {len, cout}, std::move(out), {x, weight, bias},
        [x, weight, bias, len, cin, cout, k, pad, wt = std::move(wt)](Tensor<T>& y) mutable {
            auto g = y.grad();
            if (bias.requires_grad()) {
                auto gb = bias.mutable_grad();
                for (std::size_t t = 0; t < len; ++t) {
                    for (std::size_t o = 0; o < cout; ++o) {
                        gb[o] += g[t * cout + o];
                    }
                }
            }
            const bool want_x = x.requires_grad();
            const bool want_w = weight.requires_grad();
            if (!want_x && !want_w) {
                return;
            }
            auto dx = x.data();
            std::vector<T> gwt(want_w ? k * cin * cout : 0, T(0));
            std::span<T> gx = want_x ? x.mutable_grad() : std::span<T>{};
            for (std::size_t t = 0; t < len; ++t) {
                const T* grow = g.data() + t * cout;
                for (std::size_t j = 0; j < k; ++j) {
                    const long src = static_cast<long>(t) + static_cast<long>(j) - pad;
                    if (src < 0 || src >= static_cast<long>(len)) {
                        continue;
                    }
                    const std::size_t s = static_cast<std::size_t>(src);
                    for (std::size_t c = 0; c < cin; ++c) {
                        const std::size_t base = (j * cin + c) * cout;
                        if (want_x) {
                            T acc = 0;
                            for (std::size_t o = 0; o < cout; ++o) {
                                acc += wt[base + o] * grow[o];
                            }
                            gx[s * cin + c] += acc;
                        }
                        if (want_w) {
                            const T xv = dx[s * cin + c];
                            for (std::size_t o = 0; o < cout; ++o) {
                                gwt[base + o] += xv * grow[o];
                            }
                        }
                    }
                }
            }
            if (want_w) {
                auto gw = weight.mutable_grad();
                for (std::size_t o = 0; o < cout; ++o) {
                    for (std::size_t c = 0; c < cin; ++c) {
                        for (std::size_t j = 0; j < k; ++j) {
                            gw[(o * cin + c) * k + j] += gwt[(j * cin + c) * cout + o];
                        }
                    }
                }
            }
        });
}

template <typename T>
Tensor<T> l2_normalize_rows(const Tensor<T>& x) {
    require_rank2(x, "l2_normalize_rows");
    const std::size_t m = x.rows(), n = x.cols();
    auto dx = x.data();
    std::vector<T> out(m * n);
    std::vector<T> norms(m);
    for (std::size_t i = 0; i < m; ++i) {
        T s = 0;
        for (std::size_t j = 0; j < n; ++j) {
            s += dx[i * n + j] * dx[i * n + j];
        }
        norms[i] = std::sqrt(s);
        if (!(norms[i] > T(0))) {
            throw NumericError("l2_normalize_rows: row " + std::to_string(i) + " has zero norm");
        }
        for (std::size_t j = 0; j < n; ++j) {
            out[i * n + j] = dx[i * n + j] / norms[i];
        }
    }
    return make_op_result<T>("l2_normalize_rows", x.shape(), std::move(out), {x},
                             [x, m, n, norms = std::move(norms)](Tensor<T>& y) mutable {
                                 auto g = y.grad();
                                 auto u = y.data();
                                 auto gx = x.mutable_grad();
                                 for (std::size_t i = 0; i < m; ++i) {
                                     T dot = 0;
                                     for (std::size_t j = 0; j < n; ++j) {
                                         dot += u[i * n + j] * g[i * n + j];
                                     }
                                     for (std::size_t j = 0; j < n; ++j) {
                                         gx[i * n + j] += (g[i * n + j] - u[i * n + j] * dot) / norms[i];
                                     }
                                 }
                             });
}

template <typename T>
Tensor<T> logsumexp_rows_masked(const Tensor<T>& x, std::span<const std::uint8_t> mask) {
    require_rank2(x, "logsumexp_rows_masked");
    const std::size_t m = x.rows(), n = x.cols();
    if (mask.size() != m * n) {
        throw ShapeError("logsumexp_rows_masked: mask of " + std::to_string(mask.size()) + " entries for " +
                         shape_str(x.shape()));
    }
    auto dx = x.data();
    std::vector<T> out(m);
    std::vector<T> weights(m * n, T(0));
    for (std::size_t i = 0; i < m; ++i) {
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j < n; ++j) {
            if (mask[i * n + j]) {
                mx = std::max(mx, dx[i * n + j]);
            }
        }
        if (mx == -std::numeric_limits<T>::infinity()) {
            throw ContractError("logsumexp_rows_masked: row " + std::to_string(i) + " has no unmasked entry");
        }
        T z = 0;
        for (std::size_t j = 0; j < n; ++j) {
            if (mask[i * n + j]) {
                weights[i * n + j] = std::exp(dx[i * n + j] - mx);
                z += weights[i * n + j];
            }
        }
        for (std::size_t j = 0; j < n; ++j) {
            weights[i * n + j] /= z;
        }
        out[i] = mx + std::log(z);
    }
    return make_op_result<T>("logsumexp_rows_masked", {m, 1}, std::move(out), {x},
                             [x, m, n, weights = std::move(weights)](Tensor<T>& y) mutable {
                                 auto g = y.grad();
                                 auto gx = x.mutable_grad();
                                 for (std::size_t i = 0; i < m; ++i) {
                                     for (std::size_t j = 0; j < n; ++j) {
                                         gx[i * n + j] += g[i] * weights[i * n + j];
                                     }
                                 }
                             });
}

template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> labels) {
    require_rank2(logits, "cross_entropy");
    const std::size_t m = logits.rows(), c = logits.cols();
    if (labels.size() != m) {
        throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for " + std::to_string(m) +
                         " rows");
    }
    auto dl = logits.data();
    std::vector<T> probs(m * c);
    T loss = 0;
    for (std::size_t i = 0; i < m; ++i) {
        if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= c) {
            throw ContractError("cross_entropy: label " + std::to_string(labels[i]) + " outside [0, " +
                                std::to_string(c) + ")");
        }
        const T* row = dl.data() + i * c;
        const T mx = *std::max_element(row, row + c);
        T z = 0;
        for (std::size_t j = 0; j < c; ++j) {
            probs[i * c + j] = std::exp(row[j] - mx);
            z += probs[i * c + j];
        }
        for (std::size_t j = 0; j < c; ++j) {
            probs[i * c + j] /= z;
        }
        loss += mx + std::log(z) - row[static_cast<std::size_t>(labels[i])];
    }
    std::vector<int> kept(labels.begin(), labels.end());
    return make_op_result<T>("cross_entropy", {1, 1}, {loss}, {logits},
                             [logits, m, c, probs = std::move(probs), kept = std::move(kept)](Tensor<T>& y) mutable {
                                 const T g = y.grad()[0];
                                 auto gl = logits.mutable_grad();
                                 for (std::size_t i = 0; i < m; ++i) {
                                     for (std::size_t j = 0; j < c; ++j) {
                                         const T onehot = static_cast<std::size_t>(kept[i]) == j ? T(1) : T(0);
                                         gl[i * c + j] += g * (probs[i * c + j] - onehot);
                                     }
                                 }
                             });
}

#define DTK_INSTANTIATE_OPS(T)                                                                   \
    template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                              \
    template Tensor<T> transpose(const Tensor<T>&);                                             \
    template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                 \
    template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                 \
    template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                 \
    template Tensor<T> add_row(const Tensor<T>&, const Tensor<T>&);                             \
    template Tensor<T> scale(const Tensor<T>&, T);                                              \
    template Tensor<T> mul_scalar(const Tensor<T>&, const Tensor<T>&);                          \
    template Tensor<T> gelu(const Tensor<T>&);                                                  \
    template Tensor<T> softmax_rows(const Tensor<T>&);                                          \
    template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);     \
    template Tensor<T> mean_rows(const Tensor<T>&);                                             \
    template Tensor<T> sum(const Tensor<T>&);                                                   \
    template Tensor<T> sum_cols(const Tensor<T>&);                                              \
    template Tensor<T> diag(const Tensor<T>&);                                                  \
    template Tensor<T> slice_cols(const Tensor<T>&, std::size_t, std::size_t);                  \
    template Tensor<T> slice_rows(const Tensor<T>&, std::size_t, std::size_t);                  \
    template Tensor<T> concat_cols(const std::vector<Tensor<T>>&);                              \
    template Tensor<T> concat_rows(const std::vector<Tensor<T>>&);                              \
    template Tensor<T> gather_rows(const Tensor<T>&, std::span<const std::int32_t>);            \
    template Tensor<T> conv1d_same(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);       \
    template Tensor<T> l2_normalize_rows(const Tensor<T>&);                                     \
    template Tensor<T> logsumexp_rows_masked(const Tensor<T>&, std::span<const std::uint8_t>);  \
    template Tensor<T> cross_entropy(const Tensor<T>&, std::span<const int>);

DTK_INSTANTIATE_OPS(float)
DTK_INSTANTIATE_OPS(double)

}  // namespace dtk
