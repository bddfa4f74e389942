#include "safectrl/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <string>
#include <unordered_set>

namespace safectrl {

namespace {

std::atomic<std::int64_t> g_node_counter{0};

std::shared_ptr<TensorNode> make_node(Shape shape, std::vector<float> value) {
    auto n = std::make_shared<TensorNode>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    n->id = g_node_counter.fetch_add(1, std::memory_order_relaxed);
    return n;
}

std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

// Result node for an op: links parents and the closure only when a parent
// needs gradients, so frozen-weight inference builds no graph at all.
Tensor make_result(Shape shape, std::vector<float> value,
                   std::initializer_list<Tensor> inputs,
                   std::function<void(TensorNode&)> backprop) {
    auto n = make_node(std::move(shape), std::move(value));
    bool rg = false;
    for (const Tensor& t : inputs) rg = rg || t.requires_grad();
    if (rg) {
        n->requires_grad = true;
        for (const Tensor& t : inputs) n->parents.push_back(t.node());
        n->backprop = std::move(backprop);
    }
    return Tensor(n);
}

void accum(TensorNode& parent, const std::vector<float>& delta) {
    parent.ensure_grad();
    for (size_t i = 0; i < delta.size(); ++i) parent.grad[i] += delta[i];
}

}  // namespace

// ---- Tensor basics -------------------------------------------------------

Tensor Tensor::zeros(const Shape& shape, bool requires_grad) {
    auto n = make_node(shape, std::vector<float>(static_cast<size_t>(shape_numel(shape)), 0.0f));
    n->requires_grad = requires_grad;
    return Tensor(n);
}

Tensor Tensor::full(const Shape& shape, float v, bool requires_grad) {
    auto n = make_node(shape, std::vector<float>(static_cast<size_t>(shape_numel(shape)), v));
    n->requires_grad = requires_grad;
    return Tensor(n);
}

Tensor Tensor::from_data(const Shape& shape, std::vector<float> data, bool requires_grad) {
    if (static_cast<int>(data.size()) != shape_numel(shape))
        throw ShapeError("from_data: " + std::to_string(data.size()) + " values for shape " +
                         shape_str(shape));
    auto n = make_node(shape, std::move(data));
    n->requires_grad = requires_grad;
    return Tensor(n);
}

Tensor Tensor::scalar(float v, bool requires_grad) {
    return from_data({1}, {v}, requires_grad);
}

Tensor Tensor::randn(const Shape& shape, Rng& rng, float stddev, bool requires_grad) {
    std::vector<float> data(static_cast<size_t>(shape_numel(shape)));
    for (float& x : data) x = rng.normal() * stddev;
    auto n = make_node(shape, std::move(data));
    n->requires_grad = requires_grad;
    return Tensor(n);
}

float Tensor::item() const {
    if (numel() != 1) throw ContractError("item: tensor has " + std::to_string(numel()) + " elements");
    return node_->value[0];
}

const std::vector<float>& Tensor::grad() const {
    if (node_->grad.size() != node_->value.size())
        throw ContractError("grad: not populated (run backward first)");
    return node_->grad;
}

Tensor Tensor::clone(bool requires_grad) const {
    auto n = make_node(node_->shape, node_->value);
    n->requires_grad = requires_grad;
    return Tensor(n);
}

void assert_finite(const Tensor& t, const char* what) {
    for (float v : t.data())
        if (!std::isfinite(v)) throw NumericError(std::string(what) + ": non-finite value");
}

// ---- ops -----------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
        throw ShapeError("matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    const int m = a.dim(0), k = a.dim(1), n = b.dim(0) ? b.dim(1) : 0;
    std::vector<float> out(static_cast<size_t>(m) * n, 0.0f);
    const float* pa = a.data().data();
    const float* pb = b.data().data();
    for (int i = 0; i < m; ++i)
        for (int kk = 0; kk < k; ++kk) {
            const float av = pa[i * k + kk];
            const float* pbr = pb + kk * n;
            float* po = out.data() + i * n;
            for (int j = 0; j < n; ++j) po[j] += av * pbr[j];
        }
    return make_result({m, n}, std::move(out), {a, b}, [m, k, n](TensorNode& node) {
        TensorNode& na = *node.parents[0];
        TensorNode& nb = *node.parents[1];
        const float* g = node.grad.data();
        if (na.requires_grad) {
            na.ensure_grad();
            // dA = g . B^T
            for (int i = 0; i < m; ++i)
                for (int kk = 0; kk < k; ++kk) {
                    float s = 0.0f;
                    const float* gr = g + i * n;
                    const float* br = nb.value.data() + kk * n;
                    for (int j = 0; j < n; ++j) s += gr[j] * br[j];
                    na.grad[i * k + kk] += s;
                }
        }
        if (nb.requires_grad) {
            nb.ensure_grad();
            // dB = A^T . g
            for (int kk = 0; kk < k; ++kk)
                for (int i = 0; i < m; ++i) {
                    const float av = na.value[i * k + kk];
                    const float* gr = g + i * n;
                    float* gb = nb.grad.data() + kk * n;
                    for (int j = 0; j < n; ++j) gb[j] += av * gr[j];
                }
        }
    });
}

Tensor transpose(const Tensor& a) {
    if (a.rank() != 2) throw ShapeError("transpose: rank-2 required");
    const int m = a.dim(0), n = a.dim(1);
    std::vector<float> out(static_cast<size_t>(m) * n);
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) out[j * m + i] = a.data()[i * n + j];
    return make_result({n, m}, std::move(out), {a}, [m, n](TensorNode& node) {
        TensorNode& na = *node.parents[0];
        if (!na.requires_grad) return;
        na.ensure_grad();
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j) na.grad[i * n + j] += node.grad[j * m + i];
    });
}

Tensor add(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "add");
    std::vector<float> out(a.data());
    for (size_t i = 0; i < out.size(); ++i) out[i] += b.data()[i];
    return make_result(a.shape(), std::move(out), {a, b}, [](TensorNode& node) {
        for (int p = 0; p < 2; ++p)
            if (node.parents[p]->requires_grad) accum(*node.parents[p], node.grad);
    });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "sub");
    std::vector<float> out(a.data());
    for (size_t i = 0; i < out.size(); ++i) out[i] -= b.data()[i];
    return make_result(a.shape(), std::move(out), {a, b}, [](TensorNode& node) {
        if (node.parents[0]->requires_grad) accum(*node.parents[0], node.grad);
        TensorNode& nb = *node.parents[1];
        if (nb.requires_grad) {
            nb.ensure_grad();
            for (size_t i = 0; i < node.grad.size(); ++i) nb.grad[i] -= node.grad[i];
        }
    });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "mul");
    std::vector<float> out(a.data());
    for (size_t i = 0; i < out.size(); ++i) out[i] *= b.data()[i];
    return make_result(a.shape(), std::move(out), {a, b}, [](TensorNode& node) {
        TensorNode& na = *node.parents[0];
        TensorNode& nb = *node.parents[1];
        if (na.requires_grad) {
            na.ensure_grad();
            for (size_t i = 0; i < node.grad.size(); ++i) na.grad[i] += node.grad[i] * nb.value[i];
        }
        if (nb.requires_grad) {
            nb.ensure_grad();
            for (size_t i = 0; i < node.grad.size(); ++i) nb.grad[i] += node.grad[i] * na.value[i];
        }
    });
}

Tensor scale(const Tensor& a, float s) {
    std::vector<float> out(a.data());
    for (float& v : out) v *= s;
    return make_result(a.shape(), std::move(out), {a}, [s](TensorNode& node) {
        TensorNode& na = *node.parents[0];
        if (!na.requires_grad) return;
        na.ensure_grad();
        for (size_t i = 0; i < node.grad.size(); ++i) na.grad[i] += node.grad[i] * s;
    });
}

Tensor add_rowvec(const Tensor& x, const Tensor& v) {
    if (x.rank() != 2 || v.numel() != x.dim(1))
        throw ShapeError("add_rowvec: " + shape_str(x.shape()) + " + " + shape_str(v.shape()));
    const int m = x.dim(0), n = x.dim(1);
    std::vector<float> out(x.data());
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) out[i * n + j] += v.data()[j];
    return make_result(x.shape(), std::move(out), {x, v}, [m, n](TensorNode& node) {
        if (node.parents[0]->requires_grad) accum(*node.parents[0], node.grad);
        TensorNode& nv = *node.parents[1];
        if (nv.requires_grad) {
            nv.ensure_grad();
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j) nv.grad[j] += node.grad[i * n + j];
        }
    });
}

Tensor div_by_scalar(const Tensor& x, const Tensor& s) {
    if (s.numel() != 1) throw ShapeError("div_by_scalar: divisor must be a single element");
    const float d = s.data()[0];
    if (d == 0.0f) throw NumericError("div_by_scalar: zero divisor");
    std::vector<float> out(x.data());
    for (float& v : out) v /= d;
    return make_result(x.shape(), std::move(out), {x, s}, [d](TensorNode& node) {
        TensorNode& nx = *node.parents[0];
        TensorNode& ns = *node.parents[1];
        if (nx.requires_grad) {
            nx.ensure_grad();
            for (size_t i = 0; i < node.grad.size(); ++i) nx.grad[i] += node.grad[i] / d;
        }
        if (ns.requires_grad) {
            ns.ensure_grad();
            float acc = 0.0f;
            for (size_t i = 0; i < node.grad.size(); ++i)
                acc -= node.grad[i] * nx.value[i] / (d * d);
            ns.grad[0] += acc;
        }
    });
}

Tensor mul_by_scalar(const Tensor& x, const Tensor& s) {
    if (s.numel() != 1) throw ShapeError("mul_by_scalar: factor must be a single element");
    const float f = s.data()[0];
    std::vector<float> out(x.data());
    for (float& v : out) v *= f;
    return make_result(x.shape(), std::move(out), {x, s}, [f](TensorNode& node) {
        TensorNode& nx = *node.parents[0];
        TensorNode& ns = *node.parents[1];
        if (nx.requires_grad) {
            nx.ensure_grad();
            for (size_t i = 0; i < node.grad.size(); ++i) nx.grad[i] += node.grad[i] * f;
        }
        if (ns.requires_grad) {
            ns.ensure_grad();
            float acc = 0.0f;
            for (size_t i = 0; i < node.grad.size(); ++i) acc += node.grad[i] * nx.value[i];
            ns.grad[0] += acc;
        }
    });
}

Tensor add_scalar_bcast(const Tensor& x, const Tensor& s) {
    if (s.numel() != 1) throw ShapeError("add_scalar_bcast: summand must be a single element");
    const float f = s.data()[0];
    std::vector<float> out(x.data());
    for (float& v : out) v += f;
    return make_result(x.shape(), std::move(out), {x, s}, [](TensorNode& node) {
        TensorNode& nx = *node.parents[0];
        TensorNode& ns = *node.parents[1];
        if (nx.requires_grad) accum(nx, node.grad);
        if (ns.requires_grad) {
            ns.ensure_grad();
            float acc = 0.0f;
            for (float g : node.grad) acc += g;
            ns.grad[0] += acc;
        }
    });
}

Tensor gather_rows(const Tensor& table, const std::vector<int>& rows) {
    if (table.rank() != 2) throw ShapeError("gather_rows: table must be rank-2");
    const int v = table.dim(0), d = table.dim(1);
    for (int r : rows)
        if (r < 0 || r >= v) throw ShapeError("gather_rows: row " + std::to_string(r) + " of " + std::to_string(v));
    const int L = static_cast<int>(rows.size());
    std::vector<float> out(static_cast<size_t>(L) * d);
    for (int i = 0; i < L; ++i)
        std::copy_n(table.data().data() + rows[static_cast<size_t>(i)] * d, d, out.data() + i * d);
    return make_result({L, d}, std::move(out), {table}, [rows, d](TensorNode& node) {
        TensorNode& nt = *node.parents[0];
        if (!nt.requires_grad) return;
        nt.ensure_grad();
        for (size_t i = 0; i < rows.size(); ++i)
            for (int j = 0; j < d; ++j)
                nt.grad[static_cast<size_t>(rows[i]) * d + j] += node.grad[i * d + j];
    });
}

Tensor fuse_masked(const Tensor& a, const Tensor& b, const std::vector<float>& m) {
    check_same_shape(a, b, "fuse_masked");
    if (a.rank() != 2 || static_cast<int>(m.size()) != a.dim(0))
        throw ShapeError("fuse_masked: mask length " + std::to_string(m.size()) + " for " +
                         std::to_string(a.dim(0)) + " rows");
    const int rows = a.dim(0), cols = a.dim(1);
    std::vector<float> out(static_cast<size_t>(rows) * cols);
    for (int i = 0; i < rows; ++i) {
        const float mi = m[static_cast<size_t>(i)];
        const float* pa = a.data().data() + i * cols;
        const float* pb = b.data().data() + i * cols;
        float* po = out.data() + i * cols;
        if (mi == 0.0f) {
            std::copy_n(pa, cols, po);
        } else if (mi == 1.0f) {
            std::copy_n(pb, cols, po);
        } else {
            for (int j = 0; j < cols; ++j) po[j] = (1.0f - mi) * pa[j] + mi * pb[j];
        }
    }
    return make_result(a.shape(), std::move(out), {a, b}, [m, rows, cols](TensorNode& node) {
        TensorNode& na = *node.parents[0];
        TensorNode& nb = *node.parents[1];
        if (na.requires_grad) {
            na.ensure_grad();
            for (int i = 0; i < rows; ++i)
                for (int j = 0; j < cols; ++j)
                    na.grad[i * cols + j] += node.grad[i * cols + j] * (1.0f - m[static_cast<size_t>(i)]);
        }
        if (nb.requires_grad) {
            nb.ensure_grad();
            for (int i = 0; i < rows; ++i)
                for (int j = 0; j < cols; ++j)
                    nb.grad[i * cols + j] += node.grad[i * cols + j] * m[static_cast<size_t>(i)];
        }
    });
}

Tensor concat_cols(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(0) != b.dim(0))
        throw ShapeError("concat_cols: " + shape_str(a.shape()) + " ++ " + shape_str(b.shape()));
    const int m = a.dim(0), p = a.dim(1), q = b.dim(1);
    std::vector<float> out(static_cast<size_t>(m) * (p + q));
    for (int i = 0; i < m; ++i) {
        std::copy_n(a.data().data() + i * p, p, out.data() + i * (p + q));
        std::copy_n(b.data().data() + i * q, q, out.data() + i * (p + q) + p);
    }
    return make_result({m, p + q}, std::move(out), {a, b}, [m, p, q](TensorNode& node) {
        TensorNode& na = *node.parents[0];
        TensorNode& nb = *node.parents[1];
        if (na.requires_grad) {
            na.ensure_grad();
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < p; ++j) na.grad[i * p + j] += node.grad[i * (p + q) + j];
        }
        if (nb.requires_grad) {
            nb.ensure_grad();
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < q; ++j) nb.grad[i * q + j] += node.grad[i * (p + q) + p + j];
        }
    });
}

Tensor slice_col(const Tensor& a, int col) {
    if (a.rank() != 2 || col < 0 || col >= a.dim(1))
        throw ShapeError("slice_col: column " + std::to_string(col) + " of " + shape_str(a.shape()));
    const int m = a.dim(0), n = a.dim(1);
    std::vector<float> out(static_cast<size_t>(m));
    for (int i = 0; i < m; ++i) out[i] = a.data()[i * n + col];
    return make_result({m}, std::move(out), {a}, [m, n, col](TensorNode& node) {
        TensorNode& na = *node.parents[0];
        if (!na.requires_grad) return;
        na.ensure_grad();
        for (int i = 0; i < m; ++i) na.grad[i * n + col] += node.grad[i];
    });
}

Tensor softmax_rows(const Tensor& x, float temperature_divisor) {
    if (x.rank() != 2) throw ShapeError("softmax_rows: rank-2 required");
    if (!(temperature_divisor > 0.0f)) throw ContractError("softmax_rows: divisor must be positive");
    for (float v : x.data())
        if (!std::isfinite(v)) throw NumericError("softmax_rows: non-finite input");
    const int m = x.dim(0), n = x.dim(1);
    std::vector<float> out(static_cast<size_t>(m) * n);
    for (int i = 0; i < m; ++i) {
        const float* row = x.data().data() + i * n;
        float mx = row[0];
        for (int j = 1; j < n; ++j) mx = std::max(mx, row[j]);
        double z = 0.0;
        for (int j = 0; j < n; ++j) {
            float e = std::exp((row[j] - mx) / temperature_divisor);
            out[i * n + j] = e;
            z += e;
        }
        const float inv = static_cast<float>(1.0 / z);
        for (int j = 0; j < n; ++j) out[i * n + j] *= inv;
    }
    return make_result(x.shape(), std::move(out), {x},
                       [m, n, temperature_divisor](TensorNode& node) {
        TensorNode& nx = *node.parents[0];
        if (!nx.requires_grad) return;
        nx.ensure_grad();
        // dx_j = y_j (g_j - sum_k g_k y_k) / T
        for (int i = 0; i < m; ++i) {
            const float* y = node.value.data() + i * n;
            const float* g = node.grad.data() + i * n;
            double dot = 0.0;
            for (int j = 0; j < n; ++j) dot += static_cast<double>(g[j]) * y[j];
            for (int j = 0; j < n; ++j)
                nx.grad[i * n + j] +=
                    y[j] * (g[j] - static_cast<float>(dot)) / temperature_divisor;
        }
    });
}

Tensor reduce_sum(const Tensor& x) {
    double s = 0.0;
    for (float v : x.data()) s += v;
    return make_result({1}, {static_cast<float>(s)}, {x}, [](TensorNode& node) {
        TensorNode& nx = *node.parents[0];
        if (!nx.requires_grad) return;
        nx.ensure_grad();
        for (float& g : nx.grad) g += node.grad[0];
    });
}

Tensor reduce_mean(const Tensor& x) {
    double s = 0.0;
    for (float v : x.data()) s += v;
    const float inv_n = 1.0f / static_cast<float>(x.numel());
    return make_result({1}, {static_cast<float>(s) * inv_n}, {x}, [inv_n](TensorNode& node) {
        TensorNode& nx = *node.parents[0];
        if (!nx.requires_grad) return;
        nx.ensure_grad();
        for (float& g : nx.grad) g += node.grad[0] * inv_n;
    });
}

namespace {
Tensor reduce_extreme(const Tensor& x, bool want_max) {
    int arg = 0;
    float best = x.data()[0];
    for (int i = 1; i < x.numel(); ++i) {
        float v = x.data()[static_cast<size_t>(i)];
        if (want_max ? v > best : v < best) {
            best = v;
            arg = i;
        }
    }
    return make_result({1}, {best}, {x}, [arg](TensorNode& node) {
        TensorNode& nx = *node.parents[0];
        if (!nx.requires_grad) return;
        nx.ensure_grad();
        nx.grad[static_cast<size_t>(arg)] += node.grad[0];
    });
}
}  // namespace

Tensor reduce_min(const Tensor& x) { return reduce_extreme(x, false); }
Tensor reduce_max(const Tensor& x) { return reduce_extreme(x, true); }

Tensor elem_abs(const Tensor& x) {
    std::vector<float> out(x.data());
    for (float& v : out) v = std::fabs(v);
    return make_result(x.shape(), std::move(out), {x}, [](TensorNode& node) {
        TensorNode& nx = *node.parents[0];
        if (!nx.requires_grad) return;
        nx.ensure_grad();
        for (size_t i = 0; i < node.grad.size(); ++i)
            nx.grad[i] += node.grad[i] * (nx.value[i] >= 0.0f ? 1.0f : -1.0f);
    });
}

Tensor elem_exp(const Tensor& x) {
    std::vector<float> out(x.data());
    for (float& v : out) v = std::exp(v);
    return make_result(x.shape(), std::move(out), {x}, [](TensorNode& node) {
        TensorNode& nx = *node.parents[0];
        if (!nx.requires_grad) return;
        nx.ensure_grad();
        for (size_t i = 0; i < node.grad.size(); ++i) nx.grad[i] += node.grad[i] * node.value[i];
    });
}

Tensor elem_log(const Tensor& x) {
    std::vector<float> out(x.data());
    for (float& v : out) {
        if (v <= 0.0f) throw NumericError("elem_log: non-positive input");
        v = std::log(v);
    }
    return make_result(x.shape(), std::move(out), {x}, [](TensorNode& node) {
        TensorNode& nx = *node.parents[0];
        if (!nx.requires_grad) return;
        nx.ensure_grad();
        for (size_t i = 0; i < node.grad.size(); ++i) nx.grad[i] += node.grad[i] / nx.value[i];
    });
}

Tensor sigmoid(const Tensor& x) {
    std::vector<float> out(x.data());
    for (float& v : out) v = v >= 0.0f ? 1.0f / (1.0f + std::exp(-v))
                                       : std::exp(v) / (1.0f + std::exp(v));
    return make_result(x.shape(), std::move(out), {x}, [](TensorNode& node) {
        TensorNode& nx = *node.parents[0];
        if (!nx.requires_grad) return;
        nx.ensure_grad();
        for (size_t i = 0; i < node.grad.size(); ++i) {
            const float y = node.value[i];
            nx.grad[i] += node.grad[i] * y * (1.0f - y);
        }
    });
}

Tensor silu(const Tensor& x) {
    std::vector<float> out(x.numel());
    for (int i = 0; i < x.numel(); ++i) {
        const float v = x.data()[static_cast<size_t>(i)];
        const float s = v >= 0.0f ? 1.0f / (1.0f + std::exp(-v)) : std::exp(v) / (1.0f + std::exp(v));
        out[static_cast<size_t>(i)] = v * s;
    }
    return make_result(x.shape(), std::move(out), {x}, [](TensorNode& node) {
        TensorNode& nx = *node.parents[0];
        if (!nx.requires_grad) return;
        nx.ensure_grad();
        for (size_t i = 0; i < node.grad.size(); ++i) {
            const float v = nx.value[i];
            const float s = v >= 0.0f ? 1.0f / (1.0f + std::exp(-v)) : std::exp(v) / (1.0f + std::exp(v));
            nx.grad[i] += node.grad[i] * (s + v * s * (1.0f - s));
        }
    });
}

Tensor softplus(const Tensor& x) {
    std::vector<float> out(x.data());
    for (float& v : out) v = v > 20.0f ? v : std::log1p(std::exp(std::min(v, 20.0f)));
    return make_result(x.shape(), std::move(out), {x}, [](TensorNode& node) {
        TensorNode& nx = *node.parents[0];
        if (!nx.requires_grad) return;
        nx.ensure_grad();
        for (size_t i = 0; i < node.grad.size(); ++i) {
            const float v = nx.value[i];
            const float s = v >= 0.0f ? 1.0f / (1.0f + std::exp(-v)) : std::exp(v) / (1.0f + std::exp(v));
            nx.grad[i] += node.grad[i] * s;
        }
    });
}

Tensor neg(const Tensor& x) { return scale(x, -1.0f); }

Tensor mse(const Tensor& pred, const Tensor& target) {
    check_same_shape(pred, target, "mse");
    double s = 0.0;
    for (int i = 0; i < pred.numel(); ++i) {
        const double d = static_cast<double>(pred.data()[static_cast<size_t>(i)]) -
                         target.data()[static_cast<size_t>(i)];
        s += d * d;
    }
    const float inv_n = 1.0f / static_cast<float>(pred.numel());
    return make_result({1}, {static_cast<float>(s / pred.numel())}, {pred, target},
                       [inv_n](TensorNode& node) {
        TensorNode& np = *node.parents[0];
        TensorNode& nt = *node.parents[1];
        const float g = node.grad[0];
        if (np.requires_grad) {
            np.ensure_grad();
            for (size_t i = 0; i < np.value.size(); ++i)
                np.grad[i] += g * 2.0f * (np.value[i] - nt.value[i]) * inv_n;
        }
        if (nt.requires_grad) {
            nt.ensure_grad();
            for (size_t i = 0; i < nt.value.size(); ++i)
                nt.grad[i] -= g * 2.0f * (np.value[i] - nt.value[i]) * inv_n;
        }
    });
}

Tensor reshape(const Tensor& x, const Shape& shape) {
    if (shape_numel(shape) != x.numel())
        throw ShapeError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
    std::vector<float> out(x.data());
    return make_result(shape, std::move(out), {x}, [](TensorNode& node) {
        TensorNode& nx = *node.parents[0];
        if (!nx.requires_grad) return;
        accum(nx, node.grad);
    });
}

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad) {
    if (x.rank() != 3 || w.rank() != 4 || x.dim(0) != w.dim(1))
        throw ShapeError("conv2d: input " + shape_str(x.shape()) + " weight " + shape_str(w.shape()));
    const int ci = x.dim(0), h = x.dim(1), wd = x.dim(2);
    const int co = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    if (b.numel() != co) throw ShapeError("conv2d: bias size");
    const int oh = (h + 2 * pad - kh) / stride + 1;
    const int ow = (wd + 2 * pad - kw) / stride + 1;
    std::vector<float> out(static_cast<size_t>(co) * oh * ow);
    const float* px = x.data().data();
    const float* pw = w.data().data();
    for (int oc = 0; oc < co; ++oc) {
        const float bias = b.data()[static_cast<size_t>(oc)];
        for (int oy = 0; oy < oh; ++oy)
            for (int ox = 0; ox < ow; ++ox) {
                float s = bias;
                for (int ic = 0; ic < ci; ++ic)
                    for (int ky = 0; ky < kh; ++ky) {
                        const int iy = oy * stride + ky - pad;
                        if (iy < 0 || iy >= h) continue;
                        for (int kx = 0; kx < kw; ++kx) {
                            const int ix = ox * stride + kx - pad;
                            if (ix < 0 || ix >= wd) continue;
                            s += px[(ic * h + iy) * wd + ix] *
                                 pw[((oc * ci + ic) * kh + ky) * kw + kx];
                        }
                    }
                out[(oc * oh + oy) * ow + ox] = s;
            }
    }
    return make_result({co, oh, ow}, std::move(out), {x, w, b},
                       [ci, h, wd, co, kh, kw, oh, ow, stride, pad](TensorNode& node) {
        TensorNode& nx = *node.parents[0];
        TensorNode& nw = *node.parents[1];
        TensorNode& nb = *node.parents[2];
        const float* g = node.grad.data();
        if (nb.requires_grad) {
            nb.ensure_grad();
            for (int oc = 0; oc < co; ++oc) {
                float s = 0.0f;
                for (int i = 0; i < oh * ow; ++i) s += g[oc * oh * ow + i];
                nb.grad[static_cast<size_t>(oc)] += s;
            }
        }
        const bool need_x = nx.requires_grad, need_w = nw.requires_grad;
        if (need_x) nx.ensure_grad();
        if (need_w) nw.ensure_grad();
        if (!need_x && !need_w) return;
        for (int oc = 0; oc < co; ++oc)
            for (int oy = 0; oy < oh; ++oy)
                for (int ox = 0; ox < ow; ++ox) {
                    const float go = g[(oc * oh + oy) * ow + ox];
                    if (go == 0.0f) continue;
                    for (int ic = 0; ic < ci; ++ic)
                        for (int ky = 0; ky < kh; ++ky) {
                            const int iy = oy * stride + ky - pad;
                            if (iy < 0 || iy >= h) continue;
                            for (int kx = 0; kx < kw; ++kx) {
                                const int ix = ox * stride + kx - pad;
                                if (ix < 0 || ix >= wd) continue;
                                const size_t xi = (static_cast<size_t>(ic) * h + iy) * wd + ix;
                                const size_t wi =
                                    ((static_cast<size_t>(oc) * ci + ic) * kh + ky) * kw + kx;
                                if (need_x) nx.grad[xi] += go * nw.value[wi];
                                if (need_w) nw.grad[wi] += go * nx.value[xi];
                            }
                        }
                }
    });
}

Tensor upsample_nearest2x(const Tensor& x) {
    if (x.rank() != 3) throw ShapeError("upsample_nearest2x: rank-3 required");
    const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
    std::vector<float> out(static_cast<size_t>(c) * 4 * h * w);
    for (int ic = 0; ic < c; ++ic)
        for (int y = 0; y < 2 * h; ++y)
            for (int xx = 0; xx < 2 * w; ++xx)
                out[(ic * 2 * h + y) * 2 * w + xx] = x.data()[(ic * h + y / 2) * w + xx / 2];
    return make_result({c, 2 * h, 2 * w}, std::move(out), {x}, [c, h, w](TensorNode& node) {
        TensorNode& nx = *node.parents[0];
        if (!nx.requires_grad) return;
        nx.ensure_grad();
        for (int ic = 0; ic < c; ++ic)
            for (int y = 0; y < 2 * h; ++y)
                for (int xx = 0; xx < 2 * w; ++xx)
                    nx.grad[(ic * h + y / 2) * w + xx / 2] += node.grad[(ic * 2 * h + y) * 2 * w + xx];
    });
}

// ---- backward ------------------------------------------------------------

void backward(const Tensor& loss) {
    if (!loss.defined() || loss.numel() != 1)
        throw ContractError("backward: loss must be a defined scalar");
    if (!loss.requires_grad()) return;  // nothing reachable wants gradients

    // Iterative post-order DFS; parents are stored in op-argument order so
    // the schedule is identical run to run.
    std::vector<TensorNode*> order;
    std::unordered_set<TensorNode*> visited;
    struct Frame {
        TensorNode* n;
        size_t next_parent;
    };
    std::vector<Frame> stack;
    stack.push_back({loss.node().get(), 0});
    visited.insert(loss.node().get());
    while (!stack.empty()) {
        Frame& f = stack.back();
        if (f.next_parent < f.n->parents.size()) {
            TensorNode* p = f.n->parents[f.next_parent++].get();
            if (p->requires_grad && visited.insert(p).second) stack.push_back({p, 0});
        } else {
            order.push_back(f.n);
            stack.pop_back();
        }
    }

    for (TensorNode* n : order) n->ensure_grad();
    loss.node()->grad[0] = 1.0f;
    for (auto it = order.rbegin(); it != order.rend(); ++it)
        if ((*it)->backprop) (*it)->backprop(**it);
}

// ---- Adam ----------------------------------------------------------------

Adam::Adam(std::vector<Tensor> parameters, float learning_rate, float b1, float b2, float epsilon)
    : params(std::move(parameters)), lr(learning_rate), beta1(b1), beta2(b2), eps(epsilon) {
    m_.reserve(params.size());
    v_.reserve(params.size());
    for (const Tensor& p : params) {
        m_.emplace_back(p.numel(), 0.0f);
        v_.emplace_back(p.numel(), 0.0f);
    }
}

void Adam::zero_grad() {
    for (Tensor& p : params) p.zero_grad();
}

void Adam::step() {
    ++t_;
    const float bc1 = 1.0f - std::pow(beta1, static_cast<float>(t_));
    const float bc2 = 1.0f - std::pow(beta2, static_cast<float>(t_));
    for (size_t pi = 0; pi < params.size(); ++pi) {
        Tensor& p = params[pi];
        if (p.node()->grad.size() != p.node()->value.size())
            throw ContractError("adam_step: gradient missing for a parameter");
        std::vector<float>& val = p.data();
        const std::vector<float>& g = p.node()->grad;
        std::vector<float>& m = m_[pi];
        std::vector<float>& v = v_[pi];
        for (size_t i = 0; i < val.size(); ++i) {
            m[i] = beta1 * m[i] + (1.0f - beta1) * g[i];
            v[i] = beta2 * v[i] + (1.0f - beta2) * g[i] * g[i];
            const float mhat = m[i] / bc1;
            const float vhat = v[i] / bc2;
            val[i] -= lr * mhat / (std::sqrt(vhat) + eps);
        }
    }
}

}  // namespace safectrl
