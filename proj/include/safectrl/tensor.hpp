#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <vector>

#include "safectrl/errors.hpp"
#include "safectrl/rng.hpp"

namespace safectrl {

using Shape = std::vector<int>;

inline int shape_numel(const Shape& s) {
    int n = 1;
    for (int d : s) n *= d;
    return n;
}

// One node of the computation graph. Nodes record their parents and a
// backprop closure when any input carries requires_grad; otherwise they are
// plain value buffers and the graph stays empty (cheap inference).
struct TensorNode {
    Shape shape;
    std::vector<float> value;
    std::vector<float> grad;  // sized lazily by backward()
    bool requires_grad = false;
    std::int64_t id = 0;  // creation order; fixes the backward schedule
    std::vector<std::shared_ptr<TensorNode>> parents;
    std::function<void(TensorNode&)> backprop;

    int numel() const { return static_cast<int>(value.size()); }
    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), 0.0f);
    }
};

class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(const Shape& shape, bool requires_grad = false);
    static Tensor full(const Shape& shape, float v, bool requires_grad = false);
    static Tensor from_data(const Shape& shape, std::vector<float> data, bool requires_grad = false);
    static Tensor scalar(float v, bool requires_grad = false);
    static Tensor randn(const Shape& shape, Rng& rng, float stddev = 1.0f, bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    int dim(int i) const { return node_->shape[static_cast<size_t>(i)]; }
    int rank() const { return static_cast<int>(node_->shape.size()); }
    int numel() const { return node_->numel(); }

    std::vector<float>& data() { return node_->value; }
    const std::vector<float>& data() const { return node_->value; }
    float item() const;

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool rg) { node_->requires_grad = rg; }
    const std::vector<float>& grad() const;
    void zero_grad() { node_->grad.assign(node_->value.size(), 0.0f); }

    // Deep copy of values only; the copy is a fresh leaf.
    Tensor clone(bool requires_grad = false) const;

    std::shared_ptr<TensorNode> node() const { return node_; }
    explicit Tensor(std::shared_ptr<TensorNode> n) : node_(std::move(n)) {}

private:
    std::shared_ptr<TensorNode> node_;
};

// ---- differentiable ops -------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);          // [m,k]x[k,n]
Tensor transpose(const Tensor& a);                        // [m,n] -> [n,m]
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);             // elementwise
Tensor scale(const Tensor& a, float s);
Tensor add_rowvec(const Tensor& x, const Tensor& v);      // [m,n] + [n]
Tensor div_by_scalar(const Tensor& x, const Tensor& s);   // s is a 1-element tensor
Tensor mul_by_scalar(const Tensor& x, const Tensor& s);   // s is a 1-element tensor
Tensor add_scalar_bcast(const Tensor& x, const Tensor& s);  // x + s broadcast
Tensor gather_rows(const Tensor& table, const std::vector<int>& rows);  // [V,d] -> [len,d]
// Row-masked blend (1-m[i])*a[i,:] + m[i]*b[i,:] with exact selection at
// m in {0,1}: those rows are bit-copies of a resp. b, never arithmetic.
Tensor fuse_masked(const Tensor& a, const Tensor& b, const std::vector<float>& m);
Tensor concat_cols(const Tensor& a, const Tensor& b);     // [m,p] ++ [m,q]
Tensor slice_col(const Tensor& a, int col);               // [m,n] -> [m]
Tensor softmax_rows(const Tensor& x, float temperature_divisor);
Tensor reduce_sum(const Tensor& x);
Tensor reduce_mean(const Tensor& x);
Tensor reduce_min(const Tensor& x);
Tensor reduce_max(const Tensor& x);
Tensor elem_abs(const Tensor& x);
Tensor elem_exp(const Tensor& x);
Tensor elem_log(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor silu(const Tensor& x);
Tensor softplus(const Tensor& x);
Tensor neg(const Tensor& x);
Tensor mse(const Tensor& pred, const Tensor& target);
Tensor reshape(const Tensor& x, const Shape& shape);
// x: [C,H,W], w: [O,C,kh,kw], b: [O]
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad);
Tensor upsample_nearest2x(const Tensor& x);               // [C,H,W] -> [C,2H,2W]

// Reverse-mode sweep from a scalar loss. Populates .grad on every
// requires_grad leaf reachable from it. Deterministic for a fixed graph.
void backward(const Tensor& loss);

void assert_finite(const Tensor& t, const char* what);

// ---- optimizer ----------------------------------------------------------

struct Adam {
    std::vector<Tensor> params;
    float lr = 1e-3f;
    float beta1 = 0.9f;
    float beta2 = 0.999f;
    float eps = 1e-8f;

    explicit Adam(std::vector<Tensor> parameters, float learning_rate = 1e-3f,
                  float b1 = 0.9f, float b2 = 0.999f, float epsilon = 1e-8f);

    void step();       // requires grads populated on every param
    void zero_grad();

private:
    std::vector<std::vector<float>> m_;
    std::vector<std::vector<float>> v_;
    std::int64_t t_ = 0;
};

}  // namespace safectrl
