#include "safectrl/detect.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace safectrl {

Tensor minmax_norm(const Tensor& m) {
    auto mn = reduce_min(m);
    auto mx = reduce_max(m);
    if (mx.item() - mn.item() < kNormFlatEps) return Tensor::zeros(m.shape());
    auto shifted = add_scalar_bcast(m, neg(mn));
    return div_by_scalar(shifted, sub(mx, mn));
}

DetectHead DetectHead::init(int d_text, Rng& rng) {
    DetectHead h;
    h.q_risk = Tensor::randn({d_text}, rng, 1.0f, true);
    h.log_temp = Tensor::zeros({1}, true);
    return h;
}

NamedTensors DetectHead::named() const {
    return {{"detect.q_risk", q_risk}, {"detect.log_temp", log_temp}};
}

DetectHead DetectHead::from_named(const NamedTensors& ts) {
    DetectHead h;
    h.q_risk = checkpoint_get(ts, "detect.q_risk").clone();
    h.log_temp = checkpoint_get(ts, "detect.log_temp").clone();
    return h;
}

std::vector<Tensor> DetectHead::params() const { return {q_risk, log_temp}; }

void DetectHead::set_requires_grad(bool rg) {
    for (Tensor t : params()) t.set_requires_grad(rg);
}

RiskMask fuse_attention_maps(const AttentionBundle& bundle, int risk_token_index) {
    const int hw = bundle.h * bundle.w;
    if (bundle.a_cross.dim(0) != hw || bundle.a_self.shape() != Shape{hw, hw})
        throw ShapeError("fuse_attention_maps: bundle maps do not match the layer grid");
    auto a = reshape(slice_col(bundle.a_cross, risk_token_index), {hw, 1});
    // Each cell reads the risk of the cells it attends to: a convex,
    // similarity-weighted smoothing of the raw column. (The transposed
    // orientation would instead reward globally popular attention targets,
    // which swamps the risk signal.)
    auto refined = matmul(bundle.a_self, a);  // [hw, 1]
    RiskMask out;
    out.m = minmax_norm(reshape(refined, {bundle.h, bundle.w}));
    out.t = bundle.t;
    return out;
}

Tensor detection_loss(const Tensor& a_cross_risk, const Tensor& m_t, const Tensor& m_gt,
                      float lambda_dice, float lambda_l1) {
    if (a_cross_risk.shape() != m_gt.shape() || m_t.shape() != m_gt.shape())
        throw ShapeError("detection_loss: map shapes differ");
    auto smooth = Tensor::scalar(kDiceSmooth);
    auto num = add(scale(reduce_sum(mul(a_cross_risk, m_gt)), 2.0f), smooth);
    auto den = add(add(reduce_sum(a_cross_risk), reduce_sum(m_gt)), smooth);
    auto dice = sub(Tensor::scalar(1.0f), div_by_scalar(num, den));
    auto l1 = reduce_mean(elem_abs(sub(m_t, m_gt)));
    return add(scale(dice, lambda_dice), scale(l1, lambda_l1));
}

Tensor accumulate_masks(const std::vector<Tensor>& masks) {
    if (masks.empty()) throw ContractError("accumulate_masks: empty list");
    auto acc = masks[0];
    for (size_t i = 1; i < masks.size(); ++i) {
        if (masks[i].shape() != acc.shape())
            throw ShapeError("accumulate_masks: resolution mismatch");
        acc = add(acc, masks[i]);
    }
    return minmax_norm(scale(acc, 1.0f / static_cast<float>(masks.size())));
}

Tensor binarize(const Tensor& m, float theta) {
    std::vector<float> out(m.data().size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = m.data()[i] > theta ? 1.0f : 0.0f;
    return Tensor::from_data(m.shape(), std::move(out));
}

float miou(const Tensor& pred_bin, const Tensor& gt_bin) {
    if (pred_bin.shape() != gt_bin.shape()) throw ShapeError("miou: shape mismatch");
    int inter = 0, uni = 0;
    for (int i = 0; i < pred_bin.numel(); ++i) {
        const bool p = pred_bin.data()[static_cast<size_t>(i)] != 0.0f;
        const bool g = gt_bin.data()[static_cast<size_t>(i)] != 0.0f;
        inter += (p && g) ? 1 : 0;
        uni += (p || g) ? 1 : 0;
    }
    return uni == 0 ? 1.0f : static_cast<float>(inter) / static_cast<float>(uni);
}

Tensor pool_max2x2(const Tensor& m) {
    if (m.rank() != 2 || m.dim(0) % 2 != 0 || m.dim(1) % 2 != 0)
        throw ShapeError("pool_max2x2: even [H,W] required");
    const int oh = m.dim(0) / 2, ow = m.dim(1) / 2;
    std::vector<float> out(static_cast<size_t>(oh) * ow);
    for (int y = 0; y < oh; ++y)
        for (int x = 0; x < ow; ++x) {
            float v = m.data()[(2 * y) * m.dim(1) + 2 * x];
            v = std::max(v, m.data()[(2 * y) * m.dim(1) + 2 * x + 1]);
            v = std::max(v, m.data()[(2 * y + 1) * m.dim(1) + 2 * x]);
            v = std::max(v, m.data()[(2 * y + 1) * m.dim(1) + 2 * x + 1]);
            out[static_cast<size_t>(y) * ow + x] = v;
        }
    return Tensor::from_data({oh, ow}, std::move(out));
}

Tensor resize_nearest(const Tensor& m, int out_h, int out_w) {
    if (m.rank() != 2) throw ShapeError("resize_nearest: rank-2 required");
    const int h = m.dim(0), w = m.dim(1);
    if (h == out_h && w == out_w) return m.clone();
    std::vector<float> out(static_cast<size_t>(out_h) * out_w);
    for (int y = 0; y < out_h; ++y)
        for (int x = 0; x < out_w; ++x)
            out[static_cast<size_t>(y) * out_w + x] =
                m.data()[(y * h / out_h) * w + (x * w / out_w)];
    return Tensor::from_data({out_h, out_w}, std::move(out));
}

Tensor detect_accumulated_mask(const Denoiser& dn, const NoiseSchedule& sched,
                               const DetectHead& head, const Tensor& image,
                               const std::vector<int>& tokens, int t_lo, int t_hi, int stride,
                               std::uint64_t seed) {
    auto c = dn.embed_prompt(tokens);
    RiskProbe probe = head.probe();
    DenoiseHooks hooks;
    hooks.probe = &probe;
    Rng rng(derive_seed(seed, "detect_window", 0));
    std::vector<Tensor> masks;
    for (int t = t_hi; t >= t_lo; t -= stride) {
        auto eps = Tensor::randn({3, kImageSize, kImageSize}, rng);
        auto z = forward_noise(image, t, eps, sched);
        auto bundle = denoise_step(dn, z, t, c, hooks).second;
        masks.push_back(fuse_attention_maps(bundle, bundle.risk_token_index).m);
    }
    return accumulate_masks(masks);
}

// Shift an image and its mask by whole attention cells (even pixel counts),
// filling vacated pixels with the bottom-right corner color (pure background
// by the scene layout). Keeps the few-shot head from memorizing where the
// annotated objects happen to sit instead of what they look like.
static std::pair<Tensor, Tensor> shift_annotated(const Tensor& image, const Tensor& mask16,
                                                 int sy, int sx) {
    const int n = kImageSize;
    auto img = Tensor::zeros(image.shape());
    auto msk = Tensor::zeros(mask16.shape());
    const int channels = image.dim(0);
    for (int k = 0; k < channels; ++k) {
        const float fill =
            image.data()[(static_cast<size_t>(k) * n + (n - 1)) * n + (n - 1)];
        for (int y = 0; y < n; ++y)
            for (int x = 0; x < n; ++x) {
                const int oy = y - sy, ox = x - sx;
                const bool in = oy >= 0 && oy < n && ox >= 0 && ox < n;
                img.data()[(static_cast<size_t>(k) * n + y) * n + x] =
                    in ? image.data()[(static_cast<size_t>(k) * n + oy) * n + ox] : fill;
            }
    }
    for (int y = 0; y < n; ++y)
        for (int x = 0; x < n; ++x) {
            const int oy = y - sy, ox = x - sx;
            const bool in = oy >= 0 && oy < n && ox >= 0 && ox < n;
            msk.data()[static_cast<size_t>(y) * n + x] =
                in ? mask16.data()[static_cast<size_t>(oy) * n + ox] : 0.0f;
        }
    return {img, msk};
}

DetectTrainResult train_detect(const Denoiser& dn, const NoiseSchedule& sched,
                               const std::vector<AnnotatedSample>& shots,
                               const std::vector<AnnotatedSample>& heldout, int t_lo, int t_hi,
                               int epochs, float lr, float lambda_dice, float lambda_l1,
                               std::uint64_t seed) {
    if (shots.empty()) throw ContractError("train_detect: empty annotation set");
    for (const Tensor& p : dn.params())
        if (p.requires_grad()) throw ContractError("train_detect: denoiser must be frozen");

    Rng init_rng(derive_seed(seed, "detect_init", 0));
    DetectHead head = DetectHead::init(dn.d_text, init_rng);
    Adam opt(head.params(), lr);

    Rng train_rng(derive_seed(seed, "detect_train", 0));
    std::vector<int> order(shots.size());
    std::iota(order.begin(), order.end(), 0);

    DetectTrainResult result;
    for (int epoch = 0; epoch < epochs; ++epoch) {
        for (int i = static_cast<int>(order.size()) - 1; i > 0; --i)
            std::swap(order[static_cast<size_t>(i)], order[static_cast<size_t>(train_rng.uniform_int(0, i))]);

        double loss_sum = 0.0;
        for (int idx : order) {
            const AnnotatedSample& s = shots[static_cast<size_t>(idx)];

            // Random cell-aligned translation keeping the annotated region in
            // frame; empty masks stay put.
            int py0 = kImageSize, py1 = -1, px0 = kImageSize, px1 = -1;
            for (int y = 0; y < kImageSize; ++y)
                for (int x = 0; x < kImageSize; ++x)
                    if (s.mask16.data()[static_cast<size_t>(y) * kImageSize + x] > 0.5f) {
                        py0 = std::min(py0, y);
                        py1 = std::max(py1, y);
                        px0 = std::min(px0, x);
                        px1 = std::max(px1, x);
                    }
            Tensor image = s.image;
            Tensor mask16 = s.mask16;
            if (py1 >= 0) {
                const int sy = 2 * train_rng.uniform_int(-(py0 / 2), (kImageSize - 1 - py1) / 2);
                const int sx = 2 * train_rng.uniform_int(-(px0 / 2), (kImageSize - 1 - px1) / 2);
                if (sy != 0 || sx != 0) {
                    auto shifted = shift_annotated(image, mask16, sy, sx);
                    image = shifted.first;
                    mask16 = shifted.second;
                }
            }

            const int t = train_rng.uniform_int(t_lo, t_hi);
            auto eps = Tensor::randn({3, kImageSize, kImageSize}, train_rng);
            auto z = forward_noise(image, t, eps, sched);
            auto c = dn.embed_prompt(s.tokens);
            RiskProbe probe = head.probe();
            DenoiseHooks hooks;
            hooks.probe = &probe;
            auto bundle = denoise_step(dn, z, t, c, hooks).second;

            auto a_raw = reshape(slice_col(bundle.a_cross, bundle.risk_token_index),
                                 {kAttnSize, kAttnSize});
            auto m_t = fuse_attention_maps(bundle, bundle.risk_token_index).m;
            auto gt8 = pool_max2x2(mask16);
            auto loss = detection_loss(a_raw, m_t, gt8, lambda_dice, lambda_l1);
            assert_finite(loss, "detection loss");
            loss_sum += loss.item();
            opt.zero_grad();
            backward(loss);
            opt.step();
        }
        result.train_loss_per_epoch.push_back(static_cast<float>(loss_sum / shots.size()));

        if (!heldout.empty()) {
            double iou_sum = 0.0;
            for (size_t i = 0; i < heldout.size(); ++i) {
                auto acc = detect_accumulated_mask(dn, sched, head, heldout[i].image,
                                                   heldout[i].tokens, t_lo, t_hi, 20,
                                                   derive_seed(seed, "detect_eval", i));
                iou_sum += miou(binarize(acc, 0.5f), binarize(pool_max2x2(heldout[i].mask16), 0.5f));
            }
            result.heldout_miou_per_epoch.push_back(static_cast<float>(iou_sum / heldout.size()));
        }
    }

    head.set_requires_grad(false);
    result.head = head;
    return result;
}

}  // namespace safectrl
