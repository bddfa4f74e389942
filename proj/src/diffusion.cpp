#include "safectrl/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

namespace safectrl {

// ---- schedule --------------------------------------------------------------

NoiseSchedule::NoiseSchedule(int steps, float beta_start, float beta_end) : T(steps) {
    if (T < 1) throw ContractError("noise schedule needs T >= 1");
    if (!(beta_start > 0.0f) || !(beta_end < 1.0f) || beta_start > beta_end)
        throw ContractError("noise schedule betas must satisfy 0 < start <= end < 1");
    beta.assign(static_cast<size_t>(T) + 1, 0.0f);
    alpha_bar.assign(static_cast<size_t>(T) + 1, 1.0f);
    for (int t = 1; t <= T; ++t) {
        const float frac = T == 1 ? 0.0f : static_cast<float>(t - 1) / static_cast<float>(T - 1);
        beta[static_cast<size_t>(t)] = beta_start + (beta_end - beta_start) * frac;
        alpha_bar[static_cast<size_t>(t)] =
            alpha_bar[static_cast<size_t>(t - 1)] * (1.0f - beta[static_cast<size_t>(t)]);
    }
}

float NoiseSchedule::sqrt_alpha_bar(int t) const {
    if (t < 0 || t > T) throw ContractError("timestep " + std::to_string(t) + " outside [0," + std::to_string(T) + "]");
    return std::sqrt(alpha_bar[static_cast<size_t>(t)]);
}

float NoiseSchedule::sqrt_one_minus_alpha_bar(int t) const {
    if (t < 0 || t > T) throw ContractError("timestep " + std::to_string(t) + " outside [0," + std::to_string(T) + "]");
    return std::sqrt(1.0f - alpha_bar[static_cast<size_t>(t)]);
}

Tensor forward_noise(const Tensor& x0, int t, const Tensor& eps, const NoiseSchedule& sched) {
    if (x0.shape() != eps.shape()) throw ShapeError("forward_noise: x0 and eps shapes differ");
    const float sa = sched.sqrt_alpha_bar(t);
    const float sb = sched.sqrt_one_minus_alpha_bar(t);
    // 2 x0 - 1: unit-range image -> centered domain (see header).
    Tensor centered = add(scale(x0, 2.0f), Tensor::full(x0.shape(), -1.0f));
    return add(scale(centered, sa), scale(eps, sb));
}

Tensor time_embedding(int t, int dim) {
    if (dim < 2 || dim % 2 != 0) throw ContractError("time_embedding dim must be even and >= 2");
    const int half = dim / 2;
    std::vector<float> data(static_cast<size_t>(dim));
    for (int i = 0; i < half; ++i) {
        const float freq = std::exp(-std::log(10000.0f) * static_cast<float>(i) / static_cast<float>(half));
        const float angle = static_cast<float>(t) * freq;
        data[static_cast<size_t>(2 * i)] = std::sin(angle);
        data[static_cast<size_t>(2 * i + 1)] = std::cos(angle);
    }
    return Tensor::from_data({1, dim}, std::move(data));
}

// ---- denoiser ---------------------------------------------------------------

Denoiser Denoiser::init(Rng& rng) {
    Denoiser dn;
    const int F = dn.channels, d = dn.d, dt = dn.d_text;
    const int vocab = static_cast<int>(vocabulary().size());
    // Draw order below is fixed; changing it changes every seeded artifact.
    dn.embed = Tensor::randn({vocab, dt}, rng, 1.0f, true);
    dn.conv_in_w = Tensor::randn({F, 3, 3, 3}, rng, std::sqrt(2.0f / (3 * 9)), true);
    dn.conv_in_b = Tensor::zeros({F}, true);
    dn.conv_down_w = Tensor::randn({F, F, 3, 3}, rng, std::sqrt(2.0f / (F * 9)), true);
    dn.conv_down_b = Tensor::zeros({F}, true);
    dn.time_w = Tensor::randn({32, F}, rng, 1.0f / std::sqrt(32.0f), true);
    dn.time_b = Tensor::zeros({F}, true);
    // Smooth 2D sinusoidal position code (learnable). Smoothness matters:
    // with tied self-attention Q/K below, nearby cells start out attending
    // each other, which is the locality prior mask refinement relies on.
    {
        std::vector<float> pe(static_cast<size_t>(kAttnHW) * F);
        for (int y = 0; y < kAttnSize; ++y)
            for (int x = 0; x < kAttnSize; ++x)
                for (int ch = 0; ch < F; ++ch) {
                    const int quad = ch % 4, band = ch / 4;
                    const float freq = 0.7f * std::pow(1.6f, static_cast<float>(band));
                    const float arg = freq * static_cast<float>(quad < 2 ? y : x);
                    pe[static_cast<size_t>(y * kAttnSize + x) * F + ch] =
                        1.05f * (quad % 2 == 0 ? std::sin(arg) : std::cos(arg));
                }
        dn.pos_emb = Tensor::from_data({kAttnHW, F}, std::move(pe), true);
    }
    dn.wqs = Tensor::randn({F, d}, rng, 2.0f / std::sqrt(static_cast<float>(F)), true);
    // Tied Q/K at init: self-attention starts as feature similarity, so the
    // map is diagonal-heavy instead of structureless noise. The two weights
    // train independently afterwards.
    dn.wks = dn.wqs.clone(true);
    dn.wvs = Tensor::randn({F, d}, rng, 1.0f / std::sqrt(static_cast<float>(F)), true);
    dn.wos = Tensor::randn({d, F}, rng, 0.5f / std::sqrt(static_cast<float>(d)), true);
    dn.wqc = Tensor::randn({F, d}, rng, 1.0f / std::sqrt(static_cast<float>(F)), true);
    dn.wkc = Tensor::randn({dt, d}, rng, 1.0f / std::sqrt(static_cast<float>(dt)), true);
    dn.wvc = Tensor::randn({dt, d}, rng, 1.0f / std::sqrt(static_cast<float>(dt)), true);
    dn.woc = Tensor::randn({d, F}, rng, 0.5f / std::sqrt(static_cast<float>(d)), true);
    dn.conv_up_w = Tensor::randn({F, F, 3, 3}, rng, std::sqrt(2.0f / (F * 9)), true);
    dn.conv_up_b = Tensor::zeros({F}, true);
    dn.conv_out_w = Tensor::randn({3, F, 3, 3}, rng, 0.02f, true);
    dn.conv_out_b = Tensor::zeros({3}, true);
    return dn;
}

NamedTensors Denoiser::named() const {
    return {
        {"embed", embed},
        {"conv_in.w", conv_in_w},     {"conv_in.b", conv_in_b},
        {"conv_down.w", conv_down_w}, {"conv_down.b", conv_down_b},
        {"time.w", time_w},           {"time.b", time_b},
        {"pos_emb", pos_emb},
        {"self.wq", wqs}, {"self.wk", wks}, {"self.wv", wvs}, {"self.wo", wos},
        {"cross.wq", wqc}, {"cross.wk", wkc}, {"cross.wv", wvc}, {"cross.wo", woc},
        {"conv_up.w", conv_up_w},     {"conv_up.b", conv_up_b},
        {"conv_out.w", conv_out_w},   {"conv_out.b", conv_out_b},
    };
}

Denoiser Denoiser::from_named(const NamedTensors& ts) {
    Denoiser dn;
    dn.embed = checkpoint_get(ts, "embed").clone();
    dn.conv_in_w = checkpoint_get(ts, "conv_in.w").clone();
    dn.conv_in_b = checkpoint_get(ts, "conv_in.b").clone();
    dn.conv_down_w = checkpoint_get(ts, "conv_down.w").clone();
    dn.conv_down_b = checkpoint_get(ts, "conv_down.b").clone();
    dn.time_w = checkpoint_get(ts, "time.w").clone();
    dn.time_b = checkpoint_get(ts, "time.b").clone();
    dn.pos_emb = checkpoint_get(ts, "pos_emb").clone();
    dn.wqs = checkpoint_get(ts, "self.wq").clone();
    dn.wks = checkpoint_get(ts, "self.wk").clone();
    dn.wvs = checkpoint_get(ts, "self.wv").clone();
    dn.wos = checkpoint_get(ts, "self.wo").clone();
    dn.wqc = checkpoint_get(ts, "cross.wq").clone();
    dn.wkc = checkpoint_get(ts, "cross.wk").clone();
    dn.wvc = checkpoint_get(ts, "cross.wv").clone();
    dn.woc = checkpoint_get(ts, "cross.wo").clone();
    dn.conv_up_w = checkpoint_get(ts, "conv_up.w").clone();
    dn.conv_up_b = checkpoint_get(ts, "conv_up.b").clone();
    dn.conv_out_w = checkpoint_get(ts, "conv_out.w").clone();
    dn.conv_out_b = checkpoint_get(ts, "conv_out.b").clone();
    dn.channels = dn.conv_in_w.dim(0);
    dn.d = dn.wqs.dim(1);
    dn.d_text = dn.embed.dim(1);
    return dn;
}

std::vector<Tensor> Denoiser::params() const {
    return {embed,   conv_in_w, conv_in_b, conv_down_w, conv_down_b, time_w,     time_b,
            pos_emb, wqs,       wks,       wvs,         wos,         wqc,        wkc,
            wvc,     woc,       conv_up_w, conv_up_b,   conv_out_w,  conv_out_b};
}

void Denoiser::set_requires_grad(bool rg) {
    for (Tensor t : params()) t.set_requires_grad(rg);
}

PromptEmbedding Denoiser::embed_prompt(const std::vector<int>& tokens) const {
    if (tokens.empty() || tokens[0] != kNullToken)
        throw ContractError("prompt must start with the null token");
    if (static_cast<int>(tokens.size()) > kMaxPromptLen)
        throw ContractError("prompt longer than " + std::to_string(kMaxPromptLen) + " tokens");
    return PromptEmbedding{tokens, gather_rows(embed, tokens)};
}

std::pair<Tensor, AttentionBundle> denoise_step(const Denoiser& dn, const Tensor& z_t, int t,
                                                const PromptEmbedding& c, const DenoiseHooks& hooks) {
    if (z_t.rank() != 3 || z_t.dim(0) != 3 || z_t.dim(1) != kImageSize || z_t.dim(2) != kImageSize)
        throw ShapeError("denoise_step: latent must be [3,16,16]");
    const int F = dn.channels;
    const float sqrt_d = std::sqrt(static_cast<float>(dn.d));

    auto h0 = silu(conv2d(z_t, dn.conv_in_w, dn.conv_in_b, 1, 1));      // [F,16,16]
    auto h1 = silu(conv2d(h0, dn.conv_down_w, dn.conv_down_b, 2, 1));   // [F,8,8]
    auto f = transpose(reshape(h1, {F, kAttnHW}));                      // [HW,F]

    auto tfeat = silu(add_rowvec(matmul(time_embedding(t, 32), dn.time_w), dn.time_b));
    f = add_rowvec(f, reshape(tfeat, {F}));

    // The position code steers the attention pattern (self queries/keys) but
    // stays out of the value/residual stream: downstream cross-attention
    // queries then carry content only, so token routing cannot degenerate
    // into a fixed where-objects-usually-are prior.
    auto fp = add(f, dn.pos_emb);
    auto qs = matmul(fp, dn.wqs);
    auto ks = matmul(fp, dn.wks);
    auto vs = matmul(f, dn.wvs);
    auto a_self = softmax_rows(matmul(qs, transpose(ks)), sqrt_d);      // [HW,HW]
    auto f1 = add(f, matmul(matmul(a_self, vs), dn.wos));

    auto qc = matmul(f1, dn.wqc);                                       // [HW,d]
    auto kc = matmul(c.c, dn.wkc);                                      // [L,d]
    auto vc = matmul(c.c, dn.wvc);                                      // [L,d]
    auto zc = matmul(qc, transpose(kc));                                // [HW,L]
    auto a_gen = softmax_rows(zc, sqrt_d);
    auto v_out = matmul(a_gen, vc);                                     // [HW,d]

    AttentionBundle bundle;
    bundle.a_self = a_self;
    bundle.a_cross_gen = a_gen;
    bundle.a_cross = a_gen;
    bundle.c = c.c;
    bundle.t = t;
    if (hooks.probe) {
        // Probe branch only adds nodes; the generation path above is untouched,
        // so attaching a probe never changes the predicted noise.
        auto k_risk = matmul(reshape(hooks.probe->q_risk, {1, dn.d_text}), dn.wkc);  // [1,d]
        auto zr = matmul(qc, transpose(k_risk));                                     // [HW,1]
        auto divisor = scale(elem_exp(hooks.probe->log_temp), sqrt_d);
        bundle.a_cross = softmax_rows(div_by_scalar(concat_cols(zc, zr), divisor), 1.0f);
        bundle.risk_token_index = static_cast<int>(c.tokens.size());
    }
    if (hooks.value_hook) {
        v_out = hooks.value_hook(v_out, bundle);
        if (v_out.shape() != Shape{kAttnHW, dn.d})
            throw ShapeError("value hook returned a wrong-shaped replacement");
    }

    auto f2 = add(f1, matmul(v_out, dn.woc));
    auto g = reshape(transpose(f2), {F, kAttnSize, kAttnSize});
    auto u = add(upsample_nearest2x(g), h0);                            // skip from conv_in
    auto u2 = silu(conv2d(u, dn.conv_up_w, dn.conv_up_b, 1, 1));
    auto v_pred = conv2d(u2, dn.conv_out_w, dn.conv_out_b, 1, 1);       // [3,16,16]
    // The head predicts v = sa*eps - sb*x0c; the step always returns
    // eps_hat = sa*v_hat + sb*z_t (algebraically exact, no division). With a
    // raw eps head, copying z_t is near-optimal at large t, so the network
    // never learns the prompt-conditioned clean-image component and reverse
    // sampling from pure noise stays structureless. Under this
    // parameterization the large-t task becomes "estimate the clean image",
    // which is exactly what seeds generation. The conversion uses the fixed
    // default schedule; t indices everywhere in this codebase refer to it.
    static const NoiseSchedule kPinnedSched;
    const float conv_sa = kPinnedSched.sqrt_alpha_bar(t);
    const float conv_sb = kPinnedSched.sqrt_one_minus_alpha_bar(t);
    auto eps = add(scale(v_pred, conv_sa), scale(z_t, conv_sb));
    assert_finite(eps, "denoise_step output");
    return {eps, bundle};
}

// ---- sampling ---------------------------------------------------------------

Tensor ddim_sample(const Denoiser& dn, const NoiseSchedule& sched, const PromptEmbedding& c,
                   int steps, std::uint64_t seed, StepObserver* observer) {
    if (steps < 1 || sched.T % steps != 0)
        throw ContractError("ddim steps must evenly divide T=" + std::to_string(sched.T));
    const int stride = sched.T / steps;

    Rng rng(derive_seed(seed, "ddim_init", 0));
    Tensor z = Tensor::randn({3, kImageSize, kImageSize}, rng);

    for (int i = 0; i < steps; ++i) {
        const int t = sched.T - i * stride;
        const int t_next = (i + 1 < steps) ? sched.T - (i + 1) * stride : 0;

        DenoiseHooks hooks;
        if (observer) hooks = observer->begin_step(t);
        auto [eps, bundle] = denoise_step(dn, z, t, c, hooks);
        if (observer) observer->end_step(t, bundle);

        const float sa = sched.sqrt_alpha_bar(t);
        const float sb = sched.sqrt_one_minus_alpha_bar(t);
        const float sa_n = sched.sqrt_alpha_bar(t_next);
        const float sb_n = sched.sqrt_one_minus_alpha_bar(t_next);

        // x0 estimate clipped to the valid centered range, then the eta=0
        // jump. The noise direction is re-derived from the clipped estimate
        // so the pair stays consistent with z_t = sa x0 + sb eps; feeding the
        // raw eps alongside a clipped x0 lets amplitude errors compound
        // across steps instead of contracting.
        std::vector<float> next(z.data().size());
        for (size_t j = 0; j < next.size(); ++j) {
            float x0 = (z.data()[j] - sb * eps.data()[j]) / sa;
            x0 = x0 < -1.0f ? -1.0f : (x0 > 1.0f ? 1.0f : x0);
            const float eps_eff = (z.data()[j] - sa * x0) / sb;
            next[j] = sa_n * x0 + sb_n * eps_eff;
        }
        z = Tensor::from_data(z.shape(), std::move(next));
    }
    // centered domain -> unit range
    return add(scale(z, 0.5f), Tensor::full(z.shape(), 0.5f));
}

// ---- base training ----------------------------------------------------------

DenoiserTrainResult train_denoiser(const std::vector<TrainSample>& dataset,
                                   const NoiseSchedule& sched, int epochs, float lr,
                                   std::uint64_t seed) {
    if (dataset.empty()) throw ContractError("train_denoiser: empty dataset");

    Rng init_rng(derive_seed(seed, "denoiser_init", 0));
    Denoiser dn = Denoiser::init(init_rng);
    Adam opt(dn.params(), lr);

    // deterministic tail split for validation
    const int n = static_cast<int>(dataset.size());
    const int n_val = n >= 20 ? std::max(2, n / 10) : 0;
    const int n_train = n - n_val;

    // fixed (t, eps) per validation sample so epoch-to-epoch comparison is noise-free
    Rng val_rng(derive_seed(seed, "denoiser_val", 0));
    std::vector<int> val_t;
    std::vector<Tensor> val_eps;
    for (int i = 0; i < n_val; ++i) {
        val_t.push_back(val_rng.uniform_int(1, sched.T));
        val_eps.push_back(Tensor::randn({3, kImageSize, kImageSize}, val_rng));
    }

    Rng train_rng(derive_seed(seed, "denoiser_train", 0));
    std::vector<int> order(static_cast<size_t>(n_train));
    std::iota(order.begin(), order.end(), 0);

    DenoiserTrainResult result;
    for (int epoch = 0; epoch < epochs; ++epoch) {
        for (int i = n_train - 1; i > 0; --i)
            std::swap(order[static_cast<size_t>(i)], order[static_cast<size_t>(train_rng.uniform_int(0, i))]);

        for (int idx : order) {
            const TrainSample& s = dataset[static_cast<size_t>(idx)];
            const int t = train_rng.uniform_int(1, sched.T);
            auto eps = Tensor::randn({3, kImageSize, kImageSize}, train_rng);
            auto z = forward_noise(s.image, t, eps, sched);
            auto c = dn.embed_prompt(s.tokens);
            auto [pred, bundle] = denoise_step(dn, z, t, c);
            auto loss = mse(pred, eps);
            assert_finite(loss, "denoiser training loss");
            opt.zero_grad();
            backward(loss);
            opt.step();
        }

        double val_sum = 0.0;
        for (int i = 0; i < n_val; ++i) {
            const TrainSample& s = dataset[static_cast<size_t>(n_train + i)];
            auto z = forward_noise(s.image, val_t[static_cast<size_t>(i)],
                                   val_eps[static_cast<size_t>(i)], sched);
            auto c = dn.embed_prompt(s.tokens);
            auto [pred, bundle] = denoise_step(dn, z, val_t[static_cast<size_t>(i)], c);
            val_sum += mse(pred, val_eps[static_cast<size_t>(i)]).item();
        }
        result.val_mse_per_epoch.push_back(n_val ? static_cast<float>(val_sum / n_val) : 0.0f);
    }

    dn.set_requires_grad(false);  // frozen from here on
    result.model = dn;
    return result;
}

}  // namespace safectrl
