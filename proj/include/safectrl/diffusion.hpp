#pragma once

#include <cstdint>
#include <functional>
#include <utility>
#include <vector>

#include "safectrl/checkpoint.hpp"
#include "safectrl/tensor.hpp"
#include "safectrl/vocab.hpp"

namespace safectrl {

// Image/latent geometry: pixel space is the latent space (no autoencoder).
inline constexpr int kImageSize = 16;
inline constexpr int kAttnSize = 8;             // attention grid is 8x8
inline constexpr int kAttnHW = kAttnSize * kAttnSize;

struct NoiseSchedule {
    int T = 1000;
    std::vector<float> beta;       // beta[t] for t in 1..T; beta[0] = 0
    std::vector<float> alpha_bar;  // cumulative products; alpha_bar[0] = 1

    explicit NoiseSchedule(int steps = 1000, float beta_start = 1e-4f, float beta_end = 2e-2f);
    float sqrt_alpha_bar(int t) const;
    float sqrt_one_minus_alpha_bar(int t) const;
};

struct PromptEmbedding {
    std::vector<int> tokens;  // always starts with the null token; length <= 8
    Tensor c;                 // [L, d_text]
};

// z_t = sqrt(alpha_bar_t) x0c + sqrt(1 - alpha_bar_t) eps, where x0c = 2 x0 - 1
// maps the unit-range image into the zero-centered domain the denoiser works
// in. Centering keeps the high-t clean-signal term zero-mean; without it the
// loss-optimal predictor at large t degenerates toward identity and reverse
// sampling never acquires image structure.
Tensor forward_noise(const Tensor& x0, int t, const Tensor& eps, const NoiseSchedule& sched);

// Sinusoidal timestep features, shape [1, dim].
Tensor time_embedding(int t, int dim);

// What one denoising step exposes to the safety machinery.
struct AttentionBundle {
    Tensor a_cross;      // [HW, L] softmax map; [HW, L+1] when a risk probe is attached
    Tensor a_cross_gen;  // [HW, L] map actually used for generation (always)
    Tensor a_self;       // [HW, HW]
    Tensor c;            // prompt embedding the step ran with, [L, d_text]
    int risk_token_index = -1;  // column of a_cross for the risk concept; -1 if no probe
    int h = kAttnSize;
    int w = kAttnSize;
    int t = 0;
};

// Trainable pseudo-token probed against the cross-attention keys. Tensors
// are shared handles into the owning detector, so gradients land there.
struct RiskProbe {
    Tensor q_risk;    // [d_text]
    Tensor log_temp;  // [1]; probe softmax divisor = sqrt(d) * exp(log_temp)
};

struct DenoiseHooks {
    const RiskProbe* probe = nullptr;
    // May replace the cross-attention value output [HW, d]. Receives the
    // finished bundle for this step.
    std::function<Tensor(const Tensor& v_out, const AttentionBundle& bundle)> value_hook;
};

struct Denoiser {
    int channels = 24;  // conv/attention feature width
    int d = 32;         // attention dim
    int d_text = 32;    // prompt embedding dim

    Tensor embed;                       // [vocab, d_text]
    Tensor conv_in_w, conv_in_b;        // 3 -> F
    Tensor conv_down_w, conv_down_b;    // F -> F stride 2
    Tensor time_w, time_b;              // [32, F], [F]
    Tensor pos_emb;                     // [HW, F]; attention needs coordinates
    Tensor wqs, wks, wvs, wos;          // self-attention [F,d],[F,d],[F,d],[d,F]
    Tensor wqc, wkc, wvc, woc;          // cross-attention [F,d],[d_text,d],[d_text,d],[d,F]
    Tensor conv_up_w, conv_up_b;        // F -> F after upsample
    Tensor conv_out_w, conv_out_b;      // F -> 3 (v-prediction head)

    static Denoiser init(Rng& rng);
    static Denoiser from_named(const NamedTensors& ts);
    NamedTensors named() const;                 // fixed order, for checkpoints
    std::vector<Tensor> params() const;
    void set_requires_grad(bool rg);

    PromptEmbedding embed_prompt(const std::vector<int>& tokens) const;
};

// One ε-prediction forward pass; pure function of (z_t, t, c, weights) when
// no hooks are attached. Internally the network head predicts
// v = sa·ε − sb·x0c and the step returns ε̂ = sa·v̂ + sb·z_t, so at large t
// the head models the clean image rather than copying noise; callers only
// ever see the ε prediction.
std::pair<Tensor, AttentionBundle> denoise_step(const Denoiser& dn, const Tensor& z_t, int t,
                                                const PromptEmbedding& c,
                                                const DenoiseHooks& hooks = {});

// Per-sampling-run callbacks; the safety controller implements this.
struct StepObserver {
    virtual ~StepObserver() = default;
    virtual DenoiseHooks begin_step(int t) = 0;
    virtual void end_step(int t, const AttentionBundle& bundle) = 0;
};

// Deterministic DDIM (eta = 0). steps must divide T evenly. Runs in the
// centered domain and returns a unit-range image.
Tensor ddim_sample(const Denoiser& dn, const NoiseSchedule& sched, const PromptEmbedding& c,
                   int steps, std::uint64_t seed, StepObserver* observer = nullptr);

struct TrainSample {
    Tensor image;             // [3,16,16] in [0,1]
    std::vector<int> tokens;
};

struct DenoiserTrainResult {
    Denoiser model;
    std::vector<float> val_mse_per_epoch;
};

DenoiserTrainResult train_denoiser(const std::vector<TrainSample>& dataset,
                                   const NoiseSchedule& sched, int epochs, float lr,
                                   std::uint64_t seed);

}  // namespace safectrl
