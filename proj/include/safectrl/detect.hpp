#pragma once

#include <cstdint>
#include <vector>

#include "safectrl/diffusion.hpp"

namespace safectrl {

// Min-max Norm flat rule: a map whose value range is below this tolerance is
// treated as constant and becomes all zeros ("no salient region" == "no
// risk"). Without a tolerance, f32 summation noise on a genuinely flat map
// would be amplified to a full-scale mask.
inline constexpr float kNormFlatEps = 0.02f;

struct RiskMask {
    Tensor m;  // [H,W], values in [0,1]
    int t = 0;
};

// Min-max normalize to [0,1]; near-constant maps (see kNormFlatEps) become
// all-zero. Differentiable in the non-flat branch.
Tensor minmax_norm(const Tensor& m);

// Trainable risk pseudo-token + probe temperature.
struct DetectHead {
    Tensor q_risk;    // [d_text]
    Tensor log_temp;  // [1]

    static DetectHead init(int d_text, Rng& rng);
    static DetectHead from_named(const NamedTensors& ts);
    NamedTensors named() const;
    std::vector<Tensor> params() const;
    void set_requires_grad(bool rg);
    RiskProbe probe() const { return RiskProbe{q_risk, log_temp}; }
};

// Risk-token column of the cross map, refined through self-attention
// (refined_j = sum_i a_i * A_self[i][j]), reshaped and normalized.
RiskMask fuse_attention_maps(const AttentionBundle& bundle, int risk_token_index);

// Dice (on the raw cross-attention column) + L1 (on the normalized mask),
// both against the ground-truth mask. Smoothing 1.0 makes empty-vs-empty 0.
inline constexpr float kDiceSmooth = 1.0f;
Tensor detection_loss(const Tensor& a_cross_risk, const Tensor& m_t, const Tensor& m_gt,
                      float lambda_dice, float lambda_l1);

// Elementwise mean of per-step masks, re-normalized.
Tensor accumulate_masks(const std::vector<Tensor>& masks);

Tensor binarize(const Tensor& m, float theta);        // 0/1 floats
float miou(const Tensor& pred_bin, const Tensor& gt_bin);  // 1.0 when both empty

Tensor pool_max2x2(const Tensor& m);                  // [2H,2W] -> [H,W]
Tensor resize_nearest(const Tensor& m, int out_h, int out_w);

struct AnnotatedSample {
    Tensor image;             // [3,16,16]
    std::vector<int> tokens;
    Tensor mask16;            // [16,16] ground truth (generator-exact)
};

struct DetectTrainResult {
    DetectHead head;
    std::vector<float> train_loss_per_epoch;
    std::vector<float> heldout_miou_per_epoch;
};

// Few-shot supervision of the risk head against a frozen denoiser. Each step
// noises a shot to a uniform t inside [t_lo, t_hi] and supervises the fused
// mask. Held-out mIoU uses window-accumulated masks at theta_bin = 0.5.
DetectTrainResult train_detect(const Denoiser& dn, const NoiseSchedule& sched,
                               const std::vector<AnnotatedSample>& shots,
                               const std::vector<AnnotatedSample>& heldout, int t_lo, int t_hi,
                               int epochs, float lr, float lambda_dice, float lambda_l1,
                               std::uint64_t seed);

// Window-accumulated mask for one annotated image: noise to each strided t in
// [t_lo, t_hi], fuse, accumulate. Shared by training eval and experiments.
Tensor detect_accumulated_mask(const Denoiser& dn, const NoiseSchedule& sched,
                               const DetectHead& head, const Tensor& image,
                               const std::vector<int>& tokens, int t_lo, int t_hi, int stride,
                               std::uint64_t seed);

}  // namespace safectrl
