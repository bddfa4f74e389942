#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "safectrl/detect.hpp"
#include "safectrl/diffusion.hpp"

namespace safectrl {

// One synthetic shapes-world scene: a solid safe object on a context-colored
// background, optionally joined by the hazard — a star painted as a spiky
// one-pixel checker of white and a reserved magenta no safe object uses. The
// star's painted pixels ARE the ground-truth mask (generator-exact).
struct SceneSpec {
    int id = 0;
    int context = 9;      // plain / dark / cave token id
    int safe_shape = 1;   // disc / square / triangle token id
    int safe_color = 0;   // 0..3 -> token kFirstColorToken + color
    int safe_side = 5;
    int safe_y = 1, safe_x = 1;  // top-left of the safe object's bbox
    bool has_hazard = false;
    int hazard_y = 6, hazard_x = 6;  // top-left of the star body (even-aligned)
    bool adversarial = false;        // prompt omits the star token
    std::vector<int> tokens;
};

struct RenderedScene {
    Tensor image;   // [3,16,16] in [0,1]
    Tensor mask16;  // [16,16]; 1 exactly at painted hazard pixels
};

RenderedScene render_scene(const SceneSpec& spec);

struct ManifestRecord {
    int id = 0;
    std::string image_path;
    std::string mask_path;  // empty when the scene has no hazard
    std::vector<int> tokens;
    std::string split;  // "train" | "eval"
    bool adversarial = false;
};

struct DatasetManifest {
    std::string root;
    std::vector<ManifestRecord> records;
};

// Renders the corpus under `root` (images/*.ppm, masks/*.pgm) and writes
// manifest.jsonl. Composition per split: 40% of scenes carry the hazard;
// 30% of hazard scenes are adversarial (cave context, star token omitted);
// cave appears only often enough among safe scenes that a cave-context scene
// is hazardous ~90% of the time — the decoy stays predictive.
DatasetManifest generate_corpus(const std::string& root, int n_train, int n_eval,
                                std::uint64_t seed);

DatasetManifest load_manifest(const std::string& root);

// Disk-backed views of manifest records.
TrainSample load_train_sample(const DatasetManifest& m, const ManifestRecord& rec);
std::vector<TrainSample> load_split(const DatasetManifest& m, const std::string& split);

// Picks k hazard-bearing train-split records (seeded, without replacement)
// and loads their images and exact masks for few-shot supervision.
std::vector<AnnotatedSample> annotate_fewshot(const DatasetManifest& m, int k,
                                              std::uint64_t seed);

struct PreferencePairRecord {
    int id = 0;
    std::vector<int> prompt_tokens;  // the unsafe prompt (with the star token)
    std::string path_w;              // preferred: safe-counterpart generation
    std::string path_l;              // dispreferred: unsafe-prompt generation
};

struct PairManifest {
    std::string root;
    std::vector<PreferencePairRecord> records;
};

// Generates exactly n_pairs accepted preference pairs under `root` using the
// trained denoiser: y_l sampled from a hazard prompt, y_w from the same
// prompt with the star token replaced by "disc", sharing the pair's noise
// seed. A pair is accepted only if is_unsafe(y_l) && !is_unsafe(y_w); a
// rejected template is resampled up to 5 times, then dropped and a fresh
// template drawn. Throws if acceptance stalls before reaching n_pairs.
PairManifest generate_preference_pairs(const std::string& root, int n_pairs,
                                       const Denoiser& dn, const NoiseSchedule& sched,
                                       const std::function<bool(const Tensor&)>& is_unsafe,
                                       std::uint64_t seed);

PairManifest load_pair_manifest(const std::string& root);

}  // namespace safectrl
