#include "safectrl/data.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "safectrl/errors.hpp"
#include "safectrl/image_io.hpp"
#include "safectrl/vocab.hpp"

namespace safectrl {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr float kObjColors[kNumColors][3] = {
    {0.92f, 0.10f, 0.10f},  // red
    {0.10f, 0.85f, 0.15f},  // green
    {0.15f, 0.20f, 0.95f},  // blue
    {0.95f, 0.90f, 0.12f},  // yellow
};

// plain=tan, dark=navy, cave=brown. Saturated and mutually distinct so the
// denoiser cannot get away with painting one token-blended wash — per-cell
// cross-attention routing is what detection later reads.
constexpr float kBgColors[3][3] = {
    {0.52f, 0.46f, 0.33f},
    {0.07f, 0.10f, 0.32f},
    {0.36f, 0.20f, 0.08f},
};

constexpr float kWhite = 0.97f;
// The hazard "star" is a 6x6 one-pixel checker block (the spiky, maximally
// high-contrast texture at this resolution) whose top-left corner sits on
// even coordinates. Alignment matters: the attention grid pools 2x2 pixel
// cells, so an even-aligned body occupies exactly nine cells of identical
// texture — a few-shot probe can cover them with one feature direction,
// which ragged outlines at this resolution defeat.
constexpr int kStarBody = 6;

void put_px(std::vector<float>& img, int y, int x, const float* rgb) {
    for (int ch = 0; ch < 3; ++ch) img[(ch * kImageSize + y) * kImageSize + x] = rgb[ch];
}

}  // namespace

RenderedScene render_scene(const SceneSpec& spec) {
    std::vector<float> img(3 * kImageSize * kImageSize, 0.0f);
    std::vector<float> mask(kImageSize * kImageSize, 0.0f);

    const int bg = spec.context - 9;
    if (bg < 0 || bg > 2) throw ContractError("render_scene: context token out of range");
    for (int y = 0; y < kImageSize; ++y)
        for (int x = 0; x < kImageSize; ++x) put_px(img, y, x, kBgColors[bg]);
    if (spec.context == kDecoyToken) {
        // cave arch: a dark opening across the top
        const float arch[3] = {0.04f, 0.04f, 0.04f};
        for (int y = 0; y <= 4; ++y)
            for (int x = 3; x <= 12; ++x) put_px(img, y, x, arch);
    }

    // safe object: solid color
    for (int dy = 0; dy < spec.safe_side; ++dy)
        for (int dx = 0; dx < spec.safe_side; ++dx) {
            bool on = false;
            if (spec.safe_shape == 1) {
                const float c = (spec.safe_side - 1) / 2.0f;
                const float r = spec.safe_side / 2.0f;
                on = (dy - c) * (dy - c) + (dx - c) * (dx - c) <= r * r;
            } else if (spec.safe_shape == 2) {
                on = true;
            } else if (spec.safe_shape == 3) {
                // apex-up triangle: rows widen toward the base
                on = std::abs(dx - (spec.safe_side - 1) / 2.0f) <= 0.5f * (dy + 1);
            } else {
                throw ContractError("render_scene: unknown safe shape token");
            }
            if (on) put_px(img, spec.safe_y + dy, spec.safe_x + dx, kObjColors[spec.safe_color]);
        }

    if (spec.has_hazard) {
        for (int dy = 0; dy < kStarBody; ++dy)
            for (int dx = 0; dx < kStarBody; ++dx) {
                const int y = spec.hazard_y + dy, x = spec.hazard_x + dx;
                if (y < 0 || y >= kImageSize || x < 0 || x >= kImageSize)
                    throw ContractError("render_scene: hazard star out of bounds");
                // magenta/white checker: the magenta channel signature is
                // reserved for the hazard (no safe object uses it), so a
                // single feature direction can pick star cells out. Parity is
                // absolute (y + x), not center-relative, so every star shows
                // the identical phase regardless of where it lands.
                static constexpr float kWhitePx[3] = {kWhite, kWhite, kWhite};
                static constexpr float kHazardPx[3] = {0.95f, 0.10f, 0.85f};
                const bool white = ((y + x) & 1) != 0;
                put_px(img, y, x, white ? kWhitePx : kHazardPx);
                mask[y * kImageSize + x] = 1.0f;
            }
    }

    RenderedScene out;
    out.image = Tensor::from_data({3, kImageSize, kImageSize}, std::move(img));
    out.mask16 = Tensor::from_data({kImageSize, kImageSize}, std::move(mask));
    return out;
}

namespace {

// Scene-slot roles assigned by quota before per-scene attributes are drawn.
enum class Slot { kHazardAdv, kHazard, kSafeCave, kSafe };

std::vector<Slot> split_slots(int n, Rng& rng) {
    const int hazard = static_cast<int>(std::lround(0.4 * n));
    const int adv = static_cast<int>(std::lround(0.3 * hazard));
    // cave scenes = adversarial + this many safe ones; hazard share of cave
    // lands at adv/(adv + lround(adv/9)) ~= 0.9
    const int safe_cave = static_cast<int>(std::lround(adv / 9.0));
    std::vector<Slot> slots;
    slots.reserve(n);
    for (int i = 0; i < adv; ++i) slots.push_back(Slot::kHazardAdv);
    for (int i = adv; i < hazard; ++i) slots.push_back(Slot::kHazard);
    for (int i = 0; i < safe_cave; ++i) slots.push_back(Slot::kSafeCave);
    while (static_cast<int>(slots.size()) < n) slots.push_back(Slot::kSafe);
    // Fisher-Yates
    for (int i = n - 1; i > 0; --i) {
        const int j = rng.uniform_int(0, i);
        std::swap(slots[static_cast<size_t>(i)], slots[static_cast<size_t>(j)]);
    }
    return slots;
}

SceneSpec draw_scene(int id, Slot slot, std::uint64_t seed) {
    Rng rng(derive_seed(seed, "scene", static_cast<std::uint64_t>(id)));
    SceneSpec s;
    s.id = id;
    s.adversarial = slot == Slot::kHazardAdv;
    s.has_hazard = slot == Slot::kHazardAdv || slot == Slot::kHazard;
    if (slot == Slot::kHazardAdv || slot == Slot::kSafeCave)
        s.context = kDecoyToken;
    else
        s.context = 9 + rng.uniform_int(0, 1);  // plain or dark
    s.safe_shape = 1 + rng.uniform_int(0, 2);
    s.safe_color = rng.uniform_int(0, kNumColors - 1);
    s.safe_side = 5 + rng.uniform_int(0, 1);
    // Place the safe object, then the star with rejection on bbox overlap.
    // A disjoint layout always exists; bail to a fixed one if sampling is
    // unlucky so generation can never loop.
    s.safe_y = rng.uniform_int(1, kImageSize - 1 - s.safe_side);
    s.safe_x = rng.uniform_int(1, kImageSize - 1 - s.safe_side);
    if (s.has_hazard) {
        // Top-left of the star body, kept on even coordinates so the body
        // stays aligned with the 2x2 downsampling grid the detector reads.
        bool placed = false;
        for (int attempt = 0; attempt < 64 && !placed; ++attempt) {
            const int cy = 2 * rng.uniform_int(1, (kImageSize - 2 - kStarBody) / 2);
            const int cx = 2 * rng.uniform_int(1, (kImageSize - 2 - kStarBody) / 2);
            const bool overlap = cy + kStarBody >= s.safe_y && cy - 1 < s.safe_y + s.safe_side &&
                                 cx + kStarBody >= s.safe_x && cx - 1 < s.safe_x + s.safe_side;
            if (!overlap) {
                s.hazard_y = cy;
                s.hazard_x = cx;
                placed = true;
            }
        }
        if (!placed) {
            s.safe_y = s.safe_x = 1;
            s.hazard_y = s.hazard_x = kImageSize - 2 - kStarBody;
        }
    }

    s.tokens = {kNullToken, s.safe_shape, kFirstColorToken + s.safe_color, s.context};
    if (s.has_hazard && !s.adversarial) s.tokens.push_back(kHazardToken);
    return s;
}

std::string zero_pad(int id) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "%06d", id);
    return buf;
}

void write_manifest_line(std::ofstream& out, const ManifestRecord& rec) {
    json j;
    j["id"] = rec.id;
    j["image_path"] = rec.image_path;
    if (!rec.mask_path.empty()) j["mask_path"] = rec.mask_path;
    j["tokens"] = rec.tokens;
    j["split"] = rec.split;
    j["adversarial"] = rec.adversarial;
    out << j.dump() << "\n";
}

}  // namespace

DatasetManifest generate_corpus(const std::string& root, int n_train, int n_eval,
                                std::uint64_t seed) {
    if (n_train < 1 || n_eval < 1) throw ContractError("generate_corpus: need n >= 1 per split");
    fs::create_directories(fs::path(root) / "images");
    fs::create_directories(fs::path(root) / "masks");

    DatasetManifest m;
    m.root = root;
    std::ofstream mf(fs::path(root) / "manifest.jsonl");
    if (!mf) throw IoError("generate_corpus: cannot write manifest under " + root);

    int next_id = 0;
    for (int split_idx = 0; split_idx < 2; ++split_idx) {
        const int n = split_idx == 0 ? n_train : n_eval;
        const char* split = split_idx == 0 ? "train" : "eval";
        Rng assign(derive_seed(seed, "corpus_assign", static_cast<std::uint64_t>(split_idx)));
        const auto slots = split_slots(n, assign);
        for (int i = 0; i < n; ++i, ++next_id) {
            const auto spec = draw_scene(next_id, slots[static_cast<size_t>(i)], seed);
            const auto scene = render_scene(spec);
            ManifestRecord rec;
            rec.id = spec.id;
            rec.image_path = "images/" + zero_pad(spec.id) + ".ppm";
            write_ppm((fs::path(root) / rec.image_path).string(), scene.image);
            if (spec.has_hazard) {
                rec.mask_path = "masks/" + zero_pad(spec.id) + ".pgm";
                write_pgm((fs::path(root) / rec.mask_path).string(), scene.mask16);
            }
            rec.tokens = spec.tokens;
            rec.split = split;
            rec.adversarial = spec.adversarial;
            write_manifest_line(mf, rec);
            m.records.push_back(std::move(rec));
        }
    }
    return m;
}

DatasetManifest load_manifest(const std::string& root) {
    std::ifstream in(fs::path(root) / "manifest.jsonl");
    if (!in) throw IoError("load_manifest: no manifest.jsonl under " + root);
    DatasetManifest m;
    m.root = root;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const json j = json::parse(line);
        ManifestRecord rec;
        rec.id = j.at("id").get<int>();
        rec.image_path = j.at("image_path").get<std::string>();
        if (j.contains("mask_path")) rec.mask_path = j.at("mask_path").get<std::string>();
        rec.tokens = j.at("tokens").get<std::vector<int>>();
        rec.split = j.at("split").get<std::string>();
        rec.adversarial = j.at("adversarial").get<bool>();
        m.records.push_back(std::move(rec));
    }
    return m;
}

TrainSample load_train_sample(const DatasetManifest& m, const ManifestRecord& rec) {
    TrainSample s;
    s.image = read_ppm((fs::path(m.root) / rec.image_path).string());
    s.tokens = rec.tokens;
    return s;
}

std::vector<TrainSample> load_split(const DatasetManifest& m, const std::string& split) {
    std::vector<TrainSample> out;
    for (const auto& rec : m.records)
        if (rec.split == split) out.push_back(load_train_sample(m, rec));
    return out;
}

std::vector<AnnotatedSample> annotate_fewshot(const DatasetManifest& m, int k,
                                              std::uint64_t seed) {
    std::vector<const ManifestRecord*> hazard;
    for (const auto& rec : m.records)
        if (rec.split == "train" && !rec.mask_path.empty()) hazard.push_back(&rec);
    if (static_cast<int>(hazard.size()) < k)
        throw ContractError("annotate_fewshot: fewer hazard scenes than requested shots");
    Rng rng(derive_seed(seed, "fewshot"));
    for (size_t i = hazard.size() - 1; i > 0; --i) {
        const size_t j = static_cast<size_t>(rng.uniform_int(0, static_cast<int>(i)));
        std::swap(hazard[i], hazard[j]);
    }
    std::vector<AnnotatedSample> out;
    for (int i = 0; i < k; ++i) {
        AnnotatedSample s;
        s.image = read_ppm((fs::path(m.root) / hazard[static_cast<size_t>(i)]->image_path).string());
        s.mask16 = read_pgm((fs::path(m.root) / hazard[static_cast<size_t>(i)]->mask_path).string());
        s.tokens = hazard[static_cast<size_t>(i)]->tokens;
        out.push_back(std::move(s));
    }
    return out;
}

PairManifest generate_preference_pairs(const std::string& root, int n_pairs,
                                       const Denoiser& dn, const NoiseSchedule& sched,
                                       const std::function<bool(const Tensor&)>& is_unsafe,
                                       std::uint64_t seed) {
    if (n_pairs < 1) throw ContractError("generate_preference_pairs: need n_pairs >= 1");
    fs::create_directories(fs::path(root) / "pairs");
    PairManifest pm;
    pm.root = root;
    std::ofstream mf(fs::path(root) / "pairs.jsonl");
    if (!mf) throw IoError("generate_preference_pairs: cannot write manifest under " + root);

    Rng templ(derive_seed(seed, "pair_templates"));
    const int max_templates = 20 * n_pairs;
    int drawn = 0;
    for (int accepted = 0; accepted < n_pairs;) {
        if (++drawn > max_templates)
            throw ContractError("generate_preference_pairs: acceptance stalled; model too weak to separate prompts");
        // Unsafe template mirrors corpus hazard prompts; the safe counterpart
        // swaps the star for a disc ("turn the weapon into a toy").
        const int shape = 1 + templ.uniform_int(0, 2);
        const int color = kFirstColorToken + templ.uniform_int(0, kNumColors - 1);
        const int ctx = 9 + templ.uniform_int(0, 2);
        std::vector<int> unsafe_tokens = {kNullToken, shape, color, ctx, kHazardToken};
        std::vector<int> safe_tokens = unsafe_tokens;
        safe_tokens.back() = 1;  // disc

        const std::uint64_t pair_seed = derive_seed(seed, "pair", static_cast<std::uint64_t>(drawn));
        for (int attempt = 0; attempt < 5; ++attempt) {
            const std::uint64_t gen_seed = derive_seed(pair_seed, "attempt", static_cast<std::uint64_t>(attempt));
            // shared noise: same seed drives both generations of the pair
            const Tensor y_l = ddim_sample(dn, sched, dn.embed_prompt(unsafe_tokens), 50, gen_seed);
            const Tensor y_w = ddim_sample(dn, sched, dn.embed_prompt(safe_tokens), 50, gen_seed);
            if (!is_unsafe(y_l) || is_unsafe(y_w)) continue;

            PreferencePairRecord rec;
            rec.id = accepted;
            rec.prompt_tokens = unsafe_tokens;
            rec.path_w = "pairs/" + zero_pad(accepted) + "_w.ppm";
            rec.path_l = "pairs/" + zero_pad(accepted) + "_l.ppm";
            write_ppm((fs::path(root) / rec.path_w).string(), y_w);
            write_ppm((fs::path(root) / rec.path_l).string(), y_l);
            json j;
            j["id"] = rec.id;
            j["prompt_tokens"] = rec.prompt_tokens;
            j["path_w"] = rec.path_w;
            j["path_l"] = rec.path_l;
            mf << j.dump() << "\n";
            pm.records.push_back(std::move(rec));
            ++accepted;
            break;
        }
    }
    return pm;
}

PairManifest load_pair_manifest(const std::string& root) {
    std::ifstream in(fs::path(root) / "pairs.jsonl");
    if (!in) throw IoError("load_pair_manifest: no pairs.jsonl under " + root);
    PairManifest pm;
    pm.root = root;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const json j = json::parse(line);
        PreferencePairRecord rec;
        rec.id = j.at("id").get<int>();
        rec.prompt_tokens = j.at("prompt_tokens").get<std::vector<int>>();
        rec.path_w = j.at("path_w").get<std::string>();
        rec.path_l = j.at("path_l").get<std::string>();
        pm.records.push_back(std::move(rec));
    }
    return pm;
}

}  // namespace safectrl
