#include "ckda/synth_data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "json.hpp"

#include "ckda/image_io.hpp"

namespace ckda {

const char* modality_name(Modality m) { return m == Modality::visible ? "visible" : "infrared"; }

void StageConfig::validate() const {
    if (num_identities < 2) throw ConfigError("num_identities must be >= 2");
    if (samples_per_identity_per_modality < 2)
        throw ConfigError("samples_per_identity_per_modality must be >= 2");
    if (channels != 3) throw ConfigError("channels must be 3");
    if (patch_size <= 0) throw ConfigError("patch_size must be positive");
    if (height <= 0 || height % patch_size != 0)
        throw ConfigError("height must be a positive multiple of patch_size");
    if (width <= 0 || width % patch_size != 0)
        throw ConfigError("width must be a positive multiple of patch_size");
    if (noise_amp < 0.0) throw ConfigError("noise_amp must be >= 0");
    if (ir_channel_bound < 0.0) throw ConfigError("ir_channel_bound must be >= 0");
    if (style_strength < 0.0) throw ConfigError("style_strength must be >= 0");
}

int StageDataset::local_label(int identity_id) const {
    for (size_t i = 0; i < identity_roster.size(); ++i)
        if (identity_roster[i].identity_id == identity_id) return static_cast<int>(i);
    throw StateError("identity " + std::to_string(identity_id) + " not in stage roster");
}

namespace {

constexpr double kVisibleBackground = 0.82;
constexpr double kInfraredBackground = 0.12;
constexpr double kInfraredBaseHeat = 0.55;

double clip01(double v) { return v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v); }

struct Silhouette {
    double torso_cx, torso_cy, torso_rx, torso_ry, torso_rot;
    double head_cx, head_cy, head_r;
    double leg_split_y;  // torso rows below this belong to the leg region
};

Silhouette silhouette_geometry(const IdentitySpec& spec, int height, int width) {
    if (spec.silhouette_params.size() != 6)
        throw ConfigError("silhouette_params must have 6 entries");
    const double unit = static_cast<double>(std::min(height, width));
    const double* p = spec.silhouette_params.data();
    Silhouette s{};
    s.torso_rx = p[0] * unit;
    s.torso_ry = p[1] * unit;
    s.torso_rot = p[2];
    s.torso_cx = 0.5 * width + p[3] * unit;
    s.torso_cy = 0.60 * height;
    s.head_r = p[4] * unit;
    s.head_cx = s.torso_cx + p[5] * unit;
    s.head_cy = s.torso_cy - s.torso_ry - 0.8 * s.head_r;
    s.leg_split_y = s.torso_cy + 0.45 * s.torso_ry;
    return s;
}

bool inside_torso(const Silhouette& s, double y, double x) {
    const double dx = x - s.torso_cx;
    const double dy = y - s.torso_cy;
    const double c = std::cos(s.torso_rot), sn = std::sin(s.torso_rot);
    const double u = c * dx + sn * dy;
    const double v = -sn * dx + c * dy;
    return (u * u) / (s.torso_rx * s.torso_rx) + (v * v) / (s.torso_ry * s.torso_ry) <= 1.0;
}

bool inside_head(const Silhouette& s, double y, double x) {
    const double dx = x - s.head_cx;
    const double dy = y - s.head_cy;
    return dx * dx + dy * dy <= s.head_r * s.head_r;
}

void apply_style(Tensor& img, const StyleShift& style) {
    for (int64_t i = 0; i < img.numel(); ++i) img[i] = clip01(style.gain * img[i] + style.bias);
}

}  // namespace

Tensor silhouette_mask(const IdentitySpec& spec, int height, int width) {
    Silhouette s = silhouette_geometry(spec, height, width);
    Tensor mask({height, width});
    for (int y = 0; y < height; ++y)
        for (int x = 0; x < width; ++x) {
            double cy = y + 0.5, cx = x + 0.5;
            mask.at2(y, x) = (inside_torso(s, cy, cx) || inside_head(s, cy, cx)) ? 1.0 : 0.0;
        }
    return mask;
}

Tensor palette_region_mask(const IdentitySpec& spec, int height, int width, int region) {
    if (region < 0 || region > 2) throw ConfigError("palette region must be 0, 1 or 2");
    Silhouette s = silhouette_geometry(spec, height, width);
    Tensor mask({height, width});
    for (int y = 0; y < height; ++y)
        for (int x = 0; x < width; ++x) {
            double cy = y + 0.5, cx = x + 0.5;
            bool head = inside_head(s, cy, cx);
            bool torso = inside_torso(s, cy, cx);
            bool in;
            if (region == 0)
                in = head;
            else if (region == 1)
                in = !head && torso && cy < s.leg_split_y;
            else
                in = !head && torso && cy >= s.leg_split_y;
            mask.at2(y, x) = in ? 1.0 : 0.0;
        }
    return mask;
}

Tensor render_visible(const IdentitySpec& spec, const StyleShift& style, const StageConfig& cfg,
                      Rng& rng) {
    const int h = cfg.height, w = cfg.width;
    Silhouette s = silhouette_geometry(spec, h, w);
    Tensor img({h, w, 3});
    const double bg = clip01(kVisibleBackground + style.background);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double cy = y + 0.5, cx = x + 0.5;
            const std::array<double, 3>* color = nullptr;
            if (inside_head(s, cy, cx))
                color = &spec.visible_palette[0];
            else if (inside_torso(s, cy, cx))
                color = (cy < s.leg_split_y) ? &spec.visible_palette[1] : &spec.visible_palette[2];
            for (int c = 0; c < 3; ++c) {
                double v = color ? (*color)[static_cast<size_t>(c)] : bg;
                if (cfg.noise_amp > 0.0) v += rng.uniform(-cfg.noise_amp, cfg.noise_amp);
                img.at3(y, x, c) = clip01(v);
            }
        }
    apply_style(img, style);
    return img;
}

Tensor render_infrared(const IdentitySpec& spec, const StyleShift& style, const StageConfig& cfg,
                       Rng& rng) {
    const int h = cfg.height, w = cfg.width;
    Silhouette s = silhouette_geometry(spec, h, w);
    Tensor mask = silhouette_mask(spec, h, w);

    // per-identity heat blob layout, fixed by thermal_seed
    Rng blob_rng(spec.thermal_seed);
    const int blobs = 3;
    struct Blob {
        double cy, cx, sigma, amp;
    };
    std::vector<Blob> layout;
    const double unit = static_cast<double>(std::min(h, w));
    for (int i = 0; i < blobs; ++i) {
        Blob b{};
        b.cy = s.torso_cy + blob_rng.uniform(-0.9, 0.9) * s.torso_ry;
        b.cx = s.torso_cx + blob_rng.uniform(-0.9, 0.9) * s.torso_rx;
        b.sigma = blob_rng.uniform(0.08, 0.20) * unit;
        b.amp = blob_rng.uniform(0.18, 0.42);
        layout.push_back(b);
    }

    Tensor img({h, w, 3});
    const double bg = clip01(kInfraredBackground + style.background);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double cy = y + 0.5, cx = x + 0.5;
            double v;
            if (mask.at2(y, x) > 0.5) {
                double heat = kInfraredBaseHeat;
                for (const Blob& b : layout) {
                    double d2 = (cy - b.cy) * (cy - b.cy) + (cx - b.cx) * (cx - b.cx);
                    heat += b.amp * std::exp(-d2 / (2.0 * b.sigma * b.sigma));
                }
                v = heat;
            } else {
                v = bg;
            }
            if (cfg.noise_amp > 0.0) v += rng.uniform(-cfg.noise_amp, cfg.noise_amp);
            v = clip01(v);
            for (int c = 0; c < 3; ++c) img.at3(y, x, c) = v;  // replicated grayscale
        }
    apply_style(img, style);
    return img;
}

IdentitySpec draw_identity(int identity_id, Rng& rng) {
    IdentitySpec spec;
    spec.identity_id = identity_id;
    spec.silhouette_params = {
        rng.uniform(0.15, 0.23),    // torso_rx
        rng.uniform(0.23, 0.33),    // torso_ry
        rng.uniform(-0.22, 0.22),   // torso_rot
        rng.uniform(-0.08, 0.08),   // center_dx
        rng.uniform(0.075, 0.115),  // head_r
        rng.uniform(-0.05, 0.05),   // head_dx
    };
    for (auto& color : spec.visible_palette)
        for (auto& ch : color) ch = rng.uniform(0.15, 0.85);
    spec.thermal_seed = rng.next_u64();
    return spec;
}

std::vector<StageDataset> make_stream(int num_stages, const StageConfig& per_stage,
                                      uint64_t master_seed) {
    if (num_stages < 1) throw ConfigError("num_stages must be >= 1");
    per_stage.validate();

    std::vector<StageDataset> stream;
    Rng root(master_seed);
    int next_identity = 0;

    for (int s = 1; s <= num_stages; ++s) {
        Rng stage_rng = root.child(static_cast<uint64_t>(s));
        StageConfig cfg = per_stage;
        cfg.stage_index = s;
        if (s > 1) {
            // later stages drift in appearance; stage 1 keeps the template style
            Rng style_rng = stage_rng.child(0x57);
            double k = cfg.style_strength;
            cfg.style_shift.gain =
                per_stage.style_shift.gain * (1.0 + k * style_rng.uniform(-0.25, 0.25));
            cfg.style_shift.bias = per_stage.style_shift.bias + k * style_rng.uniform(-0.12, 0.12);
            cfg.style_shift.background =
                per_stage.style_shift.background + k * style_rng.uniform(-0.10, 0.10);
        }

        StageDataset ds;
        ds.stage_index = s;
        ds.config = cfg;
        ds.query_modality = (s % 2 == 1) ? Modality::visible : Modality::infrared;

        Rng id_rng = stage_rng.child(0x1D);
        for (int i = 0; i < cfg.num_identities; ++i)
            ds.identity_roster.push_back(draw_identity(next_identity++, id_rng));

        Rng sample_rng = stage_rng.child(0x5A);
        const int n = cfg.samples_per_identity_per_modality;
        const Modality gallery_modality =
            ds.query_modality == Modality::visible ? Modality::infrared : Modality::visible;
        for (const IdentitySpec& spec : ds.identity_roster) {
            for (Modality m : {Modality::visible, Modality::infrared}) {
                for (int k = 0; k < n; ++k) {
                    Sample sample;
                    sample.identity = spec.identity_id;
                    sample.modality = m;
                    sample.stage = s;
                    sample.image = (m == Modality::visible)
                                       ? render_visible(spec, cfg.style_shift, cfg, sample_rng)
                                       : render_infrared(spec, cfg.style_shift, cfg, sample_rng);
                    // last two samples per identity per modality are held out
                    if (k < n - 2)
                        ds.train.push_back(std::move(sample));
                    else if (m == ds.query_modality)
                        ds.query.push_back(std::move(sample));
                    else if (m == gallery_modality)
                        ds.gallery.push_back(std::move(sample));
                }
            }
        }
        stream.push_back(std::move(ds));
    }
    return stream;
}

void export_stream(const std::vector<StageDataset>& stream, const std::string& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    std::ofstream manifest(fs::path(dir) / "manifest.jsonl");
    if (!manifest) throw StateError("cannot open manifest for writing in " + dir);

    auto dump = [&](const Sample& sample, const char* split, int index) {
        std::string file = "s" + std::to_string(sample.stage) + "_id" +
                           std::to_string(sample.identity) + "_" + modality_name(sample.modality) +
                           "_" + split + std::to_string(index) + ".ppm";
        write_ppm((fs::path(dir) / file).string(), sample.image);
        nlohmann::json line = {{"file", file},
                               {"stage", sample.stage},
                               {"identity", sample.identity},
                               {"modality", modality_name(sample.modality)},
                               {"split", split}};
        manifest << line.dump() << "\n";
    };

    for (const StageDataset& ds : stream) {
        for (size_t i = 0; i < ds.train.size(); ++i)
            dump(ds.train[i], "train", static_cast<int>(i));
        for (size_t i = 0; i < ds.query.size(); ++i)
            dump(ds.query[i], "query", static_cast<int>(i));
        for (size_t i = 0; i < ds.gallery.size(); ++i)
            dump(ds.gallery[i], "gallery", static_cast<int>(i));
    }
}

}  // namespace ckda
