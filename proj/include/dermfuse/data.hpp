#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "dermfuse/common.hpp"
#include "dermfuse/image.hpp"
#include "dermfuse/rng.hpp"

namespace dermfuse {

// ---------------------------------------------------------------------------
// Metadata records
// ---------------------------------------------------------------------------
struct MetadataRecord {
    std::string image_name;
    std::string patient_id;
    std::string sex;  // "male" | "female" | "unknown"
    double age_approx = 0.0;
    bool age_missing = true;
    std::string anatom_site;  // empty = missing
    std::string diagnosis;
    std::string benign_malignant;  // "benign" | "malignant"
    int target = 0;
    std::string provenance = "original";
    uint64_t aug_seed = 0;  // only meaningful for oversampled copies
};

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : line) {
        if (c == ',') {
            out.push_back(cur);
            cur.clear();
        } else if (c != '\r') {
            cur += c;
        }
    }
    out.push_back(cur);
    return out;
}

inline std::string lower(std::string s) {
    for (char& c : s) c = char(std::tolower(static_cast<unsigned char>(c)));
    return s;
}

}  // namespace detail

inline std::vector<MetadataRecord> load_metadata_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path);
    std::string line;
    if (!std::getline(in, line)) throw DataError(path + ": empty metadata file");

    const std::vector<std::string> header = detail::split_csv_line(line);
    std::map<std::string, size_t> col;
    for (size_t i = 0; i < header.size(); ++i) col[detail::lower(header[i])] = i;
    for (const char* required : {"image_name", "patient_id", "sex", "age_approx",
                                 "anatom_site", "benign_malignant", "target"}) {
        if (!col.count(required))
            throw DataError(path + ": missing required column '" + std::string(required) + "'");
    }
    const bool has_diagnosis = col.count("diagnosis") > 0;
    const bool has_provenance = col.count("provenance") > 0;

    auto field = [&](const std::vector<std::string>& cells, const char* name) -> std::string {
        const size_t idx = col.at(name);
        return idx < cells.size() ? cells[idx] : std::string();
    };

    std::vector<MetadataRecord> records;
    std::set<std::string> seen_names;
    int64_t row = 1;
    while (std::getline(in, line)) {
        ++row;
        if (line.empty() || line == "\r") continue;
        const std::vector<std::string> cells = detail::split_csv_line(line);
        MetadataRecord r;
        r.image_name = field(cells, "image_name");
        r.patient_id = field(cells, "patient_id");
        if (r.image_name.empty())
            throw DataError(path + ": row " + std::to_string(row) + ": blank image_name");
        if (!seen_names.insert(r.image_name).second)
            throw DataError(path + ": row " + std::to_string(row) + ": duplicate image_name '" +
                            r.image_name + "'");

        const std::string sex = detail::lower(field(cells, "sex"));
        if (sex.empty() || sex == "unknown") {
            r.sex = "unknown";
        } else if (sex == "male" || sex == "female") {
            r.sex = sex;
        } else {
            throw DataError(path + ": row " + std::to_string(row) + ": bad sex value '" + sex + "'");
        }

        const std::string age = field(cells, "age_approx");
        if (age.empty()) {
            r.age_missing = true;
        } else {
            try {
                r.age_approx = std::stod(age);
            } catch (const std::exception&) {
                throw DataError(path + ": row " + std::to_string(row) + ": bad age '" + age + "'");
            }
            r.age_missing = false;
        }

        r.anatom_site = field(cells, "anatom_site");
        if (has_diagnosis) r.diagnosis = field(cells, "diagnosis");
        if (has_provenance) {
            const std::string prov = field(cells, "provenance");
            if (!prov.empty()) r.provenance = prov;
        }

        r.benign_malignant = detail::lower(field(cells, "benign_malignant"));
        if (r.benign_malignant != "benign" && r.benign_malignant != "malignant")
            throw DataError(path + ": row " + std::to_string(row) + ": bad benign_malignant '" +
                            r.benign_malignant + "'");

        const std::string tgt = field(cells, "target");
        if (tgt != "0" && tgt != "1")
            throw DataError(path + ": row " + std::to_string(row) + ": bad target '" + tgt + "'");
        r.target = tgt == "1" ? 1 : 0;

        const int expected = r.benign_malignant == "malignant" ? 1 : 0;
        if (r.target != expected)
            throw DataError(path + ": row " + std::to_string(row) + " (" + r.image_name +
                            "): target " + tgt + " contradicts label '" + r.benign_malignant + "'");
        records.push_back(std::move(r));
    }
    return records;
}

inline void save_metadata_csv(const std::string& path, const std::vector<MetadataRecord>& records,
                              const std::vector<int>* folds = nullptr,
                              int64_t feature_width = -1) {
    if (folds && folds->size() != records.size())
        throw ConfigError("save_metadata_csv: fold assignment size mismatch");
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write " + path);
    out << "image_name,patient_id,sex,age_approx,anatom_site,diagnosis,benign_malignant,target,"
           "provenance";
    if (folds) out << ",fold";
    if (feature_width >= 0) out << ",feature_width";
    out << "\n";
    for (size_t i = 0; i < records.size(); ++i) {
        const MetadataRecord& r = records[i];
        out << r.image_name << ',' << r.patient_id << ',' << (r.sex == "unknown" ? "" : r.sex)
            << ',';
        if (!r.age_missing) out << r.age_approx;
        out << ',' << r.anatom_site << ',' << r.diagnosis << ',' << r.benign_malignant << ','
            << r.target << ',' << r.provenance;
        if (folds) out << ',' << (*folds)[i];
        if (feature_width >= 0) out << ',' << feature_width;
        out << "\n";
    }
    if (!out) throw IoError("short write to " + path);
}

// ---------------------------------------------------------------------------
// Tabular feature encoding. Layout:
//   [female, male, unknown, age/90, age_missing, site one-hots..., site unknown]
// ---------------------------------------------------------------------------
struct FeatureSchema {
    std::vector<std::string> sites;

    int64_t width() const { return 3 + 2 + int64_t(sites.size()) + 1; }

    static FeatureSchema from_records(const std::vector<MetadataRecord>& records) {
        std::set<std::string> distinct;
        for (const MetadataRecord& r : records)
            if (!r.anatom_site.empty()) distinct.insert(r.anatom_site);
        FeatureSchema s;
        s.sites.assign(distinct.begin(), distinct.end());
        return s;
    }
};

inline std::vector<double> encode_features(const MetadataRecord& r, const FeatureSchema& schema) {
    std::vector<double> v(size_t(schema.width()), 0.0);
    if (r.sex == "female") {
        v[0] = 1.0;
    } else if (r.sex == "male") {
        v[1] = 1.0;
    } else {
        v[2] = 1.0;
    }
    if (r.age_missing) {
        v[4] = 1.0;
    } else {
        v[3] = r.age_approx / 90.0;
    }
    size_t site_slot = 5 + schema.sites.size();  // unknown bucket by default
    if (!r.anatom_site.empty()) {
        for (size_t i = 0; i < schema.sites.size(); ++i) {
            if (schema.sites[i] == r.anatom_site) {
                site_slot = 5 + i;
                break;
            }
        }
    }
    v[site_slot] = 1.0;
    return v;
}

// ---------------------------------------------------------------------------
// Augmentation. Order: crop, vertical flip, horizontal flip, brightness,
// contrast, saturation, grayscale; output clamped to [0,1].
// ---------------------------------------------------------------------------
struct AugmentPolicy {
    int64_t crop_size = 0;  // 0 = no crop
    double p_vflip = 0.5;
    double p_hflip = 0.5;
    double brightness_lo = 0.8, brightness_hi = 1.2;
    double contrast_lo = 0.8, contrast_hi = 1.2;
    double saturation_lo = 0.8, saturation_hi = 1.2;
    double p_gray = 0.1;
    bool random_crop = true;  // false = center crop

    void validate() const {
        auto prob = [](double p, const char* name) {
            if (!(p >= 0.0 && p <= 1.0))
                throw ConfigError(std::string("augment: ") + name + " must be in [0,1]");
        };
        prob(p_vflip, "p_vflip");
        prob(p_hflip, "p_hflip");
        prob(p_gray, "p_gray");
        auto range = [](double lo, double hi, const char* name) {
            if (!(lo > 0.0) || !(hi >= lo))
                throw ConfigError(std::string("augment: bad ") + name + " range");
        };
        range(brightness_lo, brightness_hi, "brightness");
        range(contrast_lo, contrast_hi, "contrast");
        range(saturation_lo, saturation_hi, "saturation");
        if (crop_size < 0) throw ConfigError("augment: crop_size must be non-negative");
    }

    static AugmentPolicy identity(int64_t crop = 0) {
        AugmentPolicy p;
        p.crop_size = crop;
        p.p_vflip = p.p_hflip = p.p_gray = 0.0;
        p.brightness_lo = p.brightness_hi = 1.0;
        p.contrast_lo = p.contrast_hi = 1.0;
        p.saturation_lo = p.saturation_hi = 1.0;
        p.random_crop = false;
        return p;
    }
};

namespace detail {

inline Image crop(const Image& im, int64_t oy, int64_t ox, int64_t size) {
    Image out = Image::blank(size, size);
    for (int64_t c = 0; c < 3; ++c)
        for (int64_t y = 0; y < size; ++y)
            for (int64_t x = 0; x < size; ++x) out.at(c, y, x) = im.at(c, oy + y, ox + x);
    return out;
}

inline void flip_vertical(Image& im) {
    for (int64_t c = 0; c < 3; ++c)
        for (int64_t y = 0; y < im.height / 2; ++y)
            for (int64_t x = 0; x < im.width; ++x)
                std::swap(im.at(c, y, x), im.at(c, im.height - 1 - y, x));
}

inline void flip_horizontal(Image& im) {
    for (int64_t c = 0; c < 3; ++c)
        for (int64_t y = 0; y < im.height; ++y)
            for (int64_t x = 0; x < im.width / 2; ++x)
                std::swap(im.at(c, y, x), im.at(c, y, im.width - 1 - x));
}

}  // namespace detail

inline Image augment(const Image& im, const AugmentPolicy& policy, SeededRng& rng) {
    policy.validate();
    Image out = im;
    if (policy.crop_size > 0) {
        if (policy.crop_size > im.height || policy.crop_size > im.width)
            throw ShapeError("augment: crop_size " + std::to_string(policy.crop_size) +
                             " exceeds image extent " + std::to_string(im.height) + "x" +
                             std::to_string(im.width));
        int64_t oy, ox;
        if (policy.random_crop) {
            oy = int64_t(rng.next_below(uint64_t(im.height - policy.crop_size + 1)));
            ox = int64_t(rng.next_below(uint64_t(im.width - policy.crop_size + 1)));
        } else {
            oy = (im.height - policy.crop_size) / 2;
            ox = (im.width - policy.crop_size) / 2;
        }
        out = detail::crop(out, oy, ox, policy.crop_size);
    }
    if (rng.uniform01() < policy.p_vflip) detail::flip_vertical(out);
    if (rng.uniform01() < policy.p_hflip) detail::flip_horizontal(out);

    auto draw_factor = [&rng](double lo, double hi) {
        return lo == hi ? lo : rng.uniform(lo, hi);
    };
    const int64_t plane = out.pixels();

    const double fb = draw_factor(policy.brightness_lo, policy.brightness_hi);
    if (fb != 1.0)
        for (double& v : out.data) v *= fb;

    const double fc = draw_factor(policy.contrast_lo, policy.contrast_hi);
    if (fc != 1.0) {
        double mean = 0.0;
        for (int64_t i = 0; i < plane; ++i)
            mean += luma(out.data[size_t(i)], out.data[size_t(plane + i)],
                         out.data[size_t(2 * plane + i)]);
        mean /= double(plane);
        for (double& v : out.data) v = mean + (v - mean) * fc;
    }

    const double fs = draw_factor(policy.saturation_lo, policy.saturation_hi);
    if (fs != 1.0) {
        for (int64_t i = 0; i < plane; ++i) {
            const double g = luma(out.data[size_t(i)], out.data[size_t(plane + i)],
                                  out.data[size_t(2 * plane + i)]);
            for (int64_t c = 0; c < 3; ++c) {
                double& v = out.data[size_t(c * plane + i)];
                v = g + (v - g) * fs;
            }
        }
    }

    if (rng.uniform01() < policy.p_gray) {
        for (int64_t i = 0; i < plane; ++i) {
            const double g = luma(out.data[size_t(i)], out.data[size_t(plane + i)],
                                  out.data[size_t(2 * plane + i)]);
            out.data[size_t(i)] = g;
            out.data[size_t(plane + i)] = g;
            out.data[size_t(2 * plane + i)] = g;
        }
    }
    out.clamp01();
    return out;
}

// ---------------------------------------------------------------------------
// Hair removal: black-hat over the grayscale image with a cross-shaped
// structuring element, threshold into a mask, fill masked pixels with the
// mean of the nearest unmasked neighborhood. If more than 40% of pixels
// mask as hair the image is returned unchanged.
// ---------------------------------------------------------------------------

inline int64_t default_hair_kernel(int64_t extent) {
    int64_t k = std::llround(17.0 * double(extent) / 256.0);
    if (k < 3) k = 3;
    if (k % 2 == 0) ++k;
    return k;
}

namespace detail {

enum class MorphOp { dilate, erode };

// cross SE = union of a vertical and a horizontal segment, so the transform
// is the pixel-wise max (or min) of the two 1-d passes
inline std::vector<double> morph_cross(const std::vector<double>& src, int64_t h, int64_t w,
                                       int64_t radius, MorphOp op) {
    const bool dil = op == MorphOp::dilate;
    std::vector<double> horiz(src.size()), vert(src.size()), out(src.size());
    for (int64_t y = 0; y < h; ++y) {
        for (int64_t x = 0; x < w; ++x) {
            double best = src[size_t(y * w + x)];
            for (int64_t d = -radius; d <= radius; ++d) {
                const int64_t xx = std::clamp<int64_t>(x + d, 0, w - 1);
                const double v = src[size_t(y * w + xx)];
                best = dil ? std::max(best, v) : std::min(best, v);
            }
            horiz[size_t(y * w + x)] = best;
            best = src[size_t(y * w + x)];
            for (int64_t d = -radius; d <= radius; ++d) {
                const int64_t yy = std::clamp<int64_t>(y + d, 0, h - 1);
                const double v = src[size_t(yy * w + x)];
                best = dil ? std::max(best, v) : std::min(best, v);
            }
            vert[size_t(y * w + x)] = best;
        }
    }
    for (size_t i = 0; i < src.size(); ++i)
        out[i] = dil ? std::max(horiz[i], vert[i]) : std::min(horiz[i], vert[i]);
    return out;
}

}  // namespace detail

inline Image remove_hair(const Image& im, int64_t kernel_extent, double threshold) {
    if (kernel_extent < 3 || kernel_extent % 2 == 0)
        throw ConfigError("remove_hair: kernel extent must be odd and at least 3, got " +
                          std::to_string(kernel_extent));
    if (!(threshold > 0.0)) throw ConfigError("remove_hair: threshold must be positive");
    const int64_t h = im.height, w = im.width, plane = h * w;
    const int64_t radius = kernel_extent / 2;

    std::vector<double> gray(size_t(plane), 0.0);
    for (int64_t i = 0; i < plane; ++i)
        gray[size_t(i)] =
            luma(im.data[size_t(i)], im.data[size_t(plane + i)], im.data[size_t(2 * plane + i)]);

    // hair is dark on a lighter background: black-hat = closing - image
    const std::vector<double> dilated = detail::morph_cross(gray, h, w, radius, detail::MorphOp::dilate);
    const std::vector<double> closed = detail::morph_cross(dilated, h, w, radius, detail::MorphOp::erode);

    std::vector<char> mask(size_t(plane), 0);
    int64_t masked = 0;
    for (int64_t i = 0; i < plane; ++i) {
        if (closed[size_t(i)] - gray[size_t(i)] > threshold) {
            mask[size_t(i)] = 1;
            ++masked;
        }
    }
    if (masked == 0 || masked > (plane * 2) / 5) return im;

    Image out = im;
    for (int64_t y = 0; y < h; ++y) {
        for (int64_t x = 0; x < w; ++x) {
            if (!mask[size_t(y * w + x)]) continue;
            // expand the window until it holds at least one unmasked pixel
            for (int64_t r = 1; r < h + w; ++r) {
                double sum[3] = {0, 0, 0};
                int64_t n = 0;
                const int64_t y0 = std::max<int64_t>(0, y - r), y1 = std::min(h - 1, y + r);
                const int64_t x0 = std::max<int64_t>(0, x - r), x1 = std::min(w - 1, x + r);
                for (int64_t yy = y0; yy <= y1; ++yy) {
                    for (int64_t xx = x0; xx <= x1; ++xx) {
                        if (mask[size_t(yy * w + xx)]) continue;
                        for (int64_t c = 0; c < 3; ++c) sum[c] += im.at(c, yy, xx);
                        ++n;
                    }
                }
                if (n > 0) {
                    for (int64_t c = 0; c < 3; ++c) out.at(c, y, x) = sum[c] / double(n);
                    break;
                }
            }
        }
    }
    return out;
}

inline Image remove_hair(const Image& im) {
    return remove_hair(im, default_hair_kernel(std::min(im.height, im.width)), 0.04);
}

// ---------------------------------------------------------------------------
// Minority oversampling: duplicate minority-class records round-robin until
// minority/majority reaches target_ratio. Copies carry provenance
// "oversampled-copy k" and a fresh augmentation seed; originals are untouched.
// ---------------------------------------------------------------------------
inline std::vector<MetadataRecord> oversample(const std::vector<MetadataRecord>& records,
                                              double target_ratio, SeededRng& rng) {
    if (!(target_ratio > 0.0 && target_ratio <= 1.0))
        throw ConfigError("oversample: target_ratio must be in (0,1], got " +
                          std::to_string(target_ratio));
    int64_t pos = 0, neg = 0;
    for (const MetadataRecord& r : records) (r.target == 1 ? pos : neg)++;
    if (pos == 0 || neg == 0)
        throw DataError("oversample: both classes must be present (counts " +
                        std::to_string(neg) + " benign, " + std::to_string(pos) + " malignant)");

    const int minority_target = pos <= neg ? 1 : 0;
    const int64_t minority = std::min(pos, neg), majority = std::max(pos, neg);
    const int64_t wanted = int64_t(std::ceil(target_ratio * double(majority)));
    const int64_t copies = std::max<int64_t>(0, wanted - minority);

    std::vector<size_t> minority_idx;
    for (size_t i = 0; i < records.size(); ++i)
        if (records[i].target == minority_target) minority_idx.push_back(i);

    std::vector<MetadataRecord> out = records;
    for (int64_t k = 0; k < copies; ++k) {
        MetadataRecord copy = records[minority_idx[size_t(k) % minority_idx.size()]];
        copy.provenance = "oversampled-copy " + std::to_string(k / int64_t(minority_idx.size()) + 1);
        copy.aug_seed = rng.next_u64();
        out.push_back(std::move(copy));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Synthetic dataset: skin-toned background with one elliptical lesion.
// Malignant lesions are darker with irregular borders and belong to older
// patients; class-conditional ranges overlap so neither signal is perfect.
// ---------------------------------------------------------------------------
struct SynthDataset {
    std::vector<MetadataRecord> records;
    std::vector<Image> images;
};

namespace detail {

struct SynthPatient {
    std::string id;
    int target;
    double age;
    std::string sex;
    double tint_r, tint_g, tint_b;
};

inline Image synth_image(int64_t extent, int target, double lesion_dark,
                         const SynthPatient& patient, SeededRng& rng) {
    Image im = Image::blank(extent, extent);
    const double base_r = 0.80 + patient.tint_r, base_g = 0.62 + patient.tint_g,
                 base_b = 0.55 + patient.tint_b;

    const double cx = extent / 2.0 + rng.uniform(-extent / 8.0, extent / 8.0);
    const double cy = extent / 2.0 + rng.uniform(-extent / 8.0, extent / 8.0);
    const double rx = rng.uniform(extent / 6.0, extent / 3.5);
    const double ry = rng.uniform(extent / 6.0, extent / 3.5);
    const double angle = rng.uniform(0.0, 3.14159265358979323846);
    const double ca = std::cos(angle), sa = std::sin(angle);

    // border irregularity: radial modulation with a few random harmonics
    double amp[4] = {0, 0, 0, 0}, phase[4] = {0, 0, 0, 0};
    const double wobble = target == 1 ? rng.uniform(0.12, 0.30) : rng.uniform(0.0, 0.05);
    for (int k = 0; k < 4; ++k) {
        amp[k] = rng.uniform(0.2, 1.0) * wobble;
        phase[k] = rng.uniform(0.0, 6.28318530717958647692);
    }

    const double lr = lesion_dark * 0.9, lg = lesion_dark * 0.55, lb = lesion_dark * 0.5;
    for (int64_t y = 0; y < extent; ++y) {
        for (int64_t x = 0; x < extent; ++x) {
            const double dx = (double(x) - cx), dy = (double(y) - cy);
            const double u = (dx * ca + dy * sa) / rx, v = (-dx * sa + dy * ca) / ry;
            const double rho = std::sqrt(u * u + v * v);
            const double theta = std::atan2(v, u);
            double edge = 1.0;
            for (int k = 0; k < 4; ++k) edge += amp[k] * std::sin(double(k + 2) * theta + phase[k]);
            const double t = rho / std::max(0.2, edge);
            const double noise = rng.uniform(-0.02, 0.02);
            double r = base_r + noise, g = base_g + noise, b = base_b + noise;
            if (t < 1.0) {
                const double a = std::min(1.0, (1.0 - t) * 4.0);  // soft rim
                r = (1.0 - a) * r + a * (lr + noise);
                g = (1.0 - a) * g + a * (lg + noise);
                b = (1.0 - a) * b + a * (lb + noise);
            }
            im.at(0, y, x) = r;
            im.at(1, y, x) = g;
            im.at(2, y, x) = b;
        }
    }
    im.clamp01();
    return im;
}

}  // namespace detail

inline SynthDataset synth_generate(int64_t n, double malignant_fraction, int64_t image_extent,
                                   uint64_t seed) {
    if (n < 10) throw ConfigError("synth_generate: need at least 10 samples, got " + std::to_string(n));
    if (!(malignant_fraction > 0.0 && malignant_fraction < 1.0))
        throw ConfigError("synth_generate: malignant_fraction must be in (0,1)");
    if (image_extent < 16) throw ConfigError("synth_generate: image extent must be at least 16");

    SeededRng rng(seed);
    const int64_t n_mal = std::max<int64_t>(1, std::llround(double(n) * malignant_fraction));
    const int64_t n_ben = n - n_mal;
    if (n_ben < 1) throw ConfigError("synth_generate: malignant_fraction leaves no benign samples");

    static const char* kSites[6] = {"torso",           "lower extremity", "upper extremity",
                                    "head/neck",       "palms/soles",     "oral/genital"};

    // each patient carries 1-5 images, all of one class
    std::vector<detail::SynthPatient> patients;
    std::vector<int64_t> patient_quota;
    int64_t next_patient = 1;
    auto make_patients = [&](int target, int64_t count) {
        int64_t done = 0;
        while (done < count) {
            detail::SynthPatient p;
            char buf[16];
            std::snprintf(buf, sizeof buf, "SP_%06lld", static_cast<long long>(next_patient++));
            p.id = buf;
            p.target = target;
            const double mu = target == 1 ? 68.0 : 38.0, sigma = target == 1 ? 10.0 : 12.0;
            p.age = std::clamp(mu + sigma * rng.normal(), 15.0, 90.0);
            p.age = 5.0 * std::llround(p.age / 5.0);  // ages come in 5-year bins
            p.sex = rng.uniform01() < 0.05 ? "unknown" : (rng.bernoulli(0.5) ? "male" : "female");
            p.tint_r = rng.uniform(-0.06, 0.06);
            p.tint_g = rng.uniform(-0.06, 0.06);
            p.tint_b = rng.uniform(-0.06, 0.06);
            const int64_t quota = std::min<int64_t>(count - done, 1 + int64_t(rng.next_below(5)));
            patients.push_back(p);
            patient_quota.push_back(quota);
            done += quota;
        }
    };
    make_patients(1, n_mal);
    make_patients(0, n_ben);

    SynthDataset ds;
    int64_t sample = 1;
    for (size_t pi = 0; pi < patients.size(); ++pi) {
        const detail::SynthPatient& p = patients[pi];
        for (int64_t j = 0; j < patient_quota[pi]; ++j) {
            MetadataRecord r;
            char buf[24];
            std::snprintf(buf, sizeof buf, "synth_%06lld", static_cast<long long>(sample++));
            r.image_name = buf;
            r.patient_id = p.id;
            r.sex = p.sex;
            r.age_approx = p.age;
            r.age_missing = false;
            if (rng.uniform01() < 0.08) {
                r.anatom_site.clear();
                r.age_missing = rng.uniform01() < 0.5;  // some rows miss age too
            } else {
                r.anatom_site = kSites[rng.next_below(6)];
            }
            r.target = p.target;
            r.benign_malignant = p.target == 1 ? "malignant" : "benign";
            r.diagnosis = p.target == 1 ? "melanoma" : "nevus";

            const double dark = p.target == 1 ? rng.uniform(0.12, 0.38) : rng.uniform(0.30, 0.52);
            ds.images.push_back(detail::synth_image(image_extent, p.target, dark, p, rng));
            ds.records.push_back(std::move(r));
        }
    }
    return ds;
}

// per-sample augmentation seed, stable across runs with the same global seed
inline uint64_t sample_seed(uint64_t global_seed, const std::string& image_name) {
    return hash_mix({global_seed, fnv1a64(image_name)});
}

}  // namespace dermfuse
