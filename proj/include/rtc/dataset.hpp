#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "rtc/io.hpp"
#include "rtc/random.hpp"
#include "rtc/tensor.hpp"

// Synthetic shapes corpus: 64x64 RGB images of 1-3 colored shapes (circle,
// square, triangle, cross) over a textured gray background, with dense
// ground-truth masks and multi-hot image-level labels derived from the mask.

namespace rtc {

struct Sample {
    Tensor image;                    // 3 x H x W in [0, 1]
    std::vector<std::uint8_t> mask;  // H*W, 0 = background, 1..C = classes
    std::vector<int> label;          // multi-hot, length C
};

struct Dataset {
    std::vector<Sample> samples;
    std::size_t classes = 4;
    std::size_t height = 64, width = 64;

    std::vector<int> present_classes(std::size_t index) const {
        std::vector<int> out;
        for (std::size_t c = 0; c < classes; ++c)
            if (samples[index].label[c]) out.push_back(static_cast<int>(c));
        return out;
    }
};

inline const std::vector<std::string>& shape_class_names() {
    static const std::vector<std::string> names = {"circle", "square", "triangle", "cross"};
    return names;
}

namespace detail {

struct ShapeSpec {
    int cls;  // 0-based class id
    double cx, cy, radius;
};

inline bool inside_shape(const ShapeSpec& s, double x, double y) {
    const double dx = x - s.cx, dy = y - s.cy;
    switch (s.cls) {
        case 0:  // circle
            return dx * dx + dy * dy <= s.radius * s.radius;
        case 1:  // square
            return std::fabs(dx) <= s.radius && std::fabs(dy) <= s.radius;
        case 2: {  // upward triangle
            if (dy < -s.radius || dy > s.radius) return false;
            const double t = (dy + s.radius) / (2.0 * s.radius);
            return std::fabs(dx) <= t * s.radius;
        }
        default: {  // cross
            const double arm = s.radius / 3.0;
            return (std::fabs(dx) <= arm && std::fabs(dy) <= s.radius) ||
                   (std::fabs(dy) <= arm && std::fabs(dx) <= s.radius);
        }
    }
}

// Class-correlated base colors, slightly jittered per shape instance.
inline std::array<double, 3> class_color(int cls, Rng& rng) {
    static const double base[4][3] = {
        {0.85, 0.20, 0.20},  // circle: red
        {0.20, 0.78, 0.25},  // square: green
        {0.22, 0.35, 0.88},  // triangle: blue
        {0.85, 0.80, 0.20},  // cross: yellow
    };
    std::array<double, 3> c{};
    for (int i = 0; i < 3; ++i) c[i] = base[cls][i] + rng.uniform(-0.06, 0.06);
    return c;
}

}  // namespace detail

inline Sample generate_sample(std::size_t classes, std::size_t height, std::size_t width,
                              Rng& rng, std::vector<int>* class_deck = nullptr) {
    const double min_r = 11.0, max_r = 19.0;
    const std::size_t count = 1 + rng.below(3);
    std::vector<detail::ShapeSpec> shapes;
    for (std::size_t s = 0; s < count; ++s) {
        int cls;
        if (class_deck && !class_deck->empty()) {
            cls = class_deck->back();
            class_deck->pop_back();
        } else {
            cls = static_cast<int>(rng.below(classes));
        }
        detail::ShapeSpec spec;
        spec.cls = cls;
        spec.radius = rng.uniform(min_r, max_r);
        // a few placement attempts to keep shapes from occluding each other
        for (int attempt = 0; attempt < 12; ++attempt) {
            spec.cx = rng.uniform(spec.radius + 1.0, width - spec.radius - 1.0);
            spec.cy = rng.uniform(spec.radius + 1.0, height - spec.radius - 1.0);
            bool clear = true;
            for (const auto& other : shapes) {
                const double dx = spec.cx - other.cx, dy = spec.cy - other.cy;
                if (std::sqrt(dx * dx + dy * dy) < 0.9 * (spec.radius + other.radius)) {
                    clear = false;
                    break;
                }
            }
            if (clear) break;
        }
        shapes.push_back(spec);
    }

    // textured background: soft luminance waves over mid gray
    const double fx = rng.uniform(0.04, 0.12), fy = rng.uniform(0.04, 0.12);
    const double phase = rng.uniform(0.0, 6.28318);
    const double bg_tint = rng.uniform(-0.04, 0.04);

    std::vector<std::array<double, 3>> colors;
    for (const auto& s : shapes) colors.push_back(detail::class_color(s.cls, rng));

    Sample out;
    out.mask.assign(height * width, 0);
    out.label.assign(classes, 0);
    std::vector<double> pix(3 * height * width);
    for (std::size_t y = 0; y < height; ++y)
        for (std::size_t x = 0; x < width; ++x) {
            const std::size_t i = y * width + x;
            const double tex =
                0.45 + bg_tint +
                0.08 * std::sin(fx * static_cast<double>(x) * 6.28318 + phase) *
                    std::cos(fy * static_cast<double>(y) * 6.28318);
            std::array<double, 3> rgb = {tex, tex, tex};
            for (std::size_t s = 0; s < shapes.size(); ++s)
                if (detail::inside_shape(shapes[s], static_cast<double>(x),
                                         static_cast<double>(y))) {
                    rgb = colors[s];
                    out.mask[i] = static_cast<std::uint8_t>(shapes[s].cls + 1);
                }
            // stored zero-centered so a mid-gray scene maps near the origin
            for (int c = 0; c < 3; ++c) {
                double v = rgb[static_cast<std::size_t>(c)] + 0.05 * rng.normal();
                pix[static_cast<std::size_t>(c) * height * width + i] =
                    std::min(std::max(v, 0.0), 1.0) - 0.5;
            }
        }
    for (std::uint8_t m : out.mask)
        if (m > 0) out.label[m - 1] = 1;
    out.image = Tensor::from({3, height, width}, std::move(pix));
    return out;
}

inline Dataset generate_dataset(std::size_t count, std::size_t classes, std::uint64_t seed) {
    detail::require(classes >= 2 && classes <= 8, "generate_dataset: classes must be in 2..8");
    detail::require(classes <= shape_class_names().size(),
                    "generate_dataset: more classes than shape kinds");
    Dataset out;
    out.classes = classes;
    Rng rng(seed);
    // shuffled class deck keeps the per-class instance counts near uniform
    std::vector<int> deck;
    auto refill = [&] {
        std::vector<int> fresh;
        for (std::size_t c = 0; c < classes; ++c)
            for (int rep = 0; rep < 4; ++rep) fresh.push_back(static_cast<int>(c));
        for (std::size_t i = fresh.size(); i > 1; --i)
            std::swap(fresh[i - 1], fresh[rng.below(i)]);
        deck = fresh;
    };
    for (std::size_t i = 0; i < count; ++i) {
        if (deck.size() < 3) refill();
        out.samples.push_back(generate_sample(classes, out.height, out.width, rng, &deck));
    }
    return out;
}

// Train and validation splits come from disjoint seed streams.
inline std::pair<Dataset, Dataset> generate_splits(std::size_t n_train, std::size_t n_val,
                                                   std::size_t classes, std::uint64_t seed) {
    return {generate_dataset(n_train, classes, derive_seed(seed, 1)),
            generate_dataset(n_val, classes, derive_seed(seed, 2))};
}

// ---------------------------------------------------------------------------
// on-disk layout: per-sample RTT1 image + PGM mask, plus a JSON manifest
// ---------------------------------------------------------------------------

inline void save_dataset(const Dataset& ds, const std::string& dir, std::uint64_t seed) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    nlohmann::json manifest;
    manifest["seed"] = seed;
    manifest["height"] = ds.height;
    manifest["width"] = ds.width;
    nlohmann::json class_names = nlohmann::json::array();
    for (std::size_t c = 0; c < ds.classes; ++c) class_names.push_back(shape_class_names()[c]);
    manifest["classes"] = class_names;
    nlohmann::json samples = nlohmann::json::array();
    for (std::size_t i = 0; i < ds.samples.size(); ++i) {
        char name[32];
        std::snprintf(name, sizeof(name), "sample_%04zu", i);
        const std::string image_rel = std::string(name) + ".rtt";
        const std::string mask_rel = std::string(name) + ".pgm";
        io::save_tensor(ds.samples[i].image, dir + "/" + image_rel);
        io::Mask m;
        m.height = ds.height;
        m.width = ds.width;
        m.labels = ds.samples[i].mask;
        io::save_mask(m, dir + "/" + mask_rel);
        samples.push_back({{"image", image_rel},
                           {"mask", mask_rel},
                           {"label", ds.samples[i].label}});
    }
    manifest["samples"] = std::move(samples);
    std::ofstream out(dir + "/manifest.json");
    if (!out) throw std::runtime_error("cannot write manifest in " + dir);
    out << manifest.dump(2) << "\n";
}

inline Dataset load_dataset(const std::string& dir) {
    std::ifstream in(dir + "/manifest.json");
    if (!in) throw std::runtime_error("cannot open " + dir + "/manifest.json");
    nlohmann::json manifest = nlohmann::json::parse(in);
    Dataset ds;
    ds.height = manifest.at("height").get<std::size_t>();
    ds.width = manifest.at("width").get<std::size_t>();
    ds.classes = manifest.at("classes").size();
    for (const auto& entry : manifest.at("samples")) {
        Sample s;
        s.image = io::load_tensor(dir + "/" + entry.at("image").get<std::string>());
        io::Mask m = io::load_mask(dir + "/" + entry.at("mask").get<std::string>());
        if (m.height != ds.height || m.width != ds.width)
            throw std::runtime_error("mask size mismatch in " + dir);
        s.mask = std::move(m.labels);
        s.label = entry.at("label").get<std::vector<int>>();
        ds.samples.push_back(std::move(s));
    }
    return ds;
}

}  // namespace rtc
