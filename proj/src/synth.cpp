// SPDX-License-Identifier: Apache-2.0
#include "ctrlfuse/synth.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "ctrlfuse/errors.hpp"
#include "ctrlfuse/rng.hpp"

namespace ctrlfuse {

namespace {

struct Box {
    double cy, cx, ry, rx;
};

bool in_ellipse(const Box& b, double y, double x) {
    const double dy = (y - b.cy) / b.ry, dx = (x - b.cx) / b.rx;
    return dy * dy + dx * dx <= 1.0;
}

bool in_rect(const Box& b, double y, double x) { return std::abs(y - b.cy) <= b.ry && std::abs(x - b.cx) <= b.rx; }

// Axis-aligned bounds with a one-pixel margin so the two objects never touch.
bool overlaps(const Box& a, const Box& b) {
    return std::abs(a.cy - b.cy) <= a.ry + b.ry + 1.0 && std::abs(a.cx - b.cx) <= a.rx + b.rx + 1.0;
}

Box place(Rng& rng, double s, double ry, double rx) {
    return {rng.uniform(ry + 1.0, s - ry - 2.0), rng.uniform(rx + 1.0, s - rx - 2.0), ry, rx};
}

}  // namespace

const char* to_string(SceneClass c) {
    switch (c) {
        case SceneClass::background: return "background";
        case SceneClass::person: return "person";
        case SceneClass::car: return "car";
    }
    return "background";
}

bool SynthScene::has(SceneClass c) const {
    const auto& labels = *pair.labels;
    return std::find(labels.begin(), labels.end(), static_cast<std::uint8_t>(c)) != labels.end();
}

std::vector<SceneClass> SynthScene::objects() const {
    std::vector<SceneClass> out;
    for (SceneClass c : {SceneClass::person, SceneClass::car})
        if (has(c)) out.push_back(c);
    return out;
}

PromptMask SynthScene::mask(SceneClass c) const {
    const auto& labels = *pair.labels;
    std::vector<double> m(labels.size());
    for (std::size_t i = 0; i < labels.size(); ++i) m[i] = labels[i] == static_cast<std::uint8_t>(c) ? 1.0 : 0.0;
    return PromptMask::from_values(pair.height(), pair.width(), m);
}

SynthScene synth_scene(std::size_t size, std::uint64_t seed, std::size_t index) {
    if (size < 16) throw ConfigError("synthetic scenes need size >= 16, got " + std::to_string(size));
    const std::uint64_t scene_seed = derive_seed(seed, "scene/" + std::to_string(index));
    Rng rng(scene_seed);
    const double s = static_cast<double>(size);

    bool want_person = rng.uniform() < 0.85;
    const bool want_car = rng.uniform() < 0.75;
    if (!want_person && !want_car) want_person = true;

    const Box car = place(rng, s, rng.uniform(s / 10, s / 7), rng.uniform(s / 7, s / 5));
    bool has_car = want_car;
    Box person{};
    bool has_person = false;
    if (want_person) {
        const double ry = rng.uniform(s / 8, s / 5), rx = ry * rng.uniform(0.45, 0.7);
        for (int attempt = 0; attempt < 64 && !has_person; ++attempt) {
            person = place(rng, s, ry, rx);
            has_person = !has_car || !overlaps(person, car);
        }
        if (!has_person && !has_car) throw ConfigError("could not place any object");
    }

    const double ir_base = rng.uniform(0.1, 0.22);
    const double ir_tilt = rng.uniform(-0.06, 0.06);
    double vis_base[3];
    for (double& c : vis_base) c = rng.uniform(0.35, 0.6);
    const double vis_tilt = rng.uniform(-0.15, 0.15);
    const double person_heat = rng.uniform(0.8, 0.92);
    const double car_heat = rng.uniform(0.45, 0.55);
    double person_rgb[3], car_rgb[3];
    for (double& c : person_rgb) c = rng.uniform(0.15, 0.35);
    for (double& c : car_rgb) c = rng.uniform(0.3, 0.9);
    const std::size_t stripe = 2 + rng.below(2);

    std::vector<double> ir(size * size), vis(3 * size * size);
    std::vector<std::uint8_t> labels(size * size, 0);
    for (std::size_t y = 0; y < size; ++y) {
        for (std::size_t x = 0; x < size; ++x) {
            const std::size_t i = y * size + x;
            const double fy = static_cast<double>(y), fx = static_cast<double>(x);
            const double vert = fy / s - 0.5;
            double t = ir_base + ir_tilt * vert + 0.02 * rng.normal();
            double rgb[3];
            for (int c = 0; c < 3; ++c) rgb[c] = vis_base[c] + vis_tilt * vert + 0.03 * rng.normal();

            if (has_car && in_rect(car, fy, fx)) {
                labels[i] = static_cast<std::uint8_t>(SceneClass::car);
                t = car_heat + 0.02 * rng.normal();
                const bool dark = ((x / stripe) % 2) == 0;
                for (int c = 0; c < 3; ++c) rgb[c] = dark ? 0.15 * car_rgb[c] : car_rgb[c];
            } else if (has_person && in_ellipse(person, fy, fx)) {
                labels[i] = static_cast<std::uint8_t>(SceneClass::person);
                const double dy = (fy - person.cy) / person.ry, dx = (fx - person.cx) / person.rx;
                t = person_heat + 0.08 * (1.0 - std::sqrt(dy * dy + dx * dx)) + 0.01 * rng.normal();
                for (int c = 0; c < 3; ++c) rgb[c] = person_rgb[c] + 0.02 * rng.normal();
            }
            ir[i] = std::clamp(t, 0.0, 1.0);
            for (int c = 0; c < 3; ++c) vis[c * size * size + i] = std::clamp(rgb[c], 0.0, 1.0);
        }
    }

    SynthScene scene;
    scene.seed = scene_seed;
    scene.pair.ir = Tensor::from({1, size, size}, std::move(ir));
    scene.pair.vis = Tensor::from({3, size, size}, std::move(vis));
    scene.pair.labels = std::move(labels);
    return scene;
}

std::vector<SynthScene> synth_generate(std::size_t n, std::size_t size, std::uint64_t seed) {
    std::vector<SynthScene> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) out.push_back(synth_scene(size, seed, i));
    return out;
}

}  // namespace ctrlfuse
