#pragma once

#include <cstdint>
#include <vector>

#include "flowcf/features.hpp"
#include "flowcf/rng.hpp"
#include "flowcf/tensor.hpp"

// Synthetic grayscale sequences with exact ground truth: a textured
// target over a textured background, optional deformation, illumination
// drift and a scheduled occluder. Everything is deterministic per seed.

namespace flowcf {

enum class MotionModel { statics, translate, sinusoid };

struct SynthConfig {
    int frames = 60;
    int width = 96;
    int height = 96;
    int target_w = 24;
    int target_h = 24;
    MotionModel motion = MotionModel::statics;
    double dx = 0.0, dy = 0.0;          // translate: pixels per frame
    double amp_x = 0.0, amp_y = 0.0;    // sinusoid: amplitude in pixels
    double period = 40.0;               // sinusoid period in frames
    double deform = 0.0;                // target scale wobble amplitude
    double illum = 0.0;                 // illumination drift amplitude
    int occl_start = -1;                // first occluded frame, -1 = never
    int occl_len = 0;                   // occluded frames per burst
    int occl_period = 0;                // burst repeat interval, 0 = once
    double coverage = 0.0;              // occluded fraction of target area
    std::uint64_t seed = 1;
};

struct SynthSequence {
    std::vector<Tensor3> frames;
    std::vector<BoundingBox> gt;
};

namespace detail {

// Texture values in [lo, hi]; box-blurred noise so flow estimation and
// gradients have structure to work with.
inline Tensor3 texture(int h, int w, Rng& rng, double lo, double hi) {
    Tensor3 t(h, w, 1);
    for (double& v : t.data) v = rng.uniform(lo, hi);
    Tensor3 tmp(h, w, 1);
    for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j) {
            double acc = 0.0;
            for (int d = -1; d <= 1; ++d) acc += t.at_clamped(i, j + d, 0);
            tmp.at(i, j, 0) = acc / 3.0;
        }
    for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j) {
            double acc = 0.0;
            for (int d = -1; d <= 1; ++d) acc += tmp.at_clamped(i + d, j, 0);
            t.at(i, j, 0) = acc / 3.0;
        }
    return t;
}

inline bool occluded_at(const SynthConfig& cfg, int t) {
    if (cfg.occl_start < 0 || cfg.occl_len <= 0 || cfg.coverage <= 0.0) return false;
    if (t < cfg.occl_start) return false;
    const int since = t - cfg.occl_start;
    if (cfg.occl_period <= 0) return since < cfg.occl_len;
    return since % cfg.occl_period < cfg.occl_len;
}

// Paints `tex` scaled to (tw, th) centered at (cx, cy); pixels whose
// centers fall inside the extent sample the texture bilinearly.
inline void paint(Tensor3& img, const Tensor3& tex, double cx, double cy, double tw, double th) {
    const int j0 = static_cast<int>(std::ceil(cx - tw / 2.0 - 0.5));
    const int j1 = static_cast<int>(std::floor(cx + tw / 2.0 - 0.5));
    const int i0 = static_cast<int>(std::ceil(cy - th / 2.0 - 0.5));
    const int i1 = static_cast<int>(std::floor(cy + th / 2.0 - 0.5));
    for (int i = std::max(0, i0); i <= std::min(img.h - 1, i1); ++i)
        for (int j = std::max(0, j0); j <= std::min(img.w - 1, j1); ++j) {
            const double ty = (i - (cy - th / 2.0)) / th * (tex.h - 1);
            const double tx = (j - (cx - tw / 2.0)) / tw * (tex.w - 1);
            img.at(i, j, 0) = bilinear_clamped(tex, ty, tx, 0);
        }
}

} // namespace detail

inline SynthSequence synth_sequence(const SynthConfig& cfg) {
    if (cfg.frames < 2) throw invalid_input("synth_sequence: need at least 2 frames");
    if (cfg.target_w > cfg.width || cfg.target_h > cfg.height)
        throw invalid_input("synth_sequence: target larger than image");
    if (cfg.coverage < 0.0 || cfg.coverage > 1.0)
        throw invalid_input("synth_sequence: coverage must be in [0, 1]");

    Rng rng(cfg.seed);
    const Tensor3 background = detail::texture(cfg.height, cfg.width, rng, 0.1, 0.45);
    const Tensor3 target_tex = detail::texture(cfg.target_h * 2, cfg.target_w * 2, rng, 0.35, 0.7);
    // Occluder values sit above everything else so occluded pixels always
    // differ from the clean render.
    const Tensor3 occl_tex = detail::texture(cfg.target_h * 2, cfg.target_w * 2, rng, 0.85, 1.0);
    const double occl_off_x = rng.uniform(-0.2, 0.2) * cfg.target_w;
    const double occl_off_y = rng.uniform(-0.2, 0.2) * cfg.target_h;

    const double margin_x = cfg.target_w * 0.75 + 2.0;
    const double margin_y = cfg.target_h * 0.75 + 2.0;
    double cx0 = cfg.width / 2.0, cy0 = cfg.height / 2.0;
    if (cfg.motion == MotionModel::translate) {
        // Start so the whole trajectory stays in frame when possible.
        if (cfg.dx < 0) cx0 = cfg.width - margin_x;
        else if (cfg.dx > 0) cx0 = margin_x;
        if (cfg.dy < 0) cy0 = cfg.height - margin_y;
        else if (cfg.dy > 0) cy0 = margin_y;
    }

    SynthSequence seq;
    for (int t = 0; t < cfg.frames; ++t) {
        double cx = cx0, cy = cy0;
        if (cfg.motion == MotionModel::translate) {
            cx += cfg.dx * t;
            cy += cfg.dy * t;
        } else if (cfg.motion == MotionModel::sinusoid) {
            cx += cfg.amp_x * std::sin(2.0 * detail::kPi * t / cfg.period);
            cy += cfg.amp_y * std::sin(2.0 * detail::kPi * t / (cfg.period * 1.7) + 0.9);
        }
        const double scale = 1.0 + cfg.deform * std::sin(2.0 * detail::kPi * t / std::max(cfg.period, 8.0));
        const double tw = cfg.target_w * scale, th = cfg.target_h * scale;

        Tensor3 frame = background;
        detail::paint(frame, target_tex, cx, cy, tw, th);
        if (detail::occluded_at(cfg, t)) {
            const double side = std::sqrt(cfg.coverage);
            detail::paint(frame, occl_tex, cx + occl_off_x * (1.0 - side), cy + occl_off_y * (1.0 - side),
                          tw * side, th * side);
        }
        if (cfg.illum != 0.0) {
            const double gain = 1.0 + cfg.illum * std::sin(2.0 * detail::kPi * t / 50.0);
            for (double& v : frame.data) v = std::clamp(v * gain, 0.0, 1.0);
        }
        seq.frames.push_back(std::move(frame));
        seq.gt.push_back(BoundingBox{cx - tw / 2.0, cy - th / 2.0, tw, th});
    }
    return seq;
}

} // namespace flowcf
