#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>

#include "flowcf/features.hpp"
#include "flowcf/tensor.hpp"

// Dense optical flow: a classical pyramidal local least-squares estimator,
// flow-guided bilinear warping with exact gradients, and Middlebury .flo
// file I/O.
//
// A FlowField lives on the reference grid: channel 0 is u (column
// displacement), channel 1 is v (row displacement), and warping samples
// the source at p + (v, u), i.e. warped(p) = source(p + flow(p)).

namespace flowcf {

struct FlowField {
    Tensor3 uv; // c = 2: [u, v]

    FlowField() = default;
    FlowField(int h, int w) : uv(h, w, 2) {}

    double& u(int i, int j) { return uv.at(i, j, 0); }
    double& v(int i, int j) { return uv.at(i, j, 1); }
    double u(int i, int j) const { return uv.at(i, j, 0); }
    double v(int i, int j) const { return uv.at(i, j, 1); }
};

struct FlowConfig {
    int levels = 3;
    int iterations = 8;
    double smoothness = 1.0;   // blend weight toward the blurred field
    double search_radius = 16; // hard clamp on |u|, |v|
    int window_radius = 3;     // local least-squares window
};

// --- warping -------------------------------------------------------------

// Bilinear backward warp with clamp-to-edge sampling; out-of-range
// positions read the border, so the operation is total.
inline FeaturePatch warp(const FeaturePatch& phi, const FlowField& flow) {
    if (flow.uv.h != phi.map.h || flow.uv.w != phi.map.w)
        throw invalid_input("warp: flow grid does not match feature dims");
    FeaturePatch out = phi;
    for (int i = 0; i < phi.map.h; ++i)
        for (int j = 0; j < phi.map.w; ++j) {
            const double r = i + flow.v(i, j);
            const double c = j + flow.u(i, j);
            for (int l = 0; l < phi.map.c; ++l)
                out.map.at(i, j, l) = detail::bilinear_clamped(phi.map, r, c, l);
        }
    return out;
}

// Gradients of warp: grad_phi scatters grad_out through the bilinear
// weights; grad_flow contracts grad_out with the kernel's spatial
// derivative times phi. The kernel derivative at integer sample points is
// right-continuous (floor-based), matching the forward's corner choice.
inline void warp_backward(const Tensor3& grad_out, const FeaturePatch& phi, const FlowField& flow,
                          Tensor3& grad_phi, Tensor3& grad_flow) {
    if (!grad_out.same_shape(phi.map))
        throw invalid_input("warp_backward: gradient shape does not match features");
    if (flow.uv.h != phi.map.h || flow.uv.w != phi.map.w)
        throw invalid_input("warp_backward: flow grid does not match feature dims");

    const int h = phi.map.h, w = phi.map.w;
    grad_phi = Tensor3(h, w, phi.map.c);
    grad_flow = Tensor3(h, w, 2);
    auto clampi = [](int v, int hi) { return v < 0 ? 0 : (v > hi ? hi : v); };
    for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j) {
            const double r = i + flow.v(i, j);
            const double c = j + flow.u(i, j);
            const int r0 = static_cast<int>(std::floor(r));
            const int c0 = static_cast<int>(std::floor(c));
            const double fr = r - r0, fc = c - c0;
            const int ri0 = clampi(r0, h - 1), ri1 = clampi(r0 + 1, h - 1);
            const int ci0 = clampi(c0, w - 1), ci1 = clampi(c0 + 1, w - 1);
            double du = 0.0, dv = 0.0;
            for (int l = 0; l < phi.map.c; ++l) {
                const double g = grad_out.at(i, j, l);
                if (g == 0.0) continue;
                grad_phi.at(ri0, ci0, l) += g * (1 - fr) * (1 - fc);
                grad_phi.at(ri0, ci1, l) += g * (1 - fr) * fc;
                grad_phi.at(ri1, ci0, l) += g * fr * (1 - fc);
                grad_phi.at(ri1, ci1, l) += g * fr * fc;
                const double v00 = phi.map.at(ri0, ci0, l), v01 = phi.map.at(ri0, ci1, l);
                const double v10 = phi.map.at(ri1, ci0, l), v11 = phi.map.at(ri1, ci1, l);
                du += g * ((1 - fr) * (v01 - v00) + fr * (v11 - v10));
                dv += g * ((1 - fc) * (v10 - v00) + fc * (v11 - v01));
            }
            grad_flow.at(i, j, 0) = du;
            grad_flow.at(i, j, 1) = dv;
        }
}

// --- estimation ------------------------------------------------------

namespace detail {

inline Tensor3 downsample2(const Tensor3& img) {
    const int h = std::max(1, img.h / 2), w = std::max(1, img.w / 2);
    Tensor3 out(h, w, img.c);
    for (int l = 0; l < img.c; ++l)
        for (int i = 0; i < h; ++i)
            for (int j = 0; j < w; ++j) {
                double acc = 0.0;
                int n = 0;
                for (int di = 0; di < 2; ++di)
                    for (int dj = 0; dj < 2; ++dj) {
                        const int ii = 2 * i + di, jj = 2 * j + dj;
                        if (ii < img.h && jj < img.w) {
                            acc += img.at(ii, jj, l);
                            ++n;
                        }
                    }
                out.at(i, j, l) = acc / n;
            }
    return out;
}

inline Tensor3 resize_bilinear(const Tensor3& img, int h, int w) {
    Tensor3 out(h, w, img.c);
    const double sr = static_cast<double>(img.h) / h;
    const double sc = static_cast<double>(img.w) / w;
    for (int l = 0; l < img.c; ++l)
        for (int i = 0; i < h; ++i)
            for (int j = 0; j < w; ++j)
                out.at(i, j, l) = bilinear_clamped(img, (i + 0.5) * sr - 0.5, (j + 0.5) * sc - 0.5, l);
    return out;
}

// Separable box blur with edge replication, radius >= 1.
inline Tensor3 box_blur(const Tensor3& img, int radius) {
    if (radius < 1) return img;
    Tensor3 tmp(img.h, img.w, img.c), out(img.h, img.w, img.c);
    const double inv = 1.0 / (2 * radius + 1);
    for (int l = 0; l < img.c; ++l) {
        for (int i = 0; i < img.h; ++i)
            for (int j = 0; j < img.w; ++j) {
                double acc = 0.0;
                for (int d = -radius; d <= radius; ++d) acc += img.at_clamped(i, j + d, l);
                tmp.at(i, j, l) = acc * inv;
            }
        for (int i = 0; i < img.h; ++i)
            for (int j = 0; j < img.w; ++j) {
                double acc = 0.0;
                for (int d = -radius; d <= radius; ++d) acc += tmp.at_clamped(i + d, j, l);
                out.at(i, j, l) = acc * inv;
            }
    }
    return out;
}

} // namespace detail

// Coarse-to-fine estimation of flow such that b(p) ~= a(p + flow(p)).
// At each level the current warp of `a` is compared with `b`, a windowed
// 2x2 least-squares step updates the field, and the field is relaxed
// toward its box blur. Deterministic for fixed inputs and config.
inline FlowField estimate_flow(const Tensor3& img_a, const Tensor3& img_b, const FlowConfig& cfg) {
    if (!img_a.same_shape(img_b)) throw invalid_input("estimate_flow: image shapes differ");
    if (img_a.c != 1) throw invalid_input("estimate_flow: expected single-channel images");
    if (cfg.levels < 1 || cfg.iterations < 1)
        throw invalid_input("estimate_flow: levels and iterations must be >= 1");

    std::vector<Tensor3> pa{img_a}, pb{img_b};
    while (static_cast<int>(pa.size()) < cfg.levels && pa.back().h >= 16 && pa.back().w >= 16) {
        pa.push_back(detail::downsample2(pa.back()));
        pb.push_back(detail::downsample2(pb.back()));
    }

    FlowField flow(pa.back().h, pa.back().w);
    for (int level = static_cast<int>(pa.size()) - 1; level >= 0; --level) {
        const Tensor3& a = pa[level];
        const Tensor3& b = pb[level];
        if (flow.uv.h != a.h || flow.uv.w != a.w) {
            Tensor3 up = detail::resize_bilinear(flow.uv, a.h, a.w);
            for (double& x : up.data) x *= 2.0;
            flow.uv = std::move(up);
        }
        FeaturePatch ap;
        ap.map = a;
        for (int it = 0; it < cfg.iterations; ++it) {
            const Tensor3 warped = warp(ap, flow).map;
            const int wr = cfg.window_radius;
            // Per-pixel gradient products, then box sums over the window.
            Tensor3 prods(a.h, a.w, 5);
            for (int i = 0; i < a.h; ++i)
                for (int j = 0; j < a.w; ++j) {
                    const double gx =
                        0.5 * (warped.at_clamped(i, j + 1, 0) - warped.at_clamped(i, j - 1, 0));
                    const double gy =
                        0.5 * (warped.at_clamped(i + 1, j, 0) - warped.at_clamped(i - 1, j, 0));
                    const double r = b.at(i, j, 0) - warped.at(i, j, 0);
                    prods.at(i, j, 0) = gx * gx;
                    prods.at(i, j, 1) = gx * gy;
                    prods.at(i, j, 2) = gy * gy;
                    prods.at(i, j, 3) = gx * r;
                    prods.at(i, j, 4) = gy * r;
                }
            const Tensor3 sums = detail::box_blur(prods, wr);
            for (int i = 0; i < a.h; ++i)
                for (int j = 0; j < a.w; ++j) {
                    const double sxx = sums.at(i, j, 0), sxy = sums.at(i, j, 1), syy = sums.at(i, j, 2);
                    const double sxr = sums.at(i, j, 3), syr = sums.at(i, j, 4);
                    const double reg = 1e-4 + 1e-2 * (sxx + syy);
                    const double det = (sxx + reg) * (syy + reg) - sxy * sxy;
                    double du = ((syy + reg) * sxr - sxy * syr) / det;
                    double dv = ((sxx + reg) * syr - sxy * sxr) / det;
                    du = std::clamp(du, -1.0, 1.0);
                    dv = std::clamp(dv, -1.0, 1.0);
                    flow.u(i, j) = std::clamp(flow.u(i, j) + du, -cfg.search_radius, cfg.search_radius);
                    flow.v(i, j) = std::clamp(flow.v(i, j) + dv, -cfg.search_radius, cfg.search_radius);
                }
            if (cfg.smoothness > 0.0) {
                const Tensor3 blurred = detail::box_blur(flow.uv, 2);
                const double s = cfg.smoothness / (1.0 + cfg.smoothness);
                for (std::size_t k = 0; k < flow.uv.data.size(); ++k)
                    flow.uv.data[k] = (1.0 - s) * flow.uv.data[k] + s * blurred.data[k];
            }
        }
    }
    return flow;
}

// Averages patch-resolution flow onto the feature grid and converts the
// displacement units from patch pixels to feature cells.
inline FlowField flow_to_feature_grid(const FlowField& flow, int stride) {
    if (stride < 1 || flow.uv.h % stride != 0 || flow.uv.w % stride != 0)
        throw invalid_input("flow_to_feature_grid: stride must divide flow dims");
    const int h = flow.uv.h / stride, w = flow.uv.w / stride;
    FlowField out(h, w);
    const double inv = 1.0 / (static_cast<double>(stride) * stride * stride);
    for (int l = 0; l < 2; ++l)
        for (int i = 0; i < h; ++i)
            for (int j = 0; j < w; ++j) {
                double acc = 0.0;
                for (int di = 0; di < stride; ++di)
                    for (int dj = 0; dj < stride; ++dj)
                        acc += flow.uv.at(i * stride + di, j * stride + dj, l);
                out.uv.at(i, j, l) = acc * inv; // mean over the cell, divided by stride
            }
    return out;
}

// --- .flo file I/O -----------------------------------------------------
//
// Middlebury layout: f32 magic 202021.25, i32 width, i32 height, then
// height*width interleaved (f32 u, f32 v) records in row-major order.
// Values are stored at f32 precision; a field whose entries are f32-exact
// round-trips bit-identically.

inline constexpr float kFloMagic = 202021.25f;

inline void write_flo(const FlowField& field, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw format_error("write_flo: cannot open " + path, 0);
    auto put = [&](const void* p, std::size_t n) { os.write(static_cast<const char*>(p), n); };
    const float magic = kFloMagic;
    const std::int32_t w = static_cast<std::int32_t>(field.uv.w);
    const std::int32_t h = static_cast<std::int32_t>(field.uv.h);
    put(&magic, 4);
    put(&w, 4);
    put(&h, 4);
    for (int i = 0; i < field.uv.h; ++i)
        for (int j = 0; j < field.uv.w; ++j) {
            const float u = static_cast<float>(field.u(i, j));
            const float v = static_cast<float>(field.v(i, j));
            put(&u, 4);
            put(&v, 4);
        }
    if (!os) throw format_error("write_flo: write failed for " + path, 0);
}

inline FlowField read_flo(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw format_error("read_flo: cannot open " + path, 0);
    auto get = [&](void* p, std::size_t n, std::size_t at) {
        if (!is.read(static_cast<char*>(p), static_cast<std::streamsize>(n)))
            throw format_error("read_flo: truncated file " + path, at);
    };
    float magic = 0.0f;
    get(&magic, 4, 0);
    if (magic != kFloMagic) throw format_error("read_flo: bad magic in " + path, 0);
    std::int32_t w = 0, h = 0;
    get(&w, 4, 4);
    get(&h, 4, 8);
    if (w < 1 || h < 1 || static_cast<std::int64_t>(w) * h > (1 << 26))
        throw format_error("read_flo: implausible dimensions in " + path, 4);
    FlowField field(h, w);
    std::size_t at = 12;
    for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j) {
            float u = 0.0f, v = 0.0f;
            get(&u, 4, at);
            at += 4;
            get(&v, 4, at);
            at += 4;
            field.u(i, j) = u;
            field.v(i, j) = v;
        }
    return field;
}

} // namespace flowcf
