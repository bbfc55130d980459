#pragma once

#include <cmath>

#include "flowcf/convnet.hpp"
#include "flowcf/fft.hpp"
#include "flowcf/tensor.hpp"

// Patch extraction around a bounding box and the two feature backends:
// a fixed hand-crafted extractor and a small trainable convnet.

namespace flowcf {

struct BoundingBox {
    double x = 0.0; // top-left, 0-indexed pixels
    double y = 0.0;
    double w = 0.0;
    double h = 0.0;

    double cx() const { return x + (w - 1.0) / 2.0; }
    double cy() const { return y + (h - 1.0) / 2.0; }
    bool valid() const { return w > 0.0 && h > 0.0; }
};

struct Patch {
    Tensor3 pixels;            // side x side, c = 1 or 3, values in [0, 1]
    int side = 0;
    double scale_applied = 1.0; // image pixels per patch pixel
};

struct FeaturePatch {
    Tensor3 map;
    int stride = 1;        // feature-cell size in patch pixels
    bool windowed = false;
};

// Rec.601 luma; stated here so tests can be bit-exact.
inline Tensor3 to_gray(const Tensor3& img) {
    if (img.c == 1) return img;
    if (img.c != 3) throw invalid_input("to_gray: expected 1 or 3 channels");
    Tensor3 g(img.h, img.w, 1);
    for (int i = 0; i < img.h; ++i)
        for (int j = 0; j < img.w; ++j)
            g.at(i, j, 0) = 0.299 * img.at(i, j, 0) + 0.587 * img.at(i, j, 1) + 0.114 * img.at(i, j, 2);
    return g;
}

// Side of the padded square crop for a target of size (w, h):
// sqrt((w + padding*w) * (h + padding*h)), rounded to the nearest even
// pixel count and never below 2.
inline int crop_side_for(double w, double h, double padding) {
    const double side = std::sqrt((w + padding * w) * (h + padding * h));
    int even = 2 * static_cast<int>(std::lround(side / 2.0));
    return even < 2 ? 2 : even;
}

namespace detail {

inline double bilinear_clamped(const Tensor3& img, double r, double c, int l) {
    const int r0 = static_cast<int>(std::floor(r));
    const int c0 = static_cast<int>(std::floor(c));
    const double fr = r - r0, fc = c - c0;
    const double v00 = img.at_clamped(r0, c0, l);
    const double v01 = img.at_clamped(r0, c0 + 1, l);
    const double v10 = img.at_clamped(r0 + 1, c0, l);
    const double v11 = img.at_clamped(r0 + 1, c0 + 1, l);
    return (1.0 - fr) * ((1.0 - fc) * v00 + fc * v01) + fr * ((1.0 - fc) * v10 + fc * v11);
}

} // namespace detail

// Crops the padded square region centered on the box center and resamples
// it to side x side. Sample positions are symmetric about the center with
// spacing crop/side, so a crop that equals the image at side == image size
// reproduces it exactly. Out-of-image samples replicate the border.
inline Patch extract_patch(const Tensor3& image, const BoundingBox& box, double padding, int side) {
    if (!box.valid()) throw invalid_input("extract_patch: degenerate box");
    if (padding < 1.0) throw invalid_input("extract_patch: padding must be >= 1");
    if (side < 1) throw invalid_input("extract_patch: side must be >= 1");
    const double cx = box.cx(), cy = box.cy();
    if (cx < 0.0 || cx > image.w - 1.0 || cy < 0.0 || cy > image.h - 1.0)
        throw invalid_input("extract_patch: box center outside image");

    const int crop = crop_side_for(box.w, box.h, padding);
    const double step = static_cast<double>(crop) / side;
    const double half = (side - 1.0) / 2.0;

    Patch p;
    p.side = side;
    p.scale_applied = step;
    p.pixels = Tensor3(side, side, image.c);
    for (int l = 0; l < image.c; ++l)
        for (int i = 0; i < side; ++i) {
            const double sr = cy + (i - half) * step;
            for (int j = 0; j < side; ++j) {
                const double sc = cx + (j - half) * step;
                p.pixels.at(i, j, l) = detail::bilinear_clamped(image, sr, sc, l);
            }
        }
    return p;
}

// Hand-crafted 9-channel features: mean-subtracted cell-averaged grayscale
// plus gradient magnitude pooled into 8 orientation bins per cell.
// Gradients are central differences with border replication; orientation
// bin b covers [-pi + b*pi/4, -pi + (b+1)*pi/4).
inline FeaturePatch fixed_features(const Patch& p, int cell) {
    if (cell < 1 || p.side % cell != 0)
        throw invalid_input("fixed_features: cell must divide patch side");
    const Tensor3 gray = to_gray(p.pixels);
    const int n = p.side / cell;
    FeaturePatch fp;
    fp.stride = cell;
    fp.map = Tensor3(n, n, 9);

    double gray_mean = 0.0;
    for (int ci = 0; ci < n; ++ci)
        for (int cj = 0; cj < n; ++cj) {
            double acc = 0.0;
            for (int i = ci * cell; i < (ci + 1) * cell; ++i)
                for (int j = cj * cell; j < (cj + 1) * cell; ++j) acc += gray.at(i, j, 0);
            const double mean = acc / (static_cast<double>(cell) * cell);
            fp.map.at(ci, cj, 0) = mean;
            gray_mean += mean;
        }
    gray_mean /= static_cast<double>(n) * n;
    for (int ci = 0; ci < n; ++ci)
        for (int cj = 0; cj < n; ++cj) fp.map.at(ci, cj, 0) -= gray_mean;

    for (int i = 0; i < p.side; ++i)
        for (int j = 0; j < p.side; ++j) {
            const double gx = 0.5 * (gray.at_clamped(i, j + 1, 0) - gray.at_clamped(i, j - 1, 0));
            const double gy = 0.5 * (gray.at_clamped(i + 1, j, 0) - gray.at_clamped(i - 1, j, 0));
            const double mag = std::sqrt(gx * gx + gy * gy);
            if (mag == 0.0) continue;
            const double theta = std::atan2(gy, gx);
            int bin = static_cast<int>(std::floor((theta + detail::kPi) * 4.0 / detail::kPi));
            bin = ((bin % 8) + 8) % 8;
            fp.map.at(i / cell, j / cell, 1 + bin) += mag / (static_cast<double>(cell) * cell);
        }
    return fp;
}

// Multiplies every channel by a Hann window over the cell grid.
inline FeaturePatch apply_window(const FeaturePatch& fp) {
    FeaturePatch out = fp;
    const Tensor3 win = hann2(fp.map.h, fp.map.w);
    for (int l = 0; l < out.map.c; ++l)
        for (int i = 0; i < out.map.h; ++i)
            for (int j = 0; j < out.map.w; ++j) out.map.at(i, j, l) *= win.at(i, j, 0);
    out.windowed = true;
    return out;
}

// --- trainable backend ------------------------------------------------

struct ConvNetCache {
    ConvStackCache stack;
    Tensor3 pre_pool;  // stack output before pooling
    int pool = 1;
};

// Desk-scale default: two conv layers then average pooling to the given
// stride. The larger configuration from the parameter file is equally
// supported; this is just the seconds-scale test default.
inline ConvNetParams default_feature_net(int in_channels, std::uint64_t seed) {
    std::vector<ConvLayer> spec;
    spec.emplace_back(3, in_channels, 16, true);
    spec.emplace_back(3, 16, 8, false);
    return random_convnet(spec, seed);
}

namespace detail {

inline Tensor3 avg_pool(const Tensor3& in, int pool) {
    if (pool == 1) return in;
    if (in.h % pool != 0 || in.w % pool != 0)
        throw invalid_input("avg_pool: pool must divide spatial dims");
    Tensor3 out(in.h / pool, in.w / pool, in.c);
    const double inv = 1.0 / (static_cast<double>(pool) * pool);
    for (int l = 0; l < in.c; ++l)
        for (int i = 0; i < out.h; ++i)
            for (int j = 0; j < out.w; ++j) {
                double acc = 0.0;
                for (int di = 0; di < pool; ++di)
                    for (int dj = 0; dj < pool; ++dj) acc += in.at(i * pool + di, j * pool + dj, l);
                out.at(i, j, l) = acc * inv;
            }
    return out;
}

inline Tensor3 avg_pool_backward(const Tensor3& grad_out, int pool, int h, int w) {
    if (pool == 1) return grad_out;
    Tensor3 g(h, w, grad_out.c);
    const double inv = 1.0 / (static_cast<double>(pool) * pool);
    for (int l = 0; l < grad_out.c; ++l)
        for (int i = 0; i < grad_out.h; ++i)
            for (int j = 0; j < grad_out.w; ++j) {
                const double v = grad_out.at(i, j, l) * inv;
                for (int di = 0; di < pool; ++di)
                    for (int dj = 0; dj < pool; ++dj) g.at(i * pool + di, j * pool + dj, l) += v;
            }
    return g;
}

} // namespace detail

inline FeaturePatch convnet_forward(const Patch& p, const ConvNetParams& params, int stride,
                                    ConvNetCache* cache = nullptr) {
    if (params.layers.empty()) throw invalid_input("convnet_forward: empty layer spec");
    if (params.layers.front().c_in != p.pixels.c)
        throw invalid_input("convnet_forward: patch channels do not match network input");
    if (stride < 1 || p.side % stride != 0)
        throw invalid_input("convnet_forward: stride must divide patch side");
    ConvStackCache local;
    ConvStackCache* sc = cache ? &cache->stack : &local;
    Tensor3 pre_pool = conv_stack_forward(p.pixels, params, sc);
    FeaturePatch fp;
    fp.stride = stride;
    fp.map = detail::avg_pool(pre_pool, stride);
    if (cache) {
        cache->pre_pool = std::move(pre_pool);
        cache->pool = stride;
    }
    return fp;
}

inline Tensor3 convnet_backward(const Tensor3& grad_out, const ConvNetCache& cache,
                                ConvNetParams& grad_params) {
    if (grad_out.h * cache.pool != cache.pre_pool.h || grad_out.c != cache.pre_pool.c)
        throw invalid_input("convnet_backward: gradient shape does not match cache");
    const Tensor3 g = detail::avg_pool_backward(grad_out, cache.pool, cache.pre_pool.h, cache.pre_pool.w);
    return conv_stack_backward(g, cache.stack, grad_params);
}

} // namespace flowcf
