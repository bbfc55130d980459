#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "flowcf/errors.hpp"

namespace flowcf {

// Dense h x w x c tensor of doubles, stored as c planes of row-major
// h x w data. Element (i, j, l) lives at data[(l*h + i)*w + j].
struct Tensor3 {
    std::vector<double> data;
    int h = 0;
    int w = 0;
    int c = 0;

    Tensor3() = default;
    Tensor3(int h_, int w_, int c_, double fill = 0.0)
        : data(static_cast<std::size_t>(h_) * w_ * c_, fill), h(h_), w(w_), c(c_) {
        if (h_ < 1 || w_ < 1 || c_ < 1)
            throw invalid_input("Tensor3: dimensions must be positive");
    }

    double& at(int i, int j, int l) { return data[(static_cast<std::size_t>(l) * h + i) * w + j]; }
    double at(int i, int j, int l) const { return data[(static_cast<std::size_t>(l) * h + i) * w + j]; }

    // Clamped access, used by samplers with border replication.
    double at_clamped(int i, int j, int l) const {
        i = i < 0 ? 0 : (i >= h ? h - 1 : i);
        j = j < 0 ? 0 : (j >= w ? w - 1 : j);
        return at(i, j, l);
    }

    std::size_t size() const { return data.size(); }
    std::size_t plane() const { return static_cast<std::size_t>(h) * w; }

    bool same_shape(const Tensor3& o) const { return h == o.h && w == o.w && c == o.c; }
};

inline bool all_finite(const Tensor3& t) {
    for (double v : t.data)
        if (!std::isfinite(v)) return false;
    return true;
}

inline double max_abs(const Tensor3& t) {
    double m = 0.0;
    for (double v : t.data) m = std::max(m, std::abs(v));
    return m;
}

inline double max_abs_diff(const Tensor3& a, const Tensor3& b) {
    if (!a.same_shape(b)) throw invalid_input("max_abs_diff: shape mismatch");
    double m = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i) m = std::max(m, std::abs(a.data[i] - b.data[i]));
    return m;
}

inline Tensor3 operator+(const Tensor3& a, const Tensor3& b) {
    if (!a.same_shape(b)) throw invalid_input("Tensor3 +: shape mismatch");
    Tensor3 r = a;
    for (std::size_t i = 0; i < r.data.size(); ++i) r.data[i] += b.data[i];
    return r;
}

inline Tensor3 operator-(const Tensor3& a, const Tensor3& b) {
    if (!a.same_shape(b)) throw invalid_input("Tensor3 -: shape mismatch");
    Tensor3 r = a;
    for (std::size_t i = 0; i < r.data.size(); ++i) r.data[i] -= b.data[i];
    return r;
}

inline Tensor3 operator*(double s, const Tensor3& a) {
    Tensor3 r = a;
    for (double& v : r.data) v *= s;
    return r;
}

// Per-channel complex spectrum matching a Tensor3 layout: re/im are c
// planes of row-major h x w values.
struct Spectrum3 {
    std::vector<double> re;
    std::vector<double> im;
    int h = 0;
    int w = 0;
    int c = 0;

    Spectrum3() = default;
    Spectrum3(int h_, int w_, int c_)
        : re(static_cast<std::size_t>(h_) * w_ * c_, 0.0),
          im(static_cast<std::size_t>(h_) * w_ * c_, 0.0),
          h(h_), w(w_), c(c_) {
        if (h_ < 1 || w_ < 1 || c_ < 1)
            throw invalid_input("Spectrum3: dimensions must be positive");
    }

    std::size_t idx(int i, int j, int l) const { return (static_cast<std::size_t>(l) * h + i) * w + j; }
    std::size_t size() const { return re.size(); }
    std::size_t plane() const { return static_cast<std::size_t>(h) * w; }

    bool same_shape(const Spectrum3& o) const { return h == o.h && w == o.w && c == o.c; }
};

inline double max_abs(const Spectrum3& s) {
    double m = 0.0;
    for (double v : s.re) m = std::max(m, std::abs(v));
    for (double v : s.im) m = std::max(m, std::abs(v));
    return m;
}

} // namespace flowcf
