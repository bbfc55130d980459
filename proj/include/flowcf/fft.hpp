#pragma once

#include <complex>
#include <vector>

#include "flowcf/tensor.hpp"

// 2D DFT used by the correlation-filter machinery. Convention, fixed once
// and relied on everywhere: forward transform is unnormalized,
//   S[u,v] = sum_{i,j} t[i,j] * exp(-2*pi*I*(u*i/h + v*j/w)),
// and the inverse carries the full 1/(h*w) factor, so idft2(dft2(t)) == t.

namespace flowcf {
namespace detail {

using cplx = std::complex<double>;
inline constexpr double kPi = 3.141592653589793238462643383279502884;

inline bool is_pow2(std::size_t n) { return n && (n & (n - 1)) == 0; }

// Iterative radix-2 Cooley-Tukey, in place, n a power of two.
inline void fft_pow2(std::vector<cplx>& a, bool inverse) {
    const std::size_t n = a.size();
    for (std::size_t i = 1, j = 0; i < n; ++i) {
        std::size_t bit = n >> 1;
        for (; j & bit; bit >>= 1) j ^= bit;
        j ^= bit;
        if (i < j) std::swap(a[i], a[j]);
    }
    for (std::size_t len = 2; len <= n; len <<= 1) {
        const double ang = (inverse ? 2.0 : -2.0) * kPi / static_cast<double>(len);
        const cplx wl(std::cos(ang), std::sin(ang));
        for (std::size_t i = 0; i < n; i += len) {
            cplx w(1.0, 0.0);
            for (std::size_t j = 0; j < len / 2; ++j) {
                const cplx u = a[i + j];
                const cplx v = a[i + j + len / 2] * w;
                a[i + j] = u + v;
                a[i + j + len / 2] = u - v;
                w *= wl;
            }
        }
    }
    if (inverse)
        for (cplx& x : a) x /= static_cast<double>(n);
}

// Bluestein chirp-z transform: arbitrary-length DFT via a power-of-two
// convolution. Exact chirp phases come from k^2 mod 2n in integers.
inline void fft_bluestein(std::vector<cplx>& a, bool inverse) {
    const std::size_t n = a.size();
    std::size_t m = 1;
    while (m < 2 * n - 1) m <<= 1;

    std::vector<cplx> chirp(n);
    for (std::size_t k = 0; k < n; ++k) {
        const auto sq = static_cast<std::uint64_t>(k) * k % (2 * n);
        const double ang = (inverse ? 1.0 : -1.0) * kPi * static_cast<double>(sq) / static_cast<double>(n);
        chirp[k] = cplx(std::cos(ang), std::sin(ang));
    }

    std::vector<cplx> x(m, cplx(0.0, 0.0)), y(m, cplx(0.0, 0.0));
    for (std::size_t k = 0; k < n; ++k) x[k] = a[k] * chirp[k];
    y[0] = std::conj(chirp[0]);
    for (std::size_t k = 1; k < n; ++k) y[k] = y[m - k] = std::conj(chirp[k]);

    fft_pow2(x, false);
    fft_pow2(y, false);
    for (std::size_t k = 0; k < m; ++k) x[k] *= y[k];
    fft_pow2(x, true);

    for (std::size_t k = 0; k < n; ++k) a[k] = x[k] * chirp[k];
    if (inverse)
        for (cplx& v : a) v /= static_cast<double>(n);
}

inline void fft1d(std::vector<cplx>& a, bool inverse) {
    if (a.size() <= 1) return;
    if (is_pow2(a.size()))
        fft_pow2(a, inverse);
    else
        fft_bluestein(a, inverse);
}

// In-place 2D transform of one h x w plane held in `buf`.
inline void fft2d_plane(std::vector<cplx>& buf, int h, int w, bool inverse) {
    std::vector<cplx> line(std::max(h, w));
    for (int i = 0; i < h; ++i) {
        line.assign(buf.begin() + static_cast<std::size_t>(i) * w,
                    buf.begin() + static_cast<std::size_t>(i + 1) * w);
        fft1d(line, inverse);
        std::copy(line.begin(), line.end(), buf.begin() + static_cast<std::size_t>(i) * w);
    }
    for (int j = 0; j < w; ++j) {
        line.resize(h);
        for (int i = 0; i < h; ++i) line[i] = buf[static_cast<std::size_t>(i) * w + j];
        fft1d(line, inverse);
        for (int i = 0; i < h; ++i) buf[static_cast<std::size_t>(i) * w + j] = line[i];
    }
}

} // namespace detail

inline Spectrum3 dft2(const Tensor3& t) {
    if (!all_finite(t)) throw invalid_input("dft2: non-finite input");
    Spectrum3 s(t.h, t.w, t.c);
    std::vector<detail::cplx> buf(t.plane());
    for (int l = 0; l < t.c; ++l) {
        for (std::size_t k = 0; k < t.plane(); ++k)
            buf[k] = detail::cplx(t.data[l * t.plane() + k], 0.0);
        detail::fft2d_plane(buf, t.h, t.w, false);
        for (std::size_t k = 0; k < t.plane(); ++k) {
            s.re[l * s.plane() + k] = buf[k].real();
            s.im[l * s.plane() + k] = buf[k].imag();
        }
    }
    return s;
}

// Inverse of dft2. The result of a Hermitian-symmetric spectrum is real;
// imaginary residue above 1e-6 * max|s| means the input was not a valid
// real-signal spectrum and is reported as an error.
inline Tensor3 idft2(const Spectrum3& s) {
    Tensor3 t(s.h, s.w, s.c);
    const double tol = 1e-6 * (1.0 + max_abs(s));
    std::vector<detail::cplx> buf(s.plane());
    for (int l = 0; l < s.c; ++l) {
        for (std::size_t k = 0; k < s.plane(); ++k)
            buf[k] = detail::cplx(s.re[l * s.plane() + k], s.im[l * s.plane() + k]);
        detail::fft2d_plane(buf, s.h, s.w, true);
        for (std::size_t k = 0; k < s.plane(); ++k) {
            if (std::abs(buf[k].imag()) > tol)
                throw internal_error("idft2: imaginary residue above tolerance (spectrum not Hermitian)");
            t.data[l * t.plane() + k] = buf[k].real();
        }
    }
    return t;
}

// Direct O((hw)^2) DFT, the test oracle for dft2. Capped to small inputs.
inline Spectrum3 naive_dft2(const Tensor3& t) {
    if (static_cast<std::size_t>(t.h) * t.w > 4096)
        throw invalid_input("naive_dft2: input exceeds oracle size cap (h*w <= 4096)");
    if (!all_finite(t)) throw invalid_input("naive_dft2: non-finite input");
    Spectrum3 s(t.h, t.w, t.c);
    for (int l = 0; l < t.c; ++l)
        for (int u = 0; u < t.h; ++u)
            for (int v = 0; v < t.w; ++v) {
                double re = 0.0, im = 0.0;
                for (int i = 0; i < t.h; ++i)
                    for (int j = 0; j < t.w; ++j) {
                        const double ang = -2.0 * detail::kPi *
                                           (static_cast<double>(u) * i / t.h +
                                            static_cast<double>(v) * j / t.w);
                        const double x = t.at(i, j, l);
                        re += x * std::cos(ang);
                        im += x * std::sin(ang);
                    }
                s.re[s.idx(u, v, l)] = re;
                s.im[s.idx(u, v, l)] = im;
            }
    return s;
}

// Separable Hann window, c = 1, values in [0, 1], maximum at the center.
// A 1-point axis degenerates to 1.0.
inline Tensor3 hann2(int h, int w) {
    if (h < 1 || w < 1) throw invalid_input("hann2: dimensions must be >= 1");
    auto hann1 = [](int n) {
        std::vector<double> v(n, 1.0);
        if (n > 1)
            for (int i = 0; i < n; ++i)
                v[i] = 0.5 * (1.0 - std::cos(2.0 * detail::kPi * i / (n - 1)));
        return v;
    };
    const std::vector<double> hr = hann1(h), hc = hann1(w);
    Tensor3 t(h, w, 1);
    for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j) t.at(i, j, 0) = hr[i] * hc[j];
    return t;
}

} // namespace flowcf
