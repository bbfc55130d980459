#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <vector>

#include "flowcf/rng.hpp"
#include "flowcf/tensor.hpp"

// Small stride-1, zero-padded convolution stacks with exact backward
// passes. Shared by the feature network and the attention embedding.

namespace flowcf {

struct ConvLayer {
    int k = 0;     // square kernel side, odd
    int c_in = 0;
    int c_out = 0;
    // Kernel weights in k x k x c_in x c_out row-major order:
    // weight[((di*k + dj)*c_in + ci)*c_out + co].
    std::vector<double> weight;
    std::vector<double> bias;
    bool relu_after = true;

    ConvLayer() = default;
    ConvLayer(int k_, int c_in_, int c_out_, bool relu = true)
        : k(k_), c_in(c_in_), c_out(c_out_),
          weight(static_cast<std::size_t>(k_) * k_ * c_in_ * c_out_, 0.0),
          bias(c_out_, 0.0), relu_after(relu) {}

    double& w(int di, int dj, int ci, int co) {
        return weight[((static_cast<std::size_t>(di) * k + dj) * c_in + ci) * c_out + co];
    }
    double w(int di, int dj, int ci, int co) const {
        return weight[((static_cast<std::size_t>(di) * k + dj) * c_in + ci) * c_out + co];
    }
};

struct ConvNetParams {
    std::vector<ConvLayer> layers;

    bool shape_matches(const ConvNetParams& o) const {
        if (layers.size() != o.layers.size()) return false;
        for (std::size_t i = 0; i < layers.size(); ++i)
            if (layers[i].k != o.layers[i].k || layers[i].c_in != o.layers[i].c_in ||
                layers[i].c_out != o.layers[i].c_out)
                return false;
        return true;
    }
};

inline ConvNetParams zeros_like(const ConvNetParams& p) {
    ConvNetParams z = p;
    for (auto& l : z.layers) {
        std::fill(l.weight.begin(), l.weight.end(), 0.0);
        std::fill(l.bias.begin(), l.bias.end(), 0.0);
    }
    return z;
}

// He-style init, deterministic per seed.
inline ConvNetParams random_convnet(const std::vector<ConvLayer>& spec, std::uint64_t seed) {
    ConvNetParams p;
    p.layers = spec;
    Rng rng(seed);
    for (auto& l : p.layers) {
        const double scale = std::sqrt(2.0 / (static_cast<double>(l.k) * l.k * l.c_in));
        for (double& v : l.weight) v = scale * rng.normal();
        std::fill(l.bias.begin(), l.bias.end(), 0.0);
    }
    return p;
}

// Pointers to every trainable scalar, in a fixed order. Used by the SGD
// step and by finite-difference probes; the view must not outlive `p`.
inline std::vector<double*> param_view(ConvNetParams& p) {
    std::vector<double*> v;
    for (auto& l : p.layers) {
        for (double& x : l.weight) v.push_back(&x);
        for (double& x : l.bias) v.push_back(&x);
    }
    return v;
}

inline double squared_norm(const ConvNetParams& p) {
    double s = 0.0;
    for (const auto& l : p.layers) {
        for (double x : l.weight) s += x * x;
        for (double x : l.bias) s += x * x;
    }
    return s;
}

struct ConvStackCache {
    std::vector<Tensor3> inputs;   // input to each layer
    std::vector<Tensor3> preacts;  // pre-activation output of each layer
    const ConvNetParams* params = nullptr;
};

namespace detail {

inline Tensor3 conv_same(const Tensor3& in, const ConvLayer& l) {
    if (in.c != l.c_in) throw invalid_input("conv: input channels do not match layer c_in");
    if (l.k % 2 == 0) throw invalid_input("conv: kernel side must be odd");
    const int r = l.k / 2;
    Tensor3 out(in.h, in.w, l.c_out);
    for (int co = 0; co < l.c_out; ++co)
        for (int i = 0; i < in.h; ++i)
            for (int j = 0; j < in.w; ++j) {
                double acc = l.bias[co];
                for (int di = -r; di <= r; ++di) {
                    const int ii = i + di;
                    if (ii < 0 || ii >= in.h) continue; // zero padding
                    for (int dj = -r; dj <= r; ++dj) {
                        const int jj = j + dj;
                        if (jj < 0 || jj >= in.w) continue;
                        for (int ci = 0; ci < in.c; ++ci)
                            acc += l.w(di + r, dj + r, ci, co) * in.at(ii, jj, ci);
                    }
                }
                out.at(i, j, co) = acc;
            }
    return out;
}

// Backward of conv_same: returns grad wrt input, accumulates grads wrt
// the layer's weights and bias into `gl`.
inline Tensor3 conv_same_backward(const Tensor3& grad_out, const Tensor3& in, const ConvLayer& l,
                                  ConvLayer& gl) {
    const int r = l.k / 2;
    Tensor3 grad_in(in.h, in.w, in.c);
    for (int co = 0; co < l.c_out; ++co)
        for (int i = 0; i < in.h; ++i)
            for (int j = 0; j < in.w; ++j) {
                const double g = grad_out.at(i, j, co);
                if (g == 0.0) continue;
                gl.bias[co] += g;
                for (int di = -r; di <= r; ++di) {
                    const int ii = i + di;
                    if (ii < 0 || ii >= in.h) continue;
                    for (int dj = -r; dj <= r; ++dj) {
                        const int jj = j + dj;
                        if (jj < 0 || jj >= in.w) continue;
                        for (int ci = 0; ci < in.c; ++ci) {
                            gl.w(di + r, dj + r, ci, co) += g * in.at(ii, jj, ci);
                            grad_in.at(ii, jj, ci) += g * l.w(di + r, dj + r, ci, co);
                        }
                    }
                }
            }
    return grad_in;
}

} // namespace detail

// Runs the full stack; ReLU is applied after each layer that asks for it.
inline Tensor3 conv_stack_forward(const Tensor3& in, const ConvNetParams& params,
                                  ConvStackCache* cache = nullptr) {
    Tensor3 cur = in;
    if (cache) {
        cache->inputs.clear();
        cache->preacts.clear();
        cache->params = &params;
    }
    for (const auto& l : params.layers) {
        if (cache) cache->inputs.push_back(cur);
        Tensor3 pre = detail::conv_same(cur, l);
        if (cache) cache->preacts.push_back(pre);
        if (l.relu_after)
            for (double& v : pre.data) v = v > 0.0 ? v : 0.0;
        cur = std::move(pre);
    }
    return cur;
}

// Exact gradients of the stack. grad_out must match the forward output.
inline Tensor3 conv_stack_backward(const Tensor3& grad_out, const ConvStackCache& cache,
                                   ConvNetParams& grad_params) {
    if (!cache.params) throw invalid_input("conv_stack_backward: cache not populated");
    const ConvNetParams& params = *cache.params;
    if (grad_params.layers.empty()) grad_params = zeros_like(params);
    Tensor3 g = grad_out;
    for (int li = static_cast<int>(params.layers.size()) - 1; li >= 0; --li) {
        const auto& l = params.layers[li];
        const Tensor3& pre = cache.preacts[li];
        if (!g.same_shape(pre)) throw invalid_input("conv_stack_backward: gradient shape mismatch");
        if (l.relu_after)
            for (std::size_t i = 0; i < g.data.size(); ++i)
                if (pre.data[i] <= 0.0) g.data[i] = 0.0;
        g = detail::conv_same_backward(g, cache.inputs[li], l, grad_params.layers[li]);
    }
    return g;
}

// --- binary parameter file ------------------------------------------------
//
// Layout: magic "FCF1", then per layer four little-endian u32 (k, k, c_in,
// c_out) followed by k*k*c_in*c_out f32 kernel values (row-major as stored
// in ConvLayer::weight) and c_out f32 biases. Layers run to end of file.

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                          static_cast<unsigned char>((v >> 8) & 0xff),
                          static_cast<unsigned char>((v >> 16) & 0xff),
                          static_cast<unsigned char>((v >> 24) & 0xff)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

inline void put_f32(std::ostream& os, float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put_u32(os, bits);
}

inline bool get_u32(std::istream& is, std::uint32_t& v) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4)) return false;
    v = static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
        (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
    return true;
}

inline bool get_f32(std::istream& is, float& v) {
    std::uint32_t bits;
    if (!get_u32(is, bits)) return false;
    std::memcpy(&v, &bits, 4);
    return true;
}

} // namespace detail

inline void write_convnet_params(const ConvNetParams& p, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw format_error("write_convnet_params: cannot open " + path, 0);
    os.write("FCF1", 4);
    for (const auto& l : p.layers) {
        detail::put_u32(os, static_cast<std::uint32_t>(l.k));
        detail::put_u32(os, static_cast<std::uint32_t>(l.k));
        detail::put_u32(os, static_cast<std::uint32_t>(l.c_in));
        detail::put_u32(os, static_cast<std::uint32_t>(l.c_out));
        for (double v : l.weight) detail::put_f32(os, static_cast<float>(v));
        for (double v : l.bias) detail::put_f32(os, static_cast<float>(v));
    }
    if (!os) throw format_error("write_convnet_params: write failed for " + path, 0);
}

inline ConvNetParams read_convnet_params(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw format_error("read_convnet_params: cannot open " + path, 0);
    char magic[4];
    if (!is.read(magic, 4) || std::string(magic, 4) != "FCF1")
        throw format_error("read_convnet_params: bad magic in " + path, 0);
    ConvNetParams p;
    for (;;) {
        std::uint32_t k1 = 0, k2 = 0, ci = 0, co = 0;
        const std::size_t header_at = static_cast<std::size_t>(is.tellg());
        if (!detail::get_u32(is, k1)) break; // clean end of file
        if (!detail::get_u32(is, k2) || !detail::get_u32(is, ci) || !detail::get_u32(is, co))
            throw format_error("read_convnet_params: truncated layer header", header_at);
        if (k1 != k2 || k1 == 0 || k1 % 2 == 0 || ci == 0 || co == 0 || k1 > 31)
            throw format_error("read_convnet_params: invalid layer header", header_at);
        ConvLayer l(static_cast<int>(k1), static_cast<int>(ci), static_cast<int>(co));
        for (double& v : l.weight) {
            float f;
            if (!detail::get_f32(is, f))
                throw format_error("read_convnet_params: truncated kernel data", header_at);
            v = f;
        }
        for (double& v : l.bias) {
            float f;
            if (!detail::get_f32(is, f))
                throw format_error("read_convnet_params: truncated bias data", header_at);
            v = f;
        }
        p.layers.push_back(std::move(l));
    }
    if (p.layers.empty()) throw format_error("read_convnet_params: no layers in " + path, 4);
    // relu flags are not stored; the convention is ReLU between layers,
    // none after the last.
    for (auto& l : p.layers) l.relu_after = true;
    p.layers.back().relu_after = false;
    return p;
}

} // namespace flowcf
