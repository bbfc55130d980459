#pragma once

#include "flowcf/convnet.hpp"
#include "flowcf/features.hpp"
#include "flowcf/tensor.hpp"

// Spatial-temporal attention over a stack of warped feature maps:
// a bottleneck embedding, per-location cosine similarities softmaxed
// across frames, per-frame sigmoid gates from a pooled descriptor, and
// the weighted aggregation. Everything has an exact backward pass.

namespace flowcf {

// Bottleneck embedding: 1x1 reduce, 3x3, 1x1 expand; ReLU after the
// first two layers.
struct EmbeddingParams {
    ConvNetParams net;
};

inline EmbeddingParams default_embedding(int in_channels, std::uint64_t seed, int reduce = 16,
                                         int mid = 16, int out = 32) {
    EmbeddingParams p;
    p.net = random_convnet({ConvLayer(1, in_channels, reduce, true), ConvLayer(3, reduce, mid, true),
                            ConvLayer(1, mid, out, false)},
                           seed);
    return p;
}

// Three fully connected layers T -> d1 -> d2 -> T; ReLU after the first
// two, sigmoid after the last.
struct GateParams {
    struct Fc {
        int in = 0, out = 0;
        std::vector<double> weight; // out x in, row-major
        std::vector<double> bias;   // out
        Fc() = default;
        Fc(int in_, int out_) : in(in_), out(out_), weight(static_cast<std::size_t>(in_) * out_, 0.0), bias(out_, 0.0) {}
    };
    Fc fc1, fc2, fc3;

    int frames() const { return fc1.in; }
};

inline GateParams zeros_like(const GateParams& p) {
    GateParams z = p;
    auto clear = [](GateParams::Fc& f) {
        std::fill(f.weight.begin(), f.weight.end(), 0.0);
        std::fill(f.bias.begin(), f.bias.end(), 0.0);
    };
    clear(z.fc1);
    clear(z.fc2);
    clear(z.fc3);
    return z;
}

inline GateParams random_gate(int frames, int d1, int d2, std::uint64_t seed) {
    GateParams p;
    p.fc1 = GateParams::Fc(frames, d1);
    p.fc2 = GateParams::Fc(d1, d2);
    p.fc3 = GateParams::Fc(d2, frames);
    Rng rng(seed);
    auto init = [&](GateParams::Fc& f) {
        const double s = std::sqrt(2.0 / f.in);
        for (double& v : f.weight) v = s * rng.normal();
    };
    init(p.fc1);
    init(p.fc2);
    init(p.fc3);
    return p;
}

// Default gate initialization: a diagonal pass-through that amplifies the
// spatial consensus, g_i = sigmoid(gain * (T * d_i - 1)). A frame whose
// spatial weights carry more than the uniform share of mass is gated up,
// a disagreeing frame is gated down; uniform descriptors give 0.5. The
// trainer is free to move away from this.
inline GateParams consensus_gate(int frames, int d1, int d2, double gain = 4.0) {
    if (d1 < frames || d2 < frames)
        throw invalid_input("consensus_gate: hidden widths must be >= frame count");
    GateParams p;
    p.fc1 = GateParams::Fc(frames, d1);
    p.fc2 = GateParams::Fc(d1, d2);
    p.fc3 = GateParams::Fc(d2, frames);
    for (int i = 0; i < frames; ++i) {
        p.fc1.weight[static_cast<std::size_t>(i) * frames + i] = 1.0;
        p.fc2.weight[static_cast<std::size_t>(i) * d1 + i] = 1.0;
        p.fc3.weight[static_cast<std::size_t>(i) * d2 + i] = gain * frames;
        p.fc3.bias[i] = -gain;
    }
    return p;
}

inline std::vector<double*> param_view(GateParams& p) {
    std::vector<double*> v;
    for (auto* f : {&p.fc1, &p.fc2, &p.fc3}) {
        for (double& x : f->weight) v.push_back(&x);
        for (double& x : f->bias) v.push_back(&x);
    }
    return v;
}

inline double squared_norm(const GateParams& p) {
    double s = 0.0;
    for (const auto* f : {&p.fc1, &p.fc2, &p.fc3}) {
        for (double x : f->weight) s += x * x;
        for (double x : f->bias) s += x * x;
    }
    return s;
}

// Per-location convex weights over the T aggregated frames (c = T).
struct WeightStack {
    Tensor3 weights;
    std::vector<int> frame_ids;
};

// --- embedding ---------------------------------------------------------

struct EmbedCache {
    ConvStackCache stack;
};

inline FeaturePatch embed(const FeaturePatch& phi, const EmbeddingParams& params,
                          EmbedCache* cache = nullptr) {
    if (params.net.layers.empty() || params.net.layers.front().c_in != phi.map.c)
        throw invalid_input("embed: channel mismatch");
    FeaturePatch out = phi;
    out.map = conv_stack_forward(phi.map, params.net, cache ? &cache->stack : nullptr);
    return out;
}

inline Tensor3 embed_backward(const Tensor3& grad_out, const EmbedCache& cache,
                              EmbeddingParams& grad_params) {
    return conv_stack_backward(grad_out, cache.stack, grad_params.net);
}

// --- spatial attention ---------------------------------------------------

namespace detail {

// Cosine of the channel vectors at one location; zero-norm vectors are
// neutral (cosine 0), which happens with dead-ReLU embeddings.
inline double cosine_at(const Tensor3& a, const Tensor3& b, int i, int j) {
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (int l = 0; l < a.c; ++l) {
        const double av = a.at(i, j, l), bv = b.at(i, j, l);
        dot += av * bv;
        na += av * av;
        nb += bv * bv;
    }
    if (na == 0.0 || nb == 0.0) return 0.0;
    return dot / std::sqrt(na * nb);
}

} // namespace detail

// Cosine similarity of each warped embedding against the reference
// embedding, softmaxed across frames per location. The reference is the
// embedding of the newest frame (itself present in warped_emb with
// identity flow), so its own similarity is identically 1.
inline WeightStack spatial_weights(const std::vector<FeaturePatch>& warped_emb,
                                   const FeaturePatch& ref_emb) {
    if (warped_emb.empty()) throw invalid_input("spatial_weights: empty frame list");
    const int h = ref_emb.map.h, w = ref_emb.map.w;
    for (const auto& e : warped_emb)
        if (!e.map.same_shape(ref_emb.map))
            throw invalid_input("spatial_weights: embedding shapes differ");

    const int T = static_cast<int>(warped_emb.size());
    WeightStack stack;
    stack.weights = Tensor3(h, w, T);
    std::vector<double> s(T);
    for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j) {
            double smax = -2.0;
            for (int t = 0; t < T; ++t) {
                s[t] = detail::cosine_at(warped_emb[t].map, ref_emb.map, i, j);
                smax = std::max(smax, s[t]);
            }
            double denom = 0.0;
            for (int t = 0; t < T; ++t) denom += std::exp(s[t] - smax);
            for (int t = 0; t < T; ++t) stack.weights.at(i, j, t) = std::exp(s[t] - smax) / denom;
        }
    return stack;
}

// --- temporal attention ---------------------------------------------------

struct GateCache {
    std::vector<double> d;          // pooled descriptor
    std::vector<double> a1, a2;     // post-ReLU activations
    std::vector<double> z1, z2, z3; // pre-activations
    std::vector<double> gates;
    int h = 0, w = 0;
};

namespace detail {

inline std::vector<double> fc_apply(const GateParams::Fc& f, const std::vector<double>& x) {
    std::vector<double> y(f.out, 0.0);
    for (int o = 0; o < f.out; ++o) {
        double acc = f.bias[o];
        for (int i = 0; i < f.in; ++i) acc += f.weight[static_cast<std::size_t>(o) * f.in + i] * x[i];
        y[o] = acc;
    }
    return y;
}

} // namespace detail

// Global average pool per frame channel, then FC -> ReLU -> FC -> ReLU ->
// FC -> sigmoid. Every gate is strictly inside (0, 1).
inline std::vector<double> temporal_gate(const WeightStack& stack, const GateParams& params,
                                         GateCache* cache = nullptr) {
    const int T = stack.weights.c;
    if (params.fc1.in != T || params.fc3.out != T)
        throw invalid_input("temporal_gate: stack width does not match gate network");

    std::vector<double> d(T, 0.0);
    const double inv = 1.0 / (static_cast<double>(stack.weights.h) * stack.weights.w);
    for (int t = 0; t < T; ++t) {
        double acc = 0.0;
        for (int i = 0; i < stack.weights.h; ++i)
            for (int j = 0; j < stack.weights.w; ++j) acc += stack.weights.at(i, j, t);
        d[t] = acc * inv;
    }

    const std::vector<double> z1 = detail::fc_apply(params.fc1, d);
    std::vector<double> a1 = z1;
    for (double& v : a1) v = v > 0.0 ? v : 0.0;
    const std::vector<double> z2 = detail::fc_apply(params.fc2, a1);
    std::vector<double> a2 = z2;
    for (double& v : a2) v = v > 0.0 ? v : 0.0;
    const std::vector<double> z3 = detail::fc_apply(params.fc3, a2);
    std::vector<double> gates(T);
    for (int t = 0; t < T; ++t) gates[t] = 1.0 / (1.0 + std::exp(-z3[t]));

    if (cache) {
        cache->d = d;
        cache->z1 = z1;
        cache->a1 = a1;
        cache->z2 = z2;
        cache->a2 = a2;
        cache->z3 = z3;
        cache->gates = gates;
        cache->h = stack.weights.h;
        cache->w = stack.weights.w;
    }
    return gates;
}

// Backward of temporal_gate given dL/d(gates): returns dL/d(stack) and
// accumulates parameter gradients.
inline Tensor3 temporal_gate_backward(const std::vector<double>& grad_gates, const GateCache& cache,
                                      const GateParams& params, GateParams& grad_params) {
    const int T = static_cast<int>(cache.gates.size());
    if (grad_params.frames() == 0) grad_params = zeros_like(params);

    std::vector<double> gz3(T);
    for (int t = 0; t < T; ++t)
        gz3[t] = grad_gates[t] * cache.gates[t] * (1.0 - cache.gates[t]);

    auto fc_backward = [](const GateParams::Fc& f, const std::vector<double>& x,
                          const std::vector<double>& gy, GateParams::Fc& gf) {
        std::vector<double> gx(f.in, 0.0);
        for (int o = 0; o < f.out; ++o) {
            gf.bias[o] += gy[o];
            for (int i = 0; i < f.in; ++i) {
                gf.weight[static_cast<std::size_t>(o) * f.in + i] += gy[o] * x[i];
                gx[i] += gy[o] * f.weight[static_cast<std::size_t>(o) * f.in + i];
            }
        }
        return gx;
    };

    std::vector<double> ga2 = fc_backward(params.fc3, cache.a2, gz3, grad_params.fc3);
    for (std::size_t i = 0; i < ga2.size(); ++i)
        if (cache.z2[i] <= 0.0) ga2[i] = 0.0;
    std::vector<double> ga1 = fc_backward(params.fc2, cache.a1, ga2, grad_params.fc2);
    for (std::size_t i = 0; i < ga1.size(); ++i)
        if (cache.z1[i] <= 0.0) ga1[i] = 0.0;
    const std::vector<double> gd = fc_backward(params.fc1, cache.d, ga1, grad_params.fc1);

    Tensor3 grad_stack(cache.h, cache.w, T);
    const double inv = 1.0 / (static_cast<double>(cache.h) * cache.w);
    for (int t = 0; t < T; ++t)
        for (int i = 0; i < cache.h; ++i)
            for (int j = 0; j < cache.w; ++j) grad_stack.at(i, j, t) = gd[t] * inv;
    return grad_stack;
}

// --- gating and aggregation ---------------------------------------------

// Gate the weight maps and renormalize so they stay a convex combination.
// `renormalize = false` is the ablation path where gates scale weights raw.
inline WeightStack apply_gates(const WeightStack& stack, const std::vector<double>& gates,
                               bool renormalize = true) {
    const int T = stack.weights.c;
    if (static_cast<int>(gates.size()) != T) throw invalid_input("apply_gates: length mismatch");
    for (double g : gates)
        if (g <= 0.0) throw invalid_input("apply_gates: gates must be positive");

    WeightStack out = stack;
    for (int i = 0; i < stack.weights.h; ++i)
        for (int j = 0; j < stack.weights.w; ++j) {
            double denom = 0.0;
            for (int t = 0; t < T; ++t) denom += gates[t] * stack.weights.at(i, j, t);
            if (renormalize && denom <= 0.0)
                throw internal_error("apply_gates: zero normalization denominator");
            for (int t = 0; t < T; ++t) {
                const double gw = gates[t] * stack.weights.at(i, j, t);
                out.weights.at(i, j, t) = renormalize ? gw / denom : gw;
            }
        }
    return out;
}

// phi_bar(p, l) = sum_t w_t(p) * phi_t(p, l).
inline FeaturePatch aggregate(const std::vector<FeaturePatch>& warped, const WeightStack& stack) {
    if (warped.empty()) throw invalid_input("aggregate: empty frame list");
    const int T = static_cast<int>(warped.size());
    if (stack.weights.c != T) throw invalid_input("aggregate: stack width does not match frames");
    for (const auto& f : warped)
        if (!f.map.same_shape(warped.front().map))
            throw invalid_input("aggregate: feature shapes differ");
    if (stack.weights.h != warped.front().map.h || stack.weights.w != warped.front().map.w)
        throw invalid_input("aggregate: stack grid does not match features");

    FeaturePatch out = warped.front();
    std::fill(out.map.data.begin(), out.map.data.end(), 0.0);
    for (int t = 0; t < T; ++t)
        for (int l = 0; l < out.map.c; ++l)
            for (int i = 0; i < out.map.h; ++i)
                for (int j = 0; j < out.map.w; ++j)
                    out.map.at(i, j, l) += stack.weights.at(i, j, t) * warped[t].map.at(i, j, l);
    return out;
}

// --- full pipeline with backward ------------------------------------------

enum class AttentionMode { full, no_ta, decay, none };

struct AttentionCache {
    std::vector<FeaturePatch> warped;
    std::vector<FeaturePatch> embedded;
    std::vector<EmbedCache> embed_caches;
    WeightStack spatial;      // softmax output, pre-gating
    WeightStack final_stack;  // after gating/renormalization
    std::vector<double> gates;
    GateCache gate_cache;
    AttentionMode mode = AttentionMode::full;
    bool renormalize = true;
};

// Runs embed -> spatial_weights -> temporal_gate -> apply_gates ->
// aggregate. In no_ta mode gating is skipped; callers wanting the decay
// or no-flow variants build their stacks directly.
inline FeaturePatch attention_forward(const std::vector<FeaturePatch>& warped,
                                      const EmbeddingParams& embed_params,
                                      const GateParams& gate_params, AttentionMode mode,
                                      AttentionCache* cache = nullptr, bool renormalize = true) {
    const int T = static_cast<int>(warped.size());
    if (T == 0) throw invalid_input("attention_forward: empty frame list");

    std::vector<FeaturePatch> embedded(T);
    std::vector<EmbedCache> ecaches(cache ? T : 0);
    for (int t = 0; t < T; ++t)
        embedded[t] = embed(warped[t], embed_params, cache ? &ecaches[t] : nullptr);

    WeightStack spatial = spatial_weights(embedded, embedded.back());
    WeightStack final_stack = spatial;
    std::vector<double> gates;
    GateCache gcache;
    if (mode == AttentionMode::full) {
        gates = temporal_gate(spatial, gate_params, cache ? &gcache : nullptr);
        final_stack = apply_gates(spatial, gates, renormalize);
    }

    FeaturePatch out = aggregate(warped, final_stack);
    if (cache) {
        cache->warped = warped;
        cache->embedded = std::move(embedded);
        cache->embed_caches = std::move(ecaches);
        cache->spatial = std::move(spatial);
        cache->final_stack = std::move(final_stack);
        cache->gates = std::move(gates);
        cache->gate_cache = std::move(gcache);
        cache->mode = mode;
        cache->renormalize = renormalize;
    }
    return out;
}

struct AttentionGrads {
    std::vector<Tensor3> warped;    // dL/d(phi_t), feature and similarity paths combined
    std::vector<Tensor3> embedded;  // dL/d(e_t)
    EmbeddingParams embed_params;
    GateParams gate_params;
};

// Exact gradients of the aggregate output with respect to every input of
// the pipeline. The cosine gradient is zero where an embedding vector has
// zero norm (the forward defines the cosine as 0 there).
inline AttentionGrads attention_backward(const Tensor3& grad_phi_bar, const AttentionCache& cache,
                                         const EmbeddingParams& embed_params,
                                         const GateParams& gate_params) {
    const int T = static_cast<int>(cache.warped.size());
    if (T == 0) throw invalid_input("attention_backward: cache not populated");
    if (!grad_phi_bar.same_shape(cache.warped.front().map))
        throw invalid_input("attention_backward: gradient shape mismatch");
    const int h = grad_phi_bar.h, w = grad_phi_bar.w, C = grad_phi_bar.c;

    AttentionGrads grads;
    grads.warped.assign(T, Tensor3(h, w, C));
    grads.embedded.assign(T, Tensor3(h, w, cache.embedded.front().map.c));
    grads.embed_params.net = zeros_like(embed_params.net);
    grads.gate_params = zeros_like(gate_params);

    // Aggregation: feature term and weight term.
    Tensor3 grad_final(h, w, T);
    for (int t = 0; t < T; ++t)
        for (int i = 0; i < h; ++i)
            for (int j = 0; j < w; ++j) {
                double gw = 0.0;
                for (int l = 0; l < C; ++l) {
                    const double g = grad_phi_bar.at(i, j, l);
                    grads.warped[t].at(i, j, l) += cache.final_stack.weights.at(i, j, t) * g;
                    gw += g * cache.warped[t].map.at(i, j, l);
                }
                grad_final.at(i, j, t) = gw;
            }

    // Gating backward: through w'_t = g_t w_t / sum_k g_k w_k (or the raw
    // product when renormalization is off).
    Tensor3 grad_spatial(h, w, T);
    std::vector<double> grad_gates(cache.gates.size(), 0.0);
    if (cache.mode == AttentionMode::full) {
        for (int i = 0; i < h; ++i)
            for (int j = 0; j < w; ++j) {
                double denom = 0.0, dot = 0.0;
                for (int t = 0; t < T; ++t)
                    denom += cache.gates[t] * cache.spatial.weights.at(i, j, t);
                if (!cache.renormalize) denom = 1.0;
                for (int t = 0; t < T; ++t)
                    dot += grad_final.at(i, j, t) * cache.final_stack.weights.at(i, j, t);
                for (int t = 0; t < T; ++t) {
                    const double wt = cache.spatial.weights.at(i, j, t);
                    const double gf = grad_final.at(i, j, t);
                    if (cache.renormalize) {
                        grad_spatial.at(i, j, t) = cache.gates[t] * (gf - dot) / denom;
                        grad_gates[t] += wt * (gf - dot) / denom;
                    } else {
                        grad_spatial.at(i, j, t) = cache.gates[t] * gf;
                        grad_gates[t] += wt * gf;
                    }
                }
            }
        grad_spatial = grad_spatial + temporal_gate_backward(grad_gates, cache.gate_cache,
                                                             gate_params, grads.gate_params);
    } else {
        grad_spatial = grad_final;
    }

    // Softmax backward per location.
    Tensor3 grad_sim(h, w, T);
    for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j) {
            double dot = 0.0;
            for (int t = 0; t < T; ++t)
                dot += grad_spatial.at(i, j, t) * cache.spatial.weights.at(i, j, t);
            for (int t = 0; t < T; ++t)
                grad_sim.at(i, j, t) =
                    cache.spatial.weights.at(i, j, t) * (grad_spatial.at(i, j, t) - dot);
        }

    // Cosine backward: s = <a,b>/(|a||b|) with a = e_t(p), b = e_ref(p).
    const Tensor3& ref = cache.embedded.back().map;
    const int ec = ref.c;
    for (int t = 0; t < T; ++t) {
        const Tensor3& et = cache.embedded[t].map;
        for (int i = 0; i < h; ++i)
            for (int j = 0; j < w; ++j) {
                const double gs = grad_sim.at(i, j, t);
                if (gs == 0.0) continue;
                double dot = 0.0, na = 0.0, nb = 0.0;
                for (int l = 0; l < ec; ++l) {
                    const double av = et.at(i, j, l), bv = ref.at(i, j, l);
                    dot += av * bv;
                    na += av * av;
                    nb += bv * bv;
                }
                if (na == 0.0 || nb == 0.0) continue;
                const double inv = 1.0 / std::sqrt(na * nb);
                const double s = dot * inv;
                for (int l = 0; l < ec; ++l) {
                    const double av = et.at(i, j, l), bv = ref.at(i, j, l);
                    grads.embedded[t].at(i, j, l) += gs * (bv * inv - s * av / na);
                    grads.embedded[T - 1].at(i, j, l) += gs * (av * inv - s * bv / nb);
                }
            }
    }

    // Embedding backward per frame; parameters are shared, so their
    // gradients accumulate across frames.
    for (int t = 0; t < T; ++t) {
        const Tensor3 gphi = embed_backward(grads.embedded[t], cache.embed_caches[t], grads.embed_params);
        grads.warped[t] = grads.warped[t] + gphi;
    }
    return grads;
}

} // namespace flowcf
