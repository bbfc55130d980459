#include <catch2/catch_amalgamated.hpp>

#include "flowcf/attention.hpp"
#include "flowcf/gradcheck.hpp"
#include "flowcf/rng.hpp"

using namespace flowcf;

namespace {

FeaturePatch random_features(int h, int w, int c, std::uint64_t seed) {
    Rng rng(seed);
    FeaturePatch fp;
    fp.stride = 1;
    fp.map = Tensor3(h, w, c);
    for (double& v : fp.map.data) v = rng.uniform(-1, 1);
    return fp;
}

std::vector<FeaturePatch> random_stack(int T, int h, int w, int c, std::uint64_t seed) {
    std::vector<FeaturePatch> v;
    for (int t = 0; t < T; ++t) v.push_back(random_features(h, w, c, seed + t));
    return v;
}

} // namespace

TEST_CASE("identity-configured 1x1 embedding reproduces the input") {
    EmbeddingParams p;
    p.net.layers.emplace_back(1, 3, 3, false);
    for (int i = 0; i < 3; ++i) p.net.layers[0].w(0, 0, i, i) = 1.0;
    const FeaturePatch phi = random_features(6, 6, 3, 1);
    const FeaturePatch e = embed(phi, p);
    CHECK(max_abs_diff(e.map, phi.map) == 0.0);
}

TEST_CASE("zero-weight embedding with bias gives a constant map") {
    EmbeddingParams p;
    p.net.layers.emplace_back(1, 2, 2, false);
    p.net.layers[0].bias = {0.4, -0.3};
    const FeaturePatch e = embed(random_features(5, 5, 2, 2), p);
    for (int i = 0; i < 5; ++i)
        for (int j = 0; j < 5; ++j) {
            REQUIRE(e.map.at(i, j, 0) == 0.4);
            REQUIRE(e.map.at(i, j, 1) == -0.3);
        }
}

TEST_CASE("embed rejects channel mismatch and checks gradients") {
    EmbeddingParams p = default_embedding(4, 3, 4, 4, 6);
    CHECK_THROWS_AS(embed(random_features(6, 6, 3, 4), p), invalid_input);

    FeaturePatch phi = random_features(6, 6, 4, 5);
    Rng rng(6);
    EmbedCache cache;
    const FeaturePatch out = embed(phi, p, &cache);
    Tensor3 probe(out.map.h, out.map.w, out.map.c);
    for (double& v : probe.data) v = rng.uniform(-1, 1);

    EmbeddingParams gp;
    gp.net = zeros_like(p.net);
    const Tensor3 gphi = embed_backward(probe, cache, gp);

    auto loss = [&]() {
        const FeaturePatch e = embed(phi, p);
        double s = 0.0;
        for (std::size_t i = 0; i < e.map.data.size(); ++i) s += e.map.data[i] * probe.data[i];
        return s;
    };
    CHECK(check_gradient(phi.map, gphi, loss) < 1e-4);

    std::vector<double> flat;
    for (auto& l : gp.net.layers) {
        for (double v : l.weight) flat.push_back(v);
        for (double v : l.bias) flat.push_back(v);
    }
    CHECK(check_gradient_scalars(param_view(p.net), flat, loss) < 1e-4);
}

TEST_CASE("identical frames get uniform spatial weights") {
    const FeaturePatch e = random_features(5, 5, 4, 7);
    const std::vector<FeaturePatch> frames(3, e);
    const WeightStack stack = spatial_weights(frames, e);
    for (int i = 0; i < 5; ++i)
        for (int j = 0; j < 5; ++j)
            for (int t = 0; t < 3; ++t)
                REQUIRE(stack.weights.at(i, j, t) == Catch::Approx(1.0 / 3.0).margin(1e-12));
}

TEST_CASE("softmax of similarities (1, 0) gives the analytic weights") {
    // Two frames: first identical to the reference (cosine 1), second
    // orthogonal to it (cosine 0).
    FeaturePatch ref;
    ref.map = Tensor3(1, 1, 2);
    ref.map.at(0, 0, 0) = 1.0;
    FeaturePatch other;
    other.map = Tensor3(1, 1, 2);
    other.map.at(0, 0, 1) = 1.0;
    const WeightStack stack = spatial_weights({ref, other}, ref);
    const double e = std::exp(1.0);
    CHECK(stack.weights.at(0, 0, 0) == Catch::Approx(e / (e + 1.0)).epsilon(1e-10));
    CHECK(stack.weights.at(0, 0, 1) == Catch::Approx(1.0 / (e + 1.0)).epsilon(1e-10));
}

TEST_CASE("spatial weights match a direct per-location oracle and sum to one") {
    const std::vector<FeaturePatch> frames = random_stack(3, 6, 6, 4, 11);
    const WeightStack stack = spatial_weights(frames, frames.back());
    for (int i = 0; i < 6; ++i)
        for (int j = 0; j < 6; ++j) {
            double s[3], sum = 0.0;
            for (int t = 0; t < 3; ++t) {
                double dot = 0.0, na = 0.0, nb = 0.0;
                for (int l = 0; l < 4; ++l) {
                    dot += frames[t].map.at(i, j, l) * frames[2].map.at(i, j, l);
                    na += frames[t].map.at(i, j, l) * frames[t].map.at(i, j, l);
                    nb += frames[2].map.at(i, j, l) * frames[2].map.at(i, j, l);
                }
                s[t] = (na == 0 || nb == 0) ? 0.0 : dot / std::sqrt(na * nb);
                REQUIRE(s[t] >= -1.0 - 1e-12);
                REQUIRE(s[t] <= 1.0 + 1e-12);
            }
            double denom = 0.0;
            for (double v : s) denom += std::exp(v);
            for (int t = 0; t < 3; ++t) {
                REQUIRE(stack.weights.at(i, j, t) == Catch::Approx(std::exp(s[t]) / denom).margin(1e-10));
                sum += stack.weights.at(i, j, t);
            }
            REQUIRE(sum == Catch::Approx(1.0).margin(1e-6));
        }
}

TEST_CASE("zero-norm embedding vectors are neutral, not an error") {
    FeaturePatch a;
    a.map = Tensor3(2, 2, 3); // all zeros
    FeaturePatch ref = random_features(2, 2, 3, 12);
    const WeightStack stack = spatial_weights({a, ref}, ref);
    // cosine(a, ref) = 0 against cosine(ref, ref) = 1
    const double e = std::exp(1.0);
    for (int i = 0; i < 2; ++i)
        for (int j = 0; j < 2; ++j)
            REQUIRE(stack.weights.at(i, j, 1) == Catch::Approx(e / (e + 1.0)).epsilon(1e-10));
}

TEST_CASE("all-zero gate network outputs 0.5 and gates stay in (0,1)") {
    WeightStack stack;
    stack.weights = Tensor3(4, 4, 3, 1.0 / 3.0);
    GateParams zero;
    zero.fc1 = GateParams::Fc(3, 5);
    zero.fc2 = GateParams::Fc(5, 5);
    zero.fc3 = GateParams::Fc(5, 3);
    for (double g : temporal_gate(stack, zero)) CHECK(g == 0.5);

    const GateParams rnd = random_gate(3, 5, 5, 13);
    Rng rng(14);
    for (double& v : stack.weights.data) v = rng.uniform();
    for (double g : temporal_gate(stack, rnd)) {
        CHECK(g > 0.0);
        CHECK(g < 1.0);
    }
    GateParams wrong = random_gate(4, 5, 5, 15);
    CHECK_THROWS_AS(temporal_gate(stack, wrong), invalid_input);
}

TEST_CASE("temporal gate gradients match finite differences") {
    WeightStack stack;
    stack.weights = Tensor3(4, 4, 3);
    Rng rng(16);
    for (double& v : stack.weights.data) v = rng.uniform(0.05, 1.0);
    GateParams params = random_gate(3, 6, 6, 17);

    std::vector<double> probe(3);
    for (double& v : probe) v = rng.uniform(-1, 1);

    GateCache cache;
    temporal_gate(stack, params, &cache);
    GateParams gp = zeros_like(params);
    const Tensor3 grad_stack = temporal_gate_backward(probe, cache, params, gp);

    auto loss = [&]() {
        const std::vector<double> g = temporal_gate(stack, params);
        double s = 0.0;
        for (int t = 0; t < 3; ++t) s += g[t] * probe[t];
        return s;
    };
    CHECK(check_gradient(stack.weights, grad_stack, loss) < 1e-4);

    std::vector<double> flat;
    for (auto* f : {&gp.fc1, &gp.fc2, &gp.fc3}) {
        for (double v : f->weight) flat.push_back(v);
        for (double v : f->bias) flat.push_back(v);
    }
    CHECK(check_gradient_scalars(param_view(params), flat, loss) < 1e-4);
}

TEST_CASE("apply_gates identities") {
    WeightStack stack;
    stack.weights = Tensor3(3, 3, 2, 0.5);
    SECTION("equal gates leave the stack unchanged") {
        const WeightStack out = apply_gates(stack, {0.7, 0.7});
        CHECK(max_abs_diff(out.weights, stack.weights) < 1e-12);
    }
    SECTION("T=2 with w=(0.5,0.5), g=(0.8,0.2) gives w'=(0.8,0.2)") {
        const WeightStack out = apply_gates(stack, {0.8, 0.2});
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) {
                REQUIRE(out.weights.at(i, j, 0) == Catch::Approx(0.8));
                REQUIRE(out.weights.at(i, j, 1) == Catch::Approx(0.2));
            }
    }
    SECTION("a dominating gate concentrates the stack") {
        const WeightStack out = apply_gates(stack, {100.0, 1e-4});
        CHECK(out.weights.at(0, 0, 0) > 0.999);
    }
    SECTION("convexity preserved after gating") {
        Rng rng(18);
        WeightStack rs;
        rs.weights = Tensor3(4, 4, 3);
        for (int i = 0; i < 4; ++i)
            for (int j = 0; j < 4; ++j) {
                double sum = 0.0;
                for (int t = 0; t < 3; ++t) sum += (rs.weights.at(i, j, t) = rng.uniform(0.01, 1.0));
                for (int t = 0; t < 3; ++t) rs.weights.at(i, j, t) /= sum;
            }
        const WeightStack out = apply_gates(rs, {0.3, 0.9, 0.55});
        for (int i = 0; i < 4; ++i)
            for (int j = 0; j < 4; ++j) {
                double sum = 0.0;
                for (int t = 0; t < 3; ++t) {
                    const double v = out.weights.at(i, j, t);
                    REQUIRE(v >= 0.0);
                    REQUIRE(v <= 1.0);
                    sum += v;
                }
                REQUIRE(sum == Catch::Approx(1.0).margin(1e-6));
            }
    }
}

TEST_CASE("aggregate identities and oracle") {
    SECTION("identical maps aggregate to themselves") {
        const FeaturePatch phi = random_features(5, 5, 3, 19);
        WeightStack stack;
        stack.weights = Tensor3(5, 5, 3);
        Rng rng(20);
        for (int i = 0; i < 5; ++i)
            for (int j = 0; j < 5; ++j) {
                double sum = 0.0;
                for (int t = 0; t < 3; ++t) sum += (stack.weights.at(i, j, t) = rng.uniform(0.01, 1.0));
                for (int t = 0; t < 3; ++t) stack.weights.at(i, j, t) /= sum;
            }
        const FeaturePatch out = aggregate({phi, phi, phi}, stack);
        CHECK(max_abs_diff(out.map, phi.map) < 1e-12);
    }
    SECTION("one-hot stack selects a frame") {
        const std::vector<FeaturePatch> frames = random_stack(3, 4, 4, 2, 21);
        WeightStack stack;
        stack.weights = Tensor3(4, 4, 3);
        for (int i = 0; i < 4; ++i)
            for (int j = 0; j < 4; ++j) stack.weights.at(i, j, 1) = 1.0;
        const FeaturePatch out = aggregate(frames, stack);
        CHECK(max_abs_diff(out.map, frames[1].map) == 0.0);
    }
    SECTION("matches the direct triple-loop oracle") {
        const std::vector<FeaturePatch> frames = random_stack(3, 4, 4, 2, 22);
        WeightStack stack;
        stack.weights = Tensor3(4, 4, 3);
        Rng rng(23);
        for (double& v : stack.weights.data) v = rng.uniform();
        const FeaturePatch out = aggregate(frames, stack);
        for (int i = 0; i < 4; ++i)
            for (int j = 0; j < 4; ++j)
                for (int l = 0; l < 2; ++l) {
                    double expect = 0.0;
                    for (int t = 0; t < 3; ++t)
                        expect += stack.weights.at(i, j, t) * frames[t].map.at(i, j, l);
                    REQUIRE(out.map.at(i, j, l) == Catch::Approx(expect).margin(1e-12));
                }
    }
}

TEST_CASE("attention pipeline gradients: zero seed, one-hot flow, full check") {
    const int T = 3, h = 6, w = 6, c = 4;
    std::vector<FeaturePatch> warped = random_stack(T, h, w, c, 24);
    EmbeddingParams ep = default_embedding(c, 25, 4, 4, 6);
    GateParams gp = random_gate(T, 6, 6, 26);

    AttentionCache cache;
    attention_forward(warped, ep, gp, AttentionMode::full, &cache);

    SECTION("zero gradient in, zero gradients out") {
        const AttentionGrads grads = attention_backward(Tensor3(h, w, c), cache, ep, gp);
        for (const auto& g : grads.warped) CHECK(max_abs(g) == 0.0);
        CHECK(squared_norm(grads.embed_params.net) == 0.0);
        CHECK(squared_norm(grads.gate_params) == 0.0);
    }

    SECTION("one-hot stack routes the feature term to the selected frame") {
        AttentionCache onehot = cache;
        std::fill(onehot.final_stack.weights.data.begin(), onehot.final_stack.weights.data.end(), 0.0);
        for (int i = 0; i < h; ++i)
            for (int j = 0; j < w; ++j) onehot.final_stack.weights.at(i, j, 1) = 1.0;
        // Suppress the similarity path to isolate the feature term.
        onehot.mode = AttentionMode::no_ta;
        std::fill(onehot.spatial.weights.data.begin(), onehot.spatial.weights.data.end(), 0.0);
        Tensor3 g(h, w, c, 1.0);
        // With the softmax jacobian of a one-hot stack, the weight-path
        // gradient vanishes: w (g - dot) with w one-hot makes dot = g_sel.
        for (int i = 0; i < h; ++i)
            for (int j = 0; j < w; ++j) onehot.spatial.weights.at(i, j, 1) = 1.0;
        const AttentionGrads grads = attention_backward(g, onehot, ep, gp);
        CHECK(max_abs(grads.warped[1]) > 0.0);
        // Frames 0 and 2 receive nothing through the feature term; their
        // only contribution could come through embeddings, which the
        // one-hot softmax jacobian kills as well.
        CHECK(max_abs(grads.warped[0]) < 1e-12);
    }
}

TEST_CASE("attention end-to-end finite-difference check") {
    const int T = 3, h = 6, w = 6, c = 4;
    std::vector<FeaturePatch> warped = random_stack(T, h, w, c, 27);
    EmbeddingParams ep = default_embedding(c, 28, 4, 4, 6);
    GateParams gp = random_gate(T, 6, 6, 29);

    Rng rng(30);
    Tensor3 probe(h, w, c);
    for (double& v : probe.data) v = rng.uniform(-1, 1);

    auto loss = [&]() {
        const FeaturePatch out = attention_forward(warped, ep, gp, AttentionMode::full);
        double s = 0.0;
        for (std::size_t i = 0; i < out.map.data.size(); ++i) s += out.map.data[i] * probe.data[i];
        return s;
    };

    AttentionCache cache;
    attention_forward(warped, ep, gp, AttentionMode::full, &cache);
    const AttentionGrads grads = attention_backward(probe, cache, ep, gp);

    for (int t = 0; t < T; ++t)
        CHECK(check_gradient(warped[t].map, grads.warped[t], loss) < 1e-4);

    std::vector<double> flat_e;
    for (auto& l : grads.embed_params.net.layers) {
        for (double v : l.weight) flat_e.push_back(v);
        for (double v : l.bias) flat_e.push_back(v);
    }
    CHECK(check_gradient_scalars(param_view(ep.net), flat_e, loss) < 1e-4);

    std::vector<double> flat_g;
    for (auto* f : {&grads.gate_params.fc1, &grads.gate_params.fc2, &grads.gate_params.fc3}) {
        for (double v : f->weight) flat_g.push_back(v);
        for (double v : f->bias) flat_g.push_back(v);
    }
    CHECK(check_gradient_scalars(param_view(gp), flat_g, loss) < 1e-4);
}

TEST_CASE("consensus gate amplifies agreement and stays neutral on uniform input") {
    const int T = 3;
    const GateParams p = consensus_gate(T, 6, 6);
    WeightStack uniform;
    uniform.weights = Tensor3(4, 4, T, 1.0 / T);
    for (double g : temporal_gate(uniform, p)) CHECK(g == Catch::Approx(0.5).margin(1e-12));

    WeightStack skewed;
    skewed.weights = Tensor3(4, 4, T);
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 4; ++j) {
            skewed.weights.at(i, j, 0) = 0.6;
            skewed.weights.at(i, j, 1) = 0.3;
            skewed.weights.at(i, j, 2) = 0.1;
        }
    const std::vector<double> g = temporal_gate(skewed, p);
    CHECK(g[0] > 0.5);
    CHECK(g[2] < 0.5);
    CHECK(g[0] > g[1]);
    CHECK(g[1] > g[2]);
}
