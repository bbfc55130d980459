#include <catch2/catch_amalgamated.hpp>

#include <cstdio>

#include "flowcf/flow.hpp"
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

// Smoothed random texture: enough gradient structure for local
// least-squares to lock on at every pyramid level.
Tensor3 textured(int h, int w, std::uint64_t seed) {
    Rng rng(seed);
    Tensor3 t(h, w, 1);
    for (double& v : t.data) v = rng.uniform();
    return detail::box_blur(t, 2);
}

Tensor3 roll(const Tensor3& img, int dr, int dc) {
    Tensor3 out(img.h, img.w, img.c);
    for (int l = 0; l < img.c; ++l)
        for (int i = 0; i < img.h; ++i)
            for (int j = 0; j < img.w; ++j)
                out.at(i, j, l) = img.at((i + dr) % img.h, (j + dc) % img.w, l);
    return out;
}

} // namespace

TEST_CASE("warp with zero flow is the identity") {
    const FeaturePatch phi = random_features(9, 7, 3, 1);
    const FlowField zero(9, 7);
    CHECK(max_abs_diff(warp(phi, zero).map, phi.map) == 0.0);
}

TEST_CASE("constant integer flow shifts with border clamp") {
    const FeaturePatch phi = random_features(8, 8, 2, 2);
    FlowField flow(8, 8);
    for (int i = 0; i < 8; ++i)
        for (int j = 0; j < 8; ++j) flow.u(i, j) = 1.0;
    const FeaturePatch out = warp(phi, flow);
    for (int l = 0; l < 2; ++l)
        for (int i = 0; i < 8; ++i) {
            for (int j = 0; j < 7; ++j)
                REQUIRE(out.map.at(i, j, l) == phi.map.at(i, j + 1, l));
            REQUIRE(out.map.at(i, 7, l) == phi.map.at(i, 7, l)); // clamped
        }
}

TEST_CASE("half-cell flow on a linear ramp adds exactly half") {
    FeaturePatch ramp;
    ramp.stride = 1;
    ramp.map = Tensor3(8, 8, 1);
    for (int i = 0; i < 8; ++i)
        for (int j = 0; j < 8; ++j) ramp.map.at(i, j, 0) = static_cast<double>(j);
    FlowField flow(8, 8);
    for (int i = 0; i < 8; ++i)
        for (int j = 0; j < 8; ++j) flow.u(i, j) = 0.5;
    const FeaturePatch out = warp(ramp, flow);
    for (int i = 0; i < 8; ++i)
        for (int j = 0; j < 7; ++j)
            REQUIRE(out.map.at(i, j, 0) == Catch::Approx(j + 0.5).margin(1e-12));
}

TEST_CASE("warp is linear in the features and exact on affine maps") {
    const FeaturePatch p1 = random_features(8, 8, 2, 3);
    const FeaturePatch p2 = random_features(8, 8, 2, 4);
    Rng rng(5);
    FlowField flow(8, 8);
    for (double& v : flow.uv.data) v = rng.uniform(-1.4, 1.4);

    SECTION("linearity") {
        FeaturePatch mix = p1;
        mix.map = 2.0 * p1.map + (-0.7) * p2.map;
        const Tensor3 lhs = warp(mix, flow).map;
        const Tensor3 rhs = 2.0 * warp(p1, flow).map + (-0.7) * warp(p2, flow).map;
        CHECK(max_abs_diff(lhs, rhs) < 1e-14); // exact up to summation order

    }
    SECTION("affine exactness on interior points") {
        FeaturePatch aff;
        aff.stride = 1;
        aff.map = Tensor3(8, 8, 1);
        for (int i = 0; i < 8; ++i)
            for (int j = 0; j < 8; ++j) aff.map.at(i, j, 0) = 0.3 * i - 0.2 * j + 0.05;
        const FeaturePatch out = warp(aff, flow);
        for (int i = 2; i < 6; ++i)
            for (int j = 2; j < 6; ++j) {
                const double r = i + flow.v(i, j), c = j + flow.u(i, j);
                REQUIRE(out.map.at(i, j, 0) == Catch::Approx(0.3 * r - 0.2 * c + 0.05).margin(1e-12));
            }
    }
}

TEST_CASE("warp_backward: zero gradient and identity adjoint") {
    const FeaturePatch phi = random_features(8, 8, 2, 6);
    const FlowField zero(8, 8);
    Tensor3 gphi, gflow;
    warp_backward(Tensor3(8, 8, 2), phi, zero, gphi, gflow);
    CHECK(max_abs(gphi) == 0.0);
    CHECK(max_abs(gflow) == 0.0);

    Tensor3 g(8, 8, 2);
    Rng rng(7);
    for (double& v : g.data) v = rng.uniform(-1, 1);
    warp_backward(g, phi, zero, gphi, gflow);
    CHECK(max_abs_diff(gphi, g) == 0.0);
}

TEST_CASE("adjoint identity <warp(phi), g> = <phi, grad_phi(g)>") {
    const FeaturePatch phi = random_features(10, 9, 2, 8);
    Rng rng(9);
    FlowField flow(10, 9);
    for (double& v : flow.uv.data) v = rng.uniform(-2.0, 2.0);
    Tensor3 g(10, 9, 2);
    for (double& v : g.data) v = rng.uniform(-1, 1);

    const Tensor3 warped = warp(phi, flow).map;
    Tensor3 gphi, gflow;
    warp_backward(g, phi, flow, gphi, gflow);

    double lhs = 0.0, rhs = 0.0;
    for (std::size_t i = 0; i < g.data.size(); ++i) lhs += warped.data[i] * g.data[i];
    for (std::size_t i = 0; i < phi.map.data.size(); ++i) rhs += phi.map.data[i] * gphi.data[i];
    CHECK(lhs == Catch::Approx(rhs).margin(1e-10));
}

TEST_CASE("warp_backward matches finite differences away from integer flow") {
    FeaturePatch phi = random_features(8, 8, 2, 10);
    Rng rng(11);
    FlowField flow(8, 8);
    for (double& v : flow.uv.data) {
        // subpixel values in (-1.4, 1.4), kept away from integers
        double x = 0.0;
        do {
            x = rng.uniform(-1.4, 1.4);
        } while (std::abs(x - std::round(x)) < 0.05);
        v = x;
    }
    Tensor3 g(8, 8, 2);
    for (double& v : g.data) v = rng.uniform(-1, 1);

    Tensor3 gphi, gflow;
    warp_backward(g, phi, flow, gphi, gflow);

    auto loss = [&]() {
        const Tensor3 out = warp(phi, flow).map;
        double s = 0.0;
        for (std::size_t i = 0; i < out.data.size(); ++i) s += out.data[i] * g.data[i];
        return s;
    };
    CHECK(check_gradient(phi.map, gphi, loss) < 1e-4);
    CHECK(check_gradient(flow.uv, gflow, loss) < 1e-4);
}

TEST_CASE("estimate_flow on identical images is zero") {
    const Tensor3 img = textured(64, 64, 12);
    const FlowField flow = estimate_flow(img, img, FlowConfig{});
    CHECK(max_abs(flow.uv) < 1e-6);
}

TEST_CASE("estimate_flow recovers an integer shift on texture") {
    const Tensor3 a = textured(128, 128, 13);
    const Tensor3 b = roll(a, 0, 3); // b(r, c) = a(r, c + 3): truth u = 3, v = 0
    const FlowField flow = estimate_flow(a, b, FlowConfig{});
    double epe = 0.0;
    int n = 0;
    for (int i = 12; i < 116; ++i)
        for (int j = 12; j < 116; ++j) {
            const double du = flow.u(i, j) - 3.0, dv = flow.v(i, j);
            epe += std::sqrt(du * du + dv * dv);
            ++n;
        }
    epe /= n;
    CHECK(epe <= 0.25);
}

TEST_CASE("estimate_flow resolves a subpixel shift on a smooth ramp") {
    Tensor3 a(64, 64, 1);
    for (int i = 0; i < 64; ++i)
        for (int j = 0; j < 64; ++j) a.at(i, j, 0) = 0.015 * j;
    // b(p) = a(p + 0.5 columns)
    Tensor3 b(64, 64, 1);
    for (int i = 0; i < 64; ++i)
        for (int j = 0; j < 64; ++j) b.at(i, j, 0) = 0.015 * std::min(j + 0.5, 63.0);
    const FlowField flow = estimate_flow(a, b, FlowConfig{});
    double mean_u = 0.0;
    int n = 0;
    for (int i = 8; i < 56; ++i)
        for (int j = 8; j < 56; ++j) {
            mean_u += flow.u(i, j);
            ++n;
        }
    mean_u /= n;
    CHECK(mean_u > 0.3);
    CHECK(mean_u < 0.7);
}

TEST_CASE("estimate_flow is deterministic") {
    const Tensor3 a = textured(64, 64, 14);
    const Tensor3 b = roll(a, 2, 1);
    const FlowField f1 = estimate_flow(a, b, FlowConfig{});
    const FlowField f2 = estimate_flow(a, b, FlowConfig{});
    CHECK(max_abs_diff(f1.uv, f2.uv) == 0.0);
}

TEST_CASE("estimate_flow validates inputs") {
    CHECK_THROWS_AS(estimate_flow(Tensor3(8, 8, 1), Tensor3(9, 8, 1), FlowConfig{}), invalid_input);
    CHECK_THROWS_AS(estimate_flow(Tensor3(8, 8, 3), Tensor3(8, 8, 3), FlowConfig{}), invalid_input);
}

TEST_CASE(".flo round trip is bit exact") {
    Rng rng(15);
    FlowField field(6, 5);
    for (double& v : field.uv.data) v = static_cast<float>(rng.uniform(-10, 10));
    const std::string path = "roundtrip_test.flo";
    write_flo(field, path);
    const FlowField back = read_flo(path);
    REQUIRE(back.uv.h == 6);
    REQUIRE(back.uv.w == 5);
    for (std::size_t i = 0; i < field.uv.data.size(); ++i)
        REQUIRE(back.uv.data[i] == field.uv.data[i]);
    std::remove(path.c_str());
}

TEST_CASE(".flo reader rejects a bad magic value") {
    const std::string path = "badmagic_test.flo";
    {
        std::ofstream os(path, std::ios::binary);
        const float wrong = 123.25f;
        const std::int32_t dims[2] = {2, 2};
        os.write(reinterpret_cast<const char*>(&wrong), 4);
        os.write(reinterpret_cast<const char*>(dims), 8);
    }
    CHECK_THROWS_AS(read_flo(path), format_error);
    std::remove(path.c_str());
}

TEST_CASE(".flo hand-built 2x2 fixture parses to known values") {
    const std::string path = "handmade_test.flo";
    {
        std::ofstream os(path, std::ios::binary);
        const float magic = 202021.25f;
        const std::int32_t w = 2, h = 2;
        // row-major interleaved (u, v)
        const float data[8] = {1.0f, -2.0f, 0.5f, 0.25f, -1.5f, 3.0f, 0.0f, -0.125f};
        os.write(reinterpret_cast<const char*>(&magic), 4);
        os.write(reinterpret_cast<const char*>(&w), 4);
        os.write(reinterpret_cast<const char*>(&h), 4);
        os.write(reinterpret_cast<const char*>(data), 32);
    }
    const FlowField f = read_flo(path);
    CHECK(f.u(0, 0) == 1.0);
    CHECK(f.v(0, 0) == -2.0);
    CHECK(f.u(0, 1) == 0.5);
    CHECK(f.v(0, 1) == 0.25);
    CHECK(f.u(1, 0) == -1.5);
    CHECK(f.v(1, 0) == 3.0);
    CHECK(f.u(1, 1) == 0.0);
    CHECK(f.v(1, 1) == -0.125);
    std::remove(path.c_str());
}

TEST_CASE(".flo reader reports truncation with an offset") {
    const std::string path = "truncated_test.flo";
    {
        std::ofstream os(path, std::ios::binary);
        const float magic = 202021.25f;
        const std::int32_t w = 4, h = 4;
        os.write(reinterpret_cast<const char*>(&magic), 4);
        os.write(reinterpret_cast<const char*>(&w), 4);
        os.write(reinterpret_cast<const char*>(&h), 4);
        const float one = 1.0f;
        os.write(reinterpret_cast<const char*>(&one), 4); // far short of 32 records
    }
    try {
        read_flo(path);
        FAIL("expected format_error");
    } catch (const format_error& e) {
        CHECK(e.offset >= 12);
        CHECK(std::string(e.what()).find("byte offset") != std::string::npos);
    }
    std::remove(path.c_str());
}

TEST_CASE("flow_to_feature_grid averages blocks and rescales units") {
    FlowField flow(8, 8);
    for (int i = 0; i < 8; ++i)
        for (int j = 0; j < 8; ++j) {
            flow.u(i, j) = 4.0; // four patch pixels = one feature cell at stride 4
            flow.v(i, j) = 2.0;
        }
    const FlowField cells = flow_to_feature_grid(flow, 4);
    REQUIRE(cells.uv.h == 2);
    for (int i = 0; i < 2; ++i)
        for (int j = 0; j < 2; ++j) {
            REQUIRE(cells.u(i, j) == Catch::Approx(1.0));
            REQUIRE(cells.v(i, j) == Catch::Approx(0.5));
        }
}
