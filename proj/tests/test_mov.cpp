#include "doctest.h"

#include "moekit/mov.hpp"
#include "moekit/rng.hpp"

using namespace moekit;

namespace {

template <typename T> struct MovFixture {
    MoVConfig cfg;
    ParamStore<T> store;
    std::unique_ptr<Mov<T>> mov;

    explicit MovFixture(MoVConfig c, uint64_t seed = 1) : cfg(c) {
        mov = std::make_unique<Mov<T>>(cfg, store);
        store.finalize();
        store.randomize(seed);
    }
};

Image random_image(int side, uint64_t seed) {
    Image img(side, side, 3);
    Rng rng(seed);
    for (auto & v : img.data) v = static_cast<float>(rng.next_real());
    return img;
}

} // namespace

TEST_CASE("encoder grids follow the patch arithmetic") {
    {
        MovFixture<float> f({.d_attn = 64, .d_conv = 64, .patch = 32, .d_llm = 128, .sub_res = 224});
        auto out = f.mov->encode_attn(random_image(224, 2));
        CHECK(out.grid == 7);
        CHECK(out.channels == 64);
        CHECK(out.feat.rows() == 49);
    }
    {
        MovFixture<float> f({.d_attn = 64, .d_conv = 64, .patch = 16, .d_llm = 128, .sub_res = 224});
        auto out = f.mov->encode_attn(random_image(224, 2));
        CHECK(out.grid == 14);
        CHECK(out.feat.rows() == 196);
    }
}

TEST_CASE("encoders stay finite on extreme inputs") {
    MovFixture<float> f({.d_attn = 64, .d_conv = 64, .patch = 32, .d_llm = 128, .sub_res = 224});
    for (float fill : {0.f, 1.f}) {
        Image img(224, 224, 3, fill);
        for (const auto & out : {f.mov->encode_attn(img), f.mov->encode_conv(img)})
            CHECK(out.feat.allFinite());
    }
    auto out = f.mov->encode_fused(random_image(224, 9));
    CHECK(out.feat.allFinite());
}

TEST_CASE("conv encoder resamples onto the attention grid") {
    // 4 stride-2 stages (stride 16) then 2x average pool -> 7x7
    MovFixture<float> f({.d_attn = 64,
                         .d_conv = 64,
                         .patch = 32,
                         .d_llm = 128,
                         .sub_res = 224,
                         .n_attn_blocks = 2,
                         .conv_stages = 4});
    auto out = f.mov->encode_conv(random_image(224, 5));
    CHECK(out.grid == 7);
    CHECK(out.channels == 64);
}

TEST_CASE("constant input gives a spatially constant conv grid") {
    MovFixture<float> f({.d_attn = 64, .d_conv = 64, .patch = 32, .d_llm = 128, .sub_res = 224});
    Image img(224, 224, 3, 0.37f);
    auto out = f.mov->encode_conv(img);
    for (Eigen::Index r = 1; r < out.feat.rows(); ++r)
        CHECK((out.feat.row(r) - out.feat.row(0)).template lpNorm<Eigen::Infinity>() < 1e-5f);
}

TEST_CASE("nearest-neighbor equivalence of the pool on constant fields") {
    // constant field: average pooling equals nearest-neighbor downsampling
    MovFixture<float> a({.d_attn = 64, .d_conv = 64, .patch = 32, .d_llm = 128, .sub_res = 224,
                         .n_attn_blocks = 2, .conv_stages = 5});
    MovFixture<float> b({.d_attn = 64, .d_conv = 64, .patch = 32, .d_llm = 128, .sub_res = 224,
                         .n_attn_blocks = 2, .conv_stages = 5});
    Image img(224, 224, 3, 0.5f);
    auto ga = a.mov->encode_conv(img);
    auto gb = b.mov->encode_conv(img);
    CHECK(ga.grid == gb.grid);
    CHECK((ga.feat - gb.feat).template lpNorm<Eigen::Infinity>() == 0.f);
}

TEST_CASE("fusion concatenates channels in order") {
    EncoderOutput<float> a{7, 64, MatX<float>::Random(49, 64)};
    EncoderOutput<float> b{7, 64, MatX<float>::Random(49, 64)};
    auto fused = Mov<float>::fuse(a, b);
    CHECK(fused.grid == 7);
    CHECK(fused.channels == 128);
    CHECK(fused.feat.leftCols(64) == a.feat);
    CHECK(fused.feat.rightCols(64) == b.feat);

    EncoderOutput<float> zeros{7, 64, MatX<float>::Zero(49, 64)};
    auto fz = Mov<float>::fuse(a, zeros);
    CHECK(fz.feat.leftCols(64) == a.feat);
    CHECK(fz.feat.rightCols(64).cwiseAbs().maxCoeff() == 0.f);

    auto swapped = Mov<float>::fuse(b, a);
    CHECK(swapped.feat != fused.feat); // channel order is significant

    EncoderOutput<float> wrong{6, 64, MatX<float>::Zero(36, 64)};
    CHECK_THROWS_AS(Mov<float>::fuse(a, wrong), std::logic_error);
}

TEST_CASE("identity projection returns the flattened grid") {
    MovFixture<float> f({.d_attn = 64, .d_conv = 64, .patch = 32, .d_llm = 128, .sub_res = 224});
    EncoderOutput<float> fused{7, 128, MatX<float>::Random(49, 128)};
    f.store.mat(f.mov->proj_index()).setIdentity();
    auto tokens = f.mov->project(fused);
    CHECK(tokens.rows() == 49);
    CHECK((tokens - fused.feat).cwiseAbs().maxCoeff() == 0.f);
}

TEST_CASE("projection gradient matches central differences") {
    // tiny 2x2 grid, 4 fused channels, d_llm = 3
    MoVConfig cfg{.d_attn = 4, .d_conv = 4, .patch = 112, .d_llm = 3, .sub_res = 224};
    // build a standalone store holding only a projection-sized parameter
    ParamStore<double> store;
    const int proj = store.add("proj.w", 3, 4, false, 0, 0.1);
    store.finalize();
    store.randomize(42);

    EncoderOutput<double> fused{2, 4, MatX<double>::Random(4, 4)};
    const MatX<double> dout = MatX<double>::Random(4, 3);

    auto loss = [&]() {
        const MatX<double> y = fused.feat * store.mat(proj).transpose();
        return (y.array() * dout.array()).sum();
    };

    std::vector<double> grad = store.make_buffer();
    store.view(grad, proj).noalias() += dout.transpose() * fused.feat;

    const double h = 1e-3;
    for (size_t i = 0; i < store.size(); ++i) {
        const double keep = store.raw()[i];
        store.raw()[i] = keep + h;
        const double lp = loss();
        store.raw()[i] = keep - h;
        const double lm = loss();
        store.raw()[i] = keep;
        const double fd = (lp - lm) / (2 * h);
        const double rel = std::abs(fd - grad[i]) / std::max({std::abs(fd), std::abs(grad[i]), 1e-8});
        CHECK(rel < 1e-4);
    }
    (void)cfg;
}

TEST_CASE("wrong-resolution input is rejected") {
    MovFixture<float> f({.d_attn = 64, .d_conv = 64, .patch = 32, .d_llm = 128, .sub_res = 224});
    Image img(112, 112, 3);
    CHECK_THROWS_AS(f.mov->encode_attn(img), input_error);
    CHECK_THROWS_AS(f.mov->encode_conv(img), input_error);
}

TEST_CASE("config validation catches mismatched grids") {
    MoVConfig bad{.d_attn = 64, .d_conv = 64, .patch = 56, .d_llm = 128, .sub_res = 224,
                  .n_attn_blocks = 2, .conv_stages = 5};
    CHECK_THROWS_AS(bad.validate(), config_error); // 7 does not pool onto 4
    MoVConfig ok{.d_attn = 64, .d_conv = 64, .patch = 112, .d_llm = 128, .sub_res = 224};
    ok.validate();
    CHECK(ok.attn_grid() == 2);
    CHECK(ok.conv_grid() % ok.attn_grid() == 0);
}
