#include <catch_amalgamated.hpp>

#include <cmath>
#include <cstring>

#include "ncd/autodiff.hpp"
#include "oracles.hpp"

using namespace ncd;

namespace {

Tensorf random_tensor(std::vector<int> shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensorf t(std::move(shape));
    for (auto& v : t.values()) v = float(rng.uniform(lo, hi));
    return t;
}

float max_abs_diff(const Tensorf& a, const Tensorf& b) {
    REQUIRE(a.shape() == b.shape());
    float m = 0.f;
    for (size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

}  // namespace

TEST_CASE("tensor basics and finiteness") {
    Tensorf t({2, 3});
    REQUIRE(t.size() == 6);
    REQUIRE(t.shape_str() == "[2x3]");
    CHECK_THROWS_AS(Tensorf({2, 2}, {1.f, 2.f, 3.f}), std::invalid_argument);

    Tensorf bad({2}, {1.f, std::numeric_limits<float>::quiet_NaN()});
    CHECK_FALSE(bad.all_finite());
    CHECK_THROWS_AS(bad.require_finite("test"), NumericError);

    Tape<float> tape;
    CHECK_THROWS_AS(tape.leaf(bad), NumericError);
}

TEST_CASE("conv2d identity kernel") {
    Tape<float> tape;
    auto x = tape.leaf(Tensorf::full({1, 1, 3, 3}, 2.f));
    auto k = tape.leaf(Tensorf({1, 1, 1, 1}, {1.f}));
    auto b = tape.leaf(Tensorf({1}, {0.f}));
    auto y = conv2d(x, k, b, 1, 0);
    CHECK(max_abs_diff(tape.value(y), tape.value(x)) == 0.f);
}

TEST_CASE("conv2d sum of ones") {
    Tape<float> tape;
    auto x = tape.leaf(Tensorf::full({1, 1, 3, 3}, 1.f));
    auto k = tape.leaf(Tensorf::full({1, 1, 3, 3}, 1.f));
    auto b = tape.leaf(Tensorf({1}, {0.f}));
    auto y = conv2d(x, k, b, 1, 0);
    REQUIRE(tape.value(y).shape() == std::vector<int>{1, 1, 1, 1});
    CHECK(tape.value(y)[0] == 9.f);
}

TEST_CASE("conv2d agrees with loop-nest oracle") {
    Rng rng(101);
    for (auto [stride, pad] : {std::pair{1, 0}, {1, 1}, {2, 1}}) {
        Tape<float> tape;
        Tensorf xt = random_tensor({2, 3, stride == 2 ? 9 : 8, stride == 2 ? 9 : 8}, rng);
        Tensorf kt = random_tensor({4, 3, 3, 3}, rng);
        Tensorf bt = random_tensor({4}, rng);
        auto y = conv2d(tape.leaf(xt), tape.leaf(kt), tape.leaf(bt), stride, pad);
        Tensorf want = oracle::conv2d(xt, kt, bt, stride, pad);
        CHECK(max_abs_diff(tape.value(y), want) < 1e-5f);
    }
}

TEST_CASE("conv2d rejects bad shapes") {
    Tape<float> tape;
    auto x = tape.leaf(Tensorf({1, 2, 4, 4}));
    auto k = tape.leaf(Tensorf({1, 3, 3, 3}));
    auto b = tape.leaf(Tensorf({1}));
    CHECK_THROWS_AS(conv2d(x, k, b, 1, 0), std::invalid_argument);
    auto k2 = tape.leaf(Tensorf({1, 2, 3, 3}));
    CHECK_THROWS_AS(conv2d(x, k2, b, 3, 0), ConfigError);  // (4-3)/3 not integer
}

TEST_CASE("affine identity and hand sum") {
    Tape<float> tape;
    Tensorf eye({3, 3});
    for (int i = 0; i < 3; ++i) eye.at2(i, i) = 1.f;
    Rng rng(7);
    Tensorf xt = random_tensor({2, 3}, rng);
    auto y = affine(tape.leaf(xt), tape.leaf(eye), tape.leaf(Tensorf({3})));
    CHECK(max_abs_diff(tape.value(y), xt) == 0.f);

    auto z = affine(tape.leaf(Tensorf({1, 2}, {1.f, 2.f})),
                    tape.leaf(Tensorf({2, 1}, {1.f, 1.f})), tape.leaf(Tensorf({1}, {3.f})));
    CHECK(tape.value(z)[0] == 6.f);
}

TEST_CASE("affine agrees with dot-product oracle") {
    Rng rng(55);
    Tape<float> tape;
    Tensorf xt = random_tensor({4, 5}, rng);
    Tensorf wt = random_tensor({5, 3}, rng);
    Tensorf bt = random_tensor({3}, rng);
    auto y = affine(tape.leaf(xt), tape.leaf(wt), tape.leaf(bt));
    CHECK(max_abs_diff(tape.value(y), oracle::affine(xt, wt, bt)) < 1e-6f);
}

TEST_CASE("sigmoid values and saturation") {
    Tape<float> tape;
    auto y = sigmoid(tape.leaf(Tensorf({3}, {0.f, -100.f, 100.f})));
    CHECK(tape.value(y)[0] == 0.5f);
    CHECK(tape.value(y)[1] >= 0.f);
    CHECK(tape.value(y)[1] < 1e-30f);  // saturates toward 0, never NaN
    CHECK(tape.value(y)[2] == 1.f);
    CHECK(tape.value(y).all_finite());
}

TEST_CASE("sigmoid symmetry: s(x) + s(-x) = 1") {
    Rng rng(3);
    Tape<float> tape;
    Tensorf xt = random_tensor({64}, rng, -20.0, 20.0);
    Tensorf nt(xt.shape());
    for (size_t i = 0; i < xt.size(); ++i) nt[i] = -xt[i];
    auto a = sigmoid(tape.leaf(xt));
    auto b = sigmoid(tape.leaf(nt));
    for (size_t i = 0; i < xt.size(); ++i)
        CHECK(std::abs(tape.value(a)[i] + tape.value(b)[i] - 1.f) < 1e-6f);
}

TEST_CASE("bce_with_logits zero logits, two-hot target") {
    Tape<float> tape;
    Tensorf targets({1, 10});
    targets[0] = targets[1] = 1.f;
    auto loss = bce_with_logits(tape.leaf(Tensorf({1, 10})), tape.leaf(targets));
    CHECK(std::abs(tape.value(loss)[0] - 10.f * std::log(2.f)) < 1e-5f);
}

TEST_CASE("bce_with_logits saturated correct prediction") {
    Tape<float> tape;
    Tensorf targets({1, 10});
    targets[0] = targets[1] = 1.f;
    Tensorf logits({1, 10});
    for (int j = 0; j < 10; ++j) logits[size_t(j)] = targets[size_t(j)] == 1.f ? 20.f : -20.f;
    auto loss = bce_with_logits(tape.leaf(logits), tape.leaf(targets));
    CHECK(tape.value(loss)[0] < 1e-6f);
    CHECK(tape.value(loss)[0] >= 0.f);
}

TEST_CASE("bce_with_logits agrees with unfused oracle") {
    Rng rng(12);
    for (int trial = 0; trial < 20; ++trial) {
        Tape<float> tape;
        Tensorf logits = random_tensor({4, 10}, rng, -6.0, 6.0);
        Tensorf targets({4, 10});
        for (auto& v : targets.values()) v = rng.bernoulli(0.3) ? 1.f : 0.f;
        auto loss = bce_with_logits(tape.leaf(logits), tape.leaf(targets));
        CHECK(std::abs(tape.value(loss)[0] - oracle::bce_unfused(logits, targets)) < 1e-5f);
        CHECK(tape.value(loss)[0] >= 0.f);
    }
}

TEST_CASE("bce_with_logits rejects non-binary targets") {
    Tape<float> tape;
    auto logits = tape.leaf(Tensorf({1, 2}));
    CHECK_THROWS_AS(bce_with_logits(logits, tape.leaf(Tensorf({1, 2}, {0.f, 0.5f}))), ConfigError);
}

TEST_CASE("avg_pool2d agrees with oracle, global pool averages") {
    Rng rng(9);
    Tape<float> tape;
    Tensorf xt = random_tensor({2, 3, 6, 6}, rng);
    auto y = avg_pool2d(tape.leaf(xt), 2);
    CHECK(max_abs_diff(tape.value(y), oracle::avg_pool2d(xt, 2)) < 1e-6f);
    CHECK_THROWS_AS(avg_pool2d(tape.leaf(Tensorf({1, 1, 5, 5})), 2), ConfigError);

    auto g = global_avg_pool(tape.leaf(Tensorf::full({2, 4, 3, 3}, 5.f)));
    REQUIRE(tape.value(g).shape() == std::vector<int>{2, 4});
    for (size_t i = 0; i < tape.value(g).size(); ++i)
        CHECK(std::abs(tape.value(g)[i] - 5.f) < 1e-6f);
}

TEST_CASE("dropout identity cases") {
    Rng rng(4);
    Tape<float> tape;
    Tensorf xt = random_tensor({10, 10}, rng);
    auto x = tape.leaf(xt);
    auto a = dropout(x, 0.0, rng, true);
    CHECK(a.id == x.id);  // rate 0: same node, untouched
    auto b = dropout(x, 0.7, rng, false);
    CHECK(b.id == x.id);  // eval mode
    CHECK_THROWS_AS(dropout(x, 1.0, rng, true), ConfigError);
}

TEST_CASE("dropout keeps expectation, fixed seed") {
    Rng rng(20260810);
    Tape<float> tape;
    auto x = tape.leaf(Tensorf::full({100, 100}, 1.f));
    auto y = dropout(x, 0.5, rng, true);
    double mean = 0.0;
    for (size_t i = 0; i < tape.value(y).size(); ++i) mean += tape.value(y)[i];
    mean /= double(tape.value(y).size());
    CHECK(std::abs(mean - 1.0) < 0.05);
}

TEST_CASE("backprop of sum gives ones") {
    Tape<float> tape;
    Rng rng(31);
    auto x = tape.leaf(random_tensor({3, 4, 2}, rng), true);
    tape.backward(reduce_sum(x));
    Tensorf g = tape.grad(x);
    for (size_t i = 0; i < g.size(); ++i) CHECK(g[i] == 1.f);
}

TEST_CASE("backprop sigmoid at zero gives quarter") {
    Tape<float> tape;
    auto w = tape.leaf(Tensorf({1}, {0.f}), true);
    tape.backward(reduce_sum(sigmoid(w)));
    CHECK(std::abs(tape.grad(w)[0] - 0.25f) < 1e-7f);
}

TEST_CASE("backprop requires scalar loss") {
    Tape<float> tape;
    auto x = tape.leaf(Tensorf({2, 2}), true);
    CHECK_THROWS_AS(tape.backward(relu(x)), std::invalid_argument);
}

TEST_CASE("leaves untouched by the loss keep zero gradient") {
    Tape<float> tape;
    auto x = tape.leaf(Tensorf::full({2}, 1.f), true);
    auto other = tape.leaf(Tensorf::full({3}, 1.f), true);
    tape.backward(reduce_sum(x));
    Tensorf g = tape.grad(other);
    for (size_t i = 0; i < g.size(); ++i) CHECK(g[i] == 0.f);
}

TEST_CASE("backprop linearity: grad(a*l1 + b*l2) = a*g1 + b*g2") {
    Rng rng(77);
    Tensorf xt = random_tensor({4, 4}, rng);
    const float a = 2.5f, b = -1.25f;

    auto grads_of = [&](auto build) {
        Tape<float> tape;
        auto x = tape.leaf(xt, true);
        tape.backward(build(tape, x));
        return tape.grad(x);
    };
    Tensorf g1 = grads_of([](Tape<float>& t, Varf x) { return reduce_sum(sigmoid(x)); });
    Tensorf g2 = grads_of([](Tape<float>& t, Varf x) { return reduce_mean(mul(x, x)); });
    Tensorf gc = grads_of([&](Tape<float>& t, Varf x) {
        return add(scalar_mul(reduce_sum(sigmoid(x)), a), scalar_mul(reduce_mean(mul(x, x)), b));
    });
    for (size_t i = 0; i < gc.size(); ++i)
        CHECK(std::abs(gc[i] - (a * g1[i] + b * g2[i])) < 1e-5f);
}

TEST_CASE("forward replay is bit-identical") {
    Rng rng(42);
    Tensorf xt = random_tensor({2, 3, 8, 8}, rng);
    Tensorf kt = random_tensor({4, 3, 3, 3}, rng);
    Tensorf bt = random_tensor({4}, rng);

    auto run = [&] {
        Tape<float> tape;
        auto y = global_avg_pool(relu(conv2d(tape.leaf(xt), tape.leaf(kt), tape.leaf(bt), 1, 1)));
        return tape.value(y);
    };
    Tensorf a = run(), b = run();
    REQUIRE(a.size() == b.size());
    CHECK(std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0);
}

TEST_CASE("backward is deterministic bit-for-bit") {
    Rng rng(43);
    Tensorf xt = random_tensor({5, 3, 8, 8}, rng);
    Tensorf kt = random_tensor({4, 3, 3, 3}, rng);
    Tensorf bt = random_tensor({4}, rng);
    auto run = [&] {
        Tape<float> tape;
        auto k = tape.leaf(kt, true);
        auto y = reduce_mean(
            global_avg_pool(relu(conv2d(tape.leaf(xt), k, tape.leaf(bt, true), 1, 1))));
        tape.backward(y);
        return tape.grad(k);
    };
    Tensorf a = run(), b = run();
    CHECK(std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0);
}

TEST_CASE("gather, concat, reshape round trips") {
    Tape<float> tape;
    Rng rng(5);
    Tensorf xt = random_tensor({6, 3}, rng);
    auto x = tape.leaf(xt, true);
    auto picked = gather_rows(x, {4, 0, 4});
    CHECK(tape.value(picked).at2(0, 1) == xt.at2(4, 1));
    CHECK(tape.value(picked).at2(2, 2) == xt.at2(4, 2));

    std::vector<Varf> parts = {picked, picked};
    auto cat = concat_rows(std::span<const Varf>(parts));
    REQUIRE(tape.value(cat).shape() == std::vector<int>{6, 3});

    auto flat = reshape(cat, {18});
    tape.backward(reduce_sum(flat));
    // Row 4 was gathered twice per part, two parts: gradient 4; row 0 twice.
    Tensorf g = tape.grad(x);
    CHECK(g.at2(4, 0) == 4.f);
    CHECK(g.at2(0, 0) == 2.f);
    CHECK(g.at2(1, 0) == 0.f);

    CHECK_THROWS_AS(gather_rows(x, {6}), std::invalid_argument);
    CHECK_THROWS_AS(reshape(x, {5, 3}), std::invalid_argument);
}

TEST_CASE("decentralize_rows centers on first-two-row mean") {
    Tape<float> tape;
    auto x = tape.leaf(Tensorf({3, 2}, {1.f, 2.f, 3.f, 4.f, 10.f, 20.f}), true);
    auto y = decentralize_rows(x);
    // centroid = (2, 3)
    CHECK(tape.value(y).at2(0, 0) == -1.f);
    CHECK(tape.value(y).at2(0, 1) == -1.f);
    CHECK(tape.value(y).at2(1, 0) == 1.f);
    CHECK(tape.value(y).at2(1, 1) == 1.f);
    CHECK(tape.value(y).at2(2, 0) == 8.f);
    CHECK(tape.value(y).at2(2, 1) == 17.f);
}
