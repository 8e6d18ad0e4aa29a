#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <random>

#include "doctest.h"
#include "trustforge/nn.hpp"

using namespace trustforge;

namespace {

Array randu(Index n, Rng& rng, Scalar lo = -1.0, Scalar hi = 1.0) {
    std::uniform_real_distribution<Scalar> d(lo, hi);
    Array a(n);
    for (Index i = 0; i < n; ++i) a[i] = d(rng);
    return a;
}

}  // namespace

TEST_CASE("adam first step has the textbook closed form") {
    ad::Var p = ad::leaf({1}, Array::Zero(1));
    nn::Adam opt({p}, nn::AdamConfig{.lr = 1e-3, .weight_decay = 0.0, .adamw = false});
    p->grad = Array::Constant(1, 1.0);
    opt.step({p});
    // m_hat = 1, v_hat = 1 -> delta = -lr / (1 + eps)
    CHECK(p->value[0] == doctest::Approx(-0.000999999990).epsilon(1e-9));
}

TEST_CASE("adam matches a handwritten reference over several steps") {
    Rng rng(3);
    ad::Var p = ad::leaf({4}, randu(4, rng));
    Array theta = p->value;
    nn::AdamConfig cfg{.lr = 0.01, .beta1 = 0.9, .beta2 = 0.999, .eps = 1e-8,
                       .weight_decay = 0.0, .adamw = false};
    nn::Adam opt({p}, cfg);
    Array m = Array::Zero(4), v = Array::Zero(4);
    for (int t = 1; t <= 7; ++t) {
        Array g = randu(4, rng);
        p->grad = g;
        opt.step({p});
        m = cfg.beta1 * m + (1 - cfg.beta1) * g;
        v = cfg.beta2 * v + (1 - cfg.beta2) * g * g;
        Array mh = m / (1 - std::pow(cfg.beta1, t));
        Array vh = v / (1 - std::pow(cfg.beta2, t));
        theta -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
        for (Index i = 0; i < 4; ++i)
            CHECK(p->value[i] == doctest::Approx(theta[i]).epsilon(1e-14));
    }
}

TEST_CASE("adamw decay is decoupled from the gradient") {
    ad::Var p = ad::leaf({1}, Array::Constant(1, 1.0));
    nn::Adam opt({p}, nn::AdamConfig{.lr = 0.1, .weight_decay = 0.01, .adamw = true});
    p->grad = Array::Zero(1);
    opt.step({p});
    // zero gradient: only the decay term moves the weight
    CHECK(p->value[0] == doctest::Approx(1.0 - 0.1 * 0.01 * 1.0).epsilon(1e-14));
}

TEST_CASE("grad_clip rescales only above the threshold") {
    ad::Var a = ad::leaf({2}, Array::Zero(2));
    ad::Var b = ad::leaf({2}, Array::Zero(2));
    a->grad = Array::Constant(2, 3.0);
    b->grad = Array::Constant(2, 4.0);
    // global norm = sqrt(9+9+16+16) = sqrt(50)
    Scalar pre = nn::grad_clip({a, b}, 5.0);
    CHECK(pre == doctest::Approx(std::sqrt(50.0)));
    Scalar post = std::sqrt(a->grad.square().sum() + b->grad.square().sum());
    CHECK(post == doctest::Approx(5.0).epsilon(1e-12));

    a->grad = Array::Constant(2, 0.1);
    b->grad = Array::Constant(2, 0.1);
    nn::grad_clip({a, b}, 5.0);
    CHECK(a->grad[0] == 0.1);
}

TEST_CASE("cross entropy matches a direct high-precision evaluation") {
    Rng rng(17);
    for (int trial = 0; trial < 20; ++trial) {
        const Index n = 4, c = 5;
        Array z = randu(n * c, rng, -4.0, 4.0);
        std::vector<Index> y;
        std::uniform_int_distribution<Index> dy(0, c - 1);
        for (Index i = 0; i < n; ++i) y.push_back(dy(rng));
        ad::Var logits = ad::leaf({n, c}, z);
        ad::Var loss = nn::ce_loss(logits, y);

        long double want = 0.0L;
        for (Index i = 0; i < n; ++i) {
            long double denom = 0.0L;
            for (Index j = 0; j < c; ++j) denom += expl((long double)z[i * c + j]);
            want += logl(denom) - (long double)z[i * c + y[static_cast<size_t>(i)]];
        }
        want /= n;
        CHECK(loss->value[0] == doctest::Approx((double)want).epsilon(1e-12));

        // gradient is softmax minus one-hot, averaged
        ad::zero_grad({logits});
        ad::backward(loss, {logits});
        for (Index i = 0; i < n; ++i) {
            Array row = z.segment(i * c, c);
            Array sm = (row - row.maxCoeff()).exp();
            sm /= sm.sum();
            for (Index j = 0; j < c; ++j) {
                Scalar want_g = (sm[j] - (y[static_cast<size_t>(i)] == j ? 1.0 : 0.0)) / n;
                CHECK(logits->grad[i * c + j] == doctest::Approx(want_g).epsilon(1e-10));
            }
        }
    }
}

TEST_CASE("binary cross entropy validates targets and matches the formula") {
    Array p(3);
    p << 0.9, 0.2, 0.5;
    Array y(3);
    y << 1.0, 0.0, 1.0;
    ad::Var probs = ad::leaf({3}, p);
    ad::Var loss = nn::bce_loss(probs, y);
    Scalar want = -(std::log(0.9) + std::log(0.8) + std::log(0.5)) / 3.0;
    CHECK(loss->value[0] == doctest::Approx(want).epsilon(1e-12));

    Array bad(3);
    bad << 1.0, 0.5, 0.0;
    CHECK_THROWS_AS(nn::bce_loss(probs, bad), ContractError);
}

TEST_CASE("mse is the plain mean of squared residuals") {
    Array pr(2);
    pr << 1.0, 3.0;
    Array tg(2);
    tg << 0.0, 1.0;
    ad::Var pred = ad::leaf({2, 1}, pr);
    CHECK(nn::mse_loss(pred, tg)->value[0] == doctest::Approx((1.0 + 4.0) / 2.0));
}

TEST_CASE("factory models produce the right shapes and deterministic init") {
    Rng rng1(42), rng2(42);
    nn::ModelGraph a = nn::make_dnn(6, {8, 4}, 3, 0.1, rng1);
    nn::ModelGraph b = nn::make_dnn(6, {8, 4}, 3, 0.1, rng2);
    REQUIRE(a.param_list.size() == b.param_list.size());
    for (size_t i = 0; i < a.param_list.size(); ++i)
        CHECK((a.param_list[i]->value == b.param_list[i]->value).all());

    Rng rng(1);
    Tensor x = Tensor::zeros({5, 6});
    for (Index i = 0; i < 30; ++i) x.data[i] = 0.1 * static_cast<Scalar>(i % 7);
    Tensor out = nn::predict(a, x);
    CHECK(out.shape == Shape{5, 3});
    for (Index i = 0; i < 5; ++i)
        CHECK(out.data.segment(i * 3, 3).sum() == doctest::Approx(1.0).epsilon(1e-9));

    nn::ModelGraph cnn = nn::make_cnn(28, 28, 0.25, rng);
    Tensor xi = Tensor(Shape{2, 784}, randu(2 * 784, rng, 0.0, 1.0));
    Tensor logits = nn::predict(cnn, xi);
    CHECK(logits.shape == Shape{2, 10});

    nn::ModelGraph reg = nn::make_regnet(0.0, rng);
    Tensor xr = Tensor(Shape{4, 1}, randu(4, rng));
    CHECK(nn::predict(reg, xr).shape == Shape{4, 1});
}

TEST_CASE("dropout layers are inert in eval mode and active in train mode") {
    Rng rng(5);
    nn::ModelGraph m = nn::make_dnn(10, {16}, 4, 0.5, rng);
    Tensor x = Tensor(Shape{3, 10}, randu(30, rng, 0.0, 1.0));
    Tensor p1 = nn::predict(m, x);
    Tensor p2 = nn::predict(m, x);
    CHECK((p1.data == p2.data).all());

    Rng d1(7), d2(8);
    ad::Var t1 = nn::forward_logits(m, ad::leaf(x), nn::Mode::Train, &d1);
    ad::Var t2 = nn::forward_logits(m, ad::leaf(x), nn::Mode::Train, &d2);
    CHECK(!(t1->value == t2->value).all());
}

TEST_CASE("attention scores form a distribution over spatial positions") {
    Rng rng(9);
    nn::ModelGraph m;
    m.input_shape = {2, 4, 4};
    using K = nn::LayerSpec::Kind;
    m.layers = {
        {.kind = K::Conv, .in = 2, .out = 3, .ksize = 3},
        {.kind = K::Act, .act = nn::Act::Relu},
        {.kind = K::SpatialAttn},
        {.kind = K::Flatten},
        {.kind = K::Affine, .in = 3 * 4 * 4, .out = 2},
    };
    m.head = nn::Head::Softmax;
    nn::init_params(m, rng);
    Tensor x = Tensor(Shape{3, 32}, randu(96, rng, 0.0, 1.0));
    Tensor alpha = nn::attention_alpha(m, 2, x);
    CHECK(alpha.shape == Shape{3, 16});
    for (Index i = 0; i < 3; ++i) {
        CHECK(alpha.data.segment(i * 16, 16).sum() == doctest::Approx(1.0).epsilon(1e-9));
        CHECK((alpha.data.segment(i * 16, 16) >= 0.0).all());
    }
}

TEST_CASE("a small dnn learns xor") {
    data::Dataset tr;
    tr.inputs = Tensor(Shape{4, 2}, [] {
        Array a(8);
        a << 0, 0, 0, 1, 1, 0, 1, 1;
        return a;
    }());
    tr.sample_shape = {2};
    tr.labels = {0, 1, 1, 0};
    data::SplitPair split;
    split.train = tr;
    split.test = tr;

    Rng rng(1);
    nn::ModelGraph m = nn::make_dnn(2, {8}, 2, 0.0, rng);
    nn::TrainConfig cfg;
    cfg.epochs = 400;
    cfg.batch = 4;
    cfg.lr = 0.05;
    cfg.cosine = false;
    cfg.weight_decay = 0.0;
    cfg.patience = 0;
    cfg.val_fraction = 0.0;
    cfg.seed = 11;
    nn::TrainHistory h = nn::train_classifier(m, split, cfg);
    CHECK(h.epochs.size() <= 400);
    CHECK(nn::evaluate(m, tr) == doctest::Approx(1.0));
}

TEST_CASE("training history is seed deterministic") {
    Rng rng(2);
    data::Dataset d = data::synth_biased_mixture(
        160, {{0.0, 0.0}, {3.0, 3.0}}, {0.5, 0.5}, 4);
    data::SplitPair split = data::stratified_split(d, 0.25, 5);

    auto run = [&](uint64_t seed) {
        Rng r(7);
        nn::ModelGraph m = nn::make_dnn(2, {8}, 2, 0.0, r);
        nn::TrainConfig cfg;
        cfg.epochs = 5;
        cfg.batch = 16;
        cfg.lr = 0.01;
        cfg.seed = seed;
        cfg.patience = 0;
        nn::train_classifier(m, split, cfg);
        return m;
    };
    nn::ModelGraph m1 = run(3), m2 = run(3), m3 = run(4);
    for (size_t i = 0; i < m1.param_list.size(); ++i)
        CHECK((m1.param_list[i]->value == m2.param_list[i]->value).all());
    bool all_same = true;
    for (size_t i = 0; i < m1.param_list.size(); ++i)
        all_same = all_same && (m1.param_list[i]->value == m3.param_list[i]->value).all();
    CHECK(!all_same);
}

TEST_CASE("cosine schedule anneals the recorded learning rate") {
    Rng rng(2);
    data::Dataset d = data::synth_biased_mixture(80, {{0.0, 0.0}, {3.0, 3.0}}, {0.5, 0.5}, 4);
    data::SplitPair split = data::stratified_split(d, 0.25, 5);
    Rng r(7);
    nn::ModelGraph m = nn::make_dnn(2, {4}, 2, 0.0, r);
    nn::TrainConfig cfg;
    cfg.epochs = 6;
    cfg.lr = 0.01;
    cfg.min_lr = 0.001;
    cfg.cosine = true;
    cfg.patience = 0;
    nn::TrainHistory h = nn::train_classifier(m, split, cfg);
    REQUIRE(h.epochs.size() == 6);
    CHECK(h.epochs[0].lr == doctest::Approx(0.01));
    for (size_t i = 1; i < h.epochs.size(); ++i) CHECK(h.epochs[i].lr < h.epochs[i - 1].lr);
    CHECK(h.epochs.back().lr >= 0.001 - 1e-12);
}

TEST_CASE("early stopping restores the best validation snapshot") {
    Rng rng(2);
    data::Dataset d = data::synth_biased_mixture(200, {{0.0, 0.0}, {2.5, 2.5}}, {0.5, 0.5}, 4);
    data::SplitPair split = data::stratified_split(d, 0.2, 5);
    Rng r(7);
    nn::ModelGraph m = nn::make_dnn(2, {8}, 2, 0.0, r);
    nn::TrainConfig cfg;
    cfg.epochs = 40;
    cfg.lr = 0.05;
    cfg.cosine = false;
    cfg.patience = 2;
    cfg.val_fraction = 0.25;
    cfg.seed = 1;
    nn::TrainHistory h = nn::train_classifier(m, split, cfg);
    REQUIRE(h.best_epoch >= 0);
    CHECK(h.best_epoch < static_cast<int>(h.epochs.size()));
    // the restored parameters reproduce the recorded best val loss
    Scalar best = h.epochs[static_cast<size_t>(h.best_epoch)].val_loss;
    for (const auto& e : h.epochs) CHECK(e.val_loss >= best - 1e-12);
}

TEST_CASE("checkpoint round trip preserves parameters and predictions") {
    Rng rng(12);
    nn::ModelGraph m = nn::make_cnn(12, 12, 0.25, rng);
    Tensor x = Tensor(Shape{2, 144}, randu(288, rng, 0.0, 1.0));
    Tensor before = nn::predict(m, x);

    std::string path = (std::filesystem::temp_directory_path() / "tf_ckpt_test.tfmd").string();
    nn::save_model(m, path);
    nn::ModelGraph back = nn::load_model(path);
    CHECK(back.input_shape == m.input_shape);
    CHECK(back.layers.size() == m.layers.size());
    CHECK(back.head == m.head);
    REQUIRE(back.param_list.size() == m.param_list.size());
    for (size_t i = 0; i < m.param_list.size(); ++i)
        CHECK((back.param_list[i]->value == m.param_list[i]->value).all());
    Tensor after = nn::predict(back, x);
    CHECK((before.data == after.data).all());
    std::filesystem::remove(path);
}

TEST_CASE("two-model checkpoints keep order and extra head parameters") {
    Rng rng(13);
    nn::ModelGraph g = nn::make_dnn(4, {6}, 2, 0.0, rng);
    nn::ModelGraph c = nn::make_dnn(2, {5}, 1, 0.0, rng);
    std::string path = (std::filesystem::temp_directory_path() / "tf_pair_test.tfmd").string();
    nn::save_models({&g, &c}, path);
    std::vector<nn::ModelGraph> back = nn::load_models(path);
    REQUIRE(back.size() == 2);
    CHECK(back[0].param_list.size() == g.param_list.size());
    CHECK(back[1].param_list.size() == c.param_list.size());
    for (size_t i = 0; i < g.param_list.size(); ++i)
        CHECK((back[0].param_list[i]->value == g.param_list[i]->value).all());
    std::filesystem::remove(path);

    CHECK_THROWS_AS(nn::load_model("/nonexistent/path.tfmd"), IoError);
}

TEST_CASE("regression net fits the synthetic line") {
    data::Dataset d = data::synth_regression(512, -1.0, 1.0, 0.05, 3);
    data::SplitPair split = data::stratified_split(d, 0.2, 9);

    Rng rng(21);
    nn::ModelGraph m = nn::make_regnet(0.0, rng);
    std::vector<ad::Var> params = m.param_list;
    nn::Adam opt(params, nn::AdamConfig{.lr = 0.01, .weight_decay = 0.0, .adamw = false});
    Rng shuffle(1);
    for (int epoch = 0; epoch < 60; ++epoch) {
        for (const auto& rows : data::make_batches(split.train.size(), 32, &shuffle)) {
            Array xb(rows.size()), yb(rows.size());
            for (size_t i = 0; i < rows.size(); ++i) {
                xb[static_cast<Index>(i)] = split.train.inputs.data[rows[i]];
                yb[static_cast<Index>(i)] = split.train.targets.data[rows[i]];
            }
            ad::Var x = ad::leaf({static_cast<Index>(rows.size()), 1}, xb);
            ad::Var pred = nn::forward(m, x, nn::Mode::Train, nullptr);
            ad::Var loss = nn::mse_loss(pred, yb);
            ad::zero_grad(params);
            ad::backward(loss, params);
            opt.step(params);
        }
    }
    Tensor pred = nn::predict(m, split.test.inputs);
    Scalar mse = (pred.data - split.test.targets.data).square().mean();
    CHECK(mse < 0.02);
}
