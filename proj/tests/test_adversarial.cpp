#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <random>

#include "doctest.h"
#include "trustforge/adversarial.hpp"

using namespace trustforge;

namespace {

Array randu(Index n, Rng& rng, Scalar lo = 0.0, Scalar hi = 1.0) {
    std::uniform_real_distribution<Scalar> d(lo, hi);
    Array a(n);
    for (Index i = 0; i < n; ++i) a[i] = d(rng);
    return a;
}

nn::ModelGraph linear_probe(const Array& w, Scalar b) {
    Rng rng(0);
    nn::ModelGraph m = nn::make_dnn(w.size(), {}, 1, 0.0, rng);
    m.param("L0.W")->value = w;
    m.param("L0.b")->value = Array::Constant(1, b);
    return m;
}

nn::ModelGraph toy_classifier(Index d, Index classes, uint64_t seed) {
    Rng rng(seed);
    return nn::make_dnn(d, {16}, classes, 0.0, rng);
}

Array per_row_ce(const nn::ModelGraph& m, const Tensor& x, const std::vector<Index>& y) {
    Tensor probs = nn::predict(m, x);
    const Index n = x.shape[0], c = probs.shape[1];
    Array out(n);
    for (Index i = 0; i < n; ++i)
        out[i] = -std::log(std::max(probs.data[i * c + y[static_cast<size_t>(i)]], 1e-300));
    return out;
}

}  // namespace

TEST_CASE("fgsm on a linear score has the closed form x + eps*sign(w)") {
    Array w(2);
    w << 1.0, -2.0;
    nn::ModelGraph m = linear_probe(w, 0.0);
    Tensor x = Tensor(Shape{1, 2}, Array::Constant(2, 0.5));
    // label 0: loss -log(1 - sigmoid(w.x)), gradient = sigmoid(w.x) * w
    Tensor xa = adv::fgsm(m, x, {0}, 0.1);
    CHECK(xa.data[0] == doctest::Approx(0.6).epsilon(1e-12));
    CHECK(xa.data[1] == doctest::Approx(0.4).epsilon(1e-12));
    // label 1 flips the sign
    Tensor xb = adv::fgsm(m, x, {1}, 0.1);
    CHECK(xb.data[0] == doctest::Approx(0.4).epsilon(1e-12));
    CHECK(xb.data[1] == doctest::Approx(0.6).epsilon(1e-12));
}

TEST_CASE("attacks stay inside the eps ball and the unit box") {
    Rng rng(3);
    nn::ModelGraph m = toy_classifier(6, 3, 7);
    const Index n = 40;
    Tensor x = Tensor(Shape{n, 6}, randu(n * 6, rng));
    std::vector<Index> y;
    std::uniform_int_distribution<Index> dy(0, 2);
    for (Index i = 0; i < n; ++i) y.push_back(dy(rng));

    for (const char* method : {"fgsm", "bim", "pgd"}) {
        adv::AttackConfig cfg;
        cfg.method = method;
        cfg.eps = 0.07;
        cfg.steps = 5;
        cfg.seed = 9;
        Tensor xa = adv::attack(m, x, y, cfg);
        CHECK((xa.data - x.data).abs().maxCoeff() <= 0.07 + 1e-12);
        CHECK(xa.data.minCoeff() >= 0.0);
        CHECK(xa.data.maxCoeff() <= 1.0);
    }
}

TEST_CASE("eps zero returns the input unchanged") {
    Rng rng(4);
    nn::ModelGraph m = toy_classifier(4, 2, 1);
    Tensor x = Tensor(Shape{3, 4}, randu(12, rng));
    adv::AttackConfig cfg;
    cfg.method = "pgd";
    cfg.eps = 0.0;
    Tensor xa = adv::attack(m, x, {0, 1, 0}, cfg);
    CHECK((xa.data == x.data).all());
}

TEST_CASE("bim with one step at full step size is exactly fgsm") {
    Rng rng(5);
    nn::ModelGraph m = toy_classifier(5, 3, 2);
    Tensor x = Tensor(Shape{8, 5}, randu(40, rng));
    std::vector<Index> y{0, 1, 2, 0, 1, 2, 0, 1};
    adv::AttackConfig cfg;
    cfg.method = "bim";
    cfg.eps = 0.12;
    cfg.alpha = 0.12;
    cfg.steps = 1;
    Tensor a = adv::bim(m, x, y, cfg);
    Tensor b = adv::fgsm(m, x, y, 0.12);
    CHECK((a.data == b.data).all());
}

TEST_CASE("pgd without random start reduces to bim") {
    Rng rng(6);
    nn::ModelGraph m = toy_classifier(5, 2, 3);
    Tensor x = Tensor(Shape{6, 5}, randu(30, rng));
    std::vector<Index> y{0, 1, 0, 1, 0, 1};
    adv::AttackConfig cfg;
    cfg.eps = 0.1;
    cfg.steps = 4;
    cfg.random_start = false;
    cfg.method = "bim";
    Tensor a = adv::bim(m, x, y, cfg);
    cfg.random_start = false;
    Tensor b = adv::pgd(m, x, y, cfg);
    CHECK((a.data == b.data).all());
}

TEST_CASE("pgd random starts stay feasible across seeds") {
    Rng rng(7);
    nn::ModelGraph m = toy_classifier(6, 2, 5);
    Tensor x = Tensor(Shape{10, 6}, randu(60, rng));
    std::vector<Index> y(10, 1);
    for (uint64_t seed = 0; seed < 5; ++seed) {
        adv::AttackConfig cfg;
        cfg.method = "pgd";
        cfg.eps = 0.05;
        cfg.steps = 3;
        cfg.seed = seed;
        Tensor xa = adv::attack(m, x, y, cfg);
        CHECK((xa.data - x.data).abs().maxCoeff() <= 0.05 + 1e-12);
        CHECK(xa.data.minCoeff() >= 0.0);
        CHECK(xa.data.maxCoeff() <= 1.0);
    }
    // different seeds explore different corners
    adv::AttackConfig c1, c2;
    c1.method = c2.method = "pgd";
    c1.eps = c2.eps = 0.05;
    c1.steps = c2.steps = 1;
    c1.seed = 1;
    c2.seed = 2;
    Tensor a = adv::attack(m, x, y, c1);
    Tensor b = adv::attack(m, x, y, c2);
    CHECK(!(a.data == b.data).all());
}

TEST_CASE("iterated attack raises the training loss on nearly every sample") {
    Rng rng(8);
    nn::ModelGraph m = toy_classifier(8, 4, 11);
    const Index n = 200;
    Tensor x = Tensor(Shape{n, 8}, randu(n * 8, rng));
    std::vector<Index> y;
    std::uniform_int_distribution<Index> dy(0, 3);
    for (Index i = 0; i < n; ++i) y.push_back(dy(rng));

    adv::AttackConfig cfg;
    cfg.method = "bim";
    cfg.eps = 0.1;
    cfg.steps = 5;
    Tensor xa = adv::attack(m, x, y, cfg);
    Array before = per_row_ce(m, x, y);
    Array after = per_row_ce(m, xa, y);
    Index raised = 0;
    for (Index i = 0; i < n; ++i)
        if (after[i] >= before[i] - 1e-12) ++raised;
    CHECK(raised >= 180);
}

TEST_CASE("attack rejects inputs outside the unit box and bad labels") {
    nn::ModelGraph m = toy_classifier(3, 2, 1);
    Tensor bad = Tensor(Shape{1, 3}, Array::Constant(3, 1.5));
    adv::AttackConfig cfg;
    CHECK_THROWS_AS(adv::attack(m, bad, {0}, cfg), ContractError);
    Tensor ok = Tensor(Shape{1, 3}, Array::Constant(3, 0.5));
    CHECK_THROWS_AS(adv::attack(m, ok, {0, 1}, cfg), ContractError);
    CHECK_THROWS_AS(adv::attack(m, ok, {5}, cfg), ContractError);
    cfg.eps = -0.1;
    CHECK_THROWS_AS(adv::attack(m, ok, {0}, cfg), ContractError);
}

TEST_CASE("non-finite gradients surface as attack errors") {
    Array w(2);
    w << std::numeric_limits<Scalar>::quiet_NaN(), 1.0;
    nn::ModelGraph m = linear_probe(w, 0.0);
    Tensor x = Tensor(Shape{1, 2}, Array::Constant(2, 0.5));
    CHECK_THROWS_AS(adv::fgsm(m, x, {0}, 0.1), AttackError);
}

TEST_CASE("adversarial accuracy is a plain accuracy over attacked rows") {
    Rng rng(9);
    data::Dataset ds;
    ds.inputs = Tensor(Shape{30, 4}, randu(120, rng));
    ds.sample_shape = {4};
    std::uniform_int_distribution<Index> dy(0, 1);
    for (Index i = 0; i < 30; ++i) ds.labels.push_back(dy(rng));
    nn::ModelGraph m = toy_classifier(4, 2, 3);
    adv::AttackConfig cfg;
    cfg.eps = 0.05;
    Scalar acc = adv::adversarial_accuracy(m, ds, cfg, 16);
    CHECK(acc >= 0.0);
    CHECK(acc <= 1.0);
    // zero eps equals clean accuracy
    cfg.eps = 0.0;
    Scalar clean = nn::evaluate(m, ds);
    CHECK(adv::adversarial_accuracy(m, ds, cfg, 16) == doctest::Approx(clean));
}

TEST_CASE("adversarial training keeps learning and hardens the model") {
    // two tight blobs well inside the unit box
    Rng blob_rng(31);
    std::normal_distribution<Scalar> noise(0.0, 0.08);
    data::Dataset d;
    d.inputs = Tensor::zeros({240, 2});
    d.sample_shape = {2};
    for (Index i = 0; i < 240; ++i) {
        const Index cls = i % 2;
        const Scalar cx = cls == 0 ? 0.25 : 0.75;
        d.inputs.data[i * 2] = std::clamp(cx + noise(blob_rng), 0.0, 1.0);
        d.inputs.data[i * 2 + 1] = std::clamp(cx + noise(blob_rng), 0.0, 1.0);
        d.labels.push_back(cls);
    }
    data::SplitPair split = data::stratified_split(d, 0.25, 1);

    Rng rng(17);
    nn::ModelGraph m = nn::make_dnn(2, {12}, 2, 0.0, rng);
    adv::AttackConfig acfg;
    acfg.method = "bim";
    acfg.eps = 0.05;
    acfg.steps = 3;
    nn::TrainConfig tcfg;
    tcfg.epochs = 8;
    tcfg.batch = 32;
    tcfg.lr = 0.02;
    tcfg.cosine = false;
    tcfg.patience = 0;
    tcfg.val_fraction = 0.0;
    tcfg.seed = 2;
    nn::TrainHistory h = adv::adversarial_train(m, split, acfg, tcfg, 0.5);
    CHECK(h.epochs.size() == 8);
    CHECK(nn::evaluate(m, split.test) > 0.8);
    acfg.seed = 77;
    CHECK(adv::adversarial_accuracy(m, split.test, acfg) > 0.6);
}

TEST_CASE("mc dropout variance is exactly zero when passes are identical") {
    Rng rng(19);
    // a dropout layer with p = 0 keeps every unit: all passes coincide
    using K = nn::LayerSpec::Kind;
    nn::ModelGraph m;
    m.input_shape = {4};
    m.layers = {
        {.kind = K::Affine, .in = 4, .out = 8},
        {.kind = K::Act, .act = nn::Act::Relu},
        {.kind = K::Dropout, .p = 0.0},
        {.kind = K::Affine, .in = 8, .out = 3},
    };
    m.head = nn::Head::Softmax;
    nn::init_params(m, rng);
    Tensor x = Tensor(Shape{5, 4}, randu(20, rng));
    adv::UncertaintyReport rep = adv::mc_dropout_predict(m, x, 12, 5);
    CHECK(rep.passes == 12);
    CHECK(rep.mean.shape == Shape{5, 3});
    CHECK(rep.variance.shape == Shape{5, 3});
    CHECK((rep.variance.data == 0.0).all());
    CHECK((rep.per_sample == 0.0).all());
}

TEST_CASE("mc dropout spreads when dropout is active") {
    Rng rng(20);
    nn::ModelGraph m = nn::make_dnn(4, {32}, 3, 0.5, rng);
    Tensor x = Tensor(Shape{6, 4}, randu(24, rng));
    adv::UncertaintyReport rep = adv::mc_dropout_predict(m, x, 20, 5);
    CHECK((rep.variance.data >= 0.0).all());
    CHECK(rep.variance.data.maxCoeff() > 0.0);
    // per-sample summary is the row mean of the variance table
    for (Index i = 0; i < 6; ++i)
        CHECK(rep.per_sample[i] ==
              doctest::Approx(rep.variance.data.segment(i * 3, 3).mean()).epsilon(1e-12));
    // deterministic in the seed
    adv::UncertaintyReport rep2 = adv::mc_dropout_predict(m, x, 20, 5);
    CHECK((rep.mean.data == rep2.mean.data).all());
    CHECK_THROWS_AS(adv::mc_dropout_predict(m, x, 1, 5), ContractError);
}

TEST_CASE("mc dropout two-point hand oracle") {
    // single unit kept half the time: passes alternate between a and 0 is not
    // reproducible without seeding games, so check against the anchored
    // formulas on a fixed pair instead
    Array passes(2);
    passes << 1.0, 3.0;
    const Scalar mean = passes[0] + ((passes[1] - passes[0]) / 2.0);
    const Scalar var = (passes - mean).square().sum() / (2.0 - 1.0);
    CHECK(mean == 2.0);
    CHECK(var == 2.0);
}
