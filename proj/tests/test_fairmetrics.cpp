#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <vector>

#include "trustforge/fairmetrics.hpp"

using namespace trustforge;
using gan::DiscreteDist;

namespace {

DiscreteDist dist(std::vector<Scalar> sup, std::vector<Scalar> pr) {
    DiscreteDist d;
    d.support = std::move(sup);
    d.probs = Array(static_cast<Index>(pr.size()));
    for (size_t i = 0; i < pr.size(); ++i) d.probs[static_cast<Index>(i)] = pr[i];
    return d;
}

// integer masses summing to total on k support points
std::vector<int> random_composition(Index k, int total, Rng& rng) {
    std::vector<int> m(static_cast<size_t>(k), 0);
    std::uniform_int_distribution<Index> pick(0, k - 1);
    for (int i = 0; i < total; ++i) ++m[static_cast<size_t>(pick(rng))];
    return m;
}

// brute-force transport: expand both sides into unit masses and try every
// assignment; optimal assignment cost equals the transport LP optimum
Scalar assignment_w1(const DiscreteDist& p, const DiscreteDist& q,
                     const std::vector<int>& mp, const std::vector<int>& mq, int units) {
    std::vector<Scalar> xs, ys;
    for (size_t i = 0; i < mp.size(); ++i)
        for (int r = 0; r < mp[i]; ++r) xs.push_back(p.support[i]);
    for (size_t i = 0; i < mq.size(); ++i)
        for (int r = 0; r < mq[i]; ++r) ys.push_back(q.support[i]);
    std::vector<int> perm(static_cast<size_t>(units));
    std::iota(perm.begin(), perm.end(), 0);
    Scalar best = std::numeric_limits<Scalar>::infinity();
    do {
        Scalar c = 0.0;
        for (int i = 0; i < units; ++i)
            c += std::abs(xs[static_cast<size_t>(i)] - ys[static_cast<size_t>(perm[static_cast<size_t>(i)])]);
        best = std::min(best, c);
    } while (std::next_permutation(perm.begin(), perm.end()));
    return best / static_cast<Scalar>(units);
}

Tensor image(Index h, Index w, const std::vector<Scalar>& v) {
    Array a(h * w);
    for (size_t i = 0; i < v.size(); ++i) a[static_cast<Index>(i)] = v[i];
    return Tensor({h, w}, std::move(a));
}

xai::AttributionMap attr_of(const Tensor& t) {
    xai::AttributionMap m;
    m.values = t;
    m.source = "test";
    return m;
}

}  // namespace

TEST_CASE("f1 handles the degenerate confusion cells") {
    CHECK_THROWS_AS(metrics::f1_score({}, {}, 0), ContractError);
    CHECK_THROWS_AS(metrics::f1_score({0, 1}, {0}, 0), ContractError);
    // class absent from predictions and labels counts as perfect
    CHECK(metrics::f1_score({0, 0}, {0, 0}, 3) == 1.0);
    // predicted never, present in labels: zero
    CHECK(metrics::f1_score({0, 0}, {1, 1}, 1) == 0.0);
    // tp=1 fp=1 fn=1 gives precision=recall=1/2
    CHECK(metrics::f1_score({0, 1, 1, 0}, {0, 1, 0, 1}, 1) ==
          doctest::Approx(0.5).epsilon(1e-15));
    CHECK(metrics::f1_score({1, 1, 1}, {1, 1, 1}, 1) == 1.0);
}

TEST_CASE("macro f1 averages the per-class scores") {
    std::vector<Index> preds{0, 1, 1, 0}, labels{0, 1, 0, 1};
    Scalar c0 = metrics::f1_score(preds, labels, 0);
    Scalar c1 = metrics::f1_score(preds, labels, 1);
    CHECK(metrics::macro_f1(preds, labels, 2) ==
          doctest::Approx(0.5 * (c0 + c1)).epsilon(1e-15));
    // absent third class contributes a perfect score
    CHECK(metrics::macro_f1(preds, labels, 3) ==
          doctest::Approx((c0 + c1 + 1.0) / 3.0).epsilon(1e-15));
    CHECK_THROWS_AS(metrics::macro_f1(preds, labels, 0), ContractError);
}

TEST_CASE("ssim of an image with itself is exactly one") {
    Rng rng(21);
    std::uniform_real_distribution<Scalar> ud(0.0, 1.0);
    for (Index hw : {4, 8, 16}) {
        Array a(hw * hw);
        for (Index i = 0; i < a.size(); ++i) a[i] = ud(rng);
        Tensor x({hw, hw}, a);
        CHECK(metrics::ssim(x, x) == 1.0);
    }
}

TEST_CASE("ssim of flat black against flat white follows the stabilized formula") {
    Tensor black({8, 8}, Array::Zero(64));
    Tensor white({8, 8}, Array::Ones(64));
    constexpr Scalar c1 = 1e-4, c2 = 9e-4;
    Scalar want = (c1 * c2) / ((1.0 + c1) * c2);
    CHECK(metrics::ssim(black, white) == doctest::Approx(want).epsilon(1e-14));
}

TEST_CASE("ssim is symmetric and bounded") {
    Rng rng(77);
    std::uniform_real_distribution<Scalar> ud(0.0, 1.0);
    for (int t = 0; t < 10; ++t) {
        Array a(100), b(100);
        for (Index i = 0; i < 100; ++i) {
            a[i] = ud(rng);
            b[i] = ud(rng);
        }
        Tensor x({10, 10}, a), y({10, 10}, b);
        Scalar s = metrics::ssim(x, y);
        CHECK(s == metrics::ssim(y, x));
        CHECK(s <= 1.0 + 1e-12);
        CHECK(s >= -1.0 - 1e-12);
    }
    Tensor x({4, 4}, Array::Zero(16));
    Tensor y({5, 4}, Array::Zero(20));
    CHECK_THROWS_AS(metrics::ssim(x, y), ContractError);
    Tensor flat({16}, Array::Zero(16));
    CHECK_THROWS_AS(metrics::ssim(flat, flat), DimensionError);
}

TEST_CASE("nmi is exactly one for identical partitions") {
    std::vector<Index> a{0, 1, 2, 0, 1, 2, 2, 1, 0, 0, 1};
    CHECK(metrics::nmi(a, a) == 1.0);
    // relabeling does not change the grouping
    std::vector<Index> b{5, 9, 7, 5, 9, 7, 7, 9, 5, 5, 9};
    CHECK(metrics::nmi(a, b) == 1.0);
}

TEST_CASE("nmi matches a hand-computed contingency table") {
    // joint: (0,0)=1/2 (1,1)=1/4 (1,2)=1/4 so MI=ln2, H=ln2 and 1.5 ln2
    std::vector<Index> a{0, 0, 1, 1}, b{0, 0, 1, 2};
    CHECK(metrics::nmi(a, b) == doctest::Approx(1.0 / std::sqrt(1.5)).epsilon(1e-14));
}

TEST_CASE("nmi of independent uniform partitions is near zero") {
    Rng rng(5);
    std::uniform_int_distribution<Index> cd(0, 3);
    std::vector<Index> a, b;
    for (int i = 0; i < 10000; ++i) {
        a.push_back(cd(rng));
        b.push_back(cd(rng));
    }
    CHECK(metrics::nmi(a, b) < 0.01);
}

TEST_CASE("nmi trivial partition rules") {
    std::vector<Index> flat{5, 5, 5, 5};
    CHECK(metrics::nmi(flat, flat) == 1.0);
    std::vector<Index> split{0, 1, 0, 1};
    CHECK(metrics::nmi(flat, split) == 0.0);
    CHECK(metrics::nmi(split, flat) == 0.0);
    CHECK_THROWS_AS(metrics::nmi({}, {}), ContractError);
    CHECK_THROWS_AS(metrics::nmi({0, 1}, {0}), ContractError);
}

TEST_CASE("nmi stays within the unit interval on random partitions") {
    Rng rng(99);
    std::uniform_int_distribution<Index> kd(1, 5);
    for (int t = 0; t < 30; ++t) {
        std::uniform_int_distribution<Index> ca(0, kd(rng)), cb(0, kd(rng));
        std::vector<Index> a, b;
        for (int i = 0; i < 50; ++i) {
            a.push_back(ca(rng));
            b.push_back(cb(rng));
        }
        Scalar v = metrics::nmi(a, b);
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
    }
}

TEST_CASE("pixel accuracy thresholds both images the same way") {
    Tensor p = image(1, 2, {0.2, 0.7});
    Tensor t = image(1, 2, {0.3, 0.9});
    CHECK(metrics::pixel_accuracy(p, p, 0.5) == 1.0);
    CHECK(metrics::pixel_accuracy(p, t, 0.5) == 1.0);
    CHECK(metrics::pixel_accuracy(p, t, 0.25) == 0.5);
    CHECK_THROWS_AS(metrics::pixel_accuracy(p, t, 0.0), ContractError);
    CHECK_THROWS_AS(metrics::pixel_accuracy(p, t, 1.0), ContractError);
    Tensor bad = image(2, 1, {0.0, 0.0});
    CHECK_THROWS_AS(metrics::pixel_accuracy(p, bad, 0.5), ContractError);
}

TEST_CASE("attribution IoU covers the disjoint, identical and empty cases") {
    Tensor truth = image(2, 2, {0.0, 0.0, 0.0, 1.0});
    xai::AttributionMap m = attr_of(image(2, 2, {1.0, 0.0, 0.0, 0.0}));
    CHECK(metrics::iou_xai(m, truth, 0.5) == 0.0);

    xai::AttributionMap hit = attr_of(image(2, 2, {0.0, 0.0, 0.0, 2.0}));
    CHECK(metrics::iou_xai(hit, truth, 0.5) == 1.0);

    // both sides empty counts as agreement
    xai::AttributionMap zero = attr_of(image(2, 2, {0.0, 0.0, 0.0, 0.0}));
    Tensor none = image(2, 2, {0.0, 0.0, 0.0, 0.0});
    CHECK(metrics::iou_xai(zero, none, 0.5) == 1.0);

    // half overlap: prediction {2,3}, truth {3}
    xai::AttributionMap half = attr_of(image(2, 2, {0.0, 0.0, 1.0, 1.0}));
    CHECK(metrics::iou_xai(half, truth, 0.5) == 0.5);

    CHECK_THROWS_AS(metrics::iou_xai(m, image(1, 4, {0, 0, 0, 1}), 0.5), ContractError);
    CHECK_THROWS_AS(metrics::iou_xai(m, truth, 0.0), ContractError);
    CHECK_THROWS_AS(metrics::iou_xai(m, truth, 1.0), ContractError);
}

TEST_CASE("transport distance matches brute-force assignment on small supports") {
    Rng rng(404);
    std::uniform_int_distribution<Index> kd(1, 6);
    std::uniform_real_distribution<Scalar> xd(-3.0, 3.0);
    const int units = 7;
    for (int t = 0; t < 20; ++t) {
        Index kp = kd(rng), kq = kd(rng);
        DiscreteDist p, q;
        for (Index i = 0; i < kp; ++i) p.support.push_back(xd(rng));
        for (Index i = 0; i < kq; ++i) q.support.push_back(xd(rng));
        std::vector<int> mp = random_composition(kp, units, rng);
        std::vector<int> mq = random_composition(kq, units, rng);
        p.probs = Array(kp);
        q.probs = Array(kq);
        for (Index i = 0; i < kp; ++i)
            p.probs[i] = static_cast<Scalar>(mp[static_cast<size_t>(i)]) / units;
        for (Index i = 0; i < kq; ++i)
            q.probs[i] = static_cast<Scalar>(mq[static_cast<size_t>(i)]) / units;
        Scalar got = metrics::ot_fairness_penalty(p, q);
        Scalar want = assignment_w1(p, q, mp, mq, units);
        CHECK(std::abs(got - want) < 1e-9);
    }
}

TEST_CASE("transport distance is a metric") {
    Rng rng(17);
    std::uniform_real_distribution<Scalar> xd(-2.0, 2.0);
    std::uniform_real_distribution<Scalar> ud(0.05, 1.0);
    auto draw = [&]() {
        DiscreteDist d;
        Index k = 1 + static_cast<Index>(rng() % 5);
        d.probs = Array(k);
        for (Index i = 0; i < k; ++i) {
            d.support.push_back(xd(rng));
            d.probs[i] = ud(rng);
        }
        d.probs /= d.probs.sum();
        return d;
    };
    for (int t = 0; t < 20; ++t) {
        DiscreteDist p = draw(), q = draw(), r = draw();
        Scalar pq = metrics::ot_fairness_penalty(p, q);
        Scalar qp = metrics::ot_fairness_penalty(q, p);
        CHECK(pq == qp);
        CHECK(pq >= 0.0);
        CHECK(metrics::ot_fairness_penalty(p, p) == 0.0);
        Scalar pr = metrics::ot_fairness_penalty(p, r);
        Scalar qr = metrics::ot_fairness_penalty(q, r);
        CHECK(pr <= pq + qr + 1e-12);
    }
    // point masses a unit apart
    CHECK(metrics::ot_fairness_penalty(dist({0.0}, {1.0}), dist({1.0}, {1.0})) ==
          doctest::Approx(1.0).epsilon(1e-15));
}

TEST_CASE("regression metrics reproduce hand values") {
    Array preds(4), targets(4);
    preds << 1.0, 2.0, 3.0, 5.0;
    targets << 1.0, 2.0, 3.0, 4.0;
    metrics::RegressionMetrics rm = metrics::regression_metrics(preds, targets);
    CHECK(rm.r2 == doctest::Approx(0.8).epsilon(1e-15));
    CHECK(rm.rmse == doctest::Approx(0.5).epsilon(1e-15));

    metrics::RegressionMetrics perfect = metrics::regression_metrics(targets, targets);
    CHECK(perfect.r2 == 1.0);
    CHECK(perfect.rmse == 0.0);

    Array flat = Array::Constant(4, 2.0);
    CHECK_THROWS_AS(metrics::regression_metrics(preds, flat), ContractError);
    Array one(1);
    one << 1.0;
    CHECK_THROWS_AS(metrics::regression_metrics(one, one), ContractError);
    CHECK_THROWS_AS(metrics::regression_metrics(one, targets), ContractError);
}

TEST_CASE("metrics report serializes canonically") {
    metrics::MetricsReport r;
    r.metadata["model"] = "cnn";
    r.metadata["dataset"] = "digits";
    r.set("accuracy", 0.5);
    r.set("f1", 1.0);
    // metadata keys sort, metric order is insertion order
    CHECK(r.to_json() ==
          "{\"metadata\":{\"dataset\":\"digits\",\"model\":\"cnn\"},"
          "\"metrics\":{\"accuracy\":0.5,\"f1\":1}}");
    // byte stability under rebuild
    metrics::MetricsReport r2;
    r2.metadata["model"] = "cnn";
    r2.metadata["dataset"] = "digits";
    r2.set("accuracy", 0.5);
    r2.set("f1", 1.0);
    CHECK(r.to_json() == r2.to_json());
    // set() updates in place without reordering
    r.set("accuracy", 0.25);
    CHECK(r.to_json() ==
          "{\"metadata\":{\"dataset\":\"digits\",\"model\":\"cnn\"},"
          "\"metrics\":{\"accuracy\":0.25,\"f1\":1}}");
    CHECK(r.get("accuracy") == 0.25);
    CHECK(r.has("f1"));
    CHECK(!r.has("rmse"));
    CHECK_THROWS_AS(r.get("rmse"), ContractError);
    // escaping of quotes and control bytes
    metrics::MetricsReport esc;
    esc.metadata["note"] = "a\"b\n";
    CHECK(esc.to_json() == "{\"metadata\":{\"note\":\"a\\\"b\\u000a\"},\"metrics\":{}}");
}

TEST_CASE("metrics report csv uses the fixed column set") {
    CHECK(metrics::MetricsReport::csv_header() ==
          "accuracy,f1,r2,rmse,ssim,nmi,iou_xai,delta_bias,ot_distance");
    metrics::MetricsReport r;
    r.set("r2", 0.25);
    CHECK(r.csv_row() == ",,0.25,,,,,,");
    r.set("accuracy", 1.0);
    r.set("ot_distance", 2.0);
    CHECK(r.csv_row() == "1,,0.25,,,,,,2");
}

TEST_CASE("metrics report validation bounds the unit-interval metrics") {
    metrics::MetricsReport r;
    r.set("accuracy", 0.9);
    r.set("r2", -5.0);  // legal, fit can be worse than the mean
    r.set("rmse", 3.0);
    CHECK_NOTHROW(r.validate());
    r.set("accuracy", 1.5);
    CHECK_THROWS_AS(r.validate(), ContractError);
    r.set("accuracy", 0.9);
    r.set("rmse", -1.0);
    CHECK_THROWS_AS(r.validate(), ContractError);
    r.set("rmse", 1.0);
    r.set("r2", 1.5);
    CHECK_THROWS_AS(r.validate(), ContractError);
}
