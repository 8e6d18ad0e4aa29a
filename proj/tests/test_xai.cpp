#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <Eigen/Dense>
#include <cmath>
#include <random>

#include "doctest.h"
#include "trustforge/xai.hpp"

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

Scalar cosine(const Array& a, const Array& b) {
    return (a * b).sum() / std::sqrt(a.square().sum() * b.square().sum());
}

}  // namespace

TEST_CASE("saliency of a linear score is exactly |w|") {
    Array w(4);
    w << 1.5, -2.0, 0.0, 0.25;
    nn::ModelGraph m = linear_probe(w, 0.7);
    Rng rng(1);
    for (int trial = 0; trial < 5; ++trial) {
        Tensor x = Tensor(Shape{1, 4}, randu(4, rng));
        xai::AttributionMap s = xai::saliency(m, x, 0);
        CHECK(s.values.shape == Shape{1, 4});
        for (Index j = 0; j < 4; ++j) CHECK(s.values.data[j] == std::abs(w[j]));
    }
}

TEST_CASE("saliency on an image model sums channel magnitudes to [h,w]") {
    Rng rng(2);
    nn::ModelGraph m = nn::make_cnn(8, 8, 0.0, rng);
    Tensor x = Tensor(Shape{1, 64}, randu(64, rng));
    xai::AttributionMap s = xai::saliency(m, x, 3);
    CHECK(s.values.shape == Shape{8, 8});
    CHECK((s.values.data >= 0.0).all());
    CHECK(s.values.data.maxCoeff() > 0.0);
}

TEST_CASE("cam_combine reproduces the hand example") {
    // one 2x2 channel, activations [[1,2],[3,4]]
    Array acts(4);
    acts << 1, 2, 3, 4;
    Array up(4);
    up << 1, 1, 1, 1;
    Array cam = xai::cam_combine(acts, up, 1, 2, 2);
    for (Index i = 0; i < 4; ++i) CHECK(cam[i] == acts[i]);

    Array down = -up;
    Array neg = xai::cam_combine(acts, down, 1, 2, 2);
    CHECK((neg == 0.0).all());
}

TEST_CASE("cam_combine is invariant to activation rescaling with inverse gradients") {
    Rng rng(3);
    const Index k = 3, h = 4, w = 4;
    Array acts = randu(k * h * w, rng, -1.0, 1.0);
    Array grads = randu(k * h * w, rng, -1.0, 1.0);
    Array base = xai::cam_combine(acts, grads, k, h, w);
    const Scalar c = 3.7;
    Array scaled = xai::cam_combine(acts * c, grads / c, k, h, w);
    for (Index i = 0; i < base.size(); ++i)
        CHECK(scaled[i] == doctest::Approx(base[i]).epsilon(1e-12));
}

TEST_CASE("bilinear upsampling is exact on corners and constants") {
    Array c4 = Array::Constant(4, 2.5);
    Array up = xai::bilinear_upsample(c4, 2, 2, 5, 7);
    CHECK(up.size() == 35);
    CHECK((up == 2.5).all());

    Array src(4);
    src << 1, 2, 3, 4;
    Array u = xai::bilinear_upsample(src, 2, 2, 4, 4);
    CHECK(u[0] == 1.0);
    CHECK(u[3] == 2.0);
    CHECK(u[12] == 3.0);
    CHECK(u[15] == 4.0);
    // align-corners midpoint of row 0: 1 + (2-1)*(1/3)
    CHECK(u[1] == doctest::Approx(1.0 + 1.0 / 3.0));

    Array one(1);
    one << 5.0;
    Array u1 = xai::bilinear_upsample(one, 1, 1, 3, 3);
    CHECK((u1 == 5.0).all());
}

TEST_CASE("grad_cam maps are nonnegative with the input's spatial shape") {
    Rng rng(4);
    nn::ModelGraph m = nn::make_cnn(12, 12, 0.0, rng);
    Index layer = xai::last_spatial_layer(m);
    for (int trial = 0; trial < 10; ++trial) {
        Tensor x = Tensor(Shape{1, 144}, randu(144, rng));
        xai::AttributionMap g = xai::grad_cam(m, x, trial % 10, layer);
        CHECK(g.values.shape == Shape{12, 12});
        CHECK((g.values.data >= 0.0).all());
    }
}

TEST_CASE("hybrid endpoints return the normalized constituents") {
    Rng rng(5);
    xai::AttributionMap a, b;
    a.values = Tensor(Shape{3, 3}, randu(9, rng, 0.0, 2.0));
    b.values = Tensor(Shape{3, 3}, randu(9, rng, 0.0, 2.0));
    xai::AttributionMap na = xai::max_normalize(a), nb = xai::max_normalize(b);

    xai::AttributionMap at0 = xai::hybrid_map(a, b, 0.0);
    xai::AttributionMap at1 = xai::hybrid_map(a, b, 1.0);
    // lambda weights the grad-cam side
    CHECK((at1.values.data == na.values.data).all());
    CHECK((at0.values.data == nb.values.data).all());

    xai::AttributionMap mid = xai::hybrid_map(a, b, 0.4);
    for (Index i = 0; i < 9; ++i)
        CHECK(mid.values.data[i] ==
              doctest::Approx(0.4 * na.values.data[i] + 0.6 * nb.values.data[i]));
    CHECK_THROWS_AS(xai::hybrid_map(a, b, 1.5), ContractError);
}

TEST_CASE("max_normalize peaks at one and leaves zero maps alone") {
    xai::AttributionMap m;
    m.values = Tensor(Shape{2, 2}, [] { Array a(4); a << 0, 2, 1, 4; return a; }());
    xai::AttributionMap n = xai::max_normalize(m);
    CHECK(n.values.data.maxCoeff() == 1.0);
    CHECK(n.values.data[1] == 0.5);
    xai::AttributionMap z;
    z.values = Tensor::zeros({2, 2});
    CHECK((xai::max_normalize(z).values.data == 0.0).all());
}

TEST_CASE("occlusion importance lands exactly on the informative tiles") {
    // score reads only the top-left 2x2 patch of a 4x4 image
    Array w = Array::Zero(16);
    w[0] = w[1] = w[4] = w[5] = 1.0;
    nn::ModelGraph m = linear_probe(w, 0.0);
    Tensor x = Tensor(Shape{1, 16}, Array::Constant(16, 0.5));
    xai::AttributionMap pm = xai::perturbation_map(m, x, 0, 2, 4, 4);
    CHECK(pm.values.shape == Shape{4, 4});
    // occluding the hot patch drops the logit by 4 * 0.5 = 2
    CHECK(pm.values.data[0] == doctest::Approx(2.0));
    CHECK(pm.values.data[1] == doctest::Approx(2.0));
    CHECK(pm.values.data[4] == doctest::Approx(2.0));
    CHECK(pm.values.data[5] == doctest::Approx(2.0));
    for (Index i : {2, 3, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15})
        CHECK(pm.values.data[i] == 0.0);
}

TEST_CASE("perturbation grid must tile the image") {
    Array w = Array::Zero(16);
    nn::ModelGraph m = linear_probe(w, 0.0);
    Tensor x = Tensor(Shape{1, 16}, Array::Constant(16, 0.5));
    CHECK_THROWS_AS(xai::perturbation_map(m, x, 0, 3, 4, 4), ContractError);
    CHECK_THROWS_AS(xai::perturbation_map(m, x, 0, 2), ContractError);  // no grid known
}

TEST_CASE("lime recovers an affine blackbox") {
    xai::BlackBox f = [](const Tensor& rows) {
        const Index n = rows.shape[0];
        Array out(n);
        for (Index i = 0; i < n; ++i)
            out[i] = 3.0 * rows.data[i * 2] - 2.0 * rows.data[i * 2 + 1] + 1.0;
        return out;
    };
    Array x0(2);
    x0 << 0.5, 0.5;
    xai::LimeOptions opts;
    opts.n_perturb = 400;
    opts.seed = 7;
    xai::SurrogateExplanation e = xai::lime_explain(f, x0, opts);
    Array want(2);
    want << 3.0, -2.0;
    CHECK(cosine(e.beta, want) >= 0.99);
    CHECK(e.beta[0] == doctest::Approx(3.0).epsilon(1e-3));
    CHECK(e.beta[1] == doctest::Approx(-2.0).epsilon(1e-3));
    CHECK(e.intercept == doctest::Approx(1.0).epsilon(1e-2));
    CHECK(e.fidelity >= 0.95);
    CHECK(e.phi.sum() == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(e.phi[0] == doctest::Approx(0.6).epsilon(1e-3));
    CHECK(e.phi[1] == doctest::Approx(0.4).epsilon(1e-3));
    CHECK(!e.degenerate);
    CHECK(e.tau_used > 0.0);
}

TEST_CASE("lime explanations are seed deterministic") {
    xai::BlackBox f = [](const Tensor& rows) {
        const Index n = rows.shape[0];
        Array out(n);
        for (Index i = 0; i < n; ++i) out[i] = rows.data.segment(i * 3, 3).sum();
        return out;
    };
    Array x0 = Array::Constant(3, 0.2);
    xai::LimeOptions opts;
    opts.n_perturb = 120;
    opts.seed = 3;
    xai::SurrogateExplanation a = xai::lime_explain(f, x0, opts);
    xai::SurrogateExplanation b = xai::lime_explain(f, x0, opts);
    CHECK((a.beta == b.beta).all());
    CHECK(a.fidelity == b.fidelity);
}

TEST_CASE("constant blackbox degenerates cleanly") {
    xai::BlackBox f = [](const Tensor& rows) {
        return Array::Constant(rows.shape[0], 4.2);
    };
    Array x0 = Array::Constant(3, 0.5);
    xai::LimeOptions opts;
    opts.n_perturb = 60;
    opts.seed = 1;
    xai::SurrogateExplanation e = xai::lime_explain(f, x0, opts);
    CHECK(e.degenerate);
    CHECK(e.fidelity == 0.0);
    CHECK(e.phi.size() == 3);
    for (Index i = 0; i < 3; ++i) CHECK(e.phi[i] == doctest::Approx(1.0 / 3.0));
}

TEST_CASE("zero spread in the perturbations is a singularity error") {
    xai::BlackBox f = [](const Tensor& rows) {
        return Array(rows.data.segment(0, rows.shape[0]));
    };
    Array x0 = Array::Constant(2, 0.5);
    xai::LimeOptions opts;
    opts.n_perturb = 30;
    opts.sigma = 0.0;
    opts.mask_prob = 0.0;
    CHECK_THROWS_AS(xai::lime_explain(f, x0, opts), SingularError);
    opts.n_perturb = 2;
    CHECK_THROWS_AS(xai::lime_explain(f, x0, opts), ContractError);
}

TEST_CASE("stability filter drops sign-flipping coefficients only") {
    // strong signal on x1, pure noise reaction on x2 via a tiny wiggle
    Rng noise_rng(17);
    xai::BlackBox f = [](const Tensor& rows) {
        const Index n = rows.shape[0];
        Array out(n);
        for (Index i = 0; i < n; ++i) out[i] = 5.0 * rows.data[i * 2];
        return out;
    };
    Array x0(2);
    x0 << 0.5, 0.5;
    xai::LimeOptions opts;
    opts.n_perturb = 300;
    opts.seed = 5;
    opts.sharp_filter = true;
    xai::SurrogateExplanation e = xai::lime_explain(f, x0, opts);
    // the informative coefficient survives
    CHECK(std::find(e.dropped.begin(), e.dropped.end(), 0) == e.dropped.end());
    CHECK(e.beta[0] == doctest::Approx(5.0).epsilon(1e-2));
    CHECK(e.phi.sum() == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("soft threshold is the textbook shrinkage") {
    CHECK(xai::soft_threshold(3.0, 1.0) == 2.0);
    CHECK(xai::soft_threshold(-3.0, 1.0) == -2.0);
    CHECK(xai::soft_threshold(0.5, 1.0) == 0.0);
    CHECK(xai::soft_threshold(-0.5, 1.0) == 0.0);
    CHECK(xai::soft_threshold(2.0, 0.0) == 2.0);
}

TEST_CASE("lasso with zero penalty matches ordinary least squares") {
    Rng rng(21);
    const Index n = 60, d = 3;
    Tensor X = Tensor(Shape{n, d}, randu(n * d, rng, -1.0, 1.0));
    Array beta(3);
    beta << 2.0, -1.0, 0.5;
    xai::BlackBox f = [&](const Tensor& rows) {
        const Index m = rows.shape[0];
        Array out(m);
        for (Index i = 0; i < m; ++i)
            out[i] = (rows.data.segment(i * d, d) * beta).sum() + 0.3;
        return out;
    };
    xai::SparseSurrogate s = xai::sparse_global_surrogate(f, X, 0.0);

    // OLS with intercept via normal equations
    Eigen::MatrixXd A(n, d + 1);
    Eigen::VectorXd y(n);
    Array fy = f(X);
    for (Index i = 0; i < n; ++i) {
        A(i, 0) = 1.0;
        for (Index j = 0; j < d; ++j) A(i, j + 1) = X.data[i * d + j];
        y(i) = fy[i];
    }
    Eigen::VectorXd ols = (A.transpose() * A).ldlt().solve(A.transpose() * y);
    CHECK(s.intercept == doctest::Approx(ols(0)).epsilon(1e-6));
    for (Index j = 0; j < d; ++j)
        CHECK(s.w[j] == doctest::Approx(ols(j + 1)).epsilon(1e-6));
    CHECK(s.fidelity >= 0.999999);
}

TEST_CASE("heavy penalty zeroes the lasso solution") {
    Rng rng(22);
    const Index n = 40, d = 4;
    Tensor X = Tensor(Shape{n, d}, randu(n * d, rng, -1.0, 1.0));
    xai::BlackBox f = [&](const Tensor& rows) {
        const Index m = rows.shape[0];
        Array out(m);
        for (Index i = 0; i < m; ++i) out[i] = rows.data.segment(i * d, d).sum() + 2.0;
        return out;
    };
    xai::SparseSurrogate s = xai::sparse_global_surrogate(f, X, 1e6);
    CHECK((s.w == 0.0).all());
    Array fy = f(X);
    CHECK(s.intercept == doctest::Approx(fy.mean()).epsilon(1e-9));
}

TEST_CASE("lasso objective never increases across sweeps") {
    Rng rng(23);
    const Index n = 50, d = 5;
    Tensor X = Tensor(Shape{n, d}, randu(n * d, rng, -1.0, 1.0));
    Array noise = randu(n, rng, -0.05, 0.05);
    xai::BlackBox f = [&](const Tensor& rows) {
        const Index m = rows.shape[0];
        Array out(m);
        for (Index i = 0; i < m; ++i)
            out[i] = 2.0 * rows.data[i * d] - rows.data[i * d + 3] + noise[i % n];
        return out;
    };
    xai::SparseSurrogate s = xai::sparse_global_surrogate(f, X, 0.05);
    REQUIRE(s.objective.size() >= 1);
    for (size_t i = 1; i < s.objective.size(); ++i)
        CHECK(s.objective[i] <= s.objective[i - 1] + 1e-12);
    CHECK(s.sweeps == static_cast<int>(s.objective.size()));
}

TEST_CASE("univariate lasso has the soft-threshold closed form") {
    // x column with unit second moment, no intercept
    const Index n = 8;
    Array xs(n);
    xs << 1, -1, 1, -1, 1, -1, 1, -1;  // mean 0, z = 1
    Tensor X = Tensor(Shape{n, 1}, xs);
    Array ys(n);
    for (Index i = 0; i < n; ++i) ys[i] = 3.0 * xs[i];
    xai::BlackBox f = [&](const Tensor&) { return ys; };
    xai::LassoOptions opts;
    opts.intercept = false;
    for (Scalar lam : {0.0, 1.0, 2.5, 4.0}) {
        xai::SparseSurrogate s = xai::sparse_global_surrogate(f, X, lam, opts);
        // rho = (1/n) sum x*y = 3, z = 1
        CHECK(s.w[0] == doctest::Approx(xai::soft_threshold(3.0, lam)).epsilon(1e-9));
    }
}
