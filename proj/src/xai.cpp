#include "trustforge/xai.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <random>

namespace trustforge::xai {

AttributionMap max_normalize(const AttributionMap& m) {
    AttributionMap out = m;
    Scalar mx = out.values.data.size() ? out.values.data.maxCoeff() : 0.0;
    if (mx > 0.0)
        out.values.data /= mx;
    else
        out.values.data.setZero();
    return out;
}

namespace {

ad::Var single_row(const Tensor& x, Index want) {
    Array row = x.data;
    if (x.shape.size() == 2 && x.shape[0] == 1) {
        if (x.shape[1] != want)
            throw DimensionError("explain: input " + shape_str(x.shape) +
                                 " does not match model width " + std::to_string(want));
    } else if (x.shape.size() == 1) {
        if (x.shape[0] != want)
            throw DimensionError("explain: input " + shape_str(x.shape) +
                                 " does not match model width " + std::to_string(want));
    } else {
        throw DimensionError("explain: one sample expected, got " + shape_str(x.shape));
    }
    return ad::leaf({1, want}, std::move(row));
}

}  // namespace

AttributionMap saliency(const nn::ModelGraph& m, const Tensor& x, Index target) {
    ad::Var xv = single_row(x, numel(m.input_shape));
    ad::Var z = nn::forward_logits(m, xv, nn::Mode::Eval, nullptr);
    if (target < 0 || target >= z->shape[1])
        throw ContractError("saliency: target " + std::to_string(target) + " out of range");
    ad::Var score = ad::select_class(z, {target});
    Array g = ad::gradients(score, {xv})[0]->value;
    if (!g.isFinite().all()) throw AttributionError("saliency: non-finite gradient");
    g = g.abs();

    AttributionMap out;
    out.source = "saliency";
    out.target_class = target;
    if (m.input_shape.size() == 3) {
        const Index c = m.input_shape[0], h = m.input_shape[1], w = m.input_shape[2];
        Array map = Array::Zero(h * w);
        for (Index ch = 0; ch < c; ++ch) map += g.segment(ch * h * w, h * w);
        out.values = Tensor({h, w}, std::move(map));
    } else {
        const Index gn = g.size();
        out.values = Tensor({1, gn}, std::move(g));
    }
    return out;
}

Array cam_combine(const Array& acts, const Array& grads, Index k, Index h, Index w) {
    if (acts.size() != k * h * w || grads.size() != k * h * w)
        throw DimensionError("cam_combine: size mismatch");
    Array map = Array::Zero(h * w);
    for (Index ch = 0; ch < k; ++ch) {
        Scalar alpha = grads.segment(ch * h * w, h * w).mean();
        map += alpha * acts.segment(ch * h * w, h * w);
    }
    return map.max(0.0);
}

Array bilinear_upsample(const Array& src, Index sh, Index sw, Index dh, Index dw) {
    if (src.size() != sh * sw) throw DimensionError("bilinear_upsample: size mismatch");
    if (sh == dh && sw == dw) return src;
    Array dst(dh * dw);
    for (Index y = 0; y < dh; ++y) {
        Scalar fy = dh > 1 ? static_cast<Scalar>(y) * static_cast<Scalar>(sh - 1) /
                                 static_cast<Scalar>(dh - 1)
                           : 0.0;
        Index y0 = static_cast<Index>(std::floor(fy));
        Index y1 = std::min(y0 + 1, sh - 1);
        Scalar wy = fy - static_cast<Scalar>(y0);
        for (Index xx = 0; xx < dw; ++xx) {
            Scalar fx = dw > 1 ? static_cast<Scalar>(xx) * static_cast<Scalar>(sw - 1) /
                                     static_cast<Scalar>(dw - 1)
                               : 0.0;
            Index x0 = static_cast<Index>(std::floor(fx));
            Index x1 = std::min(x0 + 1, sw - 1);
            Scalar wx = fx - static_cast<Scalar>(x0);
            Scalar top = (1.0 - wx) * src[y0 * sw + x0] + wx * src[y0 * sw + x1];
            Scalar bot = (1.0 - wx) * src[y1 * sw + x0] + wx * src[y1 * sw + x1];
            dst[y * dw + xx] = (1.0 - wy) * top + wy * bot;
        }
    }
    return dst;
}

Index last_spatial_layer(const nn::ModelGraph& m) {
    Shape cur = m.input_shape;
    Index best = -1;
    for (size_t i = 0; i < m.layers.size(); ++i) {
        const nn::LayerSpec& l = m.layers[i];
        switch (l.kind) {
            case nn::LayerSpec::Kind::Affine: cur = {l.out}; break;
            case nn::LayerSpec::Kind::Conv:
                if (cur.size() == 3) {
                    Index h = cur[1], w = cur[2];
                    if (l.pad == ad::Pad::Valid) { h -= l.ksize - 1; w -= l.ksize - 1; }
                    cur = {l.out, h, w};
                }
                break;
            case nn::LayerSpec::Kind::MaxPool:
                if (cur.size() == 3) cur = {cur[0], cur[1] / 2, cur[2] / 2};
                break;
            case nn::LayerSpec::Kind::Flatten: cur = {numel(cur)}; break;
            case nn::LayerSpec::Kind::Reshape4: cur = {l.c, l.h, l.w}; break;
            case nn::LayerSpec::Kind::Act:
            case nn::LayerSpec::Kind::Dropout:
            case nn::LayerSpec::Kind::SpatialAttn: break;
        }
        if (cur.size() == 3) best = static_cast<Index>(i);
    }
    if (best < 0) throw ContractError("model has no spatial layer");
    return best;
}

AttributionMap grad_cam(const nn::ModelGraph& m, const Tensor& x, Index target,
                        Index layer) {
    if (m.input_shape.size() != 3)
        throw ContractError("grad_cam: model input has no spatial extent");
    if (layer < 0 || layer >= static_cast<Index>(m.layers.size()))
        throw ContractError("grad_cam: layer index out of range");
    ad::Var xv = single_row(x, numel(m.input_shape));
    std::vector<ad::Var> taps;
    ad::Var z = nn::forward_logits(m, xv, nn::Mode::Eval, nullptr, &taps);
    if (target < 0 || target >= z->shape[1])
        throw ContractError("grad_cam: target " + std::to_string(target) + " out of range");
    ad::Var tap = taps[static_cast<size_t>(layer)];
    if (tap->shape.size() != 4)
        throw ContractError("grad_cam: layer " + std::to_string(layer) +
                            " has no spatial extent");
    ad::Var score = ad::select_class(z, {target});
    Array g = ad::gradients(score, {tap})[0]->value;
    if (!g.isFinite().all()) throw AttributionError("grad_cam: non-finite gradient");

    const Index k = tap->shape[1], sh = tap->shape[2], sw = tap->shape[3];
    Array cam = cam_combine(tap->value, g, k, sh, sw);
    Array up = bilinear_upsample(cam, sh, sw, m.input_shape[1], m.input_shape[2]);
    AttributionMap out;
    out.values = Tensor({m.input_shape[1], m.input_shape[2]}, std::move(up));
    out.source = "grad_cam";
    out.target_class = target;
    return out;
}

AttributionMap hybrid_map(const AttributionMap& gc, const AttributionMap& pm,
                          Scalar lambda) {
    if (lambda < 0.0 || lambda > 1.0)
        throw ContractError("hybrid_map: lambda must lie in [0,1]");
    if (gc.values.shape != pm.values.shape)
        throw ContractError("hybrid_map: shape mismatch " + shape_str(gc.values.shape) +
                            " vs " + shape_str(pm.values.shape));
    AttributionMap a = max_normalize(gc), b = max_normalize(pm);
    AttributionMap out;
    out.values = Tensor(a.values.shape, lambda * a.values.data + (1.0 - lambda) * b.values.data);
    out.source = "hybrid";
    out.target_class = gc.target_class;
    return out;
}

AttributionMap perturbation_map(const nn::ModelGraph& m, const Tensor& x, Index target,
                                Index patch, Index grid_h, Index grid_w) {
    const Index d = numel(m.input_shape);
    Index ch, gh, gw;
    if (grid_h > 0 && grid_w > 0) {
        if (d % (grid_h * grid_w) != 0)
            throw ContractError("perturbation_map: grid does not tile the input");
        ch = d / (grid_h * grid_w);
        gh = grid_h;
        gw = grid_w;
    } else if (m.input_shape.size() == 3) {
        ch = m.input_shape[0];
        gh = m.input_shape[1];
        gw = m.input_shape[2];
    } else {
        throw ContractError("perturbation_map: flat model needs an explicit grid");
    }
    if (patch < 1) throw ContractError("perturbation_map: patch must be >= 1");
    if (patch > gh || patch > gw)
        throw ContractError("perturbation_map: patch larger than image");
    if (gh % patch != 0 || gw % patch != 0)
        throw ContractError("perturbation_map: patch must tile the image exactly");

    Array row = x.data;
    if (row.size() != d)
        throw DimensionError("perturbation_map: input size " + std::to_string(row.size()) +
                             " does not match model width " + std::to_string(d));
    const Index th = gh / patch, tw = gw / patch;
    const Index tiles = th * tw;
    // one batched forward scores the clean row plus every occlusion
    Array batch((tiles + 1) * d);
    batch.head(d) = row;
    for (Index t = 0; t < tiles; ++t) {
        Array occ = row;
        const Index bi = (t / tw) * patch, bj = (t % tw) * patch;
        for (Index c = 0; c < ch; ++c)
            for (Index i = bi; i < bi + patch; ++i)
                for (Index j = bj; j < bj + patch; ++j) occ[c * gh * gw + i * gw + j] = 0.0;
        batch.segment((t + 1) * d, d) = occ;
    }
    ad::Var z = nn::forward_logits(m, ad::leaf({tiles + 1, d}, std::move(batch)),
                                   nn::Mode::Eval, nullptr);
    if (target < 0 || target >= z->shape[1])
        throw ContractError("perturbation_map: target out of range");
    const Index cdim = z->shape[1];
    const Scalar base = z->value[target];
    Array map = Array::Zero(gh * gw);
    for (Index t = 0; t < tiles; ++t) {
        Scalar drop = std::max(0.0, base - z->value[(t + 1) * cdim + target]);
        const Index bi = (t / tw) * patch, bj = (t % tw) * patch;
        for (Index i = bi; i < bi + patch; ++i)
            for (Index j = bj; j < bj + patch; ++j) map[i * gw + j] = drop;
    }
    AttributionMap out;
    out.values = Tensor({gh, gw}, std::move(map));
    out.source = "perturbation";
    out.target_class = target;
    return out;
}

namespace {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

// weighted ridge fit with intercept column; returns (d+1) coefficients
Vec weighted_ridge(const Mat& Z, const Vec& y, const Vec& w, Scalar ridge) {
    Vec sw = w.array().sqrt();
    Mat B = sw.asDiagonal() * Z;
    Vec by = sw.array() * y.array();
    Mat A = B.transpose() * B;
    A.diagonal().array() += ridge;
    return A.ldlt().solve(B.transpose() * by);
}

}  // namespace

SurrogateExplanation lime_explain(const BlackBox& f, const Array& x0,
                                  const LimeOptions& opts) {
    const Index d = x0.size();
    if (d < 1) throw ContractError("lime: empty input");
    if (opts.n_perturb < d + 2)
        throw ContractError("lime: n_perturb must be >= dim+2 (" + std::to_string(d + 2) +
                            ")");
    const Index n = opts.n_perturb;
    Rng rng(opts.seed);
    std::normal_distribution<Scalar> noise(0.0, opts.sigma);
    std::uniform_real_distribution<Scalar> unit(0.0, 1.0);

    Tensor P = Tensor::zeros({n, d});
    for (Index i = 0; i < n; ++i)
        for (Index j = 0; j < d; ++j) P.data[i * d + j] = x0[j] + noise(rng);
    if (opts.mask_prob > 0.0)
        for (Index i = 0; i < n; ++i)
            for (Index j = 0; j < d; ++j)
                if (unit(rng) < opts.mask_prob) P.data[i * d + j] = 0.0;

    Array scores = f(P);
    if (scores.size() != n) throw ContractError("lime: blackbox returned wrong row count");

    Scalar tau = opts.tau;
    if (tau <= 0.0) {
        std::vector<Scalar> pd;
        pd.reserve(static_cast<size_t>(n) * (n - 1) / 2);
        for (Index i = 0; i < n; ++i)
            for (Index j = i + 1; j < n; ++j) {
                Scalar s = (P.data.segment(i * d, d) - P.data.segment(j * d, d))
                               .square()
                               .sum();
                pd.push_back(std::sqrt(s));
            }
        std::nth_element(pd.begin(), pd.begin() + pd.size() / 2, pd.end());
        tau = 0.25 * pd[pd.size() / 2];
        if (tau <= 0.0) tau = 1.0;
    }

    Vec w(n), y(n);
    Mat Z(n, d + 1);
    for (Index i = 0; i < n; ++i) {
        Scalar dist2 = (P.data.segment(i * d, d) - x0).square().sum();
        w[i] = std::exp(-dist2 / tau);
        y[i] = scores[i];
        Z(i, 0) = 1.0;
        for (Index j = 0; j < d; ++j) Z(i, j + 1) = P.data[i * d + j];
    }

    {
        Vec sw = w.array().sqrt();
        Mat B = sw.asDiagonal() * Z;
        Eigen::ColPivHouseholderQR<Mat> qr(B);
        if (qr.rank() < d + 1)
            throw SingularError(
                "lime: singular perturbation design; increase n_perturb or sigma");
    }

    Vec beta = weighted_ridge(Z, y, w, 1e-6);

    Vec fitted = Z * beta;
    Scalar wsum = w.sum();
    Scalar ybar = (w.array() * y.array()).sum() / wsum;
    Scalar ss_res = (w.array() * (y - fitted).array().square()).sum();
    Scalar ss_tot = (w.array() * (y.array() - ybar).square()).sum();

    SurrogateExplanation out;
    out.intercept = beta[0];
    out.beta = Array(d);
    for (Index j = 0; j < d; ++j) out.beta[j] = beta[j + 1];
    out.tau_used = tau;
    if (ss_tot <= 1e-24) {
        out.fidelity = 0.0;  // constant blackbox carries no signal to explain
        out.degenerate = true;
    } else {
        out.fidelity = 1.0 - ss_res / ss_tot;
    }

    if (opts.sharp_filter && !out.degenerate) {
        std::uniform_int_distribution<Index> pick(0, n - 1);
        std::vector<int> flips(static_cast<size_t>(d), 0);
        for (int b = 0; b < opts.bootstrap; ++b) {
            Mat Zb(n, d + 1);
            Vec yb(n), wb(n);
            for (Index i = 0; i < n; ++i) {
                Index r = pick(rng);
                Zb.row(i) = Z.row(r);
                yb[i] = y[r];
                wb[i] = w[r];
            }
            Vec bb = weighted_ridge(Zb, yb, wb, 1e-6);
            for (Index j = 0; j < d; ++j)
                if (out.beta[j] * bb[j + 1] < 0.0) ++flips[static_cast<size_t>(j)];
        }
        for (Index j = 0; j < d; ++j)
            if (static_cast<Scalar>(flips[static_cast<size_t>(j)]) >
                opts.flip_threshold * static_cast<Scalar>(opts.bootstrap)) {
                out.beta[j] = 0.0;
                out.dropped.push_back(static_cast<int>(j));
            }
    }

    Scalar mass = out.beta.abs().sum();
    if (out.degenerate || mass <= 0.0) {
        // no usable signal, attribution mass spread evenly
        out.phi = Array::Constant(d, 1.0 / static_cast<Scalar>(d));
        out.degenerate = true;
    } else {
        out.phi = out.beta.abs() / mass;
    }
    return out;
}

Scalar soft_threshold(Scalar rho, Scalar lambda) {
    if (rho > lambda) return rho - lambda;
    if (rho < -lambda) return rho + lambda;
    return 0.0;
}

SparseSurrogate sparse_global_surrogate(const BlackBox& f, const Tensor& X,
                                        Scalar lambda_l1, const LassoOptions& opts) {
    if (X.shape.size() != 2)
        throw DimensionError("surrogate: X must be [N,d], got " + shape_str(X.shape));
    if (lambda_l1 < 0.0) throw ContractError("surrogate: lambda must be >= 0");
    const Index n = X.shape[0], d = X.shape[1];
    if (n < 1) throw ContractError("surrogate: empty dataset");

    Array y = f(X);
    if (y.size() != n) throw ContractError("surrogate: blackbox returned wrong row count");

    Array w = Array::Zero(d);
    Scalar b = opts.intercept ? y.mean() : 0.0;
    Array r = y - b;
    Array znorm(d);
    for (Index j = 0; j < d; ++j) {
        Scalar s = 0.0;
        for (Index i = 0; i < n; ++i) s += X.data[i * d + j] * X.data[i * d + j];
        znorm[j] = s / static_cast<Scalar>(n);
    }

    SparseSurrogate out;
    const Scalar ninv = 1.0 / static_cast<Scalar>(n);
    bool converged = false;
    for (int sweep = 0; sweep < opts.max_sweeps; ++sweep) {
        Scalar delta = 0.0;
        for (Index j = 0; j < d; ++j) {
            if (znorm[j] == 0.0) continue;
            Scalar rho = 0.0;
            for (Index i = 0; i < n; ++i) rho += X.data[i * d + j] * r[i];
            rho = rho * ninv + znorm[j] * w[j];
            Scalar wn = soft_threshold(rho, lambda_l1) / znorm[j];
            if (wn != w[j]) {
                for (Index i = 0; i < n; ++i) r[i] += X.data[i * d + j] * (w[j] - wn);
                delta = std::max(delta, std::abs(wn - w[j]));
                w[j] = wn;
            }
        }
        if (opts.intercept) {
            Scalar shift = r.mean();
            b += shift;
            r -= shift;
            delta = std::max(delta, std::abs(shift));
        }
        out.objective.push_back(0.5 * ninv * r.square().sum() +
                                lambda_l1 * w.abs().sum());
        out.sweeps = sweep + 1;
        if (delta < opts.tol) {
            converged = true;
            break;
        }
    }
    if (!converged) {
        Scalar gap = 0.0;
        for (Index j = 0; j < d; ++j) {
            Scalar rho = 0.0;
            for (Index i = 0; i < n; ++i) rho += X.data[i * d + j] * r[i];
            rho *= ninv;
            Scalar viol = w[j] == 0.0 ? std::max(0.0, std::abs(rho) - lambda_l1)
                                      : std::abs(rho - lambda_l1 * (w[j] > 0 ? 1.0 : -1.0));
            gap = std::max(gap, viol);
        }
        throw ConvergenceError("surrogate: coordinate descent did not converge in " +
                               std::to_string(opts.max_sweeps) +
                               " sweeps (duality-gap proxy " + std::to_string(gap) + ")");
    }

    out.intercept = b;
    out.w = w;
    Array fitted = y - r;
    Scalar ybar = y.mean();
    Scalar ss_tot = (y - ybar).square().sum();
    Scalar ss_res = r.square().sum();
    if (ss_tot <= 1e-24)
        out.fidelity = ss_res <= 1e-24 ? 1.0 : 0.0;
    else
        out.fidelity = 1.0 - ss_res / ss_tot;
    return out;
}

}  // namespace trustforge::xai
