#pragma once

#include <functional>
#include <string>
#include <vector>

#include "trustforge/nn.hpp"

namespace trustforge::xai {

struct AttributionMap {
    Tensor values;  // [H,W], nonnegative
    std::string source;
    Index target_class = 0;
};

// divides by the max entry; an all-zero or negative-max map stays zero
AttributionMap max_normalize(const AttributionMap& m);

// |d score_target / d input|, reshaped to the model's spatial view; flat
// models give a [1,d] map
AttributionMap saliency(const nn::ModelGraph& m, const Tensor& x, Index target);

// relu(sum_k alpha_k A^k) with alpha_k the spatial mean of d score / d A^k,
// bilinearly upsampled to the input size; layer must produce [N,C,H,W] maps
AttributionMap grad_cam(const nn::ModelGraph& m, const Tensor& x, Index target,
                        Index layer);
Index last_spatial_layer(const nn::ModelGraph& m);

// core combination on raw arrays: acts/grads are [K,H,W] flattened
Array cam_combine(const Array& acts, const Array& grads, Index k, Index h, Index w);
Array bilinear_upsample(const Array& src, Index sh, Index sw, Index dh, Index dw);

// convex mix of the max-normalized maps
AttributionMap hybrid_map(const AttributionMap& gc, const AttributionMap& pm, Scalar lambda);

// occlusion with zero patches, stride = patch size; importance is the
// clamped score drop painted onto the patch
AttributionMap perturbation_map(const nn::ModelGraph& m, const Tensor& x, Index target,
                                Index patch, Index grid_h = 0, Index grid_w = 0);

using BlackBox = std::function<Array(const Tensor&)>;  // rows -> scores

struct LimeOptions {
    Index n_perturb = 500;
    Scalar sigma = 0.1;       // Gaussian perturbation scale
    Scalar mask_prob = 0.2;   // independent zero-masking per feature
    Scalar tau = 0.0;         // kernel width; <= 0 self-tunes to
                              // 0.25 * median pairwise distance
    uint64_t seed = 0;
    bool sharp_filter = false;  // bootstrap sign-stability filter
    int bootstrap = 20;
    Scalar flip_threshold = 0.25;
};

struct SurrogateExplanation {
    Scalar intercept = 0.0;
    Array beta;      // per-feature coefficients
    Array phi;       // |beta_j| / sum_k |beta_k|
    Scalar fidelity = 0.0;  // weighted R^2 on the neighborhood
    Scalar tau_used = 0.0;
    bool degenerate = false;  // constant blackbox or all-zero beta
    std::vector<int> dropped;  // coefficients zeroed by the stability filter
};

SurrogateExplanation lime_explain(const BlackBox& f, const Array& x0,
                                  const LimeOptions& opts);

struct SparseSurrogate {
    Scalar intercept = 0.0;
    Array w;
    Scalar fidelity = 0.0;  // R^2 against the blackbox on X
    int sweeps = 0;
    std::vector<Scalar> objective;  // per-sweep value, non-increasing
};

struct LassoOptions {
    int max_sweeps = 10000;
    Scalar tol = 1e-10;
    bool intercept = true;
};

SparseSurrogate sparse_global_surrogate(const BlackBox& f, const Tensor& X,
                                        Scalar lambda_l1,
                                        const LassoOptions& opts = {});

// one pass of cyclic soft-threshold updates; exposed for the per-coordinate
// identity check
Scalar soft_threshold(Scalar rho, Scalar lambda);

}  // namespace trustforge::xai
