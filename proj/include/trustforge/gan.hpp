#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "trustforge/nn.hpp"
#include "trustforge/xai.hpp"

namespace trustforge::gan {

// finite distribution on scalar support points
struct DiscreteDist {
    std::vector<Scalar> support;
    Array probs;
};
void validate_dist(const DiscreteDist& d);

// D*(x) = p(x)/(p(x)+q(x)), 0.5 where both vanish; supports must match
Array optimal_discriminator(const DiscreteDist& p, const DiscreteDist& q);

// V(D,G) = E_p[ln D] + E_q[ln(1-D)] on the shared support
Scalar gan_value(const DiscreteDist& p, const DiscreteDist& q, const Array& d);

// nats; supports are merged, 0 <= JS <= ln 2
Scalar js_divergence(const DiscreteDist& p, const DiscreteDist& q);

// two-player pair: generator consumes [z ; onehot(y)]; critic body emits
// penultimate features, the label one-hot joins at the scoring head
struct GanPair {
    nn::ModelGraph gen;
    nn::ModelGraph critic;  // body layers + "head.W"/"head.b" score params
    Index dz = 8;
    Index classes = 2;
    Index data_dim = 2;
    bool image_mode = false;
    Index attn_layer = 0;  // SpatialAttn index inside gen
};

enum class BiasStat { Identity, MeanPixel };

struct GanConfig {
    Index dz = 8;
    Index classes = 2;
    Scalar lambda_gp = 10.0;
    Scalar lambda_bias = 0.0;
    int n_critic = 5;
    Scalar lr_g = 1e-4, lr_d = 1e-4;
    int epochs = 30;
    Index batch = 64;
    bool image_mode = false;
    Index img_h = 28, img_w = 28;
    bool sgd = false;  // plain gradient steps instead of Adam(0, 0.9)
    BiasStat bias_stat = BiasStat::Identity;
    Scalar divergence_abort = 1e6;
    uint64_t seed = 0;
    bool verbose = false;
};
void validate_config(const GanConfig& cfg);

GanPair make_gan(const GanConfig& cfg, Index data_dim, Rng& rng);

// x is [N, data_dim]; y conditions both networks
ad::Var critic_score(const GanPair& g, const ad::Var& x, const std::vector<Index>& y);
ad::Var generator_forward(const GanPair& g, const ad::Var& z, const std::vector<Index>& y);
Tensor sample(const GanPair& g, Index n, Index label, Rng& rng);
std::vector<ad::Var> critic_params(const GanPair& g);

// differentiable penalty lambda_gp * mean[(||grad_x D(x_hat)||_2 - 1)^2]
// on per-sample interpolates x_hat = eps*x_real + (1-eps)*x_fake
using ScoreFn = std::function<ad::Var(const ad::Var&)>;  // [N,d] -> [N]
ad::Var gradient_penalty_fn(const ScoreFn& critic, const Tensor& x_real,
                            const Tensor& x_fake, Scalar lambda_gp, uint64_t seed);
ad::Var gradient_penalty(const GanPair& g, const Tensor& x_real, const Tensor& x_fake,
                         const std::vector<Index>& y, Scalar lambda_gp, uint64_t seed);

// ||E[B(fake)] - E[B(real)]||^2 over the batch
ad::Var bias_regularizer(const ad::Var& x_fake, const Tensor& x_real, BiasStat stat);
Scalar bias_regularizer_value(const Tensor& x_fake, const Tensor& x_real, BiasStat stat);

// max pairwise gap of the per-group scalar statistic (mean feature value)
Scalar delta_bias(const std::map<Index, Tensor>& samples_by_group);

struct GanEpoch {
    int epoch = 0;
    Scalar d_loss = 0, g_loss = 0, gp = 0, r_bias = 0, delta = 0;
};

struct GanResult {
    GanPair pair;
    std::vector<GanEpoch> history;
    Scalar final_grad_norm = 0;  // mean critic gradient norm at interpolates
};

// n_critic ascent steps on E[D(x,y)] - E[D(fake,y)] - GP, then one generator
// step on -E[D(fake,y)] + lambda_bias * R_bias
GanResult train_gan(const data::Dataset& ds, const GanConfig& cfg);

// mean ||grad_x D|| over a probe batch of interpolates
Scalar mean_critic_grad_norm(const GanPair& g, const Tensor& x_real, const Tensor& x_fake,
                             const std::vector<Index>& y, uint64_t seed);

// lime against the critic score of each generated instance
std::vector<xai::SurrogateExplanation> explain_generated(const GanPair& g, Index n_expl,
                                                         const xai::LimeOptions& opts,
                                                         uint64_t seed);

void save_gan(const GanPair& g, const std::string& path);
GanPair load_gan(const std::string& path, const GanConfig& cfg, Index data_dim);

}  // namespace trustforge::gan
