#pragma once

#include <string>
#include <vector>

#include "trustforge/nn.hpp"

namespace trustforge::adv {

// L-inf attack settings; alpha <= 0 resolves to eps/4 at run time
struct AttackConfig {
    std::string method = "fgsm";  // fgsm | bim | pgd
    Scalar eps = 0.1;
    Scalar alpha = 0.0;
    int steps = 10;
    bool random_start = false;  // pgd start drawn uniformly in the eps-ball
    uint64_t seed = 0;
};

// x rows are flattened inputs in [0,1]; outputs stay inside the eps-ball
// around x intersected with [0,1]
Tensor fgsm(const nn::ModelGraph& m, const Tensor& x, const std::vector<Index>& y,
            Scalar eps);
Tensor bim(const nn::ModelGraph& m, const Tensor& x, const std::vector<Index>& y,
           const AttackConfig& cfg);
Tensor pgd(const nn::ModelGraph& m, const Tensor& x, const std::vector<Index>& y,
           const AttackConfig& cfg);
Tensor attack(const nn::ModelGraph& m, const Tensor& x, const std::vector<Index>& y,
              const AttackConfig& cfg);

// accuracy on attacked inputs
Scalar adversarial_accuracy(const nn::ModelGraph& m, const data::Dataset& ds,
                            const AttackConfig& cfg, Index batch = 128);

// per-batch on-the-fly attack examples replace a mix_ratio fraction of each
// minibatch before the optimizer step
nn::TrainHistory adversarial_train(nn::ModelGraph& m, const data::SplitPair& split,
                                   const AttackConfig& attack_cfg,
                                   const nn::TrainConfig& train_cfg,
                                   Scalar mix_ratio = 1.0);

struct UncertaintyReport {
    Tensor mean;        // [N, C] sample mean over passes
    Tensor variance;    // [N, C] unbiased sample variance per output
    Array per_sample;   // [N] variance averaged over outputs
    int passes = 0;
};

// T stochastic train-mode forwards; dropout stays active
UncertaintyReport mc_dropout_predict(const nn::ModelGraph& m, const Tensor& x, int T,
                                     uint64_t seed);

}  // namespace trustforge::adv
