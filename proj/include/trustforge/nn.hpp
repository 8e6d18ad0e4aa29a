#pragma once

// Layered models (affine/conv/pool/dropout/spatial attention), losses,
// Adam/AdamW, the training loop, and TFMD checkpoints.

#include "trustforge/autodiff.hpp"
#include "trustforge/dataio.hpp"
#include "trustforge/tensor.hpp"

#include <map>
#include <string>
#include <vector>

namespace trustforge::nn {

enum class Act { Relu, LeakyRelu, Sigmoid, Tanh };
enum class Head { Linear, Sigmoid, Softmax, Tanh01 };
enum class Mode { Train, Eval };

struct LayerSpec {
    enum class Kind { Affine, Conv, MaxPool, Act, Dropout, Flatten, Reshape4, SpatialAttn };
    Kind kind{};
    Index in = 0, out = 0;        // affine dims / conv in+out channels
    Index ksize = 3;              // conv kernel (square)
    ad::Pad pad = ad::Pad::Same;
    Act act = Act::Relu;
    Scalar slope = 0.2;           // leaky relu
    Scalar p = 0.0;               // dropout rate, [0,1)
    Index c = 0, h = 0, w = 0;    // reshape4 target
};

struct ModelGraph {
    Shape input_shape;            // per-sample: {d} flat or {c,h,w} spatial
    std::vector<LayerSpec> layers;
    Head head = Head::Softmax;
    std::map<std::string, ad::Var> params;
    std::vector<ad::Var> param_list;  // deterministic order, matches params keys

    ad::Var param(const std::string& name) const;
};

// He-initializes parameters for the layer list; layers must be set first
void init_params(ModelGraph& m, Rng& rng);

// softmax attention scores at a SpatialAttn layer, [N, H*W] rows summing to 1
Tensor attention_alpha(const ModelGraph& m, Index layer, const Tensor& x);

ModelGraph make_dnn(Index in, const std::vector<Index>& hidden, Index out, Scalar dropout_p,
                    Rng& rng);
ModelGraph make_cnn(Index h, Index w, Scalar dropout_p, Rng& rng);  // fixed 1-8-16-affine(10)
ModelGraph make_regnet(Scalar dropout_p, Rng& rng);                 // 1-15-1, linear head

// x is [N, prod(input_shape)]; taps, when given, collects each layer output
ad::Var forward_logits(const ModelGraph& m, const ad::Var& x, Mode mode, Rng* rng,
                       std::vector<ad::Var>* taps = nullptr);
ad::Var forward(const ModelGraph& m, const ad::Var& x, Mode mode, Rng* rng,
                std::vector<ad::Var>* taps = nullptr);  // head applied
Tensor predict(const ModelGraph& m, const Tensor& x);   // eval mode, head applied

ad::Var ce_loss(const ad::Var& logits, const std::vector<Index>& labels);
ad::Var bce_loss(const ad::Var& probs, const Array& targets01);
ad::Var mse_loss(const ad::Var& pred, const Array& targets);

struct AdamConfig {
    Scalar lr = 1e-4;
    Scalar beta1 = 0.9, beta2 = 0.999;
    Scalar eps = 1e-8;
    Scalar weight_decay = 5e-5;
    bool adamw = true;  // decoupled decay; false disables decay
};

struct Adam {
    AdamConfig cfg;
    long long t = 0;
    std::vector<Array> m, v;
    explicit Adam(const std::vector<ad::Var>& params, AdamConfig c);
    void step(const std::vector<ad::Var>& params);             // cfg.lr
    void step(const std::vector<ad::Var>& params, Scalar lr);  // scheduled lr
};

// scales gradients so the global L2 norm is at most max_norm; returns the
// pre-clip norm
Scalar grad_clip(const std::vector<ad::Var>& params, Scalar max_norm);

struct TrainConfig {
    int epochs = 10;
    Index batch = 32;
    Scalar lr = 1e-4;
    Scalar min_lr = 0.0;
    bool cosine = true;
    Scalar weight_decay = 5e-5;
    bool adamw = true;
    Scalar clip_norm = 5.0;
    int patience = 3;            // early stop on val loss; <= 0 disables
    Scalar val_fraction = 0.1;   // carved from the train split
    uint64_t seed = 0;
    bool verbose = false;
};

struct EpochStats {
    int epoch = 0;
    Scalar lr = 0, train_loss = 0, train_acc = 0, val_loss = 0, val_acc = 0;
};

struct TrainHistory {
    std::vector<EpochStats> epochs;
    int best_epoch = -1;
};

TrainHistory train_classifier(ModelGraph& m, const data::SplitPair& split,
                              const TrainConfig& cfg);
Scalar evaluate(const ModelGraph& m, const data::Dataset& ds);
Scalar mean_loss(const ModelGraph& m, const data::Dataset& ds);

// TFMD checkpoint: magic, u32 version, layer table, little-endian f64 blobs
void save_model(const ModelGraph& m, const std::string& path);
ModelGraph load_model(const std::string& path);
void save_models(const std::vector<const ModelGraph*>& ms, const std::string& path);
std::vector<ModelGraph> load_models(const std::string& path);

}  // namespace trustforge::nn
