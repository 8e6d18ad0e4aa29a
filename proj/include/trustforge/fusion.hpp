#pragma once

#include <string>
#include <vector>

#include "trustforge/fairmetrics.hpp"
#include "trustforge/nn.hpp"
#include "trustforge/xai.hpp"

namespace trustforge::fusion {

// image + synthetic caption pairs; an all-zero mask row means no forbidden
// region for that sample
struct PairedDataset {
    Tensor images;  // [N, h*w]
    std::vector<std::vector<Index>> tokens;
    std::vector<Index> labels;
    Tensor masks;  // [N, h*w] binary
    Index vocab = 0, img_h = 28, img_w = 28, classes = 10;
    Index size() const { return images.shape.empty() ? 0 : images.shape[0]; }
};

struct PairedSplit {
    PairedDataset train, test;
};

struct PairedSynthConfig {
    Index per_class_train = 200, per_class_test = 50;
    Scalar text_correct = 0.8;   // informative caption token fidelity
    Scalar image_corrupt = 0.2;  // probability an image is blanked
    bool plant_bias = false;     // bright corner patch on class-0 train rows
    Index patch = 4;
    Index distractors = 20;  // vocabulary beyond the ten digit words
    Index caption_len = 4;
    uint64_t seed = 0;
    std::string data_dir;  // mnist source; empty uses the default cache
};

// builds captions from digit-word tokens plus distractors on top of mnist
// digits; image and text corruption are independent so fusion has headroom
PairedSplit synth_paired(const PairedSynthConfig& cfg);

// IDX image file + JSONL rows {index, tokens, label, mask_rle}
void save_paired(const PairedDataset& ds, const std::string& idx_path,
                 const std::string& jsonl_path);
PairedDataset load_paired(const std::string& idx_path, const std::string& jsonl_path);

enum class Arm { Fused, ImageOnly, TextOnly };

struct FusionModel {
    nn::ModelGraph vision;     // image -> d features
    ad::Var embed;             // [vocab, de] token table
    ad::Var text_W, text_b;    // embedding bag -> d
    ad::Var wf;                // [d] fusion query
    ad::Var cls_W, cls_b;      // [d, classes]
    Index d = 16, de = 16, heads = 2, vocab = 30, classes = 10;
    Index img_h = 28, img_w = 28;
    std::vector<ad::Var> params() const;
};

struct FusionConfig {
    Index d = 16, de = 16, heads = 2;
    Scalar lambda_bias = 0.0;  // bias-penalty weight in the training loss
    int epochs = 4;
    Index batch = 32;
    Scalar lr = 1e-3;
    Arm arm = Arm::Fused;
    bool revise = false;       // per-epoch reveal-to-revise pass
    Scalar revise_eta = 0.0;   // 0 uses lr
    Index probe = 64;          // probe subset for attribution passes
    uint64_t seed = 0;
    bool verbose = false;
};

FusionModel make_fusion(const FusionConfig& cfg, Index vocab, Index classes, Index img_h,
                        Index img_w, Rng& rng);

// per head: scores (q.k)/sqrt(d/h) over the two modality slots; output is
// the softmax-weighted convex combination, heads concatenated.  alphas, when
// given, receives one [N,2] softmax row pair per head
ad::Var attention_fusion(const ad::Var& v, const ad::Var& t, const ad::Var& wf, Index heads,
                         std::vector<ad::Var>* alphas = nullptr);

ad::Var fusion_logits(const FusionModel& m, const ad::Var& x_img,
                      const std::vector<std::vector<Index>>& toks, Arm arm,
                      std::vector<ad::Var>* vis_taps = nullptr);

std::vector<Index> predict_fusion(const FusionModel& m, const PairedDataset& ds, Arm arm);
Scalar evaluate_fusion(const FusionModel& m, const PairedDataset& ds, Arm arm);

// mean attribution mass inside the forbidden region; attribution is
// max-normalized first
Scalar bias_penalty(const xai::AttributionMap& attribution, const Tensor& forbidden_mask);

// grad-cam at the last spatial layer of the vision encoder, through the
// fused logits
xai::AttributionMap fusion_grad_cam(const FusionModel& m, const PairedDataset& ds, Index row,
                                    Index target, Arm arm);

// |d score_target / d image| for one row as an [H,W] map
xai::AttributionMap fusion_saliency(const FusionModel& m, const PairedDataset& ds, Index row,
                                    Index target, Arm arm);

// saliency |d score_pred / d image| bias penalty for one row, value level
Scalar saliency_bias_penalty(const FusionModel& m, const PairedDataset& ds, Index row,
                             Arm arm);

// one gradient step on lambda * mean bias_penalty through the differentiable
// saliency path; rows without masks are skipped; returns how many rows
// carried masks (0 means the step was a no-op)
Index reveal_to_revise_step(FusionModel& m, const PairedDataset& ds,
                            const std::vector<Index>& rows, Scalar lambda, Scalar eta,
                            Arm arm = Arm::Fused);

struct FusionEpoch {
    int epoch = 0;
    Scalar loss = 0, acc = 0, mean_penalty = 0;
};

struct FusionResult {
    FusionModel model;
    metrics::MetricsReport report;
    std::vector<FusionEpoch> history;
};

// CE + lambda * bias-penalty training; per epoch runs grad-cam on a probe
// subset and, when enabled, a reveal-to-revise pass
FusionResult train_fusion(const PairedSplit& split, const FusionConfig& cfg);

}  // namespace trustforge::fusion
