#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "trustforge/gan.hpp"
#include "trustforge/xai.hpp"

namespace trustforge::metrics {

// harmonic mean of precision and recall for one positive class; the
// no-positives-anywhere case counts as perfect
Scalar f1_score(const std::vector<Index>& preds, const std::vector<Index>& labels,
                Index positive_class);
Scalar macro_f1(const std::vector<Index>& preds, const std::vector<Index>& labels,
                Index classes);

// single-scale SSIM, sliding uniform window (8x8 or the image size if
// smaller), K1=0.01 K2=0.03 L=1
Scalar ssim(const Tensor& a, const Tensor& b);

// I(A;B)/sqrt(H(A)H(B)); two trivial partitions count as identical
Scalar nmi(const std::vector<Index>& a, const std::vector<Index>& b);

// fraction of pixels whose thresholded values agree
Scalar pixel_accuracy(const Tensor& pred, const Tensor& truth, Scalar theta);

// binarize the max-normalized attribution at threshold, intersect with the
// truth_mask (>0.5); both-empty counts as 1
Scalar iou_xai(const xai::AttributionMap& attribution, const Tensor& truth_mask,
               Scalar threshold);

// 1-D Wasserstein-1 via CDF matching
Scalar ot_fairness_penalty(const gan::DiscreteDist& p_pred, const gan::DiscreteDist& p_true);

struct RegressionMetrics {
    Scalar r2 = 0, rmse = 0;
};
RegressionMetrics regression_metrics(const Array& preds, const Array& targets);

// name->value rows with a fixed serialization order
struct MetricsReport {
    std::vector<std::pair<std::string, Scalar>> values;
    std::map<std::string, std::string> metadata;  // dataset, model, seed, ...

    void set(const std::string& name, Scalar v);
    bool has(const std::string& name) const;
    Scalar get(const std::string& name) const;
    void validate() const;        // bounded metrics stay in range
    std::string to_json() const;  // canonical: fixed key order + float format
    static std::string csv_header();
    std::string csv_row() const;
};

}  // namespace trustforge::metrics
