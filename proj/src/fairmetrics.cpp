#include "trustforge/fairmetrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>

namespace trustforge::metrics {

Scalar f1_score(const std::vector<Index>& preds, const std::vector<Index>& labels,
                Index positive_class) {
    if (preds.empty()) throw ContractError("f1: empty input");
    if (preds.size() != labels.size())
        throw ContractError("f1: " + std::to_string(preds.size()) + " predictions vs " +
                            std::to_string(labels.size()) + " labels");
    Index tp = 0, fp = 0, fn = 0;
    for (size_t i = 0; i < preds.size(); ++i) {
        bool p = preds[i] == positive_class, t = labels[i] == positive_class;
        if (p && t) ++tp;
        if (p && !t) ++fp;
        if (!p && t) ++fn;
    }
    if (tp + fp + fn == 0) return 1.0;  // class absent on both sides
    if (tp == 0) return 0.0;
    Scalar prec = static_cast<Scalar>(tp) / static_cast<Scalar>(tp + fp);
    Scalar rec = static_cast<Scalar>(tp) / static_cast<Scalar>(tp + fn);
    return 2.0 * prec * rec / (prec + rec);
}

Scalar macro_f1(const std::vector<Index>& preds, const std::vector<Index>& labels,
                Index classes) {
    if (classes < 1) throw ContractError("f1: classes must be >= 1");
    Scalar s = 0.0;
    for (Index c = 0; c < classes; ++c) s += f1_score(preds, labels, c);
    return s / static_cast<Scalar>(classes);
}

Scalar ssim(const Tensor& a, const Tensor& b) {
    if (a.shape != b.shape)
        throw ContractError("ssim: shape mismatch " + shape_str(a.shape) + " vs " +
                            shape_str(b.shape));
    if (a.shape.size() != 2) throw DimensionError("ssim: images are [H,W]");
    const Index h = a.shape[0], w = a.shape[1];
    const Index win = std::min<Index>(8, std::min(h, w));
    if (win < 1) throw ContractError("ssim: empty image");
    constexpr Scalar c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;  // (K L)^2 with L=1
    const Scalar npix = static_cast<Scalar>(win * win);
    Scalar total = 0.0;
    Index count = 0;
    for (Index i = 0; i + win <= h; ++i) {
        for (Index j = 0; j + win <= w; ++j) {
            Scalar sa = 0, sb = 0, saa = 0, sbb = 0, sab = 0;
            for (Index y = i; y < i + win; ++y)
                for (Index x = j; x < j + win; ++x) {
                    Scalar va = a.data[y * w + x], vb = b.data[y * w + x];
                    sa += va;
                    sb += vb;
                    saa += va * va;
                    sbb += vb * vb;
                    sab += va * vb;
                }
            Scalar ma = sa / npix, mb = sb / npix;
            Scalar va = saa / npix - ma * ma;
            Scalar vb = sbb / npix - mb * mb;
            Scalar cov = sab / npix - ma * mb;
            total += ((2 * ma * mb + c1) * (2 * cov + c2)) /
                     ((ma * ma + mb * mb + c1) * (va + vb + c2));
            ++count;
        }
    }
    return total / static_cast<Scalar>(count);
}

namespace {

Scalar entropy(const std::vector<Scalar>& p) {
    Scalar h = 0.0;
    for (Scalar v : p)
        if (v > 0.0) h -= v * std::log(v);
    return h;
}

}  // namespace

Scalar nmi(const std::vector<Index>& a, const std::vector<Index>& b) {
    if (a.empty()) throw ContractError("nmi: empty input");
    if (a.size() != b.size())
        throw ContractError("nmi: length mismatch " + std::to_string(a.size()) + " vs " +
                            std::to_string(b.size()));
    std::map<Index, Index> ra, rb;
    for (Index v : a) ra.emplace(v, static_cast<Index>(ra.size()));
    for (Index v : b) rb.emplace(v, static_cast<Index>(rb.size()));
    const Index ka = static_cast<Index>(ra.size()), kb = static_cast<Index>(rb.size());
    std::vector<Scalar> joint(static_cast<size_t>(ka * kb), 0.0);
    std::vector<Scalar> pa(static_cast<size_t>(ka), 0.0), pb(static_cast<size_t>(kb), 0.0);
    const Scalar inv = 1.0 / static_cast<Scalar>(a.size());
    for (size_t i = 0; i < a.size(); ++i) {
        Index x = ra[a[i]], y = rb[b[i]];
        joint[static_cast<size_t>(x * kb + y)] += inv;
        pa[static_cast<size_t>(x)] += inv;
        pb[static_cast<size_t>(y)] += inv;
    }
    if (ka == kb) {
        // same grouping up to relabeling: NMI is 1 by definition, skip the
        // log arithmetic so the result is exact
        bool bijective = true;
        for (Index x = 0; x < ka && bijective; ++x) {
            Index nz = 0;
            for (Index y = 0; y < kb; ++y)
                if (joint[static_cast<size_t>(x * kb + y)] > 0.0) ++nz;
            if (nz != 1) bijective = false;
        }
        for (Index y = 0; y < kb && bijective; ++y) {
            Index nz = 0;
            for (Index x = 0; x < ka; ++x)
                if (joint[static_cast<size_t>(x * kb + y)] > 0.0) ++nz;
            if (nz != 1) bijective = false;
        }
        if (bijective) return 1.0;
    }
    Scalar ha = entropy(pa), hb = entropy(pb);
    if (ha == 0.0 && hb == 0.0) return 1.0;  // two trivial partitions agree
    if (ha == 0.0 || hb == 0.0) return 0.0;
    Scalar mi = 0.0;
    for (Index x = 0; x < ka; ++x)
        for (Index y = 0; y < kb; ++y) {
            Scalar j = joint[static_cast<size_t>(x * kb + y)];
            if (j > 0.0)
                mi += j * std::log(j / (pa[static_cast<size_t>(x)] * pb[static_cast<size_t>(y)]));
        }
    return std::clamp(mi / std::sqrt(ha * hb), 0.0, 1.0);
}

Scalar pixel_accuracy(const Tensor& pred, const Tensor& truth, Scalar theta) {
    if (pred.shape != truth.shape)
        throw ContractError("pixel_accuracy: shape mismatch " + shape_str(pred.shape) +
                            " vs " + shape_str(truth.shape));
    if (theta <= 0.0 || theta >= 1.0)
        throw ContractError("pixel_accuracy: theta must lie in (0,1)");
    if (pred.data.size() == 0) throw ContractError("pixel_accuracy: empty image");
    Index agree = 0;
    for (Index i = 0; i < pred.data.size(); ++i)
        if ((pred.data[i] >= theta) == (truth.data[i] >= theta)) ++agree;
    return static_cast<Scalar>(agree) / static_cast<Scalar>(pred.data.size());
}

Scalar iou_xai(const xai::AttributionMap& attribution, const Tensor& truth_mask,
               Scalar threshold) {
    if (attribution.values.shape != truth_mask.shape)
        throw ContractError("iou_xai: shape mismatch " +
                            shape_str(attribution.values.shape) + " vs " +
                            shape_str(truth_mask.shape));
    if (threshold <= 0.0 || threshold >= 1.0)
        throw ContractError("iou_xai: threshold must lie in (0,1)");
    xai::AttributionMap norm = xai::max_normalize(attribution);
    Index inter = 0, uni = 0;
    for (Index i = 0; i < norm.values.data.size(); ++i) {
        bool a = norm.values.data[i] >= threshold;
        bool b = truth_mask.data[i] > 0.5;
        if (a && b) ++inter;
        if (a || b) ++uni;
    }
    if (uni == 0) return 1.0;
    return static_cast<Scalar>(inter) / static_cast<Scalar>(uni);
}

Scalar ot_fairness_penalty(const gan::DiscreteDist& p_pred, const gan::DiscreteDist& p_true) {
    gan::validate_dist(p_pred);
    gan::validate_dist(p_true);
    std::map<Scalar, std::pair<Scalar, Scalar>> events;
    for (size_t i = 0; i < p_pred.support.size(); ++i)
        events[p_pred.support[i]].first += p_pred.probs[static_cast<Index>(i)];
    for (size_t i = 0; i < p_true.support.size(); ++i)
        events[p_true.support[i]].second += p_true.probs[static_cast<Index>(i)];
    Scalar w1 = 0.0, fp = 0.0, fq = 0.0, prev = 0.0;
    bool first = true;
    for (const auto& [x, dpq] : events) {
        if (!first) w1 += std::abs(fp - fq) * (x - prev);
        fp += dpq.first;
        fq += dpq.second;
        prev = x;
        first = false;
    }
    return w1;
}

RegressionMetrics regression_metrics(const Array& preds, const Array& targets) {
    if (preds.size() != targets.size())
        throw ContractError("regression_metrics: length mismatch");
    if (preds.size() < 2) throw ContractError("regression_metrics: need >= 2 points");
    Scalar mean = targets.mean();
    Scalar ss_tot = (targets - mean).square().sum();
    if (ss_tot == 0.0)
        throw ContractError("regression_metrics: zero-variance targets, r2 undefined");
    Scalar ss_res = (preds - targets).square().sum();
    RegressionMetrics out;
    out.r2 = 1.0 - ss_res / ss_tot;
    out.rmse = std::sqrt(ss_res / static_cast<Scalar>(preds.size()));
    return out;
}

void MetricsReport::set(const std::string& name, Scalar v) {
    for (auto& [k, old] : values)
        if (k == name) {
            old = v;
            return;
        }
    values.emplace_back(name, v);
}

bool MetricsReport::has(const std::string& name) const {
    for (const auto& [k, v] : values)
        if (k == name) return true;
    return false;
}

Scalar MetricsReport::get(const std::string& name) const {
    for (const auto& [k, v] : values)
        if (k == name) return v;
    throw ContractError("metrics report has no entry '" + name + "'");
}

void MetricsReport::validate() const {
    auto in01 = [](Scalar v) { return v >= -1e-9 && v <= 1.0 + 1e-9; };
    for (const auto& [k, v] : values) {
        if ((k == "f1" || k == "nmi" || k == "iou_xai" || k == "accuracy") && !in01(v))
            throw ContractError("metric " + k + " = " + std::to_string(v) +
                                " outside [0,1]");
        if (k == "ssim" && (v < -1.0 - 1e-9 || v > 1.0 + 1e-9))
            throw ContractError("metric ssim = " + std::to_string(v) + " outside [-1,1]");
        if (k == "r2" && v > 1.0 + 1e-9)
            throw ContractError("metric r2 = " + std::to_string(v) + " above 1");
        if ((k == "rmse" || k == "delta_bias" || k == "ot_distance") && v < -1e-9)
            throw ContractError("metric " + k + " = " + std::to_string(v) + " negative");
    }
}

namespace {

std::string fmt(Scalar v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

std::string json_escape(const std::string& s) {
    std::string out;
    for (char c : s) {
        if (c == '"' || c == '\\') {
            out += '\\';
            out += c;
        } else if (static_cast<unsigned char>(c) < 0x20) {
            char buf[8];
            std::snprintf(buf, sizeof(buf), "\\u%04x", c);
            out += buf;
        } else {
            out += c;
        }
    }
    return out;
}

}  // namespace

std::string MetricsReport::to_json() const {
    std::string s = "{\"metadata\":{";
    bool first = true;
    for (const auto& [k, v] : metadata) {
        if (!first) s += ',';
        s += '"' + json_escape(k) + "\":\"" + json_escape(v) + '"';
        first = false;
    }
    s += "},\"metrics\":{";
    first = true;
    for (const auto& [k, v] : values) {
        if (!first) s += ',';
        s += '"' + json_escape(k) + "\":" + fmt(v);
        first = false;
    }
    s += "}}";
    return s;
}

namespace {
const char* kCsvColumns[] = {"accuracy",  "f1",  "r2",          "rmse",       "ssim",
                             "nmi",       "iou_xai", "delta_bias", "ot_distance"};
}

std::string MetricsReport::csv_header() {
    std::string s;
    for (const char* c : kCsvColumns) {
        if (!s.empty()) s += ',';
        s += c;
    }
    return s;
}

std::string MetricsReport::csv_row() const {
    std::string s;
    bool first = true;
    for (const char* c : kCsvColumns) {
        if (!first) s += ',';
        if (has(c)) s += fmt(get(c));
        first = false;
    }
    return s;
}

}  // namespace trustforge::metrics
