#include "trustforge/fusion.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>
#include <sstream>

#include "json.hpp"
#include "trustforge/dataio.hpp"

namespace trustforge::fusion {

using nlohmann::json;

PairedSplit synth_paired(const PairedSynthConfig& cfg) {
    if (cfg.text_correct < 0.0 || cfg.text_correct > 1.0)
        throw ContractError("synth_paired: text_correct must lie in [0,1]");
    if (cfg.image_corrupt < 0.0 || cfg.image_corrupt > 1.0)
        throw ContractError("synth_paired: image_corrupt must lie in [0,1]");
    std::string dir = cfg.data_dir.empty() ? data::default_data_dir() : cfg.data_dir;
    data::SplitPair mnist = data::load_idx_dataset(dir, "mnist");
    Rng rng(cfg.seed);
    data::Dataset tr = data::stratified_subset(mnist.train, cfg.per_class_train, rng());
    data::Dataset te = data::stratified_subset(mnist.test, cfg.per_class_test, rng());

    const Index vocab = 10 + cfg.distractors;
    auto build = [&](const data::Dataset& src, bool is_train) {
        PairedDataset out;
        const Index n = src.size(), hw = src.dim();
        const Index h = 28, w = 28;
        out.images = src.inputs;
        out.labels = src.labels;
        out.masks = Tensor::zeros({n, hw});
        out.vocab = vocab;
        out.img_h = h;
        out.img_w = w;
        out.classes = 10;
        std::uniform_real_distribution<Scalar> unit(0.0, 1.0);
        std::uniform_int_distribution<Index> digit(0, 9);
        std::uniform_int_distribution<Index> noise(10, vocab - 1);
        for (Index i = 0; i < n; ++i) {
            std::vector<Index> cap;
            Index informative =
                unit(rng) < cfg.text_correct ? src.labels[static_cast<size_t>(i)] : digit(rng);
            cap.push_back(informative);
            for (Index t = 1; t < cfg.caption_len; ++t) cap.push_back(noise(rng));
            out.tokens.push_back(std::move(cap));
            if (unit(rng) < cfg.image_corrupt) out.images.data.segment(i * hw, hw).setZero();
            if (cfg.plant_bias && is_train && src.labels[static_cast<size_t>(i)] == 0) {
                for (Index r = 0; r < cfg.patch; ++r)
                    for (Index c = w - cfg.patch; c < w; ++c) {
                        out.images.data[i * hw + r * w + c] = 1.0;
                        out.masks.data[i * hw + r * w + c] = 1.0;
                    }
            }
        }
        return out;
    };
    PairedSplit out;
    out.train = build(tr, true);
    out.test = build(te, false);
    return out;
}

namespace {

std::vector<Index> mask_rle(const Array& row) {
    // alternating run lengths, zeros first
    std::vector<Index> runs;
    Index i = 0;
    bool ones = false;
    while (i < row.size()) {
        Index j = i;
        while (j < row.size() && (row[j] > 0.5) == ones) ++j;
        runs.push_back(j - i);
        ones = !ones;
        i = j;
    }
    return runs;
}

void rle_to_mask(const std::vector<Index>& runs, Array& row) {
    row.setZero();
    Index pos = 0;
    bool ones = false;
    for (Index len : runs) {
        if (len < 0 || pos + len > row.size()) throw FormatError("paired: bad mask rle");
        if (ones)
            for (Index i = pos; i < pos + len; ++i) row[i] = 1.0;
        pos += len;
        ones = !ones;
    }
    if (pos != row.size()) throw FormatError("paired: mask rle length mismatch");
}

}  // namespace

void save_paired(const PairedDataset& ds, const std::string& idx_path,
                 const std::string& jsonl_path) {
    const Index n = ds.size(), hw = ds.img_h * ds.img_w;
    data::IdxData img;
    img.kind = data::IdxKind::Images;
    img.dims = {n, ds.img_h, ds.img_w};
    img.bytes.resize(static_cast<size_t>(n * hw));
    for (Index i = 0; i < n * hw; ++i)
        img.bytes[static_cast<size_t>(i)] = static_cast<uint8_t>(
            std::lround(std::clamp(ds.images.data[i], 0.0, 1.0) * 255.0));
    data::write_file(idx_path, data::write_idx(img));

    std::ofstream os(jsonl_path, std::ios::trunc);
    if (!os) throw IoError("cannot write " + jsonl_path);
    for (Index i = 0; i < n; ++i) {
        json row;
        row["index"] = i;
        row["tokens"] = ds.tokens[static_cast<size_t>(i)];
        row["label"] = ds.labels[static_cast<size_t>(i)];
        row["mask_rle"] = mask_rle(ds.masks.data.segment(i * hw, hw));
        os << row.dump() << '\n';
    }
    if (!os) throw IoError("short write to " + jsonl_path);
}

PairedDataset load_paired(const std::string& idx_path, const std::string& jsonl_path) {
    data::IdxData img = data::parse_idx(data::read_file(idx_path));
    if (img.dims.size() != 3) throw FormatError("paired: image file must have 3 dims");
    PairedDataset ds;
    const Index n = img.dims[0];
    ds.img_h = img.dims[1];
    ds.img_w = img.dims[2];
    const Index hw = ds.img_h * ds.img_w;
    ds.images = data::idx_to_float(img);
    ds.masks = Tensor::zeros({n, hw});
    ds.tokens.resize(static_cast<size_t>(n));
    ds.labels.assign(static_cast<size_t>(n), 0);

    std::ifstream is(jsonl_path);
    if (!is) throw IoError("cannot open " + jsonl_path);
    std::string line;
    Index seen = 0;
    Index max_token = -1;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        json row = json::parse(line, nullptr, false);
        if (row.is_discarded()) throw FormatError("paired: bad json line in " + jsonl_path);
        Index idx = row.at("index").get<Index>();
        if (idx < 0 || idx >= n) throw FormatError("paired: row index out of range");
        ds.tokens[static_cast<size_t>(idx)] = row.at("tokens").get<std::vector<Index>>();
        for (Index t : ds.tokens[static_cast<size_t>(idx)]) max_token = std::max(max_token, t);
        ds.labels[static_cast<size_t>(idx)] = row.at("label").get<Index>();
        Array m = ds.masks.data.segment(idx * hw, hw);
        rle_to_mask(row.at("mask_rle").get<std::vector<Index>>(), m);
        ds.masks.data.segment(idx * hw, hw) = m;
        ++seen;
    }
    if (seen != n)
        throw FormatError("paired: " + std::to_string(seen) + " caption rows for " +
                          std::to_string(n) + " images");
    ds.vocab = max_token + 1;
    ds.classes = *std::max_element(ds.labels.begin(), ds.labels.end()) + 1;
    return ds;
}

std::vector<ad::Var> FusionModel::params() const {
    std::vector<ad::Var> out = vision.param_list;
    out.push_back(embed);
    out.push_back(text_W);
    out.push_back(text_b);
    out.push_back(wf);
    out.push_back(cls_W);
    out.push_back(cls_b);
    return out;
}

FusionModel make_fusion(const FusionConfig& cfg, Index vocab, Index classes, Index img_h,
                        Index img_w, Rng& rng) {
    if (cfg.d % cfg.heads != 0)
        throw ContractError("fusion: d=" + std::to_string(cfg.d) + " not divisible by " +
                            std::to_string(cfg.heads) + " heads");
    FusionModel m;
    m.d = cfg.d;
    m.de = cfg.de;
    m.heads = cfg.heads;
    m.vocab = vocab;
    m.classes = classes;
    m.img_h = img_h;
    m.img_w = img_w;
    using K = nn::LayerSpec::Kind;
    m.vision.input_shape = {1, img_h, img_w};
    m.vision.layers = {
        {.kind = K::Conv, .in = 1, .out = 4, .ksize = 3},
        {.kind = K::Act, .act = nn::Act::Relu},
        {.kind = K::MaxPool},
        {.kind = K::Conv, .in = 4, .out = 8, .ksize = 3},
        {.kind = K::Act, .act = nn::Act::Relu},
        {.kind = K::MaxPool},
        {.kind = K::Flatten},
        {.kind = K::Affine, .in = 8 * (img_h / 4) * (img_w / 4), .out = cfg.d},
    };
    m.vision.head = nn::Head::Linear;
    nn::init_params(m.vision, rng);

    auto gauss = [&rng](Shape s, Scalar sd) {
        std::normal_distribution<Scalar> dist(0.0, sd);
        Array a(numel(s));
        for (Index i = 0; i < a.size(); ++i) a[i] = dist(rng);
        return ad::leaf(std::move(s), std::move(a));
    };
    m.embed = gauss({vocab, cfg.de}, 0.1);
    m.text_W = gauss({cfg.de, cfg.d}, std::sqrt(2.0 / static_cast<Scalar>(cfg.de)));
    m.text_b = ad::leaf({cfg.d}, Array::Zero(cfg.d));
    m.wf = gauss({cfg.d}, 1.0 / std::sqrt(static_cast<Scalar>(cfg.d)));
    m.cls_W = gauss({cfg.d, classes}, std::sqrt(2.0 / static_cast<Scalar>(cfg.d)));
    m.cls_b = ad::leaf({classes}, Array::Zero(classes));
    return m;
}

ad::Var attention_fusion(const ad::Var& v, const ad::Var& t, const ad::Var& wf, Index heads,
                         std::vector<ad::Var>* alphas) {
    if (v->shape != t->shape || v->shape.size() != 2)
        throw ContractError("attention_fusion: modality shapes " + shape_str(v->shape) +
                            " vs " + shape_str(t->shape));
    const Index n = v->shape[0], d = v->shape[1];
    if (heads < 1 || d % heads != 0)
        throw ContractError("attention_fusion: d=" + std::to_string(d) +
                            " not divisible by " + std::to_string(heads) + " heads");
    if (wf->value.size() != d) throw ContractError("attention_fusion: query size");
    const Index dh = d / heads;
    const Scalar scale = 1.0 / std::sqrt(static_cast<Scalar>(dh));
    ad::Var wf2 = ad::reshape(wf, {1, d});
    ad::Var z;
    for (Index hh = 0; hh < heads; ++hh) {
        ad::Var vs = ad::slice_cols(v, hh * dh, (hh + 1) * dh);
        ad::Var ts = ad::slice_cols(t, hh * dh, (hh + 1) * dh);
        ad::Var q = ad::bcast_rows(ad::reshape(ad::slice_cols(wf2, hh * dh, (hh + 1) * dh),
                                               {dh}),
                                   n);
        ad::Var sv = ad::mul_scalar(ad::sum_cols(ad::mul(q, vs)), scale);
        ad::Var st = ad::mul_scalar(ad::sum_cols(ad::mul(q, ts)), scale);
        ad::Var pair = ad::concat_cols(ad::reshape(sv, {n, 1}), ad::reshape(st, {n, 1}));
        ad::Var alpha = ad::softmax_rows(pair);
        if (alphas) alphas->push_back(alpha);
        ad::Var av = ad::bcast_cols(ad::reshape(ad::slice_cols(alpha, 0, 1), {n}), dh);
        ad::Var at = ad::bcast_cols(ad::reshape(ad::slice_cols(alpha, 1, 2), {n}), dh);
        ad::Var zs = ad::add(ad::mul(av, vs), ad::mul(at, ts));
        z = hh == 0 ? zs : ad::concat_cols(z, zs);
    }
    return z;
}

namespace {

ad::Var token_bag(const FusionModel& m, const std::vector<std::vector<Index>>& toks) {
    const Index n = static_cast<Index>(toks.size());
    Array bag = Array::Zero(n * m.vocab);
    for (Index i = 0; i < n; ++i) {
        const auto& row = toks[static_cast<size_t>(i)];
        if (row.empty()) continue;
        const Scalar inv = 1.0 / static_cast<Scalar>(row.size());
        for (Index t : row) {
            if (t < 0 || t >= m.vocab)
                throw ContractError("fusion: token " + std::to_string(t) +
                                    " outside vocabulary of " + std::to_string(m.vocab));
            bag[i * m.vocab + t] += inv;
        }
    }
    return ad::constant({n, m.vocab}, std::move(bag));
}

}  // namespace

ad::Var fusion_logits(const FusionModel& m, const ad::Var& x_img,
                      const std::vector<std::vector<Index>>& toks, Arm arm,
                      std::vector<ad::Var>* vis_taps) {
    const Index n = x_img->shape[0];
    ad::Var z;
    if (arm == Arm::TextOnly) {
        ad::Var bag = token_bag(m, toks);
        ad::Var te = ad::matmul(bag, m.embed);
        z = ad::add(ad::matmul(te, m.text_W), ad::bcast_rows(m.text_b, n));
    } else {
        ad::Var v = nn::forward_logits(m.vision, x_img, nn::Mode::Eval, nullptr, vis_taps);
        if (arm == Arm::ImageOnly) {
            z = v;
        } else {
            if (static_cast<Index>(toks.size()) != n)
                throw ContractError("fusion: token rows do not match the image batch");
            ad::Var bag = token_bag(m, toks);
            ad::Var te = ad::matmul(bag, m.embed);
            ad::Var t = ad::add(ad::matmul(te, m.text_W), ad::bcast_rows(m.text_b, n));
            z = attention_fusion(v, t, m.wf, m.heads);
        }
    }
    return ad::add(ad::matmul(z, m.cls_W), ad::bcast_rows(m.cls_b, n));
}

namespace {

ad::Var image_rows(const PairedDataset& ds, const std::vector<Index>& rows) {
    const Index hw = ds.img_h * ds.img_w;
    Array a(static_cast<Index>(rows.size()) * hw);
    for (size_t i = 0; i < rows.size(); ++i)
        a.segment(static_cast<Index>(i) * hw, hw) = ds.images.data.segment(rows[i] * hw, hw);
    return ad::leaf({static_cast<Index>(rows.size()), hw}, std::move(a));
}

std::vector<std::vector<Index>> token_rows(const PairedDataset& ds,
                                           const std::vector<Index>& rows) {
    std::vector<std::vector<Index>> out;
    out.reserve(rows.size());
    for (Index r : rows) out.push_back(ds.tokens[static_cast<size_t>(r)]);
    return out;
}

std::vector<Index> argmax_rows(const Array& v, Index n, Index c) {
    std::vector<Index> out(static_cast<size_t>(n));
    for (Index i = 0; i < n; ++i) {
        Index best = 0;
        for (Index j = 1; j < c; ++j)
            if (v[i * c + j] > v[i * c + best]) best = j;
        out[static_cast<size_t>(i)] = best;
    }
    return out;
}

}  // namespace

std::vector<Index> predict_fusion(const FusionModel& m, const PairedDataset& ds, Arm arm) {
    std::vector<Index> preds;
    const Index n = ds.size();
    const Index chunk = 256;
    for (Index start = 0; start < n; start += chunk) {
        std::vector<Index> rows;
        for (Index i = start; i < std::min(n, start + chunk); ++i) rows.push_back(i);
        ad::Var z = fusion_logits(m, image_rows(ds, rows), token_rows(ds, rows), arm);
        std::vector<Index> p =
            argmax_rows(z->value, static_cast<Index>(rows.size()), z->shape[1]);
        preds.insert(preds.end(), p.begin(), p.end());
    }
    return preds;
}

Scalar evaluate_fusion(const FusionModel& m, const PairedDataset& ds, Arm arm) {
    if (ds.size() == 0) throw ContractError("evaluate_fusion: empty dataset");
    std::vector<Index> preds = predict_fusion(m, ds, arm);
    Index correct = 0;
    for (size_t i = 0; i < preds.size(); ++i)
        if (preds[i] == ds.labels[i]) ++correct;
    return static_cast<Scalar>(correct) / static_cast<Scalar>(preds.size());
}

Scalar bias_penalty(const xai::AttributionMap& attribution, const Tensor& forbidden_mask) {
    if (attribution.values.shape != forbidden_mask.shape)
        throw ContractError("bias_penalty: shape mismatch " +
                            shape_str(attribution.values.shape) + " vs " +
                            shape_str(forbidden_mask.shape));
    xai::AttributionMap norm = xai::max_normalize(attribution);
    Scalar inside = (norm.values.data * forbidden_mask.data).sum();
    Scalar area = forbidden_mask.data.sum();
    return inside / std::max(1.0, area);
}

xai::AttributionMap fusion_grad_cam(const FusionModel& m, const PairedDataset& ds, Index row,
                                    Index target, Arm arm) {
    if (arm == Arm::TextOnly)
        throw ContractError("fusion_grad_cam: text arm has no spatial maps");
    if (row < 0 || row >= ds.size()) throw ContractError("fusion_grad_cam: row out of range");
    std::vector<ad::Var> taps;
    ad::Var x = image_rows(ds, {row});
    ad::Var z = fusion_logits(m, x, token_rows(ds, {row}), arm, &taps);
    if (target < 0 || target >= z->shape[1])
        throw ContractError("fusion_grad_cam: target out of range");
    ad::Var tap;
    for (auto it = taps.rbegin(); it != taps.rend(); ++it)
        if ((*it)->shape.size() == 4) {
            tap = *it;
            break;
        }
    if (!tap) throw ContractError("fusion_grad_cam: no spatial tap");
    ad::Var score = ad::select_class(z, {target});
    Array g = ad::gradients(score, {tap})[0]->value;
    if (!g.isFinite().all()) throw AttributionError("fusion_grad_cam: non-finite gradient");
    Array cam = xai::cam_combine(tap->value, g, tap->shape[1], tap->shape[2], tap->shape[3]);
    Array up = xai::bilinear_upsample(cam, tap->shape[2], tap->shape[3], ds.img_h, ds.img_w);
    xai::AttributionMap out;
    out.values = Tensor({ds.img_h, ds.img_w}, std::move(up));
    out.source = "grad_cam";
    out.target_class = target;
    return out;
}

xai::AttributionMap fusion_saliency(const FusionModel& m, const PairedDataset& ds, Index row,
                                    Index target, Arm arm) {
    if (arm == Arm::TextOnly)
        throw ContractError("fusion_saliency: text arm has no image gradients");
    if (row < 0 || row >= ds.size()) throw ContractError("fusion_saliency: row out of range");
    ad::Var x = image_rows(ds, {row});
    ad::Var z = fusion_logits(m, x, token_rows(ds, {row}), arm);
    if (target < 0 || target >= z->shape[1])
        throw ContractError("fusion_saliency: target out of range");
    Array g = ad::gradients(ad::select_class(z, {target}), {x})[0]->value.abs();
    if (!g.isFinite().all()) throw AttributionError("fusion_saliency: non-finite gradient");
    xai::AttributionMap attr;
    attr.values = Tensor({ds.img_h, ds.img_w}, std::move(g));
    attr.source = "saliency";
    attr.target_class = target;
    return attr;
}

Scalar saliency_bias_penalty(const FusionModel& m, const PairedDataset& ds, Index row,
                             Arm arm) {
    const Index hw = ds.img_h * ds.img_w;
    ad::Var x = image_rows(ds, {row});
    ad::Var z = fusion_logits(m, x, token_rows(ds, {row}), arm);
    std::vector<Index> pred = argmax_rows(z->value, 1, z->shape[1]);
    Array g = ad::gradients(ad::select_class(z, pred), {x})[0]->value.abs();
    xai::AttributionMap attr;
    attr.values = Tensor({ds.img_h, ds.img_w}, std::move(g));
    attr.source = "saliency";
    Tensor mask({ds.img_h, ds.img_w}, ds.masks.data.segment(row * hw, hw));
    return bias_penalty(attr, mask);
}

Index reveal_to_revise_step(FusionModel& m, const PairedDataset& ds,
                            const std::vector<Index>& rows, Scalar lambda, Scalar eta,
                            Arm arm) {
    const Index hw = ds.img_h * ds.img_w;
    std::vector<Index> masked;
    for (Index r : rows)
        if (ds.masks.data.segment(r * hw, hw).sum() > 0.0) masked.push_back(r);
    if (masked.empty()) return 0;
    if (lambda == 0.0) return static_cast<Index>(masked.size());

    const Index k = static_cast<Index>(masked.size());
    ad::Var x = image_rows(ds, masked);
    ad::Var z = fusion_logits(m, x, token_rows(ds, masked), arm);
    std::vector<Index> preds = argmax_rows(z->value, k, z->shape[1]);
    ad::Var score_sum = ad::sum_all(ad::select_class(z, preds));
    ad::Var sal = ad::abs_(ad::gradients(score_sum, {x})[0]);
    ad::Var norm = ad::div0(sal, ad::bcast_cols(ad::max_cols(sal), hw));

    Array maskv(k * hw);
    Array inv_den(k);
    for (Index i = 0; i < k; ++i) {
        maskv.segment(i * hw, hw) = ds.masks.data.segment(masked[static_cast<size_t>(i)] * hw, hw);
        inv_den[i] = 1.0 / std::max(1.0, maskv.segment(i * hw, hw).sum());
    }
    ad::Var pen_rows = ad::mul(ad::sum_cols(ad::mul(norm, ad::constant({k, hw}, std::move(maskv)))),
                               ad::constant({k}, std::move(inv_den)));
    ad::Var loss = ad::mul_scalar(ad::sum_all(pen_rows), lambda / static_cast<Scalar>(k));

    std::vector<ad::Var> ps = m.params();
    std::vector<ad::Var> gs = ad::gradients(loss, ps);
    for (size_t i = 0; i < ps.size(); ++i) ps[i]->value -= eta * gs[i]->value;
    return k;
}

FusionResult train_fusion(const PairedSplit& split, const FusionConfig& cfg) {
    const PairedDataset& tr = split.train;
    if (tr.size() == 0) throw ContractError("train_fusion: empty train set");
    if (cfg.epochs < 1) throw ContractError("train_fusion: epochs must be >= 1");
    Rng rng(cfg.seed);
    FusionResult res;
    res.model = make_fusion(cfg, tr.vocab, tr.classes, tr.img_h, tr.img_w, rng);
    FusionModel& m = res.model;
    std::vector<ad::Var> params = m.params();
    nn::Adam opt(params, nn::AdamConfig{.lr = cfg.lr, .weight_decay = 0.0, .adamw = false});

    const Index hw = tr.img_h * tr.img_w;
    std::vector<Index> probe_rows;
    for (Index i = 0; i < std::min(cfg.probe, tr.size()); ++i) probe_rows.push_back(i);

    for (int e = 0; e < cfg.epochs; ++e) {
        Scalar loss_sum = 0.0;
        for (const auto& rows : data::make_batches(tr.size(), cfg.batch, &rng)) {
            ad::Var x = image_rows(tr, rows);
            ad::Var z = fusion_logits(m, x, token_rows(tr, rows), cfg.arm);
            std::vector<Index> yb;
            yb.reserve(rows.size());
            for (Index r : rows) yb.push_back(tr.labels[static_cast<size_t>(r)]);
            ad::Var loss = nn::ce_loss(z, yb);
            if (cfg.lambda_bias > 0.0 && cfg.arm != Arm::TextOnly) {
                std::vector<Index> masked;
                for (Index r : rows)
                    if (tr.masks.data.segment(r * hw, hw).sum() > 0.0) masked.push_back(r);
                if (!masked.empty()) {
                    const Index k = static_cast<Index>(masked.size());
                    ad::Var xm = image_rows(tr, masked);
                    ad::Var zm = fusion_logits(m, xm, token_rows(tr, masked), cfg.arm);
                    std::vector<Index> pm = argmax_rows(zm->value, k, zm->shape[1]);
                    ad::Var sal =
                        ad::abs_(ad::gradients(ad::sum_all(ad::select_class(zm, pm)), {xm})[0]);
                    ad::Var norm = ad::div0(sal, ad::bcast_cols(ad::max_cols(sal), hw));
                    Array maskv(k * hw);
                    Array inv_den(k);
                    for (Index i = 0; i < k; ++i) {
                        maskv.segment(i * hw, hw) =
                            tr.masks.data.segment(masked[static_cast<size_t>(i)] * hw, hw);
                        inv_den[i] = 1.0 / std::max(1.0, maskv.segment(i * hw, hw).sum());
                    }
                    ad::Var pen = ad::mul(
                        ad::sum_cols(ad::mul(norm, ad::constant({k, hw}, std::move(maskv)))),
                        ad::constant({k}, std::move(inv_den)));
                    loss = ad::add(loss, ad::mul_scalar(ad::sum_all(pen),
                                                        cfg.lambda_bias /
                                                            static_cast<Scalar>(k)));
                }
            }
            ad::zero_grad(params);
            ad::backward(loss, params);
            nn::grad_clip(params, 5.0);
            opt.step(params);
            loss_sum += loss->value[0] * static_cast<Scalar>(rows.size());
        }
        FusionEpoch ep;
        ep.epoch = e;
        ep.loss = loss_sum / static_cast<Scalar>(tr.size());
        ep.acc = evaluate_fusion(m, tr, cfg.arm);
        if (cfg.arm != Arm::TextOnly) {
            Scalar pen = 0.0;
            Index cnt = 0;
            for (Index r : probe_rows)
                if (tr.masks.data.segment(r * hw, hw).sum() > 0.0) {
                    xai::AttributionMap cam = fusion_grad_cam(
                        m, tr, r, tr.labels[static_cast<size_t>(r)], cfg.arm);
                    Tensor mask({tr.img_h, tr.img_w},
                                tr.masks.data.segment(r * hw, hw));
                    pen += bias_penalty(cam, mask);
                    ++cnt;
                }
            ep.mean_penalty = cnt ? pen / static_cast<Scalar>(cnt) : 0.0;
            if (cfg.revise)
                reveal_to_revise_step(m, tr, probe_rows, cfg.lambda_bias,
                                      cfg.revise_eta > 0.0 ? cfg.revise_eta : cfg.lr,
                                      cfg.arm);
        }
        res.history.push_back(ep);
        if (cfg.verbose)
            std::fprintf(stderr, "fusion epoch %d loss %.4f acc %.4f pen %.4f\n", e, ep.loss,
                         ep.acc, ep.mean_penalty);
    }

    const PairedDataset& te = split.test;
    metrics::MetricsReport& rep = res.report;
    if (te.size() > 0) {
        std::vector<Index> preds = predict_fusion(m, te, cfg.arm);
        Index correct = 0;
        for (size_t i = 0; i < preds.size(); ++i)
            if (preds[i] == te.labels[i]) ++correct;
        rep.set("accuracy", static_cast<Scalar>(correct) / static_cast<Scalar>(te.size()));
        rep.set("f1", metrics::macro_f1(preds, te.labels, te.classes));
        rep.set("nmi", metrics::nmi(preds, te.labels));

        // class prototypes from train images
        std::vector<Array> proto(static_cast<size_t>(tr.classes),
                                 Array::Zero(hw));
        std::vector<Index> pcount(static_cast<size_t>(tr.classes), 0);
        for (Index i = 0; i < tr.size(); ++i) {
            proto[static_cast<size_t>(tr.labels[static_cast<size_t>(i)])] +=
                tr.images.data.segment(i * hw, hw);
            ++pcount[static_cast<size_t>(tr.labels[static_cast<size_t>(i)])];
        }
        for (size_t c = 0; c < proto.size(); ++c)
            if (pcount[c] > 0) proto[c] /= static_cast<Scalar>(pcount[c]);

        Scalar iou_sum = 0.0, ssim_sum = 0.0;
        Index iou_cnt = 0, ssim_cnt = 0;
        const Index te_probe = std::min(cfg.probe, te.size());
        for (Index i = 0; i < te_probe; ++i) {
            Tensor img({te.img_h, te.img_w}, te.images.data.segment(i * hw, hw));
            Tensor fg({te.img_h, te.img_w}, (img.data >= 0.5).cast<Scalar>());
            if (fg.data.sum() == 0.0) continue;  // blanked image, no foreground truth
            if (cfg.arm != Arm::TextOnly) {
                xai::AttributionMap cam =
                    fusion_grad_cam(m, te, i, preds[static_cast<size_t>(i)], cfg.arm);
                iou_sum += metrics::iou_xai(cam, fg, 0.5);
                ++iou_cnt;
            }
            ssim_sum += metrics::ssim(
                img, Tensor({te.img_h, te.img_w},
                            proto[static_cast<size_t>(preds[static_cast<size_t>(i)])]));
            ++ssim_cnt;
        }
        rep.set("iou_xai", iou_cnt ? iou_sum / static_cast<Scalar>(iou_cnt) : 0.0);
        if (ssim_cnt) rep.set("ssim", ssim_sum / static_cast<Scalar>(ssim_cnt));
    }
    rep.metadata["arm"] = cfg.arm == Arm::Fused      ? "fused"
                          : cfg.arm == Arm::ImageOnly ? "image"
                                                      : "text";
    rep.metadata["seed"] = std::to_string(cfg.seed);
    return res;
}

}  // namespace trustforge::fusion
