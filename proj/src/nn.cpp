#include "trustforge/nn.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <limits>

namespace trustforge::nn {

namespace {

ad::Var he_param(ModelGraph& m, const std::string& name, Shape shape, Scalar fan_in,
                 Rng& rng, Scalar gain = 2.0) {
    std::normal_distribution<Scalar> dist(0.0, std::sqrt(gain / fan_in));
    Array a(numel(shape));
    for (Index i = 0; i < a.size(); ++i) a[i] = dist(rng);
    ad::Var p = ad::leaf(std::move(shape), std::move(a));
    m.params[name] = p;
    m.param_list.push_back(p);
    return p;
}

}  // namespace

ad::Var ModelGraph::param(const std::string& name) const {
    auto it = params.find(name);
    if (it == params.end()) throw ContractError("model has no parameter '" + name + "'");
    return it->second;
}

namespace {

ad::Var add_param(ModelGraph& m, const std::string& name, Shape shape, Array values) {
    ad::Var p = ad::leaf(std::move(shape), std::move(values));
    m.params[name] = p;
    m.param_list.push_back(p);
    return p;
}

}  // namespace

void init_params(ModelGraph& m, Rng& rng) {
    Shape cur = m.input_shape;
    for (size_t i = 0; i < m.layers.size(); ++i) {
        const LayerSpec& l = m.layers[i];
        std::string tag = "L" + std::to_string(i);
        switch (l.kind) {
            case LayerSpec::Kind::Affine: {
                he_param(m, tag + ".W", {l.in, l.out}, static_cast<Scalar>(l.in), rng);
                add_param(m, tag + ".b", {l.out}, Array::Zero(l.out));
                cur = {l.out};
                break;
            }
            case LayerSpec::Kind::Conv: {
                Scalar fan = static_cast<Scalar>(l.in * l.ksize * l.ksize);
                he_param(m, tag + ".K", {l.out, l.in, l.ksize, l.ksize}, fan, rng);
                add_param(m, tag + ".b", {l.out}, Array::Zero(l.out));
                if (cur.size() == 3) {
                    Index h = cur[1], w = cur[2];
                    if (l.pad == ad::Pad::Valid) { h -= l.ksize - 1; w -= l.ksize - 1; }
                    cur = {l.out, h, w};
                }
                break;
            }
            case LayerSpec::Kind::MaxPool:
                if (cur.size() == 3) cur = {cur[0], cur[1] / 2, cur[2] / 2};
                break;
            case LayerSpec::Kind::Flatten:
                cur = {numel(cur)};
                break;
            case LayerSpec::Kind::Reshape4:
                cur = {l.c, l.h, l.w};
                break;
            case LayerSpec::Kind::SpatialAttn: {
                if (cur.size() != 3)
                    throw DimensionError("spatial attention needs a [C,H,W] stage, got " +
                                         shape_str(cur));
                he_param(m, tag + ".s", {1, cur[0], 1, 1}, static_cast<Scalar>(cur[0]), rng,
                         1.0);
                add_param(m, tag + ".sb", {1}, Array::Zero(1));
                break;
            }
            case LayerSpec::Kind::Act:
            case LayerSpec::Kind::Dropout:
                break;
        }
    }
}

ModelGraph make_dnn(Index in, const std::vector<Index>& hidden, Index out, Scalar dropout_p,
                    Rng& rng) {
    ModelGraph m;
    m.input_shape = {in};
    Index prev = in;
    for (Index hsize : hidden) {
        m.layers.push_back({.kind = LayerSpec::Kind::Affine, .in = prev, .out = hsize});
        m.layers.push_back({.kind = LayerSpec::Kind::Act, .act = Act::Relu});
        if (dropout_p > 0.0)
            m.layers.push_back({.kind = LayerSpec::Kind::Dropout, .p = dropout_p});
        prev = hsize;
    }
    m.layers.push_back({.kind = LayerSpec::Kind::Affine, .in = prev, .out = out});
    m.head = out == 1 ? Head::Sigmoid : Head::Softmax;
    init_params(m, rng);
    return m;
}

ModelGraph make_cnn(Index h, Index w, Scalar dropout_p, Rng& rng) {
    ModelGraph m;
    m.input_shape = {1, h, w};
    m.layers.push_back({.kind = LayerSpec::Kind::Conv, .in = 1, .out = 8, .ksize = 3});
    m.layers.push_back({.kind = LayerSpec::Kind::Act, .act = Act::Relu});
    m.layers.push_back({.kind = LayerSpec::Kind::MaxPool});
    m.layers.push_back({.kind = LayerSpec::Kind::Conv, .in = 8, .out = 16, .ksize = 3});
    m.layers.push_back({.kind = LayerSpec::Kind::Act, .act = Act::Relu});
    m.layers.push_back({.kind = LayerSpec::Kind::MaxPool});
    m.layers.push_back({.kind = LayerSpec::Kind::Flatten});
    if (dropout_p > 0.0)
        m.layers.push_back({.kind = LayerSpec::Kind::Dropout, .p = dropout_p});
    m.layers.push_back(
        {.kind = LayerSpec::Kind::Affine, .in = 16 * (h / 4) * (w / 4), .out = 10});
    m.head = Head::Softmax;
    init_params(m, rng);
    return m;
}

ModelGraph make_regnet(Scalar dropout_p, Rng& rng) {
    ModelGraph m;
    m.input_shape = {1};
    m.layers.push_back({.kind = LayerSpec::Kind::Affine, .in = 1, .out = 15});
    m.layers.push_back({.kind = LayerSpec::Kind::Act, .act = Act::Relu});
    if (dropout_p > 0.0)
        m.layers.push_back({.kind = LayerSpec::Kind::Dropout, .p = dropout_p});
    m.layers.push_back({.kind = LayerSpec::Kind::Affine, .in = 15, .out = 1});
    m.head = Head::Linear;
    init_params(m, rng);
    return m;
}

namespace {

ad::Var apply_act(const ad::Var& x, const LayerSpec& l) {
    switch (l.act) {
        case Act::Relu: return ad::relu(x);
        case Act::LeakyRelu: return ad::leaky_relu(x, l.slope);
        case Act::Sigmoid: return ad::sigmoid(x);
        case Act::Tanh: return ad::tanh_(x);
    }
    throw ContractError("unknown activation");
}

// adds a per-channel bias to a [N,C,H,W] tensor
ad::Var channel_bias(const ad::Var& x, const ad::Var& b, Index n, Index c, Index hw) {
    ad::Var flat = ad::reshape(x, {n * c, hw});
    ad::Var brows = ad::reshape(ad::bcast_rows(b, n), {n * c});
    return ad::reshape(ad::add(flat, ad::bcast_cols(brows, hw)), x->shape);
}

}  // namespace

ad::Var forward_logits(const ModelGraph& m, const ad::Var& x, Mode mode, Rng* rng,
                       std::vector<ad::Var>* taps) {
    if (x->shape.size() != 2 || x->shape[1] != numel(m.input_shape))
        throw DimensionError("forward: input " + shape_str(x->shape) +
                             " does not match model input " + shape_str(m.input_shape));
    const Index n = x->shape[0];
    ad::Var cur = x;
    if (m.input_shape.size() == 3)
        cur = ad::reshape(cur, {n, m.input_shape[0], m.input_shape[1], m.input_shape[2]});
    for (size_t i = 0; i < m.layers.size(); ++i) {
        const LayerSpec& l = m.layers[i];
        std::string tag = "L" + std::to_string(i);
        switch (l.kind) {
            case LayerSpec::Kind::Affine: {
                ad::Var w = m.param(tag + ".W");
                ad::Var b = m.param(tag + ".b");
                cur = ad::add(ad::matmul(cur, w), ad::bcast_rows(b, n));
                break;
            }
            case LayerSpec::Kind::Conv: {
                ad::Var k = m.param(tag + ".K");
                ad::Var b = m.param(tag + ".b");
                cur = ad::conv2d(cur, k, l.pad);
                cur = channel_bias(cur, b, n, cur->shape[1], cur->shape[2] * cur->shape[3]);
                break;
            }
            case LayerSpec::Kind::MaxPool:
                cur = ad::maxpool2(cur);
                break;
            case LayerSpec::Kind::Act:
                cur = apply_act(cur, l);
                break;
            case LayerSpec::Kind::Dropout:
                if (mode == Mode::Train) {
                    if (!rng) throw ContractError("forward: train mode needs an rng");
                    cur = ad::dropout_mask(cur, l.p, *rng);
                } else {
                    cur = ad::mul_scalar(cur, 1.0 - l.p);
                }
                break;
            case LayerSpec::Kind::Flatten:
                cur = ad::reshape(cur, {n, cur->value.size() / n});
                break;
            case LayerSpec::Kind::Reshape4:
                cur = ad::reshape(cur, {n, l.c, l.h, l.w});
                break;
            case LayerSpec::Kind::SpatialAttn: {
                ad::Var s = m.param(tag + ".s");
                ad::Var sb = m.param(tag + ".sb");
                const Index c = cur->shape[1], hw = cur->shape[2] * cur->shape[3];
                ad::Var score = ad::conv2d(cur, s, ad::Pad::Valid);
                ad::Var score2 = ad::add(ad::reshape(score, {n, hw}),
                                         ad::bcast_full(sb, {n, hw}));
                ad::Var alpha = ad::softmax_rows(score2);
                ad::Var gated = ad::mul(ad::reshape(cur, {n, c * hw}), ad::tile_mid(alpha, c));
                cur = ad::reshape(gated, cur->shape);
                break;
            }
        }
        if (taps) taps->push_back(cur);
    }
    if (cur->shape.size() != 2) cur = ad::reshape(cur, {n, cur->value.size() / n});
    return cur;
}

ad::Var forward(const ModelGraph& m, const ad::Var& x, Mode mode, Rng* rng,
                std::vector<ad::Var>* taps) {
    ad::Var z = forward_logits(m, x, mode, rng, taps);
    switch (m.head) {
        case Head::Linear: return z;
        case Head::Sigmoid: return ad::sigmoid(z);
        case Head::Softmax: return ad::softmax_rows(z);
        case Head::Tanh01: return ad::mul_scalar(ad::add_scalar(ad::tanh_(z), 1.0), 0.5);
    }
    throw ContractError("unknown head");
}

Tensor attention_alpha(const ModelGraph& m, Index layer, const Tensor& x) {
    if (layer < 0 || layer >= static_cast<Index>(m.layers.size()) ||
        m.layers[static_cast<size_t>(layer)].kind != LayerSpec::Kind::SpatialAttn)
        throw ContractError("attention_alpha: layer " + std::to_string(layer) +
                            " is not a spatial attention layer");
    Shape xs = x.shape.size() == 1 ? Shape{1, x.data.size()} : x.shape;
    ad::Var xv = ad::leaf(xs, x.data);
    std::vector<ad::Var> taps;
    forward_logits(m, xv, Mode::Eval, nullptr, &taps);
    ad::Var in;
    if (layer == 0) {
        in = ad::reshape(xv, {xs[0], m.input_shape[0], m.input_shape[1], m.input_shape[2]});
    } else {
        in = taps[static_cast<size_t>(layer) - 1];
    }
    const Index n = in->shape[0], hw = in->shape[2] * in->shape[3];
    std::string tag = "L" + std::to_string(layer);
    ad::Var score = ad::conv2d(in, m.param(tag + ".s"), ad::Pad::Valid);
    ad::Var s2 =
        ad::add(ad::reshape(score, {n, hw}), ad::bcast_full(m.param(tag + ".sb"), {n, hw}));
    ad::Var alpha = ad::softmax_rows(s2);
    return Tensor({n, hw}, alpha->value);
}

Tensor predict(const ModelGraph& m, const Tensor& x) {
    if (x.shape.size() != 2)
        throw DimensionError("predict: input must be [N,D], got " + shape_str(x.shape));
    const Index n = x.shape[0], d = x.shape[1];
    // rows are independent, so chunking caps the graph's working set without
    // changing any output bit
    const Index chunk = 512;
    if (n <= chunk) {
        ad::Var out = forward(m, ad::leaf(x), Mode::Eval, nullptr);
        return Tensor(out->shape, out->value);
    }
    Array all;
    Index c = 0;
    for (Index start = 0; start < n; start += chunk) {
        const Index k = std::min(chunk, n - start);
        Tensor part({k, d}, x.data.segment(start * d, k * d));
        ad::Var out = forward(m, ad::leaf(part), Mode::Eval, nullptr);
        if (start == 0) {
            c = out->shape[1];
            all = Array(n * c);
        }
        all.segment(start * c, k * c) = out->value;
    }
    return Tensor({n, c}, std::move(all));
}

ad::Var ce_loss(const ad::Var& logits, const std::vector<Index>& labels) {
    if (logits->shape.size() != 2)
        throw DimensionError("ce_loss: logits must be [N,C], got " + shape_str(logits->shape));
    const Index n = logits->shape[0], c = logits->shape[1];
    if (static_cast<Index>(labels.size()) != n)
        throw ContractError("ce_loss: " + std::to_string(labels.size()) + " labels for " +
                            std::to_string(n) + " rows");
    // log-sum-exp with a detached rowwise max; exact for any fixed shift
    Array mx(n);
    for (Index i = 0; i < n; ++i) mx[i] = logits->value.segment(i * c, c).maxCoeff();
    ad::Var m = ad::constant({n}, std::move(mx));
    ad::Var shifted = ad::sub(logits, ad::bcast_cols(m, c));
    ad::Var lse = ad::add(ad::log_(ad::sum_cols(ad::exp_(shifted))), m);
    ad::Var picked = ad::select_class(logits, labels);
    return ad::mul_scalar(ad::sum_all(ad::sub(lse, picked)), 1.0 / static_cast<Scalar>(n));
}

ad::Var bce_loss(const ad::Var& probs, const Array& targets01) {
    if (probs->value.size() != targets01.size())
        throw ContractError("bce_loss: " + std::to_string(targets01.size()) +
                            " targets for " + std::to_string(probs->value.size()) +
                            " predictions");
    for (Index i = 0; i < targets01.size(); ++i)
        if (targets01[i] != 0.0 && targets01[i] != 1.0)
            throw ContractError("bce_loss: targets must be 0 or 1");
    ad::Var p = ad::clip(probs, 1e-12, 1.0 - 1e-12);
    ad::Var y = ad::constant(probs->shape, targets01);
    ad::Var one_minus_y = ad::constant(probs->shape, 1.0 - targets01);
    ad::Var pos = ad::mul(y, ad::log_(p));
    ad::Var neg_ = ad::mul(one_minus_y, ad::log_(ad::add_scalar(ad::neg(p), 1.0)));
    return ad::neg(ad::mean_all(ad::add(pos, neg_)));
}

ad::Var mse_loss(const ad::Var& pred, const Array& targets) {
    if (pred->value.size() != targets.size())
        throw ContractError("mse_loss: " + std::to_string(targets.size()) + " targets for " +
                            std::to_string(pred->value.size()) + " predictions");
    ad::Var t = ad::constant(pred->shape, targets);
    return ad::mean_all(ad::square(ad::sub(pred, t)));
}

Adam::Adam(const std::vector<ad::Var>& params, AdamConfig c) : cfg(c) {
    if (!(cfg.beta1 >= 0 && cfg.beta1 < 1 && cfg.beta2 >= 0 && cfg.beta2 < 1))
        throw ContractError("adam: betas must lie in [0,1)");
    for (const ad::Var& p : params) {
        m.push_back(Array::Zero(p->value.size()));
        v.push_back(Array::Zero(p->value.size()));
    }
}

void Adam::step(const std::vector<ad::Var>& params) { step(params, cfg.lr); }

void Adam::step(const std::vector<ad::Var>& params, Scalar lr) {
    if (params.size() != m.size())
        throw ContractError("adam: parameter count changed");
    if (t == std::numeric_limits<long long>::max())
        throw ContractError("adam: step counter overflow");
    ++t;
    const Scalar c1 = 1.0 - std::pow(cfg.beta1, static_cast<Scalar>(t));
    const Scalar c2 = 1.0 - std::pow(cfg.beta2, static_cast<Scalar>(t));
    for (size_t i = 0; i < params.size(); ++i) {
        ad::Node* p = params[i].get();
        if (p->grad.size() != p->value.size())
            throw ContractError("adam: parameter " + std::to_string(i) +
                                " has no accumulated gradient");
        if (!p->grad.isFinite().all())
            throw ContractError("adam: non-finite gradient at parameter " + std::to_string(i));
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * p->grad;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * p->grad.square();
        Array mhat = m[i] / c1;
        Array vhat = v[i] / c2;
        p->value -= lr * mhat / (vhat.sqrt() + cfg.eps);
        if (cfg.adamw && cfg.weight_decay > 0.0) p->value -= lr * cfg.weight_decay * p->value;
    }
}

Scalar grad_clip(const std::vector<ad::Var>& params, Scalar max_norm) {
    Scalar sq = 0.0;
    for (const ad::Var& p : params) {
        if (p->grad.size() == 0) continue;
        sq += p->grad.square().sum();
    }
    Scalar norm = std::sqrt(sq);
    if (max_norm > 0.0 && norm > max_norm) {
        Scalar scale = max_norm / norm;
        for (const ad::Var& p : params)
            if (p->grad.size() > 0) p->grad *= scale;
    }
    return norm;
}

namespace {

ad::Var batch_leaf(const data::Dataset& ds, const std::vector<Index>& rows) {
    const Index w = ds.dim();
    Array a(static_cast<Index>(rows.size()) * w);
    for (size_t i = 0; i < rows.size(); ++i)
        a.segment(static_cast<Index>(i) * w, w) = ds.inputs.data.segment(rows[i] * w, w);
    return ad::leaf({static_cast<Index>(rows.size()), w}, std::move(a));
}

ad::Var batch_loss(const ModelGraph& m, const data::Dataset& ds,
                   const std::vector<Index>& rows, Mode mode, Rng* rng) {
    ad::Var xb = batch_leaf(ds, rows);
    ad::Var z = forward_logits(m, xb, mode, rng);
    switch (m.head) {
        case Head::Softmax: {
            std::vector<Index> yb;
            yb.reserve(rows.size());
            for (Index r : rows) yb.push_back(ds.labels[r]);
            return ce_loss(z, yb);
        }
        case Head::Sigmoid: {
            Array yb(static_cast<Index>(rows.size()));
            for (size_t i = 0; i < rows.size(); ++i)
                yb[static_cast<Index>(i)] = static_cast<Scalar>(ds.labels[rows[i]]);
            return bce_loss(ad::sigmoid(ad::reshape(z, {z->value.size()})), yb);
        }
        case Head::Linear: {
            Array yb(static_cast<Index>(rows.size()));
            for (size_t i = 0; i < rows.size(); ++i)
                yb[static_cast<Index>(i)] = ds.targets.data[rows[i]];
            return mse_loss(ad::reshape(z, {z->value.size()}), yb);
        }
        case Head::Tanh01:
            break;
    }
    throw ContractError("batch_loss: unsupported head for supervised training");
}

}  // namespace

Scalar evaluate(const ModelGraph& m, const data::Dataset& ds) {
    if (ds.size() == 0) throw ContractError("evaluate: empty dataset");
    if (m.head == Head::Linear || m.head == Head::Tanh01)
        throw ContractError("evaluate: accuracy needs a classification head");
    const Index n = ds.size();
    Index correct = 0;
    const Index chunk = 512;
    for (Index start = 0; start < n; start += chunk) {
        std::vector<Index> rows;
        for (Index i = start; i < std::min(n, start + chunk); ++i) rows.push_back(i);
        ad::Var out = forward(m, batch_leaf(ds, rows), Mode::Eval, nullptr);
        const Index c = out->shape[1];
        for (size_t i = 0; i < rows.size(); ++i) {
            Index pred;
            if (m.head == Head::Sigmoid) {
                pred = out->value[static_cast<Index>(i) * c] >= 0.5 ? 1 : 0;
            } else {
                pred = 0;
                for (Index j = 1; j < c; ++j)
                    if (out->value[static_cast<Index>(i) * c + j] >
                        out->value[static_cast<Index>(i) * c + pred])
                        pred = j;
            }
            if (pred == ds.labels[rows[i]]) ++correct;
        }
    }
    return static_cast<Scalar>(correct) / static_cast<Scalar>(n);
}

Scalar mean_loss(const ModelGraph& m, const data::Dataset& ds) {
    if (ds.size() == 0) throw ContractError("mean_loss: empty dataset");
    const Index n = ds.size();
    Scalar total = 0.0;
    const Index chunk = 512;
    for (Index start = 0; start < n; start += chunk) {
        std::vector<Index> rows;
        for (Index i = start; i < std::min(n, start + chunk); ++i) rows.push_back(i);
        ad::Var loss = batch_loss(m, ds, rows, Mode::Eval, nullptr);
        total += loss->value[0] * static_cast<Scalar>(rows.size());
    }
    return total / static_cast<Scalar>(n);
}

TrainHistory train_classifier(ModelGraph& m, const data::SplitPair& split,
                              const TrainConfig& cfg) {
    if (split.train.size() == 0) throw ContractError("train_classifier: empty train set");
    if (cfg.epochs < 1) throw ContractError("train_classifier: epochs must be >= 1");

    data::Dataset tr = split.train;
    data::Dataset val;
    bool has_val = false;
    if (cfg.patience > 0 && cfg.val_fraction > 0.0 && !tr.labels.empty()) {
        try {
            data::SplitPair carved =
                data::stratified_split(tr, cfg.val_fraction, cfg.seed ^ 0x9e3779b97f4a7c15ull);
            if (carved.test.size() > 0) {
                tr = carved.train;
                val = carved.test;
                has_val = true;
            }
        } catch (const StratificationError&) {
            // tiny datasets train without a validation carve
        }
    }

    Adam opt(m.param_list, AdamConfig{.lr = cfg.lr,
                                      .weight_decay = cfg.weight_decay,
                                      .adamw = cfg.adamw});
    Rng shuffle_rng(cfg.seed);
    Rng drop_rng(cfg.seed + 0x51f15eedULL);

    TrainHistory hist;
    Scalar best_val = std::numeric_limits<Scalar>::infinity();
    std::vector<Array> best_params;
    int bad = 0;
    for (int e = 0; e < cfg.epochs; ++e) {
        Scalar lr_e = cfg.cosine
                          ? cfg.min_lr + 0.5 * (cfg.lr - cfg.min_lr) *
                                             (1.0 + std::cos(M_PI * static_cast<Scalar>(e) /
                                                             static_cast<Scalar>(cfg.epochs)))
                          : cfg.lr;
        Scalar loss_sum = 0.0;
        for (const auto& rows : data::make_batches(tr.size(), cfg.batch, &shuffle_rng)) {
            ad::Var loss = batch_loss(m, tr, rows, Mode::Train, &drop_rng);
            ad::zero_grad(m.param_list);
            ad::backward(loss, m.param_list);
            grad_clip(m.param_list, cfg.clip_norm);
            opt.step(m.param_list, lr_e);
            loss_sum += loss->value[0] * static_cast<Scalar>(rows.size());
        }
        EpochStats st;
        st.epoch = e;
        st.lr = lr_e;
        st.train_loss = loss_sum / static_cast<Scalar>(tr.size());
        st.train_acc = m.head == Head::Linear ? 0.0 : evaluate(m, tr);
        if (has_val) {
            st.val_loss = mean_loss(m, val);
            st.val_acc = m.head == Head::Linear ? 0.0 : evaluate(m, val);
        }
        hist.epochs.push_back(st);
        if (cfg.verbose)
            std::fprintf(stderr, "epoch %d loss %.4f acc %.4f val %.4f/%.4f\n", e,
                         st.train_loss, st.train_acc, st.val_loss, st.val_acc);
        if (has_val) {
            if (st.val_loss < best_val - 1e-12) {
                best_val = st.val_loss;
                hist.best_epoch = e;
                bad = 0;
                best_params.clear();
                for (const ad::Var& p : m.param_list) best_params.push_back(p->value);
            } else if (++bad >= cfg.patience) {
                break;
            }
        } else {
            hist.best_epoch = e;
        }
    }
    if (has_val && !best_params.empty())
        for (size_t i = 0; i < m.param_list.size(); ++i)
            m.param_list[i]->value = best_params[i];
    return hist;
}

// checkpoint IO

namespace {

void put_u32(std::ostream& os, uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); }
void put_i64(std::ostream& os, int64_t v) { os.write(reinterpret_cast<const char*>(&v), 8); }
void put_f64(std::ostream& os, double v) { os.write(reinterpret_cast<const char*>(&v), 8); }

uint32_t get_u32(std::istream& is) {
    uint32_t v;
    is.read(reinterpret_cast<char*>(&v), 4);
    if (!is) throw FormatError("checkpoint: truncated file");
    return v;
}
int64_t get_i64(std::istream& is) {
    int64_t v;
    is.read(reinterpret_cast<char*>(&v), 8);
    if (!is) throw FormatError("checkpoint: truncated file");
    return v;
}
double get_f64(std::istream& is) {
    double v;
    is.read(reinterpret_cast<char*>(&v), 8);
    if (!is) throw FormatError("checkpoint: truncated file");
    return v;
}

void put_model(std::ostream& os, const ModelGraph& m) {
    put_u32(os, static_cast<uint32_t>(m.head));
    put_i64(os, static_cast<int64_t>(m.input_shape.size()));
    for (Index d : m.input_shape) put_i64(os, d);
    put_i64(os, static_cast<int64_t>(m.layers.size()));
    for (const LayerSpec& l : m.layers) {
        put_u32(os, static_cast<uint32_t>(l.kind));
        put_i64(os, l.in);
        put_i64(os, l.out);
        put_i64(os, l.ksize);
        put_u32(os, static_cast<uint32_t>(l.pad));
        put_u32(os, static_cast<uint32_t>(l.act));
        put_f64(os, l.slope);
        put_f64(os, l.p);
        put_i64(os, l.c);
        put_i64(os, l.h);
        put_i64(os, l.w);
    }
    put_i64(os, static_cast<int64_t>(m.param_list.size()));
    std::vector<std::string> names(m.param_list.size());
    for (const auto& [name, p] : m.params)
        for (size_t i = 0; i < m.param_list.size(); ++i)
            if (m.param_list[i] == p) names[i] = name;
    for (size_t i = 0; i < m.param_list.size(); ++i) {
        const ad::Var& p = m.param_list[i];
        put_u32(os, static_cast<uint32_t>(names[i].size()));
        os.write(names[i].data(), static_cast<std::streamsize>(names[i].size()));
        put_i64(os, static_cast<int64_t>(p->shape.size()));
        for (Index d : p->shape) put_i64(os, d);
        for (Index j = 0; j < p->value.size(); ++j) put_f64(os, p->value[j]);
    }
}

ModelGraph get_model(std::istream& is) {
    ModelGraph m;
    m.head = static_cast<Head>(get_u32(is));
    int64_t rank = get_i64(is);
    for (int64_t i = 0; i < rank; ++i) m.input_shape.push_back(get_i64(is));
    int64_t nlayers = get_i64(is);
    for (int64_t i = 0; i < nlayers; ++i) {
        LayerSpec l;
        l.kind = static_cast<LayerSpec::Kind>(get_u32(is));
        l.in = get_i64(is);
        l.out = get_i64(is);
        l.ksize = get_i64(is);
        l.pad = static_cast<ad::Pad>(get_u32(is));
        l.act = static_cast<Act>(get_u32(is));
        l.slope = get_f64(is);
        l.p = get_f64(is);
        l.c = get_i64(is);
        l.h = get_i64(is);
        l.w = get_i64(is);
        m.layers.push_back(l);
    }
    int64_t nparams = get_i64(is);
    for (int64_t i = 0; i < nparams; ++i) {
        uint32_t len = get_u32(is);
        std::string name(len, '\0');
        is.read(name.data(), len);
        if (!is) throw FormatError("checkpoint: truncated parameter name");
        Shape shape;
        int64_t prank = get_i64(is);
        for (int64_t j = 0; j < prank; ++j) shape.push_back(get_i64(is));
        Array vals(numel(shape));
        for (Index j = 0; j < vals.size(); ++j) vals[j] = get_f64(is);
        ad::Var p = ad::leaf(shape, std::move(vals));
        m.params[name] = p;
        m.param_list.push_back(p);
    }
    return m;
}

}  // namespace

void save_models(const std::vector<const ModelGraph*>& ms, const std::string& path) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot write checkpoint " + path);
    os.write("TFMD", 4);
    put_u32(os, 1);
    put_u32(os, static_cast<uint32_t>(ms.size()));
    for (const ModelGraph* m : ms) put_model(os, *m);
    if (!os) throw IoError("short write to " + path);
}

void save_model(const ModelGraph& m, const std::string& path) { save_models({&m}, path); }

std::vector<ModelGraph> load_models(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open checkpoint " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "TFMD", 4) != 0)
        throw FormatError("checkpoint: bad magic in " + path);
    uint32_t version = get_u32(is);
    if (version != 1)
        throw FormatError("checkpoint: unsupported version " + std::to_string(version));
    uint32_t count = get_u32(is);
    std::vector<ModelGraph> out;
    for (uint32_t i = 0; i < count; ++i) out.push_back(get_model(is));
    return out;
}

ModelGraph load_model(const std::string& path) {
    std::vector<ModelGraph> ms = load_models(path);
    if (ms.size() != 1)
        throw FormatError("checkpoint: expected a single model, found " +
                          std::to_string(ms.size()));
    return std::move(ms[0]);
}

}  // namespace trustforge::nn
