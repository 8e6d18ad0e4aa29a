#include "trustforge/adversarial.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <random>

namespace trustforge::adv {

namespace {

void check_inputs(const Tensor& x, const std::vector<Index>& y) {
    if (x.shape.size() != 2)
        throw DimensionError("attack: inputs must be [N,d], got " + shape_str(x.shape));
    if (static_cast<Index>(y.size()) != x.shape[0])
        throw ContractError("attack: " + std::to_string(y.size()) + " labels for " +
                            std::to_string(x.shape[0]) + " rows");
    if ((x.data < -1e-12).any() || (x.data > 1.0 + 1e-12).any())
        throw ContractError("attack: inputs must lie in [0,1]");
}

Scalar resolve_alpha(const AttackConfig& cfg) {
    return cfg.alpha > 0.0 ? cfg.alpha : cfg.eps / 4.0;
}

// gradient of the supervised eval-mode loss wrt the input batch
Array input_grad(const nn::ModelGraph& m, const Shape& shape, const Array& values,
                 const std::vector<Index>& y) {
    ad::Var xv = ad::leaf(shape, values);
    ad::Var z = nn::forward_logits(m, xv, nn::Mode::Eval, nullptr);
    ad::Var loss;
    if (m.head == nn::Head::Softmax) {
        loss = nn::ce_loss(z, y);
    } else if (m.head == nn::Head::Sigmoid) {
        Array t(static_cast<Index>(y.size()));
        for (size_t i = 0; i < y.size(); ++i) t[static_cast<Index>(i)] = static_cast<Scalar>(y[i]);
        loss = nn::bce_loss(ad::sigmoid(ad::reshape(z, {z->value.size()})), t);
    } else {
        throw ContractError("attack: model head has no supervised attack loss");
    }
    Array g = ad::gradients(loss, {xv})[0]->value;
    if (!g.isFinite().all()) throw AttackError("attack: non-finite input gradient");
    return g;
}

Tensor iterate_attack(const nn::ModelGraph& m, const Tensor& x, const std::vector<Index>& y,
                      Scalar eps, Scalar alpha, int steps, bool random_start, uint64_t seed) {
    check_inputs(x, y);
    if (eps < 0.0) throw ContractError("attack: eps must be >= 0");
    if (steps < 1) throw ContractError("attack: steps must be >= 1");
    Tensor adv = x;
    if (eps == 0.0) return adv;
    if (alpha <= 0.0) throw ContractError("attack: alpha must be > 0");
    if (random_start) {
        Rng rng(seed);
        std::uniform_real_distribution<Scalar> u(-eps, eps);
        for (Index i = 0; i < adv.data.size(); ++i) adv.data[i] += u(rng);
        adv.data = adv.data.min(1.0).max(0.0);
    }
    const Array lo = (x.data - eps).max(0.0);
    const Array hi = (x.data + eps).min(1.0);
    for (int t = 0; t < steps; ++t) {
        Array g = input_grad(m, x.shape, adv.data, y);
        adv.data += alpha * g.sign();
        adv.data = adv.data.min(hi).max(lo);
    }
    return adv;
}

}  // namespace

Tensor fgsm(const nn::ModelGraph& m, const Tensor& x, const std::vector<Index>& y,
            Scalar eps) {
    return iterate_attack(m, x, y, eps, eps, 1, false, 0);
}

Tensor bim(const nn::ModelGraph& m, const Tensor& x, const std::vector<Index>& y,
           const AttackConfig& cfg) {
    return iterate_attack(m, x, y, cfg.eps, resolve_alpha(cfg), cfg.steps, false, cfg.seed);
}

Tensor pgd(const nn::ModelGraph& m, const Tensor& x, const std::vector<Index>& y,
           const AttackConfig& cfg) {
    return iterate_attack(m, x, y, cfg.eps, resolve_alpha(cfg), cfg.steps, cfg.random_start,
                          cfg.seed);
}

Tensor attack(const nn::ModelGraph& m, const Tensor& x, const std::vector<Index>& y,
              const AttackConfig& cfg) {
    if (cfg.method == "fgsm") return fgsm(m, x, y, cfg.eps);
    if (cfg.method == "bim") return bim(m, x, y, cfg);
    if (cfg.method == "pgd") {
        AttackConfig c = cfg;
        c.random_start = true;
        return pgd(m, x, y, c);
    }
    throw ContractError("attack: unknown method '" + cfg.method + "'");
}

Scalar adversarial_accuracy(const nn::ModelGraph& m, const data::Dataset& ds,
                            const AttackConfig& cfg, Index batch) {
    if (ds.size() == 0) throw ContractError("adversarial_accuracy: empty dataset");
    const Index n = ds.size(), w = ds.dim();
    Index correct = 0;
    for (Index start = 0; start < n; start += batch) {
        const Index b = std::min(batch, n - start);
        Tensor xb = Tensor::zeros({b, w});
        std::vector<Index> yb(b);
        for (Index i = 0; i < b; ++i) {
            xb.data.segment(i * w, w) = ds.inputs.data.segment((start + i) * w, w);
            yb[i] = ds.labels[start + i];
        }
        AttackConfig c = cfg;
        c.seed = cfg.seed + static_cast<uint64_t>(start);
        Tensor xa = attack(m, xb, yb, c);
        Tensor probs = nn::predict(m, xa);
        const Index cdim = probs.shape[1];
        for (Index i = 0; i < b; ++i) {
            Index pred = 0;
            if (m.head == nn::Head::Sigmoid) {
                pred = probs.data[i * cdim] >= 0.5 ? 1 : 0;
            } else {
                for (Index j = 1; j < cdim; ++j)
                    if (probs.data[i * cdim + j] > probs.data[i * cdim + pred]) pred = j;
            }
            if (pred == yb[i]) ++correct;
        }
    }
    return static_cast<Scalar>(correct) / static_cast<Scalar>(n);
}

nn::TrainHistory adversarial_train(nn::ModelGraph& m, const data::SplitPair& split,
                                   const AttackConfig& attack_cfg,
                                   const nn::TrainConfig& train_cfg, Scalar mix_ratio) {
    if (split.train.size() == 0) throw ContractError("adversarial_train: empty train set");
    if (mix_ratio < 0.0 || mix_ratio > 1.0)
        throw ContractError("adversarial_train: mix_ratio must lie in [0,1]");
    if (m.head != nn::Head::Softmax)
        throw ContractError("adversarial_train: needs a softmax classifier");

    const data::Dataset& tr = split.train;
    const Index n = tr.size(), w = tr.dim();
    nn::Adam opt(m.param_list, nn::AdamConfig{.lr = train_cfg.lr,
                                              .weight_decay = train_cfg.weight_decay,
                                              .adamw = train_cfg.adamw});
    Rng shuffle_rng(train_cfg.seed);
    Rng drop_rng(train_cfg.seed + 0x51f15eedULL);

    nn::TrainHistory hist;
    for (int e = 0; e < train_cfg.epochs; ++e) {
        Scalar lr_e =
            train_cfg.cosine
                ? train_cfg.min_lr + 0.5 * (train_cfg.lr - train_cfg.min_lr) *
                                         (1.0 + std::cos(M_PI * static_cast<Scalar>(e) /
                                                         static_cast<Scalar>(train_cfg.epochs)))
                : train_cfg.lr;
        Scalar loss_sum = 0.0;
        uint64_t batch_ix = 0;
        for (const auto& rows : data::make_batches(n, train_cfg.batch, &shuffle_rng)) {
            const Index b = static_cast<Index>(rows.size());
            Tensor xb = Tensor::zeros({b, w});
            std::vector<Index> yb(b);
            for (Index i = 0; i < b; ++i) {
                xb.data.segment(i * w, w) = tr.inputs.data.segment(rows[i] * w, w);
                yb[i] = tr.labels[rows[i]];
            }
            const Index k = static_cast<Index>(std::llround(mix_ratio * static_cast<Scalar>(b)));
            if (k > 0) {
                Tensor head = Tensor::zeros({k, w});
                head.data = xb.data.head(k * w);
                std::vector<Index> yh(yb.begin(), yb.begin() + k);
                AttackConfig c = attack_cfg;
                c.seed = attack_cfg.seed + batch_ix;
                Tensor xa = attack(m, head, yh, c);
                xb.data.head(k * w) = xa.data;
            }
            ++batch_ix;
            ad::Var xv = ad::leaf(xb.shape, xb.data);
            ad::Var z = nn::forward_logits(m, xv, nn::Mode::Train, &drop_rng);
            ad::Var loss = nn::ce_loss(z, yb);
            ad::zero_grad(m.param_list);
            ad::backward(loss, m.param_list);
            nn::grad_clip(m.param_list, train_cfg.clip_norm);
            opt.step(m.param_list, lr_e);
            loss_sum += loss->value[0] * static_cast<Scalar>(b);
        }
        nn::EpochStats st;
        st.epoch = e;
        st.lr = lr_e;
        st.train_loss = loss_sum / static_cast<Scalar>(n);
        st.train_acc = nn::evaluate(m, tr);
        hist.epochs.push_back(st);
        hist.best_epoch = e;
        if (train_cfg.verbose)
            std::fprintf(stderr, "adv epoch %d loss %.4f acc %.4f\n", e, st.train_loss,
                         st.train_acc);
    }
    return hist;
}

UncertaintyReport mc_dropout_predict(const nn::ModelGraph& m, const Tensor& x, int T,
                                     uint64_t seed) {
    if (T < 2) throw ContractError("mc_dropout: need T >= 2 passes");
    bool has_dropout = false;
    for (const auto& l : m.layers)
        if (l.kind == nn::LayerSpec::Kind::Dropout) has_dropout = true;
    if (!has_dropout) throw ContractError("mc_dropout: model has no dropout layer");
    if (x.shape.size() != 2)
        throw DimensionError("mc_dropout: inputs must be [N,d], got " + shape_str(x.shape));

    Rng rng(seed);
    std::vector<Array> passes;
    passes.reserve(static_cast<size_t>(T));
    Shape out_shape;
    for (int t = 0; t < T; ++t) {
        ad::Var out = nn::forward(m, ad::leaf(x), nn::Mode::Train, &rng);
        out_shape = out->shape;
        passes.push_back(out->value);
    }
    // anchor on the first pass so identical passes give exactly zero variance
    Array delta_sum = Array::Zero(passes[0].size());
    for (const Array& p : passes) delta_sum += p - passes[0];
    Array mean = passes[0] + delta_sum / static_cast<Scalar>(T);
    Array var = Array::Zero(mean.size());
    for (const Array& p : passes) var += (p - mean).square();
    var /= static_cast<Scalar>(T - 1);

    UncertaintyReport rep;
    rep.mean = Tensor(out_shape, mean);
    rep.variance = Tensor(out_shape, var);
    const Index n = out_shape[0], c = out_shape[1];
    rep.per_sample = Array::Zero(n);
    for (Index i = 0; i < n; ++i)
        rep.per_sample[i] = var.segment(i * c, c).mean();
    rep.passes = T;
    return rep;
}

}  // namespace trustforge::adv
