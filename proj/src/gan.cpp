#include "trustforge/gan.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <random>
#include <set>

namespace trustforge::gan {

void validate_dist(const DiscreteDist& d) {
    if (d.support.size() != static_cast<size_t>(d.probs.size()))
        throw ContractError("distribution: " + std::to_string(d.support.size()) +
                            " support points vs " + std::to_string(d.probs.size()) +
                            " probabilities");
    if (d.probs.size() == 0) throw ContractError("distribution: empty support");
    if ((d.probs < 0.0).any()) throw ContractError("distribution: negative probability");
    if (std::abs(d.probs.sum() - 1.0) > 1e-12)
        throw ContractError("distribution: probabilities sum to " +
                            std::to_string(d.probs.sum()));
}

Array optimal_discriminator(const DiscreteDist& p, const DiscreteDist& q) {
    validate_dist(p);
    validate_dist(q);
    if (p.support != q.support)
        throw ContractError("optimal_discriminator: mismatched supports");
    Array d(p.probs.size());
    for (Index i = 0; i < d.size(); ++i) {
        Scalar s = p.probs[i] + q.probs[i];
        d[i] = s > 0.0 ? p.probs[i] / s : 0.5;
    }
    return d;
}

Scalar gan_value(const DiscreteDist& p, const DiscreteDist& q, const Array& d) {
    validate_dist(p);
    validate_dist(q);
    if (p.support != q.support) throw ContractError("gan_value: mismatched supports");
    if (d.size() != p.probs.size()) throw ContractError("gan_value: discriminator size");
    Scalar v = 0.0;
    for (Index i = 0; i < d.size(); ++i) {
        if (p.probs[i] > 0.0) v += p.probs[i] * std::log(d[i]);
        if (q.probs[i] > 0.0) v += q.probs[i] * std::log(1.0 - d[i]);
    }
    return v;
}

namespace {

// aligns two distributions on the union of their supports
void align(const DiscreteDist& p, const DiscreteDist& q, Array& ap, Array& aq) {
    std::set<Scalar> pts(p.support.begin(), p.support.end());
    pts.insert(q.support.begin(), q.support.end());
    std::vector<Scalar> support(pts.begin(), pts.end());
    ap = Array::Zero(static_cast<Index>(support.size()));
    aq = Array::Zero(static_cast<Index>(support.size()));
    for (size_t i = 0; i < p.support.size(); ++i) {
        auto it = std::lower_bound(support.begin(), support.end(), p.support[i]);
        ap[static_cast<Index>(it - support.begin())] += p.probs[static_cast<Index>(i)];
    }
    for (size_t i = 0; i < q.support.size(); ++i) {
        auto it = std::lower_bound(support.begin(), support.end(), q.support[i]);
        aq[static_cast<Index>(it - support.begin())] += q.probs[static_cast<Index>(i)];
    }
}

}  // namespace

Scalar js_divergence(const DiscreteDist& p, const DiscreteDist& q) {
    validate_dist(p);
    validate_dist(q);
    Array ap, aq;
    align(p, q, ap, aq);
    Scalar js = 0.0;
    for (Index i = 0; i < ap.size(); ++i) {
        Scalar m = 0.5 * (ap[i] + aq[i]);
        if (ap[i] > 0.0) js += 0.5 * ap[i] * std::log(ap[i] / m);
        if (aq[i] > 0.0) js += 0.5 * aq[i] * std::log(aq[i] / m);
    }
    return js;
}

void validate_config(const GanConfig& cfg) {
    if (cfg.lambda_gp < 0.0) throw ContractError("gan: lambda_gp must be >= 0");
    if (cfg.lambda_bias < 0.0) throw ContractError("gan: lambda_bias must be >= 0");
    if (cfg.n_critic < 1) throw ContractError("gan: n_critic must be >= 1");
    if (cfg.dz < 1) throw ContractError("gan: dz must be >= 1");
    if (cfg.classes < 1) throw ContractError("gan: classes must be >= 1");
    if (cfg.batch < 2) throw ContractError("gan: batch must be >= 2");
    if (cfg.epochs < 1) throw ContractError("gan: epochs must be >= 1");
    if (cfg.lr_g <= 0.0 || cfg.lr_d <= 0.0) throw ContractError("gan: learning rates must be > 0");
}

GanPair make_gan(const GanConfig& cfg, Index data_dim, Rng& rng) {
    validate_config(cfg);
    GanPair g;
    g.dz = cfg.dz;
    g.classes = cfg.classes;
    g.data_dim = data_dim;
    g.image_mode = cfg.image_mode;
    const Index zin = cfg.dz + cfg.classes;
    using K = nn::LayerSpec::Kind;
    if (cfg.image_mode) {
        if (data_dim != cfg.img_h * cfg.img_w)
            throw ContractError("gan: image mode expects dim " +
                                std::to_string(cfg.img_h * cfg.img_w));
        const Index fh = cfg.img_h / 4, fw = cfg.img_w / 4;
        g.gen.input_shape = {zin};
        g.gen.layers = {
            {.kind = K::Affine, .in = zin, .out = 128},
            {.kind = K::Act, .act = nn::Act::Relu},
            {.kind = K::Affine, .in = 128, .out = 16 * fh * fw},
            {.kind = K::Act, .act = nn::Act::Relu},
            {.kind = K::Reshape4, .c = 16, .h = fh, .w = fw},
            {.kind = K::SpatialAttn},
            {.kind = K::Flatten},
            {.kind = K::Affine, .in = 16 * fh * fw, .out = data_dim},
        };
        g.gen.head = nn::Head::Tanh01;
        g.attn_layer = 5;
        g.critic.input_shape = {data_dim};
        g.critic.layers = {
            {.kind = K::Affine, .in = data_dim, .out = 256},
            {.kind = K::Act, .act = nn::Act::LeakyRelu},
            {.kind = K::Affine, .in = 256, .out = 64},
            {.kind = K::Act, .act = nn::Act::LeakyRelu},
        };
    } else {
        g.gen.input_shape = {zin};
        g.gen.layers = {
            {.kind = K::Affine, .in = zin, .out = 32},
            {.kind = K::Act, .act = nn::Act::Relu},
            {.kind = K::Affine, .in = 32, .out = 32},
            {.kind = K::Act, .act = nn::Act::Relu},
            {.kind = K::Reshape4, .c = 8, .h = 2, .w = 2},
            {.kind = K::SpatialAttn},
            {.kind = K::Flatten},
            {.kind = K::Affine, .in = 32, .out = data_dim},
        };
        g.gen.head = nn::Head::Linear;
        g.attn_layer = 5;
        g.critic.input_shape = {data_dim};
        g.critic.layers = {
            {.kind = K::Affine, .in = data_dim, .out = 64},
            {.kind = K::Act, .act = nn::Act::LeakyRelu},
            {.kind = K::Affine, .in = 64, .out = 64},
            {.kind = K::Act, .act = nn::Act::LeakyRelu},
        };
    }
    g.critic.head = nn::Head::Linear;
    nn::init_params(g.gen, rng);
    nn::init_params(g.critic, rng);

    const Index feat = g.critic.layers[g.critic.layers.size() - 2].out;
    std::normal_distribution<Scalar> hd(0.0, std::sqrt(1.0 / static_cast<Scalar>(feat + cfg.classes)));
    Array hw(feat + cfg.classes);
    for (Index i = 0; i < hw.size(); ++i) hw[i] = hd(rng);
    ad::Var w = ad::leaf({feat + cfg.classes, 1}, std::move(hw));
    ad::Var b = ad::leaf({1}, Array::Zero(1));
    g.critic.params["head.W"] = w;
    g.critic.params["head.b"] = b;
    g.critic.param_list.push_back(w);
    g.critic.param_list.push_back(b);
    return g;
}

namespace {

ad::Var onehot_const(const std::vector<Index>& y, Index classes) {
    const Index n = static_cast<Index>(y.size());
    Array oh = Array::Zero(n * classes);
    for (Index i = 0; i < n; ++i) {
        if (y[static_cast<size_t>(i)] < 0 || y[static_cast<size_t>(i)] >= classes)
            throw ContractError("gan: label " + std::to_string(y[static_cast<size_t>(i)]) +
                                " outside [0," + std::to_string(classes) + ")");
        oh[i * classes + y[static_cast<size_t>(i)]] = 1.0;
    }
    return ad::constant({n, classes}, std::move(oh));
}

}  // namespace

ad::Var critic_score(const GanPair& g, const ad::Var& x, const std::vector<Index>& y) {
    if (x->shape.size() != 2 || x->shape[0] != static_cast<Index>(y.size()))
        throw ContractError("critic_score: batch/label mismatch");
    const Index n = x->shape[0];
    ad::Var feats = nn::forward_logits(g.critic, x, nn::Mode::Eval, nullptr);
    ad::Var h = ad::concat_cols(feats, onehot_const(y, g.classes));
    ad::Var s = ad::add(ad::matmul(h, g.critic.param("head.W")),
                        ad::bcast_rows(g.critic.param("head.b"), n));
    return ad::reshape(s, {n});
}

ad::Var generator_forward(const GanPair& g, const ad::Var& z, const std::vector<Index>& y) {
    if (z->shape.size() != 2 || z->shape[1] != g.dz)
        throw ContractError("generator_forward: z must be [N," + std::to_string(g.dz) + "]");
    if (z->shape[0] != static_cast<Index>(y.size()))
        throw ContractError("generator_forward: batch/label mismatch");
    ad::Var in = ad::concat_cols(z, onehot_const(y, g.classes));
    return nn::forward(g.gen, in, nn::Mode::Eval, nullptr);
}

Tensor sample(const GanPair& g, Index n, Index label, Rng& rng) {
    std::normal_distribution<Scalar> zd(0.0, 1.0);
    Array z(n * g.dz);
    for (Index i = 0; i < z.size(); ++i) z[i] = zd(rng);
    std::vector<Index> y(static_cast<size_t>(n), label);
    ad::Var out = generator_forward(g, ad::leaf({n, g.dz}, std::move(z)), y);
    return Tensor(out->shape, out->value);
}

std::vector<ad::Var> critic_params(const GanPair& g) { return g.critic.param_list; }

ad::Var gradient_penalty_fn(const ScoreFn& critic, const Tensor& x_real,
                            const Tensor& x_fake, Scalar lambda_gp, uint64_t seed) {
    if (x_real.shape != x_fake.shape)
        throw ContractError("gradient_penalty: batch shapes " + shape_str(x_real.shape) +
                            " vs " + shape_str(x_fake.shape));
    if (x_real.shape.size() != 2) throw DimensionError("gradient_penalty: batches are [N,d]");
    const Index n = x_real.shape[0], d = x_real.shape[1];
    Rng rng(seed);
    std::uniform_real_distribution<Scalar> u(0.0, 1.0);
    Array xh(n * d);
    for (Index i = 0; i < n; ++i) {
        Scalar eps = u(rng);
        xh.segment(i * d, d) =
            eps * x_real.data.segment(i * d, d) + (1.0 - eps) * x_fake.data.segment(i * d, d);
    }
    ad::Var xhat = ad::leaf({n, d}, std::move(xh));
    ad::Var s = critic(xhat);
    if (s->value.size() != n) throw ContractError("gradient_penalty: critic must emit [N]");
    if (s->shape.size() != 1) s = ad::reshape(s, {n});
    ad::Var gx = ad::gradients(ad::sum_all(s), {xhat})[0];
    ad::Var norms = ad::safe_sqrt(ad::sum_cols(ad::square(gx)));
    return ad::mul_scalar(ad::mean_all(ad::square(ad::add_scalar(norms, -1.0))), lambda_gp);
}

ad::Var gradient_penalty(const GanPair& g, const Tensor& x_real, const Tensor& x_fake,
                         const std::vector<Index>& y, Scalar lambda_gp, uint64_t seed) {
    return gradient_penalty_fn(
        [&g, &y](const ad::Var& x) { return critic_score(g, x, y); }, x_real, x_fake,
        lambda_gp, seed);
}

ad::Var bias_regularizer(const ad::Var& x_fake, const Tensor& x_real, BiasStat stat) {
    if (x_fake->shape.size() != 2 || x_real.shape.size() != 2)
        throw DimensionError("bias_regularizer: batches are [N,d]");
    if (stat == BiasStat::Identity) {
        if (x_fake->shape[1] != x_real.shape[1])
            throw ContractError("bias_regularizer: feature dims " +
                                std::to_string(x_fake->shape[1]) + " vs " +
                                std::to_string(x_real.shape[1]));
        const Index d = x_real.shape[1], nr = x_real.shape[0];
        Array rm = Array::Zero(d);
        for (Index i = 0; i < nr; ++i) rm += x_real.data.segment(i * d, d);
        rm /= static_cast<Scalar>(nr);
        ad::Var fm = ad::mul_scalar(ad::sum_rows(x_fake),
                                    1.0 / static_cast<Scalar>(x_fake->shape[0]));
        return ad::sum_all(ad::square(ad::sub(fm, ad::constant({d}, std::move(rm)))));
    }
    ad::Var fm = ad::mean_all(x_fake);
    Scalar rm = x_real.data.mean();
    return ad::square(ad::add_scalar(fm, -rm));
}

Scalar bias_regularizer_value(const Tensor& x_fake, const Tensor& x_real, BiasStat stat) {
    return bias_regularizer(ad::leaf(x_fake), x_real, stat)->value[0];
}

Scalar delta_bias(const std::map<Index, Tensor>& samples_by_group) {
    if (samples_by_group.size() < 2)
        throw ContractError("delta_bias: need at least two groups");
    std::vector<Scalar> stats;
    for (const auto& [gid, batch] : samples_by_group) {
        if (batch.data.size() == 0)
            throw ContractError("delta_bias: group " + std::to_string(gid) + " is empty");
        stats.push_back(batch.data.mean());
    }
    Scalar mx = 0.0;
    for (size_t i = 0; i < stats.size(); ++i)
        for (size_t j = i + 1; j < stats.size(); ++j)
            mx = std::max(mx, std::abs(stats[i] - stats[j]));
    return mx;
}

namespace {

void sgd_step(const std::vector<ad::Var>& params, Scalar lr) {
    for (const ad::Var& p : params) p->value -= lr * p->grad;
}

Tensor rows_of(const data::Dataset& ds, const std::vector<Index>& rows) {
    const Index w = ds.dim();
    Tensor t = Tensor::zeros({static_cast<Index>(rows.size()), w});
    for (size_t i = 0; i < rows.size(); ++i)
        t.data.segment(static_cast<Index>(i) * w, w) = ds.inputs.data.segment(rows[i] * w, w);
    return t;
}

Tensor fake_for(const GanPair& g, const std::vector<Index>& y, Rng& rng) {
    const Index n = static_cast<Index>(y.size());
    std::normal_distribution<Scalar> zd(0.0, 1.0);
    Array z(n * g.dz);
    for (Index i = 0; i < z.size(); ++i) z[i] = zd(rng);
    ad::Var out = generator_forward(g, ad::leaf({n, g.dz}, std::move(z)), y);
    return Tensor(out->shape, out->value);
}

}  // namespace

Scalar mean_critic_grad_norm(const GanPair& g, const Tensor& x_real, const Tensor& x_fake,
                             const std::vector<Index>& y, uint64_t seed) {
    const Index n = x_real.shape[0], d = x_real.shape[1];
    Rng rng(seed);
    std::uniform_real_distribution<Scalar> u(0.0, 1.0);
    Array xh(n * d);
    for (Index i = 0; i < n; ++i) {
        Scalar eps = u(rng);
        xh.segment(i * d, d) =
            eps * x_real.data.segment(i * d, d) + (1.0 - eps) * x_fake.data.segment(i * d, d);
    }
    ad::Var xhat = ad::leaf({n, d}, std::move(xh));
    ad::Var s = critic_score(g, xhat, y);
    Array gx = ad::gradients(ad::sum_all(s), {xhat})[0]->value;
    Scalar total = 0.0;
    for (Index i = 0; i < n; ++i) total += std::sqrt(gx.segment(i * d, d).square().sum());
    return total / static_cast<Scalar>(n);
}

GanResult train_gan(const data::Dataset& ds, const GanConfig& cfg) {
    validate_config(cfg);
    if (ds.size() == 0) throw ContractError("train_gan: empty dataset");
    if (ds.labels.size() != static_cast<size_t>(ds.size()))
        throw ContractError("train_gan: dataset must be labeled");
    for (Index l : ds.labels)
        if (l < 0 || l >= cfg.classes)
            throw ContractError("train_gan: label " + std::to_string(l) + " outside [0," +
                                std::to_string(cfg.classes) + ")");

    Rng rng(cfg.seed);
    GanResult res;
    res.pair = make_gan(cfg, ds.dim(), rng);
    GanPair& g = res.pair;

    nn::AdamConfig oc{.beta1 = 0.0, .beta2 = 0.9, .weight_decay = 0.0, .adamw = false};
    nn::Adam opt_d(g.critic.param_list, oc);
    nn::Adam opt_g(g.gen.param_list, oc);

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        Scalar d_sum = 0, g_sum = 0, gp_sum = 0, rb_sum = 0;
        Index d_steps = 0, g_steps = 0;
        int phase = 0;
        for (const auto& rows : data::make_batches(ds.size(), cfg.batch, &rng)) {
            Tensor x_real = rows_of(ds, rows);
            std::vector<Index> y;
            y.reserve(rows.size());
            for (Index r : rows) y.push_back(ds.labels[static_cast<size_t>(r)]);
            if (phase < cfg.n_critic) {
                Tensor x_fake = fake_for(g, y, rng);
                ad::Var d_real = critic_score(g, ad::leaf(x_real), y);
                ad::Var d_fake = critic_score(g, ad::leaf(x_fake), y);
                ad::Var gp = gradient_penalty(g, x_real, x_fake, y, cfg.lambda_gp, rng());
                ad::Var loss =
                    ad::add(ad::sub(ad::mean_all(d_fake), ad::mean_all(d_real)), gp);
                if (!std::isfinite(loss->value[0]) ||
                    std::abs(loss->value[0]) > cfg.divergence_abort)
                    throw ConvergenceError(
                        "train_gan: critic loss " + std::to_string(loss->value[0]) +
                        " at epoch " + std::to_string(epoch) +
                        "; lower lr_d or raise lambda_gp");
                ad::zero_grad(g.critic.param_list);
                ad::backward(loss, g.critic.param_list);
                if (cfg.sgd)
                    sgd_step(g.critic.param_list, cfg.lr_d);
                else
                    opt_d.step(g.critic.param_list, cfg.lr_d);
                d_sum += loss->value[0];
                gp_sum += gp->value[0];
                ++d_steps;
                ++phase;
            } else {
                const Index n = static_cast<Index>(rows.size());
                std::normal_distribution<Scalar> zd(0.0, 1.0);
                Array z(n * g.dz);
                for (Index i = 0; i < z.size(); ++i) z[i] = zd(rng);
                ad::Var x_fake = generator_forward(g, ad::leaf({n, g.dz}, std::move(z)), y);
                ad::Var d_fake = critic_score(g, x_fake, y);
                ad::Var rb = bias_regularizer(x_fake, x_real, cfg.bias_stat);
                ad::Var loss = ad::add(ad::neg(ad::mean_all(d_fake)),
                                       ad::mul_scalar(rb, cfg.lambda_bias));
                if (!std::isfinite(loss->value[0]) ||
                    std::abs(loss->value[0]) > cfg.divergence_abort)
                    throw ConvergenceError("train_gan: generator loss " +
                                           std::to_string(loss->value[0]) + " at epoch " +
                                           std::to_string(epoch) + "; lower lr_g");
                ad::zero_grad(g.gen.param_list);
                ad::backward(loss, g.gen.param_list);
                if (cfg.sgd)
                    sgd_step(g.gen.param_list, cfg.lr_g);
                else
                    opt_g.step(g.gen.param_list, cfg.lr_g);
                g_sum += loss->value[0];
                rb_sum += rb->value[0];
                ++g_steps;
                phase = 0;
            }
        }
        GanEpoch ep;
        ep.epoch = epoch;
        ep.d_loss = d_steps ? d_sum / static_cast<Scalar>(d_steps) : 0.0;
        ep.g_loss = g_steps ? g_sum / static_cast<Scalar>(g_steps) : 0.0;
        ep.gp = d_steps ? gp_sum / static_cast<Scalar>(d_steps) : 0.0;
        ep.r_bias = g_steps ? rb_sum / static_cast<Scalar>(g_steps) : 0.0;
        std::map<Index, Tensor> by_group;
        for (Index c = 0; c < cfg.classes; ++c) by_group[c] = sample(g, 128, c, rng);
        ep.delta = delta_bias(by_group);
        res.history.push_back(ep);
        if (cfg.verbose)
            std::fprintf(stderr, "gan epoch %d d %.4f g %.4f gp %.4f rb %.4f delta %.4f\n",
                         epoch, ep.d_loss, ep.g_loss, ep.gp, ep.r_bias, ep.delta);
    }

    const Index probe = std::min<Index>(256, ds.size());
    std::vector<Index> pr(static_cast<size_t>(probe));
    for (Index i = 0; i < probe; ++i) pr[static_cast<size_t>(i)] = i;
    Tensor x_real = rows_of(ds, pr);
    std::vector<Index> y;
    for (Index i = 0; i < probe; ++i) y.push_back(ds.labels[static_cast<size_t>(i)]);
    Tensor x_fake = fake_for(g, y, rng);
    res.final_grad_norm = mean_critic_grad_norm(g, x_real, x_fake, y, rng());
    return res;
}

std::vector<xai::SurrogateExplanation> explain_generated(const GanPair& g, Index n_expl,
                                                         const xai::LimeOptions& opts,
                                                         uint64_t seed) {
    std::vector<xai::SurrogateExplanation> out;
    if (n_expl == 0) return out;
    Rng rng(seed);
    std::normal_distribution<Scalar> zd(0.0, 1.0);
    std::uniform_int_distribution<Index> ld(0, g.classes - 1);
    for (Index i = 0; i < n_expl; ++i) {
        Index label = ld(rng);
        Array z(g.dz);
        for (Index j = 0; j < g.dz; ++j) z[j] = zd(rng);
        ad::Var xf = generator_forward(g, ad::leaf({1, g.dz}, z), {label});
        Array x0 = xf->value;
        xai::BlackBox f = [&g, label](const Tensor& P) -> Array {
            std::vector<Index> yy(static_cast<size_t>(P.shape[0]), label);
            return critic_score(g, ad::leaf(P), yy)->value;
        };
        xai::LimeOptions o = opts;
        o.seed = opts.seed + static_cast<uint64_t>(i);
        out.push_back(xai::lime_explain(f, x0, o));
    }
    return out;
}

void save_gan(const GanPair& g, const std::string& path) {
    nn::save_models({&g.gen, &g.critic}, path);
}

GanPair load_gan(const std::string& path, const GanConfig& cfg, Index data_dim) {
    std::vector<nn::ModelGraph> ms = nn::load_models(path);
    if (ms.size() != 2)
        throw FormatError("gan checkpoint: expected 2 models, found " +
                          std::to_string(ms.size()));
    GanPair g;
    g.gen = std::move(ms[0]);
    g.critic = std::move(ms[1]);
    g.dz = cfg.dz;
    g.classes = cfg.classes;
    g.data_dim = data_dim;
    g.image_mode = cfg.image_mode;
    g.attn_layer = -1;
    for (size_t i = 0; i < g.gen.layers.size(); ++i)
        if (g.gen.layers[i].kind == nn::LayerSpec::Kind::SpatialAttn)
            g.attn_layer = static_cast<Index>(i);
    return g;
}

}  // namespace trustforge::gan
