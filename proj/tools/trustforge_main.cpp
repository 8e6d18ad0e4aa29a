// trustforge: reproducible training, attack, explanation and fairness runs.
// Every writing subcommand locks its output directory, emits a metrics
// report plus artifacts, then a manifest tying config, seed and output
// hashes together.

#include <CLI11.hpp>
#include <json.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "trustforge/adversarial.hpp"
#include "trustforge/dataio.hpp"
#include "trustforge/fairmetrics.hpp"
#include "trustforge/fusion.hpp"
#include "trustforge/gan.hpp"
#include "trustforge/nn.hpp"
#include "trustforge/runio.hpp"
#include "trustforge/xai.hpp"

namespace {

using json = nlohmann::json;
using namespace trustforge;

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

void require(bool ok, const std::string& msg) {
    if (!ok) throw UsageError(msg);
}

std::string fmt17(Scalar v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

void write_text(const std::string& path, const std::string& s) {
    data::write_file(path, std::vector<uint8_t>(s.begin(), s.end()));
}

std::string resolve_data_dir(const std::string& flag) {
    return flag.empty() ? data::default_data_dir() : flag;
}

// binds one subcommand's options so a JSON config file can fill any value a
// flag did not set; unknown keys and type mismatches are usage errors
class Binder {
  public:
    explicit Binder(CLI::App* cmd) : cmd_(cmd) {
        cmd->add_option("--config", config_path_, "JSON config file; explicit flags win");
    }

    template <typename T>
    CLI::Option* add(const std::string& key, T& var, const std::string& desc) {
        CLI::Option* o = cmd_->add_option("--" + dashed(key), var, desc);
        wire(key, o, var);
        return o;
    }

    CLI::Option* add_flag(const std::string& key, bool& var, const std::string& desc) {
        CLI::Option* o = cmd_->add_flag("--" + dashed(key), var, desc);
        wire(key, o, var);
        return o;
    }

    // overlay file values under flag values, then snapshot the result
    json merge_and_snapshot() {
        if (!config_path_.empty()) {
            json j;
            try {
                std::vector<uint8_t> raw = data::read_file(config_path_);
                j = json::parse(raw.begin(), raw.end());
            } catch (const json::exception& e) {
                throw UsageError("config file " + config_path_ + ": " + e.what());
            }
            require(j.is_object(), "config file " + config_path_ + ": expected an object");
            for (const auto& [k, v] : j.items()) {
                auto it = setters_.find(k);
                require(it != setters_.end(), "config file: unknown key '" + k + "'");
                if (opts_.at(k)->count() == 0) {
                    try {
                        it->second(v);
                    } catch (const json::exception& e) {
                        throw UsageError("config key '" + k + "': " + e.what());
                    }
                }
            }
        }
        json eff = json::object();
        for (const auto& [k, g] : getters_) eff[k] = g();
        return eff;
    }

  private:
    static std::string dashed(std::string k) {
        for (char& c : k)
            if (c == '_') c = '-';
        return k;
    }

    template <typename T>
    void wire(const std::string& key, CLI::Option* o, T& var) {
        opts_[key] = o;
        setters_[key] = [&var](const json& v) { var = v.get<T>(); };
        getters_[key] = [&var]() { return json(var); };
    }

    CLI::App* cmd_;
    std::string config_path_;
    std::map<std::string, CLI::Option*> opts_;
    std::map<std::string, std::function<void(const json&)>> setters_;
    std::map<std::string, std::function<json()>> getters_;
};

struct OutputLog {
    std::string dir;
    std::vector<std::pair<std::string, std::string>> files;  // rel path, sha256

    std::string abs(const std::string& rel) const { return dir + "/" + rel; }
    void note(const std::string& rel) { files.emplace_back(rel, runio::sha256_file(abs(rel))); }
};

void write_manifest(OutputLog& log, const std::string& command, const json& eff,
                    uint64_t seed, const metrics::MetricsReport* rep,
                    const json* table4 = nullptr, const json* table3 = nullptr) {
    json m;
    m["command"] = command;
    m["config"] = eff;
    m["seed"] = seed;
    json outs = json::array();
    for (const auto& [rel, hash] : log.files) outs.push_back({{"path", rel}, {"sha256", hash}});
    m["outputs"] = outs;
    if (rep) m["metrics"] = json::parse(rep->to_json());
    if (table4) m["table4"] = *table4;
    if (table3) m["table3"] = *table3;
    json id;
    id["command"] = m["command"];
    id["config"] = m["config"];
    id["seed"] = m["seed"];
    id["outputs"] = m["outputs"];
    m["content_hash"] = runio::sha256_hex(id.dump());
    write_text(log.abs("manifest.json"), m.dump(2) + "\n");
}

void write_metrics(OutputLog& log, const metrics::MetricsReport& rep) {
    rep.validate();
    write_text(log.abs("metrics.json"), rep.to_json() + "\n");
    log.note("metrics.json");
}

data::SplitPair load_named(const std::string& name, const std::string& data_dir,
                           Index train_per_class, Index test_per_class, uint64_t seed) {
    data::SplitPair split = data::load_idx_dataset(resolve_data_dir(data_dir), name);
    if (train_per_class > 0)
        split.train = data::stratified_subset(split.train, train_per_class, seed ^ 0xA5A5ULL);
    if (test_per_class > 0)
        split.test = data::stratified_subset(split.test, test_per_class, seed ^ 0x5A5AULL);
    return split;
}

std::string model_kind(const nn::ModelGraph& m) {
    for (const nn::LayerSpec& l : m.layers)
        if (l.kind == nn::LayerSpec::Kind::Conv) return "cnn";
    if (m.head == nn::Head::Linear) return "regnet";
    return "dnn";
}

void image_dims(const data::SplitPair& split, Index& h, Index& w) {
    const Shape& s = split.test.sample_shape;
    if (s.size() == 3) {
        h = s[1];
        w = s[2];
    } else if (split.test.dim() == 784) {
        h = 28;
        w = 28;
    } else {
        h = 1;
        w = split.test.dim();
    }
}

void write_history_csv(OutputLog& log, const nn::TrainHistory& hist) {
    std::string csv = "epoch,lr,train_loss,train_acc,val_loss,val_acc\n";
    for (const nn::EpochStats& e : hist.epochs)
        csv += std::to_string(e.epoch) + "," + fmt17(e.lr) + "," + fmt17(e.train_loss) + "," +
               fmt17(e.train_acc) + "," + fmt17(e.val_loss) + "," + fmt17(e.val_acc) + "\n";
    write_text(log.abs("history.csv"), csv);
    log.note("history.csv");
}

std::vector<Index> predictions(const nn::ModelGraph& m, const data::Dataset& ds) {
    Tensor probs = nn::predict(m, ds.inputs);
    const Index n = ds.size(), c = probs.shape[1];
    std::vector<Index> out(static_cast<size_t>(n));
    for (Index i = 0; i < n; ++i) {
        Index best = 0;
        for (Index j = 1; j < c; ++j)
            if (probs.data[i * c + j] > probs.data[i * c + best]) best = j;
        out[static_cast<size_t>(i)] = best;
    }
    return out;
}

// shared option blocks -------------------------------------------------------

struct CommonOpts {
    std::string out, data_dir;
    uint64_t seed = 0;
    void bind(Binder& b) {
        b.add("out", out, "output directory (locked for the run)");
        b.add("data_dir", data_dir, "dataset cache; default $TRUSTFORGE_DATA_DIR");
        b.add("seed", seed, "RNG seed");
    }
    void validate() const { require(!out.empty(), "--out is required"); }
};

struct TrainOpts {
    int epochs = 5;
    Index batch = 64;
    Scalar lr = 1e-3, min_lr = 0.0, weight_decay = 5e-5, dropout = 0.25;
    Scalar clip_norm = 5.0, val_fraction = 0.1;
    bool cosine = true, adamw = true, verbose = false;
    int patience = 3;
    void bind(Binder& b) {
        b.add("epochs", epochs, "training epochs");
        b.add("batch", batch, "minibatch size");
        b.add("lr", lr, "peak learning rate");
        b.add("min_lr", min_lr, "cosine floor");
        b.add("weight_decay", weight_decay, "decoupled weight decay");
        b.add("dropout", dropout, "dropout rate");
        b.add("clip_norm", clip_norm, "global gradient norm cap");
        b.add("val_fraction", val_fraction, "validation carve for early stopping");
        b.add("cosine", cosine, "cosine lr schedule (true/false)");
        b.add("adamw", adamw, "decoupled decay optimizer (true/false)");
        b.add("patience", patience, "early-stop patience; <=0 disables");
        b.add_flag("verbose", verbose, "log per-epoch stats");
    }
    void validate() const {
        require(epochs >= 1, "epochs must be >= 1");
        require(batch >= 1, "batch must be >= 1");
        require(lr > 0.0, "lr must be > 0");
        require(min_lr >= 0.0, "min-lr must be >= 0");
        require(weight_decay >= 0.0, "weight-decay must be >= 0");
        require(dropout >= 0.0 && dropout < 1.0, "dropout must lie in [0,1)");
        require(val_fraction >= 0.0 && val_fraction < 1.0, "val-fraction must lie in [0,1)");
        require(clip_norm > 0.0, "clip-norm must be > 0");
    }
    nn::TrainConfig to_config(uint64_t seed) const {
        nn::TrainConfig tc;
        tc.epochs = epochs;
        tc.batch = batch;
        tc.lr = lr;
        tc.min_lr = min_lr;
        tc.cosine = cosine;
        tc.weight_decay = weight_decay;
        tc.adamw = adamw;
        tc.clip_norm = clip_norm;
        tc.patience = patience;
        tc.val_fraction = val_fraction;
        tc.seed = seed;
        tc.verbose = verbose;
        return tc;
    }
};

struct AttackOpts {
    std::string method = "fgsm";
    Scalar eps = 0.1, alpha = 0.0;
    int steps = 10;
    bool random_start = false;
    void bind(Binder& b) {
        b.add("method", method, "fgsm | bim | pgd");
        b.add("eps", eps, "L-inf budget");
        b.add("alpha", alpha, "step size; <=0 uses eps/4");
        b.add("steps", steps, "iterative attack steps");
        b.add_flag("random_start", random_start, "start from a random point in the ball");
    }
    void validate() const {
        require(method == "fgsm" || method == "bim" || method == "pgd",
                "method must be fgsm, bim or pgd");
        require(eps >= 0.0, "eps must be >= 0");
        require(steps >= 1, "steps must be >= 1");
    }
    adv::AttackConfig to_config(uint64_t seed) const {
        adv::AttackConfig ac;
        ac.method = method;
        ac.eps = eps;
        ac.alpha = alpha;
        ac.steps = steps;
        ac.random_start = random_start;
        ac.seed = seed;
        return ac;
    }
};

// subcommand option structs ---------------------------------------------------

struct FetchCmd {
    CLI::App* cmd = nullptr;
    std::unique_ptr<Binder> b;
    std::string dataset = "mnist", data_dir;

    void attach(CLI::App& app) {
        cmd = app.add_subcommand("fetch-data", "download and verify a dataset cache");
        b = std::make_unique<Binder>(cmd);
        b->add("dataset", dataset, "mnist | fashion | all");
        b->add("data_dir", data_dir, "dataset cache; default $TRUSTFORGE_DATA_DIR");
    }

    int run() {
        b->merge_and_snapshot();
        require(dataset == "mnist" || dataset == "fashion" || dataset == "all",
                "dataset must be mnist, fashion or all");
        const std::string dir = resolve_data_dir(data_dir);
        std::vector<std::string> names;
        if (dataset == "all")
            names = {"mnist", "fashion"};
        else
            names = {dataset};
        for (const std::string& n : names) {
            data::fetch_dataset(n, dir);
            std::printf("dataset %s ready in %s\n", n.c_str(), dir.c_str());
        }
        return 0;
    }
};

struct TrainCmd {
    CLI::App* cmd = nullptr;
    std::unique_ptr<Binder> b;
    CommonOpts common;
    TrainOpts topt;
    std::string dataset = "mnist", model = "cnn", label;
    std::vector<Index> hidden{256, 128};
    Index train_per_class = 0, test_per_class = 0;

    void attach(CLI::App& app) {
        cmd = app.add_subcommand("train", "train a classifier or the regression net");
        b = std::make_unique<Binder>(cmd);
        common.bind(*b);
        topt.bind(*b);
        b->add("dataset", dataset, "mnist | fashion | regression");
        b->add("model", model, "cnn | dnn | regnet");
        b->add("hidden", hidden, "dnn hidden layer sizes");
        b->add("train_per_class", train_per_class, "stratified train subset; 0 = all");
        b->add("test_per_class", test_per_class, "stratified test subset; 0 = all");
        b->add("label", label, "row name used by report; defaults to the model id");
    }

    int run() {
        json eff = b->merge_and_snapshot();
        common.validate();
        topt.validate();
        require(dataset == "mnist" || dataset == "fashion" || dataset == "regression",
                "dataset must be mnist, fashion or regression");
        require(model == "cnn" || model == "dnn" || model == "regnet",
                "model must be cnn, dnn or regnet");
        require(train_per_class >= 0 && test_per_class >= 0, "subset sizes must be >= 0");
        for (Index hsize : hidden) require(hsize >= 1, "hidden sizes must be >= 1");
        require((model == "regnet") == (dataset == "regression"),
                "regnet pairs with the regression dataset");

        runio::RunLock lock(common.out);
        OutputLog log{common.out, {}};

        data::SplitPair split;
        if (dataset == "regression") {
            data::Dataset d = data::synth_regression(4000, -10.0, 10.0, 0.05, common.seed);
            split = data::stratified_split(d, 0.2, common.seed ^ 0x51EDULL);
        } else {
            split = load_named(dataset, common.data_dir, train_per_class, test_per_class,
                               common.seed);
        }

        Rng rng(common.seed);
        nn::ModelGraph m;
        if (model == "cnn")
            m = nn::make_cnn(28, 28, topt.dropout, rng);
        else if (model == "dnn")
            m = nn::make_dnn(split.train.dim(), hidden, 10, topt.dropout, rng);
        else
            m = nn::make_regnet(topt.dropout, rng);

        nn::TrainHistory hist = nn::train_classifier(m, split, topt.to_config(common.seed));

        nn::save_model(m, log.abs("model.tfmd"));
        log.note("model.tfmd");
        write_history_csv(log, hist);

        metrics::MetricsReport rep;
        rep.metadata["command"] = "train";
        rep.metadata["dataset"] = dataset;
        rep.metadata["model"] = model;
        rep.metadata["seed"] = std::to_string(common.seed);
        json t4;
        if (dataset == "regression") {
            Tensor pred = nn::predict(m, split.test.inputs);
            metrics::RegressionMetrics rm =
                metrics::regression_metrics(pred.data, split.test.targets.data);
            rep.set("r2", rm.r2);
            rep.set("rmse", rm.rmse);
        } else {
            Scalar train_acc = nn::evaluate(m, split.train);
            Scalar test_acc = nn::evaluate(m, split.test);
            std::vector<Index> preds = predictions(m, split.test);
            rep.set("accuracy", test_acc);
            rep.set("f1", metrics::macro_f1(preds, split.test.labels, 10));
            t4["model"] = label.empty() ? model : label;
            t4["attack"] = "none";
            t4["train_err"] = 1.0 - train_acc;
            t4["test_err"] = 1.0 - test_acc;
            t4["adv_err"] = nullptr;
            t4["acc"] = test_acc;
        }
        write_metrics(log, rep);
        write_manifest(log, "train", eff, common.seed, &rep,
                       t4.is_null() ? nullptr : &t4);
        std::printf("train: wrote %s\n", log.abs("manifest.json").c_str());
        return 0;
    }
};

struct AttackCmd {
    CLI::App* cmd = nullptr;
    std::unique_ptr<Binder> b;
    CommonOpts common;
    AttackOpts aopt;
    std::string model_path, dataset = "mnist", label;
    Index test_per_class = 0, dump = 64;

    void attach(CLI::App& app) {
        cmd = app.add_subcommand("attack", "evaluate a checkpoint under an L-inf attack");
        b = std::make_unique<Binder>(cmd);
        common.bind(*b);
        aopt.bind(*b);
        b->add("model", model_path, "TFMD checkpoint to attack");
        b->add("dataset", dataset, "mnist | fashion");
        b->add("test_per_class", test_per_class, "stratified test subset; 0 = all");
        b->add("dump", dump, "adversarial examples written as IDX files");
        b->add("label", label, "row name used by report");
    }

    int run() {
        json eff = b->merge_and_snapshot();
        common.validate();
        aopt.validate();
        require(!model_path.empty(), "--model is required");
        require(dataset == "mnist" || dataset == "fashion", "dataset must be mnist or fashion");
        require(test_per_class >= 0, "test-per-class must be >= 0");
        require(dump >= 0, "dump must be >= 0");

        runio::RunLock lock(common.out);
        OutputLog log{common.out, {}};

        nn::ModelGraph m = nn::load_model(model_path);
        data::SplitPair split =
            load_named(dataset, common.data_dir, 0, test_per_class, common.seed);
        adv::AttackConfig ac = aopt.to_config(common.seed);

        Scalar clean_acc = nn::evaluate(m, split.test);
        Scalar adv_acc = adv::adversarial_accuracy(m, split.test, ac);

        Index h = 0, w = 0;
        image_dims(split, h, w);
        const Index k = std::min<Index>(dump, split.test.size());
        if (k > 0) {
            std::vector<Index> rows;
            for (Index i = 0; i < k; ++i) rows.push_back(i);
            data::Dataset head = data::take(split.test, rows);
            Tensor x_adv = adv::attack(m, head.inputs, head.labels, ac);
            data::IdxData img;
            img.kind = data::IdxKind::Images;
            img.dims = {k, h, w};
            img.bytes.resize(static_cast<size_t>(k * h * w));
            for (Index i = 0; i < x_adv.data.size(); ++i)
                img.bytes[static_cast<size_t>(i)] = static_cast<uint8_t>(
                    std::lround(std::clamp(x_adv.data[i], 0.0, 1.0) * 255.0));
            data::write_file(log.abs("adv_images.idx"), data::write_idx(img));
            log.note("adv_images.idx");
            data::IdxData lab;
            lab.kind = data::IdxKind::Labels;
            lab.dims = {k};
            for (Index label_row : head.labels)
                lab.bytes.push_back(static_cast<uint8_t>(label_row));
            data::write_file(log.abs("adv_labels.idx"), data::write_idx(lab));
            log.note("adv_labels.idx");
            runio::write_pgm_grid(log.abs("adv_grid.pgm"), x_adv, h, w,
                                  std::min<Index>(8, k));
            log.note("adv_grid.pgm");
        }

        metrics::MetricsReport rep;
        rep.metadata["command"] = "attack";
        rep.metadata["dataset"] = dataset;
        rep.metadata["method"] = aopt.method;
        rep.metadata["model"] = model_kind(m);
        rep.metadata["seed"] = std::to_string(common.seed);
        rep.set("accuracy", adv_acc);
        rep.set("clean_accuracy", clean_acc);
        write_metrics(log, rep);

        json t4;
        t4["model"] = label.empty() ? model_kind(m) : label;
        t4["attack"] = aopt.method;
        t4["train_err"] = nullptr;
        t4["test_err"] = 1.0 - clean_acc;
        t4["adv_err"] = 1.0 - adv_acc;
        t4["acc"] = adv_acc;
        write_manifest(log, "attack", eff, common.seed, &rep, &t4);
        std::printf("attack: accuracy %.4f (clean %.4f)\n", adv_acc, clean_acc);
        return 0;
    }
};

struct AdvTrainCmd {
    CLI::App* cmd = nullptr;
    std::unique_ptr<Binder> b;
    CommonOpts common;
    TrainOpts topt;
    AttackOpts aopt;
    std::string dataset = "mnist", model = "cnn", label;
    std::vector<Index> hidden{256, 128};
    Scalar mix_ratio = 0.5;
    Index train_per_class = 0, test_per_class = 0, eval_per_class = 50;

    void attach(CLI::App& app) {
        cmd = app.add_subcommand("adv-train", "train with on-the-fly adversarial minibatches");
        b = std::make_unique<Binder>(cmd);
        common.bind(*b);
        topt.bind(*b);
        aopt.bind(*b);
        b->add("dataset", dataset, "mnist | fashion");
        b->add("model", model, "cnn | dnn");
        b->add("hidden", hidden, "dnn hidden layer sizes");
        b->add("mix_ratio", mix_ratio, "fraction of each batch replaced by attacks");
        b->add("train_per_class", train_per_class, "stratified train subset; 0 = all");
        b->add("test_per_class", test_per_class, "stratified test subset; 0 = all");
        b->add("eval_per_class", eval_per_class,
               "adversarial eval subset per class; 0 = all");
        b->add("label", label, "row name used by report");
    }

    int run() {
        json eff = b->merge_and_snapshot();
        common.validate();
        topt.validate();
        aopt.validate();
        require(dataset == "mnist" || dataset == "fashion", "dataset must be mnist or fashion");
        require(model == "cnn" || model == "dnn", "model must be cnn or dnn");
        require(mix_ratio >= 0.0 && mix_ratio <= 1.0, "mix-ratio must lie in [0,1]");
        require(train_per_class >= 0 && test_per_class >= 0 && eval_per_class >= 0,
                "subset sizes must be >= 0");

        runio::RunLock lock(common.out);
        OutputLog log{common.out, {}};

        data::SplitPair split =
            load_named(dataset, common.data_dir, train_per_class, test_per_class, common.seed);
        Rng rng(common.seed);
        nn::ModelGraph m = model == "cnn"
                               ? nn::make_cnn(28, 28, topt.dropout, rng)
                               : nn::make_dnn(split.train.dim(), hidden, 10, topt.dropout, rng);
        adv::AttackConfig ac = aopt.to_config(common.seed);
        nn::TrainHistory hist =
            adv::adversarial_train(m, split, ac, topt.to_config(common.seed), mix_ratio);

        nn::save_model(m, log.abs("model.tfmd"));
        log.note("model.tfmd");
        write_history_csv(log, hist);

        Scalar train_acc = nn::evaluate(m, split.train);
        Scalar test_acc = nn::evaluate(m, split.test);
        data::Dataset eval_set = split.test;
        if (eval_per_class > 0)
            eval_set = data::stratified_subset(split.test, eval_per_class, common.seed ^ 0xE7ULL);
        Scalar adv_acc = adv::adversarial_accuracy(m, eval_set, ac);

        metrics::MetricsReport rep;
        rep.metadata["command"] = "adv-train";
        rep.metadata["dataset"] = dataset;
        rep.metadata["model"] = model;
        rep.metadata["method"] = aopt.method;
        rep.metadata["seed"] = std::to_string(common.seed);
        rep.set("accuracy", test_acc);
        rep.set("adv_accuracy", adv_acc);
        write_metrics(log, rep);

        json t4;
        t4["model"] = label.empty() ? model + "-adv-" + aopt.method : label;
        t4["attack"] = aopt.method;
        t4["train_err"] = 1.0 - train_acc;
        t4["test_err"] = 1.0 - test_acc;
        t4["adv_err"] = 1.0 - adv_acc;
        t4["acc"] = adv_acc;
        write_manifest(log, "adv-train", eff, common.seed, &rep, &t4);
        std::printf("adv-train: clean %.4f adversarial %.4f\n", test_acc, adv_acc);
        return 0;
    }
};

struct UncertaintyCmd {
    CLI::App* cmd = nullptr;
    std::unique_ptr<Binder> b;
    CommonOpts common;
    std::string model_path, dataset = "mnist", method = "none";
    int passes = 30;
    Index subset = 200, grid_n = 200;
    Scalar eps = 0.0, alpha = 0.0, grid_min = -10.0, grid_max = 10.0;
    int steps = 10;

    void attach(CLI::App& app) {
        cmd = app.add_subcommand("uncertainty", "MC-dropout variance, optionally under attack");
        b = std::make_unique<Binder>(cmd);
        common.bind(*b);
        b->add("model", model_path, "TFMD checkpoint");
        b->add("dataset", dataset, "mnist | fashion | regression");
        b->add("passes", passes, "stochastic forward passes");
        b->add("subset", subset, "classification probe rows");
        b->add("method", method, "none | fgsm | bim | pgd perturbation before probing");
        b->add("eps", eps, "attack budget when method != none");
        b->add("alpha", alpha, "attack step size; <=0 uses eps/4");
        b->add("steps", steps, "attack steps");
        b->add("grid_n", grid_n, "regression probe points");
        b->add("grid_min", grid_min, "regression probe range start");
        b->add("grid_max", grid_max, "regression probe range end");
    }

    int run() {
        json eff = b->merge_and_snapshot();
        common.validate();
        require(!model_path.empty(), "--model is required");
        require(dataset == "mnist" || dataset == "fashion" || dataset == "regression",
                "dataset must be mnist, fashion or regression");
        require(passes >= 2, "passes must be >= 2");
        require(subset >= 1, "subset must be >= 1");
        require(method == "none" || method == "fgsm" || method == "bim" || method == "pgd",
                "method must be none, fgsm, bim or pgd");
        require(eps >= 0.0, "eps must be >= 0");
        require(steps >= 1, "steps must be >= 1");
        require(grid_n >= 2, "grid-n must be >= 2");
        require(grid_max > grid_min, "grid range must be increasing");

        runio::RunLock lock(common.out);
        OutputLog log{common.out, {}};
        nn::ModelGraph m = nn::load_model(model_path);

        metrics::MetricsReport rep;
        rep.metadata["command"] = "uncertainty";
        rep.metadata["dataset"] = dataset;
        rep.metadata["seed"] = std::to_string(common.seed);
        std::string csv;

        if (dataset == "regression") {
            Array xs(grid_n);
            for (Index i = 0; i < grid_n; ++i)
                xs[i] = grid_min + (grid_max - grid_min) * static_cast<Scalar>(i) /
                                       static_cast<Scalar>(grid_n - 1);
            Tensor X({grid_n, 1}, xs);
            adv::UncertaintyReport ur = adv::mc_dropout_predict(m, X, passes, common.seed);
            csv = "x,mean,variance\n";
            for (Index i = 0; i < grid_n; ++i)
                csv += fmt17(xs[i]) + "," + fmt17(ur.mean.data[i]) + "," +
                       fmt17(ur.per_sample[i]) + "\n";
            rep.set("mean_variance", ur.per_sample.mean());
        } else {
            data::SplitPair split = load_named(dataset, common.data_dir, 0, 0, common.seed);
            std::vector<Index> rows;
            for (Index i = 0; i < std::min(subset, split.test.size()); ++i) rows.push_back(i);
            data::Dataset probe = data::take(split.test, rows);
            Tensor x = probe.inputs;
            if (method != "none" && eps > 0.0) {
                adv::AttackConfig ac;
                ac.method = method;
                ac.eps = eps;
                ac.alpha = alpha;
                ac.steps = steps;
                ac.seed = common.seed;
                x = adv::attack(m, probe.inputs, probe.labels, ac);
            }
            adv::UncertaintyReport ur = adv::mc_dropout_predict(m, x, passes, common.seed);
            csv = "index,label,variance\n";
            for (Index i = 0; i < x.shape[0]; ++i)
                csv += std::to_string(i) + "," +
                       std::to_string(probe.labels[static_cast<size_t>(i)]) + "," +
                       fmt17(ur.per_sample[i]) + "\n";
            rep.set("mean_variance", ur.per_sample.mean());
        }
        write_text(log.abs("uncertainty.csv"), csv);
        log.note("uncertainty.csv");
        write_metrics(log, rep);
        write_manifest(log, "uncertainty", eff, common.seed, &rep);
        std::printf("uncertainty: mean variance %s\n",
                    fmt17(rep.get("mean_variance")).c_str());
        return 0;
    }
};

struct ExplainCmd {
    CLI::App* cmd = nullptr;
    std::unique_ptr<Binder> b;
    CommonOpts common;
    std::string model_path, dataset = "mnist", method = "saliency";
    Index index = 0;
    Index target = -1;  // -1 follows the model's prediction
    Scalar lambda = 0.5;
    Index patch = 4;
    Index n_perturb = 2000;  // must exceed the input dim plus intercept
    Scalar sigma = 0.1, mask_prob = 0.2, tau = 0.0, flip_threshold = 0.25;
    bool sharp = false;
    int bootstrap = 20;

    void attach(CLI::App& app) {
        cmd = app.add_subcommand("explain", "attribution heatmap plus JSON sidecar");
        b = std::make_unique<Binder>(cmd);
        common.bind(*b);
        b->add("model", model_path, "TFMD checkpoint");
        b->add("dataset", dataset, "mnist | fashion");
        b->add("index", index, "test-set row to explain");
        b->add("method", method, "saliency | gradcam | hybrid | occlusion | lime");
        b->add("target", target, "class to explain; -1 uses the prediction");
        b->add("lambda", lambda, "hybrid mix weight toward the grad-cam side");
        b->add("patch", patch, "occlusion patch size");
        b->add("n_perturb", n_perturb, "lime neighborhood size");
        b->add("sigma", sigma, "lime Gaussian scale");
        b->add("mask_prob", mask_prob, "lime feature masking probability");
        b->add("tau", tau, "lime kernel width; <=0 self-tunes");
        b->add_flag("sharp", sharp, "lime bootstrap sign-stability filter");
        b->add("bootstrap", bootstrap, "lime bootstrap resamples");
        b->add("flip_threshold", flip_threshold, "lime sign-flip tolerance");
    }

    int run() {
        json eff = b->merge_and_snapshot();
        common.validate();
        require(!model_path.empty(), "--model is required");
        require(dataset == "mnist" || dataset == "fashion", "dataset must be mnist or fashion");
        require(method == "saliency" || method == "gradcam" || method == "hybrid" ||
                    method == "occlusion" || method == "lime",
                "method must be saliency, gradcam, hybrid, occlusion or lime");
        require(index >= 0, "index must be >= 0");
        require(target >= -1, "target must be >= -1");
        require(lambda >= 0.0 && lambda <= 1.0, "lambda must lie in [0,1]");
        require(patch >= 1, "patch must be >= 1");
        require(n_perturb >= 4, "n-perturb must be >= 4");

        runio::RunLock lock(common.out);
        OutputLog log{common.out, {}};

        nn::ModelGraph m = nn::load_model(model_path);
        data::SplitPair split = load_named(dataset, common.data_dir, 0, 0, common.seed);
        if (index >= split.test.size())
            throw ContractError("explain: index " + std::to_string(index) +
                                " outside the test set of " +
                                std::to_string(split.test.size()));
        const Index d = split.test.dim();
        Tensor x({1, d}, split.test.inputs.data.segment(index * d, d));

        Tensor probs = nn::predict(m, x);
        Index t = target;
        if (t < 0) {
            t = 0;
            for (Index j = 1; j < probs.shape[1]; ++j)
                if (probs.data[j] > probs.data[t]) t = j;
        }
        if (t >= probs.shape[1])
            throw ContractError("explain: target " + std::to_string(t) + " outside " +
                                std::to_string(probs.shape[1]) + " classes");

        Index h = 0, w = 0;
        image_dims(split, h, w);

        json sidecar;
        sidecar["method"] = method;
        sidecar["index"] = index;
        sidecar["target"] = t;
        sidecar["seed"] = common.seed;

        xai::AttributionMap map;
        if (method == "saliency") {
            map = xai::saliency(m, x, t);
        } else if (method == "gradcam") {
            map = xai::grad_cam(m, x, t, xai::last_spatial_layer(m));
        } else if (method == "occlusion") {
            map = xai::perturbation_map(m, x, t, patch);
            sidecar["patch"] = patch;
        } else if (method == "hybrid") {
            xai::AttributionMap gc = xai::grad_cam(m, x, t, xai::last_spatial_layer(m));
            xai::AttributionMap pm = xai::perturbation_map(m, x, t, patch);
            map = xai::hybrid_map(gc, pm, lambda);
            sidecar["lambda"] = lambda;
            sidecar["patch"] = patch;
        } else {
            xai::LimeOptions lo;
            lo.n_perturb = n_perturb;
            lo.sigma = sigma;
            lo.mask_prob = mask_prob;
            lo.tau = tau;
            lo.seed = common.seed;
            lo.sharp_filter = sharp;
            lo.bootstrap = bootstrap;
            lo.flip_threshold = flip_threshold;
            xai::BlackBox f = [&m, t](const Tensor& rows) -> Array {
                Tensor p = nn::predict(m, rows);
                Array out(rows.shape[0]);
                for (Index i = 0; i < rows.shape[0]; ++i)
                    out[i] = p.data[i * p.shape[1] + t];
                return out;
            };
            xai::SurrogateExplanation e = xai::lime_explain(f, x.data, lo);
            map.source = "lime";
            map.target_class = t;
            map.values = Tensor({h, w}, e.phi);
            json s;
            s["intercept"] = e.intercept;
            s["beta"] = std::vector<Scalar>(e.beta.data(), e.beta.data() + e.beta.size());
            s["phi"] = std::vector<Scalar>(e.phi.data(), e.phi.data() + e.phi.size());
            s["fidelity"] = e.fidelity;
            s["tau_used"] = e.tau_used;
            s["degenerate"] = e.degenerate;
            s["dropped"] = e.dropped;
            sidecar["surrogate"] = s;
            sidecar["n_perturb"] = n_perturb;
            sidecar["sigma"] = sigma;
            sidecar["mask_prob"] = mask_prob;
        }

        // flat maps of full images are reshaped for display
        Tensor img = map.values;
        if (img.shape.size() == 2 && img.shape[0] == 1 && img.shape[1] == h * w)
            img = Tensor({h, w}, img.data);
        xai::AttributionMap shown;
        shown.values = img;
        shown = xai::max_normalize(shown);

        const std::string stem = method + "_" + std::to_string(index);
        runio::write_pgm(log.abs(stem + ".pgm"), shown.values);
        log.note(stem + ".pgm");
        sidecar["pgm"] = stem + ".pgm";
        sidecar["values"] =
            std::vector<Scalar>(map.values.data.data(),
                                map.values.data.data() + map.values.data.size());
        sidecar["shape"] = map.values.shape;
        write_text(log.abs(stem + ".json"), sidecar.dump(2) + "\n");
        log.note(stem + ".json");

        metrics::MetricsReport rep;
        rep.metadata["command"] = "explain";
        rep.metadata["method"] = method;
        rep.metadata["index"] = std::to_string(index);
        rep.metadata["target"] = std::to_string(t);
        rep.metadata["seed"] = std::to_string(common.seed);
        write_metrics(log, rep);
        write_manifest(log, "explain", eff, common.seed, &rep);
        std::printf("explain: wrote %s\n", log.abs(stem + ".pgm").c_str());
        return 0;
    }
};

struct GanCmd {
    CLI::App* cmd = nullptr;
    std::unique_ptr<Binder> b;
    CommonOpts common;
    std::string dataset = "synthetic", bias_stat = "identity";
    Index dz = 8, batch = 64, n_synth = 512, per_class = 0, sample_grid = 8;
    Scalar lambda_gp = 10.0, lambda_bias = 0.0, lr_g = 1e-4, lr_d = 1e-4;
    Scalar divergence_abort = 1e6;
    int epochs = 30, n_critic = 5;
    bool verbose = false;

    void attach(CLI::App& app) {
        cmd = app.add_subcommand("gan", "conditional critic-based generator with gradient penalty");
        b = std::make_unique<Binder>(cmd);
        common.bind(*b);
        b->add("dataset", dataset, "synthetic | mnist");
        b->add("dz", dz, "latent dimension");
        b->add("lambda_gp", lambda_gp, "gradient penalty weight");
        b->add("lambda_bias", lambda_bias, "generator bias-regularizer weight");
        b->add("n_critic", n_critic, "critic steps per generator step");
        b->add("lr_g", lr_g, "generator learning rate");
        b->add("lr_d", lr_d, "critic learning rate");
        b->add("epochs", epochs, "training epochs");
        b->add("batch", batch, "minibatch size");
        b->add("n_synth", n_synth, "synthetic mixture rows");
        b->add("per_class", per_class, "mnist train subset per class; 0 = all");
        b->add("bias_stat", bias_stat, "identity | meanpixel");
        b->add("divergence_abort", divergence_abort, "abort threshold on |loss|");
        b->add("sample_grid", sample_grid, "generated samples per class in artifacts");
        b->add_flag("verbose", verbose, "log per-epoch stats");
    }

    int run() {
        json eff = b->merge_and_snapshot();
        common.validate();
        require(dataset == "synthetic" || dataset == "mnist",
                "dataset must be synthetic or mnist");
        require(bias_stat == "identity" || bias_stat == "meanpixel",
                "bias-stat must be identity or meanpixel");
        require(dz >= 1, "dz must be >= 1");
        require(lambda_gp >= 0.0 && lambda_bias >= 0.0, "penalty weights must be >= 0");
        require(n_critic >= 1, "n-critic must be >= 1");
        require(lr_g > 0.0 && lr_d > 0.0, "learning rates must be > 0");
        require(epochs >= 1, "epochs must be >= 1");
        require(batch >= 2, "batch must be >= 2");
        require(n_synth >= 2 * batch, "n-synth must cover at least two batches");
        require(sample_grid >= 1, "sample-grid must be >= 1");

        runio::RunLock lock(common.out);
        OutputLog log{common.out, {}};

        gan::GanConfig gc;
        gc.dz = dz;
        gc.lambda_gp = lambda_gp;
        gc.lambda_bias = lambda_bias;
        gc.n_critic = n_critic;
        gc.lr_g = lr_g;
        gc.lr_d = lr_d;
        gc.epochs = epochs;
        gc.batch = batch;
        gc.bias_stat =
            bias_stat == "identity" ? gan::BiasStat::Identity : gan::BiasStat::MeanPixel;
        gc.divergence_abort = divergence_abort;
        gc.seed = common.seed;
        gc.verbose = verbose;

        data::Dataset ds;
        if (dataset == "synthetic") {
            ds = data::synth_biased_mixture(n_synth, {{0.0, 0.0}, {2.0, 2.0}}, {0.7, 0.3},
                                            common.seed);
            gc.classes = 2;
        } else {
            data::SplitPair split =
                load_named("mnist", common.data_dir, per_class, 0, common.seed);
            ds = split.train;
            gc.classes = 10;
            gc.image_mode = true;
            gc.img_h = 28;
            gc.img_w = 28;
        }

        gan::GanResult res = gan::train_gan(ds, gc);

        gan::save_gan(res.pair, log.abs("gan.tfmd"));
        log.note("gan.tfmd");
        std::string csv = "epoch,d_loss,g_loss,gp,r_bias,delta_bias\n";
        for (const gan::GanEpoch& e : res.history)
            csv += std::to_string(e.epoch) + "," + fmt17(e.d_loss) + "," + fmt17(e.g_loss) +
                   "," + fmt17(e.gp) + "," + fmt17(e.r_bias) + "," + fmt17(e.delta) + "\n";
        write_text(log.abs("history.csv"), csv);
        log.note("history.csv");

        Rng srng(common.seed ^ 0x5A11ULL);
        if (gc.image_mode) {
            Array rows(gc.classes * sample_grid * ds.dim());
            for (Index c = 0; c < gc.classes; ++c) {
                Tensor s = gan::sample(res.pair, sample_grid, c, srng);
                rows.segment(c * sample_grid * ds.dim(), sample_grid * ds.dim()) = s.data;
            }
            runio::write_pgm_grid(log.abs("samples.pgm"),
                                  Tensor({gc.classes * sample_grid, ds.dim()}, rows), gc.img_h,
                                  gc.img_w, sample_grid);
            log.note("samples.pgm");
        } else {
            std::string sample_csv = "label";
            for (Index j = 0; j < ds.dim(); ++j) sample_csv += ",x" + std::to_string(j);
            sample_csv += "\n";
            for (Index c = 0; c < gc.classes; ++c) {
                Tensor s = gan::sample(res.pair, sample_grid, c, srng);
                for (Index i = 0; i < sample_grid; ++i) {
                    sample_csv += std::to_string(c);
                    for (Index j = 0; j < ds.dim(); ++j)
                        sample_csv += "," + fmt17(s.data[i * ds.dim() + j]);
                    sample_csv += "\n";
                }
            }
            write_text(log.abs("samples.csv"), sample_csv);
            log.note("samples.csv");
        }

        metrics::MetricsReport rep;
        rep.metadata["command"] = "gan";
        rep.metadata["dataset"] = dataset;
        rep.metadata["seed"] = std::to_string(common.seed);
        rep.set("delta_bias", res.history.back().delta);
        rep.set("grad_norm", res.final_grad_norm);
        write_metrics(log, rep);
        write_manifest(log, "gan", eff, common.seed, &rep);
        std::printf("gan: final delta_bias %s grad norm %s\n",
                    fmt17(res.history.back().delta).c_str(),
                    fmt17(res.final_grad_norm).c_str());
        return 0;
    }
};

struct FuseCmd {
    CLI::App* cmd = nullptr;
    std::unique_ptr<Binder> b;
    CommonOpts common;
    std::string arm = "fused";
    Scalar lambda_bias = 0.0, revise_eta = 0.0, lr = 1e-3;
    Scalar text_correct = 0.8, image_corrupt = 0.2;
    bool revise = false, plant_bias = false, verbose = false;
    int epochs = 4;
    Index batch = 32, d = 16, de = 16, heads = 2, probe = 64;
    Index per_class_train = 200, per_class_test = 50;
    Index patch = 4, distractors = 20, caption_len = 4;

    void attach(CLI::App& app) {
        cmd = app.add_subcommand("fuse", "two-modality attention fusion with bias feedback");
        b = std::make_unique<Binder>(cmd);
        common.bind(*b);
        b->add("arm", arm, "fused | image | text");
        b->add("lambda_bias", lambda_bias, "bias-penalty weight");
        b->add_flag("revise", revise, "per-epoch reveal-to-revise pass");
        b->add("revise_eta", revise_eta, "revise step size; 0 uses lr");
        b->add("epochs", epochs, "training epochs");
        b->add("batch", batch, "minibatch size");
        b->add("lr", lr, "learning rate");
        b->add("d", d, "fusion feature width");
        b->add("de", de, "token embedding width");
        b->add("heads", heads, "attention heads");
        b->add("probe", probe, "attribution probe rows");
        b->add("per_class_train", per_class_train, "paired train rows per class");
        b->add("per_class_test", per_class_test, "paired test rows per class");
        b->add("text_correct", text_correct, "caption fidelity");
        b->add("image_corrupt", image_corrupt, "image blanking probability");
        b->add_flag("plant_bias", plant_bias, "bright corner patch on class-0 train rows");
        b->add("patch", patch, "planted patch size");
        b->add("distractors", distractors, "vocabulary noise tokens");
        b->add("caption_len", caption_len, "caption length");
        b->add_flag("verbose", verbose, "log per-epoch stats");
    }

    int run() {
        json eff = b->merge_and_snapshot();
        common.validate();
        require(arm == "fused" || arm == "image" || arm == "text",
                "arm must be fused, image or text");
        require(lambda_bias >= 0.0 && revise_eta >= 0.0, "penalty knobs must be >= 0");
        require(epochs >= 1, "epochs must be >= 1");
        require(batch >= 1, "batch must be >= 1");
        require(lr > 0.0, "lr must be > 0");
        require(d >= 1 && de >= 1 && heads >= 1, "widths and heads must be >= 1");
        require(d % heads == 0, "d must be divisible by heads");
        require(per_class_train >= 1 && per_class_test >= 1, "per-class sizes must be >= 1");
        require(text_correct >= 0.0 && text_correct <= 1.0, "text-correct must lie in [0,1]");
        require(image_corrupt >= 0.0 && image_corrupt <= 1.0,
                "image-corrupt must lie in [0,1]");
        require(patch >= 1 && caption_len >= 1 && distractors >= 1,
                "corpus knobs must be >= 1");
        require(probe >= 1, "probe must be >= 1");

        runio::RunLock lock(common.out);
        OutputLog log{common.out, {}};

        fusion::PairedSynthConfig pc;
        pc.per_class_train = per_class_train;
        pc.per_class_test = per_class_test;
        pc.text_correct = text_correct;
        pc.image_corrupt = image_corrupt;
        pc.plant_bias = plant_bias;
        pc.patch = patch;
        pc.distractors = distractors;
        pc.caption_len = caption_len;
        pc.seed = common.seed;
        pc.data_dir = resolve_data_dir(common.data_dir);
        fusion::PairedSplit split = fusion::synth_paired(pc);

        fusion::FusionConfig fc;
        fc.d = d;
        fc.de = de;
        fc.heads = heads;
        fc.lambda_bias = lambda_bias;
        fc.epochs = epochs;
        fc.batch = batch;
        fc.lr = lr;
        fc.arm = arm == "fused" ? fusion::Arm::Fused
                 : arm == "image" ? fusion::Arm::ImageOnly
                                  : fusion::Arm::TextOnly;
        fc.revise = revise;
        fc.revise_eta = revise_eta;
        fc.probe = probe;
        fc.seed = common.seed;
        fc.verbose = verbose;

        fusion::FusionResult res = fusion::train_fusion(split, fc);

        std::string csv = "epoch,loss,acc,mean_penalty\n";
        for (const fusion::FusionEpoch& e : res.history)
            csv += std::to_string(e.epoch) + "," + fmt17(e.loss) + "," + fmt17(e.acc) + "," +
                   fmt17(e.mean_penalty) + "\n";
        write_text(log.abs("history.csv"), csv);
        log.note("history.csv");

        res.report.metadata["command"] = "fuse";
        write_metrics(log, res.report);

        json t3;
        t3["arm"] = arm;
        t3["lambda_bias"] = lambda_bias;
        t3["revise"] = revise;
        const char* cols[] = {"accuracy", "f1", "nmi", "iou_xai", "ssim"};
        for (const char* c : cols)
            t3[c] = res.report.has(c) ? json(res.report.get(c)) : json(nullptr);
        write_manifest(log, "fuse", eff, common.seed, &res.report, nullptr, &t3);
        std::printf("fuse: arm %s accuracy %s\n", arm.c_str(),
                    fmt17(res.report.get("accuracy")).c_str());
        return 0;
    }
};

struct ReportCmd {
    CLI::App* cmd = nullptr;
    std::unique_ptr<Binder> b;
    std::string out;
    std::vector<std::string> run_dirs;

    void attach(CLI::App& app) {
        cmd = app.add_subcommand("report", "assemble summary CSV tables from run manifests");
        b = std::make_unique<Binder>(cmd);
        b->add("out", out, "output directory for the tables");
        cmd->add_option("dirs", run_dirs, "run directories holding manifest.json");
    }

    static std::string cell(const json& row, const char* key) {
        if (!row.contains(key) || row[key].is_null()) return "";
        const json& v = row[key];
        if (v.is_string()) return runio::csv_escape(v.get<std::string>());
        if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
        return fmt17(v.get<Scalar>());
    }

    int run() {
        b->merge_and_snapshot();
        require(!out.empty(), "--out is required");

        runio::RunLock lock(out);
        int warnings = 0;
        std::vector<json> rows4, rows3;
        for (const std::string& dir : run_dirs) {
            const std::string mpath = dir + "/manifest.json";
            if (!std::filesystem::exists(mpath)) {
                std::fprintf(stderr, "warning: %s has no manifest, skipped\n", dir.c_str());
                ++warnings;
                continue;
            }
            json m;
            try {
                std::vector<uint8_t> raw = data::read_file(mpath);
                m = json::parse(raw.begin(), raw.end());
            } catch (const std::exception& e) {
                std::fprintf(stderr, "warning: %s unreadable (%s), skipped\n", mpath.c_str(),
                             e.what());
                ++warnings;
                continue;
            }
            if (m.contains("table4")) rows4.push_back(m["table4"]);
            if (m.contains("table3")) rows3.push_back(m["table3"]);
        }

        std::string t4 = "model,attack,train_err,test_err,adv_err,acc\n";
        for (const json& r : rows4)
            t4 += cell(r, "model") + "," + cell(r, "attack") + "," + cell(r, "train_err") +
                  "," + cell(r, "test_err") + "," + cell(r, "adv_err") + "," + cell(r, "acc") +
                  "\n";
        write_text(out + "/table4.csv", t4);

        std::string t3 = "arm,lambda_bias,revise,accuracy,f1,nmi,iou_xai,ssim\n";
        for (const json& r : rows3)
            t3 += cell(r, "arm") + "," + cell(r, "lambda_bias") + "," + cell(r, "revise") +
                  "," + cell(r, "accuracy") + "," + cell(r, "f1") + "," + cell(r, "nmi") +
                  "," + cell(r, "iou_xai") + "," + cell(r, "ssim") + "\n";
        write_text(out + "/table3.csv", t3);

        if (warnings > 0) std::fprintf(stderr, "report: %d warning(s)\n", warnings);
        std::printf("report: %zu attack rows, %zu fusion rows\n", rows4.size(), rows3.size());
        return 0;
    }
};

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"trustforge: training, attacks, uncertainty, attribution and fairness"};
    app.require_subcommand(1);

    FetchCmd fetch;
    TrainCmd train;
    AttackCmd attack;
    AdvTrainCmd advtrain;
    UncertaintyCmd uncertainty;
    ExplainCmd explain;
    GanCmd gan_cmd;
    FuseCmd fuse;
    ReportCmd report;

    fetch.attach(app);
    train.attach(app);
    attack.attach(app);
    advtrain.attach(app);
    uncertainty.attach(app);
    explain.attach(app);
    gan_cmd.attach(app);
    fuse.attach(app);
    report.attach(app);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (fetch.cmd->parsed()) return fetch.run();
        if (train.cmd->parsed()) return train.run();
        if (attack.cmd->parsed()) return attack.run();
        if (advtrain.cmd->parsed()) return advtrain.run();
        if (uncertainty.cmd->parsed()) return uncertainty.run();
        if (explain.cmd->parsed()) return explain.run();
        if (gan_cmd.cmd->parsed()) return gan_cmd.run();
        if (fuse.cmd->parsed()) return fuse.run();
        if (report.cmd->parsed()) return report.run();
    } catch (const UsageError& e) {
        std::fprintf(stderr, "usage error: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
