#include "run_config.hpp"

#include <fstream>
#include <set>

#include "d2pcca/errors.hpp"

namespace d2pcca::cli {

using nlohmann::json;

namespace {

// Reads one object section, refusing keys the section does not define.
class Section {
public:
    Section(const json& parent, const std::string& name, const std::string& path)
        : path_(path.empty() ? name : path + "." + name) {
        if (name.empty()) {
            node_ = &parent;
        } else if (parent.contains(name)) {
            node_ = &parent.at(name);
        }
        if (node_ && !node_->is_object()) throw ConfigError("config key '" + path_ + "' must be an object");
    }

    bool present() const { return node_ != nullptr; }
    const json* node() const { return node_; }
    const std::string& path() const { return path_; }

    template <class T>
    void read(const std::string& key, T& into) {
        known_.insert(key);
        if (!node_ || !node_->contains(key)) return;
        const json& v = node_->at(key);
        try {
            if constexpr (std::is_same_v<T, std::size_t> || std::is_same_v<T, std::uint64_t>) {
                if (!v.is_number_integer() || v.get<std::int64_t>() < 0) throw ConfigError("");
            } else if constexpr (std::is_same_v<T, double>) {
                if (!v.is_number()) throw ConfigError("");
            } else if constexpr (std::is_same_v<T, std::string>) {
                if (!v.is_string()) throw ConfigError("");
            }
            into = v.get<T>();
        } catch (const std::exception&) {
            throw ConfigError("config key '" + key_path(key) + "' has the wrong type: " + v.dump());
        }
    }

    void finish(const std::set<std::string>& subsections = {}) const {
        if (!node_) return;
        for (const auto& [key, _] : node_->items())
            if (!known_.contains(key) && !subsections.contains(key))
                throw ConfigError("unknown config key '" + key_path(key) + "'");
    }

private:
    std::string key_path(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

    std::string path_;
    const json* node_ = nullptr;
    std::set<std::string> known_;
};

void require(bool ok, const std::string& message) {
    if (!ok) throw ConfigError(message);
}

}  // namespace

training::Variant RunConfig::parsed_variant() const { return training::variant_from_string(variant); }

void RunConfig::validate() const {
    parsed_variant();
    require(windows.length >= 2, "windows.length must be at least 2");
    require(windows.step >= 1, "windows.step must be at least 1");
    require(windows.validation_fraction >= 0.0 && windows.validation_fraction < 1.0,
            "windows.validation_fraction must lie in [0, 1)");
    require(data.test_rows >= windows.length,
            "data.test_rows (" + std::to_string(data.test_rows) + ") must be at least windows.length (" +
                std::to_string(windows.length) + ") so that one test window exists");
    require(latent.shared_dim >= 1 && latent.set_dim >= 1, "latent.shared_dim and latent.set_dim must be positive");
    nets::gate_variant_from_string(model.gate);
    require(model.encoder_hidden >= 1, "model.encoder_hidden must be positive");
    require(flow.layers >= 1 && flow.hidden >= 1, "flow.layers and flow.hidden must be positive");
    optimizer.validate();
    anneal.validate();
    require(training.epochs >= 1, "training.epochs must be at least 1");
    require(training.batch_size >= 1, "training.batch_size must be at least 1");
    require(training.samples >= 1, "training.samples must be at least 1");
    require(training.workers >= 1, "training.workers must be at least 1");
    require(training.kl_estimator == "analytic" || training.kl_estimator == "sampled",
            "training.kl_estimator must be 'analytic' or 'sampled', got '" + training.kl_estimator + "'");
    require(em.max_iters >= 1 && em.tol >= 0.0, "em.max_iters must be positive and em.tol non-negative");
    require(eval.latents == "auto" || eval.latents == "mean" || eval.latents == "sampled",
            "eval.latents must be 'auto', 'mean', or 'sampled', got '" + eval.latents + "'");
    if (generator) {
        require(generator->kind == "nonlinear" || generator->kind == "linear",
                "generator.kind must be 'nonlinear' or 'linear', got '" + generator->kind + "'");
        require(generator->rows >= 2 && generator->sets >= 1 && generator->columns_per_set >= 1,
                "generator.rows, generator.sets, and generator.columns_per_set must be positive");
    }
}

RunConfig config_from_json(const json& j) {
    if (!j.is_object()) throw ConfigError("config must be a JSON object");
    RunConfig c;
    Section root(j, "", "");
    root.read("variant", c.variant);
    root.read("seed", c.seed);
    root.read("out", c.out);

    Section data(j, "data", "");
    data.read("table", c.data.table);
    data.read("manifest", c.data.manifest);
    data.read("test_rows", c.data.test_rows);
    data.finish();

    Section windows(j, "windows", "");
    windows.read("length", c.windows.length);
    windows.read("step", c.windows.step);
    windows.read("validation_fraction", c.windows.validation_fraction);
    windows.finish();

    Section latent(j, "latent", "");
    latent.read("shared_dim", c.latent.shared_dim);
    latent.read("set_dim", c.latent.set_dim);
    latent.finish();

    Section model(j, "model", "");
    model.read("gate", c.model.gate);
    model.read("encoder_hidden", c.model.encoder_hidden);
    model.finish();

    Section flow(j, "flow", "");
    flow.read("layers", c.flow.layers);
    flow.read("hidden", c.flow.hidden);
    flow.finish();

    Section opt(j, "optimizer", "");
    opt.read("learning_rate", c.optimizer.learning_rate);
    opt.read("beta1", c.optimizer.beta1);
    opt.read("beta2", c.optimizer.beta2);
    opt.read("clip_norm", c.optimizer.clip_norm);
    opt.read("weight_decay", c.optimizer.weight_decay);
    opt.read("epsilon", c.optimizer.epsilon);
    opt.finish();

    Section anneal(j, "anneal", "");
    anneal.read("initial", c.anneal.initial);
    anneal.read("ramp_epochs", c.anneal.ramp_epochs);
    anneal.finish();

    Section tr(j, "training", "");
    tr.read("epochs", c.training.epochs);
    tr.read("batch_size", c.training.batch_size);
    tr.read("samples", c.training.samples);
    tr.read("workers", c.training.workers);
    tr.read("kl_estimator", c.training.kl_estimator);
    tr.finish();

    Section em(j, "em", "");
    em.read("max_iters", c.em.max_iters);
    em.read("tol", c.em.tol);
    em.finish();

    Section ev(j, "eval", "");
    ev.read("latents", c.eval.latents);
    ev.read("window", c.eval.window);
    ev.finish();

    Section gen(j, "generator", "");
    if (gen.present()) {
        GeneratorConfig g;
        gen.read("kind", g.kind);
        gen.read("rows", g.rows);
        gen.read("sets", g.sets);
        gen.read("columns_per_set", g.columns_per_set);
        gen.finish();
        c.generator = g;
    }

    root.finish({"data", "windows", "latent", "model", "flow", "optimizer", "anneal", "training", "em", "eval",
                 "generator"});
    c.validate();
    return c;
}

RunConfig read_config(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open config " + path.string());
    json j;
    try {
        j = json::parse(f);
    } catch (const json::parse_error& e) {
        throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
    }
    return config_from_json(j);
}

json config_to_json(const RunConfig& c) {
    const training::Variant v = c.parsed_variant();
    json j;
    j["variant"] = c.variant;
    j["seed"] = c.seed;
    j["out"] = c.out;
    j["data"] = {{"table", c.data.table}, {"manifest", c.data.manifest}, {"test_rows", c.data.test_rows}};
    j["windows"] = {{"length", c.windows.length},
                    {"step", c.windows.step},
                    {"validation_fraction", c.windows.validation_fraction}};
    j["latent"] = {{"shared_dim", c.latent.shared_dim}, {"set_dim", c.latent.set_dim}};
    if (v == training::Variant::DpccaEm) {
        j["em"] = {{"max_iters", c.em.max_iters}, {"tol", c.em.tol}};
    } else {
        j["model"] = {{"gate", c.model.gate}, {"encoder_hidden", c.model.encoder_hidden}};
        if (training::uses_flow(v)) j["flow"] = {{"layers", c.flow.layers}, {"hidden", c.flow.hidden}};
        j["optimizer"] = {{"learning_rate", c.optimizer.learning_rate}, {"beta1", c.optimizer.beta1},
                          {"beta2", c.optimizer.beta2},                 {"clip_norm", c.optimizer.clip_norm},
                          {"weight_decay", c.optimizer.weight_decay},   {"epsilon", c.optimizer.epsilon}};
        if (training::uses_annealing(v))
            j["anneal"] = {{"initial", c.anneal.initial}, {"ramp_epochs", c.anneal.ramp_epochs}};
        j["training"] = {{"epochs", c.training.epochs},
                         {"batch_size", c.training.batch_size},
                         {"samples", c.training.samples},
                         {"workers", c.training.workers},
                         {"kl_estimator", c.training.kl_estimator}};
    }
    j["eval"] = {{"latents", c.eval.latents}, {"window", c.eval.window}};
    if (c.generator)
        j["generator"] = {{"kind", c.generator->kind},
                          {"rows", c.generator->rows},
                          {"sets", c.generator->sets},
                          {"columns_per_set", c.generator->columns_per_set}};
    return j;
}

void apply_overrides(RunConfig& c, const Overrides& o) {
    if (o.seed) c.seed = *o.seed;
    if (o.out) c.out = *o.out;
    if (o.variant) c.variant = *o.variant;
    if (o.data_dir) {
        const std::filesystem::path dir(*o.data_dir);
        c.data.table = (dir / "table.csv").string();
        c.data.manifest = (dir / "manifest.json").string();
    }
    if (o.workers && !o.workers->empty()) {
        const bool digits = o.workers->find_first_not_of("0123456789") == std::string::npos;
        unsigned long n = 0;
        try {
            if (digits) n = std::stoul(*o.workers);
        } catch (const std::exception&) {
            n = 0;
        }
        if (n == 0)
            throw ConfigError("D2PCCA_WORKERS must be a positive integer, got '" + *o.workers + "'");
        c.training.workers = n;
    }
    c.validate();
}

model::ModelSpec model_spec(const RunConfig& c, const std::vector<std::size_t>& obs_dims) {
    model::ModelSpec s;
    s.layout = model::LatentLayout{c.latent.shared_dim, std::vector<std::size_t>(obs_dims.size(), c.latent.set_dim)};
    s.obs_dims = obs_dims;
    s.gate = nets::gate_variant_from_string(c.model.gate);
    s.encoder_hidden = c.model.encoder_hidden;
    const bool flow = training::uses_flow(c.parsed_variant());
    s.flow_layers = flow ? c.flow.layers : 0;
    s.flow_hidden = c.flow.hidden;
    s.validate();
    return s;
}

training::TrainConfig train_config(const RunConfig& c) {
    training::TrainConfig t;
    t.optimizer = c.optimizer;
    t.anneal = c.anneal;
    t.anneal_kl = training::uses_annealing(c.parsed_variant());
    t.epochs = c.training.epochs;
    t.batch_size = c.training.batch_size;
    t.seed = c.seed;
    t.workers = c.training.workers;
    t.kl = c.training.kl_estimator == "sampled" ? model::KlEstimator::Sampled : model::KlEstimator::Analytic;
    t.samples = c.training.samples;
    t.out_dir = c.out;
    t.variant = c.variant;
    t.config_echo = config_to_json(c);
    t.validate();
    return t;
}

}  // namespace d2pcca::cli
