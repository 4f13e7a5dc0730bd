#include "commands.hpp"

#include <cstdio>
#include <fstream>
#include <iostream>
#include <random>

#include "d2pcca/data/panel.hpp"
#include "d2pcca/data/synthetic.hpp"
#include "d2pcca/data/windows.hpp"
#include "d2pcca/errors.hpp"
#include "d2pcca/lds/em.hpp"
#include "d2pcca/training/train.hpp"

namespace d2pcca::cli {

namespace fs = std::filesystem;
using nlohmann::json;
using diff::Tensor;

namespace {

LogSink& sink() {
    static LogSink s = [](const std::string& line) { std::cerr << "[d2pcca] " << line << '\n'; };
    return s;
}

std::string fmt(double v, const char* spec = "%.6g") {
    char buf[48];
    std::snprintf(buf, sizeof(buf), spec, v);
    return buf;
}

// Streams derived from the run seed; training uses its own (seed, 1..3, ...) streams.
enum Stream : std::uint64_t { kInitStream = 0, kEvalStream = 4, kBandStream = 5, kGenWeights = 10, kGenPaths = 11 };

struct Prepared {
    data::PanelDataset panel;
    data::WindowSplit windows;
    data::WindowSet train, val;
};

Prepared prepare(const RunConfig& c) {
    if (c.data.table.empty() || c.data.manifest.empty())
        throw ConfigError("no dataset given: pass --data <dir> (holding table.csv and manifest.json) or set "
                          "data.table and data.manifest");
    Prepared p;
    p.panel = data::load_panel(c.data.table, c.data.manifest);
    const std::size_t split = data::split_for_test_rows(p.panel, c.data.test_rows);
    p.windows = data::make_windows(p.panel, c.windows.length, c.windows.step, split);
    std::tie(p.train, p.val) = data::hold_out_validation(p.windows.train, c.windows.validation_fraction);
    log("dataset " + c.data.table + ": " + std::to_string(p.panel.rows()) + " rows, " +
        std::to_string(p.panel.sets.size()) + " sets, p = " + std::to_string(p.panel.dim()) + "; windows T = " +
        std::to_string(c.windows.length) + ", step " + std::to_string(c.windows.step) + ": " +
        std::to_string(p.train.size()) + " train, " + std::to_string(p.val.size()) + " validation, " +
        std::to_string(p.windows.test.size()) + " test");
    return p;
}

std::vector<std::size_t> chain_dims(const RunConfig& c, std::size_t sets) {
    std::vector<std::size_t> dims{c.latent.shared_dim};
    dims.insert(dims.end(), sets, c.latent.set_dim);
    return dims;
}

Tensor to_tensor(const Eigen::MatrixXd& m) {
    Tensor t(diff::Shape{static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())});
    for (Eigen::Index r = 0; r < m.rows(); ++r)
        for (Eigen::Index k = 0; k < m.cols(); ++k) t.at(static_cast<std::size_t>(r), static_cast<std::size_t>(k)) = m(r, k);
    return t;
}

Eigen::MatrixXd to_matrix(const Tensor& t) {
    if (t.rank() != 2) throw IoError("linear checkpoint: expected a matrix, got shape " + diff::to_string(t.shape()));
    Eigen::MatrixXd m(static_cast<Eigen::Index>(t.dim(0)), static_cast<Eigen::Index>(t.dim(1)));
    for (std::size_t r = 0; r < t.dim(0); ++r)
        for (std::size_t k = 0; k < t.dim(1); ++k) m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(k)) = t.at(r, k);
    return m;
}

data::LatentMode latent_mode(const RunConfig& c) {
    if (c.eval.latents == "mean") return data::LatentMode::PosteriorMean;
    if (c.eval.latents == "sampled") return data::LatentMode::Sampled;
    return data::LatentMode::Auto;
}

void check_obs_dims(const std::vector<std::size_t>& have, const data::PanelDataset& panel, const std::string& path) {
    if (have == panel.obs_dims()) return;
    auto show = [](const std::vector<std::size_t>& v) {
        std::string s = "(";
        for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
        return s + ")";
    };
    throw DataError("checkpoint " + path + " was trained on observation sets " + show(have) +
                    " but the dataset has " + show(panel.obs_dims()));
}

void run_em(const RunConfig& c, const Prepared& p) {
    // EM has no early stopping, so it fits every training window, validation ones included.
    std::vector<Tensor> seqs = p.train.sequences;
    seqs.insert(seqs.end(), p.val.sequences.begin(), p.val.sequences.end());
    lds::EmOptions opts;
    opts.max_iters = c.em.max_iters;
    opts.tol = c.em.tol;
    opts.workers = static_cast<unsigned>(c.training.workers);
    opts.on_iteration = [](std::size_t it, double ll) {
        log("em iteration " + std::to_string(it) + " log-likelihood " + fmt(ll, "%.10g"));
    };
    log("fitting dpcca-em on " + std::to_string(seqs.size()) + " windows");
    const lds::EmResult res =
        lds::em_fit(data::to_matrices(seqs), chain_dims(c, p.panel.sets.size()), p.panel.obs_dims(), opts);
    for (const std::string& note : res.notes) log("em note: " + note);

    LinearCheckpoint ck{res.params, c.variant, c.seed, res.trace, config_to_json(c)};
    save_linear_checkpoint(fs::path(c.out) / "model.ckpt", ck);
    std::ofstream f(fs::path(c.out) / "em_trace.csv", std::ios::trunc);
    if (!f) throw IoError("cannot write " + (fs::path(c.out) / "em_trace.csv").string());
    f << "iteration,log_likelihood\n";
    for (std::size_t i = 0; i < res.trace.size(); ++i) f << i << ',' << fmt(res.trace[i], "%.17g") << '\n';
    log("em finished after " + std::to_string(res.iterations) + " iterations; wrote " +
        (fs::path(c.out) / "model.ckpt").string());
}

}  // namespace

void set_log_sink(LogSink s) { sink() = std::move(s); }

void log(const std::string& line) {
    if (sink()) sink()(line);
}

int exit_code(const std::exception& error) {
    if (const auto* e = dynamic_cast<const Error*>(&error)) {
        switch (e->kind()) {
            case ErrorKind::Config: return kExitConfig;
            case ErrorKind::Data:
            case ErrorKind::Shape: return kExitData;
            case ErrorKind::Numerical:
            case ErrorKind::Domain: return kExitNumerical;
            case ErrorKind::Io: return kExitIo;
        }
    }
    if (dynamic_cast<const fs::filesystem_error*>(&error)) return kExitIo;
    return 1;
}

fs::path write_config_echo(const RunConfig& c, const std::string& command) {
    const fs::path path = fs::path(c.out) / (command + ".config.json");
    std::error_code ec;
    fs::create_directories(c.out, ec);
    if (ec) throw IoError("cannot create output directory " + c.out + ": " + ec.message());
    const std::string text = config_to_json(c).dump(2) + "\n";
    std::ofstream f(path, std::ios::trunc);
    if (!f || !(f << text)) throw IoError("cannot write config echo " + path.string());
    log(command + " config (" + path.string() + "): " + config_to_json(c).dump());
    return path;
}

void save_linear_checkpoint(const fs::path& path, const LinearCheckpoint& ck) {
    ck.params.validate();
    training::Archive a;
    a.header = {{"kind", "dpcca-em"},
                {"variant", ck.variant},
                {"seed", ck.seed},
                {"chain_dims", ck.params.chain_dims()},
                {"obs_dims", ck.params.obs_dims()},
                {"log_likelihood_trace", ck.log_likelihood_trace},
                {"config", ck.config}};
    for (std::size_t i = 0; i < ck.params.A.size(); ++i) {
        const std::string s = std::to_string(i);
        a.tensors.emplace_back("A/" + s, to_tensor(ck.params.A[i]));
        a.tensors.emplace_back("V/" + s, to_tensor(ck.params.V[i]));
        a.tensors.emplace_back("mu1/" + s, to_tensor(ck.params.mu1[i]));
        a.tensors.emplace_back("P1/" + s, to_tensor(ck.params.P1[i]));
    }
    for (std::size_t j = 0; j < ck.params.W.size(); ++j) {
        const std::string s = std::to_string(j);
        a.tensors.emplace_back("W/" + s, to_tensor(ck.params.W[j]));
        a.tensors.emplace_back("B/" + s, to_tensor(ck.params.B[j]));
    }
    a.tensors.emplace_back("sigma2", Tensor::vector(ck.params.sigma2));
    training::write_archive(path, a);
}

LinearCheckpoint load_linear_checkpoint(const fs::path& path) {
    const training::Archive a = training::read_archive(path);
    if (a.header.value("kind", "") != "dpcca-em")
        throw IoError(path.string() + " is not a dpcca-em checkpoint");
    LinearCheckpoint ck;
    try {
        ck.variant = a.header.at("variant").get<std::string>();
        ck.seed = a.header.at("seed").get<std::uint64_t>();
        ck.log_likelihood_trace = a.header.at("log_likelihood_trace").get<std::vector<double>>();
        ck.config = a.header.at("config");
        const auto chains = a.header.at("chain_dims").get<std::vector<std::size_t>>();
        const auto obs = a.header.at("obs_dims").get<std::vector<std::size_t>>();
        ck.params = lds::DpccaParams::zeros(chains, obs);
    } catch (const json::exception& e) {
        throw IoError(path.string() + ": malformed dpcca-em header: " + e.what());
    }
    for (std::size_t i = 0; i < ck.params.A.size(); ++i) {
        const std::string s = std::to_string(i);
        ck.params.A[i] = to_matrix(a.tensor("A/" + s));
        ck.params.V[i] = to_matrix(a.tensor("V/" + s));
        ck.params.mu1[i] = to_matrix(a.tensor("mu1/" + s)).col(0);
        ck.params.P1[i] = to_matrix(a.tensor("P1/" + s));
    }
    for (std::size_t j = 0; j < ck.params.W.size(); ++j) {
        const std::string s = std::to_string(j);
        ck.params.W[j] = to_matrix(a.tensor("W/" + s));
        ck.params.B[j] = to_matrix(a.tensor("B/" + s));
    }
    const auto sigma2 = a.tensor("sigma2").values();
    ck.params.sigma2.assign(sigma2.begin(), sigma2.end());
    try {
        ck.params.validate();
    } catch (const Error& e) {
        throw IoError(path.string() + ": inconsistent dpcca-em parameters: " + e.what());
    }
    return ck;
}

void cmd_simulate(const RunConfig& c) {
    if (!c.generator) throw ConfigError("simulate needs a generator section in the config");
    write_config_echo(c, "simulate");
    const GeneratorConfig& g = *c.generator;
    const std::vector<std::size_t> obs(g.sets, g.columns_per_set);
    const fs::path out(c.out);
    data::PanelDataset panel;
    if (g.kind == "linear") {
        std::mt19937_64 weights(training::derive_seed({c.seed, kGenWeights}));
        const lds::DpccaParams params = lds::random_params(chain_dims(c, g.sets), obs, weights);
        std::mt19937_64 paths(training::derive_seed({c.seed, kGenPaths}));
        panel = data::simulate_linear_panel(params, g.rows, paths);
        save_linear_checkpoint(out / "generator.ckpt", {params, "generator", c.seed, {}, config_to_json(c)});
    } else {
        model::ModelSpec spec;
        spec.layout = model::LatentLayout{c.latent.shared_dim, std::vector<std::size_t>(g.sets, c.latent.set_dim)};
        spec.obs_dims = obs;
        spec.gate = nets::gate_variant_from_string(c.model.gate);
        spec.encoder_hidden = c.model.encoder_hidden;
        const model::D2pccaModel gen = data::nonlinear_generator(spec, training::derive_seed({c.seed, kGenWeights}));
        panel = data::simulate_nonlinear_panel(gen, g.rows, training::derive_seed({c.seed, kGenPaths}));
        training::CheckpointMeta meta;
        meta.variant = "generator";
        meta.seed = c.seed;
        meta.config = config_to_json(c);
        training::save_checkpoint(out / "generator.ckpt", gen, nullptr, meta);
        training::dump_weights_json(out / "generator_weights.json", gen);
    }
    data::write_table(out / "table.csv", panel);
    data::write_manifest(out / "manifest.json", panel.sets);
    log("simulated " + g.kind + " panel: " + std::to_string(g.rows) + " rows, " + std::to_string(g.sets) + " sets of " +
        std::to_string(g.columns_per_set) + " columns in " + out.string());
}

void cmd_train(const RunConfig& c, const std::optional<fs::path>& resume) {
    write_config_echo(c, "train");
    const training::Variant variant = c.parsed_variant();
    const Prepared p = prepare(c);
    if (variant == training::Variant::DpccaEm) {
        if (resume) throw ConfigError("dpcca-em runs do not resume; EM restarts from its deterministic initialization");
        run_em(c, p);
        return;
    }

    const model::ModelSpec spec = model_spec(c, p.panel.obs_dims());
    const training::TrainConfig tc = train_config(c);
    model::D2pccaModel m;
    std::optional<training::TrainState> state;
    if (resume) {
        training::LoadedCheckpoint ck = training::load_checkpoint(*resume);
        if (ck.meta.variant != c.variant)
            throw ConfigError("checkpoint " + resume->string() + " holds variant " + ck.meta.variant +
                              ", the config asks for " + c.variant);
        if (training::spec_to_json(ck.model.spec) != training::spec_to_json(spec))
            throw ConfigError("checkpoint " + resume->string() + " has model layout " +
                              training::spec_to_json(ck.model.spec).dump() + ", the config implies " +
                              training::spec_to_json(spec).dump());
        m = std::move(ck.model);
        state.emplace(training::resume_state(m, ck, tc));
        log("resuming " + c.variant + " after epoch " + std::to_string(state->epoch) + " from " + resume->string());
    } else {
        std::mt19937_64 rng(training::derive_seed({c.seed, kInitStream}));
        m = model::make_model(spec, rng);
        state.emplace(training::start_state(m, tc));
    }
    log("training " + c.variant + " for epochs " + std::to_string(state->epoch) + ".." +
        std::to_string(tc.epochs - 1) + " with " + std::to_string(tc.workers) + " worker(s)");
    training::train(m, *state, p.train.sequences, p.val.sequences, tc, [](const training::EpochMetrics& e) {
        log("epoch " + std::to_string(e.epoch) + " beta " + fmt(e.beta, "%.4f") + " train elbo/step " +
            fmt(e.train_elbo_per_step, "%.4f") + " val elbo/step " + fmt(e.val_elbo_per_step, "%.4f") + " (" +
            fmt(e.wall_seconds, "%.1f") + " s)");
    });
    log("done; best " + std::string(p.val.size() ? "validation" : "training") + " elbo/step " +
        fmt(state->best_val, "%.4f") + "; checkpoints in " + c.out);
}

void cmd_em_baseline(RunConfig c) {
    c.variant = training::to_string(training::Variant::DpccaEm);
    c.validate();
    cmd_train(c);
}

std::vector<data::MetricsRow> cmd_eval(const RunConfig& c, const std::vector<std::string>& checkpoints) {
    if (checkpoints.empty()) throw ConfigError("eval needs at least one --checkpoint");
    write_config_echo(c, "eval");
    const Prepared p = prepare(c);
    std::vector<data::MetricsRow> rows;
    for (const std::string& path : checkpoints) {
        const std::string kind = training::read_archive(path).header.value("kind", "");
        data::MetricsRow row;
        row.checkpoint = path;
        if (kind == "dpcca-em") {
            const LinearCheckpoint ck = load_linear_checkpoint(path);
            check_obs_dims(ck.params.obs_dims(), p.panel, path);
            row.variant = ck.variant;
            row.metrics = data::evaluate_linear(ck.params, p.windows.test);
        } else {
            const training::LoadedCheckpoint ck = training::load_checkpoint(path);
            check_obs_dims(ck.model.spec.obs_dims, p.panel, path);
            row.variant = ck.meta.variant;
            row.metrics = data::evaluate(ck.model, p.windows.test, latent_mode(c),
                                         training::derive_seed({c.seed, kEvalStream}));
        }
        log(row.variant + " " + path + ": test elbo/step " + fmt(row.metrics.elbo_per_step, "%.4f") + ", rmse " +
            fmt(row.metrics.rmse, "%.4f") + ", " + (row.metrics.sampled_latents ? "sampled" : "mean") + " latents");
        rows.push_back(std::move(row));
    }
    data::write_metrics_csv(fs::path(c.out) / "metrics.csv", rows);
    return rows;
}

bool cmd_reconstruct(const RunConfig& c, const std::string& checkpoint, std::size_t window) {
    write_config_echo(c, "reconstruct");
    const Prepared p = prepare(c);
    const std::size_t n = p.windows.test.size();
    if (window >= n)
        throw ConfigError("window index " + std::to_string(window) + " is out of range: the test split has " +
                          std::to_string(n) + " windows (0.." + std::to_string(n - 1) + ")");
    const Tensor& x = p.windows.test.sequences[window];
    const fs::path out = fs::path(c.out) / "bands.csv";
    bool sampled = false;
    if (training::read_archive(checkpoint).header.value("kind", "") == "dpcca-em") {
        const LinearCheckpoint ck = load_linear_checkpoint(checkpoint);
        check_obs_dims(ck.params.obs_dims(), p.panel, checkpoint);
        data::export_bands_linear(ck.params, x, p.panel, out);
        log("latents: posterior mean (Kalman smoother)");
    } else {
        const training::LoadedCheckpoint ck = training::load_checkpoint(checkpoint);
        check_obs_dims(ck.model.spec.obs_dims, p.panel, checkpoint);
        sampled = data::export_bands(ck.model, x, p.panel, out, latent_mode(c),
                                     training::derive_seed({c.seed, kBandStream}));
        log(sampled ? "latents: sampled (the flow posterior has no analytic mean)" : "latents: posterior mean");
    }
    log("wrote " + out.string() + " for test window " + std::to_string(window) + " (rows from " +
        p.panel.timestamps[p.windows.test.starts[window]] + ")");
    return sampled;
}

}  // namespace d2pcca::cli
