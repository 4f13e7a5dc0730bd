#include "d2pcca/training/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>
#include <sstream>
#include <thread>

#include "d2pcca/errors.hpp"

namespace d2pcca::training {

namespace fs = std::filesystem;

namespace {

constexpr std::uint64_t kShuffleStream = 1;
constexpr std::uint64_t kBatchStream = 2;
constexpr std::uint64_t kValidationStream = 3;

struct VariantName {
    Variant variant;
    const char* name;
};

constexpr VariantName kVariantNames[] = {{Variant::DpccaEm, "dpcca-em"},
                                         {Variant::D2pcca, "d2pcca"},
                                         {Variant::D2pccaKl, "d2pcca+kl"},
                                         {Variant::D2pccaIaf, "d2pcca+iaf"},
                                         {Variant::D2pccaKlIaf, "d2pcca+kl+iaf"}};

std::vector<Parameter*> mutable_parameters(const model::D2pccaModel& model) {
    // The tape only reads parameter values; gradients come back by Parameter address.
    return const_cast<model::D2pccaModel&>(model).parameters();
}

std::string format_double(double v) {
    if (std::isnan(v)) return "nan";
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

// Wall-clock values of earlier epochs survive a resume through the previous timing file.
void recover_wall_seconds(const fs::path& path, std::vector<EpochMetrics>& trace) {
    std::ifstream f(path);
    if (!f) return;
    std::string line;
    std::getline(f, line);
    while (std::getline(f, line)) {
        std::istringstream row(line);
        std::string epoch, wall;
        if (!std::getline(row, epoch, ',') || !std::getline(row, wall)) continue;
        try {
            const std::size_t e = std::stoul(epoch);
            for (EpochMetrics& m : trace)
                if (m.epoch == e && std::isnan(m.wall_seconds)) m.wall_seconds = std::stod(wall);
        } catch (const std::exception&) {
            continue;
        }
    }
}

}  // namespace

const char* to_string(Variant v) {
    for (const auto& [variant, name] : kVariantNames)
        if (variant == v) return name;
    return "unknown";
}

Variant variant_from_string(std::string_view name) {
    for (const auto& [variant, n] : kVariantNames)
        if (name == n) return variant;
    throw ConfigError("unknown variant '" + std::string(name) +
                      "' (expected dpcca-em, d2pcca, d2pcca+kl, d2pcca+iaf, or d2pcca+kl+iaf)");
}

bool uses_flow(Variant v) { return v == Variant::D2pccaIaf || v == Variant::D2pccaKlIaf; }
bool uses_annealing(Variant v) { return v == Variant::D2pccaKl || v == Variant::D2pccaKlIaf; }

void TrainConfig::validate() const {
    optimizer.validate();
    anneal.validate();
    if (epochs == 0) throw ConfigError("training: epochs must be positive");
    if (batch_size == 0) throw ConfigError("training: batch size must be positive");
    if (workers == 0) throw ConfigError("training: worker count must be positive");
    if (samples == 0) throw ConfigError("training: sample count must be positive");
}

TrainState start_state(model::D2pccaModel& model, const TrainConfig& config) {
    return TrainState{0, -std::numeric_limits<double>::infinity(), {}, ClippedAdam(config.optimizer, model.parameters())};
}

TrainState resume_state(model::D2pccaModel& model, const LoadedCheckpoint& checkpoint, const TrainConfig& config) {
    TrainState s{checkpoint.meta.epoch, checkpoint.meta.best_val, checkpoint.meta.trace,
                 ClippedAdam(config.optimizer, model.parameters())};
    if (checkpoint.has_optimizer) s.optimizer.restore(checkpoint.adam_steps, checkpoint.adam_m, checkpoint.adam_v);
    return s;
}

std::uint64_t derive_seed(std::initializer_list<std::uint64_t> parts) {
    std::vector<std::uint32_t> words;
    for (std::uint64_t p : parts) {
        words.push_back(static_cast<std::uint32_t>(p & 0xffffffffu));
        words.push_back(static_cast<std::uint32_t>(p >> 32));
    }
    std::seed_seq seq(words.begin(), words.end());
    std::uint32_t out[2];
    seq.generate(out, out + 2);
    return (static_cast<std::uint64_t>(out[1]) << 32) | out[0];
}

BatchGradient batch_gradient(const model::D2pccaModel& model, const std::vector<const Tensor*>& sequences,
                             const model::ElboOptions& options, std::uint64_t noise_seed, std::size_t workers) {
    if (sequences.empty()) throw ShapeError("batch_gradient: empty batch");
    const std::vector<Parameter*> params = mutable_parameters(model);
    const flows::FlowStack* flow = model.flow ? &*model.flow : nullptr;
    const std::size_t B = sequences.size();
    const std::size_t chunks = std::min(workers, B);

    struct ChunkResult {
        double objective = 0.0, elbo = 0.0;
        std::vector<Tensor> grads;
        std::exception_ptr error;
    };
    std::vector<ChunkResult> results(chunks);
    auto run = [&](std::size_t c) {
        try {
            const std::size_t lo = c * B / chunks, hi = (c + 1) * B / chunks;
            const std::vector<const Tensor*> part(sequences.begin() + static_cast<std::ptrdiff_t>(lo),
                                                  sequences.begin() + static_cast<std::ptrdiff_t>(hi));
            model::GaussianNoise noise(derive_seed({noise_seed, c}));
            diff::Tape tape;
            const model::ElboTerms terms =
                model::elbo_with_flow(tape, model, model::SequenceBatch::from_sequences(part), noise, options, flow);
            tape.backward(scale(terms.objective, -1.0 / static_cast<double>(B)));
            results[c].objective = terms.objective.value().item();
            results[c].elbo = terms.elbo.value().item();
            for (const Parameter* p : params) results[c].grads.push_back(tape.grad(*p));
        } catch (...) {
            results[c].error = std::current_exception();
        }
    };
    if (chunks == 1) {
        run(0);
    } else {
        std::vector<std::thread> threads;
        for (std::size_t c = 0; c < chunks; ++c) threads.emplace_back(run, c);
        for (auto& t : threads) t.join();
    }

    BatchGradient out;
    for (std::size_t c = 0; c < chunks; ++c) {
        if (results[c].error) std::rethrow_exception(results[c].error);
        out.objective += results[c].objective;
        out.elbo += results[c].elbo;
        if (c == 0) {
            out.grads = std::move(results[0].grads);
            continue;
        }
        for (std::size_t i = 0; i < out.grads.size(); ++i) {
            auto acc = out.grads[i].values();
            const auto add = results[c].grads[i].values();
            for (std::size_t k = 0; k < acc.size(); ++k) acc[k] += add[k];
        }
    }
    return out;
}

double elbo_per_step(const model::D2pccaModel& model, const std::vector<Tensor>& sequences, std::uint64_t noise_seed,
                     std::size_t batch_size, const model::ElboOptions& options) {
    if (sequences.empty()) return std::nan("");
    const flows::FlowStack* flow = model.flow ? &*model.flow : nullptr;
    model::ElboOptions opt = options;
    opt.beta = 1.0;
    model::GaussianNoise noise(noise_seed);
    double total = 0.0;
    for (std::size_t lo = 0; lo < sequences.size(); lo += batch_size) {
        const std::size_t hi = std::min(sequences.size(), lo + batch_size);
        std::vector<const Tensor*> part;
        for (std::size_t i = lo; i < hi; ++i) part.push_back(&sequences[i]);
        diff::Tape tape;
        total += model::elbo_with_flow(tape, model, model::SequenceBatch::from_sequences(part), noise, opt, flow)
                     .elbo.value()
                     .item();
    }
    const double steps = static_cast<double>(sequences.size() * sequences.front().dim(0));
    return total / steps;
}

void write_trace_csv(const fs::path& path, const std::vector<EpochMetrics>& trace) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw IoError("cannot open " + path.string() + " for writing");
    f << "epoch,beta,train_elbo_per_step,val_elbo_per_step\n";
    for (const EpochMetrics& m : trace)
        f << m.epoch << ',' << format_double(m.beta) << ',' << format_double(m.train_elbo_per_step) << ','
          << format_double(m.val_elbo_per_step) << '\n';
    if (!f) throw IoError("failed writing " + path.string());
}

void write_timing_csv(const fs::path& path, const std::vector<EpochMetrics>& trace) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw IoError("cannot open " + path.string() + " for writing");
    f << "epoch,wall_seconds\n";
    for (const EpochMetrics& m : trace) f << m.epoch << ',' << format_double(m.wall_seconds) << '\n';
    if (!f) throw IoError("failed writing " + path.string());
}

void train(model::D2pccaModel& model, TrainState& state, const std::vector<Tensor>& train_sequences,
           const std::vector<Tensor>& val_sequences, const TrainConfig& config, const EpochCallback& on_epoch) {
    config.validate();
    if (train_sequences.empty()) throw DataError("training: no training windows");
    for (const Tensor& s : train_sequences)
        if (s.shape() != train_sequences.front().shape())
            throw DataError("training: windows differ in shape");
    const std::size_t N = train_sequences.size();
    const double steps_per_epoch = static_cast<double>(N * train_sequences.front().dim(0));
    const bool writes = !config.out_dir.empty();
    if (writes) {
        fs::create_directories(config.out_dir);
        recover_wall_seconds(config.out_dir / "timing.csv", state.trace);
    }

    double wall_offset = 0.0;
    if (!state.trace.empty() && std::isfinite(state.trace.back().wall_seconds))
        wall_offset = state.trace.back().wall_seconds;
    const auto started = std::chrono::steady_clock::now();

    std::vector<std::size_t> order(N);
    for (std::size_t e = state.epoch; e < config.epochs; ++e) {
        const double beta = config.anneal_kl ? kl_weight(config.anneal, e) : 1.0;
        model::ElboOptions options{config.samples, config.kl, beta};

        for (std::size_t i = 0; i < N; ++i) order[i] = i;
        std::mt19937_64 shuffle_rng(derive_seed({config.seed, kShuffleStream, e}));
        std::shuffle(order.begin(), order.end(), shuffle_rng);

        double train_elbo = 0.0;
        for (std::size_t lo = 0, batch = 0; lo < N; lo += config.batch_size, ++batch) {
            const std::size_t hi = std::min(N, lo + config.batch_size);
            std::vector<const Tensor*> part;
            for (std::size_t i = lo; i < hi; ++i) part.push_back(&train_sequences[order[i]]);
            BatchGradient g;
            try {
                g = batch_gradient(model, part, options, derive_seed({config.seed, kBatchStream, e, batch}),
                                   config.workers);
                if (!std::isfinite(g.objective)) throw NumericalError("non-finite objective");
                state.optimizer.step(g.grads);
            } catch (const NumericalError& err) {
                throw NumericalError("training aborted in epoch " + std::to_string(e) + ", batch " +
                                     std::to_string(batch) + ": " + err.what() +
                                     (writes ? "; last good checkpoint kept at " + (config.out_dir / "last.ckpt").string()
                                             : std::string()));
            }
            train_elbo += g.elbo;
        }

        EpochMetrics m;
        m.epoch = e;
        m.beta = beta;
        m.train_elbo_per_step = train_elbo / steps_per_epoch;
        model::ElboOptions eval_options{1, config.kl, 1.0};
        m.val_elbo_per_step = elbo_per_step(model, val_sequences, derive_seed({config.seed, kValidationStream, e}),
                                            config.batch_size, eval_options);
        m.wall_seconds = wall_offset + std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
        state.trace.push_back(m);
        state.epoch = e + 1;

        // Without validation windows the training ELBO picks the best checkpoint.
        const double score = val_sequences.empty() ? m.train_elbo_per_step : m.val_elbo_per_step;
        const bool improved = score > state.best_val;
        if (improved) state.best_val = score;
        if (writes) {
            CheckpointMeta meta{config.variant, config.seed, state.epoch, state.best_val, state.trace, config.config_echo};
            if (improved) save_checkpoint(config.out_dir / "best.ckpt", model, &state.optimizer, meta);
            save_checkpoint(config.out_dir / "last.ckpt", model, &state.optimizer, meta);
            write_trace_csv(config.out_dir / "trace.csv", state.trace);
            write_timing_csv(config.out_dir / "timing.csv", state.trace);
        }
        if (on_epoch) on_epoch(m);
    }
}

}  // namespace d2pcca::training
