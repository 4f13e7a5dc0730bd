#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string_view>
#include <vector>

#include "d2pcca/model/model.hpp"
#include "d2pcca/training/checkpoint.hpp"
#include "d2pcca/training/optimizer.hpp"

namespace d2pcca::training {

// Table I rows: the linear EM baseline and the four deep configurations.
enum class Variant { DpccaEm, D2pcca, D2pccaKl, D2pccaIaf, D2pccaKlIaf };

const char* to_string(Variant v);
Variant variant_from_string(std::string_view name);
bool uses_flow(Variant v);
bool uses_annealing(Variant v);

struct TrainConfig {
    OptimizerConfig optimizer;
    AnnealSchedule anneal;
    bool anneal_kl = false;  // false: beta = 1 from the first epoch
    std::size_t epochs = 300;
    std::size_t batch_size = 20;
    std::uint64_t seed = 0;
    std::size_t workers = 1;  // part of the determinism key: chunking follows it
    model::KlEstimator kl = model::KlEstimator::Analytic;
    std::size_t samples = 1;

    // When set: trace.csv, timing.csv, last.ckpt, and best.ckpt are written here.
    std::filesystem::path out_dir;
    std::string variant = "d2pcca";
    nlohmann::json config_echo = nlohmann::json::object();

    void validate() const;
};

// The optimizer holds pointers into the model it was created for.
struct TrainState {
    std::size_t epoch = 0;  // epochs completed
    double best_val = -std::numeric_limits<double>::infinity();
    std::vector<EpochMetrics> trace;
    ClippedAdam optimizer;
};

TrainState start_state(model::D2pccaModel& model, const TrainConfig& config);

// `model` must already hold the checkpoint's parameters (for example checkpoint.model itself).
TrainState resume_state(model::D2pccaModel& model, const LoadedCheckpoint& checkpoint, const TrainConfig& config);

// A seed for one named random stream of a run, e.g. (seed, epoch, batch).
std::uint64_t derive_seed(std::initializer_list<std::uint64_t> parts);

// Gradient of the loss -objective / batch for the given sequences.
struct BatchGradient {
    double objective = 0.0;  // beta-weighted, summed over the batch
    double elbo = 0.0;       // summed over the batch
    std::vector<Tensor> grads;
};
BatchGradient batch_gradient(const model::D2pccaModel& model, const std::vector<const Tensor*>& sequences,
                             const model::ElboOptions& options, std::uint64_t noise_seed, std::size_t workers);

// Mean ELBO per time step over all sequences (beta = 1, seeded noise).
double elbo_per_step(const model::D2pccaModel& model, const std::vector<Tensor>& sequences, std::uint64_t noise_seed,
                     std::size_t batch_size, const model::ElboOptions& options = {});

using EpochCallback = std::function<void(const EpochMetrics&)>;

// Runs epochs state.epoch .. config.epochs - 1. Each epoch shuffles the training
// windows, steps through mini-batches (the last one may be short), and records
// train and validation ELBO per step. A non-finite objective aborts with a
// NumericalError; checkpoints on disk are left at the last completed epoch.
void train(model::D2pccaModel& model, TrainState& state, const std::vector<Tensor>& train_sequences,
           const std::vector<Tensor>& val_sequences, const TrainConfig& config, const EpochCallback& on_epoch = {});

// trace.csv holds only seeded quantities, so reruns match byte for byte;
// wall-clock seconds go to a separate timing.csv.
void write_trace_csv(const std::filesystem::path& path, const std::vector<EpochMetrics>& trace);
void write_timing_csv(const std::filesystem::path& path, const std::vector<EpochMetrics>& trace);

}  // namespace d2pcca::training
