#pragma once

#include <exception>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "d2pcca/data/evaluate.hpp"
#include "d2pcca/lds/dpcca_params.hpp"
#include "d2pcca/training/checkpoint.hpp"
#include "run_config.hpp"

namespace d2pcca::cli {

// Progress lines go through this sink; the default writes to stderr.
using LogSink = std::function<void(const std::string&)>;
void set_log_sink(LogSink sink);
void log(const std::string& line);

// Exit codes: 0 success, 2 configuration, 3 data, 4 numerical, 5 I/O, 1 anything else.
inline constexpr int kExitConfig = 2;
inline constexpr int kExitData = 3;
inline constexpr int kExitNumerical = 4;
inline constexpr int kExitIo = 5;
int exit_code(const std::exception& error);

// Each command first writes <out>/<command>.config.json, a complete config
// that reruns the command when passed back through --config.
std::filesystem::path write_config_echo(const RunConfig& config, const std::string& command);

// Panel table, manifest, and the generating parameters (generator.ckpt).
void cmd_simulate(const RunConfig& config);

// Deep variants write last.ckpt, best.ckpt, trace.csv, and timing.csv; the
// linear baseline writes model.ckpt and em_trace.csv.
void cmd_train(const RunConfig& config, const std::optional<std::filesystem::path>& resume = std::nullopt);
void cmd_em_baseline(RunConfig config);

// One metrics.csv row per checkpoint, in the order given.
std::vector<data::MetricsRow> cmd_eval(const RunConfig& config, const std::vector<std::string>& checkpoints);

// Writes <out>/bands.csv for one test window; returns true when sampled latents were used.
bool cmd_reconstruct(const RunConfig& config, const std::string& checkpoint, std::size_t window);

// Linear baseline checkpoints share the archive container with kind "dpcca-em".
struct LinearCheckpoint {
    lds::DpccaParams params;
    std::string variant;
    std::uint64_t seed = 0;
    std::vector<double> log_likelihood_trace;
    nlohmann::json config = nlohmann::json::object();
};

void save_linear_checkpoint(const std::filesystem::path& path, const LinearCheckpoint& checkpoint);
LinearCheckpoint load_linear_checkpoint(const std::filesystem::path& path);

}  // namespace d2pcca::cli
