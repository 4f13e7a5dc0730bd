#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "d2pcca/data/windows.hpp"
#include "d2pcca/lds/dpcca_params.hpp"
#include "d2pcca/model/model.hpp"

namespace d2pcca::data {

// sqrt( sum_i sum_t sum_k (x - xhat)^2 / (N T) ) over N sequences of shape (T, p).
double rmse(const std::vector<Tensor>& reconstructions, const std::vector<Tensor>& truths);

// Auto picks sampled latents when a flow is attached (no analytic mean) and
// posterior means otherwise.
enum class LatentMode { Auto, PosteriorMean, Sampled };

bool uses_sampled_latents(const model::D2pccaModel& model, LatentMode mode);

struct Metrics {
    double elbo_per_step = 0.0;  // deep models: ELBO; linear baseline: exact log-likelihood
    double rmse = 0.0;
    bool sampled_latents = false;
};

// Reconstruction means of every window under the chosen latent mode.
std::vector<Tensor> reconstruct_windows(const model::D2pccaModel& model, const std::vector<Tensor>& windows,
                                        LatentMode mode, std::uint64_t seed);

Metrics evaluate(const model::D2pccaModel& model, const WindowSet& test, LatentMode mode, std::uint64_t seed);
Metrics evaluate_linear(const lds::DpccaParams& params, const WindowSet& test);

// Per step and coordinate: truth, mean, and the band mean +- 1.96 sd.
// Header: step,column,set,truth,mean,lower,upper; T * p data rows.
void write_bands(const std::filesystem::path& path, const Tensor& truth, const Tensor& mean, const Tensor& variance,
                 const std::vector<std::string>& columns, const std::vector<std::string>& column_sets);

// Returns true when sampled latents were used.
bool export_bands(const model::D2pccaModel& model, const Tensor& window, const PanelDataset& dataset,
                  const std::filesystem::path& path, LatentMode mode, std::uint64_t seed);
void export_bands_linear(const lds::DpccaParams& params, const Tensor& window, const PanelDataset& dataset,
                         const std::filesystem::path& path);

struct MetricsRow {
    std::string variant;
    std::string checkpoint;
    Metrics metrics;
};

// Header: variant,checkpoint,test_elbo_per_step,rmse,latents
void write_metrics_csv(const std::filesystem::path& path, const std::vector<MetricsRow>& rows);

}  // namespace d2pcca::data
