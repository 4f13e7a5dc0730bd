#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "d2pcca/data/panel.hpp"
#include "d2pcca/lds/dpcca_params.hpp"
#include "d2pcca/model/model.hpp"

namespace d2pcca::data {

// Sets named set1..setD with columns s<j>_x<k>.
std::vector<ObservationSet> default_sets(const std::vector<std::size_t>& obs_dims);

// Consecutive calendar days starting 2000-01-01, ISO-8601.
std::vector<std::string> daily_dates(std::size_t rows);

PanelDataset panel_from_matrix(const Eigen::MatrixXd& x, const std::vector<std::size_t>& obs_dims);

PanelDataset simulate_linear_panel(const lds::DpccaParams& params, std::size_t rows, std::mt19937_64& rng);

// A D2PCCA model with hand-set weights whose paths are clearly nonlinear:
// open gates over random relu proposals and biased relu emission trunks.
// Emission noise is state-dependent: its log-variance rises with |z0|,
// which a fixed-variance linear model cannot follow. Random draws come from
// `seed` only.
model::D2pccaModel nonlinear_generator(const model::ModelSpec& spec, std::uint64_t seed);

// One path of `rows` steps from the generator; rows are time steps.
model::GeneratedPaths simulate_paths(const model::D2pccaModel& generator, std::size_t rows, std::uint64_t seed);
PanelDataset simulate_nonlinear_panel(const model::D2pccaModel& generator, std::size_t rows, std::uint64_t seed);

}  // namespace d2pcca::data
