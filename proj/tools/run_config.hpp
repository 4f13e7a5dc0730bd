#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

#include "d2pcca/model/model.hpp"
#include "d2pcca/training/optimizer.hpp"
#include "d2pcca/training/train.hpp"
#include "json.hpp"

namespace d2pcca::cli {

// Synthetic dataset recipe used by `simulate`.
struct GeneratorConfig {
    std::string kind = "nonlinear";  // nonlinear | linear
    std::size_t rows = 503;
    std::size_t sets = 5;
    std::size_t columns_per_set = 10;
};

// Every hyperparameter of a run. Defaults are the published protocol, so a
// dataset path is the only required input.
struct RunConfig {
    std::string variant = "d2pcca+kl+iaf";
    std::uint64_t seed = 0;
    std::string out = "runs/default";

    struct {
        std::string table;     // CSV with a leading date column
        std::string manifest;  // JSON set manifest
        std::size_t test_rows = 50;
    } data;

    struct {
        std::size_t length = 30;
        std::size_t step = 1;
        double validation_fraction = 0.1;
    } windows;

    struct {
        std::size_t shared_dim = 1;
        std::size_t set_dim = 2;
    } latent;

    struct {
        std::string gate = "gru";
        std::size_t encoder_hidden = nets::kEncoderHidden;
    } model;

    struct {
        std::size_t layers = flows::kDefaultLayers;
        std::size_t hidden = flows::kDefaultHidden;
    } flow;

    training::OptimizerConfig optimizer;
    training::AnnealSchedule anneal;

    struct {
        std::size_t epochs = 300;
        std::size_t batch_size = 20;
        std::size_t samples = 1;
        std::size_t workers = 1;
        std::string kl_estimator = "analytic";  // analytic | sampled
    } training;

    struct {
        std::size_t max_iters = 100;
        double tol = 1e-6;
    } em;

    struct {
        std::string latents = "auto";  // auto | mean | sampled
        std::size_t window = 0;        // test window exported by `reconstruct`
    } eval;

    std::optional<GeneratorConfig> generator;

    training::Variant parsed_variant() const;
    void validate() const;  // ConfigError naming the offending key
};

// Strict reader: unknown keys and wrongly typed values are ConfigErrors.
RunConfig config_from_json(const nlohmann::json& j);
RunConfig read_config(const std::filesystem::path& path);

// Every effective value. Sections that the variant does not use are left out:
// flow only for +iaf variants, anneal only for +kl variants, em only for the
// linear baseline.
nlohmann::json config_to_json(const RunConfig& config);

// Command-line and environment overrides, applied on top of the file.
struct Overrides {
    std::optional<std::uint64_t> seed;
    std::optional<std::string> out;
    std::optional<std::string> variant;
    std::optional<std::string> data_dir;  // expects table.csv and manifest.json
    std::optional<std::string> workers;   // raw value of D2PCCA_WORKERS
};

void apply_overrides(RunConfig& config, const Overrides& overrides);

model::ModelSpec model_spec(const RunConfig& config, const std::vector<std::size_t>& obs_dims);
training::TrainConfig train_config(const RunConfig& config);

}  // namespace d2pcca::cli
