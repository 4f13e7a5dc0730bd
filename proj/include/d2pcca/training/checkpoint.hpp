#pragma once

#include <cstdint>
#include <filesystem>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "d2pcca/model/model.hpp"
#include "d2pcca/training/optimizer.hpp"
#include "json.hpp"

namespace d2pcca::training {

// Binary container: 8-byte magic, u32 version, u64 header length, JSON header,
// u64 tensor count, then per tensor u32 name length, name, u32 rank, u64 dims,
// and float64 values. Every integer and float is little-endian.
inline constexpr std::uint32_t kArchiveVersion = 1;

struct Archive {
    nlohmann::json header;
    std::vector<std::pair<std::string, Tensor>> tensors;

    const Tensor& tensor(const std::string& name) const;  // IoError when absent
    bool has(const std::string& name) const;
};

// Written to a sibling temporary and renamed, so an interrupted write never
// replaces a good file.
void write_archive(const std::filesystem::path& path, const Archive& archive);
Archive read_archive(const std::filesystem::path& path);

nlohmann::json spec_to_json(const model::ModelSpec& spec);
model::ModelSpec spec_from_json(const nlohmann::json& j);

struct EpochMetrics {
    std::size_t epoch = 0;
    double beta = 1.0;
    double train_elbo_per_step = 0.0;
    double val_elbo_per_step = 0.0;
    double wall_seconds = 0.0;  // measured, never persisted in checkpoints
};

struct CheckpointMeta {
    std::string variant;
    std::uint64_t seed = 0;
    std::size_t epoch = 0;  // epochs completed
    double best_val = -std::numeric_limits<double>::infinity();
    std::vector<EpochMetrics> trace;
    nlohmann::json config = nlohmann::json::object();
};

void save_checkpoint(const std::filesystem::path& path, const model::D2pccaModel& model, const ClippedAdam* optimizer,
                     const CheckpointMeta& meta);

struct LoadedCheckpoint {
    model::D2pccaModel model;
    CheckpointMeta meta;
    bool has_optimizer = false;
    std::uint64_t adam_steps = 0;
    std::vector<Tensor> adam_m, adam_v;
};

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

// Copies named values into the model; names and shapes must match exactly.
void assign_parameters(model::D2pccaModel& model, const Archive& archive);

// Human-readable {name: {shape, values}} dump for debugging.
void dump_weights_json(const std::filesystem::path& path, const model::D2pccaModel& model);

}  // namespace d2pcca::training
