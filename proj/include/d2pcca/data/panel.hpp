#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "d2pcca/diffmath/tensor.hpp"

namespace d2pcca::data {

using diff::Tensor;

struct ObservationSet {
    std::string name;
    std::vector<std::string> columns;
};

// Time x column panel with columns grouped contiguously by set.
struct PanelDataset {
    std::vector<std::string> timestamps;
    std::vector<ObservationSet> sets;
    Tensor values;          // (rows, p), columns in set order
    std::size_t split = 0;  // rows [0, split) are training rows

    std::size_t rows() const { return timestamps.size(); }
    std::size_t dim() const;
    std::vector<std::size_t> obs_dims() const;
    std::vector<std::string> columns() const;
    void validate() const;
};

// Manifest: {"sets": [{"name": ..., "columns": [...]}, ...]} in set order.
std::vector<ObservationSet> read_manifest(const std::filesystem::path& path);
void write_manifest(const std::filesystem::path& path, const std::vector<ObservationSet>& sets);

// Table: header row, a `date` column of increasing ISO-8601 timestamps, numeric
// columns otherwise. Columns are reordered to manifest order; columns that no
// set mentions are ignored. The split is left at zero.
PanelDataset load_panel(const std::filesystem::path& table, const std::filesystem::path& manifest);

void write_table(const std::filesystem::path& path, const PanelDataset& dataset);

// Split leaving the last `test_rows` rows for testing.
std::size_t split_for_test_rows(const PanelDataset& dataset, std::size_t test_rows);

}  // namespace d2pcca::data
