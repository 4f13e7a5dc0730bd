#pragma once

#include <Eigen/Dense>
#include <utility>
#include <vector>

#include "d2pcca/data/panel.hpp"

namespace d2pcca::data {

// Sliding windows of one split. Each sequence is (T, p): the raw window minus
// its own column means, divided by the training-split column standard deviation.
struct WindowSet {
    std::size_t length = 0;
    std::vector<std::size_t> starts;  // first row of each window in the panel
    std::vector<Tensor> sequences;
    std::vector<Tensor> means;        // per-window column means, (p)
    Tensor scale;                     // (p), shared by both splits

    std::size_t size() const { return sequences.size(); }
};

struct WindowSplit {
    WindowSet train;
    WindowSet test;
};

// Population standard deviation of each column over rows [0, split).
Tensor training_scale(const PanelDataset& dataset, std::size_t split);

// Train windows come from rows [0, split), test windows from rows [split, end),
// (len - T) / step + 1 of each.
WindowSplit make_windows(const PanelDataset& dataset, std::size_t T, std::size_t step, std::size_t split);

// The last `fraction` of the windows (at least one when two or more exist) become validation windows.
std::pair<WindowSet, WindowSet> hold_out_validation(const WindowSet& windows, double fraction = 0.1);

std::vector<Eigen::MatrixXd> to_matrices(const std::vector<Tensor>& sequences);

}  // namespace d2pcca::data
