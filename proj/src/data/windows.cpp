#include "d2pcca/data/windows.hpp"

#include <cmath>

#include "d2pcca/errors.hpp"

namespace d2pcca::data {

using diff::Shape;

namespace {

WindowSet windows_over(const PanelDataset& d, std::size_t begin, std::size_t end, std::size_t T, std::size_t step,
                       const Tensor& scale) {
    WindowSet w;
    w.length = T;
    w.scale = scale;
    const std::size_t p = d.dim();
    for (std::size_t s = begin; s + T <= end; s += step) {
        Tensor seq(Shape{T, p});
        Tensor mean(Shape{p});
        for (std::size_t k = 0; k < p; ++k) {
            double m = 0.0;
            for (std::size_t t = 0; t < T; ++t) m += d.values.at(s + t, k);
            m /= static_cast<double>(T);
            mean[k] = m;
            for (std::size_t t = 0; t < T; ++t) seq.at(t, k) = (d.values.at(s + t, k) - m) / scale[k];
        }
        w.starts.push_back(s);
        w.sequences.push_back(std::move(seq));
        w.means.push_back(std::move(mean));
    }
    return w;
}

}  // namespace

Tensor training_scale(const PanelDataset& d, std::size_t split) {
    if (split < 2 || split > d.rows()) throw DataError("training split needs at least two rows");
    const std::size_t p = d.dim();
    Tensor scale(Shape{p});
    for (std::size_t k = 0; k < p; ++k) {
        double mean = 0.0;
        for (std::size_t r = 0; r < split; ++r) mean += d.values.at(r, k);
        mean /= static_cast<double>(split);
        double ss = 0.0;
        for (std::size_t r = 0; r < split; ++r) ss += (d.values.at(r, k) - mean) * (d.values.at(r, k) - mean);
        scale[k] = std::sqrt(ss / static_cast<double>(split));
        if (!(scale[k] > 0.0)) throw DataError("column '" + d.columns()[k] + "' is constant over the training rows");
    }
    return scale;
}

WindowSplit make_windows(const PanelDataset& d, std::size_t T, std::size_t step, std::size_t split) {
    if (T == 0 || step == 0) throw ConfigError("window length and step must be positive");
    if (split < T)
        throw DataError("training split of " + std::to_string(split) + " rows is shorter than one window of " +
                        std::to_string(T));
    if (split > d.rows() || d.rows() - split < T)
        throw DataError("test split of " + std::to_string(d.rows() - std::min(split, d.rows())) +
                        " rows is shorter than one window of " + std::to_string(T));
    const Tensor scale = training_scale(d, split);
    return {windows_over(d, 0, split, T, step, scale), windows_over(d, split, d.rows(), T, step, scale)};
}

std::pair<WindowSet, WindowSet> hold_out_validation(const WindowSet& w, double fraction) {
    if (!(fraction >= 0.0 && fraction < 1.0)) throw ConfigError("validation fraction must lie in [0, 1)");
    std::size_t held = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(w.size())));
    if (fraction > 0.0 && held == 0 && w.size() >= 2) held = 1;
    const std::size_t keep = w.size() - held;
    WindowSet train, val;
    for (WindowSet* s : {&train, &val}) {
        s->length = w.length;
        s->scale = w.scale;
    }
    for (std::size_t i = 0; i < w.size(); ++i) {
        WindowSet& dst = i < keep ? train : val;
        dst.starts.push_back(w.starts[i]);
        dst.sequences.push_back(w.sequences[i]);
        dst.means.push_back(w.means[i]);
    }
    return {std::move(train), std::move(val)};
}

std::vector<Eigen::MatrixXd> to_matrices(const std::vector<Tensor>& sequences) {
    std::vector<Eigen::MatrixXd> out;
    for (const Tensor& s : sequences) {
        Eigen::MatrixXd m(static_cast<Eigen::Index>(s.dim(0)), static_cast<Eigen::Index>(s.dim(1)));
        for (std::size_t t = 0; t < s.dim(0); ++t)
            for (std::size_t k = 0; k < s.dim(1); ++k)
                m(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(k)) = s.at(t, k);
        out.push_back(std::move(m));
    }
    return out;
}

}  // namespace d2pcca::data
