#include "d2pcca/data/synthetic.hpp"

#include <Eigen/SVD>
#include <chrono>
#include <cmath>
#include <cstdio>

namespace d2pcca::data {

using diff::Shape;

std::vector<ObservationSet> default_sets(const std::vector<std::size_t>& obs_dims) {
    std::vector<ObservationSet> sets;
    for (std::size_t j = 0; j < obs_dims.size(); ++j) {
        ObservationSet s{"set" + std::to_string(j + 1), {}};
        for (std::size_t k = 0; k < obs_dims[j]; ++k)
            s.columns.push_back("s" + std::to_string(j + 1) + "_x" + std::to_string(k + 1));
        sets.push_back(std::move(s));
    }
    return sets;
}

std::vector<std::string> daily_dates(std::size_t rows) {
    using namespace std::chrono;
    std::vector<std::string> out;
    sys_days day = year{2000} / January / 1;
    char buf[16];
    for (std::size_t r = 0; r < rows; ++r, day += days{1}) {
        const year_month_day ymd{day};
        std::snprintf(buf, sizeof(buf), "%04d-%02u-%02u", static_cast<int>(ymd.year()),
                      static_cast<unsigned>(ymd.month()), static_cast<unsigned>(ymd.day()));
        out.emplace_back(buf);
    }
    return out;
}

PanelDataset panel_from_matrix(const Eigen::MatrixXd& x, const std::vector<std::size_t>& obs_dims) {
    PanelDataset d;
    d.sets = default_sets(obs_dims);
    d.timestamps = daily_dates(static_cast<std::size_t>(x.rows()));
    d.values = Tensor(Shape{static_cast<std::size_t>(x.rows()), static_cast<std::size_t>(x.cols())});
    for (Eigen::Index r = 0; r < x.rows(); ++r)
        for (Eigen::Index c = 0; c < x.cols(); ++c)
            d.values.at(static_cast<std::size_t>(r), static_cast<std::size_t>(c)) = x(r, c);
    d.validate();
    return d;
}

PanelDataset simulate_linear_panel(const lds::DpccaParams& params, std::size_t rows, std::mt19937_64& rng) {
    return panel_from_matrix(lds::simulate(params, rows, rng).x, params.obs_dims());
}

namespace {

double spectral_norm(const Tensor& w) {
    Eigen::MatrixXd m(static_cast<Eigen::Index>(w.dim(0)), static_cast<Eigen::Index>(w.dim(1)));
    for (std::size_t r = 0; r < w.dim(0); ++r)
        for (std::size_t c = 0; c < w.dim(1); ++c) m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = w.at(r, c);
    return Eigen::JacobiSVD<Eigen::MatrixXd>(m).singularValues()(0);
}

}  // namespace

model::D2pccaModel nonlinear_generator(const model::ModelSpec& spec, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    model::D2pccaModel m = model::make_model(spec, rng);
    std::normal_distribution<double> nd(0.0, 1.0);
    auto randomize = [&](nets::Linear& l, double weight_sd, double bias_sd) {
        for (double& v : l.weight.value.values()) v = weight_sd * nd(rng);
        for (double& v : l.bias.value.values()) v = bias_sd * nd(rng);
    };
    for (auto& t : m.transitions) {
        const double d = static_cast<double>(t.shortcut.weight.value.dim(0));
        const double hid = static_cast<double>(t.h.layers[0].out());
        randomize(t.h.layers[0], 1.0 / std::sqrt(d), 0.5);
        randomize(t.h.layers[1], 1.0 / std::sqrt(hid), 0.0);
        // Rescale so the proposal is a 0.9-Lipschitz map: paths stay stationary.
        for (auto& layer : t.h.layers) {
            const double f = std::sqrt(0.9) / spectral_norm(layer.weight.value);
            for (double& v : layer.weight.value.values()) v *= f;
        }
        randomize(t.g.layers[0], 1.0 / std::sqrt(d), 0.5);
        randomize(t.g.layers[1], 1.0 / std::sqrt(hid), 0.0);
        t.shortcut.weight.value.fill(0.0);
        for (std::size_t r = 0; r < t.shortcut.weight.value.dim(0); ++r) t.shortcut.weight.value.at(r, r) = 0.5;
        t.shortcut.bias.value.fill(0.0);
        t.s_head.weight.value.fill(0.0);
        t.s_head.bias.value.fill(std::log(std::expm1(0.15)));  // transition variance 0.15
    }
    for (auto& e : m.emissions) {
        const double in = static_cast<double>(e.trunk.layers[0].in());
        const double hid = static_cast<double>(e.trunk.layers[0].out());
        randomize(e.trunk.layers[0], 2.0 / std::sqrt(in), 0.7);
        randomize(e.trunk.layers[1], 1.5 / std::sqrt(hid), 0.3);
        randomize(e.mean_head, 1.0 / std::sqrt(hid), 0.0);

        // Unit 0 of the second trunk layer becomes a volatility unit
        // relu(3 z0) + relu(-3 z0) = 3 |z0|, fed by units 0 and 1 of the first.
        // It leaves the mean alone and raises every column's log-variance above
        // a base of log 0.05, so noise swings with the shared factor's magnitude.
        auto& w1 = e.trunk.layers[0].weight.value;
        auto& w2 = e.trunk.layers[1].weight.value;
        for (std::size_t i = 0; i < w1.dim(0); ++i) w1.at(i, 0) = w1.at(i, 1) = 0.0;
        for (std::size_t i = 0; i < w2.dim(0); ++i) w2.at(i, 0) = 0.0;
        w1.at(0, 0) = 3.0;
        w1.at(0, 1) = -3.0;
        w2.at(0, 0) = w2.at(1, 0) = 1.0;
        e.trunk.layers[0].bias.value[0] = e.trunk.layers[0].bias.value[1] = 0.0;
        e.trunk.layers[1].bias.value[0] = 0.0;
        const std::size_t cols = e.mean_head.weight.value.dim(1);
        for (std::size_t c = 0; c < cols; ++c) e.mean_head.weight.value.at(0, c) = 0.0;
        e.logvar_head.weight.value.fill(0.0);
        for (std::size_t c = 0; c < cols; ++c)
            e.logvar_head.weight.value.at(0, c) = 1.6 * (0.75 + 0.5 * static_cast<double>(c) / static_cast<double>(cols));
        e.logvar_head.bias.value.fill(std::log(0.05));
    }
    return m;
}

model::GeneratedPaths simulate_paths(const model::D2pccaModel& generator, std::size_t rows, std::uint64_t seed) {
    model::GaussianNoise noise(seed);
    return model::generate(generator, rows, 1, noise);
}

PanelDataset simulate_nonlinear_panel(const model::D2pccaModel& generator, std::size_t rows, std::uint64_t seed) {
    const model::GeneratedPaths paths = simulate_paths(generator, rows, seed);
    const std::size_t p = generator.obs_dim();
    Eigen::MatrixXd x(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(p));
    for (std::size_t t = 0; t < rows; ++t)
        for (std::size_t k = 0; k < p; ++k)
            x(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(k)) = paths.x[t * p + k];
    return panel_from_matrix(x, generator.spec.obs_dims);
}

}  // namespace d2pcca::data
