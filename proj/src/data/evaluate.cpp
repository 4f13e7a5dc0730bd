#include "d2pcca/data/evaluate.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>

#include "d2pcca/errors.hpp"
#include "d2pcca/lds/kalman.hpp"
#include "d2pcca/training/train.hpp"

namespace d2pcca::data {

namespace fs = std::filesystem;
using diff::Shape;

namespace {

constexpr std::size_t kEvalBatch = 20;
constexpr double kBandZ = 1.96;

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

std::vector<std::string> column_sets(const PanelDataset& d) {
    std::vector<std::string> out;
    for (const auto& s : d.sets) out.insert(out.end(), s.columns.size(), s.name);
    return out;
}

Tensor from_matrix(const Eigen::MatrixXd& m) {
    Tensor t(Shape{static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())});
    for (Eigen::Index r = 0; r < m.rows(); ++r)
        for (Eigen::Index c = 0; c < m.cols(); ++c) t.at(static_cast<std::size_t>(r), static_cast<std::size_t>(c)) = m(r, c);
    return t;
}

}  // namespace

double rmse(const std::vector<Tensor>& recon, const std::vector<Tensor>& truth) {
    if (recon.size() != truth.size())
        throw ShapeError("rmse: " + std::to_string(recon.size()) + " reconstructions for " +
                         std::to_string(truth.size()) + " sequences");
    if (truth.empty()) throw ShapeError("rmse: no sequences");
    const Shape& shape = truth.front().shape();
    if (shape.size() != 2) throw ShapeError("rmse: sequences must be (T, p)");
    double total = 0.0;
    for (std::size_t i = 0; i < truth.size(); ++i) {
        if (truth[i].shape() != shape || recon[i].shape() != shape)
            throw ShapeError("rmse: sequence " + std::to_string(i) + " has shape " + diff::to_string(recon[i].shape()) +
                             " against " + diff::to_string(shape));
        for (std::size_t k = 0; k < truth[i].size(); ++k) {
            const double e = recon[i][k] - truth[i][k];
            total += e * e;
        }
    }
    return std::sqrt(total / static_cast<double>(truth.size() * shape[0]));
}

bool uses_sampled_latents(const model::D2pccaModel& model, LatentMode mode) {
    switch (mode) {
        case LatentMode::Auto: return model.flow.has_value();
        case LatentMode::PosteriorMean: return false;
        case LatentMode::Sampled: return true;
    }
    return false;
}

std::vector<Tensor> reconstruct_windows(const model::D2pccaModel& model, const std::vector<Tensor>& windows,
                                        LatentMode mode, std::uint64_t seed) {
    const auto how = uses_sampled_latents(model, mode) ? model::ReconstructMode::Sampled
                                                        : model::ReconstructMode::PosteriorMean;
    model::GaussianNoise noise(seed);
    std::vector<Tensor> out;
    for (std::size_t lo = 0; lo < windows.size(); lo += kEvalBatch) {
        const std::size_t hi = std::min(windows.size(), lo + kEvalBatch);
        std::vector<const Tensor*> part;
        for (std::size_t i = lo; i < hi; ++i) part.push_back(&windows[i]);
        const model::SequenceBatch batch = model::SequenceBatch::from_sequences(part);
        const model::Reconstruction r = model::reconstruct(model, batch, how, noise);
        for (std::size_t b = 0; b < hi - lo; ++b) {
            Tensor seq(Shape{batch.length(), batch.obs_dim()});
            for (std::size_t t = 0; t < batch.length(); ++t)
                for (std::size_t k = 0; k < batch.obs_dim(); ++k) seq.at(t, k) = r.mean[t].at(b, k);
            out.push_back(std::move(seq));
        }
    }
    return out;
}

Metrics evaluate(const model::D2pccaModel& model, const WindowSet& test, LatentMode mode, std::uint64_t seed) {
    if (test.size() == 0) throw DataError("evaluate: no test windows");
    Metrics m;
    m.elbo_per_step = training::elbo_per_step(model, test.sequences, training::derive_seed({seed, 1}), kEvalBatch);
    m.sampled_latents = uses_sampled_latents(model, mode);
    m.rmse = rmse(reconstruct_windows(model, test.sequences, mode, training::derive_seed({seed, 2})), test.sequences);
    return m;
}

Metrics evaluate_linear(const lds::DpccaParams& params, const WindowSet& test) {
    if (test.size() == 0) throw DataError("evaluate: no test windows");
    const auto seqs = to_matrices(test.sequences);
    Metrics m;
    m.elbo_per_step = lds::log_likelihood(params, seqs) / static_cast<double>(test.size() * test.length);
    std::vector<Tensor> recon;
    for (const auto& x : seqs) recon.push_back(from_matrix(lds::reconstruct(params, x).mean));
    m.rmse = rmse(recon, test.sequences);
    return m;
}

void write_bands(const fs::path& path, const Tensor& truth, const Tensor& mean, const Tensor& variance,
                 const std::vector<std::string>& columns, const std::vector<std::string>& sets) {
    if (truth.shape() != mean.shape() || truth.shape() != variance.shape() || truth.rank() != 2 ||
        columns.size() != truth.dim(1) || sets.size() != truth.dim(1))
        throw ShapeError("write_bands: truth, mean, variance, and column names disagree in shape");
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream f(path);
    if (!f) throw IoError("cannot open " + path.string() + " for writing");
    f << "step,column,set,truth,mean,lower,upper\n";
    for (std::size_t t = 0; t < truth.dim(0); ++t)
        for (std::size_t k = 0; k < truth.dim(1); ++k) {
            const double mu = mean.at(t, k), half = kBandZ * std::sqrt(variance.at(t, k));
            f << t + 1 << ',' << columns[k] << ',' << sets[k] << ',' << fmt(truth.at(t, k)) << ',' << fmt(mu) << ','
              << fmt(mu - half) << ',' << fmt(mu + half) << '\n';
        }
    if (!f) throw IoError("failed writing " + path.string());
}

bool export_bands(const model::D2pccaModel& model, const Tensor& window, const PanelDataset& dataset,
                  const fs::path& path, LatentMode mode, std::uint64_t seed) {
    const bool sampled = uses_sampled_latents(model, mode);
    model::GaussianNoise noise(seed);
    const model::Reconstruction r =
        model::reconstruct(model, model::SequenceBatch::from_sequences(std::vector<Tensor>{window}),
                           sampled ? model::ReconstructMode::Sampled : model::ReconstructMode::PosteriorMean, noise);
    Tensor mean(window.shape()), var(window.shape());
    for (std::size_t t = 0; t < window.dim(0); ++t)
        for (std::size_t k = 0; k < window.dim(1); ++k) {
            mean.at(t, k) = r.mean[t].at(0, k);
            var.at(t, k) = r.variance[t].at(0, k);
        }
    write_bands(path, window, mean, var, dataset.columns(), column_sets(dataset));
    return sampled;
}

void export_bands_linear(const lds::DpccaParams& params, const Tensor& window, const PanelDataset& dataset,
                         const fs::path& path) {
    const lds::Reconstruction r = lds::reconstruct(params, to_matrices({window}).front());
    write_bands(path, window, from_matrix(r.mean), from_matrix(r.variance), dataset.columns(), column_sets(dataset));
}

void write_metrics_csv(const fs::path& path, const std::vector<MetricsRow>& rows) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream f(path);
    if (!f) throw IoError("cannot open " + path.string() + " for writing");
    f << "variant,checkpoint,test_elbo_per_step,rmse,latents\n";
    for (const auto& r : rows)
        f << r.variant << ',' << r.checkpoint << ',' << fmt(r.metrics.elbo_per_step) << ',' << fmt(r.metrics.rmse) << ','
          << (r.metrics.sampled_latents ? "sampled" : "mean") << '\n';
    if (!f) throw IoError("failed writing " + path.string());
}

}  // namespace d2pcca::data
