#include "d2pcca/lds/em.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <thread>

#include "d2pcca/errors.hpp"

namespace d2pcca::lds {

namespace {

constexpr double kRidge = 1e-8;

std::vector<Eigen::Index> offsets(const std::vector<std::size_t>& dims) {
    std::vector<Eigen::Index> out(dims.size(), 0);
    for (std::size_t i = 1; i < dims.size(); ++i) out[i] = out[i - 1] + static_cast<Eigen::Index>(dims[i - 1]);
    return out;
}

Matrix symmetrized(const Matrix& m) { return 0.5 * (m + m.transpose()); }

// Solves M X = rhs for a symmetric moment matrix M, retrying with M + 1e-8 I.
Matrix solve_moments(const Matrix& m, const Matrix& rhs, const std::string& what, std::vector<std::string>* notes) {
    Eigen::LLT<Matrix> llt(symmetrized(m));
    if (llt.info() == Eigen::Success && llt.rcond() >= kMinReciprocalCondition) return llt.solve(rhs);
    const Matrix ridged = symmetrized(m) + kRidge * Matrix::Identity(m.rows(), m.cols());
    Eigen::LLT<Matrix> retry(ridged);
    if (retry.info() != Eigen::Success)
        throw NumericalError("em_m_step: " + what + " moment matrix is singular even after adding ridge 1e-8*I");
    if (notes) notes->push_back("em_m_step: " + what + " moment matrix was singular; solved with ridge 1e-8*I");
    return retry.solve(rhs);
}

// Rows/columns of the stacked latent read by observation set j: chain 0 then chain j.
std::vector<Eigen::Index> emission_columns(const std::vector<std::size_t>& chain_dims, std::size_t set) {
    const auto zoff = offsets(chain_dims);
    std::vector<Eigen::Index> cols;
    for (Eigen::Index k = 0; k < static_cast<Eigen::Index>(chain_dims[0]); ++k) cols.push_back(k);
    for (Eigen::Index k = 0; k < static_cast<Eigen::Index>(chain_dims[set + 1]); ++k)
        cols.push_back(zoff[set + 1] + k);
    return cols;
}

Matrix select(const Matrix& m, const std::vector<Eigen::Index>& rows, const std::vector<Eigen::Index>& cols) {
    Matrix out(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(cols.size()));
    for (std::size_t r = 0; r < rows.size(); ++r)
        for (std::size_t c = 0; c < cols.size(); ++c)
            out(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = m(rows[r], cols[c]);
    return out;
}

std::vector<Eigen::Index> range(Eigen::Index begin, Eigen::Index count) {
    std::vector<Eigen::Index> out(static_cast<std::size_t>(count));
    std::iota(out.begin(), out.end(), begin);
    return out;
}

double gaussian_expected_loglik(const Matrix& cov, double count, const Matrix& scatter) {
    Eigen::LLT<Matrix> llt(cov);
    if (llt.info() != Eigen::Success) throw NumericalError("expected_complete_loglik: covariance not positive definite");
    const double log_det = 2.0 * llt.matrixLLT().diagonal().array().log().sum();
    const double d = static_cast<double>(cov.rows());
    return -0.5 * (count * (d * std::log(2.0 * std::numbers::pi) + log_det) + llt.solve(scatter).trace());
}

}  // namespace

SufficientStats SufficientStats::zeros(Eigen::Index latent, Eigen::Index obs) {
    SufficientStats s;
    s.sum_zz = Matrix::Zero(latent, latent);
    s.sum_zz_next = Matrix::Zero(latent, latent);
    s.sum_zz_prev = Matrix::Zero(latent, latent);
    s.sum_cross = Matrix::Zero(latent, latent);
    s.sum_xz = Matrix::Zero(obs, latent);
    s.sum_xx_diag = Vector::Zero(obs);
    s.sum_z1 = Vector::Zero(latent);
    s.sum_z1z1 = Matrix::Zero(latent, latent);
    return s;
}

void SufficientStats::add(const SmoothedMoments& moments, const Matrix& x) {
    const std::size_t T = moments.mean.size();
    if (static_cast<std::size_t>(x.rows()) != T) throw ShapeError("SufficientStats: moments and data lengths differ");
    for (std::size_t t = 0; t < T; ++t) {
        const auto row = static_cast<Eigen::Index>(t);
        sum_zz += moments.second[t];
        sum_xz += x.row(row).transpose() * moments.mean[t].transpose();
        sum_xx_diag += x.row(row).transpose().cwiseAbs2();
        if (t > 0) {
            sum_zz_next += moments.second[t];
            sum_zz_prev += moments.second[t - 1];
            sum_cross += moments.cross[t];
        }
    }
    sum_z1 += moments.mean[0];
    sum_z1z1 += moments.second[0];
    steps += static_cast<double>(T);
    transitions += static_cast<double>(T - 1);
    sequences += 1.0;
}

SufficientStats& SufficientStats::operator+=(const SufficientStats& o) {
    sum_zz += o.sum_zz;
    sum_zz_next += o.sum_zz_next;
    sum_zz_prev += o.sum_zz_prev;
    sum_cross += o.sum_cross;
    sum_xz += o.sum_xz;
    sum_xx_diag += o.sum_xx_diag;
    sum_z1 += o.sum_z1;
    sum_z1z1 += o.sum_z1z1;
    steps += o.steps;
    transitions += o.transitions;
    sequences += o.sequences;
    return *this;
}

DpccaParams em_m_step(const SufficientStats& stats, const std::vector<std::size_t>& chain_dims,
                      const std::vector<std::size_t>& obs_dims, std::vector<std::string>* notes) {
    if (stats.sequences <= 0.0) throw DataError("em_m_step: no sequences");
    if (stats.transitions <= 0.0) throw DataError("em_m_step: sequences need at least two steps");
    DpccaParams p = DpccaParams::zeros(chain_dims, obs_dims);
    const auto zoff = offsets(chain_dims);
    const auto xoff = offsets(obs_dims);

    for (std::size_t i = 0; i < chain_dims.size(); ++i) {
        const auto o = zoff[i];
        const auto d = static_cast<Eigen::Index>(chain_dims[i]);
        const Matrix s00 = stats.sum_zz_prev.block(o, o, d, d);
        const Matrix s10 = stats.sum_cross.block(o, o, d, d);
        const Matrix s11 = stats.sum_zz_next.block(o, o, d, d);
        const std::string tag = "chain " + std::to_string(i);
        p.A[i] = solve_moments(s00, s10.transpose(), tag + " lag", notes).transpose();
        p.V[i] = symmetrized((s11 - p.A[i] * s10.transpose()) / stats.transitions);
        p.mu1[i] = stats.sum_z1.segment(o, d) / stats.sequences;
        p.P1[i] = symmetrized(stats.sum_z1z1.block(o, o, d, d) / stats.sequences - p.mu1[i] * p.mu1[i].transpose());
    }

    for (std::size_t j = 0; j < obs_dims.size(); ++j) {
        const auto cols = emission_columns(chain_dims, j);
        const auto rows = range(xoff[j], static_cast<Eigen::Index>(obs_dims[j]));
        const Matrix szz = select(stats.sum_zz, cols, cols);
        const Matrix sxz = select(stats.sum_xz, rows, cols);
        const Matrix loading =
            solve_moments(szz, sxz.transpose(), "set " + std::to_string(j + 1) + " emission", notes).transpose();
        const auto d0 = static_cast<Eigen::Index>(chain_dims[0]);
        p.W[j] = loading.leftCols(d0);
        p.B[j] = loading.rightCols(static_cast<Eigen::Index>(chain_dims[j + 1]));
        const double sxx = stats.sum_xx_diag.segment(xoff[j], static_cast<Eigen::Index>(obs_dims[j])).sum();
        const double resid =
            sxx - 2.0 * (loading * sxz.transpose()).trace() + (loading * szz * loading.transpose()).trace();
        p.sigma2[j] = resid / (stats.steps * static_cast<double>(obs_dims[j]));
    }
    return p;
}

DpccaParams em_m_step(const std::vector<SmoothedMoments>& moments, const std::vector<Matrix>& sequences,
                      const std::vector<std::size_t>& chain_dims, const std::vector<std::size_t>& obs_dims) {
    if (moments.size() != sequences.size() || sequences.empty())
        throw ShapeError("em_m_step: need one moment set per sequence");
    const auto L = static_cast<Eigen::Index>(std::accumulate(chain_dims.begin(), chain_dims.end(), std::size_t{0}));
    SufficientStats stats = SufficientStats::zeros(L, sequences[0].cols());
    for (std::size_t k = 0; k < sequences.size(); ++k) stats.add(moments[k], sequences[k]);
    return em_m_step(stats, chain_dims, obs_dims);
}

double expected_complete_loglik(const DpccaParams& params, const SufficientStats& s) {
    const LdsForm f = assemble(params);
    const Matrix init_scatter = s.sum_z1z1 - f.mu1 * s.sum_z1.transpose() - s.sum_z1 * f.mu1.transpose() +
                                s.sequences * f.mu1 * f.mu1.transpose();
    const Matrix trans_scatter = s.sum_zz_next - f.A * s.sum_cross.transpose() - s.sum_cross * f.A.transpose() +
                                 f.A * s.sum_zz_prev * f.A.transpose();
    double q = gaussian_expected_loglik(f.P1, s.sequences, init_scatter);
    q += gaussian_expected_loglik(f.V, s.transitions, trans_scatter);

    const Vector r = f.R.diagonal();
    const Vector cross_diag = (f.C * s.sum_xz.transpose()).diagonal();
    const Vector quad_diag = (f.C * s.sum_zz * f.C.transpose()).diagonal();
    const double p = static_cast<double>(r.size());
    double emis = s.steps * (p * std::log(2.0 * std::numbers::pi) + r.array().log().sum());
    emis += ((s.sum_xx_diag - 2.0 * cross_diag + quad_diag).array() / r.array()).sum();
    return q - 0.5 * emis;
}

EStepResult e_step(const DpccaParams& params, const std::vector<Matrix>& sequences, unsigned workers) {
    if (sequences.empty()) throw DataError("e_step: no sequences");
    const LdsForm lds = assemble(params);
    const auto L = lds.A.rows();
    const auto P = lds.C.rows();
    std::vector<SufficientStats> per_seq(sequences.size());
    std::vector<double> ll(sequences.size(), 0.0);
    auto work = [&](std::size_t begin, std::size_t stride) {
        for (std::size_t k = begin; k < sequences.size(); k += stride) {
            const FilterResult f = kalman_filter(lds, sequences[k]);
            per_seq[k] = SufficientStats::zeros(L, P);
            per_seq[k].add(rts_smooth(lds, f), sequences[k]);
            ll[k] = f.log_likelihood;
        }
    };
    workers = std::max(1u, std::min<unsigned>(workers, static_cast<unsigned>(sequences.size())));
    if (workers == 1) {
        work(0, 1);
    } else {
        std::vector<std::thread> pool;
        std::vector<std::exception_ptr> errors(workers);
        for (unsigned w = 0; w < workers; ++w)
            pool.emplace_back([&, w] {
                try {
                    work(w, workers);
                } catch (...) {
                    errors[w] = std::current_exception();
                }
            });
        for (auto& th : pool) th.join();
        for (auto& e : errors)
            if (e) std::rethrow_exception(e);
    }
    EStepResult out{SufficientStats::zeros(L, P), 0.0};
    for (std::size_t k = 0; k < sequences.size(); ++k) {
        out.stats += per_seq[k];
        out.log_likelihood += ll[k];
    }
    return out;
}

DpccaParams initial_params(const std::vector<Matrix>& sequences, const std::vector<std::size_t>& chain_dims,
                           const std::vector<std::size_t>& obs_dims) {
    if (sequences.empty()) throw DataError("initial_params: no sequences");
    DpccaParams p = DpccaParams::zeros(chain_dims, obs_dims);
    constexpr double kDecay = 0.9;
    for (std::size_t i = 0; i < chain_dims.size(); ++i) {
        const auto d = static_cast<Eigen::Index>(chain_dims[i]);
        p.A[i] = kDecay * Matrix::Identity(d, d);
        p.V[i] = Matrix::Identity(d, d);
        p.P1[i] = Matrix::Identity(d, d);
    }
    // Loadings are scaled so that a unit-noise AR(0.9) chain reproduces the PCA variance.
    const double stationary = 1.0 / (1.0 - kDecay * kDecay);
    const auto xoff = offsets(obs_dims);
    Eigen::Index rows = 0;
    for (const auto& x : sequences) rows += x.rows();
    for (std::size_t j = 0; j < obs_dims.size(); ++j) {
        const auto pj = static_cast<Eigen::Index>(obs_dims[j]);
        Matrix stacked(rows, pj);
        Eigen::Index r = 0;
        for (const auto& x : sequences) {
            stacked.middleRows(r, x.rows()) = x.middleCols(xoff[j], pj);
            r += x.rows();
        }
        const Matrix centered = stacked.rowwise() - stacked.colwise().mean();
        const Matrix cov = centered.transpose() * centered / static_cast<double>(std::max<Eigen::Index>(1, rows - 1));
        Eigen::SelfAdjointEigenSolver<Matrix> eig(cov);
        const Vector values = eig.eigenvalues().reverse().cwiseMax(0.0);
        const Matrix vectors = eig.eigenvectors().rowwise().reverse();
        const auto d0 = static_cast<Eigen::Index>(chain_dims[0]);
        const auto dj = static_cast<Eigen::Index>(chain_dims[j + 1]);
        const Eigen::Index k = d0 + dj;
        const double mean_var = std::max(1e-12, values.mean());

        double residual = 0.0;
        if (pj > k) residual = values.tail(pj - k).mean();
        else residual = 0.1 * mean_var;
        p.sigma2[j] = std::max(residual, 1e-6 * mean_var);

        Matrix loading = Matrix::Zero(pj, k);
        for (Eigen::Index c = 0; c < k; ++c) {
            if (c < pj) {
                const double excess = std::max(values[c] - p.sigma2[j], 0.01 * mean_var);
                loading.col(c) = vectors.col(c) * std::sqrt(excess / stationary);
            } else {
                // More latent columns than coordinates: keep them identifiable with a small loading.
                loading(c % pj, c) = 0.1 * std::sqrt(mean_var / stationary);
            }
        }
        p.W[j] = loading.leftCols(d0);
        p.B[j] = loading.rightCols(dj);
    }
    return p;
}

EmResult em_fit(const std::vector<Matrix>& sequences, DpccaParams init, const EmOptions& options) {
    if (sequences.empty()) throw DataError("em_fit: no sequences");
    const auto chains = init.chain_dims();
    const auto sets = init.obs_dims();
    EmResult result{std::move(init), {}, 0, {}};
    EStepResult e = e_step(result.params, sequences, options.workers);
    result.trace.push_back(e.log_likelihood);
    if (options.on_iteration) options.on_iteration(0, e.log_likelihood);
    while (result.iterations < options.max_iters) {
        DpccaParams next = em_m_step(e.stats, chains, sets, &result.notes);
        EStepResult e_next = e_step(next, sequences, options.workers);
        const double prev = result.trace.back();
        const double slack = options.monotonic_slack * std::max(1.0, std::abs(prev));
        if (e_next.log_likelihood < prev - slack)
            throw NumericalError("em_fit: log-likelihood decreased from " + std::to_string(prev) + " to " +
                                 std::to_string(e_next.log_likelihood) + " at iteration " +
                                 std::to_string(result.iterations + 1));
        result.params = std::move(next);
        e = std::move(e_next);
        ++result.iterations;
        result.trace.push_back(e.log_likelihood);
        if (options.on_iteration) options.on_iteration(result.iterations, e.log_likelihood);
        if (e.log_likelihood - prev < options.tol) break;
    }
    return result;
}

EmResult em_fit(const std::vector<Matrix>& sequences, const std::vector<std::size_t>& chain_dims,
                const std::vector<std::size_t>& obs_dims, const EmOptions& options) {
    return em_fit(sequences, initial_params(sequences, chain_dims, obs_dims), options);
}

}  // namespace d2pcca::lds
