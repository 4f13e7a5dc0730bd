#pragma once

#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "d2pcca/lds/kalman.hpp"

namespace d2pcca::lds {

// Sufficient statistics of the smoothed moments, summed over sequences.
struct SufficientStats {
    Matrix sum_zz;        // sum_t E[z_t z_t^T]
    Matrix sum_zz_next;   // sum_{t>=2} E[z_t z_t^T]
    Matrix sum_zz_prev;   // sum_{t>=2} E[z_{t-1} z_{t-1}^T]
    Matrix sum_cross;     // sum_{t>=2} E[z_t z_{t-1}^T]
    Matrix sum_xz;        // sum_t x_t E[z_t]^T
    Vector sum_xx_diag;   // sum_t x_t .* x_t
    Vector sum_z1;        // sum over sequences of E[z_1]
    Matrix sum_z1z1;      // sum over sequences of E[z_1 z_1^T]
    double steps = 0.0;
    double transitions = 0.0;
    double sequences = 0.0;

    static SufficientStats zeros(Eigen::Index latent, Eigen::Index obs);
    void add(const SmoothedMoments& moments, const Matrix& x);
    SufficientStats& operator+=(const SufficientStats& other);
};

// Closed-form maximizer of the expected complete-data log-likelihood under the
// block constraints (block-diagonal A, V, P1; set-wise [W_j, B_j]; spherical noise).
// `notes` receives a line for every moment matrix that needed the ridge fallback.
DpccaParams em_m_step(const SufficientStats& stats, const std::vector<std::size_t>& chain_dims,
                      const std::vector<std::size_t>& obs_dims, std::vector<std::string>* notes = nullptr);

DpccaParams em_m_step(const std::vector<SmoothedMoments>& moments, const std::vector<Matrix>& sequences,
                      const std::vector<std::size_t>& chain_dims, const std::vector<std::size_t>& obs_dims);

// Expected complete-data log-likelihood (including constants) at fixed moments.
double expected_complete_loglik(const DpccaParams& params, const SufficientStats& stats);

// E-step over all sequences; sequences are split across `workers` threads and
// reduced in sequence order, so the result does not depend on the worker count.
struct EStepResult {
    SufficientStats stats;
    double log_likelihood = 0.0;
};
EStepResult e_step(const DpccaParams& params, const std::vector<Matrix>& sequences, unsigned workers = 1);

// A_i = 0.9 I, V_i = I, loadings from per-set PCA, sigma_j^2 from the residual spectrum.
DpccaParams initial_params(const std::vector<Matrix>& sequences, const std::vector<std::size_t>& chain_dims,
                           const std::vector<std::size_t>& obs_dims);

struct EmOptions {
    std::size_t max_iters = 100;
    double tol = 1e-6;                 // absolute log-likelihood improvement
    double monotonic_slack = 1e-9;     // relative to max(1, |log-lik|)
    unsigned workers = 1;
    std::function<void(std::size_t iteration, double log_likelihood)> on_iteration;
};

struct EmResult {
    DpccaParams params;
    std::vector<double> trace;  // log-likelihood of the parameters entering each M-step, then of the result
    std::size_t iterations = 0; // number of M-steps performed
    std::vector<std::string> notes;
};

EmResult em_fit(const std::vector<Matrix>& sequences, DpccaParams init, const EmOptions& options);
EmResult em_fit(const std::vector<Matrix>& sequences, const std::vector<std::size_t>& chain_dims,
                const std::vector<std::size_t>& obs_dims, const EmOptions& options);

}  // namespace d2pcca::lds
