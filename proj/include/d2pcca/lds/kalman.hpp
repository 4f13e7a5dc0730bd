#pragma once

#include <vector>

#include "d2pcca/lds/dpcca_params.hpp"

namespace d2pcca::lds {

// Per-step predictive and filtered Gaussian beliefs over the stacked latent.
struct FilterResult {
    std::vector<Vector> pred_mean, filt_mean;
    std::vector<Matrix> pred_cov, filt_cov;
    double log_likelihood = 0.0;
};

// Smoothed expectations under p(z | x_{1:T}). cross[t] holds E[z_t z_{t-1}^T]
// for t >= 1 and is empty at t = 0.
struct SmoothedMoments {
    std::vector<Vector> mean;
    std::vector<Matrix> cov;
    std::vector<Matrix> second;
    std::vector<Matrix> cross;
};

// Innovation and predictive covariances with reciprocal condition number
// below this bound are rejected.
inline constexpr double kMinReciprocalCondition = 1e-12;

// Kalman filter over one sequence (rows of `x` are time steps).
FilterResult kalman_filter(const LdsForm& lds, const Matrix& x);
FilterResult kalman_filter(const DpccaParams& params, const Matrix& x);

// Rauch-Tung-Striebel smoother with the lag-one cross moments.
SmoothedMoments rts_smooth(const LdsForm& lds, const FilterResult& filtered);

// Exact log p(x_{1:T}) summed over sequences.
double log_likelihood(const DpccaParams& params, const std::vector<Matrix>& sequences);

// Posterior-mean reconstruction C E[z_t | x_{1:T}] with the fixed emission variance.
struct Reconstruction {
    Matrix mean;      // T x p
    Matrix variance;  // T x p
};
Reconstruction reconstruct(const DpccaParams& params, const Matrix& x);

}  // namespace d2pcca::lds
