#pragma once

#include <Eigen/Dense>
#include <cstddef>
#include <random>
#include <vector>

namespace d2pcca::lds {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

// Linear multiset DPCCA. Chain 0 is shared by every observation set; chain j
// (1..D) is private to set j. Set j observes W_j z0 + B_j zj + N(0, sigma2_j I).
struct DpccaParams {
    std::vector<Matrix> A;   // D+1 transition matrices
    std::vector<Matrix> V;   // D+1 transition covariances
    std::vector<Vector> mu1; // D+1 initial means
    std::vector<Matrix> P1;  // D+1 initial covariances
    std::vector<Matrix> W;   // D shared loadings, p_j x d_0
    std::vector<Matrix> B;   // D private loadings, p_j x d_j
    std::vector<double> sigma2;

    std::size_t num_sets() const { return W.size(); }
    std::vector<std::size_t> chain_dims() const;
    std::vector<std::size_t> obs_dims() const;
    std::size_t latent_dim() const;
    std::size_t obs_dim() const;

    // Throws ShapeError on inconsistent block sizes and DomainError on
    // non-positive variances or covariances that are not positive definite.
    void validate() const;

    // Every block zero-filled with the given layout; V, P1 identity, sigma2 one.
    static DpccaParams zeros(const std::vector<std::size_t>& chain_dims, const std::vector<std::size_t>& obs_dims);
};

// Stacked linear dynamical system: z_t = A z_{t-1} + N(0, V), x_t = C z_t + N(0, R).
struct LdsForm {
    Matrix A, V, C, R;
    Vector mu1;
    Matrix P1;
};

LdsForm assemble(const DpccaParams& params);

// Inverse of assemble for a block-structured LDS with the given layout.
DpccaParams disassemble(const LdsForm& lds, const std::vector<std::size_t>& chain_dims,
                        const std::vector<std::size_t>& obs_dims);

// Draws one sequence of length T. Rows of the returned matrices are time steps.
struct SimulatedPath {
    Matrix x;  // T x p
    Matrix z;  // T x L
};
SimulatedPath simulate(const DpccaParams& params, std::size_t steps, std::mt19937_64& rng);

// Random stable, well-conditioned parameters, used by synthetic generators and tests.
DpccaParams random_params(const std::vector<std::size_t>& chain_dims, const std::vector<std::size_t>& obs_dims,
                          std::mt19937_64& rng);

}  // namespace d2pcca::lds
