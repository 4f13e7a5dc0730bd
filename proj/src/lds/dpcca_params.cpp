#include "d2pcca/lds/dpcca_params.hpp"

#include <cmath>
#include <numeric>
#include <string>

#include "d2pcca/errors.hpp"

namespace d2pcca::lds {

namespace {

std::size_t total(const std::vector<std::size_t>& dims) { return std::accumulate(dims.begin(), dims.end(), std::size_t{0}); }

std::vector<std::size_t> offsets(const std::vector<std::size_t>& dims) {
    std::vector<std::size_t> out(dims.size(), 0);
    for (std::size_t i = 1; i < dims.size(); ++i) out[i] = out[i - 1] + dims[i - 1];
    return out;
}

void require_spd(const Matrix& m, const std::string& what) {
    if (m.rows() != m.cols()) throw ShapeError(what + " is not square");
    Eigen::LLT<Matrix> llt(0.5 * (m + m.transpose()));
    if (llt.info() != Eigen::Success) throw DomainError(what + " is not positive definite");
}

void require_shape(const Matrix& m, Eigen::Index rows, Eigen::Index cols, const std::string& what) {
    if (m.rows() != rows || m.cols() != cols)
        throw ShapeError(what + " has shape (" + std::to_string(m.rows()) + ", " + std::to_string(m.cols()) +
                         "), expected (" + std::to_string(rows) + ", " + std::to_string(cols) + ")");
}

Vector standard_normal(Eigen::Index n, std::mt19937_64& rng) {
    std::normal_distribution<double> nd(0.0, 1.0);
    Vector v(n);
    for (Eigen::Index i = 0; i < n; ++i) v[i] = nd(rng);
    return v;
}

}  // namespace

std::vector<std::size_t> DpccaParams::chain_dims() const {
    std::vector<std::size_t> dims;
    for (const auto& a : A) dims.push_back(static_cast<std::size_t>(a.rows()));
    return dims;
}

std::vector<std::size_t> DpccaParams::obs_dims() const {
    std::vector<std::size_t> dims;
    for (const auto& w : W) dims.push_back(static_cast<std::size_t>(w.rows()));
    return dims;
}

std::size_t DpccaParams::latent_dim() const { return total(chain_dims()); }
std::size_t DpccaParams::obs_dim() const { return total(obs_dims()); }

void DpccaParams::validate() const {
    const std::size_t D = W.size();
    if (D == 0) throw ShapeError("DpccaParams: at least one observation set is required");
    if (A.size() != D + 1 || V.size() != D + 1 || mu1.size() != D + 1 || P1.size() != D + 1)
        throw ShapeError("DpccaParams: expected " + std::to_string(D + 1) + " chains");
    if (B.size() != D || sigma2.size() != D) throw ShapeError("DpccaParams: expected " + std::to_string(D) + " sets");
    for (std::size_t i = 0; i <= D; ++i) {
        const auto d = A[i].rows();
        const std::string tag = "chain " + std::to_string(i);
        require_shape(A[i], d, d, tag + " transition");
        require_shape(V[i], d, d, tag + " covariance");
        require_shape(P1[i], d, d, tag + " initial covariance");
        if (mu1[i].size() != d) throw ShapeError(tag + " initial mean has wrong length");
        require_spd(V[i], tag + " covariance");
        require_spd(P1[i], tag + " initial covariance");
    }
    for (std::size_t j = 0; j < D; ++j) {
        const std::string tag = "set " + std::to_string(j + 1);
        require_shape(W[j], W[j].rows(), A[0].rows(), tag + " shared loading");
        require_shape(B[j], W[j].rows(), A[j + 1].rows(), tag + " private loading");
        if (!(sigma2[j] > 0.0)) throw DomainError(tag + " noise variance must be positive");
    }
}

DpccaParams DpccaParams::zeros(const std::vector<std::size_t>& chain_dims, const std::vector<std::size_t>& obs_dims) {
    if (chain_dims.size() != obs_dims.size() + 1)
        throw ShapeError("DpccaParams: need one more chain than observation sets");
    DpccaParams p;
    for (auto d : chain_dims) {
        const auto n = static_cast<Eigen::Index>(d);
        p.A.push_back(Matrix::Zero(n, n));
        p.V.push_back(Matrix::Identity(n, n));
        p.mu1.push_back(Vector::Zero(n));
        p.P1.push_back(Matrix::Identity(n, n));
    }
    for (std::size_t j = 0; j < obs_dims.size(); ++j) {
        const auto rows = static_cast<Eigen::Index>(obs_dims[j]);
        p.W.push_back(Matrix::Zero(rows, static_cast<Eigen::Index>(chain_dims[0])));
        p.B.push_back(Matrix::Zero(rows, static_cast<Eigen::Index>(chain_dims[j + 1])));
        p.sigma2.push_back(1.0);
    }
    return p;
}

LdsForm assemble(const DpccaParams& params) {
    params.validate();
    const auto chains = params.chain_dims();
    const auto sets = params.obs_dims();
    const auto zoff = offsets(chains);
    const auto xoff = offsets(sets);
    const auto L = static_cast<Eigen::Index>(total(chains));
    const auto p = static_cast<Eigen::Index>(total(sets));

    LdsForm f;
    f.A = Matrix::Zero(L, L);
    f.V = Matrix::Zero(L, L);
    f.P1 = Matrix::Zero(L, L);
    f.mu1 = Vector::Zero(L);
    f.C = Matrix::Zero(p, L);
    f.R = Matrix::Zero(p, p);
    for (std::size_t i = 0; i < chains.size(); ++i) {
        const auto o = static_cast<Eigen::Index>(zoff[i]);
        const auto d = static_cast<Eigen::Index>(chains[i]);
        f.A.block(o, o, d, d) = params.A[i];
        f.V.block(o, o, d, d) = params.V[i];
        f.P1.block(o, o, d, d) = params.P1[i];
        f.mu1.segment(o, d) = params.mu1[i];
    }
    for (std::size_t j = 0; j < sets.size(); ++j) {
        const auto r = static_cast<Eigen::Index>(xoff[j]);
        const auto n = static_cast<Eigen::Index>(sets[j]);
        f.C.block(r, 0, n, static_cast<Eigen::Index>(chains[0])) = params.W[j];
        f.C.block(r, static_cast<Eigen::Index>(zoff[j + 1]), n, static_cast<Eigen::Index>(chains[j + 1])) =
            params.B[j];
        f.R.block(r, r, n, n).diagonal().setConstant(params.sigma2[j]);
    }
    return f;
}

DpccaParams disassemble(const LdsForm& lds, const std::vector<std::size_t>& chain_dims,
                        const std::vector<std::size_t>& obs_dims) {
    DpccaParams p = DpccaParams::zeros(chain_dims, obs_dims);
    const auto zoff = offsets(chain_dims);
    const auto xoff = offsets(obs_dims);
    const auto L = static_cast<Eigen::Index>(total(chain_dims));
    const auto P = static_cast<Eigen::Index>(total(obs_dims));
    require_shape(lds.A, L, L, "LDS transition");
    require_shape(lds.C, P, L, "LDS emission");
    for (std::size_t i = 0; i < chain_dims.size(); ++i) {
        const auto o = static_cast<Eigen::Index>(zoff[i]);
        const auto d = static_cast<Eigen::Index>(chain_dims[i]);
        p.A[i] = lds.A.block(o, o, d, d);
        p.V[i] = lds.V.block(o, o, d, d);
        p.P1[i] = lds.P1.block(o, o, d, d);
        p.mu1[i] = lds.mu1.segment(o, d);
    }
    for (std::size_t j = 0; j < obs_dims.size(); ++j) {
        const auto r = static_cast<Eigen::Index>(xoff[j]);
        const auto n = static_cast<Eigen::Index>(obs_dims[j]);
        p.W[j] = lds.C.block(r, 0, n, static_cast<Eigen::Index>(chain_dims[0]));
        p.B[j] = lds.C.block(r, static_cast<Eigen::Index>(zoff[j + 1]), n, static_cast<Eigen::Index>(chain_dims[j + 1]));
        p.sigma2[j] = lds.R(r, r);
    }
    return p;
}

SimulatedPath simulate(const DpccaParams& params, std::size_t steps, std::mt19937_64& rng) {
    const LdsForm f = assemble(params);
    const Matrix lv = Eigen::LLT<Matrix>(f.V).matrixL();
    const Matrix lp = Eigen::LLT<Matrix>(f.P1).matrixL();
    const Vector noise_sd = f.R.diagonal().cwiseSqrt();
    SimulatedPath out{Matrix(static_cast<Eigen::Index>(steps), f.C.rows()),
                      Matrix(static_cast<Eigen::Index>(steps), f.A.rows())};
    Vector z = f.mu1 + lp * standard_normal(f.A.rows(), rng);
    for (std::size_t t = 0; t < steps; ++t) {
        if (t > 0) z = f.A * z + lv * standard_normal(f.A.rows(), rng);
        const Vector x = f.C * z + noise_sd.cwiseProduct(standard_normal(f.C.rows(), rng));
        out.z.row(static_cast<Eigen::Index>(t)) = z.transpose();
        out.x.row(static_cast<Eigen::Index>(t)) = x.transpose();
    }
    return out;
}

DpccaParams random_params(const std::vector<std::size_t>& chain_dims, const std::vector<std::size_t>& obs_dims,
                          std::mt19937_64& rng) {
    std::normal_distribution<double> nd(0.0, 1.0);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    auto gaussian = [&](Eigen::Index r, Eigen::Index c) {
        Matrix m(r, c);
        for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = nd(rng);
        return m;
    };
    auto spd = [&](Eigen::Index d, double floor) {
        const Matrix g = gaussian(d, d);
        return Matrix(0.3 * g * g.transpose() / static_cast<double>(d) + floor * Matrix::Identity(d, d));
    };
    DpccaParams p = DpccaParams::zeros(chain_dims, obs_dims);
    for (std::size_t i = 0; i < chain_dims.size(); ++i) {
        const auto d = static_cast<Eigen::Index>(chain_dims[i]);
        // Orthogonal times a spectral radius in [0.5, 0.95] keeps every chain stable.
        Eigen::HouseholderQR<Matrix> qr(gaussian(d, d));
        const Matrix q = qr.householderQ();
        p.A[i] = (0.5 + 0.45 * unit(rng)) * q;
        p.V[i] = spd(d, 0.2);
        p.P1[i] = spd(d, 0.5);
        p.mu1[i] = 0.5 * gaussian(d, 1);
    }
    for (std::size_t j = 0; j < obs_dims.size(); ++j) {
        const auto n = static_cast<Eigen::Index>(obs_dims[j]);
        p.W[j] = gaussian(n, static_cast<Eigen::Index>(chain_dims[0]));
        p.B[j] = gaussian(n, static_cast<Eigen::Index>(chain_dims[j + 1]));
        p.sigma2[j] = 0.1 + 0.5 * unit(rng);
    }
    return p;
}

}  // namespace d2pcca::lds
