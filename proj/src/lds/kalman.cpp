#include "d2pcca/lds/kalman.hpp"

#include <cmath>
#include <numbers>
#include <string>

#include "d2pcca/errors.hpp"

namespace d2pcca::lds {

namespace {

Matrix symmetrized(const Matrix& m) { return 0.5 * (m + m.transpose()); }

Eigen::LLT<Matrix> factor(const Matrix& m, const std::string& what, std::size_t step) {
    Eigen::LLT<Matrix> llt(m);
    if (llt.info() != Eigen::Success || !(llt.rcond() >= kMinReciprocalCondition))
        throw NumericalError(what + " is not invertible (condition number above 1e12) at step " +
                             std::to_string(step + 1));
    return llt;
}

}  // namespace

FilterResult kalman_filter(const LdsForm& lds, const Matrix& x) {
    const auto T = static_cast<std::size_t>(x.rows());
    if (T == 0) throw ShapeError("kalman_filter: sequence must have at least one step");
    if (x.cols() != lds.C.rows())
        throw ShapeError("kalman_filter: observation dimension " + std::to_string(x.cols()) + " does not match " +
                         std::to_string(lds.C.rows()));
    if (!x.allFinite()) throw DataError("kalman_filter: non-finite observation");

    const double p = static_cast<double>(lds.C.rows());
    const double log_2pi = std::log(2.0 * std::numbers::pi);
    FilterResult out;
    out.pred_mean.reserve(T);
    out.pred_cov.reserve(T);
    out.filt_mean.reserve(T);
    out.filt_cov.reserve(T);

    Vector m = lds.mu1;
    Matrix P = lds.P1;
    for (std::size_t t = 0; t < T; ++t) {
        if (t > 0) {
            m = lds.A * out.filt_mean.back();
            P = symmetrized(lds.A * out.filt_cov.back() * lds.A.transpose() + lds.V);
        }
        out.pred_mean.push_back(m);
        out.pred_cov.push_back(P);

        const Matrix PCt = P * lds.C.transpose();
        const Matrix S = symmetrized(lds.C * PCt + lds.R);
        const auto llt = factor(S, "innovation covariance", t);
        const Vector r = x.row(static_cast<Eigen::Index>(t)).transpose() - lds.C * m;
        const Vector Sinv_r = llt.solve(r);
        const double log_det = 2.0 * llt.matrixLLT().diagonal().array().log().sum();
        out.log_likelihood += -0.5 * (p * log_2pi + log_det + r.dot(Sinv_r));

        // K = P C^T S^-1
        const Matrix K = llt.solve(PCt.transpose()).transpose();
        out.filt_mean.push_back(m + PCt * Sinv_r);
        out.filt_cov.push_back(symmetrized(P - K * PCt.transpose()));
    }
    return out;
}

FilterResult kalman_filter(const DpccaParams& params, const Matrix& x) { return kalman_filter(assemble(params), x); }

SmoothedMoments rts_smooth(const LdsForm& lds, const FilterResult& filtered) {
    const std::size_t T = filtered.filt_mean.size();
    if (T == 0 || filtered.pred_mean.size() != T) throw ShapeError("rts_smooth: malformed filter result");
    SmoothedMoments s;
    s.mean.resize(T);
    s.cov.resize(T);
    s.second.resize(T);
    s.cross.resize(T);
    s.mean[T - 1] = filtered.filt_mean[T - 1];
    s.cov[T - 1] = filtered.filt_cov[T - 1];
    for (std::size_t t = T - 1; t-- > 0;) {
        const auto llt = factor(filtered.pred_cov[t + 1], "predictive covariance", t + 1);
        // J = P_{t|t} A^T P_{t+1|t}^-1
        const Matrix J = llt.solve(lds.A * filtered.filt_cov[t]).transpose();
        s.mean[t] = filtered.filt_mean[t] + J * (s.mean[t + 1] - filtered.pred_mean[t + 1]);
        s.cov[t] = symmetrized(filtered.filt_cov[t] + J * (s.cov[t + 1] - filtered.pred_cov[t + 1]) * J.transpose());
        s.cross[t + 1] = s.cov[t + 1] * J.transpose() + s.mean[t + 1] * s.mean[t].transpose();
    }
    for (std::size_t t = 0; t < T; ++t) s.second[t] = s.cov[t] + s.mean[t] * s.mean[t].transpose();
    return s;
}

double log_likelihood(const DpccaParams& params, const std::vector<Matrix>& sequences) {
    const LdsForm lds = assemble(params);
    double total = 0.0;
    for (const auto& x : sequences) total += kalman_filter(lds, x).log_likelihood;
    return total;
}

Reconstruction reconstruct(const DpccaParams& params, const Matrix& x) {
    const LdsForm lds = assemble(params);
    const SmoothedMoments s = rts_smooth(lds, kalman_filter(lds, x));
    Reconstruction out{Matrix(x.rows(), x.cols()), Matrix(x.rows(), x.cols())};
    const Vector noise = lds.R.diagonal();
    for (Eigen::Index t = 0; t < x.rows(); ++t) {
        out.mean.row(t) = (lds.C * s.mean[static_cast<std::size_t>(t)]).transpose();
        out.variance.row(t) = noise.transpose();
    }
    return out;
}

}  // namespace d2pcca::lds
