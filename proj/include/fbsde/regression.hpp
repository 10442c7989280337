#pragma once

#include "fbsde/errors.hpp"
#include "fbsde/model.hpp"
#include "fbsde/parallel.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <vector>

namespace fbsde {

struct RegressionConfig {
    int degree = 2;
    double ridge = 1e-8;
};

/// Monomials of a q-dimensional regressor with total degree <= D, constant
/// first, in a fixed graded order. The last `linear_tail` coordinates enter
/// at most linearly (their exponents sum to at most one), which suits
/// targets known to be affine in those coordinates.
class MonomialBasis {
public:
    MonomialBasis() = default;
    MonomialBasis(int dim, int degree, int linear_tail = 0) : dim_(dim), degree_(degree) {
        std::vector<int> exps(static_cast<std::size_t>(dim), 0);
        for (int total = 0; total <= degree; ++total) enumerate(exps, 0, total);
        if (linear_tail > 0) {
            std::erase_if(exponents_, [&](const std::vector<int>& e) {
                int tail = 0;
                for (int a = dim - linear_tail; a < dim; ++a) tail += e[static_cast<std::size_t>(a)];
                return tail > 1;
            });
        }
    }

    int dim() const noexcept { return dim_; }
    int degree() const noexcept { return degree_; }
    int size() const noexcept { return static_cast<int>(exponents_.size()); }

    void evaluate(const double* z, double* out) const {
        for (std::size_t b = 0; b < exponents_.size(); ++b) {
            double v = 1.0;
            for (int a = 0; a < dim_; ++a)
                for (int e = 0; e < exponents_[b][a]; ++e) v *= z[a];
            out[b] = v;
        }
    }

    /// Design matrix (rows = samples) from a row-per-sample regressor matrix.
    Mat design(const Mat& regressors) const {
        Mat out(regressors.rows(), size());
        std::vector<double> z(static_cast<std::size_t>(dim_)), row(exponents_.size());
        for (Eigen::Index p = 0; p < regressors.rows(); ++p) {
            for (int a = 0; a < dim_; ++a) z[a] = regressors(p, a);
            evaluate(z.data(), row.data());
            for (int b = 0; b < size(); ++b) out(p, b) = row[b];
        }
        return out;
    }

private:
    void enumerate(std::vector<int>& exps, int axis, int remaining) {
        if (axis == dim_ - 1 || dim_ == 0) {
            if (dim_ > 0) exps[axis] = remaining;
            if (dim_ > 0 || remaining == 0) exponents_.push_back(exps);
            if (dim_ > 0) exps[axis] = 0;
            return;
        }
        for (int e = remaining; e >= 0; --e) {
            exps[axis] = e;
            enumerate(exps, axis + 1, remaining - e);
        }
        exps[axis] = 0;
    }

    int dim_ = 0;
    int degree_ = 0;
    std::vector<std::vector<int>> exponents_;
};

/// Least-squares surrogate over raw monomial features: value = coef' psi.
/// One column of coef per regression target.
struct RegressionFit {
    Mat coef;

    static RegressionFit zero(int basis_size, int targets) { return {Mat::Zero(basis_size, targets)}; }
    bool empty() const noexcept { return coef.size() == 0; }

    /// Values of all targets at one feature row.
    template <typename Row>
    void predict(const Row& features, double* out) const {
        for (Eigen::Index t = 0; t < coef.cols(); ++t) out[t] = features.dot(coef.col(t));
    }
};

/// theta * a + (1 - theta) * b, coefficient-wise.
inline RegressionFit blend(const RegressionFit& a, const RegressionFit& b, double theta) {
    return {theta * a.coef + (1.0 - theta) * b.coef};
}

/// Ridge least squares of `targets` (rows = samples) on `features`. Columns
/// are centred and scaled before fitting; the intercept (column 0, assumed
/// constant) is not penalized, so fitted values keep the sample mean of the
/// target exactly. Columns with no sample variance are dropped. Sums are
/// accumulated in fixed path chunks.
inline RegressionFit fit_regression(const Mat& features, const Mat& targets, double ridge, int workers = 1) {
    const Eigen::Index P = features.rows(), B = features.cols(), T = targets.cols();
    if (P == 0 || B == 0) throw SingularRegression("empty regression design");
    if (!targets.allFinite()) throw NonFiniteValue("regression target is not finite");
    const std::size_t chunks = chunk_count(static_cast<std::size_t>(P));

    // Column and target means.
    std::vector<Vec> part_feat(chunks), part_targ(chunks);
    for_each_chunk(static_cast<std::size_t>(P), workers, [&](std::size_t c, std::size_t b, std::size_t e) {
        const auto rows = static_cast<Eigen::Index>(e - b);
        part_feat[c] = features.middleRows(static_cast<Eigen::Index>(b), rows).colwise().sum().transpose();
        part_targ[c] = targets.middleRows(static_cast<Eigen::Index>(b), rows).colwise().sum().transpose();
    });
    Vec mean_f = Vec::Zero(B), mean_t = Vec::Zero(T);
    for (std::size_t c = 0; c < chunks; ++c) {
        mean_f += part_feat[c];
        mean_t += part_targ[c];
    }
    mean_f /= static_cast<double>(P);
    mean_t /= static_cast<double>(P);

    // Column spreads.
    std::vector<Vec> part_sq(chunks);
    for_each_chunk(static_cast<std::size_t>(P), workers, [&](std::size_t c, std::size_t b, std::size_t e) {
        const auto rows = static_cast<Eigen::Index>(e - b);
        part_sq[c] = (features.middleRows(static_cast<Eigen::Index>(b), rows).rowwise() - mean_f.transpose())
                         .array().square().colwise().sum().transpose();
    });
    Vec var = Vec::Zero(B);
    for (std::size_t c = 0; c < chunks; ++c) var += part_sq[c];
    var /= static_cast<double>(P);

    std::vector<Eigen::Index> active;
    for (Eigen::Index b = 1; b < B; ++b) {
        const double sd = std::sqrt(var[b]);
        if (sd > 1e-12 * std::sqrt(mean_f[b] * mean_f[b] + var[b]) && sd > 0.0) active.push_back(b);
    }
    RegressionFit fit = RegressionFit::zero(static_cast<int>(B), static_cast<int>(T));
    fit.coef.row(0) = mean_t.transpose();
    if (active.empty()) return fit;

    const auto A = static_cast<Eigen::Index>(active.size());
    Vec scale(A), shift(A);
    for (Eigen::Index a = 0; a < A; ++a) {
        shift[a] = mean_f[active[a]];
        scale[a] = std::sqrt(var[active[a]]);
    }
    std::vector<Mat> part_gram(chunks), part_rhs(chunks);
    for_each_chunk(static_cast<std::size_t>(P), workers, [&](std::size_t c, std::size_t b, std::size_t e) {
        const auto rows = static_cast<Eigen::Index>(e - b);
        Mat z(rows, A);
        for (Eigen::Index a = 0; a < A; ++a)
            z.col(a) = (features.col(active[a]).segment(static_cast<Eigen::Index>(b), rows).array() - shift[a]) / scale[a];
        const Mat yc = targets.middleRows(static_cast<Eigen::Index>(b), rows).rowwise() - mean_t.transpose();
        part_gram[c] = z.transpose() * z;
        part_rhs[c] = z.transpose() * yc;
    });
    Mat gram = Mat::Zero(A, A), rhs = Mat::Zero(A, T);
    for (std::size_t c = 0; c < chunks; ++c) {
        gram += part_gram[c];
        rhs += part_rhs[c];
    }
    gram /= static_cast<double>(P);
    rhs /= static_cast<double>(P);
    gram.diagonal().array() += ridge;

    Eigen::LDLT<Mat> ldlt(gram);
    const Vec diag = ldlt.vectorD();
    if (ldlt.info() != Eigen::Success || diag.minCoeff() <= 1e-13 * std::max(1.0, diag.cwiseAbs().maxCoeff()))
        throw SingularRegression("normal equations are rank-deficient beyond ridge repair");
    const Mat beta = ldlt.solve(rhs);
    for (Eigen::Index a = 0; a < A; ++a) {
        fit.coef.row(active[a]) = beta.row(a) / scale[a];
        fit.coef.row(0) -= beta.row(a) * (shift[a] / scale[a]);
    }
    return fit;
}

} // namespace fbsde
