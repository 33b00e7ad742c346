#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <span>
#include <string_view>
#include <vector>

namespace kronlvm {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;

// Ordered Kronecker factors; element (r, c) of the logical matrix uses
// row-major multi-indices, so the last factor varies fastest.
struct KronMatrix {
    std::vector<MatrixXd> factors;

    [[nodiscard]] Index size() const;
    [[nodiscard]] MatrixXd dense() const;
};

struct EigenPair {
    MatrixXd Q;
    VectorXd lambda;  // ascending
};

struct CholFactor {
    MatrixXd L;
    double jitter = 0.0;
};

struct JitterPolicy {
    double initial_relative = 1e-10;
    double growth = 10.0;
    int max_retries = 5;
};

// Flat row-major tensor: dims[0] varies slowest. Columns of the data matrix
// Y are tensors of shape (n_xi, n_s1, ..., n_sd).
struct Tensor {
    VectorXd data;
    std::vector<Index> dims;

    [[nodiscard]] Index size() const { return data.size(); }
};

[[nodiscard]] Index product(std::span<const Index> dims);

// y[..., r, ...] = sum_c M(r, c) x[..., c, ...] along `mode`.
[[nodiscard]] Tensor mode_product(const Tensor& x, std::size_t mode, const MatrixXd& M);

// Applies mats[k] along mode k; null entries are skipped.
[[nodiscard]] Tensor multi_mode_product(Tensor x, std::span<const MatrixXd* const> mats);

// Mode-k unfolding: dims[k] rows, remaining modes (in order) as columns.
[[nodiscard]] MatrixXd unfold(const Tensor& x, std::size_t mode);

// Kronecker product of vectors, first vector slowest.
[[nodiscard]] VectorXd kron_vectors(std::span<const VectorXd> parts);

// sum over all modes except `mode` of x * prod_{g != mode} weights[g].
// Empty weight vectors count as all-ones.
[[nodiscard]] VectorXd weighted_partial_sum(const Tensor& x, std::size_t mode,
                                            std::span<const VectorXd> weights);

[[nodiscard]] VectorXd kron_matvec(const KronMatrix& K, const VectorXd& v);
[[nodiscard]] MatrixXd kron_matmat(const KronMatrix& K, const MatrixXd& M);
// (A_1 x ... x A_k) v for rectangular factors.
[[nodiscard]] VectorXd kron_apply(std::span<const MatrixXd> factors, const VectorXd& v);

[[nodiscard]] EigenPair sym_eig(const MatrixXd& A);
// Largest k eigenpairs (descending) via LAPACK's MRRR driver.
[[nodiscard]] EigenPair sym_eig_top(const MatrixXd& A, Index k);

struct KronEigen {
    KronMatrix Q;
    VectorXd lambda;  // Kronecker order
};
[[nodiscard]] KronEigen kron_eig(const KronMatrix& K);

// Floor used whenever eigenvalues enter an inverse.
[[nodiscard]] double eigen_floor(const VectorXd& lambda);
[[nodiscard]] VectorXd clamp_eigenvalues(const VectorXd& lambda);

[[nodiscard]] CholFactor chol(const MatrixXd& A, std::string_view name,
                              const JitterPolicy& policy = {});

enum class Side { left, right };
enum class Transpose { no, yes };

// left:  op(L) X = B;  right: X op(L) = B.
[[nodiscard]] MatrixXd tri_solve(const CholFactor& L, const MatrixXd& B, Side side = Side::left,
                                 Transpose op = Transpose::no);

}  // namespace kronlvm
