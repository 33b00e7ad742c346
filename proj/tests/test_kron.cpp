#include <doctest.h>

#include "kronlvm/errors.hpp"
#include "kronlvm/kron.hpp"
#include "oracles.hpp"

using namespace kronlvm;

TEST_CASE("kron_matvec trivial cases") {
    KronMatrix K{{MatrixXd::Identity(2, 2), MatrixXd::Identity(3, 3)}};
    VectorXd v = VectorXd::LinSpaced(6, 1, 6);
    CHECK((kron_matvec(K, v) - v).norm() == 0.0);

    KronMatrix S{{MatrixXd::Constant(1, 1, 2.0), MatrixXd::Identity(2, 2)}};
    CHECK((kron_matvec(S, VectorXd::Ones(2)) - VectorXd::Constant(2, 2.0)).norm() == 0.0);

    CHECK_THROWS_AS((void)kron_matvec(K, VectorXd::Ones(5)), ValidationError);
}

TEST_CASE("kron_matvec and kron_matmat match dense expansion") {
    Rng rng(11);
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<MatrixXd> fs;
        const int nf = 1 + trial % 3;
        for (int f = 0; f < nf; ++f) {
            const Index n = 1 + static_cast<Index>(rng.below(6));
            fs.push_back(rng.normal_matrix(n, n));
        }
        KronMatrix K{fs};
        const MatrixXd D = oracle::kron_all(fs);
        const VectorXd v = rng.normal_matrix(K.size(), 1);
        CHECK(oracle::rel_err(kron_matvec(K, v), D * v) < 1e-12);
        const MatrixXd M = rng.normal_matrix(K.size(), 3);
        CHECK(oracle::rel_err(kron_matmat(K, M), D * M) < 1e-12);
        CHECK(oracle::rel_err(K.dense(), D) == 0.0);
    }
    // single factor and identity
    const MatrixXd A = rng.normal_matrix(4, 4);
    const MatrixXd M = rng.normal_matrix(4, 2);
    CHECK(oracle::rel_err(kron_matmat(KronMatrix{{A}}, M), A * M) < 1e-14);
    CHECK(kron_matmat(KronMatrix{{MatrixXd::Identity(2, 2), MatrixXd::Identity(2, 2)}}, M) == M);
}

TEST_CASE("tensor unfold and weighted partial sums") {
    Rng rng(3);
    Tensor t{rng.normal_matrix(2 * 3 * 4, 1), {2, 3, 4}};
    const MatrixXd U = unfold(t, 1);
    REQUIRE(U.rows() == 3);
    REQUIRE(U.cols() == 8);
    for (Index a = 0; a < 2; ++a)
        for (Index b = 0; b < 3; ++b)
            for (Index c = 0; c < 4; ++c) CHECK(U(b, a * 4 + c) == t.data(a * 12 + b * 4 + c));
    const std::vector<VectorXd> w{VectorXd::LinSpaced(2, 1, 2), VectorXd(), VectorXd::LinSpaced(4, 1, 4)};
    const VectorXd ps = weighted_partial_sum(t, 1, w);
    for (Index b = 0; b < 3; ++b) {
        double ref = 0.0;
        for (Index a = 0; a < 2; ++a)
            for (Index c = 0; c < 4; ++c) ref += t.data(a * 12 + b * 4 + c) * w[0](a) * w[2](c);
        CHECK(std::abs(ps(b) - ref) < 1e-12);
    }
}

TEST_CASE("sym_eig") {
    const EigenPair e1 = sym_eig(MatrixXd::Identity(3, 3));
    CHECK((e1.lambda - VectorXd::Ones(3)).norm() == 0.0);
    const EigenPair e2 = sym_eig(VectorXd((VectorXd(3) << 3, 1, 2).finished()).asDiagonal());
    CHECK((e2.lambda - (VectorXd(3) << 1, 2, 3).finished()).norm() < 1e-15);
    Rng rng(5);
    const MatrixXd A = oracle::random_spd(rng, 5);
    const EigenPair e = sym_eig(A);
    CHECK((e.Q * e.lambda.asDiagonal() * e.Q.transpose() - A).norm() < 1e-10 * A.norm());
    CHECK((e.Q.transpose() * e.Q - MatrixXd::Identity(5, 5)).norm() < 1e-8);
    for (Index i = 1; i < 5; ++i) CHECK(e.lambda(i) >= e.lambda(i - 1));
    MatrixXd bad = A;
    bad(0, 0) = std::nan("");
    CHECK_THROWS_AS((void)sym_eig(bad), NumericalError);
}

TEST_CASE("sym_eig_top returns the leading spectrum") {
    Rng rng(8);
    const MatrixXd A = oracle::random_spd(rng, 12);
    const EigenPair full = sym_eig(A);
    const EigenPair top = sym_eig_top(A, 4);
    for (Index i = 0; i < 4; ++i) {
        CHECK(oracle::rel_err(top.lambda(i), full.lambda(11 - i)) < 1e-10);
        CHECK(std::abs(std::abs(top.Q.col(i).dot(full.Q.col(11 - i))) - 1.0) < 1e-8);
    }
}

TEST_CASE("kron_eig") {
    KronMatrix I{{MatrixXd::Identity(2, 2), MatrixXd::Identity(2, 2)}};
    CHECK((kron_eig(I).lambda - VectorXd::Ones(4)).norm() == 0.0);

    KronMatrix D{{VectorXd((VectorXd(2) << 1, 2).finished()).asDiagonal(),
                  VectorXd((VectorXd(2) << 3, 4).finished()).asDiagonal()}};
    CHECK((kron_eig(D).lambda - (VectorXd(4) << 3, 4, 6, 8).finished()).norm() < 1e-14);

    Rng rng(9);
    for (int trial = 0; trial < 10; ++trial) {
        KronMatrix K{{oracle::random_spd(rng, 3), oracle::random_spd(rng, 4)}};
        const KronEigen ke = kron_eig(K);
        VectorXd composed = ke.lambda;
        std::sort(composed.data(), composed.data() + composed.size());
        const VectorXd dense = sym_eig(K.dense()).lambda;
        CHECK(oracle::rel_err(composed, dense) < 1e-10);
        // eigenvectors compose as a Kronecker product
        const MatrixXd Q = ke.Q.dense();
        CHECK((Q * ke.lambda.asDiagonal() * Q.transpose() - K.dense()).norm() < 1e-10 * K.dense().norm());
    }
}

TEST_CASE("chol with jitter") {
    CHECK((chol(MatrixXd::Identity(2, 2), "I").L - MatrixXd::Identity(2, 2)).norm() == 0.0);
    MatrixXd A(2, 2);
    A << 4, 2, 2, 3;
    const CholFactor c = chol(A, "A");
    MatrixXd expect(2, 2);
    expect << 2, 0, 1, std::sqrt(2.0);
    CHECK((c.L - expect).norm() < 1e-15);
    CHECK(c.jitter == 0.0);

    Rng rng(2);
    const MatrixXd S = oracle::random_spd(rng, 6);
    const CholFactor cs = chol(S, "S");
    CHECK((cs.L * cs.L.transpose() - S).norm() < 1e-10 * S.norm());

    // rank-deficient PSD matrix needs jitter
    const MatrixXd v = rng.normal_matrix(5, 1);
    const CholFactor cj = chol(v * v.transpose(), "rank-one");
    CHECK(cj.jitter > 0.0);

    MatrixXd neg = -MatrixXd::Identity(3, 3);
    try {
        (void)chol(neg, "K_uu");
        CHECK(false);
    } catch (const NumericalError& e) {
        CHECK(std::string(e.what()).find("K_uu") != std::string::npos);
    }
}

TEST_CASE("tri_solve") {
    Rng rng(4);
    CholFactor I{MatrixXd::Identity(3, 3), 0.0};
    const MatrixXd B = rng.normal_matrix(3, 2);
    CHECK(tri_solve(I, B) == B);

    CholFactor one{MatrixXd::Constant(1, 1, 2.0), 0.0};
    CHECK(tri_solve(one, MatrixXd::Constant(1, 1, 6.0))(0, 0) == 3.0);

    MatrixXd A(2, 2);
    A << 4, 2, 2, 3;
    const CholFactor c = chol(A, "A");
    const MatrixXd X = rng.normal_matrix(2, 3);
    const MatrixXd rhs = A * X;
    const MatrixXd back = tri_solve(c, tri_solve(c, rhs), Side::left, Transpose::yes);
    CHECK(oracle::rel_err(back, X) < 1e-12);

    const MatrixXd Xr = rng.normal_matrix(3, 2);
    CHECK(oracle::rel_err(tri_solve(c, Xr * c.L, Side::right), Xr) < 1e-12);
    CHECK(oracle::rel_err(tri_solve(c, Xr * c.L.transpose(), Side::right, Transpose::yes), Xr) < 1e-12);

    CholFactor zero{MatrixXd::Zero(2, 2), 0.0};
    CHECK_THROWS_AS((void)tri_solve(zero, B.topRows(2)), NumericalError);
}

TEST_CASE("chol round trip property") {
    Rng rng(12);
    for (int t = 0; t < 10; ++t) {
        const Index n = 1 + static_cast<Index>(rng.below(6));
        const MatrixXd A = oracle::random_spd(rng, n);
        const VectorXd b = rng.normal_matrix(n, 1);
        const CholFactor c = chol(A, "A");
        const VectorXd x = tri_solve(c, tri_solve(c, b), Side::left, Transpose::yes);
        CHECK(oracle::rel_err(VectorXd(A * x), b) < 1e-10);
    }
}
