#include <doctest.h>

#include "kronlvm/errors.hpp"
#include "kronlvm/sgplvm.hpp"
#include "kronlvm/sgpr.hpp"
#include "oracles.hpp"

using namespace kronlvm;

namespace {

const KernelFamily families[] = {KernelFamily::rbf_ard, KernelFamily::linear, KernelFamily::sum};

SgplvmModel permute_realizations(const SgplvmModel& m, const std::vector<Index>& perm) {
    SgplvmModel p = m;
    const Index ns = m.n_s();
    for (Index i = 0; i < m.n_xi(); ++i) {
        const Index src = perm[static_cast<std::size_t>(i)];
        p.q.mu.row(i) = m.q.mu.row(src);
        p.q.s.row(i) = m.q.s.row(src);
        p.y.middleRows(i * ns, ns) = m.y.middleRows(src * ns, ns);
    }
    return p;
}

VectorXd full_gradient(const SgplvmModel& m) {
    return sgplvm_pack_gradient(m, bound_gradients(m, bound_cache(m)));
}

}  // namespace

TEST_CASE("latent prior KL") {
    LatentPosterior q{MatrixXd::Zero(3, 2), MatrixXd::Ones(3, 2)};
    CHECK(latent_prior_kl(q) == 0.0);
    LatentPosterior one{MatrixXd::Ones(1, 1), MatrixXd::Ones(1, 1)};
    CHECK(std::abs(latent_prior_kl(one) - 0.5) < 1e-15);
    Rng rng(4);
    LatentPosterior r{rng.normal_matrix(5, 3), (0.1 + rng.normal_matrix(5, 3).array().abs()).matrix()};
    CHECK(oracle::rel_err(latent_prior_kl(r), oracle::kl_oracle(r)) < 1e-12);
    r.s(0, 0) = 0.0;
    CHECK_THROWS_AS((void)latent_prior_kl(r), ValidationError);
}

TEST_CASE("collapsed bound matches the dense transcription") {
    Rng rng(17);
    for (int trial = 0; trial < 12; ++trial) {
        const KernelFamily fam = families[trial % 3];
        const Index mx = 2 + trial % 2;
        SgplvmModel m = oracle::random_sgplvm(rng, fam, 4, 3, mx, 3, 2);
        const BoundCache c = bound_cache(m);
        CHECK(oracle::rel_err(c.bound, oracle::dense_collapsed_bound(m)) < 1e-10);
        CHECK(oracle::rel_err(c.per_dim, oracle::dense_collapsed_per_dim(m)) < 1e-10);
        CHECK(std::abs(c.per_dim.sum() - c.kl - c.bound) <= 1e-10 * std::abs(c.bound));
        CHECK((c.D.array() > 0.0).all());

        // C of the stochastic factor is built from the per-row Psi2 summands.
        MatrixXd psi2_sum = MatrixXd::Zero(mx, mx);
        for (Index i = 0; i < m.n_xi(); ++i) psi2_sum += psi2_row(m.k_xi, m.q, i, m.z_xi);
        CHECK(oracle::rel_err(c.factors[0].psi2, psi2_sum) < 1e-12);
    }
}

TEST_CASE("optimal q(U) and uncollapsed bound consistency") {
    Rng rng(23);
    for (int trial = 0; trial < 9; ++trial) {
        SgplvmModel m = oracle::random_sgplvm(rng, families[trial % 3], 4, 3, 2, 2, 2);
        const BoundCache c = bound_cache(m);
        const OptimalQu qu = optimal_qu(m, c);
        const oracle::DenseQu ref = oracle::dense_optimal_qu(m);
        CHECK(oracle::rel_err(qu.mean, ref.mean) < 1e-10);
        CHECK(oracle::rel_err(qu.dense_covariance(), ref.cov) < 1e-10);
        CHECK(oracle::rel_err(oracle::dense_uncollapsed_bound(m, qu.mean, qu.dense_covariance()), c.bound) < 1e-8);
        // Any other q(U) gives a lower uncollapsed bound.
        const MatrixXd shifted = qu.mean + 0.1 * rng.normal_matrix(qu.mean.rows(), qu.mean.cols());
        CHECK(oracle::dense_uncollapsed_bound(m, shifted, qu.dense_covariance()) < c.bound);
    }
    SgplvmModel zero = oracle::random_sgplvm(rng, KernelFamily::rbf_ard);
    zero.y.setZero();
    CHECK(optimal_qu(zero, bound_cache(zero)).mean.norm() == 0.0);
}

TEST_CASE("zero data leaves only the data-independent terms") {
    Rng rng(5);
    SgplvmModel m = oracle::random_sgplvm(rng, KernelFamily::sum);
    m.y.setZero();
    const BoundCache c = bound_cache(m);
    const double n = static_cast<double>(m.y.rows()), mm = static_cast<double>(c.lambda.size());
    const double per = 0.5 * ((n - mm) * std::log(m.beta) - n * std::log(2 * M_PI) - c.D.array().log().sum()) -
                       0.5 * m.beta * (c.psi0 - c.trace_c);
    CHECK(std::abs(c.per_dim(0) - per) < 1e-10 * std::abs(per));
    CHECK(c.B.norm() == 0.0);
    CHECK(oracle::rel_err(c.bound, oracle::dense_collapsed_bound(m)) < 1e-10);
}

TEST_CASE("per-dimension bound symmetries") {
    Rng rng(8);
    SgplvmModel one = oracle::random_sgplvm(rng, KernelFamily::rbf_ard, 4, 3, 2, 2, 1);
    const BoundCache c1 = bound_cache(one);
    CHECK(std::abs(c1.per_dim(0) - (c1.bound + c1.kl)) < 1e-10 * std::abs(c1.bound));

    SgplvmModel two = one;
    two.y = one.y.replicate(1, 2);
    const BoundCache c2 = bound_cache(two);
    CHECK(c2.per_dim(0) == c2.per_dim(1));

    // Hyperparameter gradients double when every column is duplicated.
    const BoundGradient g1 = bound_gradients(one, c1), g2 = bound_gradients(two, c2);
    CHECK(oracle::rel_err(g2.k_xi, VectorXd(2.0 * g1.k_xi)) < 1e-10);
    CHECK(std::abs(g2.log_beta - 2.0 * g1.log_beta) < 1e-10 * std::abs(g1.log_beta));
    for (std::size_t f = 0; f < g1.k_s.size(); ++f) CHECK(oracle::rel_err(g2.k_s[f], VectorXd(2.0 * g1.k_s[f])) < 1e-10);
}

TEST_CASE("bound is invariant to permuting realizations") {
    Rng rng(31);
    for (KernelFamily fam : families) {
        const SgplvmModel m = oracle::random_sgplvm(rng, fam, 4, 3, 3, 3, 2);
        const SgplvmModel p = permute_realizations(m, {2, 0, 3, 1});
        CHECK(oracle::rel_err(collapsed_bound(p), collapsed_bound(m)) < 1e-10);
    }
}

TEST_CASE("bound gradients match finite differences") {
    Rng rng(99);
    for (int trial = 0; trial < 6; ++trial) {
        const SgplvmModel base = oracle::random_sgplvm(rng, families[trial % 3], 4, 3, 2 + trial % 2, 3, 2);
        auto f = [&base](const VectorXd& p) {
            SgplvmModel m = base;
            sgplvm_unpack(m, p);
            return collapsed_bound(m);
        };
        const VectorXd p0 = sgplvm_pack(base);
        const VectorXd g = full_gradient(base);
        REQUIRE(g.size() == p0.size());
        CHECK(oracle::worst_grad_err(g, oracle::finite_diff(f, p0)) < 1e-4);
    }
}

TEST_CASE("frozen groups") {
    Rng rng(12);
    SgplvmModel m = oracle::random_sgplvm(rng, KernelFamily::sum);
    m.frozen = {true, true, true, true, true};
    CHECK(sgplvm_pack(m).size() == 0);
    const BoundGradient g = bound_gradients(m, bound_cache(m));
    CHECK(g.mu.norm() == 0.0);
    CHECK(g.log_s.norm() == 0.0);
    CHECK(g.z_xi.norm() == 0.0);
    CHECK(g.k_xi.norm() == 0.0);
    CHECK(g.log_beta == 0.0);

    m.frozen = {};
    m.frozen.latents = true;
    const SgplvmTrainResult r = sgplvm_train(m, {50});
    CHECK(r.model.q.mu == m.q.mu);
    CHECK(r.model.q.s == m.q.s);
    CHECK(r.opt.value >= r.initial_bound);
}

TEST_CASE("collapse to structured GP regression at Z = X and vanishing latent variance") {
    Rng rng(77);
    SgplvmModel m;
    m.q.mu = 2.0 * rng.normal_matrix(4, 2);
    m.q.s = MatrixXd::Constant(4, 2, 1e-10);
    m.z_xi = m.q.mu;
    m.k_xi = KernelSpec::rbf(1.0, VectorXd::Constant(2, 0.8));
    m.x_s = {VectorXd::LinSpaced(3, 0, 1), VectorXd::LinSpaced(3, 0, 1)};
    m.k_s = {KernelSpec::exponential(0.5), KernelSpec::exponential(0.5)};
    m.beta = 10.0;
    m.y = rng.normal_matrix(36, 2);

    SgprModel g;
    g.inputs.x_xi = m.q.mu;
    g.inputs.x_s = m.x_s;
    g.k_xi = m.k_xi;
    g.k_s = m.k_s;
    g.beta = m.beta;
    g.y = m.y;
    const BoundCache c = bound_cache(m);
    CHECK(std::abs(c.bound - (sgpr_log_likelihood(g) - c.kl)) < 1e-6);
    CHECK(std::abs(c.psi0 - c.trace_c) < 1e-6);
    CHECK(c.bound <= sgpr_log_likelihood(g) - c.kl + 1e-9);

    // Noiseless limit: the optimal inducing outputs interpolate the data.
    m.beta = 1e8;
    const OptimalQu qu = optimal_qu(m, bound_cache(m));
    CHECK((qu.mean - m.y).cwiseAbs().maxCoeff() < 1e-3);
}

TEST_CASE("initialization policy") {
    Rng rng(3);
    const MatrixXd y = rng.normal_matrix(10 * 9, 1);
    InitPolicy pol;
    pol.family = KernelFamily::sum;
    pol.seed = 4;
    const std::vector<MatrixXd> xs{VectorXd::LinSpaced(3, 0, 1), VectorXd::LinSpaced(3, 0, 2)};
    const SgplvmModel m = sgplvm_init(y, xs, pol);
    CHECK(m.latent_dim() == 5);
    CHECK(m.z_xi.rows() == 5);
    CHECK((m.q.s.array() == 0.1).all());
    for (Index k = 0; k < m.latent_dim(); ++k) {
        CHECK(std::abs(m.q.mu.col(k).mean()) < 1e-10);
        CHECK(std::abs(m.q.mu.col(k).squaredNorm() / 10.0 - 1.0) < 1e-10);
    }
    // Inducing inputs are rows of the latent means.
    for (Index r = 0; r < m.z_xi.rows(); ++r) {
        bool found = false;
        for (Index i = 0; i < m.n_xi(); ++i) found = found || m.z_xi.row(r) == m.q.mu.row(i);
        CHECK(found);
    }
    CHECK(std::abs(m.k_s[1].lengthscales(0) - 0.5) < 1e-15);
    const SgplvmModel again = sgplvm_init(y, xs, pol);
    CHECK(again.z_xi == m.z_xi);
    CHECK_THROWS_AS((void)sgplvm_init(rng.normal_matrix(10, 1), xs, pol), ValidationError);
}

TEST_CASE("training increases the bound monotonically and is stationary at convergence") {
    Rng rng(41);
    const MatrixXd y = rng.normal_matrix(8 * 16, 1);
    InitPolicy pol;
    pol.seed = 1;
    const SgplvmModel m0 = sgplvm_init(y, {VectorXd::LinSpaced(4, 0, 1), VectorXd::LinSpaced(4, 0, 1)}, pol);
    OptimizerSettings s;
    s.max_iter = 3000;
    const SgplvmTrainResult r = sgplvm_train(m0, s);
    CHECK(r.opt.value >= r.initial_bound);
    for (std::size_t i = 1; i < r.opt.log.size(); ++i) CHECK(r.opt.log[i].objective >= r.opt.log[i - 1].objective);
    CHECK(std::abs(collapsed_bound(r.model) - r.opt.value) < 1e-9 * std::abs(r.opt.value));
    if (r.opt.converged) {
        const SgplvmTrainResult again = sgplvm_train(r.model, s);
        CHECK(std::abs(again.opt.value - r.opt.value) < 1e-6 * std::max(1.0, std::abs(r.opt.value)) * 10);
    }
}

namespace {

// Outputs generated from a 2-D latent through a structured GP with an RBF
// stochastic kernel.
MatrixXd two_latent_data(Rng& rng, Index nx, Index grid, double noise) {
    const MatrixXd X = rng.normal_matrix(nx, 2);
    const std::vector<MatrixXd> Ls{
        chol(gram(KernelSpec::rbf(1.0, VectorXd::Constant(2, 1.5)), X, X), "K").L,
        chol(gram(KernelSpec::exponential(0.5), VectorXd::LinSpaced(grid, 0, 1), VectorXd::LinSpaced(grid, 0, 1)), "K").L,
        chol(gram(KernelSpec::exponential(0.5), VectorXd::LinSpaced(grid, 0, 1), VectorXd::LinSpaced(grid, 0, 1)), "K").L};
    const Index n = nx * grid * grid;
    return kron_apply(Ls, rng.normal_matrix(n, 1)) + noise * rng.normal_matrix(n, 1);
}

}  // namespace

TEST_CASE("automatic relevance determination prunes unused latent dimensions") {
    double pruned_total = 0.0;
    const int seeds = 5;
    for (int seed = 1; seed <= seeds; ++seed) {
        Rng rng(static_cast<std::uint64_t>(seed));
        const Index grid = 5;
        const MatrixXd y = two_latent_data(rng, 40, grid, 0.05);
        InitPolicy pol;
        pol.latent_dim = 8;
        pol.inducing = 20;
        pol.seed = static_cast<std::uint64_t>(seed);
        const std::vector<MatrixXd> xs{VectorXd::LinSpaced(grid, 0, 1), VectorXd::LinSpaced(grid, 0, 1)};
        OptimizerSettings s;
        s.max_iter = 2000;
        const SgplvmTrainResult r = sgplvm_train(sgplvm_init(y, xs, pol), s);
        VectorXd ell = r.model.k_xi.lengthscales;
        std::sort(ell.data(), ell.data() + ell.size());
        const double active = ell(1);
        pruned_total += static_cast<double>((ell.array() > 10.0 * active).count());
        MESSAGE("seed " << seed << " lengthscales " << r.model.k_xi.lengthscales.transpose());
    }
    CHECK(pruned_total / seeds >= 6.0);
}
