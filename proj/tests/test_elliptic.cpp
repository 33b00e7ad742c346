#include <doctest.h>

#include "kronlvm/elliptic.hpp"
#include "kronlvm/errors.hpp"
#include "oracles.hpp"

using namespace kronlvm;

namespace {

double layered_log_a(double x1) {
    if (x1 < 0.3) return 0.0;
    if (x1 < 0.7) return 0.1;
    return -0.1;
}

// Exact 1-D flux balance: u(x) = 1 - F(x) / F(1) with F(x) = int_0^x dt / a(t).
double layered_exact(double x1) {
    auto F = [](double x) {
        const double breaks[] = {0.0, 0.3, 0.7, 1.0};
        double acc = 0.0;
        for (int i = 0; i < 3; ++i) {
            const double lo = breaks[i], hi = std::min(x, breaks[i + 1]);
            if (hi > lo) acc += (hi - lo) / std::exp(layered_log_a(lo));
        }
        return acc;
    };
    return 1.0 - F(x1) / F(1.0);
}

double layered_error(Index n) {
    const FemMesh mesh = make_mesh(n);
    VectorXd log_a(mesh.nodes.rows());
    for (Index k = 0; k < log_a.size(); ++k) log_a(k) = layered_log_a(mesh.nodes(k, 0));
    const FemSolution s = fem_solve(log_a, mesh);
    double err = 0.0;
    for (Index k = 0; k < log_a.size(); ++k) err = std::max(err, std::abs(s.u(k) - layered_exact(mesh.nodes(k, 0))));
    return err;
}

}  // namespace

TEST_CASE("KLE of a diagonal kernel") {
    const KleBasis b = kle_decompose(MatrixXd::Identity(6, 6), 6);
    CHECK((b.lambda.array() == 1.0).all());
    const MatrixXd P = b.phi.cwiseAbs();
    CHECK((P.colwise().sum().array() == 1.0).all());
    CHECK((P.rowwise().sum().array() == 1.0).all());
    CHECK(b.energy == 1.0);
}

TEST_CASE("KLE reconstruction, ordering and orthonormality") {
    const MatrixXd X = grid_points(7);
    const KernelSpec k = KernelSpec::exponential(0.3, 1.5);
    const MatrixXd K = gram(k, X, X);
    const KleBasis full = kle_decompose(k, X, K.rows());
    const VectorXd w = kle_weights(full, KleScaling::sqrt_eigenvalue);
    CHECK(oracle::rel_err(MatrixXd(full.phi * w.cwiseAbs2().asDiagonal() * full.phi.transpose()), K) < 1e-10);
    // The printed scaling reproduces K^2 rather than K.
    const VectorXd wp = kle_weights(full, KleScaling::as_printed);
    CHECK(oracle::rel_err(MatrixXd(full.phi * wp.cwiseAbs2().asDiagonal() * full.phi.transpose()), MatrixXd(K * K)) < 1e-10);

    for (Index d : {5, 20}) {
        const KleBasis b = kle_decompose(k, X, d);
        CHECK(oracle::rel_err(MatrixXd(b.phi.transpose() * b.phi), MatrixXd::Identity(d, d)) < 1e-8);
        for (Index i = 1; i < d; ++i) CHECK(b.lambda(i) <= b.lambda(i - 1));
        CHECK((b.lambda.array() >= 0.0).all());
        CHECK(oracle::rel_err(b.lambda, VectorXd(full.lambda.head(d))) < 1e-10);
        CHECK(std::abs(b.energy - full.lambda.head(d).sum() / K.trace()) < 1e-12);
    }
    CHECK_THROWS_AS((void)kle_decompose(k, X, 0), ValidationError);
    CHECK_THROWS_AS((void)kle_decompose(k, X, 50), ValidationError);
}

TEST_CASE("warp KLE energy capture") {
    const KernelSpec k1 = KernelSpec::rbf(1.0, VectorXd::Constant(2, 2.0 / std::sqrt(2.0)));
    const MatrixXd X = grid_points(17);
    const KleBasis b = kle_decompose(k1, X, 16);
    MESSAGE("energy at 16 terms " << b.energy << ", at 8 terms " << kle_decompose(k1, X, 8).energy);
    CHECK(b.energy >= 0.999);
    // Kernel as written, exp(-sum((x - x') / l)^2), at one pair of points.
    const MatrixXd pair = (MatrixXd(2, 2) << 0.0, 0.0, 0.3, 0.4).finished();
    CHECK(std::abs(gram(k1, pair, pair)(0, 1) - std::exp(-(0.09 + 0.16) / 4.0)) < 1e-15);
}

TEST_CASE("degenerate warp leaves the grid in place") {
    PriorConfig cfg;
    cfg.grid = 9;
    cfg.kl_terms_field = 8;
    for (double v : {0.0, 1e-20}) {
        cfg.warp_variance = v;
        const WarpBasis wb = warp_basis(cfg);
        const PriorSample s = sample_prior_one(cfg, wb, 3);
        CHECK((s.warped - grid_points(9)).cwiseAbs().maxCoeff() < 1e-8);
        // With no warp at all the sample is a plain draw of the field GP on the
        // grid. (A vanishing but nonzero warp can rotate modes within the
        // degenerate eigenspaces of the symmetric grid, so it is not compared.)
        if (v != 0.0) continue;
        Rng rng(cfg.seed, 3);
        for (Index i = 0; i < wb.terms; ++i) (void)rng.normal();
        VectorXd omega(8);
        for (Index i = 0; i < 8; ++i) omega(i) = rng.normal();
        const KleBasis f = kle_decompose(KernelSpec::exponential(0.1, 1.0), grid_points(9), 8);
        CHECK((s.log_a - f.phi * kle_weights(f, cfg.scaling).cwiseProduct(omega)).cwiseAbs().maxCoeff() < 1e-8);
    }
}

TEST_CASE("prior sampling is deterministic per seed and sample index") {
    PriorConfig cfg;
    cfg.grid = 9;
    cfg.kl_terms_field = 16;
    cfg.seed = 7;
    const FieldDataset a = sample_prior(cfg, 4), b = sample_prior(cfg, 4);
    CHECK(a.values == b.values);
    const FieldDataset tail = sample_prior(cfg, 2, 2);
    CHECK(tail.values == a.values.bottomRows(2));
    cfg.seed = 8;
    CHECK(sample_prior(cfg, 4).values != a.values);
    CHECK(a.values.allFinite());
    CHECK(a.field_energy.size() == 4);
    CHECK(a.warp_energy > 0.99);
}

TEST_CASE("prior marginal variance matches the retained energy") {
    PriorConfig cfg;
    cfg.grid = 17;
    cfg.kl_terms_field = 32;
    cfg.seed = 1;
    const FieldDataset ds = sample_prior(cfg, 500);
    double energy = 0.0;
    for (double e : ds.field_energy) energy += e;
    energy /= static_cast<double>(ds.field_energy.size());
    double var = 0.0;
    Index count = 0;
    for (Index p1 = 1; p1 + 1 < cfg.grid; ++p1)
        for (Index p2 = 1; p2 + 1 < cfg.grid; ++p2) {
            const VectorXd col = ds.values.col(p1 * cfg.grid + p2);
            var += (col.array() - col.mean()).square().sum() / static_cast<double>(col.size() - 1);
            ++count;
        }
    var /= static_cast<double>(count);
    const double ratio = var / (cfg.field_variance * energy);
    MESSAGE("mean interior variance " << var << ", energy " << energy << ", ratio " << ratio);
    CHECK(ratio >= 0.8);
    CHECK(ratio <= 1.2);
}

TEST_CASE("mesh structure") {
    for (Index n : {2, 5, 17}) {
        const FemMesh m = make_mesh(n);
        CHECK(static_cast<Index>(m.tris.size()) == 2 * (n - 1) * (n - 1));
        double area = 0.0;
        for (std::size_t t = 0; t < m.tris.size(); ++t) {
            CHECK(m.signed_area(t) > 0.0);
            area += m.signed_area(t);
        }
        CHECK(std::abs(area - 1.0) < 1e-12);
        for (Index k = 0; k < n * n; ++k) {
            const double x1 = m.nodes(k, 0), x2 = m.nodes(k, 1);
            const bool on_x1 = x1 == 0.0 || x1 == 1.0, on_x2 = x2 == 0.0 || x2 == 1.0;
            CHECK(m.dirichlet[static_cast<std::size_t>(k)] == on_x1);
            CHECK(m.neumann[static_cast<std::size_t>(k)] == (on_x2 && !on_x1));
        }
    }
}

TEST_CASE("FEM closed forms") {
    const FemMesh mesh = make_mesh(17);
    const FemSolution s = fem_solve(VectorXd::Zero(17 * 17), mesh);
    CHECK(s.u_hat.cwiseAbs().maxCoeff() < 1e-10);

    // A constant conductivity of any magnitude gives the same solution.
    CHECK(fem_solve(VectorXd::Constant(17 * 17, 2.5), mesh).u_hat.cwiseAbs().maxCoeff() < 1e-10);

    const double e17 = layered_error(17), e33 = layered_error(33);
    MESSAGE("layered max error: 17 -> " << e17 << ", 33 -> " << e33);
    CHECK(e33 < 1e-3);
    CHECK(e33 < e17);

    CHECK_THROWS_AS((void)fem_solve(VectorXd::Zero(10), mesh), ValidationError);
}

TEST_CASE("FEM reflection symmetry and maximum principle") {
    PriorConfig cfg;
    cfg.grid = 17;
    cfg.seed = 4;
    const FieldDataset ds = sample_prior(cfg, 20);
    const FemMesh mesh = make_mesh(17);
    for (Index t = 0; t < ds.n_xi(); ++t) {
        VectorXd la = ds.values.row(t).transpose();
        // Symmetrize in x2.
        for (Index p1 = 0; p1 < 17; ++p1)
            for (Index p2 = 0; p2 < 17; ++p2) la(p1 * 17 + p2) = 0.5 * (ds.values(t, p1 * 17 + p2) + ds.values(t, p1 * 17 + 16 - p2));
        const FemSolution s = fem_solve(la, mesh);
        double asym = 0.0;
        for (Index p1 = 0; p1 < 17; ++p1)
            for (Index p2 = 0; p2 < 17; ++p2) asym = std::max(asym, std::abs(s.u(p1 * 17 + p2) - s.u(p1 * 17 + 16 - p2)));
        CHECK(asym < 1e-10);

        const FemSolution raw = fem_solve(ds.values.row(t).transpose(), mesh);
        CHECK(raw.u.minCoeff() >= -1e-8);
        CHECK(raw.u.maxCoeff() <= 1.0 + 1e-8);
    }
    const FieldDataset sol = solve_dataset(ds);
    CHECK(sol.kind == FieldDataset::Kind::solution_hat);
    CHECK(sol.values.row(3).transpose() == fem_solve(ds.values.row(3).transpose(), mesh).u_hat);
}

TEST_CASE("observation sub-grids") {
    const std::vector<Index> idx = uniform_subgrid(65, 5);
    CHECK(idx == std::vector<Index>{0, 16, 32, 48, 64});
    CHECK(uniform_subgrid(33, 9) == std::vector<Index>{0, 4, 8, 12, 16, 20, 24, 28, 32});
    CHECK_THROWS_AS((void)uniform_subgrid(33, 6), ValidationError);
    CHECK(locate_on_grid(unit_grid(33), (VectorXd(2) << 0.25, 1.0).finished()) == std::vector<Index>{8, 32});
    CHECK_THROWS_AS((void)locate_on_grid(unit_grid(33), VectorXd::Constant(1, 0.3)), ValidationError);

    PriorConfig cfg;
    cfg.grid = 9;
    cfg.kl_terms_field = 8;
    const FieldDataset sol = solve_dataset(sample_prior(cfg, 3));
    const std::vector<std::vector<Index>> sub{uniform_subgrid(9, 5), uniform_subgrid(9, 3)};
    const Observations exact = subsample_observations(sol, sub, 0.0, 1);
    CHECK(exact.values.cols() == 15);
    CHECK(exact.values(1, 4) == sol.values(1, 2 * 9 + 4));
    CHECK(exact.grid[1](1) == 0.5);

    FieldDataset zeros;
    zeros.grid = {unit_grid(100), VectorXd::Zero(1)};
    zeros.values = MatrixXd::Zero(100, 100);
    std::vector<Index> all(100);
    for (Index i = 0; i < 100; ++i) all[static_cast<std::size_t>(i)] = i;
    const Observations noisy = subsample_observations(zeros, {all, {0}}, 0.2, 9);
    const double sd = std::sqrt(noisy.values.array().square().mean());
    CHECK(std::abs(sd / 0.2 - 1.0) < 0.03);
    CHECK_THROWS_AS((void)subsample_observations(zeros, {{100}, {0}}, 0.0, 1), ValidationError);
}
