#include <doctest.h>

#include "kronlvm/errors.hpp"
#include "kronlvm/pipeline.hpp"

#include <cmath>
#include <numbers>

using namespace kronlvm;

namespace {

struct Pool {
    FieldDataset in, out, test_in, test_out;
    std::vector<MatrixXd> grid;
};

Pool make_pool(Index grid, Index n_train, Index n_test, std::uint64_t seed) {
    PriorConfig pc;
    pc.grid = grid;
    pc.seed = seed;
    Pool p;
    p.in = sample_prior(pc, n_train, 0);
    p.out = solve_dataset(p.in);
    p.test_in = sample_prior(pc, n_test, 1000000);
    p.test_out = solve_dataset(p.test_in);
    p.grid = grid_factors(p.in.grid);
    return p;
}

const Pool& desk_pool() {
    static const Pool p = make_pool(17, 32, 6, 11);
    return p;
}

SurrogateConfig quick_config() {
    SurrogateConfig cfg;
    cfg.train.max_iter = 400;
    cfg.infer.max_iter = 150;
    cfg.restarts = 2;
    cfg.n_mog = 30;
    return cfg;
}

const TwoModelTrainResult& desk_two_model() {
    static const TwoModelTrainResult r = train_two_model(desk_pool().in, desk_pool().out, quick_config());
    return r;
}

const JointTrainResult& desk_joint() {
    static const JointTrainResult r = train_joint(desk_pool().in, desk_pool().out, quick_config());
    return r;
}

FieldDataset rows_of(const FieldDataset& d, Index first, Index n) {
    FieldDataset out = d;
    out.values = d.values.middleRows(first, n);
    out.first_index = d.first_index + static_cast<std::uint64_t>(first);
    out.field_energy.assign(d.field_energy.begin() + first, d.field_energy.begin() + first + n);
    return out;
}

VectorXd row(const FieldDataset& d, Index i) { return d.values.row(i).transpose(); }

double correlation(const VectorXd& a, const VectorXd& b) {
    const VectorXd ac = a.array() - a.mean(), bc = b.array() - b.mean();
    return ac.dot(bc) / (ac.norm() * bc.norm());
}

// Mirror image x2 -> 1 - x2 of a field in Kronecker order (x2 fastest).
VectorXd mirror(const VectorXd& f, Index n1, Index n2) {
    VectorXd out(f.size());
    for (Index a = 0; a < n1; ++a)
        for (Index b = 0; b < n2; ++b) out(a * n2 + b) = f(a * n2 + (n2 - 1 - b));
    return out;
}

}  // namespace

TEST_CASE("realizations stack in Kronecker order") {
    MatrixXd v(2, 3);
    v << 1, 2, 3, 4, 5, 6;
    const MatrixXd y = stack_realizations(v);
    REQUIRE(y.rows() == 6);
    for (Index i = 0; i < 2; ++i)
        for (Index p = 0; p < 3; ++p) CHECK(y(i * 3 + p, 0) == v(i, p));
}

TEST_CASE("pruning map") {
    const Pool& p = desk_pool();
    SUBCASE("all realizations solved gives the identity") {
        const auto rows = solved_rows(p.in, p.out);
        REQUIRE(static_cast<Index>(rows.size()) == p.in.n_xi());
        for (std::size_t t = 0; t < rows.size(); ++t) CHECK(rows[t] == static_cast<Index>(t));
    }
    SUBCASE("a solved block maps to its input rows") {
        const auto rows = solved_rows(p.in, rows_of(p.out, 5, 10));
        REQUIRE(rows.size() == 10);
        CHECK(rows.front() == 5);
        CHECK(rows.back() == 14);
    }
    SUBCASE("solved realizations outside the input set are rejected") {
        CHECK_THROWS_AS((void)solved_rows(rows_of(p.in, 0, 10), rows_of(p.out, 5, 10)), ValidationError);
        CHECK_THROWS_AS((void)solved_rows(p.in, rows_of(p.out, 0, 0)), ValidationError);
    }
}

TEST_CASE("two-model training at desk scale") {
    const TwoModelTrainResult& r = desk_two_model();
    const TwoModelSurrogate& s = r.surrogate;
    CHECK(std::isfinite(r.input.bound));
    CHECK(std::isfinite(r.output.bound));
    CHECK(r.input.bound > r.input.initial_bound);
    CHECK(r.output.bound > r.output.initial_bound);
    // Output latents are the input posterior, untouched by output training.
    CHECK(s.output_model.frozen.latents);
    CHECK(s.output_model.q.mu == s.input_model.q.mu);
    CHECK(s.output_model.q.s == s.input_model.q.s);
    CHECK_NOTHROW(s.validate());
}

TEST_CASE("two-model training on a solved subset") {
    const Pool& p = desk_pool();
    SurrogateConfig cfg = quick_config();
    cfg.train.max_iter = 60;
    const TwoModelTrainResult r = train_two_model(p.in, rows_of(p.out, 8, 16), cfg);
    const TwoModelSurrogate& s = r.surrogate;
    REQUIRE(s.output_model.n_xi() == 16);
    for (Index t = 0; t < 16; ++t) {
        CHECK(s.output_model.q.mu.row(t) == s.input_model.q.mu.row(8 + t));
        CHECK(s.output_model.q.s.row(t) == s.input_model.q.s.row(8 + t));
    }
    CHECK_NOTHROW(s.validate());
}

TEST_CASE("two-model forward prediction") {
    const Pool& p = desk_pool();
    const TwoModelSurrogate& s = desk_two_model().surrogate;
    const SurrogateConfig cfg = quick_config();

    SUBCASE("identical inputs give identical predictions with positive variance") {
        const FieldPrediction a = forward_predict_two_model(s, row(p.test_in, 0), p.grid, p.grid, cfg);
        const FieldPrediction b = forward_predict_two_model(s, row(p.test_in, 0), p.grid, p.grid, cfg);
        CHECK(a.moments.mean == b.moments.mean);
        CHECK(a.moments.variance == b.moments.variance);
        CHECK((a.moments.variance.array() > 0.0).all());
    }
    SUBCASE("training inputs are reproduced better than held-out ones") {
        double train_rmse = 0.0, test_rmse = 0.0;
        const Index k = 4;
        for (Index i = 0; i < k; ++i) {
            const FieldPrediction tr = forward_predict_two_model(s, row(p.in, i), p.grid, p.grid, cfg);
            train_rmse += metrics(tr.moments.mean, tr.moments.variance, row(p.out, i)).rmse / k;
            const FieldPrediction te = forward_predict_two_model(s, row(p.test_in, i), p.grid, p.grid, cfg);
            test_rmse += metrics(te.moments.mean, te.moments.variance, row(p.test_out, i)).rmse / k;
        }
        MESSAGE("forward rmse train " << train_rmse << ", held out " << test_rmse);
        CHECK(train_rmse <= 2.0 * test_rmse);
    }
    SUBCASE("shape errors are reported") {
        CHECK_THROWS_AS((void)forward_predict_two_model(s, VectorXd::Zero(5), p.grid, p.grid, cfg), ValidationError);
    }
}

TEST_CASE("two-model inverse prediction") {
    const Pool& p = desk_pool();
    const TwoModelSurrogate& s = desk_two_model().surrogate;
    const SurrogateConfig cfg = quick_config();

    SUBCASE("noiseless full-resolution observation of a training case") {
        const Index i = 3;
        const FieldPrediction inv = inverse_predict_two_model(s, row(p.out, i), p.grid, p.grid, cfg);
        const double rmse = metrics(inv.moments.mean, inv.moments.variance, row(p.in, i)).rmse;
        // Reconstruction of the same input from its own training latent.
        const PredictiveMoments rec = predict_given_latent(s.input_model, s.input_cache, s.input_model.q.mu.row(i), p.grid);
        const VectorXd rec_mean = rec.mean.array() + s.input_offset;
        const double rec_rmse = std::sqrt((rec_mean - row(p.in, i)).squaredNorm() / static_cast<double>(rec_mean.size()));
        MESSAGE("inverse rmse " << rmse << ", reconstruction rmse " << rec_rmse);
        CHECK(rmse <= 2.0 * rec_rmse);
    }
    SUBCASE("a single observation leaves far-field variance at its prior level") {
        const auto axis = std::vector<Index>{8};
        const Observations obs = subsample_observations(p.test_out, {axis, axis}, 0.0, 1);
        const FieldPrediction inv =
            inverse_predict_two_model(s, obs.values.row(0).transpose(), grid_factors(obs.grid), p.grid, cfg);
        const TestLatentPosterior prior{Eigen::RowVectorXd::Zero(s.input_model.latent_dim()),
                                        Eigen::RowVectorXd::Ones(s.input_model.latent_dim()), 1.0};
        MarginalOptions mo;
        mo.n_mog = 200;
        const PredictiveMoments pp = predict_marginalized(s.input_model, s.input_cache, prior, p.grid, mo);
        // Corners of the unit square are farthest from the centre observation.
        double ratio = 0.0;
        for (Index c : {Index{0}, Index{16}, Index{17 * 16}, Index{17 * 17 - 1}}) {
            ratio += inv.moments.variance(c) / pp.variance(c) / 4.0;
        }
        MESSAGE("far-field posterior / prior variance " << ratio);
        CHECK(ratio == doctest::Approx(1.0).epsilon(0.2));
    }
}

TEST_CASE("inverse mean inherits the x2-reflection symmetry of the data") {
    // Every training field is symmetric, so the predictive mean of any
    // latent is too, whatever the inferred posterior.
    Pool p = make_pool(9, 16, 1, 5);
    for (Index i = 0; i < p.in.n_xi(); ++i) {
        p.in.values.row(i) = 0.5 * (row(p.in, i) + mirror(row(p.in, i), 9, 9)).transpose();
        p.out.values.row(i) = 0.5 * (row(p.out, i) + mirror(row(p.out, i), 9, 9)).transpose();
    }
    SurrogateConfig cfg = quick_config();
    cfg.train.max_iter = 100;
    const TwoModelSurrogate s = train_two_model(p.in, p.out, cfg).surrogate;
    const auto axis = uniform_subgrid(9, 5);
    const Observations obs = subsample_observations(p.test_out, {axis, axis}, 0.0, 1);
    VectorXd y = obs.values.row(0).transpose();
    y = 0.5 * (y + mirror(y, 5, 5));
    const FieldPrediction inv = inverse_predict_two_model(s, y, grid_factors(obs.grid), p.grid, cfg);
    const VectorXd& m = inv.moments.mean;
    CHECK((m - mirror(m, 9, 9)).cwiseAbs().maxCoeff() < 1e-6);
}

TEST_CASE("joint training") {
    const Pool& p = desk_pool();
    SUBCASE("desk-scale run improves a finite bound") {
        const JointTrainResult& r = desk_joint();
        CHECK(std::isfinite(r.report.bound));
        CHECK(r.report.bound > r.report.initial_bound);
        CHECK(r.surrogate.model.y.cols() == 2);
        CHECK(r.surrogate.output_scale > 0.0);
        CHECK_NOTHROW(r.surrogate.validate());
    }
    SUBCASE("mismatched grids are rejected") {
        PriorConfig pc;
        pc.grid = 9;
        const FieldDataset other = solve_dataset(sample_prior(pc, 32, 0));
        CHECK_THROWS_WITH_AS((void)train_joint(p.in, other, quick_config()), doctest::Contains("grid"), ValidationError);
    }
    SUBCASE("mismatched realizations are rejected") {
        CHECK_THROWS_WITH_AS((void)train_joint(p.in, rows_of(p.out, 0, 16), quick_config()),
                             doctest::Contains("n_xi,in = n_xi,out"), ValidationError);
    }
}

TEST_CASE("joint predictions ignore the masked column") {
    const Pool& p = desk_pool();
    const JointSurrogate& s = desk_joint().surrogate;
    const SurrogateConfig cfg = quick_config();
    MatrixXd y(p.in.values.cols(), 2);
    y.col(0) = row(p.test_in, 0).array() - s.input_offset;
    InferOptions io;
    io.optimize_beta_star = false;
    io.restarts = 2;
    io.optimizer.max_iter = 100;
    y.col(1).setZero();
    const InferResult a = infer_latent(s.model, s.cache, y, p.grid, {true, false}, io);
    y.col(1) = Rng(3).normal_matrix(y.rows(), 1) * 1e3;
    const InferResult b = infer_latent(s.model, s.cache, y, p.grid, {true, false}, io);
    CHECK(a.q_star.mu == b.q_star.mu);
    CHECK(a.q_star.s == b.q_star.s);
    CHECK(a.objective == b.objective);

    const FieldPrediction f = forward_predict_joint(s, row(p.test_in, 0), p.grid, p.grid, cfg);
    CHECK(f.moments.mean.size() == p.grid[0].rows() * p.grid[1].rows());
    CHECK((f.moments.variance.array() > 0.0).all());
}

TEST_CASE("joint output rescaling is a pure change of units") {
    const Pool& p = desk_pool();
    SurrogateConfig cfg = quick_config();
    cfg.train.max_iter = 80;
    FieldDataset doubled = p.out;
    doubled.values *= 2.0;
    const JointSurrogate a = train_joint(p.in, p.out, cfg).surrogate;
    const JointSurrogate b = train_joint(p.in, doubled, cfg).surrogate;
    CHECK(b.output_scale == doctest::Approx(2.0 * a.output_scale).epsilon(1e-14));

    const auto axis = uniform_subgrid(17, 5);
    const Observations obs = subsample_observations(p.test_out, {axis, axis}, 0.0, 1);
    const VectorXd y = obs.values.row(1).transpose();
    const FieldPrediction ia = inverse_predict_joint(a, y, grid_factors(obs.grid), p.grid, cfg);
    const FieldPrediction ib = inverse_predict_joint(b, 2.0 * y, grid_factors(obs.grid), p.grid, cfg);
    CHECK((ia.moments.mean - ib.moments.mean).cwiseAbs().maxCoeff() < 1e-8);
    CHECK((ia.moments.variance - ib.moments.variance).cwiseAbs().maxCoeff() < 1e-8);

    const FieldPrediction fa = forward_predict_joint(a, row(p.test_in, 1), p.grid, p.grid, cfg);
    const FieldPrediction fb = forward_predict_joint(b, row(p.test_in, 1), p.grid, p.grid, cfg);
    CHECK((2.0 * fa.moments.mean - fb.moments.mean).cwiseAbs().maxCoeff() < 1e-8);
}

TEST_CASE("joint forward then inverse round trip recovers the input") {
    const Pool p = make_pool(17, 64, 1, 21);
    SurrogateConfig cfg = quick_config();
    cfg.train.max_iter = 600;
    const JointSurrogate s = train_joint(p.in, p.out, cfg).surrogate;
    double corr = 0.0;
    const Index k = 4;
    for (Index i = 0; i < k; ++i) {
        const FieldPrediction f = forward_predict_joint(s, row(p.in, i), p.grid, p.grid, cfg);
        const FieldPrediction inv = inverse_predict_joint(s, f.moments.mean, p.grid, p.grid, cfg);
        corr += correlation(inv.moments.mean, row(p.in, i)) / k;
    }
    MESSAGE("round-trip correlation " << corr);
    CHECK(corr >= 0.8);
}

TEST_CASE("PCA input model") {
    const Pool& p = desk_pool();
    const PcaInputModel pca = fit_pca(p.in.values, 8);
    const MatrixXd gram = pca.components.transpose() * pca.components;
    CHECK((gram - MatrixXd::Identity(8, 8)).cwiseAbs().maxCoeff() < 1e-10);

    SUBCASE("scores of the training set are whitened") {
        MatrixXd z(p.in.n_xi(), 8);
        for (Index i = 0; i < p.in.n_xi(); ++i) z.row(i) = pca.encode(row(p.in, i));
        CHECK(z.colwise().mean().cwiseAbs().maxCoeff() < 1e-10);
        CHECK(((z.transpose() * z) / static_cast<double>(p.in.n_xi()) - MatrixXd::Identity(8, 8)).cwiseAbs().maxCoeff() <
              1e-8);
    }
    SUBCASE("decode inverts encode on the retained subspace") {
        const VectorXd f = pca.decode(pca.encode(row(p.test_in, 0)));
        CHECK((pca.encode(f) - pca.encode(row(p.test_in, 0))).cwiseAbs().maxCoeff() < 1e-10);
    }
    SUBCASE("full rank reproduces the training data") {
        const PcaInputModel full = fit_pca(p.in.values, p.in.n_xi() - 1);
        CHECK((full.decode(full.encode(row(p.in, 2))) - row(p.in, 2)).cwiseAbs().maxCoeff() < 1e-9);
        CHECK(full.residual_variance < 1e-20);
    }
    SUBCASE("invalid dimensions") {
        CHECK_THROWS_AS((void)fit_pca(p.in.values, 0), ValidationError);
        CHECK_THROWS_AS((void)fit_pca(p.in.values, p.in.n_xi() + 1), ValidationError);
    }
}

TEST_CASE("PCA baseline pipeline") {
    const Pool& p = desk_pool();
    SurrogateConfig cfg = quick_config();
    cfg.train.max_iter = 150;
    const PcaTrainResult r = train_pca_baseline(p.in, p.out, cfg);
    CHECK(r.output.bound > r.output.initial_bound);
    const FieldPrediction f = forward_predict_pca(r.surrogate, row(p.test_in, 0), p.grid, cfg);
    CHECK(f.moments.mean.allFinite());
    CHECK((f.moments.variance.array() > 0.0).all());
    const auto axis = uniform_subgrid(17, 5);
    const Observations obs = subsample_observations(p.test_out, {axis, axis}, 0.0, 1);
    const FieldPrediction inv = inverse_predict_pca(r.surrogate, obs.values.row(0).transpose(), grid_factors(obs.grid), cfg);
    CHECK(inv.moments.mean.size() == 17 * 17);
    CHECK((inv.moments.variance.array() > 0.0).all());
}

TEST_CASE("metrics closed forms") {
    const double half_log_2pi = 0.5 * std::log(2.0 * std::numbers::pi);
    const VectorXd truth = VectorXd::LinSpaced(7, -1.0, 2.0);
    const VectorXd ones = VectorXd::Ones(7);

    const Metrics exact = metrics(truth, ones, truth);
    CHECK(exact.rmse == 0.0);
    CHECK(exact.mnlp == doctest::Approx(half_log_2pi).epsilon(1e-14));
    CHECK(exact.mnlp == doctest::Approx(0.9189385332).epsilon(1e-9));
    CHECK(exact.mlp == -exact.mnlp);
    CHECK(exact.coverage == 1.0);

    const Metrics shifted = metrics(truth + ones, ones, truth);
    CHECK(shifted.rmse == doctest::Approx(1.0).epsilon(1e-14));
    CHECK(shifted.mnlp == doctest::Approx(0.5 * (std::log(2.0 * std::numbers::pi) + 1.0)).epsilon(1e-14));

    SUBCASE("random instance against a direct recomputation") {
        Rng rng(8);
        const Index n = 10;
        const VectorXd mu = rng.normal_matrix(n, 1), y = rng.normal_matrix(n, 1);
        const VectorXd v = (rng.normal_matrix(n, 1).array().square() + 0.1).matrix();
        double se = 0.0;
        std::vector<double> lp;
        int inside = 0;
        for (Index i = 0; i < n; ++i) {
            se += (mu(i) - y(i)) * (mu(i) - y(i));
            lp.push_back(-0.5 * std::log(2.0 * std::numbers::pi * v(i)) - (y(i) - mu(i)) * (y(i) - mu(i)) / (2.0 * v(i)));
            inside += std::abs(mu(i) - y(i)) <= 2.0 * std::sqrt(v(i));
        }
        std::sort(lp.begin(), lp.end());
        const Metrics m = metrics(mu, v, y);
        CHECK(m.rmse == doctest::Approx(std::sqrt(se / n)).epsilon(1e-14));
        CHECK(m.mlp == doctest::Approx(0.5 * (lp[4] + lp[5])).epsilon(1e-13));
        CHECK(m.coverage == doctest::Approx(inside / 10.0));
    }
    SUBCASE("invalid inputs") {
        CHECK_THROWS_AS((void)metrics(truth, VectorXd::Zero(7), truth), ValidationError);
        CHECK_THROWS_AS((void)metrics(truth, ones, VectorXd::Zero(3)), ValidationError);
    }
}
