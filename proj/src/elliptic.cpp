#include "kronlvm/elliptic.hpp"

#include "kronlvm/errors.hpp"
#include "kronlvm/rng.hpp"

#include <Eigen/Sparse>

#include <cmath>
#include <string>

namespace kronlvm {

KleScaling parse_kle_scaling(std::string_view name) {
    if (name == "sqrt_eigenvalue") return KleScaling::sqrt_eigenvalue;
    if (name == "as_printed") return KleScaling::as_printed;
    throw ValidationError("unknown KLE scaling '" + std::string(name) + "' (expected sqrt_eigenvalue or as_printed)");
}

std::string_view kle_scaling_name(KleScaling s) {
    return s == KleScaling::sqrt_eigenvalue ? "sqrt_eigenvalue" : "as_printed";
}

void PriorConfig::validate() const {
    auto positive = [](double v) { return v > 0.0 && std::isfinite(v); };
    if (!(warp_variance >= 0.0) || !std::isfinite(warp_variance)) throw ValidationError("prior: warp variance must be non-negative");
    if (!positive(warp_lengthscale) || !positive(field_variance) || !positive(field_lengthscale)) {
        throw ValidationError("prior: variances and lengthscales must be positive");
    }
    if (grid < 2) throw ValidationError("prior: grid needs at least 2 points per axis");
    if (kl_terms_warp < 0 || (kl_terms_warp + 1) / 2 > grid * grid) {
        throw ValidationError("prior: warp truncation exceeds the number of grid points");
    }
    if (kl_terms_field < 1 || kl_terms_field > grid * grid) {
        throw ValidationError("prior: field truncation must lie in [1, n_s]");
    }
}

KleBasis kle_decompose(const MatrixXd& K, Index d) {
    const Index n = K.rows();
    if (K.cols() != n) throw ValidationError("kle_decompose: kernel matrix is not square");
    if (d < 1 || d > n) throw ValidationError("kle_decompose: truncation must lie in [1, " + std::to_string(n) + "]");
    KleBasis b;
    if (d == n || 4 * d > n) {
        const EigenPair e = sym_eig(K);
        b.lambda = e.lambda.reverse().head(d);
        b.phi = e.Q.rowwise().reverse().leftCols(d);
    } else {
        EigenPair e = sym_eig_top(K, d);
        b.lambda = std::move(e.lambda);
        b.phi = std::move(e.Q);
    }
    b.lambda = b.lambda.cwiseMax(0.0);
    // Fix the sign of each mode so samples do not depend on solver conventions.
    for (Index i = 0; i < d; ++i) {
        Index k = 0;
        b.phi.col(i).cwiseAbs().maxCoeff(&k);
        if (b.phi(k, i) < 0.0) b.phi.col(i) *= -1.0;
    }
    const double trace = K.trace();
    b.energy = trace > 0.0 ? b.lambda.sum() / trace : 1.0;
    return b;
}

KleBasis kle_decompose(const KernelSpec& kernel, const MatrixXd& points, Index d) {
    const MatrixXd K = gram(kernel, points, points);
    if (!K.allFinite()) throw NumericalError("kle_decompose: kernel matrix has non-finite entries");
    return kle_decompose(K, d);
}

VectorXd kle_weights(const KleBasis& b, KleScaling s) {
    return s == KleScaling::sqrt_eigenvalue ? VectorXd(b.lambda.cwiseSqrt()) : b.lambda;
}

VectorXd unit_grid(Index n) { return VectorXd::LinSpaced(n, 0.0, 1.0); }

MatrixXd grid_points(Index n) {
    const VectorXd g = unit_grid(n);
    MatrixXd X(n * n, 2);
    for (Index p1 = 0; p1 < n; ++p1)
        for (Index p2 = 0; p2 < n; ++p2) X.row(p1 * n + p2) << g(p1), g(p2);
    return X;
}

WarpBasis warp_basis(const PriorConfig& cfg) {
    cfg.validate();
    WarpBasis wb;
    wb.terms = cfg.kl_terms_warp;
    const Index scalar_terms = (cfg.kl_terms_warp + 1) / 2;
    if (scalar_terms == 0 || cfg.warp_variance == 0.0) {
        wb.scalar.lambda = VectorXd::Zero(scalar_terms);
        wb.scalar.phi = MatrixXd::Zero(cfg.n_s(), scalar_terms);
        return wb;
    }
    // exp(-sum((x - x') / l)^2) is an RBF with lengthscale l / sqrt(2).
    const KernelSpec k1 = KernelSpec::rbf(cfg.warp_variance, VectorXd::Constant(2, cfg.warp_lengthscale / std::sqrt(2.0)));
    wb.scalar = kle_decompose(k1, grid_points(cfg.grid), scalar_terms);
    return wb;
}

MatrixXd warp_coordinates(const PriorConfig& cfg, const WarpBasis& wb, const VectorXd& omega) {
    if (omega.size() != wb.terms) throw ValidationError("warp_coordinates: coefficient count differs from the truncation");
    MatrixXd X = grid_points(cfg.grid);
    const VectorXd w = kle_weights(wb.scalar, cfg.scaling);
    for (Index i = 0; i < wb.terms; ++i) X.col(i % 2) += omega(i) * w(i / 2) * wb.scalar.phi.col(i / 2);
    return X;
}

PriorSample sample_prior_one(const PriorConfig& cfg, const WarpBasis& wb, std::uint64_t index) {
    Rng rng(cfg.seed, index);
    const KernelSpec k2 = KernelSpec::exponential(cfg.field_lengthscale, cfg.field_variance);
    constexpr int max_retries = 3;
    for (int attempt = 0;; ++attempt) {
        VectorXd omega1(wb.terms);
        for (Index i = 0; i < wb.terms; ++i) omega1(i) = rng.normal();
        PriorSample s;
        s.warped = warp_coordinates(cfg, wb, omega1);
        s.retries = attempt;
        try {
            const KleBasis field = kle_decompose(k2, s.warped, cfg.kl_terms_field);
            VectorXd omega2(cfg.kl_terms_field);
            for (Index i = 0; i < omega2.size(); ++i) omega2(i) = rng.normal();
            s.log_a = field.phi * kle_weights(field, cfg.scaling).cwiseProduct(omega2);
            s.field_energy = field.energy;
            return s;
        } catch (const NumericalError&) {
            if (attempt == max_retries) {
                throw NumericalError("sample_prior: field expansion failed for sample " + std::to_string(index) + " after " +
                                     std::to_string(max_retries) + " retries");
            }
        }
    }
}

void FieldDataset::validate() const {
    Index ns = 1;
    for (const auto& g : grid) ns *= g.size();
    if (grid.empty() || ns != values.cols()) throw ValidationError("dataset: grid does not match the number of columns");
    if (!values.allFinite()) throw ValidationError("dataset: values contain non-finite entries");
}

std::string_view dataset_kind_name(FieldDataset::Kind k) {
    return k == FieldDataset::Kind::log_conductivity ? "log_conductivity" : "solution_hat";
}

FieldDataset::Kind parse_dataset_kind(std::string_view name) {
    if (name == "log_conductivity") return FieldDataset::Kind::log_conductivity;
    if (name == "solution_hat") return FieldDataset::Kind::solution_hat;
    throw ValidationError("unknown dataset kind '" + std::string(name) + "'");
}

FieldDataset sample_prior(const PriorConfig& cfg, Index n, std::uint64_t first_index) {
    if (n < 0) throw ValidationError("sample_prior: negative sample count");
    const WarpBasis wb = warp_basis(cfg);
    FieldDataset ds;
    ds.prior = cfg;
    ds.first_index = first_index;
    ds.grid = {unit_grid(cfg.grid), unit_grid(cfg.grid)};
    ds.values.resize(n, cfg.n_s());
    ds.warp_energy = wb.scalar.energy;
    for (Index t = 0; t < n; ++t) {
        const PriorSample s = sample_prior_one(cfg, wb, first_index + static_cast<std::uint64_t>(t));
        ds.values.row(t) = s.log_a.transpose();
        ds.field_energy.push_back(s.field_energy);
        ds.retries += s.retries;
    }
    return ds;
}

double FemMesh::signed_area(std::size_t t) const {
    const auto& tr = tris[t];
    const Eigen::RowVector2d a = nodes.row(tr[0]), b = nodes.row(tr[1]), c = nodes.row(tr[2]);
    return 0.5 * ((b(0) - a(0)) * (c(1) - a(1)) - (c(0) - a(0)) * (b(1) - a(1)));
}

FemMesh make_mesh(Index n) {
    if (n < 2) throw ValidationError("make_mesh: need at least 2 nodes per axis");
    FemMesh m;
    m.n = n;
    m.nodes = grid_points(n);
    auto id = [n](Index p1, Index p2) { return p1 * n + p2; };
    for (Index i = 0; i + 1 < n; ++i)
        for (Index j = 0; j + 1 < n; ++j) {
            const Index a = id(i, j), b = id(i + 1, j), c = id(i + 1, j + 1), d = id(i, j + 1);
            if (2 * j + 1 < n - 1) {
                m.tris.push_back({a, b, c});
                m.tris.push_back({a, c, d});
            } else {
                m.tris.push_back({a, b, d});
                m.tris.push_back({b, c, d});
            }
        }
    m.dirichlet.assign(static_cast<std::size_t>(n * n), false);
    m.neumann.assign(static_cast<std::size_t>(n * n), false);
    for (Index p1 = 0; p1 < n; ++p1)
        for (Index p2 = 0; p2 < n; ++p2) {
            const auto k = static_cast<std::size_t>(id(p1, p2));
            m.dirichlet[k] = p1 == 0 || p1 == n - 1;
            m.neumann[k] = !m.dirichlet[k] && (p2 == 0 || p2 == n - 1);
        }
    return m;
}

FemSolution fem_solve(const VectorXd& log_a, const FemMesh& mesh) {
    const Index N = mesh.nodes.rows();
    if (log_a.size() != N) throw ValidationError("fem_solve: conductivity has " + std::to_string(log_a.size()) +
                                                 " values but the mesh has " + std::to_string(N) + " nodes");
    if (!log_a.allFinite()) throw ValidationError("fem_solve: conductivity contains non-finite values");

    std::vector<Index> free_id(static_cast<std::size_t>(N), -1);
    Index nf = 0;
    VectorXd u = VectorXd::Zero(N);
    for (Index k = 0; k < N; ++k) {
        if (mesh.dirichlet[static_cast<std::size_t>(k)]) {
            u(k) = 1.0 - mesh.nodes(k, 0);
        } else {
            free_id[static_cast<std::size_t>(k)] = nf++;
        }
    }

    std::vector<Eigen::Triplet<double>> trips;
    trips.reserve(mesh.tris.size() * 9);
    VectorXd rhs = VectorXd::Zero(nf);
    for (std::size_t t = 0; t < mesh.tris.size(); ++t) {
        const auto& tr = mesh.tris[t];
        const double area = mesh.signed_area(t);
        const double a = std::exp((log_a(tr[0]) + log_a(tr[1]) + log_a(tr[2])) / 3.0);
        Eigen::Vector3d bx, cy;
        for (int r = 0; r < 3; ++r) {
            const Index p = tr[static_cast<std::size_t>((r + 1) % 3)], q = tr[static_cast<std::size_t>((r + 2) % 3)];
            bx(r) = mesh.nodes(p, 1) - mesh.nodes(q, 1);
            cy(r) = mesh.nodes(q, 0) - mesh.nodes(p, 0);
        }
        const Eigen::Matrix3d Ke = a / (4.0 * area) * (bx * bx.transpose() + cy * cy.transpose());
        for (int r = 0; r < 3; ++r) {
            const Index fr = free_id[static_cast<std::size_t>(tr[static_cast<std::size_t>(r)])];
            if (fr < 0) continue;
            for (int c = 0; c < 3; ++c) {
                const Index node = tr[static_cast<std::size_t>(c)];
                const Index fc = free_id[static_cast<std::size_t>(node)];
                if (fc >= 0) {
                    trips.emplace_back(fr, fc, Ke(r, c));
                } else {
                    rhs(fr) -= Ke(r, c) * u(node);
                }
            }
        }
    }
    Eigen::SparseMatrix<double> A(nf, nf);
    A.setFromTriplets(trips.begin(), trips.end());
    const Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>> solver(A);
    if (solver.info() != Eigen::Success) throw NumericalError("fem_solve: stiffness matrix factorization failed");
    const VectorXd uf = solver.solve(rhs);
    if (!uf.allFinite()) throw NumericalError("fem_solve: solution is not finite");
    for (Index k = 0; k < N; ++k) {
        const Index f = free_id[static_cast<std::size_t>(k)];
        if (f >= 0) u(k) = uf(f);
    }
    FemSolution s;
    s.u_hat = u - (1.0 - mesh.nodes.col(0).array()).matrix();
    s.u = std::move(u);
    return s;
}

FieldDataset solve_dataset(const FieldDataset& inputs) {
    inputs.validate();
    if (inputs.kind != FieldDataset::Kind::log_conductivity) throw ValidationError("solve_dataset: inputs must be log-conductivities");
    if (inputs.grid.size() != 2 || inputs.grid[0].size() != inputs.grid[1].size()) {
        throw ValidationError("solve_dataset: a square two-dimensional grid is required");
    }
    const FemMesh mesh = make_mesh(inputs.grid[0].size());
    FieldDataset out = inputs;
    out.kind = FieldDataset::Kind::solution_hat;
    for (Index t = 0; t < inputs.n_xi(); ++t) out.values.row(t) = fem_solve(inputs.values.row(t).transpose(), mesh).u_hat.transpose();
    return out;
}

std::vector<Index> uniform_subgrid(Index grid, Index n_obs) {
    if (n_obs < 2 || n_obs > grid || (grid - 1) % (n_obs - 1) != 0) {
        throw ValidationError("uniform_subgrid: a " + std::to_string(n_obs) + "-point sub-grid does not align with a " +
                              std::to_string(grid) + "-point grid");
    }
    const Index stride = (grid - 1) / (n_obs - 1);
    std::vector<Index> idx;
    for (Index i = 0; i < n_obs; ++i) idx.push_back(i * stride);
    return idx;
}

std::vector<Index> locate_on_grid(const VectorXd& axis, const VectorXd& coords) {
    std::vector<Index> idx;
    for (Index k = 0; k < coords.size(); ++k) {
        Index best = 0;
        (axis.array() - coords(k)).abs().minCoeff(&best);
        if (std::abs(axis(best) - coords(k)) > 1e-9) {
            throw ValidationError("observation coordinate " + std::to_string(coords(k)) + " is not a grid node");
        }
        idx.push_back(best);
    }
    return idx;
}

Observations subsample_observations(const FieldDataset& solutions, const std::vector<std::vector<Index>>& axis_index,
                                    double noise_sigma, std::uint64_t seed) {
    solutions.validate();
    if (axis_index.size() != solutions.grid.size()) throw ValidationError("subsample: one index list per grid axis required");
    if (!(noise_sigma >= 0.0)) throw ValidationError("subsample: noise standard deviation must be non-negative");
    Observations obs;
    obs.axis_index = axis_index;
    for (std::size_t a = 0; a < axis_index.size(); ++a) {
        VectorXd g(static_cast<Index>(axis_index[a].size()));
        for (std::size_t i = 0; i < axis_index[a].size(); ++i) {
            const Index k = axis_index[a][i];
            if (k < 0 || k >= solutions.grid[a].size()) throw ValidationError("subsample: observation index off the grid");
            g(static_cast<Index>(i)) = solutions.grid[a](k);
        }
        obs.grid.push_back(g);
    }
    // Flat column indices in Kronecker order.
    std::vector<Index> cols{0};
    for (std::size_t a = 0; a < axis_index.size(); ++a) {
        std::vector<Index> next;
        for (Index base : cols)
            for (Index k : axis_index[a]) next.push_back(base * solutions.grid[a].size() + k);
        cols = std::move(next);
    }
    obs.values.resize(solutions.n_xi(), static_cast<Index>(cols.size()));
    for (Index t = 0; t < solutions.n_xi(); ++t) {
        Rng rng(seed, solutions.first_index + static_cast<std::uint64_t>(t));
        for (std::size_t c = 0; c < cols.size(); ++c) {
            const double noise = noise_sigma > 0.0 ? noise_sigma * rng.normal() : 0.0;
            obs.values(t, static_cast<Index>(c)) = solutions.values(t, cols[c]) + noise;
        }
    }
    return obs;
}

}  // namespace kronlvm
