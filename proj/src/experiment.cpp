#include "kronlvm/experiment.hpp"

#include "kronlvm/errors.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <exception>
#include <map>
#include <mutex>
#include <ostream>
#include <sstream>
#include <thread>

namespace kronlvm {

namespace {

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

SurrogateConfig seeded(const ExperimentConfig& c, std::uint64_t seed) {
    SurrogateConfig s = c.surrogate;
    s.seed = seed;
    return s;
}

VectorXd row(const FieldDataset& d, Index i) { return d.values.row(i).transpose(); }

std::vector<std::pair<std::string, TrainReport>> two_model_reports(const TwoModelTrainResult& r) {
    return {{"input", r.input}, {"output", r.output}};
}

std::string iteration_csv(const std::vector<std::pair<std::string, TrainReport>>& reports) {
    std::string out = "submodel,iteration,objective,grad_norm,step\n";
    for (const auto& [name, rep] : reports) {
        for (const auto& r : rep.log) {
            out += name + "," + std::to_string(r.iteration) + "," + fmt("%.17g", r.objective) + "," +
                   fmt("%.17g", r.grad_norm) + "," + fmt("%.17g", r.step) + "\n";
        }
    }
    return out;
}

Json reports_json(const std::vector<std::pair<std::string, TrainReport>>& reports) {
    Json j = Json::object();
    for (const auto& [name, r] : reports) {
        j[name] = {{"initial_bound", r.initial_bound},
                   {"bound", r.bound},
                   {"iterations", r.iterations},
                   {"status", r.status}};
    }
    return j;
}

void check_prior_matches(const ExperimentConfig& c, const FieldDataset& d, const fs::path& where) {
    const PriorConfig& p = d.prior;
    const PriorConfig& q = c.prior;
    if (p.grid != q.grid || p.kl_terms_warp != q.kl_terms_warp || p.kl_terms_field != q.kl_terms_field ||
        p.warp_variance != q.warp_variance || p.warp_lengthscale != q.warp_lengthscale ||
        p.field_variance != q.field_variance || p.field_lengthscale != q.field_lengthscale || p.scaling != q.scaling) {
        throw ValidationError("dataset " + where.string() + " was generated with a different prior configuration");
    }
}

// The settings that determine results; where they are written does not.
std::string config_identity(ExperimentConfig c) {
    c.output_dir.clear();
    return render_config(c);
}

std::string config_identity_hash(const ExperimentConfig& c) { return sha256_hex(config_identity(c)); }

std::string variant_file_name(const ExperimentConfig& c) {
    std::string v = c.variant();
    std::replace(v.begin(), v.end(), '-', '_');
    return v;
}

}  // namespace

DataPool generate_pool(const ExperimentConfig& c, std::uint64_t seed, const std::function<void(Index)>& on_sample) {
    PriorConfig p = c.prior;
    p.seed = seed;
    DataPool d;
    auto sample = [&](Index n, std::uint64_t first) {
        FieldDataset in = sample_prior(p, n, first);
        if (c.unit_conductivity) in.values.setZero();
        if (on_sample) on_sample(n);
        return in;
    };
    d.train_in = sample(c.max_n_xi(), 0);
    d.train_out = solve_dataset(d.train_in);
    d.test_in = sample(c.n_test, kTestIndexOffset);
    d.test_out = solve_dataset(d.test_in);
    return d;
}

FieldDataset head_rows(const FieldDataset& d, Index n) {
    if (n < 0 || n > d.n_xi()) {
        throw ValidationError("dataset holds " + std::to_string(d.n_xi()) + " realizations, " + std::to_string(n) +
                              " requested");
    }
    FieldDataset out = d;
    out.values = d.values.topRows(n);
    out.field_energy.resize(static_cast<std::size_t>(n));
    return out;
}

double observation_noise(const ExperimentConfig& c, const FieldDataset& test_out) {
    if (test_out.values.size() == 0) return 0.0;
    const double mean = test_out.values.mean();
    return c.noise_fraction * std::sqrt((test_out.values.array() - mean).square().mean());
}

Observations inverse_observations(const ExperimentConfig& c, const FieldDataset& test_out, std::uint64_t seed) {
    const auto axis = uniform_subgrid(c.prior.grid, c.obs_grid);
    return subsample_observations(test_out, {axis, axis}, observation_noise(c, test_out), Rng::mix(seed, 77));
}

TrainOutcome train_surrogate(const ExperimentConfig& c, const FieldDataset& train_in, const FieldDataset& train_out,
                             std::uint64_t seed) {
    const SurrogateConfig sc = seeded(c, seed);
    switch (c.pipeline) {
        case PipelineKind::two_model: {
            TwoModelTrainResult r = train_two_model(train_in, train_out, sc);
            return {std::move(r.surrogate), two_model_reports(r)};
        }
        case PipelineKind::joint: {
            JointTrainResult r = train_joint(train_in, train_out, sc);
            return {std::move(r.surrogate), {{"joint", r.report}}};
        }
        case PipelineKind::pca_baseline: {
            PcaTrainResult r = train_pca_baseline(train_in, train_out, sc);
            return {std::move(r.surrogate), {{"output", r.output}}};
        }
    }
    throw ValidationError("unknown pipeline");
}

TrainOutcome resume_surrogate(const ExperimentConfig& c, Surrogate s) {
    auto cont = [&c](SgplvmModel m) {
        SgplvmTrainResult r = sgplvm_train(std::move(m), c.surrogate.train);
        const double bound = collapsed_bound(r.model);
        return std::pair{std::move(r.model), TrainReport{r.initial_bound, bound, r.opt.iterations, r.opt.status, r.opt.log}};
    };
    TrainOutcome out;
    if (auto* t = std::get_if<TwoModelSurrogate>(&s)) {
        auto [in, rin] = cont(t->input_model);
        t->input_model = std::move(in);
        for (std::size_t k = 0; k < t->solved.size(); ++k) {
            t->output_model.q.mu.row(static_cast<Index>(k)) = t->input_model.q.mu.row(t->solved[k]);
            t->output_model.q.s.row(static_cast<Index>(k)) = t->input_model.q.s.row(t->solved[k]);
        }
        auto [outm, rout] = cont(t->output_model);
        t->output_model = std::move(outm);
        t->refresh();
        out.reports = {{"input", rin}, {"output", rout}};
    } else if (auto* j = std::get_if<JointSurrogate>(&s)) {
        auto [m, r] = cont(j->model);
        j->model = std::move(m);
        j->refresh();
        out.reports = {{"joint", r}};
    } else {
        auto& p = std::get<PcaSurrogate>(s);
        auto [m, r] = cont(p.output_model);
        p.output_model = std::move(m);
        p.refresh();
        out.reports = {{"output", r}};
    }
    out.surrogate = std::move(s);
    return out;
}

Json record_json(const CaseRecord& r) {
    return {{"variant", r.variant},
            {"direction", direction_name(r.direction)},
            {"n_xi", r.n_xi},
            {"seed", r.seed},
            {"case", r.case_id},
            {"sample_index", r.sample_index},
            {"rmse", r.metrics.rmse},
            {"mnlp", r.metrics.mnlp},
            {"mlp", r.metrics.mlp},
            {"coverage", r.metrics.coverage},
            {"beta_star", r.beta_star},
            {"objective", r.objective},
            {"mean", std::vector<double>(r.mean.data(), r.mean.data() + r.mean.size())},
            {"variance", std::vector<double>(r.variance.data(), r.variance.data() + r.variance.size())}};
}

CaseRecord record_from_json(const Json& j) {
    try {
        CaseRecord r;
        r.variant = j.at("variant").get<std::string>();
        r.direction = parse_direction(j.at("direction").get<std::string>());
        r.n_xi = j.at("n_xi").get<Index>();
        r.seed = j.at("seed").get<std::uint64_t>();
        r.case_id = j.at("case").get<Index>();
        r.sample_index = j.at("sample_index").get<std::uint64_t>();
        r.metrics = {j.at("rmse").get<double>(), j.at("mnlp").get<double>(), j.at("mlp").get<double>(),
                     j.at("coverage").get<double>()};
        r.beta_star = j.at("beta_star").get<double>();
        r.objective = j.at("objective").get<double>();
        const auto mean = j.at("mean").get<std::vector<double>>();
        const auto var = j.at("variance").get<std::vector<double>>();
        r.mean = Eigen::Map<const VectorXd>(mean.data(), static_cast<Index>(mean.size()));
        r.variance = Eigen::Map<const VectorXd>(var.data(), static_cast<Index>(var.size()));
        return r;
    } catch (const Json::exception& e) {
        throw ValidationError(std::string("results: record does not follow the schema: ") + e.what());
    }
}

std::vector<CaseRecord> evaluate_cases(const ExperimentConfig& c, const Surrogate& s, const DataPool& data,
                                       Direction dir, std::uint64_t seed, Index n_xi, int jobs,
                                       std::vector<double>* runtimes) {
    const Index n = data.test_in.n_xi();
    if (data.test_out.n_xi() != n) throw ValidationError("test input and output datasets differ in size");
    std::vector<CaseRecord> records(static_cast<std::size_t>(n));
    std::vector<double> times(static_cast<std::size_t>(n), 0.0);
    const SurrogateConfig sc = seeded(c, seed);
    const auto grid_in = grid_factors(data.test_in.grid), grid_out = grid_factors(data.test_out.grid);
    Observations obs;
    std::vector<MatrixXd> grid_obs;
    if (dir == Direction::inverse && n > 0) {
        obs = inverse_observations(c, data.test_out, seed);
        grid_obs = grid_factors(obs.grid);
    }

    auto run_case = [&](Index i) {
        const auto t0 = std::chrono::steady_clock::now();
        FieldPrediction p;
        VectorXd truth;
        if (dir == Direction::forward) {
            const VectorXd field = row(data.test_in, i);
            truth = row(data.test_out, i);
            if (const auto* t = std::get_if<TwoModelSurrogate>(&s)) {
                p = forward_predict_two_model(*t, field, grid_in, grid_out, sc);
            } else if (const auto* j = std::get_if<JointSurrogate>(&s)) {
                p = forward_predict_joint(*j, field, grid_in, grid_out, sc);
            } else {
                p = forward_predict_pca(std::get<PcaSurrogate>(s), field, grid_out, sc);
            }
        } else {
            const VectorXd y = obs.values.row(i).transpose();
            truth = row(data.test_in, i);
            if (const auto* t = std::get_if<TwoModelSurrogate>(&s)) {
                p = inverse_predict_two_model(*t, y, grid_obs, grid_in, sc);
            } else if (const auto* j = std::get_if<JointSurrogate>(&s)) {
                p = inverse_predict_joint(*j, y, grid_obs, grid_in, sc);
            } else {
                p = inverse_predict_pca(std::get<PcaSurrogate>(s), y, grid_obs, sc);
            }
        }
        CaseRecord& r = records[static_cast<std::size_t>(i)];
        r.variant = c.variant();
        r.direction = dir;
        r.n_xi = n_xi;
        r.seed = seed;
        r.case_id = i;
        r.sample_index = data.test_in.first_index + static_cast<std::uint64_t>(i);
        r.mean = p.moments.mean.col(0);
        r.variance = p.moments.variance.col(0);
        r.metrics = metrics(r.mean, r.variance, truth);
        r.beta_star = p.q_star.beta_star;
        r.objective = p.objective;
        times[static_cast<std::size_t>(i)] = seconds_since(t0);
    };

    const int workers = static_cast<int>(std::clamp<Index>(jobs, 1, std::max<Index>(n, 1)));
    if (workers == 1) {
        for (Index i = 0; i < n; ++i) run_case(i);
    } else {
        std::atomic<Index> next{0};
        std::exception_ptr failure;
        std::mutex mu;
        std::vector<std::thread> pool;
        for (int w = 0; w < workers; ++w) {
            pool.emplace_back([&] {
                for (Index i = next++; i < n; i = next++) {
                    try {
                        run_case(i);
                    } catch (...) {
                        const std::lock_guard lock(mu);
                        if (!failure) failure = std::current_exception();
                    }
                }
            });
        }
        for (auto& t : pool) t.join();
        if (failure) std::rethrow_exception(failure);
    }
    if (runtimes) *runtimes = times;
    return records;
}

void write_results(const fs::path& path, const std::vector<CaseRecord>& records) {
    std::string text;
    for (const auto& r : records) text += record_json(r).dump() + "\n";
    write_file_atomic(path, text);
}

std::vector<CaseRecord> read_results(const fs::path& path) {
    std::istringstream in(read_file(path));
    std::vector<CaseRecord> out;
    std::string line;
    Index lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            out.push_back(record_from_json(Json::parse(line)));
        } catch (const Json::parse_error& e) {
            throw ValidationError("results: " + path.string() + ":" + std::to_string(lineno) + " is not JSON");
        }
    }
    return out;
}

std::vector<TableEntry> aggregate(std::vector<CaseRecord> records) {
    std::sort(records.begin(), records.end(), [](const CaseRecord& a, const CaseRecord& b) {
        return std::tie(a.direction, a.n_xi, a.variant, a.seed, a.case_id) <
               std::tie(b.direction, b.n_xi, b.variant, b.seed, b.case_id);
    });
    using Key = std::tuple<Direction, Index, std::string>;
    std::map<Key, std::vector<const CaseRecord*>> groups;
    for (const auto& r : records) groups[{r.direction, r.n_xi, r.variant}].push_back(&r);

    std::vector<TableEntry> out;
    for (const auto& [key, rs] : groups) {
        const auto& [dir, n, variant] = key;
        auto add = [&](const std::string& metric, auto value) {
            // Materialized first so contraction cannot fuse the scaling into the deviations.
            std::vector<double> xs;
            for (const CaseRecord* r : rs) xs.push_back(value(*r));
            const double count = static_cast<double>(xs.size());
            double sum = 0.0;
            for (double x : xs) sum += x;
            const double mean = sum / count;
            double ss = 0.0;
            for (double x : xs) {
                const double dev = x - mean;
                ss += dev * dev;
            }
            out.push_back({dir, metric, n, variant, mean, std::sqrt(ss / count), static_cast<Index>(xs.size())});
        };
        if (dir == Direction::forward) {
            add("rmse_x100", [](const CaseRecord& r) { return 100.0 * r.metrics.rmse; });
        } else {
            add("rmse", [](const CaseRecord& r) { return r.metrics.rmse; });
        }
        add("mnlp", [](const CaseRecord& r) { return r.metrics.mnlp; });
        add("coverage", [](const CaseRecord& r) { return r.metrics.coverage; });
    }
    return out;
}

std::string render_table(const std::vector<TableEntry>& entries) {
    std::vector<std::string> variants;
    for (const auto& e : entries) {
        if (std::find(variants.begin(), variants.end(), e.variant) == variants.end()) variants.push_back(e.variant);
    }
    std::sort(variants.begin(), variants.end());
    // Rows: direction, then error metric before mnlp before coverage, then n_xi.
    auto rank = [](const std::string& metric) { return metric == "mnlp" ? 1 : metric == "coverage" ? 2 : 0; };
    using Row = std::tuple<Direction, int, std::string, Index>;
    std::map<Row, std::map<std::string, const TableEntry*>> rows;
    for (const auto& e : entries) rows[{e.direction, rank(e.metric), e.metric, e.n_xi}][e.variant] = &e;

    std::string csv = "direction,metric,n_xi";
    for (const auto& v : variants) csv += "," + v;
    csv += "\n";
    for (const auto& [key, cells] : rows) {
        const auto& [dir, r, metric, n] = key;
        csv += std::string(direction_name(dir)) + "," + metric + "," + std::to_string(n);
        for (const auto& v : variants) {
            const auto it = cells.find(v);
            csv += ",";
            if (it != cells.end()) csv += fmt("%.4f", it->second->mean) + " (" + fmt("%.4f", it->second->std) + ")";
        }
        csv += "\n";
    }
    return csv;
}

fs::path dataset_base(const fs::path& out, std::uint64_t seed, std::string_view role) {
    return out / "data" / ("seed" + std::to_string(seed)) / std::string(role);
}

fs::path checkpoint_path(const fs::path& out, const ExperimentConfig& c, std::uint64_t seed, Index n_xi) {
    return out / "checkpoints" /
           (variant_file_name(c) + "_seed" + std::to_string(seed) + "_n" + std::to_string(n_xi) + ".ckpt");
}

fs::path results_path(const fs::path& out, const ExperimentConfig& c, Direction d, std::uint64_t seed, Index n_xi) {
    return out / "results" /
           (variant_file_name(c) + "_" + std::string(direction_name(d)) + "_seed" + std::to_string(seed) + "_n" +
            std::to_string(n_xi) + ".jsonl");
}

void stage_generate(const ExperimentConfig& c, const fs::path& out, std::ostream& log) {
    for (std::uint64_t seed : c.seeds) {
        const auto t0 = std::chrono::steady_clock::now();
        const DataPool d = generate_pool(c, seed);
        save_dataset(d.train_in, dataset_base(out, seed, "train_in"));
        save_dataset(d.train_out, dataset_base(out, seed, "train_out"));
        save_dataset(d.test_in, dataset_base(out, seed, "test_in"));
        save_dataset(d.test_out, dataset_base(out, seed, "test_out"));
        double min_energy = 1.0;
        for (double e : d.train_in.field_energy) min_energy = std::min(min_energy, e);
        for (double e : d.test_in.field_energy) min_energy = std::min(min_energy, e);
        log << "generate seed " << seed << ": " << d.train_in.n_xi() << " train + " << d.test_in.n_xi()
            << " test realizations on " << c.prior.grid << "x" << c.prior.grid << ", warp KLE energy "
            << d.train_in.warp_energy << ", min field KLE energy " << min_energy << ", retries "
            << d.train_in.retries + d.test_in.retries << ", " << fmt("%.1f", seconds_since(t0)) << " s\n";
    }
}

void stage_train(const ExperimentConfig& c, const fs::path& out, std::ostream& log, bool resume) {
    for (std::uint64_t seed : c.seeds) {
        const fs::path bin = dataset_base(out, seed, "train_in");
        const FieldDataset in = load_dataset(bin), sol = load_dataset(dataset_base(out, seed, "train_out"));
        check_prior_matches(c, in, bin);
        fs::path in_bin = bin, out_bin = dataset_base(out, seed, "train_out");
        in_bin += ".bin";
        out_bin += ".bin";
        const std::string in_hash = sha256_file(in_bin), out_hash = sha256_file(out_bin);
        for (Index n : c.n_xi) {
            const auto t0 = std::chrono::steady_clock::now();
            const fs::path ck = checkpoint_path(out, c, seed, n);
            TrainOutcome t = resume ? resume_surrogate(c, load_checkpoint(ck).surrogate)
                                    : train_surrogate(c, head_rows(in, n), head_rows(sol, n), seed);
            Checkpoint cp{std::move(t.surrogate), Json::object()};
            cp.meta = {{"variant", c.variant()},
                       {"pipeline", pipeline_name(c.pipeline)},
                       {"seed", seed},
                       {"n_xi", n},
                       {"config_sha256", config_identity_hash(c)},
                       {"datasets", {{"train_in", in_hash}, {"train_out", out_hash}}},
                       {"training", reports_json(t.reports)}};
            save_checkpoint(cp, ck);
            fs::path iters = ck;
            iters.replace_extension(".iterations.csv");
            write_file_atomic(iters, iteration_csv(t.reports));
            log << (resume ? "resume " : "train ") << c.variant() << " seed " << seed << " n_xi " << n << ":";
            for (const auto& [name, r] : t.reports) {
                log << " " << name << " bound " << fmt("%.6g", r.initial_bound) << " -> " << fmt("%.6g", r.bound) << " ("
                    << r.iterations << " it, " << r.status << ")";
            }
            log << ", " << fmt("%.1f", seconds_since(t0)) << " s\n";
        }
    }
}

void stage_predict(const ExperimentConfig& c, const fs::path& out, int jobs, std::ostream& log) {
    for (std::uint64_t seed : c.seeds) {
        DataPool d;
        d.test_in = load_dataset(dataset_base(out, seed, "test_in"));
        d.test_out = load_dataset(dataset_base(out, seed, "test_out"));
        check_prior_matches(c, d.test_in, dataset_base(out, seed, "test_in"));
        for (Index n : c.n_xi) {
            const Checkpoint cp = load_checkpoint(checkpoint_path(out, c, seed, n));
            for (Direction dir : c.directions) {
                const auto t0 = std::chrono::steady_clock::now();
                std::vector<double> runtimes;
                const auto records = evaluate_cases(c, cp.surrogate, d, dir, seed, n, jobs, &runtimes);
                const fs::path rp = results_path(out, c, dir, seed, n);
                write_results(rp, records);
                // Wall-clock times live beside the results so the results stay reproducible.
                std::string timing;
                for (std::size_t i = 0; i < runtimes.size(); ++i) {
                    timing += Json{{"case", i}, {"runtime_s", runtimes[i]}}.dump() + "\n";
                }
                fs::path tp = rp;
                tp.replace_extension(".timing.jsonl");
                write_file_atomic(tp, timing);
                double rmse = 0.0;
                for (const auto& r : records) rmse += r.metrics.rmse;
                log << "predict " << c.variant() << " " << direction_name(dir) << " seed " << seed << " n_xi " << n
                    << ": " << records.size() << " cases, mean rmse "
                    << fmt("%.5g", records.empty() ? 0.0 : rmse / static_cast<double>(records.size())) << ", "
                    << fmt("%.1f", seconds_since(t0)) << " s\n";
            }
        }
    }
}

void stage_table(const ExperimentConfig& c, const fs::path& out, std::ostream& log) {
    std::vector<CaseRecord> all;
    for (std::uint64_t seed : c.seeds) {
        for (Index n : c.n_xi) {
            for (Direction dir : c.directions) {
                const auto rs = read_results(results_path(out, c, dir, seed, n));
                all.insert(all.end(), rs.begin(), rs.end());
            }
        }
    }
    const std::string csv = render_table(aggregate(std::move(all)));
    write_file_atomic(out / "table.csv", csv);
    log << csv;
}

Json write_manifest(const ExperimentConfig& c, const fs::path& out) {
    std::map<std::string, std::string> files;
    if (fs::exists(out)) {
        for (const auto& e : fs::recursive_directory_iterator(out)) {
            if (!e.is_regular_file()) continue;
            const std::string rel = fs::relative(e.path(), out).generic_string();
            if (rel == "manifest.json" || rel.ends_with(".timing.jsonl") || rel.ends_with(".tmp")) continue;
            files[rel] = sha256_file(e.path());
        }
    }
    const std::string cfg = config_identity(c);
    Json m = {{"code_version", kCodeVersion},
              {"format_version", kFormatVersion},
              {"generator_version", kGeneratorVersion},
              {"config_sha256", config_identity_hash(c)},
              {"config", cfg},
              {"seeds", c.seeds},
              {"files", files}};
    write_file_atomic(out / "manifest.json", m.dump(2) + "\n");
    return m;
}

}  // namespace kronlvm
