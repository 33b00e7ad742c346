#pragma once

#include "kronlvm/config.hpp"
#include "kronlvm/io.hpp"

#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace kronlvm {

// Training realizations use sample indices [0, n); test realizations start
// here, so training and test draws never overlap.
inline constexpr std::uint64_t kTestIndexOffset = 1000000;

struct DataPool {
    FieldDataset train_in, train_out, test_in, test_out;
};

[[nodiscard]] DataPool generate_pool(const ExperimentConfig& c, std::uint64_t seed, const std::function<void(Index)>& on_sample = {});
[[nodiscard]] FieldDataset head_rows(const FieldDataset& d, Index n);

// Noise std for inverse observations: noise_fraction times the pooled std
// of the test solutions.
[[nodiscard]] double observation_noise(const ExperimentConfig& c, const FieldDataset& test_out);
[[nodiscard]] Observations inverse_observations(const ExperimentConfig& c, const FieldDataset& test_out,
                                                std::uint64_t seed);

struct TrainOutcome {
    Surrogate surrogate;
    std::vector<std::pair<std::string, TrainReport>> reports;  // per submodel
};

[[nodiscard]] TrainOutcome train_surrogate(const ExperimentConfig& c, const FieldDataset& train_in,
                                           const FieldDataset& train_out, std::uint64_t seed);
// Continues optimizing every trainable submodel from its current state.
[[nodiscard]] TrainOutcome resume_surrogate(const ExperimentConfig& c, Surrogate s);

struct CaseRecord {
    std::string variant;
    Direction direction = Direction::forward;
    Index n_xi = 0;
    std::uint64_t seed = 0;
    Index case_id = 0;
    std::uint64_t sample_index = 0;
    Metrics metrics;
    double beta_star = 0.0;
    double objective = 0.0;
    VectorXd mean, variance;
};

[[nodiscard]] Json record_json(const CaseRecord& r);
[[nodiscard]] CaseRecord record_from_json(const Json& j);

// One prediction per test case; cases run on `jobs` worker threads and come
// back in case order. runtimes (seconds), when given, is filled per case.
[[nodiscard]] std::vector<CaseRecord> evaluate_cases(const ExperimentConfig& c, const Surrogate& s,
                                                     const DataPool& data, Direction dir, std::uint64_t seed,
                                                     Index n_xi, int jobs, std::vector<double>* runtimes = nullptr);

void write_results(const fs::path& path, const std::vector<CaseRecord>& records);
[[nodiscard]] std::vector<CaseRecord> read_results(const fs::path& path);

struct TableEntry {
    Direction direction = Direction::forward;
    std::string metric;  // rmse_x100 (forward), rmse (inverse), mnlp, coverage
    Index n_xi = 0;
    std::string variant;
    double mean = 0.0;
    double std = 0.0;    // population standard deviation over cases
    Index count = 0;
};

// Records are sorted by (direction, n_xi, variant, seed, case) before
// aggregation, so the result does not depend on file order.
[[nodiscard]] std::vector<TableEntry> aggregate(std::vector<CaseRecord> records);
// CSV: direction,metric,n_xi,<variant...>; cells "mean (std)".
[[nodiscard]] std::string render_table(const std::vector<TableEntry>& entries);

// ---- run directory layout and stages ----
[[nodiscard]] fs::path dataset_base(const fs::path& out, std::uint64_t seed, std::string_view role);
[[nodiscard]] fs::path checkpoint_path(const fs::path& out, const ExperimentConfig& c, std::uint64_t seed, Index n_xi);
[[nodiscard]] fs::path results_path(const fs::path& out, const ExperimentConfig& c, Direction d, std::uint64_t seed,
                                    Index n_xi);

void stage_generate(const ExperimentConfig& c, const fs::path& out, std::ostream& log);
void stage_train(const ExperimentConfig& c, const fs::path& out, std::ostream& log, bool resume = false);
void stage_predict(const ExperimentConfig& c, const fs::path& out, int jobs, std::ostream& log);
// Writes table.csv from every results file of this configuration.
void stage_table(const ExperimentConfig& c, const fs::path& out, std::ostream& log);

// manifest.json: config hash and text, code version, seeds, and the SHA-256
// of every deterministic artifact under `out` (timing files excluded).
Json write_manifest(const ExperimentConfig& c, const fs::path& out);

}  // namespace kronlvm
