#pragma once

#include "kronlvm/pipeline.hpp"

#include <json.hpp>

#include <filesystem>
#include <string>
#include <variant>

namespace kronlvm {

namespace fs = std::filesystem;
using Json = nlohmann::ordered_json;

inline constexpr int kFormatVersion = 1;
inline constexpr const char* kGeneratorVersion = "kronlvm-elliptic 1";
inline constexpr const char* kCodeVersion = "kronlvm 0.1.0";

[[nodiscard]] std::string sha256_hex(std::string_view bytes);
[[nodiscard]] std::string sha256_file(const fs::path& path);

[[nodiscard]] std::string read_file(const fs::path& path);
// Writes to a sibling temporary and renames it into place.
void write_file_atomic(const fs::path& path, std::string_view bytes);

// Datasets: <base>.bin holds the n_xi x n_s values as row-major
// little-endian float64; <base>.json holds shape, grid, kind, prior and
// provenance.
void save_dataset(const FieldDataset& d, const fs::path& base);
[[nodiscard]] FieldDataset load_dataset(const fs::path& base);
[[nodiscard]] Json dataset_metadata(const FieldDataset& d);

using Surrogate = std::variant<TwoModelSurrogate, JointSurrogate, PcaSurrogate>;

struct Checkpoint {
    Surrogate surrogate;
    Json meta = Json::object();  // config, seed, n_xi, dataset hashes, training reports
};

// Layout: 8-byte magic, uint32 header length, JSON header, float64 blobs.
// The header lists every blob's name, shape and byte offset.
void save_checkpoint(const Checkpoint& c, const fs::path& path);
[[nodiscard]] Checkpoint load_checkpoint(const fs::path& path);

[[nodiscard]] double surrogate_bound(const Surrogate& s);  // sum of the submodel bounds

}  // namespace kronlvm
