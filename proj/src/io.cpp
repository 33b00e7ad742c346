#include "kronlvm/io.hpp"

#include "kronlvm/errors.hpp"

#include <openssl/evp.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <memory>
#include <sstream>

namespace kronlvm {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

namespace {

constexpr char kMagic[8] = {'K', 'R', 'L', 'V', 'M', 'C', 'K', '1'};

std::string encode_rows(const MatrixXd& m) {
    std::string out(static_cast<std::size_t>(m.size()) * sizeof(double), '\0');
    char* p = out.data();
    for (Index i = 0; i < m.rows(); ++i) {
        for (Index j = 0; j < m.cols(); ++j) {
            const double v = m(i, j);
            std::memcpy(p, &v, sizeof v);
            p += sizeof v;
        }
    }
    return out;
}

MatrixXd decode_rows(const char* p, Index rows, Index cols) {
    MatrixXd m(rows, cols);
    for (Index i = 0; i < rows; ++i) {
        for (Index j = 0; j < cols; ++j) {
            std::memcpy(&m(i, j), p, sizeof(double));
            p += sizeof(double);
        }
    }
    return m;
}

Json vec_json(const VectorXd& v) { return Json(std::vector<double>(v.data(), v.data() + v.size())); }

VectorXd json_vec(const Json& j) {
    const auto v = j.get<std::vector<double>>();
    return Eigen::Map<const VectorXd>(v.data(), static_cast<Index>(v.size()));
}

// Named float64 blobs appended after the JSON header.
class BlobWriter {
public:
    void add(const std::string& name, const MatrixXd& m) {
        index_.push_back({{"name", name}, {"rows", m.rows()}, {"cols", m.cols()}, {"offset", data_.size()}});
        data_ += encode_rows(m);
    }
    [[nodiscard]] const Json& index() const { return index_; }
    [[nodiscard]] const std::string& data() const { return data_; }

private:
    Json index_ = Json::array();
    std::string data_;
};

class BlobReader {
public:
    BlobReader(const Json& index, std::string_view data) : data_(data) {
        for (const auto& e : index) {
            const auto rows = e.at("rows").get<Index>(), cols = e.at("cols").get<Index>();
            const auto off = e.at("offset").get<std::size_t>();
            if (rows < 0 || cols < 0 || off + static_cast<std::size_t>(rows * cols) * sizeof(double) > data.size()) {
                throw IoError("checkpoint: blob '" + e.at("name").get<std::string>() + "' lies outside the file");
            }
            entries_[e.at("name").get<std::string>()] = {rows, cols, off};
        }
    }
    [[nodiscard]] MatrixXd get(const std::string& name) const {
        const auto it = entries_.find(name);
        if (it == entries_.end()) throw IoError("checkpoint: missing blob '" + name + "'");
        return decode_rows(data_.data() + it->second.offset, it->second.rows, it->second.cols);
    }

private:
    struct Entry {
        Index rows, cols;
        std::size_t offset;
    };
    std::string_view data_;
    std::map<std::string, Entry> entries_;
};

Json kernel_json(const KernelSpec& k, BlobWriter& blobs, const std::string& prefix) {
    blobs.add(prefix + ".lengthscales", k.lengthscales);
    blobs.add(prefix + ".linear_variances", k.linear_variances);
    return {{"family", family_name(k.family)}, {"variance", k.variance}};
}

KernelSpec kernel_from(const Json& j, const BlobReader& blobs, const std::string& prefix) {
    KernelSpec k;
    k.family = parse_family(j.at("family").get<std::string>());
    k.variance = j.at("variance").get<double>();
    k.lengthscales = blobs.get(prefix + ".lengthscales");
    k.linear_variances = blobs.get(prefix + ".linear_variances");
    return k;
}

Json model_json(const SgplvmModel& m, BlobWriter& blobs, const std::string& prefix) {
    blobs.add(prefix + ".y", m.y);
    blobs.add(prefix + ".q.mu", m.q.mu);
    blobs.add(prefix + ".q.s", m.q.s);
    blobs.add(prefix + ".z_xi", m.z_xi);
    Json ks = Json::array();
    for (std::size_t f = 0; f < m.x_s.size(); ++f) {
        blobs.add(prefix + ".x_s." + std::to_string(f), m.x_s[f]);
        ks.push_back(kernel_json(m.k_s[f], blobs, prefix + ".k_s." + std::to_string(f)));
    }
    return {{"k_xi", kernel_json(m.k_xi, blobs, prefix + ".k_xi")},
            {"k_s", ks},
            {"beta", m.beta},
            {"kuu_jitter", m.kuu_jitter},
            {"frozen",
             {{"latents", m.frozen.latents},
              {"inducing", m.frozen.inducing},
              {"kernel_xi", m.frozen.kernel_xi},
              {"kernel_s", m.frozen.kernel_s},
              {"beta", m.frozen.beta}}}};
}

SgplvmModel model_from(const Json& j, const BlobReader& blobs, const std::string& prefix) {
    SgplvmModel m;
    m.y = blobs.get(prefix + ".y");
    m.q.mu = blobs.get(prefix + ".q.mu");
    m.q.s = blobs.get(prefix + ".q.s");
    m.z_xi = blobs.get(prefix + ".z_xi");
    m.k_xi = kernel_from(j.at("k_xi"), blobs, prefix + ".k_xi");
    const Json& ks = j.at("k_s");
    for (std::size_t f = 0; f < ks.size(); ++f) {
        m.x_s.push_back(blobs.get(prefix + ".x_s." + std::to_string(f)));
        m.k_s.push_back(kernel_from(ks[f], blobs, prefix + ".k_s." + std::to_string(f)));
    }
    m.beta = j.at("beta").get<double>();
    m.kuu_jitter = j.at("kuu_jitter").get<double>();
    const Json& fr = j.at("frozen");
    m.frozen = {fr.at("latents").get<bool>(), fr.at("inducing").get<bool>(), fr.at("kernel_xi").get<bool>(),
                fr.at("kernel_s").get<bool>(), fr.at("beta").get<bool>()};
    m.validate();
    return m;
}

struct SurrogateWriter {
    BlobWriter& blobs;
    Json operator()(const TwoModelSurrogate& s) const {
        return {{"type", "two_model"},
                {"input_model", model_json(s.input_model, blobs, "input")},
                {"output_model", model_json(s.output_model, blobs, "output")},
                {"solved", s.solved},
                {"input_offset", s.input_offset},
                {"output_offset", s.output_offset}};
    }
    Json operator()(const JointSurrogate& s) const {
        return {{"type", "joint"},
                {"model", model_json(s.model, blobs, "joint")},
                {"input_offset", s.input_offset},
                {"output_offset", s.output_offset},
                {"output_scale", s.output_scale}};
    }
    Json operator()(const PcaSurrogate& s) const {
        blobs.add("pca.mean", s.input_model.mean);
        blobs.add("pca.components", s.input_model.components);
        blobs.add("pca.singular_values", s.input_model.singular_values);
        return {{"type", "pca_baseline"},
                {"pca", {{"n_train", s.input_model.n_train}, {"residual_variance", s.input_model.residual_variance}}},
                {"output_model", model_json(s.output_model, blobs, "output")},
                {"solved", s.solved},
                {"output_offset", s.output_offset}};
    }
};

Surrogate surrogate_from(const Json& j, const BlobReader& blobs) {
    const auto type = j.at("type").get<std::string>();
    if (type == "two_model") {
        TwoModelSurrogate s;
        s.input_model = model_from(j.at("input_model"), blobs, "input");
        s.output_model = model_from(j.at("output_model"), blobs, "output");
        s.solved = j.at("solved").get<std::vector<Index>>();
        s.input_offset = j.at("input_offset").get<double>();
        s.output_offset = j.at("output_offset").get<double>();
        s.validate();
        s.refresh();
        return s;
    }
    if (type == "joint") {
        JointSurrogate s;
        s.model = model_from(j.at("model"), blobs, "joint");
        s.input_offset = j.at("input_offset").get<double>();
        s.output_offset = j.at("output_offset").get<double>();
        s.output_scale = j.at("output_scale").get<double>();
        s.validate();
        s.refresh();
        return s;
    }
    if (type == "pca_baseline") {
        PcaSurrogate s;
        s.input_model.mean = blobs.get("pca.mean");
        s.input_model.components = blobs.get("pca.components");
        s.input_model.singular_values = blobs.get("pca.singular_values");
        s.input_model.n_train = j.at("pca").at("n_train").get<Index>();
        s.input_model.residual_variance = j.at("pca").at("residual_variance").get<double>();
        s.output_model = model_from(j.at("output_model"), blobs, "output");
        s.solved = j.at("solved").get<std::vector<Index>>();
        s.output_offset = j.at("output_offset").get<double>();
        s.refresh();
        return s;
    }
    throw IoError("checkpoint: unknown surrogate type '" + type + "'");
}

}  // namespace

std::string sha256_hex(std::string_view bytes) {
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1) {
        throw IoError("sha256: digest failed");
    }
    static const char* hex = "0123456789abcdef";
    std::string out;
    for (unsigned int i = 0; i < len; ++i) {
        out += hex[md[i] >> 4];
        out += hex[md[i] & 15];
    }
    return out;
}

std::string sha256_file(const fs::path& path) { return sha256_hex(read_file(path)); }

std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    if (in.bad()) throw IoError("cannot read " + path.string());
    return ss.str();
}

void write_file_atomic(const fs::path& path, std::string_view bytes) {
    std::error_code ec;
    if (path.has_parent_path()) fs::create_directories(path.parent_path(), ec);
    if (ec) throw IoError("cannot create directory " + path.parent_path().string() + ": " + ec.message());
    fs::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot write " + tmp.string());
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        out.flush();
        if (!out) throw IoError("write failed for " + tmp.string());
    }
    fs::rename(tmp, path, ec);
    if (ec) throw IoError("cannot move " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

Json dataset_metadata(const FieldDataset& d) {
    Json grid = Json::array();
    for (const auto& g : d.grid) grid.push_back(vec_json(g));
    const PriorConfig& p = d.prior;
    return {{"format_version", kFormatVersion},
            {"generator_version", kGeneratorVersion},
            {"kind", dataset_kind_name(d.kind)},
            {"shape", {d.values.rows(), d.values.cols()}},
            {"grid", grid},
            {"first_index", d.first_index},
            {"prior",
             {{"warp_variance", p.warp_variance},
              {"warp_lengthscale", p.warp_lengthscale},
              {"field_variance", p.field_variance},
              {"field_lengthscale", p.field_lengthscale},
              {"kl_terms_warp", p.kl_terms_warp},
              {"kl_terms_field", p.kl_terms_field},
              {"grid", p.grid},
              {"seed", p.seed},
              {"kle_scaling", kle_scaling_name(p.scaling)}}},
            {"warp_energy", d.warp_energy},
            {"field_energy", d.field_energy},
            {"retries", d.retries}};
}

void save_dataset(const FieldDataset& d, const fs::path& base) {
    d.validate();
    const std::string bin = encode_rows(d.values);
    Json meta = dataset_metadata(d);
    meta["sha256"] = sha256_hex(bin);
    fs::path bin_path = base, json_path = base;
    bin_path += ".bin";
    json_path += ".json";
    write_file_atomic(bin_path, bin);
    write_file_atomic(json_path, meta.dump(2) + "\n");
}

FieldDataset load_dataset(const fs::path& base) {
    fs::path bin_path = base, json_path = base;
    bin_path += ".bin";
    json_path += ".json";
    Json meta;
    try {
        meta = Json::parse(read_file(json_path));
    } catch (const Json::parse_error& e) {
        throw IoError("dataset: malformed sidecar " + json_path.string() + ": " + e.what());
    }
    try {
        if (meta.at("format_version").get<int>() != kFormatVersion) {
            throw IoError("dataset: unsupported format version in " + json_path.string());
        }
        const std::string bin = read_file(bin_path);
        if (sha256_hex(bin) != meta.at("sha256").get<std::string>()) {
            throw IoError("dataset: " + bin_path.string() + " does not match the hash in its sidecar");
        }
        const auto shape = meta.at("shape").get<std::vector<Index>>();
        if (shape.size() != 2 || static_cast<std::size_t>(shape[0] * shape[1]) * sizeof(double) != bin.size()) {
            throw IoError("dataset: " + bin_path.string() + " size differs from the declared shape");
        }
        FieldDataset d;
        d.values = decode_rows(bin.data(), shape[0], shape[1]);
        for (const auto& g : meta.at("grid")) d.grid.push_back(json_vec(g));
        d.kind = parse_dataset_kind(meta.at("kind").get<std::string>());
        d.first_index = meta.at("first_index").get<std::uint64_t>();
        const Json& p = meta.at("prior");
        d.prior.warp_variance = p.at("warp_variance").get<double>();
        d.prior.warp_lengthscale = p.at("warp_lengthscale").get<double>();
        d.prior.field_variance = p.at("field_variance").get<double>();
        d.prior.field_lengthscale = p.at("field_lengthscale").get<double>();
        d.prior.kl_terms_warp = p.at("kl_terms_warp").get<Index>();
        d.prior.kl_terms_field = p.at("kl_terms_field").get<Index>();
        d.prior.grid = p.at("grid").get<Index>();
        d.prior.seed = p.at("seed").get<std::uint64_t>();
        d.prior.scaling = parse_kle_scaling(p.at("kle_scaling").get<std::string>());
        d.warp_energy = meta.at("warp_energy").get<double>();
        d.field_energy = meta.at("field_energy").get<std::vector<double>>();
        d.retries = meta.at("retries").get<int>();
        d.validate();
        return d;
    } catch (const Json::exception& e) {
        throw IoError("dataset: sidecar " + json_path.string() + " is missing fields: " + e.what());
    }
}

void save_checkpoint(const Checkpoint& c, const fs::path& path) {
    BlobWriter blobs;
    Json header = {{"format_version", kFormatVersion}, {"code_version", kCodeVersion}};
    header["surrogate"] = std::visit(SurrogateWriter{blobs}, c.surrogate);
    header["meta"] = c.meta;
    header["blobs"] = blobs.index();
    const std::string h = header.dump();
    const auto len = static_cast<std::uint32_t>(h.size());
    std::string bytes(kMagic, sizeof kMagic);
    bytes.append(reinterpret_cast<const char*>(&len), sizeof len);
    bytes += h;
    bytes += blobs.data();
    write_file_atomic(path, bytes);
}

Checkpoint load_checkpoint(const fs::path& path) {
    const std::string bytes = read_file(path);
    if (bytes.size() < sizeof kMagic + 4 || std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0) {
        throw IoError("checkpoint: " + path.string() + " is not a checkpoint file");
    }
    std::uint32_t len = 0;
    std::memcpy(&len, bytes.data() + sizeof kMagic, sizeof len);
    const std::size_t start = sizeof kMagic + sizeof len;
    if (start + len > bytes.size()) throw IoError("checkpoint: truncated header in " + path.string());
    try {
        const Json header = Json::parse(bytes.substr(start, len));
        const int version = header.at("format_version").get<int>();
        if (version != kFormatVersion) {
            throw IoError("checkpoint: format version " + std::to_string(version) + " in " + path.string() +
                          " is not supported (expected " + std::to_string(kFormatVersion) + ")");
        }
        const BlobReader blobs(header.at("blobs"), std::string_view(bytes).substr(start + len));
        Checkpoint c{surrogate_from(header.at("surrogate"), blobs), header.at("meta")};
        return c;
    } catch (const Json::exception& e) {
        throw IoError("checkpoint: malformed header in " + path.string() + ": " + e.what());
    }
}

double surrogate_bound(const Surrogate& s) {
    struct {
        double operator()(const TwoModelSurrogate& t) const { return t.input_cache.bound + t.output_cache.bound; }
        double operator()(const JointSurrogate& t) const { return t.cache.bound; }
        double operator()(const PcaSurrogate& t) const { return t.output_cache.bound; }
    } visitor;
    return std::visit(visitor, s);
}

}  // namespace kronlvm
