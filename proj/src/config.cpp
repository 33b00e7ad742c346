#include "kronlvm/config.hpp"

#include "kronlvm/errors.hpp"

#include <yaml-cpp/yaml.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

extern char** environ;

namespace kronlvm {

namespace {

const std::map<std::string, std::set<std::string>> schema = {
    {"experiment", {"name", "pipeline", "directions", "n_xi", "seeds", "n_test", "output_dir"}},
    {"prior",
     {"warp_variance", "warp_lengthscale", "field_variance", "field_lengthscale", "kl_terms", "grid", "kle_scaling",
      "unit_conductivity"}},
    {"model", {"kernel", "output_kernel", "latent_dim", "inducing"}},
    {"training", {"max_iter", "tol", "patience", "memory"}},
    {"inference", {"max_iter", "tol", "restarts", "n_mog"}},
    {"observations", {"grid", "noise_fraction"}},
};

template <class T>
T get(const YAML::Node& node, const std::string& where) {
    try {
        return node.as<T>();
    } catch (const YAML::Exception&) {
        throw ValidationError("config: " + where + " has the wrong type");
    }
}

template <class T>
void read(const YAML::Node& section, const char* section_name, const char* key, T& out) {
    if (const YAML::Node v = section[key]) out = get<T>(v, std::string(section_name) + "." + key);
}

void check_keys(const YAML::Node& root) {
    if (!root.IsMap()) throw ValidationError("config: top level must be a mapping");
    for (const auto& kv : root) {
        const auto section = kv.first.as<std::string>();
        const auto it = schema.find(section);
        if (it == schema.end()) throw ValidationError("config: unknown section '" + section + "'");
        if (kv.second.IsNull()) continue;
        if (!kv.second.IsMap()) throw ValidationError("config: section '" + section + "' must be a mapping");
        for (const auto& entry : kv.second) {
            const auto key = entry.first.as<std::string>();
            if (!it->second.contains(key)) throw ValidationError("config: unknown key '" + section + "." + key + "'");
        }
    }
}

void apply_env(YAML::Node& root, const EnvMap& env) {
    const std::string prefix = "KRONLVM_";
    for (const auto& [name, value] : env) {
        if (!name.starts_with(prefix)) continue;
        const std::string rest = name.substr(prefix.size());
        const auto sep = rest.find("__");
        if (sep == std::string::npos) {
            throw ValidationError("config: environment override " + name + " must look like KRONLVM_SECTION__KEY");
        }
        auto lower = [](std::string s) {
            std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
            return s;
        };
        const std::string section = lower(rest.substr(0, sep)), key = lower(rest.substr(sep + 2));
        const auto it = schema.find(section);
        if (it == schema.end() || !it->second.contains(key)) {
            throw ValidationError("config: environment override " + name + " names no known setting");
        }
        try {
            root[section][key] = YAML::Load(value);
        } catch (const YAML::Exception& e) {
            throw ValidationError("config: cannot parse " + name + ": " + e.what());
        }
    }
}

}  // namespace

PipelineKind parse_pipeline(std::string_view name) {
    if (name == "two_model") return PipelineKind::two_model;
    if (name == "joint") return PipelineKind::joint;
    if (name == "pca_baseline") return PipelineKind::pca_baseline;
    throw ValidationError("unknown pipeline '" + std::string(name) + "' (expected two_model, joint, pca_baseline)");
}

std::string_view pipeline_name(PipelineKind k) {
    switch (k) {
        case PipelineKind::two_model: return "two_model";
        case PipelineKind::joint: return "joint";
        case PipelineKind::pca_baseline: return "pca_baseline";
    }
    return "";
}

Direction parse_direction(std::string_view name) {
    if (name == "forward") return Direction::forward;
    if (name == "inverse") return Direction::inverse;
    throw ValidationError("unknown direction '" + std::string(name) + "' (expected forward or inverse)");
}

std::string_view direction_name(Direction d) { return d == Direction::forward ? "forward" : "inverse"; }

Index ExperimentConfig::max_n_xi() const { return n_xi.empty() ? 0 : *std::max_element(n_xi.begin(), n_xi.end()); }

std::string ExperimentConfig::variant() const {
    auto kernel = [](KernelFamily f) -> std::string {
        switch (f) {
            case KernelFamily::linear: return "Lin";
            case KernelFamily::rbf_ard: return "RBF";
            case KernelFamily::sum: return "Sum";
            case KernelFamily::exponential: return "Exp";
        }
        return "";
    };
    switch (pipeline) {
        case PipelineKind::two_model: return "2M-" + kernel(surrogate.input_kernel);
        case PipelineKind::joint: return "JM-" + kernel(surrogate.input_kernel);
        case PipelineKind::pca_baseline: return "2M-PCA";
    }
    return "";
}

void ExperimentConfig::validate() const {
    if (name.empty() || name.find_first_of("/\\") != std::string::npos) {
        throw ValidationError("config: experiment.name must be a non-empty file-name-safe string");
    }
    if (directions.empty()) throw ValidationError("config: experiment.directions is empty");
    if (n_xi.empty()) throw ValidationError("config: experiment.n_xi is empty");
    for (Index n : n_xi) {
        if (n < 2) throw ValidationError("config: every n_xi must be at least 2");
    }
    if (seeds.empty()) throw ValidationError("config: experiment.seeds is empty");
    if (n_test < 0) throw ValidationError("config: experiment.n_test must be non-negative");
    prior.validate();
    surrogate.validate();
    if (surrogate.latent_dim > 0 && pipeline == PipelineKind::pca_baseline) {
        for (Index n : n_xi) {
            if (surrogate.latent_dim > n) throw ValidationError("config: PCA latent_dim exceeds n_xi");
        }
    }
    if (obs_grid < 1 || obs_grid > prior.grid) throw ValidationError("config: observations.grid out of range");
    if (obs_grid > 1 && (prior.grid - 1) % (obs_grid - 1) != 0) {
        throw ValidationError("config: (prior.grid - 1) must be a multiple of (observations.grid - 1)");
    }
    if (!(noise_fraction >= 0.0) || !std::isfinite(noise_fraction)) {
        throw ValidationError("config: observations.noise_fraction must be non-negative");
    }
    if (pipeline == PipelineKind::joint && unit_conductivity) {
        throw ValidationError("config: unit_conductivity gives all-zero outputs, which the joint model cannot rescale");
    }
}

EnvMap environment_overrides() {
    EnvMap env;
    for (char** e = environ; e != nullptr && *e != nullptr; ++e) {
        const std::string entry(*e);
        const auto eq = entry.find('=');
        if (eq == std::string::npos || !entry.starts_with("KRONLVM_")) continue;
        env[entry.substr(0, eq)] = entry.substr(eq + 1);
    }
    return env;
}

ExperimentConfig parse_config(const std::string& yaml_text, const EnvMap& env) {
    YAML::Node root;
    try {
        root = YAML::Load(yaml_text);
    } catch (const YAML::Exception& e) {
        throw ValidationError(std::string("config: YAML syntax error: ") + e.what());
    }
    if (root.IsNull()) root = YAML::Node(YAML::NodeType::Map);
    check_keys(root);
    apply_env(root, env);

    ExperimentConfig c;
    if (const YAML::Node s = root["experiment"]) {
        read(s, "experiment", "name", c.name);
        if (s["pipeline"]) c.pipeline = parse_pipeline(get<std::string>(s["pipeline"], "experiment.pipeline"));
        if (s["directions"]) {
            c.directions.clear();
            for (const auto& d : get<std::vector<std::string>>(s["directions"], "experiment.directions")) {
                c.directions.push_back(parse_direction(d));
            }
        }
        if (s["n_xi"]) {
            c.n_xi.clear();
            for (long n : get<std::vector<long>>(s["n_xi"], "experiment.n_xi")) c.n_xi.push_back(n);
        }
        read(s, "experiment", "seeds", c.seeds);
        read(s, "experiment", "n_test", c.n_test);
        read(s, "experiment", "output_dir", c.output_dir);
    }
    if (const YAML::Node s = root["prior"]) {
        read(s, "prior", "warp_variance", c.prior.warp_variance);
        read(s, "prior", "warp_lengthscale", c.prior.warp_lengthscale);
        read(s, "prior", "field_variance", c.prior.field_variance);
        read(s, "prior", "field_lengthscale", c.prior.field_lengthscale);
        if (s["kl_terms"]) {
            const auto kl = get<std::vector<long>>(s["kl_terms"], "prior.kl_terms");
            if (kl.size() != 2) throw ValidationError("config: prior.kl_terms must be a pair [warp, field]");
            c.prior.kl_terms_warp = kl[0];
            c.prior.kl_terms_field = kl[1];
        }
        read(s, "prior", "grid", c.prior.grid);
        if (s["kle_scaling"]) c.prior.scaling = parse_kle_scaling(get<std::string>(s["kle_scaling"], "prior.kle_scaling"));
        read(s, "prior", "unit_conductivity", c.unit_conductivity);
    }
    if (const YAML::Node s = root["model"]) {
        if (s["kernel"]) c.surrogate.input_kernel = parse_family(get<std::string>(s["kernel"], "model.kernel"));
        if (s["output_kernel"]) {
            c.surrogate.output_kernel = parse_family(get<std::string>(s["output_kernel"], "model.output_kernel"));
        }
        read(s, "model", "latent_dim", c.surrogate.latent_dim);
        read(s, "model", "inducing", c.surrogate.inducing);
    }
    if (const YAML::Node s = root["training"]) {
        read(s, "training", "max_iter", c.surrogate.train.max_iter);
        read(s, "training", "tol", c.surrogate.train.tol);
        read(s, "training", "patience", c.surrogate.train.patience);
        read(s, "training", "memory", c.surrogate.train.memory);
    }
    if (const YAML::Node s = root["inference"]) {
        read(s, "inference", "max_iter", c.surrogate.infer.max_iter);
        read(s, "inference", "tol", c.surrogate.infer.tol);
        read(s, "inference", "restarts", c.surrogate.restarts);
        read(s, "inference", "n_mog", c.surrogate.n_mog);
    }
    if (const YAML::Node s = root["observations"]) {
        read(s, "observations", "grid", c.obs_grid);
        read(s, "observations", "noise_fraction", c.noise_fraction);
    }
    if (c.surrogate.train.max_iter < 1 || c.surrogate.infer.max_iter < 1) {
        throw ValidationError("config: optimizer max_iter must be positive");
    }
    c.validate();
    return c;
}

ExperimentConfig load_config(const std::filesystem::path& path, const EnvMap& env) {
    std::ifstream in(path);
    if (!in) throw IoError("config: cannot open " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config(ss.str(), env);
}

std::string render_config(const ExperimentConfig& c) {
    YAML::Emitter out;
    out.SetDoublePrecision(17);
    out << YAML::BeginMap;
    out << YAML::Key << "experiment" << YAML::Value << YAML::BeginMap;
    out << YAML::Key << "name" << YAML::Value << c.name;
    out << YAML::Key << "pipeline" << YAML::Value << std::string(pipeline_name(c.pipeline));
    out << YAML::Key << "directions" << YAML::Value << YAML::Flow << YAML::BeginSeq;
    for (Direction d : c.directions) out << std::string(direction_name(d));
    out << YAML::EndSeq;
    out << YAML::Key << "n_xi" << YAML::Value << YAML::Flow << YAML::BeginSeq;
    for (Index n : c.n_xi) out << static_cast<long>(n);
    out << YAML::EndSeq;
    out << YAML::Key << "seeds" << YAML::Value << YAML::Flow << c.seeds;
    out << YAML::Key << "n_test" << YAML::Value << static_cast<long>(c.n_test);
    out << YAML::Key << "output_dir" << YAML::Value << c.output_dir;
    out << YAML::EndMap;

    out << YAML::Key << "prior" << YAML::Value << YAML::BeginMap;
    out << YAML::Key << "warp_variance" << YAML::Value << c.prior.warp_variance;
    out << YAML::Key << "warp_lengthscale" << YAML::Value << c.prior.warp_lengthscale;
    out << YAML::Key << "field_variance" << YAML::Value << c.prior.field_variance;
    out << YAML::Key << "field_lengthscale" << YAML::Value << c.prior.field_lengthscale;
    out << YAML::Key << "kl_terms" << YAML::Value << YAML::Flow << YAML::BeginSeq
        << static_cast<long>(c.prior.kl_terms_warp) << static_cast<long>(c.prior.kl_terms_field) << YAML::EndSeq;
    out << YAML::Key << "grid" << YAML::Value << static_cast<long>(c.prior.grid);
    out << YAML::Key << "kle_scaling" << YAML::Value << std::string(kle_scaling_name(c.prior.scaling));
    out << YAML::Key << "unit_conductivity" << YAML::Value << c.unit_conductivity;
    out << YAML::EndMap;

    out << YAML::Key << "model" << YAML::Value << YAML::BeginMap;
    out << YAML::Key << "kernel" << YAML::Value << std::string(family_name(c.surrogate.input_kernel));
    out << YAML::Key << "output_kernel" << YAML::Value << std::string(family_name(c.surrogate.output_kernel));
    out << YAML::Key << "latent_dim" << YAML::Value << static_cast<long>(c.surrogate.latent_dim);
    out << YAML::Key << "inducing" << YAML::Value << static_cast<long>(c.surrogate.inducing);
    out << YAML::EndMap;

    out << YAML::Key << "training" << YAML::Value << YAML::BeginMap;
    out << YAML::Key << "max_iter" << YAML::Value << c.surrogate.train.max_iter;
    out << YAML::Key << "tol" << YAML::Value << c.surrogate.train.tol;
    out << YAML::Key << "patience" << YAML::Value << c.surrogate.train.patience;
    out << YAML::Key << "memory" << YAML::Value << c.surrogate.train.memory;
    out << YAML::EndMap;

    out << YAML::Key << "inference" << YAML::Value << YAML::BeginMap;
    out << YAML::Key << "max_iter" << YAML::Value << c.surrogate.infer.max_iter;
    out << YAML::Key << "tol" << YAML::Value << c.surrogate.infer.tol;
    out << YAML::Key << "restarts" << YAML::Value << c.surrogate.restarts;
    out << YAML::Key << "n_mog" << YAML::Value << static_cast<long>(c.surrogate.n_mog);
    out << YAML::EndMap;

    out << YAML::Key << "observations" << YAML::Value << YAML::BeginMap;
    out << YAML::Key << "grid" << YAML::Value << static_cast<long>(c.obs_grid);
    out << YAML::Key << "noise_fraction" << YAML::Value << c.noise_fraction;
    out << YAML::EndMap;
    out << YAML::EndMap;
    return std::string(out.c_str()) + "\n";
}

}  // namespace kronlvm
