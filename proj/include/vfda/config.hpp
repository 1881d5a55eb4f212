#pragma once

#include <fstream>
#include <sstream>
#include <string>

#include <json.hpp>

#include "vfda/federation.hpp"

namespace vfda {

/// A problem with the experiment configuration (bad file, unknown key,
/// wrong type, constraint violation).  The CLI maps this to exit code 2,
/// everything else to 3.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct DataConfig {
    int64_t num_clients = 3;
    int64_t volume_dim = 16;
    int64_t num_classes = 2;
    int64_t samples_per_client = 8;
    int64_t eval_samples = 8;
    double heterogeneity = 0.5;
};

struct AblationConfig {
    int64_t num_seeds = 5;
};

/// Full experiment description.  network.num_classes and
/// federation.num_clients are derived from the data section after parsing,
/// so each quantity has exactly one author.
struct ExperimentConfig {
    uint64_t seed = 42;
    std::string out_dir = "out";
    DataConfig data;
    NetworkConfig network;
    FedConfig federation;
    AblationConfig ablation;

    void validate() const {
        if (data.num_clients < 1) throw ConfigError("config: \"data.num_clients\" must be >= 1");
        if (data.num_classes != 2 && data.num_classes != 3) {
            throw ConfigError("config: \"data.num_classes\" must be 2 or 3");
        }
        if (data.samples_per_client < 1) throw ConfigError("config: \"data.samples_per_client\" must be >= 1");
        if (data.eval_samples < 1) throw ConfigError("config: \"data.eval_samples\" must be >= 1");
        if (data.heterogeneity < 0.0 || data.heterogeneity > 1.0) {
            throw ConfigError("config: \"data.heterogeneity\" must lie in [0, 1]");
        }
        if (data.volume_dim < 4 || data.volume_dim % 4 != 0) {
            throw ConfigError("config: \"data.volume_dim\" must be a positive multiple of 4");
        }
        if (network.in_channels != 1) {
            throw ConfigError("config: \"network.in_channels\" must be 1 (volumes are single-channel)");
        }
        if (network.encoder_channels.empty()) {
            throw ConfigError("config: \"network.encoder_channels\" must be non-empty");
        }
        for (int64_t c : network.encoder_channels) {
            if (c < 1) throw ConfigError("config: \"network.encoder_channels\" entries must be >= 1");
        }
        if (network.kernel_size < 1 || network.kernel_size % 2 == 0) {
            throw ConfigError("config: \"network.kernel_size\" must be odd and >= 1");
        }
        if (data.volume_dim % network.spatial_divisor() != 0) {
            throw ConfigError("config: \"data.volume_dim\" must be divisible by " +
                              std::to_string(network.spatial_divisor()) + " (one halving per encoder level)");
        }
        {
            // The most heterogeneous client must still fit its objects.
            Rng probe(0);
            const auto shifts = make_partition(data.num_clients, data.heterogeneity, probe);
            for (const ClientShift& s : shifts) {
                if (s.object_radius_range.second >= static_cast<double>(data.volume_dim - 1) / 2.0) {
                    throw ConfigError("config: \"data.volume_dim\" too small for the object radii implied by "
                                      "\"data.heterogeneity\"");
                }
            }
        }
        if (federation.rounds < 1) throw ConfigError("config: \"federation.rounds\" must be >= 1");
        if (federation.local_epochs < 0) throw ConfigError("config: \"federation.local_epochs\" must be >= 0");
        if (federation.batch_size < 1) throw ConfigError("config: \"federation.batch_size\" must be >= 1");
        if (federation.lr0 < 0.0) throw ConfigError("config: \"federation.lr0\" must be >= 0");
        if (federation.poly_power < 0.0) throw ConfigError("config: \"federation.poly_power\" must be >= 0");
        if (federation.eta0 <= 0.0) throw ConfigError("config: \"federation.eta0\" must be > 0");
        if (federation.vfda_apply_prob < 0.0 || federation.vfda_apply_prob > 1.0) {
            throw ConfigError("config: \"federation.vfda_apply_prob\" must lie in [0, 1]");
        }
        if (federation.mixup_alpha <= 0.0) throw ConfigError("config: \"federation.mixup_alpha\" must be > 0");
        if (federation.no_vfda && federation.mixup_baseline) {
            throw ConfigError("config: \"federation.no_vfda\" and \"federation.mixup_baseline\" are mutually "
                              "exclusive");
        }
        if (ablation.num_seeds < 1) throw ConfigError("config: \"ablation.num_seeds\" must be >= 1");
        if (network.num_classes != data.num_classes || federation.num_clients != data.num_clients) {
            throw ConfigError("config: derived fields out of sync; construct via parse_config");
        }
    }
};

namespace detail {

inline void reject_unknown_keys(const nlohmann::json& obj, const std::string& prefix,
                                std::initializer_list<const char*> allowed) {
    for (const auto& item : obj.items()) {
        bool known = false;
        for (const char* k : allowed) {
            if (item.key() == k) {
                known = true;
                break;
            }
        }
        if (!known) {
            const std::string path = prefix.empty() ? item.key() : prefix + "." + item.key();
            throw ConfigError("config: unknown key \"" + path + "\"");
        }
    }
}

inline const nlohmann::json* get_object(const nlohmann::json& obj, const std::string& key) {
    if (!obj.contains(key)) return nullptr;
    const nlohmann::json& v = obj.at(key);
    if (!v.is_object()) throw ConfigError("config: \"" + key + "\" must be an object");
    return &v;
}

inline void read_int(const nlohmann::json& obj, const std::string& prefix, const char* key, int64_t& out) {
    if (!obj.contains(key)) return;
    const nlohmann::json& v = obj.at(key);
    if (!v.is_number_integer()) {
        throw ConfigError("config: \"" + prefix + key + "\" must be an integer");
    }
    out = v.get<int64_t>();
}

inline void read_u64(const nlohmann::json& obj, const std::string& prefix, const char* key, uint64_t& out) {
    if (!obj.contains(key)) return;
    const nlohmann::json& v = obj.at(key);
    if (!v.is_number_integer() || (v.is_number_integer() && !v.is_number_unsigned() && v.get<int64_t>() < 0)) {
        throw ConfigError("config: \"" + prefix + key + "\" must be a non-negative integer");
    }
    out = v.get<uint64_t>();
}

inline void read_double(const nlohmann::json& obj, const std::string& prefix, const char* key, double& out) {
    if (!obj.contains(key)) return;
    const nlohmann::json& v = obj.at(key);
    if (!v.is_number()) throw ConfigError("config: \"" + prefix + key + "\" must be a number");
    out = v.get<double>();
}

inline void read_bool(const nlohmann::json& obj, const std::string& prefix, const char* key, bool& out) {
    if (!obj.contains(key)) return;
    const nlohmann::json& v = obj.at(key);
    if (!v.is_boolean()) throw ConfigError("config: \"" + prefix + key + "\" must be a boolean");
    out = v.get<bool>();
}

inline void read_string(const nlohmann::json& obj, const std::string& prefix, const char* key, std::string& out) {
    if (!obj.contains(key)) return;
    const nlohmann::json& v = obj.at(key);
    if (!v.is_string()) throw ConfigError("config: \"" + prefix + key + "\" must be a string");
    out = v.get<std::string>();
}

inline void read_int_array(const nlohmann::json& obj, const std::string& prefix, const char* key,
                           std::vector<int64_t>& out) {
    if (!obj.contains(key)) return;
    const nlohmann::json& v = obj.at(key);
    if (!v.is_array()) throw ConfigError("config: \"" + prefix + key + "\" must be an array of integers");
    std::vector<int64_t> values;
    for (const auto& e : v) {
        if (!e.is_number_integer()) {
            throw ConfigError("config: \"" + prefix + key + "\" must be an array of integers");
        }
        values.push_back(e.get<int64_t>());
    }
    out = std::move(values);
}

}  // namespace detail

/// Parse a JSON experiment description.  Every key is optional (defaults
/// apply); unknown keys, type errors, and constraint violations are
/// rejected with the offending key path.  An empty document means
/// all-defaults.
inline ExperimentConfig parse_config_text(const std::string& text) {
    ExperimentConfig cfg;
    std::string trimmed = text;
    trimmed.erase(0, trimmed.find_first_not_of(" \t\r\n"));
    if (!trimmed.empty()) {
        nlohmann::json doc;
        try {
            doc = nlohmann::json::parse(text);
        } catch (const nlohmann::json::parse_error& e) {
            throw ConfigError(std::string("config: not valid JSON: ") + e.what());
        }
        if (!doc.is_object()) throw ConfigError("config: top level must be an object");
        detail::reject_unknown_keys(doc, "", {"seed", "out_dir", "data", "network", "federation", "ablation"});
        detail::read_u64(doc, "", "seed", cfg.seed);
        detail::read_string(doc, "", "out_dir", cfg.out_dir);

        if (const nlohmann::json* data = detail::get_object(doc, "data")) {
            detail::reject_unknown_keys(*data, "data",
                                        {"num_clients", "volume_dim", "num_classes", "samples_per_client",
                                         "eval_samples", "heterogeneity"});
            detail::read_int(*data, "data.", "num_clients", cfg.data.num_clients);
            detail::read_int(*data, "data.", "volume_dim", cfg.data.volume_dim);
            detail::read_int(*data, "data.", "num_classes", cfg.data.num_classes);
            detail::read_int(*data, "data.", "samples_per_client", cfg.data.samples_per_client);
            detail::read_int(*data, "data.", "eval_samples", cfg.data.eval_samples);
            detail::read_double(*data, "data.", "heterogeneity", cfg.data.heterogeneity);
        }
        if (const nlohmann::json* net = detail::get_object(doc, "network")) {
            detail::reject_unknown_keys(*net, "network", {"in_channels", "encoder_channels", "kernel_size"});
            detail::read_int(*net, "network.", "in_channels", cfg.network.in_channels);
            detail::read_int_array(*net, "network.", "encoder_channels", cfg.network.encoder_channels);
            detail::read_int(*net, "network.", "kernel_size", cfg.network.kernel_size);
        }
        if (const nlohmann::json* fed = detail::get_object(doc, "federation")) {
            detail::reject_unknown_keys(*fed, "federation",
                                        {"rounds", "local_epochs", "batch_size", "lr0", "poly_power", "eta0",
                                         "vfda_apply_prob", "mixup_alpha", "augment_flip", "no_emd",
                                         "no_global_variance", "no_vfda", "mixup_baseline"});
            detail::read_int(*fed, "federation.", "rounds", cfg.federation.rounds);
            detail::read_int(*fed, "federation.", "local_epochs", cfg.federation.local_epochs);
            detail::read_int(*fed, "federation.", "batch_size", cfg.federation.batch_size);
            detail::read_double(*fed, "federation.", "lr0", cfg.federation.lr0);
            detail::read_double(*fed, "federation.", "poly_power", cfg.federation.poly_power);
            detail::read_double(*fed, "federation.", "eta0", cfg.federation.eta0);
            detail::read_double(*fed, "federation.", "vfda_apply_prob", cfg.federation.vfda_apply_prob);
            detail::read_double(*fed, "federation.", "mixup_alpha", cfg.federation.mixup_alpha);
            detail::read_bool(*fed, "federation.", "augment_flip", cfg.federation.augment_flip);
            detail::read_bool(*fed, "federation.", "no_emd", cfg.federation.no_emd);
            detail::read_bool(*fed, "federation.", "no_global_variance", cfg.federation.no_global_variance);
            detail::read_bool(*fed, "federation.", "no_vfda", cfg.federation.no_vfda);
            detail::read_bool(*fed, "federation.", "mixup_baseline", cfg.federation.mixup_baseline);
        }
        if (const nlohmann::json* abl = detail::get_object(doc, "ablation")) {
            detail::reject_unknown_keys(*abl, "ablation", {"num_seeds"});
            detail::read_int(*abl, "ablation.", "num_seeds", cfg.ablation.num_seeds);
        }
    }
    cfg.network.num_classes = cfg.data.num_classes;
    cfg.federation.num_clients = cfg.data.num_clients;
    cfg.validate();
    return cfg;
}

inline ExperimentConfig parse_config(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("config: cannot read \"" + path + "\"");
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_config_text(buf.str());
}

/// Materialized config as JSON with every field present, in stable key
/// order, so parse(serialize(cfg)) reproduces cfg exactly.
inline std::string serialize_config(const ExperimentConfig& cfg) {
    nlohmann::ordered_json doc;
    doc["seed"] = cfg.seed;
    doc["out_dir"] = cfg.out_dir;
    doc["data"]["num_clients"] = cfg.data.num_clients;
    doc["data"]["volume_dim"] = cfg.data.volume_dim;
    doc["data"]["num_classes"] = cfg.data.num_classes;
    doc["data"]["samples_per_client"] = cfg.data.samples_per_client;
    doc["data"]["eval_samples"] = cfg.data.eval_samples;
    doc["data"]["heterogeneity"] = cfg.data.heterogeneity;
    doc["network"]["in_channels"] = cfg.network.in_channels;
    doc["network"]["encoder_channels"] = cfg.network.encoder_channels;
    doc["network"]["kernel_size"] = cfg.network.kernel_size;
    doc["federation"]["rounds"] = cfg.federation.rounds;
    doc["federation"]["local_epochs"] = cfg.federation.local_epochs;
    doc["federation"]["batch_size"] = cfg.federation.batch_size;
    doc["federation"]["lr0"] = cfg.federation.lr0;
    doc["federation"]["poly_power"] = cfg.federation.poly_power;
    doc["federation"]["eta0"] = cfg.federation.eta0;
    doc["federation"]["vfda_apply_prob"] = cfg.federation.vfda_apply_prob;
    doc["federation"]["mixup_alpha"] = cfg.federation.mixup_alpha;
    doc["federation"]["augment_flip"] = cfg.federation.augment_flip;
    doc["federation"]["no_emd"] = cfg.federation.no_emd;
    doc["federation"]["no_global_variance"] = cfg.federation.no_global_variance;
    doc["federation"]["no_vfda"] = cfg.federation.no_vfda;
    doc["federation"]["mixup_baseline"] = cfg.federation.mixup_baseline;
    doc["ablation"]["num_seeds"] = cfg.ablation.num_seeds;
    return doc.dump(2) + "\n";
}

}  // namespace vfda
