#pragma once

#include <array>
#include <cstdio>
#include <filesystem>
#include <limits>
#include <ostream>

#include "vfda/config.hpp"
#include "vfda/metrics.hpp"

namespace vfda {

// Experiment orchestration: deterministic dataset construction, training
// with machine-readable metrics, standalone evaluation, and the ablation
// table.  Every output is a pure function of (config, seed), so repeated
// runs produce byte-identical files.

inline constexpr uint64_t kEvalStreamClient = 0xFFFFFFFFull;
inline constexpr const char* kEvalDirName = "eval";

inline uint64_t fnv1a64(const uint8_t* data, size_t n, uint64_t state = 14695981039346656037ull) {
    for (size_t i = 0; i < n; ++i) {
        state ^= data[i];
        state *= 1099511628211ull;
    }
    return state;
}

// ---------------------------------------------------------------------------
// Model file: "FVP1" magic, version u16, u32 in_channels, u32 num_classes,
// u32 level count, per-level u32 channels, u32 kernel_size, u32 parameter
// count, then the flat parameter vector as 64-bit little-endian floats.

inline constexpr uint16_t kModelVersion = 1;

struct ModelFile {
    NetworkConfig config;
    std::vector<double> params;
};

namespace detail {
inline int64_t expected_param_count(const NetworkConfig& config) {
    Rng shell(0);
    return build_network(config, shell).param_count();
}
}  // namespace detail

inline std::vector<uint8_t> encode_model(const ModelFile& model) {
    model.config.validate();
    if (static_cast<int64_t>(model.params.size()) != detail::expected_param_count(model.config)) {
        throw std::invalid_argument("encode_model: parameter count " + std::to_string(model.params.size()) +
                                    " does not match the declared architecture");
    }
    std::vector<uint8_t> out;
    wire::put_magic(out, "FVP1");
    wire::put_u16(out, kModelVersion);
    wire::put_u32(out, static_cast<uint32_t>(model.config.in_channels));
    wire::put_u32(out, static_cast<uint32_t>(model.config.num_classes));
    wire::put_u32(out, static_cast<uint32_t>(model.config.encoder_channels.size()));
    for (int64_t c : model.config.encoder_channels) wire::put_u32(out, static_cast<uint32_t>(c));
    wire::put_u32(out, static_cast<uint32_t>(model.config.kernel_size));
    wire::put_u32(out, static_cast<uint32_t>(model.params.size()));
    for (double p : model.params) wire::put_f64(out, p);
    return out;
}

inline ModelFile decode_model(const std::vector<uint8_t>& bytes, const std::string& what) {
    wire::Reader r(bytes, what);
    r.expect_magic("FVP1");
    const uint16_t version = r.u16();
    if (version != kModelVersion) {
        throw VersionMismatchError(what + ": version " + std::to_string(version) + ", expected " +
                                   std::to_string(kModelVersion));
    }
    ModelFile model;
    model.config.in_channels = r.u32();
    model.config.num_classes = r.u32();
    const uint32_t L = r.u32();
    if (model.config.in_channels > kMaxStatWidth || model.config.num_classes > 256 || L == 0 || L > kMaxLayers) {
        throw RangeError(what + ": architecture header out of range");
    }
    model.config.encoder_channels.clear();
    for (uint32_t l = 0; l < L; ++l) {
        const uint32_t c = r.u32();
        if (c == 0 || c > kMaxStatWidth) throw RangeError(what + ": channel count out of range");
        model.config.encoder_channels.push_back(c);
    }
    model.config.kernel_size = r.u32();
    if (model.config.kernel_size > 99) throw RangeError(what + ": kernel size out of range");
    const uint32_t param_len = r.u32();
    if (param_len > kMaxParamLen) throw RangeError(what + ": parameter count out of range");
    model.params.resize(param_len);
    for (auto& p : model.params) p = r.f64();
    r.expect_end();
    model.config.validate();
    if (static_cast<int64_t>(model.params.size()) != detail::expected_param_count(model.config)) {
        throw RangeError(what + ": parameter count does not match the declared architecture");
    }
    return model;
}

inline void save_model(const std::string& path, const ModelFile& model) {
    wire::write_file(path, encode_model(model));
}

inline ModelFile load_model(const std::string& path) { return decode_model(wire::read_file(path), path); }

// ---------------------------------------------------------------------------
// Dataset construction.  All draws come from ("data", client, sample)
// sub-streams of the root seed; the held-out eval set uses a reserved
// pseudo-client id and cycles through the client shifts so it covers the
// mixture of institute distributions.

inline std::vector<ClientShift> experiment_partition(const ExperimentConfig& cfg) {
    Rng unused(0);
    std::vector<ClientShift> shifts = make_partition(cfg.data.num_clients, cfg.data.heterogeneity, unused);
    for (ClientShift& s : shifts) s.samples = cfg.data.samples_per_client;
    return shifts;
}

inline FederationData build_federation_data(const ExperimentConfig& cfg, uint64_t seed) {
    const std::vector<ClientShift> shifts = experiment_partition(cfg);
    FederationData data;
    data.shards.resize(static_cast<size_t>(cfg.data.num_clients));
    for (int64_t i = 0; i < cfg.data.num_clients; ++i) {
        for (int64_t k = 0; k < cfg.data.samples_per_client; ++k) {
            Rng rng = data_stream(seed, static_cast<uint64_t>(i), static_cast<uint64_t>(k));
            data.shards[static_cast<size_t>(i)].push_back(
                generate_sample(shifts[static_cast<size_t>(i)], cfg.data.volume_dim, cfg.data.num_classes, rng));
        }
    }
    for (int64_t k = 0; k < cfg.data.eval_samples; ++k) {
        Rng rng = data_stream(seed, kEvalStreamClient, static_cast<uint64_t>(k));
        const ClientShift& s = shifts[static_cast<size_t>(k % cfg.data.num_clients)];
        data.eval_set.push_back(generate_sample(s, cfg.data.volume_dim, cfg.data.num_classes, rng));
    }
    return data;
}

inline FederationData build_federation_data(const ExperimentConfig& cfg) {
    return build_federation_data(cfg, cfg.seed);
}

/// Order-sensitive digest of every volume and label byte in the dataset,
/// used by the ablation table to prove variants trained on the same shards.
inline uint64_t dataset_hash(const FederationData& data, uint64_t state = 14695981039346656037ull) {
    for (const auto& shard : data.shards) {
        for (const VolumeSample& s : shard) {
            const std::vector<uint8_t> bytes = encode_volume(s);
            state = fnv1a64(bytes.data(), bytes.size(), state);
        }
    }
    for (const VolumeSample& s : data.eval_set) {
        const std::vector<uint8_t> bytes = encode_volume(s);
        state = fnv1a64(bytes.data(), bytes.size(), state);
    }
    return state;
}

// ---------------------------------------------------------------------------
// Text formatting helpers.

inline std::string format_g17(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

inline std::string format_hex64(uint64_t v) {
    char buf[20];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

inline std::string metrics_header(int64_t num_classes) {
    std::string h = "round,client_id,loss_ce,loss_dice";
    for (int64_t c = 1; c < num_classes; ++c) h += ",dice_c" + std::to_string(c);
    h += ",dice_mean";
    return h;
}

namespace detail {
inline std::string metrics_client_row(const RoundLog& log, const ClientRoundStats& cs, int64_t num_classes) {
    std::string row = std::to_string(log.round) + "," + std::to_string(cs.client_id) + "," +
                      format_g17(cs.loss_ce) + "," + format_g17(cs.loss_dice);
    const double nan = std::numeric_limits<double>::quiet_NaN();
    for (int64_t c = 0; c < num_classes; ++c) row += "," + format_g17(nan);  // K-1 classes + mean
    return row;
}

inline std::string metrics_global_row(const RoundLog& log, int64_t num_classes) {
    double ce = 0.0, dice_loss = 0.0;
    for (const ClientRoundStats& cs : log.clients) {
        ce += cs.loss_ce;
        dice_loss += cs.loss_dice;
    }
    const double n = static_cast<double>(log.clients.size());
    std::string row = std::to_string(log.round) + ",-1," + format_g17(ce / n) + "," + format_g17(dice_loss / n);
    for (int64_t c = 1; c < num_classes; ++c) {
        row += "," + format_g17(log.dice_foreground[static_cast<size_t>(c - 1)]);
    }
    row += "," + format_g17(log.dice_mean);
    return row;
}
}  // namespace detail

// ---------------------------------------------------------------------------
// Commands.  Each validates, writes its outputs under cfg.out_dir, and
// throws on failure (ConfigError for configuration problems, anything else
// for runtime problems); the CLI maps exception kind to exit code.

inline void write_config_echo(const ExperimentConfig& cfg) {
    const std::string text = serialize_config(cfg);
    std::ofstream out(std::filesystem::path(cfg.out_dir) / "config.json", std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write config echo under \"" + cfg.out_dir + "\"");
    out << text;
}

/// Generate the client shards and the held-out eval set as .fvx files:
/// out_dir/client_<i>/sample_<k>.fvx and out_dir/eval/sample_<k>.fvx.
inline void cmd_gen_data(const ExperimentConfig& cfg, std::ostream& log) {
    cfg.validate();
    const FederationData data = build_federation_data(cfg);
    const std::filesystem::path root(cfg.out_dir);
    std::filesystem::create_directories(root);
    write_config_echo(cfg);
    for (size_t i = 0; i < data.shards.size(); ++i) {
        const std::filesystem::path dir = root / client_dir_name(static_cast<int64_t>(i));
        std::filesystem::create_directories(dir);
        for (size_t k = 0; k < data.shards[i].size(); ++k) {
            write_volume((dir / sample_file_name(static_cast<int64_t>(k))).string(), data.shards[i][k]);
        }
    }
    const std::filesystem::path eval_dir = root / kEvalDirName;
    std::filesystem::create_directories(eval_dir);
    for (size_t k = 0; k < data.eval_set.size(); ++k) {
        write_volume((eval_dir / sample_file_name(static_cast<int64_t>(k))).string(), data.eval_set[k]);
    }
    log << "wrote " << data.shards.size() << " client shards ("
        << cfg.data.samples_per_client << " samples each) and " << data.eval_set.size()
        << " eval volumes under " << cfg.out_dir << "\n";
}

/// Run the federation and record per-round metrics.  metrics.csv carries one
/// row per client per round (losses; Dice columns are nan) and a final row
/// per round with client_id -1 (mean losses plus held-out Dice); rows are
/// appended and flushed as rounds finish, so an interrupted run leaves a
/// parseable prefix.
inline FederationResult cmd_train(const ExperimentConfig& cfg, std::ostream& log) {
    cfg.validate();
    std::filesystem::create_directories(cfg.out_dir);
    write_config_echo(cfg);
    const FederationData data = build_federation_data(cfg);

    const std::filesystem::path csv_path = std::filesystem::path(cfg.out_dir) / "metrics.csv";
    std::ofstream csv(csv_path, std::ios::binary | std::ios::trunc);
    if (!csv) throw std::runtime_error("cannot write \"" + csv_path.string() + "\"");
    csv << metrics_header(cfg.data.num_classes) << "\n";
    csv.flush();

    const FederationResult result = run_federation(
        cfg.federation, cfg.network, data, cfg.seed, nullptr, [&](const RoundLog& rl) {
            for (const ClientRoundStats& cs : rl.clients) {
                csv << detail::metrics_client_row(rl, cs, cfg.data.num_classes) << "\n";
            }
            csv << detail::metrics_global_row(rl, cfg.data.num_classes) << "\n";
            csv.flush();
            log << "round " << rl.round << "/" << cfg.federation.rounds << "  dice_mean "
                << format_g17(rl.dice_mean) << "\n";
        });

    save_model((std::filesystem::path(cfg.out_dir) / "model.fvp").string(), ModelFile{cfg.network, result.final_params});
    return result;
}

/// Evaluate a saved model on a directory of sample_<k>.fvx volumes and
/// write a JSON per-class Dice report.
inline std::string cmd_eval(const std::string& model_path, const std::string& data_dir,
                            const std::string& out_dir, std::ostream& log) {
    const ModelFile model = load_model(model_path);

    std::vector<VolumeSample> samples;
    for (int64_t k = 0;; ++k) {
        const std::filesystem::path p = std::filesystem::path(data_dir) / sample_file_name(k);
        if (!std::filesystem::exists(p)) break;
        samples.push_back(read_volume(p.string()));
    }
    if (samples.empty()) {
        throw std::runtime_error("no sample_<k>.fvx volumes found in \"" + data_dir + "\"");
    }
    const int64_t D = samples[0].volume.dim(2);
    uint8_t max_label = 0;
    for (const VolumeSample& s : samples) {
        if (s.volume.dim(2) != D) throw std::runtime_error("eval volumes disagree on dimension");
        for (uint8_t v : s.label.data) max_label = std::max(max_label, v);
    }
    const int64_t data_classes = static_cast<int64_t>(max_label) + 1;
    if (data_classes != model.config.num_classes) {
        throw std::runtime_error("class count mismatch: model expects K=" +
                                 std::to_string(model.config.num_classes) + ", dataset has K=" +
                                 std::to_string(data_classes));
    }
    if (D % model.config.spatial_divisor() != 0) {
        throw std::runtime_error("volume dimension " + std::to_string(D) + " is not divisible by " +
                                 std::to_string(model.config.spatial_divisor()));
    }

    Rng shell(0);
    Network net = build_network(model.config, shell);
    net.load_params(model.params);
    const std::vector<double> dice = evaluate_dice(net, samples, 4);

    nlohmann::ordered_json report;
    report["volumes"] = samples.size();
    report["num_classes"] = model.config.num_classes;
    for (size_t c = 0; c < dice.size(); ++c) {
        report["dice_per_class"]["class_" + std::to_string(c + 1)] = dice[c];
    }
    report["dice_mean"] =
        std::accumulate(dice.begin(), dice.end(), 0.0) / static_cast<double>(dice.size());
    const std::string text = report.dump(2) + "\n";

    std::filesystem::create_directories(out_dir);
    const std::filesystem::path report_path = std::filesystem::path(out_dir) / "eval_report.json";
    std::ofstream out(report_path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write \"" + report_path.string() + "\"");
    out << text;
    log << text;
    return text;
}

// ---------------------------------------------------------------------------
// Ablation table: five training variants over a common set of seeds, each
// seed sharing its generated shards across variants (witnessed by the
// shard_hash column being constant down the table).

struct AblationVariant {
    const char* name;
    bool no_vfda;
    bool mixup_baseline;
    bool no_emd;
    bool no_global_variance;
};

inline const std::array<AblationVariant, 5>& ablation_variants() {
    static const std::array<AblationVariant, 5> variants = {{
        {"none", true, false, false, false},
        {"mixup", false, true, false, false},
        {"vfda", false, false, false, false},
        {"vfda_no_emd", false, false, true, false},
        {"vfda_no_global", false, false, false, true},
    }};
    return variants;
}

inline FedConfig ablation_fed_config(const FedConfig& base, const AblationVariant& v) {
    FedConfig fed = base;
    fed.no_vfda = v.no_vfda;
    fed.mixup_baseline = v.mixup_baseline;
    fed.no_emd = v.no_emd;
    fed.no_global_variance = v.no_global_variance;
    return fed;
}

/// Final-round mean Dice of each variant under seeds cfg.seed + s.  Any
/// ablation flags in cfg.federation are ignored; the variants define them.
inline void cmd_ablate(const ExperimentConfig& cfg, std::ostream& log) {
    cfg.validate();
    std::filesystem::create_directories(cfg.out_dir);
    write_config_echo(cfg);

    const int64_t S = cfg.ablation.num_seeds;
    const std::filesystem::path csv_path = std::filesystem::path(cfg.out_dir) / "ablation_table.csv";
    std::ofstream csv(csv_path, std::ios::binary | std::ios::trunc);
    if (!csv) throw std::runtime_error("cannot write \"" + csv_path.string() + "\"");
    csv << "variant,shard_hash";
    for (int64_t s = 1; s <= S; ++s) csv << ",seed_" << s;
    csv << ",dice_mean,dice_std\n";
    csv.flush();

    for (const AblationVariant& variant : ablation_variants()) {
        const FedConfig fed = ablation_fed_config(cfg.federation, variant);
        uint64_t hash = 14695981039346656037ull;
        std::vector<double> finals;
        for (int64_t s = 0; s < S; ++s) {
            const uint64_t seed = cfg.seed + static_cast<uint64_t>(s);
            const FederationData data = build_federation_data(cfg, seed);
            hash = dataset_hash(data, hash);
            const FederationResult result = run_federation(fed, cfg.network, data, seed);
            finals.push_back(result.logs.back().dice_mean);
            log << variant.name << " seed " << seed << ": dice_mean " << format_g17(finals.back()) << "\n";
        }
        double mean = std::accumulate(finals.begin(), finals.end(), 0.0) / static_cast<double>(S);
        double var = 0.0;
        for (double d : finals) var += (d - mean) * (d - mean);
        var /= static_cast<double>(S);
        csv << variant.name << "," << format_hex64(hash);
        for (double d : finals) csv << "," << format_g17(d);
        csv << "," << format_g17(mean) << "," << format_g17(std::sqrt(var)) << "\n";
        csv.flush();
    }
}

}  // namespace vfda
