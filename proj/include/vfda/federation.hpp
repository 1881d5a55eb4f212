#pragma once

#include <algorithm>
#include <chrono>
#include <functional>
#include <numeric>

#include "vfda/messages.hpp"
#include "vfda/metrics.hpp"
#include "vfda/network.hpp"
#include "vfda/synthdata.hpp"

namespace vfda {

// Simulated federation: the server broadcasts parameters plus per-layer
// global statistic variances, clients train locally (uploading parameters
// and accumulated channel statistics), and the server aggregates by
// sample-count-weighted FedAvg plus cross-institute variances.  Rounds are
// indexed 0-based internally (driving the momentum factor and the
// polynomial learning-rate decay) and reported 1-based.

struct FedConfig {
    int64_t num_clients = 3;
    int64_t rounds = 10;
    int64_t local_epochs = 1;
    int64_t batch_size = 4;
    double lr0 = 5e-4;
    double poly_power = 0.9;
    double eta0 = 10.0;
    double vfda_apply_prob = 1.0;
    double mixup_alpha = 0.2;
    bool augment_flip = true;
    bool no_emd = false;
    bool no_global_variance = false;
    bool no_vfda = false;
    bool mixup_baseline = false;

    bool vfda_enabled() const { return !no_vfda && !mixup_baseline; }

    void validate() const {
        if (num_clients < 1) throw std::invalid_argument("fed config: num_clients must be >= 1");
        if (rounds < 1) throw std::invalid_argument("fed config: rounds must be >= 1");
        if (local_epochs < 0) throw std::invalid_argument("fed config: local_epochs must be >= 0");
        if (batch_size < 1) throw std::invalid_argument("fed config: batch_size must be >= 1");
        if (lr0 < 0.0) throw std::invalid_argument("fed config: lr0 must be >= 0");
        if (poly_power < 0.0) throw std::invalid_argument("fed config: poly_power must be >= 0");
        if (eta0 <= 0.0) throw std::invalid_argument("fed config: eta0 must be > 0");
        if (vfda_apply_prob < 0.0 || vfda_apply_prob > 1.0) {
            throw std::invalid_argument("fed config: vfda_apply_prob must lie in [0, 1]");
        }
        if (mixup_alpha <= 0.0) throw std::invalid_argument("fed config: mixup_alpha must be > 0");
        if (no_vfda && mixup_baseline) {
            throw std::invalid_argument("fed config: no_vfda and mixup_baseline are mutually exclusive");
        }
    }
};

/// Per-round learning rate lr0 * (1 - r/R)^power on the 0-based round index,
/// so the first round trains at lr0 and the last at a positive remnant.
inline double poly_lr(const FedConfig& cfg, int64_t round0) {
    if (round0 < 0 || round0 >= cfg.rounds) {
        throw std::invalid_argument("poly_lr: round " + std::to_string(round0) + " outside [0, " +
                                    std::to_string(cfg.rounds) + ")");
    }
    return cfg.lr0 * std::pow(1.0 - static_cast<double>(round0) / static_cast<double>(cfg.rounds), cfg.poly_power);
}

// Named random sub-streams.  Everything a run draws comes from the one root
// seed through these, so consumers cannot perturb one another.
inline Rng data_stream(uint64_t seed, uint64_t client_id, uint64_t sample_idx) {
    return substream(seed, "data", client_id, sample_idx);
}
inline Rng init_stream(uint64_t seed) { return substream(seed, "init"); }
inline Rng shuffle_stream(uint64_t seed, uint64_t client_id, uint64_t round0) {
    return substream(seed, "shuffle", client_id, round0);
}
inline Rng eps_stream(uint64_t seed, uint64_t client_id, uint64_t round0) {
    return substream(seed, "eps", client_id, round0);
}
inline Rng flip_stream(uint64_t seed, uint64_t client_id, uint64_t round0) {
    return substream(seed, "flip", client_id, round0);
}
inline Rng mixup_stream(uint64_t seed, uint64_t client_id, uint64_t round0) {
    return substream(seed, "mixup", client_id, round0);
}

/// Sample-count-weighted mean of client parameter vectors, reduced in
/// ascending client_id order so completion order cannot matter.
inline std::vector<double> aggregate_weights(const std::vector<ClientUpdate>& updates) {
    if (updates.empty()) throw std::invalid_argument("aggregate_weights: no updates");
    std::vector<size_t> order(updates.size());
    std::iota(order.begin(), order.end(), size_t{0});
    std::sort(order.begin(), order.end(),
              [&](size_t a, size_t b) { return updates[a].client_id < updates[b].client_id; });

    const size_t param_len = updates[order[0]].params.size();
    double total = 0.0;
    for (size_t i = 0; i < order.size(); ++i) {
        const ClientUpdate& u = updates[order[i]];
        if (i > 0 && updates[order[i - 1]].client_id == u.client_id) {
            throw std::invalid_argument("aggregate_weights: duplicate client id " + std::to_string(u.client_id));
        }
        if (u.params.size() != param_len) {
            throw std::invalid_argument("aggregate_weights: client " + std::to_string(u.client_id) + " has " +
                                        std::to_string(u.params.size()) + " params, expected " +
                                        std::to_string(param_len));
        }
        if (u.sample_count < 1) throw std::invalid_argument("aggregate_weights: sample_count must be >= 1");
        total += static_cast<double>(u.sample_count);
    }

    std::vector<double> out(param_len, 0.0);
    for (size_t i : order) {
        const ClientUpdate& u = updates[i];
        const double w = static_cast<double>(u.sample_count) / total;
        for (size_t j = 0; j < param_len; ++j) out[j] += w * u.params[j];
    }
    return out;
}

/// Per-channel population variance of the uploaded statistics across
/// institutes, for one layer.
inline PrototypeVariance global_stat_variance(const std::vector<LayerStats>& institutes) {
    if (institutes.empty()) throw std::invalid_argument("global_stat_variance: no institutes");
    const size_t C = institutes[0].mu_bar.size();
    for (const LayerStats& ls : institutes) {
        if (ls.mu_bar.size() != C || ls.sigma_bar.size() != C) {
            throw std::invalid_argument("global_stat_variance: channel mismatch, expected width " +
                                        std::to_string(C));
        }
    }
    const double n = static_cast<double>(institutes.size());
    PrototypeVariance out(static_cast<int64_t>(C));
    for (size_t c = 0; c < C; ++c) {
        double mean_mu = 0.0, mean_sigma = 0.0;
        for (const LayerStats& ls : institutes) {
            mean_mu += ls.mu_bar[c];
            mean_sigma += ls.sigma_bar[c];
        }
        mean_mu /= n;
        mean_sigma /= n;
        double vm = 0.0, vs = 0.0;
        for (const LayerStats& ls : institutes) {
            const double dm = ls.mu_bar[c] - mean_mu;
            const double ds = ls.sigma_bar[c] - mean_sigma;
            vm += dm * dm;
            vs += ds * ds;
        }
        out.var_mu[c] = vm / n;
        out.var_sigma[c] = vs / n;
    }
    return out;
}

namespace detail {
inline std::vector<double> pad_to_width(const std::vector<double>& v, size_t width) {
    if (v.size() > width) throw std::invalid_argument("pad_to_width: vector wider than target");
    std::vector<double> out(v);
    out.resize(width, 0.0);
    return out;
}

inline std::vector<double> slice_width(const std::vector<double>& v, size_t width) {
    if (v.size() < width) throw std::invalid_argument("slice_width: vector narrower than target");
    return std::vector<double>(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(width));
}
}  // namespace detail

struct ClientState {
    uint32_t client_id = 0;
    Network net;
    int64_t next_round = 0;  // 0-based index of the round this client expects
};

inline ClientState make_client(uint32_t client_id, const NetworkConfig& netcfg) {
    Rng shell(0);  // placeholder weights; every round starts from the broadcast
    ClientState state{client_id, build_network(netcfg, shell), 0};
    return state;
}

struct LocalRoundReport {
    double mean_ce = 0.0;
    double mean_dice = 0.0;
    int64_t steps = 0;
};

namespace detail {
inline Batch assemble_batch(const std::vector<VolumeSample>& samples) {
    const int64_t B = static_cast<int64_t>(samples.size());
    const int64_t D = samples[0].volume.dim(2);
    Batch batch{Tensor({B, 1, D, D, D}), LabelArray({B, D, D, D})};
    const size_t voxels = static_cast<size_t>(D) * D * D;
    for (int64_t b = 0; b < B; ++b) {
        std::copy(samples[b].volume.data.begin(), samples[b].volume.data.end(),
                  batch.volumes.data.begin() + b * static_cast<int64_t>(voxels));
        std::copy(samples[b].label.data.begin(), samples[b].label.data.end(),
                  batch.labels.data.begin() + b * static_cast<int64_t>(voxels));
    }
    return batch;
}
}  // namespace detail

/// One local round: load the broadcast, train local_epochs passes over the
/// shard in seeded shuffled order, and return parameters plus the current
/// per-layer momentum statistics (zeroed when the augmentation path is
/// replaced by an ablation).
inline ClientUpdate client_local_round(ClientState& state, const GlobalBroadcast& broadcast,
                                       const std::vector<VolumeSample>& shard, const FedConfig& cfg,
                                       uint64_t root_seed, LocalRoundReport* report = nullptr) {
    cfg.validate();
    if (shard.empty()) throw std::invalid_argument("client_local_round: empty shard");
    const int64_t r0 = state.next_round;
    if (broadcast.round != static_cast<uint32_t>(r0 + 1)) {
        throw std::invalid_argument("client_local_round: broadcast round " + std::to_string(broadcast.round) +
                                    ", client " + std::to_string(state.client_id) + " expects round " +
                                    std::to_string(r0 + 1));
    }
    const auto& ch = state.net.config.encoder_channels;
    if (broadcast.layer_variances.size() != ch.size()) {
        throw std::invalid_argument("client_local_round: broadcast carries " +
                                    std::to_string(broadcast.layer_variances.size()) + " layers, network has " +
                                    std::to_string(ch.size()));
    }

    state.net.load_params(broadcast.params);
    for (size_t l = 0; l < ch.size(); ++l) {
        const size_t width = static_cast<size_t>(ch[l]);
        state.net.vfda_layers[l].global_variance.var_mu =
            detail::slice_width(broadcast.layer_variances[l].var_mu, width);
        state.net.vfda_layers[l].global_variance.var_sigma =
            detail::slice_width(broadcast.layer_variances[l].var_sigma, width);
    }

    const int64_t K = state.net.config.num_classes;
    const double lr = poly_lr(cfg, r0);
    VfdaTrainOptions opts;
    opts.round = r0;
    opts.eta0 = cfg.eta0;
    opts.no_emd = cfg.no_emd;
    opts.no_global_variance = cfg.no_global_variance;
    opts.disabled = !cfg.vfda_enabled();
    opts.apply_prob = cfg.vfda_apply_prob;

    Rng shuffle_rng = shuffle_stream(root_seed, state.client_id, static_cast<uint64_t>(r0));
    Rng flip_rng = flip_stream(root_seed, state.client_id, static_cast<uint64_t>(r0));
    Rng eps_rng = eps_stream(root_seed, state.client_id, static_cast<uint64_t>(r0));
    Rng mix_rng = mixup_stream(root_seed, state.client_id, static_cast<uint64_t>(r0));

    double ce_sum = 0.0, dice_sum = 0.0;
    int64_t steps = 0;
    const int64_t n = static_cast<int64_t>(shard.size());
    for (int64_t epoch = 0; epoch < cfg.local_epochs; ++epoch) {
        const std::vector<size_t> perm = shuffle_rng.permutation(static_cast<size_t>(n));
        for (int64_t start = 0; start < n; start += cfg.batch_size) {
            const int64_t stop = std::min(start + cfg.batch_size, n);
            std::vector<VolumeSample> picked;
            picked.reserve(static_cast<size_t>(stop - start));
            for (int64_t i = start; i < stop; ++i) {
                const VolumeSample& s = shard[perm[static_cast<size_t>(i)]];
                picked.push_back(cfg.augment_flip ? random_flip(s, flip_rng) : s);
            }
            Batch batch = detail::assemble_batch(picked);

            StepLosses losses;
            if (cfg.mixup_baseline) {
                const int64_t B = batch.volumes.dim(0);
                const double lambda = mix_rng.next_beta(cfg.mixup_alpha, cfg.mixup_alpha);
                const std::vector<size_t> pairing = mix_rng.permutation(static_cast<size_t>(B));
                Tensor partner_vols(batch.volumes.shape);
                LabelArray partner_labels(batch.labels.shape);
                const int64_t voxels = batch.volumes.numel() / B;
                for (int64_t b = 0; b < B; ++b) {
                    const int64_t src = static_cast<int64_t>(pairing[static_cast<size_t>(b)]);
                    std::copy_n(batch.volumes.data.begin() + src * voxels, voxels,
                                partner_vols.data.begin() + b * voxels);
                    std::copy_n(batch.labels.data.begin() + src * voxels, voxels,
                                partner_labels.data.begin() + b * voxels);
                }
                const int64_t D = batch.volumes.dim(2);
                const Tensor y1 = one_hot(batch.labels, B, K, D, D, D);
                const Tensor y2 = one_hot(partner_labels, B, K, D, D, D);
                auto [x_mix, y_mix] = mixup(batch.volumes, y1, partner_vols, y2, lambda);
                losses = train_step_soft(state.net, x_mix, y_mix, lr, LossWeights{}, opts, eps_rng);
            } else {
                losses = train_step(state.net, batch, lr, LossWeights{}, opts, eps_rng);
            }
            ce_sum += losses.ce;
            dice_sum += losses.dice;
            ++steps;
        }
    }

    if (report) {
        report->steps = steps;
        report->mean_ce = steps > 0 ? ce_sum / static_cast<double>(steps) : 0.0;
        report->mean_dice = steps > 0 ? dice_sum / static_cast<double>(steps) : 0.0;
    }
    state.next_round = r0 + 1;

    ClientUpdate update;
    update.client_id = state.client_id;
    update.sample_count = static_cast<uint32_t>(shard.size());
    update.stat_width = static_cast<uint32_t>(*std::max_element(ch.begin(), ch.end()));
    update.params = state.net.param_vector();
    update.layer_stats.resize(ch.size());
    for (size_t l = 0; l < ch.size(); ++l) {
        if (cfg.vfda_enabled()) {
            update.layer_stats[l].mu_bar =
                detail::pad_to_width(state.net.vfda_layers[l].momentum.mu_bar, update.stat_width);
            update.layer_stats[l].sigma_bar =
                detail::pad_to_width(state.net.vfda_layers[l].momentum.sigma_bar, update.stat_width);
        } else {
            update.layer_stats[l].mu_bar.assign(update.stat_width, 0.0);
            update.layer_stats[l].sigma_bar.assign(update.stat_width, 0.0);
        }
    }
    return update;
}

struct ClientRoundStats {
    int64_t client_id = 0;
    double loss_ce = 0.0;
    double loss_dice = 0.0;
};

struct RoundLog {
    int64_t round = 0;  // 1-based
    std::vector<ClientRoundStats> clients;
    std::vector<double> dice_foreground;  // pooled eval Dice, classes 1..K-1
    double dice_mean = 0.0;
    double wall_ms = 0.0;
};

struct FederationData {
    std::vector<std::vector<VolumeSample>> shards;
    std::vector<VolumeSample> eval_set;
};

/// Everything that must survive an interruption for a bit-exact resume:
/// the aggregated model, the institute variances, and every client's
/// momentum accumulators.  Per-round randomness is re-derived from (seed,
/// client, round), so no generator state is stored.
struct Checkpoint {
    uint64_t seed = 0;
    uint32_t next_round = 0;  // 0-based index of the next round to run
    std::vector<double> global_params;
    std::vector<PrototypeVariance> global_variances;           // true layer widths
    std::vector<std::vector<MomentumStats>> client_momentum;   // N x L
};

struct FederationResult {
    std::vector<RoundLog> logs;
    std::vector<double> final_params;
    Checkpoint final_state;
};

/// Pooled per-class Dice of a model over an eval set, batched eval-mode
/// forwards, no augmentation.
inline std::vector<double> evaluate_dice(Network& net, const std::vector<VolumeSample>& eval_set,
                                         int64_t batch_size) {
    const int64_t K = net.config.num_classes;
    std::vector<DiceAccumulator> acc(static_cast<size_t>(K - 1));
    const int64_t n = static_cast<int64_t>(eval_set.size());
    for (int64_t start = 0; start < n; start += batch_size) {
        const int64_t stop = std::min(start + batch_size, n);
        std::vector<VolumeSample> picked(eval_set.begin() + start, eval_set.begin() + stop);
        const Batch batch = detail::assemble_batch(picked);
        const Tensor logits = predict(net, batch.volumes);
        const LabelArray pred = argmax_labels(logits);
        for (int64_t c = 1; c < K; ++c) acc[static_cast<size_t>(c - 1)].add(pred, batch.labels, c);
    }
    std::vector<double> dice;
    for (const auto& a : acc) dice.push_back(a.score());
    return dice;
}

inline FederationResult run_federation(const FedConfig& cfg, const NetworkConfig& netcfg, const FederationData& data,
                                       uint64_t seed, const Checkpoint* resume = nullptr,
                                       const std::function<void(const RoundLog&)>& on_round = {}) {
    cfg.validate();
    netcfg.validate();
    const size_t N = static_cast<size_t>(cfg.num_clients);
    if (data.shards.size() != N) {
        throw std::invalid_argument("run_federation: got " + std::to_string(data.shards.size()) + " shards for " +
                                    std::to_string(N) + " clients");
    }
    for (size_t i = 0; i < N; ++i) {
        if (data.shards[i].empty()) throw std::invalid_argument("run_federation: shard " + std::to_string(i) +
                                                                " is empty");
    }
    if (data.eval_set.empty()) throw std::invalid_argument("run_federation: eval set is empty");

    const auto& ch = netcfg.encoder_channels;
    const size_t L = ch.size();
    const uint32_t width = static_cast<uint32_t>(*std::max_element(ch.begin(), ch.end()));

    std::vector<ClientState> clients;
    for (size_t i = 0; i < N; ++i) clients.push_back(make_client(static_cast<uint32_t>(i), netcfg));
    Rng shell(0);
    Network eval_net = build_network(netcfg, shell);

    std::vector<double> global_params;
    std::vector<PrototypeVariance> global_variances;
    int64_t start_round = 0;
    if (resume) {
        if (resume->seed != seed) {
            throw std::invalid_argument("run_federation: checkpoint seed " + std::to_string(resume->seed) +
                                        " does not match run seed " + std::to_string(seed));
        }
        if (resume->client_momentum.size() != N) {
            throw std::invalid_argument("run_federation: checkpoint has " +
                                        std::to_string(resume->client_momentum.size()) + " clients, expected " +
                                        std::to_string(N));
        }
        if (resume->global_variances.size() != L) {
            throw std::invalid_argument("run_federation: checkpoint has " +
                                        std::to_string(resume->global_variances.size()) + " layers, expected " +
                                        std::to_string(L));
        }
        if (static_cast<int64_t>(resume->global_params.size()) != eval_net.param_count()) {
            throw std::invalid_argument("run_federation: checkpoint parameter count " +
                                        std::to_string(resume->global_params.size()) + " does not match network " +
                                        std::to_string(eval_net.param_count()));
        }
        if (resume->next_round > static_cast<uint32_t>(cfg.rounds)) {
            throw std::invalid_argument("run_federation: checkpoint is past the configured rounds");
        }
        global_params = resume->global_params;
        global_variances = resume->global_variances;
        start_round = resume->next_round;
        for (size_t i = 0; i < N; ++i) {
            if (resume->client_momentum[i].size() != L) {
                throw std::invalid_argument("run_federation: checkpoint client " + std::to_string(i) +
                                            " momentum layer count mismatch");
            }
            for (size_t l = 0; l < L; ++l) {
                if (resume->client_momentum[i][l].channels() != ch[l]) {
                    throw std::invalid_argument("run_federation: checkpoint momentum width mismatch at client " +
                                                std::to_string(i) + " layer " + std::to_string(l));
                }
                clients[i].net.vfda_layers[l].momentum = resume->client_momentum[i][l];
            }
            clients[i].next_round = start_round;
        }
    } else {
        Rng init_rng = init_stream(seed);
        const Network init_net = build_network(netcfg, init_rng);
        global_params = init_net.param_vector();
        for (size_t l = 0; l < L; ++l) global_variances.push_back(PrototypeVariance::zeros(ch[l]));
    }

    FederationResult result;
    for (int64_t r0 = start_round; r0 < cfg.rounds; ++r0) {
        const auto t0 = std::chrono::steady_clock::now();

        GlobalBroadcast outgoing;
        outgoing.round = static_cast<uint32_t>(r0 + 1);
        outgoing.stat_width = width;
        outgoing.params = global_params;
        for (size_t l = 0; l < L; ++l) {
            PrototypeVariance padded(static_cast<int64_t>(width));
            padded.var_mu = detail::pad_to_width(global_variances[l].var_mu, width);
            padded.var_sigma = detail::pad_to_width(global_variances[l].var_sigma, width);
            outgoing.layer_variances.push_back(std::move(padded));
        }
        // Even in-process, messages cross the wire format, so a socket
        // transport could be swapped in without changing semantics.
        const GlobalBroadcast broadcast = deserialize_broadcast(serialize_broadcast(outgoing));

        std::vector<ClientUpdate> updates;
        std::vector<LocalRoundReport> reports(N);
        for (size_t i = 0; i < N; ++i) {
            const ClientUpdate u =
                client_local_round(clients[i], broadcast, data.shards[i], cfg, seed, &reports[i]);
            updates.push_back(deserialize_update(serialize_update(u)));
        }
        std::sort(updates.begin(), updates.end(),
                  [](const ClientUpdate& a, const ClientUpdate& b) { return a.client_id < b.client_id; });

        global_params = aggregate_weights(updates);
        for (size_t l = 0; l < L; ++l) {
            std::vector<LayerStats> rows;
            rows.reserve(updates.size());
            for (const ClientUpdate& u : updates) rows.push_back(u.layer_stats[l]);
            const PrototypeVariance padded = global_stat_variance(rows);
            global_variances[l].var_mu = detail::slice_width(padded.var_mu, static_cast<size_t>(ch[l]));
            global_variances[l].var_sigma = detail::slice_width(padded.var_sigma, static_cast<size_t>(ch[l]));
        }

        eval_net.load_params(global_params);
        RoundLog log;
        log.round = r0 + 1;
        for (size_t i = 0; i < N; ++i) {
            log.clients.push_back(
                {static_cast<int64_t>(updates[i].client_id), reports[i].mean_ce, reports[i].mean_dice});
        }
        log.dice_foreground = evaluate_dice(eval_net, data.eval_set, cfg.batch_size);
        log.dice_mean = std::accumulate(log.dice_foreground.begin(), log.dice_foreground.end(), 0.0) /
                        static_cast<double>(log.dice_foreground.size());
        log.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
        result.logs.push_back(std::move(log));
        if (on_round) on_round(result.logs.back());
    }

    result.final_params = global_params;
    result.final_state.seed = seed;
    result.final_state.next_round = static_cast<uint32_t>(cfg.rounds);
    result.final_state.global_params = global_params;
    result.final_state.global_variances = global_variances;
    result.final_state.client_momentum.resize(N);
    for (size_t i = 0; i < N; ++i) {
        for (size_t l = 0; l < L; ++l) {
            result.final_state.client_momentum[i].push_back(clients[i].net.vfda_layers[l].momentum);
        }
    }
    return result;
}

// "FVC1" checkpoint file: magic, version u16, u64 seed, u32 next_round,
// u32 client count, u32 layer count, per-layer u32 channel widths, u32
// parameter count; then the global parameters, per-layer (var_mu,
// var_sigma), and per client per layer a u8 initialized flag, the last
// update round as u64, and (mu_bar, sigma_bar).

inline constexpr uint16_t kCheckpointVersion = 1;

inline std::vector<uint8_t> encode_checkpoint(const Checkpoint& ckpt) {
    const size_t N = ckpt.client_momentum.size();
    const size_t L = ckpt.global_variances.size();
    for (size_t i = 0; i < N; ++i) {
        if (ckpt.client_momentum[i].size() != L) {
            throw std::invalid_argument("encode_checkpoint: client " + std::to_string(i) +
                                        " has wrong layer count");
        }
        for (size_t l = 0; l < L; ++l) {
            if (ckpt.client_momentum[i][l].channels() != ckpt.global_variances[l].channels()) {
                throw std::invalid_argument("encode_checkpoint: width mismatch at client " + std::to_string(i) +
                                            " layer " + std::to_string(l));
            }
        }
    }

    std::vector<uint8_t> out;
    wire::put_magic(out, "FVC1");
    wire::put_u16(out, kCheckpointVersion);
    wire::put_u64(out, ckpt.seed);
    wire::put_u32(out, ckpt.next_round);
    wire::put_u32(out, static_cast<uint32_t>(N));
    wire::put_u32(out, static_cast<uint32_t>(L));
    for (size_t l = 0; l < L; ++l) {
        wire::put_u32(out, static_cast<uint32_t>(ckpt.global_variances[l].channels()));
    }
    wire::put_u32(out, static_cast<uint32_t>(ckpt.global_params.size()));
    for (double p : ckpt.global_params) wire::put_f64(out, p);
    for (const PrototypeVariance& pv : ckpt.global_variances) {
        for (double v : pv.var_mu) wire::put_f64(out, v);
        for (double v : pv.var_sigma) wire::put_f64(out, v);
    }
    for (size_t i = 0; i < N; ++i) {
        for (size_t l = 0; l < L; ++l) {
            const MomentumStats& m = ckpt.client_momentum[i][l];
            wire::put_u8(out, m.initialized ? 1 : 0);
            wire::put_u64(out, static_cast<uint64_t>(m.round_of_last_update));
            for (double v : m.mu_bar) wire::put_f64(out, v);
            for (double v : m.sigma_bar) wire::put_f64(out, v);
        }
    }
    return out;
}

inline Checkpoint decode_checkpoint(const std::vector<uint8_t>& bytes, const std::string& what) {
    wire::Reader r(bytes, what);
    r.expect_magic("FVC1");
    const uint16_t version = r.u16();
    if (version != kCheckpointVersion) {
        throw VersionMismatchError(what + ": version " + std::to_string(version) + ", expected " +
                                   std::to_string(kCheckpointVersion));
    }
    Checkpoint ckpt;
    ckpt.seed = r.u64();
    ckpt.next_round = r.u32();
    const uint32_t N = r.u32();
    const uint32_t L = r.u32();
    if (N > 4096) throw RangeError(what + ": client count " + std::to_string(N) + " out of range");
    if (L > kMaxLayers) throw RangeError(what + ": layer count " + std::to_string(L) + " out of range");
    std::vector<uint32_t> widths(L);
    for (auto& w : widths) {
        w = r.u32();
        if (w == 0 || w > kMaxStatWidth) throw RangeError(what + ": layer width " + std::to_string(w) +
                                                          " out of range");
    }
    const uint32_t param_len = r.u32();
    if (param_len > kMaxParamLen) {
        throw RangeError(what + ": parameter count " + std::to_string(param_len) + " out of range");
    }

    ckpt.global_params.resize(param_len);
    for (auto& p : ckpt.global_params) p = r.f64();
    for (uint32_t l = 0; l < L; ++l) {
        PrototypeVariance pv(static_cast<int64_t>(widths[l]));
        for (auto& v : pv.var_mu) v = r.f64();
        for (auto& v : pv.var_sigma) v = r.f64();
        ckpt.global_variances.push_back(std::move(pv));
    }
    ckpt.client_momentum.resize(N);
    for (uint32_t i = 0; i < N; ++i) {
        for (uint32_t l = 0; l < L; ++l) {
            MomentumStats m(static_cast<int64_t>(widths[l]));
            m.initialized = r.u8() != 0;
            m.round_of_last_update = static_cast<int64_t>(r.u64());
            for (auto& v : m.mu_bar) v = r.f64();
            for (auto& v : m.sigma_bar) v = r.f64();
            ckpt.client_momentum[i].push_back(std::move(m));
        }
    }
    r.expect_end();
    return ckpt;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
    wire::write_file(path, encode_checkpoint(ckpt));
}

inline Checkpoint load_checkpoint(const std::string& path) {
    return decode_checkpoint(wire::read_file(path), path);
}

}  // namespace vfda
