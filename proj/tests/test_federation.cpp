#include <gtest/gtest.h>

#include <cstring>

#include "vfda/federation.hpp"

namespace vfda {
namespace {

NetworkConfig tiny_config() {
    NetworkConfig cfg;
    cfg.in_channels = 1;
    cfg.num_classes = 2;
    cfg.encoder_channels = {2, 3, 4};
    return cfg;
}

ClientShift small_shift(double gain, double bias) {
    ClientShift s;
    s.intensity_gain = gain;
    s.intensity_bias = bias;
    s.noise_std = 0.05;
    s.object_radius_range = {1.5, 2.5};
    return s;
}

std::vector<VolumeSample> make_shard(uint64_t seed, uint32_t client, int64_t n, const ClientShift& shift) {
    std::vector<VolumeSample> shard;
    for (int64_t k = 0; k < n; ++k) {
        Rng rng = data_stream(seed, client, static_cast<uint64_t>(k));
        shard.push_back(generate_sample(shift, 8, 2, rng));
    }
    return shard;
}

FederationData two_client_data(uint64_t seed, int64_t per_client) {
    FederationData data;
    data.shards.push_back(make_shard(seed, 0, per_client, small_shift(0.8, -0.1)));
    data.shards.push_back(make_shard(seed, 1, per_client, small_shift(1.2, 0.1)));
    data.eval_set = make_shard(seed, 0xFFFFFFFF, 3, small_shift(1.0, 0.0));
    return data;
}

ClientUpdate make_update(uint32_t id, uint32_t count, std::vector<double> params) {
    ClientUpdate u;
    u.client_id = id;
    u.sample_count = count;
    u.stat_width = 2;
    u.params = std::move(params);
    u.layer_stats.resize(1);
    u.layer_stats[0].mu_bar = {0.0, 0.0};
    u.layer_stats[0].sigma_bar = {1.0, 1.0};
    return u;
}

GlobalBroadcast zero_broadcast(const NetworkConfig& netcfg, const std::vector<double>& params, uint32_t round) {
    const auto& ch = netcfg.encoder_channels;
    GlobalBroadcast b;
    b.round = round;
    b.stat_width = static_cast<uint32_t>(*std::max_element(ch.begin(), ch.end()));
    b.params = params;
    for (size_t l = 0; l < ch.size(); ++l) {
        PrototypeVariance pv(static_cast<int64_t>(b.stat_width));
        b.layer_variances.push_back(pv);
    }
    return b;
}

FedConfig fast_config(int64_t rounds) {
    FedConfig cfg;
    cfg.num_clients = 2;
    cfg.rounds = rounds;
    cfg.local_epochs = 1;
    cfg.batch_size = 2;
    cfg.lr0 = 1e-3;
    return cfg;
}

TEST(Aggregate, MatchesDocumentedExamples) {
    const std::vector<ClientUpdate> even = {make_update(0, 1, {1.0}), make_update(1, 1, {3.0})};
    EXPECT_EQ(aggregate_weights(even), std::vector<double>{2.0});

    const std::vector<ClientUpdate> weighted = {make_update(0, 1, {0.0}), make_update(1, 3, {4.0})};
    EXPECT_EQ(aggregate_weights(weighted), std::vector<double>{3.0});
}

TEST(Aggregate, SingleClientPassesThroughBitExactly) {
    const std::vector<double> params = {0.1, -2.7, 1e-300, 3.14159};
    const std::vector<double> out = aggregate_weights({make_update(7, 5, params)});
    ASSERT_EQ(out.size(), params.size());
    for (size_t i = 0; i < params.size(); ++i) {
        EXPECT_EQ(std::memcmp(&out[i], &params[i], sizeof(double)), 0) << "component " << i;
    }
}

TEST(Aggregate, MatchesBruteForceWeightedMean) {
    Rng rng(99);
    for (int inst = 0; inst < 50; ++inst) {
        const size_t N = 1 + rng.next_below(5);
        const size_t P = 1 + rng.next_below(8);
        std::vector<ClientUpdate> updates;
        for (size_t i = 0; i < N; ++i) {
            std::vector<double> params;
            for (size_t j = 0; j < P; ++j) params.push_back(rng.next_uniform(-5.0, 5.0));
            updates.push_back(make_update(static_cast<uint32_t>(i), 1 + static_cast<uint32_t>(rng.next_below(9)),
                                          std::move(params)));
        }
        const std::vector<double> got = aggregate_weights(updates);

        double total = 0.0;
        for (const auto& u : updates) total += u.sample_count;
        for (size_t j = 0; j < P; ++j) {
            double expect = 0.0;
            for (const auto& u : updates) expect += u.params[j] * (u.sample_count / total);
            EXPECT_NEAR(got[j], expect, 1e-15 * std::max(1.0, std::abs(expect)));
        }
    }
}

TEST(Aggregate, InvariantUnderUpdateOrder) {
    Rng rng(7);
    std::vector<ClientUpdate> updates;
    for (uint32_t i = 0; i < 4; ++i) {
        std::vector<double> params;
        for (int j = 0; j < 6; ++j) params.push_back(rng.next_uniform(-1.0, 1.0));
        updates.push_back(make_update(i, i + 1, std::move(params)));
    }
    const std::vector<double> sorted_result = aggregate_weights(updates);
    std::reverse(updates.begin(), updates.end());
    EXPECT_EQ(aggregate_weights(updates), sorted_result);
    std::swap(updates[0], updates[2]);
    EXPECT_EQ(aggregate_weights(updates), sorted_result);
}

TEST(Aggregate, RejectsMalformedInputs) {
    EXPECT_THROW(aggregate_weights({}), std::invalid_argument);
    EXPECT_THROW(aggregate_weights({make_update(0, 1, {1.0}), make_update(0, 1, {2.0})}), std::invalid_argument);
    EXPECT_THROW(aggregate_weights({make_update(0, 1, {1.0}), make_update(1, 1, {1.0, 2.0})}),
                 std::invalid_argument);
}

TEST(GlobalVariance, MatchesDocumentedExamples) {
    std::vector<LayerStats> two(2);
    two[0].mu_bar = {1.0};
    two[0].sigma_bar = {2.0};
    two[1].mu_bar = {3.0};
    two[1].sigma_bar = {2.0};
    const PrototypeVariance v = global_stat_variance(two);
    EXPECT_DOUBLE_EQ(v.var_mu[0], 1.0);   // mean 2, ((-1)^2 + 1^2)/2
    EXPECT_DOUBLE_EQ(v.var_sigma[0], 0.0);

    std::vector<LayerStats> one(1);
    one[0].mu_bar = {4.2, -1.0};
    one[0].sigma_bar = {0.3, 9.9};
    const PrototypeVariance single = global_stat_variance(one);
    EXPECT_TRUE(single.all_zero());

    std::vector<LayerStats> same(3, two[0]);
    EXPECT_TRUE(global_stat_variance(same).all_zero());
}

TEST(GlobalVariance, MatchesScalarLoopOracle) {
    Rng rng(31);
    for (int inst = 0; inst < 50; ++inst) {
        const size_t N = 1 + rng.next_below(6);
        const size_t C = 1 + rng.next_below(5);
        std::vector<LayerStats> rows(N);
        for (auto& r : rows) {
            for (size_t c = 0; c < C; ++c) {
                r.mu_bar.push_back(rng.next_uniform(-3.0, 3.0));
                r.sigma_bar.push_back(rng.next_uniform(0.1, 2.0));
            }
        }
        const PrototypeVariance got = global_stat_variance(rows);
        for (size_t c = 0; c < C; ++c) {
            double mm = 0.0, ms = 0.0;
            for (const auto& r : rows) {
                mm += r.mu_bar[c];
                ms += r.sigma_bar[c];
            }
            mm /= N;
            ms /= N;
            double vm = 0.0, vs = 0.0;
            for (const auto& r : rows) {
                vm += (r.mu_bar[c] - mm) * (r.mu_bar[c] - mm);
                vs += (r.sigma_bar[c] - ms) * (r.sigma_bar[c] - ms);
            }
            vm /= N;
            vs /= N;
            EXPECT_NEAR(got.var_mu[c], vm, 1e-15 * std::max(1.0, vm));
            EXPECT_NEAR(got.var_sigma[c], vs, 1e-15 * std::max(1.0, vs));
        }
    }
}

TEST(GlobalVariance, RejectsChannelMismatch) {
    std::vector<LayerStats> rows(2);
    rows[0].mu_bar = {1.0, 2.0};
    rows[0].sigma_bar = {1.0, 1.0};
    rows[1].mu_bar = {1.0};
    rows[1].sigma_bar = {1.0};
    EXPECT_THROW(global_stat_variance(rows), std::invalid_argument);
    EXPECT_THROW(global_stat_variance({}), std::invalid_argument);
}

TEST(Schedule, PolyDecayMatchesClosedForm) {
    FedConfig cfg;
    cfg.lr0 = 5e-4;
    cfg.rounds = 10;
    cfg.poly_power = 0.9;
    EXPECT_DOUBLE_EQ(poly_lr(cfg, 0), 5e-4);
    EXPECT_DOUBLE_EQ(poly_lr(cfg, 4), 5e-4 * std::pow(0.6, 0.9));
    EXPECT_DOUBLE_EQ(poly_lr(cfg, 9), 5e-4 * std::pow(0.1, 0.9));
    EXPECT_GT(poly_lr(cfg, 9), 0.0);
    EXPECT_THROW(poly_lr(cfg, -1), std::invalid_argument);
    EXPECT_THROW(poly_lr(cfg, 10), std::invalid_argument);
}

TEST(LocalRound, ZeroLocalEpochsReturnsBroadcastParamsBitExactly) {
    const NetworkConfig netcfg = tiny_config();
    FedConfig cfg = fast_config(3);
    cfg.num_clients = 1;
    cfg.local_epochs = 0;
    const auto shard = make_shard(11, 0, 2, small_shift(1.0, 0.0));

    Rng init = init_stream(11);
    const Network reference = build_network(netcfg, init);
    const GlobalBroadcast broadcast = zero_broadcast(netcfg, reference.param_vector(), 1);

    ClientState client = make_client(0, netcfg);
    const ClientUpdate update = client_local_round(client, broadcast, shard, cfg, 11);
    EXPECT_EQ(update.params, broadcast.params);
    EXPECT_EQ(update.sample_count, 2u);
    for (const LayerStats& ls : update.layer_stats) {
        for (double v : ls.mu_bar) EXPECT_EQ(v, 0.0);
        for (double v : ls.sigma_bar) EXPECT_EQ(v, 0.0);
    }
    EXPECT_EQ(client.next_round, 1);
}

TEST(LocalRound, RepeatedCallsAreBitIdentical) {
    const NetworkConfig netcfg = tiny_config();
    FedConfig cfg = fast_config(3);
    const auto shard = make_shard(12, 0, 4, small_shift(0.9, 0.05));
    Rng init = init_stream(12);
    const Network reference = build_network(netcfg, init);
    const GlobalBroadcast broadcast = zero_broadcast(netcfg, reference.param_vector(), 1);

    ClientState a = make_client(0, netcfg);
    ClientState b = make_client(0, netcfg);
    const ClientUpdate ua = client_local_round(a, broadcast, shard, cfg, 12);
    const ClientUpdate ub = client_local_round(b, broadcast, shard, cfg, 12);
    EXPECT_EQ(serialize_update(ua), serialize_update(ub));
}

TEST(LocalRound, TrainingActuallyMovesParameters) {
    const NetworkConfig netcfg = tiny_config();
    const FedConfig cfg = fast_config(3);
    const auto shard = make_shard(13, 0, 4, small_shift(1.0, 0.0));
    Rng init = init_stream(13);
    const Network reference = build_network(netcfg, init);
    const GlobalBroadcast broadcast = zero_broadcast(netcfg, reference.param_vector(), 1);

    ClientState client = make_client(0, netcfg);
    LocalRoundReport report;
    const ClientUpdate update = client_local_round(client, broadcast, shard, cfg, 13, &report);
    EXPECT_NE(update.params, broadcast.params);
    EXPECT_EQ(report.steps, 2);  // 4 samples, batches of 2, one epoch
    EXPECT_GT(report.mean_ce, 0.0);
    EXPECT_GT(report.mean_dice, 0.0);
}

TEST(LocalRound, ReplacedAugmentationUploadsZeroStats) {
    const NetworkConfig netcfg = tiny_config();
    const auto shard = make_shard(14, 0, 4, small_shift(1.0, 0.0));
    Rng init = init_stream(14);
    const Network reference = build_network(netcfg, init);
    const GlobalBroadcast broadcast = zero_broadcast(netcfg, reference.param_vector(), 1);

    for (const bool use_mixup : {false, true}) {
        FedConfig cfg = fast_config(3);
        cfg.no_vfda = !use_mixup;
        cfg.mixup_baseline = use_mixup;
        ClientState client = make_client(0, netcfg);
        const ClientUpdate update = client_local_round(client, broadcast, shard, cfg, 14);
        for (size_t l = 0; l < update.layer_stats.size(); ++l) {
            for (double v : update.layer_stats[l].mu_bar) EXPECT_EQ(v, 0.0);
            for (double v : update.layer_stats[l].sigma_bar) EXPECT_EQ(v, 0.0);
            EXPECT_FALSE(client.net.vfda_layers[l].momentum.initialized);
        }
    }
}

TEST(LocalRound, MomentumChoiceChangesUploadedStatsButNotParameters) {
    const NetworkConfig netcfg = tiny_config();
    const auto shard = make_shard(15, 0, 4, small_shift(1.0, 0.0));
    Rng init = init_stream(15);
    const Network reference = build_network(netcfg, init);
    const GlobalBroadcast broadcast = zero_broadcast(netcfg, reference.param_vector(), 1);

    FedConfig with_momentum = fast_config(3);
    FedConfig without_momentum = fast_config(3);
    without_momentum.no_emd = true;

    ClientState a = make_client(0, netcfg);
    ClientState b = make_client(0, netcfg);
    const ClientUpdate ua = client_local_round(a, broadcast, shard, with_momentum, 15);
    const ClientUpdate ub = client_local_round(b, broadcast, shard, without_momentum, 15);

    EXPECT_EQ(ua.params, ub.params);  // accumulation only affects uploads
    bool any_diff = false;
    for (size_t l = 0; l < ua.layer_stats.size(); ++l) {
        if (ua.layer_stats[l].mu_bar != ub.layer_stats[l].mu_bar ||
            ua.layer_stats[l].sigma_bar != ub.layer_stats[l].sigma_bar) {
            any_diff = true;
        }
    }
    EXPECT_TRUE(any_diff);
}

TEST(LocalRound, RejectsRoundMismatchAndEmptyShard) {
    const NetworkConfig netcfg = tiny_config();
    const FedConfig cfg = fast_config(3);
    const auto shard = make_shard(16, 0, 2, small_shift(1.0, 0.0));
    Rng init = init_stream(16);
    const Network reference = build_network(netcfg, init);

    ClientState client = make_client(0, netcfg);
    const GlobalBroadcast wrong_round = zero_broadcast(netcfg, reference.param_vector(), 2);
    EXPECT_THROW(client_local_round(client, wrong_round, shard, cfg, 16), std::invalid_argument);

    const GlobalBroadcast ok = zero_broadcast(netcfg, reference.param_vector(), 1);
    EXPECT_THROW(client_local_round(client, ok, {}, cfg, 16), std::invalid_argument);
}

TEST(Federation, RunsAreDeterministic) {
    const NetworkConfig netcfg = tiny_config();
    const FedConfig cfg = fast_config(2);
    const FederationData data = two_client_data(21, 4);

    const FederationResult a = run_federation(cfg, netcfg, data, 21);
    const FederationResult b = run_federation(cfg, netcfg, data, 21);
    ASSERT_EQ(a.logs.size(), 2u);
    EXPECT_EQ(a.final_params, b.final_params);
    for (size_t r = 0; r < a.logs.size(); ++r) {
        EXPECT_EQ(a.logs[r].round, static_cast<int64_t>(r + 1));
        EXPECT_EQ(a.logs[r].dice_foreground, b.logs[r].dice_foreground);
        for (size_t i = 0; i < a.logs[r].clients.size(); ++i) {
            EXPECT_EQ(a.logs[r].clients[i].loss_ce, b.logs[r].clients[i].loss_ce);
            EXPECT_EQ(a.logs[r].clients[i].loss_dice, b.logs[r].clients[i].loss_dice);
        }
    }

    const FederationResult c = run_federation(cfg, netcfg, data, 22);
    EXPECT_NE(a.final_params, c.final_params);
}

TEST(Federation, AggregateInvariantUnderClientExecutionOrder) {
    const NetworkConfig netcfg = tiny_config();
    const FedConfig cfg = fast_config(1);
    const FederationData data = two_client_data(23, 4);
    Rng init = init_stream(23);
    const Network reference = build_network(netcfg, init);
    const GlobalBroadcast broadcast = zero_broadcast(netcfg, reference.param_vector(), 1);

    auto run_order = [&](const std::vector<uint32_t>& order) {
        std::vector<ClientUpdate> updates;
        for (uint32_t id : order) {
            ClientState client = make_client(id, netcfg);
            updates.push_back(
                client_local_round(client, broadcast, data.shards[id], cfg, 23));
        }
        std::sort(updates.begin(), updates.end(),
                  [](const ClientUpdate& a, const ClientUpdate& b) { return a.client_id < b.client_id; });
        std::vector<LayerStats> layer0;
        for (const auto& u : updates) layer0.push_back(u.layer_stats[0]);
        return std::make_pair(aggregate_weights(updates), global_stat_variance(layer0));
    };

    const auto forward_order = run_order({0, 1});
    const auto reverse_order = run_order({1, 0});
    EXPECT_EQ(forward_order.first, reverse_order.first);
    EXPECT_EQ(forward_order.second.var_mu, reverse_order.second.var_mu);
    EXPECT_EQ(forward_order.second.var_sigma, reverse_order.second.var_sigma);
}

// With one institute the cross-institute variances are identically zero, so
// the augmentation degenerates to the identity and the whole protocol must
// reproduce plain seeded SGD on the single shard, bit for bit.
TEST(Federation, SingleClientEqualsPlainLocalSgd) {
    const NetworkConfig netcfg = tiny_config();
    FedConfig cfg = fast_config(3);
    cfg.num_clients = 1;

    FederationData data;
    data.shards.push_back(make_shard(31, 0, 4, small_shift(1.0, 0.0)));
    data.eval_set = make_shard(31, 0xFFFFFFFF, 2, small_shift(1.0, 0.0));

    const FederationResult with_vfda = run_federation(cfg, netcfg, data, 31);
    for (const PrototypeVariance& pv : with_vfda.final_state.global_variances) {
        EXPECT_TRUE(pv.all_zero());
    }

    FedConfig disabled = cfg;
    disabled.no_vfda = true;
    const FederationResult without_vfda = run_federation(disabled, netcfg, data, 31);
    EXPECT_EQ(with_vfda.final_params, without_vfda.final_params);

    // Independent restatement: one model, three rounds of seeded SGD.
    Rng init = init_stream(31);
    Network net = build_network(netcfg, init);
    for (int64_t r0 = 0; r0 < cfg.rounds; ++r0) {
        VfdaTrainOptions opts;
        opts.round = r0;
        opts.disabled = true;
        Rng shuffle_rng = shuffle_stream(31, 0, static_cast<uint64_t>(r0));
        Rng flip_rng = flip_stream(31, 0, static_cast<uint64_t>(r0));
        Rng eps_rng = eps_stream(31, 0, static_cast<uint64_t>(r0));
        const double lr = poly_lr(cfg, r0);
        const std::vector<size_t> perm = shuffle_rng.permutation(data.shards[0].size());
        for (size_t start = 0; start < perm.size(); start += static_cast<size_t>(cfg.batch_size)) {
            const size_t stop = std::min(perm.size(), start + static_cast<size_t>(cfg.batch_size));
            std::vector<VolumeSample> picked;
            for (size_t i = start; i < stop; ++i) {
                picked.push_back(random_flip(data.shards[0][perm[i]], flip_rng));
            }
            const int64_t B = static_cast<int64_t>(picked.size());
            const int64_t D = picked[0].volume.dim(2);
            Batch batch{Tensor({B, 1, D, D, D}), LabelArray({B, D, D, D})};
            for (int64_t b = 0; b < B; ++b) {
                std::copy(picked[static_cast<size_t>(b)].volume.data.begin(),
                          picked[static_cast<size_t>(b)].volume.data.end(),
                          batch.volumes.data.begin() + b * D * D * D);
                std::copy(picked[static_cast<size_t>(b)].label.data.begin(),
                          picked[static_cast<size_t>(b)].label.data.end(),
                          batch.labels.data.begin() + b * D * D * D);
            }
            train_step(net, batch, lr, LossWeights{}, opts, eps_rng);
        }
    }
    EXPECT_EQ(net.param_vector(), with_vfda.final_params);
}

TEST(Federation, SecondRoundActuallyUsesBroadcastVariances) {
    const NetworkConfig netcfg = tiny_config();
    const FederationData data = two_client_data(33, 4);

    FedConfig cfg = fast_config(2);
    const FederationResult augmented = run_federation(cfg, netcfg, data, 33);

    FedConfig disabled = cfg;
    disabled.no_vfda = true;
    const FederationResult plain = run_federation(disabled, netcfg, data, 33);

    // Round 1 trains under zero variances either way; from round 2 the
    // heterogeneous institutes produce nonzero variances and the sampled
    // statistics perturb training.
    EXPECT_FALSE(augmented.final_state.global_variances[0].all_zero());
    EXPECT_NE(augmented.final_params, plain.final_params);
}

TEST(Federation, CheckpointResumeReproducesStraightRun) {
    const NetworkConfig netcfg = tiny_config();
    const FederationData data = two_client_data(41, 4);

    const FederationResult straight = run_federation(fast_config(3), netcfg, data, 41);

    const FederationResult segment1 = run_federation(fast_config(1), netcfg, data, 41);
    EXPECT_EQ(segment1.final_state.next_round, 1u);
    const FederationResult resumed =
        run_federation(fast_config(3), netcfg, data, 41, &segment1.final_state);

    ASSERT_EQ(resumed.logs.size(), 2u);
    EXPECT_EQ(resumed.logs[0].round, 2);
    EXPECT_EQ(resumed.logs[1].round, 3);
    EXPECT_EQ(resumed.final_params, straight.final_params);
    EXPECT_EQ(resumed.logs[1].dice_foreground, straight.logs[2].dice_foreground);

    const Checkpoint& a = resumed.final_state;
    const Checkpoint& b = straight.final_state;
    EXPECT_EQ(a.next_round, b.next_round);
    EXPECT_EQ(a.global_params, b.global_params);
    ASSERT_EQ(a.client_momentum.size(), b.client_momentum.size());
    for (size_t i = 0; i < a.client_momentum.size(); ++i) {
        for (size_t l = 0; l < a.client_momentum[i].size(); ++l) {
            EXPECT_EQ(a.client_momentum[i][l].mu_bar, b.client_momentum[i][l].mu_bar);
            EXPECT_EQ(a.client_momentum[i][l].sigma_bar, b.client_momentum[i][l].sigma_bar);
            EXPECT_EQ(a.client_momentum[i][l].initialized, b.client_momentum[i][l].initialized);
            EXPECT_EQ(a.client_momentum[i][l].round_of_last_update, b.client_momentum[i][l].round_of_last_update);
        }
    }
    for (size_t l = 0; l < a.global_variances.size(); ++l) {
        EXPECT_EQ(a.global_variances[l].var_mu, b.global_variances[l].var_mu);
        EXPECT_EQ(a.global_variances[l].var_sigma, b.global_variances[l].var_sigma);
    }
}

TEST(Federation, ChainedSingleRoundResumptionsMatchOneTwoRoundRun) {
    const NetworkConfig netcfg = tiny_config();
    const FederationData data = two_client_data(43, 4);

    const FederationResult segment1 = run_federation(fast_config(1), netcfg, data, 43);
    const FederationResult segment2 =
        run_federation(fast_config(2), netcfg, data, 43, &segment1.final_state);
    const FederationResult straight = run_federation(fast_config(2), netcfg, data, 43);

    EXPECT_EQ(segment2.final_params, straight.final_params);
    ASSERT_EQ(segment2.logs.size(), 1u);
    EXPECT_EQ(segment2.logs[0].dice_foreground, straight.logs[1].dice_foreground);
}

TEST(Federation, ResumeValidatesCheckpointCompatibility) {
    const NetworkConfig netcfg = tiny_config();
    const FederationData data = two_client_data(47, 2);
    const FederationResult segment = run_federation(fast_config(1), netcfg, data, 47);

    Checkpoint wrong_seed = segment.final_state;
    wrong_seed.seed = 48;
    EXPECT_THROW(run_federation(fast_config(2), netcfg, data, 47, &wrong_seed), std::invalid_argument);

    Checkpoint wrong_clients = segment.final_state;
    wrong_clients.client_momentum.pop_back();
    EXPECT_THROW(run_federation(fast_config(2), netcfg, data, 47, &wrong_clients), std::invalid_argument);

    Checkpoint wrong_params = segment.final_state;
    wrong_params.global_params.pop_back();
    EXPECT_THROW(run_federation(fast_config(2), netcfg, data, 47, &wrong_params), std::invalid_argument);

    Checkpoint too_far = segment.final_state;
    too_far.next_round = 5;
    EXPECT_THROW(run_federation(fast_config(2), netcfg, data, 47, &too_far), std::invalid_argument);
}

TEST(Federation, RejectsMismatchedDataLayout) {
    const NetworkConfig netcfg = tiny_config();
    const FedConfig cfg = fast_config(1);
    FederationData data = two_client_data(49, 2);

    FederationData missing_shard = data;
    missing_shard.shards.pop_back();
    EXPECT_THROW(run_federation(cfg, netcfg, missing_shard, 49), std::invalid_argument);

    FederationData empty_shard = data;
    empty_shard.shards[1].clear();
    EXPECT_THROW(run_federation(cfg, netcfg, empty_shard, 49), std::invalid_argument);

    FederationData no_eval = data;
    no_eval.eval_set.clear();
    EXPECT_THROW(run_federation(cfg, netcfg, no_eval, 49), std::invalid_argument);
}

TEST(Checkpoint, FileRoundTripIsBitExact) {
    Checkpoint ckpt;
    ckpt.seed = 0xDEADBEEFCAFE1234ull;
    ckpt.next_round = 7;
    ckpt.global_params = {1.5, -2.25, 1e-300, 0.0};
    ckpt.global_variances.emplace_back(2);
    ckpt.global_variances[0].var_mu = {0.1, 0.2};
    ckpt.global_variances[0].var_sigma = {0.3, 0.4};
    ckpt.global_variances.emplace_back(3);
    ckpt.global_variances[1].var_mu = {0.5, 0.6, 0.7};
    ckpt.global_variances[1].var_sigma = {0.8, 0.9, 1.0};
    ckpt.client_momentum.resize(2);
    for (size_t i = 0; i < 2; ++i) {
        MomentumStats m0(2);
        m0.mu_bar = {1.0 + static_cast<double>(i), 2.0};
        m0.sigma_bar = {3.0, 4.0};
        m0.initialized = (i == 0);
        m0.round_of_last_update = static_cast<int64_t>(i) * 5 - 1;
        MomentumStats m1(3);
        m1.mu_bar = {5.0, 6.0, 7.0};
        m1.sigma_bar = {8.0, 9.0, 10.0 + static_cast<double>(i)};
        m1.initialized = true;
        m1.round_of_last_update = 3;
        ckpt.client_momentum[i] = {m0, m1};
    }

    const std::vector<uint8_t> bytes = encode_checkpoint(ckpt);
    const Checkpoint back = decode_checkpoint(bytes, "test");
    EXPECT_EQ(back.seed, ckpt.seed);
    EXPECT_EQ(back.next_round, ckpt.next_round);
    EXPECT_EQ(back.global_params, ckpt.global_params);
    ASSERT_EQ(back.global_variances.size(), 2u);
    for (size_t l = 0; l < 2; ++l) {
        EXPECT_EQ(back.global_variances[l].var_mu, ckpt.global_variances[l].var_mu);
        EXPECT_EQ(back.global_variances[l].var_sigma, ckpt.global_variances[l].var_sigma);
    }
    ASSERT_EQ(back.client_momentum.size(), 2u);
    for (size_t i = 0; i < 2; ++i) {
        for (size_t l = 0; l < 2; ++l) {
            EXPECT_EQ(back.client_momentum[i][l].mu_bar, ckpt.client_momentum[i][l].mu_bar);
            EXPECT_EQ(back.client_momentum[i][l].sigma_bar, ckpt.client_momentum[i][l].sigma_bar);
            EXPECT_EQ(back.client_momentum[i][l].initialized, ckpt.client_momentum[i][l].initialized);
            EXPECT_EQ(back.client_momentum[i][l].round_of_last_update,
                      ckpt.client_momentum[i][l].round_of_last_update);
        }
    }
    EXPECT_EQ(encode_checkpoint(back), bytes);

    const std::string path = testing::TempDir() + "roundtrip.fvc";
    save_checkpoint(path, ckpt);
    const Checkpoint loaded = load_checkpoint(path);
    EXPECT_EQ(encode_checkpoint(loaded), bytes);
}

TEST(Checkpoint, CorruptionIsDistinctlyReported) {
    Checkpoint ckpt;
    ckpt.seed = 5;
    ckpt.next_round = 1;
    ckpt.global_params = {1.0, 2.0};
    ckpt.global_variances.emplace_back(2);
    ckpt.client_momentum = {{MomentumStats(2)}};
    const std::vector<uint8_t> bytes = encode_checkpoint(ckpt);

    std::vector<uint8_t> bad_magic = bytes;
    bad_magic[0] = 'X';
    EXPECT_THROW(decode_checkpoint(bad_magic, "t"), BadMagicError);

    std::vector<uint8_t> bad_version = bytes;
    bad_version[4] = 0x7F;
    EXPECT_THROW(decode_checkpoint(bad_version, "t"), VersionMismatchError);

    std::vector<uint8_t> truncated(bytes.begin(), bytes.end() - 3);
    EXPECT_THROW(decode_checkpoint(truncated, "t"), TruncationError);

    std::vector<uint8_t> trailing = bytes;
    trailing.push_back(0);
    EXPECT_THROW(decode_checkpoint(trailing, "t"), WireError);

    std::vector<uint8_t> huge_clients = bytes;
    // client count lives after magic(4) + version(2) + seed(8) + round(4)
    huge_clients[18] = 0xFF;
    huge_clients[19] = 0xFF;
    huge_clients[20] = 0xFF;
    huge_clients[21] = 0x7F;
    EXPECT_THROW(decode_checkpoint(huge_clients, "t"), RangeError);
}

}  // namespace
}  // namespace vfda
