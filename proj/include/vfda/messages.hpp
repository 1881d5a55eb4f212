#pragma once

#include "vfda/stats.hpp"
#include "vfda/wire.hpp"

namespace vfda {

// The two message types the protocol exchanges, and their binary form:
// magic "FVM1", version u16 LE, kind u8 (1 = update, 2 = broadcast),
// little-endian u32 counts, then 64-bit LE float payloads in declared
// order.  Messages carry model parameters and channel statistics only —
// there is no field through which voxel data or labels could travel.
//
// Per-layer statistic vectors are carried at one uniform width C (the
// widest layer's channel count); narrower layers are zero-padded.  Both
// ends know the true per-layer widths from the network config.

inline constexpr uint16_t kMessageVersion = 1;
inline constexpr uint8_t kKindUpdate = 1;
inline constexpr uint8_t kKindBroadcast = 2;

inline constexpr uint32_t kMaxLayers = 64;
inline constexpr uint32_t kMaxStatWidth = 1u << 16;
inline constexpr uint32_t kMaxParamLen = 1u << 28;

/// One encoder level's accumulated statistics as uploaded by a client.
struct LayerStats {
    std::vector<double> mu_bar;
    std::vector<double> sigma_bar;
};

struct ClientUpdate {
    uint32_t client_id = 0;
    uint32_t sample_count = 0;
    uint32_t stat_width = 0;  // uniform padded width of every stat vector
    std::vector<double> params;
    std::vector<LayerStats> layer_stats;

    void validate() const {
        if (sample_count < 1) throw std::invalid_argument("client update: sample_count must be >= 1");
        for (size_t l = 0; l < layer_stats.size(); ++l) {
            if (layer_stats[l].mu_bar.size() != stat_width || layer_stats[l].sigma_bar.size() != stat_width) {
                throw std::invalid_argument("client update: layer " + std::to_string(l) +
                                            " stat vectors must all have width " + std::to_string(stat_width));
            }
        }
    }
};

struct GlobalBroadcast {
    uint32_t round = 0;  // 1-based round the receiver is about to run
    uint32_t stat_width = 0;
    std::vector<double> params;
    std::vector<PrototypeVariance> layer_variances;

    void validate() const {
        for (size_t l = 0; l < layer_variances.size(); ++l) {
            const auto& v = layer_variances[l];
            if (v.var_mu.size() != stat_width || v.var_sigma.size() != stat_width) {
                throw std::invalid_argument("broadcast: layer " + std::to_string(l) +
                                            " variance vectors must all have width " + std::to_string(stat_width));
            }
            for (size_t c = 0; c < v.var_mu.size(); ++c) {
                if (!(v.var_mu[c] >= 0.0) || !(v.var_sigma[c] >= 0.0)) {
                    throw std::invalid_argument("broadcast: negative variance at layer " + std::to_string(l) +
                                                " channel " + std::to_string(c));
                }
            }
        }
    }
};

inline size_t update_message_size(size_t param_len, size_t layers, size_t stat_width) {
    return 27 + 8 * (param_len + 2 * layers * stat_width);
}

inline size_t broadcast_message_size(size_t param_len, size_t layers, size_t stat_width) {
    return 23 + 8 * (param_len + 2 * layers * stat_width);
}

inline std::vector<uint8_t> serialize_update(const ClientUpdate& u) {
    u.validate();
    std::vector<uint8_t> out;
    out.reserve(update_message_size(u.params.size(), u.layer_stats.size(), u.stat_width));
    wire::put_magic(out, "FVM1");
    wire::put_u16(out, kMessageVersion);
    wire::put_u8(out, kKindUpdate);
    wire::put_u32(out, u.client_id);
    wire::put_u32(out, static_cast<uint32_t>(u.layer_stats.size()));
    wire::put_u32(out, u.stat_width);
    wire::put_u32(out, static_cast<uint32_t>(u.params.size()));
    wire::put_u32(out, u.sample_count);
    for (double p : u.params) wire::put_f64(out, p);
    for (const LayerStats& ls : u.layer_stats) {
        for (double v : ls.mu_bar) wire::put_f64(out, v);
        for (double v : ls.sigma_bar) wire::put_f64(out, v);
    }
    return out;
}

inline std::vector<uint8_t> serialize_broadcast(const GlobalBroadcast& b) {
    b.validate();
    std::vector<uint8_t> out;
    out.reserve(broadcast_message_size(b.params.size(), b.layer_variances.size(), b.stat_width));
    wire::put_magic(out, "FVM1");
    wire::put_u16(out, kMessageVersion);
    wire::put_u8(out, kKindBroadcast);
    wire::put_u32(out, b.round);
    wire::put_u32(out, static_cast<uint32_t>(b.layer_variances.size()));
    wire::put_u32(out, b.stat_width);
    wire::put_u32(out, static_cast<uint32_t>(b.params.size()));
    for (double p : b.params) wire::put_f64(out, p);
    for (const PrototypeVariance& pv : b.layer_variances) {
        for (double v : pv.var_mu) wire::put_f64(out, v);
        for (double v : pv.var_sigma) wire::put_f64(out, v);
    }
    return out;
}

namespace detail {
inline uint8_t read_message_preamble(wire::Reader& r, const std::string& what) {
    r.expect_magic("FVM1");
    const uint16_t version = r.u16();
    if (version != kMessageVersion) {
        throw VersionMismatchError(what + ": version " + std::to_string(version) + ", expected " +
                                   std::to_string(kMessageVersion));
    }
    return r.u8();
}

inline void check_message_counts(uint32_t layers, uint32_t stat_width, uint32_t param_len, const std::string& what) {
    if (layers > kMaxLayers) throw RangeError(what + ": layer count " + std::to_string(layers) + " out of range");
    if (stat_width > kMaxStatWidth) {
        throw RangeError(what + ": stat width " + std::to_string(stat_width) + " out of range");
    }
    if (param_len > kMaxParamLen) {
        throw RangeError(what + ": parameter count " + std::to_string(param_len) + " out of range");
    }
}
}  // namespace detail

inline ClientUpdate deserialize_update(const std::vector<uint8_t>& bytes) {
    const std::string what = "client update message";
    wire::Reader r(bytes, what);
    const uint8_t kind = detail::read_message_preamble(r, what);
    if (kind != kKindUpdate) {
        throw WireError(what + ": kind " + std::to_string(int(kind)) + ", expected " + std::to_string(kKindUpdate));
    }
    ClientUpdate u;
    u.client_id = r.u32();
    const uint32_t layers = r.u32();
    u.stat_width = r.u32();
    const uint32_t param_len = r.u32();
    u.sample_count = r.u32();
    detail::check_message_counts(layers, u.stat_width, param_len, what);

    r.need(8 * (static_cast<size_t>(param_len) + 2 * static_cast<size_t>(layers) * u.stat_width));
    u.params.resize(param_len);
    for (auto& p : u.params) p = r.f64();
    u.layer_stats.resize(layers);
    for (auto& ls : u.layer_stats) {
        ls.mu_bar.resize(u.stat_width);
        ls.sigma_bar.resize(u.stat_width);
        for (auto& v : ls.mu_bar) v = r.f64();
        for (auto& v : ls.sigma_bar) v = r.f64();
    }
    r.expect_end();
    u.validate();
    return u;
}

inline GlobalBroadcast deserialize_broadcast(const std::vector<uint8_t>& bytes) {
    const std::string what = "broadcast message";
    wire::Reader r(bytes, what);
    const uint8_t kind = detail::read_message_preamble(r, what);
    if (kind != kKindBroadcast) {
        throw WireError(what + ": kind " + std::to_string(int(kind)) + ", expected " +
                        std::to_string(kKindBroadcast));
    }
    GlobalBroadcast b;
    b.round = r.u32();
    const uint32_t layers = r.u32();
    b.stat_width = r.u32();
    const uint32_t param_len = r.u32();
    detail::check_message_counts(layers, b.stat_width, param_len, what);

    r.need(8 * (static_cast<size_t>(param_len) + 2 * static_cast<size_t>(layers) * b.stat_width));
    b.params.resize(param_len);
    for (auto& p : b.params) p = r.f64();
    b.layer_variances.assign(layers, PrototypeVariance(static_cast<int64_t>(b.stat_width)));
    for (auto& pv : b.layer_variances) {
        for (auto& v : pv.var_mu) v = r.f64();
        for (auto& v : pv.var_sigma) v = r.f64();
    }
    r.expect_end();
    b.validate();
    return b;
}

}  // namespace vfda
