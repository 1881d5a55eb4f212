#pragma once

#include <cmath>
#include <cstdint>
#include <utility>

#include "vfda/rng.hpp"
#include "vfda/tensor.hpp"

namespace vfda {

// Channel-statistics augmentation core: batch-wise feature statistics, their
// local/global variances, momentum accumulation across rounds, and the
// renormalization transform that writes sampled statistics back onto a
// feature map.

/// Variance stabilizer inside the sigma root, and the floor for sampled
/// standard deviations (a Gaussian draw can go negative, a std cannot).
inline constexpr double kEpsVar = 1e-5;

/// Per-batch-element, per-channel spatial mean and standard deviation.
/// Also used for sampled statistic pairs, which share the layout.
struct ChannelStats {
    int64_t batch = 0;
    int64_t channels = 0;
    std::vector<double> mu;     // B x C row-major
    std::vector<double> sigma;  // B x C row-major, each >= sqrt(kEpsVar)

    ChannelStats() = default;
    ChannelStats(int64_t b, int64_t c)
        : batch(b), channels(c), mu(static_cast<size_t>(b * c), 0.0), sigma(static_cast<size_t>(b * c), 0.0) {}

    double& mu_at(int64_t b, int64_t c) { return mu[static_cast<size_t>(b * channels + c)]; }
    double& sigma_at(int64_t b, int64_t c) { return sigma[static_cast<size_t>(b * channels + c)]; }
    double mu_at(int64_t b, int64_t c) const { return mu[static_cast<size_t>(b * channels + c)]; }
    double sigma_at(int64_t b, int64_t c) const { return sigma[static_cast<size_t>(b * channels + c)]; }
};

/// Per-channel variance of a statistic, either local (over the batch axis)
/// or global (over the institute axis), and their product.
struct PrototypeVariance {
    std::vector<double> var_mu;
    std::vector<double> var_sigma;

    PrototypeVariance() = default;
    explicit PrototypeVariance(int64_t channels)
        : var_mu(static_cast<size_t>(channels), 0.0), var_sigma(static_cast<size_t>(channels), 0.0) {}

    static PrototypeVariance zeros(int64_t channels) { return PrototypeVariance(channels); }
    static PrototypeVariance ones(int64_t channels) {
        PrototypeVariance v(channels);
        std::fill(v.var_mu.begin(), v.var_mu.end(), 1.0);
        std::fill(v.var_sigma.begin(), v.var_sigma.end(), 1.0);
        return v;
    }

    int64_t channels() const { return static_cast<int64_t>(var_mu.size()); }

    bool all_zero() const {
        for (double v : var_mu)
            if (v != 0.0) return false;
        for (double v : var_sigma)
            if (v != 0.0) return false;
        return true;
    }
};

/// Momentum-accumulated per-channel statistics of one client and layer.
struct MomentumStats {
    std::vector<double> mu_bar;
    std::vector<double> sigma_bar;
    bool initialized = false;
    int64_t round_of_last_update = -1;

    MomentumStats() = default;
    explicit MomentumStats(int64_t channels)
        : mu_bar(static_cast<size_t>(channels), 0.0), sigma_bar(static_cast<size_t>(channels), 0.0) {}

    int64_t channels() const { return static_cast<int64_t>(mu_bar.size()); }
};

enum class Mode { train, eval };

/// Per-encoder-level augmentation state owned by one client.
struct VfdaLayerState {
    MomentumStats momentum;
    PrototypeVariance global_variance;  // received from the server
    bool enabled = true;
    Mode mode = Mode::eval;

    explicit VfdaLayerState(int64_t channels = 0)
        : momentum(channels), global_variance(PrototypeVariance::zeros(channels)) {}
};

/// Channel-wise spatial mean and stabilized standard deviation of a
/// (B, C, H, W, S) feature map.  sigma = sqrt(population variance + kEpsVar).
inline ChannelStats channel_stats(const Tensor& Z) {
    if (Z.rank() != 5) throw std::invalid_argument("channel_stats: expects rank 5, got " + Tensor::shape_str(Z.shape));
    const int64_t B = Z.dim(0), C = Z.dim(1);
    const int64_t V = Z.dim(2) * Z.dim(3) * Z.dim(4);
    if (V < 1) throw std::invalid_argument("channel_stats: empty spatial extent in " + Tensor::shape_str(Z.shape));
    ChannelStats st(B, C);
    const double* z = Z.ptr();
    for (int64_t bc = 0; bc < B * C; ++bc) {
        const double* slice = z + bc * V;
        double sum = 0.0;
        for (int64_t i = 0; i < V; ++i) sum += slice[i];
        const double mean = sum / static_cast<double>(V);
        double ss = 0.0;
        for (int64_t i = 0; i < V; ++i) {
            const double d = slice[i] - mean;
            ss += d * d;
        }
        st.mu[static_cast<size_t>(bc)] = mean;
        st.sigma[static_cast<size_t>(bc)] = std::sqrt(ss / static_cast<double>(V) + kEpsVar);
    }
    return st;
}

/// Per-channel population variance of mu and sigma over the batch axis.
inline PrototypeVariance local_stat_variance(const ChannelStats& stats) {
    const int64_t B = stats.batch, C = stats.channels;
    if (B < 1) throw std::invalid_argument("local_stat_variance: batch must be >= 1");
    PrototypeVariance out(C);
    for (int64_t c = 0; c < C; ++c) {
        double mean_mu = 0.0, mean_sigma = 0.0;
        for (int64_t b = 0; b < B; ++b) {
            mean_mu += stats.mu_at(b, c);
            mean_sigma += stats.sigma_at(b, c);
        }
        mean_mu /= static_cast<double>(B);
        mean_sigma /= static_cast<double>(B);
        double vm = 0.0, vs = 0.0;
        for (int64_t b = 0; b < B; ++b) {
            const double dm = stats.mu_at(b, c) - mean_mu;
            const double ds = stats.sigma_at(b, c) - mean_sigma;
            vm += dm * dm;
            vs += ds * ds;
        }
        out.var_mu[static_cast<size_t>(c)] = vm / static_cast<double>(B);
        out.var_sigma[static_cast<size_t>(c)] = vs / static_cast<double>(B);
    }
    return out;
}

/// Momentum factor eta = min(eta0 * exp(-round), 0.99).  The clamp keeps the
/// accumulator a convex combination in the early rounds where eta0 * exp(-r)
/// exceeds 1.
inline double emd_factor(int64_t round, double eta0) {
    if (round < 0) throw std::invalid_argument("emd_factor: round must be >= 0");
    if (eta0 <= 0.0) throw std::invalid_argument("emd_factor: eta0 must be > 0");
    return std::min(eta0 * std::exp(-static_cast<double>(round)), 0.99);
}

/// Momentum update with an explicit factor.  First update bootstraps the
/// accumulator to the batch mean.
inline void emd_update_with_factor(MomentumStats& state, const ChannelStats& stats, double eta) {
    const int64_t C = stats.channels, B = stats.batch;
    if (state.channels() != C) {
        throw std::invalid_argument("emd_update: channel mismatch, state C=" + std::to_string(state.channels()) +
                                    " vs stats C=" + std::to_string(C));
    }
    for (int64_t c = 0; c < C; ++c) {
        double m_mu = 0.0, m_sigma = 0.0;
        for (int64_t b = 0; b < B; ++b) {
            m_mu += stats.mu_at(b, c);
            m_sigma += stats.sigma_at(b, c);
        }
        m_mu /= static_cast<double>(B);
        m_sigma /= static_cast<double>(B);
        if (!state.initialized) {
            state.mu_bar[static_cast<size_t>(c)] = m_mu;
            state.sigma_bar[static_cast<size_t>(c)] = m_sigma;
        } else {
            state.mu_bar[static_cast<size_t>(c)] = (1.0 - eta) * m_mu + eta * state.mu_bar[static_cast<size_t>(c)];
            state.sigma_bar[static_cast<size_t>(c)] =
                (1.0 - eta) * m_sigma + eta * state.sigma_bar[static_cast<size_t>(c)];
        }
    }
    state.initialized = true;
}

inline void emd_update(MomentumStats& state, const ChannelStats& stats, int64_t round, double eta0) {
    emd_update_with_factor(state, stats, emd_factor(round, eta0));
    state.round_of_last_update = round;
}

/// Weight the local statistic variances by the institute-sharing ones:
/// elementwise product per channel.
inline PrototypeVariance combine_variance(const PrototypeVariance& local, const PrototypeVariance& global_) {
    if (local.channels() != global_.channels()) {
        throw std::invalid_argument("combine_variance: channel mismatch, " + std::to_string(local.channels()) +
                                    " vs " + std::to_string(global_.channels()));
    }
    PrototypeVariance out(local.channels());
    for (size_t c = 0; c < local.var_mu.size(); ++c) {
        out.var_mu[c] = local.var_mu[c] * global_.var_mu[c];
        out.var_sigma[c] = local.var_sigma[c] * global_.var_sigma[c];
    }
    return out;
}

/// Reparameterized draw of novel statistics: value + eps * sqrt(variance),
/// eps ~ N(0,1) independently per (b, c), interleaved mu then sigma.
/// Sampled sigmas are floored at sqrt(kEpsVar).
inline ChannelStats sample_statistics(const ChannelStats& stats, const PrototypeVariance& combined, Rng& rng) {
    if (combined.channels() != stats.channels) {
        throw std::invalid_argument("sample_statistics: channel mismatch, stats C=" + std::to_string(stats.channels) +
                                    " vs variance C=" + std::to_string(combined.channels()));
    }
    const double floor = std::sqrt(kEpsVar);
    ChannelStats out(stats.batch, stats.channels);
    for (int64_t b = 0; b < stats.batch; ++b) {
        for (int64_t c = 0; c < stats.channels; ++c) {
            const double s_mu = std::sqrt(combined.var_mu[static_cast<size_t>(c)]);
            const double s_sigma = std::sqrt(combined.var_sigma[static_cast<size_t>(c)]);
            out.mu_at(b, c) = stats.mu_at(b, c) + rng.next_normal() * s_mu;
            out.sigma_at(b, c) = std::max(stats.sigma_at(b, c) + rng.next_normal() * s_sigma, floor);
        }
    }
    return out;
}

struct VfdaCache {
    Tensor input;
    ChannelStats stats;    // original (mu, sigma)
    ChannelStats sampled;  // (mu_hat, sigma_hat)
    std::vector<uint8_t> identity;  // per (b, c): sampled == original bitwise
};

/// Renormalization augmentation: Z_hat = sigma_hat * (Z - mu) / sigma + mu_hat
/// per (b, c), broadcast over spatial dims.  Slices whose sampled statistics
/// equal the originals bitwise are copied through unchanged, so a zero
/// combined variance degenerates to the exact identity.
inline std::pair<Tensor, VfdaCache> vfda_forward(const Tensor& Z, const ChannelStats& mu_sigma_hat,
                                                 const ChannelStats& stats) {
    const int64_t B = Z.dim(0), C = Z.dim(1);
    const int64_t V = Z.dim(2) * Z.dim(3) * Z.dim(4);
    if (stats.batch != B || stats.channels != C || mu_sigma_hat.batch != B || mu_sigma_hat.channels != C) {
        throw std::invalid_argument("vfda_forward: stats do not match feature map " + Tensor::shape_str(Z.shape));
    }
    Tensor out(Z.shape);
    VfdaCache cache{Z, stats, mu_sigma_hat, std::vector<uint8_t>(static_cast<size_t>(B * C), 0)};
    const double* z = Z.ptr();
    double* o = out.ptr();
    for (int64_t bc = 0; bc < B * C; ++bc) {
        const double mu = stats.mu[static_cast<size_t>(bc)];
        const double sigma = stats.sigma[static_cast<size_t>(bc)];
        const double mu_hat = mu_sigma_hat.mu[static_cast<size_t>(bc)];
        const double sigma_hat = mu_sigma_hat.sigma[static_cast<size_t>(bc)];
        const double* zi = z + bc * V;
        double* oi = o + bc * V;
        if (mu_hat == mu && sigma_hat == sigma) {
            cache.identity[static_cast<size_t>(bc)] = 1;
            std::copy_n(zi, V, oi);
            continue;
        }
        const double scale = sigma_hat / sigma;
        for (int64_t i = 0; i < V; ++i) oi[i] = scale * (zi[i] - mu) + mu_hat;
    }
    return {std::move(out), std::move(cache)};
}

/// Gradient of the augmentation w.r.t. Z.  mu(Z) and sigma(Z) are
/// differentiated through; the eps draws and the variance estimates are
/// treated as round-level constants.  A sampled sigma that sat on the floor
/// contributes no gradient through its offset.
inline Tensor vfda_backward(const Tensor& grad_zhat, const VfdaCache& cache) {
    if (grad_zhat.shape != cache.input.shape) {
        throw std::invalid_argument("vfda_backward: grad shape " + Tensor::shape_str(grad_zhat.shape) +
                                    " does not match cached forward " + Tensor::shape_str(cache.input.shape));
    }
    const int64_t B = cache.input.dim(0), C = cache.input.dim(1);
    const int64_t V = cache.input.dim(2) * cache.input.dim(3) * cache.input.dim(4);
    const double n = static_cast<double>(V);
    const double floor = std::sqrt(kEpsVar);

    Tensor grad(cache.input.shape);
    const double* z = cache.input.ptr();
    const double* g = grad_zhat.ptr();
    double* gz = grad.ptr();

    for (int64_t bc = 0; bc < B * C; ++bc) {
        const double* zi = z + bc * V;
        const double* gi = g + bc * V;
        double* out = gz + bc * V;
        if (cache.identity[static_cast<size_t>(bc)]) {
            std::copy_n(gi, V, out);
            continue;
        }
        const double mu = cache.stats.mu[static_cast<size_t>(bc)];
        const double sigma = cache.stats.sigma[static_cast<size_t>(bc)];
        const double sigma_hat = cache.sampled.sigma[static_cast<size_t>(bc)];
        const double ratio = sigma_hat / sigma;
        const double through_sigma = (sigma_hat > floor) ? 1.0 : 0.0;

        double gsum = 0.0, gdot = 0.0;
        for (int64_t i = 0; i < V; ++i) {
            gsum += gi[i];
            gdot += gi[i] * (zi[i] - mu);
        }
        const double mean_g = gsum / n;
        const double coef = gdot * (through_sigma - ratio) / (n * sigma * sigma);
        for (int64_t i = 0; i < V; ++i) {
            out[i] = ratio * (gi[i] - mean_g) + mean_g + (zi[i] - mu) * coef;
        }
    }
    return grad;
}

/// Convex combination of two volumes and their one-hot labels.
inline std::pair<Tensor, Tensor> mixup(const Tensor& x1, const Tensor& y1, const Tensor& x2, const Tensor& y2,
                                       double lambda) {
    require_same_shape(x1, x2, "mixup volumes");
    require_same_shape(y1, y2, "mixup labels");
    if (lambda < 0.0 || lambda > 1.0) throw std::invalid_argument("mixup: lambda must be in [0, 1]");
    Tensor xm(x1.shape), ym(y1.shape);
    for (size_t i = 0; i < x1.data.size(); ++i) xm.data[i] = lambda * x1.data[i] + (1.0 - lambda) * x2.data[i];
    for (size_t i = 0; i < y1.data.size(); ++i) ym.data[i] = lambda * y1.data[i] + (1.0 - lambda) * y2.data[i];
    return {std::move(xm), std::move(ym)};
}

}  // namespace vfda
