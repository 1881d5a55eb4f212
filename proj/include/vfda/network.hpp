#pragma once

#include <cmath>
#include <optional>
#include <span>

#include "vfda/ops.hpp"
#include "vfda/rng.hpp"
#include "vfda/stats.hpp"

namespace vfda {

// Fixed 3D encoder-decoder segmentation network.  Encoder levels are
// conv -> relu -> statistics augmentation, joined by stride-2 convs; the
// decoder upsamples, concatenates the skip, and convolves back up to a
// 1x1x1 projection onto class logits.

struct NetworkConfig {
    int64_t in_channels = 1;
    int64_t num_classes = 2;
    std::vector<int64_t> encoder_channels = {8, 16, 32};
    int64_t kernel_size = 3;

    int64_t levels() const { return static_cast<int64_t>(encoder_channels.size()); }
    int64_t spatial_divisor() const { return int64_t{1} << (levels() - 1); }

    void validate() const {
        if (in_channels < 1) throw std::invalid_argument("network config: in_channels must be >= 1");
        if (num_classes < 2) throw std::invalid_argument("network config: num_classes must be >= 2");
        if (encoder_channels.empty()) throw std::invalid_argument("network config: encoder_channels must be non-empty");
        for (int64_t c : encoder_channels) {
            if (c < 1) throw std::invalid_argument("network config: encoder channels must be >= 1");
        }
        if (kernel_size < 1 || kernel_size % 2 == 0) {
            throw std::invalid_argument("network config: kernel size must be odd and >= 1");
        }
    }
};

/// Training volumes plus integer class labels.
struct Batch {
    Tensor volumes;     // B x Cin x H x W x S
    LabelArray labels;  // B x H x W x S, values in [0, K)
};

struct Network {
    NetworkConfig config;
    std::vector<Tensor> params;  // kernels and biases in fixed layout order
    std::vector<VfdaLayerState> vfda_layers;  // one per encoder level

    // Layout: encoder (kernel, bias) per level, then downsample pairs, then
    // decoder pairs in application order, then the final projection pair.
    size_t enc_index(int64_t level) const { return static_cast<size_t>(2 * level); }
    size_t down_index(int64_t gap) const { return static_cast<size_t>(2 * (config.levels() + gap)); }
    size_t dec_index(int64_t step) const { return static_cast<size_t>(2 * (2 * config.levels() - 1 + step)); }
    size_t final_index() const { return static_cast<size_t>(2 * (3 * config.levels() - 2)); }

    int64_t param_count() const {
        int64_t n = 0;
        for (const Tensor& t : params) n += t.numel();
        return n;
    }

    std::vector<double> param_vector() const {
        std::vector<double> flat;
        flat.reserve(static_cast<size_t>(param_count()));
        for (const Tensor& t : params) flat.insert(flat.end(), t.data.begin(), t.data.end());
        return flat;
    }

    void load_params(std::span<const double> flat) {
        if (static_cast<int64_t>(flat.size()) != param_count()) {
            throw std::invalid_argument("load_params: expected " + std::to_string(param_count()) +
                                        " values, got " + std::to_string(flat.size()));
        }
        size_t off = 0;
        for (Tensor& t : params) {
            std::copy_n(flat.begin() + off, t.data.size(), t.data.begin());
            off += t.data.size();
        }
    }
};

namespace detail {
inline Tensor he_kernel(int64_t cout, int64_t cin, int64_t k, Rng& rng) {
    Tensor t({cout, cin, k, k, k});
    const double std_dev = std::sqrt(2.0 / static_cast<double>(cin * k * k * k));
    for (auto& v : t.data) v = rng.next_normal() * std_dev;
    return t;
}
}  // namespace detail

inline Network build_network(const NetworkConfig& config, Rng& rng) {
    config.validate();
    const int64_t L = config.levels();
    const int64_t k = config.kernel_size;
    const auto& ch = config.encoder_channels;

    Network net;
    net.config = config;
    for (int64_t l = 0; l < L; ++l) {
        const int64_t cin = (l == 0) ? config.in_channels : ch[static_cast<size_t>(l)];
        net.params.push_back(detail::he_kernel(ch[static_cast<size_t>(l)], cin, k, rng));
        net.params.push_back(Tensor({ch[static_cast<size_t>(l)]}));
    }
    for (int64_t l = 0; l + 1 < L; ++l) {
        net.params.push_back(detail::he_kernel(ch[static_cast<size_t>(l + 1)], ch[static_cast<size_t>(l)], k, rng));
        net.params.push_back(Tensor({ch[static_cast<size_t>(l + 1)]}));
    }
    for (int64_t i = 0; i + 1 < L; ++i) {
        const int64_t below = ch[static_cast<size_t>(L - 1 - i)];
        const int64_t skip = ch[static_cast<size_t>(L - 2 - i)];
        net.params.push_back(detail::he_kernel(skip, below + skip, k, rng));
        net.params.push_back(Tensor({skip}));
    }
    net.params.push_back(detail::he_kernel(config.num_classes, ch[0], 1, rng));
    net.params.push_back(Tensor({config.num_classes}));

    for (int64_t l = 0; l < L; ++l) net.vfda_layers.emplace_back(ch[static_cast<size_t>(l)]);
    return net;
}

/// Per-step augmentation context handed down from the federation layer.
struct VfdaTrainOptions {
    int64_t round = 0;  // 0-based round index entering the momentum factor
    double eta0 = 10.0;
    bool no_emd = false;              // accumulator degraded to last-batch stats
    bool no_global_variance = false;  // global factor replaced by all-ones
    bool disabled = false;            // skip the augmentation path entirely
    double apply_prob = 1.0;
};

struct ForwardCaches {
    std::vector<Conv3dCache> enc_conv;
    std::vector<ReluCache> enc_relu;
    std::vector<std::optional<VfdaCache>> vfda;
    std::vector<Conv3dCache> down;
    std::vector<UpsampleCache> up;
    std::vector<ConcatCache> cat;
    std::vector<Conv3dCache> dec_conv;
    std::vector<ReluCache> dec_relu;
    std::optional<Conv3dCache> final_conv;
};

inline void check_batch_shape(const Network& net, const Tensor& volumes) {
    if (volumes.rank() != 5 || volumes.dim(1) != net.config.in_channels) {
        throw std::invalid_argument("forward: volumes " + Tensor::shape_str(volumes.shape) + " do not match " +
                                    std::to_string(net.config.in_channels) + " input channels");
    }
    const int64_t div = net.config.spatial_divisor();
    for (size_t i : {2u, 3u, 4u}) {
        if (volumes.shape[i] % div != 0) {
            throw std::invalid_argument("forward: spatial dims " + Tensor::shape_str(volumes.shape) +
                                        " must be divisible by " + std::to_string(div));
        }
    }
}

/// Full forward pass.  In train mode each enabled encoder level computes
/// batch statistics, folds them into its momentum accumulator, and (with the
/// configured probability) renormalizes the feature map with sampled novel
/// statistics.  Eval mode leaves every feature map untouched.
inline std::pair<Tensor, ForwardCaches> forward(Network& net, const Tensor& volumes, Mode mode,
                                                const VfdaTrainOptions& opts, Rng& eps_rng) {
    check_batch_shape(net, volumes);
    const int64_t L = net.config.levels();
    const int64_t k = net.config.kernel_size;
    const int64_t pad = (k - 1) / 2;

    ForwardCaches caches;
    caches.vfda.resize(static_cast<size_t>(L));

    // One gating draw per training pass; with the default probability 1 the
    // stream is left untouched.
    bool apply = true;
    if (mode == Mode::train && !opts.disabled && opts.apply_prob < 1.0) {
        apply = eps_rng.next_uniform() < opts.apply_prob;
    }

    std::vector<Tensor> encoder_out;
    Tensor x = volumes;
    for (int64_t l = 0; l < L; ++l) {
        if (l > 0) {
            auto [d, dc] = conv3d_forward(x, net.params[net.down_index(l - 1)], net.params[net.down_index(l - 1) + 1],
                                          2, pad);
            caches.down.push_back(std::move(dc));
            x = std::move(d);
        }
        auto [c, cc] = conv3d_forward(x, net.params[net.enc_index(l)], net.params[net.enc_index(l) + 1], 1, pad);
        caches.enc_conv.push_back(std::move(cc));
        auto [r, rc] = relu(c);
        caches.enc_relu.push_back(std::move(rc));
        x = std::move(r);

        VfdaLayerState& layer = net.vfda_layers[static_cast<size_t>(l)];
        layer.mode = mode;
        if (mode == Mode::train && layer.enabled && !opts.disabled) {
            const ChannelStats stats = channel_stats(x);
            emd_update_with_factor(layer.momentum, stats,
                                   opts.no_emd ? 0.0 : emd_factor(opts.round, opts.eta0));
            layer.momentum.round_of_last_update = opts.round;

            if (apply) {
                const PrototypeVariance local = local_stat_variance(stats);
                const PrototypeVariance combined =
                    opts.no_global_variance
                        ? local
                        : combine_variance(local, layer.global_variance);
                const ChannelStats sampled = sample_statistics(stats, combined, eps_rng);
                auto [z, vc] = vfda_forward(x, sampled, stats);
                caches.vfda[static_cast<size_t>(l)] = std::move(vc);
                x = std::move(z);
            }
        }
        encoder_out.push_back(x);
    }

    Tensor y = encoder_out.back();
    for (int64_t i = 0; i + 1 < L; ++i) {
        auto [u, uc] = upsample_nearest(y, 2);
        caches.up.push_back(std::move(uc));
        auto [cat, catc] = concat_channels(u, encoder_out[static_cast<size_t>(L - 2 - i)]);
        caches.cat.push_back(std::move(catc));
        auto [c, cc] = conv3d_forward(cat, net.params[net.dec_index(i)], net.params[net.dec_index(i) + 1], 1, pad);
        caches.dec_conv.push_back(std::move(cc));
        auto [r, rc] = relu(c);
        caches.dec_relu.push_back(std::move(rc));
        y = std::move(r);
    }
    auto [logits, fc] = conv3d_forward(y, net.params[net.final_index()], net.params[net.final_index() + 1], 1, 0);
    caches.final_conv = std::move(fc);
    return {std::move(logits), std::move(caches)};
}

inline std::pair<Tensor, ForwardCaches> forward(Network& net, const Batch& batch, Mode mode,
                                                const VfdaTrainOptions& opts, Rng& eps_rng) {
    return forward(net, batch.volumes, mode, opts, eps_rng);
}

/// Eval-mode logits; no statistics are read, updated, or sampled.
inline Tensor predict(Network& net, const Tensor& volumes) {
    Rng unused(0);
    return forward(net, volumes, Mode::eval, VfdaTrainOptions{}, unused).first;
}

/// Reverse pass over the forward caches; returns per-parameter gradients in
/// the network's layout order.
inline std::vector<Tensor> network_backward(Network& net, const Tensor& grad_logits, const ForwardCaches& caches) {
    const int64_t L = net.config.levels();
    std::vector<Tensor> grads(net.params.size());

    auto [g_dec, gk_final, gb_final] = conv3d_backward(grad_logits, *caches.final_conv);
    grads[net.final_index()] = std::move(gk_final);
    grads[net.final_index() + 1] = std::move(gb_final);

    std::vector<Tensor> grad_encoder(static_cast<size_t>(L));
    Tensor g = std::move(g_dec);
    for (int64_t i = L - 2; i >= 0; --i) {
        g = relu_backward(g, caches.dec_relu[static_cast<size_t>(i)]);
        auto [g_cat, gk, gb] = conv3d_backward(g, caches.dec_conv[static_cast<size_t>(i)]);
        grads[net.dec_index(i)] = std::move(gk);
        grads[net.dec_index(i) + 1] = std::move(gb);
        auto [g_up, g_skip] = concat_channels_backward(g_cat, caches.cat[static_cast<size_t>(i)]);
        const size_t skip_level = static_cast<size_t>(L - 2 - i);
        if (grad_encoder[skip_level].numel() == 0) {
            grad_encoder[skip_level] = std::move(g_skip);
        } else {
            for (size_t j = 0; j < g_skip.data.size(); ++j) grad_encoder[skip_level].data[j] += g_skip.data[j];
        }
        g = upsample_nearest_backward(g_up, caches.up[static_cast<size_t>(i)]);
    }
    grad_encoder[static_cast<size_t>(L - 1)] = std::move(g);

    Tensor grad_from_above;
    for (int64_t l = L - 1; l >= 0; --l) {
        Tensor ge = std::move(grad_encoder[static_cast<size_t>(l)]);
        if (grad_from_above.numel() != 0) {
            for (size_t j = 0; j < ge.data.size(); ++j) ge.data[j] += grad_from_above.data[j];
        }
        if (caches.vfda[static_cast<size_t>(l)]) {
            ge = vfda_backward(ge, *caches.vfda[static_cast<size_t>(l)]);
        }
        ge = relu_backward(ge, caches.enc_relu[static_cast<size_t>(l)]);
        auto [gi, gk, gb] = conv3d_backward(ge, caches.enc_conv[static_cast<size_t>(l)]);
        grads[net.enc_index(l)] = std::move(gk);
        grads[net.enc_index(l) + 1] = std::move(gb);
        if (l > 0) {
            auto [gdi, gdk, gdb] = conv3d_backward(gi, caches.down[static_cast<size_t>(l - 1)]);
            grads[net.down_index(l - 1)] = std::move(gdk);
            grads[net.down_index(l - 1) + 1] = std::move(gdb);
            grad_from_above = std::move(gdi);
        } else {
            grad_from_above = std::move(gi);  // gradient w.r.t. the input volumes
        }
    }
    return grads;
}

/// Numerically stable channel softmax over axis 1.
inline Tensor softmax_channels(const Tensor& logits) {
    const int64_t B = logits.dim(0), K = logits.dim(1);
    const int64_t V = logits.dim(2) * logits.dim(3) * logits.dim(4);
    Tensor probs(logits.shape);
    const double* in = logits.ptr();
    double* out = probs.ptr();
    for (int64_t b = 0; b < B; ++b) {
        const double* lb = in + b * K * V;
        double* pb = out + b * K * V;
        for (int64_t v = 0; v < V; ++v) {
            double m = lb[v];
            for (int64_t c = 1; c < K; ++c) m = std::max(m, lb[c * V + v]);
            double denom = 0.0;
            for (int64_t c = 0; c < K; ++c) {
                const double e = std::exp(lb[c * V + v] - m);
                pb[c * V + v] = e;
                denom += e;
            }
            for (int64_t c = 0; c < K; ++c) pb[c * V + v] /= denom;
        }
    }
    return probs;
}

inline void check_labels(const Tensor& logits, const LabelArray& labels) {
    const int64_t B = logits.dim(0), K = logits.dim(1);
    const int64_t V = logits.dim(2) * logits.dim(3) * logits.dim(4);
    if (labels.numel() != B * V) {
        throw std::invalid_argument("labels length " + std::to_string(labels.numel()) + " does not match logits " +
                                    Tensor::shape_str(logits.shape));
    }
    for (uint8_t y : labels.data) {
        if (y >= K) {
            throw std::invalid_argument("label " + std::to_string(int(y)) + " out of range for K=" + std::to_string(K));
        }
    }
}

/// Mean voxel-wise cross entropy with integer labels; returns the loss and
/// its gradient w.r.t. the logits.
inline std::pair<double, Tensor> softmax_cross_entropy(const Tensor& logits, const LabelArray& labels) {
    check_labels(logits, labels);
    const int64_t B = logits.dim(0), K = logits.dim(1);
    const int64_t V = logits.dim(2) * logits.dim(3) * logits.dim(4);
    const double inv_m = 1.0 / static_cast<double>(B * V);

    Tensor grad = softmax_channels(logits);
    double loss = 0.0;
    double* p = grad.ptr();
    for (int64_t b = 0; b < B; ++b) {
        double* pb = p + b * K * V;
        const uint8_t* yb = labels.data.data() + b * V;
        for (int64_t v = 0; v < V; ++v) {
            const int64_t y = yb[v];
            loss -= std::log(std::max(pb[y * V + v], 1e-300));
            pb[y * V + v] -= 1.0;
        }
    }
    for (auto& g : grad.data) g *= inv_m;
    return {loss * inv_m, std::move(grad)};
}

/// Soft-target cross entropy (targets per-voxel convex over channels).
inline std::pair<double, Tensor> softmax_cross_entropy_soft(const Tensor& logits, const Tensor& targets) {
    require_same_shape(logits, targets, "softmax_cross_entropy_soft");
    const int64_t B = logits.dim(0), K = logits.dim(1);
    const int64_t V = logits.dim(2) * logits.dim(3) * logits.dim(4);
    const double inv_m = 1.0 / static_cast<double>(B * V);

    Tensor grad = softmax_channels(logits);
    double loss = 0.0;
    for (size_t i = 0; i < grad.data.size(); ++i) {
        loss -= targets.data[i] * std::log(std::max(grad.data[i], 1e-300));
        grad.data[i] = (grad.data[i] - targets.data[i]) * inv_m;
    }
    return {loss * inv_m, std::move(grad)};
}

/// Soft Dice over one-hot (or soft) targets, averaged across all K classes,
/// smoothing s = 1.  Returns the loss and its gradient w.r.t. the probs.
inline std::pair<double, Tensor> soft_dice_loss_soft(const Tensor& probs, const Tensor& targets) {
    require_same_shape(probs, targets, "soft_dice_loss");
    const int64_t B = probs.dim(0), K = probs.dim(1);
    const int64_t V = probs.dim(2) * probs.dim(3) * probs.dim(4);
    const double smooth = 1.0;

    std::vector<double> inter(static_cast<size_t>(K), 0.0), psum(static_cast<size_t>(K), 0.0),
        gsum(static_cast<size_t>(K), 0.0);
    for (int64_t b = 0; b < B; ++b) {
        for (int64_t c = 0; c < K; ++c) {
            const double* pp = probs.ptr() + (b * K + c) * V;
            const double* gg = targets.ptr() + (b * K + c) * V;
            double i1 = 0.0, s1 = 0.0, s2 = 0.0;
            for (int64_t v = 0; v < V; ++v) {
                i1 += pp[v] * gg[v];
                s1 += pp[v];
                s2 += gg[v];
            }
            inter[static_cast<size_t>(c)] += i1;
            psum[static_cast<size_t>(c)] += s1;
            gsum[static_cast<size_t>(c)] += s2;
        }
    }
    double dice_sum = 0.0;
    std::vector<double> numer(static_cast<size_t>(K)), denom(static_cast<size_t>(K));
    for (int64_t c = 0; c < K; ++c) {
        numer[static_cast<size_t>(c)] = 2.0 * inter[static_cast<size_t>(c)] + smooth;
        denom[static_cast<size_t>(c)] = psum[static_cast<size_t>(c)] + gsum[static_cast<size_t>(c)] + smooth;
        dice_sum += numer[static_cast<size_t>(c)] / denom[static_cast<size_t>(c)];
    }
    const double loss = 1.0 - dice_sum / static_cast<double>(K);

    Tensor grad(probs.shape);
    for (int64_t b = 0; b < B; ++b) {
        for (int64_t c = 0; c < K; ++c) {
            const double* gg = targets.ptr() + (b * K + c) * V;
            double* gp = grad.ptr() + (b * K + c) * V;
            const double d = denom[static_cast<size_t>(c)];
            const double n = numer[static_cast<size_t>(c)];
            for (int64_t v = 0; v < V; ++v) {
                gp[v] = -(2.0 * gg[v] * d - n) / (d * d) / static_cast<double>(K);
            }
        }
    }
    return {loss, std::move(grad)};
}

inline Tensor one_hot(const LabelArray& labels, int64_t B, int64_t K, int64_t H, int64_t W, int64_t S) {
    Tensor t({B, K, H, W, S});
    const int64_t V = H * W * S;
    for (int64_t b = 0; b < B; ++b) {
        const uint8_t* yb = labels.data.data() + b * V;
        for (int64_t v = 0; v < V; ++v) {
            if (yb[v] >= K) {
                throw std::invalid_argument("label " + std::to_string(int(yb[v])) + " out of range for K=" +
                                            std::to_string(K));
            }
            t.data[static_cast<size_t>((b * K + yb[v]) * V + v)] = 1.0;
        }
    }
    return t;
}

inline std::pair<double, Tensor> soft_dice_loss(const Tensor& probs, const LabelArray& labels) {
    const Tensor targets = one_hot(labels, probs.dim(0), probs.dim(1), probs.dim(2), probs.dim(3), probs.dim(4));
    return soft_dice_loss_soft(probs, targets);
}

struct LossWeights {
    double ce = 1.0;
    double dice = 1.0;
};

struct StepLosses {
    double ce = 0.0;
    double dice = 0.0;
};

namespace detail {
inline Tensor combined_grad_logits(const Tensor& logits, const Tensor& probs, const Tensor& grad_ce,
                                   const Tensor& grad_probs_dice, const LossWeights& weights) {
    // Dice gradient pulled back through the softmax:
    // d/dlogit_k = p_k * (g_k - sum_j p_j g_j) per voxel.
    const int64_t B = logits.dim(0), K = logits.dim(1);
    const int64_t V = logits.dim(2) * logits.dim(3) * logits.dim(4);
    Tensor grad(logits.shape);
    for (int64_t b = 0; b < B; ++b) {
        const double* pb = probs.ptr() + b * K * V;
        const double* gd = grad_probs_dice.ptr() + b * K * V;
        double* out = grad.ptr() + b * K * V;
        for (int64_t v = 0; v < V; ++v) {
            double dot = 0.0;
            for (int64_t c = 0; c < K; ++c) dot += pb[c * V + v] * gd[c * V + v];
            for (int64_t c = 0; c < K; ++c) {
                out[c * V + v] = weights.ce * grad_ce.data[static_cast<size_t>(b * K * V + c * V + v)] +
                                 weights.dice * pb[c * V + v] * (gd[c * V + v] - dot);
            }
        }
    }
    return grad;
}
}  // namespace detail

/// Loss terms of w_ce * CE + w_dice * Dice plus the gradient of the combined
/// loss w.r.t. the logits.
inline std::pair<StepLosses, Tensor> combined_loss_backward(const Tensor& logits, const LabelArray& labels,
                                                            const LossWeights& weights) {
    auto [ce, grad_ce] = softmax_cross_entropy(logits, labels);
    const Tensor probs = softmax_channels(logits);
    auto [dice, grad_probs] = soft_dice_loss(probs, labels);
    Tensor grad_logits = detail::combined_grad_logits(logits, probs, grad_ce, grad_probs, weights);
    return {StepLosses{ce, dice}, std::move(grad_logits)};
}

inline std::pair<StepLosses, Tensor> combined_loss_backward_soft(const Tensor& logits, const Tensor& targets,
                                                                 const LossWeights& weights) {
    auto [ce, grad_ce] = softmax_cross_entropy_soft(logits, targets);
    const Tensor probs = softmax_channels(logits);
    auto [dice, grad_probs] = soft_dice_loss_soft(probs, targets);
    Tensor grad_logits = detail::combined_grad_logits(logits, probs, grad_ce, grad_probs, weights);
    return {StepLosses{ce, dice}, std::move(grad_logits)};
}

/// One SGD step on the combined loss w_ce * CE + w_dice * Dice.  The labels
/// are never written; momentum statistics update once per step inside the
/// train-mode forward.
inline StepLosses train_step(Network& net, const Batch& batch, double lr, const LossWeights& weights,
                             const VfdaTrainOptions& opts, Rng& eps_rng) {
    auto [logits, caches] = forward(net, batch.volumes, Mode::train, opts, eps_rng);
    auto [losses, grad_logits] = combined_loss_backward(logits, batch.labels, weights);
    std::vector<Tensor> grads = network_backward(net, grad_logits, caches);
    sgd_step(net.params, grads, lr);
    return losses;
}

/// Same step with soft voxel targets (the mixup path).
inline StepLosses train_step_soft(Network& net, const Tensor& volumes, const Tensor& targets, double lr,
                                  const LossWeights& weights, const VfdaTrainOptions& opts, Rng& eps_rng) {
    auto [logits, caches] = forward(net, volumes, Mode::train, opts, eps_rng);
    auto [losses, grad_logits] = combined_loss_backward_soft(logits, targets, weights);
    std::vector<Tensor> grads = network_backward(net, grad_logits, caches);
    sgd_step(net.params, grads, lr);
    return losses;
}

}  // namespace vfda
