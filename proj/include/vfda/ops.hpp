#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <tuple>

#include "vfda/tensor.hpp"

namespace vfda {

// Reverse-mode building blocks for the fixed op set the segmentation network
// needs.  Each forward returns a typed cache; its backward consumes exactly
// that cache.  All math is double precision, row-major, no aliasing.

namespace detail {
inline int64_t floor_div(int64_t a, int64_t b) { return (a >= 0) ? a / b : -((-a + b - 1) / b); }
inline int64_t ceil_div(int64_t a, int64_t b) { return (a >= 0) ? (a + b - 1) / b : -((-a) / b); }
}  // namespace detail

inline int64_t conv_out_dim(int64_t dim, int64_t k, int64_t stride, int64_t pad) {
    return (dim + 2 * pad - k) / stride + 1;
}

struct Conv3dCache {
    Tensor input;
    Tensor kernel;
    int64_t stride = 1;
    int64_t pad = 0;
    std::vector<int64_t> out_shape;
};

inline void check_conv_args(const Tensor& input, const Tensor& kernel, const Tensor& bias,
                            int64_t stride, int64_t pad) {
    if (input.rank() != 5 || kernel.rank() != 5 || bias.rank() != 1) {
        throw std::invalid_argument("conv3d: input/kernel must be rank 5, bias rank 1; got " +
                                    Tensor::shape_str(input.shape) + ", " + Tensor::shape_str(kernel.shape));
    }
    const int64_t k = kernel.dim(2);
    if (kernel.dim(3) != k || kernel.dim(4) != k) {
        throw std::invalid_argument("conv3d: kernel must be cubic, got " + Tensor::shape_str(kernel.shape));
    }
    if (k % 2 == 0) throw std::invalid_argument("conv3d: kernel size must be odd, got " + std::to_string(k));
    if (kernel.dim(1) != input.dim(1)) {
        throw std::invalid_argument("conv3d: input channels mismatch, input " + Tensor::shape_str(input.shape) +
                                    " vs kernel " + Tensor::shape_str(kernel.shape));
    }
    if (bias.dim(0) != kernel.dim(0)) {
        throw std::invalid_argument("conv3d: bias length " + Tensor::shape_str(bias.shape) +
                                    " vs kernel " + Tensor::shape_str(kernel.shape));
    }
    if (stride < 1 || pad < 0) throw std::invalid_argument("conv3d: stride must be >= 1 and pad >= 0");
}

/// 3D cross-correlation with zero padding.  Output spatial dims follow
/// floor((dim + 2*pad - k)/stride) + 1.
inline std::pair<Tensor, Conv3dCache> conv3d_forward(const Tensor& input, const Tensor& kernel,
                                                     const Tensor& bias, int64_t stride, int64_t pad) {
    check_conv_args(input, kernel, bias, stride, pad);
    const int64_t B = input.dim(0), Cin = input.dim(1), H = input.dim(2), W = input.dim(3), S = input.dim(4);
    const int64_t Cout = kernel.dim(0), k = kernel.dim(2);
    const int64_t Oh = conv_out_dim(H, k, stride, pad);
    const int64_t Ow = conv_out_dim(W, k, stride, pad);
    const int64_t Os = conv_out_dim(S, k, stride, pad);
    if (Oh < 1 || Ow < 1 || Os < 1) {
        throw std::invalid_argument("conv3d: empty output for input " + Tensor::shape_str(input.shape) +
                                    " with kernel " + Tensor::shape_str(kernel.shape));
    }

    Tensor out({B, Cout, Oh, Ow, Os});
    const double* in = input.ptr();
    const double* ker = kernel.ptr();
    double* o = out.ptr();

    for (int64_t b = 0; b < B; ++b) {
        for (int64_t co = 0; co < Cout; ++co) {
            double* ob = o + ((b * Cout + co) * Oh) * Ow * Os;
            const double bv = bias.data[static_cast<size_t>(co)];
            std::fill(ob, ob + Oh * Ow * Os, bv);
            for (int64_t ci = 0; ci < Cin; ++ci) {
                const double* ib = in + ((b * Cin + ci) * H) * W * S;
                const double* kb = ker + ((co * Cin + ci) * k) * k * k;
                for (int64_t kh = 0; kh < k; ++kh) {
                    const int64_t oh_lo = std::max<int64_t>(0, detail::ceil_div(pad - kh, stride));
                    const int64_t oh_hi = std::min(Oh - 1, detail::floor_div(H - 1 + pad - kh, stride));
                    for (int64_t kw = 0; kw < k; ++kw) {
                        const int64_t ow_lo = std::max<int64_t>(0, detail::ceil_div(pad - kw, stride));
                        const int64_t ow_hi = std::min(Ow - 1, detail::floor_div(W - 1 + pad - kw, stride));
                        for (int64_t ks = 0; ks < k; ++ks) {
                            const int64_t os_lo = std::max<int64_t>(0, detail::ceil_div(pad - ks, stride));
                            const int64_t os_hi = std::min(Os - 1, detail::floor_div(S - 1 + pad - ks, stride));
                            const double wv = kb[(kh * k + kw) * k + ks];
                            if (wv == 0.0) continue;
                            for (int64_t oh = oh_lo; oh <= oh_hi; ++oh) {
                                const int64_t ih = oh * stride - pad + kh;
                                for (int64_t ow = ow_lo; ow <= ow_hi; ++ow) {
                                    const int64_t iw = ow * stride - pad + kw;
                                    const double* irow = ib + (ih * W + iw) * S - pad + ks;
                                    double* orow = ob + (oh * Ow + ow) * Os;
                                    for (int64_t os = os_lo; os <= os_hi; ++os) {
                                        orow[os] += wv * irow[os * stride];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Conv3dCache cache{input, kernel, stride, pad, out.shape};
    return {std::move(out), std::move(cache)};
}

/// Gradients of conv3d w.r.t. input, kernel, and bias.
inline std::tuple<Tensor, Tensor, Tensor> conv3d_backward(const Tensor& grad_out, const Conv3dCache& cache) {
    if (grad_out.shape != cache.out_shape) {
        throw std::invalid_argument("conv3d_backward: grad shape " + Tensor::shape_str(grad_out.shape) +
                                    " does not match forward output " + Tensor::shape_str(cache.out_shape));
    }
    const Tensor& input = cache.input;
    const Tensor& kernel = cache.kernel;
    const int64_t stride = cache.stride, pad = cache.pad;
    const int64_t B = input.dim(0), Cin = input.dim(1), H = input.dim(2), W = input.dim(3), S = input.dim(4);
    const int64_t Cout = kernel.dim(0), k = kernel.dim(2);
    const int64_t Oh = grad_out.dim(2), Ow = grad_out.dim(3), Os = grad_out.dim(4);

    Tensor grad_input(input.shape);
    Tensor grad_kernel(kernel.shape);
    Tensor grad_bias({Cout});

    const double* in = input.ptr();
    const double* ker = kernel.ptr();
    const double* go = grad_out.ptr();
    double* gi = grad_input.ptr();
    double* gk = grad_kernel.ptr();

    for (int64_t b = 0; b < B; ++b) {
        for (int64_t co = 0; co < Cout; ++co) {
            const double* gob = go + ((b * Cout + co) * Oh) * Ow * Os;
            double acc_bias = 0.0;
            for (int64_t i = 0; i < Oh * Ow * Os; ++i) acc_bias += gob[i];
            grad_bias.data[static_cast<size_t>(co)] += acc_bias;

            for (int64_t ci = 0; ci < Cin; ++ci) {
                const double* ib = in + ((b * Cin + ci) * H) * W * S;
                double* gib = gi + ((b * Cin + ci) * H) * W * S;
                const double* kb = ker + ((co * Cin + ci) * k) * k * k;
                double* gkb = gk + ((co * Cin + ci) * k) * k * k;
                for (int64_t kh = 0; kh < k; ++kh) {
                    const int64_t oh_lo = std::max<int64_t>(0, detail::ceil_div(pad - kh, stride));
                    const int64_t oh_hi = std::min(Oh - 1, detail::floor_div(H - 1 + pad - kh, stride));
                    for (int64_t kw = 0; kw < k; ++kw) {
                        const int64_t ow_lo = std::max<int64_t>(0, detail::ceil_div(pad - kw, stride));
                        const int64_t ow_hi = std::min(Ow - 1, detail::floor_div(W - 1 + pad - kw, stride));
                        for (int64_t ks = 0; ks < k; ++ks) {
                            const int64_t os_lo = std::max<int64_t>(0, detail::ceil_div(pad - ks, stride));
                            const int64_t os_hi = std::min(Os - 1, detail::floor_div(S - 1 + pad - ks, stride));
                            const double wv = kb[(kh * k + kw) * k + ks];
                            double acc_k = 0.0;
                            for (int64_t oh = oh_lo; oh <= oh_hi; ++oh) {
                                const int64_t ih = oh * stride - pad + kh;
                                for (int64_t ow = ow_lo; ow <= ow_hi; ++ow) {
                                    const int64_t iw = ow * stride - pad + kw;
                                    const double* irow = ib + (ih * W + iw) * S - pad + ks;
                                    double* girow = gib + (ih * W + iw) * S - pad + ks;
                                    const double* gorow = gob + (oh * Ow + ow) * Os;
                                    for (int64_t os = os_lo; os <= os_hi; ++os) {
                                        const double g = gorow[os];
                                        acc_k += g * irow[os * stride];
                                        girow[os * stride] += wv * g;
                                    }
                                }
                            }
                            gkb[(kh * k + kw) * k + ks] += acc_k;
                        }
                    }
                }
            }
        }
    }
    return {std::move(grad_input), std::move(grad_kernel), std::move(grad_bias)};
}

struct ReluCache {
    Tensor input;
};

inline std::pair<Tensor, ReluCache> relu(const Tensor& input) {
    Tensor out(input.shape);
    for (size_t i = 0; i < input.data.size(); ++i) out.data[i] = input.data[i] > 0.0 ? input.data[i] : 0.0;
    return {std::move(out), ReluCache{input}};
}

// Subgradient at exactly 0 is 0.
inline Tensor relu_backward(const Tensor& grad_out, const ReluCache& cache) {
    require_same_shape(grad_out, cache.input, "relu_backward");
    Tensor grad_in(grad_out.shape);
    for (size_t i = 0; i < grad_out.data.size(); ++i) {
        grad_in.data[i] = cache.input.data[i] > 0.0 ? grad_out.data[i] : 0.0;
    }
    return grad_in;
}

struct UpsampleCache {
    std::vector<int64_t> in_shape;
    int64_t factor = 1;
};

/// Nearest-neighbour upsampling: each voxel replicated factor^3 times.
inline std::pair<Tensor, UpsampleCache> upsample_nearest(const Tensor& input, int64_t factor) {
    if (factor < 1) throw std::invalid_argument("upsample_nearest: factor must be >= 1");
    if (input.rank() != 5) throw std::invalid_argument("upsample_nearest: expects rank 5, got " + Tensor::shape_str(input.shape));
    const int64_t B = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3), S = input.dim(4);
    Tensor out({B, C, H * factor, W * factor, S * factor});
    const double* in = input.ptr();
    double* o = out.ptr();
    const int64_t Oh = H * factor, Ow = W * factor, Os = S * factor;
    for (int64_t bc = 0; bc < B * C; ++bc) {
        const double* ib = in + bc * H * W * S;
        double* ob = o + bc * Oh * Ow * Os;
        for (int64_t oh = 0; oh < Oh; ++oh) {
            for (int64_t ow = 0; ow < Ow; ++ow) {
                const double* irow = ib + ((oh / factor) * W + (ow / factor)) * S;
                double* orow = ob + (oh * Ow + ow) * Os;
                for (int64_t os = 0; os < Os; ++os) orow[os] = irow[os / factor];
            }
        }
    }
    return {std::move(out), UpsampleCache{input.shape, factor}};
}

/// Sums gradients over each replication group.
inline Tensor upsample_nearest_backward(const Tensor& grad_out, const UpsampleCache& cache) {
    const int64_t f = cache.factor;
    const int64_t B = cache.in_shape[0], C = cache.in_shape[1], H = cache.in_shape[2], W = cache.in_shape[3],
                  S = cache.in_shape[4];
    std::vector<int64_t> expect{B, C, H * f, W * f, S * f};
    if (grad_out.shape != expect) {
        throw std::invalid_argument("upsample_nearest_backward: grad shape " + Tensor::shape_str(grad_out.shape) +
                                    " does not match " + Tensor::shape_str(expect));
    }
    Tensor grad_in(cache.in_shape);
    const double* go = grad_out.ptr();
    double* gi = grad_in.ptr();
    const int64_t Oh = H * f, Ow = W * f, Os = S * f;
    for (int64_t bc = 0; bc < B * C; ++bc) {
        const double* gob = go + bc * Oh * Ow * Os;
        double* gib = gi + bc * H * W * S;
        for (int64_t oh = 0; oh < Oh; ++oh) {
            for (int64_t ow = 0; ow < Ow; ++ow) {
                double* girow = gib + ((oh / f) * W + (ow / f)) * S;
                const double* gorow = gob + (oh * Ow + ow) * Os;
                for (int64_t os = 0; os < Os; ++os) girow[os / f] += gorow[os];
            }
        }
    }
    return grad_in;
}

struct ConcatCache {
    std::vector<int64_t> a_shape;
    std::vector<int64_t> b_shape;
};

/// Concatenate along the channel axis; a's channels come first.
inline std::pair<Tensor, ConcatCache> concat_channels(const Tensor& a, const Tensor& b) {
    if (a.rank() != 5 || b.rank() != 5) {
        throw std::invalid_argument("concat_channels: expects rank 5, got " + Tensor::shape_str(a.shape) + " and " +
                                    Tensor::shape_str(b.shape));
    }
    for (size_t i : {0u, 2u, 3u, 4u}) {
        if (a.shape[i] != b.shape[i]) {
            throw std::invalid_argument("concat_channels: non-channel dims differ, " + Tensor::shape_str(a.shape) +
                                        " vs " + Tensor::shape_str(b.shape));
        }
    }
    const int64_t B = a.dim(0), Ca = a.dim(1), Cb = b.dim(1);
    const int64_t V = a.dim(2) * a.dim(3) * a.dim(4);
    Tensor out({B, Ca + Cb, a.dim(2), a.dim(3), a.dim(4)});
    for (int64_t bi = 0; bi < B; ++bi) {
        std::copy_n(a.ptr() + bi * Ca * V, Ca * V, out.ptr() + bi * (Ca + Cb) * V);
        std::copy_n(b.ptr() + bi * Cb * V, Cb * V, out.ptr() + (bi * (Ca + Cb) + Ca) * V);
    }
    return {std::move(out), ConcatCache{a.shape, b.shape}};
}

inline std::pair<Tensor, Tensor> concat_channels_backward(const Tensor& grad_out, const ConcatCache& cache) {
    const int64_t B = cache.a_shape[0], Ca = cache.a_shape[1], Cb = cache.b_shape[1];
    const int64_t V = cache.a_shape[2] * cache.a_shape[3] * cache.a_shape[4];
    std::vector<int64_t> expect = cache.a_shape;
    expect[1] = Ca + Cb;
    if (grad_out.shape != expect) {
        throw std::invalid_argument("concat_channels_backward: grad shape " + Tensor::shape_str(grad_out.shape) +
                                    " does not match " + Tensor::shape_str(expect));
    }
    Tensor ga(cache.a_shape), gb(cache.b_shape);
    for (int64_t bi = 0; bi < B; ++bi) {
        std::copy_n(grad_out.ptr() + bi * (Ca + Cb) * V, Ca * V, ga.ptr() + bi * Ca * V);
        std::copy_n(grad_out.ptr() + (bi * (Ca + Cb) + Ca) * V, Cb * V, gb.ptr() + bi * Cb * V);
    }
    return {std::move(ga), std::move(gb)};
}

/// Central finite differences of a scalar functional, the test oracle for
/// every backward op: (f(x + h e_i) - f(x - h e_i)) / (2h).
inline Tensor finite_difference_gradient(const std::function<double(const Tensor&)>& f, const Tensor& x, double h) {
    if (h <= 0.0) throw std::invalid_argument("finite_difference_gradient: h must be > 0");
    Tensor grad(x.shape);
    Tensor probe = x;
    for (size_t i = 0; i < x.data.size(); ++i) {
        const double orig = probe.data[i];
        probe.data[i] = orig + h;
        const double fp = f(probe);
        probe.data[i] = orig - h;
        const double fm = f(probe);
        probe.data[i] = orig;
        grad.data[i] = (fp - fm) / (2.0 * h);
    }
    return grad;
}

/// Plain SGD: p <- p - lr * g, elementwise over matched tensor sequences.
inline void sgd_step(std::vector<Tensor>& params, const std::vector<Tensor>& grads, double lr) {
    if (lr < 0.0) throw std::invalid_argument("sgd_step: lr must be >= 0");
    if (params.size() != grads.size()) {
        throw std::invalid_argument("sgd_step: " + std::to_string(params.size()) + " params vs " +
                                    std::to_string(grads.size()) + " grads");
    }
    for (size_t t = 0; t < params.size(); ++t) {
        require_same_shape(params[t], grads[t], "sgd_step");
        double* p = params[t].ptr();
        const double* g = grads[t].ptr();
        for (int64_t i = 0; i < params[t].numel(); ++i) p[i] -= lr * g[i];
    }
}

}  // namespace vfda
