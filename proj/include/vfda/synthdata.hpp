#pragma once

#include <algorithm>
#include <cmath>

#include "vfda/rng.hpp"
#include "vfda/tensor.hpp"
#include "vfda/wire.hpp"

namespace vfda {

// Deterministic synthetic 3D segmentation volumes with per-client intensity
// and object-size shifts, plus the "FVX1" on-disk volume format.

/// Per-client acquisition shift.  A partition of N clients spreads these
/// linearly: with offset d = heterogeneity * (i/(N-1) - 1/2) per client i,
///   gain      = 1 + d
///   bias      = 0.5 * d
///   noise_std = 0.05 * (1 + d)
///   radius range = (3.5 + 2d) +- 1 voxels
/// so heterogeneity 0 gives identical clients and heterogeneity 1 puts the
/// gains at the 0.5 / 1.5 extremes.
struct ClientShift {
    double intensity_gain = 1.0;
    double intensity_bias = 0.0;
    double noise_std = 0.05;
    std::pair<double, double> object_radius_range = {2.5, 4.5};
    int64_t samples = 0;

    void validate() const {
        if (!(intensity_gain > 0.0)) throw std::invalid_argument("client shift: intensity_gain must be > 0");
        if (noise_std < 0.0) throw std::invalid_argument("client shift: noise_std must be >= 0");
        if (!(object_radius_range.first > 0.0) || object_radius_range.second < object_radius_range.first) {
            throw std::invalid_argument("client shift: radius range must satisfy 0 < lo <= hi");
        }
    }
};

struct VolumeSample {
    Tensor volume;     // 1 x 1 x D x D x D
    LabelArray label;  // D x D x D
};

/// Class base intensities: background 0, foreground classes 1 and 2.
inline double class_base_value(int64_t cls) { return static_cast<double>(cls); }

inline std::vector<ClientShift> make_partition(int64_t num_clients, double heterogeneity, Rng& /*rng*/) {
    if (num_clients < 1) throw std::invalid_argument("make_partition: need at least one client");
    if (heterogeneity < 0.0 || heterogeneity > 1.0) {
        throw std::invalid_argument("make_partition: heterogeneity must lie in [0, 1]");
    }
    std::vector<ClientShift> shifts;
    for (int64_t i = 0; i < num_clients; ++i) {
        const double t = (num_clients == 1) ? 0.5 : static_cast<double>(i) / static_cast<double>(num_clients - 1);
        const double d = heterogeneity * (t - 0.5);
        ClientShift s;
        s.intensity_gain = 1.0 + d;
        s.intensity_bias = 0.5 * d;
        s.noise_std = 0.05 * (1.0 + d);
        s.object_radius_range = {2.5 + 2.0 * d, 4.5 + 2.0 * d};
        s.validate();
        shifts.push_back(s);
    }
    return shifts;
}

namespace detail {
/// Marks every voxel inside the axis-aligned ellipsoid with cls, overwriting
/// whatever was there.
inline void paint_ellipsoid(LabelArray& label, int64_t D, double cx, double cy, double cz, double a, double b,
                            double c, uint8_t cls) {
    uint8_t* out = label.data.data();
    for (int64_t i = 0; i < D; ++i) {
        const double di = (static_cast<double>(i) - cx) / a;
        for (int64_t j = 0; j < D; ++j) {
            const double dj = (static_cast<double>(j) - cy) / b;
            for (int64_t k = 0; k < D; ++k) {
                const double dk = (static_cast<double>(k) - cz) / c;
                if (di * di + dj * dj + dk * dk <= 1.0) {
                    out[(i * D + j) * D + k] = cls;
                }
            }
        }
    }
}
}  // namespace detail

/// One volume: K-1 random ellipsoids (classes 1..K-1, later classes painted
/// over earlier ones) on background, redrawn as a whole until every
/// foreground class survives; then per-voxel intensity
/// gain * base(class) + bias + noise_std * N(0,1) in row-major order.
inline VolumeSample generate_sample(const ClientShift& shift, int64_t D, int64_t K, Rng& rng) {
    shift.validate();
    if (D < 4 || D % 4 != 0) throw std::invalid_argument("generate_sample: D must be a positive multiple of 4");
    if (K != 2 && K != 3) throw std::invalid_argument("generate_sample: K must be 2 or 3");
    const auto [lo, hi] = shift.object_radius_range;
    if (hi >= static_cast<double>(D - 1) / 2.0) {
        throw std::invalid_argument("generate_sample: radius range exceeds volume bounds for D=" + std::to_string(D));
    }

    VolumeSample sample{Tensor({1, 1, D, D, D}), LabelArray({D, D, D})};
    bool placed = false;
    for (int attempt = 0; attempt < 100 && !placed; ++attempt) {
        std::fill(sample.label.data.begin(), sample.label.data.end(), uint8_t{0});
        for (int64_t cls = 1; cls < K; ++cls) {
            const double a = rng.next_uniform(lo, hi);
            const double b = rng.next_uniform(lo, hi);
            const double c = rng.next_uniform(lo, hi);
            const double margin = std::max({a, b, c});
            const double cx = rng.next_uniform(margin, static_cast<double>(D - 1) - margin);
            const double cy = rng.next_uniform(margin, static_cast<double>(D - 1) - margin);
            const double cz = rng.next_uniform(margin, static_cast<double>(D - 1) - margin);
            detail::paint_ellipsoid(sample.label, D, cx, cy, cz, a, b, c, static_cast<uint8_t>(cls));
        }
        placed = true;
        for (int64_t cls = 1; cls < K; ++cls) {
            const bool present = std::find(sample.label.data.begin(), sample.label.data.end(),
                                           static_cast<uint8_t>(cls)) != sample.label.data.end();
            placed = placed && present;
        }
    }
    if (!placed) throw std::runtime_error("generate_sample: could not place all foreground classes");

    for (size_t v = 0; v < sample.label.data.size(); ++v) {
        sample.volume.data[v] = shift.intensity_gain * class_base_value(sample.label.data[v]) + shift.intensity_bias +
                                shift.noise_std * rng.next_normal();
    }
    return sample;
}

// "FVX1" volume file: magic, u32 LE D (cubic), u8 class count, 7 reserved
// zero bytes, D^3 little-endian 64-bit floats, D^3 label bytes.

inline constexpr int64_t kMaxVolumeDim = 1024;

inline std::vector<uint8_t> encode_volume(const VolumeSample& sample) {
    if (sample.volume.rank() != 5 || sample.volume.dim(0) != 1 || sample.volume.dim(1) != 1) {
        throw std::invalid_argument("encode_volume: volume must be 1x1xDxDxD, got " +
                                    Tensor::shape_str(sample.volume.shape));
    }
    const int64_t D = sample.volume.dim(2);
    if (sample.volume.dim(3) != D || sample.volume.dim(4) != D) {
        throw std::invalid_argument("encode_volume: volume must be cubic, got " +
                                    Tensor::shape_str(sample.volume.shape));
    }
    if (sample.label.shape != std::vector<int64_t>{D, D, D}) {
        throw std::invalid_argument("encode_volume: label shape " + Tensor::shape_str(sample.label.shape) +
                                    " does not match volume " + Tensor::shape_str(sample.volume.shape));
    }
    const uint8_t max_label = *std::max_element(sample.label.data.begin(), sample.label.data.end());

    std::vector<uint8_t> out;
    out.reserve(16 + sample.volume.data.size() * 8 + sample.label.data.size());
    wire::put_magic(out, "FVX1");
    wire::put_u32(out, static_cast<uint32_t>(D));
    wire::put_u8(out, static_cast<uint8_t>(max_label + 1));
    for (int i = 0; i < 7; ++i) wire::put_u8(out, 0);
    for (double v : sample.volume.data) wire::put_f64(out, v);
    out.insert(out.end(), sample.label.data.begin(), sample.label.data.end());
    return out;
}

inline VolumeSample decode_volume(const std::vector<uint8_t>& bytes, const std::string& what) {
    wire::Reader r(bytes, what);
    r.expect_magic("FVX1");
    const uint32_t D32 = r.u32();
    if (D32 == 0 || D32 > kMaxVolumeDim) {
        throw RangeError(what + ": dimension " + std::to_string(D32) + " outside (0, " +
                         std::to_string(kMaxVolumeDim) + "]");
    }
    const int64_t D = static_cast<int64_t>(D32);
    const uint8_t num_classes = r.u8();
    for (int i = 0; i < 7; ++i) (void)r.u8();

    VolumeSample sample{Tensor({1, 1, D, D, D}), LabelArray({D, D, D})};
    r.need(sample.volume.data.size() * 8 + sample.label.data.size());
    for (auto& v : sample.volume.data) v = r.f64();
    r.bytes(sample.label.data.data(), sample.label.data.size());
    r.expect_end();
    for (uint8_t y : sample.label.data) {
        if (y >= num_classes) {
            throw RangeError(what + ": label " + std::to_string(int(y)) + " exceeds declared class count " +
                             std::to_string(int(num_classes)));
        }
    }
    return sample;
}

inline void write_volume(const std::string& path, const VolumeSample& sample) {
    wire::write_file(path, encode_volume(sample));
}

inline VolumeSample read_volume(const std::string& path) { return decode_volume(wire::read_file(path), path); }

/// Dataset directory convention: <root>/client_<id>/sample_<k>.fvx
inline std::string client_dir_name(int64_t client_id) { return "client_" + std::to_string(client_id); }
inline std::string sample_file_name(int64_t k) { return "sample_" + std::to_string(k) + ".fvx"; }

/// Mirrors the sample along the chosen spatial axes, volume and label
/// together.
inline VolumeSample flip_axes(const VolumeSample& sample, bool flip_h, bool flip_w, bool flip_s) {
    const int64_t D = sample.volume.dim(2);
    VolumeSample out{Tensor(sample.volume.shape), LabelArray(sample.label.shape)};
    for (int64_t i = 0; i < D; ++i) {
        const int64_t si = flip_h ? D - 1 - i : i;
        for (int64_t j = 0; j < D; ++j) {
            const int64_t sj = flip_w ? D - 1 - j : j;
            for (int64_t k = 0; k < D; ++k) {
                const int64_t sk = flip_s ? D - 1 - k : k;
                const size_t dst = static_cast<size_t>((i * D + j) * D + k);
                const size_t src = static_cast<size_t>((si * D + sj) * D + sk);
                out.volume.data[dst] = sample.volume.data[src];
                out.label.data[dst] = sample.label.data[src];
            }
        }
    }
    return out;
}

/// Independent 1/2-probability flip per spatial axis (drawn in h, w, s
/// order), applied identically to volume and label.
inline VolumeSample random_flip(const VolumeSample& sample, Rng& rng) {
    const bool fh = rng.next_uniform() < 0.5;
    const bool fw = rng.next_uniform() < 0.5;
    const bool fs = rng.next_uniform() < 0.5;
    return flip_axes(sample, fh, fw, fs);
}

}  // namespace vfda
