#pragma once

#include "vfda/tensor.hpp"

namespace vfda {

/// Hard Dice overlap 2|P∩G| / (|P| + |G|) for one class; 1.0 when the class
/// is absent from both maps.
inline double dice_score(const LabelArray& pred, const LabelArray& gt, int64_t class_id) {
    if (pred.shape != gt.shape) {
        throw std::invalid_argument("dice_score: shape mismatch, " + Tensor::shape_str(pred.shape) + " vs " +
                                    Tensor::shape_str(gt.shape));
    }
    int64_t inter = 0, p = 0, g = 0;
    for (size_t i = 0; i < pred.data.size(); ++i) {
        const bool in_p = pred.data[i] == class_id;
        const bool in_g = gt.data[i] == class_id;
        p += in_p;
        g += in_g;
        inter += in_p && in_g;
    }
    if (p + g == 0) return 1.0;
    return 2.0 * static_cast<double>(inter) / static_cast<double>(p + g);
}

/// Voxel counts backing a pooled Dice over many volumes.
struct DiceAccumulator {
    int64_t intersection = 0;
    int64_t pred_count = 0;
    int64_t gt_count = 0;

    void add(const LabelArray& pred, const LabelArray& gt, int64_t class_id) {
        if (pred.shape != gt.shape) {
            throw std::invalid_argument("dice accumulator: shape mismatch, " + Tensor::shape_str(pred.shape) +
                                        " vs " + Tensor::shape_str(gt.shape));
        }
        for (size_t i = 0; i < pred.data.size(); ++i) {
            const bool in_p = pred.data[i] == class_id;
            const bool in_g = gt.data[i] == class_id;
            pred_count += in_p;
            gt_count += in_g;
            intersection += in_p && in_g;
        }
    }

    double score() const {
        if (pred_count + gt_count == 0) return 1.0;
        return 2.0 * static_cast<double>(intersection) / static_cast<double>(pred_count + gt_count);
    }
};

/// Channel argmax of logits (or probabilities) into a label map.
inline LabelArray argmax_labels(const Tensor& logits) {
    const int64_t B = logits.dim(0), K = logits.dim(1);
    const int64_t V = logits.dim(2) * logits.dim(3) * logits.dim(4);
    LabelArray out({B, logits.dim(2), logits.dim(3), logits.dim(4)});
    const double* in = logits.ptr();
    for (int64_t b = 0; b < B; ++b) {
        const double* lb = in + b * K * V;
        uint8_t* ob = out.data.data() + b * V;
        for (int64_t v = 0; v < V; ++v) {
            int64_t best = 0;
            double best_val = lb[v];
            for (int64_t c = 1; c < K; ++c) {
                if (lb[c * V + v] > best_val) {
                    best_val = lb[c * V + v];
                    best = c;
                }
            }
            ob[v] = static_cast<uint8_t>(best);
        }
    }
    return out;
}

}  // namespace vfda
