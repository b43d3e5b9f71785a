#include "occurate/losses.hpp"

#include <algorithm>
#include <cmath>

namespace occurate::train {

namespace {

double ce_term(double y, double p) {
    p = std::clamp(p, kProbClampLo, kProbClampHi);
    return -y * std::log(p) - (1.0 - y) * std::log(1.0 - p);
}

} // namespace

double ce_loss(const Tensor<double>& pred, const Tensor<double>& target) {
    if (pred.shape() != target.shape())
        data_error("ce_loss: prediction shape " + shape_str(pred.shape()) + " != target shape " +
                   shape_str(target.shape()));
    double acc = 0.0;
    for (int64_t i = 0; i < pred.numel(); ++i) acc += ce_term(target[i], pred[i]);
    return acc / static_cast<double>(pred.numel());
}

double masked_ce_loss(const Tensor<double>& pred, const Tensor<double>& target,
                      const Tensor<double>& mask) {
    if (pred.shape() != target.shape() || mask.shape() != target.shape())
        data_error("masked_loss: shape mismatch pred " + shape_str(pred.shape()) + " target " +
                   shape_str(target.shape()) + " mask " + shape_str(mask.shape()));
    double acc = 0.0, msum = 0.0;
    for (int64_t i = 0; i < pred.numel(); ++i) {
        acc += mask[i] * ce_term(target[i], pred[i]);
        msum += mask[i];
    }
    if (msum == 0.0) data_error("masked_loss: empty mask");
    return acc / msum;
}

} // namespace occurate::train
