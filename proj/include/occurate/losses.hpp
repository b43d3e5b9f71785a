#pragma once

// Cross-entropy losses over encounter-rate targets. ce_loss is the mean of
// the per-element CE terms; masked_ce_loss is sum(M_i * L_i) / sum(M_i), so
// an all-ones mask reproduces ce_loss exactly. Predictions are clamped to
// [1e-7, 1 - 1e-7] inside the loss only.

#include "occurate/autodiff.hpp"
#include "occurate/tensor.hpp"

namespace occurate::train {

constexpr double kProbClampLo = 1e-7;
constexpr double kProbClampHi = 1.0 - 1e-7;

namespace detail {

template <typename T>
ad::Var<T> ce_terms(ad::Graph<T>& g, ad::Var<T> pred, const Tensor<T>& target) {
    if (g.value(pred).shape() != target.shape())
        data_error("ce_loss: prediction shape " + shape_str(g.value(pred).shape()) +
                   " != target shape " + shape_str(target.shape()));
    ad::Var<T> y = g.constant(target);
    Tensor<T> ones(target.shape(), T(1));
    ad::Var<T> one = g.constant(ones);
    ad::Var<T> p = ad::clamp(pred, static_cast<T>(kProbClampLo), static_cast<T>(kProbClampHi));
    ad::Var<T> pos = ad::mul(y, ad::log_op(p));
    ad::Var<T> neg = ad::mul(ad::sub(one, y), ad::log_op(ad::sub(one, p)));
    return ad::scale(ad::add(pos, neg), T(-1));
}

} // namespace detail

template <typename T>
ad::Var<T> ce_loss_graph(ad::Graph<T>& g, ad::Var<T> pred, const Tensor<T>& target) {
    return ad::mean_all(detail::ce_terms(g, pred, target));
}

template <typename T>
ad::Var<T> masked_ce_loss_graph(ad::Graph<T>& g, ad::Var<T> pred, const Tensor<T>& target,
                                const Tensor<T>& mask) {
    if (mask.shape() != target.shape())
        data_error("masked_loss: mask shape " + shape_str(mask.shape()) + " != target shape " +
                   shape_str(target.shape()));
    double msum = 0.0;
    for (int64_t i = 0; i < mask.numel(); ++i) msum += static_cast<double>(mask[i]);
    if (msum == 0.0) data_error("masked_loss: empty mask");
    ad::Var<T> terms = detail::ce_terms(g, pred, target);
    ad::Var<T> weighted = ad::mul(terms, g.constant(mask));
    return ad::scale(ad::sum_all(weighted), static_cast<T>(1.0 / msum));
}

// Plain (graph-free) evaluations, used by tests and inference-time traces.
double ce_loss(const Tensor<double>& pred, const Tensor<double>& target);
double masked_ce_loss(const Tensor<double>& pred, const Tensor<double>& target,
                      const Tensor<double>& mask);

} // namespace occurate::train
