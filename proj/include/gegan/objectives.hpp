#pragma once

// Adversarial objectives: non-saturating, Wasserstein, relativistic-average,
// and hinge losses; R1 and WGAN-GP gradient penalties; balanced consistency
// regularization (bCR). Losses work on raw logits with softplus forms.

#include <optional>
#include <stdexcept>

#include "gegan/symmetry.hpp"
#include "gegan/tensor.hpp"

namespace gegan {

enum class LossKind { NSGAN, WGAN, RAGAN, HINGE };

inline const char* loss_kind_name(LossKind k) {
    switch (k) {
        case LossKind::NSGAN: return "nsgan";
        case LossKind::WGAN: return "wgan";
        case LossKind::RAGAN: return "ragan";
        case LossKind::HINGE: return "hinge";
    }
    return "?";
}

template <typename T>
struct BCRConfig {
    T lambda_real = T(0.1);
    T lambda_fake = T(0.05);
    Group aug_group = Group::P4;
};

template <typename T>
struct ObjectiveConfig {
    LossKind loss_kind = LossKind::NSGAN;
    T r1_gamma = T(0.1);
    T wgan_gp_weight = T(10);
    std::optional<BCRConfig<T>> bcr;

    // WGAN pairs with the GP penalty; every other loss with R1. Exactly one
    // penalty family may be active.
    void validate() const {
        if (r1_gamma < T(0) || wgan_gp_weight < T(0))
            throw std::invalid_argument("objective: penalty weights must be >= 0");
        if (loss_kind == LossKind::WGAN) {
            if (r1_gamma != T(0))
                throw std::invalid_argument(
                    "objective: WGAN uses wgan_gp_weight; set r1_gamma = 0");
        } else if (wgan_gp_weight != T(0)) {
            throw std::invalid_argument(
                "objective: non-WGAN losses use r1_gamma; set wgan_gp_weight = 0");
        }
    }
};

namespace detail {

template <typename T>
Tensor<T> as_flat_logits(const Tensor<T>& x, const char* op) {
    if (x.size() == 0) throw std::invalid_argument(std::string(op) + ": empty batch");
    if (x.rank() == 1) return x;
    if (x.rank() == 2 && x.dim(1) == 1) return reshape(x, {x.dim(0)});
    throw std::invalid_argument(std::string(op) +
                                ": logits must be [B] or [B,1], got " +
                                shape_str(x.shape()));
}

}  // namespace detail

// Discriminator loss (minimized by D).
template <typename T>
Tensor<T> d_loss(const Tensor<T>& real_logits, const Tensor<T>& fake_logits,
                 LossKind kind) {
    Tensor<T> r = detail::as_flat_logits(real_logits, "d_loss");
    Tensor<T> f = detail::as_flat_logits(fake_logits, "d_loss");
    switch (kind) {
        case LossKind::NSGAN:
            return add(mean_all(softplus_(neg(r))), mean_all(softplus_(f)));
        case LossKind::WGAN:
            return sub(mean_all(f), mean_all(r));
        case LossKind::RAGAN: {
            Tensor<T> rr = sub(r, broadcast_to(mean_all(f), r.shape()));
            Tensor<T> ff = sub(f, broadcast_to(mean_all(r), f.shape()));
            return add(mean_all(softplus_(neg(rr))), mean_all(softplus_(ff)));
        }
        case LossKind::HINGE:
            return add(mean_all(relu(add_scalar(neg(r), T(1)))),
                       mean_all(relu(add_scalar(f, T(1)))));
    }
    throw std::logic_error("d_loss: unknown loss kind");
}

// Generator loss (minimized by G).
template <typename T>
Tensor<T> g_loss(const Tensor<T>& real_logits, const Tensor<T>& fake_logits,
                 LossKind kind) {
    Tensor<T> f = detail::as_flat_logits(fake_logits, "g_loss");
    switch (kind) {
        case LossKind::NSGAN:
            return mean_all(softplus_(neg(f)));
        case LossKind::WGAN:
            return neg(mean_all(f));
        case LossKind::RAGAN: {
            Tensor<T> r = detail::as_flat_logits(real_logits, "g_loss");
            Tensor<T> rr = sub(r, broadcast_to(mean_all(f), r.shape()));
            Tensor<T> ff = sub(f, broadcast_to(mean_all(r), f.shape()));
            return add(mean_all(softplus_(neg(ff))), mean_all(softplus_(rr)));
        }
        case LossKind::HINGE:
            return neg(mean_all(f));
    }
    throw std::logic_error("g_loss: unknown loss kind");
}

namespace detail {

// Per-sample sum over all non-batch axes -> [B].
template <typename T>
Tensor<T> per_sample_sum(const Tensor<T>& x) {
    std::vector<std::int64_t> axes;
    for (int a = 1; a < x.rank(); ++a) axes.push_back(a);
    return axes.empty() ? x : reduce_sum(x, axes);
}

}  // namespace detail

// R1 = (gamma/2) * E_batch[ ||d D(x) / d x||^2 ] at the real data. The
// returned scalar participates in the graph, so optimizing it differentiates
// through the gradient (double backward).
template <typename T, typename DFn>
Tensor<T> r1_penalty(DFn&& d, const Tensor<T>& real_batch, T gamma) {
    Tensor<T> x = Tensor<T>::from(real_batch.shape(), real_batch.data(),
                                  /*requires_grad=*/true);
    Tensor<T> logits = detail::as_flat_logits(d(x), "r1_penalty");
    if (logits.dim(0) != x.dim(0))
        throw std::invalid_argument("r1_penalty: D must emit one scalar per sample");
    Tensor<T> gx = grad(sum_all(logits), {x})[0];
    Tensor<T> sq = detail::per_sample_sum(mul(gx, gx));  // [B]
    return mul_scalar(mean_all(sq), gamma / T(2));
}

// WGAN gradient penalty: weight * E[ (||d D(xhat)/d xhat|| - 1)^2 ] at random
// per-sample interpolates xhat = eps*x_r + (1-eps)*x_f, eps ~ U(0,1).
template <typename T, typename DFn>
Tensor<T> wgan_gp(DFn&& d, const Tensor<T>& real_batch, const Tensor<T>& fake_batch,
                  T weight, Random& rng) {
    if (real_batch.shape() != fake_batch.shape())
        throw std::invalid_argument("wgan_gp: batch shape mismatch: " +
                                    shape_str(real_batch.shape()) + " vs " +
                                    shape_str(fake_batch.shape()));
    const std::int64_t B = real_batch.dim(0);
    const std::int64_t per = real_batch.size() / B;
    std::vector<T> mix(real_batch.data().size());
    for (std::int64_t b = 0; b < B; ++b) {
        const T eps = static_cast<T>(rng.uniform());
        for (std::int64_t i = 0; i < per; ++i) {
            const std::size_t k = static_cast<std::size_t>(b * per + i);
            mix[k] = eps * real_batch.data()[k] + (T(1) - eps) * fake_batch.data()[k];
        }
    }
    Tensor<T> xhat = Tensor<T>::from(real_batch.shape(), std::move(mix), true);
    Tensor<T> logits = detail::as_flat_logits(d(xhat), "wgan_gp");
    if (logits.dim(0) != B)
        throw std::invalid_argument("wgan_gp: D must emit one scalar per sample");
    Tensor<T> gx = grad(sum_all(logits), {xhat})[0];
    Tensor<T> norms = sqrt_(detail::per_sample_sum(mul(gx, gx)));  // [B]
    Tensor<T> dev = add_scalar(norms, T(-1));
    return mul_scalar(mean_all(mul(dev, dev)), weight);
}

// Balanced consistency regularization: one augmentation T drawn uniformly
// from the stabilizer per batch (resampling per sample is the untaken
// alternative), applied to both the real and the fake batch.
template <typename T, typename DFn>
Tensor<T> bcr_penalty(DFn&& d, const Tensor<T>& real_batch, const Tensor<T>& fake_batch,
                      const BCRConfig<T>& cfg, Random& rng) {
    const auto stab = stabilizer(cfg.aug_group);
    const auto& a = stab[static_cast<std::size_t>(rng.below(std::int64_t(stab.size())))];
    auto branch = [&](const Tensor<T>& x) {
        Tensor<T> base = detail::as_flat_logits(d(x), "bcr_penalty");
        Tensor<T> aug = detail::as_flat_logits(d(act_on_image(a, x)), "bcr_penalty");
        Tensor<T> diff = sub(base, aug);
        return mean_all(mul(diff, diff));
    };
    return add(mul_scalar(branch(real_batch), cfg.lambda_real),
               mul_scalar(branch(fake_batch), cfg.lambda_fake));
}

}  // namespace gegan
