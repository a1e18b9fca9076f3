#pragma once

// Shared helpers for the test suites: finite-difference gradient oracle,
// naive reference implementations, small random-tensor factories.

#include <cmath>
#include <functional>
#include <vector>

#include "gegan/tensor.hpp"

namespace gegan::testing {

// Central finite differences vs reverse-mode gradients; returns the maximum
// relative error across all inputs. f maps the leaf list to a scalar tensor.
inline double max_grad_rel_error(
    const std::function<TensorD(const std::vector<TensorD>&)>& f,
    std::vector<TensorD> inputs, double h = 1e-5) {
    TensorD loss = f(inputs);
    auto gs = grad(loss, inputs);
    double worst = 0.0;
    for (std::size_t t = 0; t < inputs.size(); ++t) {
        auto& buf = inputs[t].mutable_data();
        for (std::size_t i = 0; i < buf.size(); ++i) {
            const double keep = buf[i];
            buf[i] = keep + h;
            const double fp = f(inputs).item();
            buf[i] = keep - h;
            const double fm = f(inputs).item();
            buf[i] = keep;
            const double fd = (fp - fm) / (2.0 * h);
            const double an = gs[t].data()[i];
            const double denom = std::max({std::abs(fd), std::abs(an), 1e-3});
            worst = std::max(worst, std::abs(fd - an) / denom);
        }
    }
    return worst;
}

// Naive 6-loop cross-correlation reference.
inline std::vector<double> conv2d_reference(const std::vector<double>& x,
                                            const std::vector<double>& w,
                                            std::int64_t B, std::int64_t C,
                                            std::int64_t H, std::int64_t W,
                                            std::int64_t O, std::int64_t K,
                                            std::int64_t stride, std::int64_t pad) {
    const std::int64_t Ho = (H + 2 * pad - K) / stride + 1;
    const std::int64_t Wo = (W + 2 * pad - K) / stride + 1;
    std::vector<double> y(static_cast<std::size_t>(B * O * Ho * Wo), 0.0);
    for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t o = 0; o < O; ++o)
            for (std::int64_t oi = 0; oi < Ho; ++oi)
                for (std::int64_t oj = 0; oj < Wo; ++oj) {
                    double acc = 0.0;
                    for (std::int64_t c = 0; c < C; ++c)
                        for (std::int64_t ki = 0; ki < K; ++ki)
                            for (std::int64_t kj = 0; kj < K; ++kj) {
                                const std::int64_t ii = oi * stride + ki - pad;
                                const std::int64_t jj = oj * stride + kj - pad;
                                if (ii < 0 || ii >= H || jj < 0 || jj >= W) continue;
                                acc += x[static_cast<std::size_t>(((b * C + c) * H + ii) * W + jj)] *
                                       w[static_cast<std::size_t>(((o * C + c) * K + ki) * K + kj)];
                            }
                    y[static_cast<std::size_t>(((b * O + o) * Ho + oi) * Wo + oj)] = acc;
                }
    return y;
}

inline double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

template <typename T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.data().size(); ++i)
        m = std::max(m, std::abs(double(a.data()[i]) - double(b.data()[i])));
    return m;
}

}  // namespace gegan::testing
