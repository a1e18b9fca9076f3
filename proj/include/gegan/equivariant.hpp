#pragma once

// Equivariant layers: lifting convolution, group convolution, group pooling,
// (class-conditional) group batch normalization, spectral normalization,
// upsampling, and pre-activation residual blocks.
//
// Group convolution is realized by expanding the stored filter bank over the
// stabilizer into an ordinary planar bank, so a single conv2d primitive
// serves every layer. Group::Z2 gives the standard (non-equivariant) layers
// through the same code path with |S| = 1.

#include <cstdint>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "gegan/symmetry.hpp"
#include "gegan/tensor.hpp"

namespace gegan {

template <typename T>
struct NamedTensor {
    std::string name;
    Tensor<T> tensor;
    bool trainable = true;
};

// Fill a leaf with an orthogonal matrix over its [rows, cols] reshape.
template <typename T>
void orthogonal_init(Tensor<T>& w, std::int64_t rows, Random& rng, T gain = T(1)) {
    const std::int64_t cols = w.size() / rows;
    const bool wide = cols > rows;
    const std::int64_t r = wide ? cols : rows, c = wide ? rows : cols;
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic> a(r, c);
    for (std::int64_t i = 0; i < r; ++i)
        for (std::int64_t j = 0; j < c; ++j) a(i, j) = rng.normal();
    Eigen::HouseholderQR<decltype(a)> qr(a);
    Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(r, c);
    // Sign-correct with the diagonal of R so the distribution is uniform.
    Eigen::MatrixXd rmat = qr.matrixQR().topRows(c).template triangularView<Eigen::Upper>();
    for (std::int64_t j = 0; j < c; ++j)
        if (rmat(j, j) < 0) q.col(j) = -q.col(j);
    auto& buf = w.mutable_data();
    for (std::int64_t i = 0; i < rows; ++i)
        for (std::int64_t j = 0; j < cols; ++j)
            buf[static_cast<std::size_t>(i * cols + j)] =
                static_cast<T>(gain * (wide ? q(j, i) : q(i, j)));
}

// ---------------------------------------------------------------------------
// Filter banks
// ---------------------------------------------------------------------------

enum class FilterDomain { Z2_IN, G_IN };

template <typename T>
struct GFilterBank {
    FilterDomain domain = FilterDomain::Z2_IN;
    Group group = Group::P4;
    Tensor<T> weights;  // [C_out, C_in, S_in, k, k]; S_in = 1 for lifting
    // Persistent power-iteration vectors over the [C_out, rest] reshape.
    Tensor<T> sn_u, sn_v;
    bool sn_zero_sigma = false;  // set when sigma == 0 was last observed
    std::shared_ptr<const std::vector<std::int64_t>> expand_map;  // cached

    std::int64_t c_out() const { return weights.dim(0); }
    std::int64_t c_in() const { return weights.dim(1); }
    std::int64_t s_in() const { return weights.dim(2); }
    std::int64_t ksize() const { return weights.dim(3); }
    std::int64_t s_out() const { return stabilizer_size(group); }
};

template <typename T>
GFilterBank<T> make_filter_bank(FilterDomain domain, Group group, std::int64_t c_out,
                                std::int64_t c_in, std::int64_t k, Random& rng) {
    GFilterBank<T> f;
    f.domain = domain;
    f.group = group;
    const std::int64_t s_in = domain == FilterDomain::Z2_IN ? 1 : stabilizer_size(group);
    f.weights = Tensor<T>::zeros({c_out, c_in, s_in, k, k}, /*requires_grad=*/true);
    orthogonal_init(f.weights, c_out, rng);
    const std::int64_t rest = c_in * s_in * k * k;
    f.sn_u = Tensor<T>::randn({c_out}, rng);
    f.sn_v = Tensor<T>::randn({rest}, rng);
    return f;
}

namespace detail {

// Index map from the stored bank [C_out, C_in, S_in, k, k] to the expanded
// planar bank [S_out*C_out... laid out as (o, s) x (c, t) x k x k] with
// output channel index o*S_out + s and input channel index c*S_in + t.
template <typename T>
std::shared_ptr<const std::vector<std::int64_t>> expand_index_map(GFilterBank<T>& f) {
    if (f.expand_map) return f.expand_map;
    const auto stab = stabilizer(f.group);
    const std::int64_t S = f.s_out(), Sin = f.s_in(), Co = f.c_out(), Ci = f.c_in(),
                       k = f.ksize(), kk = k * k;
    std::vector<std::int64_t> idx(
        static_cast<std::size_t>(Co * S * Ci * Sin * kk));
    std::size_t o_lin = 0;
    for (std::int64_t o = 0; o < Co; ++o) {
        for (std::int64_t s = 0; s < S; ++s) {
            const auto s_inv = inverse(stab[static_cast<std::size_t>(s)]);
            const auto plane = plane_index_map(stab[static_cast<std::size_t>(s)], k);
            for (std::int64_t c = 0; c < Ci; ++c) {
                for (std::int64_t t = 0; t < Sin; ++t) {
                    // group axis of the filter permutes by h -> s^-1 o h
                    const std::int64_t tsrc =
                        Sin == 1 ? 0
                                 : stabilizer_index(
                                       compose(s_inv, stab[static_cast<std::size_t>(t)]));
                    const std::int64_t base = ((o * Ci + c) * Sin + tsrc) * kk;
                    for (std::int64_t p = 0; p < kk; ++p)
                        idx[o_lin++] = base + plane[static_cast<std::size_t>(p)];
                }
            }
        }
    }
    f.expand_map = std::make_shared<const std::vector<std::int64_t>>(std::move(idx));
    return f.expand_map;
}

}  // namespace detail

// Expand the stored bank over the stabilizer into a planar filter bank
// [S_out*C_out, S_in*C_in, k, k] (differentiable).
template <typename T>
Tensor<T> expand_filters(GFilterBank<T>& f, const Tensor<T>& weights) {
    const std::int64_t S = f.s_out();
    Shape oshape{f.c_out() * S, f.c_in() * f.s_in(), f.ksize(), f.ksize()};
    return take(weights, detail::expand_index_map(f), std::move(oshape));
}

// ---------------------------------------------------------------------------
// Spectral normalization
// ---------------------------------------------------------------------------

// Power iteration on the [C_out, rest] reshape of the stored bank; returns
// the spectrally normalized weights as a graph node (gradient flows through
// sigma = u^T W v with u, v treated as constants).
template <typename T>
Tensor<T> spectral_normalize(GFilterBank<T>& f, int n_iter = 1) {
    const std::int64_t rows = f.c_out(), cols = f.weights.size() / rows;
    const auto& w = f.weights.data();
    auto& u = f.sn_u.mutable_data();
    auto& v = f.sn_v.mutable_data();
    detail::CMapM<T> W(w.data(), rows, cols);
    Eigen::Map<Eigen::Vector<T, Eigen::Dynamic>> uu(u.data(), rows), vv(v.data(), cols);
    for (int it = 0; it < n_iter; ++it) {
        vv.noalias() = W.transpose() * uu;
        const T nv = vv.norm();
        if (nv > T(0)) vv /= nv;
        uu.noalias() = W * vv;
        const T nu = uu.norm();
        if (nu > T(0)) uu /= nu;
    }
    // sigma = u^T W v
    Tensor<T> ut = reshape(f.sn_u.detach(), {1, rows});
    Tensor<T> vt = reshape(f.sn_v.detach(), {cols, 1});
    Tensor<T> wm = reshape(f.weights, {rows, cols});
    Tensor<T> sigma = matmul(matmul(ut, wm), vt);  // [1,1]
    if (sigma.item() == T(0)) {
        f.sn_zero_sigma = true;
        return f.weights;
    }
    f.sn_zero_sigma = false;
    Tensor<T> denom = broadcast_to(reshape(sigma, {1, 1, 1, 1, 1}), f.weights.shape());
    return div(f.weights, denom);
}

// Spectral norm estimate without touching persistent state (diagnostics).
template <typename T>
T spectral_norm_estimate(const GFilterBank<T>& f, int n_iter = 50) {
    const std::int64_t rows = f.c_out(), cols = f.weights.size() / rows;
    detail::CMapM<T> W(f.weights.data().data(), rows, cols);
    Eigen::Vector<T, Eigen::Dynamic> u = Eigen::Vector<T, Eigen::Dynamic>::Ones(rows);
    for (int it = 0; it < n_iter; ++it) {
        Eigen::Vector<T, Eigen::Dynamic> v = W.transpose() * u;
        if (v.norm() > T(0)) v /= v.norm();
        u = W * v;
        if (u.norm() > T(0)) u /= u.norm();
    }
    return (W.transpose() * u).norm();
}

// ---------------------------------------------------------------------------
// Convolution layers
// ---------------------------------------------------------------------------

// Lifting convolution: planar input [B,C,H,W] -> group features [B,C_out,S,H',W'].
template <typename T>
Tensor<T> lift_conv(const Tensor<T>& x, GFilterBank<T>& f, std::int64_t pad,
                    const Tensor<T>& weights) {
    if (f.domain != FilterDomain::Z2_IN)
        throw std::invalid_argument("lift_conv: filter bank domain is not Z2_IN");
    Tensor<T> wexp = expand_filters(f, weights);
    Tensor<T> y = conv2d(x, wexp, 1, pad);
    return reshape(y, {y.dim(0), f.c_out(), f.s_out(), y.dim(2), y.dim(3)});
}

template <typename T>
Tensor<T> lift_conv(const Tensor<T>& x, GFilterBank<T>& f, std::int64_t pad = 0) {
    return lift_conv(x, f, pad, f.weights);
}

// Group convolution: [B,C,S,H,W] -> [B,C_out,S,H',W'].
template <typename T>
Tensor<T> gconv(const Tensor<T>& x, GFilterBank<T>& f, std::int64_t pad,
                const Tensor<T>& weights) {
    if (f.domain != FilterDomain::G_IN)
        throw std::invalid_argument("gconv: filter bank domain is not G_IN");
    if (x.rank() != 5 || x.dim(2) != f.s_in())
        throw std::invalid_argument("gconv: group axis size mismatch: input " +
                                    shape_str(x.shape()) + ", bank expects S=" +
                                    std::to_string(f.s_in()));
    Tensor<T> xp = reshape(x, {x.dim(0), x.dim(1) * x.dim(2), x.dim(3), x.dim(4)});
    Tensor<T> wexp = expand_filters(f, weights);
    Tensor<T> y = conv2d(xp, wexp, 1, pad);
    return reshape(y, {y.dim(0), f.c_out(), f.s_out(), y.dim(2), y.dim(3)});
}

template <typename T>
Tensor<T> gconv(const Tensor<T>& x, GFilterBank<T>& f, std::int64_t pad = 0) {
    return gconv(x, f, pad, f.weights);
}

enum class PoolKind { Max, Avg };

// Reduce over the group axis only: [B,C,S,H,W] -> [B,C,H,W].
template <typename T>
Tensor<T> group_pool(const Tensor<T>& x, PoolKind kind) {
    if (x.rank() != 5) throw std::invalid_argument("group_pool: expects [B,C,S,H,W]");
    Tensor<T> r = kind == PoolKind::Max ? reduce_max(x, {2}) : reduce_mean(x, {2});
    return r;
}

// Global average over the trailing two (planar) axes.
template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
    const int r = x.rank();
    return reduce_mean(x, {r - 2, r - 1});
}

// A convolution layer owning its bank and bias, with optional spectral norm.
// Handles lifting, group, and standard planar convolution (Group::Z2).
template <typename T>
struct GConvLayer {
    GFilterBank<T> bank;
    Tensor<T> bias;  // [C_out], shared across the group axis
    bool use_sn = true;
    std::int64_t pad = 1;

    GConvLayer() = default;
    GConvLayer(FilterDomain domain, Group group, std::int64_t c_out, std::int64_t c_in,
               std::int64_t k, std::int64_t pad_, bool sn, Random& rng)
        : bank(make_filter_bank<T>(domain, group, c_out, c_in, k, rng)),
          bias(Tensor<T>::zeros({c_out}, true)),
          use_sn(sn),
          pad(pad_) {}

    // x: [B,C,H,W] for Z2_IN banks, [B,C,S,H,W] for G_IN banks.
    Tensor<T> forward(const Tensor<T>& x, int sn_iters = 1) {
        Tensor<T> w = use_sn ? spectral_normalize(bank, sn_iters) : bank.weights;
        Tensor<T> y;
        if (bank.domain == FilterDomain::Z2_IN) {
            y = lift_conv(x, bank, pad, w);
        } else {
            y = gconv(x, bank, pad, w);
        }
        Tensor<T> b = broadcast_to(reshape(bias, {1, bank.c_out(), 1, 1, 1}), y.shape());
        y = add(y, b);
        if (bank.group == Group::Z2)  // collapse the singleton group axis
            y = reshape(y, {y.dim(0), y.dim(1), y.dim(3), y.dim(4)});
        return y;
    }

    void collect(const std::string& prefix, std::vector<NamedTensor<T>>& out) {
        out.push_back({prefix + ".weight", bank.weights, true});
        out.push_back({prefix + ".bias", bias, true});
        out.push_back({prefix + ".sn_u", bank.sn_u, false});
        out.push_back({prefix + ".sn_v", bank.sn_v, false});
    }
};

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

// Batch normalization with one moment pair per group-feature map: statistics
// are taken jointly over batch, group, and spatial axes.
template <typename T>
struct GroupBatchNorm {
    Tensor<T> gamma, beta;               // [C] (affine variant only)
    Tensor<T> running_mean, running_var; // [C], persistent
    T momentum = T(0.1);
    T eps = T(1e-5);
    bool affine = true;

    GroupBatchNorm() = default;
    GroupBatchNorm(std::int64_t c, bool affine_) : affine(affine_) {
        if (affine) {
            gamma = Tensor<T>::full({c}, T(1), true);
            beta = Tensor<T>::zeros({c}, true);
        }
        running_mean = Tensor<T>::zeros({c});
        running_var = Tensor<T>::full({c}, T(1));
    }

    // x: [B,C,S,H,W] (use S=1 reshape for planar features). Returns the
    // standardized (and, if affine, scaled/shifted) tensor.
    // Accepts planar [B,C,H,W] as the S = 1 case.
    Tensor<T> forward(const Tensor<T>& x0, bool training) {
        const bool planar = x0.rank() == 4;
        Tensor<T> x = planar
            ? reshape(x0, {x0.dim(0), x0.dim(1), 1, x0.dim(2), x0.dim(3)})
            : x0;
        Tensor<T> y = forward5(x, training);
        return planar ? reshape(y, x0.shape()) : y;
    }

    Tensor<T> forward5(const Tensor<T>& x, bool training) {
        if (x.rank() != 5)
            throw std::invalid_argument("group_batch_norm: expects [B,C,S,H,W]");
        if (x.dim(0) == 0) throw std::invalid_argument("group_batch_norm: zero batch");
        const std::int64_t C = x.dim(1);
        const Shape stat_shape{1, C, 1, 1, 1};
        Tensor<T> mean, var;
        if (training) {
            mean = reduce_mean(x, {0, 2, 3, 4}, /*keepdim=*/true);
            Tensor<T> xc = sub(x, broadcast_to(mean, x.shape()));
            var = reduce_mean(mul(xc, xc), {0, 2, 3, 4}, /*keepdim=*/true);
            auto& rm = running_mean.mutable_data();
            auto& rv = running_var.mutable_data();
            for (std::int64_t c = 0; c < C; ++c) {
                rm[size_t(c)] = (T(1) - momentum) * rm[size_t(c)] +
                                momentum * mean.data()[size_t(c)];
                rv[size_t(c)] = (T(1) - momentum) * rv[size_t(c)] +
                                momentum * var.data()[size_t(c)];
            }
        } else {
            mean = reshape(running_mean.detach(), stat_shape);
            var = reshape(running_var.detach(), stat_shape);
        }
        Tensor<T> inv_std = div(Tensor<T>::full(stat_shape, T(1)),
                                sqrt_(add_scalar(var, eps)));
        Tensor<T> xhat = mul(sub(x, broadcast_to(mean, x.shape())),
                             broadcast_to(inv_std, x.shape()));
        if (!affine) return xhat;
        Tensor<T> g = broadcast_to(reshape(gamma, stat_shape), x.shape());
        Tensor<T> b = broadcast_to(reshape(beta, stat_shape), x.shape());
        return add(mul(xhat, g), b);
    }

    void collect(const std::string& prefix, std::vector<NamedTensor<T>>& out) {
        if (affine) {
            out.push_back({prefix + ".gamma", gamma, true});
            out.push_back({prefix + ".beta", beta, true});
        }
        out.push_back({prefix + ".running_mean", running_mean, false});
        out.push_back({prefix + ".running_var", running_var, false});
    }
};

// Class-conditional batch normalization: standardize per group-feature map,
// then apply per-channel scale/shift produced by dense maps of the
// conditioning vector h. Initialization makes gamma = 1, beta = 0, so the
// layer starts as plain normalization.
template <typename T>
struct CCBN {
    GroupBatchNorm<T> bn;
    Tensor<T> wg, bg, wb, bb;  // dense maps D -> C

    CCBN() = default;
    CCBN(std::int64_t c, std::int64_t d) : bn(c, /*affine=*/false) {
        wg = Tensor<T>::zeros({d, c}, true);
        bg = Tensor<T>::full({c}, T(1), true);
        wb = Tensor<T>::zeros({d, c}, true);
        bb = Tensor<T>::zeros({c}, true);
    }

    Tensor<T> forward(const Tensor<T>& x0, const Tensor<T>& h, bool training) {
        if (h.rank() != 2 || h.dim(1) != wg.dim(0))
            throw std::invalid_argument("ccbn: embedding width mismatch: h " +
                                        shape_str(h.shape()) + ", expects D=" +
                                        std::to_string(wg.dim(0)));
        const bool planar = x0.rank() == 4;
        Tensor<T> x = planar
            ? reshape(x0, {x0.dim(0), x0.dim(1), 1, x0.dim(2), x0.dim(3)})
            : x0;
        Tensor<T> xhat = bn.forward(x, training);
        const std::int64_t B = x.dim(0), C = x.dim(1);
        Tensor<T> g = dense(h, wg, bg);  // [B,C]
        Tensor<T> b = dense(h, wb, bb);
        Tensor<T> gb = broadcast_to(reshape(g, {B, C, 1, 1, 1}), x.shape());
        Tensor<T> bbcast = broadcast_to(reshape(b, {B, C, 1, 1, 1}), x.shape());
        Tensor<T> y = add(mul(xhat, gb), bbcast);
        return planar ? reshape(y, x0.shape()) : y;
    }

    std::int64_t param_count() const {
        return wg.size() + bg.size() + wb.size() + bb.size();
    }

    void collect(const std::string& prefix, std::vector<NamedTensor<T>>& out) {
        out.push_back({prefix + ".wg", wg, true});
        out.push_back({prefix + ".bg", bg, true});
        out.push_back({prefix + ".wb", wb, true});
        out.push_back({prefix + ".bb", bb, true});
        bn.collect(prefix + ".bn", out);
    }
};

// ---------------------------------------------------------------------------
// Residual blocks (pre-activation)
// ---------------------------------------------------------------------------

// Generator block: [CCBN -> ReLU -> upsample -> gconvSN -> CCBN -> ReLU ->
// gconvSN] + skip (upsample + 1x1 gconvSN when the shape changes).
template <typename T>
struct ResBlockG {
    CCBN<T> ccbn1, ccbn2;
    GConvLayer<T> conv1, conv2, skip;
    bool upsample = true;
    bool has_skip_conv = false;

    ResBlockG() = default;
    ResBlockG(Group group, std::int64_t c_in, std::int64_t c_out, std::int64_t d,
              bool upsample_, Random& rng)
        : ccbn1(c_in, d),
          ccbn2(c_out, d),
          conv1(block_domain(group), group, c_out, c_in, 3, 1, true, rng),
          conv2(block_domain(group), group, c_out, c_out, 3, 1, true, rng),
          upsample(upsample_),
          has_skip_conv(c_in != c_out) {
        if (has_skip_conv)
            skip = GConvLayer<T>(block_domain(group), group, c_out, c_in, 1, 0, true, rng);
    }

    static FilterDomain block_domain(Group g) {
        return g == Group::Z2 ? FilterDomain::Z2_IN : FilterDomain::G_IN;
    }

    Tensor<T> forward(const Tensor<T>& x, const Tensor<T>& h, bool training) {
        Tensor<T> y = relu(ccbn1.forward(x, h, training));
        if (upsample) y = upsample_nearest(y, 2);
        y = conv1.forward(y);
        y = relu(ccbn2.forward(y, h, training));
        y = conv2.forward(y);
        Tensor<T> s = upsample ? upsample_nearest(x, 2) : x;
        if (has_skip_conv) s = skip.forward(s);
        return add(y, s);
    }

    void collect(const std::string& prefix, std::vector<NamedTensor<T>>& out) {
        ccbn1.collect(prefix + ".ccbn1", out);
        ccbn2.collect(prefix + ".ccbn2", out);
        conv1.collect(prefix + ".conv1", out);
        conv2.collect(prefix + ".conv2", out);
        if (has_skip_conv) skip.collect(prefix + ".skip", out);
    }
};

// Discriminator block: [ReLU -> gconvSN -> ReLU -> gconvSN -> pool] + skip
// (pool + 1x1 gconvSN when the shape changes).
template <typename T>
struct ResBlockD {
    GConvLayer<T> conv1, conv2, skip;
    bool downsample = true;
    bool has_skip_conv = false;

    ResBlockD() = default;
    ResBlockD(Group group, std::int64_t c_in, std::int64_t c_out, bool downsample_,
              Random& rng)
        : conv1(ResBlockG<T>::block_domain(group), group, c_out, c_in, 3, 1, true, rng),
          conv2(ResBlockG<T>::block_domain(group), group, c_out, c_out, 3, 1, true, rng),
          downsample(downsample_),
          has_skip_conv(c_in != c_out) {
        if (has_skip_conv)
            skip = GConvLayer<T>(ResBlockG<T>::block_domain(group), group, c_out, c_in,
                                 1, 0, true, rng);
    }

    Tensor<T> forward(const Tensor<T>& x) {
        Tensor<T> y = conv1.forward(relu(x));
        y = conv2.forward(relu(y));
        if (downsample) y = avg_pool2(y);
        Tensor<T> s = downsample ? avg_pool2(x) : x;
        if (has_skip_conv) s = skip.forward(s);
        return add(y, s);
    }

    void collect(const std::string& prefix, std::vector<NamedTensor<T>>& out) {
        conv1.collect(prefix + ".conv1", out);
        conv2.collect(prefix + ".conv2", out);
        if (has_skip_conv) skip.collect(prefix + ".skip", out);
    }
};

}  // namespace gegan
