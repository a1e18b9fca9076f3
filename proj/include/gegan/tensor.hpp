#pragma once

// Dense n-dimensional tensors with reverse-mode automatic differentiation.
//
// Every operation builds a node on an implicit tape (the DAG of parents,
// ordered by creation id). Backward rules are expressed in terms of the same
// differentiable ops, so gradients of gradients (needed by the R1 and WGAN-GP
// penalties) come for free.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <Eigen/Dense>

namespace gegan {

using Shape = std::vector<std::int64_t>;

inline std::int64_t numel(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::int64_t{1},
                           std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

// Deterministic RNG with serializable state. Box-Muller is implemented here
// rather than via std::normal_distribution so that checkpointed streams are
// reproducible independent of the standard library.
class Random {
  public:
    explicit Random(std::uint64_t seed = 0) : gen_(seed) {}

    double uniform() {  // [0, 1)
        return (gen_() >> 11) * 0x1.0p-53;
    }
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1, u2;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }
    // Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n) {
        const std::uint64_t lim = std::numeric_limits<std::uint64_t>::max() -
                                  std::numeric_limits<std::uint64_t>::max() % n;
        std::uint64_t x;
        do {
            x = gen_();
        } while (x >= lim);
        return x % n;
    }

    std::mt19937_64& engine() { return gen_; }
    bool has_spare() const { return has_spare_; }
    double spare() const { return spare_; }
    void set_spare(bool has, double v) {
        has_spare_ = has;
        spare_ = v;
    }

  private:
    std::mt19937_64 gen_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

template <typename T>
class Tensor {
  public:
    struct Node;
    using NodePtr = std::shared_ptr<Node>;
    using Vjp = std::function<std::vector<Tensor>(const Tensor& grad_out)>;

    struct Node {
        Shape shape;
        std::vector<T> data;
        bool requires_grad = false;  // true for leaves and anything built from them
        bool is_leaf = true;
        std::vector<Tensor> parents;
        Vjp vjp;
        std::uint64_t id = 0;                 // creation order == topological order
        std::shared_ptr<std::vector<T>> grad; // leaf gradient accumulator
    };

    Tensor() = default;

    static Tensor from(Shape shape, std::vector<T> data, bool requires_grad = false) {
        if (numel(shape) != static_cast<std::int64_t>(data.size()))
            throw std::invalid_argument("tensor: data length " +
                                        std::to_string(data.size()) +
                                        " does not match shape " + shape_str(shape));
        Tensor t;
        t.n_ = std::make_shared<Node>();
        t.n_->shape = std::move(shape);
        t.n_->data = std::move(data);
        t.n_->requires_grad = requires_grad;
        t.n_->id = next_id();
        return t;
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        std::vector<T> d(static_cast<std::size_t>(numel(shape)), T(0));
        return from(std::move(shape), std::move(d), requires_grad);
    }

    static Tensor full(Shape shape, T value, bool requires_grad = false) {
        std::vector<T> d(static_cast<std::size_t>(numel(shape)), value);
        return from(std::move(shape), std::move(d), requires_grad);
    }

    static Tensor scalar(T value) { return from({1}, {value}); }

    static Tensor randn(Shape shape, Random& rng, T stddev = T(1),
                        bool requires_grad = false) {
        std::vector<T> d(static_cast<std::size_t>(numel(shape)));
        for (auto& x : d) x = static_cast<T>(rng.normal()) * stddev;
        return from(std::move(shape), std::move(d), requires_grad);
    }

    bool defined() const { return static_cast<bool>(n_); }
    const Shape& shape() const { return n_->shape; }
    std::int64_t size() const { return static_cast<std::int64_t>(n_->data.size()); }
    std::int64_t dim(int i) const { return n_->shape[static_cast<std::size_t>(i)]; }
    int rank() const { return static_cast<int>(n_->shape.size()); }
    const std::vector<T>& data() const { return n_->data; }
    std::vector<T>& mutable_data() { return n_->data; }
    bool requires_grad() const { return n_->requires_grad; }
    bool is_leaf() const { return n_->is_leaf; }
    Node* node() const { return n_.get(); }

    T item() const {
        if (size() != 1) throw std::invalid_argument("item(): tensor is not scalar");
        return n_->data[0];
    }

    // Leaf gradient accessors (populated by backward()).
    bool has_grad() const { return n_->grad != nullptr; }
    const std::vector<T>& grad() const {
        if (!n_->grad) throw std::runtime_error("grad(): no gradient accumulated");
        return *n_->grad;
    }
    void zero_grad() {
        if (n_->grad) std::fill(n_->grad->begin(), n_->grad->end(), T(0));
    }

    // A view of the same buffer with gradient tracking severed.
    Tensor detach() const {
        Tensor t;
        t.n_ = std::make_shared<Node>();
        t.n_->shape = n_->shape;
        t.n_->data = n_->data;
        t.n_->id = next_id();
        return t;
    }

    static Tensor make_op(Shape shape, std::vector<T> data,
                          std::vector<Tensor> parents, Vjp vjp) {
        Tensor t = from(std::move(shape), std::move(data));
        bool needs = false;
        for (const auto& p : parents) needs = needs || p.requires_grad();
        if (needs) {
            t.n_->requires_grad = true;
            t.n_->is_leaf = false;
            t.n_->parents = std::move(parents);
            t.n_->vjp = std::move(vjp);
        }
        return t;
    }

  private:
    static std::uint64_t next_id() {
        static std::uint64_t counter = 0;
        return ++counter;
    }
    NodePtr n_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

namespace detail {

template <typename T>
void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
    if (a.shape() != b.shape())
        throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                    shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    detail::check_same_shape(a, b, "add");
    std::vector<T> out(a.data().size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
    return Tensor<T>::make_op(a.shape(), std::move(out), {a, b},
        [](const Tensor<T>& g) { return std::vector<Tensor<T>>{g, g}; });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    detail::check_same_shape(a, b, "sub");
    std::vector<T> out(a.data().size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
    return Tensor<T>::make_op(a.shape(), std::move(out), {a, b},
        [](const Tensor<T>& g) {
            return std::vector<Tensor<T>>{g, mul_scalar(g, T(-1))};
        });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    detail::check_same_shape(a, b, "mul");
    std::vector<T> out(a.data().size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
    return Tensor<T>::make_op(a.shape(), std::move(out), {a, b},
        [a, b](const Tensor<T>& g) {
            return std::vector<Tensor<T>>{mul(g, b), mul(g, a)};
        });
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
    detail::check_same_shape(a, b, "div");
    std::vector<T> out(a.data().size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] / b.data()[i];
    return Tensor<T>::make_op(a.shape(), std::move(out), {a, b},
        [a, b](const Tensor<T>& g) {
            Tensor<T> ga = div(g, b);
            Tensor<T> gb = mul_scalar(div(mul(g, a), mul(b, b)), T(-1));
            return std::vector<Tensor<T>>{ga, gb};
        });
}

template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& a, T s) {
    std::vector<T> out(a.data().size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * s;
    return Tensor<T>::make_op(a.shape(), std::move(out), {a},
        [s](const Tensor<T>& g) {
            return std::vector<Tensor<T>>{mul_scalar(g, s)};
        });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T s) {
    std::vector<T> out(a.data().size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + s;
    return Tensor<T>::make_op(a.shape(), std::move(out), {a},
        [](const Tensor<T>& g) { return std::vector<Tensor<T>>{g}; });
}

template <typename T>
Tensor<T> neg(const Tensor<T>& a) { return mul_scalar(a, T(-1)); }

// ---------------------------------------------------------------------------
// Pointwise nonlinearities
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
    std::vector<T> out(a.data().size());
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = a.data()[i] > T(0) ? a.data()[i] : T(0);
    return Tensor<T>::make_op(a.shape(), std::move(out), {a},
        [a](const Tensor<T>& g) {
            std::vector<T> m(a.data().size());
            for (std::size_t i = 0; i < m.size(); ++i)
                m[i] = a.data()[i] > T(0) ? T(1) : T(0);
            Tensor<T> mask = Tensor<T>::from(a.shape(), std::move(m));
            return std::vector<Tensor<T>>{mul(g, mask)};
        });
}

template <typename T>
Tensor<T> leaky_relu(const Tensor<T>& a, T slope = T(0.2)) {
    std::vector<T> out(a.data().size());
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = a.data()[i] > T(0) ? a.data()[i] : slope * a.data()[i];
    return Tensor<T>::make_op(a.shape(), std::move(out), {a},
        [a, slope](const Tensor<T>& g) {
            std::vector<T> m(a.data().size());
            for (std::size_t i = 0; i < m.size(); ++i)
                m[i] = a.data()[i] > T(0) ? T(1) : slope;
            Tensor<T> mask = Tensor<T>::from(a.shape(), std::move(m));
            return std::vector<Tensor<T>>{mul(g, mask)};
        });
}

template <typename T>
Tensor<T> tanh_(const Tensor<T>& a) {
    std::vector<T> out(a.data().size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(a.data()[i]);
    // The vjp recomputes from the input so second derivatives stay exact.
    return Tensor<T>::make_op(a.shape(), std::move(out), {a},
        [a](const Tensor<T>& g) {
            Tensor<T> y = tanh_(a);
            Tensor<T> one = Tensor<T>::full(y.shape(), T(1));
            return std::vector<Tensor<T>>{mul(g, sub(one, mul(y, y)))};
        });
}

template <typename T>
Tensor<T> sigmoid_(const Tensor<T>& a) {
    std::vector<T> out(a.data().size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const T x = a.data()[i];
        out[i] = x >= T(0) ? T(1) / (T(1) + std::exp(-x))
                           : std::exp(x) / (T(1) + std::exp(x));
    }
    return Tensor<T>::make_op(a.shape(), std::move(out), {a},
        [a](const Tensor<T>& g) {
            Tensor<T> y = sigmoid_(a);
            Tensor<T> one = Tensor<T>::full(y.shape(), T(1));
            return std::vector<Tensor<T>>{mul(g, mul(y, sub(one, y)))};
        });
}

// log(1 + exp(x)), overflow-safe.
template <typename T>
Tensor<T> softplus_(const Tensor<T>& a) {
    std::vector<T> out(a.data().size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const T x = a.data()[i];
        out[i] = x > T(0) ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
    }
    return Tensor<T>::make_op(a.shape(), std::move(out), {a},
        [a](const Tensor<T>& g) {
            return std::vector<Tensor<T>>{mul(g, sigmoid_(a))};
        });
}

template <typename T>
Tensor<T> exp_(const Tensor<T>& a) {
    std::vector<T> out(a.data().size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(a.data()[i]);
    return Tensor<T>::make_op(a.shape(), std::move(out), {a},
        [a](const Tensor<T>& g) { return std::vector<Tensor<T>>{mul(g, exp_(a))}; });
}

template <typename T>
Tensor<T> log_(const Tensor<T>& a) {
    std::vector<T> out(a.data().size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::log(a.data()[i]);
    return Tensor<T>::make_op(a.shape(), std::move(out), {a},
        [a](const Tensor<T>& g) { return std::vector<Tensor<T>>{div(g, a)}; });
}

template <typename T>
Tensor<T> sqrt_(const Tensor<T>& a) {
    std::vector<T> out(a.data().size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::sqrt(a.data()[i]);
    return Tensor<T>::make_op(a.shape(), std::move(out), {a},
        [a](const Tensor<T>& g) {
            return std::vector<Tensor<T>>{div(g, mul_scalar(sqrt_(a), T(2)))};
        });
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
    // A single -1 extent is inferred.
    std::int64_t known = 1;
    int infer = -1;
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (shape[i] == -1) {
            if (infer >= 0) throw std::invalid_argument("reshape: multiple -1");
            infer = static_cast<int>(i);
        } else {
            known *= shape[i];
        }
    }
    if (infer >= 0) shape[static_cast<std::size_t>(infer)] = a.size() / known;
    if (numel(shape) != a.size())
        throw std::invalid_argument("reshape: size mismatch " + shape_str(a.shape()) +
                                    " -> " + shape_str(shape));
    Shape orig = a.shape();
    return Tensor<T>::make_op(std::move(shape), a.data(), {a},
        [orig](const Tensor<T>& g) {
            return std::vector<Tensor<T>>{reshape(g, orig)};
        });
}

// Expand extents of size 1 to the target shape (same rank).
template <typename T>
Tensor<T> broadcast_to(const Tensor<T>& a, const Shape& shape) {
    if (a.shape() == shape) return a;
    if (a.rank() != static_cast<int>(shape.size()))
        throw std::invalid_argument("broadcast_to: rank mismatch");
    std::vector<std::int64_t> bcast_axes;
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (a.shape()[i] == shape[i]) continue;
        if (a.shape()[i] != 1)
            throw std::invalid_argument("broadcast_to: extent " +
                                        std::to_string(a.shape()[i]) + " -> " +
                                        std::to_string(shape[i]));
        bcast_axes.push_back(static_cast<std::int64_t>(i));
    }
    const int r = static_cast<int>(shape.size());
    std::vector<std::int64_t> ostride(static_cast<std::size_t>(r)),
        istride(static_cast<std::size_t>(r));
    std::int64_t os = 1, is = 1;
    for (int i = r - 1; i >= 0; --i) {
        ostride[static_cast<std::size_t>(i)] = os;
        os *= shape[static_cast<std::size_t>(i)];
        istride[static_cast<std::size_t>(i)] = a.shape()[static_cast<std::size_t>(i)] == 1 ? 0 : is;
        is *= a.shape()[static_cast<std::size_t>(i)];
    }
    const std::int64_t n = numel(shape);
    std::vector<T> out(static_cast<std::size_t>(n));
    std::vector<std::int64_t> idx(static_cast<std::size_t>(r), 0);
    std::int64_t src = 0;
    for (std::int64_t o = 0; o < n; ++o) {
        out[static_cast<std::size_t>(o)] = a.data()[static_cast<std::size_t>(src)];
        for (int i = r - 1; i >= 0; --i) {
            auto ui = static_cast<std::size_t>(i);
            if (++idx[ui] < shape[ui]) {
                src += istride[ui];
                break;
            }
            idx[ui] = 0;
            src -= istride[ui] * (shape[ui] - 1);
        }
    }
    Shape orig = a.shape();
    return Tensor<T>::make_op(shape, std::move(out), {a},
        [orig, bcast_axes](const Tensor<T>& g) {
            return std::vector<Tensor<T>>{reduce_sum(g, bcast_axes, /*keepdim=*/true)};
        });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

namespace detail {

inline Shape reduced_shape(const Shape& s, const std::vector<std::int64_t>& axes,
                           bool keepdim) {
    std::vector<bool> red(s.size(), false);
    for (auto a : axes) {
        if (a < 0 || a >= static_cast<std::int64_t>(s.size()))
            throw std::invalid_argument("reduce: axis out of range");
        red[static_cast<std::size_t>(a)] = true;
    }
    Shape out;
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (red[i]) {
            if (keepdim) out.push_back(1);
        } else {
            out.push_back(s[i]);
        }
    }
    if (out.empty()) out.push_back(1);
    return out;
}

// Maps each linear input index to the linear index of its reduction cell.
template <typename Fn>
void for_each_reduction(const Shape& s, const std::vector<std::int64_t>& axes, Fn&& fn) {
    const int r = static_cast<int>(s.size());
    std::vector<bool> red(s.size(), false);
    for (auto a : axes) red[static_cast<std::size_t>(a)] = true;
    std::vector<std::int64_t> ostride(s.size());
    std::int64_t os = 1;
    for (int i = r - 1; i >= 0; --i) {
        auto ui = static_cast<std::size_t>(i);
        ostride[ui] = red[ui] ? 0 : os;
        if (!red[ui]) os *= s[ui];
    }
    const std::int64_t n = numel(s);
    std::vector<std::int64_t> idx(s.size(), 0);
    std::int64_t out = 0;
    for (std::int64_t i = 0; i < n; ++i) {
        fn(i, out);
        for (int d = r - 1; d >= 0; --d) {
            auto ud = static_cast<std::size_t>(d);
            if (++idx[ud] < s[ud]) {
                out += ostride[ud];
                break;
            }
            idx[ud] = 0;
            out -= ostride[ud] * (s[ud] - 1);
        }
    }
}

}  // namespace detail

template <typename T>
Tensor<T> reduce_sum(const Tensor<T>& a, std::vector<std::int64_t> axes,
                     bool keepdim = false) {
    if (axes.empty()) return a;  // reducing over no axes is the identity
    Shape oshape = detail::reduced_shape(a.shape(), axes, keepdim);
    std::vector<T> out(static_cast<std::size_t>(numel(oshape)), T(0));
    detail::for_each_reduction(a.shape(), axes, [&](std::int64_t i, std::int64_t o) {
        out[static_cast<std::size_t>(o)] += a.data()[static_cast<std::size_t>(i)];
    });
    Shape ishape = a.shape();
    Shape kshape = detail::reduced_shape(a.shape(), axes, /*keepdim=*/true);
    return Tensor<T>::make_op(std::move(oshape), std::move(out), {a},
        [ishape, kshape](const Tensor<T>& g) {
            return std::vector<Tensor<T>>{broadcast_to(reshape(g, kshape), ishape)};
        });
}

template <typename T>
Tensor<T> sum_all(const Tensor<T>& a) {
    std::vector<std::int64_t> axes(a.shape().size());
    std::iota(axes.begin(), axes.end(), 0);
    return reduce_sum(a, axes, false);
}

template <typename T>
Tensor<T> reduce_mean(const Tensor<T>& a, std::vector<std::int64_t> axes,
                      bool keepdim = false) {
    if (axes.empty()) return a;
    std::int64_t n = 1;
    for (auto ax : axes) n *= a.shape()[static_cast<std::size_t>(ax)];
    return mul_scalar(reduce_sum(a, std::move(axes), keepdim), T(1) / static_cast<T>(n));
}

template <typename T>
Tensor<T> mean_all(const Tensor<T>& a) {
    return mul_scalar(sum_all(a), T(1) / static_cast<T>(a.size()));
}

// Max reduction; ties route the gradient to the lowest linear index.
template <typename T>
Tensor<T> reduce_max(const Tensor<T>& a, std::vector<std::int64_t> axes,
                     bool keepdim = false) {
    if (axes.empty()) return a;
    Shape oshape = detail::reduced_shape(a.shape(), axes, keepdim);
    const std::size_t on = static_cast<std::size_t>(numel(oshape));
    std::vector<T> out(on, std::numeric_limits<T>::lowest());
    std::vector<std::int64_t> argmax(on, -1);
    detail::for_each_reduction(a.shape(), axes, [&](std::int64_t i, std::int64_t o) {
        auto uo = static_cast<std::size_t>(o);
        if (a.data()[static_cast<std::size_t>(i)] > out[uo]) {
            out[uo] = a.data()[static_cast<std::size_t>(i)];
            argmax[uo] = i;
        }
    });
    Shape ishape = a.shape();
    auto arg = std::make_shared<std::vector<std::int64_t>>(std::move(argmax));
    return Tensor<T>::make_op(std::move(oshape), std::move(out), {a},
        [ishape, arg](const Tensor<T>& g) {
            return std::vector<Tensor<T>>{scatter_linear(g, *arg, ishape)};
        });
}

// ---------------------------------------------------------------------------
// Gather / scatter (linear indices). take and scatter_linear are adjoint,
// which closes the family under differentiation.
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> take(const Tensor<T>& a, std::shared_ptr<const std::vector<std::int64_t>> idx,
               Shape oshape) {
    if (numel(oshape) != static_cast<std::int64_t>(idx->size()))
        throw std::invalid_argument("take: index count does not match output shape");
    std::vector<T> out(idx->size());
    for (std::size_t i = 0; i < idx->size(); ++i)
        out[i] = a.data()[static_cast<std::size_t>((*idx)[i])];
    Shape ishape = a.shape();
    return Tensor<T>::make_op(std::move(oshape), std::move(out), {a},
        [ishape, idx](const Tensor<T>& g) {
            return std::vector<Tensor<T>>{scatter_linear(g, *idx, ishape)};
        });
}

template <typename T>
Tensor<T> take(const Tensor<T>& a, std::vector<std::int64_t> idx, Shape oshape) {
    return take(a, std::make_shared<const std::vector<std::int64_t>>(std::move(idx)),
                std::move(oshape));
}

template <typename T>
Tensor<T> scatter_linear(const Tensor<T>& g, const std::vector<std::int64_t>& idx,
                         Shape oshape) {
    if (static_cast<std::int64_t>(idx.size()) != g.size())
        throw std::invalid_argument("scatter_linear: index count mismatch");
    std::vector<T> out(static_cast<std::size_t>(numel(oshape)), T(0));
    for (std::size_t i = 0; i < idx.size(); ++i)
        out[static_cast<std::size_t>(idx[i])] += g.data()[i];
    auto shared = std::make_shared<const std::vector<std::int64_t>>(idx);
    Shape gshape = g.shape();
    return Tensor<T>::make_op(std::move(oshape), std::move(out), {g},
        [shared, gshape](const Tensor<T>& u) {
            return std::vector<Tensor<T>>{take(u, shared, gshape)};
        });
}

// Concatenate two tensors along an axis.
template <typename T>
Tensor<T> concat2(const Tensor<T>& a, const Tensor<T>& b, int axis) {
    if (a.rank() != b.rank()) throw std::invalid_argument("concat2: rank mismatch");
    for (int i = 0; i < a.rank(); ++i)
        if (i != axis && a.dim(i) != b.dim(i))
            throw std::invalid_argument("concat2: shape mismatch off axis");
    Shape oshape = a.shape();
    oshape[static_cast<std::size_t>(axis)] += b.dim(axis);
    std::int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= a.dim(i);
    for (int i = axis + 1; i < a.rank(); ++i) inner *= a.dim(i);
    const std::int64_t ea = a.dim(axis), eb = b.dim(axis);
    std::vector<T> out(static_cast<std::size_t>(numel(oshape)));
    std::vector<std::int64_t> ia, ib;  // output linear indices per source
    ia.reserve(static_cast<std::size_t>(a.size()));
    ib.reserve(static_cast<std::size_t>(b.size()));
    for (std::int64_t o = 0; o < outer; ++o) {
        const std::int64_t base = o * (ea + eb) * inner;
        for (std::int64_t k = 0; k < ea * inner; ++k) {
            out[static_cast<std::size_t>(base + k)] =
                a.data()[static_cast<std::size_t>(o * ea * inner + k)];
            ia.push_back(base + k);
        }
        for (std::int64_t k = 0; k < eb * inner; ++k) {
            out[static_cast<std::size_t>(base + ea * inner + k)] =
                b.data()[static_cast<std::size_t>(o * eb * inner + k)];
            ib.push_back(base + ea * inner + k);
        }
    }
    auto sia = std::make_shared<const std::vector<std::int64_t>>(std::move(ia));
    auto sib = std::make_shared<const std::vector<std::int64_t>>(std::move(ib));
    Shape ashape = a.shape(), bshape = b.shape();
    return Tensor<T>::make_op(std::move(oshape), std::move(out), {a, b},
        [sia, sib, ashape, bshape](const Tensor<T>& g) {
            return std::vector<Tensor<T>>{take(g, sia, ashape), take(g, sib, bshape)};
        });
}

// ---------------------------------------------------------------------------
// Dense (matrix) product: [B,N] x [N,M] -> [B,M]
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
using EMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapM = Eigen::Map<EMat<T>>;
template <typename T>
using CMapM = Eigen::Map<const EMat<T>>;

}  // namespace detail

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() != 2 || b.rank() != 2)
        throw std::invalid_argument("matmul: expects rank-2 tensors");
    if (a.dim(1) != b.dim(0))
        throw std::invalid_argument("matmul: inner extents disagree: " +
                                    shape_str(a.shape()) + " x " + shape_str(b.shape()));
    const auto B = a.dim(0), N = a.dim(1), M = b.dim(1);
    std::vector<T> out(static_cast<std::size_t>(B * M));
    detail::CMapM<T> ma(a.data().data(), B, N), mb(b.data().data(), N, M);
    detail::MapM<T> mo(out.data(), B, M);
    mo.noalias() = ma * mb;
    return Tensor<T>::make_op({B, M}, std::move(out), {a, b},
        [a, b](const Tensor<T>& g) {
            return std::vector<Tensor<T>>{matmul(g, transpose2(b)),
                                          matmul(transpose2(a), g)};
        });
}

template <typename T>
Tensor<T> transpose2(const Tensor<T>& a) {
    if (a.rank() != 2) throw std::invalid_argument("transpose2: rank != 2");
    const auto R = a.dim(0), C = a.dim(1);
    std::vector<T> out(static_cast<std::size_t>(R * C));
    for (std::int64_t i = 0; i < R; ++i)
        for (std::int64_t j = 0; j < C; ++j)
            out[static_cast<std::size_t>(j * R + i)] =
                a.data()[static_cast<std::size_t>(i * C + j)];
    return Tensor<T>::make_op({C, R}, std::move(out), {a},
        [](const Tensor<T>& g) { return std::vector<Tensor<T>>{transpose2(g)}; });
}

// y = x.w + b
template <typename T>
Tensor<T> dense(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
    Tensor<T> y = matmul(x, w);
    if (b.rank() != 1 || b.dim(0) != y.dim(1))
        throw std::invalid_argument("dense: bias extent mismatch");
    Tensor<T> bb = broadcast_to(reshape(b, {1, b.dim(0)}), y.shape());
    return add(y, bb);
}

// ---------------------------------------------------------------------------
// Convolution family (cross-correlation semantics, no kernel flip).
// conv2d, its input gradient, and its weight gradient are each primitives
// whose backward rules are expressed through the other members, so the family
// is closed under repeated differentiation.
// ---------------------------------------------------------------------------

namespace detail {

struct ConvDims {
    std::int64_t B, C, H, W, O, K, stride, pad, Ho, Wo;
};

template <typename T>
ConvDims conv_dims(const Shape& xs, const Shape& ws, std::int64_t stride,
                   std::int64_t pad) {
    if (xs.size() != 4 || ws.size() != 4)
        throw std::invalid_argument("conv2d: expects x[B,C,H,W], w[O,C,k,k]");
    ConvDims d;
    d.B = xs[0]; d.C = xs[1]; d.H = xs[2]; d.W = xs[3];
    d.O = ws[0]; d.K = ws[2];
    if (ws[2] != ws[3]) throw std::invalid_argument("conv2d: kernel must be square");
    if (ws[1] != d.C)
        throw std::invalid_argument("conv2d: channel mismatch: x has " +
                                    std::to_string(d.C) + ", w expects " +
                                    std::to_string(ws[1]));
    if (stride < 1) throw std::invalid_argument("conv2d: stride must be >= 1");
    if (d.K > d.H + 2 * pad || d.K > d.W + 2 * pad)
        throw std::invalid_argument("conv2d: kernel larger than padded input");
    if ((d.H + 2 * pad - d.K) % stride != 0 || (d.W + 2 * pad - d.K) % stride != 0)
        throw std::invalid_argument("conv2d: non-integral output extent");
    d.stride = stride; d.pad = pad;
    d.Ho = (d.H + 2 * pad - d.K) / stride + 1;
    d.Wo = (d.W + 2 * pad - d.K) / stride + 1;
    return d;
}

// col buffer layout: [C*K*K, Ho*Wo]
template <typename T>
void im2col(const T* x, const ConvDims& d, T* col) {
    const std::int64_t HW = d.Ho * d.Wo;
    for (std::int64_t c = 0; c < d.C; ++c) {
        for (std::int64_t ki = 0; ki < d.K; ++ki) {
            for (std::int64_t kj = 0; kj < d.K; ++kj) {
                T* dst = col + ((c * d.K + ki) * d.K + kj) * HW;
                for (std::int64_t oi = 0; oi < d.Ho; ++oi) {
                    const std::int64_t ii = oi * d.stride + ki - d.pad;
                    if (ii < 0 || ii >= d.H) {
                        std::fill(dst + oi * d.Wo, dst + (oi + 1) * d.Wo, T(0));
                        continue;
                    }
                    const T* src = x + (c * d.H + ii) * d.W;
                    for (std::int64_t oj = 0; oj < d.Wo; ++oj) {
                        const std::int64_t jj = oj * d.stride + kj - d.pad;
                        dst[oi * d.Wo + oj] = (jj >= 0 && jj < d.W) ? src[jj] : T(0);
                    }
                }
            }
        }
    }
}

template <typename T>
void col2im(const T* col, const ConvDims& d, T* x) {
    const std::int64_t HW = d.Ho * d.Wo;
    std::fill(x, x + d.C * d.H * d.W, T(0));
    for (std::int64_t c = 0; c < d.C; ++c) {
        for (std::int64_t ki = 0; ki < d.K; ++ki) {
            for (std::int64_t kj = 0; kj < d.K; ++kj) {
                const T* src = col + ((c * d.K + ki) * d.K + kj) * HW;
                for (std::int64_t oi = 0; oi < d.Ho; ++oi) {
                    const std::int64_t ii = oi * d.stride + ki - d.pad;
                    if (ii < 0 || ii >= d.H) continue;
                    T* dst = x + (c * d.H + ii) * d.W;
                    for (std::int64_t oj = 0; oj < d.Wo; ++oj) {
                        const std::int64_t jj = oj * d.stride + kj - d.pad;
                        if (jj >= 0 && jj < d.W) dst[jj] += src[oi * d.Wo + oj];
                    }
                }
            }
        }
    }
}

template <typename T>
std::vector<T> conv_forward_raw(const std::vector<T>& x, const std::vector<T>& w,
                                const ConvDims& d) {
    const std::int64_t HW = d.Ho * d.Wo, CKK = d.C * d.K * d.K;
    std::vector<T> out(static_cast<std::size_t>(d.B * d.O * HW));
    std::vector<T> col(static_cast<std::size_t>(CKK * HW));
    CMapM<T> mw(w.data(), d.O, CKK);
    for (std::int64_t b = 0; b < d.B; ++b) {
        im2col(x.data() + b * d.C * d.H * d.W, d, col.data());
        CMapM<T> mc(col.data(), CKK, HW);
        MapM<T> mo(out.data() + b * d.O * HW, d.O, HW);
        mo.noalias() = mw * mc;
    }
    return out;
}

template <typename T>
std::vector<T> conv_dx_raw(const std::vector<T>& gy, const std::vector<T>& w,
                           const ConvDims& d) {
    const std::int64_t HW = d.Ho * d.Wo, CKK = d.C * d.K * d.K;
    std::vector<T> out(static_cast<std::size_t>(d.B * d.C * d.H * d.W));
    std::vector<T> col(static_cast<std::size_t>(CKK * HW));
    CMapM<T> mw(w.data(), d.O, CKK);
    for (std::int64_t b = 0; b < d.B; ++b) {
        CMapM<T> mg(gy.data() + b * d.O * HW, d.O, HW);
        MapM<T> mc(col.data(), CKK, HW);
        mc.noalias() = mw.transpose() * mg;
        col2im(col.data(), d, out.data() + b * d.C * d.H * d.W);
    }
    return out;
}

template <typename T>
std::vector<T> conv_dw_raw(const std::vector<T>& x, const std::vector<T>& gy,
                           const ConvDims& d) {
    const std::int64_t HW = d.Ho * d.Wo, CKK = d.C * d.K * d.K;
    std::vector<T> out(static_cast<std::size_t>(d.O * CKK), T(0));
    std::vector<T> col(static_cast<std::size_t>(CKK * HW));
    MapM<T> mo(out.data(), d.O, CKK);
    for (std::int64_t b = 0; b < d.B; ++b) {
        im2col(x.data() + b * d.C * d.H * d.W, d, col.data());
        CMapM<T> mc(col.data(), CKK, HW);
        CMapM<T> mg(gy.data() + b * d.O * HW, d.O, HW);
        mo.noalias() += mg * mc.transpose();
    }
    return out;
}

}  // namespace detail

template <typename T>
Tensor<T> conv2d_input_grad(const Tensor<T>& gy, const Tensor<T>& w, Shape xshape,
                            std::int64_t stride, std::int64_t pad);
template <typename T>
Tensor<T> conv2d_weight_grad(const Tensor<T>& x, const Tensor<T>& gy, Shape wshape,
                             std::int64_t stride, std::int64_t pad);

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, std::int64_t stride = 1,
                 std::int64_t pad = 0) {
    const auto d = detail::conv_dims<T>(x.shape(), w.shape(), stride, pad);
    auto out = detail::conv_forward_raw(x.data(), w.data(), d);
    Shape xshape = x.shape(), wshape = w.shape();
    return Tensor<T>::make_op({d.B, d.O, d.Ho, d.Wo}, std::move(out), {x, w},
        [x, w, xshape, wshape, stride, pad](const Tensor<T>& g) {
            return std::vector<Tensor<T>>{
                conv2d_input_grad(g, w, xshape, stride, pad),
                conv2d_weight_grad(x, g, wshape, stride, pad)};
        });
}

template <typename T>
Tensor<T> conv2d_input_grad(const Tensor<T>& gy, const Tensor<T>& w, Shape xshape,
                            std::int64_t stride, std::int64_t pad) {
    const auto d = detail::conv_dims<T>(xshape, w.shape(), stride, pad);
    if (gy.shape() != Shape{d.B, d.O, d.Ho, d.Wo})
        throw std::invalid_argument("conv2d_input_grad: bad gy shape");
    auto out = detail::conv_dx_raw(gy.data(), w.data(), d);
    Shape wshape = w.shape();
    return Tensor<T>::make_op(xshape, std::move(out), {gy, w},
        [gy, w, wshape, stride, pad](const Tensor<T>& u) {
            return std::vector<Tensor<T>>{
                conv2d(u, w, stride, pad),
                conv2d_weight_grad(u, gy, wshape, stride, pad)};
        });
}

template <typename T>
Tensor<T> conv2d_weight_grad(const Tensor<T>& x, const Tensor<T>& gy, Shape wshape,
                             std::int64_t stride, std::int64_t pad) {
    const auto d = detail::conv_dims<T>(x.shape(), wshape, stride, pad);
    if (gy.shape() != Shape{d.B, d.O, d.Ho, d.Wo})
        throw std::invalid_argument("conv2d_weight_grad: bad gy shape");
    auto out = detail::conv_dw_raw(x.data(), gy.data(), d);
    Shape xshape = x.shape();
    return Tensor<T>::make_op(wshape, std::move(out), {x, gy},
        [x, gy, xshape, stride, pad](const Tensor<T>& uw) {
            return std::vector<Tensor<T>>{
                conv2d_input_grad(gy, uw, xshape, stride, pad),
                conv2d(x, uw, stride, pad)};
        });
}

// ---------------------------------------------------------------------------
// Spatial resampling: nearest upsampling and block-sum downsampling are
// adjoint linear maps.
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> downsample_sum(const Tensor<T>& x, std::int64_t f);

template <typename T>
Tensor<T> upsample_nearest(const Tensor<T>& x, std::int64_t f = 2) {
    if (f < 1) throw std::invalid_argument("upsample_nearest: factor must be >= 1");
    if (f == 1) return x;
    const int r = x.rank();
    if (r < 2) throw std::invalid_argument("upsample_nearest: rank < 2");
    const std::int64_t H = x.dim(r - 2), W = x.dim(r - 1);
    std::int64_t N = 1;
    for (int i = 0; i < r - 2; ++i) N *= x.dim(i);
    Shape oshape = x.shape();
    oshape[static_cast<std::size_t>(r - 2)] = H * f;
    oshape[static_cast<std::size_t>(r - 1)] = W * f;
    std::vector<T> out(static_cast<std::size_t>(N * H * W * f * f));
    for (std::int64_t n = 0; n < N; ++n) {
        const T* src = x.data().data() + n * H * W;
        T* dst = out.data() + n * H * W * f * f;
        for (std::int64_t i = 0; i < H * f; ++i)
            for (std::int64_t j = 0; j < W * f; ++j)
                dst[i * W * f + j] = src[(i / f) * W + j / f];
    }
    return Tensor<T>::make_op(std::move(oshape), std::move(out), {x},
        [f](const Tensor<T>& g) {
            return std::vector<Tensor<T>>{downsample_sum(g, f)};
        });
}

template <typename T>
Tensor<T> downsample_sum(const Tensor<T>& x, std::int64_t f) {
    const int r = x.rank();
    if (r < 2) throw std::invalid_argument("downsample_sum: rank < 2");
    const std::int64_t H = x.dim(r - 2), W = x.dim(r - 1);
    if (H % f != 0 || W % f != 0)
        throw std::invalid_argument("downsample_sum: extents not divisible by " +
                                    std::to_string(f));
    std::int64_t N = 1;
    for (int i = 0; i < r - 2; ++i) N *= x.dim(i);
    Shape oshape = x.shape();
    oshape[static_cast<std::size_t>(r - 2)] = H / f;
    oshape[static_cast<std::size_t>(r - 1)] = W / f;
    std::vector<T> out(static_cast<std::size_t>(N * (H / f) * (W / f)), T(0));
    for (std::int64_t n = 0; n < N; ++n) {
        const T* src = x.data().data() + n * H * W;
        T* dst = out.data() + n * (H / f) * (W / f);
        for (std::int64_t i = 0; i < H; ++i)
            for (std::int64_t j = 0; j < W; ++j)
                dst[(i / f) * (W / f) + j / f] += src[i * W + j];
    }
    return Tensor<T>::make_op(std::move(oshape), std::move(out), {x},
        [f](const Tensor<T>& g) {
            return std::vector<Tensor<T>>{upsample_nearest(g, f)};
        });
}

// 2x2 mean pooling over the trailing two axes; requires even extents.
template <typename T>
Tensor<T> avg_pool2(const Tensor<T>& x) {
    const int r = x.rank();
    if (x.dim(r - 2) % 2 != 0 || x.dim(r - 1) % 2 != 0)
        throw std::invalid_argument("avg_pool2: odd spatial extent " +
                                    shape_str(x.shape()));
    return mul_scalar(downsample_sum(x, 2), T(0.25));
}

// ---------------------------------------------------------------------------
// Autodiff driver
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
void collect_reachable(const Tensor<T>& root,
                       std::vector<Tensor<T>>& order,
                       std::unordered_set<typename Tensor<T>::Node*>& seen) {
    // Iterative DFS; nodes are later sorted by creation id, which is a
    // topological order by construction.
    std::vector<Tensor<T>> stack{root};
    while (!stack.empty()) {
        Tensor<T> t = stack.back();
        stack.pop_back();
        if (!t.requires_grad()) continue;
        if (!seen.insert(t.node()).second) continue;
        order.push_back(t);
        for (const auto& p : t.node()->parents) stack.push_back(p);
    }
}

}  // namespace detail

// Reverse-mode gradients of a scalar loss with respect to `inputs`.
// The returned tensors participate in the graph, so a second backward pass
// through them yields higher-order derivatives.
template <typename T>
std::vector<Tensor<T>> grad(const Tensor<T>& loss,
                            const std::vector<Tensor<T>>& inputs) {
    if (loss.size() != 1)
        throw std::invalid_argument("grad: loss must be scalar, got " +
                                    shape_str(loss.shape()));
    std::vector<Tensor<T>> order;
    std::unordered_set<typename Tensor<T>::Node*> seen;
    detail::collect_reachable(loss, order, seen);
    std::sort(order.begin(), order.end(), [](const Tensor<T>& a, const Tensor<T>& b) {
        return a.node()->id > b.node()->id;
    });

    std::unordered_map<typename Tensor<T>::Node*, Tensor<T>> grads;
    grads[loss.node()] = Tensor<T>::full(loss.shape(), T(1));

    for (const auto& t : order) {
        auto it = grads.find(t.node());
        if (it == grads.end()) continue;  // not on a path from the loss
        const Tensor<T>& g = it->second;
        if (t.node()->vjp) {
            std::vector<Tensor<T>> pgs = t.node()->vjp(g);
            const auto& parents = t.node()->parents;
            if (pgs.size() != parents.size())
                throw std::runtime_error("grad: vjp arity mismatch");
            for (std::size_t i = 0; i < parents.size(); ++i) {
                if (!parents[i].requires_grad() || !pgs[i].defined()) continue;
                auto pit = grads.find(parents[i].node());
                if (pit == grads.end())
                    grads.emplace(parents[i].node(), pgs[i]);
                else
                    pit->second = add(pit->second, pgs[i]);
            }
        }
    }

    std::vector<Tensor<T>> out;
    out.reserve(inputs.size());
    for (const auto& in : inputs) {
        auto it = grads.find(in.node());
        out.push_back(it != grads.end() ? it->second : Tensor<T>::zeros(in.shape()));
    }
    return out;
}

// Accumulate gradients into the .grad() buffers of all reachable leaves.
template <typename T>
void backward(const Tensor<T>& loss) {
    std::vector<Tensor<T>> order;
    std::unordered_set<typename Tensor<T>::Node*> seen;
    detail::collect_reachable(loss, order, seen);
    std::vector<Tensor<T>> leaves;
    for (const auto& t : order)
        if (t.is_leaf() && t.requires_grad()) leaves.push_back(t);
    std::sort(leaves.begin(), leaves.end(), [](const Tensor<T>& a, const Tensor<T>& b) {
        return a.node()->id < b.node()->id;
    });
    auto gs = grad(loss, leaves);
    for (std::size_t i = 0; i < leaves.size(); ++i) {
        auto* n = leaves[i].node();
        if (!n->grad)
            n->grad = std::make_shared<std::vector<T>>(n->data.size(), T(0));
        const auto& g = gs[i].data();
        for (std::size_t k = 0; k < g.size(); ++k) (*n->grad)[k] += g[k];
    }
}

}  // namespace gegan
