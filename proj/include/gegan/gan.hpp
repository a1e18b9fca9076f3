#pragma once

// GAN assembly and training: declarative RotMNIST architectures (standard and
// p4-equivariant), projection-conditioned discriminator, TTUR Adam trainer
// with EMA and bit-exact checkpointing, truncation sampling, interpolation.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "gegan/checkpoint.hpp"
#include "gegan/data.hpp"
#include "gegan/equivariant.hpp"
#include "gegan/objectives.hpp"
#include "gegan/symmetry.hpp"
#include "gegan/tensor.hpp"

namespace gegan {

// ---------------------------------------------------------------------------
// Network specification
// ---------------------------------------------------------------------------

enum class Role { Generator, Discriminator };

struct LayerSpec {
    std::int64_t c_in = 0;
    std::int64_t c_out = 0;
    std::int64_t kernel = 3;
    bool ccbn_after = false;   // generator: CCBN on this conv's output
    bool up_after = false;     // generator: nearest upsample after activations
    bool pool_after = false;   // discriminator: avg-pool after activation
};

struct NetworkSpec {
    Role role = Role::Generator;
    bool equivariant = false;
    Group group = Group::P4;  // used when equivariant
    std::int64_t latent_dim = 64;
    std::int64_t embed_dim = 64;
    std::int64_t num_classes = 10;
    std::int64_t base_size = 7;        // generator: initial spatial extent
    std::int64_t proj_channels = 128;  // generator: channels after projection
    std::vector<LayerSpec> layers;

    Group effective_group() const { return equivariant ? group : Group::Z2; }

    void validate() const {
        if (layers.empty()) throw std::invalid_argument("spec: no layers");
        if (latent_dim <= 0 || embed_dim <= 0 || num_classes <= 0)
            throw std::invalid_argument("spec: non-positive dimension");
        if (equivariant && group == Group::Z2)
            throw std::invalid_argument("spec: equivariant requires P4 or P4M");
        for (std::size_t i = 0; i + 1 < layers.size(); ++i)
            if (layers[i].c_out != layers[i + 1].c_in)
                throw std::invalid_argument("spec: channel chain broken at layer " +
                                            std::to_string(i));
        if (role == Role::Generator) {
            if (layers.front().c_in != proj_channels)
                throw std::invalid_argument("spec: first conv must read the projection");
            if (layers.back().c_out != 1)
                throw std::invalid_argument("spec: generator must end in 1 channel");
            if (layers.back().ccbn_after)
                throw std::invalid_argument("spec: no CCBN after the last conv");
        }
    }

    // RotMNIST generator table: proj 7x7x128, then four 3x3 convs with CCBN
    // after every conv except the first and last, upsampling 7->14->28.
    static NetworkSpec rotmnist_generator(bool equivariant_, Group g = Group::P4) {
        NetworkSpec s;
        s.role = Role::Generator;
        s.equivariant = equivariant_;
        s.group = g;
        if (equivariant_) {
            s.layers = {{128, 256, 3, false, true, false},
                        {256, 128, 3, true, true, false},
                        {128, 64, 3, true, false, false},
                        {64, 1, 3, false, false, false}};
        } else {
            s.layers = {{128, 512, 3, false, true, false},
                        {512, 256, 3, true, true, false},
                        {256, 128, 3, true, false, false},
                        {128, 1, 3, false, false, false}};
        }
        return s;
    }

    // RotMNIST discriminator table: three 3x3 convs with LeakyReLU. The
    // table's third avg-pool would act on a 7x7 (odd) map, which the exact
    // pooling contract rejects; it is omitted and global average pooling
    // follows the third conv directly.
    static NetworkSpec rotmnist_discriminator(bool equivariant_, Group g = Group::P4) {
        NetworkSpec s;
        s.role = Role::Discriminator;
        s.equivariant = equivariant_;
        s.group = g;
        if (equivariant_) {
            s.layers = {{1, 64, 3, false, false, true},
                        {64, 128, 3, false, false, true},
                        {128, 256, 3, false, false, false}};
        } else {
            s.layers = {{1, 128, 3, false, false, true},
                        {128, 256, 3, false, false, true},
                        {256, 512, 3, false, false, false}};
        }
        return s;
    }
};

// Channel budget rule: each equivariant width is the paired standard width
// divided by sqrt(|stabilizer|), so parameter counts roughly match.
inline bool follows_budget_rule(const NetworkSpec& standard, const NetworkSpec& equi) {
    if (standard.layers.size() != equi.layers.size()) return false;
    const double root = std::sqrt(double(stabilizer_size(equi.group)));
    for (std::size_t i = 0; i < standard.layers.size(); ++i) {
        const std::int64_t cs = standard.layers[i].c_out, ce = equi.layers[i].c_out;
        if (cs == ce && cs == 1) continue;  // image-channel outputs
        if (std::llround(double(cs) / root) != ce) return false;
    }
    return true;
}

// ---------------------------------------------------------------------------
// Embedding lookup
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> embed_rows(const Tensor<T>& table, const std::vector<std::int64_t>& y) {
    const std::int64_t n_classes = table.dim(0), d = table.dim(1);
    std::vector<std::int64_t> idx;
    idx.reserve(y.size() * std::size_t(d));
    for (std::int64_t c : y) {
        if (c < 0 || c >= n_classes)
            throw std::invalid_argument("embed: class id " + std::to_string(c) +
                                        " outside [0," + std::to_string(n_classes) +
                                        ")");
        for (std::int64_t j = 0; j < d; ++j) idx.push_back(c * d + j);
    }
    return take(table, std::move(idx), {std::int64_t(y.size()), d});
}

// ---------------------------------------------------------------------------
// Models
// ---------------------------------------------------------------------------

template <typename T>
struct GeneratorModel {
    NetworkSpec spec;
    Tensor<T> embed;           // [num_classes, embed_dim]
    Tensor<T> proj_w, proj_b;  // [latent+embed, base^2 * proj_channels]
    std::vector<GConvLayer<T>> convs;
    std::vector<CCBN<T>> ccbns;          // parallel to convs (unused slots empty)
    std::vector<bool> has_ccbn;

    GeneratorModel() = default;
    GeneratorModel(const NetworkSpec& s, Random& rng) : spec(s) {
        spec.validate();
        if (spec.role != Role::Generator)
            throw std::invalid_argument("build: spec role is not generator");
        const Group g = spec.effective_group();
        const std::int64_t h_dim = spec.latent_dim + spec.embed_dim;
        const std::int64_t proj_out =
            spec.base_size * spec.base_size * spec.proj_channels;
        embed = Tensor<T>::zeros({spec.num_classes, spec.embed_dim}, true);
        orthogonal_init(embed, spec.num_classes, rng);
        proj_w = Tensor<T>::zeros({h_dim, proj_out}, true);
        orthogonal_init(proj_w, h_dim, rng);
        proj_b = Tensor<T>::zeros({proj_out}, true);
        for (std::size_t i = 0; i < spec.layers.size(); ++i) {
            const auto& l = spec.layers[i];
            const FilterDomain dom =
                i == 0 ? FilterDomain::Z2_IN
                       : (g == Group::Z2 ? FilterDomain::Z2_IN : FilterDomain::G_IN);
            convs.emplace_back(dom, g, l.c_out, l.c_in, l.kernel,
                               (l.kernel - 1) / 2, /*sn=*/true, rng);
            ccbns.emplace_back();
            has_ccbn.push_back(l.ccbn_after);
            if (l.ccbn_after) ccbns.back() = CCBN<T>(l.c_out, h_dim);
        }
    }

    // h = [z ; embed(y)]; returns images in [-1, 1].
    Tensor<T> forward_h(const Tensor<T>& z, const Tensor<T>& yhat, bool training) {
        Tensor<T> h = concat2(z, yhat, 1);
        Tensor<T> x = dense(h, proj_w, proj_b);
        x = reshape(x, {z.dim(0), spec.proj_channels, spec.base_size, spec.base_size});
        for (std::size_t i = 0; i < convs.size(); ++i) {
            x = convs[i].forward(x);
            if (has_ccbn[i]) x = ccbns[i].forward(x, h, training);
            if (i + 1 < convs.size()) x = relu(x);
            if (spec.layers[i].up_after) x = upsample_nearest(x, 2);
        }
        if (spec.effective_group() != Group::Z2) x = group_pool(x, PoolKind::Max);
        return tanh_(x);
    }

    Tensor<T> forward(const Tensor<T>& z, const std::vector<std::int64_t>& y,
                      bool training) {
        return forward_h(z, embed_rows(embed, y), training);
    }

    void collect(std::vector<NamedTensor<T>>& out) {
        out.push_back({"g.embed", embed, true});
        out.push_back({"g.proj.weight", proj_w, true});
        out.push_back({"g.proj.bias", proj_b, true});
        for (std::size_t i = 0; i < convs.size(); ++i) {
            const std::string p = "g.conv" + std::to_string(i);
            convs[i].collect(p, out);
            if (has_ccbn[i]) ccbns[i].collect(p + ".ccbn", out);
        }
    }
};

// Projection-conditioned head: logit = psi(f) + <embed(y), f> with psi a
// spectrally normalized dense map; the class embedding is not normalized.
template <typename T>
struct ProjectionHead {
    GFilterBank<T> psi;  // dense F -> 1 stored as [1, F, 1, 1, 1]
    Tensor<T> psi_b;     // [1]
    Tensor<T> embed;     // [num_classes, F]

    ProjectionHead() = default;
    ProjectionHead(std::int64_t f, std::int64_t num_classes, Random& rng) {
        psi = make_filter_bank<T>(FilterDomain::G_IN, Group::Z2, 1, f, 1, rng);
        psi_b = Tensor<T>::zeros({1}, true);
        embed = Tensor<T>::zeros({num_classes, f}, true);
        orthogonal_init(embed, num_classes, rng);
    }

    void collect(const std::string& prefix, std::vector<NamedTensor<T>>& out) {
        out.push_back({prefix + ".psi.weight", psi.weights, true});
        out.push_back({prefix + ".psi.bias", psi_b, true});
        out.push_back({prefix + ".psi.sn_u", psi.sn_u, false});
        out.push_back({prefix + ".psi.sn_v", psi.sn_v, false});
        out.push_back({prefix + ".embed", embed, true});
    }
};

template <typename T>
Tensor<T> projection_logit(const Tensor<T>& features,
                           const std::vector<std::int64_t>& y,
                           ProjectionHead<T>& head) {
    const std::int64_t f = features.dim(1);
    if (f != head.psi.c_in())
        throw std::invalid_argument("projection: feature width " + std::to_string(f) +
                                    " does not match head F=" +
                                    std::to_string(head.psi.c_in()));
    Tensor<T> w = spectral_normalize(head.psi, 1);        // [1,F,1,1,1]
    Tensor<T> uncond = dense(features, reshape(w, {f, 1}), head.psi_b);  // [B,1]
    Tensor<T> e = embed_rows(head.embed, y);              // [B,F]
    Tensor<T> proj = reduce_sum(mul(e, features), {1});   // [B]
    return add(reshape(uncond, {features.dim(0)}), proj);
}

template <typename T>
struct DiscriminatorModel {
    NetworkSpec spec;
    std::vector<GConvLayer<T>> convs;
    ProjectionHead<T> head;

    DiscriminatorModel() = default;
    DiscriminatorModel(const NetworkSpec& s, Random& rng) : spec(s) {
        spec.validate();
        if (spec.role != Role::Discriminator)
            throw std::invalid_argument("build: spec role is not discriminator");
        const Group g = spec.effective_group();
        for (std::size_t i = 0; i < spec.layers.size(); ++i) {
            const auto& l = spec.layers[i];
            const FilterDomain dom =
                i == 0 ? FilterDomain::Z2_IN
                       : (g == Group::Z2 ? FilterDomain::Z2_IN : FilterDomain::G_IN);
            convs.emplace_back(dom, g, l.c_out, l.c_in, l.kernel,
                               (l.kernel - 1) / 2, /*sn=*/true, rng);
        }
        head = ProjectionHead<T>(spec.layers.back().c_out, spec.num_classes, rng);
    }

    Tensor<T> features(const Tensor<T>& x0) {
        Tensor<T> x = x0;
        for (std::size_t i = 0; i < convs.size(); ++i) {
            x = convs[i].forward(x);
            x = leaky_relu(x, T(0.2));
            if (spec.layers[i].pool_after) x = avg_pool2(x);
        }
        if (spec.effective_group() != Group::Z2) x = group_pool(x, PoolKind::Max);
        return global_avg_pool(x);  // [B, F]
    }

    Tensor<T> forward(const Tensor<T>& x, const std::vector<std::int64_t>& y) {
        return projection_logit(features(x), y, head);
    }

    void collect(std::vector<NamedTensor<T>>& out) {
        for (std::size_t i = 0; i < convs.size(); ++i)
            convs[i].collect("d.conv" + std::to_string(i), out);
        head.collect("d.head", out);
    }

    std::vector<T> sigma_estimates() const {
        std::vector<T> s;
        for (const auto& c : convs) s.push_back(spectral_norm_estimate(c.bank, 50));
        return s;
    }
};

template <typename T>
std::int64_t trainable_param_count(std::vector<NamedTensor<T>>& params) {
    std::int64_t n = 0;
    for (const auto& p : params)
        if (p.trainable) n += p.tensor.size();
    return n;
}

// ---------------------------------------------------------------------------
// Optimizer, EMA
// ---------------------------------------------------------------------------

template <typename T>
struct Adam {
    T lr = T(1e-4);
    T beta1 = T(0);
    T beta2 = T(0.9);
    T eps = T(1e-8);
    std::int64_t t = 0;
    std::vector<std::vector<T>> m, v;  // parallel to the parameter list

    void init(const std::vector<NamedTensor<T>>& params) {
        m.clear();
        v.clear();
        for (const auto& p : params) {
            const std::size_t n = p.trainable ? std::size_t(p.tensor.size()) : 0;
            m.emplace_back(n, T(0));
            v.emplace_back(n, T(0));
        }
    }

    // Consume .grad() of every trainable parameter (then clear it).
    void step(std::vector<NamedTensor<T>>& params) {
        ++t;
        const T bc1 = T(1) - std::pow(beta1, T(t));
        const T bc2 = T(1) - std::pow(beta2, T(t));
        for (std::size_t i = 0; i < params.size(); ++i) {
            if (!params[i].trainable) continue;
            auto& w = params[i].tensor.mutable_data();
            if (!params[i].tensor.has_grad()) continue;  // unused this step
            const auto& g = params[i].tensor.grad();
            for (std::size_t k = 0; k < w.size(); ++k) {
                m[i][k] = beta1 * m[i][k] + (T(1) - beta1) * g[k];
                v[i][k] = beta2 * v[i][k] + (T(1) - beta2) * g[k] * g[k];
                const T mh = m[i][k] / bc1;
                const T vh = v[i][k] / bc2;
                w[k] -= lr * mh / (std::sqrt(vh) + eps);
            }
            params[i].tensor.zero_grad();
        }
    }
};

// ---------------------------------------------------------------------------
// Trainer
// ---------------------------------------------------------------------------

template <typename T>
struct TrainingConfig {
    T eta_g = T(1e-4);
    T eta_d = T(4e-4);
    T beta1 = T(0);
    T beta2 = T(0.9);
    int n_dis = 2;
    std::int64_t batch_size = 64;
    std::int64_t total_g_iters = 20000;
    T ema_alpha = T(0.9999);
    std::uint64_t seed = 0;
    ObjectiveConfig<T> objective;
    std::int64_t eval_every = 1000;

    void validate() const {
        if (eta_g <= T(0) || eta_d <= T(0))
            throw std::invalid_argument("config: learning rates must be > 0");
        if (n_dis < 1) throw std::invalid_argument("config: n_dis must be >= 1");
        if (!(ema_alpha > T(0) && ema_alpha < T(1)))
            throw std::invalid_argument("config: ema_alpha must be in (0,1)");
        if (batch_size <= 0 || total_g_iters <= 0 || eval_every <= 0)
            throw std::invalid_argument("config: sizes must be positive");
        objective.validate();
    }
};

template <typename T>
struct StepMetrics {
    std::int64_t iter = 0;
    T d_loss_value = T(0);
    T g_loss_value = T(0);
    T penalty_value = T(0);
    std::vector<T> d_sigmas;
};

namespace detail {

inline std::string rng_serialize(const Random& rng_in) {
    Random& rng = const_cast<Random&>(rng_in);
    std::uint64_t bits;
    const double spare = rng.spare();
    std::memcpy(&bits, &spare, 8);
    std::ostringstream os;
    os << rng.engine() << ' ' << int(rng.has_spare()) << ' ' << bits;
    return os.str();
}

inline Random rng_deserialize(const std::string& s) {
    Random rng;
    std::istringstream is(s);
    int has = 0;
    std::uint64_t bits = 0;
    if (!(is >> rng.engine() >> has >> bits))
        throw std::runtime_error("checkpoint: corrupt RNG state");
    double spare;
    std::memcpy(&spare, &bits, 8);
    rng.set_spare(has != 0, spare);
    return rng;
}

}  // namespace detail

template <typename T>
class GANTrainer {
  public:
    GANTrainer(const NetworkSpec& gspec, const NetworkSpec& dspec,
               const TrainingConfig<T>& cfg, const LabeledImageSet<T>& data)
        : cfg_(cfg), data_(&data), rng_(cfg.seed) {
        cfg_.validate();
        g_ = GeneratorModel<T>(gspec, rng_);
        d_ = DiscriminatorModel<T>(dspec, rng_);
        g_.collect(g_params_);
        d_.collect(d_params_);
        opt_g_.lr = cfg_.eta_g;
        opt_g_.beta1 = cfg_.beta1;
        opt_g_.beta2 = cfg_.beta2;
        opt_d_.lr = cfg_.eta_d;
        opt_d_.beta1 = cfg_.beta1;
        opt_d_.beta2 = cfg_.beta2;
        opt_g_.init(g_params_);
        opt_d_.init(d_params_);
        for (const auto& p : g_params_)
            ema_.push_back(p.trainable ? p.tensor.data() : std::vector<T>{});
        stream_ = BatchStream(data.size(), cfg_.batch_size, cfg_.seed + 1);
    }

    GeneratorModel<T>& generator() { return g_; }
    DiscriminatorModel<T>& discriminator() { return d_; }
    std::vector<NamedTensor<T>>& g_params() { return g_params_; }
    std::vector<NamedTensor<T>>& d_params() { return d_params_; }
    const TrainingConfig<T>& config() const { return cfg_; }
    std::int64_t iteration() const { return iter_; }
    Random& rng() { return rng_; }
    const std::vector<std::vector<T>>& ema() const { return ema_; }

    // n_dis discriminator updates followed by one generator update + EMA.
    StepMetrics<T> train_step() {
        StepMetrics<T> mtr;
        Tensor<T> last_real;
        std::vector<std::int64_t> last_real_labels;
        const LossKind kind = cfg_.objective.loss_kind;

        for (int k = 0; k < cfg_.n_dis; ++k) {
            auto [real, real_labels] = gather_batch(*data_, stream_.next());
            auto fake_labels = random_labels(cfg_.batch_size);
            Tensor<T> z = draw_z(cfg_.batch_size,
                                 std::numeric_limits<T>::infinity(), rng_,
                                 g_.spec.latent_dim);
            Tensor<T> fake =
                g_.forward(z, fake_labels, /*training=*/true).detach();

            Tensor<T> rl = d_.forward(real, real_labels);
            Tensor<T> fl = d_.forward(fake, fake_labels);
            Tensor<T> loss = d_loss(rl, fl, kind);
            Tensor<T> pen;
            if (kind == LossKind::WGAN && cfg_.objective.wgan_gp_weight > T(0)) {
                pen = wgan_gp([&](const Tensor<T>& x) {
                                  return d_.forward(x, real_labels);
                              },
                              real, fake, cfg_.objective.wgan_gp_weight, rng_);
            } else if (kind != LossKind::WGAN && cfg_.objective.r1_gamma > T(0)) {
                pen = r1_penalty([&](const Tensor<T>& x) {
                                     return d_.forward(x, real_labels);
                                 },
                                 real, cfg_.objective.r1_gamma);
            }
            if (pen.defined()) loss = add(loss, pen);
            if (cfg_.objective.bcr) {
                Tensor<T> b = bcr_penalty([&](const Tensor<T>& x) {
                                              return d_.forward(x, real_labels);
                                          },
                                          real, fake, *cfg_.objective.bcr, rng_);
                loss = add(loss, b);
            }
            check_finite(loss.item(), "d_loss");
            backward(loss);
            opt_d_.step(d_params_);
            zero_all(g_params_);  // D loss does not touch G, but stay safe
            mtr.d_loss_value = loss.item();
            mtr.penalty_value = pen.defined() ? pen.item() : T(0);
            last_real = real;
            last_real_labels = real_labels;
        }

        // Generator step on a fresh z batch.
        auto labels = random_labels(cfg_.batch_size);
        Tensor<T> z = draw_z(cfg_.batch_size, std::numeric_limits<T>::infinity(),
                             rng_, g_.spec.latent_dim);
        Tensor<T> fake = g_.forward(z, labels, /*training=*/true);
        Tensor<T> fl = d_.forward(fake, labels);
        Tensor<T> rl;
        if (kind == LossKind::RAGAN) rl = d_.forward(last_real, last_real_labels);
        Tensor<T> gl = g_loss(rl.defined() ? rl : fl, fl, kind);
        check_finite(gl.item(), "g_loss");
        backward(gl);
        opt_g_.step(g_params_);
        zero_all(d_params_);  // drop D grads accumulated through the G loss
        mtr.g_loss_value = gl.item();

        // EMA update after the G step.
        for (std::size_t i = 0; i < g_params_.size(); ++i) {
            if (!g_params_[i].trainable) continue;
            const auto& w = g_params_[i].tensor.data();
            auto& e = ema_[i];
            for (std::size_t k = 0; k < w.size(); ++k)
                e[k] = cfg_.ema_alpha * e[k] + (T(1) - cfg_.ema_alpha) * w[k];
        }
        ++iter_;
        mtr.iter = iter_;
        mtr.d_sigmas = d_.sigma_estimates();
        return mtr;
    }

    // Run fn with the generator weights temporarily replaced by the EMA copy.
    template <typename Fn>
    auto with_ema(Fn&& fn) {
        std::vector<std::vector<T>> saved;
        saved.reserve(g_params_.size());
        for (std::size_t i = 0; i < g_params_.size(); ++i) {
            saved.push_back(g_params_[i].tensor.data());
            if (g_params_[i].trainable)
                g_params_[i].tensor.mutable_data() = ema_[i];
        }
        try {
            auto out = fn();
            for (std::size_t i = 0; i < g_params_.size(); ++i)
                g_params_[i].tensor.mutable_data() = std::move(saved[i]);
            return out;
        } catch (...) {
            for (std::size_t i = 0; i < g_params_.size(); ++i)
                g_params_[i].tensor.mutable_data() = std::move(saved[i]);
            throw;
        }
    }

    // Truncated latent draw: entries with |z| > 2*sigma are redrawn (bounded
    // retries, then clamped).
    static Tensor<T> draw_z(std::int64_t n, T sigma, Random& rng,
                            std::int64_t latent_dim = 64) {
        std::vector<T> z(std::size_t(n * latent_dim));
        const T bound = T(2) * sigma;
        for (auto& v : z) {
            v = T(rng.normal());
            if (!std::isfinite(double(bound))) continue;
            for (int r = 0; r < 100 && std::abs(v) > bound; ++r) v = T(rng.normal());
            if (std::abs(v) > bound) v = v < T(0) ? -bound : bound;
        }
        return Tensor<T>::from({n, latent_dim}, std::move(z));
    }

    // Sample from EMA-G (raw G is never evaluated).
    Tensor<T> sample(std::int64_t n, const std::vector<std::int64_t>& y, T sigma,
                     Random& srng) {
        if (std::int64_t(y.size()) != n)
            throw std::invalid_argument("sample: need one class id per sample");
        Tensor<T> z = draw_z(n, sigma, srng, g_.spec.latent_dim);
        return with_ema(
            [&] { return g_.forward(z, y, /*training=*/false); });
    }

    // Latent slerp at fixed class, or linear class-embedding interpolation at
    // fixed z. Returns [steps, 1, H, W].
    Tensor<T> interpolate(const std::string& mode, const Tensor<T>& z0,
                          const Tensor<T>& z1, std::int64_t y0, std::int64_t y1,
                          std::int64_t steps) {
        if (steps < 2) throw std::invalid_argument("interpolate: steps must be >= 2");
        return with_ema([&] {
            std::vector<Tensor<T>> frames;
            for (std::int64_t i = 0; i < steps; ++i) {
                const T t = T(i) / T(steps - 1);
                Tensor<T> z, yhat;
                if (mode == "latent_slerp") {
                    z = reshape(slerp(z0, z1, t), {1, g_.spec.latent_dim});
                    yhat = embed_rows(g_.embed, {y0});
                } else if (mode == "class_linear") {
                    z = reshape(z0, {1, g_.spec.latent_dim});
                    Tensor<T> e0 = embed_rows(g_.embed, {y0});
                    Tensor<T> e1 = embed_rows(g_.embed, {y1});
                    yhat = add(mul_scalar(e0, T(1) - t), mul_scalar(e1, t));
                } else {
                    throw std::invalid_argument("interpolate: unknown mode " + mode);
                }
                frames.push_back(g_.forward_h(z, yhat, /*training=*/false).detach());
            }
            Tensor<T> out = frames[0];
            for (std::size_t i = 1; i < frames.size(); ++i)
                out = concat2(out, frames[i], 0);
            return out;
        });
    }

    // Spherical interpolation; falls back to linear near antipodal endpoints.
    static Tensor<T> slerp(const Tensor<T>& a, const Tensor<T>& b, T t) {
        T dot = 0, na = 0, nb = 0;
        for (std::size_t i = 0; i < a.data().size(); ++i) {
            dot += a.data()[i] * b.data()[i];
            na += a.data()[i] * a.data()[i];
            nb += b.data()[i] * b.data()[i];
        }
        const T cosw =
            std::max(T(-1), std::min(T(1), dot / std::sqrt(na * nb)));
        const T omega = std::acos(cosw);
        if (omega < T(1e-7) || T(3.14159265358979323846) - omega < T(1e-6))
            return add(mul_scalar(a, T(1) - t), mul_scalar(b, t));
        const T s = std::sin(omega);
        return add(mul_scalar(a, std::sin((T(1) - t) * omega) / s),
                   mul_scalar(b, std::sin(t * omega) / s));
    }

    // ---- checkpointing ----

    CheckpointTable to_table() const {
        CheckpointTable t;
        for (const auto& p : g_params_)
            t[p.name] = CheckpointEntry::from_f64(p.tensor.shape(), p.tensor.data());
        for (const auto& p : d_params_)
            t[p.name] = CheckpointEntry::from_f64(p.tensor.shape(), p.tensor.data());
        for (std::size_t i = 0; i < g_params_.size(); ++i)
            if (g_params_[i].trainable)
                t["ema." + g_params_[i].name] = CheckpointEntry::from_f64(
                    g_params_[i].tensor.shape(), ema_[i]);
        auto put_adam = [&](const char* tag, const Adam<T>& opt,
                            const std::vector<NamedTensor<T>>& params) {
            for (std::size_t i = 0; i < params.size(); ++i) {
                if (!params[i].trainable) continue;
                t[std::string(tag) + ".m." + params[i].name] =
                    CheckpointEntry::from_f64(params[i].tensor.shape(), opt.m[i]);
                t[std::string(tag) + ".v." + params[i].name] =
                    CheckpointEntry::from_f64(params[i].tensor.shape(), opt.v[i]);
            }
            t[std::string(tag) + ".t"] = CheckpointEntry::from_i64({1}, {opt.t});
        };
        put_adam("adam_g", opt_g_, g_params_);
        put_adam("adam_d", opt_d_, d_params_);
        t["__iter"] = CheckpointEntry::from_i64({1}, {iter_});
        t["__rng"] = CheckpointEntry::from_string(detail::rng_serialize(rng_));
        t["__stream"] = CheckpointEntry::from_string(stream_.serialize());
        return t;
    }

    void from_table(const CheckpointTable& t) {
        auto want = [&](const std::string& name) -> const CheckpointEntry& {
            auto it = t.find(name);
            if (it == t.end())
                throw std::runtime_error("checkpoint: missing entry " + name);
            return it->second;
        };
        auto restore = [&](std::vector<NamedTensor<T>>& params) {
            for (auto& p : params) {
                const auto& e = want(p.name);
                if (e.shape != p.tensor.shape())
                    throw std::runtime_error("checkpoint: shape mismatch for " +
                                             p.name);
                p.tensor.mutable_data() = e.as_f64();
            }
        };
        restore(g_params_);
        restore(d_params_);
        for (std::size_t i = 0; i < g_params_.size(); ++i)
            if (g_params_[i].trainable)
                ema_[i] = want("ema." + g_params_[i].name).as_f64();
        auto get_adam = [&](const char* tag, Adam<T>& opt,
                            const std::vector<NamedTensor<T>>& params) {
            for (std::size_t i = 0; i < params.size(); ++i) {
                if (!params[i].trainable) continue;
                opt.m[i] = want(std::string(tag) + ".m." + params[i].name).as_f64();
                opt.v[i] = want(std::string(tag) + ".v." + params[i].name).as_f64();
            }
            opt.t = want(std::string(tag) + ".t").as_i64()[0];
        };
        get_adam("adam_g", opt_g_, g_params_);
        get_adam("adam_d", opt_d_, d_params_);
        iter_ = want("__iter").as_i64()[0];
        rng_ = detail::rng_deserialize(want("__rng").as_string());
        stream_ = BatchStream::deserialize(want("__stream").as_string());
    }

    void save(const std::string& path) const { save_checkpoint_table(to_table(), path); }
    void load(const std::string& path) { from_table(load_checkpoint_table(path)); }

  private:
    std::vector<std::int64_t> random_labels(std::int64_t n) {
        std::vector<std::int64_t> y(static_cast<std::size_t>(n));
        for (auto& v : y)
            v = std::int64_t(rng_.below(std::uint64_t(g_.spec.num_classes)));
        return y;
    }

    static void zero_all(std::vector<NamedTensor<T>>& params) {
        for (auto& p : params) p.tensor.zero_grad();
    }

    static void check_finite(T v, const char* what) {
        if (!std::isfinite(double(v)))
            throw std::runtime_error(std::string("train_step: non-finite ") + what +
                                     " — aborting with diagnostic snapshot");
    }

    TrainingConfig<T> cfg_;
    const LabeledImageSet<T>* data_ = nullptr;
    Random rng_;
    GeneratorModel<T> g_;
    DiscriminatorModel<T> d_;
    std::vector<NamedTensor<T>> g_params_, d_params_;
    std::vector<std::vector<T>> ema_;
    Adam<T> opt_g_, opt_d_;
    BatchStream stream_;
    std::int64_t iter_ = 0;
};

}  // namespace gegan
