#pragma once

// Evaluation pipeline: a small group-equivariant classifier whose final
// pooling layer supplies features, Fréchet distance between feature
// statistics, an unbiased kernel (MMD^2) distance, and PNG sample grids.

#include <Eigen/Dense>
#include <zlib.h>

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <numeric>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "gegan/data.hpp"
#include "gegan/equivariant.hpp"
#include "gegan/gan.hpp"

namespace gegan {

// ---------------------------------------------------------------------------
// Feature statistics and Fréchet distance
// ---------------------------------------------------------------------------

struct FeatureStats {
    std::int64_t n = 0;
    Eigen::VectorXd mu;     // [F]
    Eigen::MatrixXd sigma;  // [F, F], unbiased (n - 1 denominator), symmetric
};

template <typename T>
FeatureStats feature_stats(const Tensor<T>& feats) {
    if (feats.rank() != 2)
        throw std::invalid_argument("feature_stats: expects [N, F]");
    const std::int64_t n = feats.dim(0), f = feats.dim(1);
    if (n < 2) throw std::invalid_argument("feature_stats: need at least 2 samples");
    for (T v : feats.data())
        if (!std::isfinite(double(v)))
            throw std::invalid_argument("feature_stats: non-finite feature value");
    Eigen::MatrixXd x(n, f);
    for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t j = 0; j < f; ++j)
            x(i, j) = double(feats.data()[std::size_t(i * f + j)]);
    FeatureStats s;
    s.n = n;
    s.mu = x.colwise().mean();
    const Eigen::MatrixXd xc = x.rowwise() - s.mu.transpose();
    s.sigma = (xc.transpose() * xc) / double(n - 1);
    s.sigma = 0.5 * (s.sigma + s.sigma.transpose().eval());
    return s;
}

namespace detail {

// Symmetric PSD square root; eigenvalues below -1e-6 are an error, small
// negatives from roundoff are clamped to zero.
inline Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m, const char* what) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m);
    if (es.info() != Eigen::Success)
        throw std::runtime_error(std::string("frechet_distance: eigendecomposition "
                                             "failed for ") + what);
    Eigen::VectorXd lam = es.eigenvalues();
    for (Eigen::Index i = 0; i < lam.size(); ++i) {
        if (lam[i] < -1e-6)
            throw std::runtime_error(std::string("frechet_distance: ") + what +
                                     " has eigenvalue " + std::to_string(lam[i]) +
                                     " below -1e-6");
        if (lam[i] < 0.0) lam[i] = 0.0;
    }
    return es.eigenvectors() * lam.cwiseSqrt().asDiagonal() *
           es.eigenvectors().transpose();
}

}  // namespace detail

// ||mu_a - mu_b||^2 + Tr(Sa + Sb - 2 (Sa Sb)^{1/2}); the matrix square root is
// taken via the symmetric eigendecomposition of Sa^{1/2} Sb Sa^{1/2}.
inline double frechet_distance(const FeatureStats& a, const FeatureStats& b,
                               bool* warned = nullptr) {
    if (a.mu.size() != b.mu.size())
        throw std::invalid_argument("frechet_distance: feature dims disagree: " +
                                    std::to_string(a.mu.size()) + " vs " +
                                    std::to_string(b.mu.size()));
    if (!a.mu.allFinite() || !a.sigma.allFinite() || !b.mu.allFinite() ||
        !b.sigma.allFinite())
        throw std::invalid_argument("frechet_distance: non-finite statistics");
    const std::int64_t f = a.mu.size();
    if (a.n < f + 1 || b.n < f + 1) {
        if (warned) *warned = true;
        std::fprintf(stderr,
                     "warning: frechet_distance with n=%lld,%lld below F+1=%lld; "
                     "covariance is rank-deficient\n",
                     static_cast<long long>(a.n), static_cast<long long>(b.n),
                     static_cast<long long>(f + 1));
    }
    const Eigen::MatrixXd a_sqrt = detail::psd_sqrt(a.sigma, "sigma_a");
    Eigen::MatrixXd mid = a_sqrt * b.sigma * a_sqrt;
    mid = 0.5 * (mid + mid.transpose().eval());
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(mid);
    if (es.info() != Eigen::Success)
        throw std::runtime_error("frechet_distance: eigendecomposition failed");
    double tr_sqrt = 0.0;
    for (Eigen::Index i = 0; i < es.eigenvalues().size(); ++i) {
        const double lam = es.eigenvalues()[i];
        if (lam < -1e-6)
            throw std::runtime_error("frechet_distance: cross term has eigenvalue " +
                                     std::to_string(lam) + " below -1e-6");
        tr_sqrt += std::sqrt(std::max(lam, 0.0));
    }
    const double d2 = (a.mu - b.mu).squaredNorm() + a.sigma.trace() +
                      b.sigma.trace() - 2.0 * tr_sqrt;
    return std::max(d2, 0.0);
}

// ---------------------------------------------------------------------------
// Kernel (MMD^2) distance
// ---------------------------------------------------------------------------

// Unbiased MMD^2 with the degree-3 polynomial kernel k(x,y) = (x.y/F + 1)^3.
// For equal sample counts the paired U-statistic is used (diagonal of the
// cross-kernel excluded), so identical sample sets score exactly zero.
template <typename T>
double kid(const Tensor<T>& fa, const Tensor<T>& fb) {
    if (fa.rank() != 2 || fb.rank() != 2)
        throw std::invalid_argument("kid: expects [N, F] feature matrices");
    if (fa.dim(1) != fb.dim(1))
        throw std::invalid_argument("kid: feature dims disagree");
    const std::int64_t m = fa.dim(0), n = fb.dim(0), f = fa.dim(1);
    if (m < 2 || n < 2)
        throw std::invalid_argument("kid: need at least 2 samples per set");
    Eigen::MatrixXd x(m, f), y(n, f);
    for (std::int64_t i = 0; i < m; ++i)
        for (std::int64_t j = 0; j < f; ++j)
            x(i, j) = double(fa.data()[std::size_t(i * f + j)]);
    for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t j = 0; j < f; ++j)
            y(i, j) = double(fb.data()[std::size_t(i * f + j)]);
    auto kernel = [f](const Eigen::MatrixXd& p, const Eigen::MatrixXd& q) {
        Eigen::MatrixXd k = (p * q.transpose() / double(f)).array() + 1.0;
        return Eigen::MatrixXd((k.array() * k.array() * k.array()).matrix());
    };
    const Eigen::MatrixXd kxx = kernel(x, x), kyy = kernel(y, y), kxy = kernel(x, y);
    const double sxx = kxx.sum() - kxx.trace();
    const double syy = kyy.sum() - kyy.trace();
    if (m == n) {
        const double sxy_off = kxy.sum() - kxy.trace();
        return (sxx + syy - 2.0 * sxy_off) / (double(m) * double(m - 1));
    }
    return sxx / (double(m) * double(m - 1)) + syy / (double(n) * double(n - 1)) -
           2.0 * kxy.sum() / (double(m) * double(n));
}

// ---------------------------------------------------------------------------
// Feature extractor: 3 group-conv blocks -> group max-pool -> global average
// pool (features) -> dense softmax classifier over 10 classes.
// ---------------------------------------------------------------------------

struct ExtractorConfig {
    Group group = Group::P4;
    std::vector<std::int64_t> channels = {16, 32, 64};  // F = channels.back()
    std::int64_t kernel = 3;
    std::int64_t num_classes = 10;
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    std::int64_t batch_size = 64;
    std::int64_t max_steps = 3000;   // step budget before giving up
    std::int64_t check_every = 50;   // held-out accuracy cadence
    double target_accuracy = 0.95;
    double holdout_fraction = 0.1;
    std::uint64_t seed = 0;

    void validate() const {
        if (channels.size() != 3)
            throw std::invalid_argument("extractor: exactly 3 conv blocks expected");
        if (kernel % 2 == 0 || kernel < 1)
            throw std::invalid_argument("extractor: kernel must be odd and >= 1");
        if (!(holdout_fraction > 0.0 && holdout_fraction < 1.0))
            throw std::invalid_argument("extractor: holdout fraction in (0,1)");
        if (batch_size < 1 || max_steps < 0 || check_every < 1)
            throw std::invalid_argument("extractor: invalid training sizes");
        if (!(target_accuracy > 0.0 && target_accuracy <= 1.0))
            throw std::invalid_argument("extractor: target accuracy in (0,1]");
    }
};

template <typename T>
struct FeatureExtractor {
    ExtractorConfig cfg;
    std::vector<GConvLayer<T>> convs;
    Tensor<T> fc_w, fc_b;  // [F, num_classes], [num_classes]

    FeatureExtractor() = default;
    FeatureExtractor(const ExtractorConfig& c, Random& rng) : cfg(c) {
        cfg.validate();
        std::int64_t c_in = 1;
        for (std::size_t i = 0; i < cfg.channels.size(); ++i) {
            const FilterDomain dom =
                i == 0 ? FilterDomain::Z2_IN
                       : (cfg.group == Group::Z2 ? FilterDomain::Z2_IN
                                                 : FilterDomain::G_IN);
            convs.emplace_back(dom, cfg.group, cfg.channels[i], c_in, cfg.kernel,
                               (cfg.kernel - 1) / 2, /*sn=*/false, rng);
            c_in = cfg.channels[i];
        }
        fc_w = Tensor<T>::zeros({feature_dim(), cfg.num_classes}, true);
        orthogonal_init(fc_w, feature_dim(), rng);
        fc_b = Tensor<T>::zeros({cfg.num_classes}, true);
    }

    std::int64_t feature_dim() const { return cfg.channels.back(); }

    // Final-pooling-layer features: group max-pool then global average pool.
    Tensor<T> features(const Tensor<T>& x0) {
        Tensor<T> x = x0;
        for (std::size_t i = 0; i < convs.size(); ++i) {
            x = relu(convs[i].forward(x));
            if (i + 1 < convs.size()) x = avg_pool2(x);
        }
        if (cfg.group != Group::Z2) x = group_pool(x, PoolKind::Max);
        return global_avg_pool(x);  // [B, F]
    }

    Tensor<T> logits(const Tensor<T>& x) { return dense(features(x), fc_w, fc_b); }

    void collect(std::vector<NamedTensor<T>>& out) {
        for (std::size_t i = 0; i < convs.size(); ++i)
            convs[i].collect("ex.conv" + std::to_string(i), out);
        out.push_back({"ex.fc.weight", fc_w, true});
        out.push_back({"ex.fc.bias", fc_b, true});
    }
};

// Mean softmax cross-entropy over a batch (numerically stabilized by a
// detached per-row max shift).
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits,
                        const std::vector<std::int64_t>& y) {
    const std::int64_t b = logits.dim(0), k = logits.dim(1);
    if (std::int64_t(y.size()) != b)
        throw std::invalid_argument("cross_entropy: one label per row required");
    std::vector<T> mx(static_cast<std::size_t>(b));
    std::vector<T> hot(static_cast<std::size_t>(b * k), T(0));
    for (std::int64_t i = 0; i < b; ++i) {
        T m = logits.data()[std::size_t(i * k)];
        for (std::int64_t j = 1; j < k; ++j)
            m = std::max(m, logits.data()[std::size_t(i * k + j)]);
        mx[std::size_t(i)] = m;
        if (y[std::size_t(i)] < 0 || y[std::size_t(i)] >= k)
            throw std::invalid_argument("cross_entropy: label out of range");
        hot[std::size_t(i * k + y[std::size_t(i)])] = T(1);
    }
    Tensor<T> shift = broadcast_to(
        reshape(Tensor<T>::from({b}, std::move(mx)), {b, 1}), logits.shape());
    Tensor<T> sh = sub(logits, shift);
    Tensor<T> lse = log_(reduce_sum(exp_(sh), {1}));  // [B]
    Tensor<T> onehot = Tensor<T>::from({b, k}, std::move(hot));
    Tensor<T> picked = reduce_sum(mul(sh, onehot), {1});  // [B]
    return mean_all(sub(lse, picked));
}

template <typename T>
double classifier_accuracy(FeatureExtractor<T>& ex, const LabeledImageSet<T>& set,
                           std::int64_t batch = 128) {
    std::int64_t correct = 0;
    const std::int64_t k = ex.cfg.num_classes;
    for (std::int64_t at = 0; at < set.size(); at += batch) {
        std::vector<std::int64_t> idx;
        for (std::int64_t i = at; i < std::min(at + batch, set.size()); ++i)
            idx.push_back(i);
        auto [imgs, labels] = gather_batch(set, idx);
        Tensor<T> lg = ex.logits(imgs);
        for (std::int64_t i = 0; i < lg.dim(0); ++i) {
            std::int64_t best = 0;
            for (std::int64_t j = 1; j < k; ++j)
                if (lg.data()[std::size_t(i * k + j)] >
                    lg.data()[std::size_t(i * k + best)])
                    best = j;
            if (best == labels[std::size_t(i)]) ++correct;
        }
    }
    return set.size() == 0 ? 0.0 : double(correct) / double(set.size());
}

// Train the classifier to at least cfg.target_accuracy on a held-out 10%
// (cfg.holdout_fraction) of the split; throws if the step budget runs out
// first, since features from an untrained extractor make the metric
// meaningless.
template <typename T>
FeatureExtractor<T> train_feature_extractor(const LabeledImageSet<T>& train_split,
                                            const ExtractorConfig& cfg = {}) {
    cfg.validate();
    train_split.validate(cfg.num_classes);
    const std::int64_t n = train_split.size();
    const std::int64_t n_hold =
        std::max<std::int64_t>(1, std::int64_t(std::llround(
                                      cfg.holdout_fraction * double(n))));
    if (n_hold >= n)
        throw std::invalid_argument("extractor: split too small for a holdout");
    Random rng(cfg.seed);
    std::vector<std::int64_t> perm(static_cast<std::size_t>(n));
    std::iota(perm.begin(), perm.end(), std::int64_t(0));
    for (std::int64_t i = n - 1; i > 0; --i)
        std::swap(perm[std::size_t(i)],
                  perm[std::size_t(rng.below(std::uint64_t(i + 1)))]);
    std::vector<std::int64_t> fit_idx(perm.begin(), perm.end() - n_hold);
    std::vector<std::int64_t> hold_idx(perm.end() - n_hold, perm.end());
    auto [fit_images, fit_labels] = gather_batch(train_split, fit_idx);
    auto [hold_images, hold_labels] = gather_batch(train_split, hold_idx);
    LabeledImageSet<T> fit{fit_images, fit_labels, "fit"};
    LabeledImageSet<T> hold{hold_images, hold_labels, "holdout"};

    FeatureExtractor<T> ex(cfg, rng);
    std::vector<NamedTensor<T>> params;
    ex.collect(params);
    Adam<T> opt;
    opt.lr = T(cfg.lr);
    opt.beta1 = T(cfg.beta1);
    opt.beta2 = T(cfg.beta2);
    opt.init(params);

    const std::int64_t bs = std::min(cfg.batch_size, fit.size());
    BatchStream stream(fit.size(), bs, cfg.seed + 1);
    double best = classifier_accuracy(ex, hold);
    if (best >= cfg.target_accuracy) return ex;
    for (std::int64_t step = 1; step <= cfg.max_steps; ++step) {
        auto [imgs, labels] = gather_batch(fit, stream.next());
        Tensor<T> loss = cross_entropy(ex.logits(imgs), labels);
        backward(loss);
        opt.step(params);
        if (step % cfg.check_every == 0 || step == cfg.max_steps) {
            best = std::max(best, classifier_accuracy(ex, hold));
            if (best >= cfg.target_accuracy) return ex;
        }
    }
    throw std::runtime_error(
        "extractor: held-out accuracy " + std::to_string(best) +
        " below target " + std::to_string(cfg.target_accuracy) + " after " +
        std::to_string(cfg.max_steps) + " steps");
}

// Embed a whole image set in deterministic batch order.
template <typename T>
Tensor<T> extract_features(FeatureExtractor<T>& ex, const Tensor<T>& images,
                           std::int64_t batch = 128) {
    if (images.rank() != 4)
        throw std::invalid_argument("extract_features: expects [N,C,H,W]");
    Tensor<T> out;
    for (std::int64_t at = 0; at < images.dim(0); at += batch) {
        const std::int64_t b = std::min(batch, images.dim(0) - at);
        const std::int64_t px = images.dim(1) * images.dim(2) * images.dim(3);
        std::vector<T> chunk(images.data().begin() + at * px,
                             images.data().begin() + (at + b) * px);
        Tensor<T> x = Tensor<T>::from({b, images.dim(1), images.dim(2),
                                       images.dim(3)}, std::move(chunk));
        Tensor<T> f = ex.features(x).detach();
        out = out.defined() ? concat2(out, f, 0) : f;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Run evaluation: FD between |validation| generated samples (labels matching
// the empirical validation label histogram) and the validation set itself.
// ---------------------------------------------------------------------------

// `sample_images(labels, rng)` must return [|labels|, C, H, W] in [-1, 1].
template <typename T, typename Sampler>
double evaluate_run(Sampler&& sample_images, FeatureExtractor<T>& extractor,
                    const LabeledImageSet<T>& validation, Random& rng) {
    validation.validate(extractor.cfg.num_classes);
    if (validation.size() < 2)
        throw std::invalid_argument("evaluate_run: validation set too small");
    // Exactly the validation labels, in a random order: the generated label
    // histogram matches the validation histogram by construction.
    std::vector<std::int64_t> labels = validation.labels;
    for (std::size_t i = labels.size() - 1; i > 0; --i)
        std::swap(labels[i], labels[std::size_t(rng.below(i + 1))]);
    Tensor<T> gen = sample_images(labels, rng);
    if (gen.rank() != 4 || gen.dim(0) != validation.size())
        throw std::invalid_argument(
            "evaluate_run: sample count " +
            std::to_string(gen.rank() == 4 ? gen.dim(0) : std::int64_t(-1)) +
            " does not match validation size " +
            std::to_string(validation.size()));
    FeatureStats fake = feature_stats(extract_features(extractor, gen));
    FeatureStats real = feature_stats(extract_features(extractor, validation.images));
    return frechet_distance(fake, real);
}

template <typename T>
double evaluate_run(GANTrainer<T>& trainer, FeatureExtractor<T>& extractor,
                    const LabeledImageSet<T>& validation, Random& rng) {
    return evaluate_run(
        [&trainer](const std::vector<std::int64_t>& labels, Random& r) {
            return trainer.sample(std::int64_t(labels.size()), labels,
                                  std::numeric_limits<T>::infinity(), r);
        },
        extractor, validation, rng);
}

// ---------------------------------------------------------------------------
// PNG sample grids
// ---------------------------------------------------------------------------

namespace detail {

inline void png_chunk(std::ostream& out, const char type[4],
                      const std::vector<std::uint8_t>& body) {
    const std::uint32_t len = std::uint32_t(body.size());
    const std::uint8_t lb[4] = {std::uint8_t(len >> 24), std::uint8_t(len >> 16),
                                std::uint8_t(len >> 8), std::uint8_t(len)};
    out.write(reinterpret_cast<const char*>(lb), 4);
    out.write(type, 4);
    if (!body.empty())
        out.write(reinterpret_cast<const char*>(body.data()),
                  std::streamsize(body.size()));
    std::uint32_t crc = std::uint32_t(
        crc32(0L, reinterpret_cast<const Bytef*>(type), 4));
    if (!body.empty())
        crc = std::uint32_t(crc32(crc, body.data(), uInt(body.size())));
    const std::uint8_t cb[4] = {std::uint8_t(crc >> 24), std::uint8_t(crc >> 16),
                                std::uint8_t(crc >> 8), std::uint8_t(crc)};
    out.write(reinterpret_cast<const char*>(cb), 4);
}

inline void png_write(const std::string& path, std::int64_t w, std::int64_t h,
                      int channels, const std::vector<std::uint8_t>& pixels) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("render_grid: cannot write " + path);
    static const std::uint8_t sig[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
    out.write(reinterpret_cast<const char*>(sig), 8);
    std::vector<std::uint8_t> ihdr(13);
    auto be32 = [](std::uint8_t* p, std::uint32_t v) {
        p[0] = std::uint8_t(v >> 24);
        p[1] = std::uint8_t(v >> 16);
        p[2] = std::uint8_t(v >> 8);
        p[3] = std::uint8_t(v);
    };
    be32(ihdr.data(), std::uint32_t(w));
    be32(ihdr.data() + 4, std::uint32_t(h));
    ihdr[8] = 8;                                    // bit depth
    ihdr[9] = channels == 1 ? 0 : 2;                // grayscale / truecolor
    ihdr[10] = ihdr[11] = ihdr[12] = 0;             // deflate, no interlace
    png_chunk(out, "IHDR", ihdr);
    // Raw scanlines with filter byte 0 per row.
    const std::size_t stride = std::size_t(w) * std::size_t(channels);
    std::vector<std::uint8_t> raw(std::size_t(h) * (stride + 1));
    for (std::int64_t r = 0; r < h; ++r) {
        raw[std::size_t(r) * (stride + 1)] = 0;
        std::memcpy(raw.data() + std::size_t(r) * (stride + 1) + 1,
                    pixels.data() + std::size_t(r) * stride, stride);
    }
    uLongf zlen = compressBound(uLong(raw.size()));
    std::vector<std::uint8_t> zbuf(zlen);
    if (compress2(zbuf.data(), &zlen, raw.data(), uLong(raw.size()), 9) != Z_OK)
        throw std::runtime_error("render_grid: zlib compression failed");
    zbuf.resize(zlen);
    png_chunk(out, "IDAT", zbuf);
    png_chunk(out, "IEND", {});
    if (!out) throw std::runtime_error("render_grid: write failed for " + path);
}

}  // namespace detail

// Tile the first rows*cols images of a [-1,1] batch into an 8-bit PNG.
template <typename T>
void render_grid(const Tensor<T>& images, std::int64_t rows, std::int64_t cols,
                 const std::string& path) {
    if (images.rank() != 4)
        throw std::invalid_argument("render_grid: expects [B,C,H,W]");
    const std::int64_t b = images.dim(0), c = images.dim(1);
    const std::int64_t h = images.dim(2), w = images.dim(3);
    if (rows < 1 || cols < 1 || rows * cols > b)
        throw std::invalid_argument("render_grid: grid " + std::to_string(rows) +
                                    "x" + std::to_string(cols) +
                                    " exceeds batch of " + std::to_string(b));
    if (c != 1 && c != 3)
        throw std::invalid_argument("render_grid: 1 or 3 channels supported");
    const std::int64_t gw = cols * w, gh = rows * h;
    std::vector<std::uint8_t> px(std::size_t(gh * gw * c));
    for (std::int64_t r = 0; r < rows; ++r)
        for (std::int64_t q = 0; q < cols; ++q) {
            const std::int64_t img = r * cols + q;
            for (std::int64_t ch = 0; ch < c; ++ch)
                for (std::int64_t i = 0; i < h; ++i)
                    for (std::int64_t j = 0; j < w; ++j) {
                        const double v = double(
                            images.data()[std::size_t(((img * c + ch) * h + i) * w +
                                                      j)]);
                        const long byte = std::lround((v + 1.0) * 0.5 * 255.0);
                        px[std::size_t(((r * h + i) * gw + q * w + j) * c + ch)] =
                            std::uint8_t(std::clamp(byte, 0L, 255L));
                    }
        }
    detail::png_write(path, gw, gh, int(c), px);
}

}  // namespace gegan
