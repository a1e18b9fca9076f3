#pragma once

// Dataset plumbing: IDX ingestion/writing, rotated-digit construction,
// class-stratified fractional subsets, group augmentation, and a
// deterministic (and serializable) batch index stream.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "gegan/symmetry.hpp"
#include "gegan/tensor.hpp"

namespace gegan {

template <typename T>
struct LabeledImageSet {
    Tensor<T> images;                 // [N, C, H, W] in [-1, 1]
    std::vector<std::int64_t> labels; // [N]
    std::string split;

    std::int64_t size() const { return images.defined() ? images.dim(0) : 0; }

    void validate(std::int64_t n_classes = 10) const {
        if (images.rank() != 4)
            throw std::invalid_argument("dataset: images must be [N,C,H,W]");
        if (images.dim(0) != std::int64_t(labels.size()))
            throw std::invalid_argument("dataset: image/label count mismatch: " +
                                        std::to_string(images.dim(0)) + " vs " +
                                        std::to_string(labels.size()));
        for (T v : images.data())
            if (!(v >= T(-1) && v <= T(1)))
                throw std::invalid_argument("dataset: pixel outside [-1,1]");
        for (std::int64_t l : labels)
            if (l < 0 || l >= n_classes)
                throw std::invalid_argument("dataset: label " + std::to_string(l) +
                                            " outside [0," +
                                            std::to_string(n_classes) + ")");
    }
};

namespace detail {

inline std::uint32_t read_be32(std::istream& in, const char* what) {
    unsigned char b[4];
    if (!in.read(reinterpret_cast<char*>(b), 4))
        throw std::runtime_error(std::string("idx: truncated ") + what);
    return (std::uint32_t(b[0]) << 24) | (std::uint32_t(b[1]) << 16) |
           (std::uint32_t(b[2]) << 8) | std::uint32_t(b[3]);
}

inline void write_be32(std::ostream& out, std::uint32_t v) {
    const unsigned char b[4] = {static_cast<unsigned char>(v >> 24),
                                static_cast<unsigned char>(v >> 16),
                                static_cast<unsigned char>(v >> 8),
                                static_cast<unsigned char>(v)};
    out.write(reinterpret_cast<const char*>(b), 4);
}

}  // namespace detail

// Parse big-endian IDX image/label file pair; pixels mapped [0,255] -> [-1,1].
template <typename T>
LabeledImageSet<T> load_idx(const std::string& images_path,
                            const std::string& labels_path) {
    std::ifstream fi(images_path, std::ios::binary);
    if (!fi) throw std::runtime_error("idx: cannot open " + images_path);
    if (detail::read_be32(fi, "image magic") != 0x00000803u)
        throw std::runtime_error("idx: bad image magic in " + images_path);
    const std::int64_t n = detail::read_be32(fi, "image count");
    const std::int64_t h = detail::read_be32(fi, "rows");
    const std::int64_t w = detail::read_be32(fi, "cols");
    std::vector<unsigned char> raw(static_cast<std::size_t>(n * h * w));
    if (!fi.read(reinterpret_cast<char*>(raw.data()),
                 static_cast<std::streamsize>(raw.size())))
        throw std::runtime_error("idx: image payload shorter than header claims");

    std::ifstream fl(labels_path, std::ios::binary);
    if (!fl) throw std::runtime_error("idx: cannot open " + labels_path);
    if (detail::read_be32(fl, "label magic") != 0x00000801u)
        throw std::runtime_error("idx: bad label magic in " + labels_path);
    const std::int64_t nl = detail::read_be32(fl, "label count");
    if (nl != n)
        throw std::runtime_error("idx: image/label count mismatch: " +
                                 std::to_string(n) + " vs " + std::to_string(nl));
    std::vector<unsigned char> lraw(static_cast<std::size_t>(nl));
    if (!fl.read(reinterpret_cast<char*>(lraw.data()),
                 static_cast<std::streamsize>(lraw.size())))
        throw std::runtime_error("idx: label payload shorter than header claims");

    LabeledImageSet<T> out;
    std::vector<T> px(raw.size());
    for (std::size_t i = 0; i < raw.size(); ++i)
        px[i] = T(raw[i]) / T(255) * T(2) - T(1);
    out.images = Tensor<T>::from({n, 1, h, w}, std::move(px));
    out.labels.assign(lraw.begin(), lraw.end());
    out.validate();
    return out;
}

// Inverse of load_idx (byte-exact round trip for byte-quantized pixels).
template <typename T>
void write_idx(const LabeledImageSet<T>& set, const std::string& images_path,
               const std::string& labels_path) {
    std::ofstream fi(images_path, std::ios::binary);
    if (!fi) throw std::runtime_error("idx: cannot write " + images_path);
    detail::write_be32(fi, 0x00000803u);
    detail::write_be32(fi, std::uint32_t(set.images.dim(0)));
    detail::write_be32(fi, std::uint32_t(set.images.dim(2)));
    detail::write_be32(fi, std::uint32_t(set.images.dim(3)));
    for (T v : set.images.data()) {
        const double u = (double(v) + 1.0) / 2.0 * 255.0;
        const long q = std::lround(std::min(255.0, std::max(0.0, u)));
        const unsigned char b = static_cast<unsigned char>(q);
        fi.write(reinterpret_cast<const char*>(&b), 1);
    }
    std::ofstream fl(labels_path, std::ios::binary);
    if (!fl) throw std::runtime_error("idx: cannot write " + labels_path);
    detail::write_be32(fl, 0x00000801u);
    detail::write_be32(fl, std::uint32_t(set.labels.size()));
    for (std::int64_t l : set.labels) {
        const unsigned char b = static_cast<unsigned char>(l);
        fl.write(reinterpret_cast<const char*>(&b), 1);
    }
}

// Continuous rotation about the image center with bilinear interpolation and
// zero padding outside the grid. Angle in radians, counterclockwise.
template <typename T>
Tensor<T> rotate_bilinear(const Tensor<T>& img, double angle) {
    if (img.rank() < 2) throw std::invalid_argument("rotate: rank < 2");
    const std::int64_t H = img.dim(img.rank() - 2), W = img.dim(img.rank() - 1);
    const std::int64_t planes = img.size() / (H * W);
    const double cy = (double(H) - 1.0) / 2.0, cx = (double(W) - 1.0) / 2.0;
    const double c = std::cos(angle), s = std::sin(angle);
    std::vector<T> out(img.data().size(), T(0));
    const auto& in = img.data();
    for (std::int64_t p = 0; p < planes; ++p) {
        const std::size_t base = static_cast<std::size_t>(p * H * W);
        for (std::int64_t i = 0; i < H; ++i) {
            for (std::int64_t j = 0; j < W; ++j) {
                // inverse map: sample the source at the back-rotated point
                // (y axis points down, so a CCW image rotation uses +s here)
                const double dx = double(j) - cx, dy = double(i) - cy;
                const double sx = c * dx - s * dy + cx;
                const double sy = s * dx + c * dy + cy;
                const std::int64_t x0 = std::int64_t(std::floor(sx));
                const std::int64_t y0 = std::int64_t(std::floor(sy));
                const double fx = sx - double(x0), fy = sy - double(y0);
                double acc = 0.0;
                for (int ddy = 0; ddy <= 1; ++ddy) {
                    for (int ddx = 0; ddx <= 1; ++ddx) {
                        const std::int64_t xx = x0 + ddx, yy = y0 + ddy;
                        if (xx < 0 || xx >= W || yy < 0 || yy >= H) continue;
                        const double wgt = (ddx ? fx : 1.0 - fx) * (ddy ? fy : 1.0 - fy);
                        acc += wgt * double(in[base + std::size_t(yy * W + xx)]);
                    }
                }
                out[base + std::size_t(i * W + j)] = T(acc);
            }
        }
    }
    return Tensor<T>::from(img.shape(), std::move(out));
}

// Rotate every source image by an independent uniform angle in [0, 2pi) and
// split into train/validation sets of the requested sizes.
template <typename T>
std::pair<LabeledImageSet<T>, LabeledImageSet<T>> make_rotmnist(
    const LabeledImageSet<T>& source, std::uint64_t seed,
    std::int64_t n_train = 12000, std::int64_t n_val = 50000) {
    if (source.size() < n_train + n_val)
        throw std::invalid_argument(
            "make_rotmnist: need " + std::to_string(n_train + n_val) +
            " source images, have " + std::to_string(source.size()));
    Random rng(seed);
    const std::int64_t C = source.images.dim(1), H = source.images.dim(2),
                       W = source.images.dim(3);
    const std::int64_t per = C * H * W;
    auto build = [&](std::int64_t begin, std::int64_t count, const char* tag) {
        std::vector<T> px(static_cast<std::size_t>(count * per));
        LabeledImageSet<T> out;
        out.labels.resize(static_cast<std::size_t>(count));
        for (std::int64_t i = 0; i < count; ++i) {
            const double angle = rng.uniform() * 2.0 * 3.14159265358979323846;
            Tensor<T> one = Tensor<T>::from(
                {C, H, W},
                std::vector<T>(source.images.data().begin() + (begin + i) * per,
                               source.images.data().begin() + (begin + i + 1) * per));
            Tensor<T> rot = rotate_bilinear(one, angle);
            std::copy(rot.data().begin(), rot.data().end(),
                      px.begin() + static_cast<std::size_t>(i * per));
            out.labels[std::size_t(i)] = source.labels[std::size_t(begin + i)];
        }
        // interpolation can overshoot [-1,1] marginally at zero-padding edges
        for (T& v : px) v = std::min(T(1), std::max(T(-1), v));
        out.images = Tensor<T>::from({count, C, H, W}, std::move(px));
        out.split = tag;
        return out;
    };
    auto train = build(0, n_train, "train");
    auto val = build(n_train, n_val, "validation");
    return {std::move(train), std::move(val)};
}

// Class-stratified deterministic subsample. Fractions outside the protocol
// set {0.10, 0.33, 0.66, 1.0} are honored with a warning.
template <typename T>
LabeledImageSet<T> subset(const LabeledImageSet<T>& set, double fraction,
                          std::uint64_t seed, bool* warned = nullptr) {
    const bool protocol = fraction == 0.10 || fraction == 0.33 ||
                          fraction == 0.66 || fraction == 1.0;
    if (warned) *warned = !protocol;
    if (!protocol)
        std::fprintf(stderr,
                     "warning: subset fraction %.4f outside the protocol set "
                     "{0.10, 0.33, 0.66, 1.0}\n",
                     fraction);
    if (fraction <= 0.0 || fraction > 1.0)
        throw std::invalid_argument("subset: fraction must be in (0, 1]");
    if (fraction == 1.0) return set;

    std::int64_t n_classes = 0;
    for (std::int64_t l : set.labels) n_classes = std::max(n_classes, l + 1);
    std::vector<std::vector<std::int64_t>> byclass(
        static_cast<std::size_t>(n_classes));
    for (std::size_t i = 0; i < set.labels.size(); ++i)
        byclass[std::size_t(set.labels[i])].push_back(std::int64_t(i));

    Random rng(seed);
    std::vector<std::int64_t> pick;
    for (auto& idx : byclass) {
        // Fisher-Yates prefix of round(fraction * class size) indices
        const std::int64_t k =
            std::llround(fraction * double(idx.size()));
        for (std::int64_t i = 0; i < k; ++i) {
            const std::int64_t j =
                i + std::int64_t(rng.below(std::uint64_t(idx.size() - std::size_t(i))));
            std::swap(idx[std::size_t(i)], idx[std::size_t(j)]);
            pick.push_back(idx[std::size_t(i)]);
        }
    }
    std::sort(pick.begin(), pick.end());

    const std::int64_t per = set.images.size() / set.size();
    std::vector<T> px(pick.size() * std::size_t(per));
    LabeledImageSet<T> out;
    out.split = set.split;
    out.labels.reserve(pick.size());
    for (std::size_t i = 0; i < pick.size(); ++i) {
        std::copy(set.images.data().begin() + pick[i] * per,
                  set.images.data().begin() + (pick[i] + 1) * per,
                  px.begin() + i * std::size_t(per));
        out.labels.push_back(set.labels[std::size_t(pick[i])]);
    }
    Shape s = set.images.shape();
    s[0] = std::int64_t(pick.size());
    out.images = Tensor<T>::from(std::move(s), std::move(px));
    return out;
}

// Transform the whole batch by one uniformly random stabilizer element of the
// given group; returns the transformed batch and the drawn element.
template <typename T>
std::pair<Tensor<T>, GroupElement> augment_group(const Tensor<T>& batch, Group g,
                                                 Random& rng) {
    if (batch.dim(batch.rank() - 1) != batch.dim(batch.rank() - 2))
        throw std::invalid_argument("augment_group: images must be square");
    const auto stab = stabilizer(g);
    const auto& a = stab[std::size_t(rng.below(stab.size()))];
    return {act_on_image(a, batch), a};
}

// Deterministic per-epoch-shuffled batch index stream; the final partial
// batch of each epoch is dropped. State is serializable for exact resume.
class BatchStream {
  public:
    BatchStream() = default;
    BatchStream(std::int64_t n, std::int64_t batch_size, std::uint64_t seed)
        : n_(n), batch_(batch_size), rng_(seed) {
        if (batch_size > n)
            throw std::invalid_argument("batches: batch_size " +
                                        std::to_string(batch_size) + " > N " +
                                        std::to_string(n));
        if (batch_size <= 0) throw std::invalid_argument("batches: batch_size <= 0");
        shuffle_epoch();
    }

    std::int64_t batch_size() const { return batch_; }
    std::int64_t epoch() const { return epoch_; }

    std::vector<std::int64_t> next() {
        if (cursor_ + batch_ > std::int64_t(perm_.size())) {
            ++epoch_;
            shuffle_epoch();
        }
        std::vector<std::int64_t> out(perm_.begin() + cursor_,
                                      perm_.begin() + cursor_ + batch_);
        cursor_ += batch_;
        return out;
    }

    // Text serialization (engine state, counters, and the current epoch's
    // permutation, which the post-shuffle engine state cannot regenerate).
    std::string serialize() const {
        std::ostringstream os;
        os << n_ << ' ' << batch_ << ' ' << epoch_ << ' ' << cursor_ << ' '
           << rng_.engine() << '\n';
        for (std::int64_t i = 0; i < n_; ++i) os << perm_[std::size_t(i)] << ' ';
        os << '\n';
        return os.str();
    }
    static BatchStream deserialize(const std::string& s) {
        BatchStream b;
        std::istringstream is(s);
        if (!(is >> b.n_ >> b.batch_ >> b.epoch_ >> b.cursor_ >> b.rng_.engine()))
            throw std::runtime_error("batches: corrupt stream state");
        std::int64_t v;
        b.perm_.clear();
        for (std::int64_t i = 0; i < b.n_; ++i) {
            if (!(is >> v)) throw std::runtime_error("batches: corrupt permutation");
            b.perm_.push_back(v);
        }
        return b;
    }

  private:
    void shuffle_epoch() {
        perm_.resize(std::size_t(n_));
        std::iota(perm_.begin(), perm_.end(), 0);
        for (std::int64_t i = n_ - 1; i > 0; --i) {
            const std::int64_t j = std::int64_t(rng_.below(std::uint64_t(i + 1)));
            std::swap(perm_[std::size_t(i)], perm_[std::size_t(j)]);
        }
        cursor_ = 0;
    }

    std::int64_t n_ = 0;
    std::int64_t batch_ = 0;
    std::int64_t epoch_ = 0;
    std::int64_t cursor_ = 0;
    mutable Random rng_;
    std::vector<std::int64_t> perm_;
};

// Gather a batch of images/labels by index.
template <typename T>
std::pair<Tensor<T>, std::vector<std::int64_t>> gather_batch(
    const LabeledImageSet<T>& set, const std::vector<std::int64_t>& idx) {
    const std::int64_t per = set.images.size() / set.size();
    std::vector<T> px(idx.size() * std::size_t(per));
    std::vector<std::int64_t> labels(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) {
        std::copy(set.images.data().begin() + idx[i] * per,
                  set.images.data().begin() + (idx[i] + 1) * per,
                  px.begin() + i * std::size_t(per));
        labels[i] = set.labels[std::size_t(idx[i])];
    }
    Shape s = set.images.shape();
    s[0] = std::int64_t(idx.size());
    return {Tensor<T>::from(std::move(s), std::move(px)), std::move(labels)};
}

}  // namespace gegan
