#pragma once

// Exact integer algebra for the plane symmetry groups p4 and p4m, plus their
// actions on points, square filters, and group feature maps.
//
// Conventions (frozen; feature-map layouts and checkpoints depend on them):
//  - point (x, y): x runs along columns, y runs upward. Array index (i, j)
//    maps to x = 2j - (k-1), y = (k-1) - 2i in doubled centered coordinates,
//    so quarter turns are exact index permutations for any extent k.
//  - r = 1 is a counter-clockwise quarter turn: out(i, j) = in(j, k-1-i).
//  - m = 1 negates x (column reversal); the point-group part of an element
//    factors as M^m . R^r.
//  - stabilizer ordering: p4 -> r = 0..3; p4m -> (m=0, r=0..3), (m=1, r=0..3).

#include <array>
#include <cstdint>
#include <stdexcept>
#include <utility>
#include <vector>

#include "gegan/tensor.hpp"

namespace gegan {

enum class Group { Z2, P4, P4M };  // Z2 = trivial point group (standard CNN path)

inline int stabilizer_size(Group g) {
    switch (g) {
        case Group::Z2: return 1;
        case Group::P4: return 4;
        case Group::P4M: return 8;
    }
    throw std::invalid_argument("unknown group");
}

inline const char* group_name(Group g) {
    switch (g) {
        case Group::Z2: return "z2";
        case Group::P4: return "p4";
        case Group::P4M: return "p4m";
    }
    return "?";
}

struct GroupElement {
    Group group = Group::P4;
    int m = 0;           // reflection count, mod 2 (always 0 for P4/Z2)
    int r = 0;           // quarter-turn count, mod 4
    std::int64_t u = 0;  // translation
    std::int64_t v = 0;

    static GroupElement identity(Group g) { return GroupElement{g, 0, 0, 0, 0}; }

    bool operator==(const GroupElement& o) const {
        return group == o.group && m == o.m && r == o.r && u == o.u && v == o.v;
    }
};

using Mat3 = std::array<std::array<std::int64_t, 3>, 3>;

// cos(r*pi/2), sin(r*pi/2) evaluated symbolically.
inline std::int64_t icos(int r) {
    static constexpr std::int64_t t[4] = {1, 0, -1, 0};
    return t[((r % 4) + 4) % 4];
}
inline std::int64_t isin(int r) {
    static constexpr std::int64_t t[4] = {0, 1, 0, -1};
    return t[((r % 4) + 4) % 4];
}

inline Mat3 matrix(const GroupElement& a) {
    const std::int64_t c = icos(a.r), s = isin(a.r);
    const std::int64_t sgn = a.m ? -1 : 1;
    return Mat3{{{sgn * c, -sgn * s, a.u},
                 {s, c, a.v},
                 {0, 0, 1}}};
}

inline Mat3 matmul3(const Mat3& a, const Mat3& b) {
    Mat3 out{};
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) {
            std::int64_t acc = 0;
            for (int k = 0; k < 3; ++k) acc += a[i][k] * b[k][j];
            out[i][j] = acc;
        }
    return out;
}

// Decode a valid p4m matrix back into (m, r, u, v).
inline GroupElement from_matrix(Group g, const Mat3& M) {
    const std::int64_t det = M[0][0] * M[1][1] - M[0][1] * M[1][0];
    if (det != 1 && det != -1) throw std::invalid_argument("from_matrix: not a symmetry");
    const int m = det < 0 ? 1 : 0;
    const std::int64_t sgn = m ? -1 : 1;
    // Strip the reflection: R^r = M(m) . L
    const std::int64_t c = sgn * M[0][0];
    const std::int64_t s = M[1][0];
    int r = -1;
    for (int k = 0; k < 4; ++k)
        if (icos(k) == c && isin(k) == s) r = k;
    if (r < 0) throw std::invalid_argument("from_matrix: not a quarter-turn matrix");
    if (g == Group::P4 && m != 0)
        throw std::invalid_argument("from_matrix: reflection not in p4");
    return GroupElement{g, m, r, M[0][2], M[1][2]};
}

inline GroupElement compose(const GroupElement& a, const GroupElement& b) {
    if (a.group != b.group)
        throw std::invalid_argument("compose: mixed-group composition");
    return from_matrix(a.group, matmul3(matrix(a), matrix(b)));
}

inline GroupElement inverse(const GroupElement& a) {
    // Point part inverts as (M^m R^r)^-1 = R^-r M^m = M^m R^(m ? r : -r);
    // derived here by matrix transpose of the orthogonal linear part.
    const Mat3 M = matrix(a);
    Mat3 inv{};
    for (int i = 0; i < 2; ++i)
        for (int j = 0; j < 2; ++j) inv[i][j] = M[j][i];  // orthogonal: L^-1 = L^T
    inv[0][2] = -(inv[0][0] * a.u + inv[0][1] * a.v);
    inv[1][2] = -(inv[1][0] * a.u + inv[1][1] * a.v);
    inv[2] = {0, 0, 1};
    return from_matrix(a.group, inv);
}

inline std::pair<std::int64_t, std::int64_t> act_on_point(
    const GroupElement& a, std::pair<std::int64_t, std::int64_t> p) {
    const Mat3 M = matrix(a);
    return {M[0][0] * p.first + M[0][1] * p.second + M[0][2],
            M[1][0] * p.first + M[1][1] * p.second + M[1][2]};
}

inline std::vector<GroupElement> stabilizer(Group g) {
    std::vector<GroupElement> out;
    const int mm = g == Group::P4M ? 2 : 1;
    const int rr = g == Group::Z2 ? 1 : 4;
    for (int m = 0; m < mm; ++m)
        for (int r = 0; r < rr; ++r) out.push_back(GroupElement{g, m, r, 0, 0});
    return out;
}

// Index of a stabilizer (point-group) element in the frozen ordering.
inline int stabilizer_index(const GroupElement& a) {
    if (a.u != 0 || a.v != 0)
        throw std::invalid_argument("stabilizer_index: translation component nonzero");
    return a.group == Group::P4M ? a.m * 4 + a.r : a.r;
}

namespace detail {

// Linear index map realizing out(i,j) = in(a^-1 . (i,j)) on a k x k grid,
// centered. Doubled coordinates keep everything integer for even k too.
inline std::vector<std::int64_t> plane_index_map(const GroupElement& a,
                                                 std::int64_t k) {
    if (a.u != 0 || a.v != 0)
        throw std::invalid_argument("plane transform: translation component nonzero");
    const Mat3 Minv = matrix(inverse(a));
    std::vector<std::int64_t> idx(static_cast<std::size_t>(k * k));
    for (std::int64_t i = 0; i < k; ++i) {
        for (std::int64_t j = 0; j < k; ++j) {
            const std::int64_t x = 2 * j - (k - 1);
            const std::int64_t y = (k - 1) - 2 * i;
            const std::int64_t xs = Minv[0][0] * x + Minv[0][1] * y;
            const std::int64_t ys = Minv[1][0] * x + Minv[1][1] * y;
            const std::int64_t js = (xs + (k - 1)) / 2;
            const std::int64_t is = ((k - 1) - ys) / 2;
            idx[static_cast<std::size_t>(i * k + j)] = is * k + js;
        }
    }
    return idx;
}

// Tile a per-block index map over leading blocks, with a per-block source
// block id (for group-axis permutation block != destination block).
inline std::vector<std::int64_t> tile_index_map(
    const std::vector<std::int64_t>& block_map, std::int64_t block_size,
    const std::vector<std::int64_t>& src_block_of_dst) {
    std::vector<std::int64_t> idx(block_map.size() * src_block_of_dst.size());
    std::size_t o = 0;
    for (std::size_t b = 0; b < src_block_of_dst.size(); ++b) {
        const std::int64_t base = src_block_of_dst[b] * block_size;
        for (auto k : block_map) idx[o++] = base + k;
    }
    return idx;
}

}  // namespace detail

// Transform a square filter (trailing two axes) by the point-group part of a:
// output(x) = input(a^-1 x), applied independently to every leading slice.
template <typename T>
Tensor<T> act_on_filter(const GroupElement& a, const Tensor<T>& w) {
    const int r = w.rank();
    if (r < 2) throw std::invalid_argument("act_on_filter: rank < 2");
    const std::int64_t k = w.dim(r - 1);
    if (w.dim(r - 2) != k)
        throw std::invalid_argument("act_on_filter: non-square spatial extent");
    const auto block = detail::plane_index_map(a, k);
    const std::int64_t nblocks = w.size() / (k * k);
    std::vector<std::int64_t> blocks(static_cast<std::size_t>(nblocks));
    std::iota(blocks.begin(), blocks.end(), 0);
    return take(w, detail::tile_index_map(block, k * k, blocks), w.shape());
}

// Transform a planar image batch [..., H, W] (H == W required for odd turns).
template <typename T>
Tensor<T> act_on_image(const GroupElement& a, const Tensor<T>& x) {
    const int r = x.rank();
    const std::int64_t H = x.dim(r - 2), W = x.dim(r - 1);
    if (H != W && a.r % 2 != 0)
        throw std::invalid_argument("act_on_image: quarter turn needs square input");
    return act_on_filter(a, x);
}

// Regular-representation action on a group feature map x[B,C,S,H,W]:
// planar axes transformed by the point part of a, group axis permuted by
// h -> a o h.
template <typename T>
Tensor<T> act_on_group_feature(const GroupElement& a, const Tensor<T>& x) {
    if (x.rank() != 5)
        throw std::invalid_argument("act_on_group_feature: expects [B,C,S,H,W]");
    const std::int64_t S = x.dim(2), H = x.dim(3), W = x.dim(4);
    const auto stab = stabilizer(a.group);
    if (S != static_cast<std::int64_t>(stab.size()))
        throw std::invalid_argument("act_on_group_feature: group axis size " +
                                    std::to_string(S) + " != |stabilizer| " +
                                    std::to_string(stab.size()));
    if (H != W) throw std::invalid_argument("act_on_group_feature: H != W");
    const auto plane = detail::plane_index_map(a, H);
    // Destination slice idx(a o h_t) reads from source slice t.
    std::vector<std::int64_t> src_of_dst(stab.size());
    for (std::size_t t = 0; t < stab.size(); ++t)
        src_of_dst[static_cast<std::size_t>(stabilizer_index(compose(a, stab[t])))] =
            static_cast<std::int64_t>(t);
    const std::int64_t BC = x.dim(0) * x.dim(1);
    std::vector<std::int64_t> blocks;
    blocks.reserve(static_cast<std::size_t>(BC * S));
    for (std::int64_t n = 0; n < BC; ++n)
        for (std::int64_t s = 0; s < S; ++s) blocks.push_back(n * S + src_of_dst[static_cast<std::size_t>(s)]);
    return take(x, detail::tile_index_map(plane, H * W, blocks), x.shape());
}

}  // namespace gegan
