#pragma once

/// \file
/// Video octree: a sparse octree over an axis-aligned box whose leaves carry
/// the coefficient payload of temporal_field.hpp, plus the shared temporal
/// bases and HH truncation that decode it.
///
/// Internally the tree works in unit-cube coordinates u = (p - lo) / (hi - lo)
/// with the half-open convention [lo, hi) at every level. Child index bits:
/// bit 0 = x, bit 1 = y, bit 2 = z (set = upper half).

#include <Eigen/Core>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "neuvv/errors.hpp"
#include "neuvv/hh_basis.hpp"
#include "neuvv/temporal_field.hpp"

namespace neuvv {

using Vec3 = Eigen::Vector3d;

struct Box3 {
  Vec3 lo = Vec3::Zero();
  Vec3 hi = Vec3::Ones();

  Vec3 size() const { return hi - lo; }
  Vec3 center() const { return 0.5 * (lo + hi); }
  bool contains(const Vec3& p) const {
    return (p.array() >= lo.array()).all() && (p.array() < hi.array()).all();
  }
  friend bool operator==(const Box3& a, const Box3& b) { return a.lo == b.lo && a.hi == b.hi; }
};

/// Cell address of a leaf: depth and integer coordinates at that depth.
struct LeafCell {
  std::uint32_t depth = 0;
  std::uint32_t x = 0, y = 0, z = 0;
  friend bool operator==(const LeafCell&, const LeafCell&) = default;
};

struct OctNode {
  static constexpr std::int32_t kEmpty = -1;
  std::array<std::int32_t, 8> child{kEmpty, kEmpty, kEmpty, kEmpty, kEmpty, kEmpty, kEmpty, kEmpty};

  static constexpr bool is_leaf_ref(std::int32_t c) { return c <= -2; }
  static constexpr std::int32_t leaf_ref(std::int32_t leaf) { return -2 - leaf; }
  static constexpr std::int32_t leaf_of(std::int32_t c) { return -2 - c; }
  friend bool operator==(const OctNode&, const OctNode&) = default;
};

struct RaySegment {
  std::int32_t leaf = -1;
  double t0 = 0.0;     // ray parameter at entry
  double t1 = 0.0;     // ray parameter at exit
  double delta = 0.0;  // world-space length inside the leaf
  double t_mid() const { return 0.5 * (t0 + t1); }
};

template <class Real>
struct LeafHit {
  std::int32_t leaf = -1;
  std::span<const Real> payload;
  Box3 box;
};

template <class Real>
class BasicVOctree {
 public:
  using real_type = Real;

  BasicVOctree() : BasicVOctree(1, BasisTruncation{2}, make_bump_bases<Real>(1, 1), Box3{}) {}

  BasicVOctree(int depth_max, BasisTruncation trunc, TemporalBases<Real> bases, Box3 bbox, bool edits = false)
      : depth_max_(depth_max),
        trunc_(trunc),
        table_(trunc),
        bases_(std::move(bases)),
        bbox_(bbox),
        layout_{bases_.count, trunc.count(), edits} {
    if (depth_max < 1 || depth_max > 20) throw InvalidArgument("VOctree: depth_max must be in [1, 20]");
    if (!((bbox.hi.array() > bbox.lo.array()).all())) throw InvalidArgument("VOctree: empty bounding box");
    if (bases_.A.size() != static_cast<std::size_t>(bases_.frames) * bases_.count ||
        bases_.B.size() != bases_.A.size())
      throw InvalidArgument("VOctree: basis matrices A and B must both be T x C");
    nodes_.emplace_back();
  }

  // -- accessors -----------------------------------------------------------

  int depth_max() const { return depth_max_; }
  const BasisTruncation& truncation() const { return trunc_; }
  const BasisTable& table() const { return table_; }
  const TemporalBases<Real>& bases() const { return bases_; }
  TemporalBases<Real>& mutable_bases() { return bases_; }
  const Box3& bbox() const { return bbox_; }
  const PayloadLayout& layout() const { return layout_; }
  int frames() const { return bases_.frames; }
  int stride() const { return layout_.stride(); }

  std::size_t leaf_count() const { return cells_.size(); }
  const std::vector<OctNode>& nodes() const { return nodes_; }
  const std::vector<LeafCell>& cells() const { return cells_; }
  const std::vector<Real>& payload_data() const { return payload_; }
  std::vector<Real>& mutable_payload_data() { return payload_; }

  std::span<const Real> payload(std::int32_t leaf) const {
    return {payload_.data() + static_cast<std::size_t>(leaf) * stride(), static_cast<std::size_t>(stride())};
  }
  std::span<Real> mutable_payload(std::int32_t leaf) {
    return {payload_.data() + static_cast<std::size_t>(leaf) * stride(), static_cast<std::size_t>(stride())};
  }

  /// Bytes held by leaf payloads and the basis matrices.
  std::size_t payload_bytes() const {
    return (payload_.size() + bases_.A.size() + bases_.B.size()) * sizeof(Real);
  }

  std::size_t memory_bytes() const {
    return payload_bytes() + nodes_.size() * sizeof(OctNode) + cells_.size() * sizeof(LeafCell) + sizeof(*this);
  }

  Box3 cell_box(const LeafCell& c) const {
    const double inv = std::ldexp(1.0, -static_cast<int>(c.depth));
    const Vec3 size = bbox_.size();
    Box3 b;
    b.lo = bbox_.lo + Vec3(c.x * inv * size.x(), c.y * inv * size.y(), c.z * inv * size.z());
    b.hi = bbox_.lo + Vec3((c.x + 1) * inv * size.x(), (c.y + 1) * inv * size.y(), (c.z + 1) * inv * size.z());
    return b;
  }
  Box3 leaf_box(std::int32_t leaf) const { return cell_box(cells_[static_cast<std::size_t>(leaf)]); }

  Vec3 to_unit(const Vec3& p) const { return ((p - bbox_.lo).array() / bbox_.size().array()).matrix(); }
  Vec3 from_unit(const Vec3& u) const { return bbox_.lo + (u.array() * bbox_.size().array()).matrix(); }

  // -- construction --------------------------------------------------------

  /// Adds a leaf at `cell`, creating internal nodes along the path. The cell
  /// must not overlap an existing leaf.
  std::int32_t insert_leaf(const LeafCell& cell, std::span<const Real> payload) {
    if (cell.depth < 1 || static_cast<int>(cell.depth) > depth_max_)
      throw InvalidArgument("insert_leaf: depth out of range");
    const std::uint32_t res = 1u << cell.depth;
    if (cell.x >= res || cell.y >= res || cell.z >= res) throw InvalidArgument("insert_leaf: cell outside grid");
    if (payload.size() != static_cast<std::size_t>(stride()))
      throw InvalidArgument("insert_leaf: payload length " + std::to_string(payload.size()) + " != stride " +
                            std::to_string(stride()));
    std::int32_t node = 0;
    for (std::uint32_t d = 1; d <= cell.depth; ++d) {
      const int shift = static_cast<int>(cell.depth - d);
      const int idx = static_cast<int>(((cell.x >> shift) & 1u) | (((cell.y >> shift) & 1u) << 1) |
                                       (((cell.z >> shift) & 1u) << 2));
      std::int32_t& slot = nodes_[static_cast<std::size_t>(node)].child[static_cast<std::size_t>(idx)];
      if (d == cell.depth) {
        if (slot != OctNode::kEmpty) throw InvalidArgument("insert_leaf: cell already occupied");
        const auto leaf = static_cast<std::int32_t>(cells_.size());
        slot = OctNode::leaf_ref(leaf);
        cells_.push_back(cell);
        payload_.insert(payload_.end(), payload.begin(), payload.end());
        return leaf;
      }
      if (OctNode::is_leaf_ref(slot)) throw InvalidArgument("insert_leaf: cell lies inside an existing leaf");
      if (slot == OctNode::kEmpty) {
        // assign before emplace_back: the reference dies with reallocation
        slot = static_cast<std::int32_t>(nodes_.size());
        nodes_.emplace_back();
        node = static_cast<std::int32_t>(nodes_.size() - 1);
      } else {
        node = slot;
      }
    }
    return -1;  // unreachable
  }

  /// Adds edit channels to every leaf (initialized to "no edit"). No-op if
  /// the tree already has them.
  void enable_edits() {
    if (layout_.edits) return;
    PayloadLayout wide = layout_;
    wide.edits = true;
    std::vector<Real> out;
    out.reserve(cells_.size() * static_cast<std::size_t>(wide.stride()));
    const EditChannels none;
    for (std::size_t i = 0; i < cells_.size(); ++i) {
      auto src = payload(static_cast<std::int32_t>(i));
      out.insert(out.end(), src.begin(), src.end());
      out.insert(out.end(), {Real(0), Real(0), Real(0), Real(0), static_cast<Real>(none.encode_range())});
    }
    payload_ = std::move(out);
    layout_ = wide;
  }

  /// Internal: used by deserialization to rebuild node tables verbatim.
  void assign_raw(std::vector<OctNode> nodes, std::vector<LeafCell> cells, std::vector<Real> payload) {
    nodes_ = std::move(nodes);
    cells_ = std::move(cells);
    payload_ = std::move(payload);
  }

  // -- queries -------------------------------------------------------------

  /// Leaf containing `p` (world coordinates), if any.
  std::optional<LeafHit<Real>> query(const Vec3& p) const {
    const Vec3 u = to_unit(p);
    if (!((u.array() >= 0.0).all() && (u.array() < 1.0).all())) return std::nullopt;
    Vec3 lo = Vec3::Zero();
    double size = 1.0;
    std::int32_t node = 0;
    std::uint32_t depth = 0;
    std::uint32_t ix = 0, iy = 0, iz = 0;
    while (true) {
      size *= 0.5;
      ++depth;
      const Vec3 mid = lo + Vec3::Constant(size);
      const int bx = u.x() >= mid.x(), by = u.y() >= mid.y(), bz = u.z() >= mid.z();
      lo += Vec3(bx * size, by * size, bz * size);
      ix = ix * 2 + bx;
      iy = iy * 2 + by;
      iz = iz * 2 + bz;
      const std::int32_t c = nodes_[static_cast<std::size_t>(node)].child[static_cast<std::size_t>(bx | (by << 1) | (bz << 2))];
      if (c == OctNode::kEmpty) return std::nullopt;
      if (OctNode::is_leaf_ref(c)) {
        const std::int32_t leaf = OctNode::leaf_of(c);
        return LeafHit<Real>{leaf, payload(leaf), cell_box({depth, ix, iy, iz})};
      }
      node = c;
    }
  }

  /// Ray/box slab test in world space; returns the parameter interval.
  std::optional<std::array<double, 2>> clip_ray(const Vec3& origin, const Vec3& dir, double tmin, double tmax) const {
    return clip_unit(to_unit(origin), (dir.array() / bbox_.size().array()).matrix(), tmin, tmax);
  }

  /// Visits leaves pierced by the ray origin + t dir, t in [tmin, tmax], in
  /// near-to-far order. `visit(leaf, t0, t1)` returns false to stop early.
  /// Zero-length intersections are skipped.
  template <class Visitor>
  void traverse(const Vec3& origin, const Vec3& dir, double tmin, double tmax, Visitor&& visit) const {
    const Vec3 o = to_unit(origin);
    const Vec3 d = (dir.array() / bbox_.size().array()).matrix();
    const auto range = clip_unit(o, d, tmin, tmax);
    if (!range) return;
    Walker<Visitor> w{*this, o, d, visit};
    w.node(0, Vec3::Zero(), 1.0, (*range)[0], (*range)[1]);
  }

  /// Ordered list of leaf segments along a ray. `dir` must be non-zero.
  std::vector<RaySegment> ray_segments(const Vec3& origin, const Vec3& dir,
                                       double tmin = 0.0,
                                       double tmax = std::numeric_limits<double>::infinity()) const {
    if (dir.squaredNorm() == 0.0) throw InvalidArgument("ray_segments: zero direction");
    std::vector<RaySegment> out;
    const double len = dir.norm();
    traverse(origin, dir, tmin, tmax, [&](std::int32_t leaf, double t0, double t1) {
      out.push_back({leaf, t0, t1, (t1 - t0) * len});
      return true;
    });
    return out;
  }

  /// Maximum over frames of the decoded density of a leaf.
  Real max_density(std::int32_t leaf) const {
    auto w = payload(leaf).subspan(static_cast<std::size_t>(layout_.sigma()), static_cast<std::size_t>(layout_.C));
    Real best = 0;
    for (int t = 0; t < bases_.frames; ++t) best = std::max(best, density_at(bases_, t, w));
    return best;
  }

  /// Same topology, cells, payloads, bases, truncation and bounding box.
  friend bool operator==(const BasicVOctree& a, const BasicVOctree& b) {
    return a.depth_max_ == b.depth_max_ && a.trunc_.n_max == b.trunc_.n_max && a.bases_ == b.bases_ &&
           a.bbox_ == b.bbox_ && a.layout_ == b.layout_ && a.cells_ == b.cells_ && a.payload_ == b.payload_;
  }

 private:
  static std::optional<std::array<double, 2>> clip_unit(const Vec3& o, const Vec3& d, double tmin, double tmax) {
    double t0 = tmin, t1 = tmax;
    for (int a = 0; a < 3; ++a) {
      if (d[a] == 0.0) {
        if (o[a] < 0.0 || o[a] >= 1.0) return std::nullopt;
        continue;
      }
      double ta = (0.0 - o[a]) / d[a];
      double tb = (1.0 - o[a]) / d[a];
      if (ta > tb) std::swap(ta, tb);
      t0 = std::max(t0, ta);
      t1 = std::min(t1, tb);
    }
    if (!(t1 > t0)) return std::nullopt;
    return std::array<double, 2>{t0, t1};
  }

  template <class Visitor>
  struct Walker {
    const BasicVOctree& tree;
    Vec3 o;
    Vec3 d;
    Visitor& visit;

    // Returns false once the visitor asked to stop.
    bool node(std::int32_t index, const Vec3& lo, double size, double t0, double t1) {
      const double half = 0.5 * size;
      const Vec3 mid = lo + Vec3::Constant(half);
      std::array<double, 3> tm{};
      int child = 0;
      for (int a = 0; a < 3; ++a) {
        bool upper;
        if (d[a] > 0.0) {
          tm[a] = (mid[a] - o[a]) / d[a];
          upper = tm[a] <= t0;
        } else if (d[a] < 0.0) {
          tm[a] = (mid[a] - o[a]) / d[a];
          upper = tm[a] > t0;
        } else {
          tm[a] = std::numeric_limits<double>::infinity();
          upper = o[a] >= mid[a];
        }
        if (upper) child |= 1 << a;
      }
      // Mid-plane crossings strictly inside (t0, t1), ascending.
      std::array<int, 3> axes{0, 1, 2};
      int n = 0;
      for (int a = 0; a < 3; ++a)
        if (tm[a] > t0 && tm[a] < t1) axes[n++] = a;
      std::sort(axes.begin(), axes.begin() + n, [&](int a, int b) { return tm[a] < tm[b] || (tm[a] == tm[b] && a < b); });

      const OctNode& nd = tree.nodes_[static_cast<std::size_t>(index)];
      double tcur = t0;
      for (int i = 0; i <= n; ++i) {
        const double tnext = i < n ? tm[axes[i]] : t1;
        if (tnext > tcur) {
          const std::int32_t c = nd.child[static_cast<std::size_t>(child)];
          if (c != OctNode::kEmpty) {
            if (OctNode::is_leaf_ref(c)) {
              if (!visit(OctNode::leaf_of(c), tcur, tnext)) return false;
            } else {
              const Vec3 clo = lo + Vec3((child & 1) ? half : 0.0, (child & 2) ? half : 0.0, (child & 4) ? half : 0.0);
              if (!node(c, clo, half, tcur, tnext)) return false;
            }
          }
          tcur = tnext;
        }
        if (i < n) child ^= 1 << axes[i];
      }
      return true;
    }
  };

  int depth_max_;
  BasisTruncation trunc_;
  BasisTable table_;
  TemporalBases<Real> bases_;
  Box3 bbox_;
  PayloadLayout layout_;
  std::vector<OctNode> nodes_;
  std::vector<LeafCell> cells_;
  std::vector<Real> payload_;
};

using VOctree = BasicVOctree<float>;

// ---------------------------------------------------------------------------
// Construction helpers

/// Copies a tree's metadata (depth, truncation, bases, box, layout) without
/// any leaves.
template <class Real>
BasicVOctree<Real> empty_like(const BasicVOctree<Real>& t, int depth_max = -1) {
  return BasicVOctree<Real>(depth_max < 0 ? t.depth_max() : depth_max, t.truncation(), t.bases(), t.bbox(),
                            t.layout().edits);
}

inline int log2_exact(int resolution) {
  if (resolution < 2 || (resolution & (resolution - 1)) != 0)
    throw InvalidArgument("resolution " + std::to_string(resolution) + " is not a power of two >= 2");
  int d = 0;
  while ((1 << d) < resolution) ++d;
  return d;
}

/// Dense tree at `resolution`^3 with every cell live; `init(cell, payload)`
/// fills each leaf.
template <class Real, class Init>
BasicVOctree<Real> make_dense(int resolution, BasisTruncation trunc, TemporalBases<Real> bases, Box3 bbox, Init&& init) {
  const int depth = log2_exact(resolution);
  BasicVOctree<Real> tree(depth, trunc, std::move(bases), bbox);
  std::vector<Real> buf(static_cast<std::size_t>(tree.stride()));
  const auto r = static_cast<std::uint32_t>(resolution);
  for (std::uint32_t z = 0; z < r; ++z)
    for (std::uint32_t y = 0; y < r; ++y)
      for (std::uint32_t x = 0; x < r; ++x) {
        const LeafCell cell{static_cast<std::uint32_t>(depth), x, y, z};
        std::fill(buf.begin(), buf.end(), Real(0));
        init(cell, std::span<Real>(buf));
        tree.insert_leaf(cell, buf);
      }
  return tree;
}

/// A coefficient source evaluable at world points. `sample` writes the base
/// payload (2C + 3K values) for a point. `may_be_occupied` lets the builder
/// skip whole regions; returning true everywhere is always correct.
template <class F, class Real>
concept CoefficientField = requires(const F& f, const Vec3& p, std::span<Real> out, const Box3& b) {
  { f.sample(p, out) };
  { f.may_be_occupied(b) } -> std::convertible_to<bool>;
};

struct BuildOptions {
  int resolution = 128;
  double threshold = 1e-5;  // on the time-summed density at the cell center
  int samples_per_voxel = 256;
  std::uint64_t seed = 7;
};

/// Builds a tree by evaluating `field` on a dense grid: cells whose
/// time-summed density at the center is <= threshold are dropped, kept cells
/// store the mean coefficients of `samples_per_voxel` uniform interior points.
template <class Real, class Field>
  requires CoefficientField<Field, Real>
BasicVOctree<Real> build_from_sampler(const Field& field, BasisTruncation trunc, TemporalBases<Real> bases, Box3 bbox,
                                      const BuildOptions& opt) {
  const int depth = log2_exact(opt.resolution);
  if (opt.threshold < 0.0) throw InvalidArgument("build_from_sampler: threshold must be >= 0");
  BasicVOctree<Real> tree(depth, trunc, std::move(bases), bbox);
  const PayloadLayout layout = tree.layout();
  const auto n = static_cast<std::size_t>(layout.stride());
  std::vector<Real> point(n), leaf(n);
  std::vector<double> acc(n);
  std::mt19937_64 rng(opt.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  auto time_summed_density = [&](std::span<const Real> w) {
    double s = 0.0;
    auto ws = w.subspan(0, static_cast<std::size_t>(layout.C));
    for (int t = 0; t < tree.frames(); ++t) s += static_cast<double>(density_at(tree.bases(), t, ws));
    return s;
  };

  // Depth-first over the implicit grid, skipping regions the field rules out.
  auto recurse = [&](auto&& self, std::uint32_t d, std::uint32_t x, std::uint32_t y, std::uint32_t z) -> void {
    const LeafCell cell{d, x, y, z};
    const Box3 box = tree.cell_box(cell);
    if (d > 0 && !field.may_be_occupied(box)) return;
    if (static_cast<int>(d) < depth) {
      for (std::uint32_t c = 0; c < 8; ++c) self(self, d + 1, 2 * x + (c & 1), 2 * y + ((c >> 1) & 1), 2 * z + ((c >> 2) & 1));
      return;
    }
    std::fill(point.begin(), point.end(), Real(0));
    field.sample(box.center(), std::span<Real>(point));
    if (time_summed_density(point) <= opt.threshold) return;
    std::fill(acc.begin(), acc.end(), 0.0);
    const Vec3 size = box.size();
    for (int s = 0; s < opt.samples_per_voxel; ++s) {
      const Vec3 p = box.lo + Vec3(unit(rng) * size.x(), unit(rng) * size.y(), unit(rng) * size.z());
      std::fill(point.begin(), point.end(), Real(0));
      field.sample(p, std::span<Real>(point));
      for (std::size_t i = 0; i < n; ++i) acc[i] += static_cast<double>(point[i]);
    }
    for (std::size_t i = 0; i < n; ++i) leaf[i] = static_cast<Real>(acc[i] / opt.samples_per_voxel);
    tree.insert_leaf(cell, leaf);
  };
  recurse(recurse, 0, 0, 0, 0);
  return tree;
}

/// Result of a structural edit that renumbers leaves: old leaf -> new leaf
/// (-1 when removed).
template <class Real>
struct RemappedTree {
  BasicVOctree<Real> tree;
  std::vector<std::int32_t> remap;
};

/// Drops leaves whose maximum-over-time decoded density is below
/// `threshold`. Surviving leaves keep their relative order.
template <class Real>
RemappedTree<Real> prune(const BasicVOctree<Real>& tree, double threshold) {
  if (threshold < 0.0) throw InvalidArgument("prune: threshold must be >= 0");
  RemappedTree<Real> out{empty_like(tree), std::vector<std::int32_t>(tree.leaf_count(), -1)};
  for (std::size_t i = 0; i < tree.leaf_count(); ++i) {
    const auto leaf = static_cast<std::int32_t>(i);
    if (static_cast<double>(tree.max_density(leaf)) < threshold) continue;
    out.remap[i] = out.tree.insert_leaf(tree.cells()[i], tree.payload(leaf));
  }
  return out;
}

/// Splits every leaf into its 8 children, each inheriting the parent
/// payload. Depth grows by one. remap gives the first child of each leaf;
/// children of leaf i are remap[i] .. remap[i] + 7.
template <class Real>
RemappedTree<Real> subdivide(const BasicVOctree<Real>& tree) {
  RemappedTree<Real> out{empty_like(tree, tree.depth_max() + 1), std::vector<std::int32_t>(tree.leaf_count(), -1)};
  for (std::size_t i = 0; i < tree.leaf_count(); ++i) {
    const LeafCell& c = tree.cells()[i];
    for (std::uint32_t k = 0; k < 8; ++k) {
      const LeafCell child{c.depth + 1, 2 * c.x + (k & 1), 2 * c.y + ((k >> 1) & 1), 2 * c.z + ((k >> 2) & 1)};
      const auto id = out.tree.insert_leaf(child, tree.payload(static_cast<std::int32_t>(i)));
      if (k == 0) out.remap[i] = id;
    }
  }
  return out;
}

/// Coefficient field backed by an existing tree (nearest-leaf lookup).
template <class Real>
struct TreeField {
  const BasicVOctree<Real>& tree;

  void sample(const Vec3& p, std::span<Real> out) const {
    if (auto hit = tree.query(p)) {
      const auto n = static_cast<std::size_t>(tree.layout().base_stride());
      std::copy_n(hit->payload.begin(), n, out.begin());
    }
  }
  bool may_be_occupied(const Box3& b) const {
    for (std::size_t i = 0; i < tree.leaf_count(); ++i) {
      const Box3 lb = tree.leaf_box(static_cast<std::int32_t>(i));
      if ((lb.lo.array() < b.hi.array()).all() && (b.lo.array() < lb.hi.array()).all()) return true;
    }
    return false;
  }
};

}  // namespace neuvv
