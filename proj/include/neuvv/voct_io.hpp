#pragma once

/// \file
/// `.voct` binary format. All integers and floats are little-endian.
///
///     char[4]  magic "VOCT"
///     u32      version (1)
///     u32      depth_max
///     u32      T, C, K
///     f64[6]   bbox lo.xyz, hi.xyz
///     u32      node_count, leaf_count, payload_stride
///     nodes    breadth-first; per node: u8 child_mask, u8 leaf_mask, then one
///              u32 per set bit of child_mask (ascending child index): the
///              child's node index (internal) or leaf index (leaf)
///     f32[leaf_count * payload_stride]   payload block
///     f32[T * C]                         A
///     f32[T * C]                         B
///     u32      CRC-32 (zlib polynomial) of every preceding byte

#include <zlib.h>

#include <bit>
#include <cstdint>
#include <cstring>
#include <deque>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <vector>

#include "neuvv/errors.hpp"
#include "neuvv/voctree.hpp"

namespace neuvv {

class VoctFormatError : public IoError {
 public:
  enum class Kind { BadMagic, VersionMismatch, Truncated, ChecksumMismatch, Malformed };

  VoctFormatError(Kind kind, const std::string& what) : IoError(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

inline constexpr std::uint32_t kVoctVersion = 1;

namespace detail {

class ByteWriter {
 public:
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void bytes(const char* p, std::size_t n) { buf_.insert(buf_.end(), p, p + n); }
  std::vector<std::uint8_t>& buffer() { return buf_; }

 private:
  std::vector<std::uint8_t> buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> data) : data_(data) {}

  void need(std::size_t n) const {
    if (pos_ + n > data_.size())
      throw VoctFormatError(VoctFormatError::Kind::Truncated,
                            "voct: truncated stream (need " + std::to_string(n) + " bytes at offset " +
                                std::to_string(pos_) + ", have " + std::to_string(data_.size() - pos_) + ")");
  }
  std::uint8_t u8() {
    need(1);
    return data_[pos_++];
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(data_[pos_++]) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(data_[pos_++]) << (8 * i);
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  double f64() { return std::bit_cast<double>(u64()); }
  std::size_t pos() const { return pos_; }
  std::size_t remaining() const { return data_.size() - pos_; }

 private:
  std::span<const std::uint8_t> data_;
  std::size_t pos_ = 0;
};

inline std::uint32_t crc32_of(std::span<const std::uint8_t> bytes) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed in chunks
  std::size_t off = 0;
  while (off < bytes.size()) {
    const auto n = static_cast<uInt>(std::min<std::size_t>(bytes.size() - off, 1u << 30));
    crc = ::crc32(crc, bytes.data() + off, n);
    off += n;
  }
  return static_cast<std::uint32_t>(crc);
}

}  // namespace detail

template <class Real>
std::vector<std::uint8_t> serialize(const BasicVOctree<Real>& tree) {
  detail::ByteWriter w;
  w.bytes("VOCT", 4);
  w.u32(kVoctVersion);
  w.u32(static_cast<std::uint32_t>(tree.depth_max()));
  w.u32(static_cast<std::uint32_t>(tree.bases().frames));
  w.u32(static_cast<std::uint32_t>(tree.bases().count));
  w.u32(static_cast<std::uint32_t>(tree.truncation().count()));
  for (int a = 0; a < 3; ++a) w.f64(tree.bbox().lo[a]);
  for (int a = 0; a < 3; ++a) w.f64(tree.bbox().hi[a]);

  // Breadth-first renumbering of internal nodes reachable from the root.
  const auto& nodes = tree.nodes();
  std::vector<std::int32_t> order{0};
  std::vector<std::int32_t> bfs_index(nodes.size(), -1);
  bfs_index[0] = 0;
  for (std::size_t i = 0; i < order.size(); ++i)
    for (std::int32_t c : nodes[static_cast<std::size_t>(order[i])].child)
      if (c >= 0) {
        bfs_index[static_cast<std::size_t>(c)] = static_cast<std::int32_t>(order.size());
        order.push_back(c);
      }

  w.u32(static_cast<std::uint32_t>(order.size()));
  w.u32(static_cast<std::uint32_t>(tree.leaf_count()));
  w.u32(static_cast<std::uint32_t>(tree.stride()));
  for (std::int32_t ni : order) {
    const OctNode& nd = nodes[static_cast<std::size_t>(ni)];
    std::uint8_t child_mask = 0, leaf_mask = 0;
    for (int k = 0; k < 8; ++k) {
      if (nd.child[k] == OctNode::kEmpty) continue;
      child_mask |= static_cast<std::uint8_t>(1u << k);
      if (OctNode::is_leaf_ref(nd.child[k])) leaf_mask |= static_cast<std::uint8_t>(1u << k);
    }
    w.u8(child_mask);
    w.u8(leaf_mask);
    for (int k = 0; k < 8; ++k) {
      const std::int32_t c = nd.child[k];
      if (c == OctNode::kEmpty) continue;
      w.u32(static_cast<std::uint32_t>(OctNode::is_leaf_ref(c) ? OctNode::leaf_of(c) : bfs_index[static_cast<std::size_t>(c)]));
    }
  }
  for (Real v : tree.payload_data()) w.f32(static_cast<float>(v));
  for (Real v : tree.bases().A) w.f32(static_cast<float>(v));
  for (Real v : tree.bases().B) w.f32(static_cast<float>(v));
  auto& buf = w.buffer();
  const std::uint32_t crc = detail::crc32_of(buf);
  w.u32(crc);
  return std::move(buf);
}

template <class Real = float>
BasicVOctree<Real> deserialize(std::span<const std::uint8_t> bytes) {
  using Kind = VoctFormatError::Kind;
  detail::ByteReader r(bytes);
  r.need(4);
  if (std::memcmp(bytes.data(), "VOCT", 4) != 0) throw VoctFormatError(Kind::BadMagic, "voct: bad magic bytes");
  for (int i = 0; i < 4; ++i) r.u8();
  // Checksum before anything else is interpreted, so a corrupted header
  // field is reported as corruption rather than as a bogus size.
  if (bytes.size() < 8) throw VoctFormatError(Kind::Truncated, "voct: file too short");
  {
    const std::size_t body = bytes.size() - 4;
    std::uint32_t stored = 0;
    for (int i = 0; i < 4; ++i) stored |= static_cast<std::uint32_t>(bytes[body + i]) << (8 * i);
    if (detail::crc32_of(bytes.subspan(0, body)) != stored)
      throw VoctFormatError(Kind::ChecksumMismatch, "voct: CRC-32 mismatch");
  }
  const std::uint32_t version = r.u32();
  if (version != kVoctVersion)
    throw VoctFormatError(Kind::VersionMismatch, "voct: unsupported version " + std::to_string(version) +
                                                     " (expected " + std::to_string(kVoctVersion) + ")");
  const auto depth = static_cast<int>(r.u32());
  const auto frames = static_cast<int>(r.u32());
  const auto count = static_cast<int>(r.u32());
  const auto K = static_cast<int>(r.u32());
  Box3 bbox;
  for (int a = 0; a < 3; ++a) bbox.lo[a] = r.f64();
  for (int a = 0; a < 3; ++a) bbox.hi[a] = r.f64();
  const std::uint32_t node_count = r.u32();
  const std::uint32_t leaf_count = r.u32();
  const std::uint32_t stride = r.u32();

  int n_max = 0;
  try {
    n_max = n_max_for_count(K);
  } catch (const InvalidArgument& e) {
    throw VoctFormatError(Kind::Malformed, std::string("voct: ") + e.what());
  }
  const PayloadLayout base{count, K, false};
  const bool edits = stride == static_cast<std::uint32_t>(base.stride() + PayloadLayout::kEditChannels);
  if (!edits && stride != static_cast<std::uint32_t>(base.stride()))
    throw VoctFormatError(Kind::Malformed, "voct: payload stride " + std::to_string(stride) +
                                               " inconsistent with C and K");
  if (node_count == 0) throw VoctFormatError(Kind::Malformed, "voct: missing root node");
  if (frames < 1 || count < 1) throw VoctFormatError(Kind::Malformed, "voct: T and C must be positive");
  r.need(static_cast<std::size_t>(node_count) * 2);

  std::vector<OctNode> nodes(node_count);
  for (std::uint32_t i = 0; i < node_count; ++i) {
    const std::uint8_t child_mask = r.u8();
    const std::uint8_t leaf_mask = r.u8();
    if ((leaf_mask & ~child_mask) != 0) throw VoctFormatError(Kind::Malformed, "voct: leaf mask outside child mask");
    for (int k = 0; k < 8; ++k) {
      if (!(child_mask & (1u << k))) continue;
      const std::uint32_t off = r.u32();
      if (leaf_mask & (1u << k)) {
        if (off >= leaf_count) throw VoctFormatError(Kind::Malformed, "voct: leaf offset out of range");
        nodes[i].child[k] = OctNode::leaf_ref(static_cast<std::int32_t>(off));
      } else {
        if (off >= node_count || off <= i) throw VoctFormatError(Kind::Malformed, "voct: node offset out of range");
        nodes[i].child[k] = static_cast<std::int32_t>(off);
      }
    }
  }
  const std::size_t payload_n = static_cast<std::size_t>(leaf_count) * stride;
  r.need(payload_n * 4);
  std::vector<Real> payload(payload_n);
  for (auto& v : payload) v = static_cast<Real>(r.f32());
  TemporalBases<Real> bases(frames, count);
  r.need(bases.A.size() * 8);
  for (auto& v : bases.A) v = static_cast<Real>(r.f32());
  for (auto& v : bases.B) v = static_cast<Real>(r.f32());
  r.u32();  // checksum, verified above
  if (r.remaining() != 0) throw VoctFormatError(Kind::Malformed, "voct: trailing bytes after checksum");

  // Recover leaf cells from the topology.
  std::vector<LeafCell> cells(leaf_count);
  std::vector<char> seen(leaf_count, 0);
  struct Item {
    std::uint32_t node, depth, x, y, z;
  };
  std::vector<Item> stack{{0, 0, 0, 0, 0}};
  while (!stack.empty()) {
    const Item it = stack.back();
    stack.pop_back();
    if (static_cast<int>(it.depth) >= depth) throw VoctFormatError(Kind::Malformed, "voct: node deeper than depth_max");
    for (std::uint32_t k = 0; k < 8; ++k) {
      const std::int32_t c = nodes[it.node].child[k];
      if (c == OctNode::kEmpty) continue;
      const Item ch{0, it.depth + 1, 2 * it.x + (k & 1), 2 * it.y + ((k >> 1) & 1), 2 * it.z + ((k >> 2) & 1)};
      if (OctNode::is_leaf_ref(c)) {
        const auto leaf = static_cast<std::size_t>(OctNode::leaf_of(c));
        if (seen[leaf]) throw VoctFormatError(Kind::Malformed, "voct: leaf referenced twice");
        seen[leaf] = 1;
        cells[leaf] = {ch.depth, ch.x, ch.y, ch.z};
      } else {
        stack.push_back({static_cast<std::uint32_t>(c), ch.depth, ch.x, ch.y, ch.z});
      }
    }
  }
  for (char s : seen)
    if (!s) throw VoctFormatError(Kind::Malformed, "voct: unreferenced leaf payload");

  BasicVOctree<Real> tree(depth, BasisTruncation{n_max}, std::move(bases), bbox, edits);
  tree.assign_raw(std::move(nodes), std::move(cells), std::move(payload));
  return tree;
}

template <class Real>
void save_voct(const BasicVOctree<Real>& tree, const std::filesystem::path& path) {
  const auto bytes = serialize(tree);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path.string() + " for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("write failed: " + path.string());
}

template <class Real = float>
BasicVOctree<Real> load_voct(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return deserialize<Real>(bytes);
}

}  // namespace neuvv
