#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <fstream>
#include <numbers>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "ral/numeric.hpp"
#include "ral/topology.hpp"

namespace ral {

/// Images one sample per column (features in (c, y, x) order, values in
/// [0, 1] for image data), with integer class labels.
struct Dataset {
  ImageShape shape;
  Matrix<float> inputs;
  std::vector<int> labels;
  int classes = 0;
  std::string provenance;

  std::size_t size() const { return labels.size(); }

  void validate() const {
    require(inputs.rows() == shape.size(), "dataset: feature count does not match shape");
    require(static_cast<std::size_t>(inputs.cols()) == labels.size(), "dataset: label count mismatch");
    for (int y : labels) require(y >= 0 && y < classes, "dataset: label out of range");
  }

  Dataset subset(const std::vector<std::size_t>& idx) const {
    Dataset d{shape, Matrix<float>(inputs.rows(), static_cast<Eigen::Index>(idx.size())), {}, classes,
              provenance};
    d.labels.reserve(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) {
      d.inputs.col(static_cast<Eigen::Index>(i)) = inputs.col(static_cast<Eigen::Index>(idx[i]));
      d.labels.push_back(labels[idx[i]]);
    }
    return d;
  }
};

class IdxError : public std::runtime_error {
 public:
  enum class Kind { io, bad_magic, truncated, count_mismatch };
  IdxError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

inline constexpr std::uint32_t kIdxImageMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelMagic = 0x00000801;

namespace detail {

inline std::vector<unsigned char> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IdxError(IdxError::Kind::io, "cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::uint32_t read_be32(const std::vector<unsigned char>& buf, std::size_t off, const std::string& path) {
  if (buf.size() < off + 4) throw IdxError(IdxError::Kind::truncated, path + ": truncated header");
  return (std::uint32_t(buf[off]) << 24) | (std::uint32_t(buf[off + 1]) << 16) |
         (std::uint32_t(buf[off + 2]) << 8) | std::uint32_t(buf[off + 3]);
}

inline void put_be32(std::ostream& out, std::uint32_t v) {
  const char b[4] = {char(v >> 24), char(v >> 16), char(v >> 8), char(v)};
  out.write(b, 4);
}

}  // namespace detail

/// Reads an IDX image/label file pair (MNIST distribution format).
inline Dataset load_idx(const std::string& images_path, const std::string& labels_path, int classes = 10) {
  const auto img = detail::read_file(images_path);
  const auto lab = detail::read_file(labels_path);
  if (detail::read_be32(img, 0, images_path) != kIdxImageMagic)
    throw IdxError(IdxError::Kind::bad_magic, images_path + ": bad image magic number");
  if (detail::read_be32(lab, 0, labels_path) != kIdxLabelMagic)
    throw IdxError(IdxError::Kind::bad_magic, labels_path + ": bad label magic number");
  const std::uint32_t n = detail::read_be32(img, 4, images_path);
  const std::uint32_t rows = detail::read_be32(img, 8, images_path);
  const std::uint32_t cols = detail::read_be32(img, 12, images_path);
  const std::uint32_t n_labels = detail::read_be32(lab, 4, labels_path);
  if (n != n_labels)
    throw IdxError(IdxError::Kind::count_mismatch,
                   "image count " + std::to_string(n) + " != label count " + std::to_string(n_labels));
  const std::size_t pixels = std::size_t(rows) * cols;
  if (img.size() < 16 + std::size_t(n) * pixels)
    throw IdxError(IdxError::Kind::truncated, images_path + ": truncated pixel data");
  if (lab.size() < 8 + std::size_t(n))
    throw IdxError(IdxError::Kind::truncated, labels_path + ": truncated label data");
  Dataset d{{1, int(rows), int(cols)}, Matrix<float>(pixels, n), std::vector<int>(n), classes,
            images_path};
  for (std::uint32_t i = 0; i < n; ++i) {
    const unsigned char* src = img.data() + 16 + std::size_t(i) * pixels;
    for (std::size_t p = 0; p < pixels; ++p) d.inputs(p, i) = float(src[p]) / 255.0f;
    d.labels[i] = lab[8 + i];
  }
  d.validate();
  return d;
}

/// Writes a dataset back to IDX, quantising pixels to bytes.
inline void write_idx(const Dataset& d, const std::string& images_path, const std::string& labels_path) {
  require(d.shape.channels == 1, "write_idx: single-channel images only");
  std::ofstream img(images_path, std::ios::binary);
  std::ofstream lab(labels_path, std::ios::binary);
  if (!img || !lab) throw IdxError(IdxError::Kind::io, "cannot write IDX output");
  detail::put_be32(img, kIdxImageMagic);
  detail::put_be32(img, std::uint32_t(d.size()));
  detail::put_be32(img, std::uint32_t(d.shape.height));
  detail::put_be32(img, std::uint32_t(d.shape.width));
  detail::put_be32(lab, kIdxLabelMagic);
  detail::put_be32(lab, std::uint32_t(d.size()));
  for (std::size_t i = 0; i < d.size(); ++i) {
    for (Eigen::Index p = 0; p < d.inputs.rows(); ++p) {
      const float v = std::clamp(d.inputs(p, Eigen::Index(i)), 0.0f, 1.0f);
      img.put(char(static_cast<unsigned char>(std::lround(v * 255.0f))));
    }
    lab.put(char(static_cast<unsigned char>(d.labels[i])));
  }
}

/// CIFAR-10 binary batch: records of 1 label byte + 3072 channel-planar pixels.
inline Dataset load_cifar_batch(const std::string& path) {
  constexpr std::size_t record = 1 + 3 * 32 * 32;
  const auto buf = detail::read_file(path);
  if (buf.size() % record != 0)
    throw IdxError(IdxError::Kind::truncated, path + ": size is not a whole number of records");
  const std::size_t n = buf.size() / record;
  Dataset d{{3, 32, 32}, Matrix<float>(3 * 32 * 32, Eigen::Index(n)), std::vector<int>(n), 10, path};
  for (std::size_t i = 0; i < n; ++i) {
    const unsigned char* r = buf.data() + i * record;
    d.labels[i] = r[0];
    for (std::size_t p = 0; p < record - 1; ++p) d.inputs(Eigen::Index(p), Eigen::Index(i)) = r[1 + p] / 255.0f;
  }
  d.validate();
  return d;
}

/// Centre of blob class k: evenly spaced on the unit circle.
inline std::array<double, 2> blob_center(int k, int classes) {
  const double a = 2.0 * std::numbers::pi * k / classes;
  return {std::cos(a), std::sin(a)};
}

/// Isotropic Gaussian clusters in 2-D with standard deviation `spread`.
inline Dataset synth_blobs(int n_per_class, int classes, double spread, std::uint64_t seed) {
  require(classes >= 2, "synth_blobs: need at least two classes");
  require(n_per_class >= 0 && spread >= 0.0, "synth_blobs: invalid size or spread");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  const Eigen::Index n = Eigen::Index(n_per_class) * classes;
  Dataset d{{2, 1, 1}, Matrix<float>(2, n), std::vector<int>(n), classes, "blobs"};
  Eigen::Index i = 0;
  for (int j = 0; j < n_per_class; ++j)
    for (int k = 0; k < classes; ++k, ++i) {
      const auto c = blob_center(k, classes);
      d.inputs(0, i) = float(c[0] + spread * normal(rng));
      d.inputs(1, i) = float(c[1] + spread * normal(rng));
      d.labels[i] = k;
    }
  return d;
}

/// Indices into a training set: the initial labeled set and the unlabeled pool.
struct Split {
  std::vector<std::size_t> labeled;
  std::vector<std::size_t> pool;
};

/// Seeded class-stratified initial set. With `pool_size` > 0 the train set is
/// first subsampled to that many points (labeled + pool).
inline Split split(const Dataset& train, int initial, std::uint64_t seed, std::size_t pool_size = 0) {
  require(initial > 0, "split: the initial labeled set must be nonempty");
  require(train.classes > 0, "split: dataset has no classes");
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> all(train.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  if (pool_size > 0 && pool_size < all.size()) {
    std::shuffle(all.begin(), all.end(), rng);
    all.resize(pool_size);
    std::sort(all.begin(), all.end());
  }
  require(std::size_t(initial) <= all.size(), "split: initial count exceeds available points");
  std::vector<std::vector<std::size_t>> by_class(train.classes);
  for (std::size_t i : all) by_class[train.labels[i]].push_back(i);
  for (auto& v : by_class) std::shuffle(v.begin(), v.end(), rng);
  const int base = initial / train.classes;
  const int extra = initial % train.classes;
  // Classes receiving one extra point are chosen by a seeded permutation.
  std::vector<int> cls(train.classes);
  std::iota(cls.begin(), cls.end(), 0);
  std::shuffle(cls.begin(), cls.end(), rng);
  std::vector<int> quota(train.classes, base);
  for (int i = 0; i < extra; ++i) ++quota[cls[i]];
  Split s;
  std::vector<char> taken(train.size(), 0);
  for (int c = 0; c < train.classes; ++c) {
    require(int(by_class[c].size()) >= quota[c],
            "split: class " + std::to_string(c) + " has too few points for stratification");
    for (int j = 0; j < quota[c]; ++j) {
      s.labeled.push_back(by_class[c][j]);
      taken[by_class[c][j]] = 1;
    }
  }
  std::sort(s.labeled.begin(), s.labeled.end());
  for (std::size_t i : all)
    if (!taken[i]) s.pool.push_back(i);
  return s;
}

}  // namespace ral
