// Datasets: MNIST IDX parsing, label corruption and synthetic clusters.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "minsharp/errors.hpp"
#include "minsharp/linalg.hpp"

namespace minsharp {

using Label = std::size_t;

struct Dataset {
  Matrix features;  // n x input_dim, one sample per row
  std::vector<Label> labels;
  std::size_t num_classes = 0;

  std::size_t size() const { return labels.size(); }
  std::size_t input_dim() const { return features.cols(); }
  std::span<const double> sample(std::size_t i) const { return features.row(i); }

  void validate() const {
    if (labels.empty()) throw std::invalid_argument("Dataset: empty");
    if (features.rows() != labels.size()) {
      throw std::invalid_argument("Dataset: " + std::to_string(features.rows()) +
                                  " feature rows but " + std::to_string(labels.size()) +
                                  " labels");
    }
    if (num_classes == 0) throw std::invalid_argument("Dataset: num_classes is 0");
    for (Label y : labels)
      if (y >= num_classes) {
        throw std::invalid_argument("Dataset: label " + std::to_string(y) +
                                    " out of range for " + std::to_string(num_classes) +
                                    " classes");
      }
  }
};

// Rows selected by index, in the given order.
inline Dataset take(const Dataset& data, std::span<const std::size_t> indices) {
  Dataset out;
  out.num_classes = data.num_classes;
  out.features = Matrix(indices.size(), data.input_dim());
  out.labels.reserve(indices.size());
  for (std::size_t r = 0; r < indices.size(); ++r) {
    const auto src = data.sample(indices[r]);
    std::copy(src.begin(), src.end(), out.features.row(r).begin());
    out.labels.push_back(data.labels[indices[r]]);
  }
  return out;
}

inline Dataset concat(const Dataset& a, const Dataset& b) {
  if (a.input_dim() != b.input_dim() || a.num_classes != b.num_classes) {
    throw std::invalid_argument("concat: incompatible datasets");
  }
  Dataset out;
  out.num_classes = a.num_classes;
  std::vector<double> values(a.features.values());
  values.insert(values.end(), b.features.values().begin(), b.features.values().end());
  out.features = Matrix(a.size() + b.size(), a.input_dim(), std::move(values));
  out.labels = a.labels;
  out.labels.insert(out.labels.end(), b.labels.begin(), b.labels.end());
  return out;
}

inline std::vector<std::size_t> shuffled_indices(std::size_t n, Rng& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  for (std::size_t i = n; i > 1; --i) std::swap(idx[i - 1], idx[rng.below(i)]);
  return idx;
}

// First `count` samples after a seeded shuffle.
inline Dataset shuffled_subset(const Dataset& data, std::size_t count, Rng& rng) {
  if (count == 0 || count > data.size()) {
    throw std::invalid_argument("shuffled_subset: requested " + std::to_string(count) +
                                " of " + std::to_string(data.size()) + " samples");
  }
  auto idx = shuffled_indices(data.size(), rng);
  idx.resize(count);
  return take(data, idx);
}

// FNV-1a over labels and the raw feature bytes; identifies a dataset in
// checkpoint metadata.
inline std::uint64_t fingerprint(const Dataset& data) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&h](const void* p, std::size_t len) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < len; ++i) {
      h ^= b[i];
      h *= 0x100000001b3ULL;
    }
  };
  const std::uint64_t dims[3] = {data.size(), data.input_dim(), data.num_classes};
  mix(dims, sizeof(dims));
  mix(data.features.data().data(), data.features.size() * sizeof(double));
  for (Label y : data.labels) {
    const std::uint64_t v = y;
    mix(&v, sizeof(v));
  }
  return h;
}

// ---------------------------------------------------------------------------
// IDX container (big-endian). Images: magic 0x00000803, dims n, rows, cols,
// then n*rows*cols unsigned bytes. Labels: magic 0x00000801, dim n, n bytes.

class IdxError : public std::runtime_error {
 public:
  enum class Kind { WrongMagic, Truncated, CountMismatch, BadValue };

  IdxError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

inline constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

namespace detail {

inline std::uint32_t read_be32(std::span<const std::uint8_t> bytes, std::size_t offset) {
  if (offset + 4 > bytes.size()) {
    throw IdxError(IdxError::Kind::Truncated, "idx: truncated header");
  }
  return (std::uint32_t{bytes[offset]} << 24) | (std::uint32_t{bytes[offset + 1]} << 16) |
         (std::uint32_t{bytes[offset + 2]} << 8) | std::uint32_t{bytes[offset + 3]};
}

inline void write_be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  out.push_back(static_cast<std::uint8_t>(v >> 24));
  out.push_back(static_cast<std::uint8_t>(v >> 16));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
  out.push_back(static_cast<std::uint8_t>(v));
}

inline void check_magic(std::uint32_t got, std::uint32_t want) {
  if (got != want) {
    throw IdxError(IdxError::Kind::WrongMagic, "idx: wrong magic " + std::to_string(got) +
                                                   " (expected " + std::to_string(want) + ")");
  }
}

}  // namespace detail

// Pixels scaled by 1/255 into [0, 1]; one flattened image per row.
inline Matrix parse_idx_images(std::span<const std::uint8_t> bytes) {
  detail::check_magic(detail::read_be32(bytes, 0), kIdxImagesMagic);
  const std::size_t n = detail::read_be32(bytes, 4);
  const std::size_t rows = detail::read_be32(bytes, 8);
  const std::size_t cols = detail::read_be32(bytes, 12);
  const std::size_t pixels = rows * cols;
  if (bytes.size() - 16 < n * pixels) {
    throw IdxError(IdxError::Kind::Truncated,
                   "idx: image payload truncated (" + std::to_string(bytes.size() - 16) +
                       " bytes for " + std::to_string(n) + " images of " +
                       std::to_string(pixels) + " pixels)");
  }
  Matrix m(n, pixels);
  auto out = m.data();
  for (std::size_t i = 0; i < n * pixels; ++i) out[i] = bytes[16 + i] / 255.0;
  return m;
}

inline std::vector<Label> parse_idx_labels(std::span<const std::uint8_t> bytes) {
  detail::check_magic(detail::read_be32(bytes, 0), kIdxLabelsMagic);
  const std::size_t n = detail::read_be32(bytes, 4);
  if (bytes.size() - 8 < n) {
    throw IdxError(IdxError::Kind::Truncated, "idx: label payload truncated");
  }
  return {bytes.begin() + 8, bytes.begin() + 8 + static_cast<std::ptrdiff_t>(n)};
}

// Inverse of parse_idx_images; features must be multiples of 1/255 in [0, 1]
// to round-trip exactly.
inline std::vector<std::uint8_t> serialize_idx_images(const Matrix& images, std::size_t rows,
                                                      std::size_t cols) {
  if (rows * cols != images.cols()) {
    throw std::invalid_argument("serialize_idx_images: " + std::to_string(rows) + "x" +
                                std::to_string(cols) + " does not match feature width " +
                                std::to_string(images.cols()));
  }
  std::vector<std::uint8_t> out;
  out.reserve(16 + images.size());
  detail::write_be32(out, kIdxImagesMagic);
  detail::write_be32(out, static_cast<std::uint32_t>(images.rows()));
  detail::write_be32(out, static_cast<std::uint32_t>(rows));
  detail::write_be32(out, static_cast<std::uint32_t>(cols));
  for (double v : images.data()) {
    if (!(v >= 0.0 && v <= 1.0)) {
      throw IdxError(IdxError::Kind::BadValue, "serialize_idx_images: pixel outside [0,1]");
    }
    out.push_back(static_cast<std::uint8_t>(std::lround(v * 255.0)));
  }
  return out;
}

inline std::vector<std::uint8_t> serialize_idx_labels(std::span<const Label> labels) {
  std::vector<std::uint8_t> out;
  out.reserve(8 + labels.size());
  detail::write_be32(out, kIdxLabelsMagic);
  detail::write_be32(out, static_cast<std::uint32_t>(labels.size()));
  for (Label y : labels) {
    if (y > 255) throw IdxError(IdxError::Kind::BadValue, "serialize_idx_labels: label > 255");
    out.push_back(static_cast<std::uint8_t>(y));
  }
  return out;
}

inline std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  return bytes;
}

inline void write_file_bytes(const std::string& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path);
}

inline Dataset dataset_from_idx(std::span<const std::uint8_t> image_bytes,
                                std::span<const std::uint8_t> label_bytes,
                                std::size_t num_classes = 10) {
  Dataset d;
  d.features = parse_idx_images(image_bytes);
  d.labels = parse_idx_labels(label_bytes);
  d.num_classes = num_classes;
  if (d.features.rows() != d.labels.size()) {
    throw IdxError(IdxError::Kind::CountMismatch,
                   "idx: " + std::to_string(d.features.rows()) + " images but " +
                       std::to_string(d.labels.size()) + " labels");
  }
  d.validate();
  return d;
}

inline Dataset load_idx_dataset(const std::string& images_path, const std::string& labels_path,
                                std::size_t num_classes = 10) {
  const auto images = read_file_bytes(images_path);
  const auto labels = read_file_bytes(labels_path);
  return dataset_from_idx(images, labels, num_classes);
}

// ---------------------------------------------------------------------------

// Uniformly chosen set of exactly round(ratio * n) sample positions.
inline std::vector<std::size_t> corruption_indices(std::size_t n, double ratio, Rng& rng) {
  if (!(ratio >= 0.0 && ratio <= 1.0)) {
    throw std::invalid_argument("corrupt_labels: ratio " + std::to_string(ratio) +
                                " outside [0, 1]");
  }
  const auto count = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(n)));
  auto idx = shuffled_indices(n, rng);
  idx.resize(count);
  std::sort(idx.begin(), idx.end());
  return idx;
}

// Each selected sample gets a label drawn uniformly from [0, K); the draw may
// coincide with the original label. Features are untouched.
inline Dataset corrupt_labels(const Dataset& data, double ratio, Rng& rng) {
  data.validate();
  Dataset out = data;
  for (std::size_t i : corruption_indices(data.size(), ratio, rng)) {
    out.labels[i] = static_cast<Label>(rng.below(data.num_classes));
  }
  return out;
}

// K unit-variance Gaussian clusters, means at separation * (random unit
// direction); labels cycle through the classes so counts differ by at most 1.
inline Dataset synthetic_blobs(std::size_t n, std::size_t input_dim, std::size_t num_classes,
                               double separation, Rng& rng) {
  if (num_classes == 0 || input_dim == 0) {
    throw std::invalid_argument("synthetic_blobs: input_dim and num_classes must be >= 1");
  }
  if (n < num_classes) {
    throw std::invalid_argument("synthetic_blobs: n=" + std::to_string(n) + " < K=" +
                                std::to_string(num_classes));
  }
  if (!(separation >= 0.0)) throw std::invalid_argument("synthetic_blobs: separation < 0");

  Matrix means(num_classes, input_dim);
  for (std::size_t k = 0; k < num_classes; ++k) {
    auto mu = means.row(k);
    double len = 0.0;
    do {
      for (double& v : mu) v = rng.normal();
      len = std::sqrt(norm_sq(mu));
    } while (len == 0.0);
    for (double& v : mu) v *= separation / len;
  }

  Dataset d;
  d.num_classes = num_classes;
  d.features = Matrix(n, input_dim);
  d.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const Label y = i % num_classes;
    d.labels[i] = y;
    auto row = d.features.row(i);
    const auto mu = means.row(y);
    for (std::size_t j = 0; j < input_dim; ++j) row[j] = mu[j] + rng.normal();
  }
  return d;
}

}  // namespace minsharp
