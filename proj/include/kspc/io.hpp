#pragma once

// File formats: MNIST IDX input, the binary model and code files, and PGM
// export of dictionary atoms.

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include "kspc/core_model.hpp"
#include "kspc/training.hpp"

namespace kspc {

inline constexpr std::uint32_t kIdxImageMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelMagic = 0x00000801;

struct IdxHeader {
  std::uint32_t magic = 0;
  std::vector<std::uint32_t> dims;
};

namespace detail {

inline std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw DataError("error reading '" + path + "'");
  return bytes;
}

inline void write_file(const std::string& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot open '" + path + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("error writing '" + path + "'");
}

inline std::uint32_t read_be32(const std::vector<std::uint8_t>& b, std::size_t off) {
  return (std::uint32_t{b[off]} << 24) | (std::uint32_t{b[off + 1]} << 16) | (std::uint32_t{b[off + 2]} << 8) |
         std::uint32_t{b[off + 3]};
}

/// Parses the header and checks the declared size against the payload.
inline IdxHeader parse_idx(const std::vector<std::uint8_t>& bytes, std::uint32_t expected_magic,
                           std::size_t expected_dims, const std::string& path) {
  if (bytes.size() < 4) throw DataError(path + ": truncated IDX header");
  IdxHeader h;
  h.magic = read_be32(bytes, 0);
  if (h.magic != expected_magic) {
    char buf[64];
    std::snprintf(buf, sizeof buf, ": bad IDX magic 0x%08x (expected 0x%08x)", h.magic, expected_magic);
    throw DataError(path + buf);
  }
  const std::size_t header = 4 + 4 * expected_dims;
  if (bytes.size() < header) throw DataError(path + ": truncated IDX header");
  std::uint64_t count = 1;
  for (std::size_t i = 0; i < expected_dims; ++i) {
    const std::uint32_t d = read_be32(bytes, 4 + 4 * i);
    h.dims.push_back(d);
    if (d != 0 && count > std::numeric_limits<std::uint64_t>::max() / d)
      throw DataError(path + ": IDX dimension overflow");
    count *= d;
  }
  if (count != bytes.size() - header) {
    throw DataError(path + ": IDX payload holds " + std::to_string(bytes.size() - header) +
                    " bytes but the header declares " + std::to_string(count));
  }
  return h;
}

// Little-endian serialization helpers for the model and code files.
class ByteWriter {
 public:
  void raw(const void* p, std::size_t n) {
    const auto* c = static_cast<const std::uint8_t*>(p);
    bytes_.insert(bytes_.end(), c, c + n);
  }
  template <class T>
  void le(T v) {
    static_assert(std::is_trivially_copyable_v<T>);
    std::array<std::uint8_t, sizeof(T)> buf;
    std::memcpy(buf.data(), &v, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(buf.begin(), buf.end());
    raw(buf.data(), buf.size());
  }
  std::vector<std::uint8_t>& bytes() { return bytes_; }

 private:
  std::vector<std::uint8_t> bytes_;
};

class ByteReader {
 public:
  ByteReader(const std::vector<std::uint8_t>& bytes, std::size_t end, std::string path)
      : bytes_(bytes), end_(end), path_(std::move(path)) {}
  template <class T>
  T le() {
    if (pos_ + sizeof(T) > end_) throw DataError(path_ + ": truncated file");
    std::array<std::uint8_t, sizeof(T)> buf;
    std::copy_n(bytes_.begin() + static_cast<std::ptrdiff_t>(pos_), sizeof(T), buf.begin());
    if constexpr (std::endian::native == std::endian::big) std::reverse(buf.begin(), buf.end());
    pos_ += sizeof(T);
    T v;
    std::memcpy(&v, buf.data(), sizeof(T));
    return v;
  }
  std::string_view take(std::size_t n) {
    if (pos_ + n > end_) throw DataError(path_ + ": truncated file");
    std::string_view s(reinterpret_cast<const char*>(bytes_.data()) + pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t position() const { return pos_; }

 private:
  const std::vector<std::uint8_t>& bytes_;
  std::size_t end_;
  std::string path_;
  std::size_t pos_ = 0;
};

/// 64-bit FNV-1a.
inline std::uint64_t fnv1a64(const std::uint8_t* data, std::size_t n) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= data[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline void append_checksum(std::vector<std::uint8_t>& bytes) {
  const std::uint64_t h = fnv1a64(bytes.data(), bytes.size());
  ByteWriter w;
  w.le(h);
  bytes.insert(bytes.end(), w.bytes().begin(), w.bytes().end());
}

inline void verify_checksum(const std::vector<std::uint8_t>& bytes, const std::string& path) {
  if (bytes.size() < 8) throw DataError(path + ": truncated file");
  const std::size_t body = bytes.size() - 8;
  ByteReader r(bytes, bytes.size(), path);
  r.take(body);
  const auto stored = r.le<std::uint64_t>();
  if (stored != fnv1a64(bytes.data(), body)) throw DataError(path + ": checksum mismatch (file corrupt)");
}

}  // namespace detail

/// Images as columns scaled by 1/255. Reads at most `limit` images.
inline DatasetMatrix load_idx_images(const std::string& path, std::optional<std::size_t> limit = std::nullopt) {
  const auto bytes = detail::read_file(path);
  const IdxHeader h = detail::parse_idx(bytes, kIdxImageMagic, 3, path);
  const std::uint64_t pixels = std::uint64_t{h.dims[1]} * h.dims[2];
  if (pixels > static_cast<std::uint64_t>(std::numeric_limits<int>::max()))
    throw DataError(path + ": IDX dimension overflow");
  std::size_t count = h.dims[0];
  if (limit) count = std::min(count, *limit);
  DatasetMatrix data;
  data.X.resize(static_cast<Eigen::Index>(pixels), static_cast<Eigen::Index>(count));
  const std::uint8_t* payload = bytes.data() + 16;
  for (std::size_t j = 0; j < count; ++j)
    for (std::uint64_t i = 0; i < pixels; ++i)
      data.X(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = payload[j * pixels + i] / 255.0;
  return data;
}

inline std::vector<int> load_idx_labels(const std::string& path, std::optional<std::size_t> limit = std::nullopt) {
  const auto bytes = detail::read_file(path);
  const IdxHeader h = detail::parse_idx(bytes, kIdxLabelMagic, 1, path);
  std::size_t count = h.dims[0];
  if (limit) count = std::min(count, *limit);
  return std::vector<int>(bytes.begin() + 8, bytes.begin() + 8 + static_cast<std::ptrdiff_t>(count));
}

/// Images plus labels with matching counts.
inline DatasetMatrix load_idx_dataset(const std::string& images, const std::string& labels,
                                      std::optional<std::size_t> limit = std::nullopt) {
  DatasetMatrix data = load_idx_images(images, limit);
  data.labels = load_idx_labels(labels, limit);
  if (static_cast<Eigen::Index>(data.labels->size()) != data.X.cols())
    throw DataError("'" + images + "' and '" + labels + "' hold different sample counts");
  return data;
}

inline constexpr std::string_view kModelMagic = "KSPCMODL";
inline constexpr std::uint32_t kModelVersion = 1;

/// Layout (little-endian) documented in docs/file_formats.md.
inline std::vector<std::uint8_t> serialize_model(const TrainedModel& model) {
  const Matrix& D = model.dictionary.atoms();
  detail::ByteWriter w;
  w.raw(kModelMagic.data(), kModelMagic.size());
  w.le(kModelVersion);
  w.le(static_cast<std::uint8_t>(model.hyper.variant));
  w.le(static_cast<std::uint8_t>(model.meta.renormalize_atoms ? 1 : 0));
  w.le(std::uint16_t{0});
  w.le(model.hyper.lambda_star);
  w.le(model.hyper.lambda);
  w.le(static_cast<std::uint32_t>(model.hyper.k_star));
  w.le(static_cast<std::uint32_t>(model.hyper.k));
  w.le(static_cast<std::uint32_t>(model.hyper.depth));
  w.le(static_cast<std::uint32_t>(model.meta.epochs));
  w.le(model.meta.seed);
  w.le(static_cast<std::uint32_t>(model.meta.batch_size));
  w.le(std::uint32_t{0});
  w.le(model.meta.learning_rate);
  w.le(model.meta.final_objective);
  w.le(static_cast<std::uint32_t>(D.rows()));
  w.le(static_cast<std::uint32_t>(D.cols()));
  for (Eigen::Index j = 0; j < D.cols(); ++j)
    for (Eigen::Index i = 0; i < D.rows(); ++i) w.le(D(i, j));
  detail::append_checksum(w.bytes());
  return std::move(w.bytes());
}

inline TrainedModel deserialize_model(const std::vector<std::uint8_t>& bytes, const std::string& path = "<model>") {
  detail::ByteReader r(bytes, bytes.size(), path);
  if (r.take(kModelMagic.size()) != kModelMagic) throw DataError(path + ": not a model file (bad magic)");
  const auto version = r.le<std::uint32_t>();
  if (version != kModelVersion)
    throw DataError(path + ": unsupported model format version " + std::to_string(version));
  detail::verify_checksum(bytes, path);
  detail::ByteReader body(bytes, bytes.size() - 8, path);
  body.take(kModelMagic.size() + 4);

  EncoderHyper hyper;
  TrainMetadata meta;
  const auto variant = body.le<std::uint8_t>();
  if (variant > 1) throw DataError(path + ": unknown variant tag");
  hyper.variant = static_cast<Variant>(variant);
  meta.renormalize_atoms = body.le<std::uint8_t>() != 0;
  body.le<std::uint16_t>();
  hyper.lambda_star = body.le<double>();
  hyper.lambda = body.le<double>();
  hyper.k_star = static_cast<int>(body.le<std::uint32_t>());
  hyper.k = static_cast<int>(body.le<std::uint32_t>());
  hyper.depth = static_cast<int>(body.le<std::uint32_t>());
  meta.epochs = static_cast<int>(body.le<std::uint32_t>());
  meta.seed = body.le<std::uint64_t>();
  meta.batch_size = static_cast<int>(body.le<std::uint32_t>());
  body.le<std::uint32_t>();
  meta.learning_rate = body.le<double>();
  meta.final_objective = body.le<double>();
  const auto m = body.le<std::uint32_t>();
  const auto n = body.le<std::uint32_t>();
  if (std::uint64_t{m} * n * 8 != bytes.size() - 8 - body.position())
    throw DataError(path + ": dictionary payload size mismatch");
  Matrix D(m, n);
  for (Eigen::Index j = 0; j < D.cols(); ++j)
    for (Eigen::Index i = 0; i < D.rows(); ++i) D(i, j) = body.le<double>();
  try {
    hyper.validate(static_cast<int>(m), static_cast<int>(n));
    return TrainedModel{Dictionary(std::move(D)), hyper, meta};
  } catch (const InvalidArgument& e) {
    throw DataError(path + ": " + e.what());
  }
}

inline void save_model(const TrainedModel& model, const std::string& path) {
  detail::write_file(path, serialize_model(model));
}

inline TrainedModel load_model(const std::string& path) {
  return deserialize_model(detail::read_file(path), path);
}

inline constexpr std::string_view kCodesMagic = "KSPCCODE";
inline constexpr std::uint32_t kCodesVersion = 1;

/// rows x cols doubles, column-major, with the same framing as the model file.
inline void save_codes_binary(const Matrix& codes, const std::string& path) {
  detail::ByteWriter w;
  w.raw(kCodesMagic.data(), kCodesMagic.size());
  w.le(kCodesVersion);
  w.le(static_cast<std::uint32_t>(codes.rows()));
  w.le(static_cast<std::uint32_t>(codes.cols()));
  for (Eigen::Index j = 0; j < codes.cols(); ++j)
    for (Eigen::Index i = 0; i < codes.rows(); ++i) w.le(codes(i, j));
  detail::append_checksum(w.bytes());
  detail::write_file(path, w.bytes());
}

inline Matrix load_codes_binary(const std::string& path) {
  const auto bytes = detail::read_file(path);
  detail::ByteReader r(bytes, bytes.size(), path);
  if (r.take(kCodesMagic.size()) != kCodesMagic) throw DataError(path + ": not a codes file (bad magic)");
  const auto version = r.le<std::uint32_t>();
  if (version != kCodesVersion) throw DataError(path + ": unsupported codes format version " + std::to_string(version));
  detail::verify_checksum(bytes, path);
  const auto rows = r.le<std::uint32_t>();
  const auto cols = r.le<std::uint32_t>();
  if (std::uint64_t{rows} * cols * 8 + r.position() + 8 != bytes.size()) throw DataError(path + ": payload size mismatch");
  Matrix codes(rows, cols);
  for (Eigen::Index j = 0; j < codes.cols(); ++j)
    for (Eigen::Index i = 0; i < codes.rows(); ++i) codes(i, j) = r.le<double>();
  return codes;
}

/// One CSV line per matrix row, comma-separated, 17 significant digits.
inline void save_codes_csv(const Matrix& codes, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot open '" + path + "' for writing");
  char buf[32];
  for (Eigen::Index i = 0; i < codes.rows(); ++i) {
    for (Eigen::Index j = 0; j < codes.cols(); ++j) {
      std::snprintf(buf, sizeof buf, "%.17g", codes(i, j));
      if (j) out << ',';
      out << buf;
    }
    out << '\n';
  }
  if (!out) throw DataError("error writing '" + path + "'");
}

struct GrayImage {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;  // row-major
};

inline void write_pgm(const GrayImage& img, const std::string& path) {
  const std::string header = "P5\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
  std::vector<std::uint8_t> bytes(header.begin(), header.end());
  bytes.insert(bytes.end(), img.pixels.begin(), img.pixels.end());
  detail::write_file(path, bytes);
}

inline GrayImage read_pgm(const std::string& path) {
  const auto bytes = detail::read_file(path);
  const std::string text(bytes.begin(), bytes.end());
  GrayImage img;
  int maxval = 0;
  int consumed = 0;
  if (std::sscanf(text.c_str(), "P5 %d %d %d%n", &img.width, &img.height, &maxval, &consumed) != 3 || maxval != 255)
    throw DataError(path + ": not an 8-bit binary PGM");
  const std::size_t start = static_cast<std::size_t>(consumed) + 1;
  const std::size_t count = static_cast<std::size_t>(img.width) * static_cast<std::size_t>(img.height);
  if (bytes.size() != start + count) throw DataError(path + ": PGM payload size mismatch");
  img.pixels.assign(bytes.begin() + static_cast<std::ptrdiff_t>(start), bytes.end());
  return img;
}

struct AtomShape {
  int rows = 28;
  int cols = 28;
};

struct GridSpec {
  int rows = 10;
  int cols = 10;
};

/// Pixel size of a grid with 1-pixel separators between tiles.
inline std::pair<int, int> grid_image_size(AtomShape atom, GridSpec grid) {
  return {grid.cols * atom.cols + (grid.cols - 1), grid.rows * atom.rows + (grid.rows - 1)};
}

/// Min-max maps an atom to [0, 255]; a constant atom maps to 128.
inline std::vector<std::uint8_t> atom_to_gray(VectorRef atom) {
  std::vector<std::uint8_t> out(static_cast<std::size_t>(atom.size()), 128);
  if (atom.size() == 0) return out;
  const double lo = atom.minCoeff();
  const double hi = atom.maxCoeff();
  if (!(hi > lo)) return out;
  for (Eigen::Index i = 0; i < atom.size(); ++i)
    out[static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(std::lround(255.0 * (atom[i] - lo) / (hi - lo)));
  return out;
}

/// Tiles `count` atoms chosen by a seeded shuffle into a grid. Returns the
/// chosen atom indices in tile order. Unused tiles and separators stay 0.
inline std::vector<int> render_dictionary_grid(const Matrix& D, AtomShape atom, GridSpec grid, int count,
                                               std::uint64_t seed, GrayImage& img) {
  detail::require_arg(atom.rows >= 1 && atom.cols >= 1 && grid.rows >= 1 && grid.cols >= 1,
                      "export: shapes must be positive");
  detail::require_shape(D.rows() == static_cast<Eigen::Index>(atom.rows) * atom.cols,
                        "export: atom shape does not match the data dimension");
  detail::require_arg(count >= 0 && count <= grid.rows * grid.cols, "export: grid capacity is smaller than the atom count");
  detail::require_arg(count <= D.cols(), "export: more atoms requested than the dictionary holds");
  std::vector<int> order(static_cast<std::size_t>(D.cols()));
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  order.resize(static_cast<std::size_t>(count));

  const auto [width, height] = grid_image_size(atom, grid);
  img.width = width;
  img.height = height;
  img.pixels.assign(static_cast<std::size_t>(width) * static_cast<std::size_t>(height), 0);
  for (int tile = 0; tile < count; ++tile) {
    const auto gray = atom_to_gray(D.col(order[static_cast<std::size_t>(tile)]));
    const int x0 = (tile % grid.cols) * (atom.cols + 1);
    const int y0 = (tile / grid.cols) * (atom.rows + 1);
    for (int r = 0; r < atom.rows; ++r)
      for (int c = 0; c < atom.cols; ++c)
        img.pixels[static_cast<std::size_t>(y0 + r) * static_cast<std::size_t>(width) + static_cast<std::size_t>(x0 + c)] =
            gray[static_cast<std::size_t>(r) * static_cast<std::size_t>(atom.cols) + static_cast<std::size_t>(c)];
  }
  return order;
}

/// Writes a P5 PGM of seeded-random atoms (row-major pixels per atom).
inline std::vector<int> export_dictionary_grid(const Matrix& D, AtomShape atom, GridSpec grid, const std::string& path,
                                               std::uint64_t seed = 0, std::optional<int> count = std::nullopt) {
  const int requested = count ? *count : static_cast<int>(std::min<Eigen::Index>(D.cols(), grid.rows * grid.cols));
  GrayImage img;
  auto chosen = render_dictionary_grid(D, atom, grid, requested, seed, img);
  write_pgm(img, path);
  return chosen;
}

}  // namespace kspc
