#pragma once

// IDX reader (the MNIST container). Header is big-endian: a 4-byte magic
// whose low byte is the rank, then one uint32 per dimension, then payload.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "senlab/data/dataset.hpp"
#include "senlab/hash.hpp"

namespace senlab::data {

class IdxError : public DatasetError {
 public:
  using DatasetError::DatasetError;
};
class IdxMagicMismatch : public IdxError {
 public:
  using IdxError::IdxError;
};
class IdxTruncated : public IdxError {
 public:
  using IdxError::IdxError;
};
class IdxCountMismatch : public IdxError {
 public:
  using IdxError::IdxError;
};

inline constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

namespace detail {

inline std::vector<unsigned char> read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IdxError("cannot open " + p.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::uint32_t be32(const std::vector<unsigned char>& b, std::size_t off) {
  return (std::uint32_t{b[off]} << 24) | (std::uint32_t{b[off + 1]} << 16) |
         (std::uint32_t{b[off + 2]} << 8) | std::uint32_t{b[off + 3]};
}

struct IdxBlob {
  std::vector<std::uint32_t> dims;
  std::size_t payload = 0;  // byte offset of the first element
};

inline IdxBlob parse_header(const std::vector<unsigned char>& b, std::uint32_t magic,
                            const std::string& name) {
  if (b.size() < 4) throw IdxTruncated(name + ": file too short for an IDX header");
  const std::uint32_t m = be32(b, 0);
  if (m != magic) {
    throw IdxMagicMismatch(name + ": bad IDX magic 0x" + hex(m, 8) + ", expected 0x" +
                           hex(magic, 8));
  }
  IdxBlob out;
  const std::size_t rank = magic & 0xFF;
  if (b.size() < 4 + 4 * rank) throw IdxTruncated(name + ": truncated IDX dimension table");
  std::size_t count = 1;
  for (std::size_t i = 0; i < rank; ++i) {
    out.dims.push_back(be32(b, 4 + 4 * i));
    count *= out.dims.back();
  }
  out.payload = 4 + 4 * rank;
  if (b.size() - out.payload < count) {
    throw IdxTruncated(name + ": payload has " + std::to_string(b.size() - out.payload) +
                       " bytes, header promises " + std::to_string(count));
  }
  return out;
}

}  // namespace detail

/// Images [N x 1 x rows x cols] scaled to [0,1] plus one-hot labels. K is
/// max label + 1 unless given.
inline Dataset load_idx(const std::filesystem::path& images_path,
                        const std::filesystem::path& labels_path,
                        std::optional<std::size_t> num_classes = std::nullopt) {
  const auto ib = detail::read_file(images_path);
  const auto lb = detail::read_file(labels_path);
  const auto ih = detail::parse_header(ib, kIdxImagesMagic, images_path.filename().string());
  const auto lh = detail::parse_header(lb, kIdxLabelsMagic, labels_path.filename().string());
  const std::size_t n = ih.dims[0], rows = ih.dims[1], cols = ih.dims[2];
  if (lh.dims[0] != n) {
    throw IdxCountMismatch("IDX count mismatch: " + std::to_string(n) + " images vs " +
                           std::to_string(lh.dims[0]) + " labels");
  }
  if (n == 0 || rows == 0 || cols == 0) throw IdxError("IDX file holds no images");

  Tensor x(Shape{n, 1, rows, cols});
  auto xd = x.data();
  for (std::size_t i = 0; i < xd.size(); ++i) xd[i] = static_cast<double>(ib[ih.payload + i]) / 255.0;

  std::vector<std::size_t> labels(n);
  std::size_t kmax = 0;
  for (std::size_t i = 0; i < n; ++i) {
    labels[i] = lb[lh.payload + i];
    kmax = std::max(kmax, labels[i] + 1);
  }
  const std::size_t k = num_classes.value_or(kmax);
  if (k < kmax) throw IdxError("IDX label exceeds the configured class count");
  return Dataset{std::move(x), one_hot(labels, k), Task::Classification, SplitTag::Full};
}

/// Writes an IDX pair; used for fixtures and for exporting synthetic images.
inline void write_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path,
                      std::size_t rows, std::size_t cols, const std::vector<unsigned char>& pixels,
                      const std::vector<unsigned char>& labels) {
  if (pixels.size() != labels.size() * rows * cols) throw IdxError("write_idx: pixel count mismatch");
  auto put = [](std::ofstream& o, std::uint32_t v) {
    const char b[4] = {static_cast<char>(v >> 24), static_cast<char>(v >> 16),
                       static_cast<char>(v >> 8), static_cast<char>(v)};
    o.write(b, 4);
  };
  std::ofstream im(images_path, std::ios::binary);
  put(im, kIdxImagesMagic);
  put(im, static_cast<std::uint32_t>(labels.size()));
  put(im, static_cast<std::uint32_t>(rows));
  put(im, static_cast<std::uint32_t>(cols));
  im.write(reinterpret_cast<const char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()));
  std::ofstream lo(labels_path, std::ios::binary);
  put(lo, kIdxLabelsMagic);
  put(lo, static_cast<std::uint32_t>(labels.size()));
  lo.write(reinterpret_cast<const char*>(labels.data()), static_cast<std::streamsize>(labels.size()));
  if (!im || !lo) throw IdxError("write_idx: cannot write output files");
}

}  // namespace senlab::data
