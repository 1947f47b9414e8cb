#pragma once

// Loaders for labeled source data: comma-separated text with a header row,
// and the big-endian IDX image/label format.

#include <array>
#include <charconv>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include "csmpu/data.hpp"

namespace csmpu {

/// Malformed input; the message names the file and line or byte offset.
class ParseError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

inline std::vector<std::string_view> split_commas(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto comma = line.find(',', start);
    auto field = line.substr(start, comma == std::string_view::npos ? line.npos : comma - start);
    while (!field.empty() && (field.front() == ' ' || field.front() == '\t')) field.remove_prefix(1);
    while (!field.empty() && (field.back() == ' ' || field.back() == '\t' || field.back() == '\r')) {
      field.remove_suffix(1);
    }
    out.push_back(field);
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

template <typename T>
bool parse_number(std::string_view text, T& out) {
  if (text.empty()) return false;
  if (text.front() == '+') text.remove_prefix(1);
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), out);
  return ec == std::errc{} && ptr == text.data() + text.size();
}

}  // namespace detail

/// Reads a CSV with a header row. `label_column` is a header name or a
/// zero-based column index; every other column is a numeric feature.
inline LabeledData load_csv(const std::string& path, const std::string& label_column) {
  std::ifstream in(path);
  if (!in) throw ParseError(path + ": cannot open");
  std::string line;
  if (!std::getline(in, line)) throw ParseError(path + ":1: missing header row");
  const auto header = detail::split_commas(line);

  std::size_t label_at = header.size();
  for (std::size_t i = 0; i < header.size(); ++i) {
    if (header[i] == label_column) label_at = i;
  }
  if (label_at == header.size()) {
    std::size_t idx = 0;
    if (detail::parse_number(label_column, idx) && idx < header.size()) {
      label_at = idx;
    } else {
      throw ParseError(path + ":1: no label column '" + label_column + "'");
    }
  }

  LabeledData data;
  std::vector<double> row(header.size() - 1);
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    const auto fields = detail::split_commas(line);
    if (fields.size() != header.size()) {
      throw ParseError(path + ":" + std::to_string(line_no) + ": expected " +
                       std::to_string(header.size()) + " fields, got " +
                       std::to_string(fields.size()));
    }
    std::size_t at = 0;
    for (std::size_t i = 0; i < fields.size(); ++i) {
      if (i == label_at) {
        int label = 0;
        if (!detail::parse_number(fields[i], label)) {
          throw ParseError(path + ":" + std::to_string(line_no) + ": label '" +
                           std::string(fields[i]) + "' is not an integer");
        }
        data.labels.push_back(label);
      } else if (!detail::parse_number(fields[i], row[at++])) {
        throw ParseError(path + ":" + std::to_string(line_no) + ": field " + std::to_string(i + 1) +
                         " '" + std::string(fields[i]) + "' is not numeric");
      }
    }
    data.x.append_row(row);
  }
  if (data.labels.empty()) throw ParseError(path + ": no data rows");
  return data;
}

namespace detail {

inline std::vector<unsigned char> read_all(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError(path + ": cannot open");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::uint32_t read_be32(const std::vector<unsigned char>& bytes, std::size_t offset,
                               const std::string& path) {
  if (offset + 4 > bytes.size()) {
    throw ParseError(path + ": offset " + std::to_string(offset) + ": truncated header");
  }
  return (std::uint32_t{bytes[offset]} << 24) | (std::uint32_t{bytes[offset + 1]} << 16) |
         (std::uint32_t{bytes[offset + 2]} << 8) | std::uint32_t{bytes[offset + 3]};
}

}  // namespace detail

inline constexpr std::uint32_t kIdxImageMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelMagic = 0x00000801;

/// Reads an IDX image file (unsigned bytes, 3 dimensions) and its label
/// file. Pixels are scaled to [0, 1]; images are flattened row-major.
inline LabeledData load_idx(const std::string& image_path, const std::string& label_path) {
  const auto images = detail::read_all(image_path);
  const auto labels = detail::read_all(label_path);

  const auto image_magic = detail::read_be32(images, 0, image_path);
  if (image_magic != kIdxImageMagic) {
    std::ostringstream msg;
    msg << image_path << ": offset 0: bad magic 0x" << std::hex << image_magic << ", expected 0x"
        << kIdxImageMagic;
    throw ParseError(msg.str());
  }
  const auto label_magic = detail::read_be32(labels, 0, label_path);
  if (label_magic != kIdxLabelMagic) {
    std::ostringstream msg;
    msg << label_path << ": offset 0: bad magic 0x" << std::hex << label_magic << ", expected 0x"
        << kIdxLabelMagic;
    throw ParseError(msg.str());
  }
  const std::size_t n = detail::read_be32(images, 4, image_path);
  const std::size_t rows = detail::read_be32(images, 8, image_path);
  const std::size_t cols = detail::read_be32(images, 12, image_path);
  const std::size_t n_labels = detail::read_be32(labels, 4, label_path);
  if (n != n_labels) {
    throw ParseError(label_path + ": offset 4: " + std::to_string(n_labels) + " labels for " +
                     std::to_string(n) + " images");
  }
  const std::size_t pixels = rows * cols;
  if (images.size() != 16 + n * pixels) {
    throw ParseError(image_path + ": offset " + std::to_string(images.size()) + ": expected " +
                     std::to_string(16 + n * pixels) + " bytes");
  }
  if (labels.size() != 8 + n) {
    throw ParseError(label_path + ": offset " + std::to_string(labels.size()) + ": expected " +
                     std::to_string(8 + n) + " bytes");
  }

  LabeledData data{Matrix(n, pixels), std::vector<int>(n)};
  for (std::size_t i = 0; i < n; ++i) {
    auto row = data.x.row(i);
    const unsigned char* src = images.data() + 16 + i * pixels;
    for (std::size_t j = 0; j < pixels; ++j) row[j] = static_cast<double>(src[j]) / 255.0;
    data.labels[i] = labels[8 + i];
  }
  return data;
}

}  // namespace csmpu
