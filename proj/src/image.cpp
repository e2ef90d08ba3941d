#include "fel/image.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <stdexcept>

#include "fel/serialize.hpp"

namespace fel {

namespace {

void require_rgb(const Tensor& t, const char* op) {
  if (t.rank() != 3 || t.dim(0) != 3)
    throw std::invalid_argument(std::string(op) + ": expected a 3xHxW tensor, got " +
                                shape_str(t.shape));
}

// skips whitespace and '#' comment lines between header tokens
void skip_separators(const std::string& s, std::size_t& i) {
  while (i < s.size()) {
    if (std::isspace(static_cast<unsigned char>(s[i]))) {
      ++i;
    } else if (s[i] == '#') {
      while (i < s.size() && s[i] != '\n') ++i;
    } else {
      break;
    }
  }
}

int header_int(const std::string& s, std::size_t& i, const char* what) {
  skip_separators(s, i);
  std::size_t start = i;
  while (i < s.size() && std::isdigit(static_cast<unsigned char>(s[i]))) ++i;
  if (i == start)
    throw std::runtime_error(std::string("ppm: missing ") + what);
  return std::stoi(s.substr(start, i - start));
}

}  // namespace

void write_ppm(const std::string& path, const Tensor& image) {
  require_rgb(image, "write_ppm");
  const int h = image.dim(1), w = image.dim(2);
  std::string out = "P6\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  out.reserve(out.size() + static_cast<std::size_t>(3) * h * w);
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  for (std::size_t i = 0; i < plane; ++i) {
    for (int c = 0; c < 3; ++c) {
      double v = image.data[static_cast<std::size_t>(c) * plane + i];
      v = std::min(std::max(v, 0.0), 1.0);
      out.push_back(static_cast<char>(
          static_cast<unsigned char>(std::lround(v * 255.0))));
    }
  }
  write_file(path, out);
}

Tensor read_ppm(const std::string& path) {
  const std::string s = read_file(path);
  if (s.size() < 2 || s[0] != 'P' || s[1] != '6')
    throw std::runtime_error("ppm: " + path + " is not a binary P6 file");
  std::size_t i = 2;
  const int w = header_int(s, i, "width");
  const int h = header_int(s, i, "height");
  const int maxval = header_int(s, i, "max value");
  if (maxval != 255)
    throw std::runtime_error("ppm: only 8-bit files are supported, max value is " +
                             std::to_string(maxval));
  if (i >= s.size() || !std::isspace(static_cast<unsigned char>(s[i])))
    throw std::runtime_error("ppm: malformed header in " + path);
  ++i;  // single whitespace byte separates header and pixels
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  if (s.size() - i < plane * 3)
    throw std::runtime_error("ppm: pixel data truncated in " + path);
  Tensor out = Tensor::zeros({3, h, w});
  for (std::size_t p = 0; p < plane; ++p)
    for (int c = 0; c < 3; ++c)
      out.data[static_cast<std::size_t>(c) * plane + p] =
          static_cast<unsigned char>(s[i + p * 3 + static_cast<std::size_t>(c)]) /
          255.0;
  return out;
}

Tensor tensor_to_image(const Tensor& t) {
  require_rgb(t, "tensor_to_image");
  double lo = t.data[0], hi = t.data[0];
  for (double v : t.data) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  Tensor out = Tensor::zeros(t.shape);
  if (hi - lo < 1e-12) {
    for (double& v : out.data) v = 0.5;
    return out;
  }
  const double inv = 1.0 / (hi - lo);
  for (std::size_t i = 0; i < t.data.size(); ++i)
    out.data[i] = (t.data[i] - lo) * inv;
  return out;
}

}  // namespace fel
