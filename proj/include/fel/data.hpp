#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fel/rng.hpp"
#include "fel/tensor.hpp"

namespace fel {

// The four shape classes, in label order.
constexpr int kNumShapeClasses = 4;
const char* shape_class_name(int label);  // "circle", "square", ...

struct DatasetSpec {
  int num_classes = kNumShapeClasses;
  int image_size = 64;
  int train_count = 2000;
  int val_count = 500;
  double gamma_lo = 1.8;
  double gamma_hi = 4.0;
  double brightness_lo = 0.08;
  double brightness_hi = 0.3;
  double noise_sigma = 0.12;
  std::uint64_t seed = 7;

  void validate() const;
};

struct Sample {
  Tensor image;  // darkened 3xSxS, values in [0,1]
  int label = 0;
  double gamma = 1.0;
  double brightness = 1.0;
  std::uint64_t noise_seed = 0;
};

struct Dataset {
  DatasetSpec spec;
  std::vector<Sample> train;
  std::vector<Sample> val;
};

// Renders one anti-aliased well-lit shape image; consumes rng for geometry
// and colors.
Tensor render_shape(int label, int size, Rng& rng);

// Low-light degradation: clamp(brightness * img^gamma + noise, 0, 1).
Tensor darken(const Tensor& img, double gamma, double brightness,
              double noise_sigma, std::uint64_t noise_seed);

// Deterministic in spec.seed; every sample derives its own stream, so counts
// can change without reshuffling everything else.
Dataset generate_dataset(const DatasetSpec& spec);

// Single-file archive with a trailing content digest.
void write_dataset(const std::string& path, const Dataset& ds);
Dataset read_dataset(const std::string& path);

}  // namespace fel
