#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "hamil/rng.hpp"
#include "hamil/tensor.hpp"

namespace hamil {

/// Labelled feature vectors, one sample per row of `x`.
struct Dataset {
  Tensor x;
  std::vector<std::size_t> y;
  std::vector<std::string> class_names;

  std::size_t size() const { return y.size(); }
  std::size_t dim() const { return x.cols(); }
  std::size_t classes() const { return class_names.size(); }
  Tensor sample(std::size_t i) const;
  /// Rows `idx` as a new dataset sharing class names.
  Dataset subset(const std::vector<std::size_t>& idx) const;
  std::vector<std::size_t> class_counts() const;
  /// Accuracy of always predicting the most frequent class.
  double majority_baseline() const;
};

struct SyntheticSpec {
  std::size_t per_class = 200;
  std::size_t dim = 32;
  double noise = 0.16;
  std::uint64_t seed = 42;
};

/// Ten-class feature dataset with CIFAR-style class names. Classes come in
/// look-alike pairs (cat/dog, car/truck, plane/ship, deer/horse, bird/frog)
/// whose means sit close together, so confusions concentrate inside pairs.
/// Features lie in [0, 1].
Dataset make_synthetic(const SyntheticSpec& spec);

/// Stratified split; `test_fraction` of every class goes to the second set.
std::pair<Dataset, Dataset> split(const Dataset& d, double test_fraction, std::uint64_t seed);

/// CSV of features with the label in the last column. The label may be a
/// class index or a name. A leading "# classes: a,b,..." line fixes the
/// name order; a non-numeric first row is treated as a header.
Dataset read_csv(const std::filesystem::path& path);
void write_csv(const std::filesystem::path& path, const Dataset& d);

/// Directory of label subfolders holding PGM (P2/P5) images of equal size.
/// Pixels are scaled to [0, 1] and flattened row-major.
Dataset read_image_dir(const std::filesystem::path& dir);

/// Reads whichever format `path` names (directory -> images, else CSV).
Dataset load_dataset(const std::filesystem::path& path);

}  // namespace hamil
