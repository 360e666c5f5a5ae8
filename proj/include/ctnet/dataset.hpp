#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "ctnet/rng.hpp"
#include "ctnet/tensor.hpp"

namespace ctnet::data {

struct ImageRecord {
  std::string path;  // as written in the manifest (relative paths are relative to base_dir)
  std::string patient_id;
  std::size_t label = 0;

  friend bool operator==(const ImageRecord&, const ImageRecord&) = default;
};

struct DatasetManifest {
  std::vector<ImageRecord> records;
  std::vector<std::string> class_names;
  std::string base_dir;

  std::size_t num_classes() const { return class_names.size(); }
  // Throws ConfigError on duplicate paths or out-of-range labels.
  void validate() const;
  std::vector<std::size_t> class_histogram() const;
  // Sorted, unique.
  std::vector<std::string> patients() const;
  std::string resolve(const ImageRecord& r) const;
};

// Manifest text: an optional "# classes = a,b,c" line fixing the class list
// (and its order), then a header naming the columns path, patient_id and label
// in any order, then one row per image. Without a classes line the class list
// is the sorted set of labels seen. Other '#' lines are comments.
DatasetManifest parse_manifest(std::string_view text, std::string base_dir = {});
DatasetManifest load_manifest(const std::string& path);
std::string print_manifest(const DatasetManifest& m);

// ---------------------------------------------------------------------------
// Netpbm images

// Grayscale P2/P5 to [1,H,W] with raw intensities mapped to 0..255.
Tensor decode_image(std::string_view bytes);
// Any of P2, P3, P5, P6 to [C,H,W] (C = 1 or 3), mapped to 0..255.
Tensor decode_netpbm(std::string_view bytes);
Tensor read_image(const std::string& path);

// Values are rounded and clamped to 0..255. [H,W] or [1,H,W] gives P5 and
// [3,H,W] gives P6.
std::string encode_netpbm(const Tensor& image);
void write_image(const std::string& path, const Tensor& image);

// Corner-aligned bilinear resampling of [C,H,W] to [C,h,w].
Tensor resize(const Tensor& image, std::size_t h, std::size_t w);

// ---------------------------------------------------------------------------
// Augmentation

struct AugmentationConfig {
  double rescale = 1.0 / 255.0;
  bool horizontal_flip = true;
  bool vertical_flip = true;
  double zoom_min = 0.85, zoom_max = 1.15;
  double rotation_min_deg = 0.0, rotation_max_deg = 360.0;
  double width_shift = 0.15;   // fraction of the width, both directions
  double height_shift = 0.15;  // fraction of the height, both directions
  double shear = 0.15;         // shear factor, both directions

  // Everything disabled: output = input * rescale.
  static AugmentationConfig none();
  void validate() const;
};

// One concrete draw of the random transform.
struct AffineParams {
  double rotation_deg = 0.0;
  double shift_x = 0.0, shift_y = 0.0;  // pixels
  double shear = 0.0;
  double zoom_x = 1.0, zoom_y = 1.0;
  bool flip_h = false, flip_v = false;
};

AffineParams sample_affine(const AugmentationConfig& config, std::size_t h, std::size_t w, Rng& rng);
// Single bilinear pass of rotation, shift, shear and zoom (nearest-edge fill),
// then flips, then multiplication by rescale.
Tensor apply_affine(const Tensor& image, const AffineParams& p, double rescale);
Tensor augment(const Tensor& image, const AugmentationConfig& config, Rng& rng);

// ---------------------------------------------------------------------------
// Patient-wise splits

struct Fold {
  std::vector<std::string> train_patients;  // sorted
  std::vector<std::string> test_patients;   // sorted
  std::vector<std::size_t> train_indices;   // record indices, ascending
  std::vector<std::size_t> test_indices;
};

struct SplitPlan {
  std::size_t k = 0;
  std::uint64_t seed = 0;
  std::vector<Fold> folds;
};

// Majority label of each patient's images (ties: lowest label).
std::map<std::string, std::size_t> patient_labels(const DatasetManifest& m);

// Patients are shuffled by seed within each class and dealt round-robin to k
// test groups, so every fold keeps the class proportions.
SplitPlan patient_kfold_split(const DatasetManifest& m, std::size_t k, std::uint64_t seed);

struct PatientSplit {
  std::vector<std::string> train;  // sorted
  std::vector<std::string> val;    // sorted
};

// ceil(fraction * P) patients go to validation, at most P - 1. With labels the
// draw is stratified by class; without, all patients count as one class.
PatientSplit train_val_split(const std::vector<std::string>& patients, double fraction, std::uint64_t seed);
PatientSplit train_val_split(const std::vector<std::string>& patients,
                             const std::map<std::string, std::size_t>& labels, double fraction, std::uint64_t seed);

// Record indices whose patient is in the given sorted set.
std::vector<std::size_t> indices_for(const DatasetManifest& m, const std::vector<std::string>& patients);

// Fisher-Yates.
template <class T>
void shuffle(std::vector<T>& items, Rng& rng) {
  for (std::size_t i = items.size(); i > 1; --i) {
    const auto j = static_cast<std::size_t>(rng.below(i));
    std::swap(items[i - 1], items[j]);
  }
}

// ---------------------------------------------------------------------------
// Synthetic data

// Each class draws a bright disk whose radius grows with the class index;
// patients shift and slightly rescale the disk, and each image jitters it a
// little further and adds pixel noise.
struct SyntheticConfig {
  std::size_t classes = 3;
  std::size_t patients_per_class = 10;
  std::size_t images_per_patient = 5;
  std::size_t resolution = 32;
  std::uint64_t seed = 0;

  void validate() const;
};

inline constexpr double kSyntheticBackground = 20.0;
inline constexpr double kSyntheticForeground = 230.0;
inline constexpr double kSyntheticNoise = 4.0;

// Nominal disk radius of a class as a fraction of the resolution.
double synthetic_radius_fraction(std::size_t label, std::size_t classes);
// [1,R,R] raw image for one sample.
Tensor synthetic_image(const SyntheticConfig& cfg, std::size_t label, std::size_t patient, std::size_t image);
// Writes <out_dir>/images/*.pgm and <out_dir>/manifest.csv; returns the manifest.
DatasetManifest generate_synthetic(const SyntheticConfig& cfg, const std::string& out_dir);

// Closed-form classifier for synthetic images: counts bright pixels and
// picks the class whose nominal disk area is nearest on a log scale.
std::size_t synthetic_oracle(const Tensor& image, std::size_t classes);

// ---------------------------------------------------------------------------

// Decodes every record and resizes to [1,R,R] raw intensities.
std::vector<Tensor> load_images(const DatasetManifest& m, std::size_t resolution);

}  // namespace ctnet::data
