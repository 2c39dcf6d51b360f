#pragma once
// Image corpora for training and evaluation: a CSV manifest over PNG files,
// an in-memory dataset of [-1, 1] float images, and a deterministic
// synthetic-shapes generator whose train and test splits use disjoint
// shape classes.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "core/tensor.hpp"

namespace ssgan {

enum class Split { train, test };

struct ManifestRow {
  std::string path;  // relative to the manifest's root directory
  int class_id = 0;
  Split split = Split::train;
};

struct DatasetManifest {
  std::string root;
  std::vector<ManifestRow> rows;
  std::size_t image_size = 0;
  std::size_t channels = 0;
};

/// Parses root/manifest.csv (header `path,class_id,split`) and checks that
/// the train and test splits reference disjoint class-id sets.
DatasetManifest load_manifest(const std::string& root, std::size_t image_size,
                              std::size_t channels);

/// A fully decoded corpus. Images are [C, H, W] floats mapped by x/127.5 - 1,
/// indexed in manifest-row order.
struct Dataset {
  DatasetManifest manifest;
  std::vector<Tensor<float>> images;
  std::vector<std::size_t> train_rows;
  std::vector<std::size_t> test_rows;
  std::map<int, std::vector<std::size_t>> train_by_class;
  std::map<int, std::vector<std::size_t>> test_by_class;
};

/// Loads the manifest and every referenced PNG, validating that each decodes
/// to the declared square size. Grayscale files are replicated to the
/// declared channel count, RGB reduced by averaging, and alpha dropped.
Dataset load_dataset(const std::string& root, std::size_t image_size, std::size_t channels);

/// Converts one decoded PNG to a [C, H, W] tensor in [-1, 1].
Tensor<float> image_to_tensor(const struct PngImage& png, std::size_t channels);

struct SyntheticSpec {
  std::size_t n_train_classes = 5;
  std::size_t n_test_classes = 3;
  std::size_t per_class = 200;
  std::size_t image_size = 32;
  std::size_t channels = 3;
  std::uint64_t seed = 0;
};

/// Renders a corpus of parametric shape silhouettes (disc, square, triangle,
/// cross, ring, star, bar, diamond — at most 8 classes total) with randomized
/// position, scale, rotation, and brightness, then writes the PNGs plus
/// manifest.csv into out_dir. Every image depends only on
/// (seed, class_id, index), so regeneration is byte-identical.
DatasetManifest gen_synthetic(const std::string& out_dir, const SyntheticSpec& spec);

}  // namespace ssgan
