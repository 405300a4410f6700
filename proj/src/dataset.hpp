#pragma once
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "json_util.hpp"
#include "tensor.hpp"

namespace bf {

struct DatasetHandle {
  std::string source;  // mnist_idx | synthetic
  size_t count = 0;
  size_t classes = 0;
  size_t image_size = 0;
  size_t channels = 1;
  double norm_mean = 0.0, norm_std = 1.0;  // applied at ingest time
  Tensor images;  // [count, C, H, W], already normalized
  std::vector<size_t> labels;
};

// IDX pair (big-endian headers); pixels are mapped to [0,1] and then
// standardized with the usual MNIST constants.
DatasetHandle ingest_mnist_idx(const std::string& images_path, const std::string& labels_path);

// Per-class random template in [-1,1] plus Gaussian pixel noise. The template
// stream depends only on (seed); the noise stream also mixes in noise_salt so
// a second split can reuse the templates with fresh noise.
DatasetHandle synth_dataset(uint64_t seed, size_t classes, size_t samples_per_class,
                            size_t image_size, double noise_std = 0.3, uint64_t noise_salt = 1);

// Builds the train/eval pair a training config asks for. Synthetic evals get
// noise_salt=2 over the same templates; IDX evals come from eval_* paths and
// fall back to the training files when those are absent.
std::pair<DatasetHandle, DatasetHandle> make_train_eval_datasets(const json& spec,
                                                                 uint64_t default_seed);

Tensor gather_images(const DatasetHandle& ds, const std::vector<size_t>& idx);
std::vector<size_t> gather_labels(const DatasetHandle& ds, const std::vector<size_t>& idx);

}  // namespace bf
