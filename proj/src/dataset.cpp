#include "dataset.hpp"

#include <fstream>

namespace bf {
namespace {

constexpr uint32_t kImagesMagic = 0x00000803;
constexpr uint32_t kLabelsMagic = 0x00000801;

std::string slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw error(ERR_CONFIG, "cannot open '" + path + "'");
  return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

uint32_t read_u32be(const std::string& blob, size_t off, const std::string& what) {
  if (off + 4 > blob.size()) throw error(ERR_CONFIG, what + ": file too short");
  const auto* p = reinterpret_cast<const unsigned char*>(blob.data()) + off;
  return uint32_t(p[0]) << 24 | uint32_t(p[1]) << 16 | uint32_t(p[2]) << 8 | uint32_t(p[3]);
}

}  // namespace

DatasetHandle ingest_mnist_idx(const std::string& images_path, const std::string& labels_path) {
  const std::string ib = slurp(images_path);
  const std::string lb = slurp(labels_path);

  const uint32_t imagic = read_u32be(ib, 0, images_path);
  if (imagic != kImagesMagic)
    throw error(ERR_CONFIG, images_path + ": wrong magic for an IDX image file");
  const uint32_t lmagic = read_u32be(lb, 0, labels_path);
  if (lmagic != kLabelsMagic)
    throw error(ERR_CONFIG, labels_path + ": wrong magic for an IDX label file");

  const size_t count = read_u32be(ib, 4, images_path);
  const size_t rows = read_u32be(ib, 8, images_path);
  const size_t cols = read_u32be(ib, 12, images_path);
  const size_t lcount = read_u32be(lb, 4, labels_path);
  if (count != lcount)
    throw error(ERR_CONFIG, "image count " + std::to_string(count) + " does not match label count " +
                                std::to_string(lcount));
  if (rows != cols) throw error(ERR_CONFIG, images_path + ": only square images are supported");
  if (ib.size() != 16 + count * rows * cols)
    throw error(ERR_CONFIG, images_path + ": pixel payload length disagrees with the header");
  if (lb.size() != 8 + count) throw error(ERR_CONFIG, labels_path + ": label payload cut short");

  DatasetHandle ds;
  ds.source = "mnist_idx";
  ds.count = count;
  ds.image_size = rows;
  ds.channels = 1;
  ds.norm_mean = 0.1307;
  ds.norm_std = 0.3081;
  ds.images = Tensor::zeros({count, 1, rows, cols});
  ds.labels.resize(count);

  const auto* px = reinterpret_cast<const unsigned char*>(ib.data()) + 16;
  for (size_t i = 0; i < count * rows * cols; ++i)
    ds.images.data[i] = (double(px[i]) / 255.0 - ds.norm_mean) / ds.norm_std;
  size_t max_label = 0;
  for (size_t i = 0; i < count; ++i) {
    ds.labels[i] = (unsigned char)lb[8 + i];
    max_label = std::max(max_label, ds.labels[i]);
  }
  ds.classes = max_label + 1;
  return ds;
}

DatasetHandle synth_dataset(uint64_t seed, size_t classes, size_t samples_per_class,
                            size_t image_size, double noise_std, uint64_t noise_salt) {
  if (classes < 2) throw error(ERR_CONFIG, "synthetic dataset needs at least 2 classes");
  if (samples_per_class == 0 || image_size == 0)
    throw error(ERR_CONFIG, "synthetic dataset needs samples_per_class > 0 and image_size > 0");

  const size_t pix = image_size * image_size;
  Rng trng(splitmix64(seed));
  std::vector<Tensor> templates;
  templates.reserve(classes);
  for (size_t c = 0; c < classes; ++c) {
    Tensor t = Tensor::zeros({pix});
    for (auto& v : t.data) v = 2.0 * trng.uniform() - 1.0;
    templates.push_back(std::move(t));
  }

  Rng nrng(splitmix64(splitmix64(seed) + noise_salt));
  DatasetHandle ds;
  ds.source = "synthetic";
  ds.count = classes * samples_per_class;
  ds.classes = classes;
  ds.image_size = image_size;
  ds.channels = 1;
  ds.images = Tensor::zeros({ds.count, 1, image_size, image_size});
  ds.labels.resize(ds.count);
  size_t i = 0;
  for (size_t c = 0; c < classes; ++c)
    for (size_t s = 0; s < samples_per_class; ++s, ++i) {
      double* out = ds.images.data.data() + i * pix;
      for (size_t k = 0; k < pix; ++k) out[k] = templates[c].data[k] + noise_std * nrng.normal();
      ds.labels[i] = c;
    }
  return ds;
}

std::pair<DatasetHandle, DatasetHandle> make_train_eval_datasets(const json& spec,
                                                                 uint64_t default_seed) {
  const std::string kind = get_str(spec, "kind", "");
  if (kind == "synthetic") {
    check_keys(spec,
               {"kind", "classes", "samples_per_class", "eval_samples_per_class", "image_size",
                "noise_std", "seed"},
               "dataset");
    const uint64_t seed = get_u64(spec, "seed", default_seed);
    const size_t classes = get_u64(spec, "classes", 10);
    const size_t spc = get_u64(spec, "samples_per_class", 128);
    const size_t espc = get_u64(spec, "eval_samples_per_class", std::max<size_t>(1, spc / 4));
    const size_t image = get_u64(spec, "image_size", 28);
    const double noise = get_num(spec, "noise_std", 0.3);
    return {synth_dataset(seed, classes, spc, image, noise, 1),
            synth_dataset(seed, classes, espc, image, noise, 2)};
  }
  if (kind == "mnist_idx") {
    check_keys(spec, {"kind", "images", "labels", "eval_images", "eval_labels"}, "dataset");
    const std::string images = get_str(spec, "images", "");
    const std::string labels = get_str(spec, "labels", "");
    if (images.empty() || labels.empty())
      throw error(ERR_CONFIG, "dataset: mnist_idx needs 'images' and 'labels' paths");
    DatasetHandle train = ingest_mnist_idx(images, labels);
    const std::string ei = get_str(spec, "eval_images", "");
    const std::string el = get_str(spec, "eval_labels", "");
    DatasetHandle eval = (ei.empty() || el.empty()) ? train : ingest_mnist_idx(ei, el);
    return {std::move(train), std::move(eval)};
  }
  throw error(ERR_CONFIG, "dataset: 'kind' must be synthetic or mnist_idx");
}

Tensor gather_images(const DatasetHandle& ds, const std::vector<size_t>& idx) {
  const size_t per = ds.channels * ds.image_size * ds.image_size;
  Tensor out = Tensor::zeros({idx.size(), ds.channels, ds.image_size, ds.image_size});
  for (size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= ds.count) throw error(ERR_CONFIG, "sample index out of range");
    std::copy_n(ds.images.data.begin() + std::ptrdiff_t(idx[i] * per), per,
                out.data.begin() + std::ptrdiff_t(i * per));
  }
  return out;
}

std::vector<size_t> gather_labels(const DatasetHandle& ds, const std::vector<size_t>& idx) {
  std::vector<size_t> out(idx.size());
  for (size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= ds.count) throw error(ERR_CONFIG, "sample index out of range");
    out[i] = ds.labels[idx[i]];
  }
  return out;
}

}  // namespace bf
