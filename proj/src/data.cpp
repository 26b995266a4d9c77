#include "tmmnn/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>

namespace tmmnn {

void Dataset::validate() const {
  if (samples.rows() != Index(labels.size()))
    throw DataError("dataset: " + std::to_string(samples.rows()) +
                    " samples vs " + std::to_string(labels.size()) + " labels");
  if (num_classes < 1) throw DataError("dataset: num_classes must be >= 1");
  const Index d =
      Index(extents[0]) * Index(extents[1]) * Index(extents[2]);
  if (samples.cols() != d)
    throw DataError("dataset: extents imply dim " + std::to_string(d) +
                    ", samples have " + std::to_string(samples.cols()));
  for (int y : labels)
    if (y < 0 || y >= num_classes)
      throw DataError("dataset: label " + std::to_string(y) +
                      " outside [0, " + std::to_string(num_classes - 1) + "]");
  if (samples.size() > 0 &&
      (samples.minCoeff() < Real(0) || samples.maxCoeff() > Real(1)))
    throw DataError("dataset: pixel values outside [0,1]");
}

void SyntheticSpec::validate() const {
  if (side < 4) throw ConfigError("synthetic: side must be >= 4");
  if (!(jitter > Real(0))) throw ConfigError("synthetic: jitter must be > 0");
  if (num_classes < 2) throw ConfigError("synthetic: need >= 2 classes");
  if (samples_per_class < 1)
    throw ConfigError("synthetic: need >= 1 sample per class");
}

SplitDataset generate_synthetic(const SyntheticSpec& spec, std::uint64_t seed) {
  spec.validate();
  const Index d = Index(spec.side) * Index(spec.side);
  const Index n = Index(spec.num_classes) * Index(spec.samples_per_class);

  Mat all(n, d);
  std::vector<int> labels(static_cast<std::size_t>(n));
  std::uniform_real_distribution<double> uni{0.0, 1.0};
  std::normal_distribution<double> gauss{0.0, 1.0};

  Index row = 0;
  for (int c = 0; c < spec.num_classes; ++c) {
    auto proto_rng = make_rng(spec.prototype_seed, {0xC1A55ULL, std::uint64_t(c)});
    Eigen::RowVectorXf proto(d);
    for (Index j = 0; j < d; ++j) proto(j) = Real(uni(proto_rng));

    auto jit_rng = make_rng(seed, {0x5A3EULL, std::uint64_t(c)});
    for (int k = 0; k < spec.samples_per_class; ++k, ++row) {
      for (Index j = 0; j < d; ++j) {
        Real v = proto(j) + spec.jitter * Real(gauss(jit_rng));
        all(row, j) = std::clamp(v, Real(0), Real(1));
      }
      labels[size_t(row)] = c;
    }
  }

  std::vector<Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Index(0));
  auto split_rng = make_rng(seed, {0x5917ULL});
  std::shuffle(order.begin(), order.end(), split_rng);
  const Index n_train = (n * 8) / 10;

  auto take = [&](Index begin, Index count, const char* tag) {
    Dataset ds;
    ds.samples.resize(count, d);
    ds.labels.resize(size_t(count));
    for (Index i = 0; i < count; ++i) {
      ds.samples.row(i) = all.row(order[size_t(begin + i)]);
      ds.labels[size_t(i)] = labels[size_t(order[size_t(begin + i)])];
    }
    ds.extents = {1, spec.side, spec.side};
    ds.num_classes = spec.num_classes;
    ds.provenance = std::string("synthetic/") + tag;
    ds.validate();
    return ds;
  };

  SplitDataset out;
  out.train = take(0, n_train, "train");
  out.test = take(n_train, n - n_train, "test");
  return out;
}

namespace {

std::uint32_t read_be32(const std::vector<std::uint8_t>& buf, std::size_t off,
                        const std::string& path) {
  if (off + 4 > buf.size())
    throw FormatError(path + ": truncated header at byte " + std::to_string(off));
  return (std::uint32_t(buf[off]) << 24) | (std::uint32_t(buf[off + 1]) << 16) |
         (std::uint32_t(buf[off + 2]) << 8) | std::uint32_t(buf[off + 3]);
}

void write_be32(std::ofstream& out, std::uint32_t v) {
  const std::uint8_t bytes[4] = {std::uint8_t(v >> 24), std::uint8_t(v >> 16),
                                 std::uint8_t(v >> 8), std::uint8_t(v)};
  out.write(reinterpret_cast<const char*>(bytes), 4);
}

std::vector<std::uint8_t> slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path);
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in),
                                   std::istreambuf_iterator<char>());
}

constexpr std::uint32_t kImagesMagic = 0x00000803;
constexpr std::uint32_t kLabelsMagic = 0x00000801;

}  // namespace

Dataset load_idx(const std::string& images_path, const std::string& labels_path) {
  const auto img = slurp(images_path);
  const std::uint32_t img_magic = read_be32(img, 0, images_path);
  if (img_magic != kImagesMagic)
    throw FormatError(images_path + ": bad magic 0x" +
                      [&] {
                        char b[16];
                        std::snprintf(b, sizeof b, "%08x", img_magic);
                        return std::string(b);
                      }() +
                      " at byte 0 (want 0x00000803)");
  const std::uint32_t n = read_be32(img, 4, images_path);
  const std::uint32_t rows = read_be32(img, 8, images_path);
  const std::uint32_t cols = read_be32(img, 12, images_path);
  const std::size_t need = 16 + std::size_t(n) * rows * cols;
  if (img.size() < need)
    throw FormatError(images_path + ": truncated pixel data at byte " +
                      std::to_string(img.size()) + " (need " +
                      std::to_string(need) + ")");

  const auto lbl = slurp(labels_path);
  const std::uint32_t lbl_magic = read_be32(lbl, 0, labels_path);
  if (lbl_magic != kLabelsMagic)
    throw FormatError(labels_path + ": bad magic at byte 0 (want 0x00000801)");
  const std::uint32_t n_lbl = read_be32(lbl, 4, labels_path);
  if (n_lbl != n)
    throw FormatError("IDX count mismatch: " + std::to_string(n) +
                      " images vs " + std::to_string(n_lbl) + " labels");
  if (lbl.size() < 8 + std::size_t(n_lbl))
    throw FormatError(labels_path + ": truncated label data at byte " +
                      std::to_string(lbl.size()));

  Dataset ds;
  ds.samples.resize(Index(n), Index(rows) * Index(cols));
  ds.labels.resize(n);
  int max_label = 0;
  for (std::uint32_t i = 0; i < n; ++i) {
    const std::size_t base = 16 + std::size_t(i) * rows * cols;
    for (std::uint32_t p = 0; p < rows * cols; ++p)
      ds.samples(Index(i), Index(p)) = Real(img[base + p]) / Real(255);
    ds.labels[i] = int(lbl[8 + i]);
    max_label = std::max(max_label, ds.labels[i]);
  }
  ds.extents = {1, int(rows), int(cols)};
  ds.num_classes = max_label + 1;
  ds.provenance = "idx:" + images_path;
  ds.validate();
  return ds;
}

void write_idx(const Dataset& data, const std::string& images_path,
               const std::string& labels_path) {
  data.validate();
  if (data.extents[0] != 1)
    throw DataError("write_idx: the 3-dim u8 IDX layout holds single-channel "
                    "images, got " + std::to_string(data.extents[0]) +
                    " channels");
  std::ofstream img(images_path, std::ios::binary);
  if (!img) throw DataError("cannot write " + images_path);
  write_be32(img, kImagesMagic);
  write_be32(img, std::uint32_t(data.size()));
  write_be32(img, std::uint32_t(data.extents[1]));
  write_be32(img, std::uint32_t(data.extents[2]));
  for (Index i = 0; i < data.size(); ++i)
    for (Index j = 0; j < data.dim(); ++j) {
      const auto q = std::uint8_t(std::lround(double(data.samples(i, j)) * 255.0));
      img.write(reinterpret_cast<const char*>(&q), 1);
    }
  if (!img) throw DataError("short write to " + images_path);

  std::ofstream lbl(labels_path, std::ios::binary);
  if (!lbl) throw DataError("cannot write " + labels_path);
  write_be32(lbl, kLabelsMagic);
  write_be32(lbl, std::uint32_t(data.size()));
  for (int y : data.labels) {
    const auto b = std::uint8_t(y);
    lbl.write(reinterpret_cast<const char*>(&b), 1);
  }
  if (!lbl) throw DataError("short write to " + labels_path);
}

}  // namespace tmmnn
