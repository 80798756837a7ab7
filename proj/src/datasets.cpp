#include "thin/datasets.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

namespace thin {

namespace {

constexpr double kPi = 3.14159265358979323846;

std::vector<unsigned char> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::vector<unsigned char> buf((std::istreambuf_iterator<char>(in)),
                                 std::istreambuf_iterator<char>());
  return buf;
}

std::uint32_t be32(const std::vector<unsigned char>& b, std::size_t off) {
  if (off + 4 > b.size()) throw IoError("truncated IDX header");
  return (std::uint32_t(b[off]) << 24) | (std::uint32_t(b[off + 1]) << 16) |
         (std::uint32_t(b[off + 2]) << 8) | std::uint32_t(b[off + 3]);
}

// Bilinear sample with zero outside the canvas.
double sample(const float* src, std::size_t hw, double yi, double xi) {
  const double fx0 = std::floor(xi), fy0 = std::floor(yi);
  const long x0 = static_cast<long>(fx0), y0 = static_cast<long>(fy0);
  const double ax = xi - fx0, ay = yi - fy0;
  const long n = static_cast<long>(hw);
  auto at = [&](long y, long x) -> double {
    if (y < 0 || y >= n || x < 0 || x >= n) return 0.0;
    return src[static_cast<std::size_t>(y) * hw + static_cast<std::size_t>(x)];
  };
  return (1.0 - ay) * ((1.0 - ax) * at(y0, x0) + ax * at(y0, x0 + 1)) +
         ay * ((1.0 - ax) * at(y0 + 1, x0) + ax * at(y0 + 1, x0 + 1));
}

// Combined rotate-then-rescale warp realized as a single inverse map so the
// composed augmentation interpolates once.
void warp(const float* src, float* dst, std::size_t hw, double angle_deg,
          double s) {
  const double c = (static_cast<double>(hw) - 1.0) / 2.0;
  const double th = angle_deg * kPi / 180.0;
  const double ct = std::cos(th), st = std::sin(th);
  for (std::size_t y = 0; y < hw; ++y)
    for (std::size_t x = 0; x < hw; ++x) {
      const double dx = (static_cast<double>(x) - c) / s;
      const double dy = (static_cast<double>(y) - c) / s;
      const double xi = c + ct * dx + st * dy;
      const double yi = c - st * dx + ct * dy;
      dst[y * hw + x] = static_cast<float>(sample(src, hw, yi, xi));
    }
}

struct FactorDraws {
  double angle = 0.0;
  double scale = 1.0;
};

void apply_factors(const float* src, float* dst, std::size_t hw,
                   const FactorDraws& f) {
  if (f.angle == 0.0 && f.scale == 1.0) {
    std::memcpy(dst, src, hw * hw * sizeof(float));
    return;
  }
  warp(src, dst, hw, f.angle, f.scale);
}

}  // namespace

Tensor Subset::image(std::size_t i) const {
  Tensor t = Tensor::zeros({1, 1, hw, hw});
  const float* p = &pixels[i * hw * hw];
  for (std::size_t j = 0; j < hw * hw; ++j) t.values()[j] = p[j];
  return t;
}

Batch gather_batch(const Subset& s, const std::vector<std::size_t>& idx) {
  Batch b;
  const std::size_t px = s.hw * s.hw;
  b.images = Tensor::zeros({idx.size(), 1, s.hw, s.hw});
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const float* src = &s.pixels[idx[i] * px];
    double* dst = &b.images.values()[i * px];
    for (std::size_t j = 0; j < px; ++j) dst[j] = src[j];
    b.labels.push_back(s.labels[idx[i]]);
    if (!s.rotation_class.empty())
      b.rotation_class.push_back(s.rotation_class[idx[i]]);
    if (!s.scale_class.empty()) b.scale_class.push_back(s.scale_class[idx[i]]);
  }
  return b;
}

std::vector<float> load_idx_images(const std::string& path, std::size_t& n,
                                   std::size_t& hw) {
  auto buf = read_file(path);
  if (be32(buf, 0) != 0x00000803u)
    throw IoError(path + ": bad IDX image magic (want 0x00000803)");
  n = be32(buf, 4);
  const std::size_t rows = be32(buf, 8), cols = be32(buf, 12);
  if (rows != cols) throw IoError(path + ": non-square images unsupported");
  hw = rows;
  const std::size_t need = 16 + n * rows * cols;
  if (buf.size() < need)
    throw IoError(path + ": truncated payload (have " +
                  std::to_string(buf.size()) + " bytes, need " +
                  std::to_string(need) + ")");
  std::vector<float> px(n * rows * cols);
  for (std::size_t i = 0; i < px.size(); ++i)
    px[i] = static_cast<float>(buf[16 + i]) / 255.0f;
  return px;
}

std::vector<int> load_idx_labels(const std::string& path, std::size_t& n) {
  auto buf = read_file(path);
  if (be32(buf, 0) != 0x00000801u)
    throw IoError(path + ": bad IDX label magic (want 0x00000801)");
  n = be32(buf, 4);
  if (buf.size() < 8 + n) throw IoError(path + ": truncated payload");
  std::vector<int> labels(n);
  for (std::size_t i = 0; i < n; ++i) labels[i] = buf[8 + i];
  return labels;
}

namespace {

std::string find_idx(const std::string& dir, const std::string& stem) {
  for (const char* sep : {"-", "."}) {
    std::string candidate = dir + "/" + stem + sep +
                            (stem.find("images") != std::string::npos
                                 ? "idx3-ubyte"
                                 : "idx1-ubyte");
    std::ifstream probe(candidate, std::ios::binary);
    if (probe) return candidate;
  }
  throw IoError(
      "MNIST file '" + stem + "' not found under " + dir +
      ". Download the four IDX files (train-images-idx3-ubyte, "
      "train-labels-idx1-ubyte, t10k-images-idx3-ubyte, t10k-labels-idx1-ubyte) "
      "e.g. from https://ossci-datasets.s3.amazonaws.com/mnist/ and place them "
      "there, or point --data-dir / THIN_DATA_DIR at their directory.");
}

}  // namespace

MnistRaw load_mnist(const std::string& data_dir) {
  MnistRaw raw;
  std::size_t n_img = 0, n_lab = 0, hw = 0;
  raw.train_pixels = load_idx_images(find_idx(data_dir, "train-images"), n_img, hw);
  raw.train_labels = load_idx_labels(find_idx(data_dir, "train-labels"), n_lab);
  if (n_img != n_lab)
    throw IoError("MNIST train image/label counts differ: " +
                  std::to_string(n_img) + " vs " + std::to_string(n_lab));
  raw.hw = hw;
  raw.test_pixels = load_idx_images(find_idx(data_dir, "t10k-images"), n_img, hw);
  raw.test_labels = load_idx_labels(find_idx(data_dir, "t10k-labels"), n_lab);
  if (n_img != n_lab)
    throw IoError("MNIST test image/label counts differ: " +
                  std::to_string(n_img) + " vs " + std::to_string(n_lab));
  if (hw != raw.hw) throw IoError("MNIST train/test image sizes differ");
  return raw;
}

void rotate_bilinear(const float* src, float* dst, std::size_t hw,
                     double angle_deg) {
  if (std::abs(angle_deg) > 90.0)
    throw ContractError("rotate: |angle| must be <= 90, got " +
                        std::to_string(angle_deg));
  warp(src, dst, hw, angle_deg, 1.0);
}

void rescale_bilinear(const float* src, float* dst, std::size_t hw, double s) {
  if (s < 0.5 || s > 1.0)
    throw ContractError("rescale: scale must be in [0.5, 1], got " +
                        std::to_string(s));
  warp(src, dst, hw, 0.0, s);
}

int rotation_bin(double deg) {
  int k = static_cast<int>(std::floor((deg + 90.0) / 10.0));
  return std::clamp(k, 0, 17);
}

int scale_bin(double s) {
  int k = static_cast<int>(std::floor((s - 0.5) / 0.05));
  return std::clamp(k, 0, 9);
}

double rotation_bin_center(int k) { return -85.0 + 10.0 * k; }
double scale_bin_center(int k) { return 0.525 + 0.05 * k; }

namespace {

Subset augment_mnist(const std::vector<float>& pixels,
                     const std::vector<int>& labels, std::size_t hw,
                     std::uint64_t seed, const std::string& split,
                     bool with_scale) {
  Subset out;
  out.count = labels.size();
  out.hw = hw;
  out.pixels.resize(out.count * hw * hw);
  out.labels = labels;
  const std::string rot_tag = "rot/" + split;
  const std::string scale_tag = "scale/" + split;
  for (std::size_t i = 0; i < out.count; ++i) {
    FactorDraws f;
    f.angle = hash_uniform(seed, rot_tag, i, -90.0, 90.0);
    if (with_scale) f.scale = hash_uniform(seed, scale_tag, i, 0.5, 1.0);
    apply_factors(&pixels[i * hw * hw], &out.pixels[i * hw * hw], hw, f);
    out.rotation_class.push_back(rotation_bin(f.angle));
    out.rotation_deg.push_back(static_cast<float>(f.angle));
    if (with_scale) {
      out.scale_class.push_back(scale_bin(f.scale));
      out.scale_value.push_back(static_cast<float>(f.scale));
    } else {
      out.scale_value.push_back(1.0f);
    }
  }
  return out;
}

}  // namespace

DatasetSplit build_mnist_r(std::uint64_t seed, const std::string& data_dir) {
  MnistRaw raw = load_mnist(data_dir);
  DatasetSplit split;
  split.name = Dataset::mnist_r;
  split.seed = seed;
  split.train = augment_mnist(raw.train_pixels, raw.train_labels, raw.hw, seed,
                              "train", false);
  split.test = augment_mnist(raw.test_pixels, raw.test_labels, raw.hw, seed,
                             "test", false);
  return split;
}

DatasetSplit build_mnist_rs(std::uint64_t seed, const std::string& data_dir) {
  MnistRaw raw = load_mnist(data_dir);
  DatasetSplit split;
  split.name = Dataset::mnist_rs;
  split.seed = seed;
  split.train = augment_mnist(raw.train_pixels, raw.train_labels, raw.hw, seed,
                              "train", true);
  split.test = augment_mnist(raw.test_pixels, raw.test_labels, raw.hw, seed,
                             "test", true);
  return split;
}

namespace {

// Shape membership in normalized coordinates (|u| <= 1 contains the shape).
bool shape_inside(int shape, double ux, double uy) {
  switch (shape) {
    case 0:  // square
      return std::abs(ux) <= 0.72 && std::abs(uy) <= 0.72;
    case 1:  // ellipse
      return (ux * ux) / (0.95 * 0.95) + (uy * uy) / (0.62 * 0.62) <= 1.0;
    default: {  // heart: (X^2+Y^2-1)^3 - X^2 Y^3 <= 0, y up, fits |u|<=1
      const double X = 1.25 * ux;
      const double Y = 0.1176 - 1.25 * uy;  // canvas y points down
      const double a = X * X + Y * Y - 1.0;
      return a * a * a - X * X * Y * Y * Y <= 0.0;
    }
  }
}

Subset generate_shapes(std::uint64_t seed, const std::string& split,
                       std::size_t count) {
  constexpr std::size_t kHw = 64;
  constexpr double kRMax = 13.0;  // half-extent in pixels at scale 1
  Subset out;
  out.count = count;
  out.hw = kHw;
  out.pixels.assign(count * kHw * kHw, 0.0f);
  const std::string shape_tag = "shape/" + split;
  const std::string scale_tag = "scale/" + split;
  const std::string rot_tag = "rot/" + split;
  const std::string px_tag = "posx/" + split;
  const std::string py_tag = "posy/" + split;
  for (std::size_t i = 0; i < count; ++i) {
    const int shape = static_cast<int>(hash_u64(seed, shape_tag, i) % 3);
    const double s = hash_uniform(seed, scale_tag, i, 0.5, 1.0);
    const double omega = hash_uniform(seed, rot_tag, i, 0.0, 2.0 * kPi);
    const double he = kRMax * s;
    const double lo = he + 1.0, hi = 63.0 - he - 1.0;
    const double px = hash_uniform(seed, px_tag, i, lo, hi);
    const double py = hash_uniform(seed, py_tag, i, lo, hi);
    const double co = std::cos(omega), so = std::sin(omega);
    float* img = &out.pixels[i * kHw * kHw];
    const long y0 = std::max(0L, static_cast<long>(std::floor(py - he - 1)));
    const long y1 = std::min(63L, static_cast<long>(std::ceil(py + he + 1)));
    const long x0 = std::max(0L, static_cast<long>(std::floor(px - he - 1)));
    const long x1 = std::min(63L, static_cast<long>(std::ceil(px + he + 1)));
    for (long y = y0; y <= y1; ++y)
      for (long x = x0; x <= x1; ++x) {
        const double qx = static_cast<double>(x) - px;
        const double qy = static_cast<double>(y) - py;
        const double ux = (co * qx + so * qy) / he;
        const double uy = (-so * qx + co * qy) / he;
        if (ux < -1.0 || ux > 1.0 || uy < -1.0 || uy > 1.0) continue;
        if (shape_inside(shape, ux, uy)) img[y * 64 + x] = 1.0f;
      }
    out.labels.push_back(shape);
    out.scale_class.push_back(scale_bin(s));
    out.scale_value.push_back(static_cast<float>(s));
    out.rotation_deg.push_back(static_cast<float>(omega * 180.0 / kPi));
  }
  return out;
}

}  // namespace

DatasetSplit build_dsprites_synth(std::uint64_t seed) {
  DatasetSplit split;
  split.name = Dataset::dsprites_synth;
  split.seed = seed;
  split.train = generate_shapes(seed, "train", 60000);
  split.test = generate_shapes(seed, "test", 10000);
  return split;
}

DatasetSplit build_dataset(Dataset name, std::uint64_t seed,
                           const std::string& data_dir) {
  switch (name) {
    case Dataset::mnist_r:
      return build_mnist_r(seed, data_dir);
    case Dataset::mnist_rs:
      return build_mnist_rs(seed, data_dir);
    case Dataset::dsprites_synth:
      return build_dsprites_synth(seed);
  }
  throw ConfigError("unknown dataset");
}

namespace {

template <typename T>
void put(std::ofstream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T take(std::ifstream& in, const std::string& path) {
  T v;
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw IoError(path + ": truncated archive");
  return v;
}

}  // namespace

void save_archive(const Subset& s, Dataset name, std::uint64_t seed,
                  const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  out.write("THINDS1", 7);
  const std::string n = to_string(name);
  put<std::uint8_t>(out, static_cast<std::uint8_t>(n.size()));
  out.write(n.data(), static_cast<std::streamsize>(n.size()));
  put<std::uint64_t>(out, seed);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(s.count));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(s.hw));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(s.hw));
  const std::size_t px = s.hw * s.hw;
  for (std::size_t i = 0; i < s.count; ++i) {
    out.write(reinterpret_cast<const char*>(&s.pixels[i * px]),
              static_cast<std::streamsize>(px * sizeof(float)));
    put<std::uint8_t>(out, static_cast<std::uint8_t>(s.labels[i]));
    put<std::uint8_t>(out, s.rotation_class.empty()
                               ? std::uint8_t{255}
                               : static_cast<std::uint8_t>(s.rotation_class[i]));
    put<std::uint8_t>(out, s.scale_class.empty()
                               ? std::uint8_t{255}
                               : static_cast<std::uint8_t>(s.scale_class[i]));
    put<float>(out, s.rotation_deg.empty() ? 0.0f : s.rotation_deg[i]);
    put<float>(out, s.scale_value.empty() ? 1.0f : s.scale_value[i]);
  }
  if (!out) throw IoError("short write to " + path);
}

Subset load_archive(const std::string& path, Dataset& name,
                    std::uint64_t& seed) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  char magic[7];
  in.read(magic, 7);
  if (!in || std::memcmp(magic, "THINDS1", 7) != 0)
    throw IoError(path + ": bad archive magic (want THINDS1)");
  const auto name_len = take<std::uint8_t>(in, path);
  std::string n(name_len, '\0');
  in.read(n.data(), name_len);
  if (!in) throw IoError(path + ": truncated archive");
  name = dataset_from_string(n);
  seed = take<std::uint64_t>(in, path);
  Subset s;
  s.count = take<std::uint32_t>(in, path);
  s.hw = take<std::uint32_t>(in, path);
  const std::size_t w = take<std::uint32_t>(in, path);
  if (w != s.hw) throw IoError(path + ": non-square archive images");
  const std::size_t px = s.hw * s.hw;
  s.pixels.resize(s.count * px);
  bool any_rot = false, any_scale = false;
  std::vector<int> rot(s.count), scl(s.count);
  for (std::size_t i = 0; i < s.count; ++i) {
    in.read(reinterpret_cast<char*>(&s.pixels[i * px]),
            static_cast<std::streamsize>(px * sizeof(float)));
    if (!in) throw IoError(path + ": truncated archive");
    s.labels.push_back(take<std::uint8_t>(in, path));
    rot[i] = take<std::uint8_t>(in, path);
    scl[i] = take<std::uint8_t>(in, path);
    if (rot[i] != 255) any_rot = true;
    if (scl[i] != 255) any_scale = true;
    s.rotation_deg.push_back(take<float>(in, path));
    s.scale_value.push_back(take<float>(in, path));
  }
  if (any_rot) s.rotation_class = std::move(rot);
  if (any_scale) s.scale_class = std::move(scl);
  return s;
}

nlohmann::json subset_stats(const Subset& s) {
  nlohmann::json j;
  j["count"] = s.count;
  j["hw"] = s.hw;
  int max_label = 0;
  for (int l : s.labels) max_label = std::max(max_label, l);
  std::vector<int> label_hist(max_label + 1, 0);
  for (int l : s.labels) ++label_hist[l];
  j["label_hist"] = label_hist;
  if (!s.rotation_class.empty()) {
    std::vector<int> h(18, 0);
    for (int c : s.rotation_class) ++h[c];
    j["rotation_hist"] = h;
  }
  if (!s.scale_class.empty()) {
    std::vector<int> h(10, 0);
    for (int c : s.scale_class) ++h[c];
    j["scale_hist"] = h;
  }
  double mean = 0.0;
  std::size_t fg_min = s.hw * s.hw, fg;
  for (std::size_t i = 0; i < s.count; ++i) {
    fg = 0;
    const float* p = &s.pixels[i * s.hw * s.hw];
    for (std::size_t k = 0; k < s.hw * s.hw; ++k) {
      mean += p[k];
      if (p[k] > 0.05f) ++fg;
    }
    fg_min = std::min(fg_min, fg);
  }
  j["mean_pixel"] = mean / (static_cast<double>(s.count) * s.hw * s.hw);
  j["min_foreground_pixels"] = fg_min;
  return j;
}

const std::vector<int>& labels_for_factor(const Subset& s, ExoFactor f) {
  const std::vector<int>& v =
      f == ExoFactor::rotation ? s.rotation_class : s.scale_class;
  if (v.empty())
    throw ContractError("subset does not carry factor " + to_string(f));
  return v;
}

const std::vector<float>& values_for_factor(const Subset& s, ExoFactor f) {
  const std::vector<float>& v =
      f == ExoFactor::rotation ? s.rotation_deg : s.scale_value;
  if (v.size() != s.count)
    throw ContractError("subset does not carry values for factor " +
                        to_string(f));
  return v;
}

}  // namespace thin
