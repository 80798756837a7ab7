#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "thin/config.hpp"
#include "thin/ensemble.hpp"
#include "thin/rng.hpp"
#include "thin/tensor.hpp"

namespace thin {

/// One split of a dataset, stored structure-of-arrays with f32 pixels to keep
/// the 64x64 corpus comfortably in memory. Batches materialize to f64.
struct Subset {
  std::size_t count = 0;
  std::size_t hw = 0;                // square images, H == W
  std::vector<float> pixels;         // [count * hw * hw], values in [0,1]
  std::vector<int> labels;           // task labels
  std::vector<int> rotation_class;   // empty when the factor is absent
  std::vector<int> scale_class;
  std::vector<float> rotation_deg;   // continuous factor values (may be
  std::vector<float> scale_value;    // informational when unbinned)

  Tensor image(std::size_t i) const;  // [1,1,hw,hw] f64 copy
};

struct DatasetSplit {
  Dataset name = Dataset::mnist_r;
  std::uint64_t seed = 0;
  Subset train;
  Subset test;
};

/// Gathers the given sample indices into a training batch (f64 images plus
/// labels and factor classes).
Batch gather_batch(const Subset& s, const std::vector<std::size_t>& idx);

// --- MNIST ingestion -------------------------------------------------------

// IDX-format readers (big-endian headers, magic 0x803 / 0x801). Pixels are
// scaled by 1/255. Malformed or truncated files raise IoError.
std::vector<float> load_idx_images(const std::string& path, std::size_t& n,
                                   std::size_t& hw);
std::vector<int> load_idx_labels(const std::string& path, std::size_t& n);

// Locates the four standard IDX files under data_dir, also accepting the
// ".idx3-ubyte"-suffixed naming. Throws IoError with download instructions
// when missing.
struct MnistRaw {
  std::vector<float> train_pixels, test_pixels;
  std::vector<int> train_labels, test_labels;
  std::size_t hw = 28;
};
MnistRaw load_mnist(const std::string& data_dir);

// --- Geometric augmentation -------------------------------------------------

// Rotation about the image center by angle_deg (|angle| <= 90), bilinear
// sampling, out-of-bounds reads as 0. Output size equals input size.
void rotate_bilinear(const float* src, float* dst, std::size_t hw,
                     double angle_deg);
// Rescale about the center by s in [0.5, 1], bilinear, zero fill.
void rescale_bilinear(const float* src, float* dst, std::size_t hw, double s);

// Bin mappings shared by augmentation and the generator.
int rotation_bin(double deg);   // floor((deg+90)/10), clamped to [0,17]
int scale_bin(double s);        // floor((s-0.5)/0.05), clamped to [0,9]
double rotation_bin_center(int k);  // -85 + 10k
double scale_bin_center(int k);     // 0.525 + 0.05k

// --- Dataset builders --------------------------------------------------------

// Per-image factors are drawn from the counter-based generator keyed by
// (seed, "<factor>/<split>", index), so rebuilding with the same seed is
// byte-identical and order-independent.
DatasetSplit build_mnist_r(std::uint64_t seed, const std::string& data_dir);
DatasetSplit build_mnist_rs(std::uint64_t seed, const std::string& data_dir);
// Procedural 64x64 binary shapes (square / ellipse / heart), scale in
// [0.5,1] binned by 0.05, rotation U[0,2pi), position uniform with the shape
// fully inside the canvas.
DatasetSplit build_dsprites_synth(std::uint64_t seed);

DatasetSplit build_dataset(Dataset name, std::uint64_t seed,
                           const std::string& data_dir);

// --- Archive ------------------------------------------------------------------

// Binary archive, little-endian. Header: magic "THINDS1", u8 name length,
// name bytes, u64 seed, u32 count, u32 H, u32 W. Then per sample: f32 pixels
// (H*W), u8 task label, u8 rotation class (255 = absent), u8 scale class
// (255 = absent), f32 rotation_deg, f32 scale.
void save_archive(const Subset& s, Dataset name, std::uint64_t seed,
                  const std::string& path);
Subset load_archive(const std::string& path, Dataset& name,
                    std::uint64_t& seed);

// Label and factor-bin histograms plus basic pixel stats, as JSON.
nlohmann::json subset_stats(const Subset& s);

// The bin labels / continuous values backing a factor; throws ContractError
// when the subset does not carry it.
const std::vector<int>& labels_for_factor(const Subset& s, ExoFactor f);
const std::vector<float>& values_for_factor(const Subset& s, ExoFactor f);

}  // namespace thin
