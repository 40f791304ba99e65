#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "emkd/rng.hpp"
#include "emkd/serialize.hpp"
#include "emkd/tensor.hpp"

namespace emkd::data {

/// Integer class-id raster for one slice.
struct LabelMask {
    int h = 0;
    int w = 0;
    std::uint8_t num_classes = 2;
    std::vector<std::uint8_t> ids;  // row-major, each < num_classes

    LabelMask() = default;
    LabelMask(int h_, int w_, std::uint8_t classes)
        : h(h_), w(w_), num_classes(classes), ids(static_cast<std::size_t>(h_) * w_, 0) {}

    std::uint8_t at(int y, int x) const { return ids[static_cast<std::size_t>(y) * w + x]; }
    std::uint8_t& at(int y, int x) { return ids[static_cast<std::size_t>(y) * w + x]; }
};

struct WindowSpec {
    double lo = -40.0;
    double hi = 160.0;
};

/// Clamp a pseudo-HU image to [lo, hi] and map it affinely onto [0, 1].
Tensor hu_window(const Tensor& image, const WindowSpec& w);

/// Synthetic CT-like benchmark description. Intensities are pseudo-HU so the
/// usual diagnostic windows apply. With num_classes == 2 the foreground class
/// is the organ with its embedded tumors; with 3 tumors get their own class.
struct DatasetSpec {
    int image_size = 64;        // H == W, power of two
    int num_cases = 40;
    int min_slices = 2;
    int max_slices = 4;
    int num_classes = 2;        // 2 or 3
    double organ_mean = 80.0;
    double organ_std = 20.0;
    double tumor_mean = 30.0;
    double tumor_std = 20.0;
    double background_mean = -100.0;
    double background_std = 30.0;
    int min_tumors = 1;
    int max_tumors = 3;
    int min_distractors = 2;   // organ-intensity blobs outside the organ, labeled background
    int max_distractors = 4;
    double organ_radius_min = 12.0;
    double organ_radius_max = 19.0;
    double tumor_radius_min = 3.0;
    double tumor_radius_max = 6.0;
    double noise_std = 8.0;
    std::uint64_t seed = 7;
};

struct Slice {
    Tensor image;  // [H,W] pseudo-HU
    LabelMask mask;
};

struct Case {
    std::string id;
    std::vector<Slice> slices;
};

struct Dataset {
    DatasetSpec spec;
    std::vector<Case> cases;
};

/// One case, deterministic in (spec.seed, case_index). Tumors always lie
/// inside the organ.
Case synth_case(const DatasetSpec& spec, int case_index);
Dataset generate_dataset(const DatasetSpec& spec);

/// Applies element 0..7 of the dihedral group D4 (rotation by 90*k degrees,
/// then a horizontal flip when the high bit is set). Square inputs only.
Tensor apply_dihedral(const Tensor& image, int element);
LabelMask apply_dihedral(const LabelMask& mask, int element);
/// Uniformly drawn D4 element applied identically to image and mask.
void augment(Tensor& image, LabelMask& mask, Rng& rng);

/// Deterministic shuffle then k near-equal disjoint test partitions.
/// Returns (train_ids, test_ids) per fold; every id lands in exactly one
/// test set.
std::vector<std::pair<std::vector<int>, std::vector<int>>> make_folds(const std::vector<int>& case_ids, int k,
                                                                      std::uint64_t seed);

// File IO; round-trips are bit-exact. The tensor file is the record from
// serialize.hpp; the mask file is magic "EMKL", u32 version, u32 H, u32 W,
// u8 num_classes, row-major u8 payload.
void write_tensor(const std::string& path, const Tensor& t, io::Dtype dtype = io::Dtype::f64);
Tensor read_tensor(const std::string& path);
void write_mask(const std::string& path, const LabelMask& mask);
LabelMask read_mask(const std::string& path);

// Dataset directory: dataset.cfg plus case_<id>/slice_<k>.img|.msk.
void write_dataset(const Dataset& ds, const std::string& dir);
Dataset load_dataset(const std::string& dir);

DatasetSpec parse_dataset_spec(const std::string& text);
std::string format_dataset_spec(const DatasetSpec& spec);

}  // namespace emkd::data
