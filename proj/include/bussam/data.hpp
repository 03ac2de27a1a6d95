#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "bussam/metrics.hpp"

namespace bussam {

// Grayscale image, row-major, values in [0,1] as loaded (preprocessing maps
// them to standardized values).
struct GrayImage {
    int h = 0, w = 0;
    std::vector<float> v;

    float at(int r, int c) const { return v[static_cast<std::size_t>(r) * w + c]; }
    float& at(int r, int c) { return v[static_cast<std::size_t>(r) * w + c]; }
};

struct SamplePair {
    GrayImage image;
    BinaryMask mask;
    std::string id;
    double spacing_mm = 1.0;
};

// --- PGM I/O (binary P5, maxval 255) ---------------------------------------

GrayImage load_pgm(const std::string& path);
void save_pgm(const GrayImage& img, const std::string& path);

// Masks use 0/255 on disk, {0,1} in memory.
BinaryMask load_mask_pgm(const std::string& path);
void save_mask_pgm(const BinaryMask& mask, const std::string& path);

// --- resampling helpers -----------------------------------------------------

GrayImage resize_bilinear(const GrayImage& img, int out_h, int out_w);
BinaryMask resize_nearest(const BinaryMask& mask, int out_h, int out_w);

// --- preprocessing & augmentation -------------------------------------------

// Resize to target x target (bilinear image, nearest mask), then per-image
// standardization: z-score with a sigma guard, clamped to [-3,3] and scaled
// into [-1,1]. A constant image maps to all zeros.
SamplePair preprocess(const SamplePair& pair, int target);

SamplePair hflip(const SamplePair& pair);

// Seeded random crop (scale 0.8-1.0, resized back) and horizontal flip with
// p = 0.5. The same geometric transform is applied to image and mask.
SamplePair augment(const SamplePair& pair, std::uint64_t seed);

// --- split ------------------------------------------------------------------

struct LabeledId {
    std::string id;
    std::string cls;  // "benign"/"malignant"; synthetic data uses one class
};

struct DatasetSplit {
    std::vector<std::string> train_ids;
    std::vector<std::string> test_ids;
};

// Deterministic per-class 4:1 split. Classes with fewer than 5 samples get a
// best-effort split and a warning on stderr.
DatasetSplit split_dataset(const std::vector<LabeledId>& ids, std::uint64_t seed);

void write_split_manifest(const DatasetSplit& split, const std::string& path);
DatasetSplit read_split_manifest(const std::string& path);

// --- synthetic lesion corpus ------------------------------------------------

// Dark elliptical lesion (random center/axes/rotation, intensity dip) over a
// speckle-textured background with mild shadowing; mask = ellipse interior.
SamplePair synth_sample(int size, std::uint64_t seed, const std::string& id);

// Writes `<id>_img.pgm` / `<id>_mask.pgm` pairs (ids synth_000, synth_001, ...).
std::vector<std::string> synth_dataset(int count, int size, std::uint64_t seed,
                                       const std::string& out_dir);

// --- dataset directory access -----------------------------------------------

std::vector<std::string> list_dataset_ids(const std::string& dir);
SamplePair load_sample(const std::string& dir, const std::string& id);

}  // namespace bussam
