#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "bussam/common.hpp"

namespace bussam {

// Binary mask, row-major, values strictly {0,1}.
struct BinaryMask {
    int h = 0, w = 0;
    std::vector<std::uint8_t> v;

    std::uint8_t at(int r, int c) const { return v[static_cast<std::size_t>(r) * w + c]; }
    std::uint8_t& at(int r, int c) { return v[static_cast<std::size_t>(r) * w + c]; }
    bool empty_mask() const {
        for (auto x : v)
            if (x) return false;
        return true;
    }
};

struct ConfusionCounts {
    std::int64_t tp = 0, tn = 0, fp = 0, fn = 0;
    std::int64_t total() const { return tp + tn + fp + fn; }
};

struct MetricsEntry {
    std::string id;
    double acc = 0, se = 0, dice = 0, iou = 0;  // percentages
    double hd = 0;                              // mm
};

struct MetricsReport {
    std::vector<MetricsEntry> per_image;
    MetricsEntry mean;  // id == "MEAN"
};

ConfusionCounts confusion(const BinaryMask& pred, const BinaryMask& gt);

// 4-connectivity boundary pixels (out-of-bounds neighbors count as background).
std::vector<std::pair<int, int>> boundary_pixels(const BinaryMask& m);

// Classical (maximum) symmetric Hausdorff distance between the boundary pixel
// sets, in mm. Caller handles empty-mask conventions.
double hausdorff(const BinaryMask& a, const BinaryMask& b, double spacing_mm);

// Acc/Se/Dice/IoU in percent plus HD in mm. Empty-mask conventions:
// both empty -> Se/Dice/IoU 100%, HD 0; exactly one empty -> ratios from the
// counts, HD = image diagonal * spacing.
MetricsEntry segmentation_metrics(const BinaryMask& pred, const BinaryMask& gt,
                                  double spacing_mm, const std::string& id = "");

MetricsEntry aggregate_mean(const std::vector<MetricsEntry>& entries);

// CSV: header `image,acc,se,dice,iou,hd_mm`, one row per image, final MEAN
// row, 4 decimal places.
std::string metrics_csv(const MetricsReport& report);

}  // namespace bussam
