#include "bussam/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

namespace bussam {

ConfusionCounts confusion(const BinaryMask& pred, const BinaryMask& gt) {
    if (pred.h != gt.h || pred.w != gt.w)
        throw UsageError("confusion: mask shapes differ");
    ConfusionCounts c;
    for (std::size_t i = 0; i < pred.v.size(); ++i) {
        if (pred.v[i] && gt.v[i])
            ++c.tp;
        else if (!pred.v[i] && !gt.v[i])
            ++c.tn;
        else if (pred.v[i])
            ++c.fp;
        else
            ++c.fn;
    }
    return c;
}

std::vector<std::pair<int, int>> boundary_pixels(const BinaryMask& m) {
    std::vector<std::pair<int, int>> out;
    auto bg = [&](int r, int c) {
        return r < 0 || r >= m.h || c < 0 || c >= m.w || !m.at(r, c);
    };
    for (int r = 0; r < m.h; ++r)
        for (int c = 0; c < m.w; ++c)
            if (m.at(r, c) && (bg(r - 1, c) || bg(r + 1, c) || bg(r, c - 1) || bg(r, c + 1)))
                out.emplace_back(r, c);
    return out;
}

namespace {

double directed_hd_sq(const std::vector<std::pair<int, int>>& from,
                      const std::vector<std::pair<int, int>>& to) {
    double worst = 0.0;
    for (const auto& [r, c] : from) {
        double best = std::numeric_limits<double>::infinity();
        for (const auto& [r2, c2] : to) {
            const double dr = r - r2, dc = c - c2;
            const double d = dr * dr + dc * dc;
            if (d < best) {
                best = d;
                if (best <= worst) break;  // cannot raise the max
            }
        }
        worst = std::max(worst, best);
    }
    return worst;
}

}  // namespace

double hausdorff(const BinaryMask& a, const BinaryMask& b, double spacing_mm) {
    auto ba = boundary_pixels(a);
    auto bb = boundary_pixels(b);
    if (ba.empty() || bb.empty())
        throw UsageError("hausdorff: empty boundary set (caller must handle empty masks)");
    const double d2 = std::max(directed_hd_sq(ba, bb), directed_hd_sq(bb, ba));
    return std::sqrt(d2) * spacing_mm;
}

MetricsEntry segmentation_metrics(const BinaryMask& pred, const BinaryMask& gt,
                                  double spacing_mm, const std::string& id) {
    if (pred.h != gt.h || pred.w != gt.w)
        throw UsageError("segmentation_metrics: mask shapes differ");
    if (!(spacing_mm > 0.0)) throw UsageError("segmentation_metrics: spacing must be > 0");
    const ConfusionCounts c = confusion(pred, gt);
    MetricsEntry e;
    e.id = id;
    e.acc = 100.0 * static_cast<double>(c.tp + c.tn) / static_cast<double>(c.total());

    const bool pred_empty = pred.empty_mask();
    const bool gt_empty = gt.empty_mask();
    if (pred_empty && gt_empty) {
        e.se = e.dice = e.iou = 100.0;
        e.hd = 0.0;
        return e;
    }
    e.se = c.tp + c.fn > 0 ? 100.0 * static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn)
                           : 0.0;
    e.dice = 100.0 * 2.0 * static_cast<double>(c.tp) /
             static_cast<double>(2 * c.tp + c.fp + c.fn);
    e.iou = 100.0 * static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fp + c.fn);
    if (pred_empty || gt_empty) {
        const double diag = std::sqrt(static_cast<double>(pred.h - 1) * (pred.h - 1) +
                                      static_cast<double>(pred.w - 1) * (pred.w - 1));
        e.hd = diag * spacing_mm;
    } else {
        e.hd = hausdorff(pred, gt, spacing_mm);
    }
    return e;
}

MetricsEntry aggregate_mean(const std::vector<MetricsEntry>& entries) {
    MetricsEntry m;
    m.id = "MEAN";
    if (entries.empty()) return m;
    for (const auto& e : entries) {
        m.acc += e.acc;
        m.se += e.se;
        m.dice += e.dice;
        m.iou += e.iou;
        m.hd += e.hd;
    }
    const double n = static_cast<double>(entries.size());
    m.acc /= n;
    m.se /= n;
    m.dice /= n;
    m.iou /= n;
    m.hd /= n;
    return m;
}

std::string metrics_csv(const MetricsReport& report) {
    std::string out = "image,acc,se,dice,iou,hd_mm\n";
    char buf[256];
    auto row = [&](const MetricsEntry& e) {
        std::snprintf(buf, sizeof(buf), "%s,%.4f,%.4f,%.4f,%.4f,%.4f\n", e.id.c_str(), e.acc,
                      e.se, e.dice, e.iou, e.hd);
        out += buf;
    };
    for (const auto& e : report.per_image) row(e);
    row(report.mean);
    return out;
}

}  // namespace bussam
