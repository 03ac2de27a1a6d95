#include "bussam/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <random>

namespace fs = std::filesystem;

namespace bussam {

// --- PGM ---------------------------------------------------------------------

namespace {

// Reads one whitespace-separated token, skipping '#' comments, tracking the
// byte offset for error messages.
std::string next_token(std::istream& in, std::int64_t& offset) {
    std::string tok;
    int c;
    while ((c = in.get()) != EOF) {
        ++offset;
        if (c == '#') {
            while ((c = in.get()) != EOF) {
                ++offset;
                if (c == '\n') break;
            }
            continue;
        }
        if (std::isspace(c)) {
            if (!tok.empty()) return tok;
            continue;
        }
        tok += static_cast<char>(c);
    }
    return tok;
}

[[noreturn]] void pgm_fail(const std::string& path, std::int64_t offset, const std::string& what) {
    throw DataError("malformed PGM '" + path + "' at byte offset " + std::to_string(offset) +
                    ": " + what);
}

}  // namespace

GrayImage load_pgm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open PGM file '" + path + "'");
    std::int64_t offset = 0;
    std::string magic = next_token(in, offset);
    if (magic != "P5") pgm_fail(path, 0, "expected magic 'P5', got '" + magic + "'");
    auto read_int = [&](const char* what) {
        std::int64_t at = offset;
        std::string tok = next_token(in, offset);
        try {
            std::size_t pos = 0;
            long v = std::stol(tok, &pos);
            if (pos != tok.size() || v <= 0) throw std::invalid_argument("");
            return static_cast<int>(v);
        } catch (...) {
            pgm_fail(path, at, std::string("invalid ") + what + " '" + tok + "'");
        }
    };
    const int w = read_int("width");
    const int h = read_int("height");
    const int maxval = read_int("maxval");
    if (maxval != 255)
        pgm_fail(path, offset, "maxval must be 255, got " + std::to_string(maxval));
    std::vector<std::uint8_t> bytes(static_cast<std::size_t>(w) * h);
    in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (in.gcount() != static_cast<std::streamsize>(bytes.size()))
        pgm_fail(path, offset + in.gcount(),
                 "truncated payload, expected " + std::to_string(bytes.size()) + " bytes, got " +
                     std::to_string(in.gcount()));
    GrayImage img;
    img.h = h;
    img.w = w;
    img.v.resize(bytes.size());
    for (std::size_t i = 0; i < bytes.size(); ++i) img.v[i] = static_cast<float>(bytes[i]) / 255.0f;
    return img;
}

void save_pgm(const GrayImage& img, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write PGM file '" + path + "'");
    out << "P5\n" << img.w << " " << img.h << "\n255\n";
    std::vector<std::uint8_t> bytes(img.v.size());
    for (std::size_t i = 0; i < img.v.size(); ++i) {
        float v = std::min(1.0f, std::max(0.0f, img.v[i]));
        bytes[i] = static_cast<std::uint8_t>(std::lround(v * 255.0f));
    }
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DataError("write failed for PGM file '" + path + "'");
}

BinaryMask load_mask_pgm(const std::string& path) {
    GrayImage img = load_pgm(path);
    BinaryMask m;
    m.h = img.h;
    m.w = img.w;
    m.v.resize(img.v.size());
    for (std::size_t i = 0; i < img.v.size(); ++i) m.v[i] = img.v[i] >= 0.5f ? 1 : 0;
    return m;
}

void save_mask_pgm(const BinaryMask& mask, const std::string& path) {
    GrayImage img;
    img.h = mask.h;
    img.w = mask.w;
    img.v.resize(mask.v.size());
    for (std::size_t i = 0; i < mask.v.size(); ++i) img.v[i] = mask.v[i] ? 1.0f : 0.0f;
    save_pgm(img, path);
}

// --- resampling --------------------------------------------------------------

GrayImage resize_bilinear(const GrayImage& img, int out_h, int out_w) {
    GrayImage out;
    out.h = out_h;
    out.w = out_w;
    out.v.resize(static_cast<std::size_t>(out_h) * out_w);
    const double sh = out_h > 1 ? static_cast<double>(img.h - 1) / (out_h - 1) : 0.0;
    const double sw = out_w > 1 ? static_cast<double>(img.w - 1) / (out_w - 1) : 0.0;
    for (int r = 0; r < out_h; ++r) {
        const double sy = r * sh;
        const int y0 = static_cast<int>(sy);
        const int y1 = std::min(y0 + 1, img.h - 1);
        const float fy = static_cast<float>(sy - y0);
        for (int c = 0; c < out_w; ++c) {
            const double sx = c * sw;
            const int x0 = static_cast<int>(sx);
            const int x1 = std::min(x0 + 1, img.w - 1);
            const float fx = static_cast<float>(sx - x0);
            const float top = img.at(y0, x0) + fx * (img.at(y0, x1) - img.at(y0, x0));
            const float bot = img.at(y1, x0) + fx * (img.at(y1, x1) - img.at(y1, x0));
            out.at(r, c) = top + fy * (bot - top);
        }
    }
    return out;
}

BinaryMask resize_nearest(const BinaryMask& mask, int out_h, int out_w) {
    BinaryMask out;
    out.h = out_h;
    out.w = out_w;
    out.v.resize(static_cast<std::size_t>(out_h) * out_w);
    for (int r = 0; r < out_h; ++r) {
        const int sr = std::min(mask.h - 1, static_cast<int>(std::lround(
                                                out_h > 1 ? r * static_cast<double>(mask.h - 1) /
                                                                (out_h - 1)
                                                          : 0.0)));
        for (int c = 0; c < out_w; ++c) {
            const int sc = std::min(mask.w - 1, static_cast<int>(std::lround(
                                                    out_w > 1 ? c * static_cast<double>(mask.w - 1) /
                                                                    (out_w - 1)
                                                              : 0.0)));
            out.at(r, c) = mask.at(sr, sc);
        }
    }
    return out;
}

// --- preprocess / augment ----------------------------------------------------

SamplePair preprocess(const SamplePair& pair, int target) {
    SamplePair out;
    out.id = pair.id;
    out.spacing_mm = pair.spacing_mm;
    out.image = (pair.image.h == target && pair.image.w == target)
                    ? pair.image
                    : resize_bilinear(pair.image, target, target);
    out.mask = (pair.mask.h == target && pair.mask.w == target)
                   ? pair.mask
                   : resize_nearest(pair.mask, target, target);
    double mu = 0.0;
    for (float v : out.image.v) mu += v;
    mu /= static_cast<double>(out.image.v.size());
    double var = 0.0;
    for (float v : out.image.v) var += (v - mu) * (v - mu);
    var /= static_cast<double>(out.image.v.size());
    const double sigma = std::sqrt(var) + 1e-6;
    for (float& v : out.image.v) {
        double z = (v - mu) / sigma;
        z = std::min(3.0, std::max(-3.0, z));
        v = static_cast<float>(z / 3.0);
    }
    return out;
}

SamplePair hflip(const SamplePair& pair) {
    SamplePair out = pair;
    for (int r = 0; r < out.image.h; ++r)
        std::reverse(out.image.v.begin() + static_cast<std::ptrdiff_t>(r) * out.image.w,
                     out.image.v.begin() + static_cast<std::ptrdiff_t>(r + 1) * out.image.w);
    for (int r = 0; r < out.mask.h; ++r)
        std::reverse(out.mask.v.begin() + static_cast<std::ptrdiff_t>(r) * out.mask.w,
                     out.mask.v.begin() + static_cast<std::ptrdiff_t>(r + 1) * out.mask.w);
    return out;
}

SamplePair augment(const SamplePair& pair, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> uni(0.0, 1.0);
    const int S = pair.image.h;

    const double scale = 0.8 + 0.2 * uni(rng);
    const int side = std::max(1, static_cast<int>(std::lround(scale * S)));
    const int max_off = S - side;
    const int oy = max_off > 0 ? static_cast<int>(uni(rng) * (max_off + 1)) : 0;
    const int ox = max_off > 0 ? static_cast<int>(uni(rng) * (max_off + 1)) : 0;

    SamplePair cropped;
    cropped.id = pair.id;
    cropped.spacing_mm = pair.spacing_mm;
    cropped.image.h = cropped.image.w = side;
    cropped.image.v.resize(static_cast<std::size_t>(side) * side);
    cropped.mask.h = cropped.mask.w = side;
    cropped.mask.v.resize(static_cast<std::size_t>(side) * side);
    for (int r = 0; r < side; ++r)
        for (int c = 0; c < side; ++c) {
            cropped.image.at(r, c) = pair.image.at(oy + r, ox + c);
            cropped.mask.v[static_cast<std::size_t>(r) * side + c] = pair.mask.at(oy + r, ox + c);
        }

    SamplePair out;
    out.id = pair.id;
    out.spacing_mm = pair.spacing_mm;
    out.image = resize_bilinear(cropped.image, S, S);
    out.mask = resize_nearest(cropped.mask, S, S);
    if (uni(rng) < 0.5) out = hflip(out);
    return out;
}

// --- split -------------------------------------------------------------------

DatasetSplit split_dataset(const std::vector<LabeledId>& ids, std::uint64_t seed) {
    std::map<std::string, std::vector<std::string>> by_class;
    for (const auto& s : ids) by_class[s.cls].push_back(s.id);
    DatasetSplit split;
    for (auto& [cls, members] : by_class) {
        std::sort(members.begin(), members.end());
        std::mt19937_64 rng(seed ^ fnv1a(cls));
        std::shuffle(members.begin(), members.end(), rng);
        const int n = static_cast<int>(members.size());
        if (n < 5)
            std::cerr << "warning: class '" << cls << "' has only " << n
                      << " samples; 4:1 split is best-effort\n";
        int n_test = n / 5;
        if (n_test == 0 && n >= 2) n_test = 1;
        for (int i = 0; i < n; ++i)
            (i < n - n_test ? split.train_ids : split.test_ids).push_back(members[i]);
    }
    std::sort(split.train_ids.begin(), split.train_ids.end());
    std::sort(split.test_ids.begin(), split.test_ids.end());
    return split;
}

void write_split_manifest(const DatasetSplit& split, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write split manifest '" + path + "'");
    for (const auto& id : split.train_ids) out << "train " << id << "\n";
    for (const auto& id : split.test_ids) out << "test " << id << "\n";
}

DatasetSplit read_split_manifest(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open split manifest '" + path + "'");
    DatasetSplit split;
    std::string kind, id;
    while (in >> kind >> id) {
        if (kind == "train")
            split.train_ids.push_back(id);
        else if (kind == "test")
            split.test_ids.push_back(id);
        else
            throw DataError("split manifest '" + path + "': unknown kind '" + kind + "'");
    }
    return split;
}

// --- synthetic corpus --------------------------------------------------------

SamplePair synth_sample(int size, std::uint64_t seed, const std::string& id) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> uni(0.0, 1.0);

    // lesion geometry
    const double cy = (0.3 + 0.4 * uni(rng)) * size;
    const double cx = (0.3 + 0.4 * uni(rng)) * size;
    const double ay = (0.12 + 0.10 * uni(rng)) * size;
    const double ax = (0.12 + 0.10 * uni(rng)) * size;
    const double theta = uni(rng) * 3.14159265358979;
    const double ct = std::cos(theta), st = std::sin(theta);

    // low-frequency background gain from a random coarse grid
    GrayImage coarse;
    coarse.h = coarse.w = 4;
    coarse.v.resize(16);
    for (auto& v : coarse.v) v = static_cast<float>(0.5 + 0.25 * uni(rng));
    GrayImage gain = resize_bilinear(coarse, size, size);

    SamplePair out;
    out.id = id;
    out.image.h = out.image.w = size;
    out.image.v.resize(static_cast<std::size_t>(size) * size);
    out.mask.h = out.mask.w = size;
    out.mask.v.resize(out.image.v.size());

    for (int r = 0; r < size; ++r)
        for (int c = 0; c < size; ++c) {
            const double dy = (r - cy), dx = (c - cx);
            const double u = (ct * dx + st * dy) / ax;
            const double w = (-st * dx + ct * dy) / ay;
            const double rho = u * u + w * w;  // <1 inside the ellipse
            const bool inside = rho < 1.0;
            out.mask.v[static_cast<std::size_t>(r) * size + c] = inside ? 1 : 0;

            double v = gain.at(r, c);
            // smooth intensity dip over the lesion with a soft rim
            const double dip = 0.65 / (1.0 + std::exp(8.0 * (rho - 1.0)));
            v *= (1.0 - dip);
            // acoustic-shadow-like darkening below the lesion
            if (r > cy + ay && std::abs(dx) < ax) v *= 0.85;
            // multiplicative speckle
            v *= 0.65 + 0.7 * uni(rng);
            out.image.at(r, c) = static_cast<float>(std::min(1.0, std::max(0.0, v)));
        }
    return out;
}

std::vector<std::string> synth_dataset(int count, int size, std::uint64_t seed,
                                       const std::string& out_dir) {
    if (count < 1) throw ConfigError("synth_dataset: count must be >= 1");
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (!fs::is_directory(out_dir))
        throw DataError("cannot create output directory '" + out_dir + "'");
    std::vector<std::string> ids;
    for (int i = 0; i < count; ++i) {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "synth_%03d", i);
        const std::string id = buf;
        SamplePair s = synth_sample(size, seed * 0x9e3779b97f4a7c15ull + i, id);
        save_pgm(s.image, (fs::path(out_dir) / (id + "_img.pgm")).string());
        save_mask_pgm(s.mask, (fs::path(out_dir) / (id + "_mask.pgm")).string());
        ids.push_back(id);
    }
    return ids;
}

// --- dataset directory -------------------------------------------------------

std::vector<std::string> list_dataset_ids(const std::string& dir) {
    if (!fs::is_directory(dir)) throw DataError("not a directory: '" + dir + "'");
    std::vector<std::string> ids;
    const std::string suffix = "_img.pgm";
    for (const auto& entry : fs::directory_iterator(dir)) {
        const std::string name = entry.path().filename().string();
        if (name.size() > suffix.size() &&
            name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0)
            ids.push_back(name.substr(0, name.size() - suffix.size()));
    }
    std::sort(ids.begin(), ids.end());
    return ids;
}

SamplePair load_sample(const std::string& dir, const std::string& id) {
    SamplePair s;
    s.id = id;
    s.image = load_pgm((fs::path(dir) / (id + "_img.pgm")).string());
    s.mask = load_mask_pgm((fs::path(dir) / (id + "_mask.pgm")).string());
    if (s.image.h != s.mask.h || s.image.w != s.mask.w)
        throw DataError("sample '" + id + "': image and mask sizes differ");
    return s;
}

}  // namespace bussam
