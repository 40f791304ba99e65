#include "emkd/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "emkd/error.hpp"

namespace fs = std::filesystem;

namespace emkd::data {

Tensor hu_window(const Tensor& image, const WindowSpec& w) {
    if (!(w.lo < w.hi)) {
        throw ValueError("hu_window: lo must be < hi");
    }
    const double span = w.hi - w.lo;
    std::vector<double> out = image.data();
    for (double& v : out) {
        v = (std::clamp(v, w.lo, w.hi) - w.lo) / span;
    }
    return Tensor::from_data(image.shape(), std::move(out), false);
}

// ---------------------------------------------------------------------------
// Synthetic cases

namespace {

struct Ellipse {
    double cx, cy, rx, ry;

    bool contains(double x, double y) const {
        const double dx = (x - cx) / rx;
        const double dy = (y - cy) / ry;
        return dx * dx + dy * dy <= 1.0;
    }
};

void check_spec(const DatasetSpec& spec) {
    if (spec.image_size < 8 || (spec.image_size & (spec.image_size - 1)) != 0) {
        throw ConfigError("dataset spec: image_size must be a power of two >= 8");
    }
    if (spec.num_classes != 2 && spec.num_classes != 3) {
        throw ConfigError("dataset spec: num_classes must be 2 or 3");
    }
    if (spec.num_cases < 1 || spec.min_slices < 1 || spec.max_slices < spec.min_slices) {
        throw ConfigError("dataset spec: bad case/slice counts");
    }
    if (spec.min_tumors < 0 || spec.max_tumors < spec.min_tumors) {
        throw ConfigError("dataset spec: bad tumor count range");
    }
    if (spec.min_distractors < 0 || spec.max_distractors < spec.min_distractors) {
        throw ConfigError("dataset spec: bad distractor count range");
    }
    if (spec.tumor_radius_max >= spec.organ_radius_min) {
        throw ConfigError("dataset spec: infeasible geometry, tumor radius reaches organ radius");
    }
    if (spec.organ_radius_max * 2.0 >= spec.image_size) {
        throw ConfigError("dataset spec: organ does not fit the image");
    }
}

}  // namespace

Case synth_case(const DatasetSpec& spec, int case_index) {
    check_spec(spec);
    Rng rng(Rng::derive(spec.seed, 0x1000u + static_cast<std::uint64_t>(case_index)));
    const int size = spec.image_size;

    const int slice_count = rng.uniform_int(spec.min_slices, spec.max_slices);
    Ellipse organ;
    organ.cx = size * rng.uniform(0.42, 0.58);
    organ.cy = size * rng.uniform(0.42, 0.58);
    organ.rx = rng.uniform(spec.organ_radius_min, spec.organ_radius_max);
    organ.ry = rng.uniform(spec.organ_radius_min, spec.organ_radius_max);

    const int tumor_count = rng.uniform_int(spec.min_tumors, spec.max_tumors);
    std::vector<Ellipse> tumors;
    for (int t = 0; t < tumor_count; ++t) {
        Ellipse tumor;
        tumor.rx = rng.uniform(spec.tumor_radius_min, spec.tumor_radius_max);
        tumor.ry = rng.uniform(spec.tumor_radius_min, spec.tumor_radius_max);
        bool placed = false;
        for (int attempt = 0; attempt < 64 && !placed; ++attempt) {
            tumor.cx = organ.cx + rng.uniform(-1.0, 1.0) * (organ.rx - tumor.rx);
            tumor.cy = organ.cy + rng.uniform(-1.0, 1.0) * (organ.ry - tumor.ry);
            placed = true;
            for (int a = 0; a < 8; ++a) {
                const double ang = a * 0.78539816339744830962;
                placed = placed && organ.contains(tumor.cx + tumor.rx * std::cos(ang),
                                                  tumor.cy + tumor.ry * std::sin(ang));
            }
        }
        if (!placed) {
            tumor.cx = organ.cx;
            tumor.cy = organ.cy;
        }
        tumors.push_back(tumor);
    }

    // Distractors share the organ's intensity but sit in the background and
    // keep the background label; only context separates them from the organ.
    const int distractor_count = rng.uniform_int(spec.min_distractors, spec.max_distractors);
    std::vector<Ellipse> distractors;
    for (int d = 0; d < distractor_count; ++d) {
        Ellipse blob;
        blob.rx = rng.uniform(spec.tumor_radius_min, spec.tumor_radius_max);
        blob.ry = rng.uniform(spec.tumor_radius_min, spec.tumor_radius_max);
        bool placed = false;
        for (int attempt = 0; attempt < 64 && !placed; ++attempt) {
            blob.cx = rng.uniform(blob.rx + 1.0, size - blob.rx - 1.0);
            blob.cy = rng.uniform(blob.ry + 1.0, size - blob.ry - 1.0);
            // keep clear of the organ so labels stay unambiguous
            const double dx = (blob.cx - organ.cx) / (organ.rx + blob.rx + 2.0);
            const double dy = (blob.cy - organ.cy) / (organ.ry + blob.ry + 2.0);
            placed = dx * dx + dy * dy > 1.0;
        }
        if (placed) {
            distractors.push_back(blob);
        }
    }

    Case out;
    {
        char buf[16];
        std::snprintf(buf, sizeof(buf), "case_%03d", case_index);
        out.id = buf;
    }
    for (int s = 0; s < slice_count; ++s) {
        // Slight per-slice jitter so a case behaves like a coherent stack.
        Ellipse org = organ;
        org.cx += rng.uniform(-1.0, 1.0);
        org.cy += rng.uniform(-1.0, 1.0);
        org.rx *= rng.uniform(0.95, 1.05);
        org.ry *= rng.uniform(0.95, 1.05);
        std::vector<Ellipse> tum = tumors;
        for (auto& t : tum) {
            t.cx += rng.uniform(-1.0, 1.0);
            t.cy += rng.uniform(-1.0, 1.0);
        }
        std::vector<Ellipse> blobs = distractors;
        for (auto& b : blobs) {
            b.cx += rng.uniform(-1.0, 1.0);
            b.cy += rng.uniform(-1.0, 1.0);
        }

        LabelMask mask(size, size, static_cast<std::uint8_t>(spec.num_classes));
        std::vector<double> image(static_cast<std::size_t>(size) * size);
        for (int y = 0; y < size; ++y) {
            for (int x = 0; x < size; ++x) {
                const bool in_organ = org.contains(x + 0.5, y + 0.5);
                bool in_tumor = false;
                if (in_organ) {  // tumors are clipped to the organ
                    for (const auto& t : tum) {
                        in_tumor = in_tumor || t.contains(x + 0.5, y + 0.5);
                    }
                }
                bool in_distractor = false;
                if (!in_organ) {
                    for (const auto& b : blobs) {
                        in_distractor = in_distractor || b.contains(x + 0.5, y + 0.5);
                    }
                }
                double mean = spec.background_mean, std = spec.background_std;
                if (in_tumor) {
                    mean = spec.tumor_mean;
                    std = spec.tumor_std;
                } else if (in_organ || in_distractor) {
                    mean = spec.organ_mean;
                    std = spec.organ_std;
                }
                image[static_cast<std::size_t>(y) * size + x] = rng.normal(mean, std) + rng.normal(0.0, spec.noise_std);
                std::uint8_t id = 0;
                if (spec.num_classes == 3) {
                    id = in_tumor ? 2 : (in_organ ? 1 : 0);
                } else {
                    id = in_organ ? 1 : 0;
                }
                mask.at(y, x) = id;
            }
        }
        out.slices.push_back(Slice{Tensor::from_data({size, size}, std::move(image), false), std::move(mask)});
    }
    return out;
}

Dataset generate_dataset(const DatasetSpec& spec) {
    check_spec(spec);
    Dataset ds;
    ds.spec = spec;
    for (int i = 0; i < spec.num_cases; ++i) {
        ds.cases.push_back(synth_case(spec, i));
    }
    return ds;
}

// ---------------------------------------------------------------------------
// Augmentation

namespace {

// Destination (y, x) for a source pixel under rotation by 90*k then optional
// horizontal flip, on an n x n grid.
inline void d4_map(int y, int x, int n, int element, int& oy, int& ox) {
    const int rot = element & 3;
    switch (rot) {
        case 0: oy = y; ox = x; break;
        case 1: oy = x; ox = n - 1 - y; break;           // 90 deg clockwise
        case 2: oy = n - 1 - y; ox = n - 1 - x; break;   // 180 deg
        default: oy = n - 1 - x; ox = y; break;          // 270 deg
    }
    if (element & 4) {
        ox = n - 1 - ox;
    }
}

}  // namespace

Tensor apply_dihedral(const Tensor& image, int element) {
    if (image.rank() != 2 || image.extent(0) != image.extent(1)) {
        throw ValueError("apply_dihedral: square rank-2 image required");
    }
    if (element < 0 || element > 7) {
        throw ValueError("apply_dihedral: element must be 0..7");
    }
    const int n = image.extent(0);
    std::vector<double> out(image.numel());
    const auto& src = image.data();
    for (int y = 0; y < n; ++y) {
        for (int x = 0; x < n; ++x) {
            int oy, ox;
            d4_map(y, x, n, element, oy, ox);
            out[static_cast<std::size_t>(oy) * n + ox] = src[static_cast<std::size_t>(y) * n + x];
        }
    }
    return Tensor::from_data(image.shape(), std::move(out), false);
}

LabelMask apply_dihedral(const LabelMask& mask, int element) {
    if (mask.h != mask.w) {
        throw ValueError("apply_dihedral: square mask required");
    }
    if (element < 0 || element > 7) {
        throw ValueError("apply_dihedral: element must be 0..7");
    }
    LabelMask out(mask.h, mask.w, mask.num_classes);
    for (int y = 0; y < mask.h; ++y) {
        for (int x = 0; x < mask.w; ++x) {
            int oy, ox;
            d4_map(y, x, mask.h, element, oy, ox);
            out.at(oy, ox) = mask.at(y, x);
        }
    }
    return out;
}

void augment(Tensor& image, LabelMask& mask, Rng& rng) {
    const int element = rng.uniform_int(0, 7);
    image = apply_dihedral(image, element);
    mask = apply_dihedral(mask, element);
}

// ---------------------------------------------------------------------------
// Folds

std::vector<std::pair<std::vector<int>, std::vector<int>>> make_folds(const std::vector<int>& case_ids, int k,
                                                                      std::uint64_t seed) {
    if (k < 2) {
        throw ValueError("make_folds: k must be >= 2");
    }
    if (static_cast<int>(case_ids.size()) < k) {
        throw ValueError("make_folds: more folds than cases");
    }
    std::vector<int> ids = case_ids;
    Rng rng(Rng::derive(seed, 0xF01Du));
    shuffle(ids, rng);

    std::vector<std::pair<std::vector<int>, std::vector<int>>> folds(static_cast<std::size_t>(k));
    const std::size_t n = ids.size();
    const std::size_t base = n / static_cast<std::size_t>(k);
    const std::size_t rem = n % static_cast<std::size_t>(k);
    std::size_t begin = 0;
    for (int f = 0; f < k; ++f) {
        const std::size_t len = base + (static_cast<std::size_t>(f) < rem ? 1 : 0);
        auto& [train, test] = folds[static_cast<std::size_t>(f)];
        for (std::size_t i = 0; i < n; ++i) {
            if (i >= begin && i < begin + len) {
                test.push_back(ids[i]);
            } else {
                train.push_back(ids[i]);
            }
        }
        std::sort(train.begin(), train.end());
        std::sort(test.begin(), test.end());
        begin += len;
    }
    return folds;
}

// ---------------------------------------------------------------------------
// File IO

void write_tensor(const std::string& path, const Tensor& t, io::Dtype dtype) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw DataError("cannot open for writing: " + path);
    }
    io::write_tensor_record(out, t, dtype);
}

Tensor read_tensor(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw DataError("cannot open for reading: " + path);
    }
    return io::read_tensor_record(in);
}

void write_mask(const std::string& path, const LabelMask& mask) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw DataError("cannot open for writing: " + path);
    }
    out.write("EMKL", 4);
    io::write_u32(out, 1);
    io::write_u32(out, static_cast<std::uint32_t>(mask.h));
    io::write_u32(out, static_cast<std::uint32_t>(mask.w));
    const char classes = static_cast<char>(mask.num_classes);
    out.write(&classes, 1);
    out.write(reinterpret_cast<const char*>(mask.ids.data()), static_cast<std::streamsize>(mask.ids.size()));
}

LabelMask read_mask(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw DataError("cannot open for reading: " + path);
    }
    char magic[4];
    io::read_exact(in, magic, 4, 0, "mask magic");
    if (std::string(magic, 4) != "EMKL") {
        throw FormatError("bad mask magic at byte offset 0 in " + path);
    }
    const std::uint32_t version = io::read_u32(in, 4, "mask version");
    if (version != 1) {
        throw FormatError("unsupported mask version at byte offset 4 in " + path);
    }
    const std::uint32_t h = io::read_u32(in, 8, "mask height");
    const std::uint32_t w = io::read_u32(in, 12, "mask width");
    char classes;
    io::read_exact(in, &classes, 1, 16, "mask class count");
    if (classes < 2) {
        throw FormatError("mask class count must be >= 2 at byte offset 16 in " + path);
    }
    LabelMask mask(static_cast<int>(h), static_cast<int>(w), static_cast<std::uint8_t>(classes));
    io::read_exact(in, reinterpret_cast<char*>(mask.ids.data()), mask.ids.size(), 17, "mask payload");
    for (std::size_t i = 0; i < mask.ids.size(); ++i) {
        if (mask.ids[i] >= mask.num_classes) {
            throw FormatError("mask class id " + std::to_string(int(mask.ids[i])) + " out of range at byte offset " +
                              std::to_string(17 + i) + " in " + path);
        }
    }
    return mask;
}

// ---------------------------------------------------------------------------
// Dataset spec text and directory layout

namespace {

std::map<std::string, std::string> parse_kv(const std::string& text) {
    std::map<std::string, std::string> kv;
    std::istringstream in(text);
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const auto hash = line.find('#');
        if (hash != std::string::npos) {
            line.erase(hash);
        }
        const auto strip = [](std::string s) {
            const auto b = s.find_first_not_of(" \t\r");
            const auto e = s.find_last_not_of(" \t\r");
            return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
        };
        const std::string stripped = strip(line);
        if (stripped.empty()) {
            continue;
        }
        const auto eq = stripped.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("expected 'key = value' on line " + std::to_string(line_no));
        }
        kv[strip(stripped.substr(0, eq))] = strip(stripped.substr(eq + 1));
    }
    return kv;
}

}  // namespace

DatasetSpec parse_dataset_spec(const std::string& text) {
    DatasetSpec spec;
    for (const auto& [key, value] : parse_kv(text)) {
        if (key == "image_size") spec.image_size = std::stoi(value);
        else if (key == "num_cases") spec.num_cases = std::stoi(value);
        else if (key == "min_slices") spec.min_slices = std::stoi(value);
        else if (key == "max_slices") spec.max_slices = std::stoi(value);
        else if (key == "num_classes") spec.num_classes = std::stoi(value);
        else if (key == "organ_mean") spec.organ_mean = std::stod(value);
        else if (key == "organ_std") spec.organ_std = std::stod(value);
        else if (key == "tumor_mean") spec.tumor_mean = std::stod(value);
        else if (key == "tumor_std") spec.tumor_std = std::stod(value);
        else if (key == "background_mean") spec.background_mean = std::stod(value);
        else if (key == "background_std") spec.background_std = std::stod(value);
        else if (key == "min_tumors") spec.min_tumors = std::stoi(value);
        else if (key == "max_tumors") spec.max_tumors = std::stoi(value);
        else if (key == "min_distractors") spec.min_distractors = std::stoi(value);
        else if (key == "max_distractors") spec.max_distractors = std::stoi(value);
        else if (key == "organ_radius_min") spec.organ_radius_min = std::stod(value);
        else if (key == "organ_radius_max") spec.organ_radius_max = std::stod(value);
        else if (key == "tumor_radius_min") spec.tumor_radius_min = std::stod(value);
        else if (key == "tumor_radius_max") spec.tumor_radius_max = std::stod(value);
        else if (key == "noise_std") spec.noise_std = std::stod(value);
        else if (key == "seed") spec.seed = std::stoull(value);
        else throw ConfigError("unknown dataset spec key: " + key);
    }
    check_spec(spec);
    return spec;
}

std::string format_dataset_spec(const DatasetSpec& spec) {
    std::ostringstream out;
    out.precision(17);
    out << "image_size = " << spec.image_size << "\n"
        << "num_cases = " << spec.num_cases << "\n"
        << "min_slices = " << spec.min_slices << "\n"
        << "max_slices = " << spec.max_slices << "\n"
        << "num_classes = " << spec.num_classes << "\n"
        << "organ_mean = " << spec.organ_mean << "\n"
        << "organ_std = " << spec.organ_std << "\n"
        << "tumor_mean = " << spec.tumor_mean << "\n"
        << "tumor_std = " << spec.tumor_std << "\n"
        << "background_mean = " << spec.background_mean << "\n"
        << "background_std = " << spec.background_std << "\n"
        << "min_tumors = " << spec.min_tumors << "\n"
        << "max_tumors = " << spec.max_tumors << "\n"
        << "min_distractors = " << spec.min_distractors << "\n"
        << "max_distractors = " << spec.max_distractors << "\n"
        << "organ_radius_min = " << spec.organ_radius_min << "\n"
        << "organ_radius_max = " << spec.organ_radius_max << "\n"
        << "tumor_radius_min = " << spec.tumor_radius_min << "\n"
        << "tumor_radius_max = " << spec.tumor_radius_max << "\n"
        << "noise_std = " << spec.noise_std << "\n"
        << "seed = " << spec.seed << "\n";
    return out.str();
}

void write_dataset(const Dataset& ds, const std::string& dir) {
    fs::create_directories(dir);
    {
        std::ofstream cfg(fs::path(dir) / "dataset.cfg", std::ios::binary);
        if (!cfg) {
            throw DataError("cannot write dataset.cfg under " + dir);
        }
        cfg << format_dataset_spec(ds.spec);
    }
    for (const auto& c : ds.cases) {
        const fs::path case_dir = fs::path(dir) / c.id;
        fs::create_directories(case_dir);
        for (std::size_t s = 0; s < c.slices.size(); ++s) {
            write_tensor((case_dir / ("slice_" + std::to_string(s) + ".img")).string(), c.slices[s].image);
            write_mask((case_dir / ("slice_" + std::to_string(s) + ".msk")).string(), c.slices[s].mask);
        }
    }
}

Dataset load_dataset(const std::string& dir) {
    Dataset ds;
    {
        std::ifstream cfg(fs::path(dir) / "dataset.cfg", std::ios::binary);
        if (!cfg) {
            throw DataError("missing dataset.cfg under " + dir);
        }
        std::ostringstream text;
        text << cfg.rdbuf();
        ds.spec = parse_dataset_spec(text.str());
    }
    std::vector<std::string> case_dirs;
    for (const auto& entry : fs::directory_iterator(dir)) {
        if (entry.is_directory() && entry.path().filename().string().rfind("case_", 0) == 0) {
            case_dirs.push_back(entry.path().string());
        }
    }
    std::sort(case_dirs.begin(), case_dirs.end());
    for (const auto& case_dir : case_dirs) {
        Case c;
        c.id = fs::path(case_dir).filename().string();
        for (std::size_t s = 0;; ++s) {
            const fs::path img = fs::path(case_dir) / ("slice_" + std::to_string(s) + ".img");
            const fs::path msk = fs::path(case_dir) / ("slice_" + std::to_string(s) + ".msk");
            if (!fs::exists(img)) {
                break;
            }
            c.slices.push_back(Slice{read_tensor(img.string()), read_mask(msk.string())});
        }
        if (c.slices.empty()) {
            throw DataError("case directory without slices: " + case_dir);
        }
        ds.cases.push_back(std::move(c));
    }
    if (ds.cases.empty()) {
        throw DataError("no cases under " + dir);
    }
    return ds;
}

}  // namespace emkd::data
