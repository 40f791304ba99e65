#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>

#include "emkd/data.hpp"
#include "emkd/distill.hpp"
#include "emkd/error.hpp"
#include "emkd/metrics.hpp"

using namespace emkd;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const char* tag) {
    const fs::path dir = fs::temp_directory_path() / (std::string("emkd_test_") + tag);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

}  // namespace

TEST_CASE("hu_window endpoints, midpoint and the liver window") {
    const data::WindowSpec w{-40.0, 160.0};
    const Tensor img = Tensor::from_data({1, 3}, {-40.0, 160.0, 60.0});
    const Tensor out = data::hu_window(img, w);
    REQUIRE(out.data()[0] == 0.0);
    REQUIRE(out.data()[1] == 1.0);
    REQUIRE(out.data()[2] == 0.5);  // liver window midpoint

    const Tensor mid = data::hu_window(Tensor::from_data({1, 1}, {(w.lo + w.hi) / 2.0}), w);
    REQUIRE(mid.data()[0] == 0.5);

    const Tensor clamped = data::hu_window(Tensor::from_data({1, 2}, {-500.0, 500.0}), w);
    REQUIRE(clamped.data()[0] == 0.0);
    REQUIRE(clamped.data()[1] == 1.0);

    REQUIRE_THROWS_AS(data::hu_window(img, data::WindowSpec{10.0, 10.0}), ValueError);
}

TEST_CASE("synth_case is deterministic and respects the class alphabet") {
    data::DatasetSpec spec;
    spec.num_cases = 4;

    const data::Case a = data::synth_case(spec, 2);
    const data::Case b = data::synth_case(spec, 2);
    REQUIRE(a.slices.size() == b.slices.size());
    for (std::size_t s = 0; s < a.slices.size(); ++s) {
        REQUIRE(a.slices[s].image.data() == b.slices[s].image.data());
        REQUIRE(a.slices[s].mask.ids == b.slices[s].mask.ids);
    }

    for (const auto& slice : a.slices) {
        for (auto id : slice.mask.ids) {
            REQUIRE(id <= 1);  // binary mode uses only {0, 1}
        }
    }

    const data::Case c = data::synth_case(spec, 3);
    REQUIRE(c.slices.front().image.data() != a.slices.front().image.data());
}

TEST_CASE("three-class tumors stay inside the organ") {
    data::DatasetSpec spec;
    spec.num_classes = 3;
    spec.num_cases = 6;
    for (int ci = 0; ci < spec.num_cases; ++ci) {
        const data::Case c = data::synth_case(spec, ci);
        for (const auto& slice : c.slices) {
            for (int y = 0; y < slice.mask.h; ++y) {
                for (int x = 0; x < slice.mask.w; ++x) {
                    if (slice.mask.at(y, x) == 2) {
                        // tumor pixels exist only where the organ was drawn
                        bool neighbor_organ = false;
                        for (int dy = -1; dy <= 1 && !neighbor_organ; ++dy) {
                            for (int dx = -1; dx <= 1 && !neighbor_organ; ++dx) {
                                const int yy = y + dy, xx = x + dx;
                                if (yy >= 0 && yy < slice.mask.h && xx >= 0 && xx < slice.mask.w) {
                                    neighbor_organ = slice.mask.at(yy, xx) >= 1;
                                }
                            }
                        }
                        REQUIRE(neighbor_organ);
                    }
                }
            }
        }
    }
}

TEST_CASE("infeasible geometry is rejected") {
    data::DatasetSpec spec;
    spec.tumor_radius_max = spec.organ_radius_min;
    REQUIRE_THROWS_AS(data::synth_case(spec, 0), ConfigError);
}

TEST_CASE("the default binary task defeats constant predictors") {
    // Construction statistic: an all-foreground predictor scores Dice < 0.5
    // per case, so the task cannot be solved without looking at the image.
    const data::Dataset ds = data::generate_dataset(data::DatasetSpec{});
    for (const auto& c : ds.cases) {
        const int slices = static_cast<int>(c.slices.size());
        const int h = c.slices.front().mask.h;
        const int w = c.slices.front().mask.w;
        metrics::CaseVolume all(c.id, slices, h, w), truth(c.id, slices, h, w);
        for (int s = 0; s < slices; ++s) {
            for (int j = 0; j < h * w; ++j) {
                all.voxels[static_cast<std::size_t>(s) * h * w + j] = 1;
                truth.voxels[static_cast<std::size_t>(s) * h * w + j] = c.slices[s].mask.ids[j] == 1;
            }
        }
        REQUIRE(metrics::dice(all, truth) < 0.5);
    }
}

TEST_CASE("dihedral augmentation basics") {
    Rng rng(5);
    data::DatasetSpec spec;
    spec.num_cases = 1;
    data::Case c = data::synth_case(spec, 0);
    Tensor img = c.slices[0].image;
    data::LabelMask mask = c.slices[0].mask;

    // identity element
    REQUIRE(data::apply_dihedral(img, 0).data() == img.data());
    REQUIRE(data::apply_dihedral(mask, 0).ids == mask.ids);

    // 180-degree rotation is an involution
    const Tensor r2 = data::apply_dihedral(data::apply_dihedral(img, 2), 2);
    REQUIRE(r2.data() == img.data());
    const data::LabelMask m2 = data::apply_dihedral(data::apply_dihedral(mask, 2), 2);
    REQUIRE(m2.ids == mask.ids);

    // the flip alone is an involution too
    const Tensor f2 = data::apply_dihedral(data::apply_dihedral(img, 4), 4);
    REQUIRE(f2.data() == img.data());

    // augment applies one element to both image and mask
    Tensor img2 = img;
    data::LabelMask mask2 = mask;
    data::augment(img2, mask2, rng);
    REQUIRE(img2.numel() == img.numel());
    REQUIRE(mask2.ids.size() == mask.ids.size());

    REQUIRE_THROWS_AS(data::apply_dihedral(img, 9), ValueError);
}

TEST_CASE("mask transform commutes with one-hot expansion") {
    data::DatasetSpec spec;
    spec.num_cases = 1;
    const data::Case c = data::synth_case(spec, 0);
    const data::LabelMask& mask = c.slices[0].mask;
    for (int elem = 0; elem < 8; ++elem) {
        const data::LabelMask turned = data::apply_dihedral(mask, elem);
        const auto onehot_after = distill::resize_one_hot_mask(turned, 2, turned.h, turned.w);
        const auto onehot_before = distill::resize_one_hot_mask(mask, 2, mask.h, mask.w);
        // transform each one-hot plane and compare
        for (int cls = 0; cls < 2; ++cls) {
            data::LabelMask plane(mask.h, mask.w, 2);
            for (std::size_t j = 0; j < plane.ids.size(); ++j) {
                plane.ids[j] = onehot_before.planes[static_cast<std::size_t>(cls) * plane.ids.size() + j];
            }
            const data::LabelMask plane_turned = data::apply_dihedral(plane, elem);
            for (std::size_t j = 0; j < plane.ids.size(); ++j) {
                REQUIRE(plane_turned.ids[j] ==
                        onehot_after.planes[static_cast<std::size_t>(cls) * plane.ids.size() + j]);
            }
        }
    }
}

TEST_CASE("make_folds partitions the cases") {
    std::vector<int> ids(10);
    for (int i = 0; i < 10; ++i) {
        ids[i] = i;
    }
    const auto folds = data::make_folds(ids, 5, 99);
    REQUIRE(folds.size() == 5);
    std::set<int> seen;
    for (const auto& [train, test] : folds) {
        REQUIRE(test.size() == 2);
        REQUIRE(train.size() == 8);
        for (int id : test) {
            REQUIRE(seen.insert(id).second);  // disjoint test sets
        }
    }
    REQUIRE(seen.size() == 10);

    const auto again = data::make_folds(ids, 5, 99);
    for (int f = 0; f < 5; ++f) {
        REQUIRE(folds[f].second == again[f].second);
    }

    REQUIRE_THROWS_AS(data::make_folds({1, 2}, 3, 0), ValueError);
    REQUIRE_THROWS_AS(data::make_folds(ids, 1, 0), ValueError);
}

TEST_CASE("tensor and mask files round-trip bit-exactly") {
    const fs::path dir = temp_dir("io");
    Rng rng(55);
    const Tensor t = rand_uniform({2, 3, 4, 5}, -100.0, 100.0, rng);
    const std::string tpath = (dir / "t.img").string();
    data::write_tensor(tpath, t);
    const Tensor back = data::read_tensor(tpath);
    REQUIRE(back.shape() == t.shape());
    REQUIRE(back.data() == t.data());

    // f32 storage mode round-trips through the narrower type
    const std::string fpath = (dir / "t32.img").string();
    data::write_tensor(fpath, t, io::Dtype::f32);
    const Tensor narrow = data::read_tensor(fpath);
    for (std::size_t i = 0; i < t.numel(); ++i) {
        REQUIRE(narrow.data()[i] == static_cast<double>(static_cast<float>(t.data()[i])));
    }

    data::LabelMask mask(6, 7, 3);
    for (std::size_t j = 0; j < mask.ids.size(); ++j) {
        mask.ids[j] = static_cast<std::uint8_t>(j % 3);
    }
    const std::string mpath = (dir / "m.msk").string();
    data::write_mask(mpath, mask);
    const data::LabelMask mback = data::read_mask(mpath);
    REQUIRE(mback.h == 6);
    REQUIRE(mback.w == 7);
    REQUIRE(mback.num_classes == 3);
    REQUIRE(mback.ids == mask.ids);
}

TEST_CASE("malformed files name the failing offset") {
    const fs::path dir = temp_dir("badio");
    Rng rng(65);
    const Tensor t = rand_uniform({3, 3}, 0.0, 1.0, rng);
    const std::string tpath = (dir / "t.img").string();
    data::write_tensor(tpath, t);

    // truncation
    {
        std::ifstream in(tpath, std::ios::binary);
        std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        std::ofstream out(tpath, std::ios::binary | std::ios::trunc);
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size() / 2));
    }
    try {
        data::read_tensor(tpath);
        REQUIRE(false);
    } catch (const FormatError& e) {
        REQUIRE(std::string(e.what()).find("offset") != std::string::npos);
    }

    // bad magic
    {
        std::ofstream out(tpath, std::ios::binary | std::ios::trunc);
        out << "NOPEnope";
    }
    REQUIRE_THROWS_AS(data::read_tensor(tpath), FormatError);

    // mask with class id >= header count
    const std::string mpath = (dir / "m.msk").string();
    {
        std::ofstream out(mpath, std::ios::binary);
        out << "EMKL";
        const unsigned char rest[] = {1, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0, 2, 0, 7};
        out.write(reinterpret_cast<const char*>(rest), sizeof(rest));
    }
    REQUIRE_THROWS_AS(data::read_mask(mpath), FormatError);
}

TEST_CASE("dataset directory round-trip") {
    const fs::path dir = temp_dir("ds");
    data::DatasetSpec spec;
    spec.num_cases = 3;
    spec.min_slices = 1;
    spec.max_slices = 2;
    const data::Dataset ds = data::generate_dataset(spec);
    data::write_dataset(ds, dir.string());
    const data::Dataset back = data::load_dataset(dir.string());
    REQUIRE(back.cases.size() == ds.cases.size());
    REQUIRE(back.spec.seed == spec.seed);
    for (std::size_t c = 0; c < ds.cases.size(); ++c) {
        REQUIRE(back.cases[c].id == ds.cases[c].id);
        REQUIRE(back.cases[c].slices.size() == ds.cases[c].slices.size());
        for (std::size_t s = 0; s < ds.cases[c].slices.size(); ++s) {
            REQUIRE(back.cases[c].slices[s].image.data() == ds.cases[c].slices[s].image.data());
            REQUIRE(back.cases[c].slices[s].mask.ids == ds.cases[c].slices[s].mask.ids);
        }
    }

    REQUIRE_THROWS_AS(data::parse_dataset_spec("bogus_key = 1"), ConfigError);
    const data::DatasetSpec reparsed = data::parse_dataset_spec(data::format_dataset_spec(spec));
    REQUIRE(reparsed.num_cases == spec.num_cases);
    REQUIRE(reparsed.noise_std == spec.noise_std);
}
