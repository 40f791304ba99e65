#include <doctest.h>

#include <cmath>
#include <vector>

#include "emkd/data.hpp"
#include "emkd/distill.hpp"
#include "emkd/error.hpp"
#include "emkd/nets.hpp"
#include "emkd/oracle.hpp"
#include "emkd/rng.hpp"

using namespace emkd;
using distill::ContrastForm;
using distill::KlDirection;
using distill::SegLossKind;

namespace {

Tensor random_tensor(std::vector<int> shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    return rand_uniform(std::move(shape), lo, hi, rng, false);
}

oracle::Grid to_grid(const Tensor& t) {
    oracle::Grid g;
    const auto& s = t.shape();
    const int pad = 4 - static_cast<int>(s.size());
    int dims[4] = {1, 1, 1, 1};
    for (std::size_t i = 0; i < s.size(); ++i) {
        dims[pad + static_cast<int>(i)] = s[i];
    }
    g.n = dims[0];
    g.c = dims[1];
    g.h = dims[2];
    g.w = dims[3];
    g.v = t.data();
    return g;
}

nets::FeatureTaps one_tap(const std::string& name, const Tensor& t) {
    nets::FeatureTaps taps;
    taps.taps.emplace_back(name, t);
    return taps;
}

data::LabelMask random_mask(Rng& rng, int h, int w, int classes) {
    data::LabelMask mask(h, w, static_cast<std::uint8_t>(classes));
    for (auto& id : mask.ids) {
        id = static_cast<std::uint8_t>(rng.uniform_int(0, classes - 1));
    }
    return mask;
}

const nets::TapPairing kSinglePair{{"t0", "t0"}};

}  // namespace

// ---------------------------------------------------------------------------
// Prediction map distillation

TEST_CASE("pmd is zero for identical logits and for per-pixel shifts") {
    Rng rng(101);
    const Tensor logits = random_tensor({2, 3, 4, 4}, rng, -2.0, 2.0);
    REQUIRE(std::abs(distill::pmd_loss(logits, logits).item()) <= 1e-12);

    std::vector<double> shifted = logits.data();
    const std::size_t plane = 16;
    for (int n = 0; n < 2; ++n) {
        for (std::size_t j = 0; j < plane; ++j) {
            const double c = rng.uniform(-3.0, 3.0);
            for (int ch = 0; ch < 3; ++ch) {
                shifted[(static_cast<std::size_t>(n) * 3 + ch) * plane + j] += c;
            }
        }
    }
    const Tensor teacher = Tensor::from_data(logits.shape(), shifted);
    REQUIRE(std::abs(distill::pmd_loss(logits, teacher).item()) <= 1e-12);
}

TEST_CASE("pmd single-pixel value matches the direct evaluation") {
    const Tensor s = Tensor::from_data({1, 2, 1, 1}, {1.0, 0.0});
    const Tensor t = Tensor::from_data({1, 2, 1, 1}, {0.0, 1.0});
    // p = softmax(1,0), q = softmax(0,1); KL(p||q) = sum p log(p/q)
    const double e = std::exp(1.0);
    const double p0 = e / (1.0 + e), p1 = 1.0 / (1.0 + e);
    const double expected = p0 * std::log(p0 / p1) + p1 * std::log(p1 / p0);
    REQUIRE(distill::pmd_loss(s, t).item() == doctest::Approx(expected).epsilon(1e-14));

    // the reversed direction swaps the operands
    const double expected_rev = p1 * std::log(p1 / p0) + p0 * std::log(p0 / p1);
    REQUIRE(distill::pmd_loss(s, t, KlDirection::teacher_to_student).item() ==
            doctest::Approx(expected_rev).epsilon(1e-14));

    REQUIRE_THROWS_AS(distill::pmd_loss(s, Tensor::zeros({1, 2, 2, 1})), ShapeError);
}

TEST_CASE("pmd agrees with the oracle on random instances") {
    Rng rng(111);
    for (int it = 0; it < 100; ++it) {
        const int n = rng.uniform_int(1, 2);
        const int c = rng.uniform_int(2, 4);
        const int h = rng.uniform_int(1, 4);
        const int w = rng.uniform_int(1, 4);
        const Tensor s = random_tensor({n, c, h, w}, rng, -2.0, 2.0);
        const Tensor t = random_tensor({n, c, h, w}, rng, -2.0, 2.0);
        const bool reversed = rng.uniform_int(0, 1) == 1;
        const double got = distill::pmd_loss(s, t, reversed ? KlDirection::teacher_to_student
                                                            : KlDirection::student_to_teacher).item();
        const double want = oracle::ref_pmd(to_grid(s), to_grid(t), reversed);
        REQUIRE(std::abs(got - want) <= 1e-9);
    }
}

TEST_CASE("pmd temperature is exposed but defaults to 1") {
    Rng rng(121);
    const Tensor s = random_tensor({1, 2, 2, 2}, rng);
    const Tensor t = random_tensor({1, 2, 2, 2}, rng);
    REQUIRE(distill::pmd_loss(s, t).item() == distill::pmd_loss(s, t, KlDirection::student_to_teacher, 1.0).item());
    REQUIRE(distill::pmd_loss(s, t).item() != distill::pmd_loss(s, t, KlDirection::student_to_teacher, 4.0).item());
}

// ---------------------------------------------------------------------------
// Rescaling and importance maps

TEST_CASE("rescale_to_match dispatches on the size relation") {
    Rng rng(131);
    const Tensor small = random_tensor({1, 2, 8, 8}, rng);
    REQUIRE(distill::rescale_to_match(small, 16, 16).shape() == std::vector<int>{1, 2, 16, 16});

    const Tensor same = random_tensor({1, 2, 16, 16}, rng);
    REQUIRE(distill::rescale_to_match(same, 16, 16).data() == same.data());

    const Tensor big = random_tensor({1, 2, 32, 32}, rng);
    const Tensor down = distill::rescale_to_match(big, 16, 16);
    const oracle::Grid want = oracle::ref_avg_pool2d(to_grid(big), 2);
    for (std::size_t i = 0; i < down.numel(); ++i) {
        REQUIRE(std::abs(down.data()[i] - want.v[i]) <= 1e-12);
    }

    REQUIRE_THROWS_AS(distill::rescale_to_match(random_tensor({1, 2, 6, 6}, rng), 16, 16), ConfigError);
    REQUIRE_THROWS_AS(distill::rescale_to_match(random_tensor({1, 2, 8, 16}, rng), 16, 16), ConfigError);
}

TEST_CASE("importance_map basics and oracle agreement") {
    REQUIRE(distill::importance_map(Tensor::zeros({1, 3, 4, 4})).data() == Tensor::zeros({1, 4, 4}).data());

    const Tensor single = Tensor::from_data({1, 1, 1, 1}, {-3.0});
    REQUIRE(distill::importance_map(single, 2.0).item() == 9.0);

    Rng rng(141);
    for (int it = 0; it < 100; ++it) {
        const Tensor feat = random_tensor({rng.uniform_int(1, 2), 4, 4, 4}, rng, -2.0, 2.0);
        const double exponent = rng.uniform_int(1, 3);
        const Tensor got = distill::importance_map(feat, exponent);
        const oracle::Grid want = oracle::ref_importance_map(to_grid(feat), exponent);
        for (std::size_t i = 0; i < got.numel(); ++i) {
            REQUIRE(std::abs(got.data()[i] - want.v[i]) <= 1e-9);
        }
    }
}

// ---------------------------------------------------------------------------
// Importance map distillation

TEST_CASE("imd is zero for identical and for positively scaled features") {
    Rng rng(151);
    const Tensor feat = random_tensor({2, 3, 8, 8}, rng);
    const auto taps = one_tap("t0", feat);
    REQUIRE(std::abs(distill::imd_loss(kSinglePair, taps, taps).item()) <= 1e-12);

    for (double c : {0.2, 5.0}) {
        const auto scaled = one_tap("t0", mul_scalar(feat, c));
        REQUIRE(std::abs(distill::imd_loss(kSinglePair, scaled, taps).item()) <= 1e-9);
        REQUIRE(std::abs(distill::imd_loss(kSinglePair, taps, scaled).item()) <= 1e-9);
    }

    // zero features hit the norm guard, not a division by zero
    const auto zero = one_tap("t0", Tensor::zeros({2, 3, 8, 8}));
    REQUIRE(std::isfinite(distill::imd_loss(kSinglePair, zero, taps).item()));
}

TEST_CASE("imd agrees with the oracle, including rescaled pairs") {
    Rng rng(161);
    for (int it = 0; it < 100; ++it) {
        const int n = rng.uniform_int(1, 2);
        const int hs = 4 << rng.uniform_int(0, 1);  // 4 or 8
        const Tensor sfeat = random_tensor({n, 2, hs, hs}, rng);
        const Tensor tfeat = random_tensor({n, 3, 4, 4}, rng);
        const double got =
            distill::imd_loss(kSinglePair, one_tap("t0", sfeat), one_tap("t0", tfeat)).item();
        const double want = oracle::ref_imd_pair(to_grid(sfeat), to_grid(tfeat), 2.0);
        REQUIRE(std::abs(got - want) <= 1e-9);
    }

    // two pairs sum
    Rng rng2(162);
    const Tensor a = random_tensor({1, 2, 4, 4}, rng2);
    const Tensor b = random_tensor({1, 2, 8, 8}, rng2);
    const Tensor ta = random_tensor({1, 2, 4, 4}, rng2);
    const Tensor tb = random_tensor({1, 2, 8, 8}, rng2);
    nets::FeatureTaps staps, ttaps;
    staps.taps.emplace_back("p0", a);
    staps.taps.emplace_back("p1", b);
    ttaps.taps.emplace_back("p0", ta);
    ttaps.taps.emplace_back("p1", tb);
    const nets::TapPairing pairing{{"p0", "p0"}, {"p1", "p1"}};
    const double got = distill::imd_loss(pairing, staps, ttaps).item();
    const double want = oracle::ref_imd_pair(to_grid(a), to_grid(ta), 2.0) +
                        oracle::ref_imd_pair(to_grid(b), to_grid(tb), 2.0);
    REQUIRE(std::abs(got - want) <= 1e-9);
}

// ---------------------------------------------------------------------------
// One-hot resize and region vectors

TEST_CASE("resize_one_hot_mask follows the top-left rule") {
    data::LabelMask uniform(4, 4, 2);
    const auto one = distill::resize_one_hot_mask(uniform, 2, 2, 2);
    REQUIRE(one.pixel_counts[0] == 4);
    REQUIRE(one.pixel_counts[1] == 0);

    data::LabelMask two(2, 2, 2);
    two.at(0, 1) = 1;
    two.at(1, 1) = 1;  // [[0,1],[0,1]]
    const auto shrunk = distill::resize_one_hot_mask(two, 2, 1, 1);
    REQUIRE(shrunk.planes[0] == 1);  // class 0 claimed the top-left sample
    REQUIRE(shrunk.pixel_counts[0] == 1);
    REQUIRE(shrunk.pixel_counts[1] == 0);

    data::LabelMask checker(4, 4, 2);
    for (int y = 0; y < 4; ++y) {
        for (int x = 0; x < 4; ++x) {
            checker.at(y, x) = static_cast<std::uint8_t>((y + x) % 2);
        }
    }
    const auto halved = distill::resize_one_hot_mask(checker, 2, 2, 2);
    // top-left of every 2x2 block is (even, even) -> class 0
    REQUIRE(halved.pixel_counts[0] == 4);
    REQUIRE(halved.pixel_counts[1] == 0);

    // per pixel exactly one class fires
    Rng rng(171);
    const data::LabelMask noise = random_mask(rng, 8, 8, 3);
    const auto oh = distill::resize_one_hot_mask(noise, 3, 4, 4);
    for (int j = 0; j < 16; ++j) {
        int hits = 0;
        for (int c = 0; c < 3; ++c) {
            hits += oh.planes[static_cast<std::size_t>(c) * 16 + j];
        }
        REQUIRE(hits == 1);
    }
    REQUIRE(oh.pixel_counts[0] + oh.pixel_counts[1] + oh.pixel_counts[2] == 16);

    REQUIRE_THROWS_AS(distill::resize_one_hot_mask(noise, 3, 3, 3), ConfigError);
    data::LabelMask bad(2, 2, 2);
    bad.at(0, 0) = 5;
    REQUIRE_THROWS_AS(distill::resize_one_hot_mask(bad, 2, 2, 2), DataError);
}

TEST_CASE("region_vectors reduce to masked means") {
    Rng rng(181);
    // full coverage by one class -> global mean
    data::LabelMask full(4, 4, 2);
    const auto onehot = distill::resize_one_hot_mask(full, 2, 4, 4);
    const Tensor feat = random_tensor({3, 4, 4}, rng);
    const auto regions = distill::region_vectors(feat, onehot);
    REQUIRE(regions.size() == 2);
    REQUIRE(regions[0].present);
    REQUIRE_FALSE(regions[1].present);
    for (int c = 0; c < 3; ++c) {
        double mean = 0.0;
        for (int j = 0; j < 16; ++j) {
            mean += feat.data()[static_cast<std::size_t>(c) * 16 + j];
        }
        mean /= 16.0;
        REQUIRE(regions[0].mean_feature.data()[static_cast<std::size_t>(c)] ==
                doctest::Approx(mean).epsilon(1e-14));
    }

    // constant features give constant region vectors for every present class
    const Tensor constant = Tensor::full({3, 4, 4}, 2.5);
    data::LabelMask split(4, 4, 2);
    for (int x = 0; x < 4; ++x) {
        split.at(0, x) = 1;
    }
    const auto oh2 = distill::resize_one_hot_mask(split, 2, 4, 4);
    for (const auto& region : distill::region_vectors(constant, oh2)) {
        REQUIRE(region.present);
        for (double v : region.mean_feature.data()) {
            REQUIRE(v == doctest::Approx(2.5).epsilon(1e-15));
        }
    }

    // random case against the loop oracle
    for (int it = 0; it < 50; ++it) {
        const Tensor f = random_tensor({3, 4, 4}, rng);
        const data::LabelMask mask = random_mask(rng, 4, 4, 2);
        const auto oh = distill::resize_one_hot_mask(mask, 2, 4, 4);
        const auto got = distill::region_vectors(f, oh);
        const auto want = oracle::ref_region_vectors(to_grid(f), oracle::ref_resize_one_hot(mask.ids, 4, 4, 2, 4, 4));
        for (int cls = 0; cls < 2; ++cls) {
            REQUIRE(got[static_cast<std::size_t>(cls)].present == want.present[static_cast<std::size_t>(cls)]);
            if (!got[static_cast<std::size_t>(cls)].present) {
                continue;
            }
            for (int c = 0; c < 3; ++c) {
                REQUIRE(std::abs(got[static_cast<std::size_t>(cls)].mean_feature.data()[static_cast<std::size_t>(c)] -
                                 want.vectors[static_cast<std::size_t>(cls)][static_cast<std::size_t>(c)]) <= 1e-12);
            }
        }
    }
}

TEST_CASE("region_contrast cosine values") {
    const auto make_region = [](int id, std::vector<double> v) {
        distill::RegionVector r;
        r.class_id = id;
        r.present = true;
        const int extent = static_cast<int>(v.size());
        r.mean_feature = Tensor::from_data({extent}, std::move(v));
        return r;
    };

    // identical nonzero vectors -> 1
    auto same = distill::region_contrast({make_region(0, {1, 2}), make_region(1, {1, 2})}, ContrastForm::vector_all);
    REQUIRE(same.pair_count == 1);
    REQUIRE(same.values[0].item() == doctest::Approx(1.0).epsilon(1e-9));

    // orthogonal -> 0
    auto ortho = distill::region_contrast({make_region(0, {1, 0}), make_region(1, {0, 1})}, ContrastForm::vector_all);
    REQUIRE(std::abs(ortho.values[0].item()) <= 1e-12);

    // three random classes against the oracle, both forms
    Rng rng(191);
    for (int it = 0; it < 100; ++it) {
        std::vector<distill::RegionVector> regions;
        oracle::RefRegions ref;
        for (int id = 0; id < 3; ++id) {
            std::vector<double> v(4);
            for (auto& x : v) {
                x = rng.uniform(-1.0, 1.0);
            }
            ref.vectors.push_back(v);
            ref.present.push_back(true);
            regions.push_back(make_region(id, v));
        }
        const auto got_vec = distill::region_contrast(regions, ContrastForm::vector_all);
        const auto want_vec = oracle::ref_region_contrast(ref, true);
        REQUIRE(got_vec.pair_count == 3);
        for (int k = 0; k < 3; ++k) {
            REQUIRE(std::abs(got_vec.values[static_cast<std::size_t>(k)].item() -
                             want_vec.values[static_cast<std::size_t>(k)]) <= 1e-12);
        }
        const auto got_mean = distill::region_contrast(regions, ContrastForm::scalar_mean);
        const auto want_mean = oracle::ref_region_contrast(ref, false);
        REQUIRE(std::abs(got_mean.values[0].item() - want_mean.values[0]) <= 1e-12);
    }

    // absent classes drop out; a single present class yields an empty contrast
    auto empty = distill::region_contrast(
        {make_region(0, {1, 1}), distill::RegionVector{1, Tensor{}, false}}, ContrastForm::scalar_mean);
    REQUIRE(empty.pair_count == 0);
    REQUIRE(empty.values.empty());

    REQUIRE_THROWS_AS(distill::region_contrast({make_region(0, {1.0})}, ContrastForm::scalar_mean), ValueError);
}

// ---------------------------------------------------------------------------
// Region affinity distillation

TEST_CASE("rad is zero for identical and for positively scaled features") {
    Rng rng(201);
    const Tensor feat = random_tensor({2, 3, 4, 4}, rng);
    const auto taps = one_tap("t0", feat);
    std::vector<data::LabelMask> masks{random_mask(rng, 4, 4, 2), random_mask(rng, 4, 4, 2)};
    REQUIRE(std::abs(distill::rad_loss(kSinglePair, taps, taps, masks, 2).item()) <= 1e-12);

    const auto scaled = one_tap("t0", mul_scalar(feat, 3.0));
    REQUIRE(std::abs(distill::rad_loss(kSinglePair, scaled, taps, masks, 2).item()) <= 1e-9);
    REQUIRE(std::abs(distill::rad_loss(kSinglePair, taps, scaled, masks, 2).item()) <= 1e-9);
}

TEST_CASE("rad agrees with the end-to-end oracle") {
    Rng rng(211);
    for (int it = 0; it < 100; ++it) {
        const int classes = rng.uniform_int(2, 3);
        const int h = 4;
        const int mask_scale = 1 << rng.uniform_int(0, 1);
        const Tensor sfeat = random_tensor({1, 2, h, h}, rng);
        const Tensor tfeat = random_tensor({1, 3, h, h}, rng);
        const data::LabelMask mask = random_mask(rng, h * mask_scale, h * mask_scale, classes);
        const int p = rng.uniform_int(1, 2);
        const bool vector_form = rng.uniform_int(0, 1) == 1;

        const double got = distill::rad_loss(kSinglePair, one_tap("t0", sfeat), one_tap("t0", tfeat), {mask},
                                             classes, p,
                                             vector_form ? ContrastForm::vector_all : ContrastForm::scalar_mean)
                               .item();
        const double want = oracle::ref_rad_pair(to_grid(sfeat), to_grid(tfeat), mask.ids, mask.h, mask.w, classes,
                                                 p, vector_form);
        REQUIRE(std::abs(got - want) <= 1e-9);
    }
}

TEST_CASE("rad handles empty contrasts and rejects bad masks") {
    Rng rng(221);
    const Tensor sfeat = random_tensor({1, 2, 4, 4}, rng);
    const Tensor tfeat = random_tensor({1, 2, 4, 4}, rng);
    // single-class mask -> no present pair -> zero contribution
    data::LabelMask flat(4, 4, 2);
    REQUIRE(distill::rad_loss(kSinglePair, one_tap("t0", sfeat), one_tap("t0", tfeat), {flat}, 2).item() == 0.0);

    data::LabelMask bad(4, 4, 4);
    bad.at(0, 0) = 3;
    REQUIRE_THROWS_AS(distill::rad_loss(kSinglePair, one_tap("t0", sfeat), one_tap("t0", tfeat), {bad}, 2),
                      DataError);
}

// ---------------------------------------------------------------------------
// Segmentation loss

TEST_CASE("seg_loss saturates for confident correct predictions") {
    Rng rng(231);
    const data::LabelMask mask = random_mask(rng, 4, 4, 2);
    std::vector<double> logits(2 * 16, 0.0);
    for (int j = 0; j < 16; ++j) {
        logits[static_cast<std::size_t>(mask.ids[static_cast<std::size_t>(j)]) * 16 + j] = 20.0;  // margin 20
    }
    const Tensor confident = Tensor::from_data({1, 2, 4, 4}, logits);
    REQUIRE(distill::seg_loss(confident, {mask}, SegLossKind::cross_entropy).item() < 1e-8);
    REQUIRE(distill::seg_loss(confident, {mask}, SegLossKind::soft_dice).item() < 1e-6);
}

TEST_CASE("seg_loss matches the oracle on random cases") {
    Rng rng(241);
    for (int it = 0; it < 100; ++it) {
        const int n = rng.uniform_int(1, 2);
        const int c = rng.uniform_int(2, 3);
        const Tensor logits = random_tensor({n, c, 4, 4}, rng, -2.0, 2.0);
        std::vector<data::LabelMask> masks;
        std::vector<std::uint8_t> flat;
        for (int i = 0; i < n; ++i) {
            masks.push_back(random_mask(rng, 4, 4, c));
            flat.insert(flat.end(), masks.back().ids.begin(), masks.back().ids.end());
        }
        const double ce = distill::seg_loss(logits, masks, SegLossKind::cross_entropy).item();
        const double dice = distill::seg_loss(logits, masks, SegLossKind::soft_dice).item();
        REQUIRE(std::abs(ce - oracle::ref_seg_cross_entropy(to_grid(logits), flat)) <= 1e-9);
        REQUIRE(std::abs(dice - oracle::ref_seg_soft_dice(to_grid(logits), flat)) <= 1e-9);
    }

    data::LabelMask bad(4, 4, 8);
    bad.at(1, 1) = 5;
    REQUIRE_THROWS_AS(distill::seg_loss(Tensor::zeros({1, 2, 4, 4}), {bad}, SegLossKind::cross_entropy), DataError);
}

// ---------------------------------------------------------------------------
// Total loss

TEST_CASE("total_loss composition") {
    const Tensor seg = Tensor::scalar(0.7);
    const Tensor one = Tensor::scalar(1.0);

    REQUIRE(distill::total_loss(seg, one, one, one, {0.0, 0.0, 0.0}).item() == seg.item());

    const double full = distill::total_loss(one, one, one, one, {0.1, 0.9, 0.9}).item();
    REQUIRE(full == doctest::Approx(2.9).epsilon(1e-15));

    const Tensor zero = Tensor::scalar(0.0);
    REQUIRE(distill::total_loss(seg, zero, zero, zero, {0.3, 0.4, 0.5}).item() == seg.item());

    REQUIRE_THROWS_AS(distill::total_loss(seg, one, one, one, {-0.1, 0.9, 0.9}), ValueError);
}

// ---------------------------------------------------------------------------
// Whole-network invariants

TEST_CASE("self-distillation is zero and the teacher stays out of the tape") {
    Rng rng(251);
    nets::Network net(nets::NetworkConfig{2, 3, 2, 2, false, 5});
    const Tensor input = rand_uniform({2, 1, 16, 16}, 0.0, 1.0, rng);
    auto [slogits, staps] = net.forward_with_taps(input, true);
    auto [tlogits, ttaps] = net.forward_with_taps(input, false);

    const auto pairing = nets::match_taps(staps, ttaps, nets::TapPolicy::first_and_last);
    std::vector<data::LabelMask> masks{random_mask(rng, 16, 16, 2), random_mask(rng, 16, 16, 2)};

    REQUIRE(std::abs(distill::pmd_loss(slogits, tlogits).item()) <= 1e-12);
    REQUIRE(std::abs(distill::imd_loss(pairing, staps, ttaps).item()) <= 1e-12);
    REQUIRE(std::abs(distill::rad_loss(pairing, staps, ttaps, masks, 2).item()) <= 1e-12);

    // gradient flow: a tracked teacher-side tensor receives no gradient
    const Tensor tracked_teacher = Tensor::from_data(tlogits.shape(), tlogits.data(), true);
    const Tensor loss = distill::pmd_loss(slogits, tracked_teacher);
    loss.backward();
    for (double g : tracked_teacher.grad()) {
        REQUIRE(g == 0.0);
    }
    // while the student side does receive one
    bool any = false;
    for (const auto& [name, p] : net.parameters()) {
        for (double g : p.grad()) {
            any = any || g != 0.0;
        }
    }
    REQUIRE(any);
}

TEST_CASE("losses pass finite-difference checks") {
    Rng rng(261);
    const double step = 1e-5, tol = 1e-4;
    const Tensor teacher_logits = random_tensor({1, 2, 4, 4}, rng, -1.0, 1.0);
    const Tensor teacher_feat = random_tensor({1, 3, 4, 4}, rng);
    const data::LabelMask mask = random_mask(rng, 4, 4, 2);

    const Tensor slogits = random_tensor({1, 2, 4, 4}, rng, -1.0, 1.0);
    REQUIRE(grad_check([&](const Tensor& t) { return distill::pmd_loss(t, teacher_logits); }, slogits, step) < tol);
    REQUIRE(grad_check([&](const Tensor& t) {
                return distill::pmd_loss(t, teacher_logits, KlDirection::teacher_to_student);
            }, slogits, step) < tol);
    REQUIRE(grad_check([&](const Tensor& t) {
                return distill::seg_loss(t, {mask}, SegLossKind::cross_entropy);
            }, slogits, step) < tol);
    REQUIRE(grad_check([&](const Tensor& t) {
                return distill::seg_loss(t, {mask}, SegLossKind::soft_dice);
            }, slogits, step) < tol);

    const Tensor sfeat = random_tensor({1, 2, 4, 4}, rng);
    REQUIRE(grad_check([&](const Tensor& t) {
                return distill::imd_loss(kSinglePair, one_tap("t0", t), one_tap("t0", teacher_feat));
            }, sfeat, step) < tol);
    REQUIRE(grad_check([&](const Tensor& t) {
                return distill::rad_loss(kSinglePair, one_tap("t0", t), one_tap("t0", teacher_feat), {mask}, 2, 2);
            }, sfeat, step) < tol);
    REQUIRE(grad_check([&](const Tensor& t) {
                return distill::rad_loss(kSinglePair, one_tap("t0", t), one_tap("t0", teacher_feat), {mask}, 2, 1,
                                         ContrastForm::vector_all);
            }, sfeat, step) < tol);
}

TEST_CASE("the total loss differentiates through logits and features together") {
    Rng rng(271);
    const double step = 1e-5, tol = 1e-4;
    const Tensor teacher_logits = random_tensor({1, 2, 8, 8}, rng);
    const Tensor teacher_feat = random_tensor({1, 2, 4, 4}, rng);
    const data::LabelMask mask = random_mask(rng, 8, 8, 2);
    const distill::DistillWeights w{0.1, 0.9, 0.9};

    const Tensor slogits = random_tensor({1, 2, 8, 8}, rng);
    const Tensor sfeat = random_tensor({1, 2, 4, 4}, rng);
    const auto total_of_logits = [&](const Tensor& t) {
        const Tensor seg = distill::seg_loss(t, {mask}, SegLossKind::cross_entropy);
        const Tensor pm = distill::pmd_loss(t, teacher_logits);
        const Tensor im = distill::imd_loss(kSinglePair, one_tap("t0", sfeat), one_tap("t0", teacher_feat));
        const Tensor ra = distill::rad_loss(kSinglePair, one_tap("t0", sfeat), one_tap("t0", teacher_feat),
                                            {mask}, 2);
        return distill::total_loss(seg, pm, im, ra, w);
    };
    REQUIRE(grad_check(total_of_logits, slogits, step) < tol);

    const auto total_of_feat = [&](const Tensor& t) {
        const Tensor seg = distill::seg_loss(slogits, {mask}, SegLossKind::cross_entropy);
        const Tensor pm = distill::pmd_loss(slogits, teacher_logits);
        const Tensor im = distill::imd_loss(kSinglePair, one_tap("t0", t), one_tap("t0", teacher_feat));
        const Tensor ra = distill::rad_loss(kSinglePair, one_tap("t0", t), one_tap("t0", teacher_feat), {mask}, 2);
        return distill::total_loss(seg, pm, im, ra, w);
    };
    REQUIRE(grad_check(total_of_feat, sfeat, step) < tol);
}
