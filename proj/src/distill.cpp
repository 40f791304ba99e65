#include "emkd/distill.hpp"

#include <cmath>
#include <string>

#include "emkd/error.hpp"

namespace emkd::distill {

namespace {

constexpr double kNormGuard = 1e-12;

Tensor maybe_temper(const Tensor& logits, double temperature) {
    if (temperature == 1.0) {
        return logits;
    }
    if (temperature <= 0.0) {
        throw ValueError("softmax temperature must be > 0");
    }
    return mul_scalar(logits, 1.0 / temperature);
}

}  // namespace

Tensor pmd_loss(const Tensor& student_logits, const Tensor& teacher_logits, KlDirection direction,
                double temperature) {
    if (student_logits.shape() != teacher_logits.shape()) {
        throw ShapeError("pmd_loss: logit shapes differ");
    }
    if (student_logits.rank() != 4 || student_logits.extent(1) < 2) {
        throw ShapeError("pmd_loss: logits must be [N,C,H,W] with C >= 2");
    }
    const Tensor s = maybe_temper(student_logits, temperature);
    const Tensor t = maybe_temper(teacher_logits.detach(), temperature);
    const double pixels = static_cast<double>(student_logits.extent(0)) * student_logits.extent(2) *
                          student_logits.extent(3);

    Tensor kl;
    if (direction == KlDirection::student_to_teacher) {
        // sum p_s * (log p_s - log p_t)
        kl = sum(mul(channel_softmax(s), sub(channel_log_softmax(s), channel_log_softmax(t))));
    } else {
        kl = sum(mul(channel_softmax(t), sub(channel_log_softmax(t), channel_log_softmax(s))));
    }
    return mul_scalar(kl, 1.0 / pixels);
}

Tensor rescale_to_match(const Tensor& feat, int target_h, int target_w) {
    if (feat.rank() != 4) {
        throw ShapeError("rescale_to_match: expected [N,C,h,w]");
    }
    const int h = feat.extent(2);
    const int w = feat.extent(3);
    if (h == target_h && w == target_w) {
        return feat;
    }
    if (h < target_h) {
        if (target_h % h != 0 || target_w % w != 0 || target_h / h != target_w / w) {
            throw ConfigError("rescale_to_match: " + std::to_string(h) + "x" + std::to_string(w) + " -> " +
                              std::to_string(target_h) + "x" + std::to_string(target_w) +
                              " is not one integer upscale factor");
        }
        return upsample_nearest(feat, target_h / h);
    }
    if (h % target_h != 0 || w % target_w != 0 || h / target_h != w / target_w) {
        throw ConfigError("rescale_to_match: " + std::to_string(h) + "x" + std::to_string(w) + " -> " +
                          std::to_string(target_h) + "x" + std::to_string(target_w) +
                          " is not one integer downscale factor");
    }
    return avg_pool2d(feat, h / target_h);
}

Tensor importance_map(const Tensor& feat, double exponent) {
    if (feat.rank() != 4) {
        throw ShapeError("importance_map: expected [N,C,h,w]");
    }
    return sum_channels(abs_pow(feat, exponent));
}

Tensor imd_loss(const nets::TapPairing& pairing, const nets::FeatureTaps& student_taps,
                const nets::FeatureTaps& teacher_taps, double exponent) {
    if (pairing.empty()) {
        throw PairingError("imd_loss: empty tap pairing");
    }
    Tensor loss = Tensor::scalar(0.0);
    for (const auto& pair : pairing) {
        const Tensor& es = student_taps.at(pair.student_tap);
        const Tensor et = teacher_taps.at(pair.teacher_tap).detach();
        const Tensor aligned = rescale_to_match(es, et.extent(2), et.extent(3));
        const Tensor ms = importance_map(aligned, exponent);
        const Tensor mt = importance_map(et, exponent);

        const int batch = ms.extent(0);
        Tensor pair_sum = Tensor::scalar(0.0);
        for (int n = 0; n < batch; ++n) {
            const Tensor msn = batch_item(ms, n);
            const Tensor mtn = batch_item(mt, n);
            const Tensor s_unit = scale(msn, recip(l2_norm(msn), kNormGuard));
            const Tensor t_unit = scale(mtn, recip(l2_norm(mtn), kNormGuard));
            pair_sum = add(pair_sum, sum(abs_pow(sub(s_unit, t_unit), 1.0)));
        }
        loss = add(loss, mul_scalar(pair_sum, 1.0 / batch));
    }
    return loss;
}

ResizedOneHotMask resize_one_hot_mask(const data::LabelMask& mask, int num_classes, int target_h, int target_w) {
    if (num_classes < 2 || num_classes > 255) {
        throw ValueError("resize_one_hot_mask: num_classes must be 2..255");
    }
    if (target_h < 1 || target_w < 1 || mask.h % target_h != 0 || mask.w % target_w != 0) {
        throw ConfigError("resize_one_hot_mask: mask " + std::to_string(mask.h) + "x" + std::to_string(mask.w) +
                          " is not an integer multiple of target " + std::to_string(target_h) + "x" +
                          std::to_string(target_w));
    }
    const int fy = mask.h / target_h;
    const int fx = mask.w / target_w;
    ResizedOneHotMask out;
    out.classes = num_classes;
    out.h = target_h;
    out.w = target_w;
    out.planes.assign(static_cast<std::size_t>(num_classes) * target_h * target_w, 0);
    out.pixel_counts.assign(static_cast<std::size_t>(num_classes), 0);
    for (int y = 0; y < target_h; ++y) {
        for (int x = 0; x < target_w; ++x) {
            const std::uint8_t id = mask.at(y * fy, x * fx);  // top-left sample of the block
            if (id >= num_classes) {
                throw DataError("resize_one_hot_mask: class id " + std::to_string(int(id)) + " >= num_classes " +
                                std::to_string(num_classes));
            }
            out.planes[(static_cast<std::size_t>(id) * target_h + y) * target_w + x] = 1;
            out.pixel_counts[id] += 1;
        }
    }
    return out;
}

std::vector<RegionVector> region_vectors(const Tensor& feat, const ResizedOneHotMask& onehot) {
    if (feat.rank() != 3) {
        throw ShapeError("region_vectors: expected [C,h,w]");
    }
    if (feat.extent(1) != onehot.h || feat.extent(2) != onehot.w) {
        throw ShapeError("region_vectors: mask extents do not match the feature map");
    }
    const std::size_t plane = static_cast<std::size_t>(onehot.h) * onehot.w;
    std::vector<RegionVector> out;
    out.reserve(static_cast<std::size_t>(onehot.classes));
    std::vector<double> mask_plane(plane);
    for (int id = 0; id < onehot.classes; ++id) {
        RegionVector region;
        region.class_id = id;
        region.present = onehot.pixel_counts[static_cast<std::size_t>(id)] > 0;
        if (region.present) {
            const std::uint8_t* src = onehot.planes.data() + static_cast<std::size_t>(id) * plane;
            for (std::size_t j = 0; j < plane; ++j) {
                mask_plane[j] = src[j];
            }
            region.mean_feature = masked_channel_mean(feat, mask_plane, onehot.pixel_counts[static_cast<std::size_t>(id)]);
        }
        out.push_back(std::move(region));
    }
    return out;
}

RegionContrast region_contrast(const std::vector<RegionVector>& regions, ContrastForm form) {
    if (regions.size() < 2) {
        throw ValueError("region_contrast: needs at least 2 configured classes");
    }
    RegionContrast out;
    std::vector<Tensor> cosines;
    for (std::size_t i = 0; i < regions.size(); ++i) {
        for (std::size_t j = i + 1; j < regions.size(); ++j) {
            if (!regions[i].present || !regions[j].present) {
                continue;
            }
            const Tensor& a = regions[i].mean_feature;
            const Tensor& b = regions[j].mean_feature;
            const Tensor dot = sum(mul(a, b));
            const Tensor denom = mul(l2_norm(a), l2_norm(b));
            cosines.push_back(scale(dot, recip(denom, kNormGuard)));
            out.pairs.emplace_back(regions[i].class_id, regions[j].class_id);
        }
    }
    out.pair_count = static_cast<int>(cosines.size());
    if (out.pair_count == 0) {
        return out;  // empty contrast, signaled by pair_count == 0
    }
    if (form == ContrastForm::vector_all) {
        out.values = std::move(cosines);
    } else {
        out.values = {mul_scalar(sum(stack_scalars(cosines)), 1.0 / out.pair_count)};
    }
    return out;
}

namespace {

Tensor contrast_gap(const RegionContrast& vs, const RegionContrast& vt, int norm_p) {
    std::vector<Tensor> diffs;
    diffs.reserve(vs.values.size());
    for (std::size_t k = 0; k < vs.values.size(); ++k) {
        diffs.push_back(sub(vs.values[k], vt.values[k]));
    }
    const Tensor stacked = stack_scalars(diffs);
    if (norm_p == 1) {
        return sum(abs_pow(stacked, 1.0));
    }
    return l2_norm(stacked);
}

}  // namespace

Tensor rad_loss(const nets::TapPairing& pairing, const nets::FeatureTaps& student_taps,
                const nets::FeatureTaps& teacher_taps, const std::vector<data::LabelMask>& masks,
                int num_classes, int norm_p, ContrastForm form) {
    if (pairing.empty()) {
        throw PairingError("rad_loss: empty tap pairing");
    }
    if (norm_p != 1 && norm_p != 2) {
        throw ValueError("rad_loss: norm_p must be 1 or 2");
    }
    Tensor loss = Tensor::scalar(0.0);
    for (const auto& pair : pairing) {
        const Tensor& es = student_taps.at(pair.student_tap);
        const Tensor et = teacher_taps.at(pair.teacher_tap).detach();
        const Tensor aligned = rescale_to_match(es, et.extent(2), et.extent(3));

        const int batch = aligned.extent(0);
        if (static_cast<int>(masks.size()) != batch) {
            throw ShapeError("rad_loss: one label mask per batch item required");
        }
        Tensor pair_sum = Tensor::scalar(0.0);
        for (int n = 0; n < batch; ++n) {
            // Both networks read the same resized mask, so class presence is
            // decided once and pairs drop out symmetrically.
            const ResizedOneHotMask onehot = resize_one_hot_mask(masks[static_cast<std::size_t>(n)], num_classes,
                                                                 et.extent(2), et.extent(3));
            const RegionContrast vs = region_contrast(region_vectors(batch_item(aligned, n), onehot), form);
            if (vs.pair_count == 0) {
                continue;
            }
            const RegionContrast vt = region_contrast(region_vectors(batch_item(et, n), onehot), form);
            pair_sum = add(pair_sum, contrast_gap(vs, vt, norm_p));
        }
        loss = add(loss, mul_scalar(pair_sum, 1.0 / batch));
    }
    return loss;
}

Tensor seg_loss(const Tensor& logits, const std::vector<data::LabelMask>& masks, SegLossKind kind) {
    if (logits.rank() != 4 || logits.extent(1) < 2) {
        throw ShapeError("seg_loss: logits must be [N,C,H,W] with C >= 2");
    }
    const int n = logits.extent(0), c = logits.extent(1), h = logits.extent(2), w = logits.extent(3);
    if (static_cast<int>(masks.size()) != n) {
        throw ShapeError("seg_loss: one label mask per batch item required");
    }
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    for (const auto& m : masks) {
        if (m.h != h || m.w != w) {
            throw ShapeError("seg_loss: mask extents do not match logits");
        }
        for (std::uint8_t id : m.ids) {
            if (id >= c) {
                throw DataError("seg_loss: mask class id " + std::to_string(int(id)) + " >= logit channels " +
                                std::to_string(c));
            }
        }
    }

    // Constant one-hot stack of the ground truth, [N,C,H,W].
    std::vector<double> onehot(logits.numel(), 0.0);
    for (int ni = 0; ni < n; ++ni) {
        for (std::size_t j = 0; j < plane; ++j) {
            const std::uint8_t id = masks[static_cast<std::size_t>(ni)].ids[j];
            onehot[(static_cast<std::size_t>(ni) * c + id) * plane + j] = 1.0;
        }
    }
    const Tensor truth = Tensor::from_data(logits.shape(), std::move(onehot), false);

    if (kind == SegLossKind::cross_entropy) {
        const Tensor picked = sum(mul(channel_log_softmax(logits), truth));
        return mul_scalar(picked, -1.0 / (static_cast<double>(n) * h * w));
    }

    const double eps = 1e-6;
    const Tensor probs = channel_softmax(logits);
    Tensor dice_sum = Tensor::scalar(0.0);
    for (int ci = 1; ci < c; ++ci) {
        std::vector<double> class_truth(logits.numel(), 0.0);
        std::vector<double> class_pick(logits.numel(), 0.0);
        double gsum = 0.0;
        for (int ni = 0; ni < n; ++ni) {
            const std::size_t base = (static_cast<std::size_t>(ni) * c + ci) * plane;
            for (std::size_t j = 0; j < plane; ++j) {
                class_pick[base + j] = 1.0;
                if (masks[static_cast<std::size_t>(ni)].ids[j] == ci) {
                    class_truth[base + j] = 1.0;
                    gsum += 1.0;
                }
            }
        }
        const Tensor inter = sum(mul(probs, Tensor::from_data(logits.shape(), std::move(class_truth), false)));
        const Tensor psum = sum(mul(probs, Tensor::from_data(logits.shape(), std::move(class_pick), false)));
        const Tensor numer = add_scalar(mul_scalar(inter, 2.0), eps);
        const Tensor denom = add_scalar(psum, gsum + eps);
        dice_sum = add(dice_sum, scale(numer, recip(denom)));
    }
    return add_scalar(mul_scalar(dice_sum, -1.0 / (c - 1)), 1.0);
}

Tensor total_loss(const Tensor& seg, const Tensor& pm, const Tensor& im, const Tensor& ra,
                  const DistillWeights& w) {
    if (w.alpha < 0.0 || w.beta1 < 0.0 || w.beta2 < 0.0) {
        throw ValueError("total_loss: weights must be >= 0");
    }
    Tensor total = seg;
    total = add(total, mul_scalar(pm, w.alpha));
    total = add(total, mul_scalar(im, w.beta1));
    total = add(total, mul_scalar(ra, w.beta2));
    return total;
}

}  // namespace emkd::distill
