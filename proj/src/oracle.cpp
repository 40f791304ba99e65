#include "emkd/oracle.hpp"

#include <cmath>
#include <cstddef>

namespace emkd::oracle {

Grid ref_conv2d(const Grid& input, const Grid& kernel, const std::vector<double>& bias, int stride, int padding) {
    const int hout = (input.h + 2 * padding - kernel.h) / stride + 1;
    const int wout = (input.w + 2 * padding - kernel.w) / stride + 1;
    Grid out(input.n, kernel.n, hout, wout);
    for (int ni = 0; ni < input.n; ++ni) {
        for (int co = 0; co < kernel.n; ++co) {
            for (int yo = 0; yo < hout; ++yo) {
                for (int xo = 0; xo < wout; ++xo) {
                    double acc = bias.empty() ? 0.0 : bias[static_cast<std::size_t>(co)];
                    for (int ci = 0; ci < input.c; ++ci) {
                        for (int ky = 0; ky < kernel.h; ++ky) {
                            for (int kx = 0; kx < kernel.w; ++kx) {
                                const int yi = yo * stride - padding + ky;
                                const int xi = xo * stride - padding + kx;
                                if (yi < 0 || yi >= input.h || xi < 0 || xi >= input.w) {
                                    continue;
                                }
                                acc += input.at(ni, ci, yi, xi) * kernel.at(co, ci, ky, kx);
                            }
                        }
                    }
                    out.at(ni, co, yo, xo) = acc;
                }
            }
        }
    }
    return out;
}

Grid ref_avg_pool2d(const Grid& x, int k) {
    Grid out(x.n, x.c, x.h / k, x.w / k);
    for (int ni = 0; ni < x.n; ++ni) {
        for (int ci = 0; ci < x.c; ++ci) {
            for (int yo = 0; yo < out.h; ++yo) {
                for (int xo = 0; xo < out.w; ++xo) {
                    double acc = 0.0;
                    for (int dy = 0; dy < k; ++dy) {
                        for (int dx = 0; dx < k; ++dx) {
                            acc += x.at(ni, ci, yo * k + dy, xo * k + dx);
                        }
                    }
                    out.at(ni, ci, yo, xo) = acc / (static_cast<double>(k) * k);
                }
            }
        }
    }
    return out;
}

Grid ref_max_pool2d(const Grid& x, int k) {
    Grid out(x.n, x.c, x.h / k, x.w / k);
    for (int ni = 0; ni < x.n; ++ni) {
        for (int ci = 0; ci < x.c; ++ci) {
            for (int yo = 0; yo < out.h; ++yo) {
                for (int xo = 0; xo < out.w; ++xo) {
                    double best = x.at(ni, ci, yo * k, xo * k);
                    for (int dy = 0; dy < k; ++dy) {
                        for (int dx = 0; dx < k; ++dx) {
                            const double v = x.at(ni, ci, yo * k + dy, xo * k + dx);
                            if (v > best) {
                                best = v;
                            }
                        }
                    }
                    out.at(ni, ci, yo, xo) = best;
                }
            }
        }
    }
    return out;
}

Grid ref_upsample_nearest(const Grid& x, int k) {
    Grid out(x.n, x.c, x.h * k, x.w * k);
    for (int ni = 0; ni < x.n; ++ni) {
        for (int ci = 0; ci < x.c; ++ci) {
            for (int yo = 0; yo < out.h; ++yo) {
                for (int xo = 0; xo < out.w; ++xo) {
                    out.at(ni, ci, yo, xo) = x.at(ni, ci, yo / k, xo / k);
                }
            }
        }
    }
    return out;
}

Grid ref_channel_softmax(const Grid& logits) {
    Grid out(logits.n, logits.c, logits.h, logits.w);
    for (int ni = 0; ni < logits.n; ++ni) {
        for (int y = 0; y < logits.h; ++y) {
            for (int x = 0; x < logits.w; ++x) {
                double mx = logits.at(ni, 0, y, x);
                for (int ci = 1; ci < logits.c; ++ci) {
                    if (logits.at(ni, ci, y, x) > mx) {
                        mx = logits.at(ni, ci, y, x);
                    }
                }
                double denom = 0.0;
                for (int ci = 0; ci < logits.c; ++ci) {
                    denom += std::exp(logits.at(ni, ci, y, x) - mx);
                }
                for (int ci = 0; ci < logits.c; ++ci) {
                    out.at(ni, ci, y, x) = std::exp(logits.at(ni, ci, y, x) - mx) / denom;
                }
            }
        }
    }
    return out;
}

double ref_pmd(const Grid& student_logits, const Grid& teacher_logits, bool teacher_to_student) {
    const Grid ps = ref_channel_softmax(student_logits);
    const Grid pt = ref_channel_softmax(teacher_logits);
    const Grid& from = teacher_to_student ? pt : ps;
    const Grid& to = teacher_to_student ? ps : pt;
    double acc = 0.0;
    for (int ni = 0; ni < ps.n; ++ni) {
        for (int y = 0; y < ps.h; ++y) {
            for (int x = 0; x < ps.w; ++x) {
                for (int ci = 0; ci < ps.c; ++ci) {
                    const double p = from.at(ni, ci, y, x);
                    const double q = to.at(ni, ci, y, x);
                    acc += p * (std::log(p) - std::log(q));
                }
            }
        }
    }
    return acc / (static_cast<double>(ps.n) * ps.h * ps.w);
}

Grid ref_rescale(const Grid& feat, int target_h, int target_w) {
    if (feat.h == target_h && feat.w == target_w) {
        return feat;
    }
    if (feat.h < target_h) {
        return ref_upsample_nearest(feat, target_h / feat.h);
    }
    return ref_avg_pool2d(feat, feat.h / target_h);
}

Grid ref_importance_map(const Grid& feat, double exponent) {
    Grid out(feat.n, 1, feat.h, feat.w);
    for (int ni = 0; ni < feat.n; ++ni) {
        for (int y = 0; y < feat.h; ++y) {
            for (int x = 0; x < feat.w; ++x) {
                double acc = 0.0;
                for (int ci = 0; ci < feat.c; ++ci) {
                    acc += std::pow(std::fabs(feat.at(ni, ci, y, x)), exponent);
                }
                out.at(ni, 0, y, x) = acc;
            }
        }
    }
    return out;
}

double ref_imd_pair(const Grid& student_feat, const Grid& teacher_feat, double exponent) {
    const Grid rs = ref_rescale(student_feat, teacher_feat.h, teacher_feat.w);
    const Grid ms = ref_importance_map(rs, exponent);
    const Grid mt = ref_importance_map(teacher_feat, exponent);
    double total = 0.0;
    for (int ni = 0; ni < ms.n; ++ni) {
        double ns = 0.0, nt = 0.0;
        for (int y = 0; y < ms.h; ++y) {
            for (int x = 0; x < ms.w; ++x) {
                ns += ms.at(ni, 0, y, x) * ms.at(ni, 0, y, x);
                nt += mt.at(ni, 0, y, x) * mt.at(ni, 0, y, x);
            }
        }
        ns = std::sqrt(ns) + 1e-12;
        nt = std::sqrt(nt) + 1e-12;
        double l1 = 0.0;
        for (int y = 0; y < ms.h; ++y) {
            for (int x = 0; x < ms.w; ++x) {
                l1 += std::fabs(ms.at(ni, 0, y, x) / ns - mt.at(ni, 0, y, x) / nt);
            }
        }
        total += l1;
    }
    return total / ms.n;
}

RefOneHot ref_resize_one_hot(const std::vector<std::uint8_t>& mask, int mask_h, int mask_w, int classes,
                             int target_h, int target_w) {
    RefOneHot out;
    out.classes = classes;
    out.h = target_h;
    out.w = target_w;
    out.planes.assign(static_cast<std::size_t>(classes) * target_h * target_w, 0.0);
    out.counts.assign(static_cast<std::size_t>(classes), 0);
    const int fy = mask_h / target_h;
    const int fx = mask_w / target_w;
    for (int y = 0; y < target_h; ++y) {
        for (int x = 0; x < target_w; ++x) {
            const int id = mask[static_cast<std::size_t>(y) * fy * mask_w + static_cast<std::size_t>(x) * fx];
            out.planes[(static_cast<std::size_t>(id) * target_h + y) * target_w + x] = 1.0;
            out.counts[static_cast<std::size_t>(id)] += 1;
        }
    }
    return out;
}

RefRegions ref_region_vectors(const Grid& feat_single, const RefOneHot& onehot) {
    RefRegions out;
    out.vectors.assign(static_cast<std::size_t>(onehot.classes), std::vector<double>(static_cast<std::size_t>(feat_single.c), 0.0));
    out.present.assign(static_cast<std::size_t>(onehot.classes), false);
    for (int id = 0; id < onehot.classes; ++id) {
        if (onehot.counts[static_cast<std::size_t>(id)] == 0) {
            continue;
        }
        out.present[static_cast<std::size_t>(id)] = true;
        for (int ci = 0; ci < feat_single.c; ++ci) {
            double acc = 0.0;
            for (int y = 0; y < feat_single.h; ++y) {
                for (int x = 0; x < feat_single.w; ++x) {
                    acc += feat_single.at(0, ci, y, x) *
                           onehot.planes[(static_cast<std::size_t>(id) * onehot.h + y) * onehot.w + x];
                }
            }
            out.vectors[static_cast<std::size_t>(id)][static_cast<std::size_t>(ci)] =
                acc / onehot.counts[static_cast<std::size_t>(id)];
        }
    }
    return out;
}

RefContrast ref_region_contrast(const RefRegions& regions, bool vector_form) {
    RefContrast out;
    const int classes = static_cast<int>(regions.vectors.size());
    std::vector<double> values;
    for (int i = 0; i < classes; ++i) {
        for (int j = i + 1; j < classes; ++j) {
            if (!regions.present[static_cast<std::size_t>(i)] || !regions.present[static_cast<std::size_t>(j)]) {
                continue;
            }
            const auto& a = regions.vectors[static_cast<std::size_t>(i)];
            const auto& b = regions.vectors[static_cast<std::size_t>(j)];
            double dot = 0.0, na = 0.0, nb = 0.0;
            for (std::size_t k = 0; k < a.size(); ++k) {
                dot += a[k] * b[k];
                na += a[k] * a[k];
                nb += b[k] * b[k];
            }
            na = std::sqrt(na);
            nb = std::sqrt(nb);
            double cosine = 0.0;
            if (na > 0.0 && nb > 0.0) {
                cosine = dot / (na * nb + 1e-12);
            }
            values.push_back(cosine);
            out.pairs.emplace_back(i, j);
        }
    }
    out.pair_count = static_cast<int>(values.size());
    if (vector_form || values.empty()) {
        out.values = values;
    } else {
        double mean = 0.0;
        for (double v : values) {
            mean += v;
        }
        out.values = {mean / values.size()};
    }
    return out;
}

double ref_rad_pair(const Grid& student_feat, const Grid& teacher_feat,
                    const std::vector<std::uint8_t>& mask, int mask_h, int mask_w,
                    int classes, int norm_p, bool vector_form) {
    const Grid rs = ref_rescale(student_feat, teacher_feat.h, teacher_feat.w);
    const RefOneHot onehot = ref_resize_one_hot(mask, mask_h, mask_w, classes, teacher_feat.h, teacher_feat.w);
    double total = 0.0;
    for (int ni = 0; ni < rs.n; ++ni) {
        Grid sf(1, rs.c, rs.h, rs.w);
        Grid tf(1, teacher_feat.c, teacher_feat.h, teacher_feat.w);
        for (int ci = 0; ci < rs.c; ++ci) {
            for (int y = 0; y < rs.h; ++y) {
                for (int x = 0; x < rs.w; ++x) {
                    sf.at(0, ci, y, x) = rs.at(ni, ci, y, x);
                }
            }
        }
        for (int ci = 0; ci < teacher_feat.c; ++ci) {
            for (int y = 0; y < teacher_feat.h; ++y) {
                for (int x = 0; x < teacher_feat.w; ++x) {
                    tf.at(0, ci, y, x) = teacher_feat.at(ni, ci, y, x);
                }
            }
        }
        const RefContrast vs = ref_region_contrast(ref_region_vectors(sf, onehot), vector_form);
        const RefContrast vt = ref_region_contrast(ref_region_vectors(tf, onehot), vector_form);
        if (vs.values.empty()) {
            continue;
        }
        double norm = 0.0;
        for (std::size_t k = 0; k < vs.values.size(); ++k) {
            const double diff = vs.values[k] - vt.values[k];
            if (norm_p == 1) {
                norm += std::fabs(diff);
            } else {
                norm += diff * diff;
            }
        }
        if (norm_p == 2) {
            norm = std::sqrt(norm);
        }
        total += norm;
    }
    return total / student_feat.n;
}

double ref_seg_cross_entropy(const Grid& logits, const std::vector<std::uint8_t>& masks) {
    double acc = 0.0;
    for (int ni = 0; ni < logits.n; ++ni) {
        for (int y = 0; y < logits.h; ++y) {
            for (int x = 0; x < logits.w; ++x) {
                double mx = logits.at(ni, 0, y, x);
                for (int ci = 1; ci < logits.c; ++ci) {
                    if (logits.at(ni, ci, y, x) > mx) {
                        mx = logits.at(ni, ci, y, x);
                    }
                }
                double denom = 0.0;
                for (int ci = 0; ci < logits.c; ++ci) {
                    denom += std::exp(logits.at(ni, ci, y, x) - mx);
                }
                const int truth = masks[(static_cast<std::size_t>(ni) * logits.h + y) * logits.w + x];
                acc -= logits.at(ni, truth, y, x) - mx - std::log(denom);
            }
        }
    }
    return acc / (static_cast<double>(logits.n) * logits.h * logits.w);
}

double ref_seg_soft_dice(const Grid& logits, const std::vector<std::uint8_t>& masks) {
    const Grid probs = ref_channel_softmax(logits);
    const double eps = 1e-6;
    double mean_dice = 0.0;
    for (int ci = 1; ci < logits.c; ++ci) {
        double inter = 0.0, psum = 0.0, gsum = 0.0;
        for (int ni = 0; ni < logits.n; ++ni) {
            for (int y = 0; y < logits.h; ++y) {
                for (int x = 0; x < logits.w; ++x) {
                    const double p = probs.at(ni, ci, y, x);
                    const double g =
                        masks[(static_cast<std::size_t>(ni) * logits.h + y) * logits.w + x] == ci ? 1.0 : 0.0;
                    inter += p * g;
                    psum += p;
                    gsum += g;
                }
            }
        }
        mean_dice += (2.0 * inter + eps) / (psum + gsum + eps);
    }
    return 1.0 - mean_dice / (logits.c - 1);
}

double ref_total(double seg, double pm, double im, double ra, double alpha, double beta1, double beta2) {
    return seg + alpha * pm + beta1 * im + beta2 * ra;
}

RefMetrics ref_metrics(const std::vector<std::uint8_t>& prediction, const std::vector<std::uint8_t>& reference) {
    double p = 0.0, g = 0.0, inter = 0.0, uni = 0.0;
    for (std::size_t i = 0; i < prediction.size(); ++i) {
        const bool a = prediction[i] != 0;
        const bool b = reference[i] != 0;
        if (a) {
            p += 1.0;
        }
        if (b) {
            g += 1.0;
        }
        if (a && b) {
            inter += 1.0;
        }
        if (a || b) {
            uni += 1.0;
        }
    }
    RefMetrics out;
    out.dice = (p + g > 0.0) ? 2.0 * inter / (p + g) : 1.0;
    out.voe_printed = (p + g > 0.0) ? 1.0 - inter / (p + g) : 0.5;
    out.voe_union = (uni > 0.0) ? 1.0 - inter / uni : 0.0;
    out.rvd_defined = g > 0.0;
    out.rvd = out.rvd_defined ? (p - g) / g : 0.0;
    return out;
}

}  // namespace emkd::oracle
