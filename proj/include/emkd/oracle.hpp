#pragma once

// Naive, loop-based reference implementations used only by tests and the
// gradcheck CLI. Deliberately independent of the tensor engine: plain arrays,
// straight-line loops, no shared helpers, no optimization.

#include <cstdint>
#include <vector>

namespace emkd::oracle {

// Dense row-major [n][c][h][w] block with explicit extents.
struct Grid {
    int n = 1, c = 1, h = 1, w = 1;
    std::vector<double> v;

    Grid() = default;
    Grid(int n_, int c_, int h_, int w_) : n(n_), c(c_), h(h_), w(w_), v(static_cast<std::size_t>(n_) * c_ * h_ * w_, 0.0) {}

    double at(int ni, int ci, int y, int x) const {
        return v[((static_cast<std::size_t>(ni) * c + ci) * h + y) * w + x];
    }
    double& at(int ni, int ci, int y, int x) {
        return v[((static_cast<std::size_t>(ni) * c + ci) * h + y) * w + x];
    }
};

Grid ref_conv2d(const Grid& input, const Grid& kernel, const std::vector<double>& bias, int stride, int padding);
Grid ref_avg_pool2d(const Grid& x, int k);
Grid ref_max_pool2d(const Grid& x, int k);
Grid ref_upsample_nearest(const Grid& x, int k);
Grid ref_channel_softmax(const Grid& logits);

// Pixel-mean KL divergence between per-pixel channel distributions.
double ref_pmd(const Grid& student_logits, const Grid& teacher_logits, bool teacher_to_student);

Grid ref_rescale(const Grid& feat, int target_h, int target_w);
// Channel-collapsed map of powered activation magnitudes, [n,1,h,w].
Grid ref_importance_map(const Grid& feat, double exponent);
// One matched feature pair; batch-averaged L1 gap of L2-normalized maps.
double ref_imd_pair(const Grid& student_feat, const Grid& teacher_feat, double exponent);

struct RefOneHot {
    int classes = 0, h = 0, w = 0;
    std::vector<double> planes;   // [classes][h][w]
    std::vector<int> counts;      // pixels per class
};
RefOneHot ref_resize_one_hot(const std::vector<std::uint8_t>& mask, int mask_h, int mask_w, int classes,
                             int target_h, int target_w);

struct RefRegions {
    std::vector<std::vector<double>> vectors;  // one per class, length = channels
    std::vector<bool> present;
};
RefRegions ref_region_vectors(const Grid& feat_single, const RefOneHot& onehot);

struct RefContrast {
    std::vector<double> values;                // per present pair (i<j), or one mean
    std::vector<std::pair<int, int>> pairs;
    int pair_count = 0;
};
RefContrast ref_region_contrast(const RefRegions& regions, bool vector_form);

// One matched feature pair; batch handled by the caller.
double ref_rad_pair(const Grid& student_feat, const Grid& teacher_feat,
                    const std::vector<std::uint8_t>& mask, int mask_h, int mask_w,
                    int classes, int norm_p, bool vector_form);

double ref_seg_cross_entropy(const Grid& logits, const std::vector<std::uint8_t>& masks);
double ref_seg_soft_dice(const Grid& logits, const std::vector<std::uint8_t>& masks);

double ref_total(double seg, double pm, double im, double ra, double alpha, double beta1, double beta2);

struct RefMetrics {
    double dice = 0.0;
    double voe_printed = 0.0;
    double voe_union = 0.0;
    double rvd = 0.0;
    bool rvd_defined = false;
};
RefMetrics ref_metrics(const std::vector<std::uint8_t>& prediction, const std::vector<std::uint8_t>& reference);

}  // namespace emkd::oracle
