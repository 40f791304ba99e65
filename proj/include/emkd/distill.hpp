#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "emkd/data.hpp"
#include "emkd/nets.hpp"
#include "emkd/tensor.hpp"

namespace emkd::distill {

enum class KlDirection {
    student_to_teacher,  // KL(p_s || p_t), the default
    teacher_to_student,  // KL(p_t || p_s)
};

enum class SegLossKind { cross_entropy, soft_dice };

enum class ContrastForm {
    scalar_mean,  // mean cosine similarity over present class pairs
    vector_all,   // one value per present class pair
};

struct DistillWeights {
    double alpha = 0.1;   // prediction-map term
    double beta1 = 0.9;   // importance-map term
    double beta2 = 0.9;   // region-affinity term
};

/// Pixel-mean KL divergence between the channel softmax of two logit stacks.
/// The teacher side never receives gradients.
Tensor pmd_loss(const Tensor& student_logits, const Tensor& teacher_logits,
                KlDirection direction = KlDirection::student_to_teacher, double temperature = 1.0);

/// Spatially align a feature map with a target extent: nearest-upsample when
/// smaller, average-pool when bigger, identity when equal. The extents must
/// be related by one integer factor.
Tensor rescale_to_match(const Tensor& feat, int target_h, int target_w);

/// Channel-collapsed saliency: per-pixel sum over channels of
/// |activation|^exponent. [N,C,h,w] -> [N,h,w].
Tensor importance_map(const Tensor& feat, double exponent = 2.0);

/// Per matched tap pair, the L1 gap between the L2-normalized importance maps
/// of the (rescaled) student feature and the teacher feature, normalized per
/// batch item and averaged over the batch; summed over pairs.
Tensor imd_loss(const nets::TapPairing& pairing, const nets::FeatureTaps& student_taps,
                const nets::FeatureTaps& teacher_taps, double exponent = 2.0);

struct ResizedOneHotMask {
    int classes = 0;
    int h = 0;
    int w = 0;
    std::vector<std::uint8_t> planes;  // [classes][h][w], exactly one 1 per pixel
    std::vector<int> pixel_counts;     // per class
};

/// Nearest-neighbor label downsample (top-left sample per block) followed by
/// one-hot expansion. Mask extents must be integer multiples of the target.
ResizedOneHotMask resize_one_hot_mask(const data::LabelMask& mask, int num_classes, int target_h, int target_w);

struct RegionVector {
    int class_id = 0;
    Tensor mean_feature;  // [C]; undefined when !present
    bool present = false;
};

/// Masked mean feature vector per class over a [C,h,w] feature map.
std::vector<RegionVector> region_vectors(const Tensor& feat, const ResizedOneHotMask& onehot);

struct RegionContrast {
    std::vector<Tensor> values;  // single-element tensors; one per pair, or one mean
    std::vector<std::pair<int, int>> pairs;
    int pair_count = 0;  // present pairs contributing; 0 signals an empty contrast
};

/// Cosine similarity of region vectors for every class pair with both classes
/// present. Zero-norm vectors contribute a similarity of 0.
RegionContrast region_contrast(const std::vector<RegionVector>& regions, ContrastForm form);

/// Per matched tap pair and batch item, the p-norm gap between the student
/// and teacher region contrasts computed on the shared resized one-hot mask;
/// batch-averaged and summed over pairs. Items with no present class pair
/// contribute 0.
Tensor rad_loss(const nets::TapPairing& pairing, const nets::FeatureTaps& student_taps,
                const nets::FeatureTaps& teacher_taps, const std::vector<data::LabelMask>& masks,
                int num_classes, int norm_p = 2, ContrastForm form = ContrastForm::scalar_mean);

/// Pixel-mean cross entropy, or one minus the mean soft Dice over foreground
/// classes (eps = 1e-6).
Tensor seg_loss(const Tensor& logits, const std::vector<data::LabelMask>& masks, SegLossKind kind);

/// seg + alpha*pm + beta1*im + beta2*ra, composed in exactly that order.
Tensor total_loss(const Tensor& seg, const Tensor& pm, const Tensor& im, const Tensor& ra,
                  const DistillWeights& w);

}  // namespace emkd::distill
