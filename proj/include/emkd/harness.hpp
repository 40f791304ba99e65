#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "emkd/data.hpp"
#include "emkd/distill.hpp"
#include "emkd/metrics.hpp"
#include "emkd/nets.hpp"

namespace emkd::harness {

struct TrainConfig {
    std::string data_dir;
    std::string network = "student";  // teacher | student | custom
    int net_depth = 2;
    int net_base_channels = 4;
    int net_growth = 2;
    bool net_skips = false;
    int epochs = 20;
    int batch_size = 4;
    double lr_max = 0.001;
    double lr_min = 0.000001;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    distill::DistillWeights weights;
    distill::SegLossKind seg_loss = distill::SegLossKind::cross_entropy;
    distill::KlDirection pmd_direction = distill::KlDirection::student_to_teacher;
    double temperature = 1.0;
    double importance_exponent = 2.0;
    int rad_norm_p = 2;
    distill::ContrastForm rad_form = distill::ContrastForm::scalar_mean;
    nets::TapPolicy tap_policy = nets::TapPolicy::first_and_last;
    std::uint64_t seed = 0;
    int fold = 0;
    int folds = 5;
    bool augment = true;
    data::WindowSpec window;  // applied before the network sees a slice
};

/// Plain-text "key = value" lines, '#' comments; unknown keys are errors.
TrainConfig parse_train_config(const std::string& text);
TrainConfig load_train_config(const std::string& path);
std::map<std::string, std::string> config_snapshot(const TrainConfig& cfg);

struct EpochRecord {
    double seg = 0.0, pm = 0.0, im = 0.0, ra = 0.0, total = 0.0;
    double lr = 0.0;
    double val_dice = 0.0;
};

struct RunReport {
    std::map<std::string, std::string> config;
    std::vector<EpochRecord> epochs;
    std::vector<metrics::MetricRow> final_metrics;
    double wall_clock_s = 0.0;
};

void write_run_report(const RunReport& report, const std::string& path);
RunReport read_run_report(const std::string& path);

// ---------------------------------------------------------------------------
// Optimization

struct AdamState {
    std::vector<std::vector<double>> m;
    std::vector<std::vector<double>> v;
    long step = 0;
};

/// One bias-corrected Adam update over a parameter list; gradients are read
/// from each tensor's grad buffer and then cleared.
void adam_step(std::vector<std::pair<std::string, Tensor>>& params, AdamState& state, double lr,
               double beta1, double beta2, double eps);

/// lr_min + (lr_max - lr_min) * (1 + cos(pi * epoch / (total - 1))) / 2;
/// total < 2 pins lr_max.
double cosine_lr(int epoch, int total_epochs, double lr_max, double lr_min);

// ---------------------------------------------------------------------------
// Training and evaluation

/// Memo of frozen-teacher forward results keyed by (slice, augmentation
/// element). Entries are pure functions of the key, so reuse is exact; one
/// cache may serve many runs against the same teacher and dataset.
class TeacherCache {
public:
    struct Entry {
        Tensor logits;
        nets::FeatureTaps taps;
    };

    const Entry* find(std::uint64_t key) const;
    void put(std::uint64_t key, Entry entry);
    static std::uint64_t key(int slice_index, int d4_element) {
        return (static_cast<std::uint64_t>(slice_index) << 3) | static_cast<std::uint64_t>(d4_element);
    }

private:
    std::unordered_map<std::uint64_t, Entry> entries_;
};

struct TrainResult {
    nets::Network model;       // last epoch
    nets::Network best_model;  // highest validation dice
    RunReport report;
};

/// Segmentation-only training of the configured network (all distillation
/// weights pinned to 0).
TrainResult train_network(const TrainConfig& cfg, const data::Dataset& ds);

/// Distillation training of the configured student against a frozen teacher.
/// The teacher is checksummed before and after; a changed checksum is a bug.
TrainResult distill_student(const TrainConfig& cfg, const data::Dataset& ds, const nets::Network& teacher,
                            TeacherCache* cache = nullptr);

struct EvalResult {
    std::vector<metrics::MetricRow> rows;  // one per case per foreground class
    double mean_dice = 0.0;                // over rows
};

/// Argmax prediction per pixel, per-case volumes, dice/voe/rvd per class.
EvalResult evaluate(const nets::Network& net, const data::Dataset& ds, const std::vector<int>& case_indices,
                    const data::WindowSpec& window, metrics::VoeVariant variant = metrics::VoeVariant::as_printed);

/// Case indices of the configured (train, test) fold.
std::pair<std::vector<int>, std::vector<int>> fold_split(const TrainConfig& cfg, const data::Dataset& ds);

// ---------------------------------------------------------------------------
// Reporting

struct ReportRow {
    std::string run_dir;
    std::string label;  // network plus enabled distillation terms
    metrics::MetricRange dice, voe, rvd;
    double wall_clock_s = 0.0;
};

/// One row per run directory holding a run_report.json, sorted by descending
/// dice center. Unreadable directories are listed in `skipped`.
std::vector<ReportRow> collect_report(const std::vector<std::string>& run_dirs,
                                      std::vector<std::string>* skipped = nullptr);
std::string format_report_table(const std::vector<ReportRow>& rows);
std::string format_report_csv(const std::vector<ReportRow>& rows);

}  // namespace emkd::harness
