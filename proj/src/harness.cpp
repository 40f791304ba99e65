#include "emkd/harness.hpp"

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <memory>
#include <sstream>

#include <json.hpp>

#include "emkd/error.hpp"

namespace emkd::harness {

using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Config

namespace {

std::map<std::string, std::string> parse_kv_lines(const std::string& text) {
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
            throw ConfigError("config line " + std::to_string(line_no) + ": expected 'key = value'");
        }
        kv[strip(stripped.substr(0, eq))] = strip(stripped.substr(eq + 1));
    }
    return kv;
}

bool parse_bool(const std::string& v, const std::string& key) {
    if (v == "true" || v == "1") {
        return true;
    }
    if (v == "false" || v == "0") {
        return false;
    }
    throw ConfigError("config key " + key + ": expected a boolean, got '" + v + "'");
}

std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

void validate(const TrainConfig& cfg) {
    if (cfg.epochs < 1) {
        throw ConfigError("epochs must be >= 1");
    }
    if (cfg.batch_size < 1) {
        throw ConfigError("batch_size must be >= 1");
    }
    if (cfg.lr_min > cfg.lr_max) {
        throw ConfigError("lr_min must be <= lr_max");
    }
    if (cfg.folds < 2 || cfg.fold < 0 || cfg.fold >= cfg.folds) {
        throw ConfigError("fold must be in [0, folds) with folds >= 2");
    }
    if (cfg.rad_norm_p != 1 && cfg.rad_norm_p != 2) {
        throw ConfigError("rad_norm_p must be 1 or 2");
    }
    if (cfg.network != "teacher" && cfg.network != "student" && cfg.network != "custom") {
        throw ConfigError("network must be teacher, student or custom");
    }
    if (!(cfg.window.lo < cfg.window.hi)) {
        throw ConfigError("window_lo must be < window_hi");
    }
}

}  // namespace

TrainConfig parse_train_config(const std::string& text) {
    TrainConfig cfg;
    for (const auto& [key, value] : parse_kv_lines(text)) {
        if (key == "data") cfg.data_dir = value;
        else if (key == "network") cfg.network = value;
        else if (key == "net_depth") cfg.net_depth = std::stoi(value);
        else if (key == "net_base_channels") cfg.net_base_channels = std::stoi(value);
        else if (key == "net_growth") cfg.net_growth = std::stoi(value);
        else if (key == "net_skips") cfg.net_skips = parse_bool(value, key);
        else if (key == "epochs") cfg.epochs = std::stoi(value);
        else if (key == "batch_size") cfg.batch_size = std::stoi(value);
        else if (key == "lr_max") cfg.lr_max = std::stod(value);
        else if (key == "lr_min") cfg.lr_min = std::stod(value);
        else if (key == "adam_beta1") cfg.adam_beta1 = std::stod(value);
        else if (key == "adam_beta2") cfg.adam_beta2 = std::stod(value);
        else if (key == "adam_eps") cfg.adam_eps = std::stod(value);
        else if (key == "alpha") cfg.weights.alpha = std::stod(value);
        else if (key == "beta1") cfg.weights.beta1 = std::stod(value);
        else if (key == "beta2") cfg.weights.beta2 = std::stod(value);
        else if (key == "seg_loss") {
            if (value == "cross_entropy") cfg.seg_loss = distill::SegLossKind::cross_entropy;
            else if (value == "soft_dice") cfg.seg_loss = distill::SegLossKind::soft_dice;
            else throw ConfigError("seg_loss must be cross_entropy or soft_dice");
        } else if (key == "pmd_direction") {
            if (value == "s_to_t") cfg.pmd_direction = distill::KlDirection::student_to_teacher;
            else if (value == "t_to_s") cfg.pmd_direction = distill::KlDirection::teacher_to_student;
            else throw ConfigError("pmd_direction must be s_to_t or t_to_s");
        } else if (key == "temperature") cfg.temperature = std::stod(value);
        else if (key == "importance_exponent") cfg.importance_exponent = std::stod(value);
        else if (key == "rad_norm_p") cfg.rad_norm_p = std::stoi(value);
        else if (key == "rad_form") {
            if (value == "scalar") cfg.rad_form = distill::ContrastForm::scalar_mean;
            else if (value == "vector") cfg.rad_form = distill::ContrastForm::vector_all;
            else throw ConfigError("rad_form must be scalar or vector");
        } else if (key == "tap_policy") {
            if (value == "first_and_last") cfg.tap_policy = nets::TapPolicy::first_and_last;
            else if (value == "all_same_size") cfg.tap_policy = nets::TapPolicy::all_same_size;
            else throw ConfigError("tap_policy must be first_and_last or all_same_size");
        } else if (key == "seed") cfg.seed = std::stoull(value);
        else if (key == "fold") cfg.fold = std::stoi(value);
        else if (key == "folds") cfg.folds = std::stoi(value);
        else if (key == "augment") cfg.augment = parse_bool(value, key);
        else if (key == "window_lo") cfg.window.lo = std::stod(value);
        else if (key == "window_hi") cfg.window.hi = std::stod(value);
        else throw ConfigError("unknown config key: " + key);
    }
    validate(cfg);
    return cfg;
}

TrainConfig load_train_config(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw ConfigError("cannot open config file: " + path);
    }
    std::ostringstream text;
    text << in.rdbuf();
    return parse_train_config(text.str());
}

std::map<std::string, std::string> config_snapshot(const TrainConfig& cfg) {
    std::map<std::string, std::string> kv;
    kv["data"] = cfg.data_dir;
    kv["network"] = cfg.network;
    kv["net_depth"] = std::to_string(cfg.net_depth);
    kv["net_base_channels"] = std::to_string(cfg.net_base_channels);
    kv["net_growth"] = std::to_string(cfg.net_growth);
    kv["net_skips"] = cfg.net_skips ? "true" : "false";
    kv["epochs"] = std::to_string(cfg.epochs);
    kv["batch_size"] = std::to_string(cfg.batch_size);
    kv["lr_max"] = fmt_double(cfg.lr_max);
    kv["lr_min"] = fmt_double(cfg.lr_min);
    kv["adam_beta1"] = fmt_double(cfg.adam_beta1);
    kv["adam_beta2"] = fmt_double(cfg.adam_beta2);
    kv["adam_eps"] = fmt_double(cfg.adam_eps);
    kv["alpha"] = fmt_double(cfg.weights.alpha);
    kv["beta1"] = fmt_double(cfg.weights.beta1);
    kv["beta2"] = fmt_double(cfg.weights.beta2);
    kv["seg_loss"] = cfg.seg_loss == distill::SegLossKind::cross_entropy ? "cross_entropy" : "soft_dice";
    kv["pmd_direction"] = cfg.pmd_direction == distill::KlDirection::student_to_teacher ? "s_to_t" : "t_to_s";
    kv["temperature"] = fmt_double(cfg.temperature);
    kv["importance_exponent"] = fmt_double(cfg.importance_exponent);
    kv["rad_norm_p"] = std::to_string(cfg.rad_norm_p);
    kv["rad_form"] = cfg.rad_form == distill::ContrastForm::scalar_mean ? "scalar" : "vector";
    kv["tap_policy"] = cfg.tap_policy == nets::TapPolicy::first_and_last ? "first_and_last" : "all_same_size";
    kv["seed"] = std::to_string(cfg.seed);
    kv["fold"] = std::to_string(cfg.fold);
    kv["folds"] = std::to_string(cfg.folds);
    kv["augment"] = cfg.augment ? "true" : "false";
    kv["window_lo"] = fmt_double(cfg.window.lo);
    kv["window_hi"] = fmt_double(cfg.window.hi);
    return kv;
}

// ---------------------------------------------------------------------------
// Run report JSON

void write_run_report(const RunReport& report, const std::string& path) {
    json j;
    j["config"] = report.config;
    j["epochs"] = json::array();
    for (const auto& e : report.epochs) {
        j["epochs"].push_back({{"seg", e.seg}, {"pm", e.pm}, {"im", e.im}, {"ra", e.ra}, {"total", e.total},
                               {"lr", e.lr}, {"val_dice", e.val_dice}});
    }
    j["final_metrics"] = json::array();
    for (const auto& r : report.final_metrics) {
        j["final_metrics"].push_back({{"case_id", r.case_id}, {"class", r.class_id}, {"dice", r.dice},
                                      {"voe", r.voe}, {"voe_variant", metrics::voe_variant_name(r.voe_variant)},
                                      {"rvd", r.rvd_defined ? json(r.rvd) : json()},
                                      });
    }
    j["wall_clock_s"] = report.wall_clock_s;
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw DataError("cannot open run report for writing: " + path);
    }
    out << j.dump(2) << "\n";
}

RunReport read_run_report(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw DataError("cannot open run report: " + path);
    }
    json j;
    in >> j;
    RunReport report;
    for (const auto& [k, v] : j.at("config").items()) {
        report.config[k] = v.get<std::string>();
    }
    for (const auto& e : j.at("epochs")) {
        EpochRecord rec;
        rec.seg = e.at("seg").get<double>();
        rec.pm = e.at("pm").get<double>();
        rec.im = e.at("im").get<double>();
        rec.ra = e.at("ra").get<double>();
        rec.total = e.at("total").get<double>();
        rec.lr = e.at("lr").get<double>();
        rec.val_dice = e.at("val_dice").get<double>();
        report.epochs.push_back(rec);
    }
    for (const auto& r : j.at("final_metrics")) {
        metrics::MetricRow row;
        row.case_id = r.at("case_id").get<std::string>();
        row.class_id = r.at("class").get<int>();
        row.dice = r.at("dice").get<double>();
        row.voe = r.at("voe").get<double>();
        row.voe_variant = r.at("voe_variant").get<std::string>() == "union" ? metrics::VoeVariant::union_form
                                                                            : metrics::VoeVariant::as_printed;
        if (r.at("rvd").is_null()) {
            row.rvd_defined = false;
        } else {
            row.rvd = r.at("rvd").get<double>();
        }
        report.final_metrics.push_back(row);
    }
    report.wall_clock_s = j.at("wall_clock_s").get<double>();
    return report;
}

// ---------------------------------------------------------------------------
// Optimizer and schedule

void adam_step(std::vector<std::pair<std::string, Tensor>>& params, AdamState& state, double lr,
               double beta1, double beta2, double eps) {
    if (state.m.empty()) {
        for (const auto& [name, t] : params) {
            state.m.emplace_back(t.numel(), 0.0);
            state.v.emplace_back(t.numel(), 0.0);
        }
    }
    if (state.m.size() != params.size()) {
        throw ShapeError("adam_step: state does not match the parameter list");
    }
    state.step += 1;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(state.step));
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        Tensor& t = params[pi].second;
        if (state.m[pi].size() != t.numel()) {
            throw ShapeError("adam_step: moment buffers do not match parameter " + params[pi].first);
        }
        const std::vector<double>& g = t.grad();
        auto& m = state.m[pi];
        auto& v = state.v[pi];
        auto& p = t.data();
        for (std::size_t i = 0; i < p.size(); ++i) {
            m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            p[i] -= lr * mhat / (std::sqrt(vhat) + eps);
        }
        t.zero_grad();
    }
}

double cosine_lr(int epoch, int total_epochs, double lr_max, double lr_min) {
    if (total_epochs < 2) {
        return lr_max;
    }
    if (epoch < 0 || epoch >= total_epochs) {
        throw ValueError("cosine_lr: epoch out of range");
    }
    const double pi = 3.14159265358979323846;
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + std::cos(pi * epoch / (total_epochs - 1)));
}

// ---------------------------------------------------------------------------
// Teacher cache

const TeacherCache::Entry* TeacherCache::find(std::uint64_t key) const {
    const auto it = entries_.find(key);
    return it == entries_.end() ? nullptr : &it->second;
}

void TeacherCache::put(std::uint64_t key, Entry entry) { entries_.emplace(key, std::move(entry)); }

// ---------------------------------------------------------------------------
// Training internals

namespace {

struct SliceRef {
    int case_index = 0;
    int slice_index = 0;
    int global_index = 0;  // stable over the whole dataset, fold-independent
};

nets::NetworkConfig resolve_network(const TrainConfig& cfg, int num_classes) {
    if (cfg.network == "teacher") {
        return nets::NetworkConfig::teacher_preset(num_classes, cfg.seed);
    }
    if (cfg.network == "student") {
        return nets::NetworkConfig::student_preset(num_classes, cfg.seed);
    }
    return nets::NetworkConfig{cfg.net_depth, cfg.net_base_channels, cfg.net_growth, num_classes, cfg.net_skips,
                               cfg.seed};
}

nets::Network clone_network(const nets::Network& src) {
    nets::Network copy(src.config());
    for (std::size_t i = 0; i < copy.parameters().size(); ++i) {
        copy.parameters()[i].second.data() = src.parameters()[i].second.data();
    }
    return copy;
}

int d4_element_for(const TrainConfig& cfg, int epoch, int global_slice) {
    if (!cfg.augment) {
        return 0;
    }
    Rng rng(Rng::derive(cfg.seed * 0x10001ull + static_cast<std::uint64_t>(epoch),
                        0xA07000ull + static_cast<std::uint64_t>(global_slice)));
    return rng.uniform_int(0, 7);
}

Tensor batch_images(const std::vector<Tensor>& images_hw) {
    const int h = images_hw.front().extent(0);
    const int w = images_hw.front().extent(1);
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    std::vector<double> data(images_hw.size() * plane);
    for (std::size_t i = 0; i < images_hw.size(); ++i) {
        std::copy(images_hw[i].data().begin(), images_hw[i].data().end(),
                  data.begin() + static_cast<std::ptrdiff_t>(i * plane));
    }
    return Tensor::from_data({static_cast<int>(images_hw.size()), 1, h, w}, std::move(data), false);
}

// Concatenate per-item [1,...] constants into one [B,...] constant.
Tensor stack_batch(const std::vector<Tensor>& items) {
    std::vector<int> shape = items.front().shape();
    shape[0] = static_cast<int>(items.size());
    const std::size_t block = items.front().numel();
    std::vector<double> data(items.size() * block);
    for (std::size_t i = 0; i < items.size(); ++i) {
        std::copy(items[i].data().begin(), items[i].data().end(),
                  data.begin() + static_cast<std::ptrdiff_t>(i * block));
    }
    return Tensor::from_data(std::move(shape), std::move(data), false);
}

struct TeacherStep {
    Tensor logits;               // [B,C,H,W]
    nets::FeatureTaps taps;      // only the taps named in the pairing
};

class Trainer {
public:
    Trainer(const TrainConfig& cfg, const data::Dataset& ds, const nets::Network* teacher, TeacherCache* cache)
        : cfg_(cfg), ds_(ds), teacher_(teacher), cache_(cache) {
        if (ds.cases.empty()) {
            throw DataError("empty dataset");
        }
        num_classes_ = ds.spec.num_classes;
        net_ = nets::Network(resolve_network(cfg, num_classes_));

        auto [train_cases, test_cases] = fold_split(cfg, ds);
        train_cases_ = std::move(train_cases);
        val_cases_ = std::move(test_cases);

        int global = 0;
        for (int ci = 0; ci < static_cast<int>(ds.cases.size()); ++ci) {
            for (int si = 0; si < static_cast<int>(ds.cases[static_cast<std::size_t>(ci)].slices.size()); ++si) {
                if (std::find(train_cases_.begin(), train_cases_.end(), ci) != train_cases_.end()) {
                    train_slices_.push_back(SliceRef{ci, si, global});
                }
                ++global;
            }
        }
        if (train_slices_.empty()) {
            throw DataError("training split has no slices");
        }

        distilling_ = teacher_ != nullptr &&
                      (cfg.weights.alpha > 0.0 || cfg.weights.beta1 > 0.0 || cfg.weights.beta2 > 0.0);
        if (distilling_) {
            if (teacher_->config().num_classes != num_classes_) {
                throw ConfigError("teacher and dataset disagree on the class count");
            }
            if (!cache_) {
                local_cache_ = std::make_unique<TeacherCache>();
                cache_ = local_cache_.get();
            }
            // Pairing depends only on tap shapes, so probe with a zero image.
            const int size = ds.spec.image_size;
            const Tensor probe = Tensor::zeros({1, 1, size, size});
            const auto student_taps = net_.forward_with_taps(probe, false).second;
            const auto teacher_taps = teacher_->forward_with_taps(probe, false).second;
            pairing_ = nets::match_taps(student_taps, teacher_taps, cfg.tap_policy);
            for (const auto& pair : pairing_) {
                if (std::find(teacher_tap_names_.begin(), teacher_tap_names_.end(), pair.teacher_tap) ==
                    teacher_tap_names_.end()) {
                    teacher_tap_names_.push_back(pair.teacher_tap);
                }
            }
        }
    }

    TrainResult run() {
        const auto t0 = std::chrono::steady_clock::now();
        RunReport report;
        report.config = config_snapshot(cfg_);
        if (distilling_) {
            report.config["teacher_checksum_before"] = std::to_string(nets::params_checksum(*teacher_));
        }

        AdamState adam;
        nets::Network best = clone_network(net_);
        double best_dice = -1.0;

        for (int epoch = 0; epoch < cfg_.epochs; ++epoch) {
            const double lr = cosine_lr(epoch, cfg_.epochs, cfg_.lr_max, cfg_.lr_min);
            EpochRecord rec;
            rec.lr = lr;

            std::vector<SliceRef> order = train_slices_;
            Rng shuffle_rng(Rng::derive(cfg_.seed, 0xE70C0ull + static_cast<std::uint64_t>(epoch)));
            shuffle(order, shuffle_rng);

            int batches = 0;
            for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg_.batch_size)) {
                const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg_.batch_size));
                const auto losses = train_batch({order.begin() + static_cast<std::ptrdiff_t>(start),
                                                 order.begin() + static_cast<std::ptrdiff_t>(end)},
                                                epoch, lr, adam);
                rec.seg += losses[0];
                rec.pm += losses[1];
                rec.im += losses[2];
                rec.ra += losses[3];
                rec.total += losses[4];
                ++batches;
            }
            rec.seg /= batches;
            rec.pm /= batches;
            rec.im /= batches;
            rec.ra /= batches;
            rec.total /= batches;

            const EvalResult val = evaluate(net_, ds_, val_cases_, cfg_.window);
            rec.val_dice = val.mean_dice;
            report.epochs.push_back(rec);

            if (rec.val_dice > best_dice) {
                best_dice = rec.val_dice;
                best = clone_network(net_);
            }
        }

        const EvalResult final_eval = evaluate(net_, ds_, val_cases_, cfg_.window);
        report.final_metrics = final_eval.rows;
        if (distilling_) {
            const std::uint64_t after = nets::params_checksum(*teacher_);
            report.config["teacher_checksum_after"] = std::to_string(after);
            if (report.config["teacher_checksum_before"] != std::to_string(after)) {
                throw Error("teacher parameters changed during distillation");
            }
        }
        report.wall_clock_s =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        return TrainResult{std::move(net_), std::move(best), std::move(report)};
    }

private:
    // Returns {seg, pm, im, ra, total} batch means.
    std::array<double, 5> train_batch(std::vector<SliceRef> refs, int epoch, double lr, AdamState& adam) {
        std::vector<Tensor> images;
        std::vector<data::LabelMask> masks;
        std::vector<int> elements;
        for (const auto& ref : refs) {
            const auto& slice = ds_.cases[static_cast<std::size_t>(ref.case_index)]
                                    .slices[static_cast<std::size_t>(ref.slice_index)];
            const int elem = d4_element_for(cfg_, epoch, ref.global_index);
            elements.push_back(elem);
            images.push_back(data::apply_dihedral(data::hu_window(slice.image, cfg_.window), elem));
            masks.push_back(data::apply_dihedral(slice.mask, elem));
        }
        const Tensor input = batch_images(images);

        auto [logits, taps] = net_.forward_with_taps(input, true);
        const Tensor seg = distill::seg_loss(logits, masks, cfg_.seg_loss);

        Tensor pm = Tensor::scalar(0.0);
        Tensor im = Tensor::scalar(0.0);
        Tensor ra = Tensor::scalar(0.0);
        if (distilling_) {
            const TeacherStep teacher = teacher_step(refs, elements);
            if (cfg_.weights.alpha > 0.0) {
                pm = distill::pmd_loss(logits, teacher.logits, cfg_.pmd_direction, cfg_.temperature);
            }
            if (cfg_.weights.beta1 > 0.0) {
                im = distill::imd_loss(pairing_, taps, teacher.taps, cfg_.importance_exponent);
            }
            if (cfg_.weights.beta2 > 0.0) {
                ra = distill::rad_loss(pairing_, taps, teacher.taps, masks, num_classes_, cfg_.rad_norm_p,
                                       cfg_.rad_form);
            }
        }
        const Tensor total = distill::total_loss(seg, pm, im, ra, cfg_.weights);
        total.backward();
        adam_step(net_.parameters(), adam, lr, cfg_.adam_beta1, cfg_.adam_beta2, cfg_.adam_eps);
        return {seg.item(), pm.item(), im.item(), ra.item(), total.item()};
    }

    TeacherStep teacher_step(const std::vector<SliceRef>& refs, const std::vector<int>& elements) {
        std::vector<Tensor> logit_items;
        std::vector<std::vector<Tensor>> tap_items(teacher_tap_names_.size());
        for (std::size_t i = 0; i < refs.size(); ++i) {
            const std::uint64_t key = TeacherCache::key(refs[i].global_index, elements[i]);
            const TeacherCache::Entry* hit = cache_->find(key);
            if (!hit) {
                const auto& slice = ds_.cases[static_cast<std::size_t>(refs[i].case_index)]
                                        .slices[static_cast<std::size_t>(refs[i].slice_index)];
                const Tensor input = batch_images(
                    {data::apply_dihedral(data::hu_window(slice.image, cfg_.window), elements[i])});
                auto [logits, taps] = teacher_->forward_with_taps(input, false);
                TeacherCache::Entry entry;
                entry.logits = logits;
                for (const auto& name : teacher_tap_names_) {
                    entry.taps.taps.emplace_back(name, taps.at(name));
                }
                cache_->put(key, std::move(entry));
                hit = cache_->find(key);
            }
            logit_items.push_back(hit->logits);
            for (std::size_t t = 0; t < teacher_tap_names_.size(); ++t) {
                tap_items[t].push_back(hit->taps.at(teacher_tap_names_[t]));
            }
        }
        TeacherStep step;
        step.logits = stack_batch(logit_items);
        for (std::size_t t = 0; t < teacher_tap_names_.size(); ++t) {
            step.taps.taps.emplace_back(teacher_tap_names_[t], stack_batch(tap_items[t]));
        }
        return step;
    }

    TrainConfig cfg_;
    const data::Dataset& ds_;
    const nets::Network* teacher_;
    TeacherCache* cache_;
    std::unique_ptr<TeacherCache> local_cache_;
    nets::Network net_;
    int num_classes_ = 2;
    bool distilling_ = false;
    nets::TapPairing pairing_;
    std::vector<std::string> teacher_tap_names_;
    std::vector<int> train_cases_, val_cases_;
    std::vector<SliceRef> train_slices_;
};

}  // namespace

std::pair<std::vector<int>, std::vector<int>> fold_split(const TrainConfig& cfg, const data::Dataset& ds) {
    std::vector<int> ids(ds.cases.size());
    for (std::size_t i = 0; i < ids.size(); ++i) {
        ids[i] = static_cast<int>(i);
    }
    // Fold membership keys off the dataset seed so every run against one
    // dataset sees the same split regardless of its training seed.
    auto folds = data::make_folds(ids, cfg.folds, ds.spec.seed);
    return folds[static_cast<std::size_t>(cfg.fold)];
}

TrainResult train_network(const TrainConfig& cfg, const data::Dataset& ds) {
    TrainConfig plain = cfg;
    plain.weights = distill::DistillWeights{0.0, 0.0, 0.0};
    return Trainer(plain, ds, nullptr, nullptr).run();
}

TrainResult distill_student(const TrainConfig& cfg, const data::Dataset& ds, const nets::Network& teacher,
                            TeacherCache* cache) {
    return Trainer(cfg, ds, &teacher, cache).run();
}

// ---------------------------------------------------------------------------
// Evaluation

EvalResult evaluate(const nets::Network& net, const data::Dataset& ds, const std::vector<int>& case_indices,
                    const data::WindowSpec& window, metrics::VoeVariant variant) {
    if (case_indices.empty()) {
        throw DataError("evaluate: empty split");
    }
    const int classes = net.config().num_classes;
    EvalResult result;
    for (int ci : case_indices) {
        if (ci < 0 || ci >= static_cast<int>(ds.cases.size())) {
            throw DataError("evaluate: case index out of range");
        }
        const auto& c = ds.cases[static_cast<std::size_t>(ci)];
        const int slices = static_cast<int>(c.slices.size());
        const int h = c.slices.front().mask.h;
        const int w = c.slices.front().mask.w;
        const std::size_t plane = static_cast<std::size_t>(h) * w;

        std::vector<metrics::CaseVolume> pred, truth;
        for (int cls = 1; cls < classes; ++cls) {
            pred.emplace_back(c.id, slices, h, w);
            truth.emplace_back(c.id, slices, h, w);
        }

        std::vector<Tensor> images;
        images.reserve(c.slices.size());
        for (const auto& slice : c.slices) {
            images.push_back(data::hu_window(slice.image, window));
        }
        const Tensor logits = net.forward(batch_images(images), false);
        const auto& lv = logits.data();
        for (int si = 0; si < slices; ++si) {
            for (std::size_t j = 0; j < plane; ++j) {
                int best = 0;
                double best_v = lv[(static_cast<std::size_t>(si) * classes) * plane + j];
                for (int cls = 1; cls < classes; ++cls) {
                    const double v = lv[(static_cast<std::size_t>(si) * classes + cls) * plane + j];
                    if (v > best_v) {
                        best_v = v;
                        best = cls;
                    }
                }
                const int gt = c.slices[static_cast<std::size_t>(si)].mask.ids[j];
                for (int cls = 1; cls < classes; ++cls) {
                    if (best == cls) {
                        pred[static_cast<std::size_t>(cls - 1)].voxels[static_cast<std::size_t>(si) * plane + j] = 1;
                    }
                    if (gt == cls) {
                        truth[static_cast<std::size_t>(cls - 1)].voxels[static_cast<std::size_t>(si) * plane + j] = 1;
                    }
                }
            }
        }

        for (int cls = 1; cls < classes; ++cls) {
            const auto& p = pred[static_cast<std::size_t>(cls - 1)];
            const auto& g = truth[static_cast<std::size_t>(cls - 1)];
            metrics::MetricRow row;
            row.case_id = c.id;
            row.class_id = cls;
            row.dice = metrics::dice(p, g);
            row.voe = metrics::voe(p, g, variant);
            row.voe_variant = variant;
            try {
                row.rvd = metrics::rvd(p, g);
            } catch (const MetricError&) {
                row.rvd_defined = false;
            }
            result.rows.push_back(std::move(row));
        }
    }
    double acc = 0.0;
    for (const auto& r : result.rows) {
        acc += r.dice;
    }
    result.mean_dice = acc / static_cast<double>(result.rows.size());
    return result;
}

// ---------------------------------------------------------------------------
// Reporting

namespace {

std::string run_label(const std::map<std::string, std::string>& config) {
    std::string label;
    const auto get = [&](const std::string& k) {
        const auto it = config.find(k);
        return it == config.end() ? std::string("0") : it->second;
    };
    label = get("network");
    const bool pm = std::stod(get("alpha")) > 0.0;
    const bool im = std::stod(get("beta1")) > 0.0;
    const bool ra = std::stod(get("beta2")) > 0.0;
    if (pm) label += "+PMD";
    if (im) label += "+IMD";
    if (ra) label += "+RAD";
    return label;
}

}  // namespace

std::vector<ReportRow> collect_report(const std::vector<std::string>& run_dirs, std::vector<std::string>* skipped) {
    std::vector<ReportRow> rows;
    for (const auto& dir : run_dirs) {
        try {
            const RunReport report = read_run_report(dir + "/run_report.json");
            ReportRow row;
            row.run_dir = dir;
            row.label = run_label(report.config);
            row.wall_clock_s = report.wall_clock_s;
            std::vector<double> dices, voes, rvds;
            for (const auto& m : report.final_metrics) {
                dices.push_back(m.dice);
                voes.push_back(m.voe);
                if (m.rvd_defined) {
                    rvds.push_back(m.rvd);
                }
            }
            if (dices.empty()) {
                throw DataError("run report has no final metrics");
            }
            row.dice = metrics::aggregate_range(dices);
            row.voe = metrics::aggregate_range(voes);
            row.rvd = rvds.empty() ? metrics::MetricRange{} : metrics::aggregate_range(rvds);
            rows.push_back(std::move(row));
        } catch (const std::exception& e) {
            if (skipped) {
                skipped->push_back(dir + ": " + e.what());
            }
        }
    }
    std::stable_sort(rows.begin(), rows.end(),
                     [](const ReportRow& a, const ReportRow& b) { return a.dice.center > b.dice.center; });
    return rows;
}

std::string format_report_table(const std::vector<ReportRow>& rows) {
    std::ostringstream out;
    char line[256];
    std::snprintf(line, sizeof(line), "%-28s %-20s %-20s %-20s %10s\n", "run", "dice", "voe", "rvd", "time[s]");
    out << line;
    for (const auto& r : rows) {
        char dice[40], voe[40], rvd[40];
        std::snprintf(dice, sizeof(dice), "%.4f ± %.4f", r.dice.center, r.dice.half_width);
        std::snprintf(voe, sizeof(voe), "%.4f ± %.4f", r.voe.center, r.voe.half_width);
        std::snprintf(rvd, sizeof(rvd), "%.4f ± %.4f", r.rvd.center, r.rvd.half_width);
        std::snprintf(line, sizeof(line), "%-28s %-20s %-20s %-20s %10.1f\n", r.label.c_str(), dice, voe, rvd,
                      r.wall_clock_s);
        out << line;
    }
    return out.str();
}

std::string format_report_csv(const std::vector<ReportRow>& rows) {
    std::ostringstream out;
    out << "run_dir,label,dice_center,dice_half_width,voe_center,voe_half_width,rvd_center,rvd_half_width,"
           "wall_clock_s\n";
    out.precision(17);
    for (const auto& r : rows) {
        out << r.run_dir << ',' << r.label << ',' << r.dice.center << ',' << r.dice.half_width << ','
            << r.voe.center << ',' << r.voe.half_width << ',' << r.rvd.center << ',' << r.rvd.half_width << ','
            << r.wall_clock_s << '\n';
    }
    return out.str();
}

}  // namespace emkd::harness
