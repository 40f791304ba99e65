#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "emkd/data.hpp"
#include "emkd/distill.hpp"
#include "emkd/error.hpp"
#include "emkd/harness.hpp"
#include "emkd/metrics.hpp"
#include "emkd/nets.hpp"
#include "emkd/oracle.hpp"
#include "emkd/rng.hpp"
#include "emkd/tensor.hpp"

namespace fs = std::filesystem;
using namespace emkd;

namespace {

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw ConfigError("cannot open file: " + path);
    }
    std::ostringstream text;
    text << in.rdbuf();
    return text.str();
}

void save_run(const harness::TrainResult& result, const std::string& out_dir) {
    fs::create_directories(out_dir);
    nets::save_network(result.model, out_dir + "/model_last.emkm");
    nets::save_network(result.best_model, out_dir + "/model_best.emkm");
    harness::write_run_report(result.report, out_dir + "/run_report.json");
    metrics::write_metrics_csv(out_dir + "/metrics.csv", result.report.final_metrics);
    std::printf("wrote %s/{model_last.emkm,model_best.emkm,run_report.json,metrics.csv}\n", out_dir.c_str());
    if (!result.report.epochs.empty()) {
        std::printf("final: total=%.6f val_dice=%.4f (%.1fs)\n", result.report.epochs.back().total,
                    result.report.epochs.back().val_dice, result.report.wall_clock_s);
    }
}

// ---------------------------------------------------------------------------
// gradcheck suites

oracle::Grid to_grid(const Tensor& t) {
    oracle::Grid g;
    const auto& s = t.shape();
    int dims[4] = {1, 1, 1, 1};
    const int pad = 4 - static_cast<int>(s.size());
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

struct CheckResult {
    std::string name;
    double worst = 0.0;
    bool ok = true;
};

using CheckFn = CheckResult (*)();

double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        worst = std::max(worst, std::abs(a[i] - b[i]));
    }
    return worst;
}

CheckResult check_conv2d() {
    CheckResult r{"conv2d", 0.0, true};
    Rng rng(1001);
    for (int it = 0; it < 20; ++it) {
        const Tensor x = rand_uniform({1, 2, 6, 6}, -1.0, 1.0, rng);
        const Tensor k = rand_uniform({3, 2, 3, 3}, -1.0, 1.0, rng);
        const Tensor b = rand_uniform({3}, -1.0, 1.0, rng);
        const Tensor y = conv2d(x, k, b, 1, 1);
        r.worst = std::max(r.worst, max_abs_diff(y.data(), oracle::ref_conv2d(to_grid(x), to_grid(k), b.data(), 1, 1).v));
        r.worst = std::max(r.worst, grad_check([&](const Tensor& t) { return sum(mul(conv2d(t, k, b, 1, 1),
                                                                                     conv2d(t, k, b, 1, 1))); },
                                               x, 1e-5));
        r.worst = std::max(r.worst, grad_check([&](const Tensor& t) { return sum(conv2d(x, t, b, 1, 1)); }, k, 1e-5));
    }
    r.ok = r.worst < 1e-4;
    return r;
}

CheckResult check_pools() {
    CheckResult r{"avg_pool2d", 0.0, true};
    Rng rng(1002);
    for (int it = 0; it < 20; ++it) {
        const Tensor x = rand_uniform({1, 2, 4, 4}, -1.0, 1.0, rng);
        r.worst = std::max(r.worst, max_abs_diff(avg_pool2d(x, 2).data(), oracle::ref_avg_pool2d(to_grid(x), 2).v));
        r.worst = std::max(r.worst, grad_check([](const Tensor& t) { return sum(mul(avg_pool2d(t, 2),
                                                                                    avg_pool2d(t, 2))); }, x, 1e-5));
    }
    r.ok = r.worst < 1e-4;
    return r;
}

CheckResult check_max_pool() {
    CheckResult r{"max_pool2d", 0.0, true};
    Rng rng(1003);
    for (int it = 0; it < 20; ++it) {
        std::vector<double> vals(2 * 16);
        for (std::size_t i = 0; i < vals.size(); ++i) {
            vals[i] = static_cast<double>(i % 9) + rng.uniform(0.0, 0.3);
        }
        const Tensor x = Tensor::from_data({1, 2, 4, 4}, vals);
        r.worst = std::max(r.worst, max_abs_diff(max_pool2d(x, 2).data(), oracle::ref_max_pool2d(to_grid(x), 2).v));
        r.worst = std::max(r.worst, grad_check([](const Tensor& t) { return sum(mul(max_pool2d(t, 2),
                                                                                    max_pool2d(t, 2))); }, x, 1e-5));
    }
    r.ok = r.worst < 1e-4;
    return r;
}

CheckResult check_upsample() {
    CheckResult r{"upsample_nearest", 0.0, true};
    Rng rng(1004);
    for (int it = 0; it < 20; ++it) {
        const Tensor x = rand_uniform({1, 2, 3, 3}, -1.0, 1.0, rng);
        r.worst = std::max(r.worst, max_abs_diff(upsample_nearest(x, 2).data(),
                                                 oracle::ref_upsample_nearest(to_grid(x), 2).v));
        r.worst = std::max(r.worst, grad_check([](const Tensor& t) {
            return sum(mul(upsample_nearest(t, 2), upsample_nearest(t, 2)));
        }, x, 1e-5));
        const Tensor back = avg_pool2d(upsample_nearest(x, 2), 2);
        if (back.data() != x.data()) {
            r.ok = false;
        }
    }
    r.ok = r.ok && r.worst < 1e-4;
    return r;
}

CheckResult check_softmax() {
    CheckResult r{"channel_softmax", 0.0, true};
    Rng rng(1005);
    for (int it = 0; it < 20; ++it) {
        const Tensor x = rand_uniform({1, 3, 3, 3}, -2.0, 2.0, rng);
        r.worst = std::max(r.worst, max_abs_diff(channel_softmax(x).data(), oracle::ref_channel_softmax(to_grid(x)).v));
        r.worst = std::max(r.worst, grad_check([](const Tensor& t) {
            const Tensor p = channel_softmax(t);
            return sum(mul(p, p));
        }, x, 1e-5));
    }
    r.ok = r.worst < 1e-4;
    return r;
}

CheckResult check_pmd() {
    CheckResult r{"pmd", 0.0, true};
    Rng rng(1006);
    for (int it = 0; it < 20; ++it) {
        const Tensor s = rand_uniform({1, 2, 4, 4}, -1.0, 1.0, rng);
        const Tensor t = rand_uniform({1, 2, 4, 4}, -1.0, 1.0, rng);
        r.worst = std::max(r.worst, std::abs(distill::pmd_loss(s, t).item() -
                                             oracle::ref_pmd(to_grid(s), to_grid(t), false)));
        r.worst = std::max(r.worst, grad_check([&](const Tensor& q) { return distill::pmd_loss(q, t); }, s, 1e-5));
    }
    r.ok = r.worst < 1e-4;
    return r;
}

CheckResult check_imd() {
    CheckResult r{"imd", 0.0, true};
    Rng rng(1007);
    const nets::TapPairing pairing{{"t0", "t0"}};
    for (int it = 0; it < 20; ++it) {
        const Tensor s = rand_uniform({1, 2, 4, 4}, -1.0, 1.0, rng);
        const Tensor t = rand_uniform({1, 3, 4, 4}, -1.0, 1.0, rng);
        nets::FeatureTaps st, tt;
        st.taps.emplace_back("t0", s);
        tt.taps.emplace_back("t0", t);
        r.worst = std::max(r.worst, std::abs(distill::imd_loss(pairing, st, tt).item() -
                                             oracle::ref_imd_pair(to_grid(s), to_grid(t), 2.0)));
        r.worst = std::max(r.worst, grad_check([&](const Tensor& q) {
            nets::FeatureTaps qt;
            qt.taps.emplace_back("t0", q);
            return distill::imd_loss(pairing, qt, tt);
        }, s, 1e-5));
    }
    r.ok = r.worst < 1e-4;
    return r;
}

CheckResult check_rad() {
    CheckResult r{"rad", 0.0, true};
    Rng rng(1008);
    const nets::TapPairing pairing{{"t0", "t0"}};
    for (int it = 0; it < 20; ++it) {
        const Tensor s = rand_uniform({1, 2, 4, 4}, -1.0, 1.0, rng);
        const Tensor t = rand_uniform({1, 3, 4, 4}, -1.0, 1.0, rng);
        data::LabelMask mask(4, 4, 2);
        for (auto& id : mask.ids) {
            id = static_cast<std::uint8_t>(rng.uniform_int(0, 1));
        }
        nets::FeatureTaps st, tt;
        st.taps.emplace_back("t0", s);
        tt.taps.emplace_back("t0", t);
        r.worst = std::max(r.worst, std::abs(distill::rad_loss(pairing, st, tt, {mask}, 2).item() -
                                             oracle::ref_rad_pair(to_grid(s), to_grid(t), mask.ids, 4, 4, 2, 2,
                                                                  false)));
        r.worst = std::max(r.worst, grad_check([&](const Tensor& q) {
            nets::FeatureTaps qt;
            qt.taps.emplace_back("t0", q);
            return distill::rad_loss(pairing, qt, tt, {mask}, 2);
        }, s, 1e-5));
    }
    r.ok = r.worst < 1e-4;
    return r;
}

CheckResult check_seg(const char* name, distill::SegLossKind kind) {
    CheckResult r{name, 0.0, true};
    Rng rng(1009);
    for (int it = 0; it < 20; ++it) {
        const Tensor logits = rand_uniform({1, 2, 4, 4}, -1.0, 1.0, rng);
        data::LabelMask mask(4, 4, 2);
        for (auto& id : mask.ids) {
            id = static_cast<std::uint8_t>(rng.uniform_int(0, 1));
        }
        std::vector<std::uint8_t> flat(mask.ids);
        const double want = kind == distill::SegLossKind::cross_entropy
                                ? oracle::ref_seg_cross_entropy(to_grid(logits), flat)
                                : oracle::ref_seg_soft_dice(to_grid(logits), flat);
        r.worst = std::max(r.worst, std::abs(distill::seg_loss(logits, {mask}, kind).item() - want));
        r.worst = std::max(r.worst, grad_check([&](const Tensor& q) {
            return distill::seg_loss(q, {mask}, kind);
        }, logits, 1e-5));
    }
    r.ok = r.worst < 1e-4;
    return r;
}

CheckResult check_total() {
    CheckResult r{"total", 0.0, true};
    Rng rng(1010);
    const nets::TapPairing pairing{{"t0", "t0"}};
    for (int it = 0; it < 20; ++it) {
        const Tensor tlogits = rand_uniform({1, 2, 4, 4}, -1.0, 1.0, rng);
        const Tensor tfeat = rand_uniform({1, 2, 4, 4}, -1.0, 1.0, rng);
        data::LabelMask mask(4, 4, 2);
        for (auto& id : mask.ids) {
            id = static_cast<std::uint8_t>(rng.uniform_int(0, 1));
        }
        nets::FeatureTaps tt;
        tt.taps.emplace_back("t0", tfeat);
        const Tensor slogits = rand_uniform({1, 2, 4, 4}, -1.0, 1.0, rng);
        r.worst = std::max(r.worst, grad_check([&](const Tensor& q) {
            nets::FeatureTaps qt;
            qt.taps.emplace_back("t0", q);
            const Tensor seg = distill::seg_loss(slogits, {mask}, distill::SegLossKind::cross_entropy);
            const Tensor pm = distill::pmd_loss(slogits, tlogits);
            const Tensor im = distill::imd_loss(pairing, qt, tt);
            const Tensor ra = distill::rad_loss(pairing, qt, tt, {mask}, 2);
            return distill::total_loss(seg, pm, im, ra, distill::DistillWeights{});
        }, rand_uniform({1, 2, 4, 4}, -1.0, 1.0, rng), 1e-5));
    }
    r.ok = r.worst < 1e-4;
    return r;
}

CheckResult check_metrics() {
    CheckResult r{"metrics", 0.0, true};
    Rng rng(1011);
    for (int it = 0; it < 200; ++it) {
        metrics::CaseVolume p("p", 1, 4, 4), g("g", 1, 4, 4);
        for (auto& v : p.voxels) {
            v = rng.uniform_int(0, 1);
        }
        for (auto& v : g.voxels) {
            v = rng.uniform_int(0, 1);
        }
        const auto ref = oracle::ref_metrics(p.voxels, g.voxels);
        r.worst = std::max(r.worst, std::abs(metrics::dice(p, g) - ref.dice));
        r.worst = std::max(r.worst, std::abs(metrics::voe(p, g) - ref.voe_printed));
        r.worst = std::max(r.worst, std::abs(metrics::voe(p, g, metrics::VoeVariant::union_form) - ref.voe_union));
        if (ref.rvd_defined) {
            r.worst = std::max(r.worst, std::abs(metrics::rvd(p, g) - ref.rvd));
        }
    }
    r.ok = r.worst < 1e-12;
    return r;
}

int run_gradcheck(const std::string& only) {
    const std::vector<std::pair<std::string, std::function<CheckResult()>>> checks = {
        {"conv2d", check_conv2d},
        {"avg_pool2d", check_pools},
        {"max_pool2d", check_max_pool},
        {"upsample_nearest", check_upsample},
        {"channel_softmax", check_softmax},
        {"pmd", check_pmd},
        {"imd", check_imd},
        {"rad", check_rad},
        {"seg_ce", [] { return check_seg("seg_ce", distill::SegLossKind::cross_entropy); }},
        {"seg_dice", [] { return check_seg("seg_dice", distill::SegLossKind::soft_dice); }},
        {"total", check_total},
        {"metrics", check_metrics},
    };
    bool all_ok = true;
    bool matched = false;
    for (const auto& [name, fn] : checks) {
        if (!only.empty() && name != only) {
            continue;
        }
        matched = true;
        const CheckResult r = fn();
        std::printf("%-18s worst=%.3e  %s\n", r.name.c_str(), r.worst, r.ok ? "ok" : "FAIL");
        all_ok = all_ok && r.ok;
    }
    if (!matched) {
        std::fprintf(stderr, "no such op: %s\n", only.c_str());
        return 2;
    }
    return all_ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"desk-scale knowledge-distillation laboratory for encoder-decoder segmentation"};
    app.require_subcommand(1);

    // gen-data
    auto* gen = app.add_subcommand("gen-data", "generate a synthetic CT-like dataset");
    std::string gen_spec, gen_out;
    gen->add_option("--spec", gen_spec, "dataset spec file (key = value); defaults when omitted");
    gen->add_option("--out", gen_out, "output dataset directory")->required();

    // train
    auto* train = app.add_subcommand("train", "train a network with the segmentation loss only");
    std::string train_cfg, train_out;
    train->add_option("--config", train_cfg, "training config file")->required();
    train->add_option("--out", train_out, "output run directory")->required();

    // distill
    auto* dist = app.add_subcommand("distill", "train a student against a frozen teacher");
    std::string dist_cfg, dist_teacher, dist_out;
    dist->add_option("--config", dist_cfg, "training config file")->required();
    dist->add_option("--teacher", dist_teacher, "teacher model file")->required();
    dist->add_option("--out", dist_out, "output run directory")->required();

    // eval
    auto* ev = app.add_subcommand("eval", "evaluate a model on a dataset split");
    std::string ev_model, ev_data, ev_split = "test", ev_out;
    int ev_fold = 0, ev_folds = 5;
    bool ev_union = false;
    ev->add_option("--model", ev_model)->required();
    ev->add_option("--data", ev_data)->required();
    ev->add_option("--split", ev_split, "test | train | all");
    ev->add_option("--out", ev_out, "metrics csv path")->required();
    ev->add_option("--fold", ev_fold);
    ev->add_option("--folds", ev_folds);
    ev->add_flag("--voe-union", ev_union, "report the union-form VOE instead of the printed formula");

    // gradcheck
    auto* gc = app.add_subcommand("gradcheck", "finite-difference and oracle checks");
    std::string gc_op;
    gc->add_option("--op", gc_op, "restrict to one op");

    // report
    auto* rep = app.add_subcommand("report", "tabulate run directories");
    std::vector<std::string> rep_dirs;
    std::string rep_out = "report.csv";
    rep->add_option("dirs", rep_dirs, "run directories")->required();
    rep->add_option("--out", rep_out, "csv output path");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*gen) {
            data::DatasetSpec spec;
            if (!gen_spec.empty()) {
                spec = data::parse_dataset_spec(read_file(gen_spec));
            }
            const data::Dataset ds = data::generate_dataset(spec);
            data::write_dataset(ds, gen_out);
            int slices = 0;
            for (const auto& c : ds.cases) {
                slices += static_cast<int>(c.slices.size());
            }
            std::printf("wrote %d cases (%d slices) to %s\n", spec.num_cases, slices, gen_out.c_str());
        } else if (*train) {
            const harness::TrainConfig cfg = harness::load_train_config(train_cfg);
            const data::Dataset ds = data::load_dataset(cfg.data_dir);
            save_run(harness::train_network(cfg, ds), train_out);
        } else if (*dist) {
            const harness::TrainConfig cfg = harness::load_train_config(dist_cfg);
            const data::Dataset ds = data::load_dataset(cfg.data_dir);
            const nets::Network teacher = nets::load_network(dist_teacher);
            save_run(harness::distill_student(cfg, ds, teacher), dist_out);
        } else if (*ev) {
            const nets::Network net = nets::load_network(ev_model);
            const data::Dataset ds = data::load_dataset(ev_data);
            harness::TrainConfig cfg;
            cfg.fold = ev_fold;
            cfg.folds = ev_folds;
            std::vector<int> cases;
            if (ev_split == "all") {
                for (int i = 0; i < static_cast<int>(ds.cases.size()); ++i) {
                    cases.push_back(i);
                }
            } else if (ev_split == "train") {
                cases = harness::fold_split(cfg, ds).first;
            } else if (ev_split == "test") {
                cases = harness::fold_split(cfg, ds).second;
            } else {
                throw ConfigError("split must be test, train or all");
            }
            const auto result = harness::evaluate(net, ds, cases, harness::TrainConfig{}.window,
                                                  ev_union ? metrics::VoeVariant::union_form
                                                           : metrics::VoeVariant::as_printed);
            metrics::write_metrics_csv(ev_out, result.rows);
            std::printf("wrote %zu rows to %s (mean dice %.4f)\n", result.rows.size(), ev_out.c_str(),
                        result.mean_dice);
        } else if (*gc) {
            return run_gradcheck(gc_op);
        } else if (*rep) {
            std::vector<std::string> skipped;
            const auto rows = harness::collect_report(rep_dirs, &skipped);
            for (const auto& s : skipped) {
                std::fprintf(stderr, "warning: skipped %s\n", s.c_str());
            }
            std::fputs(harness::format_report_table(rows).c_str(), stdout);
            std::ofstream csv(rep_out, std::ios::binary);
            csv << harness::format_report_csv(rows);
            std::printf("wrote %s\n", rep_out.c_str());
        }
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
