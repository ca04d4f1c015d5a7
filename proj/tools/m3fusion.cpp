#include <cstdint>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "m3f/data_pipeline.hpp"
#include "m3f/fusion_model.hpp"
#include "m3f/gradcheck_suite.hpp"
#include "m3f/metrics.hpp"
#include "m3f/train.hpp"

extern "C" void openblas_set_num_threads(int);

namespace {

using namespace m3f;

void print_resolved(const CLI::App& sub, uint64_t seed) {
    std::cout << "# resolved config (" << sub.get_name() << ")\n";
    for (const CLI::Option* opt : sub.get_options()) {
        if (opt->get_lnames().empty()) continue;
        std::cout << "#   " << opt->get_lnames()[0] << " = ";
        const auto& results = opt->results();
        if (results.empty()) {
            std::cout << opt->get_default_str();
        } else {
            for (size_t i = 0; i < results.size(); ++i)
                std::cout << (i ? " " : "") << results[i];
        }
        std::cout << "\n";
    }
    if (sub.get_option_no_throw("--seed") == nullptr)
        std::cout << "#   seed = " << seed << "\n";
}

template <typename T>
std::vector<T> read_flat(const std::string& path, size_t count, const char* what) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error(std::string("cannot open ") + what + ": " + path);
    std::vector<T> v(count);
    is.read(reinterpret_cast<char*>(v.data()),
            static_cast<std::streamsize>(count * sizeof(T)));
    if (!is)
        throw io::TruncatedFile(std::string(what) + " file too short: " + path);
    return v;
}

struct SynthArgs {
    SynthConfig cfg;
    std::string out, train_out, test_out;
    double train_fraction = 0.3;
    uint64_t split_seed = 0;
    bool do_normalize = false;
};

int run_synth(const SynthArgs& a) {
    Dataset ds = synth_generate(a.cfg);
    if (!a.out.empty()) {
        save_dataset(ds, a.out);
        std::cout << "wrote " << ds.samples.size() << " samples to " << a.out << "\n";
    }
    if (!a.train_out.empty() || !a.test_out.empty()) {
        if (a.train_out.empty() || a.test_out.empty())
            throw std::invalid_argument("synth: need both --train-out and --test-out");
        auto [tr, te] = split_dataset(ds, static_cast<real>(a.train_fraction), a.split_seed);
        if (a.do_normalize) normalize(tr, te);
        save_dataset(tr, a.train_out);
        save_dataset(te, a.test_out);
        std::cout << "wrote " << tr.samples.size() << " train samples to " << a.train_out
                  << ", " << te.samples.size() << " test samples to " << a.test_out << "\n";
    }
    return 0;
}

struct PrepArgs {
    std::string manifest, out;
};

int run_prep(const PrepArgs& a) {
    std::ifstream mf(a.manifest);
    if (!mf) throw std::runtime_error("cannot open manifest: " + a.manifest);
    nlohmann::json j;
    mf >> j;

    RawSeriesCube cube;
    cube.n_dates = j.at("dates").get<int>();
    cube.bands = j.at("bands").get<int>();
    cube.height = j.at("height").get<int>();
    cube.width = j.at("width").get<int>();
    const size_t cells = static_cast<size_t>(cube.n_dates) * cube.bands * cube.height *
                         cube.width;
    {
        auto raw = read_flat<float>(j.at("series").get<std::string>(), cells, "series");
        cube.data.assign(raw.begin(), raw.end());
    }
    if (j.contains("mask")) {
        cube.valid = read_flat<uint8_t>(j.at("mask").get<std::string>(), cells, "mask");
    } else {
        cube.valid.assign(cells, 1);
    }
    cube.check();

    const int ch = j.at("image_channels").get<int>();
    const int hv = kBlockScale * cube.height, wv = kBlockScale * cube.width;
    Tensor vhsr({ch, hv, wv});
    {
        auto raw = read_flat<float>(j.at("image").get<std::string>(),
                                    static_cast<size_t>(ch) * hv * wv, "image");
        vhsr.data.assign(raw.begin(), raw.end());
    }

    GroundTruth gt;
    gt.height = cube.height;
    gt.width = cube.width;
    const size_t pixels = static_cast<size_t>(gt.height) * gt.width;
    {
        auto raw = read_flat<int32_t>(j.at("labels").get<std::string>(), pixels, "labels");
        gt.labels.assign(raw.begin(), raw.end());
    }
    gt.objects = read_flat<uint32_t>(j.at("objects").get<std::string>(), pixels, "objects");

    const int window = j.value("window", 25);
    Dataset ds = assemble_dataset(cube, vhsr, gt, window);
    save_dataset(ds, a.out);
    std::cout << "wrote " << ds.samples.size() << " samples (" << ds.ts_vars
              << " series variables) to " << a.out << "\n";
    return 0;
}

struct FitArgs {
    std::string dataset, test_dataset, checkpoint, loss_log, report, confusion;
    TrainConfig cfg;
    std::string branch = "full";
};

Branch parse_branch(const std::string& name) {
    if (name == "full") return Branch::Full;
    if (name == "rnn") return Branch::RnnOnly;
    if (name == "cnn") return Branch::CnnOnly;
    throw std::invalid_argument("unknown branch: " + name);
}

void emit_report(const MetricsReport& report, const std::string& report_path,
                 const std::string& confusion_path) {
    const std::string text = metrics_to_json(report);
    if (report_path.empty()) {
        std::cout << text;
    } else {
        std::ofstream os(report_path);
        if (!os) throw std::runtime_error("cannot open report: " + report_path);
        os << text;
    }
    if (!confusion_path.empty()) save_confusion_csv(report, confusion_path);
    std::cout << "accuracy " << report.accuracy << "  macro_f " << report.macro_f
              << "  weighted_f " << report.weighted_f << "\n";
}

int run_train(const FitArgs& a) {
    Dataset ds = load_dataset(a.dataset);
    TrainConfig cfg = a.cfg;
    cfg.checkpoint_path = a.checkpoint;
    cfg.loss_log_path = a.loss_log;
    TrainResult result = train(ds, cfg, parse_branch(a.branch));
    std::cout << "best epoch " << result.best_epoch << "  train L_total " << result.best_loss
              << "\n";
    if (!a.test_dataset.empty()) {
        Dataset test = load_dataset(a.test_dataset);
        auto report = evaluate(result.model, test, cfg.batch_size, parse_branch(a.branch));
        emit_report(report, a.report, a.confusion);
    }
    return 0;
}

int run_eval(const FitArgs& a) {
    Dataset test = load_dataset(a.dataset);
    FusionModel model = FusionModel::load(a.checkpoint);
    auto report = evaluate(model, test, a.cfg.batch_size);
    emit_report(report, a.report, a.confusion);
    return 0;
}

int run_baseline(const FitArgs& a) {
    Dataset tr = load_dataset(a.dataset);
    Dataset te = load_dataset(a.test_dataset);
    std::cout << "stacked input size " << stacked_input_size(tr) << "\n";
    auto report = baseline_stacked(tr, te, a.cfg);
    emit_report(report, a.report, a.confusion);
    return 0;
}

int run_ablate(const FitArgs& a) {
    Dataset tr = load_dataset(a.dataset);
    Dataset te = load_dataset(a.test_dataset);
    TrainConfig cfg = a.cfg;
    cfg.checkpoint_path = a.checkpoint;
    cfg.loss_log_path = a.loss_log;
    auto [result, report] = ablation(tr, te, cfg, parse_branch(a.branch));
    std::cout << "best epoch " << result.best_epoch << "  train loss " << result.best_loss
              << "\n";
    emit_report(report, a.report, a.confusion);
    return 0;
}

struct HeatmapArgs {
    std::string confusion, out;
    int classes = 0;
    int cell = 16;
};

int run_heatmap(const HeatmapArgs& a) {
    MetricsReport r;
    r.classes = a.classes;
    r.confusion = load_confusion_csv(a.confusion, a.classes);
    emit_heatmap(r, a.out, a.cell);
    std::cout << "wrote " << a.out << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    openblas_set_num_threads(1);
    CLI::App app{"M3Fusion: dual-branch land-cover classification"};
    app.require_subcommand(1);
    app.set_config("--config");

    SynthArgs synth;
    auto* synth_cmd = app.add_subcommand("synth", "generate a synthetic dataset");
    synth_cmd->add_option("--out", synth.out, "dataset output path");
    synth_cmd->add_option("--train-out", synth.train_out, "training split output path");
    synth_cmd->add_option("--test-out", synth.test_out, "test split output path");
    synth_cmd->add_option("--train-fraction", synth.train_fraction,
                          "object fraction for the training split")
        ->capture_default_str();
    synth_cmd->add_option("--split-seed", synth.split_seed, "object split seed")
        ->capture_default_str();
    synth_cmd->add_flag("--normalize", synth.do_normalize,
                        "min-max normalize (train-split bounds)");
    synth_cmd->add_option("--temporal-classes", synth.cfg.temporal_classes)
        ->capture_default_str();
    synth_cmd->add_option("--spatial-classes", synth.cfg.spatial_classes)
        ->capture_default_str();
    synth_cmd->add_option("--samples-per-class", synth.cfg.samples_per_class)
        ->capture_default_str();
    synth_cmd->add_option("--samples-per-object", synth.cfg.samples_per_object)
        ->capture_default_str();
    synth_cmd->add_option("--dates", synth.cfg.n_dates)->capture_default_str();
    synth_cmd->add_option("--ts-vars", synth.cfg.ts_vars)->capture_default_str();
    synth_cmd->add_option("--channels", synth.cfg.channels)->capture_default_str();
    synth_cmd->add_option("--patch", synth.cfg.patch)->capture_default_str();
    synth_cmd->add_option("--noise", synth.cfg.noise)->capture_default_str();
    synth_cmd->add_option("--seed", synth.cfg.seed)->capture_default_str();

    PrepArgs prep;
    auto* prep_cmd = app.add_subcommand("prep", "raw binary dumps -> dataset file");
    prep_cmd->add_option("--manifest", prep.manifest, "JSON manifest describing the inputs")
        ->required();
    prep_cmd->add_option("--out", prep.out, "dataset output path")->required();

    auto add_fit_options = [](CLI::App* cmd, FitArgs& a, bool with_model) {
        cmd->add_option("--lr", a.cfg.lr, "learning rate")->capture_default_str();
        cmd->add_option("--epochs", a.cfg.epochs)->capture_default_str();
        cmd->add_option("--batch", a.cfg.batch_size)->capture_default_str();
        cmd->add_option("--seed", a.cfg.seed)->capture_default_str();
        cmd->add_option("--report", a.report, "metrics JSON output path (default stdout)");
        cmd->add_option("--confusion", a.confusion, "confusion CSV output path");
        if (with_model) {
            cmd->add_option("--alpha1", a.cfg.alpha1)->capture_default_str();
            cmd->add_option("--alpha2", a.cfg.alpha2)->capture_default_str();
            cmd->add_option("--hidden", a.cfg.hidden, "GRU hidden size d")
                ->capture_default_str();
            cmd->add_option("--width-div", a.cfg.cnn_width_div, "CNN width divisor")
                ->capture_default_str();
            cmd->add_option("--loss-log", a.loss_log, "per-epoch loss CSV path");
            cmd->add_flag("--quiet", a.cfg.quiet, "suppress per-epoch progress");
        }
    };

    FitArgs train_args;
    auto* train_cmd = app.add_subcommand("train", "train the fusion model");
    train_cmd->add_option("--dataset", train_args.dataset, "training split file")->required();
    train_cmd->add_option("--test", train_args.test_dataset,
                          "optional test split to evaluate after training");
    train_cmd->add_option("--checkpoint", train_args.checkpoint, "best-model output path");
    add_fit_options(train_cmd, train_args, true);

    FitArgs eval_args;
    auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint");
    eval_cmd->add_option("--dataset", eval_args.dataset, "test split file")->required();
    eval_cmd->add_option("--checkpoint", eval_args.checkpoint, "model checkpoint")->required();
    add_fit_options(eval_cmd, eval_args, false);

    FitArgs baseline_args;
    auto* baseline_cmd =
        app.add_subcommand("baseline", "stacked-feature softmax baseline");
    baseline_cmd->add_option("--train", baseline_args.dataset, "training split file")
        ->required();
    baseline_cmd->add_option("--test", baseline_args.test_dataset, "test split file")
        ->required();
    add_fit_options(baseline_cmd, baseline_args, false);

    FitArgs ablate_args;
    auto* ablate_cmd = app.add_subcommand("ablate", "single-branch ablation");
    ablate_cmd->add_option("--train", ablate_args.dataset, "training split file")->required();
    ablate_cmd->add_option("--test", ablate_args.test_dataset, "test split file")->required();
    ablate_cmd->add_option("--branch", ablate_args.branch, "rnn or cnn")->required();
    ablate_cmd->add_option("--checkpoint", ablate_args.checkpoint, "best-model output path");
    add_fit_options(ablate_cmd, ablate_args, true);

    uint64_t gradcheck_seed = 42;
    bool reduced = false;
    auto* gradcheck_cmd =
        app.add_subcommand("gradcheck", "finite-difference gradient verification");
    gradcheck_cmd->add_flag("--reduced", reduced, "reduced-dims op and model suite");
    gradcheck_cmd->add_option("--seed", gradcheck_seed)->capture_default_str();

    HeatmapArgs heatmap;
    auto* heatmap_cmd = app.add_subcommand("heatmap", "confusion CSV -> PPM heatmap");
    heatmap_cmd->add_option("--confusion", heatmap.confusion, "confusion CSV path")
        ->required();
    heatmap_cmd->add_option("--classes", heatmap.classes, "class count")->required();
    heatmap_cmd->add_option("--out", heatmap.out, "PPM output path")->required();
    heatmap_cmd->add_option("--cell", heatmap.cell, "pixels per matrix cell")
        ->capture_default_str();

    CLI11_PARSE(app, argc, argv);

    try {
        if (synth_cmd->parsed()) {
            print_resolved(*synth_cmd, synth.cfg.seed);
            return run_synth(synth);
        }
        if (prep_cmd->parsed()) {
            print_resolved(*prep_cmd, 0);
            return run_prep(prep);
        }
        if (train_cmd->parsed()) {
            print_resolved(*train_cmd, train_args.cfg.seed);
            return run_train(train_args);
        }
        if (eval_cmd->parsed()) {
            print_resolved(*eval_cmd, eval_args.cfg.seed);
            return run_eval(eval_args);
        }
        if (baseline_cmd->parsed()) {
            print_resolved(*baseline_cmd, baseline_args.cfg.seed);
            return run_baseline(baseline_args);
        }
        if (ablate_cmd->parsed()) {
            print_resolved(*ablate_cmd, ablate_args.cfg.seed);
            return run_ablate(ablate_args);
        }
        if (gradcheck_cmd->parsed()) {
            print_resolved(*gradcheck_cmd, gradcheck_seed);
            (void)reduced;  // the reduced suite is the only profile
            auto suite = run_reduced_gradcheck(std::cout, gradcheck_seed);
            return suite.passed ? 0 : 1;
        }
        if (heatmap_cmd->parsed()) {
            print_resolved(*heatmap_cmd, 0);
            return run_heatmap(heatmap);
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
