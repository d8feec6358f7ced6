// xkd: single entry point for the CT-supervised X-ray training pipeline.
// Subcommands cover the whole flow: synth -> ingest -> split/resample ->
// train/matrix/ablate -> report -> audit. Every subcommand is a thin shell
// over the library; a config file provides defaults and flags override it.

#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

#include "xkd/experiments.hpp"
#include "xkd/reporting.hpp"
#include "xkd/synthetic.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct CliConfig {
    std::string csv, images, out;
    xkd::ColumnMap columns;
    xkd::TrainConfig train;
    xkd::DistillParams distill;
    std::vector<uint64_t> seeds{42, 43, 44, 45};
    double val_fraction = 0.2;
    uint64_t split_seed = 42;
    int n_resamples = 8;
    int n_val_patients = 5;
    int n_val_negative = 1;
    uint64_t resample_base_seed = 100;
    int jobs = 1;
};

void reject_unknown(const json& j, const std::vector<std::string>& known, const std::string& where) {
    for (const auto& [key, value] : j.items()) {
        (void)value;
        if (std::find(known.begin(), known.end(), key) == known.end())
            xkd::fail("config: unknown key '" + key + "' in " + where);
    }
}

CliConfig load_config_file(const std::string& path) {
    CliConfig c;
    std::ifstream in(path);
    if (!in) xkd::fail("cannot open config file: " + path);
    json j = json::parse(in);
    reject_unknown(j, {"csv", "images", "out", "columns", "train", "distill", "seeds",
                       "val_fraction", "split_seed", "resample", "jobs"},
                   "top level");
    c.csv = j.value("csv", "");
    c.images = j.value("images", "");
    c.out = j.value("out", "");
    if (j.contains("columns")) {
        const json& cm = j["columns"];
        reject_unknown(cm, {"patient", "finding", "modality", "filename", "offset"}, "columns");
        c.columns.patient = cm.value("patient", c.columns.patient);
        c.columns.finding = cm.value("finding", c.columns.finding);
        c.columns.modality = cm.value("modality", c.columns.modality);
        c.columns.filename = cm.value("filename", c.columns.filename);
        c.columns.offset = cm.value("offset", c.columns.offset);
    }
    if (j.contains("train")) {
        const json& t = j["train"];
        reject_unknown(t, {"learning_rate", "batch_size", "epochs", "input_size", "weight_decay",
                           "sampler", "seed"},
                       "train");
        c.train.learning_rate = t.value("learning_rate", c.train.learning_rate);
        c.train.batch_size = t.value("batch_size", c.train.batch_size);
        c.train.epochs = t.value("epochs", c.train.epochs);
        c.train.input_size = t.value("input_size", c.train.input_size);
        c.train.weight_decay = t.value("weight_decay", c.train.weight_decay);
        if (t.contains("sampler")) c.train.sampler = xkd::sampler_from_name(t["sampler"]);
        c.train.seed = t.value("seed", c.train.seed);
    }
    if (j.contains("distill")) {
        const json& d = j["distill"];
        reject_unknown(d, {"temperature", "alpha", "mechanism", "mechanism_weight"}, "distill");
        c.distill.temperature = d.value("temperature", c.distill.temperature);
        c.distill.alpha = d.value("alpha", c.distill.alpha);
        if (d.contains("mechanism")) c.distill.mechanism = xkd::mechanism_from_name(d["mechanism"]);
        c.distill.mechanism_weight = d.value("mechanism_weight", c.distill.mechanism_weight);
    }
    if (j.contains("seeds")) c.seeds = j["seeds"].get<std::vector<uint64_t>>();
    c.val_fraction = j.value("val_fraction", c.val_fraction);
    c.split_seed = j.value("split_seed", c.split_seed);
    if (j.contains("resample")) {
        const json& r = j["resample"];
        reject_unknown(r, {"n", "val_patients", "val_negatives", "base_seed"}, "resample");
        c.n_resamples = r.value("n", c.n_resamples);
        c.n_val_patients = r.value("val_patients", c.n_val_patients);
        c.n_val_negative = r.value("val_negatives", c.n_val_negative);
        c.resample_base_seed = r.value("base_seed", c.resample_base_seed);
    }
    c.jobs = j.value("jobs", c.jobs);
    return c;
}

xkd::MatrixOptions matrix_options(const CliConfig& c) {
    xkd::MatrixOptions o;
    o.train = c.train;
    o.distill = c.distill;
    o.out_root = c.out;
    o.manifest_dir = (fs::path(c.out) / "manifests").string();
    o.val_fraction = c.val_fraction;
    o.split_seed = c.split_seed;
    o.seeds = c.seeds;
    o.n_resamples = c.n_resamples;
    o.n_val_patients = c.n_val_patients;
    o.n_val_negative = c.n_val_negative;
    o.resample_base_seed = c.resample_base_seed;
    o.jobs = c.jobs;
    return o;
}

json effective_config_json(const CliConfig& c) {
    return json{{"csv", c.csv},
                {"images", c.images},
                {"out", c.out},
                {"columns", json{{"patient", c.columns.patient},
                                 {"finding", c.columns.finding},
                                 {"modality", c.columns.modality},
                                 {"filename", c.columns.filename},
                                 {"offset", c.columns.offset}}},
                {"train", json{{"learning_rate", c.train.learning_rate},
                               {"batch_size", c.train.batch_size},
                               {"epochs", c.train.epochs},
                               {"input_size", c.train.input_size},
                               {"weight_decay", c.train.weight_decay},
                               {"sampler", xkd::sampler_name(c.train.sampler)},
                               {"seed", c.train.seed}}},
                {"distill", json{{"temperature", c.distill.temperature},
                                 {"alpha", c.distill.alpha},
                                 {"mechanism", xkd::mechanism_name(c.distill.mechanism)},
                                 {"mechanism_weight", c.distill.mechanism_weight}}},
                {"seeds", c.seeds},
                {"val_fraction", c.val_fraction},
                {"split_seed", c.split_seed},
                {"resample", json{{"n", c.n_resamples},
                                  {"val_patients", c.n_val_patients},
                                  {"val_negatives", c.n_val_negative},
                                  {"base_seed", c.resample_base_seed}}},
                {"jobs", c.jobs}};
}

void persist_effective_config(const CliConfig& c) {
    if (c.out.empty()) return;
    fs::create_directories(c.out);
    std::ofstream out(fs::path(c.out) / "effective_config.json");
    out << effective_config_json(c).dump(2) << "\n";
}

xkd::Manifests require_manifests(const CliConfig& c) {
    if (c.out.empty()) xkd::fail("--out is required");
    const std::string dir = (fs::path(c.out) / "manifests").string();
    if (!fs::exists(fs::path(dir) / "paired_xray_target.csv"))
        xkd::fail("no manifests under " + dir + "; run `xkd ingest` first");
    return xkd::load_manifests(dir);
}

int cmd_synth(const CliConfig& c, const xkd::SynthConfig& sc) {
    if (c.out.empty()) xkd::fail("--out is required");
    auto cohort = xkd::generate_cohort(sc, c.out);
    std::cout << "synthetic cohort: " << cohort.csv_path << " (" << cohort.n_images << " images, "
              << cohort.n_positive_patients << " positive / " << cohort.n_negative_patients
              << " negative patients)\n";
    return 0;
}

int cmd_ingest(const CliConfig& c) {
    if (c.csv.empty() || c.images.empty() || c.out.empty())
        xkd::fail("ingest needs --csv, --images and --out");
    auto raw = xkd::ingest_metadata(c.csv, c.columns);
    auto norm = xkd::normalize_records(raw, c.images);
    std::cerr << "drop tally: todo=" << norm.tally.todo << " missing_file=" << norm.tally.missing_file
              << " bad_modality=" << norm.tally.bad_modality << " (kept " << norm.records.size()
              << " of " << raw.size() << ")\n";

    xkd::Manifests m;
    m.all_xray = xkd::build_manifest(norm.records, xkd::ManifestKind::all_xray);
    m.all_ct = xkd::build_manifest(norm.records, xkd::ManifestKind::all_ct);
    m.paired = xkd::build_paired_manifest(norm.records);
    const std::string dir = (fs::path(c.out) / "manifests").string();
    xkd::write_manifests(m, dir);
    for (const auto& [name, manifest] :
         {std::pair<std::string, const xkd::Manifest*>{"all_xray", &m.all_xray},
          {"all_ct", &m.all_ct},
          {"paired_xray_target", &m.paired}}) {
        std::ofstream st(fs::path(dir) / (name + ".stats.json"));
        st << xkd::stats_to_json(manifest->stats) << "\n";
        std::cout << name << ": " << xkd::stats_to_json(manifest->stats) << "\n";
    }
    persist_effective_config(c);
    return 0;
}

int cmd_split(const CliConfig& c, const std::string& which) {
    auto m = require_manifests(c);
    const xkd::Manifest& manifest = which == "all_xray" ? m.all_xray
                                    : which == "all_ct" ? m.all_ct
                                                        : m.paired;
    auto split = xkd::fixed_split(manifest, c.val_fraction, c.split_seed);
    fs::create_directories(fs::path(c.out) / "splits");
    const std::string path =
        (fs::path(c.out) / "splits" / (which + "_fixed_s" + std::to_string(c.split_seed) + ".json"))
            .string();
    xkd::write_split(split, path);
    std::cout << "split: " << path << " (" << split.train_patients.size() << " train / "
              << split.val_patients.size() << " val patients; " << split.train_images.size()
              << " / " << split.val_images.size() << " images)\n";
    return 0;
}

int cmd_resample(const CliConfig& c) {
    auto m = require_manifests(c);
    auto plan = xkd::resample_plan(m.paired, c.n_resamples, c.n_val_patients, c.n_val_negative,
                                   c.resample_base_seed);
    fs::create_directories(fs::path(c.out) / "splits");
    const std::string path = (fs::path(c.out) / "splits" / "resample_plan.json").string();
    xkd::write_plan(plan, path);
    std::cout << "resample plan: " << path << " (" << plan.splits.size() << " splits)\n";
    return 0;
}

int cmd_train(const CliConfig& c, const std::string& spec_name, uint64_t seed) {
    auto manifests = require_manifests(c);
    xkd::MatrixRunner runner(manifests, matrix_options(c));
    persist_effective_config(c);

    if (spec_name == "teacher_only_ct") {
        auto sr = runner.run_reference_ct();
        std::cout << "reference-only spec " << sr.spec.name << ": mean accuracy "
                  << xkd::fmt_fixed(sr.summary.mean.accuracy, 3) << "\n";
        return 0;
    }
    xkd::ExperimentSpec spec = xkd::make_variant_spec(xkd::variant_from_name(spec_name), c.distill);
    spec.sampler = c.train.sampler;
    spec.seeds = {seed};
    xkd::SplitSpec split;
    std::string split_id;
    if (spec.variant == xkd::Variant::teacher_only_xray) {
        split = xkd::fixed_split(manifests.all_xray, c.val_fraction, c.split_seed);
        split_id = "axrfixed";
    } else {
        split = xkd::fixed_split(manifests.paired, c.val_fraction, c.split_seed);
        split_id = "fixed";
    }
    const std::string run_id = runner.execute_run(spec, split, split_id, seed);
    std::cout << "run complete: " << run_id << "\n";
    return 0;
}

int cmd_matrix(const CliConfig& c, const std::string& regime) {
    auto manifests = require_manifests(c);
    xkd::MatrixRunner runner(manifests, matrix_options(c));
    persist_effective_config(c);
    xkd::MatrixResult m =
        regime == "resampled" ? runner.run_resampled_matrix() : runner.run_fixed_matrix();
    const fs::path sum = fs::path(c.out) / "summaries";
    xkd::export_table(m, xkd::TableFormat::delimited, (sum / (m.name + ".csv")).string());
    xkd::export_figure(m,
                       m.regime == xkd::Regime::resampled ? xkd::FigureKind::resample_strip
                                                          : xkd::FigureKind::bars_with_points,
                       (sum / (m.name + ".svg")).string());
    xkd::write_run_manifest(c.out);
    std::cout << xkd::render_table(m, xkd::TableFormat::delimited);
    return 0;
}

int cmd_ablate(const CliConfig& c, const std::string& mode) {
    auto manifests = require_manifests(c);
    xkd::MatrixRunner runner(manifests, matrix_options(c));
    persist_effective_config(c);
    const fs::path sum = fs::path(c.out) / "summaries";
    if (mode == "grid") {
        auto grid = runner.run_grid_ablation();
        xkd::export_grid_figure(grid, (sum / "grid_ablation.svg").string());
        for (size_t t = 0; t < grid.temperatures.size(); ++t)
            for (size_t a = 0; a < grid.alphas.size(); ++a)
                std::cout << "T=" << grid.temperatures[t] << " alpha=" << grid.alphas[a]
                          << " macro_f1=" << xkd::fmt_fixed(grid.macro_f1[t][a], 3) << "\n";
    } else {
        xkd::MatrixResult m;
        if (mode == "modules") m = runner.run_module_ablation();
        else if (mode == "progressive") m = runner.run_progressive();
        else if (mode == "sampler") m = runner.run_sampler_control().matrix;
        else xkd::fail("ablate mode must be one of grid|modules|progressive|sampler");
        xkd::export_table(m, xkd::TableFormat::delimited, (sum / (m.name + ".csv")).string());
        xkd::export_figure(m, xkd::FigureKind::bars_with_points, (sum / (m.name + ".svg")).string());
        std::cout << xkd::render_table(m, xkd::TableFormat::delimited);
    }
    xkd::write_run_manifest(c.out);
    return 0;
}

int cmd_report(const CliConfig& c, const std::string& format) {
    if (c.out.empty()) xkd::fail("--out is required");
    xkd::export_all_summaries(c.out, format == "markdown" ? xkd::TableFormat::markdown
                                                          : xkd::TableFormat::delimited);
    xkd::write_hypothesis_report(c.out);
    xkd::write_run_manifest(c.out);
    std::cout << "report written under " << (fs::path(c.out) / "summaries").string() << "\n";
    return 0;
}

int cmd_audit(const std::string& root) {
    auto report = xkd::audit_check(root);
    if (report.pass) {
        std::cout << "audit: pass\n";
        return 0;
    }
    for (const auto& f : report.failures) std::cout << "audit: FAIL " << f << "\n";
    return 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"training-only CT supervision for X-ray classifiers: cohort, splits, "
                 "distillation matrix, reporting, audit"};
    app.require_subcommand(1);

    std::string config_path, csv, images, out, format = "delimited", regime = "fixed";
    uint64_t seed_flag = 0;
    bool seed_set = false;
    int jobs_flag = 0;
    app.add_option("--config", config_path, "JSON config file (flags override it)");

    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--csv", csv, "metadata CSV path");
        sub->add_option("--images", images, "image root directory");
        sub->add_option("--out", out, "output root directory");
        sub->add_option("--seed", seed_flag, "seed override")->each([&](std::string) { seed_set = true; });
        sub->add_option("--jobs", jobs_flag, "worker processes for matrix execution");
    };

    xkd::SynthConfig synth_cfg;
    auto* synth = app.add_subcommand("synth", "generate a synthetic paired cohort");
    add_common(synth);
    synth->add_option("--patients", synth_cfg.n_patients, "number of patients");
    synth->add_option("--prevalence", synth_cfg.prevalence, "positive-patient fraction");
    synth->add_option("--xray-signal", synth_cfg.xray_signal, "X-ray class-signal amplitude");
    synth->add_option("--ct-signal", synth_cfg.ct_signal, "CT class-signal amplitude");
    synth->add_option("--noise", synth_cfg.noise_std, "background noise std");
    synth->add_option("--size", synth_cfg.image_size, "image size in pixels");
    synth->add_option("--todo-rows", synth_cfg.n_todo_rows, "planted placeholder rows");

    auto* ingest = app.add_subcommand("ingest", "build manifests and stats from a metadata CSV");
    add_common(ingest);

    std::string split_manifest = "paired_xray_target";
    auto* split = app.add_subcommand("split", "emit a patient-level fixed split");
    add_common(split);
    split->add_option("--manifest", split_manifest, "all_xray | all_ct | paired_xray_target");

    auto* resample = app.add_subcommand("resample", "emit the Monte Carlo resample plan");
    add_common(resample);

    std::string train_spec = "student_only";
    auto* train = app.add_subcommand("train", "run one experiment spec on the fixed split");
    add_common(train);
    train->add_option("--spec", train_spec, "variant name (e.g. plain_cross_modal_kd)");

    auto* matrix = app.add_subcommand("matrix", "run the fixed or resampled experiment matrix");
    add_common(matrix);
    matrix->add_option("--regime", regime, "fixed | resampled");

    std::string ablate_mode;
    auto* ablate = app.add_subcommand("ablate", "grid | modules | progressive | sampler");
    add_common(ablate);
    ablate->add_option("mode", ablate_mode, "ablation mode")->required();

    auto* report = app.add_subcommand("report", "export tables, figures, hypothesis ledger, manifest");
    add_common(report);
    report->add_option("--format", format, "delimited | markdown");

    std::string audit_root;
    auto* audit = app.add_subcommand("audit", "verify digests and recompute summaries");
    audit->add_option("root", audit_root, "output root to audit")->required();

    std::string job_path;
    auto* train_job = app.add_subcommand("train-job", "execute a serialized run job (internal)");
    train_job->add_option("job", job_path, "job JSON path")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 2;  // usage problems exit 2
    }

    try {
        CliConfig cfg;
        if (!config_path.empty()) cfg = load_config_file(config_path);
        if (!csv.empty()) cfg.csv = csv;
        if (!images.empty()) cfg.images = images;
        if (!out.empty()) cfg.out = out;
        if (seed_set) {
            cfg.train.seed = seed_flag;
            cfg.split_seed = seed_flag;
            cfg.seeds = {seed_flag};
        }
        if (jobs_flag > 0) cfg.jobs = jobs_flag;

        if (synth->parsed()) {
            if (seed_set) synth_cfg.seed = seed_flag;
            return cmd_synth(cfg, synth_cfg);
        }
        if (ingest->parsed()) return cmd_ingest(cfg);
        if (split->parsed()) return cmd_split(cfg, split_manifest);
        if (resample->parsed()) return cmd_resample(cfg);
        if (train->parsed()) return cmd_train(cfg, train_spec, seed_set ? seed_flag : cfg.train.seed);
        if (matrix->parsed()) return cmd_matrix(cfg, regime);
        if (ablate->parsed()) return cmd_ablate(cfg, ablate_mode);
        if (report->parsed()) return cmd_report(cfg, format);
        if (audit->parsed()) return cmd_audit(audit_root);
        if (train_job->parsed()) {
            xkd::execute_job_file(job_path);
            return 0;
        }
        xkd::fail("no subcommand");
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
