#include "xkd/experiments.hpp"

#include <spawn.h>
#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "xkd/digest.hpp"

extern char** environ;

namespace fs = std::filesystem;

namespace xkd {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Names and canonical specs
// ---------------------------------------------------------------------------

const char* variant_name(Variant v) {
    switch (v) {
        case Variant::teacher_only_xray: return "teacher_only_xray";
        case Variant::teacher_only_ct: return "teacher_only_ct";
        case Variant::student_only: return "student_only";
        case Variant::late_fusion: return "late_fusion";
        case Variant::same_modality_kd: return "same_modality_kd";
        case Variant::plain_cross_modal_kd: return "plain_cross_modal_kd";
        case Variant::attention_transfer: return "attention_transfer";
        case Variant::feature_hint: return "feature_hint";
        case Variant::full_jdcnet: return "full_jdcnet";
        case Variant::custom: return "custom";
    }
    return "?";
}

Variant variant_from_name(const std::string& name) {
    for (Variant v : {Variant::teacher_only_xray, Variant::teacher_only_ct, Variant::student_only,
                      Variant::late_fusion, Variant::same_modality_kd, Variant::plain_cross_modal_kd,
                      Variant::attention_transfer, Variant::feature_hint, Variant::full_jdcnet,
                      Variant::custom})
        if (name == variant_name(v)) return v;
    fail("unknown variant '" + name + "'");
}

const char* regime_name(Regime r) { return r == Regime::fixed_split ? "fixed_split" : "resampled"; }

const char* hypothesis_state_name(HypothesisState s) {
    switch (s) {
        case HypothesisState::tentative_fixed_split_only: return "tentative_fixed_split_only";
        case HypothesisState::not_supported: return "not_supported";
        case HypothesisState::supported: return "supported";
    }
    return "?";
}

ExperimentSpec make_variant_spec(Variant v, const DistillParams& distill_defaults) {
    ExperimentSpec s;
    s.variant = v;
    s.name = variant_name(v);
    s.distill = distill_defaults;
    s.distill.mechanism = Mechanism::none;
    switch (v) {
        case Variant::teacher_only_xray:
            s.role = "Reference only";
            break;
        case Variant::teacher_only_ct:
            s.role = "Data-availability reference";
            s.reference_only = true;
            break;
        case Variant::student_only:
            s.role = "Paired baseline";
            break;
        case Variant::late_fusion:
            s.role = "Fusion control";
            break;
        case Variant::same_modality_kd:
            s.role = "Same-modality control";
            s.distill.mechanism = Mechanism::logit_kd;
            break;
        case Variant::plain_cross_modal_kd:
            s.role = "Stripped-down transfer test";
            s.distill.mechanism = Mechanism::logit_kd;
            break;
        case Variant::attention_transfer:
            s.role = "Mechanism control";
            s.distill.mechanism = Mechanism::attention_transfer;
            break;
        case Variant::feature_hint:
            s.role = "Mechanism control";
            s.distill.mechanism = Mechanism::feature_hint;
            break;
        case Variant::full_jdcnet:
            s.role = "Proposed-module test";
            s.distill.mechanism = Mechanism::logit_kd;
            s.flags = {true, true, true};
            break;
        case Variant::custom:
            fail("make_variant_spec: custom specs must be built explicitly");
    }
    return s;
}

void validate_spec(const ExperimentSpec& spec) {
    spec.distill.validate();
    if (spec.name.empty()) fail("ExperimentSpec: empty name");
    if (spec.variant == Variant::custom) return;
    ExperimentSpec canon = make_variant_spec(spec.variant, spec.distill);
    if (spec.flags.dpe != canon.flags.dpe || spec.flags.mhra != canon.flags.mhra ||
        spec.flags.dfpn != canon.flags.dfpn)
        fail("ExperimentSpec '" + spec.name + "': module flags inconsistent with variant " +
             variant_name(spec.variant));
    if (spec.distill.mechanism != canon.distill.mechanism)
        fail("ExperimentSpec '" + spec.name + "': mechanism inconsistent with variant " +
             variant_name(spec.variant));
}

static json flags_json(const ModuleFlags& f) {
    return json{{"dpe", f.dpe}, {"mhra", f.mhra}, {"dfpn", f.dfpn}};
}
static ModuleFlags flags_from_json(const json& j) {
    return {j.at("dpe").get<bool>(), j.at("mhra").get<bool>(), j.at("dfpn").get<bool>()};
}
static json distill_json(const DistillParams& d) {
    return json{{"temperature", d.temperature},
                {"alpha", d.alpha},
                {"mechanism", mechanism_name(d.mechanism)},
                {"mechanism_weight", d.mechanism_weight}};
}
static DistillParams distill_from_json(const json& j) {
    DistillParams d;
    d.temperature = j.at("temperature").get<double>();
    d.alpha = j.at("alpha").get<double>();
    d.mechanism = mechanism_from_name(j.at("mechanism").get<std::string>());
    d.mechanism_weight = j.at("mechanism_weight").get<double>();
    return d;
}

static json spec_json(const ExperimentSpec& s) {
    return json{{"name", s.name},
                {"variant", variant_name(s.variant)},
                {"role", s.role},
                {"flags", flags_json(s.flags)},
                {"distill", distill_json(s.distill)},
                {"sampler", sampler_name(s.sampler)},
                {"seeds", s.seeds},
                {"regime", regime_name(s.regime)},
                {"reference_only", s.reference_only}};
}

static ExperimentSpec spec_from(const json& j) {
    ExperimentSpec s;
    s.name = j.at("name").get<std::string>();
    s.variant = variant_from_name(j.at("variant").get<std::string>());
    s.role = j.value("role", "");
    s.flags = flags_from_json(j.at("flags"));
    s.distill = distill_from_json(j.at("distill"));
    s.sampler = sampler_from_name(j.at("sampler").get<std::string>());
    s.seeds = j.value("seeds", std::vector<uint64_t>{});
    s.regime = j.at("regime").get<std::string>() == "resampled" ? Regime::resampled : Regime::fixed_split;
    s.reference_only = j.value("reference_only", false);
    return s;
}

std::string spec_to_json(const ExperimentSpec& spec) { return spec_json(spec).dump(2); }
ExperimentSpec spec_from_json(const std::string& text) { return spec_from(json::parse(text)); }

// ---------------------------------------------------------------------------
// Manifests on disk
// ---------------------------------------------------------------------------

Manifests load_manifests(const std::string& manifest_dir) {
    Manifests m;
    m.all_xray = read_manifest((fs::path(manifest_dir) / "all_xray.csv").string());
    m.all_ct = read_manifest((fs::path(manifest_dir) / "all_ct.csv").string());
    m.paired = read_manifest((fs::path(manifest_dir) / "paired_xray_target.csv").string());
    return m;
}

void write_manifests(const Manifests& m, const std::string& manifest_dir) {
    fs::create_directories(manifest_dir);
    write_manifest(m.all_xray, (fs::path(manifest_dir) / "all_xray.csv").string());
    write_manifest(m.all_ct, (fs::path(manifest_dir) / "all_ct.csv").string());
    write_manifest(m.paired, (fs::path(manifest_dir) / "paired_xray_target.csv").string());
}

// ---------------------------------------------------------------------------
// MatrixResult helpers
// ---------------------------------------------------------------------------

const SpecResult* MatrixResult::find(const std::string& spec_name) const {
    for (const auto& s : specs)
        if (s.spec.name == spec_name) return &s;
    return nullptr;
}

std::string matrix_support_banner(const Manifest& manifest, const SplitSpec& split) {
    std::set<std::string> val(split.val_patients.begin(), split.val_patients.end());
    long imgs = 0, pos = 0, neg = 0;
    for (const auto& r : manifest.records) {
        if (!val.count(r.patient_id)) continue;
        ++imgs;
        if (r.label == Label::positive) ++pos;
        else ++neg;
    }
    std::ostringstream os;
    os << "shared paired split: " << split.val_patients.size() << " validation patients / " << imgs
       << " images (" << pos << " positive, " << neg << " negative)";
    return os.str();
}

// ---------------------------------------------------------------------------
// MatrixRunner
// ---------------------------------------------------------------------------

MatrixRunner::MatrixRunner(Manifests manifests, MatrixOptions options)
    : manifests_(std::move(manifests)), options_(std::move(options)) {
    if (options_.out_root.empty()) fail("MatrixRunner: out_root is required");
    fs::create_directories(fs::path(options_.out_root) / "runs");
    fs::create_directories(fs::path(options_.out_root) / "summaries");
}

const SplitSpec& MatrixRunner::paired_fixed_split() {
    if (!have_paired_split_) {
        paired_fixed_split_ = fixed_split(manifests_.paired, options_.val_fraction, options_.split_seed);
        have_paired_split_ = true;
    }
    return paired_fixed_split_;
}

std::string MatrixRunner::run_dir(const std::string& run_id) const {
    return (fs::path(options_.out_root) / "runs" / run_id).string();
}

static std::string sanitize_id(std::string s) {
    for (auto& c : s)
        if (!std::isalnum(static_cast<unsigned char>(c)) && c != '_' && c != '.' && c != '-') c = '-';
    return s;
}

static std::string make_run_id(const std::string& spec_name, const std::string& split_id,
                               uint64_t seed) {
    return sanitize_id(spec_name + "__" + split_id + "__s" + std::to_string(seed));
}

// Items the trained model consumes, per variant. aux_path carries the second
// modality where one is needed.
std::vector<TrainItem> items_for(const Manifest& manifest, const ExperimentSpec& spec,
                                 const std::vector<std::string>& patients) {
    std::set<std::string> wanted(patients.begin(), patients.end());
    std::vector<TrainItem> out;
    const bool cross_modal = spec.variant == Variant::plain_cross_modal_kd ||
                             spec.variant == Variant::attention_transfer ||
                             spec.variant == Variant::feature_hint ||
                             spec.variant == Variant::full_jdcnet ||
                             (spec.variant == Variant::custom &&
                              spec.distill.mechanism != Mechanism::none);
    if (spec.variant == Variant::late_fusion || cross_modal) {
        for (const auto& p : manifest.pairs) {
            if (!wanted.count(p.xray.patient_id)) continue;
            out.push_back({p.xray.image_path, p.xray.label == Label::positive ? 1 : 0, p.ct.image_path});
        }
    } else if (spec.variant == Variant::same_modality_kd) {
        for (const auto& r : manifest.records) {
            if (!wanted.count(r.patient_id)) continue;
            out.push_back({r.image_path, r.label == Label::positive ? 1 : 0, r.image_path});
        }
    } else {
        for (const auto& r : manifest.records) {
            if (!wanted.count(r.patient_id)) continue;
            out.push_back({r.image_path, r.label == Label::positive ? 1 : 0, ""});
        }
    }
    return out;
}

static const Manifest& manifest_for(const Manifests& m, const ExperimentSpec& spec) {
    switch (spec.variant) {
        case Variant::teacher_only_xray: return m.all_xray;
        case Variant::teacher_only_ct: return m.all_ct;
        default: return m.paired;
    }
}

std::vector<TrainItem> MatrixRunner::spec_train_items(const ExperimentSpec& spec,
                                                      const SplitSpec& split) const {
    return items_for(manifest_for(manifests_, spec), spec, split.train_patients);
}
std::vector<TrainItem> MatrixRunner::spec_val_items(const ExperimentSpec& spec,
                                                    const SplitSpec& split) const {
    return items_for(manifest_for(manifests_, spec), spec, split.val_patients);
}

// Unique CT records of the given patients, from the paired manifest.
static std::vector<TrainItem> paired_ct_items(const Manifest& paired,
                                              const std::vector<std::string>& patients) {
    std::set<std::string> wanted(patients.begin(), patients.end());
    std::set<std::string> seen;
    std::vector<TrainItem> out;
    for (const auto& p : paired.pairs) {
        if (!wanted.count(p.ct.patient_id)) continue;
        if (!seen.insert(p.ct.image_path).second) continue;
        out.push_back({p.ct.image_path, p.ct.label == Label::positive ? 1 : 0, ""});
    }
    return out;
}

static std::vector<TrainItem> paired_xray_items(const Manifest& paired,
                                                const std::vector<std::string>& patients) {
    std::set<std::string> wanted(patients.begin(), patients.end());
    std::vector<TrainItem> out;
    for (const auto& r : paired.records)
        if (wanted.count(r.patient_id)) out.push_back({r.image_path, r.label == Label::positive ? 1 : 0, ""});
    return out;
}

static json arch_json(const BackboneConfig& a) {
    return json{{"role", a.role == BackboneConfig::Role::teacher ? "teacher" : "student"},
                {"stage_widths", a.stage_widths},
                {"input_size", a.input_size},
                {"n_classes", a.n_classes}};
}

static json train_json(const TrainConfig& t) {
    return json{{"learning_rate", t.learning_rate}, {"batch_size", t.batch_size},
                {"epochs", t.epochs},               {"input_size", t.input_size},
                {"weight_decay", t.weight_decay},   {"sampler", sampler_name(t.sampler)},
                {"seed", t.seed}};
}

static json split_meta_json(const SplitSpec& split, const std::string& split_id) {
    json js{{"id", split_id},
            {"seed", split.seed},
            {"train_patients", split.train_patients},
            {"val_patients", split.val_patients}};
    js["digest"] = sha256_hex(js.dump());
    return js;
}

// The frozen teacher for a KD spec; disk-backed so that identical teachers
// are trained once and shared across specs and worker processes.
std::shared_ptr<Model> MatrixRunner::teacher_for(const ExperimentSpec& spec, const SplitSpec& split,
                                                 const std::string& split_id, uint64_t seed) {
    const bool same_modality = spec.variant == Variant::same_modality_kd;
    ModuleFlags tflags{spec.flags.dpe, spec.flags.mhra, false};
    BackboneConfig arch = BackboneConfig::teacher_default(options_.train.input_size);

    std::string tname = std::string("teacher_") + (same_modality ? "xray" : "ct") +
                        (tflags.dpe ? "_dpe" : "") + (tflags.mhra ? "_mhra" : "");
    const std::string run_id = make_run_id(tname, split_id, seed);
    auto cached = teacher_cache_.find(run_id);
    if (cached != teacher_cache_.end()) return cached->second;

    TrainConfig cfg = options_.train;
    cfg.seed = seed;
    cfg.sampler = spec.sampler;

    const std::string dir = run_dir(run_id);
    auto model = std::make_shared<Model>(arch, tflags, cfg.seed);
    if (run_dir_complete(dir)) {
        model->load((fs::path(dir) / "weights.bin").string());
        teacher_cache_[run_id] = model;
        return model;
    }

    std::vector<TrainItem> train =
        same_modality ? paired_xray_items(manifests_.paired, split.train_patients)
                      : paired_ct_items(manifests_.paired, split.train_patients);
    std::vector<TrainItem> val = same_modality ? paired_xray_items(manifests_.paired, split.val_patients)
                                               : paired_ct_items(manifests_.paired, split.val_patients);

    StudentSpec tspec;
    tspec.arch = arch;
    tspec.flags = tflags;
    tspec.distill.mechanism = Mechanism::none;
    auto trained = train_student(train, val, tspec, cfg);
    model = trained.model;

    RunResult& result = trained.result;
    result.spec_name = tname;
    result.split_id = split_id;
    json config{{"spec", json{{"name", tname},
                              {"variant", "teacher_pretraining"},
                              {"modality", same_modality ? "xray" : "ct"}}},
                {"arch", arch_json(arch)},
                {"flags", flags_json(tflags)},
                {"train", train_json(cfg)},
                {"split", split_meta_json(split, split_id)},
                {"data", json{{"manifest", "paired_xray_target"}}}};
    result.config_hash = sha256_hex(config.dump());
    config["config_hash"] = result.config_hash;

    // Atomic publish: a concurrent worker may have produced the same bytes.
    const std::string tmp = dir + ".tmp" + std::to_string(::getpid());
    write_run_dir(tmp, config.dump(2), result, model->serialize());
    std::error_code ec;
    fs::rename(tmp, dir, ec);
    if (ec) {
        fs::remove_all(tmp);
        if (!run_dir_complete(dir)) fail("teacher run publish failed: " + dir);
        model->load((fs::path(dir) / "weights.bin").string());
    }
    teacher_cache_[run_id] = model;
    return model;
}

std::string MatrixRunner::execute_run(const ExperimentSpec& spec, const SplitSpec& split,
                                      const std::string& split_id, uint64_t seed) {
    validate_spec(spec);
    const std::string run_id = make_run_id(spec.name, split_id, seed);
    const std::string dir = run_dir(run_id);
    if (run_dir_complete(dir)) return run_id;

    TrainConfig cfg = options_.train;
    cfg.seed = seed;
    cfg.sampler = spec.sampler;

    auto train = spec_train_items(spec, split);
    auto val = spec_val_items(spec, split);

    RunResult result;
    std::vector<uint8_t> weights;
    json teacher_meta;

    if (spec.variant == Variant::late_fusion) {
        auto out = train_late_fusion(train, val, BackboneConfig::student_default(cfg.input_size),
                                     BackboneConfig::teacher_default(cfg.input_size), cfg);
        result = std::move(out.result);
        weights = out.model->serialize();
    } else {
        const bool teacher_arch = spec.variant == Variant::teacher_only_xray ||
                                  spec.variant == Variant::teacher_only_ct;
        StudentSpec sspec;
        sspec.arch = teacher_arch ? BackboneConfig::teacher_default(cfg.input_size)
                                  : BackboneConfig::student_default(cfg.input_size);
        sspec.flags = teacher_arch ? ModuleFlags{} : ModuleFlags{false, false, spec.flags.dfpn};
        sspec.distill = spec.distill;

        std::shared_ptr<Model> teacher;
        if (spec.distill.mechanism != Mechanism::none) {
            teacher = teacher_for(spec, split, split_id, seed);
            std::string tname = std::string("teacher_") +
                                (spec.variant == Variant::same_modality_kd ? "xray" : "ct") +
                                (spec.flags.dpe ? "_dpe" : "") + (spec.flags.mhra ? "_mhra" : "");
            teacher_meta = json{{"run_id", make_run_id(tname, split_id, seed)},
                                {"weights_digest", teacher->weights_digest()}};
            sspec.teacher = teacher.get();
        }
        auto out = train_student(train, val, sspec, cfg);
        result = std::move(out.result);
        weights = out.model->serialize();
    }

    result.spec_name = spec.name;
    result.split_id = split_id;
    json config{{"spec", spec_json(spec)},
                {"train", train_json(cfg)},
                {"split", split_meta_json(split, split_id)},
                {"data", json{{"manifest", manifest_kind_name(manifest_for(manifests_, spec).kind)},
                              {"digest", sha256_hex(manifest_to_string(manifest_for(manifests_, spec)))}}}};
    if (!teacher_meta.is_null()) config["teacher"] = teacher_meta;
    result.config_hash = sha256_hex(config.dump());
    config["config_hash"] = result.config_hash;
    write_run_dir(dir, config.dump(2), result, weights);
    return run_id;
}

// --- job execution (sequential or worker processes) -------------------------

static json options_json(const MatrixOptions& o) {
    return json{{"train", train_json(o.train)},
                {"out_root", o.out_root},
                {"manifest_dir", o.manifest_dir},
                {"val_fraction", o.val_fraction},
                {"split_seed", o.split_seed}};
}

static MatrixOptions options_from_json(const json& j) {
    MatrixOptions o;
    const json& t = j.at("train");
    o.train.learning_rate = t.at("learning_rate").get<double>();
    o.train.batch_size = t.at("batch_size").get<int>();
    o.train.epochs = t.at("epochs").get<int>();
    o.train.input_size = t.at("input_size").get<int>();
    o.train.weight_decay = t.at("weight_decay").get<double>();
    o.train.sampler = sampler_from_name(t.at("sampler").get<std::string>());
    o.train.seed = t.at("seed").get<uint64_t>();
    o.out_root = j.at("out_root").get<std::string>();
    o.manifest_dir = j.at("manifest_dir").get<std::string>();
    o.val_fraction = j.at("val_fraction").get<double>();
    o.split_seed = j.at("split_seed").get<uint64_t>();
    return o;
}

void execute_job_file(const std::string& job_path) {
    std::ifstream in(job_path);
    if (!in) fail("cannot open job file: " + job_path);
    json j = json::parse(in);
    MatrixOptions options = options_from_json(j.at("options"));
    if (options.manifest_dir.empty()) fail("job file lacks a manifest_dir");
    MatrixRunner runner(load_manifests(options.manifest_dir), options);
    SplitSpec split;
    split.seed = j.at("split").at("seed").get<uint64_t>();
    split.train_patients = j.at("split").at("train_patients").get<std::vector<std::string>>();
    split.val_patients = j.at("split").at("val_patients").get<std::vector<std::string>>();
    runner.execute_run(spec_from(j.at("spec")), split, j.at("split_id").get<std::string>(),
                       j.at("seed").get<uint64_t>());
}

void MatrixRunner::execute_jobs(std::vector<Job>& jobs) {
    for (auto& job : jobs) job.run_id = make_run_id(job.spec.name, job.split_id, job.seed);

    if (options_.jobs <= 1 || options_.manifest_dir.empty()) {
        for (const auto& job : jobs) execute_run(job.spec, job.split, job.split_id, job.seed);
        return;
    }

    // Worker processes: serialize each pending job and spawn this binary on
    // it. Results land in the shared output tree.
    const fs::path job_dir = fs::path(options_.out_root) / "jobs";
    fs::create_directories(job_dir);
    std::vector<std::string> pending;
    for (const auto& job : jobs) {
        if (run_dir_complete(run_dir(job.run_id))) continue;
        json j{{"spec", spec_json(job.spec)},
               {"split", json{{"seed", job.split.seed},
                              {"train_patients", job.split.train_patients},
                              {"val_patients", job.split.val_patients}}},
               {"split_id", job.split_id},
               {"seed", job.seed},
               {"run_id", job.run_id},
               {"options", options_json(options_)}};
        const std::string path = (job_dir / (job.run_id + ".json")).string();
        std::ofstream out(path);
        out << j.dump(2) << "\n";
        pending.push_back(path);
    }

    size_t next = 0;
    std::map<pid_t, std::string> alive;
    auto spawn_one = [&](const std::string& path) {
        const char* self = "/proc/self/exe";
        std::vector<std::string> args = {"xkd", "train-job", path};
        std::vector<char*> argv;
        for (auto& a : args) argv.push_back(a.data());
        argv.push_back(nullptr);
        pid_t pid = 0;
        int rc = ::posix_spawn(&pid, self, nullptr, nullptr, argv.data(), environ);
        if (rc != 0) fail("posix_spawn failed for job " + path);
        alive[pid] = path;
    };
    while (next < pending.size() || !alive.empty()) {
        while (next < pending.size() && static_cast<int>(alive.size()) < options_.jobs)
            spawn_one(pending[next++]);
        if (alive.empty()) continue;
        int status = 0;
        pid_t pid = ::waitpid(-1, &status, 0);
        if (pid <= 0) continue;
        auto it = alive.find(pid);
        if (it == alive.end()) continue;
        if (!WIFEXITED(status) || WEXITSTATUS(status) != 0)
            fail("worker failed for job " + it->second);
        alive.erase(it);
    }
}

MatrixResult MatrixRunner::collect(const std::string& name, Regime regime, const std::string& support,
                                   const std::vector<ExperimentSpec>& specs,
                                   const std::vector<Job>& jobs) {
    MatrixResult m;
    m.name = name;
    m.regime = regime;
    m.support = support;
    for (const auto& spec : specs) {
        SpecResult sr;
        sr.spec = spec;
        std::vector<MetricsReport> reports;
        for (const auto& job : jobs) {
            if (job.spec.name != spec.name) continue;
            StoredRun stored = read_run_dir(run_dir(job.run_id));
            SpecRun run;
            run.run_id = job.run_id;
            run.result = std::move(stored.result);
            std::vector<double> scores;
            std::vector<int> labels;
            collect_scores(run.result.rows, scores, labels);
            run.metrics = evaluate(scores, labels);
            reports.push_back(run.metrics);
            sr.runs.push_back(std::move(run));
        }
        if (sr.runs.empty()) fail("matrix '" + name + "': no runs for spec " + spec.name);
        sr.summary = summarize(reports);
        m.specs.push_back(std::move(sr));
    }
    return m;
}

// ---------------------------------------------------------------------------
// Matrices
// ---------------------------------------------------------------------------

MatrixResult MatrixRunner::run_fixed_matrix() {
    const SplitSpec axr_split = fixed_split(manifests_.all_xray, options_.val_fraction, options_.split_seed);
    const SplitSpec& paired = paired_fixed_split();

    std::vector<ExperimentSpec> specs;
    for (Variant v : {Variant::teacher_only_xray, Variant::student_only, Variant::late_fusion,
                      Variant::same_modality_kd, Variant::plain_cross_modal_kd, Variant::full_jdcnet}) {
        ExperimentSpec s = make_variant_spec(v, options_.distill);
        s.seeds = options_.seeds;
        s.regime = Regime::fixed_split;
        specs.push_back(std::move(s));
    }

    std::vector<Job> jobs;
    for (const auto& spec : specs)
        for (uint64_t seed : options_.seeds)
            jobs.push_back({spec, spec.variant == Variant::teacher_only_xray ? axr_split : paired,
                            spec.variant == Variant::teacher_only_xray ? "axrfixed" : "fixed", seed, ""});
    execute_jobs(jobs);
    MatrixResult m = collect("fixed_matrix", Regime::fixed_split,
                             matrix_support_banner(manifests_.paired, paired), specs, jobs);
    write_matrix_index(m, options_.out_root);
    return m;
}

static std::vector<Variant> resampled_row_set() {
    return {Variant::student_only,     Variant::late_fusion,       Variant::same_modality_kd,
            Variant::plain_cross_modal_kd, Variant::attention_transfer, Variant::feature_hint,
            Variant::full_jdcnet};
}

MatrixResult MatrixRunner::run_resampled_matrix() {
    ResamplePlan plan = resample_plan(manifests_.paired, options_.n_resamples, options_.n_val_patients,
                                      options_.n_val_negative, options_.resample_base_seed);
    return run_resampled_matrix(plan);
}

MatrixResult MatrixRunner::run_resampled_matrix(const ResamplePlan& plan) {
    std::vector<ExperimentSpec> specs;
    for (Variant v : resampled_row_set()) {
        ExperimentSpec s = make_variant_spec(v, options_.distill);
        s.regime = Regime::resampled;
        for (const auto& sp : plan.splits) s.seeds.push_back(sp.seed);
        specs.push_back(std::move(s));
    }

    std::vector<Job> jobs;
    for (const auto& spec : specs)
        for (size_t i = 0; i < plan.splits.size(); ++i)
            jobs.push_back({spec, plan.splits[i], "rs" + std::to_string(i), plan.splits[i].seed, ""});
    execute_jobs(jobs);

    std::ostringstream support;
    support << plan.splits.size() << " same-case resamples; each split holds out " << plan.n_val_patients
            << " patients (" << plan.n_val_patients - plan.n_val_negative << " positive, "
            << plan.n_val_negative << " negative)";
    MatrixResult m = collect("resampled_matrix", Regime::resampled, support.str(), specs, jobs);

    // Same-case fairness: within a resample every spec must evaluate the
    // identical validation image set.
    for (size_t i = 0; i < plan.splits.size(); ++i) {
        const std::string split_id = "rs" + std::to_string(i);
        std::set<std::string> reference;
        bool first = true;
        for (const auto& sr : m.specs) {
            for (const auto& run : sr.runs) {
                if (run.result.split_id != split_id) continue;
                std::set<std::string> ids;
                for (const auto& row : run.result.rows) ids.insert(row.image_id);
                if (first) {
                    reference = ids;
                    first = false;
                } else if (ids != reference) {
                    fail("same-case fairness violated in resample " + split_id + " by spec " +
                         sr.spec.name);
                }
            }
        }
    }
    write_matrix_index(m, options_.out_root);
    return m;
}

GridResult MatrixRunner::run_grid_ablation() {
    GridResult g;
    g.temperatures = {2.0, 4.0, 6.0};
    g.alphas = {0.3, 0.6, 0.9};
    const SplitSpec& paired = paired_fixed_split();
    const uint64_t seed = options_.seeds.empty() ? 42 : options_.seeds[0];

    std::vector<ExperimentSpec> specs;
    std::vector<Job> jobs;
    for (double t : g.temperatures) {
        for (double a : g.alphas) {
            ExperimentSpec s = make_variant_spec(Variant::full_jdcnet, options_.distill);
            s.variant = Variant::custom;  // grid cells deviate from canonical distill params
            s.distill.temperature = t;
            s.distill.alpha = a;
            std::ostringstream nm;
            nm << "full_jdcnet_T" << t << "_a" << a;
            s.name = nm.str();
            s.seeds = {seed};
            specs.push_back(s);
            jobs.push_back({s, paired, "fixed", seed, ""});
        }
    }
    execute_jobs(jobs);
    for (size_t ti = 0; ti < g.temperatures.size(); ++ti) {
        g.macro_f1.emplace_back();
        g.run_ids.emplace_back();
        for (size_t ai = 0; ai < g.alphas.size(); ++ai) {
            const auto& job = jobs[ti * g.alphas.size() + ai];
            StoredRun stored = read_run_dir(run_dir(job.run_id));
            std::vector<double> scores;
            std::vector<int> labels;
            collect_scores(stored.result.rows, scores, labels);
            g.macro_f1.back().push_back(evaluate(scores, labels).macro_f1);
            g.run_ids.back().push_back(job.run_id);
        }
    }
    write_grid_index(g, options_.out_root);
    return g;
}

MatrixResult MatrixRunner::run_module_ablation() {
    const SplitSpec& paired = paired_fixed_split();
    struct Row {
        std::string name;
        ModuleFlags flags;
    };
    const std::vector<Row> rows = {{"full_jdcnet", {true, true, true}},
                                   {"jdcnet_wo_dpe", {false, true, true}},
                                   {"jdcnet_wo_mhra", {true, false, true}},
                                   {"jdcnet_wo_dfpn", {true, true, false}}};
    std::vector<ExperimentSpec> specs;
    std::vector<Job> jobs;
    for (const auto& row : rows) {
        ExperimentSpec s = make_variant_spec(Variant::full_jdcnet, options_.distill);
        if (row.name != "full_jdcnet") {
            s.variant = Variant::custom;
            s.role = "Module ablation";
        }
        s.name = row.name;
        s.flags = row.flags;
        s.seeds = options_.seeds;
        specs.push_back(s);
        for (uint64_t seed : options_.seeds) jobs.push_back({s, paired, "fixed", seed, ""});
    }
    execute_jobs(jobs);
    MatrixResult m = collect("module_ablation", Regime::fixed_split,
                             matrix_support_banner(manifests_.paired, paired), specs, jobs);
    write_matrix_index(m, options_.out_root);
    return m;
}

MatrixResult MatrixRunner::run_progressive() {
    const SplitSpec& paired = paired_fixed_split();
    struct Row {
        std::string name;
        ModuleFlags flags;
        bool canonical_plain;
    };
    const std::vector<Row> rows = {{"plain_cross_modal_kd", {false, false, false}, true},
                                   {"kd_plus_dpe", {true, false, false}, false},
                                   {"kd_plus_dpe_dfpn", {true, false, true}, false},
                                   {"kd_plus_dpe_mhra", {true, true, false}, false},
                                   {"full_jdcnet", {true, true, true}, false}};
    std::vector<ExperimentSpec> specs;
    std::vector<Job> jobs;
    for (const auto& row : rows) {
        ExperimentSpec s;
        if (row.canonical_plain) {
            s = make_variant_spec(Variant::plain_cross_modal_kd, options_.distill);
        } else if (row.name == "full_jdcnet") {
            s = make_variant_spec(Variant::full_jdcnet, options_.distill);
        } else {
            s = make_variant_spec(Variant::plain_cross_modal_kd, options_.distill);
            s.variant = Variant::custom;
            s.role = "Progressive complexity";
            s.name = row.name;
            s.flags = row.flags;
        }
        s.seeds = options_.seeds;
        specs.push_back(s);
        for (uint64_t seed : options_.seeds) jobs.push_back({s, paired, "fixed", seed, ""});
    }
    execute_jobs(jobs);
    MatrixResult m = collect("progressive", Regime::fixed_split,
                             matrix_support_banner(manifests_.paired, paired), specs, jobs);
    write_matrix_index(m, options_.out_root);
    return m;
}

SamplerControlResult MatrixRunner::run_sampler_control() {
    const SplitSpec& paired = paired_fixed_split();
    std::vector<ExperimentSpec> specs;
    std::vector<Job> jobs;
    for (Variant v : {Variant::student_only, Variant::plain_cross_modal_kd, Variant::full_jdcnet}) {
        for (SamplerMode mode : {SamplerMode::shuffled, SamplerMode::class_balanced}) {
            ExperimentSpec s = make_variant_spec(v, options_.distill);
            s.sampler = mode;
            s.name = std::string(variant_name(v)) + "__" +
                     (mode == SamplerMode::shuffled ? "shuffled" : "balanced");
            s.seeds = options_.seeds;
            specs.push_back(s);
            for (uint64_t seed : options_.seeds) jobs.push_back({s, paired, "fixed", seed, ""});
        }
    }
    execute_jobs(jobs);
    SamplerControlResult out;
    out.matrix = collect("sampler_control", Regime::fixed_split,
                         matrix_support_banner(manifests_.paired, paired), specs, jobs);
    for (const auto& sr : out.matrix.specs) {
        SamplerControlCell cell;
        cell.model = sr.spec.name.substr(0, sr.spec.name.find("__"));
        cell.sampler = sr.spec.sampler;
        cell.balanced_accuracy = sr.summary.mean.balanced_accuracy;
        cell.specificity = sr.summary.mean.specificity;
        cell.positive_rate = sr.summary.mean.positive_rate;
        out.cells.push_back(cell);
    }
    write_matrix_index(out.matrix, options_.out_root);
    return out;
}

SpecResult MatrixRunner::run_reference_ct() {
    ExperimentSpec s = make_variant_spec(Variant::teacher_only_ct, options_.distill);
    s.seeds = options_.seeds;
    const SplitSpec split = fixed_split(manifests_.all_ct, options_.val_fraction, options_.split_seed);
    std::vector<Job> jobs;
    for (uint64_t seed : options_.seeds) jobs.push_back({s, split, "actfixed", seed, ""});
    execute_jobs(jobs);
    MatrixResult m = collect("reference_ct", Regime::fixed_split,
                             matrix_support_banner(manifests_.all_ct, split), {s}, jobs);
    write_matrix_index(m, options_.out_root);
    return m.specs[0];
}

// ---------------------------------------------------------------------------
// Matrix index files (summaries recomputable from run dirs alone)
// ---------------------------------------------------------------------------

void write_matrix_index(const MatrixResult& m, const std::string& out_root) {
    json j{{"name", m.name}, {"regime", regime_name(m.regime)}, {"support", m.support}};
    j["specs"] = json::array();
    for (const auto& sr : m.specs) {
        json spec_entry{{"spec", spec_json(sr.spec)}};
        spec_entry["runs"] = json::array();
        for (const auto& run : sr.runs) spec_entry["runs"].push_back(run.run_id);
        j["specs"].push_back(std::move(spec_entry));
    }
    fs::create_directories(fs::path(out_root) / "summaries");
    std::ofstream out(fs::path(out_root) / "summaries" / (m.name + ".index.json"));
    if (!out) fail("cannot write matrix index for " + m.name);
    out << j.dump(2) << "\n";
}

MatrixResult read_matrix_from_index(const std::string& index_path, const std::string& out_root) {
    std::ifstream in(index_path);
    if (!in) fail("cannot open matrix index: " + index_path);
    json j = json::parse(in);
    MatrixResult m;
    m.name = j.at("name").get<std::string>();
    m.regime = j.at("regime").get<std::string>() == "resampled" ? Regime::resampled : Regime::fixed_split;
    m.support = j.value("support", "");
    for (const auto& spec_entry : j.at("specs")) {
        SpecResult sr;
        sr.spec = spec_from(spec_entry.at("spec"));
        std::vector<MetricsReport> reports;
        for (const auto& rid : spec_entry.at("runs")) {
            SpecRun run;
            run.run_id = rid.get<std::string>();
            StoredRun stored = read_run_dir((fs::path(out_root) / "runs" / run.run_id).string());
            run.result = std::move(stored.result);
            std::vector<double> scores;
            std::vector<int> labels;
            collect_scores(run.result.rows, scores, labels);
            run.metrics = evaluate(scores, labels);
            reports.push_back(run.metrics);
            sr.runs.push_back(std::move(run));
        }
        sr.summary = summarize(reports);
        m.specs.push_back(std::move(sr));
    }
    return m;
}

void write_grid_index(const GridResult& g, const std::string& out_root) {
    json j{{"temperatures", g.temperatures}, {"alphas", g.alphas}, {"macro_f1", g.macro_f1},
           {"runs", g.run_ids}};
    fs::create_directories(fs::path(out_root) / "summaries");
    std::ofstream out(fs::path(out_root) / "summaries" / "grid_ablation.index.json");
    out << j.dump(2) << "\n";
}

// ---------------------------------------------------------------------------
// Hypothesis ledger
// ---------------------------------------------------------------------------

static const SpecResult& need_spec(const MatrixResult& m, const std::string& name) {
    const SpecResult* s = m.find(name);
    if (!s) fail("hypothesis_status: matrix '" + m.name + "' is missing spec '" + name + "'");
    return *s;
}

static std::string cmp_line(const std::string& what, double a, const std::string& an, double b,
                            const std::string& bn) {
    std::ostringstream os;
    os << what << ": " << an << " " << fmt_fixed(a, 3) << " vs " << bn << " " << fmt_fixed(b, 3);
    return os.str();
}

// All-positive -> all-negative collapse inside [lo,hi] on the 0.05 grid.
static bool sweep_collapse(const std::vector<double>& scores, const std::vector<int>& labels,
                           double lo, double hi) {
    if (scores.empty()) return false;
    ThresholdCurve curve = threshold_sweep(scores, labels);
    double t_all_pos = -1.0, t_all_neg = -1.0;
    for (size_t i = 0; i < curve.thresholds.size(); ++i) {
        double t = curve.thresholds[i];
        if (t < lo - 1e-9 || t > hi + 1e-9) continue;
        double pr = curve.reports[i].positive_rate;
        if (pr >= 1.0 && t_all_pos < 0) t_all_pos = t;
        if (pr <= 0.0 && t_all_neg < 0) t_all_neg = t;
    }
    return t_all_pos >= 0 && t_all_neg >= 0 && t_all_pos < t_all_neg;
}

std::vector<HypothesisStatus> hypothesis_status(const MatrixResult& fixed,
                                                const MatrixResult& resampled,
                                                const SamplerControlResult* sampler_control) {
    const auto& plain_f = need_spec(fixed, "plain_cross_modal_kd");
    const auto& student_f = need_spec(fixed, "student_only");
    const auto& full_f = need_spec(fixed, "full_jdcnet");
    const auto& plain_r = need_spec(resampled, "plain_cross_modal_kd");
    const auto& student_r = need_spec(resampled, "student_only");
    const auto& same_r = need_spec(resampled, "same_modality_kd");
    const auto& fusion_r = need_spec(resampled, "late_fusion");
    const auto& full_r = need_spec(resampled, "full_jdcnet");

    std::vector<HypothesisStatus> out;

    // H1: plain cross-modal KD beats student-only. Ties resolve against
    // support (strict >).
    {
        HypothesisStatus h;
        h.id = "H1";
        const bool fixed_win = plain_f.summary.mean.accuracy > student_f.summary.mean.accuracy;
        const bool res_win =
            plain_r.summary.mean.balanced_accuracy > student_r.summary.mean.balanced_accuracy;
        h.evidence.push_back(cmp_line("fixed mean accuracy", plain_f.summary.mean.accuracy, "plain_kd",
                                      student_f.summary.mean.accuracy, "student_only"));
        h.evidence.push_back(cmp_line("resampled mean balanced accuracy",
                                      plain_r.summary.mean.balanced_accuracy, "plain_kd",
                                      student_r.summary.mean.balanced_accuracy, "student_only"));
        h.state = fixed_win && res_win ? HypothesisState::supported
                  : fixed_win          ? HypothesisState::tentative_fixed_split_only
                                       : HypothesisState::not_supported;
        out.push_back(std::move(h));
    }
    // H2: gain not reducible to same-modality KD.
    {
        HypothesisStatus h;
        h.id = "H2";
        const bool reducible =
            same_r.summary.mean.macro_f1 >= plain_r.summary.mean.macro_f1 &&
            same_r.summary.mean.balanced_accuracy >= plain_r.summary.mean.balanced_accuracy;
        h.evidence.push_back(cmp_line("resampled macro-F1", same_r.summary.mean.macro_f1, "same_modality",
                                      plain_r.summary.mean.macro_f1, "plain_kd"));
        h.evidence.push_back(cmp_line("resampled balanced accuracy",
                                      same_r.summary.mean.balanced_accuracy, "same_modality",
                                      plain_r.summary.mean.balanced_accuracy, "plain_kd"));
        h.state = reducible ? HypothesisState::not_supported : HypothesisState::supported;
        out.push_back(std::move(h));
    }
    // H3: gain not reducible to late fusion.
    {
        HypothesisStatus h;
        h.id = "H3";
        double best = -1.0;
        std::string best_name;
        for (const auto& sr : resampled.specs) {
            if (sr.summary.mean.accuracy > best) {
                best = sr.summary.mean.accuracy;
                best_name = sr.spec.name;
            }
        }
        const bool fusion_top = fusion_r.summary.mean.accuracy >= best;
        h.evidence.push_back(cmp_line("resampled mean accuracy", fusion_r.summary.mean.accuracy,
                                      "late_fusion", best, "best(" + best_name + ")"));
        h.state = fusion_top ? HypothesisState::not_supported : HypothesisState::supported;
        out.push_back(std::move(h));
    }
    // H4: DPE/MHRA/DFPN improve over the plain control.
    {
        HypothesisStatus h;
        h.id = "H4";
        const bool no_fixed_gain = full_f.summary.mean.accuracy <= plain_f.summary.mean.accuracy;
        const bool no_res_gain =
            full_r.summary.mean.balanced_accuracy <= plain_r.summary.mean.balanced_accuracy;
        h.evidence.push_back(cmp_line("fixed mean accuracy", full_f.summary.mean.accuracy, "full_stack",
                                      plain_f.summary.mean.accuracy, "plain_kd"));
        h.evidence.push_back(cmp_line("resampled mean balanced accuracy",
                                      full_r.summary.mean.balanced_accuracy, "full_stack",
                                      plain_r.summary.mean.balanced_accuracy, "plain_kd"));
        h.state = no_fixed_gain && no_res_gain ? HypothesisState::not_supported
                                               : HypothesisState::supported;
        out.push_back(std::move(h));
    }
    // H5: gain survives imbalance-sensitive and threshold checks.
    {
        HypothesisStatus h;
        h.id = "H5";
        bool sampler_reduces = false;
        if (sampler_control) {
            double shuffled = -1.0, balanced = -1.0;
            for (const auto& cell : sampler_control->cells) {
                if (cell.model != "plain_cross_modal_kd") continue;
                if (cell.sampler == SamplerMode::shuffled) shuffled = cell.balanced_accuracy;
                else balanced = cell.balanced_accuracy;
            }
            if (shuffled >= 0 && balanced >= 0) {
                sampler_reduces = balanced <= shuffled;  // ties resolve against support
                h.evidence.push_back(cmp_line("plain_kd balanced accuracy under sampler control",
                                              balanced, "class_balanced", shuffled, "shuffled"));
            }
        }
        std::vector<double> scores;
        std::vector<int> labels;
        for (const auto& run : plain_f.runs)
            for (const auto& row : run.result.rows) {
                scores.push_back(row.score);
                labels.push_back(row.label);
            }
        const bool collapse = sweep_collapse(scores, labels, 0.45, 0.65);
        if (!scores.empty())
            h.evidence.push_back(std::string("threshold sweep collapse in [0.45,0.65]: ") +
                                 (collapse ? "yes" : "no"));
        h.state = (sampler_reduces || collapse) ? HypothesisState::not_supported
                                                : HypothesisState::supported;
        out.push_back(std::move(h));
    }
    return out;
}

}  // namespace xkd
