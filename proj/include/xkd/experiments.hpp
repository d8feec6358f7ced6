#pragma once

// Experiment matrix orchestration: the fixed-split feasibility screen, the
// resampled same-case matrix, the temperature/alpha grid, module
// leave-one-out, progressive complexity, the sampler control, and the
// H1-H5 hypothesis ledger. Every run lands in its own directory; summaries
// are always recomputable from the persisted per-run prediction files.

#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "xkd/metrics.hpp"
#include "xkd/splits.hpp"
#include "xkd/trainer.hpp"

namespace xkd {

enum class Variant {
    teacher_only_xray,
    teacher_only_ct,  // reference-only; never part of headline matrices
    student_only,
    late_fusion,
    same_modality_kd,
    plain_cross_modal_kd,
    attention_transfer,
    feature_hint,
    full_jdcnet,
    custom,
};
const char* variant_name(Variant v);
Variant variant_from_name(const std::string& name);

enum class Regime { fixed_split, resampled };
const char* regime_name(Regime r);

struct ExperimentSpec {
    std::string name;
    Variant variant = Variant::custom;
    std::string role;  // table annotation, e.g. "Paired baseline"
    ModuleFlags flags;
    DistillParams distill;
    SamplerMode sampler = SamplerMode::shuffled;
    std::vector<uint64_t> seeds;
    Regime regime = Regime::fixed_split;
    bool reference_only = false;
};

// Canonical spec for a named variant (flags/mechanism pinned to the
// variant); throws for custom. Named variants must round-trip consistently.
ExperimentSpec make_variant_spec(Variant v, const DistillParams& distill_defaults);
void validate_spec(const ExperimentSpec& spec);

std::string spec_to_json(const ExperimentSpec& spec);
ExperimentSpec spec_from_json(const std::string& text);

struct Manifests {
    Manifest all_xray;
    Manifest all_ct;
    Manifest paired;
};
Manifests load_manifests(const std::string& manifest_dir);
void write_manifests(const Manifests& m, const std::string& manifest_dir);

struct MatrixOptions {
    TrainConfig train;            // seed is overridden per run
    DistillParams distill;       // defaults: T=4, alpha=0.6, beta=0.5, logit_kd where applicable
    std::string out_root;         // runs/ and summaries/ live here
    std::string manifest_dir;     // where ingest wrote the manifests
    double val_fraction = 0.2;
    uint64_t split_seed = 42;
    std::vector<uint64_t> seeds = {42, 43, 44, 45};
    int n_resamples = 8;
    int n_val_patients = 5;
    int n_val_negative = 1;
    uint64_t resample_base_seed = 100;
    int jobs = 1;  // worker processes for matrix execution
};

struct SpecRun {
    std::string run_id;
    RunResult result;
    MetricsReport metrics;
};

struct SpecResult {
    ExperimentSpec spec;
    std::vector<SpecRun> runs;
    MetricsSummary summary;
};

struct MatrixResult {
    std::string name;
    Regime regime = Regime::fixed_split;
    std::string support;  // shared-support banner
    std::vector<SpecResult> specs;

    const SpecResult* find(const std::string& spec_name) const;
};

struct GridResult {
    std::vector<double> temperatures;  // rows
    std::vector<double> alphas;        // cols
    std::vector<std::vector<double>> macro_f1;
    std::vector<std::vector<std::string>> run_ids;
};

struct SamplerControlCell {
    std::string model;
    SamplerMode sampler;
    double balanced_accuracy = 0.0;
    double specificity = 0.0;
    double positive_rate = 0.0;
};

struct SamplerControlResult {
    MatrixResult matrix;  // 3 models x 2 samplers
    std::vector<SamplerControlCell> cells;
};

// --- hypothesis ledger ---------------------------------------------------

enum class HypothesisState { tentative_fixed_split_only, not_supported, supported };
const char* hypothesis_state_name(HypothesisState s);

struct HypothesisStatus {
    std::string id;  // "H1".."H5"
    HypothesisState state = HypothesisState::not_supported;
    std::vector<std::string> evidence;  // the numeric comparisons used
};

// Pure function of the matrices. The sampler-control matrix feeds H5's
// balanced-sampler comparison; without it, H5 rests on the threshold-sweep
// collapse check over the fixed plain-KD run scores.
std::vector<HypothesisStatus> hypothesis_status(const MatrixResult& fixed,
                                                const MatrixResult& resampled,
                                                const SamplerControlResult* sampler_control = nullptr);

// --- runner ----------------------------------------------------------------

class MatrixRunner {
public:
    MatrixRunner(Manifests manifests, MatrixOptions options);

    MatrixResult run_fixed_matrix();
    MatrixResult run_resampled_matrix();
    MatrixResult run_resampled_matrix(const ResamplePlan& plan);
    GridResult run_grid_ablation();  // T in {2,4,6} x alpha in {0.3,0.6,0.9}, seed = seeds[0]
    MatrixResult run_module_ablation();
    MatrixResult run_progressive();
    SamplerControlResult run_sampler_control();
    // Reference-only CT teacher (excluded from headline matrices).
    SpecResult run_reference_ct();

    const MatrixOptions& options() const { return options_; }

    // One fully specified run; exposed so worker processes can execute a
    // serialized job. Returns the run id.
    std::string execute_run(const ExperimentSpec& spec, const SplitSpec& split,
                            const std::string& split_id, uint64_t seed);

private:
    struct Job {
        ExperimentSpec spec;
        SplitSpec split;
        std::string split_id;
        uint64_t seed = 0;
        std::string run_id;
    };

    Manifests manifests_;
    MatrixOptions options_;
    std::map<std::string, std::shared_ptr<Model>> teacher_cache_;

    SplitSpec paired_fixed_split_;
    bool have_paired_split_ = false;
    const SplitSpec& paired_fixed_split();

    std::string run_dir(const std::string& run_id) const;
    void execute_jobs(std::vector<Job>& jobs);
    MatrixResult collect(const std::string& name, Regime regime, const std::string& support,
                         const std::vector<ExperimentSpec>& specs, const std::vector<Job>& jobs);
    std::shared_ptr<Model> teacher_for(const ExperimentSpec& spec, const SplitSpec& split,
                                       const std::string& split_id, uint64_t seed);
    std::vector<TrainItem> spec_train_items(const ExperimentSpec& spec, const SplitSpec& split) const;
    std::vector<TrainItem> spec_val_items(const ExperimentSpec& spec, const SplitSpec& split) const;
};

// Executes a serialized job file (used by `--jobs N` worker processes).
void execute_job_file(const std::string& job_path);

// Writes summaries/<name>.index.json so that summaries can be recomputed
// from the run directories alone.
void write_matrix_index(const MatrixResult& m, const std::string& out_root);
MatrixResult read_matrix_from_index(const std::string& index_path, const std::string& out_root);
void write_grid_index(const GridResult& g, const std::string& out_root);

std::string matrix_support_banner(const Manifest& manifest, const SplitSpec& split);

}  // namespace xkd
