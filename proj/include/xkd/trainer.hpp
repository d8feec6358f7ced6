#pragma once

// Deterministic training loops. One run is single-threaded and a pure
// function of (data, config, seed): the sampler, the init, and AdamW all
// draw from pinned RNG streams, so repeated executions produce byte-equal
// weights and prediction files. Parallelism belongs across runs, not inside
// one.

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "xkd/losses.hpp"
#include "xkd/model.hpp"

namespace xkd {

enum class SamplerMode { shuffled, class_balanced };
const char* sampler_name(SamplerMode m);
SamplerMode sampler_from_name(const std::string& name);

struct TrainConfig {
    double learning_rate = 3e-4;
    int batch_size = 16;
    int epochs = 5;
    int input_size = 128;
    double weight_decay = 0.01;
    SamplerMode sampler = SamplerMode::shuffled;
    uint64_t seed = 42;

    void validate() const {
        if (learning_rate <= 0 || batch_size <= 0 || epochs < 0 || input_size <= 0 ||
            weight_decay < 0)
            fail("TrainConfig: fields must be positive (epochs may be zero)");
    }
};

struct TrainItem {
    std::string path;      // the image the trained model consumes
    int label = 0;         // 0 negative, 1 positive
    std::string aux_path;  // paired CT / teacher input / fusion second modality
};

struct PredictionRow {
    std::string image_id;
    int label = 0;
    double score = 0.0;  // positive-class probability
    int prediction = 0;  // score >= 0.5
};

struct RunResult {
    std::string spec_name;
    std::string config_hash;
    uint64_t seed = 0;
    std::string split_id;
    std::vector<PredictionRow> rows;  // one per validation image
    std::vector<double> epoch_losses;
    std::string weights_digest;
    double wall_time_sec = 0.0;
    std::string teacher_digest;  // empty when no teacher was involved
};

// --- building blocks ---------------------------------------------------------

// decode -> grayscale -> bilinear resize to size x size -> [0,1] ->
// standardize by fixed mean 0.5 / std 0.25. Output (1,size,size).
Tensor preprocess(const std::string& image_path, int size);

// One epoch of indices. shuffled: a seeded permutation. class_balanced:
// draw a class uniformly, then an instance uniformly within it (with
// replacement); stream length equals the dataset size.
std::vector<int> make_sampler(const std::vector<int>& labels, SamplerMode mode, uint64_t seed);

class AdamW {
public:
    AdamW(std::vector<Var> params, double lr, double weight_decay);
    void step();
    void zero_grad();

private:
    std::vector<Var> params_;
    std::vector<Tensor> m_, v_;
    double lr_, wd_;
    long t_ = 0;
};

class ImageCache {
public:
    explicit ImageCache(int size) : size_(size) {}
    const Tensor& get(const std::string& path);

private:
    int size_;
    std::map<std::string, Tensor> cache_;
};

Tensor stack_images(const std::vector<const Tensor*>& images);

// --- training ----------------------------------------------------------------

struct StudentSpec {
    BackboneConfig arch;
    ModuleFlags flags;
    DistillParams distill;
    const Model* teacher = nullptr;  // frozen; required unless mechanism == none
};

struct TrainedStudent {
    std::shared_ptr<Model> model;
    RunResult result;
};

// Trains on item.path; cross-modal mechanisms forward the frozen teacher on
// item.aux_path. val may be empty (no evaluation rows). Class weights are
// inverse-frequency over the training labels.
TrainedStudent train_student(const std::vector<TrainItem>& train, const std::vector<TrainItem>& val,
                             const StudentSpec& spec, const TrainConfig& config);

struct TrainedTeacher {
    std::shared_ptr<Model> model;
    std::vector<double> epoch_losses;
};

// Weighted-CE training of a single-modality model (the CT or X-ray teacher);
// the result is treated as frozen by every downstream consumer.
TrainedTeacher train_teacher(const std::vector<TrainItem>& train, const BackboneConfig& arch,
                             const ModuleFlags& flags, const TrainConfig& config);

struct TrainedFusion {
    std::shared_ptr<LateFusionModel> model;
    RunResult result;
};

// item.path = X-ray, item.aux_path = paired CT; both required at training
// and evaluation time.
TrainedFusion train_late_fusion(const std::vector<TrainItem>& train, const std::vector<TrainItem>& val,
                                const BackboneConfig& xray_arch, const BackboneConfig& ct_arch,
                                const TrainConfig& config);

// Positive-class scores for a trained model (no gradients).
std::vector<PredictionRow> score_images(const Model& model, const std::vector<TrainItem>& items,
                                        const TrainConfig& config, ImageCache& cache);

// --- run directories -----------------------------------------------------
// One directory per run: config.json (effective config snapshot),
// predictions.csv, weights.bin, losses.csv, meta.json. Prediction scores are
// written with shortest round-trip formatting, so rereading is exact.

void write_run_dir(const std::string& run_dir, const std::string& config_json,
                   const RunResult& result, const std::vector<uint8_t>& weights_bytes);

struct StoredRun {
    RunResult result;
    std::string config_json;
};
StoredRun read_run_dir(const std::string& run_dir);
bool run_dir_complete(const std::string& run_dir);

std::vector<PredictionRow> read_predictions(const std::string& path);
void collect_scores(const std::vector<PredictionRow>& rows, std::vector<double>& scores,
                    std::vector<int>& labels);

}  // namespace xkd
