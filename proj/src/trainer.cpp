#include "xkd/trainer.hpp"

#include <chrono>
#include <cmath>
#include <ctime>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "xkd/csv.hpp"
#include "xkd/image_io.hpp"

namespace xkd {

const char* sampler_name(SamplerMode m) {
    return m == SamplerMode::shuffled ? "shuffled" : "class_balanced";
}

SamplerMode sampler_from_name(const std::string& name) {
    if (name == "shuffled") return SamplerMode::shuffled;
    if (name == "class_balanced") return SamplerMode::class_balanced;
    fail("unknown sampler '" + name + "'");
}

// Pinned stream derivation: epoch samplers and init draw from disjoint
// streams of the run seed.
static uint64_t derive(uint64_t seed, uint64_t stream) {
    uint64_t z = seed + 0x9e3779b97f4a7c15ull * (stream + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

Tensor preprocess(const std::string& image_path, int size) {
    GrayImage img = load_gray_image(image_path);
    Tensor raw({1, 1, img.height, img.width});
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x) raw.at4(0, 0, y, x) = img.at(y, x);
    Tensor resized = resize_bilinear_value(raw, size, size);
    Tensor out({1, size, size});
    for (int64_t i = 0; i < out.size(); ++i) {
        double unit = resized.v[static_cast<size_t>(i)] / 255.0;
        out.v[static_cast<size_t>(i)] = (unit - 0.5) / 0.25;
    }
    return out;
}

std::vector<int> make_sampler(const std::vector<int>& labels, SamplerMode mode, uint64_t seed) {
    if (labels.empty()) fail("make_sampler: empty label list");
    Rng rng(seed);
    const int n = static_cast<int>(labels.size());
    std::vector<int> out;
    out.reserve(static_cast<size_t>(n));
    if (mode == SamplerMode::shuffled) {
        for (int i = 0; i < n; ++i) out.push_back(i);
        rng.shuffle(out);
        return out;
    }
    std::vector<int> by_class[2];
    for (int i = 0; i < n; ++i) by_class[labels[static_cast<size_t>(i)] == 1 ? 1 : 0].push_back(i);
    if (by_class[0].empty() || by_class[1].empty())
        fail("make_sampler: class_balanced needs at least one instance of each class");
    for (int i = 0; i < n; ++i) {
        const auto& pool = by_class[rng.index(2)];
        out.push_back(pool[rng.index(pool.size())]);
    }
    return out;
}

// ---------------------------------------------------------------------------
// AdamW (decoupled weight decay)
// ---------------------------------------------------------------------------

AdamW::AdamW(std::vector<Var> params, double lr, double weight_decay)
    : params_(std::move(params)), lr_(lr), wd_(weight_decay) {
    for (const auto& p : params_) {
        m_.emplace_back(p.val().shape, 0.0);
        v_.emplace_back(p.val().shape, 0.0);
    }
}

void AdamW::zero_grad() {
    for (auto& p : params_) {
        Tensor& g = p.grad();
        std::fill(g.v.begin(), g.v.end(), 0.0);
    }
}

void AdamW::step() {
    constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    ++t_;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
    for (size_t i = 0; i < params_.size(); ++i) {
        Tensor& p = params_[i].val();
        const Tensor& g = params_[i].grad();
        for (int64_t j = 0; j < p.size(); ++j) {
            double gj = g.v[j];
            m_[i].v[j] = b1 * m_[i].v[j] + (1.0 - b1) * gj;
            v_[i].v[j] = b2 * v_[i].v[j] + (1.0 - b2) * gj * gj;
            double mh = m_[i].v[j] / c1;
            double vh = v_[i].v[j] / c2;
            p.v[j] -= lr_ * (mh / (std::sqrt(vh) + eps) + wd_ * p.v[j]);
        }
    }
}

const Tensor& ImageCache::get(const std::string& path) {
    auto it = cache_.find(path);
    if (it != cache_.end()) return it->second;
    return cache_.emplace(path, preprocess(path, size_)).first->second;
}

Tensor stack_images(const std::vector<const Tensor*>& images) {
    if (images.empty()) fail("stack_images: empty batch");
    const int S = images[0]->dim(1);
    Tensor out({static_cast<int>(images.size()), 1, S, S});
    for (size_t n = 0; n < images.size(); ++n) {
        if (images[n]->rank() != 3 || images[n]->dim(1) != S || images[n]->dim(2) != S)
            fail("stack_images: inconsistent shapes");
        std::copy(images[n]->v.begin(), images[n]->v.end(),
                  out.v.begin() + static_cast<int64_t>(n) * S * S);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Shared loop pieces
// ---------------------------------------------------------------------------

static ClassWeights train_weights(const std::vector<TrainItem>& train) {
    std::array<long, 2> counts{0, 0};
    for (const auto& it : train) ++counts[it.label == 1 ? 1 : 0];
    return inverse_frequency_weights(counts);
}

static std::vector<int> item_labels(const std::vector<TrainItem>& items) {
    std::vector<int> out;
    out.reserve(items.size());
    for (const auto& it : items) out.push_back(it.label);
    return out;
}

std::vector<PredictionRow> score_images(const Model& model, const std::vector<TrainItem>& items,
                                        const TrainConfig& config, ImageCache& cache) {
    NoGradGuard ng;
    std::vector<PredictionRow> rows;
    rows.reserve(items.size());
    for (size_t start = 0; start < items.size(); start += static_cast<size_t>(config.batch_size)) {
        const size_t end = std::min(items.size(), start + static_cast<size_t>(config.batch_size));
        std::vector<const Tensor*> batch;
        for (size_t i = start; i < end; ++i) batch.push_back(&cache.get(items[i].path));
        Tensor logits = model.forward(stack_images(batch)).logits.val();
        for (size_t i = start; i < end; ++i) {
            auto p = softmax_row(logits.v.data() + (i - start) * 2, 2);
            PredictionRow row;
            row.image_id = items[i].path;
            row.label = items[i].label;
            row.score = p[1];
            row.prediction = p[1] >= 0.5 ? 1 : 0;
            rows.push_back(std::move(row));
        }
    }
    return rows;
}

// ---------------------------------------------------------------------------
// Student / single-modality training
// ---------------------------------------------------------------------------

TrainedStudent train_student(const std::vector<TrainItem>& train, const std::vector<TrainItem>& val,
                             const StudentSpec& spec, const TrainConfig& config) {
    config.validate();
    spec.distill.validate();
    if (train.empty()) fail("train_student: empty training split");
    const bool needs_teacher = spec.distill.mechanism != Mechanism::none;
    if (needs_teacher && !spec.teacher)
        fail(std::string("train_student: mechanism '") + mechanism_name(spec.distill.mechanism) +
             "' requires a teacher");
    if (needs_teacher) {
        std::string missing;
        for (const auto& it : train)
            if (it.aux_path.empty()) missing += (missing.empty() ? "" : ", ") + it.path;
        if (!missing.empty())
            fail("train_student: no teacher input for training images: " + missing);
    }

    const auto t0 = std::chrono::steady_clock::now();
    auto model = std::make_shared<Model>(spec.arch, spec.flags, config.seed);
    const std::string teacher_digest = needs_teacher ? spec.teacher->weights_digest() : "";

    // Hint adapter: learned 1x1 projection, student tap channels -> teacher's.
    Var adapter_w, adapter_b;
    std::vector<Var> opt_params = model->parameters();
    if (spec.distill.mechanism == Mechanism::feature_hint) {
        const int cs = model->tap_channels();
        const int ct = spec.teacher->tap_channels();
        adapter_w = Var(init_normal({ct, cs, 1, 1}, cs, 1.0, config.seed, "hint.adapter.w"), true);
        adapter_b = Var(Tensor({ct}, 0.0), true);
        opt_params.push_back(adapter_w);
        opt_params.push_back(adapter_b);
    }

    const ClassWeights weights = train_weights(train);
    AdamW opt(opt_params, config.learning_rate, config.weight_decay);
    ImageCache cache(config.input_size);
    const std::vector<int> labels = item_labels(train);
    const bool mech_taps = spec.distill.mechanism == Mechanism::attention_transfer ||
                           spec.distill.mechanism == Mechanism::feature_hint;

    RunResult result;
    result.seed = config.seed;
    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        auto order = make_sampler(labels, config.sampler, derive(config.seed, 1000 + static_cast<uint64_t>(epoch)));
        double loss_sum = 0.0;
        for (size_t start = 0; start < order.size(); start += static_cast<size_t>(config.batch_size)) {
            const size_t end = std::min(order.size(), start + static_cast<size_t>(config.batch_size));
            std::vector<const Tensor*> xs;
            std::vector<int> ys;
            for (size_t i = start; i < end; ++i) {
                const auto& item = train[static_cast<size_t>(order[i])];
                xs.push_back(&cache.get(item.path));
                ys.push_back(item.label);
            }
            ForwardOutput out = model->forward(stack_images(xs));

            LossInputs in;
            in.student_logits = out.logits;
            if (needs_teacher) {
                std::vector<const Tensor*> ts;
                for (size_t i = start; i < end; ++i)
                    ts.push_back(&cache.get(train[static_cast<size_t>(order[i])].aux_path));
                NoGradGuard ng;
                ForwardOutput tout = spec.teacher->forward(stack_images(ts));
                in.teacher_logits = tout.logits.val();
                if (mech_taps) {
                    in.student_taps = {out.stage_features[static_cast<size_t>(out.attention_tap)]};
                    in.teacher_taps = {
                        constant(tout.stage_features[static_cast<size_t>(tout.attention_tap)].val())};
                    in.hint_adapter_w = adapter_w;
                    in.hint_adapter_b = adapter_b;
                }
            }
            Var loss = total_loss(in, ys, spec.distill, weights);
            opt.zero_grad();
            backward(loss);
            opt.step();
            loss_sum += loss.item() * static_cast<double>(end - start);
        }
        result.epoch_losses.push_back(loss_sum / static_cast<double>(order.size()));
    }

    if (!val.empty()) result.rows = score_images(*model, val, config, cache);
    result.weights_digest = model->weights_digest();
    result.teacher_digest = teacher_digest;
    result.wall_time_sec =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return {model, std::move(result)};
}

TrainedTeacher train_teacher(const std::vector<TrainItem>& train, const BackboneConfig& arch,
                             const ModuleFlags& flags, const TrainConfig& config) {
    if (train.empty()) fail("train_teacher: empty training split");
    StudentSpec spec;
    spec.arch = arch;
    spec.flags = flags;
    spec.distill.mechanism = Mechanism::none;
    auto trained = train_student(train, {}, spec, config);
    return {trained.model, trained.result.epoch_losses};
}

// ---------------------------------------------------------------------------
// Late fusion
// ---------------------------------------------------------------------------

TrainedFusion train_late_fusion(const std::vector<TrainItem>& train, const std::vector<TrainItem>& val,
                                const BackboneConfig& xray_arch, const BackboneConfig& ct_arch,
                                const TrainConfig& config) {
    config.validate();
    if (train.empty()) fail("train_late_fusion: empty training split");
    for (const auto& set : {&train, &val})
        for (const auto& it : *set)
            if (it.aux_path.empty())
                fail("train_late_fusion: fusion requires both modalities; missing CT for " + it.path);

    const auto t0 = std::chrono::steady_clock::now();
    auto model = std::make_shared<LateFusionModel>(xray_arch, ct_arch, config.seed);
    const ClassWeights weights = train_weights(train);
    AdamW opt(model->parameters(), config.learning_rate, config.weight_decay);
    ImageCache cache(config.input_size);
    const std::vector<int> labels = item_labels(train);

    RunResult result;
    result.seed = config.seed;
    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        auto order = make_sampler(labels, config.sampler, derive(config.seed, 1000 + static_cast<uint64_t>(epoch)));
        double loss_sum = 0.0;
        for (size_t start = 0; start < order.size(); start += static_cast<size_t>(config.batch_size)) {
            const size_t end = std::min(order.size(), start + static_cast<size_t>(config.batch_size));
            std::vector<const Tensor*> xs, cs;
            std::vector<int> ys;
            for (size_t i = start; i < end; ++i) {
                const auto& item = train[static_cast<size_t>(order[i])];
                xs.push_back(&cache.get(item.path));
                cs.push_back(&cache.get(item.aux_path));
                ys.push_back(item.label);
            }
            Var logits = model->forward(stack_images(xs), stack_images(cs));
            Var loss = weighted_ce(logits, ys, weights);
            opt.zero_grad();
            backward(loss);
            opt.step();
            loss_sum += loss.item() * static_cast<double>(end - start);
        }
        result.epoch_losses.push_back(loss_sum / static_cast<double>(order.size()));
    }

    if (!val.empty()) {
        NoGradGuard ng;
        for (size_t start = 0; start < val.size(); start += static_cast<size_t>(config.batch_size)) {
            const size_t end = std::min(val.size(), start + static_cast<size_t>(config.batch_size));
            std::vector<const Tensor*> xs, cs;
            for (size_t i = start; i < end; ++i) {
                xs.push_back(&cache.get(val[i].path));
                cs.push_back(&cache.get(val[i].aux_path));
            }
            Tensor logits = model->forward(stack_images(xs), stack_images(cs)).val();
            for (size_t i = start; i < end; ++i) {
                auto p = softmax_row(logits.v.data() + (i - start) * 2, 2);
                result.rows.push_back({val[i].path, val[i].label, p[1], p[1] >= 0.5 ? 1 : 0});
            }
        }
    }
    result.weights_digest = model->weights_digest();
    result.wall_time_sec =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return {model, std::move(result)};
}

// ---------------------------------------------------------------------------
// Run directories
// ---------------------------------------------------------------------------

namespace fs = std::filesystem;
using nlohmann::json;

void write_run_dir(const std::string& run_dir, const std::string& config_json,
                   const RunResult& result, const std::vector<uint8_t>& weights_bytes) {
    fs::create_directories(run_dir);
    {
        std::ofstream out(fs::path(run_dir) / "config.json");
        if (!out) fail("cannot write run config in " + run_dir);
        out << config_json;
        if (!config_json.empty() && config_json.back() != '\n') out << "\n";
    }
    {
        std::ofstream out(fs::path(run_dir) / "predictions.csv");
        out << "image_id,label,score,prediction\n";
        for (const auto& r : result.rows)
            out << join_csv({r.image_id, std::to_string(r.label), fmt_full(r.score),
                             std::to_string(r.prediction)})
                << "\n";
    }
    {
        std::ofstream out(fs::path(run_dir) / "losses.csv");
        out << "epoch,loss\n";
        for (size_t e = 0; e < result.epoch_losses.size(); ++e)
            out << e << "," << fmt_full(result.epoch_losses[e]) << "\n";
    }
    {
        std::ofstream out(fs::path(run_dir) / "weights.bin", std::ios::binary);
        out.write(reinterpret_cast<const char*>(weights_bytes.data()),
                  static_cast<std::streamsize>(weights_bytes.size()));
    }
    {
        char stamp[32];
        std::time_t now = std::time(nullptr);
        std::strftime(stamp, sizeof(stamp), "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&now));
        json meta{{"spec_name", result.spec_name},
                  {"config_hash", result.config_hash},
                  {"seed", result.seed},
                  {"split_id", result.split_id},
                  {"weights_digest", result.weights_digest},
                  {"teacher_digest", result.teacher_digest},
                  {"wall_time_sec", result.wall_time_sec},
                  {"timestamp", stamp}};
        std::ofstream out(fs::path(run_dir) / "meta.json");
        out << meta.dump(2) << "\n";
    }
}

std::vector<PredictionRow> read_predictions(const std::string& path) {
    auto rows = read_csv(path);
    if (rows.empty() || rows[0] != CsvRow{"image_id", "label", "score", "prediction"})
        fail("bad predictions file: " + path);
    std::vector<PredictionRow> out;
    for (size_t i = 1; i < rows.size(); ++i) {
        if (rows[i].size() != 4) fail("bad predictions row in " + path);
        PredictionRow r;
        r.image_id = rows[i][0];
        r.label = static_cast<int>(*parse_int(rows[i][1]));
        r.score = std::stod(rows[i][2]);
        r.prediction = static_cast<int>(*parse_int(rows[i][3]));
        out.push_back(std::move(r));
    }
    return out;
}

StoredRun read_run_dir(const std::string& run_dir) {
    StoredRun sr;
    {
        std::ifstream in(fs::path(run_dir) / "config.json");
        if (!in) fail("missing config.json in " + run_dir);
        sr.config_json.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
    }
    sr.result.rows = read_predictions((fs::path(run_dir) / "predictions.csv").string());
    {
        auto rows = read_csv((fs::path(run_dir) / "losses.csv").string());
        for (size_t i = 1; i < rows.size(); ++i) sr.result.epoch_losses.push_back(std::stod(rows[i][1]));
    }
    {
        std::ifstream in(fs::path(run_dir) / "meta.json");
        if (!in) fail("missing meta.json in " + run_dir);
        json meta = json::parse(in);
        sr.result.spec_name = meta.value("spec_name", "");
        sr.result.config_hash = meta.value("config_hash", "");
        sr.result.seed = meta.value("seed", uint64_t{0});
        sr.result.split_id = meta.value("split_id", "");
        sr.result.weights_digest = meta.value("weights_digest", "");
        sr.result.teacher_digest = meta.value("teacher_digest", "");
        sr.result.wall_time_sec = meta.value("wall_time_sec", 0.0);
    }
    return sr;
}

bool run_dir_complete(const std::string& run_dir) {
    for (const char* f : {"config.json", "predictions.csv", "losses.csv", "weights.bin", "meta.json"})
        if (!fs::exists(fs::path(run_dir) / f)) return false;
    return true;
}

void collect_scores(const std::vector<PredictionRow>& rows, std::vector<double>& scores,
                    std::vector<int>& labels) {
    scores.clear();
    labels.clear();
    for (const auto& r : rows) {
        scores.push_back(r.score);
        labels.push_back(r.label);
    }
}

}  // namespace xkd
