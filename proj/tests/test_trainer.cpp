#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <set>

#include "test_util.hpp"
#include "xkd/experiments.hpp"
#include "xkd/image_io.hpp"
#include "xkd/synthetic.hpp"
#include "xkd/trainer.hpp"

using namespace xkd;
namespace fs = std::filesystem;

namespace {

Manifests cohort_manifests(const std::string& root) {
    auto raw = ingest_metadata((fs::path(root) / "metadata.csv").string(), ColumnMap{});
    auto norm = normalize_records(raw, root);
    Manifests m;
    m.all_xray = build_manifest(norm.records, ManifestKind::all_xray);
    m.all_ct = build_manifest(norm.records, ManifestKind::all_ct);
    m.paired = build_paired_manifest(norm.records);
    return m;
}

std::vector<TrainItem> manifest_items(const Manifest& m, const std::vector<std::string>& patients) {
    std::set<std::string> want(patients.begin(), patients.end());
    std::vector<TrainItem> out;
    for (const auto& r : m.records)
        if (want.count(r.patient_id)) out.push_back({r.image_path, r.label == Label::positive ? 1 : 0, ""});
    return out;
}

TrainConfig small_config(uint64_t seed, int epochs = 4) {
    TrainConfig c;
    c.input_size = 16;
    c.epochs = epochs;
    c.seed = seed;
    return c;
}

double accuracy_of(const std::vector<PredictionRow>& rows) {
    double ok = 0;
    for (const auto& r : rows) ok += r.prediction == r.label ? 1 : 0;
    return rows.empty() ? 0.0 : ok / static_cast<double>(rows.size());
}

}  // namespace

TEST_SUITE_BEGIN("trainer");

TEST_CASE("preprocess: standardization formula, shape, probes, errors") {
    auto dir = xkd_test::scratch_dir("trainer_pre");
    std::vector<uint8_t> constant_img(64 * 64, 100);
    write_pgm(dir + "/c.pgm", constant_img, 64, 64);
    Tensor t = preprocess(dir + "/c.pgm", 16);
    CHECK(t.shape == std::vector<int>{1, 16, 16});
    const double want = (100.0 / 255.0 - 0.5) / 0.25;
    for (double v : t.v) CHECK(v == doctest::Approx(want).epsilon(1e-12));

    // near-mid-gray image standardizes to approximately zero
    std::vector<uint8_t> mid(32 * 32, 128);
    write_pgm(dir + "/mid.pgm", mid, 32, 32);
    Tensor tm = preprocess(dir + "/mid.pgm", 8);
    for (double v : tm.v) CHECK(std::fabs(v) < 0.01);

    // 2x2 checkerboard upsampled to 4x4: hand-computed bilinear probes
    write_pgm(dir + "/cb.pgm", {255, 0, 0, 255}, 2, 2);
    Tensor cb = preprocess(dir + "/cb.pgm", 4);
    auto px = [&](int y, int x) { return cb.v[static_cast<size_t>(y) * 4 + x]; };
    CHECK(px(0, 0) == doctest::Approx(2.0).epsilon(1e-9));    // raw 1.0
    CHECK(px(1, 1) == doctest::Approx(0.5).epsilon(1e-9));    // raw 0.625
    CHECK(px(1, 2) == doctest::Approx(-0.5).epsilon(1e-9));   // raw 0.375
    CHECK(px(3, 3) == doctest::Approx(2.0).epsilon(1e-9));

    CHECK_THROWS_WITH_AS(preprocess(dir + "/nope.png", 16), doctest::Contains("nope.png"), Error);
}

TEST_CASE("samplers: determinism, permutation, balance, preconditions") {
    std::vector<int> labels{1, 0, 1, 1, 0};
    auto a = make_sampler(labels, SamplerMode::shuffled, 5);
    auto b = make_sampler(labels, SamplerMode::shuffled, 5);
    CHECK(a == b);
    auto sorted = a;
    std::sort(sorted.begin(), sorted.end());
    CHECK(sorted == std::vector<int>{0, 1, 2, 3, 4});
    CHECK(make_sampler(labels, SamplerMode::shuffled, 6) != a);

    // class-balanced: each class drawn ~50% over a long stream
    std::vector<int> skewed(10000, 1);
    for (int i = 0; i < 1000; ++i) skewed[static_cast<size_t>(i)] = 0;
    auto stream = make_sampler(skewed, SamplerMode::class_balanced, 9);
    REQUIRE(stream.size() == skewed.size());
    double neg = 0;
    for (int idx : stream) neg += skewed[static_cast<size_t>(idx)] == 0 ? 1 : 0;
    CHECK(neg / static_cast<double>(stream.size()) == doctest::Approx(0.5).epsilon(0.04));

    CHECK_THROWS(make_sampler({}, SamplerMode::shuffled, 1));
    CHECK_THROWS(make_sampler({1, 1, 1}, SamplerMode::class_balanced, 1));
}

TEST_CASE("AdamW drives a quadratic toward its minimum and decays weights") {
    Var p(Tensor::from({1}, {4.0}), true);
    AdamW opt({p}, 0.1, 0.0);
    for (int i = 0; i < 300; ++i) {
        Var loss = mse(p, constant(Tensor::from({1}, {1.5})));
        opt.zero_grad();
        backward(loss);
        opt.step();
    }
    CHECK(p.val().v[0] == doctest::Approx(1.5).epsilon(1e-3));

    Var q(Tensor::from({1}, {2.0}), true);
    AdamW decay_only({q}, 0.01, 0.5);
    for (int i = 0; i < 50; ++i) {
        q.grad();  // zero gradient; only decoupled decay acts
        decay_only.step();
    }
    CHECK(std::fabs(q.val().v[0]) < 2.0);
}

TEST_CASE("teacher training separates a signal-bearing CT cohort") {
    auto dir = xkd_test::scratch_dir("trainer_teacher");
    SynthConfig sc;
    sc.n_patients = 24;
    sc.image_size = 16;
    sc.ct_signal = 0.8;
    sc.xray_signal = 0.8;
    sc.seed = 101;
    sc.n_todo_rows = 0;
    generate_cohort(sc, dir);
    Manifests m = cohort_manifests(dir);

    auto labels = all_patient_labels(m.all_ct);
    std::vector<std::string> patients;
    for (const auto& pl : labels) patients.push_back(pl.patient_id);
    auto train = manifest_items(m.all_ct, patients);
    REQUIRE(train.size() >= 24);

    TrainConfig cfg = small_config(42, 5);
    auto teacher = train_teacher(train, BackboneConfig::teacher_default(16), {}, cfg);
    REQUIRE(teacher.epoch_losses.size() == 5);
    CHECK(teacher.epoch_losses.back() < teacher.epoch_losses.front());

    ImageCache cache(16);
    auto rows = score_images(*teacher.model, train, cfg, cache);
    CHECK(accuracy_of(rows) > 0.95);
}

TEST_CASE("same seed gives bit-identical runs; epochs=0 returns the init") {
    auto dir = xkd_test::scratch_dir("trainer_det");
    SynthConfig sc;
    sc.n_patients = 12;
    sc.image_size = 16;
    sc.seed = 77;
    sc.n_todo_rows = 0;
    generate_cohort(sc, dir);
    Manifests m = cohort_manifests(dir);
    auto split = fixed_split(m.paired, 0.25, 3);

    StudentSpec spec;
    spec.arch = BackboneConfig::student_default(16);
    auto train = manifest_items(m.paired, split.train_patients);
    auto val = manifest_items(m.paired, split.val_patients);

    auto r1 = train_student(train, val, spec, small_config(42, 2));
    auto r2 = train_student(train, val, spec, small_config(42, 2));
    CHECK(r1.result.weights_digest == r2.result.weights_digest);
    REQUIRE(r1.result.rows.size() == r2.result.rows.size());
    for (size_t i = 0; i < r1.result.rows.size(); ++i) {
        CHECK(r1.result.rows[i].image_id == r2.result.rows[i].image_id);
        CHECK(r1.result.rows[i].score == r2.result.rows[i].score);
    }
    auto r3 = train_student(train, val, spec, small_config(43, 2));
    CHECK(r3.result.weights_digest != r1.result.weights_digest);

    auto r0 = train_student(train, val, spec, small_config(42, 0));
    Model fresh(spec.arch, spec.flags, 42);
    CHECK(r0.result.weights_digest == fresh.weights_digest());
    CHECK(r0.result.epoch_losses.empty());
}

TEST_CASE("mechanism none is exactly plain weighted-CE training") {
    auto dir = xkd_test::scratch_dir("trainer_plain");
    SynthConfig sc;
    sc.n_patients = 10;
    sc.image_size = 16;
    sc.seed = 55;
    sc.n_todo_rows = 0;
    generate_cohort(sc, dir);
    Manifests m = cohort_manifests(dir);
    auto split = fixed_split(m.paired, 0.3, 1);
    auto train = manifest_items(m.paired, split.train_patients);

    StudentSpec spec;
    spec.arch = BackboneConfig::student_default(16);
    auto a = train_student(train, {}, spec, small_config(42, 2));
    auto b = train_teacher(train, spec.arch, {}, small_config(42, 2));
    CHECK(a.result.weights_digest == b.model->weights_digest());
}

TEST_CASE("cross-modal distillation: teacher frozen, rows confined to val") {
    auto dir = xkd_test::scratch_dir("trainer_kd");
    SynthConfig sc;
    sc.n_patients = 14;
    sc.image_size = 16;
    sc.seed = 31;
    sc.n_todo_rows = 0;
    generate_cohort(sc, dir);
    Manifests m = cohort_manifests(dir);
    auto split = fixed_split(m.paired, 0.25, 9);

    std::set<std::string> train_p(split.train_patients.begin(), split.train_patients.end());
    std::vector<TrainItem> train, val, ct_train;
    std::set<std::string> seen_ct;
    for (const auto& p : m.paired.pairs) {
        TrainItem item{p.xray.image_path, p.xray.label == Label::positive ? 1 : 0, p.ct.image_path};
        if (train_p.count(p.xray.patient_id)) {
            train.push_back(item);
            if (seen_ct.insert(p.ct.image_path).second)
                ct_train.push_back({p.ct.image_path, p.ct.label == Label::positive ? 1 : 0, ""});
        } else {
            val.push_back(item);
        }
    }

    TrainConfig cfg = small_config(42, 2);
    auto teacher = train_teacher(ct_train, BackboneConfig::teacher_default(16), {}, cfg);
    const std::string digest_before = teacher.model->weights_digest();

    StudentSpec spec;
    spec.arch = BackboneConfig::student_default(16);
    spec.distill.mechanism = Mechanism::logit_kd;
    spec.distill.temperature = 4.0;
    spec.distill.alpha = 0.6;
    spec.teacher = teacher.model.get();
    auto out = train_student(train, val, spec, cfg);

    CHECK(teacher.model->weights_digest() == digest_before);  // frozen
    CHECK(out.result.teacher_digest == digest_before);
    std::set<std::string> val_ids;
    for (const auto& item : val) val_ids.insert(item.path);
    REQUIRE(out.result.rows.size() == val.size());
    for (const auto& row : out.result.rows) CHECK(val_ids.count(row.image_id) == 1);
    for (const auto& row : out.result.rows) {
        CHECK(row.score >= 0.0);
        CHECK(row.score <= 1.0);
    }

    // attention transfer and feature hint also run and stay finite
    for (Mechanism mech : {Mechanism::attention_transfer, Mechanism::feature_hint}) {
        spec.distill.mechanism = mech;
        auto mech_out = train_student(train, val, spec, small_config(42, 1));
        CHECK(mech_out.result.rows.size() == val.size());
        CHECK(teacher.model->weights_digest() == digest_before);
    }

    // a cross-modal mechanism without CT inputs is an error listing images
    std::vector<TrainItem> missing = train;
    missing[0].aux_path.clear();
    spec.distill.mechanism = Mechanism::logit_kd;
    CHECK_THROWS_WITH_AS(train_student(missing, val, spec, cfg),
                         doctest::Contains(missing[0].path.c_str()), Error);
    spec.teacher = nullptr;
    CHECK_THROWS(train_student(train, val, spec, cfg));
}

TEST_CASE("late fusion trains on pairs and rejects missing modalities") {
    auto dir = xkd_test::scratch_dir("trainer_fusion");
    SynthConfig sc;
    sc.n_patients = 10;
    sc.image_size = 16;
    sc.seed = 21;
    sc.n_todo_rows = 0;
    generate_cohort(sc, dir);
    Manifests m = cohort_manifests(dir);
    auto split = fixed_split(m.paired, 0.3, 2);

    std::set<std::string> train_p(split.train_patients.begin(), split.train_patients.end());
    std::vector<TrainItem> train, val;
    for (const auto& p : m.paired.pairs) {
        TrainItem item{p.xray.image_path, p.xray.label == Label::positive ? 1 : 0, p.ct.image_path};
        (train_p.count(p.xray.patient_id) ? train : val).push_back(item);
    }
    auto out = train_late_fusion(train, val, BackboneConfig::student_default(16),
                                 BackboneConfig::teacher_default(16), small_config(42, 2));
    CHECK(out.result.rows.size() == val.size());
    auto again = train_late_fusion(train, val, BackboneConfig::student_default(16),
                                   BackboneConfig::teacher_default(16), small_config(42, 2));
    CHECK(out.result.weights_digest == again.result.weights_digest);

    auto broken = train;
    broken[0].aux_path.clear();
    CHECK_THROWS(train_late_fusion(broken, val, BackboneConfig::student_default(16),
                                   BackboneConfig::teacher_default(16), small_config(42, 1)));
}

TEST_CASE("run directories round-trip exactly") {
    auto dir = xkd_test::scratch_dir("trainer_rundir");
    RunResult r;
    r.spec_name = "demo";
    r.config_hash = "abc";
    r.seed = 42;
    r.split_id = "fixed";
    r.rows = {{"img/a.pgm", 1, 0.12345678901234567, 0}, {"img/b.pgm", 0, 1.0 / 3.0, 0}};
    r.epoch_losses = {0.9, 0.5};
    r.weights_digest = "d00d";
    r.wall_time_sec = 1.25;
    std::vector<uint8_t> weights{1, 2, 3, 4};
    write_run_dir(dir + "/run1", "{\"k\":1}", r, weights);
    CHECK(run_dir_complete(dir + "/run1"));

    StoredRun back = read_run_dir(dir + "/run1");
    CHECK(back.result.spec_name == "demo");
    CHECK(back.result.seed == 42);
    REQUIRE(back.result.rows.size() == 2);
    CHECK(back.result.rows[0].score == r.rows[0].score);  // shortest round-trip formatting
    CHECK(back.result.rows[1].score == r.rows[1].score);
    CHECK(back.result.epoch_losses == r.epoch_losses);
    CHECK_FALSE(run_dir_complete(dir + "/absent"));
}

TEST_SUITE_END();
