#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "test_util.hpp"
#include "xkd/digest.hpp"
#include "xkd/reporting.hpp"

using namespace xkd;
namespace fs = std::filesystem;

namespace {

size_t count_occurrences(const std::string& hay, const std::string& needle) {
    size_t n = 0, pos = 0;
    while ((pos = hay.find(needle, pos)) != std::string::npos) {
        ++n;
        pos += needle.size();
    }
    return n;
}

// A small fake output tree: real run directories with synthetic predictions,
// plus a matrix index, without any training.
MatrixResult fake_matrix(const std::string& out_root, int n_specs, int n_runs, Regime regime) {
    fs::create_directories(fs::path(out_root) / "runs");
    Rng rng(42);
    MatrixResult m;
    m.name = regime == Regime::resampled ? "resampled_matrix" : "fixed_matrix";
    m.regime = regime;
    m.support = "4 validation patients / 4 images (3 positive, 1 negative)";
    for (int s = 0; s < n_specs; ++s) {
        SpecResult sr;
        sr.spec.name = "spec" + std::to_string(s);
        sr.spec.variant = Variant::custom;
        sr.spec.role = "demo";
        sr.spec.regime = regime;
        std::vector<MetricsReport> reports;
        for (int r = 0; r < n_runs; ++r) {
            RunResult result;
            result.spec_name = sr.spec.name;
            result.seed = 42 + static_cast<uint64_t>(r);
            result.split_id = regime == Regime::resampled ? "rs" + std::to_string(r) : "fixed";
            for (int i = 0; i < 6; ++i) {
                PredictionRow row;
                row.image_id = "img" + std::to_string(i);
                row.label = i < 4 ? 1 : 0;
                row.score = rng.real();
                row.prediction = row.score >= 0.5 ? 1 : 0;
                result.rows.push_back(row);
            }
            result.epoch_losses = {0.8, 0.6};
            result.weights_digest = sha256_hex(sr.spec.name + std::to_string(r));
            SpecRun run;
            run.run_id = sr.spec.name + "__" + result.split_id + "__s" + std::to_string(result.seed);
            const std::string dir = (fs::path(out_root) / "runs" / run.run_id).string();
            write_run_dir(dir, "{\"demo\":true}", result, {0x58, 0x4b, 0x44, 0x57, 0, 0, 0, 0});
            run.result = result;
            std::vector<double> scores;
            std::vector<int> labels;
            collect_scores(result.rows, scores, labels);
            run.metrics = evaluate(scores, labels);
            reports.push_back(run.metrics);
            sr.runs.push_back(std::move(run));
        }
        sr.summary = summarize(reports);
        m.specs.push_back(std::move(sr));
    }
    write_matrix_index(m, out_root);
    return m;
}

}  // namespace

TEST_SUITE_BEGIN("reporting");

TEST_CASE("delimited table: banner, rows, parse-back within formatting precision") {
    auto dir = xkd_test::scratch_dir("rep_table");
    MatrixResult m = fake_matrix(dir, 6, 4, Regime::fixed_split);
    const std::string path = dir + "/summaries/fixed_matrix.csv";
    export_table(m, TableFormat::delimited, path);

    ParsedTable t = parse_table(path);
    CHECK(t.support == m.support);
    REQUIRE(t.header.size() == 2 + static_cast<size_t>(kMetricCount));
    REQUIRE(t.rows.size() == 6);
    for (size_t s = 0; s < t.rows.size(); ++s) {
        CHECK(t.rows[s][0] == m.specs[s].spec.name);
        CHECK(t.rows[s][1] == m.specs[s].spec.role);
        for (int f = 0; f < kMetricCount; ++f) {
            auto [mean, stdev] = parse_mean_std(t.rows[s][static_cast<size_t>(2 + f)]);
            CHECK(std::fabs(mean - m.specs[s].summary.mean.*kMetricFields[static_cast<size_t>(f)]) < 5e-4);
            CHECK(std::fabs(stdev - m.specs[s].summary.stdev.*kMetricFields[static_cast<size_t>(f)]) < 5e-4);
        }
    }

    // single run renders std as 0.000
    auto dir2 = xkd_test::scratch_dir("rep_single");
    MatrixResult single = fake_matrix(dir2, 1, 1, Regime::fixed_split);
    std::string text = render_table(single, TableFormat::delimited);
    CHECK(text.find("± 0.000") != std::string::npos);

    // identical inputs render byte-identical tables
    CHECK(render_table(m, TableFormat::delimited) == render_table(m, TableFormat::delimited));

    std::string md = render_table(m, TableFormat::markdown);
    CHECK(md.find("| spec0 |") != std::string::npos);
    CHECK(md.find("Support: ") == 0);
}

TEST_CASE("figures render deterministic SVG with the expected element counts") {
    auto dir = xkd_test::scratch_dir("rep_fig");
    MatrixResult fixed = fake_matrix(dir, 6, 4, Regime::fixed_split);
    std::string bars = render_figure(fixed, FigureKind::bars_with_points);
    CHECK(count_occurrences(bars, "<rect") >= 6 * 3);             // three bars per spec
    CHECK(count_occurrences(bars, "<circle") == 6 * 3 * 4);       // per-run points
    CHECK(bars == render_figure(fixed, FigureKind::bars_with_points));

    auto dir2 = xkd_test::scratch_dir("rep_fig2");
    MatrixResult res = fake_matrix(dir2, 7, 8, Regime::resampled);
    std::string strip = render_figure(res, FigureKind::resample_strip);
    CHECK(count_occurrences(strip, "<circle") == 7 * 8);  // one point per resample per spec
    CHECK_THROWS(render_figure(fixed, FigureKind::resample_strip));

    GridResult grid;
    grid.temperatures = {2, 4, 6};
    grid.alphas = {0.3, 0.6, 0.9};
    grid.macro_f1 = {{0.4, 0.41, 0.42}, {0.4, 0.43, 0.4}, {0.39, 0.4, 0.41}};
    std::string heat = render_grid_figure(grid);
    CHECK(count_occurrences(heat, "<rect") == 9 + 1);  // cells + background
    CHECK(heat.find("T=2") != std::string::npos);
    CHECK(heat.find("α=0.3") != std::string::npos);
}

TEST_CASE("manifest + audit: pass on untouched tree, fail on tampering") {
    auto dir = xkd_test::scratch_dir("rep_audit");
    MatrixResult m = fake_matrix(dir, 3, 2, Regime::fixed_split);
    export_table(m, TableFormat::delimited, dir + "/summaries/fixed_matrix.csv");
    export_figure(m, FigureKind::bars_with_points, dir + "/summaries/fixed_matrix.svg");
    write_run_manifest(dir);

    AuditReport ok = audit_check(dir);
    CHECK(ok.pass);
    CHECK(ok.failures.empty());

    // edit one score in one prediction file -> audit fails naming that run
    const std::string victim = m.specs[1].runs[0].run_id;
    const std::string pred_path = dir + "/runs/" + victim + "/predictions.csv";
    {
        std::ifstream in(pred_path);
        std::string text((std::istreambuf_iterator<char>(in)), {});
        in.close();
        size_t dot = text.find("0.");
        REQUIRE(dot != std::string::npos);
        text[dot + 2] = text[dot + 2] == '9' ? '1' : '9';
        std::ofstream out(pred_path);
        out << text;
    }
    AuditReport bad = audit_check(dir);
    CHECK_FALSE(bad.pass);
    bool named = false;
    for (const auto& f : bad.failures)
        if (f.find(victim) != std::string::npos) named = true;
    CHECK(named);

    // a regenerated manifest hides the digest mismatch but the summary
    // re-render still catches value drift
    write_run_manifest(dir);
    AuditReport regen = audit_check(dir);
    CHECK_FALSE(regen.pass);
    bool summary_flagged = false;
    for (const auto& f : regen.failures)
        if (f.find("fixed_matrix.csv") != std::string::npos) summary_flagged = true;
    CHECK(summary_flagged);

    // re-exporting the summary restores a consistent tree
    MatrixResult fixed_again = read_matrix_from_index(dir + "/summaries/fixed_matrix.index.json", dir);
    export_table(fixed_again, TableFormat::delimited, dir + "/summaries/fixed_matrix.csv");
    export_figure(fixed_again, FigureKind::bars_with_points, dir + "/summaries/fixed_matrix.svg");
    write_run_manifest(dir);
    CHECK(audit_check(dir).pass);

    // missing artifact -> fail with the path
    fs::remove(dir + "/runs/" + victim + "/weights.bin");
    AuditReport missing = audit_check(dir);
    CHECK_FALSE(missing.pass);
    bool path_named = false;
    for (const auto& f : missing.failures)
        if (f.find(victim) != std::string::npos && f.find("weights.bin") != std::string::npos)
            path_named = true;
    CHECK(path_named);
}

TEST_SUITE_END();
