#include "xkd/reporting.hpp"

#include <algorithm>
#include <cmath>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>

#include <json.hpp>

#include "xkd/csv.hpp"
#include "xkd/digest.hpp"

namespace fs = std::filesystem;

namespace xkd {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Tables
// ---------------------------------------------------------------------------

static std::string mean_std_cell(double mean, double stdev) {
    return fmt_fixed(mean, 3) + " ± " + fmt_fixed(stdev, 3);
}

std::string render_table(const MatrixResult& result, TableFormat format) {
    if (result.specs.empty()) fail("render_table: empty matrix result");
    for (const auto& sr : result.specs)
        if (sr.runs.empty()) fail("render_table: incomplete result for spec " + sr.spec.name);

    std::ostringstream os;
    if (format == TableFormat::delimited) {
        os << "# support: " << result.support << "\n";
        CsvRow header{"spec", "role"};
        for (const char* name : kMetricNames) header.push_back(name);
        os << join_csv(header) << "\n";
        for (const auto& sr : result.specs) {
            CsvRow row{sr.spec.name, sr.spec.role};
            for (auto field : kMetricFields)
                row.push_back(mean_std_cell(sr.summary.mean.*field, sr.summary.stdev.*field));
            os << join_csv(row) << "\n";
        }
    } else {
        os << "Support: " << result.support << "\n\n";
        os << "| spec | role |";
        for (const char* name : kMetricNames) os << " " << name << " |";
        os << "\n|---|---|";
        for (int i = 0; i < kMetricCount; ++i) os << "---|";
        os << "\n";
        for (const auto& sr : result.specs) {
            os << "| " << sr.spec.name << " | " << sr.spec.role << " |";
            for (auto field : kMetricFields)
                os << " " << mean_std_cell(sr.summary.mean.*field, sr.summary.stdev.*field) << " |";
            os << "\n";
        }
    }
    return os.str();
}

void export_table(const MatrixResult& result, TableFormat format, const std::string& path) {
    std::ofstream out(path);
    if (!out) fail("cannot write table: " + path);
    out << render_table(result, format);
}

ParsedTable parse_table(const std::string& path) {
    std::ifstream in(path);
    if (!in) fail("cannot open table: " + path);
    ParsedTable t;
    std::string line;
    bool have_header = false;
    while (std::getline(in, line)) {
        if (line.rfind("# support: ", 0) == 0) {
            t.support = line.substr(11);
            continue;
        }
        if (trim(line).empty()) continue;
        CsvRow row = parse_csv_line(line);
        if (!have_header) {
            t.header = row;
            have_header = true;
        } else {
            t.rows.push_back(row);
        }
    }
    return t;
}

std::pair<double, double> parse_mean_std(const std::string& cell) {
    const std::string sep = " ± ";
    size_t p = cell.find(sep);
    if (p == std::string::npos) fail("parse_mean_std: bad cell '" + cell + "'");
    return {std::stod(cell.substr(0, p)), std::stod(cell.substr(p + sep.size()))};
}

// ---------------------------------------------------------------------------
// Figures (deterministic SVG; no timestamps embedded)
// ---------------------------------------------------------------------------

namespace {

struct Svg {
    std::ostringstream body;
    int width, height;
    Svg(int w, int h) : width(w), height(h) {}
    void rect(double x, double y, double w, double h, const std::string& fill,
              const std::string& extra = "") {
        body << "<rect x=\"" << fmt_fixed(x, 2) << "\" y=\"" << fmt_fixed(y, 2) << "\" width=\""
             << fmt_fixed(w, 2) << "\" height=\"" << fmt_fixed(h, 2) << "\" fill=\"" << fill << "\" "
             << extra << "/>\n";
    }
    void circle(double x, double y, double r, const std::string& fill) {
        body << "<circle cx=\"" << fmt_fixed(x, 2) << "\" cy=\"" << fmt_fixed(y, 2) << "\" r=\""
             << fmt_fixed(r, 2) << "\" fill=\"" << fill << "\"/>\n";
    }
    void line(double x1, double y1, double x2, double y2) {
        body << "<line x1=\"" << fmt_fixed(x1, 2) << "\" y1=\"" << fmt_fixed(y1, 2) << "\" x2=\""
             << fmt_fixed(x2, 2) << "\" y2=\"" << fmt_fixed(y2, 2)
             << "\" stroke=\"#444\" stroke-width=\"1\"/>\n";
    }
    void text(double x, double y, const std::string& s, int size = 11,
              const std::string& anchor = "start") {
        body << "<text x=\"" << fmt_fixed(x, 2) << "\" y=\"" << fmt_fixed(y, 2) << "\" font-size=\""
             << size << "\" font-family=\"sans-serif\" text-anchor=\"" << anchor << "\">" << s
             << "</text>\n";
    }
    std::string str() const {
        std::ostringstream os;
        os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
           << "\" viewBox=\"0 0 " << width << " " << height << "\">\n"
           << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
           << body.str() << "</svg>\n";
        return os.str();
    }
};

const char* kBarColors[3] = {"#4878a8", "#e49444", "#6a9f58"};
const double kBarMetricsCount = 3;  // accuracy, macro-F1, balanced accuracy

}  // namespace

// Grouped bars (accuracy, macro-F1, balanced accuracy) with per-run points.
static std::string render_bars(const MatrixResult& result) {
    const int W = 900, H = 420;
    const double left = 60, bottom = H - 90, top = 30;
    Svg svg(W, H);
    const double plot_h = bottom - top;
    // y axis 0..1
    for (int i = 0; i <= 5; ++i) {
        double v = i / 5.0;
        double y = bottom - v * plot_h;
        svg.line(left - 4, y, W - 20, y);
        svg.text(left - 8, y + 4, fmt_fixed(v, 1), 10, "end");
    }
    const size_t n = result.specs.size();
    const double group_w = (W - left - 30) / static_cast<double>(n);
    const double bar_w = group_w / (kBarMetricsCount + 1.5);
    const std::array<double MetricsReport::*, 3> fields = {
        &MetricsReport::accuracy, &MetricsReport::macro_f1, &MetricsReport::balanced_accuracy};
    for (size_t s = 0; s < n; ++s) {
        const auto& sr = result.specs[s];
        const double gx = left + group_w * static_cast<double>(s) + bar_w / 2;
        for (size_t f = 0; f < fields.size(); ++f) {
            double mean = sr.summary.mean.*fields[f];
            double x = gx + bar_w * static_cast<double>(f);
            svg.rect(x, bottom - mean * plot_h, bar_w * 0.85, mean * plot_h, kBarColors[f]);
            for (const auto& run : sr.runs)
                svg.circle(x + bar_w * 0.42, bottom - (run.metrics.*fields[f]) * plot_h, 2.5, "#222222");
        }
        svg.text(gx + bar_w * 1.5, bottom + 14 + static_cast<double>(s % 2) * 12, sr.spec.name, 10,
                 "middle");
    }
    const char* legend[3] = {"accuracy", "macro-F1", "balanced accuracy"};
    for (int f = 0; f < 3; ++f) {
        svg.rect(left + 170.0 * f, H - 40, 12, 12, kBarColors[f]);
        svg.text(left + 170.0 * f + 18, H - 30, legend[f], 11);
    }
    svg.text(left, 18, result.name + " (bars: repeated-run means; points: per-run outcomes)", 12);
    return svg.str();
}

// One point per resample per spec (balanced accuracy).
static std::string render_strip(const MatrixResult& result) {
    const int W = 900, H = 420;
    const double left = 60, bottom = H - 90, top = 30;
    Svg svg(W, H);
    const double plot_h = bottom - top;
    for (int i = 0; i <= 5; ++i) {
        double v = i / 5.0;
        double y = bottom - v * plot_h;
        svg.line(left - 4, y, W - 20, y);
        svg.text(left - 8, y + 4, fmt_fixed(v, 1), 10, "end");
    }
    const size_t n = result.specs.size();
    const double col_w = (W - left - 30) / static_cast<double>(n);
    for (size_t s = 0; s < n; ++s) {
        const auto& sr = result.specs[s];
        const double cx = left + col_w * (static_cast<double>(s) + 0.5);
        for (size_t r = 0; r < sr.runs.size(); ++r) {
            // deterministic horizontal stagger per resample index
            double dx = (static_cast<double>(r) - static_cast<double>(sr.runs.size() - 1) / 2.0) * 6.0;
            svg.circle(cx + dx, bottom - sr.runs[r].metrics.balanced_accuracy * plot_h, 3.5, "#4878a8");
        }
        double mean_y = bottom - sr.summary.mean.balanced_accuracy * plot_h;
        svg.line(cx - col_w * 0.3, mean_y, cx + col_w * 0.3, mean_y);
        svg.text(cx, bottom + 14 + static_cast<double>(s % 2) * 12, sr.spec.name, 10, "middle");
    }
    svg.text(left, 18, result.name + " (balanced accuracy; one point per held-out resample)", 12);
    return svg.str();
}

std::string render_grid_figure(const GridResult& grid) {
    const int W = 520, H = 460;
    const double left = 110, top = 60, cell = 110;
    Svg svg(W, H);
    double lo = 1e300, hi = -1e300;
    for (const auto& row : grid.macro_f1)
        for (double v : row) {
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
    if (hi <= lo) hi = lo + 1e-9;
    for (size_t ti = 0; ti < grid.temperatures.size(); ++ti) {
        for (size_t ai = 0; ai < grid.alphas.size(); ++ai) {
            double v = grid.macro_f1[ti][ai];
            double u = (v - lo) / (hi - lo);
            int shade = static_cast<int>(std::lround(235 - u * 150));
            std::ostringstream color;
            color << "rgb(" << shade << "," << shade << ",245)";
            double x = left + cell * static_cast<double>(ai);
            double y = top + cell * static_cast<double>(ti);
            svg.rect(x, y, cell - 4, cell - 4, color.str(), "stroke=\"#444\"");
            svg.text(x + cell / 2 - 2, y + cell / 2 + 4, fmt_fixed(v, 3), 14, "middle");
        }
        svg.text(left - 12, top + cell * (static_cast<double>(ti) + 0.5), "T=" + fmt_fixed(grid.temperatures[ti], 0),
                 12, "end");
    }
    for (size_t ai = 0; ai < grid.alphas.size(); ++ai)
        svg.text(left + cell * (static_cast<double>(ai) + 0.5) - 2, top - 12,
                 "α=" + fmt_fixed(grid.alphas[ai], 1), 12, "middle");
    svg.text(left, 24, "macro-F1 over temperature × distillation weight", 13);
    return svg.str();
}

std::string render_figure(const MatrixResult& result, FigureKind kind) {
    switch (kind) {
        case FigureKind::bars_with_points: return render_bars(result);
        case FigureKind::resample_strip:
            if (result.regime != Regime::resampled)
                fail("render_figure: resample_strip needs a resampled matrix");
            return render_strip(result);
        case FigureKind::grid_heatmap:
            fail("render_figure: use render_grid_figure for heatmaps");
    }
    fail("render_figure: bad kind");
}

void export_figure(const MatrixResult& result, FigureKind kind, const std::string& path) {
    std::ofstream out(path);
    if (!out) fail("cannot write figure: " + path);
    out << render_figure(result, kind);
}

void export_grid_figure(const GridResult& grid, const std::string& path) {
    std::ofstream out(path);
    if (!out) fail("cannot write figure: " + path);
    out << render_grid_figure(grid);
}

// ---------------------------------------------------------------------------
// Run manifest + audit
// ---------------------------------------------------------------------------

static const std::vector<std::string> kRunFiles = {"config.json", "predictions.csv", "losses.csv",
                                                   "weights.bin", "meta.json"};

void write_run_manifest(const std::string& out_root) {
    json manifest;
    manifest["digest_algorithm"] = "sha256";
    {
        char stamp[32];
        std::time_t now = std::time(nullptr);
        std::strftime(stamp, sizeof(stamp), "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&now));
        manifest["generated_at"] = stamp;  // informational only; never audited
    }
    manifest["runs"] = json::array();
    const fs::path runs_dir = fs::path(out_root) / "runs";
    std::vector<std::string> run_ids;
    if (fs::exists(runs_dir))
        for (const auto& e : fs::directory_iterator(runs_dir))
            if (e.is_directory()) run_ids.push_back(e.path().filename().string());
    std::sort(run_ids.begin(), run_ids.end());
    for (const auto& rid : run_ids) {
        const fs::path dir = runs_dir / rid;
        json entry{{"run_id", rid}};
        std::ifstream meta_in(dir / "meta.json");
        if (meta_in) {
            json meta = json::parse(meta_in);
            entry["seed"] = meta.value("seed", uint64_t{0});
            entry["config_hash"] = meta.value("config_hash", "");
            entry["timestamp"] = meta.value("timestamp", "");
        }
        std::ifstream cfg_in(dir / "config.json");
        if (cfg_in) {
            json cfg = json::parse(cfg_in);
            if (cfg.contains("split")) entry["split_digest"] = cfg["split"].value("digest", "");
            if (cfg.contains("data")) entry["data_digest"] = cfg["data"].value("digest", "");
            entry["config_hash"] = cfg.value("config_hash", entry.value("config_hash", ""));
        }
        json files;
        for (const auto& f : kRunFiles) {
            const fs::path p = dir / f;
            if (fs::exists(p)) files[f] = sha256_file(p.string());
        }
        entry["files"] = files;
        manifest["runs"].push_back(std::move(entry));
    }

    manifest["summaries"] = json::array();
    const fs::path sum_dir = fs::path(out_root) / "summaries";
    std::vector<std::string> sums;
    if (fs::exists(sum_dir))
        for (const auto& e : fs::directory_iterator(sum_dir))
            if (e.is_regular_file()) sums.push_back(e.path().filename().string());
    std::sort(sums.begin(), sums.end());
    for (const auto& f : sums)
        manifest["summaries"].push_back(json{{"file", f}, {"digest", sha256_file((sum_dir / f).string())}});

    std::ofstream out(fs::path(out_root) / "manifest.json");
    if (!out) fail("cannot write run manifest under " + out_root);
    out << manifest.dump(2) << "\n";
}

AuditReport audit_check(const std::string& out_root) {
    AuditReport report;
    const fs::path root(out_root);
    std::ifstream in(root / "manifest.json");
    if (!in) {
        report.failures.push_back("missing manifest.json under " + out_root);
        return report;
    }
    json manifest = json::parse(in);

    // 1. byte-level digests of every recorded artifact
    for (const auto& entry : manifest.value("runs", json::array())) {
        const std::string rid = entry.value("run_id", "?");
        const fs::path dir = root / "runs" / rid;
        for (const auto& [fname, digest] : entry.value("files", json::object()).items()) {
            const fs::path p = dir / fname;
            if (!fs::exists(p)) {
                report.failures.push_back(rid + ": missing " + fname);
                continue;
            }
            if (sha256_file(p.string()) != digest.get<std::string>())
                report.failures.push_back(rid + ": digest mismatch for " + fname);
        }
        // weights digest recorded at training time must match file bytes
        const fs::path wp = dir / "weights.bin";
        const fs::path mp = dir / "meta.json";
        if (fs::exists(wp) && fs::exists(mp)) {
            std::ifstream meta_in(mp);
            json meta = json::parse(meta_in);
            const std::string wd = meta.value("weights_digest", "");
            if (!wd.empty() && sha256_file(wp.string()) != wd)
                report.failures.push_back(rid + ": weights digest differs from training-time record");
        }
    }
    for (const auto& entry : manifest.value("summaries", json::array())) {
        const std::string fname = entry.value("file", "?");
        const fs::path p = root / "summaries" / fname;
        if (!fs::exists(p)) {
            report.failures.push_back("missing summary file " + fname);
            continue;
        }
        if (sha256_file(p.string()) != entry.value("digest", ""))
            report.failures.push_back("digest mismatch for summary " + fname);
    }

    // 2. value-level recomputation: rebuild each matrix from its run dirs
    //    and re-render any exported tables/figures byte-for-byte.
    const fs::path sum_dir = root / "summaries";
    if (fs::exists(sum_dir)) {
        std::vector<fs::path> indexes;
        for (const auto& e : fs::directory_iterator(sum_dir)) {
            const std::string name = e.path().filename().string();
            if (name.size() > 11 && name.substr(name.size() - 11) == ".index.json" &&
                name != "grid_ablation.index.json")
                indexes.push_back(e.path());
        }
        std::sort(indexes.begin(), indexes.end());
        for (const auto& idx : indexes) {
            const std::string base = idx.filename().string().substr(
                0, idx.filename().string().size() - std::string(".index.json").size());
            MatrixResult m;
            try {
                m = read_matrix_from_index(idx.string(), out_root);
            } catch (const std::exception& e) {
                report.failures.push_back(base + ": cannot recompute summary (" + e.what() + ")");
                continue;
            }
            struct Check {
                std::string ext;
                std::function<std::string()> regen;
            };
            const std::vector<Check> checks = {
                {".csv", [&] { return render_table(m, TableFormat::delimited); }},
                {".md", [&] { return render_table(m, TableFormat::markdown); }},
                {".svg", [&] {
                     return render_figure(m, m.regime == Regime::resampled
                                                 ? FigureKind::resample_strip
                                                 : FigureKind::bars_with_points);
                 }}};
            for (const auto& c : checks) {
                const fs::path p = sum_dir / (base + c.ext);
                if (!fs::exists(p)) continue;
                std::ifstream fin(p, std::ios::binary);
                std::string existing(std::istreambuf_iterator<char>(fin), {});
                if (existing != c.regen())
                    report.failures.push_back(base + c.ext + ": regenerated content differs");
            }
        }
    }

    report.pass = report.failures.empty();
    return report;
}

void export_all_summaries(const std::string& out_root, TableFormat format) {
    const fs::path sum_dir = fs::path(out_root) / "summaries";
    if (!fs::exists(sum_dir)) fail("no summaries directory under " + out_root);
    std::vector<fs::path> indexes;
    for (const auto& e : fs::directory_iterator(sum_dir)) {
        const std::string name = e.path().filename().string();
        if (name.size() > 11 && name.substr(name.size() - 11) == ".index.json") indexes.push_back(e.path());
    }
    std::sort(indexes.begin(), indexes.end());
    for (const auto& idx : indexes) {
        const std::string name = idx.filename().string();
        const std::string base = name.substr(0, name.size() - std::string(".index.json").size());
        if (base == "grid_ablation") {
            std::ifstream in(idx);
            json j = json::parse(in);
            GridResult g;
            g.temperatures = j.at("temperatures").get<std::vector<double>>();
            g.alphas = j.at("alphas").get<std::vector<double>>();
            g.macro_f1 = j.at("macro_f1").get<std::vector<std::vector<double>>>();
            export_grid_figure(g, (sum_dir / (base + ".svg")).string());
            continue;
        }
        MatrixResult m = read_matrix_from_index(idx.string(), out_root);
        export_table(m, format, (sum_dir / (base + (format == TableFormat::delimited ? ".csv" : ".md"))).string());
        export_figure(m,
                      m.regime == Regime::resampled ? FigureKind::resample_strip
                                                    : FigureKind::bars_with_points,
                      (sum_dir / (base + ".svg")).string());
    }
}

void write_hypothesis_report(const std::string& out_root) {
    const fs::path sum_dir = fs::path(out_root) / "summaries";
    const fs::path fixed_idx = sum_dir / "fixed_matrix.index.json";
    const fs::path res_idx = sum_dir / "resampled_matrix.index.json";
    if (!fs::exists(fixed_idx) || !fs::exists(res_idx)) return;  // both regimes required
    MatrixResult fixed = read_matrix_from_index(fixed_idx.string(), out_root);
    MatrixResult resampled = read_matrix_from_index(res_idx.string(), out_root);

    SamplerControlResult sampler;
    const SamplerControlResult* sampler_ptr = nullptr;
    const fs::path sampler_idx = sum_dir / "sampler_control.index.json";
    if (fs::exists(sampler_idx)) {
        sampler.matrix = read_matrix_from_index(sampler_idx.string(), out_root);
        for (const auto& sr : sampler.matrix.specs) {
            SamplerControlCell cell;
            cell.model = sr.spec.name.substr(0, sr.spec.name.find("__"));
            cell.sampler = sr.spec.sampler;
            cell.balanced_accuracy = sr.summary.mean.balanced_accuracy;
            cell.specificity = sr.summary.mean.specificity;
            cell.positive_rate = sr.summary.mean.positive_rate;
            sampler.cells.push_back(cell);
        }
        sampler_ptr = &sampler;
    }

    auto statuses = hypothesis_status(fixed, resampled, sampler_ptr);
    json j = json::array();
    for (const auto& h : statuses)
        j.push_back(json{{"id", h.id},
                         {"status", hypothesis_state_name(h.state)},
                         {"evidence", h.evidence}});
    std::ofstream out(sum_dir / "hypothesis_status.json");
    out << j.dump(2) << "\n";
}

}  // namespace xkd
