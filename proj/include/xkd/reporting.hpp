#pragma once

// Audit-traceable export: delimited/markdown summary tables, deterministic
// SVG figures, the run manifest (SHA-256 digests over every run artifact),
// and the audit pass that recomputes digests and summary statistics from
// the raw per-run prediction files.

#include <string>
#include <vector>

#include "xkd/experiments.hpp"

namespace xkd {

enum class TableFormat { delimited, markdown };

std::string render_table(const MatrixResult& result, TableFormat format);
void export_table(const MatrixResult& result, TableFormat format, const std::string& path);

struct ParsedTable {
    std::string support;
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;
};
ParsedTable parse_table(const std::string& path);
// "0.875 ± 0.144" -> {0.875, 0.144}
std::pair<double, double> parse_mean_std(const std::string& cell);

enum class FigureKind { bars_with_points, resample_strip, grid_heatmap };

std::string render_figure(const MatrixResult& result, FigureKind kind);
std::string render_grid_figure(const GridResult& grid);
void export_figure(const MatrixResult& result, FigureKind kind, const std::string& path);
void export_grid_figure(const GridResult& grid, const std::string& path);

// manifest.json at the output root: digest algorithm header plus per-run
// entries (config hash, seed, split/data digests, per-file digests) and
// digests of every summary file. The timestamp is informational and never
// audited.
void write_run_manifest(const std::string& out_root);

struct AuditReport {
    bool pass = false;
    std::vector<std::string> failures;
};

// Recomputes every digest and re-renders every summary from the persisted
// per-run prediction files; pass iff everything matches exactly.
AuditReport audit_check(const std::string& out_root);

// Re-export tables and figures for every matrix index under out_root.
void export_all_summaries(const std::string& out_root, TableFormat format);

// H1-H5 statuses from the persisted fixed/resampled (and, when present,
// sampler-control) matrices; no-op unless both regimes exist.
void write_hypothesis_report(const std::string& out_root);

}  // namespace xkd
