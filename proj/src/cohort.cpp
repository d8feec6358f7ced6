#include "xkd/cohort.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include "xkd/csv.hpp"

namespace fs = std::filesystem;

namespace xkd {

const char* manifest_kind_name(ManifestKind k) {
    switch (k) {
        case ManifestKind::all_xray: return "all_xray";
        case ManifestKind::all_ct: return "all_ct";
        case ManifestKind::paired_xray_target: return "paired_xray_target";
    }
    return "?";
}

std::vector<RawRecord> ingest_metadata(const std::string& csv_path, const ColumnMap& columns) {
    auto rows = read_csv(csv_path);
    if (rows.empty()) fail("metadata file is empty: " + csv_path);
    const CsvRow& header = rows[0];

    auto find_col = [&](const std::string& name) -> size_t {
        for (size_t i = 0; i < header.size(); ++i)
            if (trim(header[i]) == name) return i;
        fail("metadata is missing mapped column '" + name + "' in " + csv_path);
    };
    const size_t ci_patient = find_col(columns.patient);
    const size_t ci_finding = find_col(columns.finding);
    const size_t ci_modality = find_col(columns.modality);
    const size_t ci_filename = find_col(columns.filename);
    const size_t ci_offset = find_col(columns.offset);

    if (rows.size() < 2) fail("metadata has a header but no data rows: " + csv_path);

    std::vector<RawRecord> out;
    out.reserve(rows.size() - 1);
    for (size_t r = 1; r < rows.size(); ++r) {
        CsvRow row = rows[r];
        row.resize(std::max(row.size(), header.size()));
        RawRecord rec;
        rec.patient_id = trim(row[ci_patient]);
        rec.finding = trim(row[ci_finding]);
        rec.modality = trim(row[ci_modality]);
        rec.filename = trim(row[ci_filename]);
        rec.offset = parse_int(row[ci_offset]);  // unparsable -> unknown
        if (rec.patient_id.empty()) fail("metadata row " + std::to_string(r) + ": empty patient id");
        if (rec.filename.empty()) fail("metadata row " + std::to_string(r) + ": empty filename");
        for (size_t i = 0; i < header.size(); ++i) {
            if (i == ci_patient || i == ci_finding || i == ci_modality || i == ci_filename ||
                i == ci_offset)
                continue;
            rec.extra.emplace_back(trim(header[i]), i < row.size() ? row[i] : "");
        }
        out.push_back(std::move(rec));
    }
    return out;
}

bool finding_is_positive(const std::string& finding) {
    std::string f = lower(finding);
    for (auto& part : split(f, ',')) {
        for (auto& tok : split(part, '/')) {
            if (trim(tok) == "covid-19") return true;
        }
    }
    return false;
}

static std::optional<Modality> parse_modality(const std::string& raw) {
    std::string m = lower(trim(raw));
    if (m.find("ct") != std::string::npos) return Modality::ct;
    if (m == "x-ray" || m == "xray" || m == "xr") return Modality::xray;
    return std::nullopt;
}

NormalizeResult normalize_records(const std::vector<RawRecord>& raw, const std::string& image_root) {
    NormalizeResult res;
    for (const auto& r : raw) {
        if (lower(trim(r.finding)) == "todo") {
            ++res.tally.todo;
            continue;
        }
        fs::path p = fs::path(image_root) / r.filename;
        if (!fs::exists(p)) {
            ++res.tally.missing_file;
            continue;
        }
        auto modality = parse_modality(r.modality);
        if (!modality) {
            ++res.tally.bad_modality;
            continue;
        }
        ImageRecord rec;
        rec.patient_id = r.patient_id;
        rec.image_path = p.lexically_normal().string();
        rec.modality = *modality;
        rec.label = finding_is_positive(r.finding) ? Label::positive : Label::negative;
        rec.offset = r.offset;
        res.records.push_back(std::move(rec));
    }
    return res;
}

std::vector<PairedSample> pair_xray_to_ct(const std::vector<ImageRecord>& xrays,
                                          const std::vector<ImageRecord>& cts) {
    std::map<std::string, std::vector<const ImageRecord*>> cts_by_patient;
    for (const auto& ct : cts) {
        if (ct.modality != Modality::ct) fail("pair_xray_to_ct: non-CT record in CT list");
        cts_by_patient[ct.patient_id].push_back(&ct);
    }
    for (auto& [pid, list] : cts_by_patient)
        std::sort(list.begin(), list.end(),
                  [](const ImageRecord* a, const ImageRecord* b) { return a->image_path < b->image_path; });

    std::vector<PairedSample> out;
    for (const auto& xr : xrays) {
        if (xr.modality != Modality::xray) fail("pair_xray_to_ct: non-X-ray record in X-ray list");
        auto it = cts_by_patient.find(xr.patient_id);
        if (it == cts_by_patient.end()) continue;  // no same-patient CT: excluded

        const ImageRecord* best = nullptr;
        std::optional<long> best_gap;
        for (const ImageRecord* ct : it->second) {
            std::optional<long> gap;
            if (xr.offset && ct->offset) gap = std::labs(*xr.offset - *ct->offset);
            // known gaps beat unknown; smaller gaps beat larger; path breaks ties
            bool better = false;
            if (!best) {
                better = true;
            } else if (gap.has_value() != best_gap.has_value()) {
                better = gap.has_value();
            } else if (gap && best_gap && *gap != *best_gap) {
                better = *gap < *best_gap;
            }
            // equal rank -> keep earlier (lists are path-sorted)
            if (better) {
                best = ct;
                best_gap = gap;
            }
        }
        PairedSample ps;
        ps.xray = xr;
        ps.ct = *best;
        ps.offset_gap = best_gap;
        out.push_back(std::move(ps));
    }
    return out;
}

CohortStats cohort_stats(const std::vector<ImageRecord>& records) {
    if (records.empty()) fail("cohort_stats: empty manifest");
    CohortStats s;
    std::map<std::string, bool> patient_positive;  // any-positive patient label
    for (const auto& r : records) {
        ++s.n_images;
        if (r.label == Label::positive) ++s.n_positive_images;
        else ++s.n_negative_images;
        auto [it, fresh] = patient_positive.try_emplace(r.patient_id, false);
        (void)fresh;
        if (r.label == Label::positive) it->second = true;
    }
    s.n_patients = static_cast<long>(patient_positive.size());
    for (const auto& [pid, pos] : patient_positive) {
        (void)pid;
        if (pos) ++s.n_positive_patients;
        else ++s.n_negative_patients;
    }
    return s;
}

static void sort_records(std::vector<ImageRecord>& recs) {
    std::sort(recs.begin(), recs.end(), [](const ImageRecord& a, const ImageRecord& b) {
        if (a.patient_id != b.patient_id) return a.patient_id < b.patient_id;
        return a.image_path < b.image_path;
    });
}

Manifest build_manifest(const std::vector<ImageRecord>& records, ManifestKind kind) {
    if (kind == ManifestKind::paired_xray_target)
        fail("build_manifest: use build_paired_manifest for the paired kind");
    Modality want = kind == ManifestKind::all_xray ? Modality::xray : Modality::ct;
    Manifest m;
    m.kind = kind;
    for (const auto& r : records)
        if (r.modality == want) m.records.push_back(r);
    sort_records(m.records);
    m.stats = cohort_stats(m.records);
    return m;
}

Manifest build_paired_manifest(const std::vector<ImageRecord>& normalized) {
    std::vector<ImageRecord> xrays, cts;
    for (const auto& r : normalized)
        (r.modality == Modality::xray ? xrays : cts).push_back(r);
    sort_records(xrays);
    sort_records(cts);
    Manifest m;
    m.kind = ManifestKind::paired_xray_target;
    m.pairs = pair_xray_to_ct(xrays, cts);
    std::sort(m.pairs.begin(), m.pairs.end(), [](const PairedSample& a, const PairedSample& b) {
        if (a.xray.patient_id != b.xray.patient_id) return a.xray.patient_id < b.xray.patient_id;
        return a.xray.image_path < b.xray.image_path;
    });
    for (const auto& p : m.pairs) m.records.push_back(p.xray);
    m.stats = cohort_stats(m.records);
    return m;
}

// --- manifest files ----------------------------------------------------------

static std::string offset_str(const std::optional<long>& o) {
    return o ? std::to_string(*o) : "unknown";
}

static std::optional<long> parse_offset(const std::string& s) {
    if (s == "unknown") return std::nullopt;
    auto v = parse_int(s);
    if (!v) fail("manifest: bad offset field '" + s + "'");
    return v;
}

std::string manifest_to_string(const Manifest& m) {
    std::string out = "# kind=" + std::string(manifest_kind_name(m.kind)) + "\n";
    if (m.kind == ManifestKind::paired_xray_target) {
        out += "patient_id,xray_path,xray_label,xray_offset,ct_path,ct_label,ct_offset,offset_gap\n";
        for (const auto& p : m.pairs) {
            out += join_csv({p.xray.patient_id, p.xray.image_path, label_name(p.xray.label),
                             offset_str(p.xray.offset), p.ct.image_path, label_name(p.ct.label),
                             offset_str(p.ct.offset), offset_str(p.offset_gap)}) +
                   "\n";
        }
    } else {
        out += "patient_id,modality,label,offset,image_path\n";
        for (const auto& r : m.records) {
            out += join_csv({r.patient_id, modality_name(r.modality), label_name(r.label),
                             offset_str(r.offset), r.image_path}) +
                   "\n";
        }
    }
    return out;
}

void write_manifest(const Manifest& m, const std::string& path) {
    std::ofstream out(path);
    if (!out) fail("cannot write manifest: " + path);
    out << manifest_to_string(m);
}

static Label parse_label(const std::string& s) {
    if (s == "positive") return Label::positive;
    if (s == "negative") return Label::negative;
    fail("manifest: bad label '" + s + "'");
}

Manifest read_manifest(const std::string& path) {
    std::ifstream in(path);
    if (!in) fail("cannot open manifest: " + path);
    std::string line;
    if (!std::getline(in, line)) fail("manifest is empty: " + path);
    const std::string prefix = "# kind=";
    if (line.rfind(prefix, 0) != 0) fail("manifest missing kind header: " + path);
    std::string kind_name = trim(line.substr(prefix.size()));

    Manifest m;
    if (kind_name == "all_xray") m.kind = ManifestKind::all_xray;
    else if (kind_name == "all_ct") m.kind = ManifestKind::all_ct;
    else if (kind_name == "paired_xray_target") m.kind = ManifestKind::paired_xray_target;
    else fail("manifest: unknown kind '" + kind_name + "'");

    if (!std::getline(in, line)) fail("manifest missing column header: " + path);
    while (std::getline(in, line)) {
        if (trim(line).empty()) continue;
        CsvRow f = parse_csv_line(line);
        if (m.kind == ManifestKind::paired_xray_target) {
            if (f.size() != 8) fail("paired manifest: bad row in " + path);
            PairedSample p;
            p.xray = {f[0], f[1], Modality::xray, parse_label(f[2]), parse_offset(f[3])};
            p.ct = {f[0], f[4], Modality::ct, parse_label(f[5]), parse_offset(f[6])};
            p.offset_gap = parse_offset(f[7]);
            m.pairs.push_back(p);
            m.records.push_back(m.pairs.back().xray);
        } else {
            if (f.size() != 5) fail("manifest: bad row in " + path);
            ImageRecord r;
            r.patient_id = f[0];
            r.modality = f[1] == "xray" ? Modality::xray : Modality::ct;
            r.label = parse_label(f[2]);
            r.offset = parse_offset(f[3]);
            r.image_path = f[4];
            m.records.push_back(std::move(r));
        }
    }
    if (m.records.empty()) fail("manifest has no records: " + path);
    m.stats = cohort_stats(m.records);
    return m;
}

std::string stats_to_json(const CohortStats& s) {
    std::string j = "{";
    j += "\"images\":" + std::to_string(s.n_images);
    j += ",\"patients\":" + std::to_string(s.n_patients);
    j += ",\"positive_images\":" + std::to_string(s.n_positive_images);
    j += ",\"negative_images\":" + std::to_string(s.n_negative_images);
    j += ",\"positive_patients\":" + std::to_string(s.n_positive_patients);
    j += ",\"negative_patients\":" + std::to_string(s.n_negative_patients);
    j += "}";
    return j;
}

}  // namespace xkd
