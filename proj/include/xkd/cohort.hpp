#pragma once

// Cohort construction: metadata CSV ingest, record normalization and
// filtering, label binarization, the three manifests (all X-ray, all CT,
// paired X-ray target), and nearest-offset X-ray/CT pairing.

#include <optional>
#include <string>
#include <vector>

#include "xkd/common.hpp"

namespace xkd {

enum class Modality { xray, ct };
enum class Label { negative = 0, positive = 1 };

inline const char* modality_name(Modality m) { return m == Modality::xray ? "xray" : "ct"; }
inline const char* label_name(Label l) { return l == Label::positive ? "positive" : "negative"; }

struct ColumnMap {
    std::string patient = "patientid";
    std::string finding = "finding";
    std::string modality = "modality";
    std::string filename = "filename";
    std::string offset = "offset";
};

struct RawRecord {
    std::string patient_id;
    std::string finding;
    std::string modality;
    std::string filename;
    std::optional<long> offset;  // days since symptom onset; nullopt = unknown
    std::vector<std::pair<std::string, std::string>> extra;
};

struct ImageRecord {
    std::string patient_id;
    std::string image_path;
    Modality modality = Modality::xray;
    Label label = Label::negative;
    std::optional<long> offset;
};

struct DropTally {
    long todo = 0;
    long missing_file = 0;
    long bad_modality = 0;
    long total() const { return todo + missing_file + bad_modality; }
};

struct PairedSample {
    ImageRecord xray;
    ImageRecord ct;
    std::optional<long> offset_gap;  // nullopt = unknown
};

struct CohortStats {
    long n_images = 0;
    long n_patients = 0;
    long n_positive_images = 0;
    long n_negative_images = 0;
    long n_positive_patients = 0;
    long n_negative_patients = 0;
};

enum class ManifestKind { all_xray, all_ct, paired_xray_target };
const char* manifest_kind_name(ManifestKind k);

struct Manifest {
    ManifestKind kind = ManifestKind::all_xray;
    // Sorted by (patient_id, image_path). For the paired manifest, records
    // holds the X-ray targets (records[i] == pairs[i].xray).
    std::vector<ImageRecord> records;
    std::vector<PairedSample> pairs;  // only for paired_xray_target
    CohortStats stats;
};

// --- operations -------------------------------------------------------------

std::vector<RawRecord> ingest_metadata(const std::string& csv_path, const ColumnMap& columns);

struct NormalizeResult {
    std::vector<ImageRecord> records;
    DropTally tally;
};
NormalizeResult normalize_records(const std::vector<RawRecord>& raw, const std::string& image_root);

// True iff the finding contains the exact token "COVID-19" (case-insensitive;
// tokens split on ',' and '/').
bool finding_is_positive(const std::string& finding);

std::vector<PairedSample> pair_xray_to_ct(const std::vector<ImageRecord>& xrays,
                                          const std::vector<ImageRecord>& cts);

CohortStats cohort_stats(const std::vector<ImageRecord>& records);

Manifest build_manifest(const std::vector<ImageRecord>& records, ManifestKind kind);
Manifest build_paired_manifest(const std::vector<ImageRecord>& normalized);

// One record per line, fixed field order; see read_manifest for the inverse.
void write_manifest(const Manifest& m, const std::string& path);
Manifest read_manifest(const std::string& path);
std::string manifest_to_string(const Manifest& m);

std::string stats_to_json(const CohortStats& s);

}  // namespace xkd
