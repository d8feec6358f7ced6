#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <map>

#include "test_util.hpp"
#include "xkd/cohort.hpp"
#include "xkd/image_io.hpp"

using namespace xkd;
namespace fs = std::filesystem;

namespace {

void touch_image(const std::string& root, const std::string& rel) {
    fs::create_directories(fs::path(root) / fs::path(rel).parent_path());
    std::vector<uint8_t> px(16 * 16, 100);
    write_pgm((fs::path(root) / rel).string(), px, 16, 16);
}

std::string write_csv(const std::string& dir, const std::string& body) {
    const std::string path = (fs::path(dir) / "metadata.csv").string();
    std::ofstream out(path);
    out << body;
    return path;
}

RawRecord raw(const std::string& pid, const std::string& finding, const std::string& modality,
              const std::string& filename, std::optional<long> offset = std::nullopt) {
    RawRecord r;
    r.patient_id = pid;
    r.finding = finding;
    r.modality = modality;
    r.filename = filename;
    r.offset = offset;
    return r;
}

ImageRecord rec(const std::string& pid, const std::string& path, Modality m, Label l,
                std::optional<long> offset = std::nullopt) {
    return {pid, path, m, l, offset};
}

}  // namespace

TEST_SUITE_BEGIN("cohort");

TEST_CASE("ingest keeps row order and parses offsets leniently") {
    auto dir = xkd_test::scratch_dir("cohort_ingest");
    auto csv = write_csv(dir,
                         "patientid,finding,modality,filename,offset,notes\n"
                         "p2,COVID-19,X-ray,img2.png,5,second\n"
                         "p1,No Finding,CT,img1.png,NA,first\n");
    auto rows = ingest_metadata(csv, ColumnMap{});
    REQUIRE(rows.size() == 2);
    CHECK(rows[0].patient_id == "p2");
    CHECK(rows[0].offset == 5);
    CHECK(rows[1].patient_id == "p1");
    CHECK_FALSE(rows[1].offset.has_value());
    REQUIRE(rows[0].extra.size() == 1);
    CHECK(rows[0].extra[0].first == "notes");
    CHECK(rows[0].extra[0].second == "second");
}

TEST_CASE("ingest fails fast on structural problems") {
    auto dir = xkd_test::scratch_dir("cohort_ingest_bad");
    CHECK_THROWS_WITH_AS(ingest_metadata(write_csv(dir, ""), ColumnMap{}),
                         doctest::Contains("empty"), Error);
    CHECK_THROWS_WITH_AS(ingest_metadata(write_csv(dir, "patientid,modality,filename,offset\n"),
                                         ColumnMap{}),
                         doctest::Contains("finding"), Error);
    CHECK_THROWS(ingest_metadata(write_csv(dir, "patientid,finding,modality,filename,offset\n"),
                                 ColumnMap{}));
    ColumnMap remap;
    remap.patient = "subject";
    auto csv = write_csv(dir, "subject,finding,modality,filename,offset\ns1,COVID-19,CT,a.png,1\n");
    auto rows = ingest_metadata(csv, remap);
    CHECK(rows[0].patient_id == "s1");
}

TEST_CASE("normalize filters and binarizes per the documented rules") {
    auto dir = xkd_test::scratch_dir("cohort_norm");
    touch_image(dir, "xr.pgm");
    touch_image(dir, "ct.pgm");
    std::vector<RawRecord> raws = {
        raw("p1", "todo", "X-ray", "xr.pgm"),
        raw("p1", "COVID-19", "CT", "ct.pgm", 3),
        raw("p2", "Pneumonia", "X-ray", "xr.pgm"),
        raw("p3", "COVID-19", "X-ray", "absent.pgm"),
        raw("p4", "No Finding", "MRI", "xr.pgm"),
        raw("p5", "Pneumonia/Viral/COVID-19", "xray", "xr.pgm"),
        raw("p6", "TODO", "X-ray", "xr.pgm"),
    };
    auto res = normalize_records(raws, dir);
    CHECK(res.tally.todo == 2);
    CHECK(res.tally.missing_file == 1);
    CHECK(res.tally.bad_modality == 1);
    REQUIRE(res.records.size() == 3);
    CHECK(res.records[0].modality == Modality::ct);
    CHECK(res.records[0].label == Label::positive);
    CHECK(res.records[0].offset == 3);
    CHECK(res.records[1].modality == Modality::xray);
    CHECK(res.records[1].label == Label::negative);
    CHECK(res.records[2].label == Label::positive);  // token inside compound finding
}

TEST_CASE("normalize is idempotent over its surviving rows") {
    auto dir = xkd_test::scratch_dir("cohort_idem");
    touch_image(dir, "a.pgm");
    touch_image(dir, "b.pgm");
    std::vector<RawRecord> raws = {raw("p1", "COVID-19", "X-ray", "a.pgm", 1),
                                   raw("p1", "todo", "X-ray", "a.pgm"),
                                   raw("p2", "No Finding", "ct scan", "b.pgm")};
    auto once = normalize_records(raws, dir);
    // keep only the raws that survived, re-run, expect identical output
    std::vector<RawRecord> survivors = {raws[0], raws[2]};
    auto twice = normalize_records(survivors, dir);
    REQUIRE(once.records.size() == twice.records.size());
    for (size_t i = 0; i < once.records.size(); ++i) {
        CHECK(once.records[i].image_path == twice.records[i].image_path);
        CHECK(once.records[i].label == twice.records[i].label);
        CHECK(once.records[i].modality == twice.records[i].modality);
    }
    CHECK(twice.tally.total() == 0);
}

TEST_CASE("pairing picks the nearest known offset") {
    auto xr = rec("p1", "x1", Modality::xray, Label::positive, 3);
    auto ct_near = rec("p1", "c_near", Modality::ct, Label::positive, 1);
    auto ct_far = rec("p1", "c_far", Modality::ct, Label::positive, 10);
    auto pairs = pair_xray_to_ct({xr}, {ct_far, ct_near});
    REQUIRE(pairs.size() == 1);
    CHECK(pairs[0].ct.image_path == "c_near");
    CHECK(pairs[0].offset_gap == 2);
}

TEST_CASE("pairing tie-breaks and unknown-offset ranking") {
    // unknown X-ray offset: every candidate gap is unknown -> smallest path
    auto xr = rec("p1", "x1", Modality::xray, Label::positive);
    auto ct_a = rec("p1", "ct_a", Modality::ct, Label::positive, 1);
    auto ct_b = rec("p1", "ct_b", Modality::ct, Label::positive, 10);
    auto pairs = pair_xray_to_ct({xr}, {ct_b, ct_a});
    REQUIRE(pairs.size() == 1);
    CHECK(pairs[0].ct.image_path == "ct_a");
    CHECK_FALSE(pairs[0].offset_gap.has_value());

    // known gap beats unknown even when the unknown sorts first by path
    auto xr2 = rec("p2", "x2", Modality::xray, Label::positive, 4);
    auto ct_unknown = rec("p2", "aa_unknown", Modality::ct, Label::positive);
    auto ct_known = rec("p2", "zz_known", Modality::ct, Label::positive, 9);
    auto pairs2 = pair_xray_to_ct({xr2}, {ct_unknown, ct_known});
    CHECK(pairs2[0].ct.image_path == "zz_known");
    CHECK(pairs2[0].offset_gap == 5);

    // equal gaps -> lexicographically smallest path
    auto ct_e1 = rec("p2", "m_ct", Modality::ct, Label::positive, 2);
    auto ct_e2 = rec("p2", "a_ct", Modality::ct, Label::positive, 6);
    auto pairs3 = pair_xray_to_ct({xr2}, {ct_e1, ct_e2});
    CHECK(pairs3[0].ct.image_path == "a_ct");
}

TEST_CASE("x-rays without a same-patient CT are excluded; one CT may serve many") {
    auto xr1 = rec("p1", "x1", Modality::xray, Label::positive, 0);
    auto xr2 = rec("p1", "x2", Modality::xray, Label::positive, 9);
    auto lonely = rec("p9", "x9", Modality::xray, Label::negative, 0);
    auto ct = rec("p1", "c1", Modality::ct, Label::positive, 4);
    auto pairs = pair_xray_to_ct({xr1, xr2, lonely}, {ct});
    REQUIRE(pairs.size() == 2);
    CHECK(pairs[0].ct.image_path == "c1");
    CHECK(pairs[1].ct.image_path == "c1");
}

TEST_CASE("pairing property: minimal gap over an exhaustive per-patient scan") {
    Rng rng(5);
    std::vector<ImageRecord> xrays, cts;
    for (int p = 0; p < 12; ++p) {
        std::string pid = "p" + std::to_string(p);
        int nx = 1 + static_cast<int>(rng.index(3));
        int nc = static_cast<int>(rng.index(4));
        for (int i = 0; i < nx; ++i)
            xrays.push_back(rec(pid, pid + "_x" + std::to_string(i), Modality::xray, Label::positive,
                                static_cast<long>(rng.index(20))));
        for (int i = 0; i < nc; ++i)
            cts.push_back(rec(pid, pid + "_c" + std::to_string(i), Modality::ct, Label::positive,
                              static_cast<long>(rng.index(20))));
    }
    auto pairs = pair_xray_to_ct(xrays, cts);
    std::map<std::string, std::vector<const ImageRecord*>> by_patient;
    for (const auto& c : cts) by_patient[c.patient_id].push_back(&c);
    size_t expected = 0;
    for (const auto& x : xrays)
        if (by_patient.count(x.patient_id)) ++expected;
    CHECK(pairs.size() == expected);
    for (const auto& p : pairs) {
        CHECK(p.xray.patient_id == p.ct.patient_id);
        long best = 1 << 30;
        for (const auto* c : by_patient[p.xray.patient_id])
            best = std::min(best, std::labs(*p.xray.offset - *c->offset));
        REQUIRE(p.offset_gap.has_value());
        CHECK(*p.offset_gap == best);
    }
}

TEST_CASE("cohort stats: counts and permutation invariance") {
    auto one = cohort_stats({rec("p1", "x", Modality::xray, Label::positive)});
    CHECK(one.n_images == 1);
    CHECK(one.n_patients == 1);
    CHECK(one.n_positive_images == 1);
    CHECK(one.n_negative_images == 0);
    CHECK(one.n_positive_patients == 1);

    std::vector<ImageRecord> recs = {rec("a", "1", Modality::xray, Label::positive),
                                     rec("a", "2", Modality::xray, Label::negative),
                                     rec("b", "3", Modality::xray, Label::negative),
                                     rec("c", "4", Modality::xray, Label::positive)};
    auto s1 = cohort_stats(recs);
    std::reverse(recs.begin(), recs.end());
    auto s2 = cohort_stats(recs);
    CHECK(s1.n_images == s2.n_images);
    CHECK(s1.n_positive_patients == s2.n_positive_patients);
    CHECK(s1.n_negative_patients == s2.n_negative_patients);
    CHECK(s1.n_positive_patients == 2);  // any-positive patient labels
    CHECK(s1.n_negative_patients == 1);
    CHECK_THROWS(cohort_stats({}));
}

TEST_CASE("manifest files round-trip") {
    auto dir = xkd_test::scratch_dir("cohort_manifest");
    std::vector<ImageRecord> recs = {rec("p2", "b.pgm", Modality::xray, Label::negative, 7),
                                     rec("p1", "a.pgm", Modality::xray, Label::positive)};
    Manifest m = build_manifest(recs, ManifestKind::all_xray);
    CHECK(m.records[0].patient_id == "p1");  // sorted
    const std::string path = dir + "/all_xray.csv";
    write_manifest(m, path);
    Manifest back = read_manifest(path);
    REQUIRE(back.records.size() == 2);
    CHECK(back.records[0].image_path == "a.pgm");
    CHECK_FALSE(back.records[0].offset.has_value());
    CHECK(back.records[1].offset == 7);
    CHECK(back.stats.n_positive_images == 1);

    std::vector<ImageRecord> all = recs;
    all.push_back(rec("p1", "c1.pgm", Modality::ct, Label::positive, 2));
    Manifest paired = build_paired_manifest(all);
    REQUIRE(paired.pairs.size() == 1);
    CHECK(paired.records.size() == 1);
    const std::string ppath = dir + "/paired.csv";
    write_manifest(paired, ppath);
    Manifest pback = read_manifest(ppath);
    REQUIRE(pback.pairs.size() == 1);
    CHECK(pback.pairs[0].ct.image_path == "c1.pgm");
    CHECK(pback.pairs[0].xray.image_path == "a.pgm");
}

TEST_SUITE_END();
