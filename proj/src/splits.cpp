#include "xkd/splits.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <set>

#include <json.hpp>

namespace xkd {

using nlohmann::json;

std::vector<PatientLabel> all_patient_labels(const Manifest& manifest) {
    std::map<std::string, bool> pos;
    for (const auto& r : manifest.records) {
        auto [it, fresh] = pos.try_emplace(r.patient_id, false);
        (void)fresh;
        if (r.label == Label::positive) it->second = true;
    }
    std::vector<PatientLabel> out;
    out.reserve(pos.size());
    for (const auto& [pid, p] : pos) out.push_back({pid, p ? Label::positive : Label::negative});
    return out;  // sorted by patient_id via map order
}

PatientLabel patient_label(const Manifest& manifest, const std::string& patient_id) {
    bool found = false, positive = false;
    for (const auto& r : manifest.records) {
        if (r.patient_id != patient_id) continue;
        found = true;
        if (r.label == Label::positive) positive = true;
    }
    if (!found) fail("patient_label: unknown patient '" + patient_id + "'");
    return {patient_id, positive ? Label::positive : Label::negative};
}

static void derive_images(SplitSpec& s, const Manifest& manifest) {
    std::set<std::string> val(s.val_patients.begin(), s.val_patients.end());
    std::set<std::string> train(s.train_patients.begin(), s.train_patients.end());
    s.train_images.clear();
    s.val_images.clear();
    for (size_t i = 0; i < manifest.records.size(); ++i) {
        const auto& pid = manifest.records[i].patient_id;
        if (val.count(pid)) s.val_images.push_back(static_cast<int>(i));
        else if (train.count(pid)) s.train_images.push_back(static_cast<int>(i));
        else fail("split does not cover patient '" + pid + "'");
    }
}

SplitSpec fixed_split(const Manifest& manifest, double val_fraction, uint64_t seed) {
    if (!(val_fraction > 0.0 && val_fraction < 1.0)) fail("fixed_split: val_fraction must be in (0,1)");
    auto labels = all_patient_labels(manifest);
    const size_t n = labels.size();
    if (n < 2) fail("fixed_split: need at least 2 patients");

    std::vector<std::string> ids;
    ids.reserve(n);
    for (const auto& pl : labels) ids.push_back(pl.patient_id);
    Rng rng(seed);
    rng.shuffle(ids);

    const size_t n_val = static_cast<size_t>(std::ceil(val_fraction * static_cast<double>(n)));
    if (n_val == 0 || n_val >= n) fail("fixed_split: degenerate partition");

    SplitSpec s;
    s.seed = seed;
    s.train_patients.assign(ids.begin(), ids.end() - static_cast<long>(n_val));
    s.val_patients.assign(ids.end() - static_cast<long>(n_val), ids.end());
    std::sort(s.train_patients.begin(), s.train_patients.end());
    std::sort(s.val_patients.begin(), s.val_patients.end());
    derive_images(s, manifest);
    if (s.train_images.empty() || s.val_images.empty()) fail("fixed_split: a side has zero images");
    return s;
}

ResamplePlan resample_plan(const Manifest& manifest, int n_resamples, int n_val_patients,
                           int n_val_negative, uint64_t base_seed) {
    if (n_resamples <= 0 || n_val_patients <= 0 || n_val_negative < 0 ||
        n_val_negative > n_val_patients)
        fail("resample_plan: bad composition parameters");

    auto labels = all_patient_labels(manifest);
    std::vector<std::string> positives, negatives;
    for (const auto& pl : labels)
        (pl.label == Label::positive ? positives : negatives).push_back(pl.patient_id);

    const int need_pos = n_val_patients - n_val_negative;
    if (static_cast<int>(negatives.size()) < n_val_negative)
        fail("resample_plan: needs " + std::to_string(n_val_negative) + " negative patients, manifest has " +
             std::to_string(negatives.size()));
    if (static_cast<int>(positives.size()) < need_pos)
        fail("resample_plan: needs " + std::to_string(need_pos) + " positive patients, manifest has " +
             std::to_string(positives.size()));

    ResamplePlan plan;
    plan.n_val_patients = n_val_patients;
    plan.n_val_negative = n_val_negative;
    plan.base_seed = base_seed;
    for (int i = 0; i < n_resamples; ++i) {
        const uint64_t seed = base_seed + static_cast<uint64_t>(i);
        Rng rng(seed);
        auto pos = positives;
        auto neg = negatives;
        rng.shuffle(pos);
        rng.shuffle(neg);

        SplitSpec s;
        s.seed = seed;
        s.val_patients.assign(neg.begin(), neg.begin() + n_val_negative);
        s.val_patients.insert(s.val_patients.end(), pos.begin(), pos.begin() + need_pos);
        std::sort(s.val_patients.begin(), s.val_patients.end());
        std::set<std::string> val(s.val_patients.begin(), s.val_patients.end());
        for (const auto& pl : labels)
            if (!val.count(pl.patient_id)) s.train_patients.push_back(pl.patient_id);
        if (s.train_patients.empty())
            fail("resample_plan: validation composition consumes every patient (empty train side)");
        derive_images(s, manifest);
        if (s.train_images.empty() || s.val_images.empty())
            fail("resample_plan: a side has zero images");
        plan.splits.push_back(std::move(s));
    }
    return plan;
}

// --- serialization -----------------------------------------------------------

static json split_json(const SplitSpec& s) {
    return json{{"seed", s.seed}, {"train_patients", s.train_patients}, {"val_patients", s.val_patients}};
}

static SplitSpec split_from_json(const json& j, const Manifest& manifest) {
    SplitSpec s;
    s.seed = j.at("seed").get<uint64_t>();
    s.train_patients = j.at("train_patients").get<std::vector<std::string>>();
    s.val_patients = j.at("val_patients").get<std::vector<std::string>>();
    derive_images(s, manifest);
    return s;
}

void write_split(const SplitSpec& s, const std::string& path) {
    std::ofstream out(path);
    if (!out) fail("cannot write split file: " + path);
    out << split_json(s).dump(2) << "\n";
}

SplitSpec read_split(const std::string& path, const Manifest& manifest) {
    std::ifstream in(path);
    if (!in) fail("cannot open split file: " + path);
    json j = json::parse(in);
    return split_from_json(j, manifest);
}

void write_plan(const ResamplePlan& p, const std::string& path) {
    json j{{"base_seed", p.base_seed},
           {"n_val_patients", p.n_val_patients},
           {"n_val_negative", p.n_val_negative}};
    j["splits"] = json::array();
    for (const auto& s : p.splits) j["splits"].push_back(split_json(s));
    std::ofstream out(path);
    if (!out) fail("cannot write resample plan: " + path);
    out << j.dump(2) << "\n";
}

ResamplePlan read_plan(const std::string& path, const Manifest& manifest) {
    std::ifstream in(path);
    if (!in) fail("cannot open resample plan: " + path);
    json j = json::parse(in);
    ResamplePlan p;
    p.base_seed = j.at("base_seed").get<uint64_t>();
    p.n_val_patients = j.at("n_val_patients").get<int>();
    p.n_val_negative = j.at("n_val_negative").get<int>();
    for (const auto& js : j.at("splits")) p.splits.push_back(split_from_json(js, manifest));
    return p;
}

}  // namespace xkd
