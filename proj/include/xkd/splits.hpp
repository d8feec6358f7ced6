#pragma once

// Patient-level partitioning: fixed fraction splits and Monte Carlo
// resampling with an exact validation composition. No patient may ever
// contribute images to both sides of a split.

#include <cstdint>
#include <string>
#include <vector>

#include "xkd/cohort.hpp"

namespace xkd {

struct PatientLabel {
    std::string patient_id;
    Label label = Label::negative;  // any-positive over the patient's images
};

struct SplitSpec {
    std::vector<std::string> train_patients;  // sorted
    std::vector<std::string> val_patients;    // sorted
    uint64_t seed = 0;
    std::vector<int> train_images;  // indices into manifest.records
    std::vector<int> val_images;
};

struct ResamplePlan {
    std::vector<SplitSpec> splits;
    int n_val_patients = 0;
    int n_val_negative = 0;
    uint64_t base_seed = 0;
};

PatientLabel patient_label(const Manifest& manifest, const std::string& patient_id);
std::vector<PatientLabel> all_patient_labels(const Manifest& manifest);

SplitSpec fixed_split(const Manifest& manifest, double val_fraction, uint64_t seed);

// Each resample draws n_val_negative negative and (n_val_patients -
// n_val_negative) positive patients without replacement, seed base_seed + i.
// Draws are independent across resamples (a patient may be held out twice).
ResamplePlan resample_plan(const Manifest& manifest, int n_resamples, int n_val_patients,
                           int n_val_negative, uint64_t base_seed);

void write_split(const SplitSpec& s, const std::string& path);
SplitSpec read_split(const std::string& path, const Manifest& manifest);
void write_plan(const ResamplePlan& p, const std::string& path);
ResamplePlan read_plan(const std::string& path, const Manifest& manifest);

}  // namespace xkd
