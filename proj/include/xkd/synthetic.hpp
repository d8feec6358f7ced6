#pragma once

// Desk-scale synthetic paired cohorts with controllable per-modality class
// signal. Positive X-rays carry a disk blob, positive CTs a ring, at
// patient-seeded positions, so class information can be placed in either
// modality (or neither) to probe what the pipeline can detect.

#include <cstdint>
#include <string>

#include "xkd/common.hpp"

namespace xkd {

struct SynthConfig {
    int n_patients = 40;
    double prevalence = 0.5;   // fraction of positive patients (exact quota)
    double xray_signal = 0.8;  // blob amplitude on the [0,1] intensity scale
    double ct_signal = 0.8;    // ring amplitude
    int min_xray_per_patient = 1;
    int max_xray_per_patient = 2;
    int min_ct_per_patient = 1;
    int max_ct_per_patient = 2;
    double noise_std = 0.08;
    int image_size = 32;
    int n_todo_rows = 2;  // planted placeholder-finding rows, to exercise filtering
    uint64_t seed = 7;

    void validate() const {
        if (n_patients < 2) fail("SynthConfig: need at least 2 patients");
        if (!(prevalence > 0.0 && prevalence < 1.0)) fail("SynthConfig: prevalence must be in (0,1)");
        if (image_size < 8) fail("SynthConfig: image_size too small");
        if (min_xray_per_patient < 0 || max_xray_per_patient < min_xray_per_patient ||
            min_ct_per_patient < 0 || max_ct_per_patient < min_ct_per_patient)
            fail("SynthConfig: bad images-per-patient range");
        if (xray_signal < 0 || ct_signal < 0 || noise_std < 0) fail("SynthConfig: negative amplitude");
    }
};

struct SynthCohort {
    std::string root;      // out_root
    std::string csv_path;  // <root>/metadata.csv
    long n_positive_patients = 0;
    long n_negative_patients = 0;
    long n_images = 0;
};

// Writes <out_root>/images/*.pgm and <out_root>/metadata.csv with columns
// patientid,finding,modality,filename,offset. Byte-deterministic per config.
SynthCohort generate_cohort(const SynthConfig& config, const std::string& out_root);

}  // namespace xkd
