#include "xkd/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <vector>

#include "xkd/image_io.hpp"

namespace fs = std::filesystem;

namespace xkd {

static uint64_t derive(uint64_t seed, uint64_t stream) {
    uint64_t z = seed + 0x9e3779b97f4a7c15ull * (stream + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

static std::vector<uint8_t> render_image(const SynthConfig& cfg, Rng& rng, bool positive,
                                         bool is_ct, double cy, double cx) {
    const int S = cfg.image_size;
    std::vector<double> px(static_cast<size_t>(S) * S);
    for (auto& p : px) p = 0.35 + cfg.noise_std * rng.normal();

    if (positive) {
        const double amp = is_ct ? cfg.ct_signal : cfg.xray_signal;
        if (amp > 0.0) {
            if (is_ct) {
                // ring: annulus of radius ~S/3, half-width ~S/16
                const double r0 = 0.30 * S, hw = 0.06 * S;
                for (int y = 0; y < S; ++y)
                    for (int x = 0; x < S; ++x) {
                        double r = std::hypot(y - cy, x - cx);
                        if (std::fabs(r - r0) <= hw) px[static_cast<size_t>(y) * S + x] += amp;
                    }
            } else {
                // blob: filled disk of radius ~S/5.5
                const double r0 = 0.18 * S;
                for (int y = 0; y < S; ++y)
                    for (int x = 0; x < S; ++x)
                        if (std::hypot(y - cy, x - cx) <= r0) px[static_cast<size_t>(y) * S + x] += amp;
            }
        }
    }

    std::vector<uint8_t> out(px.size());
    for (size_t i = 0; i < px.size(); ++i) {
        double v = std::clamp(px[i], 0.0, 1.0);
        out[i] = static_cast<uint8_t>(std::lround(v * 255.0));
    }
    return out;
}

SynthCohort generate_cohort(const SynthConfig& config, const std::string& out_root) {
    config.validate();
    fs::create_directories(fs::path(out_root) / "images");

    // Exact positive quota, seeded assignment.
    const int n = config.n_patients;
    const int n_pos = std::clamp(static_cast<int>(std::lround(config.prevalence * n)), 1, n - 1);
    std::vector<int> patient_idx(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) patient_idx[static_cast<size_t>(i)] = i;
    Rng label_rng(derive(config.seed, 0));
    label_rng.shuffle(patient_idx);
    std::vector<bool> positive(static_cast<size_t>(n), false);
    for (int i = 0; i < n_pos; ++i) positive[static_cast<size_t>(patient_idx[static_cast<size_t>(i)])] = true;

    std::vector<std::string> csv_lines;
    csv_lines.push_back("patientid,finding,modality,filename,offset");

    SynthCohort out;
    out.root = out_root;
    std::string first_file;
    for (int p = 0; p < n; ++p) {
        char pid[16];
        std::snprintf(pid, sizeof(pid), "P%04d", p + 1);
        const bool pos = positive[static_cast<size_t>(p)];
        if (pos) ++out.n_positive_patients;
        else ++out.n_negative_patients;
        Rng rng(derive(config.seed, 100 + static_cast<uint64_t>(p)));
        // Patient-stable signal position, kept inside the central region.
        const double cy = config.image_size * rng.uniform(0.35, 0.65);
        const double cx = config.image_size * rng.uniform(0.35, 0.65);
        const std::string finding = pos ? "COVID-19" : "No Finding";

        const int n_xray = rng.int_range(config.min_xray_per_patient, config.max_xray_per_patient);
        const int n_ct = rng.int_range(config.min_ct_per_patient, config.max_ct_per_patient);
        for (int k = 0; k < n_xray; ++k) {
            std::string rel = std::string("images/") + pid + "_xray_" + std::to_string(k) + ".pgm";
            auto img = render_image(config, rng, pos, false, cy, cx);
            write_pgm((fs::path(out_root) / rel).string(), img, config.image_size, config.image_size);
            csv_lines.push_back(std::string(pid) + "," + finding + ",X-ray," + rel + "," +
                                std::to_string(rng.int_range(0, 6)));
            if (first_file.empty()) first_file = rel;
            ++out.n_images;
        }
        for (int k = 0; k < n_ct; ++k) {
            std::string rel = std::string("images/") + pid + "_ct_" + std::to_string(k) + ".pgm";
            auto img = render_image(config, rng, pos, true, cy, cx);
            write_pgm((fs::path(out_root) / rel).string(), img, config.image_size, config.image_size);
            csv_lines.push_back(std::string(pid) + "," + finding + ",CT," + rel + "," +
                                std::to_string(rng.int_range(0, 6)));
            if (first_file.empty()) first_file = rel;
            ++out.n_images;
        }
    }

    // Planted placeholder rows; they point at a real file so the only drop
    // reason normalize_records can report for them is the finding filter.
    for (int k = 0; k < config.n_todo_rows; ++k)
        csv_lines.push_back("Ptodo,todo,X-ray," + first_file + ",0");

    out.csv_path = (fs::path(out_root) / "metadata.csv").string();
    std::ofstream csv(out.csv_path);
    if (!csv) fail("generate_cohort: cannot write " + out.csv_path);
    for (const auto& line : csv_lines) csv << line << "\n";
    return out;
}

}  // namespace xkd
