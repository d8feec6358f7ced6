#pragma once

// Lightweight convolutional classifiers: a wider teacher and a narrower
// student, each stage 3x3 conv -> group norm -> ReLU -> 2x average pool,
// global average pooling and a linear head. Three optional blocks can be
// toggled per role:
//   DPE  (teacher): spatial reweighting by a sigmoid mask from a 1x1 conv.
//   MHRA (teacher): single-layer multi-head self-attention over spatial
//                   tokens with a learned per-channel retain gate.
//   DFPN (student): three-scale top-down fusion feeding the head.
// Initialization is a seeded fan-in-scaled normal, keyed per parameter name
// so toggling blocks never shifts the init of the shared layers.

#include <cstdint>
#include <string>
#include <vector>

#include "xkd/tensor.hpp"

namespace xkd {

struct BackboneConfig {
    enum class Role { teacher, student };
    Role role = Role::student;
    std::vector<int> stage_widths;
    int input_size = 128;
    int n_classes = 2;

    static BackboneConfig teacher_default(int input_size = 128) {
        return {Role::teacher, {32, 64, 128, 256}, input_size, 2};
    }
    static BackboneConfig student_default(int input_size = 128) {
        return {Role::student, {16, 32, 64}, input_size, 2};
    }
};

struct ModuleFlags {
    bool dpe = false;
    bool mhra = false;
    bool dfpn = false;
};

struct ForwardOutput {
    Var logits;                       // (N, n_classes)
    Var embedding;                    // (N, C) pooled feature entering the head
    std::vector<Var> stage_features;  // post-stage maps; last entry reflects DPE/MHRA when on
    Var fused_map;                    // DFPN output (student, when enabled)
    int attention_tap = 0;            // stage index used by mechanism losses
};

struct ParamStore {
    struct Entry {
        std::string name;
        Var var;
    };
    std::vector<Entry> items;

    Var add(const std::string& name, Tensor init);
    Var find(const std::string& name) const;
    std::vector<Var> vars() const;
    int64_t count_scalars() const;
};

// Seeded fan-in-scaled init helpers (normal; std = gain/sqrt(fan_in)).
Tensor init_normal(std::vector<int> shape, int fan_in, double gain, uint64_t seed,
                   const std::string& name);

// --- optional blocks ---------------------------------------------------------

struct DpeBlock {  // teacher-side spatial reweighting
    Var w;         // (1, C, 1, 1)
    Var b;         // (1)
    Var apply(const Var& feature) const;
};

struct MhraBlock {  // teacher-side attention + retain gate
    int heads = 4;
    Var wq, wk, wv, wo;  // (C, C) token projections
    Var gate;            // (C); retain gate g = sigmoid(gate)
    Var apply(const Var& feature) const;
};

struct DfpnBlock {  // student-side three-scale top-down fusion
    Var lat_w[3], lat_b[3];  // 1x1 projections: coarse, mid, fine
    Var smooth_w, smooth_b;  // 3x3 smoothing at the finest scale
    // scales must be related by factor-2 spatial ratios (coarse smallest)
    Var apply(const Var& coarse, const Var& mid, const Var& fine) const;
};

// --- models ------------------------------------------------------------------

class Model {
public:
    Model(const BackboneConfig& config, const ModuleFlags& flags, uint64_t seed);

    ForwardOutput forward(const Tensor& batch) const;  // batch (N,1,S,S)

    const BackboneConfig& config() const { return config_; }
    const ModuleFlags& flags() const { return flags_; }
    ParamStore& params() { return params_; }
    const ParamStore& params() const { return params_; }
    std::vector<Var> parameters() const { return params_.vars(); }
    int64_t parameter_count() const { return params_.count_scalars(); }

    int tap_channels() const;  // channels of the mechanism tap stage

    std::vector<uint8_t> serialize() const;
    void deserialize(const std::vector<uint8_t>& bytes);
    void save(const std::string& path) const;
    void load(const std::string& path);
    std::string weights_digest() const;

private:
    BackboneConfig config_;
    ModuleFlags flags_;
    ParamStore params_;
    struct Stage {
        Var conv_w, conv_b, gn_gamma, gn_beta;
        int groups = 1;
    };
    std::vector<Stage> stages_;
    DpeBlock dpe_;
    MhraBlock mhra_;
    DfpnBlock dfpn_;
    Var head_w, head_b;
};

Model build_model(const BackboneConfig& config, const ModuleFlags& flags, uint64_t seed);

// Both modalities at training and inference: teacher-style CT branch and
// student-style X-ray branch, pooled embeddings concatenated into one head.
class LateFusionModel {
public:
    LateFusionModel(const BackboneConfig& xray_config, const BackboneConfig& ct_config, uint64_t seed);

    Var forward(const Tensor& xray_batch, const Tensor& ct_batch) const;  // -> (N,2) logits

    ParamStore& params() { return params_; }
    std::vector<Var> parameters() const { return params_.vars(); }
    std::vector<uint8_t> serialize() const;
    std::string weights_digest() const;
    void save(const std::string& path) const;

    Var head_w, head_b;  // exposed for branch-ablation tests

private:
    BackboneConfig xray_config_, ct_config_;
    ParamStore params_;
    struct Stage {
        Var conv_w, conv_b, gn_gamma, gn_beta;
        int groups = 1;
    };
    std::vector<Stage> xray_stages_, ct_stages_;
    Var branch_embed(const Tensor& batch, const std::vector<Stage>& stages) const;
};

// Serialization shared by both model kinds.
std::vector<uint8_t> serialize_params(const ParamStore& store);
void deserialize_params(ParamStore& store, const std::vector<uint8_t>& bytes);

}  // namespace xkd
