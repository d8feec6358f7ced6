#pragma once

// Training objectives: inverse-frequency class weighting, hard/soft
// distillation (hard cross-entropy blended with temperature-softened
// teacher/student KL at weight alpha, KL taken teacher||student), and the
// two mechanism-control losses (attention transfer, feature hint) added on
// top at weight beta. Class weights apply to the hard term only; the soft
// term stays a pure distribution match.

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "xkd/tensor.hpp"

namespace xkd {

enum class Mechanism { none, logit_kd, attention_transfer, feature_hint };

const char* mechanism_name(Mechanism m);
Mechanism mechanism_from_name(const std::string& name);

struct DistillParams {
    double temperature = 4.0;
    double alpha = 0.6;  // 0 = hard labels only, 1 = teacher only
    Mechanism mechanism = Mechanism::none;
    double mechanism_weight = 0.5;  // beta, for attention_transfer / feature_hint

    void validate() const {
        if (temperature <= 0.0) fail("DistillParams: temperature must be positive");
        if (alpha < 0.0 || alpha > 1.0) fail("DistillParams: alpha must be in [0,1]");
        if (mechanism_weight < 0.0) fail("DistillParams: mechanism_weight must be non-negative");
    }
};

struct ClassWeights {
    std::array<double, 2> w{1.0, 1.0};
};

// w_c = N / (K * n_c), K = 2 classes. Zero counts are degenerate.
ClassWeights inverse_frequency_weights(const std::array<long, 2>& counts);

// -w_y * log softmax(logits)_y, reduced by the sum of the applied weights.
Var weighted_ce(const Var& logits, const std::vector<int>& labels, const ClassWeights& weights);

// (1-alpha) * weighted_ce + alpha * T^2 * KL(teacher || student), softened
// by T. Teacher logits are plain values: no gradient reaches the teacher.
Var kd_objective(const Var& student_logits, const Tensor& teacher_logits,
                 const std::vector<int>& labels, const DistillParams& params,
                 const ClassWeights& weights);

// Channel energy map: flatten_s(sum_c feature[c,s]^2), L2-normalized per
// item; an all-zero feature maps to the all-zero vector.
Var attention_map(const Var& feature);

// Mean over taps of the batch-mean squared distance between normalized
// attention maps; teacher maps are bilinearly resized to student sizes.
Var attention_transfer_loss(const std::vector<Var>& student_taps,
                            const std::vector<Var>& teacher_taps);

// MSE between adapter(student_feature) and teacher_feature; the adapter is a
// learned 1x1 projection, teacher resized to the student's spatial size.
Var hint_loss(const Var& student_feature, const Var& teacher_feature, const Var& adapter_w,
              const Var& adapter_b);

struct LossInputs {
    Var student_logits;                       // (N,2)
    std::optional<Tensor> teacher_logits;     // (N,2) constants
    std::vector<Var> student_taps;            // mechanism features
    std::vector<Var> teacher_taps;            // mechanism features (constants)
    Var hint_adapter_w;                       // (Ct,Cs,1,1), learned with the student
    Var hint_adapter_b;                       // (Ct)
};

// none -> weighted_ce; logit_kd -> kd_objective; attention_transfer /
// feature_hint -> kd_objective + beta * mechanism loss.
Var total_loss(const LossInputs& in, const std::vector<int>& labels, const DistillParams& params,
               const ClassWeights& weights);

}  // namespace xkd
