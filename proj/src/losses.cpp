#include "xkd/losses.hpp"

namespace xkd {

const char* mechanism_name(Mechanism m) {
    switch (m) {
        case Mechanism::none: return "none";
        case Mechanism::logit_kd: return "logit_kd";
        case Mechanism::attention_transfer: return "attention_transfer";
        case Mechanism::feature_hint: return "feature_hint";
    }
    return "?";
}

Mechanism mechanism_from_name(const std::string& name) {
    if (name == "none") return Mechanism::none;
    if (name == "logit_kd") return Mechanism::logit_kd;
    if (name == "attention_transfer") return Mechanism::attention_transfer;
    if (name == "feature_hint") return Mechanism::feature_hint;
    fail("unknown mechanism '" + name + "'");
}

ClassWeights inverse_frequency_weights(const std::array<long, 2>& counts) {
    if (counts[0] < 1 || counts[1] < 1) fail("inverse_frequency_weights: degenerate class (zero count)");
    const double total = static_cast<double>(counts[0] + counts[1]);
    ClassWeights cw;
    cw.w[0] = total / (2.0 * static_cast<double>(counts[0]));
    cw.w[1] = total / (2.0 * static_cast<double>(counts[1]));
    return cw;
}

Var weighted_ce(const Var& logits, const std::vector<int>& labels, const ClassWeights& weights) {
    return weighted_ce_loss(logits, labels, weights.w);
}

Var kd_objective(const Var& student_logits, const Tensor& teacher_logits,
                 const std::vector<int>& labels, const DistillParams& params,
                 const ClassWeights& weights) {
    params.validate();
    Var hard = weighted_ce(student_logits, labels, weights);
    Var soft = kd_kl_loss(student_logits, teacher_logits, params.temperature);
    return add(scale(hard, 1.0 - params.alpha), scale(soft, params.alpha));
}

Var attention_map(const Var& feature) { return l2_normalize_rows(sum_channel_sq(feature)); }

// Teacher energy map resized to the student's spatial grid before
// normalization, so matching-size taps reduce to attention_map on both.
static Var matched_attention_map(const Var& teacher_tap, int student_h, int student_w) {
    const Tensor& t = teacher_tap.val();
    if (t.dim(2) == student_h && t.dim(3) == student_w) return attention_map(teacher_tap);
    Var energy = sum_channel_sq(teacher_tap);  // (N, Ht*Wt)
    energy = reshape(energy, {t.dim(0), 1, t.dim(2), t.dim(3)});
    energy = resize_bilinear(energy, student_h, student_w);
    energy = reshape(energy, {t.dim(0), student_h * student_w});
    return l2_normalize_rows(energy);
}

Var attention_transfer_loss(const std::vector<Var>& student_taps,
                            const std::vector<Var>& teacher_taps) {
    if (student_taps.size() != teacher_taps.size())
        fail("attention_transfer_loss: tap count mismatch (" + std::to_string(student_taps.size()) +
             " vs " + std::to_string(teacher_taps.size()) + ")");
    if (student_taps.empty()) fail("attention_transfer_loss: no taps");
    Var acc;
    for (size_t i = 0; i < student_taps.size(); ++i) {
        const Tensor& s = student_taps[i].val();
        Var as = attention_map(student_taps[i]);
        Var at = matched_attention_map(teacher_taps[i], s.dim(2), s.dim(3));
        Var d = sub(as, at);
        Var term = mean_rowsum(mul(d, d));  // batch mean of ||a_s - a_t||^2
        acc = acc.defined() ? add(acc, term) : term;
    }
    return scale(acc, 1.0 / static_cast<double>(student_taps.size()));
}

Var hint_loss(const Var& student_feature, const Var& teacher_feature, const Var& adapter_w,
              const Var& adapter_b) {
    const Tensor& s = student_feature.val();
    const Tensor& t = teacher_feature.val();
    Var teacher = teacher_feature;
    if (t.dim(2) != s.dim(2) || t.dim(3) != s.dim(3))
        teacher = resize_bilinear(teacher_feature, s.dim(2), s.dim(3));
    Var adapted = conv2d(student_feature, adapter_w, adapter_b);
    return mse(adapted, teacher);
}

Var total_loss(const LossInputs& in, const std::vector<int>& labels, const DistillParams& params,
               const ClassWeights& weights) {
    params.validate();
    if (params.mechanism == Mechanism::none) return weighted_ce(in.student_logits, labels, weights);

    if (!in.teacher_logits)
        fail(std::string("total_loss: mechanism '") + mechanism_name(params.mechanism) +
             "' requires teacher logits");
    Var base = kd_objective(in.student_logits, *in.teacher_logits, labels, params, weights);
    if (params.mechanism == Mechanism::logit_kd) return base;

    if (in.student_taps.empty() || in.teacher_taps.empty())
        fail("total_loss: mechanism requires feature taps");
    Var mech;
    if (params.mechanism == Mechanism::attention_transfer) {
        mech = attention_transfer_loss(in.student_taps, in.teacher_taps);
    } else {
        if (!in.hint_adapter_w.defined()) fail("total_loss: feature_hint requires an adapter");
        mech = hint_loss(in.student_taps[0], in.teacher_taps[0], in.hint_adapter_w, in.hint_adapter_b);
    }
    return add(base, scale(mech, params.mechanism_weight));
}

}  // namespace xkd
