#include <doctest.h>

#include <cmath>

#include "test_util.hpp"
#include "xkd/losses.hpp"

using namespace xkd;
using xkd_test::check_gradients;
using xkd_test::random_tensor;

TEST_SUITE_BEGIN("losses");

TEST_CASE("inverse-frequency weights") {
    auto w = inverse_frequency_weights({2, 2});
    CHECK(w.w[0] == doctest::Approx(1.0));
    CHECK(w.w[1] == doctest::Approx(1.0));
    w = inverse_frequency_weights({3, 1});
    CHECK(w.w[0] == doctest::Approx(4.0 / 6.0).epsilon(1e-6));
    CHECK(w.w[1] == doctest::Approx(2.0));
    w = inverse_frequency_weights({9, 1});
    CHECK(w.w[0] == doctest::Approx(10.0 / 18.0).epsilon(1e-6));
    CHECK(w.w[1] == doctest::Approx(5.0));
    CHECK_THROWS(inverse_frequency_weights({5, 0}));
}

TEST_CASE("weighted cross-entropy anchor values") {
    ClassWeights unit;
    Var z0(Tensor::from({1, 2}, {0.0, 0.0}));
    CHECK(weighted_ce(z0, {0}, unit).item() == doctest::Approx(std::log(2.0)).epsilon(1e-9));

    Var sat(Tensor::from({1, 2}, {10.0, -10.0}));
    CHECK(weighted_ce(sat, {0}, unit).item() < 1e-8);

    // per-sample weighted loss is w_y * ln2; reduction divides by the summed
    // applied weights
    ClassWeights cw;
    cw.w = {4.0 / 6.0, 2.0};
    Var z1(Tensor::from({1, 2}, {0.0, 0.0}));
    CHECK(weighted_ce(z1, {1}, cw).item() == doctest::Approx(std::log(2.0)).epsilon(1e-9));
    Var z2(Tensor::from({2, 2}, {0.0, 0.0, 0.0, 0.0}));
    double expect = (cw.w[0] * std::log(2.0) + cw.w[1] * std::log(2.0)) / (cw.w[0] + cw.w[1]);
    CHECK(weighted_ce(z2, {0, 1}, cw).item() == doctest::Approx(expect).epsilon(1e-9));
}

TEST_CASE("distillation objective anchor values") {
    ClassWeights unit;
    DistillParams p;
    p.mechanism = Mechanism::logit_kd;

    // student == teacher: KL term vanishes for any temperature
    Tensor teacher = Tensor::from({2, 2}, {1.3, -0.4, 0.2, 0.9});
    Var student(teacher);
    for (double T : {1.0, 2.0, 7.5}) {
        p.temperature = T;
        p.alpha = 0.7;
        double want = 0.3 * weighted_ce(student, {0, 1}, unit).item();
        CHECK(kd_objective(student, teacher, {0, 1}, p, unit).item() ==
              doctest::Approx(want).epsilon(1e-9));
    }

    // alpha = 0 reduces to the weighted CE exactly
    p.alpha = 0.0;
    p.temperature = 3.0;
    Var s2(Tensor::from({2, 2}, {0.4, -0.2, -1.0, 0.3}));
    CHECK(kd_objective(s2, teacher, {0, 1}, p, unit).item() ==
          doctest::Approx(weighted_ce(s2, {0, 1}, unit).item()).epsilon(1e-12));

    // high-precision scalar: student (0,0), teacher (2,0), T=2, alpha=1:
    // KL((0.7311,0.2689)||(0.5,0.5)) = ln2 - H(sigma(1)) = 0.1109441,
    // scaled by T^2 -> 0.4437763
    p.alpha = 1.0;
    p.temperature = 2.0;
    Var s3(Tensor::from({1, 2}, {0.0, 0.0}));
    Tensor t3 = Tensor::from({1, 2}, {2.0, 0.0});
    double got = kd_objective(s3, t3, {0}, p, unit).item();
    CHECK(got == doctest::Approx(0.4437763).epsilon(1e-5));
    CHECK(std::fabs(got - 0.4440) < 1e-3);
}

TEST_CASE("attention map: one-hot, zero guard, brute force") {
    Tensor onehot({1, 2, 2, 2}, 0.0);
    onehot.at4(0, 1, 1, 0) = 5.0;
    NoGradGuard ng;
    Tensor a = attention_map(constant(onehot)).val();
    CHECK(a.at2(0, 2) == doctest::Approx(1.0));  // site (1,0) flattens to index 2
    CHECK(a.at2(0, 0) == doctest::Approx(0.0));

    Tensor zero({1, 3, 2, 2}, 0.0);
    Tensor az = attention_map(constant(zero)).val();
    for (double v : az.v) CHECK(v == 0.0);

    Rng rng(3);
    Tensor f = random_tensor({1, 3, 2, 2}, rng);
    Tensor got = attention_map(constant(f)).val();
    std::vector<double> energy(4, 0.0);
    for (int c = 0; c < 3; ++c)
        for (int s = 0; s < 4; ++s) energy[static_cast<size_t>(s)] += f.v[static_cast<size_t>(c * 4 + s)] * f.v[static_cast<size_t>(c * 4 + s)];
    double norm = 0.0;
    for (double e : energy) norm += e * e;
    norm = std::sqrt(norm);
    for (int s = 0; s < 4; ++s) CHECK(got.at2(0, s) == doctest::Approx(energy[static_cast<size_t>(s)] / norm).epsilon(1e-9));
}

TEST_CASE("attention transfer loss anchors") {
    Rng rng(5);
    Tensor f = random_tensor({2, 3, 4, 4}, rng);
    NoGradGuard ng;
    CHECK(attention_transfer_loss({constant(f)}, {constant(f)}).item() == doctest::Approx(0.0));

    // one-hot maps at different sites are orthonormal: squared distance 2
    Tensor s({1, 1, 2, 2}, 0.0), t({1, 1, 2, 2}, 0.0);
    s.at4(0, 0, 0, 0) = 3.0;
    t.at4(0, 0, 1, 1) = 7.0;
    CHECK(attention_transfer_loss({constant(s)}, {constant(t)}).item() == doctest::Approx(2.0));

    // brute force with a resized teacher map
    Tensor st = random_tensor({2, 2, 2, 2}, rng);
    Tensor tt = random_tensor({2, 5, 4, 4}, rng);
    double got = attention_transfer_loss({constant(st)}, {constant(tt)}).item();
    Tensor energy({2, 1, 4, 4}, 0.0);
    for (int n = 0; n < 2; ++n)
        for (int c = 0; c < 5; ++c)
            for (int y = 0; y < 4; ++y)
                for (int x = 0; x < 4; ++x)
                    energy.at4(n, 0, y, x) += tt.at4(n, c, y, x) * tt.at4(n, c, y, x);
    Tensor resized = resize_bilinear_value(energy, 2, 2);
    double want = 0.0;
    for (int n = 0; n < 2; ++n) {
        std::vector<double> as(4, 0.0), at(4, 0.0);
        for (int c = 0; c < 2; ++c)
            for (int sidx = 0; sidx < 4; ++sidx)
                as[static_cast<size_t>(sidx)] += st.v[static_cast<size_t>((n * 2 + c) * 4 + sidx)] * st.v[static_cast<size_t>((n * 2 + c) * 4 + sidx)];
        for (int sidx = 0; sidx < 4; ++sidx) at[static_cast<size_t>(sidx)] = resized.v[static_cast<size_t>(n * 4 + sidx)];
        double ns = 0, nt = 0;
        for (int i = 0; i < 4; ++i) {
            ns += as[static_cast<size_t>(i)] * as[static_cast<size_t>(i)];
            nt += at[static_cast<size_t>(i)] * at[static_cast<size_t>(i)];
        }
        ns = std::sqrt(ns);
        nt = std::sqrt(nt);
        for (int i = 0; i < 4; ++i) {
            double d = as[static_cast<size_t>(i)] / ns - at[static_cast<size_t>(i)] / nt;
            want += d * d;
        }
    }
    want /= 2.0;  // batch mean
    CHECK(got == doctest::Approx(want).epsilon(1e-9));

    CHECK_THROWS(attention_transfer_loss({constant(s)}, {}));
}

TEST_CASE("hint loss anchors") {
    Rng rng(9);
    NoGradGuard ng;
    // identity adapter on equal features
    Tensor f = random_tensor({2, 3, 4, 4}, rng);
    Tensor eye({3, 3, 1, 1}, 0.0);
    for (int c = 0; c < 3; ++c) eye.v[static_cast<size_t>(c * 3 + c)] = 1.0;
    Tensor zb({3}, 0.0);
    CHECK(hint_loss(constant(f), constant(f), constant(eye), constant(zb)).item() ==
          doctest::Approx(0.0));

    Tensor plus1 = f;
    for (auto& v : plus1.v) v += 1.0;
    CHECK(hint_loss(constant(f), constant(plus1), constant(eye), constant(zb)).item() ==
          doctest::Approx(1.0));

    // random adapter matches a brute-force 1x1 conv + MSE
    Tensor w = random_tensor({5, 3, 1, 1}, rng);
    Tensor b = random_tensor({5}, rng);
    Tensor t = random_tensor({2, 5, 4, 4}, rng);
    double got = hint_loss(constant(f), constant(t), constant(w), constant(b)).item();
    double want = 0.0;
    for (int n = 0; n < 2; ++n)
        for (int co = 0; co < 5; ++co)
            for (int y = 0; y < 4; ++y)
                for (int x = 0; x < 4; ++x) {
                    double acc = b.v[static_cast<size_t>(co)];
                    for (int ci = 0; ci < 3; ++ci) acc += w.v[static_cast<size_t>(co * 3 + ci)] * f.at4(n, ci, y, x);
                    double d = acc - t.at4(n, co, y, x);
                    want += d * d;
                }
    want /= (2.0 * 5 * 4 * 4);
    CHECK(got == doctest::Approx(want).epsilon(1e-9));
}

TEST_CASE("total loss composition") {
    Rng rng(15);
    ClassWeights cw;
    cw.w = {0.8, 1.4};
    std::vector<int> labels{0, 1, 1};

    LossInputs in;
    in.student_logits = Var(random_tensor({3, 2}, rng));
    in.teacher_logits = random_tensor({3, 2}, rng);
    in.student_taps = {Var(random_tensor({3, 2, 2, 2}, rng))};
    in.teacher_taps = {Var(random_tensor({3, 4, 2, 2}, rng))};
    in.hint_adapter_w = Var(random_tensor({4, 2, 1, 1}, rng));
    in.hint_adapter_b = Var(random_tensor({4}, rng));

    DistillParams p;
    p.mechanism = Mechanism::none;
    CHECK(total_loss(in, labels, p, cw).item() ==
          doctest::Approx(weighted_ce(in.student_logits, labels, cw).item()));

    p.mechanism = Mechanism::attention_transfer;
    p.mechanism_weight = 0.0;
    double kd = kd_objective(in.student_logits, *in.teacher_logits, labels, p, cw).item();
    CHECK(total_loss(in, labels, p, cw).item() == doctest::Approx(kd));

    p.mechanism = Mechanism::feature_hint;
    p.mechanism_weight = 0.5;
    double hint =
        hint_loss(in.student_taps[0], in.teacher_taps[0], in.hint_adapter_w, in.hint_adapter_b).item();
    CHECK(total_loss(in, labels, p, cw).item() == doctest::Approx(kd + 0.5 * hint).epsilon(1e-9));

    p.mechanism = Mechanism::logit_kd;
    LossInputs no_teacher;
    no_teacher.student_logits = in.student_logits;
    CHECK_THROWS(total_loss(no_teacher, labels, p, cw));
}

TEST_CASE("total loss is affine in alpha with correct endpoints") {
    Rng rng(19);
    ClassWeights cw;
    cw.w = {1.2, 0.9};
    std::vector<int> labels{1, 0};
    Var z(random_tensor({2, 2}, rng));
    Tensor t = random_tensor({2, 2}, rng);
    DistillParams p;
    p.mechanism = Mechanism::logit_kd;
    p.temperature = 3.0;

    auto at_alpha = [&](double a) {
        p.alpha = a;
        return kd_objective(z, t, labels, p, cw).item();
    };
    double l0 = at_alpha(0.0), l1 = at_alpha(1.0), lh = at_alpha(0.5);
    CHECK(lh == doctest::Approx(0.5 * (l0 + l1)).epsilon(1e-9));
    CHECK(l0 == doctest::Approx(weighted_ce(z, labels, cw).item()).epsilon(1e-12));
    CHECK(l1 == doctest::Approx(kd_kl_loss(z, t, 3.0).item()).epsilon(1e-12));
}

TEST_CASE("soft term is a non-negative divergence") {
    Rng rng(23);
    for (int rep = 0; rep < 50; ++rep) {
        Var z(random_tensor({4, 2}, rng, 2.0));
        Tensor t = random_tensor({4, 2}, rng, 2.0);
        double kl = kd_kl_loss(z, t, 1.0 + rng.real() * 5.0).item();
        CHECK(kl >= -1e-12);
    }
    Var same(Tensor::from({1, 2}, {0.7, -0.3}));
    CHECK(kd_kl_loss(same, same.val(), 2.0).item() == doctest::Approx(0.0));
}

TEST_CASE("softened distributions converge monotonically toward uniform") {
    Tensor logits = Tensor::from({1, 2}, {3.0, -1.0});
    Var z(Tensor::from({1, 2}, {-2.0, 0.5}));
    double prev_gap = 1.0, prev_raw_kl = 1e9;
    for (double T : {1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0, 128.0, 256.0}) {
        Tensor soft({1, 2});
        soft.at2(0, 0) = logits.at2(0, 0) / T;
        soft.at2(0, 1) = logits.at2(0, 1) / T;
        auto p = softmax_row(soft.v.data(), 2);
        double gap = std::fabs(p[0] - 0.5);
        CHECK(gap < prev_gap);
        prev_gap = gap;
        double raw_kl = kd_kl_loss(z, logits, T).item() / (T * T);  // soft term before T^2 scaling
        CHECK(raw_kl < prev_raw_kl);
        prev_raw_kl = raw_kl;
    }
    CHECK(prev_raw_kl < 1e-3);
}

TEST_CASE("analytic gradients of every mechanism match finite differences") {
    Rng rng(27);
    ClassWeights cw;
    cw.w = {0.6, 1.7};
    std::vector<int> labels{1, 0, 1};
    for (Mechanism mech : {Mechanism::none, Mechanism::logit_kd, Mechanism::attention_transfer,
                           Mechanism::feature_hint}) {
        LossInputs in;
        in.student_logits = Var(random_tensor({3, 2}, rng), true);
        in.teacher_logits = random_tensor({3, 2}, rng);
        in.student_taps = {Var(random_tensor({3, 2, 2, 2}, rng), true)};
        in.teacher_taps = {Var(random_tensor({3, 3, 4, 4}, rng))};
        in.hint_adapter_w = Var(random_tensor({3, 2, 1, 1}, rng), true);
        in.hint_adapter_b = Var(random_tensor({3}, rng), true);
        DistillParams p;
        p.mechanism = mech;
        p.temperature = 2.5;
        p.alpha = 0.6;
        p.mechanism_weight = 0.5;

        std::vector<Var> leaves{in.student_logits};
        if (mech == Mechanism::attention_transfer) leaves.push_back(in.student_taps[0]);
        if (mech == Mechanism::feature_hint) {
            leaves.push_back(in.student_taps[0]);
            leaves.push_back(in.hint_adapter_w);
            leaves.push_back(in.hint_adapter_b);
        }
        check_gradients(leaves, [&] { return total_loss(in, labels, p, cw); }, 1e-5, 1e-5);
    }
}

TEST_SUITE_END();
