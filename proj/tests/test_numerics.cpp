#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "nhwc/optimizer.hpp"
#include "nhwc/tensor.hpp"
#include "support/oracles.hpp"

using nhwc::AdamConfig;
using nhwc::AdamW;
using nhwc::GradCheckResult;
using nhwc::InvalidInputError;
using nhwc::Rng;
using nhwc::Tape;
using nhwc::Tensor;

namespace {

using T64 = Tensor<double>;

std::vector<Tensor<double>*> ptrs(std::vector<Tensor<double>>& ts) {
    std::vector<Tensor<double>*> out;
    for (auto& t : ts) out.push_back(&t);
    return out;
}

double run_grad_check(const std::function<T64(Tape<double>&)>& f,
                      std::vector<Tensor<double>>& params, double eps = 1e-5) {
    auto p = ptrs(params);
    const auto result =
        nhwc::grad_check(f, std::span<Tensor<double>* const>(p), eps);
    return result.max_rel_err;
}

} // namespace

TEST_CASE("cross_entropy_logits matches closed forms") {
    Tape<double> tape;

    SECTION("uniform logits cost ln(V) per masked token") {
        auto logits = T64::zeros({3, 4});
        const auto loss = tape.cross_entropy_logits(logits, {0, 2, 3}, {1, 1, 1});
        REQUIRE(loss.value() == Catch::Approx(4.158883).epsilon(1e-6));
    }

    SECTION("saturated softmax costs ~0") {
        auto logits = T64::zeros({1, 4});
        logits.data()[2] = 1000.0;
        const auto loss = tape.cross_entropy_logits(logits, {2}, {1});
        REQUIRE(loss.value() < 1e-9);
    }

    SECTION("random logits match the scalar brute-force oracle") {
        Rng rng(7);
        auto logits = T64::randn({2, 3}, rng, 1.5);
        const std::vector<int> targets = {2, 0};
        const std::vector<std::uint8_t> mask = {1, 1};
        const auto loss = tape.cross_entropy_logits(logits, targets, mask);
        const long double expected =
            oracles::cross_entropy_scalar(logits.vec(), 2, 3, targets, mask);
        REQUIRE(loss.value() == Catch::Approx(static_cast<double>(expected)).epsilon(1e-12));
    }

    SECTION("masked-out rows contribute nothing") {
        Rng rng(9);
        auto logits = T64::randn({4, 5}, rng, 1.0);
        const std::vector<int> targets = {1, 2, 3, 4};
        const auto all = tape.cross_entropy_logits(logits, targets, {1, 1, 0, 0});
        const long double expected =
            oracles::cross_entropy_scalar(logits.vec(), 4, 5, targets, {1, 1, 0, 0});
        REQUIRE(all.value() == Catch::Approx(static_cast<double>(expected)).epsilon(1e-12));
    }

    SECTION("errors: target out of range, empty mask") {
        auto logits = T64::zeros({2, 3});
        REQUIRE_THROWS_AS(tape.cross_entropy_logits(logits, {0, 3}, {1, 1}), InvalidInputError);
        REQUIRE_THROWS_AS(tape.cross_entropy_logits(logits, {0, 1}, {0, 0}), InvalidInputError);
    }
}

TEST_CASE("cross_entropy_logits is permutation-equivariant over positions") {
    Rng rng(11);
    const std::size_t t = 6, v = 5;
    auto logits = T64::randn({t, v}, rng, 2.0);
    std::vector<int> targets(t);
    std::vector<std::uint8_t> mask(t);
    for (std::size_t i = 0; i < t; ++i) {
        targets[i] = static_cast<int>(rng.uniform_int(v));
        mask[i] = rng.uniform() < 0.7 ? 1 : 0;
    }
    mask[0] = 1;

    Tape<double> tape;
    const double base = tape.cross_entropy_logits(logits, targets, mask).value();

    std::vector<std::size_t> perm(t);
    std::iota(perm.begin(), perm.end(), 0);
    for (std::size_t i = t; i-- > 1;) std::swap(perm[i], perm[rng.uniform_int(i + 1)]);

    auto shuffled = T64::zeros({t, v});
    std::vector<int> p_targets(t);
    std::vector<std::uint8_t> p_mask(t);
    for (std::size_t i = 0; i < t; ++i) {
        std::copy(logits.data() + perm[i] * v, logits.data() + (perm[i] + 1) * v,
                  shuffled.data() + i * v);
        p_targets[i] = targets[perm[i]];
        p_mask[i] = mask[perm[i]];
    }
    const double permuted = tape.cross_entropy_logits(shuffled, p_targets, p_mask).value();
    REQUIRE(base == Catch::Approx(permuted).epsilon(1e-13));
}

TEST_CASE("grad_check anchors") {
    SECTION("f(p) = p^2 at p = 3") {
        std::vector<Tensor<double>> params = {T64::from({1}, {3.0}, true)};
        const double err = run_grad_check(
            [&](Tape<double>& tape) { return tape.mul(params[0], params[0]); }, params);
        REQUIRE(err < 1e-9);
    }

    SECTION("cross entropy on random 2x3 logits") {
        Rng rng(3);
        std::vector<Tensor<double>> params = {T64::randn({2, 3}, rng, 1.0, true)};
        const double err = run_grad_check(
            [&](Tape<double>& tape) {
                return tape.cross_entropy_logits(params[0], {1, 2}, {1, 1});
            },
            params);
        REQUIRE(err < 1e-6);
    }

    SECTION("non-finite loss reports the parameter") {
        std::vector<Tensor<double>> params = {T64::from({1}, {0.0}, true)};
        auto p = ptrs(params);
        REQUIRE_THROWS_AS(
            nhwc::grad_check(
                [&](Tape<double>& tape) {
                    auto inv = T64::from({1}, {1.0 / params[0].data()[0]});
                    return tape.mul(params[0], inv); // NaN at p=0
                },
                std::span<Tensor<double>* const>(p), 1e-5),
            nhwc::NumericalError);
    }
}

TEST_CASE("every differentiable primitive passes grad_check at 64-bit (100 seeds)") {
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        Rng rng(seed);
        const std::size_t m = 2 + rng.uniform_int(3);
        const std::size_t k = 2 + rng.uniform_int(3);
        const std::size_t n = 2 + rng.uniform_int(3);

        auto weights_for = [&](const std::vector<std::size_t>& shape) {
            Rng wr(seed ^ 0x5eedULL);
            return T64::randn(shape, wr, 1.0);
        };

        struct Case {
            const char* name;
            std::vector<Tensor<double>> params;
            std::function<T64(Tape<double>&, std::vector<Tensor<double>>&)> fn;
        };

        std::vector<Case> cases;
        cases.push_back({"matmul",
                         {T64::randn({m, k}, rng, 1.0, true), T64::randn({k, n}, rng, 1.0, true)},
                         [&](Tape<double>& tp, auto& ps) {
                             return tp.dot_all(tp.matmul(ps[0], ps[1]), weights_for({m, n}));
                         }});
        cases.push_back({"matmul_nt",
                         {T64::randn({m, k}, rng, 1.0, true), T64::randn({n, k}, rng, 1.0, true)},
                         [&](Tape<double>& tp, auto& ps) {
                             return tp.dot_all(tp.matmul_nt(ps[0], ps[1]), weights_for({m, n}));
                         }});
        cases.push_back({"add_mul_sub_scale",
                         {T64::randn({m, n}, rng, 1.0, true), T64::randn({m, n}, rng, 1.0, true)},
                         [&](Tape<double>& tp, auto& ps) {
                             auto y = tp.scale(tp.mul(tp.add(ps[0], ps[1]), tp.sub(ps[0], ps[1])),
                                               0.7);
                             return tp.dot_all(y, weights_for({m, n}));
                         }});
        cases.push_back({"add_row",
                         {T64::randn({m, n}, rng, 1.0, true), T64::randn({n}, rng, 1.0, true)},
                         [&](Tape<double>& tp, auto& ps) {
                             return tp.dot_all(tp.add_row(ps[0], ps[1]), weights_for({m, n}));
                         }});
        cases.push_back({"gelu",
                         {T64::randn({m, n}, rng, 1.5, true)},
                         [&](Tape<double>& tp, auto& ps) {
                             return tp.dot_all(tp.gelu(ps[0]), weights_for({m, n}));
                         }});
        // Normalizing over very few elements is degenerate (x-hat = +/-1 for
        // width 2), so layer_norm gets a realistic row width.
        const std::size_t ln_width = 6 + rng.uniform_int(4);
        cases.push_back({"layer_norm",
                         {T64::randn({m, ln_width}, rng, 1.0, true),
                          T64::randn({ln_width}, rng, 0.5, true),
                          T64::randn({ln_width}, rng, 0.5, true)},
                         [&, ln_width](Tape<double>& tp, auto& ps) {
                             return tp.dot_all(tp.layer_norm(ps[0], ps[1], ps[2]),
                                               weights_for({m, ln_width}));
                         }});
        cases.push_back({"softmax_causal",
                         {T64::randn({m, m}, rng, 1.0, true)},
                         [&](Tape<double>& tp, auto& ps) {
                             return tp.dot_all(tp.softmax_causal(ps[0]), weights_for({m, m}));
                         }});
        std::vector<int> ids;
        for (std::size_t i = 0; i < m; ++i) ids.push_back(static_cast<int>(rng.uniform_int(4)));
        cases.push_back({"embedding",
                         {T64::randn({4, n}, rng, 1.0, true)},
                         [&, ids](Tape<double>& tp, auto& ps) {
                             return tp.dot_all(tp.embedding(ps[0], ids), weights_for({m, n}));
                         }});
        cases.push_back({"slice_concat_reshape",
                         {T64::randn({m, 4}, rng, 1.0, true)},
                         [&](Tape<double>& tp, auto& ps) {
                             auto left = tp.slice_cols(ps[0], 0, 2);
                             auto right = tp.slice_cols(ps[0], 2, 2);
                             auto swapped = tp.concat_cols({right, left});
                             auto flat = tp.reshape(swapped, {m * 4});
                             return tp.dot_all(flat, weights_for({m * 4}));
                         }});
        cases.push_back({"concat_rows_mean",
                         {T64::randn({m, n}, rng, 1.0, true), T64::randn({k, n}, rng, 1.0, true)},
                         [&](Tape<double>& tp, auto& ps) {
                             auto joined = tp.concat_rows({ps[0], ps[1]});
                             return tp.dot_all(tp.mean_rows(joined), weights_for({n}));
                         }});
        cases.push_back({"unfold_time",
                         {T64::randn({6, n}, rng, 1.0, true)},
                         [&](Tape<double>& tp, auto& ps) {
                             auto u = tp.unfold_time(ps[0], 4, 2, 1, 0.25);
                             return tp.dot_all(u, weights_for({3, 4 * n}));
                         }});
        cases.push_back({"mse",
                         {T64::randn({m, n}, rng, 1.0, true), T64::randn({m, n}, rng, 1.0, true)},
                         [&](Tape<double>& tp, auto& ps) { return tp.mse(ps[0], ps[1]); }});
        cases.push_back({"cross_entropy",
                         {T64::randn({m, 5}, rng, 1.0, true)},
                         [&, ids](Tape<double>& tp, auto& ps) {
                             std::vector<int> targets(m);
                             std::vector<std::uint8_t> msk(m, 1);
                             for (std::size_t i = 0; i < m; ++i) targets[i] = ids[i];
                             return tp.cross_entropy_logits(ps[0], targets, msk);
                         }});

        for (auto& c : cases) {
            auto fn = [&](Tape<double>& tp) { return c.fn(tp, c.params); };
            // eps 1e-4: large enough that cancellation roundoff stays below
            // the bound on near-zero gradient entries, small enough that
            // central-difference truncation is ~1e-8 for these op scales.
            const double err = run_grad_check(fn, c.params, 1e-4);
            INFO("primitive " << c.name << " seed " << seed);
            REQUIRE(err < 1e-6);
        }
    }
}

TEST_CASE("straight_through passes the upstream gradient to z unchanged") {
    // The estimator is biased on purpose, so finite differences do not apply:
    // the forward value ignores z entirely. The check is analytic instead:
    // with loss = sum(st(z, q) .* w), d(loss)/d(z) must equal w, which is
    // d(loss)/d(z_q) on this linear head.
    Rng rng(21);
    auto z = T64::randn({3, 4}, rng, 1.0, true);
    auto q = T64::randn({3, 4}, rng, 1.0);
    auto w = T64::randn({3, 4}, rng, 1.0);
    Tape<double> tape;
    auto st = tape.straight_through(z, q);
    for (std::size_t i = 0; i < st.numel(); ++i) REQUIRE(st.data()[i] == q.data()[i]);
    auto loss = tape.dot_all(st, w);
    tape.backward(loss);
    for (std::size_t i = 0; i < z.numel(); ++i)
        REQUIRE(z.grad()[i] == Catch::Approx(w.data()[i]).epsilon(1e-14));
}

TEST_CASE("tape records in topological order and backward consumes it once") {
    Rng rng(5);
    auto a = T64::randn({2, 2}, rng, 1.0, true);
    Tape<double> tape;
    auto b = tape.mul(a, a);
    auto c = tape.dot_all(b, T64::full({2, 2}, 1.0));
    REQUIRE(tape.size() == 2);
    tape.backward(c);
    REQUIRE(tape.size() == 0); // consumed
    for (std::size_t i = 0; i < a.numel(); ++i)
        REQUIRE(a.grad()[i] == Catch::Approx(2.0 * a.data()[i]));
}

TEST_CASE("tensor invariants") {
    auto t = T64::from({2, 3}, {1, 2, 3, 4, 5, 6});
    REQUIRE(t.numel() == 6);
    REQUIRE_THROWS_AS(T64::from({2, 2}, {1.0, 2.0, 3.0}), InvalidInputError);
    t.data()[4] = std::nan("");
    REQUIRE_THROWS_AS(t.check_finite("test"), nhwc::NumericalError);
}

TEST_CASE("optimizer: accumulation semantics") {
    SECTION("target=1 behaves as a plain per-step optimizer") {
        AdamConfig cfg;
        cfg.accumulation_target = 1;
        auto p = T64::from({2}, {1.0, -2.0}, true);
        std::vector<Tensor<double>*> params = {&p};
        AdamW<double> opt(cfg, std::span<Tensor<double>* const>(params));

        oracles::ScalarAdamOracle ref0{cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay};
        oracles::ScalarAdamOracle ref1{cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay};
        double want0 = 1.0, want1 = -2.0;
        for (int step = 0; step < 5; ++step) {
            const std::vector<double> g = {0.3 + step * 0.1, -0.2};
            want0 = ref0.step(want0, g[0]);
            want1 = ref1.step(want1, g[1]);
            std::vector<const std::vector<double>*> grads = {&g};
            REQUIRE(opt.accumulate_and_step(std::span<const std::vector<double>* const>(grads)));
            REQUIRE(p.data()[0] == Catch::Approx(want0).epsilon(1e-14));
            REQUIRE(p.data()[1] == Catch::Approx(want1).epsilon(1e-14));
        }
    }

    SECTION("target=4 with identical gradients equals one plain step") {
        AdamConfig cfg;
        cfg.accumulation_target = 4;
        auto p = T64::from({1}, {0.5}, true);
        std::vector<Tensor<double>*> params = {&p};
        AdamW<double> opt(cfg, std::span<Tensor<double>* const>(params));

        const std::vector<double> g = {0.7};
        std::vector<const std::vector<double>*> grads = {&g};
        for (int micro = 0; micro < 3; ++micro) {
            REQUIRE_FALSE(
                opt.accumulate_and_step(std::span<const std::vector<double>* const>(grads)));
            REQUIRE(p.data()[0] == 0.5); // untouched mid-accumulation
        }
        REQUIRE(opt.accumulate_and_step(std::span<const std::vector<double>* const>(grads)));

        oracles::ScalarAdamOracle ref{cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay};
        REQUIRE(p.data()[0] == Catch::Approx(ref.step(0.5, 0.7)).epsilon(1e-14));
        REQUIRE(opt.accumulation_count() == 0);
    }

    SECTION("target=2 applies one step with the mean gradient (hand-stepped oracle)") {
        AdamConfig cfg;
        cfg.accumulation_target = 2;
        auto p = T64::from({1}, {1.25}, true);
        std::vector<Tensor<double>*> params = {&p};
        AdamW<double> opt(cfg, std::span<Tensor<double>* const>(params));

        const std::vector<double> g1 = {0.9}, g2 = {-0.1};
        std::vector<const std::vector<double>*> grads1 = {&g1}, grads2 = {&g2};
        REQUIRE_FALSE(opt.accumulate_and_step(std::span<const std::vector<double>* const>(grads1)));
        REQUIRE(opt.accumulate_and_step(std::span<const std::vector<double>* const>(grads2)));

        oracles::ScalarAdamOracle ref{cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay};
        REQUIRE(p.data()[0] == Catch::Approx(ref.step(1.25, 0.4)).epsilon(1e-14));
    }

    SECTION("shape mismatch is an invalid-input error") {
        AdamConfig cfg;
        auto p = T64::from({2}, {1.0, 2.0}, true);
        std::vector<Tensor<double>*> params = {&p};
        AdamW<double> opt(cfg, std::span<Tensor<double>* const>(params));
        const std::vector<double> bad = {1.0, 2.0, 3.0};
        std::vector<const std::vector<double>*> grads = {&bad};
        REQUIRE_THROWS_AS(opt.accumulate_and_step(std::span<const std::vector<double>* const>(grads)),
                          InvalidInputError);
    }
}

TEST_CASE("optimizer runs are bitwise reproducible under a fixed seed") {
    auto run = [](std::uint64_t seed) {
        Rng rng(seed);
        auto p = T64::randn({8}, rng, 1.0, true);
        std::vector<Tensor<double>*> params = {&p};
        AdamConfig cfg;
        cfg.accumulation_target = 3;
        AdamW<double> opt(cfg, std::span<Tensor<double>* const>(params));
        for (int step = 0; step < 12; ++step) {
            std::vector<double> g(8);
            for (auto& x : g) x = rng.normal();
            std::vector<const std::vector<double>*> grads = {&g};
            opt.accumulate_and_step(std::span<const std::vector<double>* const>(grads));
        }
        return p.vec();
    };
    const auto a = run(42), b = run(42);
    REQUIRE(a == b); // exact bitwise equality
    // k micro-batches produce exactly one update:
    Rng rng(1);
    auto p = T64::randn({4}, rng, 1.0, true);
    std::vector<Tensor<double>*> params = {&p};
    AdamConfig cfg;
    cfg.accumulation_target = 5;
    AdamW<double> opt(cfg, std::span<Tensor<double>* const>(params));
    std::size_t updates = 0;
    for (int micro = 0; micro < 5; ++micro) {
        std::vector<double> g(4, 0.1);
        std::vector<const std::vector<double>*> grads = {&g};
        if (opt.accumulate_and_step(std::span<const std::vector<double>* const>(grads))) ++updates;
    }
    REQUIRE(updates == 1);
}
