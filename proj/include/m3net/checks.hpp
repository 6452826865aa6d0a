#pragma once

#include <chrono>
#include <functional>
#include <string>
#include <vector>

#include "m3net/gradcheck.hpp"
#include "m3net/model.hpp"
#include "m3net/rng.hpp"

// The canonical analytic-vs-finite-difference suite: every loss component and
// the full stage-2 objective, randomized shapes, multiple seeds, 64-bit.

namespace m3net {

struct CheckResult {
    std::string component;
    double worst_rel_err = 0.0;
    double tol = 1e-4;
    std::size_t seeds = 0;
    bool pass = true;
};

namespace detail_checks {

inline TensorData<double> randn(Rng& rng, Shape shape, double scale = 1.0) {
    TensorData<double> t(std::move(shape));
    for (auto& v : t.data) v = scale * rng.normal();
    return t;
}

// keeps nuclear-norm inputs away from the subgradient kink
inline TensorData<double> well_separated_matrix(Rng& rng, std::size_t m, std::size_t n) {
    for (int attempt = 0; attempt < 64; ++attempt) {
        TensorData<double> z = randn(rng, {m, n});
        auto svd = jacobi_svd(z);
        bool ok = svd.s.back() > 0.15;
        for (std::size_t i = 0; i + 1 < svd.s.size(); ++i)
            ok = ok && (svd.s[i] - svd.s[i + 1] > 0.1);
        if (ok) return z;
    }
    throw NumericError("could not draw a well-separated matrix");
}

}  // namespace detail_checks

// Runs one named component over `seeds` seeds and records the worst error.
inline CheckResult run_component(
    const std::string& name, double tol, std::size_t seeds, std::uint64_t seed0,
    const std::function<std::pair<GradCheckFn,
                                  std::vector<std::pair<std::string, TensorData<double>>>>(Rng&)>&
        make_case,
    double step = 1e-5) {
    CheckResult r;
    r.component = name;
    r.tol = tol;
    r.seeds = seeds;
    for (std::size_t s = 0; s < seeds; ++s) {
        Rng rng = Rng(seed0).derive("check:" + name, s);
        auto [fn, params] = make_case(rng);
        GradCheckReport rep = grad_check(fn, std::move(params), step, tol);
        r.worst_rel_err = std::max(r.worst_rel_err, rep.max_rel_err);
    }
    r.pass = r.worst_rel_err < tol;
    return r;
}

std::vector<CheckResult> gradcheck_suite(std::uint64_t seed0 = 0, std::size_t seeds = 20);

}  // namespace m3net
