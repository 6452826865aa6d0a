#pragma once

#include <cstring>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "m3net/tape.hpp"
#include "m3net/tensor.hpp"

namespace m3net {

// Central-difference verification of reverse-mode gradients. Always runs in
// 64-bit; relative error uses a max(|a|,|b|,1e-8) denominator.
struct GradCheckReport {
    struct Entry {
        std::string name;
        double max_rel_err = 0.0;
        std::size_t worst_index = 0;
        double analytic = 0.0;
        double numeric = 0.0;
    };
    std::vector<Entry> entries;
    double max_rel_err = 0.0;

    bool pass(double tol) const { return max_rel_err < tol; }

    std::string summary() const {
        std::string s;
        for (const auto& e : entries) {
            s += e.name + ": max_rel_err=" + std::to_string(e.max_rel_err) + " (analytic=" +
                 std::to_string(e.analytic) + ", fd=" + std::to_string(e.numeric) + ")\n";
        }
        return s;
    }
};

using GradCheckFn =
    std::function<Var<double>(Tape<double>&, const std::vector<Var<double>>&)>;

namespace detail_gc {

inline double eval_scalar(const GradCheckFn& f,
                          const std::vector<std::pair<std::string, TensorData<double>>>& params,
                          bool with_grad, Tape<double>* keep = nullptr,
                          std::vector<Var<double>>* leaves_out = nullptr) {
    Tape<double> local;
    Tape<double>& tape = keep ? *keep : local;
    std::vector<Var<double>> leaves;
    leaves.reserve(params.size());
    for (const auto& [name, value] : params) leaves.push_back(tape.leaf(value, with_grad, name));
    Var<double> y = f(tape, leaves);
    if (y.numel() != 1) throw ShapeError("grad_check: objective must be scalar");
    if (leaves_out) *leaves_out = leaves;
    if (keep) keep->backward(y);
    return y.item();
}

}  // namespace detail_gc

inline GradCheckReport grad_check(
    const GradCheckFn& f, std::vector<std::pair<std::string, TensorData<double>>> params,
    double step = 1e-5, double tol = 1e-4) {
    if (!(step > 0)) throw ShapeError("grad_check: step must be positive");
    (void)tol;

    // Determinism gate: two independent forward evaluations must agree bitwise.
    const double y_a = detail_gc::eval_scalar(f, params, false);
    const double y_b = detail_gc::eval_scalar(f, params, false);
    if (std::memcmp(&y_a, &y_b, sizeof(double)) != 0)
        throw NumericError("grad_check: non-deterministic objective (forward passes disagree)");

    Tape<double> tape;
    std::vector<Var<double>> leaves;
    detail_gc::eval_scalar(f, params, true, &tape, &leaves);

    GradCheckReport report;
    for (std::size_t p = 0; p < params.size(); ++p) {
        const TensorData<double> analytic = tape.grad(leaves[p]);
        GradCheckReport::Entry entry;
        entry.name = params[p].first;
        for (std::size_t i = 0; i < params[p].second.numel(); ++i) {
            const double orig = params[p].second.data[i];
            params[p].second.data[i] = orig + step;
            const double fp = detail_gc::eval_scalar(f, params, false);
            params[p].second.data[i] = orig - step;
            const double fm = detail_gc::eval_scalar(f, params, false);
            params[p].second.data[i] = orig;
            const double fd = (fp - fm) / (2.0 * step);
            const double a = analytic.data[i];
            const double denom = std::max({std::abs(a), std::abs(fd), 1e-8});
            const double rel = std::abs(a - fd) / denom;
            if (rel >= entry.max_rel_err) {
                entry.max_rel_err = rel;
                entry.worst_index = i;
                entry.analytic = a;
                entry.numeric = fd;
            }
        }
        report.max_rel_err = std::max(report.max_rel_err, entry.max_rel_err);
        report.entries.push_back(std::move(entry));
    }
    return report;
}

}  // namespace m3net
