#pragma once

#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "tss/tensor.hpp"

namespace tss {

struct GradReport {
    std::string op_name;
    double max_rel_error = 0.0;
    std::vector<double> per_input_errors;
    bool passed = false;
    std::string note;  // set when the checked function threw
};

using ScalarFn = std::function<Tensor(const std::vector<Tensor>&)>;

// Compares reverse-mode gradients of a scalar function against central finite
// differences (step h on 64-bit values). Relative error denominator is
// max(|analytic|, |numeric|, 1e-8).
inline GradReport grad_check(const std::string& op_name, const ScalarFn& fn,
                             const std::vector<Tensor>& inputs, double tol, double h = 1e-5) {
    if (tol <= 0) throw ArgumentError("grad_check: tol must be positive");
    GradReport report;
    report.op_name = op_name;
    try {
        std::vector<Tensor> probe;
        probe.reserve(inputs.size());
        for (const auto& in : inputs) probe.push_back(in.clone(true));
        Tensor loss = fn(probe);
        if (loss.numel() != 1) throw ArgumentError("grad_check: fn must return a scalar");
        backward(loss);

        report.per_input_errors.assign(inputs.size(), 0.0);
        for (size_t k = 0; k < probe.size(); ++k) {
            const std::vector<double>& analytic = probe[k].grad();
            double worst = 0.0;
            for (int64_t j = 0; j < probe[k].numel(); ++j) {
                std::vector<Tensor> shifted;
                shifted.reserve(inputs.size());
                for (const auto& in : inputs) shifted.push_back(in.clone(false));
                shifted[k].mutable_value()[static_cast<size_t>(j)] += h;
                double up = fn(shifted).item();
                shifted[k].mutable_value()[static_cast<size_t>(j)] -= 2 * h;
                double down = fn(shifted).item();
                double numeric = (up - down) / (2 * h);
                double a = analytic.empty() ? 0.0 : analytic[static_cast<size_t>(j)];
                double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
                worst = std::max(worst, std::abs(a - numeric) / denom);
            }
            report.per_input_errors[k] = worst;
            report.max_rel_error = std::max(report.max_rel_error, worst);
        }
        report.passed = report.max_rel_error <= tol;
    } catch (const std::exception& e) {
        report.passed = false;
        report.max_rel_error = std::numeric_limits<double>::infinity();
        report.note = std::string("check failed with exception: ") + e.what();
    }
    return report;
}

}  // namespace tss
