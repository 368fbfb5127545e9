#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "comln/memory.hpp"

namespace comln {

// A named, shaped view onto a contiguous range of a FlatState.
struct Segment {
    std::string name;
    std::vector<std::size_t> shape;
    std::size_t offset = 0;

    std::size_t size() const noexcept;
};

// Flat vector of 64-bit reals with an ordered list of named segments.
class FlatState {
public:
    FlatState() = default;

    // Appends a zero-initialized segment. Throws std::invalid_argument on a
    // duplicate name.
    FlatState& add_segment(std::string name, std::vector<std::size_t> shape);

    std::size_t size() const noexcept { return values_.size(); }
    const std::vector<Segment>& layout() const noexcept { return layout_; }

    std::span<double> values() noexcept { return values_; }
    std::span<const double> values() const noexcept { return values_; }

    std::span<double> segment(const std::string& name);
    std::span<const double> segment(const std::string& name) const;
    bool has_segment(const std::string& name) const noexcept;

    bool all_finite() const noexcept;

    // Same layout, same values.
    bool operator==(const FlatState& other) const;

private:
    const Segment& find(const std::string& name) const;

    Buffer values_;
    std::vector<Segment> layout_;
};

enum class Method { euler, rk4, dopri5 };

Method parse_method(const std::string& name);
std::string to_string(Method method);

struct SolverConfig {
    Method method = Method::dopri5;
    double fixed_step = 0.01;  // euler / rk4
    double rtol = 1e-6;        // dopri5
    double atol = 1e-8;        // dopri5
    std::size_t max_evals = 1'000'000;

    void validate() const;
};

struct StepStats {
    std::size_t rhs_evals = 0;
    std::size_t accepted_steps = 0;
    std::size_t rejected_steps = 0;

    bool operator==(const StepStats&) const = default;
};

class SolverError : public std::runtime_error {
public:
    enum class Kind { budget_exceeded, non_finite_state, step_underflow, invalid_argument };

    SolverError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
    Kind kind() const noexcept { return kind_; }

private:
    Kind kind_;
};

// Writes dy/dt at (t, y) into dydt. Must not keep state between calls.
using RhsFunction = std::function<void(double t, std::span<const double> y, std::span<double> dydt)>;

struct IntegrationResult {
    FlatState state;
    StepStats stats;
};

// Integrates dy/dt = rhs(t, y) from t0 to t1 (t1 >= t0).
//
// Fixed-step methods take ceil((t1 - t0) / fixed_step) steps, the last one
// shortened to land exactly on t1. dopri5 is the Dormand-Prince 5(4) pair with
// FSAL; a step is accepted when the RMS of err_i / (atol + rtol * max(|y_i|,
// |y_new_i|)) is at most 1.
IntegrationResult integrate(const RhsFunction& rhs, const FlatState& y0, double t0, double t1,
                            const SolverConfig& config);

// Number of fixed steps used to cover [t0, t1] with the given step size.
std::size_t fixed_step_count(double t0, double t1, double step);

} // namespace comln
