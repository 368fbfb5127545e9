#include "comln/solver.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace comln {

std::size_t Segment::size() const noexcept {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

FlatState& FlatState::add_segment(std::string name, std::vector<std::size_t> shape) {
    if (has_segment(name))
        throw std::invalid_argument("FlatState: duplicate segment '" + name + "'");
    Segment seg{std::move(name), std::move(shape), values_.size()};
    values_.resize(values_.size() + seg.size(), 0.0);
    layout_.push_back(std::move(seg));
    return *this;
}

const Segment& FlatState::find(const std::string& name) const {
    for (const auto& seg : layout_)
        if (seg.name == name)
            return seg;
    throw std::out_of_range("FlatState: no segment '" + name + "'");
}

bool FlatState::has_segment(const std::string& name) const noexcept {
    return std::any_of(layout_.begin(), layout_.end(),
                       [&](const Segment& s) { return s.name == name; });
}

std::span<double> FlatState::segment(const std::string& name) {
    const Segment& seg = find(name);
    return std::span<double>(values_).subspan(seg.offset, seg.size());
}

std::span<const double> FlatState::segment(const std::string& name) const {
    const Segment& seg = find(name);
    return std::span<const double>(values_).subspan(seg.offset, seg.size());
}

bool FlatState::all_finite() const noexcept {
    return std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); });
}

bool FlatState::operator==(const FlatState& other) const {
    if (layout_.size() != other.layout_.size() || values_ != other.values_)
        return false;
    for (std::size_t i = 0; i < layout_.size(); ++i) {
        const auto& a = layout_[i];
        const auto& b = other.layout_[i];
        if (a.name != b.name || a.shape != b.shape || a.offset != b.offset)
            return false;
    }
    return true;
}

Method parse_method(const std::string& name) {
    if (name == "euler") return Method::euler;
    if (name == "rk4") return Method::rk4;
    if (name == "dopri5") return Method::dopri5;
    throw std::invalid_argument("unknown solver method '" + name + "'");
}

std::string to_string(Method method) {
    switch (method) {
    case Method::euler: return "euler";
    case Method::rk4: return "rk4";
    case Method::dopri5: return "dopri5";
    }
    return "unknown";
}

void SolverConfig::validate() const {
    if (max_evals < 1)
        throw SolverError(SolverError::Kind::invalid_argument, "max_evals must be >= 1");
    if (method == Method::dopri5) {
        if (!(rtol > 0) || !(atol > 0))
            throw SolverError(SolverError::Kind::invalid_argument, "rtol and atol must be positive");
    } else if (!(fixed_step > 0)) {
        throw SolverError(SolverError::Kind::invalid_argument, "fixed_step must be positive");
    }
}

std::size_t fixed_step_count(double t0, double t1, double step) {
    const double span = t1 - t0;
    if (span <= 0)
        return 0;
    // Absorb rounding in span / step so that T = K * step gives exactly K steps.
    const double ratio = span / step;
    auto n = static_cast<std::size_t>(std::ceil(ratio * (1.0 - 1e-12)));
    return std::max<std::size_t>(n, 1);
}

namespace {

bool finite(std::span<const double> v) {
    return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

// Wraps the user rhs with evaluation accounting and finiteness checks.
class Evaluator {
public:
    Evaluator(const RhsFunction& rhs, std::size_t max_evals, StepStats& stats)
        : rhs_(rhs), max_evals_(max_evals), stats_(stats) {}

    void operator()(double t, std::span<const double> y, std::span<double> dydt) {
        if (stats_.rhs_evals + 1 > max_evals_) {
            std::ostringstream msg;
            msg << "evaluation budget exceeded (max_evals = " << max_evals_ << ", t = " << t << ")";
            throw SolverError(SolverError::Kind::budget_exceeded, msg.str());
        }
        ++stats_.rhs_evals;
        rhs_(t, y, dydt);
        if (!finite(dydt)) {
            std::ostringstream msg;
            msg << "non-finite derivative at t = " << t;
            throw SolverError(SolverError::Kind::non_finite_state, msg.str());
        }
    }

private:
    const RhsFunction& rhs_;
    std::size_t max_evals_;
    StepStats& stats_;
};

void check_state(std::span<const double> y, double t) {
    if (!finite(y)) {
        std::ostringstream msg;
        msg << "non-finite state at t = " << t;
        throw SolverError(SolverError::Kind::non_finite_state, msg.str());
    }
}

void integrate_fixed(Evaluator& f, Method method, std::span<double> y, double t0, double t1,
                     double step, StepStats& stats) {
    const std::size_t n = y.size();
    const std::size_t nsteps = fixed_step_count(t0, t1, step);
    Buffer k1(n), k2, k3, k4, tmp;
    if (method == Method::rk4) {
        k2.resize(n);
        k3.resize(n);
        k4.resize(n);
        tmp.resize(n);
    }

    for (std::size_t s = 0; s < nsteps; ++s) {
        const double t = t0 + static_cast<double>(s) * step;
        const double h = (s + 1 == nsteps) ? t1 - t : step;
        if (method == Method::euler) {
            f(t, y, k1);
            for (std::size_t i = 0; i < n; ++i)
                y[i] += h * k1[i];
        } else {
            f(t, y, k1);
            for (std::size_t i = 0; i < n; ++i) tmp[i] = y[i] + 0.5 * h * k1[i];
            f(t + 0.5 * h, tmp, k2);
            for (std::size_t i = 0; i < n; ++i) tmp[i] = y[i] + 0.5 * h * k2[i];
            f(t + 0.5 * h, tmp, k3);
            for (std::size_t i = 0; i < n; ++i) tmp[i] = y[i] + h * k3[i];
            f(t + h, tmp, k4);
            for (std::size_t i = 0; i < n; ++i)
                y[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        check_state(y, t + h);
        ++stats.accepted_steps;
    }
}

// Dormand-Prince 5(4) tableau.
namespace dp {
constexpr double c2 = 1.0 / 5, c3 = 3.0 / 10, c4 = 4.0 / 5, c5 = 8.0 / 9;
constexpr double a21 = 1.0 / 5;
constexpr double a31 = 3.0 / 40, a32 = 9.0 / 40;
constexpr double a41 = 44.0 / 45, a42 = -56.0 / 15, a43 = 32.0 / 9;
constexpr double a51 = 19372.0 / 6561, a52 = -25360.0 / 2187, a53 = 64448.0 / 6561,
                 a54 = -212.0 / 729;
constexpr double a61 = 9017.0 / 3168, a62 = -355.0 / 33, a63 = 46732.0 / 5247, a64 = 49.0 / 176,
                 a65 = -5103.0 / 18656;
constexpr double b1 = 35.0 / 384, b3 = 500.0 / 1113, b4 = 125.0 / 192, b5 = -2187.0 / 6784,
                 b6 = 11.0 / 84;
// b - b_hat (5th minus embedded 4th order weights)
constexpr double e1 = 71.0 / 57600, e3 = -71.0 / 16695, e4 = 71.0 / 1920, e5 = -17253.0 / 339200,
                 e6 = 22.0 / 525, e7 = -1.0 / 40;

constexpr double safety = 0.9;
constexpr double min_factor = 0.2;
constexpr double max_factor = 5.0;
} // namespace dp

void integrate_dopri5(Evaluator& f, std::span<double> y, double t0, double t1, double rtol,
                      double atol, StepStats& stats) {
    const std::size_t n = y.size();
    const double span = t1 - t0;
    Buffer k1(n), k2(n), k3(n), k4(n), k5(n), k6(n), k7(n), tmp(n), ynew(n);

    double h = std::clamp(span / 100.0, std::min(1e-8, span), span);
    double t = t0;
    f(t, y, k1);

    while (t < t1) {
        bool last = false;
        if (t + h >= t1 || t1 - (t + h) <= 1e-14 * std::max(1.0, std::abs(t1))) {
            h = t1 - t;
            last = true;
        }
        if (h <= 1e-15 * std::max(1.0, std::abs(t))) {
            std::ostringstream msg;
            msg << "step size underflow at t = " << t;
            throw SolverError(SolverError::Kind::step_underflow, msg.str());
        }

        using namespace dp;
        for (std::size_t i = 0; i < n; ++i) tmp[i] = y[i] + h * a21 * k1[i];
        f(t + c2 * h, tmp, k2);
        for (std::size_t i = 0; i < n; ++i) tmp[i] = y[i] + h * (a31 * k1[i] + a32 * k2[i]);
        f(t + c3 * h, tmp, k3);
        for (std::size_t i = 0; i < n; ++i)
            tmp[i] = y[i] + h * (a41 * k1[i] + a42 * k2[i] + a43 * k3[i]);
        f(t + c4 * h, tmp, k4);
        for (std::size_t i = 0; i < n; ++i)
            tmp[i] = y[i] + h * (a51 * k1[i] + a52 * k2[i] + a53 * k3[i] + a54 * k4[i]);
        f(t + c5 * h, tmp, k5);
        for (std::size_t i = 0; i < n; ++i)
            tmp[i] = y[i] + h * (a61 * k1[i] + a62 * k2[i] + a63 * k3[i] + a64 * k4[i] + a65 * k5[i]);
        f(t + h, tmp, k6);
        for (std::size_t i = 0; i < n; ++i)
            ynew[i] = y[i] + h * (b1 * k1[i] + b3 * k3[i] + b4 * k4[i] + b5 * k5[i] + b6 * k6[i]);
        f(t + h, ynew, k7);

        double err_sq = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const double e =
                h * (e1 * k1[i] + e3 * k3[i] + e4 * k4[i] + e5 * k5[i] + e6 * k6[i] + e7 * k7[i]);
            const double scale = atol + rtol * std::max(std::abs(y[i]), std::abs(ynew[i]));
            err_sq += (e / scale) * (e / scale);
        }
        const double err = n > 0 ? std::sqrt(err_sq / static_cast<double>(n)) : 0.0;
        if (!std::isfinite(err))
            throw SolverError(SolverError::Kind::non_finite_state, "non-finite error estimate");

        const double factor =
            err == 0.0 ? max_factor
                       : std::clamp(safety * std::pow(err, -0.2), min_factor, max_factor);
        if (err <= 1.0) {
            t = last ? t1 : t + h;
            std::copy(ynew.begin(), ynew.end(), y.begin());
            std::swap(k1, k7);
            check_state(y, t);
            ++stats.accepted_steps;
            h *= factor;
        } else {
            ++stats.rejected_steps;
            h *= std::min(1.0, factor);
        }
    }
}

} // namespace

IntegrationResult integrate(const RhsFunction& rhs, const FlatState& y0, double t0, double t1,
                            const SolverConfig& config) {
    config.validate();
    if (!(t1 >= t0))
        throw SolverError(SolverError::Kind::invalid_argument, "integrate requires t1 >= t0");
    if (!y0.all_finite())
        throw SolverError(SolverError::Kind::non_finite_state, "non-finite initial state");

    IntegrationResult result{y0, {}};
    if (t1 == t0)
        return result;

    Evaluator f(rhs, config.max_evals, result.stats);
    std::span<double> y = result.state.values();
    if (config.method == Method::dopri5)
        integrate_dopri5(f, y, t0, t1, config.rtol, config.atol, result.stats);
    else
        integrate_fixed(f, config.method, y, t0, t1, config.fixed_step, result.stats);
    return result;
}

} // namespace comln
