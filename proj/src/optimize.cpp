#include "kronlvm/optimize.hpp"

#include "kronlvm/errors.hpp"

#include <cmath>
#include <deque>

namespace kronlvm {

namespace {

struct Eval {
    double value = 0.0;
    VectorXd grad;
    bool ok = false;
};

Eval evaluate(const Objective& f, const VectorXd& x) {
    Eval e;
    e.grad = VectorXd::Zero(x.size());
    try {
        e.value = f(x, e.grad);
    } catch (const NumericalError&) {
        return e;
    }
    e.ok = std::isfinite(e.value) && e.grad.allFinite();
    return e;
}

struct Pair {
    VectorXd s, y;
    double rho;
};

// Two-loop recursion for the descent direction of the minimization problem.
VectorXd lbfgs_direction(const std::deque<Pair>& hist, const VectorXd& g) {
    VectorXd q = g;
    std::vector<double> alpha(hist.size());
    for (std::size_t i = hist.size(); i-- > 0;) {
        alpha[i] = hist[i].rho * hist[i].s.dot(q);
        q -= alpha[i] * hist[i].y;
    }
    if (!hist.empty()) {
        const Pair& last = hist.back();
        q *= last.s.dot(last.y) / last.y.squaredNorm();
    }
    for (std::size_t i = 0; i < hist.size(); ++i) {
        const double beta = hist[i].rho * hist[i].y.dot(q);
        q += (alpha[i] - beta) * hist[i].s;
    }
    return -q;
}

}  // namespace

OptimizeResult maximize(const Objective& f, VectorXd x0, const OptimizerSettings& settings,
                        const IterationCallback& on_iteration) {
    OptimizeResult res;
    res.x = std::move(x0);
    Eval cur = evaluate(f, res.x);
    if (!cur.ok) throw NumericalError("optimizer: objective is not finite at the initial point");
    res.value = cur.value;
    if (res.x.size() == 0) {
        res.converged = true;
        res.status = "no free parameters";
        return res;
    }

    std::deque<Pair> hist;
    int small_changes = 0;
    for (int it = 1; it <= settings.max_iter; ++it) {
        const VectorXd g = -cur.grad;  // gradient of the minimized objective
        const double gnorm = g.norm();
        if (gnorm == 0.0) {
            res.converged = true;
            res.status = "zero gradient";
            break;
        }
        VectorXd d = lbfgs_direction(hist, g);
        double slope = g.dot(d);
        if (!(slope < 0.0)) {
            hist.clear();
            d = -g;
            slope = -gnorm * gnorm;
        }
        double step = hist.empty() ? std::min(1.0, 1.0 / gnorm) : 1.0;

        Eval next;
        VectorXd xn;
        bool accepted = false;
        for (int k = 0; k < settings.max_backtracks; ++k) {
            xn = res.x + step * d;
            next = evaluate(f, xn);
            if (next.ok && -next.value <= -cur.value + 1e-4 * step * slope) {
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if (!accepted) {
            if (!hist.empty()) {
                hist.clear();
                continue;
            }
            res.converged = true;
            res.status = "line search stalled";
            break;
        }

        Pair p{xn - res.x, (-next.grad) - g, 0.0};
        const double sy = p.s.dot(p.y);
        if (sy > 1e-10 * p.s.norm() * p.y.norm()) {
            p.rho = 1.0 / sy;
            hist.push_back(std::move(p));
            if (static_cast<int>(hist.size()) > settings.memory) hist.pop_front();
        }

        const double delta = next.value - cur.value;
        res.x = std::move(xn);
        cur = std::move(next);
        res.value = cur.value;
        res.iterations = it;

        IterationRecord rec{it, cur.value, cur.grad.norm(), step};
        res.log.push_back(rec);
        if (on_iteration) on_iteration(rec);

        small_changes = std::abs(delta) < settings.tol ? small_changes + 1 : 0;
        if (small_changes >= settings.patience) {
            res.converged = true;
            res.status = "objective change below tolerance";
            break;
        }
    }
    if (res.status.empty()) res.status = "iteration limit reached";
    return res;
}

}  // namespace kronlvm
