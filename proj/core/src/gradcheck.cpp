#include "img2st/gradcheck.hpp"

#include <cmath>
#include <stdexcept>
#include <thread>

namespace img2st {

namespace {

long double probe(const ScalarClosure& closure, std::vector<TensorD>& params, std::size_t pi,
                  std::size_t ei, double delta) {
    const double saved = params[pi].data[ei];
    params[pi].data[ei] = saved + delta;
    const long double v = closure(params);
    params[pi].data[ei] = saved;
    if (!std::isfinite(static_cast<double>(v))) {
        throw std::runtime_error("gradcheck: closure returned non-finite value during probe");
    }
    return v;
}

double numeric_derivative(const ScalarClosure& closure, std::vector<TensorD>& params,
                          std::size_t pi, std::size_t ei, double eps, int order) {
    if (order == 4) {
        const long double fm2 = probe(closure, params, pi, ei, -2.0 * eps);
        const long double fm1 = probe(closure, params, pi, ei, -eps);
        const long double fp1 = probe(closure, params, pi, ei, eps);
        const long double fp2 = probe(closure, params, pi, ei, 2.0 * eps);
        return static_cast<double>((fm2 - 8.0L * fm1 + 8.0L * fp1 - fp2) / (12.0L * eps));
    }
    const long double fm = probe(closure, params, pi, ei, -eps);
    const long double fp = probe(closure, params, pi, ei, eps);
    return static_cast<double>((fp - fm) / (2.0L * eps));
}

}  // namespace

std::vector<GradCheckReport> gradcheck_multi(const ScalarClosure& closure,
                                             const std::vector<TensorD>& params,
                                             const std::vector<const std::vector<TensorD>*>& analytic_sets,
                                             double epsilon, const GradCheckOptions& opts) {
    if (epsilon <= 0.0) throw std::invalid_argument("gradcheck: epsilon must be > 0");
    if (opts.stencil_order != 2 && opts.stencil_order != 4) {
        throw std::invalid_argument("gradcheck: stencil order must be 2 or 4");
    }
    if (analytic_sets.empty()) throw std::invalid_argument("gradcheck: no analytic gradients given");
    for (const auto* set : analytic_sets) {
        if (set->size() != params.size()) {
            throw std::invalid_argument("gradcheck: one analytic gradient per parameter required");
        }
        for (std::size_t i = 0; i < params.size(); ++i) {
            if ((*set)[i].shape != params[i].shape) {
                throw std::invalid_argument("gradcheck: gradient shape mismatch at parameter " +
                                            std::to_string(i));
            }
        }
    }
    {
        const long double base = closure(params);
        if (!std::isfinite(static_cast<double>(base))) {
            throw std::runtime_error("gradcheck: closure returned non-finite value");
        }
    }

    struct Job {
        std::size_t param;
        std::size_t elem;
    };
    std::vector<Job> jobs;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        for (std::size_t ei = 0; ei < params[pi].data.size(); ++ei) jobs.push_back({pi, ei});
    }

    const int nthreads = std::max(1, opts.threads);
    const std::size_t nsets = analytic_sets.size();
    std::vector<std::vector<GradCheckReport>> partial(static_cast<std::size_t>(nthreads),
                                                      std::vector<GradCheckReport>(nsets));
    std::vector<std::exception_ptr> errors(static_cast<std::size_t>(nthreads));

    auto worker = [&](int tid) {
        try {
            std::vector<TensorD> local = params;  // private copy; probes restore in place
            auto& reps = partial[static_cast<std::size_t>(tid)];
            for (std::size_t j = static_cast<std::size_t>(tid); j < jobs.size();
                 j += static_cast<std::size_t>(nthreads)) {
                const auto [pi, ei] = jobs[j];
                const double numeric =
                    numeric_derivative(closure, local, pi, ei, epsilon, opts.stencil_order);
                for (std::size_t s = 0; s < nsets; ++s) {
                    const double analytic = (*analytic_sets[s])[pi].data[ei];
                    const double denom = std::max({std::fabs(analytic), std::fabs(numeric), 1e-8});
                    const double rel = std::fabs(analytic - numeric) / denom;
                    if (rel > reps[s].max_rel_error) {
                        reps[s] = {rel, pi, ei, analytic, numeric};
                    }
                }
            }
        } catch (...) {
            errors[static_cast<std::size_t>(tid)] = std::current_exception();
        }
    };

    if (nthreads == 1) {
        worker(0);
    } else {
        std::vector<std::thread> pool;
        pool.reserve(static_cast<std::size_t>(nthreads));
        for (int t = 0; t < nthreads; ++t) pool.emplace_back(worker, t);
        for (auto& th : pool) th.join();
    }
    for (auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }

    std::vector<GradCheckReport> best(nsets);
    for (const auto& reps : partial) {
        for (std::size_t s = 0; s < nsets; ++s) {
            if (reps[s].max_rel_error > best[s].max_rel_error) best[s] = reps[s];
        }
    }
    return best;
}

GradCheckReport gradcheck(const ScalarClosure& closure, const std::vector<TensorD>& params,
                          const std::vector<TensorD>& analytic_grads, double epsilon,
                          const GradCheckOptions& opts) {
    return gradcheck_multi(closure, params, {&analytic_grads}, epsilon, opts)[0];
}

}  // namespace img2st
