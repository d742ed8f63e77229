#ifndef GUIDANCE_LAB_MIXTURE_HPP
#define GUIDANCE_LAB_MIXTURE_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "guidance_lab/diffusion.hpp"
#include "guidance_lab/random.hpp"
#include "guidance_lab/vector_ops.hpp"

namespace glab {

struct MixtureComponent {
    double weight = 0.0;
    Vec mean;
    Vec var_diag;
    int label = 0;
};

/// Diagonal-covariance Gaussian mixture with one class label per component.
/// Labels must cover 0..L-1 without gaps.
class GaussianMixtureModel {
public:
    GaussianMixtureModel() = default;

    GaussianMixtureModel(std::size_t dim, std::vector<MixtureComponent> components)
        : dim_(dim), components_(std::move(components)) {
        validate();
    }

    std::size_t dim() const { return dim_; }
    std::size_t size() const { return components_.size(); }
    int num_labels() const { return num_labels_; }
    const std::vector<MixtureComponent>& components() const { return components_; }
    const MixtureComponent& operator[](std::size_t k) const { return components_[k]; }

private:
    void validate() {
        if (dim_ == 0) throw std::invalid_argument("mixture: dim must be positive");
        if (components_.empty()) throw std::invalid_argument("mixture: no components");
        double total = 0.0;
        std::set<int> labels;
        for (std::size_t k = 0; k < components_.size(); ++k) {
            const auto& c = components_[k];
            const std::string where = "mixture component " + std::to_string(k);
            if (!(c.weight > 0.0) || !std::isfinite(c.weight)) {
                throw std::invalid_argument(where + ": weight must be positive");
            }
            if (c.mean.size() != dim_ || c.var_diag.size() != dim_) {
                throw std::invalid_argument(where + ": mean/var_diag must have dim " +
                                            std::to_string(dim_));
            }
            require_finite(c.mean, "mixture mean");
            for (double v : c.var_diag) {
                if (!(v > 0.0) || !std::isfinite(v)) {
                    throw std::invalid_argument(where + ": variances must be positive");
                }
            }
            if (c.label < 0) throw std::invalid_argument(where + ": negative label");
            total += c.weight;
            labels.insert(c.label);
        }
        if (std::abs(total - 1.0) > 1e-9) {
            throw std::invalid_argument("mixture: weights sum to " + std::to_string(total) +
                                        ", expected 1");
        }
        num_labels_ = *labels.rbegin() + 1;
        if (static_cast<std::size_t>(num_labels_) != labels.size()) {
            throw std::invalid_argument("mixture: labels must be contiguous from 0");
        }
    }

    std::size_t dim_ = 0;
    std::vector<MixtureComponent> components_;
    int num_labels_ = 0;
};

/// d = 2, `n` unit-variance components evenly spaced on a circle of `radius`,
/// equal weights; adjacent pairs share a label (n / 2 labels).
inline GaussianMixtureModel ring_world(int n = 8, double radius = 4.0, int per_label = 2) {
    if (n < 2 || per_label < 1 || n % per_label != 0) {
        throw std::invalid_argument("ring_world: n must be a multiple of per_label");
    }
    std::vector<MixtureComponent> comps;
    for (int k = 0; k < n; ++k) {
        const double angle = 2.0 * std::numbers::pi * (k + 0.5) / n;
        comps.push_back({1.0 / n,
                         {radius * std::cos(angle), radius * std::sin(angle)},
                         {1.0, 1.0},
                         k / per_label});
    }
    return GaussianMixtureModel(2, std::move(comps));
}

/// Default experiment world: 8 modes on a radius-4 ring, 4 labels.
inline GaussianMixtureModel default_world() { return ring_world(8, 4.0, 2); }

inline void to_json(nlohmann::json& j, const GaussianMixtureModel& m) {
    nlohmann::json comps = nlohmann::json::array();
    for (const auto& c : m.components()) {
        comps.push_back({{"weight", c.weight},
                         {"mean", c.mean},
                         {"var_diag", c.var_diag},
                         {"label", c.label}});
    }
    j = nlohmann::json{{"dim", m.dim()}, {"components", comps}};
}

inline void from_json(const nlohmann::json& j, GaussianMixtureModel& m) {
    std::vector<MixtureComponent> comps;
    for (const auto& c : j.at("components")) {
        comps.push_back({c.at("weight").get<double>(), c.at("mean").get<Vec>(),
                         c.at("var_diag").get<Vec>(), c.at("label").get<int>()});
    }
    m = GaussianMixtureModel(j.at("dim").get<std::size_t>(), std::move(comps));
}

// ---------------------------------------------------------------------------
// Diffused marginals. Component k at noise level abar has mean sqrt(abar) mu_k
// and diagonal variance abar var_k + (1 - abar). Everything below works in
// log space.

namespace detail {

inline double diffused_var(double var, double abar) { return abar * var + (1.0 - abar); }

/// log w_k + log N(x; sqrt(abar) mu_k, diffused var_k)
inline double component_log_joint(const MixtureComponent& c, std::span<const double> x,
                                  double abar) {
    const double s = std::sqrt(abar);
    double acc = std::log(c.weight);
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double v = diffused_var(c.var_diag[i], abar);
        const double d = x[i] - s * c.mean[i];
        acc -= 0.5 * (d * d / v + std::log(2.0 * std::numbers::pi * v));
    }
    return acc;
}

/// Gradient of log N_k at x: -(x - sqrt(abar) mu_k) / var_k.
inline void component_score(const MixtureComponent& c, std::span<const double> x, double abar,
                            std::span<double> out) {
    const double s = std::sqrt(abar);
    for (std::size_t i = 0; i < x.size(); ++i) {
        out[i] = -(x[i] - s * c.mean[i]) / diffused_var(c.var_diag[i], abar);
    }
}

}  // namespace detail

inline Vec component_log_joints(const GaussianMixtureModel& m, std::span<const double> x,
                                double abar) {
    if (x.size() != m.dim()) throw std::invalid_argument("mixture: dimension mismatch");
    Vec out(m.size());
    for (std::size_t k = 0; k < m.size(); ++k) {
        out[k] = detail::component_log_joint(m[k], x, abar);
    }
    return out;
}

/// log q_abar(x), optionally restricted to components carrying `label`
/// (the restricted mixture is renormalized).
inline double mixture_log_density(const GaussianMixtureModel& m, std::span<const double> x,
                                  double abar, std::optional<int> label = std::nullopt) {
    const Vec lj = component_log_joints(m, x, abar);
    if (!label) return log_sum_exp(lj);
    Vec sel;
    double wsum = 0.0;
    for (std::size_t k = 0; k < m.size(); ++k) {
        if (m[k].label == *label) {
            sel.push_back(lj[k]);
            wsum += m[k].weight;
        }
    }
    if (sel.empty()) throw std::invalid_argument("mixture: unknown label");
    return log_sum_exp(sel) - std::log(wsum);
}

/// Component responsibilities, optionally restricted to one label.
inline Vec responsibilities(const GaussianMixtureModel& m, std::span<const double> x, double abar,
                            std::optional<int> label = std::nullopt) {
    Vec lj = component_log_joints(m, x, abar);
    if (label) {
        for (std::size_t k = 0; k < m.size(); ++k) {
            if (m[k].label != *label) lj[k] = -INFINITY;
        }
    }
    const double lse = log_sum_exp(lj);
    if (!std::isfinite(lse)) throw std::invalid_argument("mixture: unknown label");
    for (double& v : lj) v = std::exp(v - lse);
    return lj;
}

/// grad_x log q_abar(x) (optionally of the label-restricted mixture).
inline Vec mixture_score(const GaussianMixtureModel& m, std::span<const double> x, double abar,
                         std::optional<int> label = std::nullopt) {
    const Vec r = responsibilities(m, x, abar, label);
    Vec out(x.size(), 0.0);
    Vec tmp(x.size());
    for (std::size_t k = 0; k < m.size(); ++k) {
        if (r[k] == 0.0) continue;
        detail::component_score(m[k], x, abar, tmp);
        axpy(r[k], tmp, out);
    }
    return out;
}

/// Optimal noise predictor eps*(x_t, t) = -sqrt(1 - abar_t) grad log q_t(x_t).
/// With a label, the class-conditional predictor eps*(x_t, c, t).
inline Vec analytic_eps(std::span<const double> x_t, int t, const GaussianMixtureModel& m,
                        const NoiseSchedule& sched, std::optional<int> label = std::nullopt) {
    sched.require_timestep(t, "analytic_eps");
    const double abar = sched.alpha_bar(t);
    Vec s = mixture_score(m, x_t, abar, label);
    const double c = -std::sqrt(1.0 - abar);
    for (double& v : s) v *= c;
    return s;
}

/// log p(y | x) for every label under the mixture diffused to `abar`.
inline Vec label_log_posterior(const GaussianMixtureModel& m, std::span<const double> x,
                               double abar) {
    const Vec lj = component_log_joints(m, x, abar);
    const double total = log_sum_exp(lj);
    Vec out(static_cast<std::size_t>(m.num_labels()));
    Vec bucket;
    for (int y = 0; y < m.num_labels(); ++y) {
        bucket.clear();
        for (std::size_t k = 0; k < m.size(); ++k) {
            if (m[k].label == y) bucket.push_back(lj[k]);
        }
        out[static_cast<std::size_t>(y)] = log_sum_exp(bucket) - total;
    }
    return out;
}

inline void require_classifier_timestep(int t, const NoiseSchedule& sched) {
    if (t < 0 || t > sched.total_steps()) {
        throw std::out_of_range("classifier: timestep " + std::to_string(t) + " outside [0, " +
                                std::to_string(sched.total_steps()) + "]");
    }
}

/// Label posterior p(y | x_t); t = 0 uses the base mixture.
inline Vec classifier_posterior(std::span<const double> x_t, int t, const GaussianMixtureModel& m,
                                const NoiseSchedule& sched) {
    require_classifier_timestep(t, sched);
    Vec lp = label_log_posterior(m, x_t, sched.alpha_bar(t));
    for (double& v : lp) v = std::exp(v);
    return lp;
}

/// grad_x log p(y | x_t): label-restricted score minus full-mixture score.
inline Vec classifier_grad(std::span<const double> x_t, int t, int y,
                           const GaussianMixtureModel& m, const NoiseSchedule& sched) {
    require_classifier_timestep(t, sched);
    if (y < 0 || y >= m.num_labels()) throw std::invalid_argument("classifier_grad: bad label");
    const double abar = sched.alpha_bar(t);
    Vec g = mixture_score(m, x_t, abar, y);
    const Vec full = mixture_score(m, x_t, abar);
    axpy(-1.0, full, g);
    return g;
}

struct MixtureDraw {
    Vec x;
    std::size_t component;
};

inline MixtureDraw sample_mixture(const GaussianMixtureModel& m, ChainRng& rng) {
    double u = rng.uniform();
    std::size_t k = 0;
    for (; k + 1 < m.size(); ++k) {
        if (u < m[k].weight) break;
        u -= m[k].weight;
    }
    Vec x(m.dim());
    for (std::size_t i = 0; i < x.size(); ++i) {
        x[i] = m[k].mean[i] + std::sqrt(m[k].var_diag[i]) * rng.normal();
    }
    return {std::move(x), k};
}

inline int argmax_label(std::span<const double> scores) {
    return static_cast<int>(std::max_element(scores.begin(), scores.end()) - scores.begin());
}

/// Fraction of clean draws from `truth` whose label `clf` (at t = 0) gets right.
inline double clean_accuracy(const GaussianMixtureModel& clf, const GaussianMixtureModel& truth,
                             std::size_t n, std::uint64_t seed) {
    ChainRng rng(seed);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const auto draw = sample_mixture(truth, rng);
        const Vec lp = label_log_posterior(clf, draw.x, 1.0);
        if (argmax_label(lp) == truth[draw.component].label) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(n);
}

/// Thrown when a perturbed classifier drifts too far from the original.
class OffClassifierError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct OffClassifierCheck {
    std::size_t samples = 10000;
    double max_accuracy_gap = 0.02;
};

/// Held-out classifier with the same form but different parameters: means
/// jittered by delta * (per-axis std) * N(0, 1), weights multiplied by
/// exp(delta * N(0, 1)) and renormalized. The clean-data accuracy of the
/// result must stay within `check.max_accuracy_gap` of the original.
inline GaussianMixtureModel make_off_classifier(const GaussianMixtureModel& m, double delta,
                                                std::uint64_t seed,
                                                OffClassifierCheck check = {}) {
    if (!(delta >= 0.0) || !std::isfinite(delta)) {
        throw std::invalid_argument("off classifier: delta must be >= 0");
    }
    if (delta == 0.0) return m;
    ChainRng rng(seed);
    std::vector<MixtureComponent> comps = m.components();
    double total = 0.0;
    for (auto& c : comps) {
        for (std::size_t i = 0; i < c.mean.size(); ++i) {
            c.mean[i] += delta * std::sqrt(c.var_diag[i]) * rng.normal();
        }
        c.weight *= std::exp(delta * rng.normal());
        total += c.weight;
    }
    for (auto& c : comps) c.weight /= total;
    GaussianMixtureModel off(m.dim(), std::move(comps));

    const std::uint64_t eval_seed = splitmix64(seed ^ 0xacc0acc0ULL);
    const double on_acc = clean_accuracy(m, m, check.samples, eval_seed);
    const double off_acc = clean_accuracy(off, m, check.samples, eval_seed);
    if (std::abs(on_acc - off_acc) > check.max_accuracy_gap) {
        throw OffClassifierError("off classifier: clean accuracy " + std::to_string(off_acc) +
                                 " vs " + std::to_string(on_acc) + " exceeds the allowed gap; " +
                                 "reduce delta");
    }
    return off;
}

// ---------------------------------------------------------------------------
// Adapters exposing the testbed through the sampler's model/classifier
// interfaces. They hold non-owning references; the mixture and schedule must
// outlive them.

class MixtureNoiseModel {
public:
    MixtureNoiseModel(const GaussianMixtureModel& mixture, const NoiseSchedule& sched)
        : mixture_(&mixture), sched_(&sched) {}

    Vec eps(std::span<const double> x_t, int t) const {
        return analytic_eps(x_t, t, *mixture_, *sched_);
    }
    Vec eps(std::span<const double> x_t, int t, int label) const {
        return analytic_eps(x_t, t, *mixture_, *sched_, label);
    }

private:
    const GaussianMixtureModel* mixture_;
    const NoiseSchedule* sched_;
};

class MixtureClassifier {
public:
    MixtureClassifier(const GaussianMixtureModel& mixture, const NoiseSchedule& sched)
        : mixture_(&mixture), sched_(&sched) {}

    int num_labels() const { return mixture_->num_labels(); }

    Vec log_posterior(std::span<const double> x_t, int t) const {
        require_classifier_timestep(t, *sched_);
        return label_log_posterior(*mixture_, x_t, sched_->alpha_bar(t));
    }
    Vec grad_log_prob(std::span<const double> x_t, int t, int y) const {
        return classifier_grad(x_t, t, y, *mixture_, *sched_);
    }

    const GaussianMixtureModel& mixture() const { return *mixture_; }

private:
    const GaussianMixtureModel* mixture_;
    const NoiseSchedule* sched_;
};

}  // namespace glab

#endif  // GUIDANCE_LAB_MIXTURE_HPP
