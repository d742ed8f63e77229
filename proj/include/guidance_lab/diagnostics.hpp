#ifndef GUIDANCE_LAB_DIAGNOSTICS_HPP
#define GUIDANCE_LAB_DIAGNOSTICS_HPP

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstdio>
#include <map>
#include <optional>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "guidance_lab/guidance.hpp"
#include "guidance_lab/mixture.hpp"
#include "guidance_lab/vector_ops.hpp"

namespace glab {

template <class C>
concept ScoringClassifier = requires(const C& c, std::span<const double> x, int t) {
    { c.log_posterior(x, t) } -> std::convertible_to<Vec>;
};

/// Per-step observation of one chain. Losses are evaluated on x_t itself.
struct StepTrace {
    int chain = 0;
    int t = 0;
    double on_loss = 0.0;   // -log p_on(y | x_t)
    double off_loss = 0.0;  // -log p_off(y | x_t)
    bool guided = false;
    std::optional<double> grad_norm;
    std::size_t grad_evals = 0;

    bool operator==(const StepTrace&) const = default;
};

inline double label_loss(std::span<const double> log_post, int y) {
    return std::max(0.0, -log_post[static_cast<std::size_t>(y)]);
}

template <ScoringClassifier OnClf, ScoringClassifier OffClf>
StepTrace record_step(std::span<const double> x_t, int t, int y, const OnClf& on_clf,
                      const OffClf& off_clf, const GuidanceState& gstate, bool guided = false,
                      std::optional<double> grad_norm = std::nullopt, int chain = 0) {
    StepTrace tr;
    tr.chain = chain;
    tr.t = t;
    tr.on_loss = label_loss(on_clf.log_posterior(x_t, t), y);
    tr.off_loss = label_loss(off_clf.log_posterior(x_t, t), y);
    tr.guided = guided;
    tr.grad_norm = grad_norm;
    tr.grad_evals = gstate.grad_evals;
    return tr;
}

struct GradDiff {
    int t;         // later of the two evaluation timesteps
    double delta;  // ||g(t)|| - ||g(previous evaluation)||
};

/// Differences between consecutive gradient norms of one chain, ordered by
/// descending t. Steps without a gradient evaluation are skipped.
inline std::vector<GradDiff> grad_magnitude_diff(std::span<const StepTrace> traces) {
    std::vector<std::pair<int, double>> evals;
    for (const auto& tr : traces) {
        if (tr.grad_norm) evals.emplace_back(tr.t, *tr.grad_norm);
    }
    if (evals.size() < 2) {
        throw std::invalid_argument("grad_magnitude_diff: need at least 2 gradient evaluations");
    }
    std::sort(evals.begin(), evals.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
    std::vector<GradDiff> out;
    out.reserve(evals.size() - 1);
    for (std::size_t i = 1; i < evals.size(); ++i) {
        out.push_back({evals[i].first, evals[i].second - evals[i - 1].second});
    }
    return out;
}

/// End-of-run metrics.
///
/// mean_nll stands in for FID (sample quality), `diversity` (normalized
/// entropy of Bayes-assigned components) for Recall, and `precision_proxy`
/// (share of samples within Mahalanobis radius 3 of some component) for
/// Precision. These are analogs, not equivalents.
struct RunSummary {
    double on_acc = 0.0;
    double off_acc = 0.0;
    double fitting_gap = 0.0;
    double mean_nll = 0.0;
    double diversity = 0.0;
    double precision_proxy = 0.0;
    std::size_t grad_evals = 0;  // per chain
    std::size_t num_samples = 0;
    double wall_time = 0.0;
};

inline void to_json(nlohmann::json& j, const RunSummary& s) {
    j = nlohmann::json{{"on_acc", s.on_acc},
                       {"off_acc", s.off_acc},
                       {"fitting_gap", s.fitting_gap},
                       {"mean_nll", s.mean_nll},
                       {"diversity", s.diversity},
                       {"precision_proxy", s.precision_proxy},
                       {"grad_evals", s.grad_evals},
                       {"num_samples", s.num_samples},
                       {"wall_time", s.wall_time}};
}

/// Order-independent sum (sorted before accumulation).
inline double sorted_sum(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    double acc = 0.0;
    for (double x : v) acc += x;
    return acc;
}

/// Normalized entropy of component-assignment counts, in [0, 1].
inline double normalized_entropy(std::span<const std::size_t> counts) {
    if (counts.size() < 2) return 0.0;
    std::size_t total = 0;
    for (auto c : counts) total += c;
    if (total == 0) return 0.0;
    double h = 0.0;
    for (auto c : counts) {
        if (c == 0) continue;
        const double p = static_cast<double>(c) / static_cast<double>(total);
        h -= p * std::log(p);
    }
    return std::clamp(h / std::log(static_cast<double>(counts.size())), 0.0, 1.0);
}

inline bool within_mahalanobis(const GaussianMixtureModel& m, std::span<const double> x,
                               double radius) {
    for (const auto& c : m.components()) {
        double d2 = 0.0;
        for (std::size_t i = 0; i < x.size(); ++i) {
            const double d = x[i] - c.mean[i];
            d2 += d * d / c.var_diag[i];
        }
        if (d2 <= radius * radius) return true;
    }
    return false;
}

/// Metrics over final samples `x0[i]` with target labels `labels[i]`.
/// Classifiers are queried at t = 0.
template <ScoringClassifier OnClf, ScoringClassifier OffClf>
RunSummary summarize(std::span<const Vec> samples, std::span<const int> labels,
                     const GaussianMixtureModel& truth, const OnClf& on_clf,
                     const OffClf& off_clf, std::size_t grad_evals = 0) {
    if (samples.empty()) throw std::invalid_argument("summarize: no samples");
    if (samples.size() != labels.size()) {
        throw std::invalid_argument("summarize: samples and labels differ in length");
    }
    RunSummary s;
    s.num_samples = samples.size();
    s.grad_evals = grad_evals;
    std::size_t on_ok = 0, off_ok = 0, precise = 0;
    std::vector<std::size_t> counts(truth.size(), 0);
    std::vector<double> nll;
    nll.reserve(samples.size());
    for (std::size_t i = 0; i < samples.size(); ++i) {
        const Vec& x = samples[i];
        if (argmax_label(on_clf.log_posterior(x, 0)) == labels[i]) ++on_ok;
        if (argmax_label(off_clf.log_posterior(x, 0)) == labels[i]) ++off_ok;
        const Vec lj = component_log_joints(truth, x, 1.0);
        nll.push_back(-log_sum_exp(lj));
        ++counts[static_cast<std::size_t>(std::max_element(lj.begin(), lj.end()) - lj.begin())];
        if (within_mahalanobis(truth, x, 3.0)) ++precise;
    }
    const double n = static_cast<double>(samples.size());
    s.on_acc = static_cast<double>(on_ok) / n;
    s.off_acc = static_cast<double>(off_ok) / n;
    s.fitting_gap = s.on_acc - s.off_acc;
    s.mean_nll = sorted_sum(std::move(nll)) / n;
    s.diversity = normalized_entropy(counts);
    s.precision_proxy = static_cast<double>(precise) / n;
    return s;
}

/// Shortest round-trip decimal for a double.
inline std::string format_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

inline constexpr const char* kTraceCsvHeader = "chain,t,on_loss,off_loss,guided,grad_norm,grad_evals";

inline void write_trace_csv(std::ostream& os, std::span<const StepTrace> traces) {
    os << kTraceCsvHeader << '\n';
    for (const auto& tr : traces) {
        os << tr.chain << ',' << tr.t << ',' << format_double(tr.on_loss) << ','
           << format_double(tr.off_loss) << ',' << (tr.guided ? 1 : 0) << ','
           << (tr.grad_norm ? format_double(*tr.grad_norm) : std::string()) << ','
           << tr.grad_evals << '\n';
    }
}

/// Batch mean of a per-step quantity, keyed by t (descending iteration order
/// is the caller's choice).
template <class Field>
std::map<int, double> batch_mean_by_t(std::span<const StepTrace> traces, Field field) {
    std::map<int, std::pair<double, std::size_t>> acc;
    for (const auto& tr : traces) {
        auto& [sum, n] = acc[tr.t];
        sum += field(tr);
        ++n;
    }
    std::map<int, double> out;
    for (const auto& [t, sn] : acc) out[t] = sn.first / static_cast<double>(sn.second);
    return out;
}

}  // namespace glab

#endif  // GUIDANCE_LAB_DIAGNOSTICS_HPP
