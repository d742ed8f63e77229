#ifndef GUIDANCE_LAB_GUIDANCE_HPP
#define GUIDANCE_LAB_GUIDANCE_HPP

#include <cmath>
#include <concepts>
#include <cstddef>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "guidance_lab/diffusion.hpp"
#include "guidance_lab/random.hpp"
#include "guidance_lab/schedule.hpp"
#include "guidance_lab/vector_ops.hpp"

namespace glab {

enum class GuidanceFamily { Classifier, ClassifierFree };

/// How the guidance term is spread over the schedule.
///   None      no guidance term
///   Vanilla   fresh gradient at every step (schedule must be full)
///   Skip      fresh gradient at schedule steps only, unit weight (ES / UG baselines)
///   Duplicate fresh gradient at schedule steps, cached gradient re-applied in between
///   Compress  fresh gradient at schedule steps, scaled by the gap it covers
enum class GuidanceMode { None, Vanilla, Skip, Duplicate, Compress };

inline std::string_view to_string(GuidanceFamily f) {
    return f == GuidanceFamily::Classifier ? "classifier" : "classifier_free";
}

inline GuidanceFamily guidance_family_from_string(std::string_view s) {
    if (s == "classifier") return GuidanceFamily::Classifier;
    if (s == "classifier_free" || s == "cfg") return GuidanceFamily::ClassifierFree;
    throw std::invalid_argument("unknown guidance family '" + std::string(s) + "'");
}

inline std::string_view to_string(GuidanceMode m) {
    switch (m) {
        case GuidanceMode::None: return "none";
        case GuidanceMode::Vanilla: return "vanilla";
        case GuidanceMode::Skip: return "skip";
        case GuidanceMode::Duplicate: return "duplicate";
        case GuidanceMode::Compress: return "compress";
    }
    return "?";
}

inline GuidanceMode guidance_mode_from_string(std::string_view s) {
    if (s == "none") return GuidanceMode::None;
    if (s == "vanilla") return GuidanceMode::Vanilla;
    if (s == "skip") return GuidanceMode::Skip;
    if (s == "duplicate") return GuidanceMode::Duplicate;
    if (s == "compress") return GuidanceMode::Compress;
    throw std::invalid_argument("unknown guidance mode '" + std::string(s) + "'");
}

struct GuidanceConfig {
    double scale = 0.0;  // s (classifier) or w (classifier-free)
    GuidanceMode mode = GuidanceMode::None;
    GuidanceFamily family = GuidanceFamily::Classifier;
    GuidanceSchedule schedule;
};

/// Cached guidance Gamma plus evaluation bookkeeping, local to one chain.
struct GuidanceState {
    std::optional<Vec> cached_grad;
    std::size_t grad_evals = 0;
    std::optional<int> last_guidance_t;
};

template <class M>
concept NoiseModel = requires(const M& m, std::span<const double> x, int t, int y) {
    { m.eps(x, t) } -> std::convertible_to<Vec>;
    { m.eps(x, t, y) } -> std::convertible_to<Vec>;
};

template <class C>
concept GuidanceClassifier = requires(const C& c, std::span<const double> x, int t, int y) {
    { c.grad_log_prob(x, t, y) } -> std::convertible_to<Vec>;
};

/// Placeholder classifier for classifier-free runs.
struct NullClassifier {
    Vec grad_log_prob(std::span<const double>, int, int) const {
        throw std::logic_error("classifier gradient requested from NullClassifier");
    }
};

/// A validated config with per-timestep lookups precomputed.
class GuidancePlan {
public:
    explicit GuidancePlan(GuidanceConfig cfg) : cfg_(std::move(cfg)) {
        if (!(cfg_.scale >= 0.0) || !std::isfinite(cfg_.scale)) {
            throw std::invalid_argument("guidance: scale must be finite and >= 0");
        }
        if (cfg_.mode == GuidanceMode::None) return;
        const auto& steps = cfg_.schedule.steps;
        if (steps.empty()) throw std::invalid_argument("guidance: empty schedule");
        const int T = cfg_.schedule.total_steps();
        if (cfg_.mode == GuidanceMode::Vanilla && steps.size() != static_cast<std::size_t>(T)) {
            throw std::invalid_argument("guidance: vanilla mode requires the full schedule");
        }
        if (cfg_.mode == GuidanceMode::Duplicate && steps.front() != T) {
            throw std::invalid_argument("guidance: duplicate mode requires the schedule to start at T");
        }
        weights_ = gap_weight_table(cfg_.schedule);
    }

    const GuidanceConfig& config() const { return cfg_; }
    int total_steps() const { return cfg_.schedule.total_steps(); }

    bool is_guidance_step(int t) const {
        if (cfg_.mode == GuidanceMode::None) return false;
        return t >= 0 && static_cast<std::size_t>(t) < weights_.size() &&
               weights_[static_cast<std::size_t>(t)] > 0;
    }

    /// Multiplier on the fresh term at a guidance step.
    double weight(int t) const {
        return cfg_.mode == GuidanceMode::Compress
                   ? static_cast<double>(weights_[static_cast<std::size_t>(t)])
                   : 1.0;
    }

private:
    GuidanceConfig cfg_;
    std::vector<int> weights_;
};

// ---------------------------------------------------------------------------
// Elementary step forms.

/// Classifier-guided ancestral step: mean + s sigma_t^2 grad, then + sigma_t z.
inline SampleState classifier_guided_step(const SampleState& state, std::span<const double> eps_hat,
                                          std::span<const double> grad_log_p, double scale,
                                          std::span<const double> z, const NoiseSchedule& sched) {
    require_finite(grad_log_p, "classifier_guided_step gradient");
    require_finite(eps_hat, "classifier_guided_step eps_hat");
    Vec mean = reverse_mean(state.x, eps_hat, state.t, sched);
    axpy(scale * sched.sigma_sq(state.t), grad_log_p, mean);
    return finish_step(std::move(mean), state.t, z, sched);
}

inline SampleState classifier_guided_step(const SampleState& state, std::span<const double> eps_hat,
                                          std::span<const double> grad_log_p, double scale,
                                          const NoiseSchedule& sched, ChainRng& rng) {
    const Vec z = rng.normal_vec(state.x.size());
    return classifier_guided_step(state, eps_hat, grad_log_p, scale, z, sched);
}

struct CfgEps {
    Vec eps;        // eps_cond + w * C
    Vec class_term; // C = eps_cond - eps_uncond
};

/// Classifier-free combination (1 + w) eps_cond - w eps_uncond, written as
/// eps_cond + w C so that C can be cached.
inline CfgEps cfg_eps(std::span<const double> eps_cond, std::span<const double> eps_uncond,
                      double w) {
    require_same_dim(eps_cond, eps_uncond, "cfg_eps");
    CfgEps out{Vec(eps_cond.begin(), eps_cond.end()), difference(eps_cond, eps_uncond)};
    axpy(w, out.class_term, out.eps);
    return out;
}

// ---------------------------------------------------------------------------
// Scheduled guidance.

struct StepOutcome {
    SampleState next;
    Vec eps_base;    // unguided noise prediction used at this step
    bool guided = false;
    std::optional<double> grad_norm;
};

/// One sampling step under any guidance mode. Consumes exactly the noise `z`
/// passed in, regardless of mode.
template <NoiseModel Model, GuidanceClassifier Classifier>
StepOutcome guided_step(const SampleState& state, int label, GuidanceState& gstate,
                        const Model& model, const Classifier& classifier,
                        const GuidancePlan& plan, const NoiseSchedule& sched,
                        std::span<const double> z) {
    const auto& cfg = plan.config();
    const int t = state.t;
    sched.require_timestep(t, "guided_step");
    const bool fresh = plan.is_guidance_step(t);
    const bool uses_cache = cfg.mode == GuidanceMode::Duplicate;

    StepOutcome out;
    auto refresh = [&](Vec g) {
        require_finite(g, "guidance gradient");
        out.grad_norm = norm(g);
        ++gstate.grad_evals;
        gstate.last_guidance_t = t;
        gstate.cached_grad = std::move(g);
    };

    if (cfg.family == GuidanceFamily::Classifier) {
        out.eps_base = model.eps(state.x, t);
        require_finite(out.eps_base, "model eps");
        Vec mean = reverse_mean(state.x, out.eps_base, t, sched);
        if (fresh) refresh(classifier.grad_log_prob(state.x, t, label));
        if (fresh || uses_cache) {
            if (!gstate.cached_grad) {
                throw std::logic_error("guidance: cached gradient used before first evaluation");
            }
            const double coef = cfg.scale * sched.sigma_sq(t) * (fresh ? plan.weight(t) : 1.0);
            axpy(coef, *gstate.cached_grad, mean);
            out.guided = true;
        }
        out.next = finish_step(std::move(mean), t, z, sched);
        return out;
    }

    out.eps_base = model.eps(state.x, t, label);
    require_finite(out.eps_base, "model eps");
    Vec eps = out.eps_base;
    if (fresh) {
        const Vec eps_uncond = model.eps(state.x, t);
        refresh(difference(out.eps_base, eps_uncond));
    }
    if (fresh || uses_cache) {
        if (!gstate.cached_grad) {
            throw std::logic_error("guidance: cached class term used before first evaluation");
        }
        const double coef = cfg.scale * (fresh ? plan.weight(t) : 1.0);
        axpy(coef, *gstate.cached_grad, eps);
        out.guided = true;
    }
    out.next = finish_step(reverse_mean(state.x, eps, t, sched), t, z, sched);
    return out;
}

/// Cached-gradient step (Duplicate or Compress). Draws one noise vector.
template <NoiseModel Model, GuidanceClassifier Classifier>
StepOutcome compress_guided_step(const SampleState& state, int label, GuidanceState& gstate,
                                 const Model& model, const Classifier& classifier,
                                 const GuidancePlan& plan, const NoiseSchedule& sched,
                                 ChainRng& rng) {
    const auto mode = plan.config().mode;
    if (mode != GuidanceMode::Duplicate && mode != GuidanceMode::Compress) {
        throw std::invalid_argument("compress_guided_step: mode must be duplicate or compress");
    }
    const Vec z = rng.normal_vec(state.x.size());
    return guided_step(state, label, gstate, model, classifier, plan, sched, z);
}

/// Observation handed to a trace sink after each step. `x_t` is the state the
/// step started from.
struct StepEvent {
    int t = 0;
    int label = 0;
    std::span<const double> x_t;
    std::span<const double> x0_pred;
    bool guided = false;
    std::optional<double> grad_norm;
    const GuidanceState* gstate = nullptr;
};

struct ChainResult {
    Vec x0;
    GuidanceState gstate;
};

/// Runs t = T..1 from x_T, calling `sink(const StepEvent&)` once per step.
template <NoiseModel Model, GuidanceClassifier Classifier, class Sink>
ChainResult run_chain(Vec x_T, int label, const Model& model, const Classifier& classifier,
                      const GuidancePlan& plan, const NoiseSchedule& sched, ChainRng& rng,
                      Sink&& sink) {
    if (plan.config().mode != GuidanceMode::None && plan.total_steps() != sched.total_steps()) {
        throw std::invalid_argument("run_chain: schedule T does not match noise schedule T");
    }
    require_finite(x_T, "run_chain x_T");
    SampleState state{std::move(x_T), sched.total_steps()};
    GuidanceState gstate;
    Vec z(state.x.size());
    while (state.t >= 1) {
        rng.fill_normal(z);
        StepOutcome step = guided_step(state, label, gstate, model, classifier, plan, sched, z);
        const Vec x0_pred = predict_x0(state.x, step.eps_base, state.t, sched);
        sink(StepEvent{state.t, label, state.x, x0_pred, step.guided, step.grad_norm, &gstate});
        state = std::move(step.next);
    }
    return {std::move(state.x), std::move(gstate)};
}

template <NoiseModel Model, GuidanceClassifier Classifier>
ChainResult run_chain(Vec x_T, int label, const Model& model, const Classifier& classifier,
                      const GuidancePlan& plan, const NoiseSchedule& sched, ChainRng& rng) {
    return run_chain(std::move(x_T), label, model, classifier, plan, sched, rng,
                     [](const StepEvent&) {});
}

}  // namespace glab

#endif  // GUIDANCE_LAB_GUIDANCE_HPP
