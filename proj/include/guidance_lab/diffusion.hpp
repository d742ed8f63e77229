#ifndef GUIDANCE_LAB_DIFFUSION_HPP
#define GUIDANCE_LAB_DIFFUSION_HPP

#include <cmath>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "guidance_lab/random.hpp"
#include "guidance_lab/vector_ops.hpp"

namespace glab {

enum class SigmaMode {
    PosteriorVar,  // sigma_t^2 = beta-tilde_t
    BetaVar,       // sigma_t^2 = beta_t
};

inline std::string_view to_string(SigmaMode m) {
    return m == SigmaMode::PosteriorVar ? "posterior" : "beta";
}

inline SigmaMode sigma_mode_from_string(std::string_view s) {
    if (s == "posterior") return SigmaMode::PosteriorVar;
    if (s == "beta") return SigmaMode::BetaVar;
    throw std::invalid_argument("unknown sigma mode '" + std::string(s) + "'");
}

/// Fixed variance schedule. Tables are indexed by timestep t = 0..T; entry 0
/// carries the alpha_bar_0 = 1 convention and is otherwise unused.
class NoiseSchedule {
public:
    NoiseSchedule(std::vector<double> betas_1_to_T, SigmaMode sigma_mode)
        : sigma_mode_(sigma_mode) {
        const std::size_t T = betas_1_to_T.size();
        if (T == 0) throw std::invalid_argument("noise schedule: T must be >= 1");
        betas_.assign(T + 1, 0.0);
        alphas_.assign(T + 1, 1.0);
        alpha_bars_.assign(T + 1, 1.0);
        posterior_vars_.assign(T + 1, 0.0);
        for (std::size_t t = 1; t <= T; ++t) {
            const double b = betas_1_to_T[t - 1];
            if (!(b > 0.0 && b < 1.0)) {
                throw std::invalid_argument("noise schedule: beta_" + std::to_string(t) +
                                            " outside (0, 1)");
            }
            betas_[t] = b;
            alphas_[t] = 1.0 - b;
            alpha_bars_[t] = alpha_bars_[t - 1] * alphas_[t];
            posterior_vars_[t] = (1.0 - alpha_bars_[t - 1]) / (1.0 - alpha_bars_[t]) * b;
        }
    }

    int total_steps() const { return static_cast<int>(betas_.size()) - 1; }
    SigmaMode sigma_mode() const { return sigma_mode_; }

    double beta(int t) const { return betas_.at(idx(t)); }
    double alpha(int t) const { return alphas_.at(idx(t)); }
    double alpha_bar(int t) const { return alpha_bars_.at(idx(t)); }
    double posterior_var(int t) const { return posterior_vars_.at(idx(t)); }

    /// Reverse-step variance sigma_t^2 (before the final-step override).
    double sigma_sq(int t) const {
        return sigma_mode_ == SigmaMode::PosteriorVar ? posterior_var(t) : beta(t);
    }
    double sigma(int t) const { return std::sqrt(sigma_sq(t)); }

    void require_timestep(int t, const char* what) const {
        if (t < 1 || t > total_steps()) {
            throw std::out_of_range(std::string(what) + ": timestep " + std::to_string(t) +
                                    " outside [1, " + std::to_string(total_steps()) + "]");
        }
    }

private:
    static std::size_t idx(int t) { return static_cast<std::size_t>(t); }

    std::vector<double> betas_;
    std::vector<double> alphas_;
    std::vector<double> alpha_bars_;
    std::vector<double> posterior_vars_;
    SigmaMode sigma_mode_;
};

/// Betas linearly interpolated from beta_min (t = 1) to beta_max (t = T).
inline NoiseSchedule make_linear_schedule(int T, double beta_min, double beta_max,
                                          SigmaMode sigma_mode = SigmaMode::PosteriorVar) {
    if (T < 1) throw std::invalid_argument("linear schedule: T must be >= 1");
    if (!(beta_min > 0.0) || !(beta_min <= beta_max) || !(beta_max < 1.0)) {
        throw std::invalid_argument("linear schedule: require 0 < beta_min <= beta_max < 1");
    }
    std::vector<double> betas(static_cast<std::size_t>(T));
    for (int i = 0; i < T; ++i) {
        const double frac = T == 1 ? 0.0 : static_cast<double>(i) / (T - 1);
        betas[static_cast<std::size_t>(i)] = beta_min + (beta_max - beta_min) * frac;
    }
    return NoiseSchedule(std::move(betas), sigma_mode);
}

struct SampleState {
    Vec x;
    int t = 0;
};

/// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) noise
inline Vec forward_marginal(std::span<const double> x0, int t, std::span<const double> noise,
                            const NoiseSchedule& sched) {
    require_same_dim(x0, noise, "forward_marginal");
    sched.require_timestep(t, "forward_marginal");
    const double ab = sched.alpha_bar(t);
    Vec out = scaled(std::sqrt(ab), x0);
    axpy(std::sqrt(1.0 - ab), noise, out);
    return out;
}

/// One-shot clean-data estimate from x_t and a noise prediction.
inline Vec predict_x0(std::span<const double> x_t, std::span<const double> eps_hat, int t,
                      const NoiseSchedule& sched) {
    require_same_dim(x_t, eps_hat, "predict_x0");
    sched.require_timestep(t, "predict_x0");
    const double ab = sched.alpha_bar(t);
    Vec out(x_t.begin(), x_t.end());
    axpy(-std::sqrt(1.0 - ab), eps_hat, out);
    for (double& v : out) v /= std::sqrt(ab);
    return out;
}

/// Unguided reverse mean (1/sqrt(alpha_t)) (x_t - beta_t / sqrt(1 - abar_t) eps_hat).
inline Vec reverse_mean(std::span<const double> x_t, std::span<const double> eps_hat, int t,
                        const NoiseSchedule& sched) {
    require_same_dim(x_t, eps_hat, "reverse_mean");
    sched.require_timestep(t, "reverse_mean");
    const double coef = sched.beta(t) / std::sqrt(1.0 - sched.alpha_bar(t));
    const double inv_sqrt_alpha = 1.0 / std::sqrt(sched.alpha(t));
    Vec mean(x_t.size());
    for (std::size_t i = 0; i < mean.size(); ++i) {
        mean[i] = inv_sqrt_alpha * (x_t[i] - coef * eps_hat[i]);
    }
    return mean;
}

/// Noise scale actually applied at step t; zero on the final step.
inline double step_noise_scale(int t, const NoiseSchedule& sched) {
    return t == 1 ? 0.0 : sched.sigma(t);
}

/// Finish a step from its (possibly guided) mean: x_{t-1} = mean + sigma_t z.
inline SampleState finish_step(Vec mean, int t, std::span<const double> z,
                               const NoiseSchedule& sched) {
    require_same_dim(mean, z, "finish_step");
    axpy(step_noise_scale(t, sched), z, mean);
    require_finite(mean, "reverse step");
    return {std::move(mean), t - 1};
}

/// Ancestral sampling step with an explicit noise draw z.
inline SampleState ddpm_step(const SampleState& state, std::span<const double> eps_hat,
                             std::span<const double> z, const NoiseSchedule& sched) {
    require_finite(eps_hat, "ddpm_step eps_hat");
    return finish_step(reverse_mean(state.x, eps_hat, state.t, sched), state.t, z, sched);
}

/// Ancestral sampling step that draws its own noise (one d-dim draw per call).
inline SampleState ddpm_step(const SampleState& state, std::span<const double> eps_hat,
                             const NoiseSchedule& sched, ChainRng& rng) {
    const Vec z = rng.normal_vec(state.x.size());
    return ddpm_step(state, eps_hat, z, sched);
}

/// Same step written through the x0 prediction:
/// (beta_t sqrt(abar_{t-1}) / (1 - abar_t)) x0~ + ((1 - abar_{t-1}) sqrt(alpha_t) / (1 - abar_t)) x_t + sigma z.
inline SampleState posterior_mean_step(const SampleState& state, std::span<const double> eps_hat,
                                       std::span<const double> z, const NoiseSchedule& sched) {
    const int t = state.t;
    const Vec x0 = predict_x0(state.x, eps_hat, t, sched);
    const double ab = sched.alpha_bar(t);
    const double ab_prev = sched.alpha_bar(t - 1);
    const double c0 = (1.0 - sched.alpha(t)) * std::sqrt(ab_prev) / (1.0 - ab);
    const double ct = (1.0 - ab_prev) * std::sqrt(sched.alpha(t)) / (1.0 - ab);
    Vec mean(state.x.size());
    for (std::size_t i = 0; i < mean.size(); ++i) mean[i] = c0 * x0[i] + ct * state.x[i];
    return finish_step(std::move(mean), t, z, sched);
}

}  // namespace glab

#endif  // GUIDANCE_LAB_DIFFUSION_HPP
