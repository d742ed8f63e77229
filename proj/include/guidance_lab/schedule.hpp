#ifndef GUIDANCE_LAB_SCHEDULE_HPP
#define GUIDANCE_LAB_SCHEDULE_HPP

#include <algorithm>
#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

namespace glab {

enum class ScheduleMode { Vanilla, EarlyStop, Uniform, PowerLaw };

inline std::string_view to_string(ScheduleMode m) {
    switch (m) {
        case ScheduleMode::Vanilla: return "vanilla";
        case ScheduleMode::EarlyStop: return "early_stop";
        case ScheduleMode::Uniform: return "uniform";
        case ScheduleMode::PowerLaw: return "power_law";
    }
    return "?";
}

inline ScheduleMode schedule_mode_from_string(std::string_view s) {
    if (s == "vanilla") return ScheduleMode::Vanilla;
    if (s == "early_stop" || s == "es") return ScheduleMode::EarlyStop;
    if (s == "uniform" || s == "ug") return ScheduleMode::Uniform;
    if (s == "power_law" || s == "power") return ScheduleMode::PowerLaw;
    throw std::invalid_argument("unknown schedule mode '" + std::string(s) + "'");
}

/// Parameters that generate a guidance-timestep set.
struct ScheduleSpec {
    int total_steps = 250;
    int requested_count = 50;
    double k = 1.0;
    ScheduleMode mode = ScheduleMode::PowerLaw;

    bool operator==(const ScheduleSpec&) const = default;
};

inline void validate(const ScheduleSpec& spec) {
    if (spec.total_steps <= 0) throw std::invalid_argument("schedule: T must be positive");
    if (!(spec.k >= 0.0) || !std::isfinite(spec.k)) {
        throw std::invalid_argument("schedule: k must be a finite nonnegative number");
    }
    if (spec.mode == ScheduleMode::Vanilla) return;
    if (spec.requested_count <= 0) throw std::invalid_argument("schedule: count must be positive");
    if (spec.requested_count > spec.total_steps) {
        throw std::invalid_argument("schedule: count (" + std::to_string(spec.requested_count) +
                                    ") exceeds T (" + std::to_string(spec.total_steps) + ")");
    }
}

/// Timesteps at which guidance is evaluated, strictly decreasing, all in [1, T].
struct GuidanceSchedule {
    std::vector<int> steps;
    ScheduleSpec spec;

    int total_steps() const { return spec.total_steps; }
    std::size_t size() const { return steps.size(); }
    bool empty() const { return steps.empty(); }
};

/// Pre-deduplication values T - floor(T * (i/count)^k) for i = 0..count.
///
/// The i = 0 term is 0 for every k (including k = 0), so the first value is
/// always T. A 1e-9 slack before flooring keeps exact integer products from
/// losing a unit to rounding.
inline std::vector<int> raw_power_law(int total_steps, int count, double k) {
    std::vector<int> out;
    out.reserve(static_cast<std::size_t>(count) + 1);
    for (int i = 0; i <= count; ++i) {
        const double frac = i == 0 ? 0.0 : std::pow(static_cast<double>(i) / count, k);
        const double v = static_cast<double>(total_steps) * frac;
        out.push_back(total_steps - static_cast<int>(std::floor(v + 1e-9)));
    }
    return out;
}

inline GuidanceSchedule make_schedule(const ScheduleSpec& spec) {
    validate(spec);
    GuidanceSchedule sched{{}, spec};
    const int T = spec.total_steps;
    switch (spec.mode) {
        case ScheduleMode::Vanilla:
            for (int t = T; t >= 1; --t) sched.steps.push_back(t);
            return sched;
        case ScheduleMode::EarlyStop:
            for (int t = T; t > T - spec.requested_count; --t) sched.steps.push_back(t);
            return sched;
        case ScheduleMode::Uniform:
        case ScheduleMode::PowerLaw: {
            const double k = spec.mode == ScheduleMode::Uniform ? 1.0 : spec.k;
            auto raw = raw_power_law(T, spec.requested_count, k);
            std::erase_if(raw, [](int g) { return g <= 0; });
            std::sort(raw.begin(), raw.end(), std::greater<>());
            raw.erase(std::unique(raw.begin(), raw.end()), raw.end());
            sched.steps = std::move(raw);
            return sched;
        }
    }
    return sched;
}

inline bool contains(const GuidanceSchedule& sched, int t) {
    return std::binary_search(sched.steps.begin(), sched.steps.end(), t, std::greater<>());
}

struct GapWeight {
    int t;
    int weight;
    bool operator==(const GapWeight&) const = default;
};

/// Number of sampling steps each guidance step stands for under compression:
/// a_i - a_{i+1} between consecutive steps, and a_last for the tail down to t = 1.
inline std::vector<GapWeight> gap_weights(const GuidanceSchedule& sched) {
    if (sched.steps.empty()) throw std::invalid_argument("gap_weights: empty schedule");
    std::vector<GapWeight> out;
    out.reserve(sched.steps.size());
    for (std::size_t i = 0; i < sched.steps.size(); ++i) {
        const int a = sched.steps[i];
        const int next = i + 1 < sched.steps.size() ? sched.steps[i + 1] : 0;
        out.push_back({a, a - next});
    }
    return out;
}

/// Dense lookup of gap weights indexed by timestep (0 for non-guidance steps).
inline std::vector<int> gap_weight_table(const GuidanceSchedule& sched) {
    std::vector<int> table(static_cast<std::size_t>(sched.total_steps()) + 1, 0);
    for (const auto& [t, w] : gap_weights(sched)) table[static_cast<std::size_t>(t)] = w;
    return table;
}

inline void to_json(nlohmann::json& j, const ScheduleSpec& s) {
    j = nlohmann::json{{"T", s.total_steps},
                       {"count", s.requested_count},
                       {"k", s.k},
                       {"mode", std::string(to_string(s.mode))}};
}

inline void from_json(const nlohmann::json& j, ScheduleSpec& s) {
    s.total_steps = j.at("T").get<int>();
    s.requested_count = j.value("count", s.requested_count);
    s.k = j.value("k", s.k);
    s.mode = schedule_mode_from_string(j.value("mode", std::string(to_string(s.mode))));
}

/// A schedule serializes as a bare JSON array of timesteps.
inline nlohmann::json schedule_to_json(const GuidanceSchedule& sched) {
    return nlohmann::json(sched.steps);
}

}  // namespace glab

#endif  // GUIDANCE_LAB_SCHEDULE_HPP
