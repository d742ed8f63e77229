#ifndef GUIDANCE_LAB_RUNNER_HPP
#define GUIDANCE_LAB_RUNNER_HPP

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "guidance_lab/diagnostics.hpp"
#include "guidance_lab/diffusion.hpp"
#include "guidance_lab/guidance.hpp"
#include "guidance_lab/mixture.hpp"
#include "guidance_lab/random.hpp"
#include "guidance_lab/schedule.hpp"

namespace glab {

/// Invalid or incomplete experiment configuration. `field()` names the
/// offending key.
class ConfigError : public std::runtime_error {
public:
    ConfigError(std::string field, const std::string& msg)
        : std::runtime_error("config field '" + field + "': " + msg), field_(std::move(field)) {}
    const std::string& field() const { return field_; }

private:
    std::string field_;
};

struct ExperimentConfig {
    nlohmann::json world = "default";  // "default", a mixture JSON path, or an inline mixture
    int T = 250;
    double beta_min = 1e-4;
    double beta_max = 0.02;
    // Scale beta_min/beta_max by 1000/T, so the range above refers to a
    // 1000-step process and shorter chains end near pure noise.
    bool beta_rescale = false;
    SigmaMode sigma = SigmaMode::PosteriorVar;
    ScheduleMode schedule_mode = ScheduleMode::PowerLaw;
    int count = 50;
    double k = 1.0;
    GuidanceFamily family = GuidanceFamily::Classifier;
    GuidanceMode guidance = GuidanceMode::Compress;
    double scale = 1.0;
    bool auto_scale = false;
    int num_chains = 256;
    int label = -1;  // fixed target label, or -1 for a uniform draw per chain
    std::uint64_t master_seed = 0;
    double off_delta = 0.05;
    std::uint64_t off_seed = 1;
    int trace_chains = 256;  // chains written to trace.csv
    std::string output_dir = "out";
};

inline const std::vector<std::string>& config_keys() {
    static const std::vector<std::string> keys = {
        "world",     "T",          "beta_min",     "beta_max", "beta_rescale", "sigma",
        "schedule_mode", "count",  "k",            "family",   "guidance",     "scale",
        "auto_scale", "num_chains", "label",       "master_seed", "off_delta", "off_seed",
        "trace_chains", "output_dir"};
    return keys;
}

namespace detail {

template <class T>
T config_get(const nlohmann::json& j, const std::string& key, T fallback) {
    if (!j.contains(key)) return fallback;
    try {
        return j.at(key).get<T>();
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(key, std::string("wrong type (") + e.what() + ")");
    }
}

template <class F>
auto config_enum(const nlohmann::json& j, const std::string& key, F parse,
                 decltype(parse(std::string{})) fallback) {
    if (!j.contains(key)) return fallback;
    try {
        return parse(j.at(key).get<std::string>());
    } catch (const std::exception& e) {
        throw ConfigError(key, e.what());
    }
}

}  // namespace detail

/// Builds a config from JSON. `T` is required; every other key has a default.
inline ExperimentConfig config_from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw ConfigError("<root>", "config must be a JSON object");
    const auto& keys = config_keys();
    for (const auto& [key, _] : j.items()) {
        if (std::find(keys.begin(), keys.end(), key) == keys.end()) {
            throw ConfigError(key, "unknown key");
        }
    }
    if (!j.contains("T")) throw ConfigError("T", "missing required field");
    ExperimentConfig c;
    using detail::config_enum;
    using detail::config_get;
    if (j.contains("world")) c.world = j.at("world");
    c.T = config_get(j, "T", c.T);
    c.beta_min = config_get(j, "beta_min", c.beta_min);
    c.beta_max = config_get(j, "beta_max", c.beta_max);
    c.beta_rescale = config_get(j, "beta_rescale", c.beta_rescale);
    c.sigma = config_enum(j, "sigma", sigma_mode_from_string, c.sigma);
    c.schedule_mode = config_enum(j, "schedule_mode", schedule_mode_from_string, c.schedule_mode);
    c.count = config_get(j, "count", c.count);
    c.k = config_get(j, "k", c.k);
    c.family = config_enum(j, "family", guidance_family_from_string, c.family);
    c.guidance = config_enum(j, "guidance", guidance_mode_from_string, c.guidance);
    c.scale = config_get(j, "scale", c.scale);
    c.auto_scale = config_get(j, "auto_scale", c.auto_scale);
    c.num_chains = config_get(j, "num_chains", c.num_chains);
    c.label = config_get(j, "label", c.label);
    c.master_seed = config_get(j, "master_seed", c.master_seed);
    c.off_delta = config_get(j, "off_delta", c.off_delta);
    c.off_seed = config_get(j, "off_seed", c.off_seed);
    c.trace_chains = config_get(j, "trace_chains", c.trace_chains);
    c.output_dir = config_get(j, "output_dir", c.output_dir);
    return c;
}

inline nlohmann::json config_to_json(const ExperimentConfig& c) {
    return nlohmann::json{{"world", c.world},
                          {"T", c.T},
                          {"beta_min", c.beta_min},
                          {"beta_max", c.beta_max},
                          {"beta_rescale", c.beta_rescale},
                          {"sigma", std::string(to_string(c.sigma))},
                          {"schedule_mode", std::string(to_string(c.schedule_mode))},
                          {"count", c.count},
                          {"k", c.k},
                          {"family", std::string(to_string(c.family))},
                          {"guidance", std::string(to_string(c.guidance))},
                          {"scale", c.scale},
                          {"auto_scale", c.auto_scale},
                          {"num_chains", c.num_chains},
                          {"label", c.label},
                          {"master_seed", c.master_seed},
                          {"off_delta", c.off_delta},
                          {"off_seed", c.off_seed},
                          {"trace_chains", c.trace_chains},
                          {"output_dir", c.output_dir}};
}

/// Applies `key=value` overrides. Values are parsed as JSON when possible and
/// taken as plain strings otherwise.
inline void apply_overrides(nlohmann::json& j, const std::vector<std::string>& overrides) {
    for (const auto& kv : overrides) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos || eq == 0) {
            throw ConfigError(kv, "override must look like key=value");
        }
        const std::string key = kv.substr(0, eq);
        const std::string raw = kv.substr(eq + 1);
        nlohmann::json value = nlohmann::json::parse(raw, nullptr, false);
        if (value.is_discarded()) value = raw;
        j[key] = std::move(value);
    }
}

inline nlohmann::json load_json_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("<file>", "cannot open " + path.string());
    nlohmann::json j = nlohmann::json::parse(in, nullptr, false);
    if (j.is_discarded()) throw ConfigError("<file>", "malformed JSON in " + path.string());
    return j;
}

/// Schedule actually used by a config: full for vanilla/none guidance.
inline ScheduleSpec schedule_spec_for(const ExperimentConfig& c) {
    ScheduleSpec s{c.T, c.count, c.k, c.schedule_mode};
    if (c.guidance == GuidanceMode::Vanilla || c.guidance == GuidanceMode::None) {
        s.mode = ScheduleMode::Vanilla;
    }
    return s;
}

inline void validate(const ExperimentConfig& c) {
    if (c.T < 1) throw ConfigError("T", "must be >= 1");
    if (c.num_chains < 1) throw ConfigError("num_chains", "must be >= 1");
    if (c.trace_chains < 0) throw ConfigError("trace_chains", "must be >= 0");
    if (!(c.scale >= 0.0) || !std::isfinite(c.scale)) throw ConfigError("scale", "must be >= 0");
    if (!(c.off_delta >= 0.0)) throw ConfigError("off_delta", "must be >= 0");
    if (!(c.beta_min > 0.0 && c.beta_min <= c.beta_max)) {
        throw ConfigError("beta_min", "require 0 < beta_min <= beta_max");
    }
    const double factor = c.beta_rescale ? 1000.0 / c.T : 1.0;
    if (!(c.beta_max * factor < 1.0)) throw ConfigError("beta_max", "scaled beta_max must be < 1");
    if (c.guidance != GuidanceMode::Vanilla && c.guidance != GuidanceMode::None) {
        if (c.count < 1) throw ConfigError("count", "must be >= 1");
        if (c.count > c.T) throw ConfigError("count", "must not exceed T");
        if (!(c.k >= 0.0) || !std::isfinite(c.k)) throw ConfigError("k", "must be >= 0");
    }
}

struct World {
    GaussianMixtureModel truth;
    GaussianMixtureModel off;
    NoiseSchedule sched;
};

inline GaussianMixtureModel load_world(const nlohmann::json& spec) {
    try {
        if (spec.is_string()) {
            const auto s = spec.get<std::string>();
            if (s == "default") return default_world();
            std::ifstream in(s);
            if (!in) throw ConfigError("world", "cannot open mixture file " + s);
            nlohmann::json j = nlohmann::json::parse(in, nullptr, false);
            if (j.is_discarded()) throw ConfigError("world", "malformed mixture JSON in " + s);
            return j.get<GaussianMixtureModel>();
        }
        return spec.get<GaussianMixtureModel>();
    } catch (const ConfigError&) {
        throw;
    } catch (const std::exception& e) {
        throw ConfigError("world", e.what());
    }
}

inline NoiseSchedule make_noise_schedule(const ExperimentConfig& c) {
    const double factor = c.beta_rescale ? 1000.0 / c.T : 1.0;
    return make_linear_schedule(c.T, c.beta_min * factor, c.beta_max * factor, c.sigma);
}

inline World build_world(const ExperimentConfig& c) {
    validate(c);
    GaussianMixtureModel truth = load_world(c.world);
    if (c.label >= truth.num_labels()) throw ConfigError("label", "exceeds number of labels");
    GaussianMixtureModel off;
    try {
        off = make_off_classifier(truth, c.off_delta, c.off_seed);
    } catch (const OffClassifierError& e) {
        throw ConfigError("off_delta", e.what());
    }
    return {std::move(truth), std::move(off), make_noise_schedule(c)};
}

/// Thread count: explicit value, else GUIDANCE_LAB_THREADS, else hardware.
inline unsigned resolve_threads(std::optional<unsigned> requested) {
    if (requested && *requested > 0) return *requested;
    if (const char* env = std::getenv("GUIDANCE_LAB_THREADS")) {
        const long v = std::strtol(env, nullptr, 10);
        if (v > 0) return static_cast<unsigned>(v);
    }
    return std::max(1u, std::thread::hardware_concurrency());
}

/// Calls fn(i) for i in [0, n) on up to `threads` workers. Results must be
/// written to per-index slots; the first exception is rethrown.
template <class Fn>
void parallel_for(std::size_t n, unsigned threads, Fn fn) {
    threads = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(std::max<std::size_t>(n, 1))));
    if (threads == 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr error;
    std::mutex error_mutex;
    std::vector<std::thread> pool;
    pool.reserve(threads);
    for (unsigned w = 0; w < threads; ++w) {
        pool.emplace_back([&] {
            for (std::size_t i = next++; i < n; i = next++) {
                try {
                    fn(i);
                } catch (...) {
                    std::lock_guard lock(error_mutex);
                    if (!error) error = std::current_exception();
                    next = n;
                }
            }
        });
    }
    for (auto& th : pool) th.join();
    if (error) std::rethrow_exception(error);
}

struct RunOptions {
    std::optional<unsigned> threads;
    bool keep_traces = true;
    bool keep_x0_preds = false;
};

struct RunOutput {
    ExperimentConfig config;
    GuidanceSchedule schedule;
    double scale = 0.0;
    double effective_scale = 0.0;
    RunSummary summary;
    std::vector<Vec> samples;
    std::vector<int> labels;
    std::vector<std::vector<StepTrace>> traces;  // per chain, t = T..1
    std::vector<std::vector<Vec>> x0_preds;      // per chain, t = T..1 (if requested)
};

inline double effective_scale(const ExperimentConfig& c, const GuidanceSchedule& sched) {
    if (!c.auto_scale || sched.steps.empty()) return c.scale;
    return c.scale * static_cast<double>(c.T) / static_cast<double>(sched.steps.size());
}

/// Samples `num_chains` independent chains. Chain i draws its label (if not
/// fixed), then x_T, then one noise vector per step, all from the stream
/// ChainRng::for_chain(master_seed, i).
inline RunOutput run_experiment(const ExperimentConfig& c, const World& world,
                                const RunOptions& opts = {}) {
    const auto start = std::chrono::steady_clock::now();
    RunOutput out;
    out.config = c;
    out.schedule = make_schedule(schedule_spec_for(c));
    out.scale = c.scale;
    out.effective_scale = effective_scale(c, out.schedule);
    const GuidancePlan plan(GuidanceConfig{out.effective_scale, c.guidance, c.family, out.schedule});

    const MixtureNoiseModel model(world.truth, world.sched);
    const MixtureClassifier on_clf(world.truth, world.sched);
    const MixtureClassifier off_clf(world.off, world.sched);

    const auto n = static_cast<std::size_t>(c.num_chains);
    out.samples.resize(n);
    out.labels.resize(n);
    if (opts.keep_traces) out.traces.resize(n);
    if (opts.keep_x0_preds) out.x0_preds.resize(n);
    std::vector<std::size_t> evals(n, 0);

    parallel_for(n, resolve_threads(opts.threads), [&](std::size_t i) {
        ChainRng rng = ChainRng::for_chain(c.master_seed, i);
        const int label = c.label >= 0 ? c.label
                                       : static_cast<int>(rng.index(static_cast<std::size_t>(world.truth.num_labels())));
        Vec x_T = rng.normal_vec(world.truth.dim());
        std::vector<StepTrace> traces;
        std::vector<Vec> preds;
        auto sink = [&](const StepEvent& ev) {
            if (opts.keep_traces) {
                traces.push_back(record_step(ev.x_t, ev.t, ev.label, on_clf, off_clf, *ev.gstate,
                                             ev.guided, ev.grad_norm, static_cast<int>(i)));
            }
            if (opts.keep_x0_preds) preds.emplace_back(ev.x0_pred.begin(), ev.x0_pred.end());
        };
        ChainResult res = c.family == GuidanceFamily::Classifier
                              ? run_chain(std::move(x_T), label, model, on_clf, plan, world.sched, rng, sink)
                              : run_chain(std::move(x_T), label, model, NullClassifier{}, plan, world.sched, rng, sink);
        out.samples[i] = std::move(res.x0);
        out.labels[i] = label;
        evals[i] = res.gstate.grad_evals;
        if (opts.keep_traces) out.traces[i] = std::move(traces);
        if (opts.keep_x0_preds) out.x0_preds[i] = std::move(preds);
    });

    if (std::adjacent_find(evals.begin(), evals.end(), std::not_equal_to<>()) != evals.end()) {
        throw std::logic_error("run: chains disagree on gradient-evaluation count");
    }
    out.summary = summarize(std::span<const Vec>(out.samples), std::span<const int>(out.labels),
                            world.truth, on_clf, off_clf, evals.front());
    out.summary.wall_time =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return out;
}

inline RunOutput run_experiment(const ExperimentConfig& c, const RunOptions& opts = {}) {
    const World world = build_world(c);
    return run_experiment(c, world, opts);
}

inline nlohmann::json summary_json(const RunOutput& r) {
    nlohmann::json j = r.summary;
    j["realized_G"] = r.config.guidance == GuidanceMode::None ? 0 : r.schedule.steps.size();
    j["scale"] = r.scale;
    j["effective_scale"] = r.effective_scale;
    j["guidance"] = std::string(to_string(r.config.guidance));
    j["family"] = std::string(to_string(r.config.family));
    j["loss_aggregation"] = "batch_mean";
    return j;
}

/// Writes trace.csv, summary.json and schedule.json under `dir`.
inline void write_artifacts(const RunOutput& r, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    {
        std::ofstream os(dir / "trace.csv");
        std::vector<StepTrace> flat;
        const auto limit = std::min<std::size_t>(r.traces.size(),
                                                 static_cast<std::size_t>(r.config.trace_chains));
        for (std::size_t i = 0; i < limit; ++i) {
            flat.insert(flat.end(), r.traces[i].begin(), r.traces[i].end());
        }
        write_trace_csv(os, flat);
    }
    std::ofstream(dir / "summary.json") << summary_json(r).dump(2) << '\n';
    nlohmann::json sched = {{"spec", r.schedule.spec}, {"steps", schedule_to_json(r.schedule)}};
    std::ofstream(dir / "schedule.json") << sched.dump(2) << '\n';
}

// ---------------------------------------------------------------------------
// Sweeps.

enum class SweepAxis { K, CompactRate, Scale };

inline std::string_view to_string(SweepAxis a) {
    switch (a) {
        case SweepAxis::K: return "k";
        case SweepAxis::CompactRate: return "compact_rate";
        case SweepAxis::Scale: return "scale";
    }
    return "?";
}

inline SweepAxis sweep_axis_from_string(std::string_view s) {
    if (s == "k") return SweepAxis::K;
    if (s == "compact_rate") return SweepAxis::CompactRate;
    if (s == "scale") return SweepAxis::Scale;
    throw ConfigError("axis", "unknown sweep axis '" + std::string(s) + "'");
}

struct SweepSpec {
    ExperimentConfig base;
    SweepAxis axis = SweepAxis::K;
    std::vector<double> values;
};

/// Config for one sweep point. A compact rate r requests round(T / r) guidance steps.
inline ExperimentConfig sweep_member(const SweepSpec& spec, double value) {
    ExperimentConfig c = spec.base;
    switch (spec.axis) {
        case SweepAxis::K: c.k = value; break;
        case SweepAxis::CompactRate:
            if (!(value >= 1.0)) throw ConfigError("values", "compact rate must be >= 1");
            c.count = std::max(1, static_cast<int>(std::lround(c.T / value)));
            break;
        case SweepAxis::Scale: c.scale = value; break;
    }
    return c;
}

struct SweepRow {
    double value = 0.0;
    bool ok = false;
    std::string error;
    std::size_t realized_g = 0;
    double effective_scale = 0.0;
    RunSummary summary;
};

inline constexpr const char* kSweepCsvHeader =
    "axis,value,status,realized_G,grad_evals,effective_scale,on_acc,off_acc,fitting_gap,"
    "mean_nll,diversity,precision_proxy";

inline void write_sweep_csv(std::ostream& os, SweepAxis axis, const std::vector<SweepRow>& rows) {
    os << kSweepCsvHeader << '\n';
    for (const auto& r : rows) {
        os << to_string(axis) << ',' << format_double(r.value) << ',' << (r.ok ? "ok" : "failed");
        if (r.ok) {
            const auto& s = r.summary;
            os << ',' << r.realized_g << ',' << s.grad_evals << ',' << format_double(r.effective_scale)
               << ',' << format_double(s.on_acc) << ',' << format_double(s.off_acc) << ','
               << format_double(s.fitting_gap) << ',' << format_double(s.mean_nll) << ','
               << format_double(s.diversity) << ',' << format_double(s.precision_proxy);
        } else {
            os << ",,,,,,,,,";
        }
        os << '\n';
    }
}

class SweepError : public std::runtime_error {
public:
    SweepError(const std::string& msg, std::vector<SweepRow> partial)
        : std::runtime_error(msg), partial_(std::move(partial)) {}
    const std::vector<SweepRow>& partial() const { return partial_; }

private:
    std::vector<SweepRow> partial_;
};

/// Runs every value in ascending order. Each member's artifacts go to
/// `<output_dir>/<axis>_<value>/`; the table goes to `<output_dir>/sweep.csv`.
/// A failing member stops the sweep; rows so far plus a `failed` row are
/// still written before SweepError is thrown.
inline std::vector<SweepRow> sweep(const SweepSpec& spec, const RunOptions& opts = {},
                                   bool write_files = true) {
    if (spec.values.empty()) throw ConfigError("values", "sweep needs at least one value");
    std::vector<double> values = spec.values;
    std::sort(values.begin(), values.end());
    const std::filesystem::path root = spec.base.output_dir;
    std::vector<SweepRow> rows;
    auto flush = [&] {
        if (!write_files) return;
        std::filesystem::create_directories(root);
        std::ofstream os(root / "sweep.csv");
        write_sweep_csv(os, spec.axis, rows);
    };
    for (double v : values) {
        SweepRow row;
        row.value = v;
        try {
            const ExperimentConfig c = sweep_member(spec, v);
            RunOutput r = run_experiment(c, opts);
            row.ok = true;
            row.realized_g = c.guidance == GuidanceMode::None ? 0 : r.schedule.steps.size();
            row.effective_scale = r.effective_scale;
            row.summary = r.summary;
            if (write_files) {
                write_artifacts(r, root / (std::string(to_string(spec.axis)) + "_" + format_double(v)));
            }
            rows.push_back(std::move(row));
        } catch (const std::exception& e) {
            row.error = e.what();
            rows.push_back(row);
            flush();
            throw SweepError("sweep member " + format_double(v) + " failed: " + e.what(), rows);
        }
    }
    flush();
    return rows;
}

}  // namespace glab

#endif  // GUIDANCE_LAB_RUNNER_HPP
