// Acceptance suite. Runs every exit criterion at its pinned tolerance and
// prints one PASS/FAIL line per criterion. Exit status is nonzero if any fails.
//
//   acceptance            run all criteria
//   acceptance 3 7        run only the listed criteria

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "guidance_lab/diagnostics.hpp"
#include "guidance_lab/diffusion.hpp"
#include "guidance_lab/guidance.hpp"
#include "guidance_lab/mixture.hpp"
#include "guidance_lab/random.hpp"
#include "guidance_lab/runner.hpp"
#include "guidance_lab/schedule.hpp"
#include "testing_util.hpp"

using namespace glab;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

struct Criterion {
    int id;
    std::string name;
    double time_limit_s;  // 0 = no limit
    std::function<Outcome()> run;
};

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof(buf), f, args...);
    return buf;
}

constexpr int kSeeds = 5;
constexpr int kRequiredSeeds = 4;

ExperimentConfig default_config() {
    ExperimentConfig c;
    c.T = 250;
    c.trace_chains = 0;
    return c;
}

// -- 1 ----------------------------------------------------------------------
Outcome schedule_law() {
    // Published |G| for k = 1..6 (+-2 allowed) and exact sizes from
    // tests/oracles/schedule_oracle.py.
    const std::vector<std::size_t> published = {50, 47, 41, 36, 32, 28};
    const std::vector<std::size_t> oracle = {50, 47, 41, 36, 32, 28};
    const std::vector<int> oracle_k2 = {250, 249, 248, 247, 246, 244, 242, 240, 238, 236, 234, 231,
                                        228, 225, 222, 218, 214, 210, 206, 202, 198, 193, 188, 183,
                                        178, 172, 166, 160, 154, 148, 142, 135, 128, 121, 114, 106,
                                        98,  90,  82,  74,  66,  57,  48,  39,  30,  20,  10};
    std::vector<std::size_t> sizes;
    bool ok = true;
    for (int k = 1; k <= 6; ++k) {
        const auto s = make_schedule({250, 50, static_cast<double>(k), ScheduleMode::PowerLaw});
        sizes.push_back(s.size());
        const auto i = static_cast<std::size_t>(k - 1);
        const long diff = static_cast<long>(s.size()) - static_cast<long>(published[i]);
        ok = ok && std::labs(diff) <= 2 && s.size() == oracle[i];
        if (i > 0) ok = ok && sizes[i] <= sizes[i - 1];
        if (k == 2) ok = ok && s.steps == oracle_k2;
    }
    std::string list;
    for (auto s : sizes) list += std::to_string(s) + " ";
    return {ok, "|G| for k=1..6: " + list + "(published: 50 47 41 36 32 28)"};
}

// -- 2 ----------------------------------------------------------------------
Outcome schedule_monotonicity() {
    ChainRng rng(20240601);
    std::size_t violations = 0, comparisons = 0;
    for (int trial = 0; trial < 1000; ++trial) {
        const int T = 1 + static_cast<int>(rng.index(1000));
        const int count = 1 + static_cast<int>(rng.index(static_cast<std::size_t>(T)));
        double k1 = 50.0 * rng.uniform();
        double k2 = 50.0 * rng.uniform();
        if (k1 > k2) std::swap(k1, k2);
        if (k1 == k2) k2 = std::nextafter(k2, 51.0);
        if (trial % 10 == 0) k1 = 0.0;
        const auto a = raw_power_law(T, count, k1);
        const auto b = raw_power_law(T, count, k2);
        for (std::size_t i = 0; i < a.size(); ++i) {
            ++comparisons;
            if (a[i] > b[i]) ++violations;
        }
    }
    return {violations == 0,
            fmt("%zu violations over %zu raw-value comparisons (1000 triples)", violations, comparisons)};
}

// -- 3 ----------------------------------------------------------------------
/// Classifier wrapper counting gradient calls independently of GuidanceState.
struct CountingClassifier {
    const MixtureClassifier* inner;
    std::atomic<std::size_t>* calls;
    Vec grad_log_prob(std::span<const double> x, int t, int y) const {
        ++*calls;
        return inner->grad_log_prob(x, t, y);
    }
};

Outcome cost_law() {
    const auto world = build_world(default_config());
    const MixtureNoiseModel model(world.truth, world.sched);
    const MixtureClassifier clf(world.truth, world.sched);
    constexpr std::size_t chains = 64;
    struct Case {
        const char* name;
        GuidanceMode mode;
        ScheduleSpec spec;
        std::size_t expected;
    };
    const std::vector<Case> cases = {
        {"vanilla", GuidanceMode::Vanilla, {250, 250, 1.0, ScheduleMode::Vanilla}, 250},
        {"compress k=1", GuidanceMode::Compress, {250, 50, 1.0, ScheduleMode::PowerLaw}, 50},
        {"compress k=2", GuidanceMode::Compress, {250, 50, 2.0, ScheduleMode::PowerLaw}, 47},
        {"duplicate k=1", GuidanceMode::Duplicate, {250, 50, 1.0, ScheduleMode::PowerLaw}, 50},
    };
    bool ok = true;
    std::string detail;
    for (const auto& cs : cases) {
        const auto sched = make_schedule(cs.spec);
        const GuidancePlan plan({1.0, cs.mode, GuidanceFamily::Classifier, sched});
        std::atomic<std::size_t> calls{0};
        const CountingClassifier counting{&clf, &calls};
        std::size_t state_total = 0;
        for (std::size_t i = 0; i < chains; ++i) {
            ChainRng rng = ChainRng::for_chain(7, i);
            auto res = run_chain(rng.normal_vec(2), static_cast<int>(i % 4), model, counting, plan,
                                 world.sched, rng);
            ok = ok && res.gstate.grad_evals == sched.size();
            state_total += res.gstate.grad_evals;
        }
        ok = ok && sched.size() == cs.expected && calls == chains * cs.expected &&
             state_total == calls;
        detail += fmt("%s: %zu/chain ", cs.name, calls.load() / chains);
    }
    return {ok, detail + "(expected 250, 50, 47, 50)"};
}

// -- 4 ----------------------------------------------------------------------
std::string trace_bytes(const RunOutput& r) {
    std::vector<StepTrace> flat;
    for (const auto& tr : r.traces) flat.insert(flat.end(), tr.begin(), tr.end());
    std::ostringstream os;
    write_trace_csv(os, flat);
    for (const auto& x : r.samples) {
        for (double v : x) os << format_double(v) << ' ';
    }
    return os.str();
}

Outcome degenerate_equivalence() {
    bool ok = true;
    std::string detail;
    for (auto family : {GuidanceFamily::Classifier, GuidanceFamily::ClassifierFree}) {
        ExperimentConfig c = default_config();
        c.num_chains = 64;
        c.scale = 2.0;
        c.family = family;
        c.master_seed = 11;
        c.guidance = GuidanceMode::Vanilla;
        const auto world = build_world(c);
        const auto vanilla = run_experiment(c, world, {1, true, false});
        c.guidance = GuidanceMode::Compress;
        c.schedule_mode = ScheduleMode::Vanilla;
        const auto compress = run_experiment(c, world, {1, true, false});
        const std::string a = trace_bytes(vanilla), b = trace_bytes(compress);
        const bool same = a == b;
        ok = ok && same && compress.schedule.size() == 250;
        detail += fmt("%s: %zu bytes %s; ", std::string(to_string(family)).c_str(), a.size(),
                      same ? "identical" : "DIFFER");
    }
    return {ok, detail};
}

// -- 5 ----------------------------------------------------------------------
Outcome gradient_checks() {
    const GaussianMixtureModel m = default_world();
    const auto sched = make_noise_schedule(default_config());
    const std::vector<int> ts = {1, 62, 125, 250};
    ChainRng rng(5150);
    double worst_score = 0.0, worst_clf = 0.0;
    for (int probe = 0; probe < 100; ++probe) {
        const int t = ts[static_cast<std::size_t>(probe) % ts.size()];
        const double ab = sched.alpha_bar(t);
        Vec x = {12.0 * rng.uniform() - 6.0, 12.0 * rng.uniform() - 6.0};
        const int y = static_cast<int>(rng.index(4));

        const Vec eps = analytic_eps(x, t, m, sched);
        Vec score = scaled(-1.0 / std::sqrt(1.0 - ab), eps);
        const Vec fd_score = testing::numeric_gradient(
            [&](std::span<const double> p) { return mixture_log_density(m, p, ab); }, x);
        worst_score = std::max(worst_score, testing::relative_error(score, fd_score));

        const Vec g = classifier_grad(x, t, y, m, sched);
        const Vec fd_g = testing::numeric_gradient(
            [&](std::span<const double> p) {
                return label_log_posterior(m, p, ab)[static_cast<std::size_t>(y)];
            },
            x);
        worst_clf = std::max(worst_clf, testing::relative_error(g, fd_g));
    }
    return {worst_score <= 1e-4 && worst_clf <= 1e-4,
            fmt("max rel err: score %.2e, classifier %.2e (tol 1e-4)", worst_score, worst_clf)};
}

// -- 6 ----------------------------------------------------------------------
/// Mean distance from the one-shot estimate x0~(t) to the chain's realized x0,
/// per t, over unguided chains driven by the exact noise predictor.
Outcome theorem1_diagnostic() {
    ExperimentConfig c = default_config();
    c.num_chains = 256;
    c.guidance = GuidanceMode::None;
    c.master_seed = 3;
    const auto r = run_experiment(c, build_world(c), {1, false, true});
    const int T = c.T;
    std::vector<double> mean_dist(static_cast<std::size_t>(T) + 1, 0.0);
    for (std::size_t i = 0; i < r.samples.size(); ++i) {
        for (int t = T; t >= 1; --t) {
            const auto& pred = r.x0_preds[i][static_cast<std::size_t>(T - t)];
            mean_dist[static_cast<std::size_t>(t)] += distance(pred, r.samples[i]);
        }
    }
    for (auto& v : mean_dist) v /= static_cast<double>(r.samples.size());
    int bad = 0;
    for (int t = T; t >= 2; --t) {
        if (mean_dist[static_cast<std::size_t>(t - 1)] > mean_dist[static_cast<std::size_t>(t)]) ++bad;
    }
    const int pairs = T - 1;
    const double frac = static_cast<double>(bad) / pairs;
    return {frac <= 0.02, fmt("%d of %d adjacent pairs increase (%.1f%%, allowed 2%%); "
                              "mean dist %.3f at t=T -> %.3f at t=1",
                              bad, pairs, 100.0 * frac, mean_dist[static_cast<std::size_t>(T)], mean_dist[1])};
}

// -- 7 ----------------------------------------------------------------------
Outcome sampler_fidelity() {
    const GaussianMixtureModel m = default_world();
    ChainRng rng(777);
    std::vector<double> nll;
    nll.reserve(100000);
    for (int i = 0; i < 100000; ++i) {
        const auto draw = sample_mixture(m, rng);
        nll.push_back(-mixture_log_density(m, draw.x, 1.0));
    }
    const double reference = sorted_sum(nll) / static_cast<double>(nll.size());

    ExperimentConfig c = default_config();
    c.num_chains = 10000;
    c.guidance = GuidanceMode::None;
    c.master_seed = 4;
    const auto r = run_experiment(c, build_world(c), {1, false, false});
    const double gap = std::abs(r.summary.mean_nll - reference);
    return {gap <= 0.1 && r.summary.diversity >= 0.95,
            fmt("sampler NLL %.4f vs reference %.4f (|diff| %.4f, tol 0.1); diversity %.4f (>= 0.95)",
                r.summary.mean_nll, reference, gap, r.summary.diversity)};
}

// -- 8 ----------------------------------------------------------------------
/// Vanilla at s = 2 against Compress (|G| = 32, k = 5). The compress scale
/// starts at the vanilla scale and is searched until diversities match
/// within 0.02.
Outcome model_fitting_direction() {
    ExperimentConfig base = default_config();
    base.num_chains = 5000;
    base.scale = 2.0;
    base.off_delta = 0.4;
    base.off_seed = 1;
    const auto world = build_world(base);
    int wins = 0;
    std::string detail;
    for (int seed = 1; seed <= kSeeds; ++seed) {
        ExperimentConfig v = base;
        v.master_seed = static_cast<std::uint64_t>(seed);
        v.guidance = GuidanceMode::Vanilla;
        const auto rv = run_experiment(v, world, {1, false, false});

        ExperimentConfig cc = v;
        cc.guidance = GuidanceMode::Compress;
        cc.schedule_mode = ScheduleMode::PowerLaw;
        cc.count = 50;
        cc.k = 5.0;
        std::optional<RunOutput> rc;
        for (double mult : {1.0, 0.9, 1.1, 0.75, 1.25, 0.5, 1.5}) {
            cc.scale = base.scale * mult;
            auto trial = run_experiment(cc, world, {1, false, false});
            if (std::abs(trial.summary.diversity - rv.summary.diversity) <= 0.02) {
                rc = std::move(trial);
                break;
            }
        }
        if (!rc) {
            detail += fmt("seed %d: no diversity match; ", seed);
            continue;
        }
        const bool win = rc->summary.fitting_gap <= rv.summary.fitting_gap;
        wins += win ? 1 : 0;
        detail += fmt("s%d V %.4f/C %.4f%s ", seed, rv.summary.fitting_gap, rc->summary.fitting_gap,
                      win ? "" : "(x)");
    }
    return {wins >= kRequiredSeeds, fmt("%d/%d seeds Compress gap <= Vanilla gap; ", wins, kSeeds) + detail};
}

// -- 9 ----------------------------------------------------------------------
Outcome forgetting_signature() {
    int hits = 0;
    std::string detail;
    for (int seed = 1; seed <= kSeeds; ++seed) {
        ExperimentConfig c = default_config();
        c.num_chains = 256;
        c.scale = 1.0;
        c.guidance = GuidanceMode::Skip;
        c.schedule_mode = ScheduleMode::EarlyStop;
        c.count = 50;
        c.master_seed = static_cast<std::uint64_t>(seed);
        const auto r = run_experiment(c, build_world(c), {1, true, false});
        std::vector<StepTrace> flat;
        for (const auto& tr : r.traces) flat.insert(flat.end(), tr.begin(), tr.end());
        const auto curve = batch_mean_by_t(std::span<const StepTrace>(flat),
                                           [](const StepTrace& s) { return s.on_loss; });
        double guided_min = INFINITY, tail = 0.0;
        int tail_n = 0;
        for (const auto& [t, v] : curve) {
            if (contains(r.schedule, t)) guided_min = std::min(guided_min, v);
            if (t <= c.T / 5) {
                tail += v;
                ++tail_n;
            }
        }
        tail /= tail_n;
        const double margin = tail - guided_min;
        hits += margin > 0.0 ? 1 : 0;
        detail += fmt("s%d %+.3f ", seed, margin);
    }
    return {hits >= kRequiredSeeds,
            fmt("%d/%d seeds: final-20%% on-loss exceeds guided-phase min; margins ", hits, kSeeds) + detail};
}

// -- 10 ---------------------------------------------------------------------
Outcome nonconvergence_signature() {
    int hits = 0;
    std::string detail;
    ExperimentConfig base = default_config();
    base.num_chains = 1000;
    base.scale = 1.0;
    const auto world = build_world(base);
    for (int seed = 1; seed <= kSeeds; ++seed) {
        ExperimentConfig v = base;
        v.master_seed = static_cast<std::uint64_t>(seed);
        v.guidance = GuidanceMode::Vanilla;
        ExperimentConfig u = v;
        u.guidance = GuidanceMode::Skip;
        u.schedule_mode = ScheduleMode::Uniform;
        u.count = 50;
        const auto rv = run_experiment(v, world, {1, false, false});
        const auto ru = run_experiment(u, world, {1, false, false});
        hits += ru.summary.on_acc < rv.summary.on_acc ? 1 : 0;
        detail += fmt("s%d UG %.3f/G %.3f ", seed, ru.summary.on_acc, rv.summary.on_acc);
    }
    return {hits >= kRequiredSeeds,
            fmt("%d/%d seeds UG on_acc < vanilla; ", hits, kSeeds) + detail};
}

// -- 11 ---------------------------------------------------------------------
Outcome cfg_identities() {
    bool ok = true;
    ExperimentConfig c = default_config();
    c.num_chains = 32;
    c.family = GuidanceFamily::ClassifierFree;
    c.scale = 0.0;
    c.master_seed = 21;
    const auto world = build_world(c);
    c.guidance = GuidanceMode::None;
    const auto cond = run_experiment(c, world, {1, true, false});
    auto same_path = [&](const RunOutput& r) {
        if (r.samples != cond.samples) return false;
        for (std::size_t i = 0; i < r.traces.size(); ++i) {
            for (std::size_t j = 0; j < r.traces[i].size(); ++j) {
                const auto& a = r.traces[i][j];
                const auto& b = cond.traces[i][j];
                if (a.t != b.t || a.on_loss != b.on_loss || a.off_loss != b.off_loss) return false;
            }
        }
        return true;
    };
    for (auto mode : {GuidanceMode::Vanilla, GuidanceMode::Compress, GuidanceMode::Duplicate}) {
        c.guidance = mode;
        c.schedule_mode = mode == GuidanceMode::Vanilla ? ScheduleMode::Vanilla : ScheduleMode::PowerLaw;
        ok = ok && same_path(run_experiment(c, world, {1, true, false}));
    }
    ChainRng rng(99);
    int checked = 0;
    for (int i = 0; i < 200; ++i) {
        const Vec e = rng.normal_vec(3);
        const Vec first = cfg_eps(e, e, 0.0).eps;
        for (double w : {0.5, 1.0, 3.0, 100.0}) {
            ok = ok && cfg_eps(e, e, w).eps == first && first == e;
            ++checked;
        }
    }
    return {ok, fmt("w=0 trajectories identical to conditional-only run (vanilla/compress/duplicate); "
                    "%d scale-invariance checks exact", checked)};
}

// -- 12 ---------------------------------------------------------------------
Outcome grad_magnitude_shape() {
    int hits = 0;
    std::string detail;
    for (int seed = 1; seed <= kSeeds; ++seed) {
        ExperimentConfig c = default_config();
        c.num_chains = 32;
        c.scale = 1.0;
        c.guidance = GuidanceMode::Vanilla;
        c.master_seed = static_cast<std::uint64_t>(seed);
        const auto r = run_experiment(c, build_world(c), {1, true, false});
        double early = 0.0, late = 0.0;
        int early_n = 0, late_n = 0;
        for (const auto& tr : r.traces) {
            for (const auto& d : grad_magnitude_diff(tr)) {
                if (d.t >= 4 * c.T / 5) {
                    early += std::abs(d.delta);
                    ++early_n;
                } else if (d.t <= c.T / 5) {
                    late += std::abs(d.delta);
                    ++late_n;
                }
            }
        }
        early /= early_n;
        late /= late_n;
        hits += early > late ? 1 : 0;
        detail += fmt("s%d %.2e/%.2e ", seed, early, late);
    }
    return {hits >= kRequiredSeeds,
            fmt("%d/%d seeds early mean|d||g|| > late; early/late ", hits, kSeeds) + detail};
}

}  // namespace

int main(int argc, char** argv) {
    const std::vector<Criterion> criteria = {
        {1, "schedule law (|G| per k)", 1.0, schedule_law},
        {2, "raw schedule monotone in k", 5.0, schedule_monotonicity},
        {3, "cost law (gradient evaluations)", 10.0, cost_law},
        {4, "degenerate equivalence (full-schedule compress == vanilla)", 0.0, degenerate_equivalence},
        {5, "gradient checks vs finite differences", 5.0, gradient_checks},
        {6, "x0 estimate converges along the chain", 30.0, theorem1_diagnostic},
        {7, "sampler fidelity (NLL, diversity)", 120.0, sampler_fidelity},
        {8, "model-fitting direction", 0.0, model_fitting_direction},
        {9, "forgetting signature (early stop)", 0.0, forgetting_signature},
        {10, "non-convergence signature (uniform skip)", 0.0, nonconvergence_signature},
        {11, "classifier-free identities", 0.0, cfg_identities},
        {12, "gradient-magnitude shape", 0.0, grad_magnitude_shape},
    };
    std::set<int> only;
    for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));

    int failed = 0, ran = 0;
    for (const auto& cr : criteria) {
        if (!only.empty() && !only.count(cr.id)) continue;
        ++ran;
        const auto start = std::chrono::steady_clock::now();
        Outcome out;
        try {
            out = cr.run();
        } catch (const std::exception& e) {
            out = {false, std::string("exception: ") + e.what()};
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        if (cr.time_limit_s > 0.0 && secs >= cr.time_limit_s) {
            out.pass = false;
            out.detail += fmt(" [runtime %.2fs exceeds %.0fs]", secs, cr.time_limit_s);
        }
        if (!out.pass) ++failed;
        std::printf("[%s] AC%-2d %s: %s (%.2fs)\n", out.pass ? "PASS" : "FAIL", cr.id, cr.name.c_str(),
                    out.detail.c_str(), secs);
        std::fflush(stdout);
    }
    std::printf("%d/%d criteria passed\n", ran - failed, ran);
    return failed == 0 ? 0 : 1;
}
