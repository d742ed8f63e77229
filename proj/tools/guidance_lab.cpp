// guidance_lab: command-line front end for the guided-sampling testbed.
//
//   guidance_lab run      --config cfg.json [--set key=value]... [--threads N] [--json]
//   guidance_lab sweep    --config cfg.json --axis k --values 1,2,3 [--set ...] [--json]
//   guidance_lab plot     trace1.csv [trace2.csv ...] -o curves.svg [--metric on|off] [--json]
//   guidance_lab schedule --T 250 --count 50 --k 2 [--mode power_law] [--json]
//
// Exit codes: 0 ok, 2 configuration error, 3 numeric failure at runtime.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "guidance_lab/plot.hpp"
#include "guidance_lab/runner.hpp"
#include "guidance_lab/schedule.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitNumeric = 3;

struct CommonOptions {
    std::string config_path;
    std::vector<std::string> overrides;
    std::optional<std::string> output_dir;
    unsigned threads = 0;
    bool json = false;
};

void add_common(CLI::App* cmd, CommonOptions& o) {
    cmd->add_option("-c,--config", o.config_path, "experiment config (JSON)");
    cmd->add_option("--set", o.overrides, "override a config key (key=value); repeatable");
    cmd->add_option("-o,--out", o.output_dir, "output directory (overrides output_dir)");
    cmd->add_option("--threads", o.threads,
                    "worker threads (default: GUIDANCE_LAB_THREADS or hardware concurrency)");
    cmd->add_flag("--json", o.json, "machine-readable output on stdout");
}

glab::ExperimentConfig load_config(const CommonOptions& o) {
    nlohmann::json j = nlohmann::json::object();
    if (!o.config_path.empty()) j = glab::load_json_file(o.config_path);
    glab::apply_overrides(j, o.overrides);
    if (o.output_dir) j["output_dir"] = *o.output_dir;
    auto cfg = glab::config_from_json(j);
    glab::validate(cfg);
    return cfg;
}

std::optional<unsigned> threads_of(const CommonOptions& o) {
    return o.threads > 0 ? std::optional<unsigned>(o.threads) : std::nullopt;
}

int cmd_run(const CommonOptions& o) {
    const auto cfg = load_config(o);
    const auto result = glab::run_experiment(cfg, glab::RunOptions{threads_of(o), true, false});
    glab::write_artifacts(result, cfg.output_dir);
    if (cfg.auto_scale) {
        std::cerr << "scale s = " << result.scale << ", effective s = " << result.effective_scale
                  << " (auto-scale T/|G|)\n";
    }
    const auto summary = glab::summary_json(result);
    if (o.json) {
        std::cout << summary.dump() << '\n';
    } else {
        std::cout << "wrote " << cfg.output_dir << "/{trace.csv,summary.json,schedule.json}\n"
                  << summary.dump(2) << '\n';
    }
    return kExitOk;
}

std::vector<double> parse_values(const std::string& csv) {
    std::vector<double> out;
    std::stringstream ss(csv);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item.empty()) continue;
        try {
            std::size_t pos = 0;
            out.push_back(std::stod(item, &pos));
            if (pos != item.size()) throw std::invalid_argument(item);
        } catch (const std::exception&) {
            throw glab::ConfigError("values", "not a number: '" + item + "'");
        }
    }
    return out;
}

int cmd_sweep(const CommonOptions& o, const std::string& axis, const std::string& values) {
    glab::SweepSpec spec{load_config(o), glab::sweep_axis_from_string(axis), parse_values(values)};
    try {
        const auto rows = glab::sweep(spec, glab::RunOptions{threads_of(o), true, false});
        if (o.json) {
            nlohmann::json arr = nlohmann::json::array();
            for (const auto& r : rows) {
                nlohmann::json row = r.summary;
                row["value"] = r.value;
                row["realized_G"] = r.realized_g;
                row["effective_scale"] = r.effective_scale;
                arr.push_back(row);
            }
            std::cout << nlohmann::json{{"axis", axis}, {"rows", arr}}.dump() << '\n';
        } else {
            glab::write_sweep_csv(std::cout, spec.axis, rows);
        }
    } catch (const glab::SweepError& e) {
        std::cerr << "error: " << e.what() << " (partial results in "
                  << spec.base.output_dir << "/sweep.csv)\n";
        return kExitNumeric;
    }
    return kExitOk;
}

int cmd_plot(const std::vector<std::string>& files, const std::string& out,
             const std::string& metric, bool json) {
    std::vector<std::filesystem::path> paths(files.begin(), files.end());
    const auto m = metric == "off" ? glab::PlotMetric::OffLoss : glab::PlotMetric::OnLoss;
    const std::string svg = glab::emit_plots(paths, m);
    std::ofstream(out) << svg;
    if (json) {
        std::cout << nlohmann::json{{"output", out}, {"series", files.size()}}.dump() << '\n';
    } else {
        std::cout << "wrote " << out << " (" << files.size() << " series)\n";
    }
    return kExitOk;
}

int cmd_schedule(int T, int count, double k, const std::string& mode, bool json) {
    const glab::ScheduleSpec spec{T, count, k, glab::schedule_mode_from_string(mode)};
    const auto sched = glab::make_schedule(spec);
    if (json) {
        nlohmann::json weights = nlohmann::json::array();
        for (const auto& w : glab::gap_weights(sched)) weights.push_back(w.weight);
        std::cout << nlohmann::json{{"spec", spec},
                                    {"steps", glab::schedule_to_json(sched)},
                                    {"size", sched.size()},
                                    {"gap_weights", weights}}
                         .dump()
                  << '\n';
    } else {
        std::cout << "|G| = " << sched.size() << "\n";
        for (std::size_t i = 0; i < sched.steps.size(); ++i) {
            std::cout << (i ? " " : "") << sched.steps[i];
        }
        std::cout << '\n';
    }
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Guided diffusion sampling on an analytic Gaussian-mixture testbed"};
    app.require_subcommand(1);

    CommonOptions run_opts;
    auto* run = app.add_subcommand("run", "run one experiment");
    add_common(run, run_opts);

    CommonOptions sweep_opts;
    std::string axis = "k";
    std::string values;
    auto* sweep = app.add_subcommand("sweep", "run one experiment per axis value");
    add_common(sweep, sweep_opts);
    sweep->add_option("--axis", axis, "k | compact_rate | scale")->required();
    sweep->add_option("--values", values, "comma-separated axis values")->required();

    std::vector<std::string> plot_files;
    std::string plot_out = "curves.svg";
    std::string plot_metric = "on";
    bool plot_json = false;
    auto* plot = app.add_subcommand("plot", "render batch-mean loss curves from trace CSVs");
    plot->add_option("traces", plot_files, "trace CSV files")->required();
    plot->add_option("-o,--out", plot_out, "output SVG path");
    plot->add_option("--metric", plot_metric, "on | off")->check(CLI::IsMember({"on", "off"}));
    plot->add_flag("--json", plot_json, "machine-readable output");

    int sched_T = 250;
    int sched_count = 50;
    double sched_k = 1.0;
    std::string sched_mode = "power_law";
    bool sched_json = false;
    auto* schedule = app.add_subcommand("schedule", "print a guidance schedule");
    schedule->add_option("--T", sched_T, "total sampling steps");
    schedule->add_option("--count", sched_count, "requested guidance steps |G|");
    schedule->add_option("--k", sched_k, "power-law exponent");
    schedule->add_option("--mode", sched_mode, "vanilla | early_stop | uniform | power_law");
    schedule->add_flag("--json", sched_json, "machine-readable output");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitConfig;
    }

    try {
        if (*run) return cmd_run(run_opts);
        if (*sweep) return cmd_sweep(sweep_opts, axis, values);
        if (*plot) return cmd_plot(plot_files, plot_out, plot_metric, plot_json);
        if (*schedule) return cmd_schedule(sched_T, sched_count, sched_k, sched_mode, sched_json);
    } catch (const glab::ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kExitConfig;
    } catch (const glab::TraceParseError& e) {
        std::cerr << "input error: " << e.what() << '\n';
        return kExitConfig;
    } catch (const std::invalid_argument& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kExitConfig;
    } catch (const glab::NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << '\n';
        return kExitNumeric;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitNumeric;
    }
    return kExitOk;
}
