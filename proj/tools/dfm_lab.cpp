// dfm_lab: experiment driver for the discrete flow matching lab.
//
//   dfm_lab simulate        --config cfg.json [--seed N] [--out-dir DIR] [--format json|csv]
//   dfm_lab train           ...
//   dfm_lab verify-bounds   ... [--checkpoint model.json ...]
//   dfm_lab rate-sweep      ...
//   dfm_lab extension-check ...
//
// Exit status is 0 iff every asserted invariant of the run holds, 1 if one fails, 2 on a
// runtime error. Argument errors exit with CLI11's codes.
#include <CLI11.hpp>

#include <filesystem>
#include <iostream>

#include "dfm/harness.hpp"
#include "dfm/io.hpp"

namespace fs = std::filesystem;
using namespace dfm;
using nlohmann::json;

namespace {

struct Options {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out_dir;
    std::string format = "json";
    std::vector<std::string> checkpoints;
};

struct Run {
    ExperimentConfig cfg;
    fs::path out;
    bool csv = false;

    std::string path(const std::string& name) const { return (out / name).string(); }
};

Run prepare(const Options& o) {
    Run r;
    r.cfg = io::experiment_from_json(io::read_json(o.config));
    if (o.seed) r.cfg.seeds = {*o.seed};
    if (!o.out_dir.empty()) r.cfg.out_dir = o.out_dir;
    r.out = r.cfg.out_dir;
    r.csv = o.format == "csv";
    fs::create_directories(r.out);
    io::write_json(r.path("config.json"), io::to_json(r.cfg));
    return r;
}

void write_distribution_csv(const std::string& path, const StateSpace& space,
                            const std::vector<std::pair<std::string, Vector>>& columns) {
    std::vector<std::string> header{"index", "state"};
    for (const auto& c : columns) header.push_back(c.first);
    io::CsvTable t(header);
    for (StateIndex s = 0; s < space.size(); ++s) {
        std::ostringstream os;
        os << std::setprecision(17) << s << ',' << io::state_label(state_of(space, s));
        for (const auto& c : columns) os << ',' << c.second(static_cast<Eigen::Index>(s));
        t.row(os.str());
    }
    t.write(path);
}

void write_training(const Run& r, const std::vector<TrainResult>& training, const std::string& tag) {
    for (std::size_t i = 0; i < training.size(); ++i) {
        const auto suffix = tag + "_coord" + std::to_string(i);
        io::write_json(r.path("checkpoint" + suffix + ".json"), io::checkpoint(training[i].model));
        std::vector<json> lines;
        for (const auto& e : training[i].log) lines.push_back(io::to_json(e));
        io::write_json_lines(r.path("train_log" + suffix + ".jsonl"), lines);
    }
}

void log_line(bool ok, const std::string& what) { std::cout << (ok ? "ok   " : "FAIL ") << what << '\n'; }

int cmd_simulate(const Options& o) {
    const Run r = prepare(o);
    const MixturePathSpec spec = r.cfg.spec();
    bool ok = true;
    json reports = json::array();
    for (std::uint64_t seed : r.cfg.seeds) {
        const auto rep = run_simulate(r.cfg, seed);
        ok = ok && rep.pass;
        json j = io::to_json(rep);
        j["seed"] = seed;
        reports.push_back(j);
        log_line(rep.pass, "simulate seed " + std::to_string(seed) + ": TV(Euler, exact) = " + std::to_string(rep.tv));

        const std::string tag = "_seed" + std::to_string(seed);
        std::vector<json> lines;
        for (std::size_t p = 0; p < rep.trajectories.size(); ++p)
            for (std::size_t k = 0; k < rep.step_times.size(); ++k)
                lines.push_back({{"path", p}, {"t", rep.step_times[k]}, {"state", io::to_json(rep.trajectories[p][k])}});
        io::write_json_lines(r.path("trajectories" + tag + ".jsonl"), lines);
        if (r.csv)
            write_distribution_csv(r.path("marginal" + tag + ".csv"), spec.space,
                                   {{"exact", rep.exact}, {"euler", rep.empirical}});
    }
    // Exact marginal path of the mixture, streamed on the ODE grid.
    const auto traj = solve_kolmogorov(marginal_rates_field(spec), marginal_path(spec, spec.clip.t0), spec.clip.t0,
                                       spec.clip.T, r.cfg.ode_steps);
    std::vector<json> lines;
    for (std::size_t k = 0; k < traj.times.size(); ++k)
        lines.push_back({{"t", traj.times[k]}, {"p", io::to_json(traj.probs[k])}});
    io::write_json_lines(r.path("marginal_path.jsonl"), lines);
    io::write_json(r.path("simulate_report.json"), {{"pass", ok}, {"runs", reports}});
    return ok ? 0 : 1;
}

int cmd_train(const Options& o) {
    const Run r = prepare(o);
    const MixturePathSpec spec = r.cfg.spec();
    check_enumerable(spec.space);
    bool ok = true;
    json runs = json::array();
    io::CsvTable table({"seed", "coordinate", "final_loss", "risk", "l_t_bound", "empirical_lipschitz"});
    for (std::uint64_t seed : r.cfg.seeds) {
        const auto samples = draw_samples(spec, r.cfg.train.n_samples, seed);
        const auto training = train_coordinate_models(spec, samples, r.cfg.model, r.cfg.train, seed);
        write_training(r, training, "_seed" + std::to_string(seed));
        for (const auto& t : training) {
            const int i = t.model.coordinate();
            const auto risk = risk_exact(t.model, spec, i, r.cfg.risk_grid);
            // The Lipschitz bound must dominate the sampled difference quotients on the input set.
            const double radius = param_norms(t.model, 1.0).b_x_observed;
            const auto norms = param_norms(t.model, radius);
            Rng rng = make_rng(seed + 7919ULL * static_cast<std::uint64_t>(i));
            const double emp = empirical_lipschitz(t.model, 10000, radius, rng);
            const bool lip_ok = emp <= norms.l_t_bound;
            ok = ok && lip_ok;
            runs.push_back({{"seed", seed},
                            {"coordinate", i},
                            {"final_loss", t.loss_curve.empty() ? 0.0 : t.loss_curve.back()},
                            {"risk", io::to_json(risk)},
                            {"norms", io::to_json(norms)},
                            {"empirical_lipschitz", emp},
                            {"lipschitz_ok", lip_ok}});
            table.row(seed, i, t.loss_curve.empty() ? 0.0 : t.loss_curve.back(), risk.risk, norms.l_t_bound, emp);
            log_line(lip_ok, "train seed " + std::to_string(seed) + " coordinate " + std::to_string(i) +
                                 ": risk = " + std::to_string(risk.risk));
        }
    }
    io::write_json(r.path("train_report.json"), {{"pass", ok}, {"runs", runs}});
    if (r.csv) table.write(r.path("train_report.csv"));
    return ok ? 0 : 1;
}

int cmd_verify_bounds(const Options& o) {
    const Run r = prepare(o);
    const MixturePathSpec spec = r.cfg.spec();
    check_enumerable(spec.space);
    bool ok = true;
    json runs = json::array();
    io::CsvTable table({"estimator", "seed", "risk_sum", "tv_exact", "tv_mc", "gap_integral", "slack",
                        "rhs_factorized", "rhs_general", "pass"});
    auto record = [&](const BoundReport& rep) {
        ok = ok && rep.pass;
        runs.push_back(io::to_json(rep));
        double risk_sum = 0.0;
        for (double x : rep.risks) risk_sum += x;
        table.row(rep.estimator, rep.seed, risk_sum, rep.tv_exact, rep.tv_mc, rep.gap_integral, rep.slack,
                  rep.forms.factorized, rep.forms.general, rep.pass ? "true" : "false");
        std::string what = rep.estimator + " seed " + std::to_string(rep.seed) + ": TV = " +
                           std::to_string(rep.tv_exact) + " <= " + std::to_string(rep.gap_integral) + " + tol";
        for (const auto& f : rep.failures) what += "; " + f;
        log_line(rep.pass, what);
    };
    if (!o.checkpoints.empty()) {
        std::vector<TransformerModel> models;
        for (const auto& p : o.checkpoints) models.push_back(io::model_from_checkpoint(io::read_json(p)));
        if (static_cast<int>(models.size()) != spec.space.length())
            throw DomainError("verify-bounds needs one checkpoint per coordinate (" +
                              std::to_string(spec.space.length()) + "), got " + std::to_string(models.size()));
        std::sort(models.begin(), models.end(),
                  [](const auto& a, const auto& b) { return a.coordinate() < b.coordinate(); });
        for (int i = 0; i < spec.space.length(); ++i)
            if (models[static_cast<std::size_t>(i)].coordinate() != i || !(models[static_cast<std::size_t>(i)].space() == spec.space))
                throw DomainError("checkpoints do not cover every coordinate of the configured space");
        for (std::uint64_t seed : r.cfg.seeds) record(evaluate_bound(r.cfg, spec, model_estimator(models), "checkpoint", seed));
    } else {
        for (std::uint64_t seed : r.cfg.seeds) {
            const auto res = run_bound_check(r.cfg, seed);
            write_training(r, res.training, "_seed" + std::to_string(seed));
            record(res.report);
        }
    }
    io::write_json(r.path("bound_report.json"), {{"pass", ok}, {"runs", runs}});
    if (r.csv) table.write(r.path("bound_report.csv"));
    return ok ? 0 : 1;
}

int cmd_rate_sweep(const Options& o) {
    const Run r = prepare(o);
    const auto rep = run_rate_sweep(r.cfg, r.cfg.n_grid);
    io::write_json(r.path("rate_sweep.json"), io::to_json(rep));
    io::CsvTable table({"n", "median_risk", "median_tv"});
    for (const auto& row : rep.rows) {
        table.row(row.n, row.median_risk, row.median_tv);
        log_line(true, "n = " + std::to_string(row.n) + ": median risk " + std::to_string(row.median_risk));
    }
    if (r.csv) table.write(r.path("rate_sweep.csv"));
    log_line(rep.pass, "median risk non-increasing and slope " + std::to_string(rep.slope) + " < 0");
    return rep.pass ? 0 : 1;
}

int cmd_extension_check(const Options& o) {
    const Run r = prepare(o);
    bool ok = true;
    json runs = json::array();
    io::CsvTable table({"seed", "empirical", "bound", "l_u", "m_u", "interpolation_mismatches", "pass"});
    for (std::uint64_t seed : r.cfg.seeds) {
        const auto rep = run_extension_check(r.cfg, seed);
        ok = ok && rep.pass;
        json j = io::to_json(rep);
        j["seed"] = seed;
        runs.push_back(j);
        table.row(seed, rep.lipschitz.empirical, rep.lipschitz.bound, rep.lipschitz.l_u, rep.lipschitz.m_u,
                  rep.interpolation_mismatches, rep.pass ? "true" : "false");
        log_line(rep.pass, "extension seed " + std::to_string(seed) + ": empirical " +
                               std::to_string(rep.lipschitz.empirical) + " <= bound " +
                               std::to_string(rep.lipschitz.bound));
    }
    io::write_json(r.path("extension_table.json"), io::to_json(marginal_extension(r.cfg.spec(), r.cfg.extension_times)));
    io::write_json(r.path("extension_report.json"), {{"pass", ok}, {"runs", runs}});
    if (r.csv) table.write(r.path("extension_report.csv"));
    return ok ? 0 : 1;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Discrete flow matching lab"};
    app.require_subcommand(1);
    Options opt;
    std::vector<std::pair<CLI::App*, int (*)(const Options&)>> commands;
    auto add = [&](const char* name, const char* help, int (*fn)(const Options&)) {
        CLI::App* sub = app.add_subcommand(name, help);
        sub->add_option("--config", opt.config, "experiment config (JSON)")->required()->check(CLI::ExistingFile);
        sub->add_option("--seed", opt.seed, "run a single seed instead of the config's seed list");
        sub->add_option("--out-dir", opt.out_dir, "output directory (overrides the config)");
        sub->add_option("--format", opt.format, "table format")->check(CLI::IsMember({"json", "csv"}));
        commands.emplace_back(sub, fn);
        return sub;
    };
    add("simulate", "Euler sampling of the exact marginal velocity against the Kolmogorov solution", cmd_simulate);
    add("train", "train per-coordinate transformers and write checkpoints, logs and risks", cmd_train);
    add("verify-bounds", "check the TV bound for an oracle, perturbed or trained estimator", cmd_verify_bounds)
        ->add_option("--checkpoint", opt.checkpoints, "evaluate these checkpoints (one per coordinate) instead of training");
    add("rate-sweep", "median risk and TV against training-set size", cmd_rate_sweep);
    add("extension-check", "Lipschitz check of the bump-function extension of the marginal velocity", cmd_extension_check);

    CLI11_PARSE(app, argc, argv);
    try {
        for (const auto& [sub, fn] : commands)
            if (sub->parsed()) return fn(opt);
    } catch (const std::exception& e) {
        std::cerr << "dfm_lab: " << e.what() << '\n';
        return 2;
    }
    return 2;
}
