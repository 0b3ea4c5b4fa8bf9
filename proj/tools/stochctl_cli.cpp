#include "stochctl/errors.hpp"
#include "stochctl/experiments.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

namespace fs = std::filesystem;
using stochctl::Json;

namespace {

enum Exit { kPass = 0, kAssertion = 1, kUsage = 2, kResource = 3 };

struct Flags {
    std::string config;
    std::string out;
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> paths;
    std::optional<std::size_t> steps;
    std::optional<double> tol;
    std::optional<std::size_t> instances;
};

Json load_config(const std::string& path)
{
    std::ifstream in(path);
    if (!in)
        stochctl::fail(stochctl::ErrorKind::Config, "cannot read config " + path);
    Json j;
    try {
        j = Json::parse(in, nullptr, true, true);
    } catch (const Json::parse_error& e) {
        stochctl::fail(stochctl::ErrorKind::Config, path + ": " + e.what());
    }
    stochctl::require(j.is_object(), stochctl::ErrorKind::Config, path + ": top level must be an object");
    for (const auto& [key, value] : j.items()) {
        (void)value;
        stochctl::require(key == "command" || key == "seed" || key == "paths" || key == "steps" || key == "tol" ||
                              key == "out" || key == "params",
                          stochctl::ErrorKind::Config, path + ": unknown key '" + key + "'");
    }
    return j;
}

template <class T>
std::optional<T> pick(const std::optional<T>& flag, const Json& cfg, const char* key)
{
    if (flag)
        return flag;
    if (!cfg.contains(key))
        return std::nullopt;
    try {
        return cfg[key].get<T>();
    } catch (const Json::exception&) {
        stochctl::fail(stochctl::ErrorKind::Config, std::string("config key '") + key + "' has the wrong type");
    }
}

// temp file + rename so readers never see a partial artifact
void write_atomic(const fs::path& path, const std::string& text)
{
    const fs::path tmp = path.parent_path() / ("." + path.filename().string() + ".tmp");
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os)
            stochctl::fail(stochctl::ErrorKind::Resource, "cannot write " + tmp.string());
        os << text;
        os.flush();
        if (!os)
            stochctl::fail(stochctl::ErrorKind::Resource, "write failed for " + tmp.string());
    }
    fs::rename(tmp, path);
}

int execute(const std::string& command, const Flags& f)
{
    const auto start = std::chrono::steady_clock::now();
    stochctl::ExperimentReport rep;
    fs::path out;
    try {
        const Json cfg = f.config.empty() ? Json::object() : load_config(f.config);
        if (cfg.contains("command") && cfg["command"] != command)
            stochctl::fail(stochctl::ErrorKind::Config,
                           "config is for '" + cfg["command"].get<std::string>() + "', not '" + command + "'");
        stochctl::ExperimentInput in;
        in.command = command;
        in.params = cfg.value("params", Json::object());
        in.seed = pick(f.seed, cfg, "seed");
        in.paths = pick(f.paths, cfg, "paths");
        in.steps = pick(f.steps, cfg, "steps");
        in.tol = pick(f.tol, cfg, "tol");
        if (f.instances)
            in.params["instances"] = *f.instances;
        const std::optional<std::string> out_cfg = pick(f.out.empty() ? std::nullopt : std::optional(f.out), cfg, "out");
        out = out_cfg.value_or("runs/" + command);
        rep = stochctl::run_experiment(in);
    } catch (const stochctl::Error& e) {
        std::cerr << "error (" << stochctl::error_kind_name(e.kind()) << "): " << e.what() << '\n';
        if (e.kind() == stochctl::ErrorKind::Config || e.kind() == stochctl::ErrorKind::Input ||
            e.kind() == stochctl::ErrorKind::Shape)
            return kUsage;
        if (e.kind() == stochctl::ErrorKind::Resource)
            return kResource;
        return kAssertion;
    } catch (const std::bad_alloc&) {
        std::cerr << "error (resource): out of memory\n";
        return kResource;
    }
    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

    for (const auto& c : rep.checks)
        std::cout << (c.pass ? "PASS " : "FAIL ") << c.name << (c.detail.empty() ? "" : ": " + c.detail) << '\n';
    if (!rep.message.empty())
        std::cout << rep.message << '\n';

    try {
        fs::create_directories(out);
        const std::string prov = stochctl::provenance_comment(rep);
        for (const auto& t : rep.tables)
            write_atomic(out / (t.name + ".csv"), prov + t.text);
        Json summary = stochctl::report_summary(rep);
        summary["wall_time_s"] = wall;
        write_atomic(out / "summary.json", summary.dump(2) + "\n");
    } catch (const std::exception& e) {
        std::cerr << "error (resource): " << e.what() << '\n';
        return kResource;
    }
    std::cout << (rep.pass() ? "pass" : "FAIL") << " (" << out.string() << ")\n";
    return rep.pass() ? kPass : kAssertion;
}

void add_flags(CLI::App* app, Flags& f, const stochctl::CommandInfo& info)
{
    app->add_option("--config", f.config, "JSON run configuration")->check(CLI::ExistingFile);
    app->add_option("--seed", f.seed, "RNG seed");
    app->add_option("--out", f.out, "output directory (default runs/<command>)");
    if (info.uses_paths)
        app->add_option("--paths", f.paths, "Monte Carlo paths P");
    if (info.uses_steps)
        app->add_option("--steps", f.steps, "time steps K");
    if (info.uses_tol)
        app->add_option("--tol", f.tol, "tolerance");
    if (info.name == "oracle-compare" || info.name == "stochastic-rank")
        app->add_option("--instances", f.instances, "random instances");
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"stochastic controllability experiments"};
    app.require_subcommand(1);
    Flags flags;
    std::string chosen;
    CLI::App* counter = app.add_subcommand("counterexamples", "explicit counterexamples");
    counter->require_subcommand(1);
    for (const auto& info : stochctl::experiment_commands()) {
        const bool nested = info.name == "eta-beta" || info.name == "bsde-324" || info.name == "remark52";
        CLI::App* sub = (nested ? counter : &app)->add_subcommand(info.name, info.summary);
        add_flags(sub, flags, info);
        sub->callback([&chosen, name = info.name] { chosen = name; });
    }
    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return e.get_exit_code() == 0 ? code : kUsage;
    }
    return execute(chosen, flags);
}
