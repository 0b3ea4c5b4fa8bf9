#pragma once

#include <json.hpp>

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace stochctl {

using Json = nlohmann::ordered_json;

struct CheckResult {
    std::string name;
    bool pass = false;
    std::string detail;
};

struct CsvTable {
    std::string name; // file stem
    std::string text; // header row first
};

struct ExperimentReport {
    std::string command;
    Json config = Json::object(); // resolved inputs, echoed verbatim into every artifact
    Json metrics = Json::object();
    std::vector<CheckResult> checks;
    std::vector<CsvTable> tables;
    std::string message;

    void check(std::string name, bool pass, std::string detail = {});
    bool pass() const;
};

struct ExperimentInput {
    std::string command;
    Json params = Json::object();
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> paths;
    std::optional<std::size_t> steps;
    std::optional<double> tol;
};

struct CommandInfo {
    std::string name;
    std::string summary;
    bool uses_paths = false;
    bool uses_steps = false;
    bool uses_tol = false;
    std::vector<std::string> keys; // accepted params
};

const std::vector<CommandInfo>& experiment_commands();
const CommandInfo* find_command(const std::string& name);

// Throws Error(Config) for unknown commands, unknown keys, inapplicable flags or malformed values,
// and Error(Resource) when the requested ensemble exceeds the memory budget.
ExperimentReport run_experiment(const ExperimentInput& input);

// Summary document: command, config echo, checks, metrics, pass flag.
Json report_summary(const ExperimentReport& report);

// "# {resolved config json}" line written ahead of every CSV header.
std::string provenance_comment(const ExperimentReport& report);

} // namespace stochctl
