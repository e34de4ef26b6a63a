// kivi: run experiments, compare run reports, export plot data.
//
//   kivi run <config.json> [--no-reverse-trick] [--output-dir DIR] [--quiet]
//   kivi compare <dir|report.json>... [--csv FILE]
//   kivi export-plotdata <report.json> [--out DIR] [--bins N] [--grid N]
//   kivi defaults <kind>
//
// Exit codes: 0 success, 1 other failure, 2 invalid config, 3 non-finite loss.

#include <CLI11.hpp>
#include <fstream>
#include <iostream>

#include "kivi/harness.hpp"

namespace fs = std::filesystem;
namespace h = kivi::harness;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitNonFinite = 3;

int cmd_run(const std::string& config_path, bool no_reverse, const std::string& output_dir, bool quiet) {
    h::ExperimentConfig config;
    try {
        config = h::load_config(config_path);
        if (no_reverse) config.kivi.reverse_trick = false;
        if (!output_dir.empty()) config.output_dir = output_dir;
        config.validate();
    } catch (const h::ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kExitConfig;
    }
    try {
        h::RunOptions options;
        if (!quiet) options.log = &std::cerr;
        const auto report = h::run(config, options);
        std::cout << report.report_path().string() << '\n';
        return 0;
    } catch (const h::ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kExitConfig;
    } catch (const kivi::vi::NonFiniteLoss& e) {
        std::cerr << "aborted: " << e.what() << " (partial trace kept in " << h::resolve_output_dir(config).string()
                  << ")\n";
        return kExitNonFinite;
    }
}

int cmd_compare(const std::vector<std::string>& paths, const std::string& csv_path) {
    std::vector<nlohmann::json> reports;
    std::vector<std::string> labels;
    for (const auto& p : paths) {
        reports.push_back(h::load_report(p));
        const fs::path dir = fs::is_directory(p) ? fs::path(p) : fs::path(p).parent_path();
        std::string label = dir.filename().string();
        if (label.empty() || label == ".") label = "run" + std::to_string(labels.size() + 1);
        labels.push_back(label);
    }
    for (std::size_t i = 0; i < labels.size(); ++i) {
        for (std::size_t j = 0; j < i; ++j) {
            if (labels[j] == labels[i]) {
                labels[i] += "#" + std::to_string(i + 1);
                break;
            }
        }
    }
    const auto table = h::compare(reports, labels);
    table.write_text(std::cout);
    if (!csv_path.empty()) {
        std::ofstream out(csv_path);
        if (!out) throw std::runtime_error("cannot write " + csv_path);
        table.write_csv(out);
    }
    return 0;
}

int cmd_export(const std::string& report, const std::string& out_dir, std::size_t bins, std::size_t grid) {
    h::PlotDataOptions options;
    options.bins = bins;
    options.grid = grid;
    if (!out_dir.empty()) options.out_dir = out_dir;
    for (const auto& path : h::export_plotdata(report, options)) std::cout << path.string() << '\n';
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Kernel implicit variational inference experiments"};
    app.require_subcommand(1);

    std::string config_path, output_dir;
    bool no_reverse = false, quiet = false;
    auto* run = app.add_subcommand("run", "Run an experiment from a JSON config");
    run->add_option("config", config_path, "Experiment config (JSON)")->required();
    run->add_flag("--no-reverse-trick", no_reverse, "Fit q/p directly instead of p/q");
    run->add_option("--output-dir", output_dir, "Override the config's output directory");
    run->add_flag("-q,--quiet", quiet, "No progress output");

    std::vector<std::string> compare_paths;
    std::string csv_path;
    auto* compare = app.add_subcommand("compare", "Compare run reports of one experiment kind");
    compare->add_option("reports", compare_paths, "Run directories or report.json files")->required()->expected(2, -1);
    compare->add_option("--csv", csv_path, "Also write the table as CSV");

    std::string report_path, plot_dir;
    std::size_t bins = 60, grid = 101;
    auto* plot = app.add_subcommand("export-plotdata", "Write histogram, scatter and grid CSVs for a run");
    plot->add_option("report", report_path, "report.json or run directory")->required();
    plot->add_option("--out", plot_dir, "Output directory (default <run>/plotdata)");
    plot->add_option("--bins", bins, "Histogram bins")->check(CLI::PositiveNumber);
    plot->add_option("--grid", grid, "Grid points per axis")->check(CLI::PositiveNumber);

    std::string kind_name;
    auto* defaults = app.add_subcommand("defaults", "Print the default config for an experiment kind");
    defaults->add_option("kind", kind_name, "gmm1d | blr2d | bnn_regression | amortized_ac | estimator_bench | kl_only")
        ->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }

    try {
        if (*run) return cmd_run(config_path, no_reverse, output_dir, quiet);
        if (*compare) return cmd_compare(compare_paths, csv_path);
        if (*plot) return cmd_export(report_path, plot_dir, bins, grid);
        if (*defaults) {
            std::cout << h::to_json(h::default_config(h::parse_kind(kind_name))).dump(2) << '\n';
            return 0;
        }
    } catch (const h::ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kExitConfig;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
