#pragma once

// Experiment runner behind the kivi command-line tool: JSON experiment
// configs, training runs with optional baselines, run reports, report
// comparison and plot-data export.

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "kivi/oracles.hpp"
#include "kivi/posteriors.hpp"
#include "kivi/vi_core.hpp"

namespace kivi::harness {

inline constexpr const char* kConfigSchema = "kivi.experiment/1";
inline constexpr const char* kReportSchema = "kivi.run_report/1";

enum class ExperimentKind { gmm1d, blr2d, bnn_regression, amortized_ac, estimator_bench, kl_only };

ExperimentKind parse_kind(const std::string& name);
std::string to_string(ExperimentKind kind);

/// Invalid configuration; `field` is the dotted path of the offending entry.
struct ConfigError : std::runtime_error {
    ConfigError(std::string field, const std::string& message);
    std::string field;
};

struct GmmSpec {
    std::vector<double> means{-3.0, 3.0};
    std::vector<double> stds{1.0, 1.0};
    std::vector<double> weights{0.5, 0.5};
    double mode_radius = 1.5;  // mass within this distance counts toward a mode
};

struct BlrSpec {
    std::size_t n = 200;
    std::size_t dim = 2;
    std::string labels = "sampled";  // sampled | predicted
};

struct KlOnlySpec {
    std::size_t dim = 2;  // target N(0, I_dim)
};

struct BnnSpec {
    std::vector<std::size_t> hidden{50};
    // Synthetic sine data, used when no dataset path is given.
    std::size_t n_train = 200;
    std::size_t n_test = 200;
    double noise_std = 0.1;
    // CSV datasets.
    double train_fraction = 0.9;
    bool has_header = true;
    std::size_t predict_samples = 1000;
};

struct AmortizedSpec {
    std::size_t latent_dim = 2;
    std::size_t data_dim = 10;
    std::vector<std::size_t> decoder_hidden{16};
    std::size_t n_data = 200;
    std::string output = "bernoulli";  // bernoulli | gaussian
    std::size_t eval_points = 10;      // datapoints used by the identity check
    std::size_t eval_runs = 50;
};

struct BenchSpec {
    std::vector<std::size_t> dims{1, 2};
    std::vector<double> means{0.0, 0.5, 1.0};
    std::vector<double> stds{0.8, 1.0, 1.25};
    std::size_t n = 200;
    std::size_t refits = 20;
};

/// Variational family. noise_net and mmnn are implicit; for BNNs they are
/// built once per weight matrix.
struct PosteriorSpec {
    std::string kind = "noise_net";  // noise_net | mmnn | mean_field | planar_flow | gaussian_encoder | implicit_encoder
    std::size_t noise_dim = 1;
    std::vector<post::LayerSpec> hidden;  // an identity output layer is appended
    std::optional<std::size_t> noise_after;
    post::MatrixShape mmnn_input{10, 10};
    std::vector<post::MatrixShape> mmnn_hidden;
    double init_log_std = 0.0;
    bool random_mean = false;  // mean_field: initial mean ~ N(0, I)
    std::size_t flow_length = 4;
};

/// A tractable baseline trained on the exact-density ELBO.
struct BaselineSpec {
    bool enabled = false;
    std::size_t samples = 100;
    std::optional<std::size_t> iterations;  // default: the KIVI iterations
    std::optional<double> learning_rate;    // default: the KIVI rate
    double init_log_std = 0.0;
    bool random_mean = false;
    std::size_t flow_length = 4;
};

struct HmcSpec {
    bool enabled = false;
    oracles::HmcConfig config;
};

struct ExperimentConfig {
    ExperimentKind kind = ExperimentKind::gmm1d;
    std::uint64_t seed = 1;
    std::string output_dir = "runs/gmm1d";
    std::optional<std::string> dataset;  // bnn_regression CSV
    std::size_t final_samples = 5000;

    GmmSpec gmm;
    BlrSpec blr;
    KlOnlySpec kl_only;
    BnnSpec bnn;
    AmortizedSpec amortized;
    BenchSpec bench;

    PosteriorSpec posterior;
    vi::KiviConfig kivi;
    BaselineSpec mean_field;
    BaselineSpec planar_flow;
    HmcSpec hmc;

    /// Throws ConfigError.
    void validate() const;
};

/// Settings used for each experiment kind out of the box.
ExperimentConfig default_config(ExperimentKind kind);

/// Missing fields take the kind's defaults; unknown fields are rejected.
ExperimentConfig parse_config(const nlohmann::json& doc);
ExperimentConfig load_config(const std::string& path);
nlohmann::json to_json(const ExperimentConfig& config);

/// output_dir, placed under $KIVI_OUTPUT_ROOT when that is set and the
/// directory is relative.
std::filesystem::path resolve_output_dir(const ExperimentConfig& config);

struct RunOptions {
    std::ostream* log = nullptr;  // progress lines
};

struct RunReport {
    std::filesystem::path directory;
    nlohmann::json document;  // contents of metrics.json
    nlohmann::json timing;    // wall-clock data, kept out of metrics.json

    std::filesystem::path report_path() const { return directory / "report.json"; }
    std::filesystem::path metrics_path() const { return directory / "metrics.json"; }
};

/// Runs the experiment and writes config.json, metrics.json, report.json
/// (metrics plus timing), trace/timing CSVs and sample dumps. Throws
/// vi::NonFiniteLoss after writing the partial trace.
RunReport run(const ExperimentConfig& config, const RunOptions& options = {});

/// report.json from a run directory or the path of the file itself.
nlohmann::json load_report(const std::filesystem::path& path);

struct Comparison {
    std::vector<std::string> labels;  // one per report
    struct Row {
        std::string metric;
        std::vector<double> values;  // one per report
    };
    std::vector<Row> rows;

    /// metric, one column per report, then diff columns against the first.
    void write_csv(std::ostream& out) const;
    void write_text(std::ostream& out) const;
};

/// Side-by-side numeric metrics of reports of one experiment kind.
Comparison compare(const std::vector<nlohmann::json>& reports, const std::vector<std::string>& labels);

struct PlotDataOptions {
    std::size_t bins = 60;
    std::size_t grid = 101;
    std::optional<std::filesystem::path> out_dir;  // default: <run>/plotdata
};

/// Writes plot-data CSVs for a run and returns their paths.
std::vector<std::filesystem::path> export_plotdata(const std::filesystem::path& report,
                                                   const PlotDataOptions& options = {});

struct Histogram {
    std::vector<double> edges;   // bins + 1
    std::vector<std::size_t> counts;
    std::vector<double> density;  // counts / (in-range total * width)
};
Histogram histogram(const std::vector<double>& values, double lo, double hi, std::size_t bins);

/// Sample dumps: header z0..z{d-1}, one row per draw.
void write_samples_csv(const std::filesystem::path& path, const dre::Matrix& samples);
dre::Matrix read_samples_csv(const std::filesystem::path& path);

struct SampleSummary {
    dre::Vector mean;
    dre::Matrix cov;  // unbiased
    dre::Matrix corr;
};
SampleSummary summarize(const dre::Matrix& samples);

}  // namespace kivi::harness
