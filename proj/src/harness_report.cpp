#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <ostream>
#include <sstream>

#include "kivi/harness.hpp"
#include "kivi/ops.hpp"

namespace kivi::harness {

namespace fs = std::filesystem;
using nlohmann::json;
using dre::Matrix;

namespace {

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

void flatten(const json& node, const std::string& prefix, std::vector<std::pair<std::string, double>>& out) {
    if (node.is_object()) {
        for (const auto& item : node.items()) flatten(item.value(), prefix.empty() ? item.key() : prefix + "." + item.key(), out);
    } else if (node.is_array()) {
        for (std::size_t i = 0; i < node.size(); ++i) flatten(node[i], prefix + "[" + std::to_string(i) + "]", out);
    } else if (node.is_boolean()) {
        out.emplace_back(prefix, node.get<bool>() ? 1.0 : 0.0);
    } else if (node.is_number()) {
        out.emplace_back(prefix, node.get<double>());
    }
}

fs::path report_dir(const fs::path& path) { return fs::is_directory(path) ? path : path.parent_path(); }

std::ofstream open_out(const fs::path& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    return out;
}

struct Bounds {
    std::vector<double> lo, hi;
};

Bounds bounds_of(const std::vector<Matrix>& clouds) {
    const auto d = static_cast<std::size_t>(clouds.front().cols());
    Bounds b{std::vector<double>(d, std::numeric_limits<double>::infinity()),
             std::vector<double>(d, -std::numeric_limits<double>::infinity())};
    for (const auto& m : clouds) {
        for (std::size_t c = 0; c < d; ++c) {
            b.lo[c] = std::min(b.lo[c], m.col(static_cast<Eigen::Index>(c)).minCoeff());
            b.hi[c] = std::max(b.hi[c], m.col(static_cast<Eigen::Index>(c)).maxCoeff());
        }
    }
    for (std::size_t c = 0; c < d; ++c) {
        const double pad = 0.05 * std::max(b.hi[c] - b.lo[c], 1e-6);
        b.lo[c] -= pad;
        b.hi[c] += pad;
    }
    return b;
}

double grid_point(double lo, double hi, std::size_t i, std::size_t n) {
    return n == 1 ? 0.5 * (lo + hi) : lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(n - 1);
}

// Unnormalized log target on a 2-D grid, or nothing when the run has no
// single target density.
std::optional<std::function<std::vector<double>(const Matrix&)>> log_target_2d(const ExperimentConfig& c) {
    if (c.kind == ExperimentKind::blr2d) {
        Rng data_rng = Rng(c.seed).split("data");
        const auto labels = c.blr.labels == "predicted" ? models::BlrLabels::predicted : models::BlrLabels::sampled;
        auto model = std::make_shared<models::BlrModel>(models::BlrModel::synthetic(c.blr.n, c.blr.dim, data_rng, labels));
        return [model](const Matrix& points) {
            const Tensor z = Tensor::matrix(static_cast<std::size_t>(points.rows()), 2,
                                            std::vector<double>(points.data(), points.data() + points.size()));
            return model->log_joint(z, &model->data()).to_vector();
        };
    }
    if (c.kind == ExperimentKind::kl_only) {
        return [](const Matrix& points) {
            std::vector<double> out;
            for (Eigen::Index i = 0; i < points.rows(); ++i) {
                out.push_back(-0.5 * points.row(i).squaredNorm() - std::log(2.0 * M_PI));
            }
            return out;
        };
    }
    return std::nullopt;
}

}  // namespace

// ------------------------------------------------------------ samples I/O

void write_samples_csv(const fs::path& path, const Matrix& samples) {
    auto out = open_out(path);
    for (Eigen::Index c = 0; c < samples.cols(); ++c) out << (c ? "," : "") << 'z' << c;
    out << '\n';
    for (Eigen::Index r = 0; r < samples.rows(); ++r) {
        for (Eigen::Index c = 0; c < samples.cols(); ++c) out << (c ? "," : "") << fmt(samples(r, c));
        out << '\n';
    }
}

Matrix read_samples_csv(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("missing sample dump '" + path.string() + "'");
    std::string line;
    if (!std::getline(in, line) || line.rfind("z0", 0) != 0) throw std::runtime_error(path.string() + ": not a sample dump");
    const auto cols = static_cast<std::size_t>(std::count(line.begin(), line.end(), ',') + 1);
    std::vector<double> values;
    std::size_t rows = 0;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string cell;
        std::size_t k = 0;
        while (std::getline(ss, cell, ',')) {
            values.push_back(std::stod(cell));
            ++k;
        }
        if (k != cols) throw std::runtime_error(path.string() + ": row " + std::to_string(rows + 1) + " has wrong width");
        ++rows;
    }
    Matrix m(rows, cols);
    std::copy(values.begin(), values.end(), m.data());
    return m;
}

SampleSummary summarize(const Matrix& samples) {
    if (samples.rows() < 2) throw std::invalid_argument("summarize: need at least two samples");
    SampleSummary s;
    s.mean = samples.colwise().mean().transpose();
    const Matrix centered = samples.rowwise() - s.mean.transpose();
    s.cov = centered.transpose() * centered / static_cast<double>(samples.rows() - 1);
    const dre::Vector sd = s.cov.diagonal().cwiseSqrt();
    s.corr = s.cov.array() / (sd * sd.transpose()).array();
    return s;
}

Histogram histogram(const std::vector<double>& values, double lo, double hi, std::size_t bins) {
    if (bins == 0 || !(hi > lo)) throw std::invalid_argument("histogram: need bins >= 1 and hi > lo");
    Histogram h;
    const double width = (hi - lo) / static_cast<double>(bins);
    for (std::size_t i = 0; i <= bins; ++i) h.edges.push_back(lo + width * static_cast<double>(i));
    h.counts.assign(bins, 0);
    std::size_t inside = 0;
    for (double v : values) {
        if (v < lo || v > hi) continue;
        auto k = static_cast<std::size_t>((v - lo) / width);
        ++h.counts[std::min(k, bins - 1)];
        ++inside;
    }
    for (auto c : h.counts) {
        h.density.push_back(inside ? static_cast<double>(c) / (static_cast<double>(inside) * width) : 0.0);
    }
    return h;
}

// ---------------------------------------------------------------- reports

json load_report(const fs::path& path) {
    const fs::path file = fs::is_directory(path) ? path / "report.json" : path;
    std::ifstream in(file);
    if (!in) throw std::runtime_error("cannot open report '" + file.string() + "'");
    json doc = json::parse(in);
    if (doc.value("schema", "") != kReportSchema) throw std::runtime_error(file.string() + ": not a kivi run report");
    return doc;
}

Comparison compare(const std::vector<json>& reports, const std::vector<std::string>& labels) {
    if (reports.size() < 2) throw std::invalid_argument("compare: need at least two reports");
    if (labels.size() != reports.size()) throw std::invalid_argument("compare: one label per report");
    const std::string kind = reports.front().at("kind").get<std::string>();
    for (const auto& r : reports) {
        if (r.at("kind").get<std::string>() != kind) {
            throw std::invalid_argument("compare: mismatched experiment kinds (" + kind + " vs " +
                                        r.at("kind").get<std::string>() + ")");
        }
    }
    Comparison out;
    out.labels = labels;
    std::map<std::string, std::size_t> index;
    for (std::size_t k = 0; k < reports.size(); ++k) {
        std::vector<std::pair<std::string, double>> flat;
        flatten(reports[k].at("metrics"), "", flat);
        for (const auto& [metric, value] : flat) {
            auto [it, inserted] = index.try_emplace(metric, out.rows.size());
            if (inserted) {
                out.rows.push_back({metric, std::vector<double>(reports.size(), std::numeric_limits<double>::quiet_NaN())});
            }
            out.rows[it->second].values[k] = value;
        }
    }
    return out;
}

void Comparison::write_csv(std::ostream& out) const {
    out << "metric";
    for (const auto& l : labels) out << ',' << l;
    for (std::size_t k = 1; k < labels.size(); ++k) out << ",diff_" << labels[k];
    out << '\n';
    for (const auto& row : rows) {
        out << row.metric;
        for (double v : row.values) out << ',' << (std::isnan(v) ? "" : fmt(v));
        for (std::size_t k = 1; k < row.values.size(); ++k) {
            const double d = row.values[k] - row.values[0];
            out << ',' << (std::isnan(d) ? "" : fmt(d));
        }
        out << '\n';
    }
}

void Comparison::write_text(std::ostream& out) const {
    std::size_t name_width = 6;
    for (const auto& row : rows) name_width = std::max(name_width, row.metric.size());
    std::size_t col = 14;
    for (const auto& l : labels) col = std::max(col, l.size() + 2);
    out << std::left << std::setw(static_cast<int>(name_width)) << "metric";
    for (const auto& l : labels) out << std::right << std::setw(static_cast<int>(col)) << l;
    if (labels.size() > 1) out << std::setw(static_cast<int>(col)) << "max |diff|";
    out << '\n';
    for (const auto& row : rows) {
        out << std::left << std::setw(static_cast<int>(name_width)) << row.metric << std::right;
        double worst = 0.0;
        for (std::size_t k = 0; k < row.values.size(); ++k) {
            std::ostringstream cell;
            if (std::isnan(row.values[k])) {
                cell << "-";
            } else {
                cell << std::setprecision(6) << row.values[k];
            }
            out << std::setw(static_cast<int>(col)) << cell.str();
            if (k > 0) worst = std::max(worst, std::abs(row.values[k] - row.values[0]));
        }
        if (labels.size() > 1) {
            std::ostringstream cell;
            cell << std::setprecision(3) << worst;
            out << std::setw(static_cast<int>(col)) << cell.str();
        }
        out << '\n';
    }
}

// -------------------------------------------------------------- plot data

std::vector<fs::path> export_plotdata(const fs::path& report_path, const PlotDataOptions& options) {
    const json report = load_report(report_path);
    const fs::path dir = report_dir(report_path);
    const ExperimentConfig config = parse_config(report.at("config"));
    const fs::path out_dir = options.out_dir ? *options.out_dir : dir / "plotdata";
    fs::create_directories(out_dir);
    std::vector<fs::path> written;

    const json& files = report.at("files");
    std::vector<std::string> methods;
    std::vector<Matrix> clouds;
    if (files.contains("samples")) {
        for (const auto& item : files.at("samples").items()) {
            methods.push_back(item.key());
            clouds.push_back(read_samples_csv(dir / item.value().get<std::string>()));
        }
    }

    if (config.kind == ExperimentKind::bnn_regression && files.contains("predictions")) {
        for (const auto& item : files.at("predictions").items()) {
            std::ifstream in(dir / item.value().get<std::string>());
            if (!in) throw std::runtime_error("missing predictions '" + item.value().get<std::string>() + "'");
            std::string line;
            std::getline(in, line);
            if (line.rfind("x0,y,", 0) != 0) continue;  // multi-feature inputs have no 1-D curve
            std::vector<std::array<double, 4>> rows;
            while (std::getline(in, line)) {
                std::array<double, 4> r{};
                if (std::sscanf(line.c_str(), "%lf,%lf,%lf,%lf", &r[0], &r[1], &r[2], &r[3]) == 4) rows.push_back(r);
            }
            std::sort(rows.begin(), rows.end());
            const fs::path path = out_dir / ("predictive_" + item.key() + ".csv");
            auto out = open_out(path);
            out << "x,y,mean,lower,upper\n";
            for (const auto& r : rows) {
                const double sd = std::sqrt(r[3]);
                out << fmt(r[0]) << ',' << fmt(r[1]) << ',' << fmt(r[2]) << ',' << fmt(r[2] - 2.0 * sd) << ','
                    << fmt(r[2] + 2.0 * sd) << '\n';
            }
            written.push_back(path);
        }
        return written;
    }

    if (clouds.empty()) throw std::runtime_error("report has no sample dumps to plot");
    const auto dim = clouds.front().cols();

    if (dim == 1) {
        Bounds b = bounds_of(clouds);
        if (config.kind == ExperimentKind::gmm1d) {
            for (std::size_t k = 0; k < config.gmm.means.size(); ++k) {
                b.lo[0] = std::min(b.lo[0], config.gmm.means[k] - 4.0 * config.gmm.stds[k]);
                b.hi[0] = std::max(b.hi[0], config.gmm.means[k] + 4.0 * config.gmm.stds[k]);
            }
        }
        for (std::size_t m = 0; m < methods.size(); ++m) {
            const auto& z = clouds[m];
            const Histogram h = histogram(std::vector<double>(z.data(), z.data() + z.size()), b.lo[0], b.hi[0], options.bins);
            const fs::path path = out_dir / ("hist_" + methods[m] + ".csv");
            auto out = open_out(path);
            out << "bin_left,bin_right,count,density\n";
            for (std::size_t i = 0; i < h.counts.size(); ++i) {
                out << fmt(h.edges[i]) << ',' << fmt(h.edges[i + 1]) << ',' << h.counts[i] << ',' << fmt(h.density[i]) << '\n';
            }
            written.push_back(path);
        }
        if (config.kind == ExperimentKind::gmm1d) {
            const models::GaussianMixtureTarget target(config.gmm.means, config.gmm.stds, config.gmm.weights);
            const fs::path path = out_dir / "true_density.csv";
            auto out = open_out(path);
            out << "z,density\n";
            for (std::size_t i = 0; i < options.grid; ++i) {
                const double z = grid_point(b.lo[0], b.hi[0], i, options.grid);
                out << fmt(z) << ',' << fmt(target.density(z)) << '\n';
            }
            written.push_back(path);
        }
        return written;
    }

    if (dim != 2) throw std::runtime_error("plot data covers 1-D and 2-D posteriors; this run has " + std::to_string(dim) + " dimensions");
    for (std::size_t m = 0; m < methods.size(); ++m) {
        const fs::path path = out_dir / ("scatter_" + methods[m] + ".csv");
        auto out = open_out(path);
        out << "z0,z1\n";
        for (Eigen::Index r = 0; r < clouds[m].rows(); ++r) out << fmt(clouds[m](r, 0)) << ',' << fmt(clouds[m](r, 1)) << '\n';
        written.push_back(path);
    }
    if (auto target = log_target_2d(config)) {
        const Bounds b = bounds_of(clouds);
        const std::size_t g = options.grid;
        Matrix points(g * g, 2);
        for (std::size_t i = 0; i < g; ++i) {
            for (std::size_t j = 0; j < g; ++j) {
                points(static_cast<Eigen::Index>(i * g + j), 0) = grid_point(b.lo[0], b.hi[0], i, g);
                points(static_cast<Eigen::Index>(i * g + j), 1) = grid_point(b.lo[1], b.hi[1], j, g);
            }
        }
        const std::vector<double> values = (*target)(points);
        const fs::path path = out_dir / "contour.csv";
        auto out = open_out(path);
        out << "z0,z1,log_density\n";
        for (Eigen::Index r = 0; r < points.rows(); ++r) {
            out << fmt(points(r, 0)) << ',' << fmt(points(r, 1)) << ',' << fmt(values[static_cast<std::size_t>(r)]) << '\n';
        }
        written.push_back(path);
    }
    return written;
}

}  // namespace kivi::harness
