#include <cstdlib>
#include <fstream>
#include <set>

#include "kivi/harness.hpp"

namespace kivi::harness {

using nlohmann::json;

namespace {

const std::pair<ExperimentKind, const char*> kKinds[] = {
    {ExperimentKind::gmm1d, "gmm1d"},
    {ExperimentKind::blr2d, "blr2d"},
    {ExperimentKind::bnn_regression, "bnn_regression"},
    {ExperimentKind::amortized_ac, "amortized_ac"},
    {ExperimentKind::estimator_bench, "estimator_bench"},
    {ExperimentKind::kl_only, "kl_only"},
};

std::string join(const std::string& path, const std::string& key) { return path.empty() ? key : path + "." + key; }

// Reads fields of one JSON object, remembering which keys were consumed so
// leftovers can be reported.
class Reader {
public:
    Reader(const json& doc, std::string path) : doc_(doc), path_(std::move(path)) {
        if (!doc_.is_object()) throw ConfigError(path_.empty() ? "<root>" : path_, "expected an object");
    }

    template <class T>
    void get(const std::string& key, T& out) {
        seen_.insert(key);
        const auto it = doc_.find(key);
        if (it == doc_.end()) return;
        try {
            out = it->template get<T>();
        } catch (const json::exception& e) {
            throw ConfigError(join(path_, key), std::string("wrong type: ") + e.what());
        }
    }

    template <class T>
    void get(const std::string& key, std::optional<T>& out) {
        seen_.insert(key);
        const auto it = doc_.find(key);
        if (it == doc_.end()) return;
        if (it->is_null()) {
            out.reset();
            return;
        }
        T value{};
        get(key, value);
        out = value;
    }

    /// Sub-object, or nullptr when absent.
    const json* child(const std::string& key) {
        seen_.insert(key);
        const auto it = doc_.find(key);
        return it == doc_.end() ? nullptr : &*it;
    }

    std::string path(const std::string& key) const { return join(path_, key); }

    void finish() const {
        for (const auto& item : doc_.items()) {
            if (!seen_.count(item.key())) throw ConfigError(join(path_, item.key()), "unknown field");
        }
    }

private:
    const json& doc_;
    std::string path_;
    std::set<std::string> seen_;
};

json layers_to_json(const std::vector<post::LayerSpec>& layers) {
    json out = json::array();
    for (const auto& l : layers) out.push_back({{"width", l.width}, {"activation", post::to_string(l.activation)}});
    return out;
}

std::vector<post::LayerSpec> layers_from_json(const json& doc, const std::string& path) {
    if (!doc.is_array()) throw ConfigError(path, "expected an array of layers");
    std::vector<post::LayerSpec> out;
    for (std::size_t i = 0; i < doc.size(); ++i) {
        const std::string p = path + "[" + std::to_string(i) + "]";
        Reader r(doc[i], p);
        post::LayerSpec l;
        std::string act = post::to_string(l.activation);
        r.get("width", l.width);
        r.get("activation", act);
        r.finish();
        try {
            l.activation = post::parse_activation(act);
        } catch (const std::invalid_argument& e) {
            throw ConfigError(p + ".activation", e.what());
        }
        out.push_back(l);
    }
    return out;
}

json shape_to_json(post::MatrixShape s) { return json::array({s.rows, s.cols}); }

post::MatrixShape shape_from_json(const json& doc, const std::string& path) {
    if (!doc.is_array() || doc.size() != 2) throw ConfigError(path, "expected [rows, cols]");
    try {
        return {doc[0].get<std::size_t>(), doc[1].get<std::size_t>()};
    } catch (const json::exception& e) {
        throw ConfigError(path, std::string("wrong type: ") + e.what());
    }
}

json optional_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }
json optional_json(const std::optional<std::size_t>& v) { return v ? json(*v) : json(nullptr); }

// ---------------------------------------------------------------- sections

json to_json(const PosteriorSpec& p) {
    json mmnn_hidden = json::array();
    for (const auto& s : p.mmnn_hidden) mmnn_hidden.push_back(shape_to_json(s));
    return {{"kind", p.kind},
            {"noise_dim", p.noise_dim},
            {"hidden", layers_to_json(p.hidden)},
            {"noise_after", optional_json(p.noise_after)},
            {"mmnn_input", shape_to_json(p.mmnn_input)},
            {"mmnn_hidden", mmnn_hidden},
            {"init_log_std", p.init_log_std},
            {"random_mean", p.random_mean},
            {"flow_length", p.flow_length}};
}

void from_json(const json& doc, const std::string& path, PosteriorSpec& p) {
    Reader r(doc, path);
    r.get("kind", p.kind);
    r.get("noise_dim", p.noise_dim);
    if (const json* h = r.child("hidden")) p.hidden = layers_from_json(*h, r.path("hidden"));
    r.get("noise_after", p.noise_after);
    if (const json* s = r.child("mmnn_input")) p.mmnn_input = shape_from_json(*s, r.path("mmnn_input"));
    if (const json* h = r.child("mmnn_hidden")) {
        if (!h->is_array()) throw ConfigError(r.path("mmnn_hidden"), "expected an array of [rows, cols]");
        p.mmnn_hidden.clear();
        for (std::size_t i = 0; i < h->size(); ++i) {
            p.mmnn_hidden.push_back(shape_from_json((*h)[i], r.path("mmnn_hidden") + "[" + std::to_string(i) + "]"));
        }
    }
    r.get("init_log_std", p.init_log_std);
    r.get("random_mean", p.random_mean);
    r.get("flow_length", p.flow_length);
    r.finish();
}

json to_json(const vi::KiviConfig& k) {
    const auto& o = k.optimizer;
    return {{"n_p", k.n_p},
            {"n_q", k.n_q},
            {"M", k.M},
            {"kernel",
             {{"bandwidth", optional_json(k.kernel.bandwidth)}, {"lambda", k.kernel.lambda}, {"clip", k.kernel.clip}}},
            {"optimizer",
             {{"name", o.name},
              {"learning_rate", o.learning_rate},
              {"beta1", o.beta1},
              {"beta2", o.beta2},
              {"epsilon", o.epsilon},
              {"schedule",
               {{"kind", vi::to_string(o.schedule.kind)}, {"every", o.schedule.every}, {"ratio", o.schedule.ratio}}}}},
            {"iterations", k.iterations},
            {"batch_size", k.batch_size},
            {"reverse_trick", k.reverse_trick},
            {"kl_estimator", k.kl_estimator == vi::KlEstimator::kernel ? "kernel" : "sample_density"},
            {"kl_per_block", k.kl_per_block}};
}

void from_json(const json& doc, const std::string& path, vi::KiviConfig& k) {
    Reader r(doc, path);
    r.get("n_p", k.n_p);
    r.get("n_q", k.n_q);
    r.get("M", k.M);
    if (const json* kd = r.child("kernel")) {
        Reader kr(*kd, r.path("kernel"));
        kr.get("bandwidth", k.kernel.bandwidth);
        kr.get("lambda", k.kernel.lambda);
        kr.get("clip", k.kernel.clip);
        kr.finish();
    }
    if (const json* od = r.child("optimizer")) {
        Reader orr(*od, r.path("optimizer"));
        auto& o = k.optimizer;
        orr.get("name", o.name);
        orr.get("learning_rate", o.learning_rate);
        orr.get("beta1", o.beta1);
        orr.get("beta2", o.beta2);
        orr.get("epsilon", o.epsilon);
        if (const json* sd = orr.child("schedule")) {
            Reader sr(*sd, orr.path("schedule"));
            std::string kind = vi::to_string(o.schedule.kind);
            sr.get("kind", kind);
            sr.get("every", o.schedule.every);
            sr.get("ratio", o.schedule.ratio);
            sr.finish();
            try {
                o.schedule.kind = vi::parse_schedule(kind);
            } catch (const std::invalid_argument& e) {
                throw ConfigError(sr.path("kind"), e.what());
            }
        }
        orr.finish();
    }
    r.get("iterations", k.iterations);
    r.get("batch_size", k.batch_size);
    r.get("reverse_trick", k.reverse_trick);
    std::string estimator = k.kl_estimator == vi::KlEstimator::kernel ? "kernel" : "sample_density";
    r.get("kl_estimator", estimator);
    if (estimator == "kernel") {
        k.kl_estimator = vi::KlEstimator::kernel;
    } else if (estimator == "sample_density") {
        k.kl_estimator = vi::KlEstimator::sample_density;
    } else {
        throw ConfigError(r.path("kl_estimator"), "unknown KL estimator '" + estimator + "'");
    }
    r.get("kl_per_block", k.kl_per_block);
    r.finish();
}

json to_json(const BaselineSpec& b) {
    return {{"enabled", b.enabled},
            {"samples", b.samples},
            {"iterations", optional_json(b.iterations)},
            {"learning_rate", optional_json(b.learning_rate)},
            {"init_log_std", b.init_log_std},
            {"random_mean", b.random_mean},
            {"flow_length", b.flow_length}};
}

void from_json(const json& doc, const std::string& path, BaselineSpec& b) {
    Reader r(doc, path);
    r.get("enabled", b.enabled);
    r.get("samples", b.samples);
    r.get("iterations", b.iterations);
    r.get("learning_rate", b.learning_rate);
    r.get("init_log_std", b.init_log_std);
    r.get("random_mean", b.random_mean);
    r.get("flow_length", b.flow_length);
    r.finish();
}

json to_json(const HmcSpec& h) {
    const auto& c = h.config;
    return {{"enabled", h.enabled},
            {"chains", c.chains},
            {"iterations", c.iterations},
            {"leapfrog_steps", c.leapfrog_steps},
            {"initial_step_size", c.initial_step_size},
            {"target_accept", c.target_accept},
            {"burn_in", optional_json(c.burn_in)},
            {"step_jitter", c.step_jitter}};
}

void from_json(const json& doc, const std::string& path, HmcSpec& h) {
    Reader r(doc, path);
    auto& c = h.config;
    r.get("enabled", h.enabled);
    r.get("chains", c.chains);
    r.get("iterations", c.iterations);
    r.get("leapfrog_steps", c.leapfrog_steps);
    r.get("initial_step_size", c.initial_step_size);
    r.get("target_accept", c.target_accept);
    r.get("burn_in", c.burn_in);
    r.get("step_jitter", c.step_jitter);
    r.finish();
}

json model_to_json(const ExperimentConfig& c) {
    switch (c.kind) {
        case ExperimentKind::gmm1d:
            return {{"means", c.gmm.means}, {"stds", c.gmm.stds}, {"weights", c.gmm.weights},
                    {"mode_radius", c.gmm.mode_radius}};
        case ExperimentKind::blr2d:
            return {{"n", c.blr.n}, {"dim", c.blr.dim}, {"labels", c.blr.labels}};
        case ExperimentKind::kl_only:
            return {{"dim", c.kl_only.dim}};
        case ExperimentKind::bnn_regression:
            return {{"hidden", c.bnn.hidden},       {"n_train", c.bnn.n_train},
                    {"n_test", c.bnn.n_test},       {"noise_std", c.bnn.noise_std},
                    {"train_fraction", c.bnn.train_fraction}, {"has_header", c.bnn.has_header},
                    {"predict_samples", c.bnn.predict_samples}};
        case ExperimentKind::amortized_ac:
            return {{"latent_dim", c.amortized.latent_dim},   {"data_dim", c.amortized.data_dim},
                    {"decoder_hidden", c.amortized.decoder_hidden}, {"n_data", c.amortized.n_data},
                    {"output", c.amortized.output},           {"eval_points", c.amortized.eval_points},
                    {"eval_runs", c.amortized.eval_runs}};
        case ExperimentKind::estimator_bench:
            return {{"dims", c.bench.dims}, {"means", c.bench.means}, {"stds", c.bench.stds},
                    {"n", c.bench.n},       {"refits", c.bench.refits}};
    }
    return json::object();
}

void model_from_json(const json& doc, const std::string& path, ExperimentConfig& c) {
    Reader r(doc, path);
    switch (c.kind) {
        case ExperimentKind::gmm1d:
            r.get("means", c.gmm.means);
            r.get("stds", c.gmm.stds);
            r.get("weights", c.gmm.weights);
            r.get("mode_radius", c.gmm.mode_radius);
            break;
        case ExperimentKind::blr2d:
            r.get("n", c.blr.n);
            r.get("dim", c.blr.dim);
            r.get("labels", c.blr.labels);
            break;
        case ExperimentKind::kl_only:
            r.get("dim", c.kl_only.dim);
            break;
        case ExperimentKind::bnn_regression:
            r.get("hidden", c.bnn.hidden);
            r.get("n_train", c.bnn.n_train);
            r.get("n_test", c.bnn.n_test);
            r.get("noise_std", c.bnn.noise_std);
            r.get("train_fraction", c.bnn.train_fraction);
            r.get("has_header", c.bnn.has_header);
            r.get("predict_samples", c.bnn.predict_samples);
            break;
        case ExperimentKind::amortized_ac:
            r.get("latent_dim", c.amortized.latent_dim);
            r.get("data_dim", c.amortized.data_dim);
            r.get("decoder_hidden", c.amortized.decoder_hidden);
            r.get("n_data", c.amortized.n_data);
            r.get("output", c.amortized.output);
            r.get("eval_points", c.amortized.eval_points);
            r.get("eval_runs", c.amortized.eval_runs);
            break;
        case ExperimentKind::estimator_bench:
            r.get("dims", c.bench.dims);
            r.get("means", c.bench.means);
            r.get("stds", c.bench.stds);
            r.get("n", c.bench.n);
            r.get("refits", c.bench.refits);
            break;
    }
    r.finish();
}

void require(bool ok, const std::string& field, const std::string& message) {
    if (!ok) throw ConfigError(field, message);
}

}  // namespace

ConfigError::ConfigError(std::string field_name, const std::string& message)
    : std::runtime_error(field_name + ": " + message), field(std::move(field_name)) {}

ExperimentKind parse_kind(const std::string& name) {
    for (const auto& [kind, text] : kKinds) {
        if (name == text) return kind;
    }
    throw ConfigError("kind", "unknown experiment kind '" + name + "'");
}

std::string to_string(ExperimentKind kind) {
    for (const auto& [k, text] : kKinds) {
        if (k == kind) return text;
    }
    return "unknown";
}

ExperimentConfig default_config(ExperimentKind kind) {
    using post::Activation;
    ExperimentConfig c;
    c.kind = kind;
    c.output_dir = "runs/" + to_string(kind);
    auto& k = c.kivi;
    k.kernel.clip = 1e-8;
    switch (kind) {
        case ExperimentKind::gmm1d:
            c.posterior.noise_dim = 1;
            c.posterior.hidden = {{10, Activation::relu}, {10, Activation::relu}};
            k.n_p = k.n_q = k.M = 100;
            k.kernel.lambda = 0.003;
            k.optimizer.learning_rate = 0.01;
            k.iterations = 2000;
            c.mean_field.enabled = true;
            c.mean_field.init_log_std = -1.0;
            c.mean_field.random_mean = true;
            break;
        case ExperimentKind::blr2d:
            c.posterior.noise_dim = 2;
            c.posterior.hidden = {{20, Activation::relu}, {20, Activation::identity}, {20, Activation::relu}};
            c.posterior.noise_after = 1;
            k.n_p = k.n_q = k.M = 1000;
            k.kernel.lambda = 0.1;
            k.optimizer.learning_rate = 0.01;
            k.optimizer.schedule.kind = vi::ScheduleKind::anneal;
            k.iterations = 100;
            c.mean_field.enabled = true;
            c.mean_field.iterations = 1000;
            c.hmc.enabled = true;
            break;
        case ExperimentKind::kl_only:
            c.posterior.noise_dim = 2;
            c.posterior.hidden = {{20, Activation::relu}, {20, Activation::identity}, {20, Activation::relu}};
            c.posterior.noise_after = 1;
            k.n_p = k.n_q = k.M = 1000;
            k.kernel.lambda = 0.01;
            k.optimizer.learning_rate = 0.01;
            k.optimizer.schedule.kind = vi::ScheduleKind::anneal;
            k.iterations = 100;
            break;
        case ExperimentKind::bnn_regression:
            c.posterior.noise_dim = 20;
            c.posterior.hidden = {{30, Activation::relu}};
            k.n_p = k.n_q = k.M = 100;
            k.kernel.lambda = 0.001;
            k.optimizer.learning_rate = 0.001;
            k.iterations = 3000;
            k.batch_size = 100;
            c.mean_field.init_log_std = -3.0;
            c.mean_field.random_mean = true;
            break;
        case ExperimentKind::amortized_ac:
            c.posterior.kind = "implicit_encoder";
            c.posterior.noise_dim = 2;
            c.posterior.hidden = {{32, Activation::relu}};
            k.n_p = k.n_q = k.M = 20;
            k.kernel.lambda = 0.01;
            k.optimizer.learning_rate = 0.003;
            k.iterations = 50;
            k.batch_size = 20;
            c.mean_field.samples = 20;
            break;
        case ExperimentKind::estimator_bench:
            c.posterior.kind = "mean_field";
            k.n_p = k.n_q = k.M = 200;
            k.kernel.lambda = 0.01;
            break;
    }
    return c;
}

void ExperimentConfig::validate() const {
    require(final_samples >= 2, "final_samples", "need at least 2 draws");
    try {
        kivi.validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError("kivi", e.what());
    }
    const auto& p = posterior;
    const std::set<std::string> families{"noise_net", "mmnn", "mean_field", "planar_flow", "gaussian_encoder",
                                         "implicit_encoder"};
    require(families.count(p.kind) == 1, "posterior.kind", "unknown posterior family '" + p.kind + "'");
    const bool encoder = p.kind == "gaussian_encoder" || p.kind == "implicit_encoder";
    require(encoder == (kind == ExperimentKind::amortized_ac), "posterior.kind",
            "encoders are used by amortized_ac and only there");
    if (kind != ExperimentKind::estimator_bench) {
        require(p.kind != "noise_net" || p.noise_dim >= 1, "posterior.noise_dim", "must be positive");
        for (std::size_t i = 0; i < p.hidden.size(); ++i) {
            require(p.hidden[i].width >= 1, "posterior.hidden[" + std::to_string(i) + "].width", "must be positive");
        }
        if (p.noise_after) {
            require(*p.noise_after < p.hidden.size(), "posterior.noise_after", "must index a hidden layer");
        }
        if (p.kind == "mmnn") {
            require(p.mmnn_input.rows >= 1 && p.mmnn_input.cols >= 1, "posterior.mmnn_input", "must be positive");
        }
    }
    for (const auto* b : {&mean_field, &planar_flow}) {
        const std::string name = b == &mean_field ? "baselines.mean_field" : "baselines.planar_flow";
        if (!b->enabled) continue;
        require(b->samples >= 1, name + ".samples", "must be positive");
        require(!b->learning_rate || *b->learning_rate > 0.0, name + ".learning_rate", "must be positive");
        require(!b->iterations || *b->iterations >= 1, name + ".iterations", "must be positive");
    }
    if (hmc.enabled) {
        require(kind == ExperimentKind::gmm1d || kind == ExperimentKind::blr2d || kind == ExperimentKind::kl_only,
                "baselines.hmc.enabled", "HMC is available for gmm1d, blr2d and kl_only");
        try {
            hmc.config.validate();
        } catch (const std::invalid_argument& e) {
            throw ConfigError("baselines.hmc", e.what());
        }
    }
    require(!planar_flow.enabled || kind != ExperimentKind::amortized_ac, "baselines.planar_flow.enabled",
            "not available for amortized_ac");
    switch (kind) {
        case ExperimentKind::gmm1d:
            require(!gmm.means.empty(), "model.means", "need at least one component");
            require(gmm.stds.size() == gmm.means.size() && gmm.weights.size() == gmm.means.size(), "model",
                    "means, stds and weights must have equal lengths");
            for (double s : gmm.stds) require(s > 0.0, "model.stds", "must be positive");
            for (double w : gmm.weights) require(w > 0.0, "model.weights", "must be positive");
            require(gmm.mode_radius > 0.0, "model.mode_radius", "must be positive");
            break;
        case ExperimentKind::blr2d:
            require(blr.n >= 1, "model.n", "must be positive");
            require(blr.dim >= 1, "model.dim", "must be positive");
            require(blr.labels == "sampled" || blr.labels == "predicted", "model.labels",
                    "expected 'sampled' or 'predicted'");
            break;
        case ExperimentKind::kl_only:
            require(kl_only.dim >= 1, "model.dim", "must be positive");
            break;
        case ExperimentKind::bnn_regression:
            require(!bnn.hidden.empty(), "model.hidden", "need at least one hidden layer");
            for (auto h : bnn.hidden) require(h >= 1, "model.hidden", "widths must be positive");
            require(bnn.predict_samples >= 1, "model.predict_samples", "must be positive");
            if (dataset) {
                require(std::filesystem::is_regular_file(*dataset), "dataset", "file '" + *dataset + "' not found");
                require(bnn.train_fraction > 0.0 && bnn.train_fraction < 1.0, "model.train_fraction",
                        "must be in (0, 1)");
            } else {
                require(bnn.n_train >= 2 && bnn.n_test >= 1, "model", "n_train >= 2 and n_test >= 1 required");
                require(bnn.noise_std >= 0.0, "model.noise_std", "must be non-negative");
            }
            break;
        case ExperimentKind::amortized_ac:
            require(amortized.latent_dim >= 1 && amortized.data_dim >= 1, "model", "dimensions must be positive");
            require(amortized.n_data >= 1, "model.n_data", "must be positive");
            require(amortized.output == "bernoulli" || amortized.output == "gaussian", "model.output",
                    "expected 'bernoulli' or 'gaussian'");
            require(amortized.eval_points >= 1 && amortized.eval_runs >= 2, "model",
                    "eval_points >= 1 and eval_runs >= 2 required");
            break;
        case ExperimentKind::estimator_bench:
            require(!bench.dims.empty() && !bench.means.empty() && !bench.stds.empty(), "model", "empty grid");
            for (auto d : bench.dims) require(d >= 1, "model.dims", "must be positive");
            for (double s : bench.stds) require(s > 0.0, "model.stds", "must be positive");
            require(bench.n >= 2 && bench.refits >= 1, "model", "n >= 2 and refits >= 1 required");
            break;
    }
    if (dataset && kind != ExperimentKind::bnn_regression) {
        throw ConfigError("dataset", "only bnn_regression reads a dataset");
    }
    require(!output_dir.empty(), "output_dir", "must not be empty");
}

ExperimentConfig parse_config(const json& doc) {
    Reader root(doc, "");
    std::string schema = kConfigSchema;
    root.get("schema", schema);
    if (schema != kConfigSchema) {
        throw ConfigError("schema", "unsupported schema '" + schema + "' (expected " + kConfigSchema + ")");
    }
    std::string kind_name;
    root.get("kind", kind_name);
    if (kind_name.empty()) throw ConfigError("kind", "missing experiment kind");
    ExperimentConfig c = default_config(parse_kind(kind_name));

    root.get("seed", c.seed);
    root.get("output_dir", c.output_dir);
    root.get("dataset", c.dataset);
    root.get("final_samples", c.final_samples);
    if (const json* m = root.child("model")) model_from_json(*m, "model", c);
    if (const json* p = root.child("posterior")) from_json(*p, "posterior", c.posterior);
    if (const json* k = root.child("kivi")) from_json(*k, "kivi", c.kivi);
    if (const json* b = root.child("baselines")) {
        Reader br(*b, "baselines");
        if (const json* mf = br.child("mean_field")) from_json(*mf, "baselines.mean_field", c.mean_field);
        if (const json* pf = br.child("planar_flow")) from_json(*pf, "baselines.planar_flow", c.planar_flow);
        if (const json* h = br.child("hmc")) from_json(*h, "baselines.hmc", c.hmc);
        br.finish();
    }
    root.finish();
    c.validate();
    return c;
}

ExperimentConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("<file>", "cannot open config '" + path + "'");
    json doc;
    try {
        doc = json::parse(in);
    } catch (const json::parse_error& e) {
        throw ConfigError("<file>", std::string("invalid JSON: ") + e.what());
    }
    return parse_config(doc);
}

json to_json(const ExperimentConfig& c) {
    return {{"schema", kConfigSchema},
            {"kind", to_string(c.kind)},
            {"seed", c.seed},
            {"output_dir", c.output_dir},
            {"dataset", c.dataset ? json(*c.dataset) : json(nullptr)},
            {"final_samples", c.final_samples},
            {"model", model_to_json(c)},
            {"posterior", to_json(c.posterior)},
            {"kivi", to_json(c.kivi)},
            {"baselines",
             {{"mean_field", to_json(c.mean_field)}, {"planar_flow", to_json(c.planar_flow)}, {"hmc", to_json(c.hmc)}}}};
}

std::filesystem::path resolve_output_dir(const ExperimentConfig& config) {
    std::filesystem::path dir(config.output_dir);
    if (dir.is_relative()) {
        if (const char* root = std::getenv("KIVI_OUTPUT_ROOT"); root && *root) dir = std::filesystem::path(root) / dir;
    }
    return dir;
}

}  // namespace kivi::harness
