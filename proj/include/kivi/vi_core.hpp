#pragma once

// The KIVI training loop: kernel KL estimates from samples, ELBO assembly,
// Adaptive Contrast for amortized posteriors, and an Adam optimizer with
// learning-rate schedules.

#include <chrono>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "kivi/kernel_dre.hpp"
#include "kivi/models.hpp"
#include "kivi/posteriors.hpp"

namespace kivi::vi {

using dre::Matrix;
using models::DataBatch;

enum class ScheduleKind { constant, step_decay, anneal };

ScheduleKind parse_schedule(const std::string& name);
std::string to_string(ScheduleKind kind);

struct Schedule {
    ScheduleKind kind = ScheduleKind::constant;
    std::size_t every = 100;  // step_decay period in epochs
    double ratio = 0.5;       // step_decay factor

    /// Multiplier on the base rate for a 1-based epoch. anneal gives
    /// 100 / (100 + epoch - 1).
    double factor(std::size_t epoch) const;
};

struct OptimizerConfig {
    std::string name = "adam";
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    Schedule schedule;

    void validate() const;
};

/// How the KL term is estimated.
enum class KlEstimator {
    kernel,          // density-ratio fit on samples (any posterior)
    sample_density,  // mean of log q(z) - log p(z) (tractable posteriors)
};

struct KiviConfig {
    std::size_t n_p = 100;  // prior samples per iteration
    std::size_t n_q = 100;  // posterior samples for the KL term
    std::size_t M = 100;    // posterior samples for the likelihood term
    dre::KernelConfig kernel;
    OptimizerConfig optimizer;
    std::size_t iterations = 1000;  // epochs when batch_size > 0
    std::size_t batch_size = 0;     // 0: full batch
    std::uint64_t seed = 1;
    /// Estimate p/q with the density-ratio model (the default) instead of q/p.
    bool reverse_trick = true;
    KlEstimator kl_estimator = KlEstimator::kernel;
    /// With a factorized posterior, sum one kernel KL per block instead of a
    /// single fit on the concatenated sample. Assumes the prior factorizes the
    /// same way.
    bool kl_per_block = false;

    void validate() const;
};

struct ElboEstimate {
    double elbo = 0.0;
    double reconstruction = 0.0;
    double kl = 0.0;

    static ElboEstimate from_terms(double reconstruction, double kl) {
        return {reconstruction - kl, reconstruction, kl};
    }
};

struct StepResult {
    ElboEstimate estimate;
    Tensor objective;  // scalar to maximize
};

struct KlEstimate {
    Tensor value;  // scalar, differentiable through the posterior samples
    dre::RatioModel ratio;
};

/// Kernel KL(q || p) from posterior samples z_q [n_q, d] (tape-attached) and
/// prior samples z_p [n_p, d]. The ratio is fitted on detached copies; the
/// gradient reaches z_q only as evaluation points.
KlEstimate estimate_kl(const Tensor& z_q, const Matrix& z_p, const dre::KernelConfig& kernel,
                       bool reverse_trick = true);

/// KL value for an already fitted ratio model evaluated at z_q.
Tensor kl_from_ratio(const dre::RatioModel& ratio, const Tensor& z_q, bool reverse_trick = true);

/// Draws z_q from the posterior and z_p from the model prior, then estimates.
Tensor estimate_kl(const post::Posterior& q, const models::TargetModel& model, const KiviConfig& config, Rng& rng);

/// One ELBO evaluation with fresh samples. The posterior is sampled once with
/// max(n_q, M) draws; the first M feed the likelihood, the first n_q the KL.
/// The KL includes the model's own closed-form terms.
StepResult elbo_step(const models::TargetModel& model, const post::Posterior& posterior, const DataBatch* batch,
                     const KiviConfig& config, Rng& rng);

/// Adaptive Contrast ELBO for an amortized posterior over a batch x [B, D],
/// n_q draws per datapoint. Values are summed over the batch and multiplied by
/// `scale`.
StepResult adaptive_contrast_step(const models::AmortizedDecoderModel& model,
                                  const post::AmortizedPosterior& posterior, const Matrix& x, double scale,
                                  const KiviConfig& config, Rng& rng);

/// Plain Monte Carlo ELBO for a tractable amortized posterior, same layout.
StepResult amortized_elbo_step(const models::AmortizedDecoderModel& model,
                               const post::AmortizedPosterior& posterior, const Matrix& x, double scale,
                               std::size_t draws, Rng& rng);

struct DegenerateBatch : std::runtime_error {
    using std::runtime_error::runtime_error;
};

class Adam {
public:
    Adam(std::vector<Tensor> params, OptimizerConfig config);

    /// Gradient ascent on the given gradients at the supplied rate.
    void ascend(const Gradients& grads, double learning_rate);
    std::size_t steps() const { return t_; }
    const std::vector<Tensor>& parameters() const { return params_; }

private:
    std::vector<Tensor> params_;
    OptimizerConfig config_;
    std::vector<std::vector<double>> m_, v_;
    std::size_t t_ = 0;
};

struct TraceRow {
    std::size_t iteration = 0;
    double elbo = 0.0;
    double kl = 0.0;
    double reconstruction = 0.0;
    double wall_ms = 0.0;
};

struct Trace {
    std::vector<TraceRow> rows;

    /// iteration,elbo,kl,reconstruction with round-trip precision.
    void write_csv(const std::string& path) const;
    /// iteration,wall-time-ms.
    void write_timing_csv(const std::string& path) const;
    static Trace read_csv(const std::string& path);
};

struct NonFiniteLoss : std::runtime_error {
    NonFiniteLoss(std::size_t iteration, Trace trace);
    std::size_t iteration;
    Trace trace;  // rows recorded before the failing step
};

struct LoopConfig {
    std::size_t iterations = 1000;
    std::size_t steps_per_epoch = 1;
    OptimizerConfig optimizer;
    /// Called after each recorded step.
    std::function<void(const TraceRow&)> on_step;
};

using StepFn = std::function<StepResult(std::size_t iteration)>;

/// Runs `iterations` ascent steps. Throws NonFiniteLoss (trace included) when
/// the objective or a gradient is not finite.
Trace optimize(const LoopConfig& config, const StepFn& step, std::vector<Tensor> params);

}  // namespace kivi::vi
