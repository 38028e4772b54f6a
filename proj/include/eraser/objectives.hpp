#pragma once
// Training objective: total = classification + distribution guidance +
// continual-learning penalty. The guidance term weights classifier
// cross-entropy on flow-generated features by a diagonal Gaussian fitted to
// the current task's latent codes. Penalties are pluggable (ewc / lwf /
// replay / none).

#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "eraser/autograd.hpp"
#include "eraser/backbone.hpp"
#include "eraser/flow.hpp"
#include "eraser/rng.hpp"
#include "eraser/taskstream.hpp"
#include "eraser/tensor.hpp"

namespace eraser::obj {

// diagonal Gaussian over the latent space, fitted per task
struct LatentStats {
    Tensor mu;          // [d]
    Tensor sigma_diag;  // [d] per-dimension second central moments (floored)
    std::int64_t count = 0;
};

// mu = column means, sigma_diag = mean squared deviations, floored at eps_var
LatentStats fit_latent_stats(const Tensor& latents, double eps_var = 1e-4);

// multivariate normal density value at u (diagonal covariance)
double gaussian_weight(const Tensor& u, const LatentStats& stats);

// mean cross-entropy of the batch against observed (local) labels
ag::Var classification_loss(const ag::Var& logits, const std::vector<int>& labels);

// mean over sample_count draws of q(u') * CE(path(f^-1(u' | y')), y') where
// u' ~ N(0, I), y' uniform over labels_pool (global ids within the task's
// class set). Gradients reach stage_c and the head only; the generated
// features are constants.
ag::Var distribution_guidance_loss(const flow::FlowModel& flow,
                                   const LatentStats& stats,
                                   const model::BackboneModel& model,
                                   int task_id, int sample_count,
                                   const std::vector<int>& labels_pool, Rng& rng);

enum class CLStrategy { none, ewc, lwf, replay };

CLStrategy parse_cl_strategy(const std::string& name);
std::string cl_strategy_name(CLStrategy s);

struct CLPluginState {
    CLStrategy strategy = CLStrategy::none;
    double lambda = 100.0;  // penalty strength
    bool use_fisher = false;
    double distill_temperature = 2.0;
    int replay_batch = 32;

    // ewc: per finished task, anchor values (and optional importance) for the
    // shared parameters; omega defaults to 1 per task
    std::map<int, model::ParamArchive> anchors;
    std::map<int, model::ParamArchive> importance;
    std::map<int, double> omega;

    // lwf: frozen copy of the model after the last finished task
    std::shared_ptr<model::BackboneModel> teacher;

    // replay: retained examples with their originating task
    struct ReplayItem {
        Tensor input;
        int local_label = 0;
        int task_id = 0;
    };
    std::vector<ReplayItem> buffer;
};

// record whatever the strategy needs after finishing a task: ewc anchors
// (with Fisher importance when enabled), the lwf teacher copy, or
// replay_per_class training examples per class
void consolidate(CLPluginState& st, const model::BackboneModel& model,
                 const task::TaskDataset& task, Rng& rng,
                 int replay_per_class = 10, int fisher_samples = 200);

// diagonal empirical Fisher of the given parameters over up to sample_count
// training examples (squared gradients of the per-example NLL)
model::ParamArchive estimate_fisher(const model::BackboneModel& model,
                                    const task::TaskDataset& task,
                                    const nn::ParamList& params,
                                    int sample_count, Rng& rng);

// sum over parameters of (theta - anchor)^2, optionally importance-weighted
ag::Var ewc_quadratic(const nn::ParamList& params,
                      const model::ParamArchive& anchor,
                      const model::ParamArchive* importance);

// strategy-dependent penalty for the current batch; zero on the first task
ag::Var cl_penalty(const CLPluginState& st, const model::BackboneModel& model,
                   const Tensor& batch_inputs, int current_task, Rng& rng);

// the three components, summed unweighted
ag::Var total_loss(const ag::Var& ce, const ag::Var& ge, const ag::Var& cl);

// fresh model with the same architecture, task registry, and parameters
std::shared_ptr<model::BackboneModel> clone_model(const model::BackboneModel& m);

}  // namespace eraser::obj
