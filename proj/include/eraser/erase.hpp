#pragma once
// Error erasure: expand the task head with a zero-initialized pseudo neuron,
// fine-tune the selected low-density samples toward the pseudo class, record
// the pseudo neuron's activation trajectory, then prune it exactly. A
// verification step checks the original labels lost probability mass while a
// high-density retained subset kept its accuracy.

#include <cstdint>
#include <string>
#include <vector>

#include "eraser/backbone.hpp"
#include "eraser/rng.hpp"
#include "eraser/taskstream.hpp"

namespace eraser::erasure {

struct ErasureConfig {
    int fine_tune_epochs = 5;
    double fine_tune_learning_rate = 1e-4;
    int batch_size = 64;
    bool full_model = false;  // extend fine-tuning to stages a/b (ablation)
    double clip_norm = 5.0;   // global gradient-norm cap in full-model mode
};

struct ErasureReport {
    bool performed = false;  // false: empty selection no-op
    bool aborted = false;    // true: non-finite loss, model restored
    std::string message;
    int pseudo_class_index = -1;
    double pre_origin_prob = 0.0;   // mean P(observed label) on D_s
    double post_origin_prob = 0.0;
    double pre_retained_acc = 0.0;  // accuracy on the retained subset
    double post_retained_acc = 0.0;
    std::vector<double> activation_trajectory;  // mean pseudo logit per step
    std::vector<double> pseudo_prob_epochs;     // mean pseudo prob, incl. start
    std::int64_t params_before = 0;
    std::int64_t params_after = 0;
};

struct ErasureVerification {
    bool pass = false;
    bool vacuous = false;         // nothing was selected
    bool origin_drop_ok = false;  // relative drop >= 0.5
    bool retained_ok = false;     // accuracy drop <= 2 points
    double origin_drop_ratio = 0.0;
    double retained_drop_points = 0.0;
};

// mean probability assigned to each sample's observed label (local head)
double mean_origin_probability(const model::BackboneModel& model,
                               const task::TaskDataset& task,
                               const std::vector<int>& indices);

// fraction of the subset whose argmax matches the observed label
double subset_accuracy(const model::BackboneModel& model,
                       const task::TaskDataset& task,
                       const std::vector<int>& indices);

// expand -> fine-tune on (x in D_s, pseudo label) -> prune; restores the
// pre-erasure parameters bit-for-bit if the loss turns non-finite
ErasureReport erase(model::BackboneModel& model, const task::TaskDataset& task,
                    const std::vector<int>& selected,
                    const std::vector<int>& retained, const ErasureConfig& cfg,
                    Rng& rng);

ErasureVerification verify_erasure(const ErasureReport& report);

// recompute the post-state from a model (for skipped or external checks)
ErasureVerification verify_erasure(const model::BackboneModel& model,
                                   const task::TaskDataset& task,
                                   const std::vector<int>& selected,
                                   const std::vector<int>& retained,
                                   double pre_origin_prob,
                                   double pre_retained_acc);

std::string erasure_report_json(const ErasureReport& report,
                                const ErasureVerification& check);
std::string activation_trajectory_csv(const ErasureReport& report);

}  // namespace eraser::erasure
