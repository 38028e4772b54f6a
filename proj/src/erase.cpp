#include "eraser/erase.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "eraser/kernels.hpp"
#include "eraser/nn.hpp"

namespace eraser::erasure {

namespace {

// softmax probabilities for a subset, one row per index
Tensor subset_probs(const model::BackboneModel& model, const task::TaskDataset& task,
                    const std::vector<int>& indices) {
    ag::NoGradGuard guard;
    Tensor inputs = model::pack_inputs(task.train, indices);
    Tensor logits = model.forward(inputs, task.task_id).logits->value;
    Tensor probs(logits.shape());
    kernels::softmax_rows(logits.data(), probs.data(), static_cast<int>(logits.dim(0)),
                          static_cast<int>(logits.dim(1)));
    return probs;
}

void clip_global_norm(const nn::ParamList& params, double cap) {
    double sq = 0.0;
    for (const auto& p : params)
        if (p.var->grad.numel())
            for (std::int64_t i = 0; i < p.var->grad.numel(); ++i)
                sq += p.var->grad[i] * p.var->grad[i];
    const double norm = std::sqrt(sq);
    if (norm <= cap || norm == 0.0) return;
    const double s = cap / norm;
    for (const auto& p : params)
        if (p.var->grad.numel())
            for (std::int64_t i = 0; i < p.var->grad.numel(); ++i)
                p.var->grad[i] *= s;
}

double mean_pseudo_probability(const model::BackboneModel& model,
                               const task::TaskDataset& task,
                               const std::vector<int>& indices, int pseudo) {
    Tensor probs = subset_probs(model, task, indices);
    double total = 0.0;
    for (std::int64_t i = 0; i < probs.dim(0); ++i) total += probs.at(i, pseudo);
    return total / static_cast<double>(indices.size());
}

}  // namespace

double mean_origin_probability(const model::BackboneModel& model,
                               const task::TaskDataset& task,
                               const std::vector<int>& indices) {
    if (indices.empty()) return 0.0;
    Tensor probs = subset_probs(model, task, indices);
    double total = 0.0;
    for (std::size_t i = 0; i < indices.size(); ++i) {
        const int local = task.local_index(task.train[indices[i]].observed_label);
        total += probs.at(static_cast<std::int64_t>(i), local);
    }
    return total / static_cast<double>(indices.size());
}

double subset_accuracy(const model::BackboneModel& model,
                       const task::TaskDataset& task,
                       const std::vector<int>& indices) {
    if (indices.empty()) return 0.0;
    Tensor probs = subset_probs(model, task, indices);
    int hits = 0;
    for (std::size_t i = 0; i < indices.size(); ++i) {
        int best = 0;
        for (int c = 1; c < probs.dim(1); ++c)
            if (probs.at(static_cast<std::int64_t>(i), c) >
                probs.at(static_cast<std::int64_t>(i), best))
                best = c;
        if (best == task.local_index(task.train[indices[i]].observed_label)) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(indices.size());
}

ErasureReport erase(model::BackboneModel& model, const task::TaskDataset& task,
                    const std::vector<int>& selected,
                    const std::vector<int>& retained, const ErasureConfig& cfg,
                    Rng& rng) {
    if (cfg.fine_tune_epochs < 1)
        throw std::invalid_argument("erase: fine_tune_epochs must be >= 1");
    if (!(cfg.fine_tune_learning_rate > 0))
        throw std::invalid_argument("erase: learning rate must be positive");
    if (cfg.batch_size < 1)
        throw std::invalid_argument("erase: batch_size must be >= 1");

    ErasureReport report;
    report.params_before = model.parameter_count();
    if (selected.empty()) {
        report.message = "selection empty; erasure skipped";
        report.params_after = report.params_before;
        return report;
    }

    report.pre_origin_prob = mean_origin_probability(model, task, selected);
    report.pre_retained_acc = subset_accuracy(model, task, retained);
    model::ParamArchive snapshot = model.snapshot_parameters();

    const int pseudo = model.expand_head(task.task_id);
    report.pseudo_class_index = pseudo;

    nn::ParamList tuned = cfg.full_model ? model.shared_params()
                                         : model.stage_c_params();
    for (const auto& p : model.head_params(task.task_id)) tuned.push_back(p);

    // plain SGD: the boundary shift relies on each logit moving in proportion
    // to its softmax probability, which adaptive per-parameter scaling erases
    report.pseudo_prob_epochs.push_back(
        mean_pseudo_probability(model, task, selected, pseudo));

    std::vector<int> order = selected;
    bool diverged = false;
    for (int epoch = 0; epoch < cfg.fine_tune_epochs && !diverged; ++epoch) {
        rng.shuffle(order);
        for (std::size_t start = 0; start < order.size();
             start += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t end =
                std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
            std::vector<int> batch(order.begin() + start, order.begin() + end);
            Tensor inputs = model::pack_inputs(task.train, batch);
            ag::Var logits = model.forward(inputs, task.task_id).logits;
            std::vector<int> targets(batch.size(), pseudo);
            ag::Var loss = ag::cross_entropy(logits, targets);
            if (!std::isfinite(loss->value[0])) {
                diverged = true;
                break;
            }
            double mean_logit = 0.0;
            for (std::size_t i = 0; i < batch.size(); ++i)
                mean_logit += logits->value.at(static_cast<std::int64_t>(i), pseudo);
            model.record_pseudo_activation(task.task_id,
                                           mean_logit / static_cast<double>(batch.size()));
            nn::zero_grads(tuned);
            ag::backward(loss);
            if (cfg.full_model) clip_global_norm(tuned, cfg.clip_norm);
            nn::sgd_step(tuned, cfg.fine_tune_learning_rate);
        }
        if (!diverged)
            report.pseudo_prob_epochs.push_back(
                mean_pseudo_probability(model, task, selected, pseudo));
    }

    if (diverged) {
        model.prune_head(task.task_id, pseudo);
        model.restore_parameters(snapshot);
        report.aborted = true;
        report.message = "non-finite fine-tune loss; pre-erasure parameters restored";
        report.pseudo_prob_epochs.clear();
        report.post_origin_prob = mean_origin_probability(model, task, selected);
        report.post_retained_acc = subset_accuracy(model, task, retained);
        report.params_after = model.parameter_count();
        return report;
    }

    report.activation_trajectory = model.prune_head(task.task_id, pseudo);
    report.performed = true;
    report.post_origin_prob = mean_origin_probability(model, task, selected);
    report.post_retained_acc = subset_accuracy(model, task, retained);
    report.params_after = model.parameter_count();
    return report;
}

namespace {

ErasureVerification judge(bool vacuous, double pre_origin, double post_origin,
                          double pre_acc, double post_acc) {
    ErasureVerification v;
    // a skipped erasure leaves the model unchanged, so the drop condition
    // fails by definition while the retained-accuracy condition holds
    v.vacuous = vacuous;
    v.origin_drop_ratio =
        pre_origin > 0 ? (pre_origin - post_origin) / pre_origin : 0.0;
    v.retained_drop_points = (pre_acc - post_acc) * 100.0;
    v.origin_drop_ok = v.origin_drop_ratio >= 0.5;
    v.retained_ok = v.retained_drop_points <= 2.0;
    v.pass = v.origin_drop_ok && v.retained_ok;
    return v;
}

}  // namespace

ErasureVerification verify_erasure(const ErasureReport& report) {
    const bool vacuous = !report.performed && !report.aborted &&
                         report.pseudo_class_index < 0;
    return judge(vacuous, report.pre_origin_prob, report.post_origin_prob,
                 report.pre_retained_acc, report.post_retained_acc);
}

ErasureVerification verify_erasure(const model::BackboneModel& model,
                                   const task::TaskDataset& task,
                                   const std::vector<int>& selected,
                                   const std::vector<int>& retained,
                                   double pre_origin_prob, double pre_retained_acc) {
    if (selected.empty()) return judge(true, 0, 0, 0, 0);
    return judge(false, pre_origin_prob,
                 mean_origin_probability(model, task, selected), pre_retained_acc,
                 subset_accuracy(model, task, retained));
}

std::string erasure_report_json(const ErasureReport& report,
                                const ErasureVerification& check) {
    nlohmann::json j;
    j["performed"] = report.performed;
    j["aborted"] = report.aborted;
    j["message"] = report.message;
    j["pseudo_class_index"] = report.pseudo_class_index;
    j["pre_origin_prob"] = report.pre_origin_prob;
    j["post_origin_prob"] = report.post_origin_prob;
    j["pre_retained_acc"] = report.pre_retained_acc;
    j["post_retained_acc"] = report.post_retained_acc;
    j["pseudo_prob_epochs"] = report.pseudo_prob_epochs;
    j["params_before"] = report.params_before;
    j["params_after"] = report.params_after;
    j["verification"] = {{"pass", check.pass},
                         {"vacuous", check.vacuous},
                         {"origin_drop_ok", check.origin_drop_ok},
                         {"retained_ok", check.retained_ok},
                         {"origin_drop_ratio", check.origin_drop_ratio},
                         {"retained_drop_points", check.retained_drop_points}};
    return j.dump(2);
}

std::string activation_trajectory_csv(const ErasureReport& report) {
    std::ostringstream out;
    out << "step,mean_pseudo_logit\n";
    out.precision(17);
    for (std::size_t i = 0; i < report.activation_trajectory.size(); ++i)
        out << i << ',' << report.activation_trajectory[i] << '\n';
    return out.str();
}

}  // namespace eraser::erasure
