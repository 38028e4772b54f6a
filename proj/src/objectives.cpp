#include "eraser/objectives.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "eraser/kernels.hpp"

namespace eraser::obj {

namespace {
constexpr double kLog2Pi = 1.8378770664093454836;
}

LatentStats fit_latent_stats(const Tensor& latents, double eps_var) {
    if (latents.rank() != 2 || latents.dim(0) < 1)
        throw std::invalid_argument("fit_latent_stats: need a non-empty [N,d] batch");
    const int n = static_cast<int>(latents.dim(0));
    const int d = static_cast<int>(latents.dim(1));
    LatentStats st{Tensor({d}), Tensor({d}), n};
    for (int j = 0; j < d; ++j) {
        double m = 0.0;
        for (int i = 0; i < n; ++i) m += latents.at(i, j);
        m /= n;
        double v = 0.0;
        for (int i = 0; i < n; ++i) {
            const double dev = latents.at(i, j) - m;
            v += dev * dev;
        }
        st.mu[j] = m;
        st.sigma_diag[j] = std::max(v / n, eps_var);
    }
    return st;
}

double gaussian_weight(const Tensor& u, const LatentStats& stats) {
    const int d = static_cast<int>(stats.mu.numel());
    if (u.numel() != d)
        throw std::invalid_argument("gaussian_weight: dimension mismatch");
    double logq = -0.5 * d * kLog2Pi;
    for (int j = 0; j < d; ++j) {
        const double var = stats.sigma_diag[j];
        const double dev = u[j] - stats.mu[j];
        logq -= 0.5 * (std::log(var) + dev * dev / var);
    }
    return std::exp(logq);
}

ag::Var classification_loss(const ag::Var& logits, const std::vector<int>& labels) {
    return ag::cross_entropy(logits, labels);
}

ag::Var distribution_guidance_loss(const flow::FlowModel& flow,
                                   const LatentStats& stats,
                                   const model::BackboneModel& model,
                                   int task_id, int sample_count,
                                   const std::vector<int>& labels_pool, Rng& rng) {
    if (sample_count <= 0)
        throw std::invalid_argument("distribution_guidance_loss: sample_count must be positive");
    if (labels_pool.empty())
        throw std::invalid_argument("distribution_guidance_loss: empty labels_pool");
    const auto& class_set = model.class_set(task_id);
    std::vector<int> pool_local(labels_pool.size());
    for (std::size_t i = 0; i < labels_pool.size(); ++i) {
        auto it = std::find(class_set.begin(), class_set.end(), labels_pool[i]);
        if (it == class_set.end())
            throw std::invalid_argument("distribution_guidance_loss: label outside the task's class set");
        pool_local[i] = static_cast<int>(it - class_set.begin());
    }

    const int d = static_cast<int>(stats.mu.numel());
    Tensor u({sample_count, d});
    Tensor weights({sample_count});
    std::vector<int> cond_labels(sample_count), local(sample_count);
    for (int i = 0; i < sample_count; ++i) {
        const int pick = rng.below_int(static_cast<int>(labels_pool.size()));
        cond_labels[i] = labels_pool[pick];
        local[i] = pool_local[pick];
        Tensor row({1, d});
        for (int j = 0; j < d; ++j) {
            const double z = rng.normal();
            u.at(i, j) = z;
            row[j] = z;
        }
        weights[i] = gaussian_weight(row, stats);
    }

    Tensor feats;
    {
        ag::NoGradGuard guard;  // generated features are constants
        feats = flow.inverse(u, cond_labels);
    }
    ag::Var logits = model.logits_from_feat(ag::constant(feats), task_id);
    ag::Var log_p = ag::pick_rows(ag::log_softmax_rows(logits), local);
    ag::Var weighted = ag::mul(log_p, ag::constant(weights));
    return ag::scale(ag::sum(weighted), -1.0 / sample_count);
}

CLStrategy parse_cl_strategy(const std::string& name) {
    if (name == "none") return CLStrategy::none;
    if (name == "ewc") return CLStrategy::ewc;
    if (name == "lwf") return CLStrategy::lwf;
    if (name == "replay") return CLStrategy::replay;
    throw std::invalid_argument("unknown continual-learning strategy: " + name);
}

std::string cl_strategy_name(CLStrategy s) {
    switch (s) {
        case CLStrategy::none: return "none";
        case CLStrategy::ewc: return "ewc";
        case CLStrategy::lwf: return "lwf";
        case CLStrategy::replay: return "replay";
    }
    throw std::logic_error("unreachable");
}

std::shared_ptr<model::BackboneModel> clone_model(const model::BackboneModel& m) {
    auto copy = std::make_shared<model::BackboneModel>(m.config());
    for (int id : m.task_ids()) copy->register_task(id, m.class_set(id));
    copy->restore_parameters(m.snapshot_parameters());
    return copy;
}

model::ParamArchive estimate_fisher(const model::BackboneModel& model,
                                    const task::TaskDataset& task,
                                    const nn::ParamList& params,
                                    int sample_count, Rng& rng) {
    model::ParamArchive fisher;
    for (const auto& p : params) {
        Tensor zero(p.var->value.shape());
        fisher.tensors.emplace_back(p.name, zero);
    }
    const int n = static_cast<int>(task.train.size());
    std::vector<int> order(n);
    for (int i = 0; i < n; ++i) order[i] = i;
    rng.shuffle(order);
    const int take = std::min(sample_count, n);
    for (int s = 0; s < take; ++s) {
        Tensor x = model::pack_inputs(task.train, {order[s]});
        std::vector<int> y = model::local_labels(task, task.train, {order[s]});
        nn::zero_grads(params);
        ag::Var loss = ag::cross_entropy(model.forward(x, task.task_id).logits, y);
        ag::backward(loss);
        for (std::size_t p = 0; p < params.size(); ++p) {
            const auto& g = params[p].var->grad;
            if (g.numel() == 0) continue;
            Tensor& acc = fisher.tensors[p].second;
            for (std::int64_t i = 0; i < acc.numel(); ++i) acc[i] += g[i] * g[i];
        }
    }
    if (take > 0)
        for (auto& [name, t] : fisher.tensors)
            for (std::int64_t i = 0; i < t.numel(); ++i) t[i] /= take;
    return fisher;
}

void consolidate(CLPluginState& st, const model::BackboneModel& model,
                 const task::TaskDataset& task, Rng& rng, int replay_per_class,
                 int fisher_samples) {
    const int t = task.task_id;
    switch (st.strategy) {
        case CLStrategy::none:
            return;
        case CLStrategy::ewc: {
            model::ParamArchive anchor;
            for (const auto& p : model.shared_params())
                anchor.tensors.emplace_back(p.name, p.var->value);
            st.anchors[t] = std::move(anchor);
            if (st.use_fisher)
                st.importance[t] =
                    estimate_fisher(model, task, model.shared_params(), fisher_samples, rng);
            if (!st.omega.count(t)) st.omega[t] = 1.0;
            return;
        }
        case CLStrategy::lwf:
            st.teacher = clone_model(model);
            return;
        case CLStrategy::replay: {
            std::map<int, std::vector<int>> by_class;
            for (int i = 0; i < static_cast<int>(task.train.size()); ++i)
                by_class[task.train[i].observed_label].push_back(i);
            for (auto& [cls, idx] : by_class) {
                rng.shuffle(idx);
                const int take = std::min<int>(replay_per_class, static_cast<int>(idx.size()));
                for (int i = 0; i < take; ++i) {
                    const auto& ex = task.train[idx[i]];
                    const int local = task.local_index(ex.observed_label);
                    st.buffer.push_back({ex.input, local, t});
                }
            }
            return;
        }
    }
}

ag::Var ewc_quadratic(const nn::ParamList& params,
                      const model::ParamArchive& anchor,
                      const model::ParamArchive* importance) {
    ag::Var total = ag::constant(Tensor::scalar(0.0));
    for (const auto& p : params) {
        const Tensor* a = anchor.find(p.name);
        if (!a) throw std::invalid_argument("ewc_quadratic: anchor missing " + p.name);
        ag::Var sq = ag::square(ag::sub(p.var, ag::constant(*a)));
        if (importance) {
            const Tensor* w = importance->find(p.name);
            if (!w) throw std::invalid_argument("ewc_quadratic: importance missing " + p.name);
            sq = ag::mul(sq, ag::constant(*w));
        }
        total = ag::add(total, ag::sum(sq));
    }
    return total;
}

ag::Var cl_penalty(const CLPluginState& st, const model::BackboneModel& model,
                   const Tensor& batch_inputs, int current_task, Rng& rng) {
    ag::Var zero = ag::constant(Tensor::scalar(0.0));
    if (current_task <= 1 || st.strategy == CLStrategy::none) return zero;

    switch (st.strategy) {
        case CLStrategy::ewc: {
            ag::Var total = zero;
            nn::ParamList shared = model.shared_params();
            for (int k = 1; k < current_task; ++k) {
                auto it = st.anchors.find(k);
                if (it == st.anchors.end())
                    throw std::runtime_error("cl_penalty: missing ewc anchor for task " +
                                             std::to_string(k));
                const model::ParamArchive* imp = nullptr;
                if (st.use_fisher) {
                    auto fit = st.importance.find(k);
                    if (fit == st.importance.end())
                        throw std::runtime_error("cl_penalty: missing importance for task " +
                                                 std::to_string(k));
                    imp = &fit->second;
                }
                const double om = st.omega.count(k) ? st.omega.at(k) : 1.0;
                total = ag::add(total, ag::scale(ewc_quadratic(shared, it->second, imp),
                                                 om * st.lambda / 2.0));
            }
            return total;
        }
        case CLStrategy::lwf: {
            if (!st.teacher)
                throw std::runtime_error("cl_penalty: lwf teacher missing");
            const double T = st.distill_temperature;
            const int b = static_cast<int>(batch_inputs.dim(0));
            ag::Var total = zero;
            for (int k = 1; k < current_task; ++k) {
                if (!st.teacher->has_task(k))
                    throw std::runtime_error("cl_penalty: teacher lacks head for task " +
                                             std::to_string(k));
                Tensor probs;
                {
                    ag::NoGradGuard guard;
                    Tensor tl = st.teacher->forward(batch_inputs, k).logits->value;
                    for (std::int64_t i = 0; i < tl.numel(); ++i) tl[i] /= T;
                    probs = Tensor(tl.shape());
                    kernels::softmax_rows(tl.data(), probs.data(),
                                          static_cast<int>(tl.dim(0)),
                                          static_cast<int>(tl.dim(1)));
                }
                ag::Var lsm = ag::log_softmax_rows(
                    ag::scale(model.forward(batch_inputs, k).logits, 1.0 / T));
                ag::Var ce = ag::scale(ag::sum(ag::mul(lsm, ag::constant(probs))),
                                       -T * T / b);
                total = ag::add(total, ce);
            }
            return ag::scale(total, st.lambda);
        }
        case CLStrategy::replay: {
            if (st.buffer.empty())
                throw std::runtime_error("cl_penalty: replay buffer empty");
            const int take = std::min<int>(st.replay_batch,
                                           static_cast<int>(st.buffer.size()));
            std::map<int, std::vector<const CLPluginState::ReplayItem*>> by_task;
            for (int i = 0; i < take; ++i) {
                const auto& item = st.buffer[rng.below(st.buffer.size())];
                by_task[item.task_id].push_back(&item);
            }
            ag::Var total = zero;
            for (const auto& [tid, items] : by_task) {
                const int n = static_cast<int>(items.size());
                std::vector<int> shape{n};
                for (int dim : items[0]->input.shape()) shape.push_back(dim);
                Tensor x(shape);
                std::vector<int> y(n);
                const std::int64_t per = items[0]->input.numel();
                for (int i = 0; i < n; ++i) {
                    std::copy(items[i]->input.data(), items[i]->input.data() + per,
                              x.data() + i * per);
                    y[i] = items[i]->local_label;
                }
                ag::Var ce = ag::cross_entropy(model.forward(x, tid).logits, y);
                total = ag::add(total, ag::scale(ce, static_cast<double>(n) / take));
            }
            return ag::scale(total, st.lambda);
        }
        default:
            return zero;
    }
}

ag::Var total_loss(const ag::Var& ce, const ag::Var& ge, const ag::Var& cl) {
    return ag::add(ag::add(ce, ge), cl);
}

}  // namespace eraser::obj
