#include "eraser/backbone.hpp"

#include <algorithm>
#include <stdexcept>

namespace eraser::model {

BackboneKind parse_backbone_kind(const std::string& name) {
    if (name == "cnn") return BackboneKind::cnn;
    if (name == "synthetic2d") return BackboneKind::synthetic2d;
    throw std::invalid_argument("unknown backbone kind: " + name);
}

std::string backbone_kind_name(BackboneKind k) {
    return k == BackboneKind::cnn ? "cnn" : "synthetic2d";
}

const Tensor* ParamArchive::find(const std::string& name) const {
    for (const auto& [n, t] : tensors)
        if (n == name) return &t;
    return nullptr;
}

BackboneModel::BackboneModel(const BackboneConfig& cfg) : cfg_(cfg) {
    Rng rng(cfg.init_seed);
    if (cfg.kind == BackboneKind::cnn) {
        conv1_ = nn::Conv2d(cfg.in_channels, cfg.conv1_channels, 3, rng);
        conv2_ = nn::Conv2d(cfg.conv1_channels, cfg.conv2_channels, 3, rng);
        const int h1 = (cfg.in_h - 2) / 2, w1 = (cfg.in_w - 2) / 2;
        const int h2 = (h1 - 2) / 2, w2 = (w1 - 2) / 2;
        flat_dim_ = cfg.conv2_channels * h2 * w2;
        d_ = cfg.feature_dim;
        fc_b_ = nn::Linear(flat_dim_, d_, rng);
        fc_c_ = nn::Linear(d_, cfg.stage_c_dim, rng);
    } else {
        // stage_a and stage_b are the identity: feat_b is the raw 2-D point,
        // which keeps the flow's density oracles analytic
        d_ = 2;
        flat_dim_ = 2;
        fc_c_ = nn::Linear(d_, cfg.stage_c_dim, rng);
    }
}

void BackboneModel::register_task(int task_id, const std::vector<int>& class_set) {
    if (heads_.count(task_id))
        throw std::invalid_argument("task " + std::to_string(task_id) +
                                    " already registered");
    if (class_set.size() < 2)
        throw std::invalid_argument("a head needs at least two classes");
    Rng rng(Rng::mix(cfg_.init_seed, 0x4eadULL + task_id));
    Head h;
    h.layer = nn::Linear(cfg_.stage_c_dim, static_cast<int>(class_set.size()), rng);
    h.class_set = class_set;
    heads_[task_id] = std::move(h);
}

bool BackboneModel::has_task(int task_id) const { return heads_.count(task_id) > 0; }

std::vector<int> BackboneModel::task_ids() const {
    std::vector<int> ids;
    for (const auto& [id, _] : heads_) ids.push_back(id);
    return ids;
}

const std::vector<int>& BackboneModel::class_set(int task_id) const {
    auto it = heads_.find(task_id);
    if (it == heads_.end())
        throw std::invalid_argument("unknown task " + std::to_string(task_id));
    return it->second.class_set;
}

int BackboneModel::head_width(int task_id) const {
    auto it = heads_.find(task_id);
    if (it == heads_.end())
        throw std::invalid_argument("unknown task " + std::to_string(task_id));
    return it->second.layer.out_features();
}

ag::Var BackboneModel::features_b(const Tensor& inputs) const {
    if (cfg_.kind == BackboneKind::synthetic2d) return ag::constant(inputs);
    ag::Var x = ag::constant(inputs);
    x = ag::maxpool2(ag::relu(conv1_(x)));
    x = ag::maxpool2(ag::relu(conv2_(x)));
    return fc_b_(ag::flatten(x));  // pre-activation: unbounded support
}

ag::Var BackboneModel::logits_from_feat(const ag::Var& feat_b, int task_id) const {
    auto it = heads_.find(task_id);
    if (it == heads_.end())
        throw std::invalid_argument("unknown task " + std::to_string(task_id));
    // the cnn's feat_b is pre-activation, so stage_c starts with the relu;
    // raw 2-D points would lose their negative quadrants under that relu
    ag::Var h = cfg_.kind == BackboneKind::cnn
                    ? ag::relu(fc_c_(ag::relu(feat_b)))
                    : ag::relu(fc_c_(feat_b));
    return it->second.layer(h);
}

ForwardResult BackboneModel::forward(const Tensor& inputs, int task_id) const {
    ag::Var fb = features_b(inputs);
    return {fb, logits_from_feat(fb, task_id)};
}

int BackboneModel::expand_head(int task_id) {
    auto it = heads_.find(task_id);
    if (it == heads_.end())
        throw std::invalid_argument("unknown task " + std::to_string(task_id));
    Head& h = it->second;
    if (h.expanded)
        throw std::logic_error("head " + std::to_string(task_id) +
                               " already expanded");
    const int width = h.layer.out_features();
    const int in = h.layer.in_features();
    Tensor w({width + 1, in});
    Tensor b({width + 1});
    for (int r = 0; r < width; ++r)
        for (int c = 0; c < in; ++c) w.at(r, c) = h.layer.W->value.at(r, c);
    for (int r = 0; r < width; ++r) b[r] = h.layer.b->value[r];
    // pseudo row stays zero: pre-expansion logits are reproduced bit for bit
    h.layer.W = ag::make_param(std::move(w));
    h.layer.b = ag::make_param(std::move(b));
    h.expanded = true;
    h.activation_log.clear();
    return width;
}

bool BackboneModel::is_expanded(int task_id) const {
    auto it = heads_.find(task_id);
    return it != heads_.end() && it->second.expanded;
}

void BackboneModel::record_pseudo_activation(int task_id, double mean_logit) {
    auto it = heads_.find(task_id);
    if (it == heads_.end() || !it->second.expanded)
        throw std::logic_error("no expanded head to record activations for");
    it->second.activation_log.push_back(mean_logit);
}

std::vector<double> BackboneModel::prune_head(int task_id, int pseudo_class_index) {
    auto it = heads_.find(task_id);
    if (it == heads_.end())
        throw std::invalid_argument("unknown task " + std::to_string(task_id));
    Head& h = it->second;
    if (!h.expanded) throw std::logic_error("pruning a non-expanded head");
    const int width = h.layer.out_features();
    if (pseudo_class_index != width - 1)
        throw std::invalid_argument("pseudo class index does not match expansion");
    const int in = h.layer.in_features();
    Tensor w({width - 1, in});
    Tensor b({width - 1});
    for (int r = 0; r < width - 1; ++r)
        for (int c = 0; c < in; ++c) w.at(r, c) = h.layer.W->value.at(r, c);
    for (int r = 0; r < width - 1; ++r) b[r] = h.layer.b->value[r];
    h.layer.W = ag::make_param(std::move(w));
    h.layer.b = ag::make_param(std::move(b));
    h.expanded = false;
    std::vector<double> log = std::move(h.activation_log);
    h.activation_log.clear();
    return log;
}

std::int64_t BackboneModel::parameter_count() const {
    return nn::param_count(all_params());
}

nn::ParamList BackboneModel::shared_params() const {
    nn::ParamList out;
    if (cfg_.kind == BackboneKind::cnn) {
        conv1_.collect("a.conv1", out);
        conv2_.collect("a.conv2", out);
        fc_b_.collect("b.fc", out);
    }
    fc_c_.collect("c.fc", out);
    return out;
}

nn::ParamList BackboneModel::stage_c_params() const {
    nn::ParamList out;
    fc_c_.collect("c.fc", out);
    return out;
}

nn::ParamList BackboneModel::head_params(int task_id) const {
    auto it = heads_.find(task_id);
    if (it == heads_.end())
        throw std::invalid_argument("unknown task " + std::to_string(task_id));
    nn::ParamList out;
    it->second.layer.collect("head." + std::to_string(task_id), out);
    return out;
}

nn::ParamList BackboneModel::all_params() const {
    nn::ParamList out = shared_params();
    for (const auto& [id, h] : heads_)
        h.layer.collect("head." + std::to_string(id), out);
    return out;
}

nn::ParamList BackboneModel::trainable_params(int task_id) const {
    nn::ParamList out = shared_params();
    for (auto& p : head_params(task_id)) out.push_back(std::move(p));
    return out;
}

ParamArchive BackboneModel::snapshot_parameters() const {
    ParamArchive a;
    for (const auto& p : all_params()) a.tensors.emplace_back(p.name, p.var->value);
    for (const auto& [id, h] : heads_) a.head_widths[id] = h.layer.out_features();
    return a;
}

void BackboneModel::restore_parameters(const ParamArchive& archive) {
    std::map<int, int> widths;
    for (const auto& [id, h] : heads_) widths[id] = h.layer.out_features();
    if (archive.head_widths != widths)
        throw std::invalid_argument(
            "archive head widths do not match the current architecture");
    nn::ParamList params = all_params();
    if (params.size() != archive.tensors.size())
        throw std::invalid_argument("archive parameter set does not match");
    for (auto& p : params) {
        const Tensor* t = archive.find(p.name);
        if (!t || !t->same_shape(p.var->value))
            throw std::invalid_argument("archive tensor mismatch for " + p.name);
        p.var->value = *t;
    }
}

Tensor pack_inputs(const std::vector<task::LabeledExample>& examples,
                   const std::vector<int>& indices) {
    if (indices.empty()) throw std::invalid_argument("empty batch");
    const auto& shape = examples[indices[0]].input.shape();
    std::vector<int> bshape;
    bshape.push_back(static_cast<int>(indices.size()));
    for (int s : shape) bshape.push_back(s);
    Tensor out(bshape);
    const std::int64_t per = examples[indices[0]].input.numel();
    for (std::size_t i = 0; i < indices.size(); ++i) {
        const Tensor& src = examples[indices[i]].input;
        std::copy(src.data(), src.data() + per, out.data() + i * per);
    }
    return out;
}

Tensor pack_inputs(const std::vector<task::LabeledExample>& examples) {
    std::vector<int> idx(examples.size());
    for (std::size_t i = 0; i < examples.size(); ++i) idx[i] = static_cast<int>(i);
    return pack_inputs(examples, idx);
}

std::vector<int> local_labels(const task::TaskDataset& t,
                              const std::vector<task::LabeledExample>& examples,
                              const std::vector<int>& indices) {
    std::vector<int> out;
    out.reserve(indices.size());
    for (int i : indices) out.push_back(t.local_index(examples[i].observed_label));
    return out;
}

}  // namespace eraser::model
