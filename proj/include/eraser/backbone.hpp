#pragma once
// Task-incremental classifier: shared feature stages a/b/c plus one linear
// head per task. Heads support pseudo-neuron expansion and exact pruning for
// the erasure phase. feat_b (the raw stage_b output, pre-activation) is the
// representation the density flow consumes.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "eraser/autograd.hpp"
#include "eraser/nn.hpp"
#include "eraser/taskstream.hpp"
#include "eraser/tensor.hpp"

namespace eraser::model {

enum class BackboneKind { cnn, synthetic2d };

BackboneKind parse_backbone_kind(const std::string& name);
std::string backbone_kind_name(BackboneKind k);

struct BackboneConfig {
    BackboneKind kind = BackboneKind::cnn;
    int in_channels = 1, in_h = 28, in_w = 28;
    int conv1_channels = 8, conv2_channels = 16;
    int feature_dim = 64;  // d — width of feat_b
    int stage_c_dim = 64;
    std::uint64_t init_seed = 1;
};

struct ForwardResult {
    ag::Var feat_b;  // [B, d]
    ag::Var logits;  // [B, head width of the task]
};

// immutable parameter archive for snapshot/restore and EWC/LwF anchors
struct ParamArchive {
    std::vector<std::pair<std::string, Tensor>> tensors;  // name -> value copy
    std::map<int, int> head_widths;

    const Tensor* find(const std::string& name) const;
};

class BackboneModel {
public:
    explicit BackboneModel(const BackboneConfig& cfg);

    const BackboneConfig& config() const { return cfg_; }
    int feature_dim() const { return d_; }

    // creates a zero-task head lazily; widths come from the class set
    void register_task(int task_id, const std::vector<int>& class_set);
    bool has_task(int task_id) const;
    std::vector<int> task_ids() const;
    const std::vector<int>& class_set(int task_id) const;
    int head_width(int task_id) const;

    // inputs packed [B, C, H, W] (cnn) or [B, 2] (synthetic2d)
    ForwardResult forward(const Tensor& inputs, int task_id) const;
    ag::Var features_b(const Tensor& inputs) const;             // stage_a + b
    ag::Var logits_from_feat(const ag::Var& feat_b, int task_id) const;  // c + head

    // --- erasure surgery ---------------------------------------------------
    int expand_head(int task_id);  // returns the pseudo class index
    bool is_expanded(int task_id) const;
    void record_pseudo_activation(int task_id, double mean_logit);
    std::vector<double> prune_head(int task_id, int pseudo_class_index);

    // --- parameters ----------------------------------------------------------
    std::int64_t parameter_count() const;
    nn::ParamList all_params() const;
    nn::ParamList shared_params() const;   // stages a, b, c
    nn::ParamList stage_c_params() const;
    nn::ParamList head_params(int task_id) const;
    nn::ParamList trainable_params(int task_id) const;  // shared + head(t)

    ParamArchive snapshot_parameters() const;
    void restore_parameters(const ParamArchive& archive);

private:
    struct Head {
        nn::Linear layer;
        std::vector<int> class_set;
        bool expanded = false;
        std::vector<double> activation_log;
    };

    BackboneConfig cfg_;
    int d_ = 0;
    int flat_dim_ = 0;  // stage_a output size (cnn)
    nn::Conv2d conv1_, conv2_;
    nn::Linear fc_b_, fc_c_;
    std::map<int, Head> heads_;
};

// pack a list of examples into one batch tensor (shape [B, ...input shape])
Tensor pack_inputs(const std::vector<task::LabeledExample>& examples,
                   const std::vector<int>& indices);
Tensor pack_inputs(const std::vector<task::LabeledExample>& examples);

// observed labels as local head indices, aligned with pack_inputs order
std::vector<int> local_labels(const task::TaskDataset& t,
                              const std::vector<task::LabeledExample>& examples,
                              const std::vector<int>& indices);

}  // namespace eraser::model
