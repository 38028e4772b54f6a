#pragma once
// Class-conditional normalizing flow over the d-dimensional feat_b space.
// Affine coupling layers on alternating contiguous halves, conditioned by a
// learned label embedding; a running-statistics standardizer acts as an
// affine layer 0. Exact log-density via the change-of-variables sum, exact
// inverse for conditional sampling.

#include <cstdint>
#include <memory>
#include <set>
#include <utility>
#include <vector>

#include "eraser/autograd.hpp"
#include "eraser/nn.hpp"
#include "eraser/rng.hpp"
#include "eraser/tensor.hpp"

namespace eraser::flow {

struct FlowConfig {
    int dim = 64;             // d — must match the backbone's feature width
    int layers = 6;           // K coupling layers
    int hidden = 64;          // width of each coupling net's hidden layer
    int embed_dim = 16;       // label embedding width
    int label_capacity = 10;  // global class ids must stay below this
    double s_cap = 2.0;       // scale net output bounded to (-s_cap, s_cap)
    double sigma_floor = 1e-3;
    std::uint64_t init_seed = 2;
};

class FlowModel;

// frozen deep copy of a trained flow plus the labels it covered
struct FlowSnapshot {
    std::shared_ptr<const FlowModel> model;
    std::vector<int> label_set;

    // deterministic given the rng state; returns [count, d] feature vectors
    Tensor sample(int label, int count, Rng& rng) const;
};

class FlowModel {
public:
    explicit FlowModel(const FlowConfig& cfg);

    FlowModel(const FlowModel&) = delete;
    FlowModel& operator=(const FlowModel&) = delete;
    FlowModel(FlowModel&&) = default;
    FlowModel& operator=(FlowModel&&) = default;

    const FlowConfig& config() const { return cfg_; }

    void register_labels(const std::vector<int>& labels);
    bool is_registered(int label) const { return labels_.count(label) > 0; }
    std::vector<int> registered_labels() const;

    // fold a feature batch [N,d] into the running standardizer statistics
    void accumulate_standardizer(const Tensor& feats);
    bool standardizer_ready() const { return std_state_.count > 0; }

    // u = f(feat_b | label), log_det = sum over layers (incl. standardizer)
    std::pair<ag::Var, ag::Var> flow_forward(const ag::Var& feat_b,
                                             const std::vector<int>& labels) const;

    // log p(feat_b | label) = log N(u; 0, I) + log_det, one scalar per row
    ag::Var log_prob(const ag::Var& feat_b, const std::vector<int>& labels) const;

    // mean of -log_prob over the batch
    ag::Var nll_loss(const ag::Var& feat_b, const std::vector<int>& labels) const;

    // current-batch NLL plus the mean NLL (under *this* flow) of
    // replay_count features generated by the frozen snapshot under its own
    // labels. Pass replay = nullptr for the first task.
    ag::Var incremental_nll_loss(const ag::Var& feat_b,
                                 const std::vector<int>& labels,
                                 const FlowSnapshot* replay, int replay_count,
                                 Rng& rng) const;

    // --- evaluation / sampling (no graph) -----------------------------------
    Tensor log_prob_values(const Tensor& feats, const std::vector<int>& labels) const;
    Tensor sample(int label, int count, Rng& rng) const;  // f^{-1}(u~N(0,I))
    Tensor inverse(const Tensor& u, const std::vector<int>& labels) const;

    FlowSnapshot snapshot() const;

    nn::ParamList params() const;

    // standardizer state, exposed for checkpointing
    struct StandardizerState {
        std::int64_t count = 0;
        std::vector<double> mean, m2;  // Welford accumulators, length d
    };
    const StandardizerState& standardizer() const { return std_state_; }
    void set_standardizer(const StandardizerState& s);

private:
    struct Coupling {
        nn::Linear l1, l2;  // [keep + embed] -> hidden -> 2 * change
    };

    std::unique_ptr<FlowModel> clone() const;
    // per-layer split: even layers keep the low half, odd keep the high half
    void halves(int layer, int& lo, int& hi) const;
    ag::Var embed(const std::vector<int>& labels) const;
    std::vector<double> sigma() const;  // floored std-devs

    FlowConfig cfg_;
    std::vector<Coupling> couplings_;
    ag::Var embedding_;  // [label_capacity, embed_dim]
    std::set<int> labels_;
    StandardizerState std_state_;
};

}  // namespace eraser::flow
