#include "eraser/flow.hpp"

#include <cmath>
#include <stdexcept>

namespace eraser::flow {

namespace {
constexpr double kLog2Pi = 1.8378770664093454836;  // log(2*pi)
}

FlowModel::FlowModel(const FlowConfig& cfg) : cfg_(cfg) {
    if (cfg.dim < 2) throw std::invalid_argument("flow dim must be >= 2");
    if (cfg.layers < 1) throw std::invalid_argument("flow needs >= 1 layer");
    Rng rng(cfg.init_seed);
    couplings_.reserve(cfg.layers);
    for (int l = 0; l < cfg.layers; ++l) {
        int lo, hi;
        halves(l, lo, hi);
        const int keep = (l % 2 == 0) ? lo : hi;
        const int change = cfg.dim - keep;
        Coupling c;
        c.l1 = nn::Linear(keep + cfg.embed_dim, cfg.hidden, rng);
        // zero-init output layer: every coupling starts as the identity
        c.l2 = nn::Linear::zeros(cfg.hidden, 2 * change);
        couplings_.push_back(std::move(c));
    }
    // unit-scale rows: the embedding must be commensurate with the
    // standardized features it is concatenated with, or the couplings learn
    // label-independent structure long before any conditioning develops
    Tensor emb({cfg.label_capacity, cfg.embed_dim});
    for (std::int64_t i = 0; i < emb.numel(); ++i) emb[i] = rng.normal();
    embedding_ = ag::make_param(std::move(emb));

    std_state_.mean.assign(cfg.dim, 0.0);
    std_state_.m2.assign(cfg.dim, 0.0);
}

void FlowModel::halves(int layer, int& lo, int& hi) const {
    lo = cfg_.dim / 2;
    hi = cfg_.dim - lo;
    (void)layer;
}

void FlowModel::register_labels(const std::vector<int>& labels) {
    for (int l : labels) {
        if (l < 0 || l >= cfg_.label_capacity)
            throw std::invalid_argument("label " + std::to_string(l) +
                                        " outside flow capacity " +
                                        std::to_string(cfg_.label_capacity));
        labels_.insert(l);
    }
}

std::vector<int> FlowModel::registered_labels() const {
    return {labels_.begin(), labels_.end()};
}

void FlowModel::accumulate_standardizer(const Tensor& feats) {
    const int n = feats.dim(0);
    const int d = feats.dim(1);
    if (d != cfg_.dim) throw std::invalid_argument("standardizer width mismatch");
    for (int i = 0; i < n; ++i) {
        ++std_state_.count;
        for (int j = 0; j < d; ++j) {
            const double x = feats.at(i, j);
            const double delta = x - std_state_.mean[j];
            std_state_.mean[j] += delta / static_cast<double>(std_state_.count);
            std_state_.m2[j] += delta * (x - std_state_.mean[j]);
        }
    }
}

void FlowModel::set_standardizer(const StandardizerState& s) {
    if (static_cast<int>(s.mean.size()) != cfg_.dim ||
        static_cast<int>(s.m2.size()) != cfg_.dim)
        throw std::invalid_argument("standardizer state width mismatch");
    std_state_ = s;
}

std::vector<double> FlowModel::sigma() const {
    std::vector<double> s(cfg_.dim, 1.0);
    if (std_state_.count < 2) return s;
    for (int j = 0; j < cfg_.dim; ++j) {
        const double var = std_state_.m2[j] / static_cast<double>(std_state_.count);
        s[j] = std::max(std::sqrt(var), cfg_.sigma_floor);
    }
    return s;
}

ag::Var FlowModel::embed(const std::vector<int>& labels) const {
    for (int l : labels)
        if (!labels_.count(l))
            throw std::invalid_argument("label " + std::to_string(l) +
                                        " not registered with the flow");
    return ag::embedding(embedding_, labels);
}

std::pair<ag::Var, ag::Var> FlowModel::flow_forward(
    const ag::Var& feat_b, const std::vector<int>& labels) const {
    const int B = feat_b->value.dim(0);
    if (feat_b->value.dim(1) != cfg_.dim)
        throw std::invalid_argument("feature width does not match the flow");
    if (static_cast<int>(labels.size()) != B)
        throw std::invalid_argument("label count does not match the batch");
    for (std::int64_t i = 0; i < feat_b->value.numel(); ++i)
        if (!std::isfinite(feat_b->value[i]))
            throw std::invalid_argument("non-finite feature input to the flow");

    // layer 0: standardize; constant per-sample log-det of -sum log sigma
    const std::vector<double> sg = sigma();
    std::vector<double> inv_s(cfg_.dim), shift(cfg_.dim);
    double std_log_det = 0.0;
    for (int j = 0; j < cfg_.dim; ++j) {
        inv_s[j] = 1.0 / sg[j];
        shift[j] = -std_state_.mean[j] / sg[j];
        std_log_det -= std::log(sg[j]);
    }
    ag::Var x = ag::rows_affine(feat_b, inv_s, shift);
    ag::Var log_det = ag::constant(Tensor::full({B}, std_log_det));

    ag::Var cond = embed(labels);
    int lo, hi;
    halves(0, lo, hi);
    for (int l = 0; l < cfg_.layers; ++l) {
        const bool keep_low = (l % 2 == 0);
        ag::Var keep = keep_low ? ag::slice_cols(x, 0, lo)
                                : ag::slice_cols(x, lo, cfg_.dim);
        ag::Var change = keep_low ? ag::slice_cols(x, lo, cfg_.dim)
                                  : ag::slice_cols(x, 0, lo);
        const int ch = change->value.dim(1);
        ag::Var net = couplings_[l].l2(
            ag::relu(couplings_[l].l1(ag::concat_cols(keep, cond))));
        ag::Var s = ag::scale(ag::tanh_v(ag::slice_cols(net, 0, ch)), cfg_.s_cap);
        ag::Var t = ag::slice_cols(net, ch, 2 * ch);
        ag::Var moved = ag::add(ag::mul(change, ag::exp_v(s)), t);
        x = keep_low ? ag::concat_cols(keep, moved) : ag::concat_cols(moved, keep);
        log_det = ag::add(log_det, ag::row_sum(s));
    }
    return {x, log_det};
}

ag::Var FlowModel::log_prob(const ag::Var& feat_b,
                            const std::vector<int>& labels) const {
    auto [u, log_det] = flow_forward(feat_b, labels);
    // log N(u; 0, I) = -d/2 log(2pi) - ||u||^2 / 2
    ag::Var prior = ag::add_scalar(ag::scale(ag::row_sum(ag::square(u)), -0.5),
                                   -0.5 * cfg_.dim * kLog2Pi);
    return ag::add(prior, log_det);
}

ag::Var FlowModel::nll_loss(const ag::Var& feat_b,
                            const std::vector<int>& labels) const {
    return ag::scale(ag::mean(log_prob(feat_b, labels)), -1.0);
}

ag::Var FlowModel::incremental_nll_loss(const ag::Var& feat_b,
                                        const std::vector<int>& labels,
                                        const FlowSnapshot* replay,
                                        int replay_count, Rng& rng) const {
    ag::Var current = nll_loss(feat_b, labels);
    if (!replay) {
        if (replay_count > 0)
            throw std::invalid_argument("replay requested without a flow snapshot");
        return current;
    }
    if (replay_count < 1)
        throw std::invalid_argument("replay_count must be >= 1 with a snapshot");
    if (replay->label_set.empty())
        throw std::invalid_argument("replay snapshot covers no labels");

    // old-task features from the frozen generator, under old-task labels
    std::vector<int> replay_labels(replay_count);
    Tensor replay_feats({replay_count, cfg_.dim});
    for (int i = 0; i < replay_count; ++i) {
        const int label = replay->label_set[rng.below_int(
            static_cast<int>(replay->label_set.size()))];
        replay_labels[i] = label;
        Tensor one = replay->sample(label, 1, rng);
        for (int j = 0; j < cfg_.dim; ++j) replay_feats.at(i, j) = one.at(0, j);
    }
    ag::Var replay_nll = nll_loss(ag::constant(std::move(replay_feats)), replay_labels);
    return ag::add(current, replay_nll);
}

Tensor FlowModel::log_prob_values(const Tensor& feats,
                                  const std::vector<int>& labels) const {
    ag::NoGradGuard guard;
    return log_prob(ag::constant(feats), labels)->value;
}

Tensor FlowModel::inverse(const Tensor& u, const std::vector<int>& labels) const {
    ag::NoGradGuard guard;
    const int B = u.dim(0);
    if (u.dim(1) != cfg_.dim) throw std::invalid_argument("latent width mismatch");
    int lo, hi;
    halves(0, lo, hi);
    ag::Var cond = embed(labels);
    ag::Var x = ag::constant(u);
    for (int l = cfg_.layers - 1; l >= 0; --l) {
        const bool keep_low = (l % 2 == 0);
        ag::Var keep = keep_low ? ag::slice_cols(x, 0, lo)
                                : ag::slice_cols(x, lo, cfg_.dim);
        ag::Var moved = keep_low ? ag::slice_cols(x, lo, cfg_.dim)
                                 : ag::slice_cols(x, 0, lo);
        const int ch = moved->value.dim(1);
        ag::Var net = couplings_[l].l2(
            ag::relu(couplings_[l].l1(ag::concat_cols(keep, cond))));
        ag::Var s = ag::scale(ag::tanh_v(ag::slice_cols(net, 0, ch)), cfg_.s_cap);
        ag::Var t = ag::slice_cols(net, ch, 2 * ch);
        ag::Var orig = ag::mul(ag::sub(moved, t), ag::exp_v(ag::scale(s, -1.0)));
        x = keep_low ? ag::concat_cols(keep, orig) : ag::concat_cols(orig, keep);
    }
    // undo the standardizer: feat = z * sigma + mean
    const std::vector<double> sg = sigma();
    Tensor out({B, cfg_.dim});
    for (int i = 0; i < B; ++i)
        for (int j = 0; j < cfg_.dim; ++j)
            out.at(i, j) = x->value.at(i, j) * sg[j] + std_state_.mean[j];
    return out;
}

Tensor FlowModel::sample(int label, int count, Rng& rng) const {
    if (count < 1) throw std::invalid_argument("sample count must be >= 1");
    if (!labels_.count(label))
        throw std::invalid_argument("label " + std::to_string(label) +
                                    " not registered with the flow");
    Tensor u({count, cfg_.dim});
    for (std::int64_t i = 0; i < u.numel(); ++i) u[i] = rng.normal();
    return inverse(u, std::vector<int>(count, label));
}

std::unique_ptr<FlowModel> FlowModel::clone() const {
    auto copy = std::make_unique<FlowModel>(cfg_);
    for (int l = 0; l < cfg_.layers; ++l) {
        copy->couplings_[l].l1.W->value = couplings_[l].l1.W->value;
        copy->couplings_[l].l1.b->value = couplings_[l].l1.b->value;
        copy->couplings_[l].l2.W->value = couplings_[l].l2.W->value;
        copy->couplings_[l].l2.b->value = couplings_[l].l2.b->value;
    }
    copy->embedding_->value = embedding_->value;
    copy->labels_ = labels_;
    copy->std_state_ = std_state_;
    return copy;
}

FlowSnapshot FlowModel::snapshot() const {
    FlowSnapshot s;
    s.model = std::shared_ptr<const FlowModel>(clone().release());
    s.label_set = registered_labels();
    return s;
}

Tensor FlowSnapshot::sample(int label, int count, Rng& rng) const {
    return model->sample(label, count, rng);
}

nn::ParamList FlowModel::params() const {
    nn::ParamList out;
    for (std::size_t l = 0; l < couplings_.size(); ++l) {
        couplings_[l].l1.collect("flow." + std::to_string(l) + ".l1", out);
        couplings_[l].l2.collect("flow." + std::to_string(l) + ".l2", out);
    }
    out.push_back({"flow.embedding", embedding_});
    return out;
}

}  // namespace eraser::flow
