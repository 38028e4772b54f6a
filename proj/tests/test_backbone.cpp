// Backbone contracts: shape/purity of forward, pseudo-neuron expansion and
// pruning (exact parameter bookkeeping, bit-identical logits), snapshot
// round-trips, and head isolation under training.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <vector>

#include "eraser/backbone.hpp"
#include "eraser/nn.hpp"
#include "eraser/rng.hpp"

using namespace eraser;
using namespace eraser::model;

namespace {

BackboneConfig small_cnn_config() {
    BackboneConfig cfg;
    cfg.kind = BackboneKind::cnn;
    cfg.in_channels = 1;
    cfg.in_h = 12;
    cfg.in_w = 12;
    cfg.conv1_channels = 4;
    cfg.conv2_channels = 6;
    cfg.feature_dim = 16;
    cfg.stage_c_dim = 16;
    cfg.init_seed = 7;
    return cfg;
}

Tensor random_batch(int b, const std::vector<int>& item_shape, Rng& rng) {
    std::vector<int> shape{b};
    for (int s : item_shape) shape.push_back(s);
    Tensor t(shape);
    for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform();
    return t;
}

}  // namespace

TEST_CASE("forward shape contract and purity") {
    BackboneModel m(small_cnn_config());
    m.register_task(1, {3, 8});
    Rng rng(1);
    Tensor batch = random_batch(5, {1, 12, 12}, rng);

    ag::NoGradGuard guard;
    auto r = m.forward(batch, 1);
    CHECK(r.feat_b->value.shape() == std::vector<int>{5, 16});
    CHECK(r.logits->value.shape() == std::vector<int>{5, 2});

    // duplicated rows give identical outputs (deterministic, side-effect free)
    Tensor dup = random_batch(2, {1, 12, 12}, rng);
    for (int j = 0; j < 144; ++j) dup[144 + j] = dup[j];
    auto rd = m.forward(dup, 1);
    for (int c = 0; c < 2; ++c)
        CHECK(rd.logits->value.at(0, c) == rd.logits->value.at(1, c));

    CHECK_THROWS(m.forward(batch, 99));  // unknown task
}

TEST_CASE("zero-weight head yields all-zero logits") {
    BackboneModel m(small_cnn_config());
    m.register_task(1, {0, 1, 2});
    for (auto& p : m.head_params(1)) p.var->value.fill(0.0);
    Rng rng(2);
    ag::NoGradGuard guard;
    auto r = m.forward(random_batch(3, {1, 12, 12}, rng), 1);
    for (std::int64_t i = 0; i < r.logits->value.numel(); ++i)
        CHECK(r.logits->value[i] == 0.0);
}

TEST_CASE("expand then prune restores the exact parameter count") {
    BackboneModel m(small_cnn_config());
    m.register_task(1, {3, 8});
    const auto before = m.parameter_count();
    const int pseudo = m.expand_head(1);
    CHECK(pseudo == 2);
    CHECK(m.head_width(1) == 3);
    CHECK(m.parameter_count() == before + 16 + 1);  // one row + one bias
    CHECK_THROWS(m.expand_head(1));  // double expansion

    m.record_pseudo_activation(1, 0.5);
    m.record_pseudo_activation(1, 0.9);
    auto log = m.prune_head(1, pseudo);
    CHECK(log == std::vector<double>{0.5, 0.9});
    CHECK(m.head_width(1) == 2);
    CHECK(m.parameter_count() == before);
    CHECK_THROWS(m.prune_head(1, pseudo));  // not expanded anymore

    // expand again after prune is allowed
    CHECK(m.expand_head(1) == 2);
    m.prune_head(1, 2);
}

TEST_CASE("zero-init pseudo neuron leaves pre-expansion logits bit-identical") {
    BackboneModel m(small_cnn_config());
    m.register_task(1, {3, 8});
    Rng rng(3);
    Tensor batch = random_batch(4, {1, 12, 12}, rng);

    ag::NoGradGuard guard;
    auto before = m.forward(batch, 1).logits->value;
    int pseudo = m.expand_head(1);
    auto during = m.forward(batch, 1).logits->value;
    REQUIRE(during.shape() == std::vector<int>{4, 3});
    for (int r = 0; r < 4; ++r) {
        for (int c = 0; c < 2; ++c) CHECK(during.at(r, c) == before.at(r, c));
        CHECK(during.at(r, pseudo) == 0.0);
    }
    m.prune_head(1, pseudo);
    auto after = m.forward(batch, 1).logits->value;
    for (std::int64_t i = 0; i < before.numel(); ++i) CHECK(after[i] == before[i]);
}

TEST_CASE("expansion and pruning never touch other parameters") {
    BackboneModel m(small_cnn_config());
    m.register_task(1, {3, 8});
    m.register_task(2, {1, 5});
    auto grab = [&] {
        std::vector<Tensor> vals;
        for (const auto& p : m.shared_params()) vals.push_back(p.var->value);
        for (const auto& p : m.head_params(2)) vals.push_back(p.var->value);
        return vals;
    };
    auto before = grab();
    int pseudo = m.expand_head(1);
    m.prune_head(1, pseudo);
    auto after = grab();
    REQUIRE(before.size() == after.size());
    for (std::size_t i = 0; i < before.size(); ++i)
        CHECK(before[i].vec() == after[i].vec());
}

TEST_CASE("snapshot and restore round-trip exactly") {
    BackboneModel m(small_cnn_config());
    m.register_task(1, {3, 8});
    Rng rng(4);
    Tensor batch = random_batch(3, {1, 12, 12}, rng);

    auto archive = m.snapshot_parameters();
    {
        ag::NoGradGuard guard;
        auto want = m.forward(batch, 1).logits->value;

        // perturb every parameter, confirm outputs change, then restore
        for (auto& p : m.all_params())
            for (std::int64_t i = 0; i < p.var->value.numel(); ++i)
                p.var->value[i] += 0.05;
        auto moved = m.forward(batch, 1).logits->value;
        double diff = 0.0;
        for (std::int64_t i = 0; i < moved.numel(); ++i)
            diff += std::abs(moved[i] - want[i]);
        CHECK(diff > 1e-3);

        m.restore_parameters(archive);
        auto back = m.forward(batch, 1).logits->value;
        for (std::int64_t i = 0; i < back.numel(); ++i) CHECK(back[i] == want[i]);
    }

    // restoring a non-expanded archive into an expanded head is rejected
    m.expand_head(1);
    CHECK_THROWS(m.restore_parameters(archive));
    m.prune_head(1, 2);
    m.restore_parameters(archive);
}

TEST_CASE("training one task's params leaves other heads untouched") {
    BackboneModel m(small_cnn_config());
    m.register_task(1, {3, 8});
    m.register_task(2, {1, 5});
    auto head2_before = m.head_params(2);
    std::vector<Tensor> snap;
    for (const auto& p : head2_before) snap.push_back(p.var->value);

    Rng rng(5);
    nn::Adam opt(1e-2);
    auto params = m.trainable_params(1);
    for (int step = 0; step < 3; ++step) {
        Tensor batch = random_batch(4, {1, 12, 12}, rng);
        nn::zero_grads(params);
        auto r = m.forward(batch, 1);
        ag::Var loss = ag::cross_entropy(r.logits, std::vector<int>{0, 1, 0, 1});
        ag::backward(loss);
        opt.step(params);
    }
    // head 2 has not moved at all; head 1 has
    auto head2_after = m.head_params(2);
    for (std::size_t i = 0; i < snap.size(); ++i)
        CHECK(head2_after[i].var->value.vec() == snap[i].vec());
}

TEST_CASE("synthetic2d backbone treats the input as feat_b directly") {
    BackboneConfig cfg;
    cfg.kind = BackboneKind::synthetic2d;
    cfg.stage_c_dim = 8;
    cfg.init_seed = 11;
    BackboneModel m(cfg);
    CHECK(m.feature_dim() == 2);
    m.register_task(1, {0, 1});
    Tensor pts({3, 2}, {1.0, -2.0, 0.5, 0.5, -4.0, 3.0});
    ag::NoGradGuard guard;
    auto r = m.forward(pts, 1);
    CHECK(r.feat_b->value.vec() == pts.vec());
    CHECK(r.logits->value.shape() == std::vector<int>{3, 2});
}

TEST_CASE("pack_inputs and local_labels align batches") {
    task::TaskDataset t;
    t.task_id = 1;
    t.class_set = {7, 3};
    for (int i = 0; i < 4; ++i) {
        Tensor x({2}, {double(i), double(-i)});
        t.train.push_back({std::move(x), i % 2 == 0 ? 7 : 3, i % 2 == 0 ? 7 : 3, false});
    }
    std::vector<int> idx{2, 0, 3};
    Tensor batch = pack_inputs(t.train, idx);
    CHECK(batch.shape() == std::vector<int>{3, 2});
    CHECK(batch.at(0, 0) == 2.0);
    CHECK(batch.at(1, 0) == 0.0);
    auto labels = local_labels(t, t.train, idx);
    CHECK(labels == std::vector<int>{0, 0, 1});
    CHECK_THROWS(pack_inputs(t.train, {}));
}
