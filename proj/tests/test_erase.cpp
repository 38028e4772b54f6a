// Erasure mechanics: head expansion + fine-tune + prune leaves the parameter
// count intact, pushes selected samples toward the pseudo class monotonically,
// restores bit-identical parameters when the loss diverges, keeps untouched
// stages frozen, and the verification conditions behave as specified.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include <json.hpp>

#include "eraser/erase.hpp"
#include "eraser/nn.hpp"

using namespace eraser;
using erasure::ErasureConfig;
using erasure::ErasureReport;

namespace {

// two clean blobs plus a compact mislabeled cluster the classifier memorizes
struct Fixture {
    model::BackboneModel net;
    task::TaskDataset data;
    std::vector<int> selected;  // the mislabeled cluster
    std::vector<int> retained;  // clean samples

    explicit Fixture(std::uint64_t seed, int cluster_size = 24)
        : net(make_cfg()), data(make_task(seed)) {
        const int a = data.class_set[0], b = data.class_set[1];
        Rng rng(seed + 7);
        for (int i = 0; i < cluster_size; ++i) {
            task::LabeledExample ex;
            ex.input = Tensor({2}, {0.25 * rng.normal(), 4.0 + 0.25 * rng.normal()});
            ex.true_label = a;
            ex.observed_label = b;  // consistently wrong: gets memorized
            ex.noisy = true;
            selected.push_back(static_cast<int>(data.train.size()));
            data.train.push_back(ex);
        }
        for (int i = 0; i < static_cast<int>(data.train.size()); ++i)
            if (!data.train[i].noisy) retained.push_back(i);

        net.register_task(1, data.class_set);
        train(seed + 8);
    }

    static model::BackboneConfig make_cfg() {
        model::BackboneConfig cfg;
        cfg.kind = model::BackboneKind::synthetic2d;
        cfg.feature_dim = 2;
        cfg.stage_c_dim = 8;
        cfg.init_seed = 5;
        return cfg;
    }
    static task::TaskDataset make_task(std::uint64_t seed) {
        task::BuildOptions opt;
        opt.synthetic_per_class = 150;
        opt.data_seed = seed;
        return task::build_task_sequence(task::DatasetId::synthetic2d, 1, seed, opt)
            .front();
    }

    void train(std::uint64_t seed) {
        nn::Adam opt(1e-2);
        auto params = net.trainable_params(1);
        Rng rng(seed);
        const int n = static_cast<int>(data.train.size());
        std::vector<int> order(n);
        std::iota(order.begin(), order.end(), 0);
        for (int epoch = 0; epoch < 40; ++epoch) {
            rng.shuffle(order);
            for (int start = 0; start < n; start += 64) {
                const int bs = std::min(64, n - start);
                std::vector<int> batch(order.begin() + start,
                                       order.begin() + start + bs);
                Tensor x = model::pack_inputs(data.train, batch);
                std::vector<int> y = model::local_labels(data, data.train, batch);
                nn::zero_grads(params);
                ag::Var loss = ag::cross_entropy(net.forward(x, 1).logits, y);
                ag::backward(loss);
                opt.step(params);
            }
        }
    }
};

std::vector<Tensor> param_values(const nn::ParamList& params) {
    std::vector<Tensor> out;
    for (const auto& p : params) out.push_back(p.var->value);
    return out;
}

bool bit_identical(const std::vector<Tensor>& a, const std::vector<Tensor>& b) {
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (a[i].numel() != b[i].numel()) return false;
        for (std::int64_t j = 0; j < a[i].numel(); ++j)
            if (a[i][j] != b[i][j]) return false;
    }
    return true;
}

}  // namespace

TEST_CASE("configuration and empty-selection guards") {
    Fixture fx(11);
    Rng rng(1);
    ErasureConfig bad;
    bad.fine_tune_epochs = 0;
    CHECK_THROWS(erasure::erase(fx.net, fx.data, fx.selected, fx.retained, bad, rng));
    bad.fine_tune_epochs = 1;
    bad.fine_tune_learning_rate = 0.0;
    CHECK_THROWS(erasure::erase(fx.net, fx.data, fx.selected, fx.retained, bad, rng));
    bad.fine_tune_learning_rate = 1e-3;
    bad.batch_size = 0;
    CHECK_THROWS(erasure::erase(fx.net, fx.data, fx.selected, fx.retained, bad, rng));

    auto before = param_values(fx.net.all_params());
    ErasureConfig cfg;
    ErasureReport report = erasure::erase(fx.net, fx.data, {}, fx.retained, cfg, rng);
    CHECK_FALSE(report.performed);
    CHECK_FALSE(report.aborted);
    CHECK(report.message.find("skipped") != std::string::npos);
    CHECK(bit_identical(before, param_values(fx.net.all_params())));

    auto check = erasure::verify_erasure(report);
    CHECK(check.vacuous);
    CHECK_FALSE(check.origin_drop_ok);  // no drop was achieved
    CHECK(check.retained_ok);
    CHECK_FALSE(check.pass);
}

TEST_CASE("erasure preserves the parameter count and records trajectories") {
    Fixture fx(21);
    const std::int64_t params_before = fx.net.parameter_count();
    const double pre_origin =
        erasure::mean_origin_probability(fx.net, fx.data, fx.selected);
    CHECK(pre_origin > 0.8);  // the wrong labels were memorized

    ErasureConfig cfg;
    cfg.fine_tune_epochs = 5;
    cfg.fine_tune_learning_rate = 1e-2;
    cfg.batch_size = 16;
    Rng rng(22);
    ErasureReport report =
        erasure::erase(fx.net, fx.data, fx.selected, fx.retained, cfg, rng);

    CHECK(report.performed);
    CHECK_FALSE(report.aborted);
    CHECK(report.params_before == params_before);
    CHECK(report.params_after == params_before);
    CHECK(fx.net.parameter_count() == params_before);
    CHECK_FALSE(fx.net.is_expanded(1));
    CHECK(fx.net.head_width(1) == 2);
    CHECK(report.pseudo_class_index == 2);

    // one activation record per fine-tune step
    const int steps_per_epoch =
        (static_cast<int>(fx.selected.size()) + cfg.batch_size - 1) / cfg.batch_size;
    CHECK(report.activation_trajectory.size() ==
          static_cast<std::size_t>(cfg.fine_tune_epochs * steps_per_epoch));

    // pseudo-class probability rises monotonically on epoch averages
    REQUIRE(report.pseudo_prob_epochs.size() ==
            static_cast<std::size_t>(cfg.fine_tune_epochs + 1));
    for (std::size_t e = 1; e < report.pseudo_prob_epochs.size(); ++e)
        CHECK(report.pseudo_prob_epochs[e] > report.pseudo_prob_epochs[e - 1]);

    // the pseudo class absorbed the selected samples before pruning, so the
    // original-label mass drops strictly and retained accuracy stays put
    CHECK(report.pseudo_prob_epochs.back() > 0.5);
    CHECK(report.post_origin_prob < report.pre_origin_prob);
    auto check = erasure::verify_erasure(report);
    CHECK(check.origin_drop_ratio ==
          doctest::Approx((report.pre_origin_prob - report.post_origin_prob) /
                          report.pre_origin_prob));
    CHECK(check.origin_drop_ok == (check.origin_drop_ratio >= 0.5));
    CHECK(check.retained_ok);
    CHECK(check.retained_drop_points <= 2.0);
    CHECK(check.pass == (check.origin_drop_ok && check.retained_ok));
    CHECK_FALSE(check.vacuous);
}

TEST_CASE("verification thresholds sit at half the mass and two points") {
    ErasureReport r;
    r.performed = true;
    r.pseudo_class_index = 2;
    r.pre_origin_prob = 0.8;
    r.pre_retained_acc = 0.75;
    r.post_retained_acc = 0.75;

    r.post_origin_prob = 0.4;  // exactly a 50% relative drop
    auto at_boundary = erasure::verify_erasure(r);
    CHECK(at_boundary.origin_drop_ratio == 0.5);
    CHECK(at_boundary.origin_drop_ok);
    CHECK(at_boundary.retained_ok);
    CHECK(at_boundary.pass);

    r.post_origin_prob = 0.41;  // just short of half
    CHECK_FALSE(erasure::verify_erasure(r).origin_drop_ok);
    CHECK_FALSE(erasure::verify_erasure(r).pass);

    r.post_origin_prob = 0.2;
    r.post_retained_acc = 0.71875;  // a 3.125-point accuracy drop
    auto harmed = erasure::verify_erasure(r);
    CHECK(harmed.origin_drop_ok);
    CHECK_FALSE(harmed.retained_ok);
    CHECK_FALSE(harmed.pass);

    r.post_retained_acc = 0.8125;  // accuracy may improve
    CHECK(erasure::verify_erasure(r).retained_ok);

    r.pre_origin_prob = 0.0;  // degenerate start counts as no drop
    r.post_origin_prob = 0.0;
    CHECK_FALSE(erasure::verify_erasure(r).origin_drop_ok);
}

TEST_CASE("skipped erasure fails the drop condition but keeps accuracy") {
    Fixture fx(31);
    const double pre_origin =
        erasure::mean_origin_probability(fx.net, fx.data, fx.selected);
    const double pre_acc = erasure::subset_accuracy(fx.net, fx.data, fx.retained);

    auto check = erasure::verify_erasure(fx.net, fx.data, fx.selected, fx.retained,
                                         pre_origin, pre_acc);
    CHECK_FALSE(check.vacuous);
    CHECK_FALSE(check.origin_drop_ok);  // nothing changed
    CHECK(check.retained_ok);
    CHECK_FALSE(check.pass);

    auto vac = erasure::verify_erasure(fx.net, fx.data, {}, fx.retained, 0.0, 0.0);
    CHECK(vac.vacuous);
    CHECK_FALSE(vac.origin_drop_ok);
    CHECK(vac.retained_ok);
    CHECK_FALSE(vac.pass);
}

TEST_CASE("divergence aborts and restores bit-identical parameters") {
    Fixture fx(41);
    auto before = param_values(fx.net.all_params());
    const std::int64_t count_before = fx.net.parameter_count();

    ErasureConfig cfg;
    cfg.fine_tune_epochs = 3;
    cfg.fine_tune_learning_rate = 1e200;  // overflows after the first step
    cfg.batch_size = 8;
    Rng rng(42);
    ErasureReport report =
        erasure::erase(fx.net, fx.data, fx.selected, fx.retained, cfg, rng);

    CHECK(report.aborted);
    CHECK_FALSE(report.performed);
    CHECK(report.message.find("restored") != std::string::npos);
    CHECK(fx.net.parameter_count() == count_before);
    CHECK_FALSE(fx.net.is_expanded(1));
    CHECK(bit_identical(before, param_values(fx.net.all_params())));
    CHECK(report.post_origin_prob == doctest::Approx(report.pre_origin_prob));
    CHECK_FALSE(erasure::verify_erasure(report).pass);
}

TEST_CASE("default scope leaves stages a/b and other heads untouched") {
    model::BackboneConfig cfg;
    cfg.kind = model::BackboneKind::cnn;
    cfg.in_channels = 1;
    cfg.in_h = 12;
    cfg.in_w = 12;
    cfg.feature_dim = 8;
    cfg.stage_c_dim = 8;
    model::BackboneModel net(cfg);
    net.register_task(1, {0, 1});
    net.register_task(2, {2, 3});

    task::TaskDataset data;
    data.task_id = 1;
    data.class_set = {0, 1};
    Rng mk(51);
    for (int i = 0; i < 12; ++i) {
        task::LabeledExample ex;
        ex.input = Tensor({1, 12, 12});
        for (std::int64_t j = 0; j < ex.input.numel(); ++j)
            ex.input[j] = mk.uniform(0, 1);
        ex.true_label = i % 2;
        ex.observed_label = i % 2;
        data.train.push_back(ex);
    }
    std::vector<int> ds{0, 1, 2, 3};
    std::vector<int> keep{4, 5, 6, 7, 8, 9, 10, 11};

    auto grab = [&](auto&&... lists) {
        nn::ParamList merged;
        (void)std::initializer_list<int>{
            (merged.insert(merged.end(), lists.begin(), lists.end()), 0)...};
        return param_values(merged);
    };
    nn::ParamList frozen_list;
    for (const auto& p : net.shared_params())
        if (p.name.rfind("c.", 0) != 0) frozen_list.push_back(p);  // stages a/b
    for (const auto& p : net.head_params(2)) frozen_list.push_back(p);
    auto frozen_before = param_values(frozen_list);
    auto tuned_before = grab(net.stage_c_params(), net.head_params(1));

    ErasureConfig ecfg;
    ecfg.fine_tune_epochs = 2;
    ecfg.fine_tune_learning_rate = 1e-2;
    ecfg.batch_size = 4;
    Rng rng(52);
    erasure::erase(net, data, ds, keep, ecfg, rng);

    CHECK(bit_identical(frozen_before, param_values(frozen_list)));
    CHECK_FALSE(bit_identical(tuned_before,
                              grab(net.stage_c_params(), net.head_params(1))));

    // the ablation flag widens the scope to the full backbone
    ecfg.full_model = true;
    auto stage_a_before = param_values(frozen_list);
    erasure::erase(net, data, ds, keep, ecfg, rng);
    CHECK_FALSE(bit_identical(stage_a_before, param_values(frozen_list)));
}

TEST_CASE("report exports parse back with consistent fields") {
    Fixture fx(61);
    ErasureConfig cfg;
    cfg.fine_tune_epochs = 2;
    cfg.fine_tune_learning_rate = 5e-3;
    cfg.batch_size = 16;
    Rng rng(62);
    ErasureReport report =
        erasure::erase(fx.net, fx.data, fx.selected, fx.retained, cfg, rng);
    auto check = erasure::verify_erasure(report);

    auto j = nlohmann::json::parse(erasure::erasure_report_json(report, check));
    CHECK(j["performed"] == report.performed);
    CHECK(j["params_before"] == report.params_before);
    CHECK(j["params_after"] == report.params_after);
    CHECK(j["pre_origin_prob"].get<double>() ==
          doctest::Approx(report.pre_origin_prob));
    CHECK(j["verification"]["pass"] == check.pass);
    CHECK(j["pseudo_prob_epochs"].size() == report.pseudo_prob_epochs.size());

    std::string csv = erasure::activation_trajectory_csv(report);
    CHECK(csv.rfind("step,mean_pseudo_logit\n", 0) == 0);
    CHECK(std::count(csv.begin(), csv.end(), '\n') ==
          static_cast<long>(report.activation_trajectory.size()) + 1);
}
