// Density scoring and low-density selection: quantile oracle, tie handling,
// monotonicity, per-class variant, planted-outlier ranking, and the CSV audit
// export.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <sstream>
#include <vector>

#include "eraser/identify.hpp"
#include "eraser/nn.hpp"

using namespace eraser;

namespace {

// independent quantile: linear interpolation between order statistics
double quantile_oracle(std::vector<double> values, double p) {
    std::sort(values.begin(), values.end());
    const double pos = p * (static_cast<double>(values.size()) - 1.0);
    const auto idx = static_cast<std::size_t>(std::floor(pos));
    if (idx + 1 >= values.size()) return values.back();
    return values[idx] * (1.0 - (pos - idx)) + values[idx + 1] * (pos - idx);
}

// synthetic two-blob task with a trained conditional flow over raw inputs
struct Fixture {
    model::BackboneModel model;
    flow::FlowModel flow_model;
    task::TaskDataset data;

    Fixture(double noise_rate, std::uint64_t seed)
        : model(make_backbone()), flow_model(make_flow()), data(make_task(seed)) {
        if (noise_rate > 0) {
            task::NoiseSpec spec;
            spec.mapping = {{data.class_set[0], data.class_set[1]}};
            spec.rate = noise_rate;
            spec.seed = seed + 1;
            data = task::inject_asymmetric_noise(data, spec);
        }
        std::vector<int> labels;
        for (const auto& ex : data.train) labels.push_back(ex.observed_label);
        Tensor feats = model::pack_inputs(data.train);
        flow_model.register_labels(data.class_set);
        flow_model.accumulate_standardizer(feats);
        train(feats, labels, seed + 2);
    }

    static model::BackboneConfig make_backbone_cfg() {
        model::BackboneConfig cfg;
        cfg.kind = model::BackboneKind::synthetic2d;
        cfg.feature_dim = 2;
        cfg.stage_c_dim = 4;
        return cfg;
    }
    static model::BackboneModel make_backbone() {
        model::BackboneModel m(make_backbone_cfg());
        return m;
    }
    static flow::FlowModel make_flow() {
        flow::FlowConfig cfg;
        cfg.dim = 2;
        cfg.layers = 4;
        cfg.hidden = 32;
        cfg.embed_dim = 8;
        cfg.label_capacity = 4;
        cfg.init_seed = 3;
        return flow::FlowModel(cfg);
    }
    static task::TaskDataset make_task(std::uint64_t seed) {
        task::BuildOptions opt;
        opt.synthetic_per_class = 250;
        opt.data_seed = seed;
        auto tasks = task::build_task_sequence(task::DatasetId::synthetic2d, 1,
                                               seed, opt);
        return tasks.front();
    }

    void train(const Tensor& feats, const std::vector<int>& labels,
               std::uint64_t seed) {
        nn::Adam opt(5e-3);
        auto params = flow_model.params();
        Rng rng(seed);
        const int n = static_cast<int>(labels.size());
        std::vector<int> order(n);
        std::iota(order.begin(), order.end(), 0);
        for (int epoch = 0; epoch < 60; ++epoch) {
            rng.shuffle(order);
            for (int start = 0; start < n; start += 64) {
                const int bs = std::min(64, n - start);
                Tensor bx({bs, 2});
                std::vector<int> by(bs);
                for (int i = 0; i < bs; ++i) {
                    bx.at(i, 0) = feats.at(order[start + i], 0);
                    bx.at(i, 1) = feats.at(order[start + i], 1);
                    by[i] = labels[order[start + i]];
                }
                nn::zero_grads(params);
                ag::Var loss = flow_model.nll_loss(ag::constant(bx), by);
                ag::backward(loss);
                opt.step(params);
            }
        }
    }

    model::BackboneModel model_for_scoring() { return make_backbone(); }
};

}  // namespace

TEST_CASE("strict-below membership on a fixed threshold") {
    CHECK(ident::indices_below({0.9, 0.5, 0.1, 0.05}, 0.07) == std::vector<int>{3});
    CHECK(ident::indices_below({0.1, 0.1}, 0.1).empty());  // ties excluded
}

TEST_CASE("eight scores at percentile 0.25 select the two smallest") {
    const std::vector<double> scores{4.0, -1.0, 2.5, 7.0, 0.3, 9.9, 5.5, 3.1};
    auto report = ident::select_representative(scores, 0.25);

    std::vector<int> order(scores.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&](int a, int b) { return scores[a] < scores[b]; });
    std::vector<int> expect{order.begin(), order.begin() + 2};
    std::sort(expect.begin(), expect.end());
    CHECK(report.selected_indices == expect);
    CHECK(report.percentile == 0.25);
}

TEST_CASE("all-equal scores fall back to the smallest indices") {
    std::vector<double> scores(10, 3.25);
    auto report = ident::select_representative(scores, 0.3);
    CHECK(report.selected_indices == std::vector<int>{0, 1, 2});  // floor(3.0)
}

TEST_CASE("delta equals the linear-interpolation quantile") {
    Rng rng(11);
    for (int trial = 0; trial < 20; ++trial) {
        const int n = 5 + static_cast<int>(rng.below(40));
        std::vector<double> scores(n);
        for (auto& s : scores)
            s = trial % 2 ? std::floor(rng.uniform(-3, 3)) : rng.uniform(-10, 10);
        const double p = rng.uniform(0.05, 0.45);
        auto report = ident::select_representative(scores, p);
        CHECK(report.delta == doctest::Approx(quantile_oracle(scores, p)).epsilon(1e-12));
    }
}

TEST_CASE("selection grows monotonically with the percentile and stays bounded") {
    Rng rng(13);
    std::vector<double> scores(60);
    for (auto& s : scores) s = std::floor(rng.uniform(0, 8));  // heavy ties

    std::set<int> previous;
    for (double p : {0.05, 0.1, 0.2, 0.3, 0.4, 0.45}) {
        auto report = ident::select_representative(scores, p);
        std::set<int> current(report.selected_indices.begin(),
                              report.selected_indices.end());
        for (int idx : previous) CHECK(current.count(idx) == 1);
        CHECK(static_cast<double>(current.size()) <= p * 60.0 + 1.0);
        previous = current;

        auto again = ident::select_representative(scores, p);
        CHECK(again.selected_indices == report.selected_indices);
        CHECK(again.delta == report.delta);
    }
}

TEST_CASE("selection rejects bad inputs") {
    CHECK_THROWS(ident::select_representative({}, 0.1));
    CHECK_THROWS(ident::select_representative({1.0, 2.0}, 0.0));
    CHECK_THROWS(ident::select_representative({1.0, 2.0}, 0.5));
    CHECK_THROWS(ident::select_representative({1.0, 2.0}, 0.7));
    CHECK_THROWS(ident::select_representative({1.0, 2.0}, -0.1));
}

TEST_CASE("per-class selection draws from every class") {
    std::vector<double> scores;
    std::vector<int> labels;
    for (int i = 0; i < 10; ++i) {  // class 0: scores 0.0 .. 0.9
        scores.push_back(0.1 * i);
        labels.push_back(0);
    }
    for (int i = 0; i < 10; ++i) {  // class 1: scores 10 .. 19
        scores.push_back(10.0 + i);
        labels.push_back(1);
    }
    auto global = ident::select_representative(scores, 0.2);
    CHECK(global.selected_indices == std::vector<int>{0, 1, 2, 3});

    auto per_class = ident::select_representative_per_class(scores, labels, 0.2);
    CHECK(per_class.selected_indices == std::vector<int>{0, 1, 10, 11});

    CHECK_THROWS(ident::select_representative_per_class(scores, {0, 1}, 0.2));
    CHECK_THROWS(ident::select_representative_per_class(scores, labels, 0.6));
}

TEST_CASE("scores: determinism, planted outlier, and label conditioning") {
    Fixture fx(0.0, 51);

    // duplicate a sample and plant one far outlier
    fx.data.train.push_back(fx.data.train.front());
    task::LabeledExample outlier = fx.data.train.front();
    outlier.input = Tensor({2}, {30.0, 30.0});
    fx.data.train.push_back(outlier);

    auto scores = ident::score_dataset(fx.model, fx.flow_model, fx.data);
    const std::size_t n = scores.size();
    CHECK(scores[n - 2] == scores[0]);  // duplicate scores identically
    CHECK(*std::min_element(scores.begin(), scores.end()) == scores[n - 1]);

    // true-label conditioning beats wrong-label conditioning on average
    double own = 0.0, cross = 0.0;
    int count = 0;
    for (std::size_t i = 0; i + 2 < n; ++i) {
        const auto& ex = fx.data.train[i];
        if (ex.observed_label != fx.data.class_set[0]) continue;
        Tensor pt({1, 2}, {ex.input[0], ex.input[1]});
        own += fx.flow_model.log_prob_values(pt, {fx.data.class_set[0]})[0];
        cross += fx.flow_model.log_prob_values(pt, {fx.data.class_set[1]})[0];
        ++count;
    }
    CHECK(own / count > cross / count);

    // poisoned flow parameters surface as a flagged error
    for (auto& p : fx.flow_model.params())
        if (p.name == "flow.0.l2.b") p.var->value.fill(NAN);
    CHECK_THROWS(ident::score_dataset(fx.model, fx.flow_model, fx.data));
}

TEST_CASE("noisy labels concentrate in the selected bottom slice") {
    Fixture fx(0.3, 61);
    auto scores = ident::score_dataset(fx.model, fx.flow_model, fx.data);
    auto report = ident::select_representative(scores, 0.1);

    int noisy_total = 0;
    for (const auto& ex : fx.data.train) noisy_total += ex.noisy ? 1 : 0;
    const double base_rate =
        static_cast<double>(noisy_total) / static_cast<double>(fx.data.train.size());
    REQUIRE(base_rate > 0.1);

    int noisy_selected = 0;
    for (int idx : report.selected_indices)
        noisy_selected += fx.data.train[idx].noisy ? 1 : 0;
    const double precision = static_cast<double>(noisy_selected) /
                             static_cast<double>(report.selected_indices.size());
    CHECK(precision >= 2.0 * base_rate);
}

TEST_CASE("csv export carries scores, selection flags, and noise audit") {
    Fixture fx(0.3, 71);
    auto scores = ident::score_dataset(fx.model, fx.flow_model, fx.data);
    auto report = ident::select_representative(scores, 0.05);
    std::string csv = ident::density_report_csv(report, fx.data);

    std::istringstream in(csv);
    std::string line;
    std::getline(in, line);
    CHECK(line == "index,score,selected,noisy");
    std::set<int> selected(report.selected_indices.begin(),
                           report.selected_indices.end());
    int rows = 0;
    while (std::getline(in, line)) {
        std::istringstream cells(line);
        std::string idx, score, sel, noisy;
        std::getline(cells, idx, ',');
        std::getline(cells, score, ',');
        std::getline(cells, sel, ',');
        std::getline(cells, noisy, ',');
        const int i = std::stoi(idx);
        CHECK(std::stod(score) == doctest::Approx(scores[i]).epsilon(1e-12));
        CHECK(std::stoi(sel) == (selected.count(i) ? 1 : 0));
        CHECK(std::stoi(noisy) == (fx.data.train[i].noisy ? 1 : 0));
        ++rows;
    }
    CHECK(rows == static_cast<int>(fx.data.train.size()));
}
