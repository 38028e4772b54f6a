// Loss composition: cross-entropy values, latent-stats fitting, Gaussian
// weights, the density-weighted guidance term (reproduced sample-by-sample),
// penalty strategies with hand-derived anchors, Fisher estimation, and
// finite-difference gradient checks for every term.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <functional>
#include <vector>

#include "eraser/backbone.hpp"
#include "eraser/flow.hpp"
#include "eraser/objectives.hpp"

using namespace eraser;
using model::BackboneConfig;
using model::BackboneKind;
using model::BackboneModel;
using obj::CLPluginState;
using obj::CLStrategy;
using obj::LatentStats;

namespace {

BackboneConfig tiny_config() {
    BackboneConfig cfg;
    cfg.kind = BackboneKind::synthetic2d;
    cfg.feature_dim = 2;
    cfg.stage_c_dim = 4;
    cfg.init_seed = 11;
    return cfg;
}

flow::FlowModel tiny_flow(std::uint64_t seed = 21) {
    flow::FlowConfig cfg;
    cfg.dim = 2;
    cfg.layers = 2;
    cfg.hidden = 8;
    cfg.embed_dim = 4;
    cfg.label_capacity = 4;
    cfg.init_seed = seed;
    flow::FlowModel f(cfg);
    f.register_labels({0, 1});
    Rng rng(seed + 1);
    for (auto& p : f.params())
        if (p.name.find(".l2.") != std::string::npos)
            for (std::int64_t i = 0; i < p.var->value.numel(); ++i)
                p.var->value[i] = rng.uniform(-0.4, 0.4);
    return f;
}

task::TaskDataset tiny_task(int per_class = 3) {
    task::TaskDataset t;
    t.task_id = 1;
    t.class_set = {0, 1};
    Rng rng(31);
    for (int i = 0; i < 2 * per_class; ++i) {
        task::LabeledExample ex;
        ex.input = Tensor({2}, {rng.uniform(-1, 1), rng.uniform(-1, 1)});
        ex.true_label = i % 2;
        ex.observed_label = ex.true_label;
        t.train.push_back(ex);
    }
    return t;
}

// central finite differences against analytic gradients
void check_grads(const nn::ParamList& params,
                 const std::function<ag::Var()>& loss_fn, double h = 1e-6,
                 double tol = 1e-4) {
    nn::zero_grads(params);
    ag::Var loss = loss_fn();
    ag::backward(loss);
    std::vector<Tensor> grads;
    for (const auto& p : params)
        grads.push_back(p.var->grad.numel() ? p.var->grad
                                            : Tensor(p.var->value.shape()));
    for (std::size_t p = 0; p < params.size(); ++p) {
        Tensor& theta = params[p].var->value;
        for (std::int64_t i = 0; i < theta.numel(); ++i) {
            const double keep = theta[i];
            theta[i] = keep + h;
            const double up = loss_fn()->value[0];
            theta[i] = keep - h;
            const double dn = loss_fn()->value[0];
            theta[i] = keep;
            const double fd = (up - dn) / (2 * h);
            const double an = grads[p][i];
            CHECK(std::abs(fd - an) <=
                  tol * std::max({1.0, std::abs(fd), std::abs(an)}));
        }
    }
}

}  // namespace

TEST_CASE("classification loss: uniform, extreme, and batch-mean cases") {
    ag::Var uniform = ag::constant(Tensor({3, 4}));
    CHECK(obj::classification_loss(uniform, {0, 1, 3})->value[0] ==
          doctest::Approx(std::log(4.0)).epsilon(1e-12));

    Tensor extreme({1, 4});
    extreme.at(0, 2) = 60.0;
    CHECK(obj::classification_loss(ag::constant(extreme), {2})->value[0] < 1e-20);

    Rng rng(3);
    Tensor batch({3, 4});
    for (std::int64_t i = 0; i < batch.numel(); ++i) batch[i] = rng.uniform(-2, 2);
    std::vector<int> y{1, 0, 2};
    double singles = 0.0;
    for (int i = 0; i < 3; ++i) {
        Tensor row({1, 4});
        for (int j = 0; j < 4; ++j) row.at(0, j) = batch.at(i, j);
        singles += obj::classification_loss(ag::constant(row), {y[i]})->value[0];
    }
    CHECK(obj::classification_loss(ag::constant(batch), y)->value[0] ==
          doctest::Approx(singles / 3).epsilon(1e-12));
}

TEST_CASE("latent stats: hand values, floor, permutation invariance") {
    Tensor two({2, 2}, {0, 0, 2, 0});
    LatentStats st = obj::fit_latent_stats(two);
    CHECK(st.mu[0] == doctest::Approx(1.0));
    CHECK(st.mu[1] == doctest::Approx(0.0));
    CHECK(st.sigma_diag[0] == doctest::Approx(1.0));
    CHECK(st.sigma_diag[1] == doctest::Approx(1e-4));
    CHECK(st.count == 2);

    Tensor same({3, 2}, {5, -1, 5, -1, 5, -1});
    LatentStats flat = obj::fit_latent_stats(same);
    CHECK(flat.sigma_diag[0] == doctest::Approx(1e-4));
    CHECK(flat.sigma_diag[1] == doctest::Approx(1e-4));
    CHECK(flat.mu[0] == doctest::Approx(5.0));

    Rng rng(7);
    Tensor batch({5, 3});
    for (std::int64_t i = 0; i < batch.numel(); ++i) batch[i] = rng.uniform(-2, 2);
    Tensor permuted({5, 3});
    const std::vector<int> order{4, 2, 0, 3, 1};
    for (int i = 0; i < 5; ++i)
        for (int j = 0; j < 3; ++j) permuted.at(i, j) = batch.at(order[i], j);
    LatentStats a = obj::fit_latent_stats(batch), b = obj::fit_latent_stats(permuted);
    for (int j = 0; j < 3; ++j) {
        CHECK(a.mu[j] == doctest::Approx(b.mu[j]).epsilon(1e-12));
        CHECK(a.sigma_diag[j] == doctest::Approx(b.sigma_diag[j]).epsilon(1e-12));
    }

    CHECK_THROWS(obj::fit_latent_stats(Tensor({1}, {0.0})));
}

TEST_CASE("gaussian weight: closed-form values and unimodal decay") {
    LatentStats st{Tensor({2}), Tensor({2}, {1.0, 1.0}), 10};
    CHECK(obj::gaussian_weight(st.mu, st) ==
          doctest::Approx(1.0 / (2 * M_PI)).epsilon(1e-12));

    LatentStats one{Tensor({1}), Tensor({1}, {1.0}), 10};
    CHECK(obj::gaussian_weight(Tensor({1}, {1.0}), one) ==
          doctest::Approx(std::exp(-0.5) / std::sqrt(2 * M_PI)).epsilon(1e-12));

    double prev = obj::gaussian_weight(st.mu, st);
    for (double a : {0.5, 1.0, 1.5, 2.0}) {
        for (int axis : {0, 1}) {
            Tensor u({2});
            u[axis] = a;
            CHECK(obj::gaussian_weight(u, st) < prev);
        }
        Tensor u({2});
        u[0] = a;
        prev = obj::gaussian_weight(u, st);
    }

    CHECK_THROWS(obj::gaussian_weight(Tensor({3}), st));
}

TEST_CASE("guidance loss matches a sample-by-sample reproduction") {
    BackboneModel m(tiny_config());
    m.register_task(1, {0, 1});
    flow::FlowModel f = tiny_flow();
    LatentStats st{Tensor({2}, {0.2, -0.1}), Tensor({2}, {1.5, 0.8}), 100};

    const int n = 6;
    Rng rng(41);
    ag::Var loss = obj::distribution_guidance_loss(f, st, m, 1, n, {0, 1}, rng);

    // redraw the same randomness and rebuild the expected value by hand
    Rng replay(41);
    double expected = 0.0;
    for (int i = 0; i < n; ++i) {
        const int label = std::vector<int>{0, 1}[replay.below_int(2)];
        Tensor u({1, 2});
        u[0] = replay.normal();
        u[1] = replay.normal();
        const double q = obj::gaussian_weight(u, st);
        Tensor feat = f.inverse(u, {label});
        ag::NoGradGuard guard;
        Tensor logits = m.logits_from_feat(ag::constant(feat), 1)->value;
        const double mx = std::max(logits[0], logits[1]);
        const double lse = mx + std::log(std::exp(logits[0] - mx) +
                                         std::exp(logits[1] - mx));
        expected += q * (lse - logits[label]);
    }
    CHECK(loss->value[0] == doctest::Approx(expected / n).epsilon(1e-12));

    CHECK_THROWS(obj::distribution_guidance_loss(f, st, m, 1, 0, {0, 1}, rng));
    CHECK_THROWS(obj::distribution_guidance_loss(f, st, m, 1, 4, {0, 9}, rng));
}

TEST_CASE("guidance loss: bound, annihilation, and gradient routing") {
    BackboneModel m(tiny_config());
    m.register_task(1, {0, 1});
    for (auto& p : m.head_params(1)) p.var->value.fill(0.0);
    for (auto& p : m.stage_c_params()) p.var->value.fill(0.0);
    flow::FlowModel f = tiny_flow(22);
    LatentStats st{Tensor({2}), Tensor({2}, {1.0, 1.0}), 100};

    // zeroed path gives uniform logits, so every CE term is exactly log 2
    // and the loss is bounded by the density at the mean times log 2
    Rng rng(43);
    const double q_max = obj::gaussian_weight(st.mu, st);
    ag::Var loss = obj::distribution_guidance_loss(f, st, m, 1, 64, {0, 1}, rng);
    CHECK(loss->value[0] > 0.0);
    CHECK(loss->value[0] <= q_max * std::log(2.0) + 1e-12);

    // a far-away latent Gaussian annihilates every weight
    LatentStats far{Tensor({2}, {50.0, 50.0}), Tensor({2}, {1.0, 1.0}), 100};
    ag::Var dead = obj::distribution_guidance_loss(f, far, m, 1, 8, {0, 1}, rng);
    CHECK(dead->value[0] < 1e-100);

    // gradients reach the classifier path but never the flow
    BackboneModel m2(tiny_config());
    m2.register_task(1, {0, 1});
    nn::ParamList path = m2.trainable_params(1);
    nn::ParamList flow_params = f.params();
    nn::zero_grads(path);
    nn::zero_grads(flow_params);
    Rng rng2(44);
    ag::Var live = obj::distribution_guidance_loss(f, st, m2, 1, 16, {0, 1}, rng2);
    ag::backward(live);
    double path_grad = 0.0;
    for (const auto& p : path)
        if (p.var->grad.numel())
            for (std::int64_t i = 0; i < p.var->grad.numel(); ++i)
                path_grad += std::abs(p.var->grad[i]);
    CHECK(path_grad > 0.0);
    for (const auto& p : flow_params) CHECK(p.var->grad.numel() == 0);
}

TEST_CASE("ewc: hand-derived scalar case and anchor behaviour") {
    // scalar parameter theta = 3 anchored at 1 with lambda = 2, omega = 1:
    // penalty = 1 * (2/2) * (3-1)^2 = 4
    nn::ParamList single{{"w", ag::make_param(Tensor::scalar(3.0))}};
    model::ParamArchive anchor;
    anchor.tensors.emplace_back("w", Tensor::scalar(1.0));
    ag::Var quad = obj::ewc_quadratic(single, anchor, nullptr);
    CHECK(quad->value[0] == doctest::Approx(4.0));
    CHECK(ag::scale(quad, 1.0 * 2.0 / 2.0)->value[0] == doctest::Approx(4.0));

    BackboneModel m(tiny_config());
    m.register_task(1, {0, 1});
    task::TaskDataset t1 = tiny_task();
    CLPluginState st;
    st.strategy = CLStrategy::ewc;
    st.lambda = 2.0;
    Rng rng(51);
    Tensor batch = model::pack_inputs(t1.train);

    // first task: every strategy reports zero
    for (auto s : {CLStrategy::none, CLStrategy::ewc, CLStrategy::lwf,
                   CLStrategy::replay}) {
        CLPluginState fresh;
        fresh.strategy = s;
        CHECK(obj::cl_penalty(fresh, m, batch, 1, rng)->value[0] == 0.0);
    }

    obj::consolidate(st, m, t1, rng);
    CHECK(st.anchors.count(1) == 1);
    CHECK(obj::cl_penalty(st, m, batch, 2, rng)->value[0] == 0.0);  // at anchor

    nn::ParamList shared = m.shared_params();
    shared[0].var->value[0] += 0.3;
    const double pen = obj::cl_penalty(st, m, batch, 2, rng)->value[0];
    CHECK(pen == doctest::Approx(2.0 / 2.0 * 0.3 * 0.3).epsilon(1e-12));

    st.omega[1] = 0.5;
    CHECK(obj::cl_penalty(st, m, batch, 2, rng)->value[0] ==
          doctest::Approx(0.5 * pen).epsilon(1e-12));

    st.anchors.clear();
    CHECK_THROWS(obj::cl_penalty(st, m, batch, 2, rng));
}

TEST_CASE("fisher estimate equals the squared gradient for one example") {
    BackboneModel m(tiny_config());
    m.register_task(1, {0, 1});
    task::TaskDataset t = tiny_task(1);
    t.train.resize(1);
    Rng rng(61);
    nn::ParamList shared = m.shared_params();
    model::ParamArchive fisher = obj::estimate_fisher(m, t, shared, 1, rng);

    nn::zero_grads(shared);
    Tensor x = model::pack_inputs(t.train, {0});
    ag::Var loss = ag::cross_entropy(m.forward(x, 1).logits,
                                     model::local_labels(t, t.train, {0}));
    ag::backward(loss);
    for (const auto& p : shared) {
        const Tensor* f = fisher.find(p.name);
        REQUIRE(f != nullptr);
        for (std::int64_t i = 0; i < f->numel(); ++i) {
            const double g = p.var->grad.numel() ? p.var->grad[i] : 0.0;
            CHECK((*f)[i] == doctest::Approx(g * g).epsilon(1e-12));
        }
    }

    // fisher-weighted penalty: manual sum over shared params
    CLPluginState st;
    st.strategy = CLStrategy::ewc;
    st.use_fisher = true;
    st.lambda = 2.0;
    obj::consolidate(st, m, t, rng, 10, 1);
    shared[0].var->value[0] += 0.5;
    const Tensor* w = st.importance.at(1).find(shared[0].name);
    const double expect = (*w)[0] * 0.25;  // omega * lambda/2 = 1
    CHECK(obj::cl_penalty(st, m, model::pack_inputs(t.train), 2, rng)->value[0] ==
          doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("lwf: zero gradient at the teacher, positive drift penalty") {
    BackboneModel m(tiny_config());
    m.register_task(1, {0, 1});
    task::TaskDataset t1 = tiny_task();
    CLPluginState st;
    st.strategy = CLStrategy::lwf;
    st.lambda = 1.0;
    Rng rng(71);
    obj::consolidate(st, m, t1, rng);
    REQUIRE(st.teacher != nullptr);

    m.register_task(2, {2, 3});
    Tensor batch = model::pack_inputs(t1.train);
    nn::ParamList params = m.trainable_params(1);
    nn::zero_grads(params);
    ag::Var pen = obj::cl_penalty(st, m, batch, 2, rng);
    CHECK(pen->value[0] > 0.0);  // cross-entropy form: entropy of the teacher
    ag::backward(pen);
    for (const auto& p : params)
        if (p.var->grad.numel())
            for (std::int64_t i = 0; i < p.var->grad.numel(); ++i)
                CHECK(std::abs(p.var->grad[i]) < 1e-10);

    // drifted student pays more than the matched one
    const double at_teacher = pen->value[0];
    for (auto& p : m.shared_params()) p.var->value[0] += 0.4;
    CHECK(obj::cl_penalty(st, m, batch, 2, rng)->value[0] > at_teacher);

    st.teacher.reset();
    CHECK_THROWS(obj::cl_penalty(st, m, batch, 2, rng));
}

TEST_CASE("replay: buffer fill and exact penalty reproduction") {
    BackboneModel m(tiny_config());
    m.register_task(1, {0, 1});
    task::TaskDataset t1 = tiny_task(3);
    CLPluginState st;
    st.strategy = CLStrategy::replay;
    st.lambda = 1.0;
    st.replay_batch = 5;
    Rng rng(81);
    obj::consolidate(st, m, t1, rng, 2);
    CHECK(st.buffer.size() == 4);  // two per class
    for (const auto& item : st.buffer) {
        CHECK(item.task_id == 1);
        CHECK((item.local_label == 0 || item.local_label == 1));
    }

    Tensor batch = model::pack_inputs(t1.train);
    Rng pen_rng(91), manual_rng(91);
    ag::Var pen = obj::cl_penalty(st, m, batch, 2, pen_rng);

    // the draw count clamps to the buffer size
    const int take = std::min<int>(st.replay_batch, static_cast<int>(st.buffer.size()));
    CHECK(take == 4);
    std::vector<int> picks;
    for (int i = 0; i < take; ++i)
        picks.push_back(static_cast<int>(manual_rng.below(st.buffer.size())));
    Tensor x({take, 2});
    std::vector<int> y(take);
    for (int i = 0; i < take; ++i) {
        x.at(i, 0) = st.buffer[picks[i]].input[0];
        x.at(i, 1) = st.buffer[picks[i]].input[1];
        y[i] = st.buffer[picks[i]].local_label;
    }
    ag::NoGradGuard guard;
    ag::Var manual = ag::cross_entropy(m.forward(x, 1).logits, y);
    CHECK(pen->value[0] == doctest::Approx(manual->value[0]).epsilon(1e-12));

    st.buffer.clear();
    CHECK_THROWS(obj::cl_penalty(st, m, batch, 2, rng));
}

TEST_CASE("total loss sums components and their gradients") {
    ag::Var a = ag::constant(Tensor::scalar(1.0));
    ag::Var b = ag::constant(Tensor::scalar(0.25));
    ag::Var c = ag::constant(Tensor::scalar(-0.5));
    CHECK(obj::total_loss(a, b, c)->value[0] == doctest::Approx(0.75));
    CHECK(obj::total_loss(a, ag::constant(Tensor::scalar(0.0)),
                          ag::constant(Tensor::scalar(0.0)))->value[0] == 1.0);
    CHECK(obj::total_loss(c, a, b)->value[0] == doctest::Approx(0.75));
}

TEST_CASE("finite differences validate every loss term on a tiny model") {
    BackboneModel m(tiny_config());
    m.register_task(1, {0, 1});
    task::TaskDataset t1 = tiny_task(4);
    Tensor batch = model::pack_inputs(t1.train);
    std::vector<int> labels = model::local_labels(
        t1, t1.train, [&] {
            std::vector<int> idx(t1.train.size());
            for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int>(i);
            return idx;
        }());
    flow::FlowModel f = tiny_flow(23);
    LatentStats st{Tensor({2}, {0.1, -0.3}), Tensor({2}, {1.2, 0.9}), 50};
    nn::ParamList params = m.trainable_params(1);
    REQUIRE(nn::param_count(params) <= 50);

    check_grads(params, [&] {
        return obj::classification_loss(m.forward(batch, 1).logits, labels);
    });

    check_grads(params, [&] {
        Rng rng(101);  // same draws on every re-evaluation
        return obj::distribution_guidance_loss(f, st, m, 1, 8, {0, 1}, rng);
    });

    CLPluginState ewc;
    ewc.strategy = CLStrategy::ewc;
    ewc.lambda = 3.0;
    Rng rng(103);
    obj::consolidate(ewc, m, t1, rng);
    for (auto& p : m.shared_params())
        for (std::int64_t i = 0; i < p.var->value.numel(); ++i)
            p.var->value[i] += 0.05 * (i % 3 - 1);
    check_grads(params, [&] {
        Rng r(104);
        return obj::cl_penalty(ewc, m, batch, 2, r);
    });

    CLPluginState lwf;
    lwf.strategy = CLStrategy::lwf;
    lwf.lambda = 1.5;
    obj::consolidate(lwf, m, t1, rng);
    for (auto& p : m.shared_params()) p.var->value[0] += 0.2;
    check_grads(params, [&] {
        Rng r(105);
        return obj::cl_penalty(lwf, m, batch, 2, r);
    });

    CLPluginState rep;
    rep.strategy = CLStrategy::replay;
    rep.lambda = 2.0;
    rep.replay_batch = 4;
    obj::consolidate(rep, m, t1, rng, 2);
    check_grads(params, [&] {
        Rng r(106);
        return obj::cl_penalty(rep, m, batch, 2, r);
    });

    // total gradient equals the sum of the component gradients
    auto combined = [&] {
        Rng r(107);
        ag::Var ce = obj::classification_loss(m.forward(batch, 1).logits, labels);
        ag::Var ge = obj::distribution_guidance_loss(f, st, m, 1, 8, {0, 1}, r);
        ag::Var cl = obj::cl_penalty(ewc, m, batch, 2, r);
        return obj::total_loss(ce, ge, cl);
    };
    check_grads(params, combined);

    nn::zero_grads(params);
    ag::backward(combined());
    std::vector<Tensor> total_grads;
    for (const auto& p : params)
        total_grads.push_back(p.var->grad.numel() ? p.var->grad
                                                  : Tensor(p.var->value.shape()));
    std::vector<Tensor> summed;
    for (const auto& p : params) summed.push_back(Tensor(p.var->value.shape()));
    auto accumulate_one = [&](const std::function<ag::Var()>& fn) {
        nn::zero_grads(params);
        ag::backward(fn());
        for (std::size_t p = 0; p < params.size(); ++p)
            if (params[p].var->grad.numel())
                for (std::int64_t i = 0; i < summed[p].numel(); ++i)
                    summed[p][i] += params[p].var->grad[i];
    };
    accumulate_one([&] {
        return obj::classification_loss(m.forward(batch, 1).logits, labels);
    });
    accumulate_one([&] {
        Rng r(107);
        return obj::distribution_guidance_loss(f, st, m, 1, 8, {0, 1}, r);
    });
    accumulate_one([&] {
        Rng r(108);
        return obj::cl_penalty(ewc, m, batch, 2, r);
    });
    for (std::size_t p = 0; p < params.size(); ++p)
        for (std::int64_t i = 0; i < summed[p].numel(); ++i)
            CHECK(total_grads[p][i] == doctest::Approx(summed[p][i]).epsilon(1e-9));
}
