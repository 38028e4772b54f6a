#include "eraser/runner.hpp"

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <stdexcept>

#include <json.hpp>

#include "eraser/checkpoint.hpp"

namespace eraser::run {

namespace {

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
        .count();
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << text;
}

std::vector<int> global_observed(const task::TaskDataset& t,
                                 const std::vector<int>& indices) {
    std::vector<int> labels;
    labels.reserve(indices.size());
    for (int i : indices) labels.push_back(t.train[i].observed_label);
    return labels;
}

void fnv_bytes(std::uint64_t& h, const void* data, std::size_t len) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 1099511628211ull;
    }
}

}  // namespace

double test_accuracy(const model::BackboneModel& model,
                     const task::TaskDataset& task, int batch_size) {
    if (task.test.empty())
        throw std::runtime_error("test_accuracy: task " +
                                 std::to_string(task.task_id) +
                                 " has no test split");
    ag::NoGradGuard guard;
    const int n = static_cast<int>(task.test.size());
    int hits = 0;
    for (int start = 0; start < n; start += batch_size) {
        const int bs = std::min(batch_size, n - start);
        std::vector<int> indices(bs);
        std::iota(indices.begin(), indices.end(), start);
        Tensor x = model::pack_inputs(task.test, indices);
        std::vector<int> y = model::local_labels(task, task.test, indices);
        ag::Var logits = model.forward(x, task.task_id).logits;
        const Tensor& z = logits->value;
        for (int r = 0; r < bs; ++r) {
            int best = 0;
            for (int c = 1; c < z.dim(1); ++c)
                if (z.at(r, c) > z.at(r, best)) best = c;
            if (best == y[r]) ++hits;
        }
    }
    return 100.0 * static_cast<double>(hits) / static_cast<double>(n);
}

PreparedData prepare_data(const cfg::ExperimentConfig& c, std::uint64_t run_seed) {
    PreparedData d;
    const task::DatasetId id = task::parse_dataset_id(c.dataset);
    d.options.data_dir = c.data_dir;
    d.options.max_train_per_class = c.max_train_per_class;
    d.options.max_test_per_class = c.max_test_per_class;
    d.options.synthetic_per_class = c.synthetic_per_class;
    d.options.synthetic_std = c.synthetic_std;
    d.options.data_seed = Rng::mix(c.seeds.data, run_seed);
    d.class_order_seed = Rng::mix(c.seeds.class_order, run_seed);
    d.tasks = task::build_task_sequence(id, c.num_tasks, d.class_order_seed,
                                        d.options);

    d.noise_specs.resize(d.tasks.size());
    if (c.noise.enabled) {
        for (std::size_t i = 0; i < d.tasks.size(); ++i) {
            const int tid = d.tasks[i].task_id;
            if (!c.noise.tasks.empty() &&
                std::find(c.noise.tasks.begin(), c.noise.tasks.end(), tid) ==
                    c.noise.tasks.end())
                continue;
            task::NoiseSpec spec;
            if (c.noise.mapping == "adjacent")
                spec.mapping = task::adjacent_mapping(d.tasks[i].class_set);
            else if (c.noise.mapping == "adjacent_one_way")
                spec.mapping = task::adjacent_one_way_mapping(d.tasks[i].class_set);
            else
                spec.mapping = task::canonical_mapping(id, d.tasks[i].class_set);
            spec.rate = c.noise.rate;
            spec.seed = Rng::mix(Rng::mix(c.seeds.noise, run_seed),
                                 static_cast<std::uint64_t>(tid));
            d.noise_specs[i] = spec;
            d.tasks[i] = task::inject_asymmetric_noise(d.tasks[i], spec);
        }
    }
    return d;
}

struct TaskRunner::Impl {
    cfg::ExperimentConfig c;
    std::uint64_t run_seed = 0;
    bool write = true;
    std::string hash, dir;

    task::DatasetId dataset_id{};
    task::BuildOptions build_opt;
    std::uint64_t class_order_seed = 0;
    std::vector<task::TaskDataset> tasks;
    std::vector<task::NoiseSpec> noise_specs;  // one per task (possibly empty)

    std::shared_ptr<model::BackboneModel> net;
    std::shared_ptr<flow::FlowModel> density;
    std::shared_ptr<evaluation::AccuracyMatrix> matrix;
    obj::CLPluginState cl;
    std::optional<flow::FlowSnapshot> replay;  // frozen after each task

    Rng train_rng, flow_rng, guidance_rng, cl_rng, erase_rng, consolidate_rng;

    std::vector<TaskOutcome> outcomes;
    int completed = 0;
    std::string failure;

    explicit Impl(const cfg::ExperimentConfig& config, std::uint64_t seed,
                  bool write_artifacts)
        : c(config),
          run_seed(seed),
          write(write_artifacts),
          train_rng(Rng::mix(Rng::mix(config.seeds.data, seed), 0xA1)),
          flow_rng(Rng::mix(Rng::mix(config.seeds.flow_sampling, seed), 0xB2)),
          guidance_rng(Rng::mix(Rng::mix(config.seeds.flow_sampling, seed), 0xC3)),
          cl_rng(Rng::mix(Rng::mix(config.seeds.data, seed), 0xD4)),
          erase_rng(Rng::mix(Rng::mix(config.seeds.init, seed), 0xE5)),
          consolidate_rng(Rng::mix(Rng::mix(config.seeds.data, seed), 0xF6)) {
        cfg::validate(c);
        hash = cfg::config_hash(c);
        dataset_id = task::parse_dataset_id(c.dataset);

        PreparedData prepared = prepare_data(c, run_seed);
        build_opt = prepared.options;
        class_order_seed = prepared.class_order_seed;
        tasks = std::move(prepared.tasks);
        noise_specs = std::move(prepared.noise_specs);

        const auto info = task::dataset_info(dataset_id, c.num_tasks);
        model::BackboneConfig bc;
        bc.kind = dataset_id == task::DatasetId::synthetic2d
                      ? model::BackboneKind::synthetic2d
                      : model::BackboneKind::cnn;
        if (bc.kind == model::BackboneKind::cnn) {
            bc.in_channels = info.input_shape[0];
            bc.in_h = info.input_shape[1];
            bc.in_w = info.input_shape[2];
            bc.feature_dim = c.backbone.feature_dim;
        } else {
            bc.feature_dim = 2;  // feat_b is the raw 2-D input
        }
        bc.conv1_channels = c.backbone.conv1_channels;
        bc.conv2_channels = c.backbone.conv2_channels;
        bc.stage_c_dim = c.backbone.stage_c_dim;
        bc.init_seed = Rng::mix(c.seeds.init, run_seed);
        net = std::make_shared<model::BackboneModel>(bc);

        flow::FlowConfig fc;
        fc.dim = net->feature_dim();
        fc.layers = c.flow.layers;
        fc.hidden = c.flow.hidden;
        fc.embed_dim = c.flow.embed_dim;
        fc.label_capacity = info.num_classes;
        fc.init_seed = Rng::mix(Rng::mix(c.seeds.init, run_seed), 7);
        density = std::make_shared<flow::FlowModel>(fc);

        matrix = std::make_shared<evaluation::AccuracyMatrix>(c.num_tasks);

        cl.strategy = obj::parse_cl_strategy(c.cl.strategy);
        cl.lambda = c.cl.lambda;
        cl.use_fisher = c.cl.use_fisher;
        cl.distill_temperature = c.cl.distill_temperature;
        cl.replay_batch = c.cl.replay_batch;

        if (write) {
            dir = c.output_dir + "/" + hash + "-seed" + std::to_string(run_seed);
            std::filesystem::create_directories(dir + "/checkpoints");
            write_text(dir + "/noise_manifest.json",
                       task::noise_manifest_json(tasks, dataset_id,
                                                 class_order_seed, build_opt,
                                                 noise_specs));
        }
    }

    const task::TaskDataset& data(int t) const {
        if (t < 1 || t > static_cast<int>(tasks.size()))
            throw std::out_of_range("task id out of range");
        return tasks[static_cast<std::size_t>(t - 1)];
    }

    void check_finite(const ag::Var& loss, int /*t*/, const char* what) {
        // the rollback handler prefixes the task id
        if (!std::isfinite(loss->value[0]))
            throw std::runtime_error("non-finite " + std::string(what) + " loss");
    }

    void adam_or_sgd_step(nn::Adam& adam, const nn::ParamList& params) {
        if (c.optimizer.algorithm == "adam")
            adam.step(params);
        else
            nn::sgd_step(params, c.optimizer.learning_rate);
    }

    // one flow update on a detached feature batch; returns the features so
    // the classifier half of the alternation can reuse them
    Tensor flow_step(const task::TaskDataset& tk, const std::vector<int>& batch,
                     nn::Adam& flow_adam, int t) {
        Tensor feats;
        {
            ag::NoGradGuard guard;
            feats = net->features_b(model::pack_inputs(tk.train, batch))->value;
        }
        const std::vector<int> labels = global_observed(tk, batch);
        // replay_count 0 is the no-replay ablation: train on current features only
        const bool use_replay = replay.has_value() && c.flow.replay_count > 0;
        ag::Var floss = density->incremental_nll_loss(
            ag::constant(feats), labels, use_replay ? &*replay : nullptr,
            use_replay ? c.flow.replay_count : 0, flow_rng);
        check_finite(floss, t, "flow");
        nn::zero_grads(density->params());
        ag::backward(floss);
        flow_adam.step(density->params());
        return feats;
    }

    void classifier_step(const task::TaskDataset& tk,
                         const std::vector<int>& batch, const Tensor& feats,
                         nn::Adam& cls_adam, const nn::ParamList& params, int t) {
        obj::LatentStats stats;
        if (c.plugin.enabled && c.plugin.guidance_samples > 0) {
            ag::NoGradGuard guard;
            ag::Var u = density
                            ->flow_forward(ag::constant(feats),
                                           global_observed(tk, batch))
                            .first;
            stats = obj::fit_latent_stats(u->value);
        }

        Tensor x = model::pack_inputs(tk.train, batch);
        std::vector<int> y = model::local_labels(tk, tk.train, batch);
        ag::Var ce = obj::classification_loss(net->forward(x, t).logits, y);
        ag::Var ge =
            (c.plugin.enabled && c.plugin.guidance_samples > 0)
                ? obj::distribution_guidance_loss(*density, stats, *net, t,
                                                  c.plugin.guidance_samples,
                                                  tk.class_set, guidance_rng)
                : ag::constant(Tensor::scalar(0.0));
        ag::Var pen = obj::cl_penalty(cl, *net, x, t, cl_rng);
        ag::Var loss = obj::total_loss(ce, ge, pen);
        check_finite(loss, t, "classifier");
        nn::zero_grads(params);
        ag::backward(loss);
        adam_or_sgd_step(cls_adam, params);
    }

    void train_phase(int t) {
        const task::TaskDataset& tk = data(t);
        if (tk.train.empty())
            throw std::runtime_error("task " + std::to_string(t) +
                                     " has no training data");

        {  // fold this task's features into the running standardizer
            ag::NoGradGuard guard;
            const int n = static_cast<int>(tk.train.size());
            for (int start = 0; start < n; start += 512) {
                const int bs = std::min(512, n - start);
                std::vector<int> idx(bs);
                std::iota(idx.begin(), idx.end(), start);
                density->accumulate_standardizer(
                    net->features_b(model::pack_inputs(tk.train, idx))->value);
            }
        }

        nn::Adam cls_adam(c.optimizer.learning_rate, c.optimizer.weight_decay);
        nn::Adam flow_adam(c.flow.learning_rate);
        const nn::ParamList params = net->trainable_params(t);

        const int n = static_cast<int>(tk.train.size());
        std::vector<int> order(n);
        std::iota(order.begin(), order.end(), 0);
        const int bsz = c.optimizer.batch_size;

        for (int epoch = 0; epoch < c.optimizer.epochs; ++epoch) {
            train_rng.shuffle(order);
            std::vector<std::vector<int>> batches;
            for (int start = 0; start < n; start += bsz)
                batches.emplace_back(order.begin() + start,
                                     order.begin() + std::min(start + bsz, n));

            if (c.plugin.alternation == "per_epoch") {
                std::vector<Tensor> feats;
                feats.reserve(batches.size());
                for (const auto& b : batches)
                    feats.push_back(flow_step(tk, b, flow_adam, t));
                for (std::size_t i = 0; i < batches.size(); ++i)
                    classifier_step(tk, batches[i], feats[i], cls_adam, params, t);
            } else {
                for (const auto& b : batches) {
                    Tensor feats = flow_step(tk, b, flow_adam, t);
                    classifier_step(tk, b, feats, cls_adam, params, t);
                }
            }
        }
    }

    void run_task(int t) {
        if (t != completed + 1)
            throw std::invalid_argument("tasks must run in order; expected " +
                                        std::to_string(completed + 1));
        if (!failure.empty())
            throw std::logic_error("run already failed: " + failure);
        const task::TaskDataset& tk = data(t);

        if (write)
            ckpt::save_checkpoint(dir + "/checkpoints/pre_task" +
                                      std::to_string(t) + ".ckpt",
                                  cfg::config_to_json(c), hash, run_seed,
                                  completed, *net, *density, *matrix);

        net->register_task(t, tk.class_set);
        density->register_labels(tk.class_set);

        // in-memory rollback state
        const model::ParamArchive net_snapshot = net->snapshot_parameters();
        std::vector<Tensor> flow_values;
        for (const auto& p : density->params()) flow_values.push_back(p.var->value);
        const flow::FlowModel::StandardizerState std_snapshot =
            density->standardizer();

        TaskOutcome outcome;
        outcome.task_id = t;
        try {
            auto t0 = std::chrono::steady_clock::now();
            train_phase(t);
            outcome.times.train = seconds_since(t0);

            if (c.plugin.enabled) {
                t0 = std::chrono::steady_clock::now();
                outcome.density = ident::select_representative(
                    ident::score_dataset(*net, *density, tk),
                    c.plugin.percentile);
                outcome.times.identify = seconds_since(t0);

                if (c.plugin.erase_enabled) {
                    t0 = std::chrono::steady_clock::now();
                    std::vector<char> selected_mask(tk.train.size(), 0);
                    for (int i : outcome.density.selected_indices)
                        selected_mask[static_cast<std::size_t>(i)] = 1;
                    std::vector<int> retained;
                    for (std::size_t i = 0; i < tk.train.size(); ++i)
                        if (!selected_mask[i]) retained.push_back(static_cast<int>(i));
                    outcome.erasure = erasure::erase(
                        *net, tk, outcome.density.selected_indices, retained,
                        c.plugin.erasure, erase_rng);
                    outcome.erasure_check = erasure::verify_erasure(outcome.erasure);
                    outcome.times.erase = seconds_since(t0);
                }
            }

            if (c.flow.replay_count > 0) replay = density->snapshot();
            obj::consolidate(cl, *net, tk, consolidate_rng, c.cl.replay_per_class,
                             c.cl.fisher_samples);

            t0 = std::chrono::steady_clock::now();
            std::vector<double> column;
            for (int k = 1; k <= t; ++k) column.push_back(test_accuracy(*net, data(k)));
            for (int k = 1; k <= t; ++k)
                matrix->record(k, t, column[static_cast<std::size_t>(k - 1)]);
            outcome.times.evaluate = seconds_since(t0);
        } catch (const std::exception& e) {
            net->restore_parameters(net_snapshot);
            const nn::ParamList params = density->params();
            for (std::size_t i = 0; i < params.size(); ++i)
                params[i].var->value = flow_values[i];
            density->set_standardizer(std_snapshot);
            failure = "task " + std::to_string(t) + ": " + e.what();
            throw std::runtime_error(failure);
        }

        if (write) {
            if (c.plugin.enabled)
                write_text(dir + "/density_task" + std::to_string(t) + ".csv",
                           ident::density_report_csv(outcome.density, tk));
            if (c.plugin.enabled && c.plugin.erase_enabled)
                write_text(dir + "/erasure_task" + std::to_string(t) + ".json",
                           erasure::erasure_report_json(outcome.erasure,
                                                        outcome.erasure_check));
        }
        outcomes.push_back(std::move(outcome));
        completed = t;
    }

    RunResult finish() {
        RunResult r;
        r.run_seed = run_seed;
        r.matrix = matrix;
        r.tasks = outcomes;
        r.complete = completed == c.num_tasks && failure.empty();
        r.failure = failure;
        r.directory = dir;
        if (r.complete) r.summary = evaluation::compute_summary(*matrix);

        if (write) {
            write_text(dir + "/matrix.csv", evaluation::matrix_csv(*matrix));
            if (r.complete) {
                write_text(dir + "/summary.json",
                           evaluation::summary_json(r.summary, run_seed, hash));
                ckpt::save_checkpoint(dir + "/checkpoints/final.ckpt",
                                      cfg::config_to_json(c), hash, run_seed,
                                      completed, *net, *density, *matrix);
            }
            nlohmann::json meta;
            meta["run_seed"] = run_seed;
            meta["config_hash"] = hash;
            meta["complete"] = r.complete;
            meta["completed_tasks"] = completed;
            meta["failure"] = failure;
            meta["tasks"] = nlohmann::json::array();
            for (const auto& o : outcomes)
                meta["tasks"].push_back({{"task_id", o.task_id},
                                         {"train_s", o.times.train},
                                         {"identify_s", o.times.identify},
                                         {"erase_s", o.times.erase},
                                         {"evaluate_s", o.times.evaluate}});
            write_text(dir + "/run.json", meta.dump(2));
        }
        return r;
    }

    std::uint64_t fingerprint() const {
        std::uint64_t h = 1469598103934665603ull;
        for (const auto& tk : tasks) {
            fnv_bytes(h, &tk.task_id, sizeof(tk.task_id));
            for (int cid : tk.class_set) fnv_bytes(h, &cid, sizeof(cid));
            for (const auto* split : {&tk.train, &tk.valid, &tk.test})
                for (const auto& ex : *split) {
                    fnv_bytes(h, &ex.true_label, sizeof(ex.true_label));
                    fnv_bytes(h, &ex.observed_label, sizeof(ex.observed_label));
                    fnv_bytes(h, ex.input.data(),
                              static_cast<std::size_t>(ex.input.numel()) *
                                  sizeof(double));
                }
        }
        return h;
    }
};

TaskRunner::TaskRunner(const cfg::ExperimentConfig& config,
                       std::uint64_t run_seed, bool write_artifacts)
    : impl_(std::make_unique<Impl>(config, run_seed, write_artifacts)) {}

TaskRunner::TaskRunner(TaskRunner&&) noexcept = default;
TaskRunner& TaskRunner::operator=(TaskRunner&&) noexcept = default;
TaskRunner::~TaskRunner() = default;

int TaskRunner::num_tasks() const { return impl_->c.num_tasks; }
const task::TaskDataset& TaskRunner::dataset(int t) const { return impl_->data(t); }
const model::BackboneModel& TaskRunner::model() const { return *impl_->net; }
const flow::FlowModel& TaskRunner::flow() const { return *impl_->density; }
const evaluation::AccuracyMatrix& TaskRunner::matrix() const {
    return *impl_->matrix;
}
const std::vector<TaskOutcome>& TaskRunner::outcomes() const {
    return impl_->outcomes;
}
const std::string& TaskRunner::directory() const { return impl_->dir; }
std::uint64_t TaskRunner::dataset_fingerprint() const {
    return impl_->fingerprint();
}
void TaskRunner::run_task(int t) { impl_->run_task(t); }
RunResult TaskRunner::finish() { return impl_->finish(); }

ResultsBundle run_sequence(const cfg::ExperimentConfig& config) {
    ResultsBundle bundle;
    bundle.config_hash = cfg::config_hash(config);
    bundle.complete = true;

    for (std::uint64_t seed : config.run_seeds) {
        TaskRunner runner(config, seed);
        try {
            for (int t = 1; t <= config.num_tasks; ++t) runner.run_task(t);
        } catch (const std::exception&) {
            // the failure is recorded in the run result; keep the other seeds
        }
        RunResult r = runner.finish();
        bundle.complete = bundle.complete && r.complete;
        bundle.runs.push_back(std::move(r));
    }

    auto aggregate = [&](auto pick) {
        Aggregate a;
        std::vector<double> xs;
        for (const auto& r : bundle.runs)
            if (r.complete) xs.push_back(pick(r.summary));
        if (xs.empty()) return a;
        for (double x : xs) a.mean += x;
        a.mean /= static_cast<double>(xs.size());
        if (xs.size() > 1) {
            double ss = 0;
            for (double x : xs) ss += (x - a.mean) * (x - a.mean);
            a.stddev = std::sqrt(ss / static_cast<double>(xs.size() - 1));
        }
        return a;
    };
    bundle.score = aggregate([](const evaluation::MetricsSummary& s) { return s.score; });
    bundle.a1 = aggregate([](const evaluation::MetricsSummary& s) { return s.a1; });
    bundle.a2 = aggregate([](const evaluation::MetricsSummary& s) { return s.a2; });
    bundle.forgetting =
        aggregate([](const evaluation::MetricsSummary& s) { return s.forgetting; });
    return bundle;
}

std::string bundle_json(const ResultsBundle& bundle) {
    nlohmann::json j;
    j["config_hash"] = bundle.config_hash;
    j["complete"] = bundle.complete;
    j["aggregate"] = {
        {"score", {{"mean", bundle.score.mean}, {"stddev", bundle.score.stddev}}},
        {"a1", {{"mean", bundle.a1.mean}, {"stddev", bundle.a1.stddev}}},
        {"a2", {{"mean", bundle.a2.mean}, {"stddev", bundle.a2.stddev}}},
        {"forgetting",
         {{"mean", bundle.forgetting.mean}, {"stddev", bundle.forgetting.stddev}}}};
    j["runs"] = nlohmann::json::array();
    for (const auto& r : bundle.runs) {
        nlohmann::json jr;
        jr["seed"] = r.run_seed;
        jr["complete"] = r.complete;
        jr["failure"] = r.failure;
        jr["directory"] = r.directory;
        if (r.complete) {
            jr["score"] = r.summary.score;
            jr["a1"] = r.summary.a1;
            jr["a2"] = r.summary.a2;
            jr["forgetting"] = r.summary.forgetting;
        }
        j["runs"].push_back(jr);
    }
    return j.dump(2);
}

}  // namespace eraser::run
