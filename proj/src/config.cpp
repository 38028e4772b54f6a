#include "eraser/config.hpp"

#include <fstream>
#include <set>
#include <stdexcept>

#include "eraser/objectives.hpp"
#include "eraser/taskstream.hpp"

namespace eraser::cfg {

namespace {

// reads known keys from one JSON object and rejects everything it did not
// consume, so typos fail loudly instead of silently using defaults
class Reader {
public:
    Reader(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object())
            throw std::invalid_argument("config: " + (path_.empty() ? "root" : path_) +
                                        " must be a JSON object");
    }

    template <typename T>
    void get(const char* key, T& out) {
        if (!j_.contains(key)) return;
        seen_.insert(key);
        try {
            out = j_.at(key).get<T>();
        } catch (const nlohmann::json::exception&) {
            throw std::invalid_argument("config: wrong type for " + dotted(key));
        }
    }

    const nlohmann::json* child(const char* key) {
        if (!j_.contains(key)) return nullptr;
        seen_.insert(key);
        return &j_.at(key);
    }

    std::string dotted(const char* key) const {
        return path_.empty() ? key : path_ + "." + key;
    }

    ~Reader() noexcept(false) {
        if (std::uncaught_exceptions() > 0) return;
        for (const auto& item : j_.items())
            if (!seen_.count(item.key()))
                throw std::invalid_argument("config: unknown key " + dotted(item.key().c_str()));
    }

private:
    const nlohmann::json& j_;
    std::string path_;
    std::set<std::string> seen_;
};

}  // namespace

nlohmann::json config_to_json(const ExperimentConfig& c) {
    nlohmann::json j;
    j["dataset"] = c.dataset;
    j["num_tasks"] = c.num_tasks;
    j["data_dir"] = c.data_dir;
    j["max_train_per_class"] = c.max_train_per_class;
    j["max_test_per_class"] = c.max_test_per_class;
    j["synthetic_per_class"] = c.synthetic_per_class;
    j["synthetic_std"] = c.synthetic_std;

    j["backbone"] = {{"feature_dim", c.backbone.feature_dim},
                     {"stage_c_dim", c.backbone.stage_c_dim},
                     {"conv1_channels", c.backbone.conv1_channels},
                     {"conv2_channels", c.backbone.conv2_channels}};
    j["optimizer"] = {{"algorithm", c.optimizer.algorithm},
                      {"learning_rate", c.optimizer.learning_rate},
                      {"weight_decay", c.optimizer.weight_decay},
                      {"batch_size", c.optimizer.batch_size},
                      {"epochs", c.optimizer.epochs}};
    j["flow"] = {{"layers", c.flow.layers},
                 {"hidden", c.flow.hidden},
                 {"embed_dim", c.flow.embed_dim},
                 {"learning_rate", c.flow.learning_rate},
                 {"replay_count", c.flow.replay_count}};
    j["cl"] = {{"strategy", c.cl.strategy},
               {"lambda", c.cl.lambda},
               {"use_fisher", c.cl.use_fisher},
               {"distill_temperature", c.cl.distill_temperature},
               {"replay_batch", c.cl.replay_batch},
               {"replay_per_class", c.cl.replay_per_class},
               {"fisher_samples", c.cl.fisher_samples}};
    j["plugin"] = {{"enabled", c.plugin.enabled},
                   {"erase_enabled", c.plugin.erase_enabled},
                   {"percentile", c.plugin.percentile},
                   {"guidance_samples", c.plugin.guidance_samples},
                   {"alternation", c.plugin.alternation},
                   {"erasure",
                    {{"fine_tune_epochs", c.plugin.erasure.fine_tune_epochs},
                     {"fine_tune_learning_rate", c.plugin.erasure.fine_tune_learning_rate},
                     {"batch_size", c.plugin.erasure.batch_size},
                     {"full_model", c.plugin.erasure.full_model},
                     {"clip_norm", c.plugin.erasure.clip_norm}}}};
    j["noise"] = {{"enabled", c.noise.enabled},
                  {"mapping", c.noise.mapping},
                  {"rate", c.noise.rate},
                  {"tasks", c.noise.tasks}};
    j["seeds"] = {{"class_order", c.seeds.class_order},
                  {"data", c.seeds.data},
                  {"init", c.seeds.init},
                  {"noise", c.seeds.noise},
                  {"flow_sampling", c.seeds.flow_sampling}};
    j["run_seeds"] = c.run_seeds;
    j["output_dir"] = c.output_dir;
    return j;
}

ExperimentConfig config_from_json(const nlohmann::json& j) {
    ExperimentConfig c;
    Reader r(j, "");
    r.get("dataset", c.dataset);
    r.get("num_tasks", c.num_tasks);
    r.get("data_dir", c.data_dir);
    r.get("max_train_per_class", c.max_train_per_class);
    r.get("max_test_per_class", c.max_test_per_class);
    r.get("synthetic_per_class", c.synthetic_per_class);
    r.get("synthetic_std", c.synthetic_std);

    if (const auto* b = r.child("backbone")) {
        Reader rb(*b, "backbone");
        rb.get("feature_dim", c.backbone.feature_dim);
        rb.get("stage_c_dim", c.backbone.stage_c_dim);
        rb.get("conv1_channels", c.backbone.conv1_channels);
        rb.get("conv2_channels", c.backbone.conv2_channels);
    }
    if (const auto* o = r.child("optimizer")) {
        Reader ro(*o, "optimizer");
        ro.get("algorithm", c.optimizer.algorithm);
        ro.get("learning_rate", c.optimizer.learning_rate);
        ro.get("weight_decay", c.optimizer.weight_decay);
        ro.get("batch_size", c.optimizer.batch_size);
        ro.get("epochs", c.optimizer.epochs);
    }
    if (const auto* f = r.child("flow")) {
        Reader rf(*f, "flow");
        rf.get("layers", c.flow.layers);
        rf.get("hidden", c.flow.hidden);
        rf.get("embed_dim", c.flow.embed_dim);
        rf.get("learning_rate", c.flow.learning_rate);
        rf.get("replay_count", c.flow.replay_count);
    }
    if (const auto* l = r.child("cl")) {
        Reader rl(*l, "cl");
        rl.get("strategy", c.cl.strategy);
        rl.get("lambda", c.cl.lambda);
        rl.get("use_fisher", c.cl.use_fisher);
        rl.get("distill_temperature", c.cl.distill_temperature);
        rl.get("replay_batch", c.cl.replay_batch);
        rl.get("replay_per_class", c.cl.replay_per_class);
        rl.get("fisher_samples", c.cl.fisher_samples);
    }
    if (const auto* p = r.child("plugin")) {
        Reader rp(*p, "plugin");
        rp.get("enabled", c.plugin.enabled);
        rp.get("erase_enabled", c.plugin.erase_enabled);
        rp.get("percentile", c.plugin.percentile);
        rp.get("guidance_samples", c.plugin.guidance_samples);
        rp.get("alternation", c.plugin.alternation);
        if (const auto* e = rp.child("erasure")) {
            Reader re(*e, "plugin.erasure");
            re.get("fine_tune_epochs", c.plugin.erasure.fine_tune_epochs);
            re.get("fine_tune_learning_rate", c.plugin.erasure.fine_tune_learning_rate);
            re.get("batch_size", c.plugin.erasure.batch_size);
            re.get("full_model", c.plugin.erasure.full_model);
            re.get("clip_norm", c.plugin.erasure.clip_norm);
        }
    }
    if (const auto* nz = r.child("noise")) {
        Reader rn(*nz, "noise");
        rn.get("enabled", c.noise.enabled);
        rn.get("mapping", c.noise.mapping);
        rn.get("rate", c.noise.rate);
        rn.get("tasks", c.noise.tasks);
    }
    if (const auto* s = r.child("seeds")) {
        Reader rs(*s, "seeds");
        rs.get("class_order", c.seeds.class_order);
        rs.get("data", c.seeds.data);
        rs.get("init", c.seeds.init);
        rs.get("noise", c.seeds.noise);
        rs.get("flow_sampling", c.seeds.flow_sampling);
    }
    r.get("run_seeds", c.run_seeds);
    r.get("output_dir", c.output_dir);
    validate(c);
    return c;
}

ExperimentConfig load_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::invalid_argument("config: cannot open " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw std::invalid_argument("config: " + path + " is not valid JSON: " + e.what());
    }
    return config_from_json(j);
}

void apply_override(nlohmann::json& j, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0)
        throw std::invalid_argument("override must look like key.sub=value: " + assignment);
    const std::string key = assignment.substr(0, eq);
    const std::string raw = assignment.substr(eq + 1);

    nlohmann::json value;
    try {
        value = nlohmann::json::parse(raw);
    } catch (const nlohmann::json::exception&) {
        value = raw;  // unquoted strings pass through verbatim
    }

    nlohmann::json* node = &j;
    std::size_t start = 0;
    while (true) {
        const auto dot = key.find('.', start);
        const std::string part = key.substr(start, dot - start);
        if (part.empty())
            throw std::invalid_argument("override has an empty key segment: " + assignment);
        if (dot == std::string::npos) {
            (*node)[part] = value;
            return;
        }
        node = &(*node)[part];
        start = dot + 1;
    }
}

std::string config_hash(const ExperimentConfig& c) {
    const std::string dump = config_to_json(c).dump();
    std::uint64_t h = 1469598103934665603ull;  // FNV-1a 64-bit
    for (unsigned char ch : dump) {
        h ^= ch;
        h *= 1099511628211ull;
    }
    static const char* hex = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i, h >>= 4) out[i] = hex[h & 0xf];
    return out;
}

void validate(const ExperimentConfig& c) {
    auto fail = [](const std::string& msg) { throw std::invalid_argument("config: " + msg); };

    task::parse_dataset_id(c.dataset);  // throws on unknown names
    if (c.num_tasks < 1) fail("num_tasks must be >= 1");
    if (c.max_train_per_class < 0 || c.max_test_per_class < 0)
        fail("per-class caps must be >= 0");
    if (c.synthetic_per_class < 1) fail("synthetic_per_class must be >= 1");
    if (!(c.synthetic_std > 0)) fail("synthetic_std must be positive");

    if (c.backbone.feature_dim < 2) fail("backbone.feature_dim must be >= 2");
    if (c.backbone.stage_c_dim < 1) fail("backbone.stage_c_dim must be >= 1");
    if (c.backbone.conv1_channels < 1 || c.backbone.conv2_channels < 1)
        fail("backbone conv channel counts must be >= 1");

    if (c.optimizer.algorithm != "adam" && c.optimizer.algorithm != "sgd")
        fail("optimizer.algorithm must be adam or sgd");
    if (!(c.optimizer.learning_rate > 0)) fail("optimizer.learning_rate must be positive");
    if (c.optimizer.weight_decay < 0) fail("optimizer.weight_decay must be >= 0");
    if (c.optimizer.batch_size < 1) fail("optimizer.batch_size must be >= 1");
    if (c.optimizer.epochs < 1) fail("optimizer.epochs must be >= 1");

    if (c.flow.layers < 1) fail("flow.layers must be >= 1");
    if (c.flow.hidden < 1) fail("flow.hidden must be >= 1");
    if (c.flow.embed_dim < 1) fail("flow.embed_dim must be >= 1");
    if (!(c.flow.learning_rate > 0)) fail("flow.learning_rate must be positive");
    if (c.flow.replay_count < 0) fail("flow.replay_count must be >= 0");

    obj::parse_cl_strategy(c.cl.strategy);  // throws on unknown names
    if (c.cl.lambda < 0) fail("cl.lambda must be >= 0");
    if (!(c.cl.distill_temperature > 0)) fail("cl.distill_temperature must be positive");
    if (c.cl.replay_batch < 1) fail("cl.replay_batch must be >= 1");
    if (c.cl.replay_per_class < 1) fail("cl.replay_per_class must be >= 1");
    if (c.cl.fisher_samples < 1) fail("cl.fisher_samples must be >= 1");

    if (!(c.plugin.percentile > 0.0 && c.plugin.percentile < 0.5))
        fail("plugin.percentile must lie in (0, 0.5)");
    if (c.plugin.guidance_samples < 0) fail("plugin.guidance_samples must be >= 0");
    if (c.plugin.alternation != "per_batch" && c.plugin.alternation != "per_epoch")
        fail("plugin.alternation must be per_batch or per_epoch");
    if (c.plugin.erasure.fine_tune_epochs < 1)
        fail("plugin.erasure.fine_tune_epochs must be >= 1");
    if (!(c.plugin.erasure.fine_tune_learning_rate > 0))
        fail("plugin.erasure.fine_tune_learning_rate must be positive");
    if (c.plugin.erasure.batch_size < 1) fail("plugin.erasure.batch_size must be >= 1");

    if (c.noise.enabled) {
        if (c.noise.mapping != "canonical" && c.noise.mapping != "adjacent" &&
            c.noise.mapping != "adjacent_one_way")
            fail("noise.mapping must be canonical, adjacent or adjacent_one_way");
        if (!(c.noise.rate >= 0.0 && c.noise.rate < 1.0))
            fail("noise.rate must lie in [0, 1)");
        for (int t : c.noise.tasks)
            if (t < 1 || t > c.num_tasks) fail("noise.tasks entries must lie in [1, num_tasks]");
    }

    if (c.run_seeds.empty()) fail("run_seeds must not be empty");
    if (c.output_dir.empty()) fail("output_dir must not be empty");
}

}  // namespace eraser::cfg
