#include "eraser/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>
#include <vector>

namespace eraser::ckpt {

namespace {

constexpr char kMagic[8] = {'E', 'R', 'C', 'L', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

nlohmann::json backbone_config_json(const model::BackboneConfig& c) {
    return {{"kind", model::backbone_kind_name(c.kind)},
            {"in_channels", c.in_channels},
            {"in_h", c.in_h},
            {"in_w", c.in_w},
            {"conv1_channels", c.conv1_channels},
            {"conv2_channels", c.conv2_channels},
            {"feature_dim", c.feature_dim},
            {"stage_c_dim", c.stage_c_dim},
            {"init_seed", c.init_seed}};
}

model::BackboneConfig backbone_config_from(const nlohmann::json& j) {
    model::BackboneConfig c;
    c.kind = model::parse_backbone_kind(j.at("kind").get<std::string>());
    c.in_channels = j.at("in_channels").get<int>();
    c.in_h = j.at("in_h").get<int>();
    c.in_w = j.at("in_w").get<int>();
    c.conv1_channels = j.at("conv1_channels").get<int>();
    c.conv2_channels = j.at("conv2_channels").get<int>();
    c.feature_dim = j.at("feature_dim").get<int>();
    c.stage_c_dim = j.at("stage_c_dim").get<int>();
    c.init_seed = j.at("init_seed").get<std::uint64_t>();
    return c;
}

nlohmann::json flow_config_json(const flow::FlowConfig& c) {
    return {{"dim", c.dim},
            {"layers", c.layers},
            {"hidden", c.hidden},
            {"embed_dim", c.embed_dim},
            {"label_capacity", c.label_capacity},
            {"s_cap", c.s_cap},
            {"sigma_floor", c.sigma_floor},
            {"init_seed", c.init_seed}};
}

flow::FlowConfig flow_config_from(const nlohmann::json& j) {
    flow::FlowConfig c;
    c.dim = j.at("dim").get<int>();
    c.layers = j.at("layers").get<int>();
    c.hidden = j.at("hidden").get<int>();
    c.embed_dim = j.at("embed_dim").get<int>();
    c.label_capacity = j.at("label_capacity").get<int>();
    c.s_cap = j.at("s_cap").get<double>();
    c.sigma_floor = j.at("sigma_floor").get<double>();
    c.init_seed = j.at("init_seed").get<std::uint64_t>();
    return c;
}

}  // namespace

void save_checkpoint(const std::string& path, const nlohmann::json& config,
                     const std::string& config_hash, std::uint64_t run_seed,
                     int completed_tasks, const model::BackboneModel& model,
                     const flow::FlowModel& flow,
                     const evaluation::AccuracyMatrix& matrix) {
    nlohmann::json meta;
    meta["config"] = config;
    meta["config_hash"] = config_hash;
    meta["run_seed"] = run_seed;
    meta["completed_tasks"] = completed_tasks;

    meta["backbone"] = backbone_config_json(model.config());
    nlohmann::json tasks = nlohmann::json::object();
    for (int t : model.task_ids()) tasks[std::to_string(t)] = model.class_set(t);
    meta["tasks"] = tasks;

    meta["flow"] = flow_config_json(flow.config());
    meta["flow_labels"] = flow.registered_labels();
    const auto& std_state = flow.standardizer();
    meta["standardizer"] = {{"count", std_state.count},
                            {"mean", std_state.mean},
                            {"m2", std_state.m2}};

    nlohmann::json cells = nlohmann::json::array();
    for (int k = 1; k <= matrix.task_count(); ++k)
        for (int j = k; j <= matrix.task_count(); ++j)
            if (matrix.has(k, j)) cells.push_back({k, j, matrix.at(k, j)});
    meta["matrix"] = {{"task_count", matrix.task_count()}, {"cells", cells}};

    // tensor manifest: names + shapes in write order
    std::vector<const Tensor*> blobs;
    nlohmann::json manifest = nlohmann::json::array();
    auto add = [&](const std::string& prefix, const nn::ParamList& params) {
        for (const auto& p : params) {
            manifest.push_back({{"name", prefix + p.name},
                                {"shape", p.var->value.shape()}});
            blobs.push_back(&p.var->value);
        }
    };
    add("model/", model.all_params());
    add("flow/", flow.params());
    meta["tensors"] = manifest;

    const std::string header = meta.dump();
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("checkpoint: cannot open " + path + " for writing");
    out.write(kMagic, sizeof(kMagic));
    const std::uint32_t version = kVersion;
    out.write(reinterpret_cast<const char*>(&version), sizeof(version));
    const std::uint64_t header_len = header.size();
    out.write(reinterpret_cast<const char*>(&header_len), sizeof(header_len));
    out.write(header.data(), static_cast<std::streamsize>(header.size()));
    for (const Tensor* t : blobs)
        out.write(reinterpret_cast<const char*>(t->data()),
                  static_cast<std::streamsize>(t->numel() * sizeof(double)));
    if (!out) throw std::runtime_error("checkpoint: write failed for " + path);
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("checkpoint: cannot open " + path);

    char magic[8];
    in.read(magic, sizeof(magic));
    if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
        throw std::runtime_error("checkpoint: bad magic in " + path);
    std::uint32_t version = 0;
    in.read(reinterpret_cast<char*>(&version), sizeof(version));
    if (!in || version != kVersion)
        throw std::runtime_error("checkpoint: unsupported version in " + path);
    std::uint64_t header_len = 0;
    in.read(reinterpret_cast<char*>(&header_len), sizeof(header_len));
    std::string header(header_len, '\0');
    in.read(header.data(), static_cast<std::streamsize>(header_len));
    if (!in) throw std::runtime_error("checkpoint: truncated header in " + path);

    nlohmann::json meta;
    try {
        meta = nlohmann::json::parse(header);
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error("checkpoint: corrupt header in " + path + ": " + e.what());
    }

    LoadedCheckpoint loaded;
    loaded.config = meta.at("config");
    loaded.config_hash = meta.at("config_hash").get<std::string>();
    loaded.run_seed = meta.at("run_seed").get<std::uint64_t>();
    loaded.completed_tasks = meta.at("completed_tasks").get<int>();

    loaded.model = std::make_shared<model::BackboneModel>(
        backbone_config_from(meta.at("backbone")));
    // json object keys are sorted lexicographically; register tasks by id
    std::map<int, std::vector<int>> class_sets;
    for (const auto& item : meta.at("tasks").items())
        class_sets[std::stoi(item.key())] = item.value().get<std::vector<int>>();
    for (const auto& [t, cs] : class_sets) loaded.model->register_task(t, cs);

    loaded.flow = std::make_shared<flow::FlowModel>(flow_config_from(meta.at("flow")));
    loaded.flow->register_labels(meta.at("flow_labels").get<std::vector<int>>());
    flow::FlowModel::StandardizerState std_state;
    std_state.count = meta.at("standardizer").at("count").get<std::int64_t>();
    std_state.mean = meta.at("standardizer").at("mean").get<std::vector<double>>();
    std_state.m2 = meta.at("standardizer").at("m2").get<std::vector<double>>();
    loaded.flow->set_standardizer(std_state);

    const auto& mj = meta.at("matrix");
    loaded.matrix = std::make_shared<evaluation::AccuracyMatrix>(
        mj.at("task_count").get<int>());
    for (const auto& cell : mj.at("cells"))
        loaded.matrix->record(cell.at(0).get<int>(), cell.at(1).get<int>(),
                              cell.at(2).get<double>());

    // index live parameters by name, then stream the blobs back in
    std::map<std::string, Tensor*> live;
    for (const auto& p : loaded.model->all_params())
        live["model/" + p.name] = &p.var->value;
    for (const auto& p : loaded.flow->params())
        live["flow/" + p.name] = &p.var->value;

    for (const auto& entry : meta.at("tensors")) {
        const std::string name = entry.at("name").get<std::string>();
        const auto shape = entry.at("shape").get<std::vector<int>>();
        auto it = live.find(name);
        if (it == live.end())
            throw std::runtime_error("checkpoint: unknown tensor " + name + " in " + path);
        if (it->second->shape() != shape)
            throw std::runtime_error("checkpoint: shape mismatch for " + name + " in " + path);
        in.read(reinterpret_cast<char*>(it->second->data()),
                static_cast<std::streamsize>(it->second->numel() * sizeof(double)));
        if (!in) throw std::runtime_error("checkpoint: truncated tensor data in " + path);
    }
    return loaded;
}

}  // namespace eraser::ckpt
