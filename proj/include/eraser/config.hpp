#pragma once
// Experiment configuration: JSON-backed, strictly validated, with every
// random choice funneled through named seeds and a stable content hash that
// tags all emitted artifacts.

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "eraser/erase.hpp"

namespace eraser::cfg {

struct BackboneSettings {
    int feature_dim = 64;  // d — width of the feature the flow models
    int stage_c_dim = 64;
    int conv1_channels = 8;
    int conv2_channels = 16;
};

struct OptimizerSettings {
    std::string algorithm = "adam";  // adam | sgd
    double learning_rate = 1e-3;
    double weight_decay = 5e-4;
    int batch_size = 128;
    int epochs = 20;
};

struct FlowSettings {
    int layers = 6;
    int hidden = 64;
    int embed_dim = 16;
    double learning_rate = 1e-3;
    int replay_count = 32;  // snapshot-generated features per flow batch
};

struct CLSettings {
    std::string strategy = "none";  // none | ewc | lwf | replay
    double lambda = 100.0;
    bool use_fisher = false;
    double distill_temperature = 2.0;
    int replay_batch = 32;
    int replay_per_class = 10;
    int fisher_samples = 200;
};

struct PluginSettings {
    bool enabled = true;              // density scoring + reports
    bool erase_enabled = true;        // the erasure phase itself
    double percentile = 0.05;         // low-density selection fraction
    int guidance_samples = 16;        // latent draws per guidance-loss batch
    std::string alternation = "per_batch";  // per_batch | per_epoch
    erasure::ErasureConfig erasure;
};

struct NoiseSettings {
    bool enabled = false;
    std::string mapping = "canonical";  // canonical | adjacent | adjacent_one_way
    double rate = 0.0;
    std::vector<int> tasks;  // 1-based ids; empty = every task
};

struct Seeds {
    std::uint64_t class_order = 1;
    std::uint64_t data = 2;
    std::uint64_t init = 3;
    std::uint64_t noise = 4;
    std::uint64_t flow_sampling = 5;
};

struct ExperimentConfig {
    std::string dataset = "synthetic2d";
    int num_tasks = 5;
    std::string data_dir = "data";
    int max_train_per_class = 0;  // 0 = everything
    int max_test_per_class = 0;
    int synthetic_per_class = 400;
    double synthetic_std = 0.35;

    BackboneSettings backbone;
    OptimizerSettings optimizer;
    FlowSettings flow;
    CLSettings cl;
    PluginSettings plugin;
    NoiseSettings noise;
    Seeds seeds;

    std::vector<std::uint64_t> run_seeds{1};
    std::string output_dir = "results";
};

// every field with its default, serialized; keys are sorted, so the dump is
// canonical and hashable
nlohmann::json config_to_json(const ExperimentConfig& c);

// strict inverse: unknown keys, wrong types, or invalid values throw
// std::invalid_argument naming the offending dotted key
ExperimentConfig config_from_json(const nlohmann::json& j);

ExperimentConfig load_config_file(const std::string& path);

// "key.sub=value" — value parsed as JSON when possible, else as a string
void apply_override(nlohmann::json& j, const std::string& assignment);

// FNV-1a (64-bit) of the canonical dump, as 16 hex digits
std::string config_hash(const ExperimentConfig& c);

// semantic checks beyond parsing (ranges, enums, cross-field rules)
void validate(const ExperimentConfig& c);

}  // namespace eraser::cfg
