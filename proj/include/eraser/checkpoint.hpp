#pragma once
// Binary checkpoints: a JSON header (architecture, task registry, flow
// standardizer, accuracy cells, tensor manifest) followed by raw
// little-endian doubles for every parameter tensor. Saved at each task
// boundary so a crash mid-task always leaves a loadable model.

#include <cstdint>
#include <memory>
#include <string>

#include <json.hpp>

#include "eraser/backbone.hpp"
#include "eraser/evaluation.hpp"
#include "eraser/flow.hpp"

namespace eraser::ckpt {

struct LoadedCheckpoint {
    nlohmann::json config;  // effective experiment config at save time
    std::string config_hash;
    std::uint64_t run_seed = 0;
    int completed_tasks = 0;
    std::shared_ptr<model::BackboneModel> model;
    std::shared_ptr<flow::FlowModel> flow;
    std::shared_ptr<evaluation::AccuracyMatrix> matrix;
};

void save_checkpoint(const std::string& path, const nlohmann::json& config,
                     const std::string& config_hash, std::uint64_t run_seed,
                     int completed_tasks, const model::BackboneModel& model,
                     const flow::FlowModel& flow,
                     const evaluation::AccuracyMatrix& matrix);

// throws std::runtime_error on missing files, bad magic, version or
// truncation; the returned model/flow reproduce the saved forward pass
// bit-identically
LoadedCheckpoint load_checkpoint(const std::string& path);

}  // namespace eraser::ckpt
