#pragma once
// Task-sequence orchestration: per-task joint flow/classifier training,
// density-based identification, erasure, consolidation, evaluation, and
// artifact emission. One TaskRunner drives one seed; run_sequence aggregates
// all seeds of a configuration.

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "eraser/config.hpp"
#include "eraser/erase.hpp"
#include "eraser/evaluation.hpp"
#include "eraser/identify.hpp"
#include "eraser/objectives.hpp"

namespace eraser::run {

struct PhaseTimes {
    double train = 0.0;  // seconds, wall clock
    double identify = 0.0;
    double erase = 0.0;
    double evaluate = 0.0;
};

struct TaskOutcome {
    int task_id = 0;
    ident::DensityReport density;  // empty when the plugin is disabled
    erasure::ErasureReport erasure;
    erasure::ErasureVerification erasure_check;
    PhaseTimes times;
};

struct RunResult {
    std::uint64_t run_seed = 0;
    std::shared_ptr<evaluation::AccuracyMatrix> matrix;
    evaluation::MetricsSummary summary;  // meaningful only when complete
    std::vector<TaskOutcome> tasks;
    bool complete = false;
    std::string failure;    // message when the run stopped early
    std::string directory;  // artifact directory, empty if writing disabled
};

struct Aggregate {
    double mean = 0.0;
    double stddev = 0.0;  // sample standard deviation over complete runs
};

struct ResultsBundle {
    std::string config_hash;
    std::vector<RunResult> runs;
    bool complete = false;  // every seed finished every task
    Aggregate score, a1, a2, forgetting;
};

// Drives one (config, run_seed) pair through the task sequence. Tasks must be
// run in order; any phase failure rolls the model and flow back to their
// pre-task state, marks the run partial, and rethrows.
class TaskRunner {
public:
    TaskRunner(const cfg::ExperimentConfig& config, std::uint64_t run_seed,
               bool write_artifacts = true);
    TaskRunner(TaskRunner&&) noexcept;
    TaskRunner& operator=(TaskRunner&&) noexcept;
    ~TaskRunner();

    int num_tasks() const;
    const task::TaskDataset& dataset(int t) const;  // 1-based
    const model::BackboneModel& model() const;
    const flow::FlowModel& flow() const;
    const evaluation::AccuracyMatrix& matrix() const;
    const std::vector<TaskOutcome>& outcomes() const;
    const std::string& directory() const;

    // content hash over every task's examples and labels; equal fingerprints
    // mean equal training data regardless of plugin settings
    std::uint64_t dataset_fingerprint() const;

    void run_task(int t);

    // summary + remaining artifacts; valid after the last task or a failure
    RunResult finish();

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

// percent accuracy of a task's test split under the current model
double test_accuracy(const model::BackboneModel& model,
                     const task::TaskDataset& task, int batch_size = 256);

// deterministic dataset construction for one (config, run_seed) pair: task
// partitioning plus the configured noise schedule. Used by the runner itself
// and by offline tools that need the same data a run saw.
struct PreparedData {
    std::vector<task::TaskDataset> tasks;
    task::BuildOptions options;
    std::uint64_t class_order_seed = 0;
    std::vector<task::NoiseSpec> noise_specs;  // one per task, possibly empty
};
PreparedData prepare_data(const cfg::ExperimentConfig& config,
                          std::uint64_t run_seed);

ResultsBundle run_sequence(const cfg::ExperimentConfig& config);

std::string bundle_json(const ResultsBundle& bundle);

}  // namespace eraser::run
