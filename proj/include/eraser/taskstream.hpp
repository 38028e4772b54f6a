#pragma once
// Dataset ingestion, class-partitioned task construction, and asymmetric
// label-noise injection. Everything here is pure and seeded: the same inputs
// produce byte-identical task sequences.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "eraser/tensor.hpp"

namespace eraser::task {

struct LabeledExample {
    Tensor input;        // [C,H,W] for images ([0,1]); [2] for synthetic2d
    int true_label = 0;
    int observed_label = 0;
    bool noisy = false;  // always equals (true_label != observed_label)
};

struct TaskDataset {
    int task_id = 0;              // 1-based
    std::vector<int> class_set;   // ordered global class ids owned by the task
    std::vector<LabeledExample> train, valid, test;
    double noise_rate = 0.0;

    // position of a global class id within class_set (the head's local index)
    int local_index(int global_label) const;
};

struct NoiseSpec {
    std::map<int, int> mapping;  // source class -> target class
    double rate = 0.0;           // fraction of each source class to flip
    std::uint64_t seed = 0;
};

enum class DatasetId { mnist, cifar10, cifar100, synthetic2d };

DatasetId parse_dataset_id(const std::string& name);
std::string dataset_name(DatasetId id);

struct DatasetInfo {
    int num_classes;
    std::vector<int> input_shape;  // per-example tensor shape
};
// synthetic2d's class count depends on the task count (2 blobs per task)
DatasetInfo dataset_info(DatasetId id, int num_tasks = 0);

struct BuildOptions {
    std::string data_dir = "data";
    double valid_fraction = 0.1;   // carved per class from the train archive
    int max_train_per_class = 0;   // 0 = use everything
    int max_test_per_class = 0;
    int synthetic_per_class = 400;
    double synthetic_std = 0.35;
    std::uint64_t data_seed = 1;   // subsampling / split carving / generation
};

// Shuffles the dataset's classes with class_order_seed, partitions them into
// num_tasks contiguous groups, and attaches each task's train/valid/test
// examples. Throws std::invalid_argument on unknown id, non-divisible task
// count, or single-class tasks; std::runtime_error on unreadable archives.
std::vector<TaskDataset> build_task_sequence(DatasetId id, int num_tasks,
                                             std::uint64_t class_order_seed,
                                             const BuildOptions& opt = {});

// Flips exactly round-half-up(rate x class_count) training examples of each
// mapping source to its target; valid/test untouched. Deterministic in
// spec.seed. Throws if the mapping leaves the task's class set.
TaskDataset inject_asymmetric_noise(const TaskDataset& task, const NoiseSpec& spec);

// Published similar-class pairs for mnist/cifar10; next-in-superclass for
// cifar100 — restricted to pairs wholly inside class_set.
std::map<int, int> canonical_mapping(DatasetId id, const std::vector<int>& class_set);

// Pairs neighboring classes of the set bidirectionally: c0<->c1, c2<->c3...
// Lets every task carry noise regardless of which classes it drew.
std::map<int, int> adjacent_mapping(const std::vector<int>& class_set);

// One-directional variant: c0->c1, c2->c3... Matches the usual asymmetric
// protocol (each source class bleeds into a similar target, never back), so
// the observed labels stay informative even at a 0.5 flip rate — under the
// bidirectional mapping that rate would make two paired classes statistically
// indistinguishable.
std::map<int, int> adjacent_one_way_mapping(const std::vector<int>& class_set);

// JSON provenance manifest: partition, seeds, per-task noise bookkeeping.
std::string noise_manifest_json(const std::vector<TaskDataset>& tasks,
                                DatasetId id, std::uint64_t class_order_seed,
                                const BuildOptions& opt,
                                const std::vector<NoiseSpec>& specs);

// --- raw archive loaders (exposed for tests) -------------------------------
struct RawDataset {
    std::vector<Tensor> inputs;
    std::vector<int> labels;
};
RawDataset load_mnist_split(const std::string& images_path,
                            const std::string& labels_path);
RawDataset load_cifar10_files(const std::vector<std::string>& batch_paths);
RawDataset load_cifar100_file(const std::string& path);  // fine labels

// standard CIFAR-100 fine-class -> coarse-superclass assignment
const std::vector<int>& cifar100_coarse_of_fine();

}  // namespace eraser::task
