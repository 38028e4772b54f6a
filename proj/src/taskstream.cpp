#include "eraser/taskstream.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

#include "eraser/rng.hpp"

namespace eraser::task {

namespace {

std::vector<unsigned char> read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open " + path);
    return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

std::uint32_t read_be32(const unsigned char* p) {
    return (std::uint32_t(p[0]) << 24) | (std::uint32_t(p[1]) << 16) |
           (std::uint32_t(p[2]) << 8) | std::uint32_t(p[3]);
}

int round_half_up(double x) { return static_cast<int>(std::floor(x + 0.5)); }

constexpr double kPi = 3.14159265358979323846;

}  // namespace

int TaskDataset::local_index(int global_label) const {
    for (std::size_t i = 0; i < class_set.size(); ++i)
        if (class_set[i] == global_label) return static_cast<int>(i);
    throw std::invalid_argument("label " + std::to_string(global_label) +
                                " not in task " + std::to_string(task_id) +
                                "'s class set");
}

DatasetId parse_dataset_id(const std::string& name) {
    if (name == "mnist") return DatasetId::mnist;
    if (name == "cifar10") return DatasetId::cifar10;
    if (name == "cifar100") return DatasetId::cifar100;
    if (name == "synthetic2d") return DatasetId::synthetic2d;
    throw std::invalid_argument("unknown dataset id: " + name);
}

std::string dataset_name(DatasetId id) {
    switch (id) {
        case DatasetId::mnist: return "mnist";
        case DatasetId::cifar10: return "cifar10";
        case DatasetId::cifar100: return "cifar100";
        case DatasetId::synthetic2d: return "synthetic2d";
    }
    return "?";
}

DatasetInfo dataset_info(DatasetId id, int num_tasks) {
    switch (id) {
        case DatasetId::mnist: return {10, {1, 28, 28}};
        case DatasetId::cifar10: return {10, {3, 32, 32}};
        case DatasetId::cifar100: return {100, {3, 32, 32}};
        case DatasetId::synthetic2d: return {2 * std::max(num_tasks, 1), {2}};
    }
    throw std::invalid_argument("unknown dataset id");
}

// ---------------------------------------------------------------------------
// Raw archive loaders
// ---------------------------------------------------------------------------

RawDataset load_mnist_split(const std::string& images_path,
                            const std::string& labels_path) {
    auto ibuf = read_file(images_path);
    auto lbuf = read_file(labels_path);
    if (ibuf.size() < 16 || read_be32(ibuf.data()) != 0x803)
        throw std::runtime_error(images_path + ": not an idx3-ubyte image file");
    if (lbuf.size() < 8 || read_be32(lbuf.data()) != 0x801)
        throw std::runtime_error(labels_path + ": not an idx1-ubyte label file");
    const std::uint32_t n = read_be32(ibuf.data() + 4);
    const std::uint32_t rows = read_be32(ibuf.data() + 8);
    const std::uint32_t cols = read_be32(ibuf.data() + 12);
    if (read_be32(lbuf.data() + 4) != n)
        throw std::runtime_error("image/label counts differ for " + images_path);
    if (ibuf.size() != 16 + static_cast<std::size_t>(n) * rows * cols)
        throw std::runtime_error(images_path + ": truncated image payload");

    RawDataset out;
    out.inputs.reserve(n);
    out.labels.reserve(n);
    const unsigned char* px = ibuf.data() + 16;
    for (std::uint32_t i = 0; i < n; ++i) {
        Tensor t({1, static_cast<int>(rows), static_cast<int>(cols)});
        for (std::uint32_t j = 0; j < rows * cols; ++j)
            t[j] = px[static_cast<std::size_t>(i) * rows * cols + j] / 255.0;
        out.inputs.push_back(std::move(t));
        out.labels.push_back(lbuf[8 + i]);
    }
    return out;
}

RawDataset load_cifar10_files(const std::vector<std::string>& batch_paths) {
    constexpr std::size_t kRecord = 1 + 3072;
    RawDataset out;
    for (const auto& path : batch_paths) {
        auto buf = read_file(path);
        if (buf.empty() || buf.size() % kRecord != 0)
            throw std::runtime_error(path + ": not a CIFAR-10 binary batch");
        const std::size_t n = buf.size() / kRecord;
        for (std::size_t i = 0; i < n; ++i) {
            const unsigned char* rec = buf.data() + i * kRecord;
            out.labels.push_back(rec[0]);
            Tensor t({3, 32, 32});
            for (int j = 0; j < 3072; ++j) t[j] = rec[1 + j] / 255.0;
            out.inputs.push_back(std::move(t));
        }
    }
    return out;
}

RawDataset load_cifar100_file(const std::string& path) {
    constexpr std::size_t kRecord = 2 + 3072;  // coarse byte, fine byte, pixels
    auto buf = read_file(path);
    if (buf.empty() || buf.size() % kRecord != 0)
        throw std::runtime_error(path + ": not a CIFAR-100 binary file");
    const std::size_t n = buf.size() / kRecord;
    RawDataset out;
    for (std::size_t i = 0; i < n; ++i) {
        const unsigned char* rec = buf.data() + i * kRecord;
        out.labels.push_back(rec[1]);  // fine label
        Tensor t({3, 32, 32});
        for (int j = 0; j < 3072; ++j) t[j] = rec[2 + j] / 255.0;
        out.inputs.push_back(std::move(t));
    }
    return out;
}

const std::vector<int>& cifar100_coarse_of_fine() {
    static const std::vector<int> table = {
        4,  1,  14, 8,  0,  6,  7,  7,  18, 3,  3,  14, 9,  18, 7,  11, 3,
        9,  7,  11, 6,  11, 5,  10, 7,  6,  13, 15, 3,  15, 0,  11, 1,  10,
        12, 14, 16, 9,  11, 5,  5,  19, 8,  8,  15, 13, 14, 17, 18, 10, 16,
        4,  17, 4,  2,  0,  17, 4,  18, 17, 10, 3,  2,  12, 12, 16, 12, 1,
        9,  19, 2,  10, 0,  1,  16, 12, 9,  13, 15, 13, 16, 19, 2,  4,  6,
        19, 5,  5,  8,  19, 18, 1,  2,  15, 6,  0,  17, 8,  14, 13};
    return table;
}

// ---------------------------------------------------------------------------
// Task construction
// ---------------------------------------------------------------------------

namespace {

struct SplitSources {
    RawDataset train, test;
};

SplitSources load_sources(DatasetId id, const BuildOptions& opt) {
    const std::string base = opt.data_dir + "/" + dataset_name(id);
    switch (id) {
        case DatasetId::mnist:
            return {load_mnist_split(base + "/train-images-idx3-ubyte",
                                     base + "/train-labels-idx1-ubyte"),
                    load_mnist_split(base + "/t10k-images-idx3-ubyte",
                                     base + "/t10k-labels-idx1-ubyte")};
        case DatasetId::cifar10: {
            std::vector<std::string> batches;
            for (int i = 1; i <= 5; ++i)
                batches.push_back(base + "/data_batch_" + std::to_string(i) + ".bin");
            return {load_cifar10_files(batches),
                    load_cifar10_files({base + "/test_batch.bin"})};
        }
        case DatasetId::cifar100:
            return {load_cifar100_file(base + "/train.bin"),
                    load_cifar100_file(base + "/test.bin")};
        default:
            throw std::invalid_argument("no archives for synthetic datasets");
    }
}

std::vector<LabeledExample> take_class(const RawDataset& src, int cls, int cap,
                                       std::uint64_t seed) {
    std::vector<int> idx;
    for (std::size_t i = 0; i < src.labels.size(); ++i)
        if (src.labels[i] == cls) idx.push_back(static_cast<int>(i));
    Rng rng(seed);
    rng.shuffle(idx);
    if (cap > 0 && static_cast<int>(idx.size()) > cap) idx.resize(cap);
    std::vector<LabeledExample> out;
    out.reserve(idx.size());
    for (int i : idx) out.push_back({src.inputs[i], cls, cls, false});
    return out;
}

}  // namespace

std::vector<TaskDataset> build_task_sequence(DatasetId id, int num_tasks,
                                             std::uint64_t class_order_seed,
                                             const BuildOptions& opt) {
    if (num_tasks < 1) throw std::invalid_argument("num_tasks must be >= 1");
    const DatasetInfo info = dataset_info(id, num_tasks);
    if (info.num_classes % num_tasks != 0)
        throw std::invalid_argument(
            "task count " + std::to_string(num_tasks) + " does not divide the " +
            std::to_string(info.num_classes) + " classes of " + dataset_name(id));
    const int per_task = info.num_classes / num_tasks;
    if (per_task < 2)
        throw std::invalid_argument(
            "partition yields single-class tasks, which cannot be classified");

    std::vector<int> classes(info.num_classes);
    for (int i = 0; i < info.num_classes; ++i) classes[i] = i;
    Rng order_rng(class_order_seed);
    order_rng.shuffle(classes);

    std::vector<TaskDataset> tasks(num_tasks);
    for (int t = 0; t < num_tasks; ++t) {
        tasks[t].task_id = t + 1;
        tasks[t].class_set.assign(classes.begin() + t * per_task,
                                  classes.begin() + (t + 1) * per_task);
    }

    if (id == DatasetId::synthetic2d) {
        const int n = opt.synthetic_per_class;
        const double radius = 4.0;
        for (auto& tk : tasks) {
            for (int cls : tk.class_set) {
                const double ang = 2.0 * kPi * cls / info.num_classes;
                const double cx = radius * std::cos(ang);
                const double cy = radius * std::sin(ang);
                Rng rng(Rng::mix(opt.data_seed, 7777 + cls));
                const int n_test = n / 5;
                const int n_valid = round_half_up(opt.valid_fraction * (n - n_test));
                for (int i = 0; i < n; ++i) {
                    Tensor p({2}, {cx + opt.synthetic_std * rng.normal(),
                                   cy + opt.synthetic_std * rng.normal()});
                    LabeledExample ex{std::move(p), cls, cls, false};
                    if (i < n_test)
                        tk.test.push_back(std::move(ex));
                    else if (i < n_test + n_valid)
                        tk.valid.push_back(std::move(ex));
                    else
                        tk.train.push_back(std::move(ex));
                }
            }
        }
    } else {
        const SplitSources src = load_sources(id, opt);
        for (auto& tk : tasks) {
            for (int cls : tk.class_set) {
                auto pool = take_class(src.train, cls, opt.max_train_per_class,
                                       Rng::mix(opt.data_seed, 0x517cc1b7u ^ cls));
                const int n_valid =
                    round_half_up(opt.valid_fraction * static_cast<int>(pool.size()));
                for (std::size_t i = 0; i < pool.size(); ++i) {
                    if (static_cast<int>(i) < n_valid)
                        tk.valid.push_back(std::move(pool[i]));
                    else
                        tk.train.push_back(std::move(pool[i]));
                }
                auto tpool = take_class(src.test, cls, opt.max_test_per_class,
                                        Rng::mix(opt.data_seed, 0x9e3779b9u ^ cls));
                for (auto& ex : tpool) tk.test.push_back(std::move(ex));
            }
        }
    }

    // interleave classes inside each split so file order carries no structure
    for (auto& tk : tasks) {
        Rng rng(Rng::mix(opt.data_seed, 0xfeedULL + tk.task_id));
        rng.shuffle(tk.train);
        rng.shuffle(tk.valid);
        rng.shuffle(tk.test);
    }
    return tasks;
}

TaskDataset inject_asymmetric_noise(const TaskDataset& task, const NoiseSpec& spec) {
    auto in_set = [&](int c) {
        return std::find(task.class_set.begin(), task.class_set.end(), c) !=
               task.class_set.end();
    };
    for (const auto& [src, tgt] : spec.mapping) {
        if (src == tgt)
            throw std::invalid_argument("noise mapping maps class " +
                                        std::to_string(src) + " to itself");
        if (!in_set(src) || !in_set(tgt))
            throw std::invalid_argument(
                "noise mapping " + std::to_string(src) + "->" + std::to_string(tgt) +
                " leaves task " + std::to_string(task.task_id) + "'s class set");
    }
    if (spec.rate < 0.0 || spec.rate > 1.0)
        throw std::invalid_argument("noise rate must lie in [0,1]");

    TaskDataset out = task;
    out.noise_rate = spec.rate;
    for (const auto& [src, tgt] : spec.mapping) {
        std::vector<int> idx;
        for (std::size_t i = 0; i < out.train.size(); ++i)
            if (out.train[i].true_label == src && !out.train[i].noisy)
                idx.push_back(static_cast<int>(i));
        const int flips = round_half_up(spec.rate * static_cast<int>(idx.size()));
        Rng rng(Rng::mix(spec.seed, static_cast<std::uint64_t>(src)));
        rng.shuffle(idx);
        for (int i = 0; i < flips; ++i) {
            out.train[idx[i]].observed_label = tgt;
            out.train[idx[i]].noisy = true;
        }
    }
    return out;
}

std::map<int, int> canonical_mapping(DatasetId id, const std::vector<int>& class_set) {
    auto in_set = [&](int c) {
        return std::find(class_set.begin(), class_set.end(), c) != class_set.end();
    };
    std::map<int, int> full;
    switch (id) {
        case DatasetId::mnist:
            full = {{2, 7}, {3, 8}, {5, 6}, {7, 1}};
            break;
        case DatasetId::cifar10:
            // truck->automobile, bird->airplane, deer->horse, cat->dog
            full = {{9, 1}, {2, 0}, {4, 7}, {3, 5}};
            break;
        case DatasetId::cifar100: {
            const auto& coarse = cifar100_coarse_of_fine();
            for (int c = 0; c < 100; ++c) {
                // next fine class of the same superclass, cyclically
                int next = -1, first = -1;
                for (int j = 0; j < 100; ++j) {
                    if (coarse[j] != coarse[c]) continue;
                    if (first < 0) first = j;
                    if (j > c && next < 0) next = j;
                }
                full[c] = next >= 0 ? next : first;
            }
            break;
        }
        case DatasetId::synthetic2d:
            return adjacent_mapping(class_set);
    }
    std::map<int, int> restricted;
    for (const auto& [src, tgt] : full)
        if (src != tgt && in_set(src) && in_set(tgt)) restricted[src] = tgt;
    return restricted;
}

std::map<int, int> adjacent_mapping(const std::vector<int>& class_set) {
    std::map<int, int> m;
    for (std::size_t i = 0; i + 1 < class_set.size(); i += 2) {
        m[class_set[i]] = class_set[i + 1];
        m[class_set[i + 1]] = class_set[i];
    }
    return m;
}

std::map<int, int> adjacent_one_way_mapping(const std::vector<int>& class_set) {
    std::map<int, int> m;
    for (std::size_t i = 0; i + 1 < class_set.size(); i += 2)
        m[class_set[i]] = class_set[i + 1];
    return m;
}

std::string noise_manifest_json(const std::vector<TaskDataset>& tasks,
                                DatasetId id, std::uint64_t class_order_seed,
                                const BuildOptions& opt,
                                const std::vector<NoiseSpec>& specs) {
    nlohmann::json j;
    j["dataset"] = dataset_name(id);
    j["num_tasks"] = tasks.size();
    j["class_order_seed"] = class_order_seed;
    j["data_seed"] = opt.data_seed;
    j["valid_fraction"] = opt.valid_fraction;
    j["tasks"] = nlohmann::json::array();
    for (std::size_t t = 0; t < tasks.size(); ++t) {
        const auto& tk = tasks[t];
        nlohmann::json jt;
        jt["task_id"] = tk.task_id;
        jt["class_set"] = tk.class_set;
        jt["train_size"] = tk.train.size();
        jt["valid_size"] = tk.valid.size();
        jt["test_size"] = tk.test.size();
        jt["noise_rate"] = tk.noise_rate;
        std::map<std::string, int> flipped;
        int total = 0;
        for (const auto& ex : tk.train)
            if (ex.noisy) {
                ++flipped[std::to_string(ex.true_label)];
                ++total;
            }
        jt["flipped_per_class"] = flipped;
        jt["total_flipped"] = total;
        if (t < specs.size()) {
            std::map<std::string, int> mapping;
            for (const auto& [s, tg] : specs[t].mapping)
                mapping[std::to_string(s)] = tg;
            jt["noise_spec"] = {{"rate", specs[t].rate},
                                {"seed", specs[t].seed},
                                {"mapping", mapping}};
        }
        j["tasks"].push_back(jt);
    }
    return j.dump(2);
}

}  // namespace eraser::task
