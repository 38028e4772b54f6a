// Command-line entry point for the continual-learning experiment harness.
//
//   eraser run <config.json> [--set key.sub=value ...]
//   eraser preview-noise <config.json> [--set ...]
//   eraser eval <checkpoint> <task_id>
//   eraser report <results_dir>
//   eraser compare <dirA> <dirB>
//
// Exit codes: 0 success, 2 configuration/usage error, 3 training failure
// (the failed run rolls back to its last pre-task checkpoint).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "eraser/autograd.hpp"
#include "eraser/backbone.hpp"
#include "eraser/checkpoint.hpp"
#include "eraser/config.hpp"
#include "eraser/rng.hpp"
#include "eraser/runner.hpp"
#include "eraser/taskstream.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace eraser;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitTraining = 3;

cfg::ExperimentConfig load_with_overrides(const std::string& path,
                                          const std::vector<std::string>& sets) {
    std::ifstream in(path);
    if (!in) throw std::invalid_argument("cannot open config file: " + path);
    json j = json::parse(in);
    for (const std::string& s : sets) cfg::apply_override(j, s);
    cfg::ExperimentConfig c = cfg::config_from_json(j);
    cfg::validate(c);
    return c;
}

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::invalid_argument("cannot open " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

void write_file(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::invalid_argument("cannot write " + path);
    out << text;
}

// ---------------------------------------------------------------- run ------

int cmd_run(const std::string& config_path, const std::vector<std::string>& sets) {
    cfg::ExperimentConfig config = load_with_overrides(config_path, sets);
    std::cerr << "config " << cfg::config_hash(config) << ": " << config.dataset
              << ", " << config.num_tasks << " tasks, " << config.run_seeds.size()
              << " seed(s)\n";

    run::ResultsBundle bundle;
    try {
        bundle = run::run_sequence(config);
    } catch (const std::exception& e) {
        // run_sequence only throws before or after training (data loading,
        // artifact writes); per-task training failures are recorded in the
        // bundle instead
        std::cerr << "error: " << e.what() << "\n";
        return kExitConfig;
    }

    for (const auto& r : bundle.runs) {
        std::cerr << "seed " << r.run_seed << ": "
                  << (r.complete ? "complete" : "FAILED (" + r.failure + ")");
        if (!r.directory.empty()) std::cerr << " -> " << r.directory;
        std::cerr << "\n";
    }
    std::cout << run::bundle_json(bundle) << "\n";
    return bundle.complete ? kExitOk : kExitTraining;
}

// ------------------------------------------------------- preview-noise -----

int cmd_preview_noise(const std::string& config_path,
                      const std::vector<std::string>& sets) {
    cfg::ExperimentConfig config = load_with_overrides(config_path, sets);
    const task::DatasetId id = task::parse_dataset_id(config.dataset);

    json out = json::array();
    for (std::uint64_t seed : config.run_seeds) {
        run::PreparedData prepared = run::prepare_data(config, seed);
        json entry;
        entry["run_seed"] = seed;
        entry["manifest"] = json::parse(task::noise_manifest_json(
            prepared.tasks, id, prepared.class_order_seed, prepared.options,
            prepared.noise_specs));
        out.push_back(std::move(entry));
    }
    std::cout << out.dump(2) << "\n";
    return kExitOk;
}

// --------------------------------------------------------------- eval ------

int cmd_eval(const std::string& ckpt_path, int task_id) {
    ckpt::LoadedCheckpoint loaded = ckpt::load_checkpoint(ckpt_path);
    if (!loaded.model->has_task(task_id))
        throw std::invalid_argument("checkpoint has no head for task " +
                                    std::to_string(task_id));

    cfg::ExperimentConfig config = cfg::config_from_json(loaded.config);
    run::PreparedData prepared = run::prepare_data(config, loaded.run_seed);
    const auto it = std::find_if(
        prepared.tasks.begin(), prepared.tasks.end(),
        [&](const task::TaskDataset& t) { return t.task_id == task_id; });
    if (it == prepared.tasks.end())
        throw std::invalid_argument("task " + std::to_string(task_id) +
                                    " not in the configured sequence");

    const double acc = run::test_accuracy(*loaded.model, *it);
    std::cout << std::fixed << std::setprecision(4);
    std::cout << "checkpoint: " << ckpt_path << "\n"
              << "config " << loaded.config_hash << ", run seed "
              << loaded.run_seed << ", completed tasks "
              << loaded.completed_tasks << "\n"
              << "task " << task_id << " test accuracy: " << acc << "% ("
              << it->test.size() << " examples)\n";
    return kExitOk;
}

// ------------------------------------------------------------- report ------

struct DensityRow {
    int index = 0;
    double score = 0.0;
    int selected = 0;
    int noisy = 0;
};

std::vector<DensityRow> parse_density_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::invalid_argument("cannot open " + path);
    std::vector<DensityRow> rows;
    std::string line;
    std::getline(in, line);  // header
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        DensityRow r;
        char comma = 0;
        std::istringstream cells(line);
        cells >> r.index >> comma >> r.score >> comma >> r.selected >> comma >>
            r.noisy;
        if (!cells) throw std::invalid_argument("malformed row in " + path);
        rows.push_back(r);
    }
    return rows;
}

std::string histogram_csv(const std::vector<DensityRow>& rows, int bins) {
    double lo = rows.front().score, hi = rows.front().score;
    for (const auto& r : rows) {
        lo = std::min(lo, r.score);
        hi = std::max(hi, r.score);
    }
    if (hi <= lo) hi = lo + 1.0;
    const double width = (hi - lo) / bins;

    std::vector<int> all(bins, 0), selected(bins, 0), noisy(bins, 0);
    for (const auto& r : rows) {
        int b = static_cast<int>((r.score - lo) / width);
        b = std::clamp(b, 0, bins - 1);
        ++all[b];
        if (r.selected) ++selected[b];
        if (r.noisy) ++noisy[b];
    }

    std::ostringstream out;
    out.precision(17);
    out << "bin_lo,bin_hi,count,count_selected,count_noisy\n";
    for (int b = 0; b < bins; ++b)
        out << lo + b * width << ',' << lo + (b + 1) * width << ',' << all[b]
            << ',' << selected[b] << ',' << noisy[b] << '\n';
    return out.str();
}

// Top-2 principal directions by power iteration with deflation; the feature
// matrix is small (n x d with d <= a few hundred), so the dense d x d
// covariance is cheap. Deterministic: the start vectors come from a fixed
// seed.
struct Projection {
    std::vector<double> mean, v1, v2;
};

Projection fit_projection(const std::vector<std::vector<double>>& feats) {
    const std::size_t n = feats.size(), d = feats.front().size();
    Projection p;
    p.mean.assign(d, 0.0);
    for (const auto& f : feats)
        for (std::size_t j = 0; j < d; ++j) p.mean[j] += f[j];
    for (double& m : p.mean) m /= static_cast<double>(n);

    std::vector<double> cov(d * d, 0.0);
    for (const auto& f : feats)
        for (std::size_t a = 0; a < d; ++a)
            for (std::size_t b = 0; b < d; ++b)
                cov[a * d + b] += (f[a] - p.mean[a]) * (f[b] - p.mean[b]);
    for (double& c : cov) c /= static_cast<double>(n);

    Rng rng(0x9E3779B97F4A7C15ULL);
    auto top_eigvec = [&]() {
        std::vector<double> v(d), w(d);
        for (double& x : v) x = rng.normal();
        for (int iter = 0; iter < 100; ++iter) {
            for (std::size_t a = 0; a < d; ++a) {
                double s = 0;
                for (std::size_t b = 0; b < d; ++b) s += cov[a * d + b] * v[b];
                w[a] = s;
            }
            double norm = 0;
            for (double x : w) norm += x * x;
            norm = std::sqrt(norm);
            if (norm < 1e-30) break;  // degenerate covariance: keep last v
            for (std::size_t a = 0; a < d; ++a) v[a] = w[a] / norm;
        }
        return v;
    };
    p.v1 = top_eigvec();

    double lambda1 = 0;  // Rayleigh quotient of v1 (v1 is unit length)
    for (std::size_t a = 0; a < d; ++a) {
        double s = 0;
        for (std::size_t b = 0; b < d; ++b) s += cov[a * d + b] * p.v1[b];
        lambda1 += p.v1[a] * s;
    }
    for (std::size_t a = 0; a < d; ++a)
        for (std::size_t b = 0; b < d; ++b)
            cov[a * d + b] -= lambda1 * p.v1[a] * p.v1[b];
    p.v2 = top_eigvec();
    return p;
}

int cmd_report(const std::string& dir) {
    if (!fs::is_directory(dir))
        throw std::invalid_argument("not a results directory: " + dir);
    const std::string report_dir = dir + "/report";
    fs::create_directories(report_dir);

    // ---- metric table -----------------------------------------------------
    bool have_any = false;
    if (fs::exists(dir + "/summary.json")) {
        have_any = true;
        json s = json::parse(read_file(dir + "/summary.json"));
        std::cout << std::fixed << std::setprecision(2);
        std::cout << "run " << s.value("config_hash", std::string("?"))
                  << " seed " << s.value("seed", 0) << "\n\n";
        std::cout << "  metric        value\n"
                  << "  ------------  -------\n";
        std::cout << "  A1 (learn)    " << std::setw(7) << s["a1"].get<double>() << "\n";
        std::cout << "  A2 (retain)   " << std::setw(7) << s["a2"].get<double>() << "\n";
        std::cout << "  forgetting    " << std::setw(7) << s["forgetting"].get<double>() << "\n";
        std::cout << "  score S       " << std::setw(7) << s["score"].get<double>() << "\n\n";
    }
    if (fs::exists(dir + "/matrix.csv")) {
        have_any = true;
        std::cout << "accuracy matrix (" << dir << "/matrix.csv):\n"
                  << read_file(dir + "/matrix.csv") << "\n";
    }

    // ---- density histograms -----------------------------------------------
    for (int t = 1; t < 1000; ++t) {
        const std::string src = dir + "/density_task" + std::to_string(t) + ".csv";
        if (!fs::exists(src)) break;
        have_any = true;
        const auto rows = parse_density_csv(src);
        const std::string dst =
            report_dir + "/density_hist_task" + std::to_string(t) + ".csv";
        write_file(dst, histogram_csv(rows, 30));
        std::cout << "wrote " << dst << " (" << rows.size() << " samples)\n";
    }

    // ---- 2-D feature projections -------------------------------------------
    const std::string final_ckpt = dir + "/checkpoints/final.ckpt";
    if (fs::exists(final_ckpt)) {
        have_any = true;
        ckpt::LoadedCheckpoint loaded = ckpt::load_checkpoint(final_ckpt);
        cfg::ExperimentConfig config = cfg::config_from_json(loaded.config);
        run::PreparedData prepared = run::prepare_data(config, loaded.run_seed);

        for (const auto& tk : prepared.tasks) {
            if (!loaded.model->has_task(tk.task_id)) continue;
            std::vector<std::vector<double>> feats;
            feats.reserve(tk.train.size());
            {
                ag::NoGradGuard ng;
                constexpr std::size_t kBatch = 256;
                for (std::size_t lo = 0; lo < tk.train.size(); lo += kBatch) {
                    const std::size_t hi = std::min(lo + kBatch, tk.train.size());
                    const std::vector<task::LabeledExample> chunk(
                        tk.train.begin() + lo, tk.train.begin() + hi);
                    const Tensor f =
                        loaded.model->features_b(model::pack_inputs(chunk))->value;
                    const int fd = f.dim(1);
                    for (int r = 0; r < f.dim(0); ++r)
                        feats.emplace_back(f.data() + r * fd,
                                           f.data() + (r + 1) * fd);
                }
            }
            const std::size_t d = feats.front().size();

            std::ostringstream out;
            out.precision(17);
            out << "index,x,y,observed_label,true_label,noisy\n";
            if (d == 2) {
                // features already live in the plane; emit them untouched
                for (std::size_t i = 0; i < feats.size(); ++i)
                    out << i << ',' << feats[i][0] << ',' << feats[i][1] << ','
                        << tk.train[i].observed_label << ','
                        << tk.train[i].true_label << ','
                        << int(tk.train[i].noisy) << '\n';
            } else {
                const Projection p = fit_projection(feats);
                for (std::size_t i = 0; i < feats.size(); ++i) {
                    double x = 0, y = 0;
                    for (std::size_t j = 0; j < d; ++j) {
                        const double c = feats[i][j] - p.mean[j];
                        x += c * p.v1[j];
                        y += c * p.v2[j];
                    }
                    out << i << ',' << x << ',' << y << ','
                        << tk.train[i].observed_label << ','
                        << tk.train[i].true_label << ','
                        << int(tk.train[i].noisy) << '\n';
                }
            }
            const std::string dst = report_dir + "/projection_task" +
                                    std::to_string(tk.task_id) + ".csv";
            write_file(dst, out.str());
            std::cout << "wrote " << dst << " (" << feats.size()
                      << " points, dim " << d << ")\n";
        }
    } else {
        std::cout << "no checkpoints/final.ckpt; skipping feature projections\n";
    }

    if (!have_any)
        throw std::invalid_argument("no run artifacts found in " + dir);
    return kExitOk;
}

// ------------------------------------------------------------ compare ------

int cmd_compare(const std::string& dir_a, const std::string& dir_b) {
    auto load_summary = [](const std::string& dir) {
        const std::string path = dir + "/summary.json";
        if (!fs::exists(path))
            throw std::invalid_argument("no summary.json in " + dir +
                                        " (incomplete run?)");
        return json::parse(read_file(path));
    };
    const json a = load_summary(dir_a), b = load_summary(dir_b);

    std::cout << "A: " << dir_a << " (config "
              << a.value("config_hash", std::string("?")) << ", seed "
              << a.value("seed", 0) << ")\n";
    std::cout << "B: " << dir_b << " (config "
              << b.value("config_hash", std::string("?")) << ", seed "
              << b.value("seed", 0) << ")\n\n";

    std::cout << std::fixed << std::setprecision(2);
    std::cout << "  metric              A        B    B - A\n"
              << "  ------------  -------  -------  -------\n";
    for (const auto& [key, label] :
         std::vector<std::pair<std::string, std::string>>{
             {"a1", "A1 (learn)"},
             {"a2", "A2 (retain)"},
             {"forgetting", "forgetting"},
             {"score", "score S"}}) {
        const double va = a.at(key).get<double>(), vb = b.at(key).get<double>();
        std::cout << "  " << std::left << std::setw(12) << label << std::right
                  << "  " << std::setw(7) << va << "  " << std::setw(7) << vb
                  << "  " << std::setw(7) << vb - va << "\n";
    }
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"continual-learning experiments with flow-based label-error "
                 "identification and erasure"};
    app.require_subcommand(1);

    std::string config_path, ckpt_path, results_dir, dir_a, dir_b;
    std::vector<std::string> sets;
    int task_id = 1;

    auto* run_cmd = app.add_subcommand("run", "train a task sequence");
    run_cmd->add_option("config", config_path, "JSON config file")->required();
    run_cmd->add_option("--set", sets, "override a config key (key.sub=value)");

    auto* noise_cmd = app.add_subcommand(
        "preview-noise", "emit the label-noise manifest without training");
    noise_cmd->add_option("config", config_path, "JSON config file")->required();
    noise_cmd->add_option("--set", sets, "override a config key (key.sub=value)");

    auto* eval_cmd =
        app.add_subcommand("eval", "test accuracy of a checkpointed model");
    eval_cmd->add_option("checkpoint", ckpt_path, "checkpoint file")->required();
    eval_cmd->add_option("task_id", task_id, "1-based task id")->required();

    auto* report_cmd = app.add_subcommand(
        "report", "render metric tables, density histograms and 2-D projections");
    report_cmd->add_option("results_dir", results_dir, "run output directory")
        ->required();

    auto* compare_cmd =
        app.add_subcommand("compare", "paired metric deltas between two runs");
    compare_cmd->add_option("dirA", dir_a, "first run directory")->required();
    compare_cmd->add_option("dirB", dir_b, "second run directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitConfig;
    }

    try {
        if (run_cmd->parsed()) return cmd_run(config_path, sets);
        if (noise_cmd->parsed()) return cmd_preview_noise(config_path, sets);
        if (eval_cmd->parsed()) return cmd_eval(ckpt_path, task_id);
        if (report_cmd->parsed()) return cmd_report(results_dir);
        if (compare_cmd->parsed()) return cmd_compare(dir_a, dir_b);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitConfig;
    }
    return kExitConfig;
}
