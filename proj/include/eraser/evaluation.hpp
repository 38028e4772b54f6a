#pragma once
// Accuracy-matrix bookkeeping and the summary metrics derived from it:
// average accuracy right after each task (a1), average accuracy at the end of
// the sequence (a2), mean forgetting (f), and the combined score (s).

#include <cstdint>
#include <string>
#include <vector>

namespace eraser::evaluation {

// Lower-triangular, set-once store of test accuracies: cell (k, j) holds the
// percent accuracy of task k's test set measured after training task j.
// Tasks are 1-indexed and j >= k.
class AccuracyMatrix {
public:
    explicit AccuracyMatrix(int task_count);

    int task_count() const { return n_; }

    // Writes are validated (bounds, range [0, 100]) and permanent: a second
    // write to the same cell throws.
    void record(int k, int j, double value);
    bool has(int k, int j) const;
    double at(int k, int j) const;  // throws if the cell was never written
    bool complete() const;

private:
    int index_checked(int k, int j) const;

    int n_ = 0;
    std::vector<double> values_;
    std::vector<char> written_;
};

struct MetricsSummary {
    double a1 = 0.0;  // mean of the diagonal a[k][k]
    double a2 = 0.0;  // mean of the final column a[k][n]
    double forgetting = 0.0;  // mean of the per-task forgetting values
    double score = 0.0;       // a1*a2*n / (a1 + a2*n + forgetting)
    std::vector<double> per_task;  // forgetting per task, per_task[k-1]
};

// Mean drop of task k's accuracy relative to its final value, averaged over
// the checkpoints i = k..n; zero by convention for the last task.
double per_task_forgetting(const AccuracyMatrix& matrix, int k);

// The combined score on percent scale. Pure formula so it can be fed
// published (a1, a2, f) triples directly.
double overall_score(double a1, double a2, int task_count, double forgetting);

MetricsSummary compute_summary(const AccuracyMatrix& matrix);

// CSV with one row per task and one "after_<j>" column per checkpoint;
// cells below the diagonal are left empty.
std::string matrix_csv(const AccuracyMatrix& matrix);

// JSON object with the four scalars, the per-task forgetting list, and run
// metadata for provenance.
std::string summary_json(const MetricsSummary& summary, std::uint64_t seed,
                         const std::string& config_hash);

}  // namespace eraser::evaluation
