#include "eraser/evaluation.hpp"

#include <cmath>
#include <iomanip>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace eraser::evaluation {

AccuracyMatrix::AccuracyMatrix(int task_count) : n_(task_count) {
    if (task_count < 1)
        throw std::invalid_argument("AccuracyMatrix: task_count must be >= 1");
    values_.assign(static_cast<std::size_t>(n_) * n_, 0.0);
    written_.assign(values_.size(), 0);
}

int AccuracyMatrix::index_checked(int k, int j) const {
    if (k < 1 || k > n_ || j < 1 || j > n_)
        throw std::out_of_range("AccuracyMatrix: task index out of range");
    if (j < k)
        throw std::invalid_argument(
            "AccuracyMatrix: cell (" + std::to_string(k) + "," +
            std::to_string(j) + ") lies above the diagonal");
    return (k - 1) * n_ + (j - 1);
}

void AccuracyMatrix::record(int k, int j, double value) {
    const int idx = index_checked(k, j);
    if (!(value >= 0.0 && value <= 100.0))
        throw std::invalid_argument("AccuracyMatrix: accuracy must be in [0,100]");
    if (written_[idx])
        throw std::logic_error("AccuracyMatrix: cell (" + std::to_string(k) +
                               "," + std::to_string(j) + ") already written");
    values_[idx] = value;
    written_[idx] = 1;
}

bool AccuracyMatrix::has(int k, int j) const {
    return written_[index_checked(k, j)] != 0;
}

double AccuracyMatrix::at(int k, int j) const {
    const int idx = index_checked(k, j);
    if (!written_[idx])
        throw std::logic_error("AccuracyMatrix: cell (" + std::to_string(k) +
                               "," + std::to_string(j) + ") was never written");
    return values_[idx];
}

bool AccuracyMatrix::complete() const {
    for (int k = 1; k <= n_; ++k)
        for (int j = k; j <= n_; ++j)
            if (!written_[(k - 1) * n_ + (j - 1)]) return false;
    return true;
}

double per_task_forgetting(const AccuracyMatrix& matrix, int k) {
    if (!matrix.complete())
        throw std::logic_error("per_task_forgetting: matrix is incomplete");
    const int n = matrix.task_count();
    if (k < 1 || k > n)
        throw std::out_of_range("per_task_forgetting: task index out of range");
    if (k == n) return 0.0;  // just-learned task has nothing to forget
    const double final_acc = matrix.at(k, n);
    double total = 0.0;
    for (int i = k; i <= n; ++i) total += matrix.at(k, i) - final_acc;
    return total / static_cast<double>(n - k);
}

double overall_score(double a1, double a2, int task_count, double forgetting) {
    const double denom = a1 + a2 * task_count + forgetting;
    if (denom == 0.0) return 0.0;  // only when every accuracy is zero
    return a1 * a2 * task_count / denom;
}

MetricsSummary compute_summary(const AccuracyMatrix& matrix) {
    if (!matrix.complete())
        throw std::logic_error("compute_summary: matrix is incomplete");
    const int n = matrix.task_count();
    MetricsSummary s;
    for (int k = 1; k <= n; ++k) {
        s.a1 += matrix.at(k, k);
        s.a2 += matrix.at(k, n);
        s.per_task.push_back(per_task_forgetting(matrix, k));
        s.forgetting += s.per_task.back();
    }
    s.a1 /= n;
    s.a2 /= n;
    s.forgetting /= n;
    s.score = overall_score(s.a1, s.a2, n, s.forgetting);
    return s;
}

std::string matrix_csv(const AccuracyMatrix& matrix) {
    std::ostringstream out;
    out << std::setprecision(17);
    out << "task";
    for (int j = 1; j <= matrix.task_count(); ++j) out << ",after_" << j;
    out << "\n";
    for (int k = 1; k <= matrix.task_count(); ++k) {
        out << k;
        for (int j = 1; j <= matrix.task_count(); ++j) {
            out << ",";
            if (j >= k && matrix.has(k, j)) out << matrix.at(k, j);
        }
        out << "\n";
    }
    return out.str();
}

std::string summary_json(const MetricsSummary& summary, std::uint64_t seed,
                         const std::string& config_hash) {
    nlohmann::json j;
    j["a1"] = summary.a1;
    j["a2"] = summary.a2;
    j["forgetting"] = summary.forgetting;
    j["score"] = summary.score;
    j["per_task_forgetting"] = summary.per_task;
    j["seed"] = seed;
    j["config_hash"] = config_hash;
    return j.dump(2);
}

}  // namespace eraser::evaluation
