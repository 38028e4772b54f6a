#include "eraser/identify.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <sstream>
#include <stdexcept>

namespace eraser::ident {

namespace {

double quantile_linear(std::vector<double> sorted, double p) {
    const std::size_t n = sorted.size();
    const double h = p * static_cast<double>(n - 1);
    const std::size_t lo = static_cast<std::size_t>(h);
    if (lo + 1 >= n) return sorted[n - 1];
    const double frac = h - static_cast<double>(lo);
    return sorted[lo] + frac * (sorted[lo + 1] - sorted[lo]);
}

// selection on an index subset sharing one score array
std::vector<int> select_within(const std::vector<double>& scores,
                               const std::vector<int>& candidates, double percentile,
                               double& delta_out) {
    std::vector<double> values;
    values.reserve(candidates.size());
    for (int i : candidates) values.push_back(scores[i]);
    std::sort(values.begin(), values.end());
    const double delta = quantile_linear(values, percentile);
    delta_out = delta;

    std::vector<int> order = candidates;  // rank by (score, index)
    std::sort(order.begin(), order.end(), [&](int a, int b) {
        if (scores[a] != scores[b]) return scores[a] < scores[b];
        return a < b;
    });
    std::size_t strict = 0;
    while (strict < order.size() && scores[order[strict]] < delta) ++strict;
    const std::size_t target = static_cast<std::size_t>(
        percentile * static_cast<double>(candidates.size()));
    const std::size_t keep = std::max(strict, target);

    std::vector<int> selected(order.begin(), order.begin() + keep);
    std::sort(selected.begin(), selected.end());
    return selected;
}

}  // namespace

std::vector<double> score_dataset(const model::BackboneModel& model,
                                  const flow::FlowModel& flow,
                                  const task::TaskDataset& task, int batch_size) {
    const int n = static_cast<int>(task.train.size());
    if (n == 0) throw std::invalid_argument("score_dataset: empty training split");
    std::vector<double> scores(n);
    ag::NoGradGuard guard;
    for (int start = 0; start < n; start += batch_size) {
        const int bs = std::min(batch_size, n - start);
        std::vector<int> indices(bs);
        std::vector<int> labels(bs);
        for (int i = 0; i < bs; ++i) {
            indices[i] = start + i;
            labels[i] = task.train[start + i].observed_label;
        }
        Tensor inputs = model::pack_inputs(task.train, indices);
        Tensor feats = model.features_b(inputs)->value;
        Tensor lp = flow.log_prob_values(feats, labels);
        for (int i = 0; i < bs; ++i) {
            if (!std::isfinite(lp[i]))
                throw std::runtime_error("score_dataset: non-finite score at sample index " +
                                         std::to_string(start + i));
            scores[start + i] = lp[i];
        }
    }
    return scores;
}

std::vector<int> indices_below(const std::vector<double>& scores, double delta) {
    std::vector<int> out;
    for (int i = 0; i < static_cast<int>(scores.size()); ++i)
        if (scores[i] < delta) out.push_back(i);
    return out;
}

DensityReport select_representative(const std::vector<double>& scores,
                                    double percentile) {
    if (scores.empty())
        throw std::invalid_argument("select_representative: empty scores");
    if (!(percentile > 0.0 && percentile < 0.5))
        throw std::invalid_argument(
            "select_representative: percentile must lie in (0, 0.5)");
    std::vector<int> all(scores.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = static_cast<int>(i);

    DensityReport report;
    report.scores = scores;
    report.percentile = percentile;
    report.selected_indices = select_within(scores, all, percentile, report.delta);
    return report;
}

DensityReport select_representative_per_class(
    const std::vector<double>& scores, const std::vector<int>& observed_labels,
    double percentile) {
    if (scores.empty())
        throw std::invalid_argument("select_representative_per_class: empty scores");
    if (scores.size() != observed_labels.size())
        throw std::invalid_argument(
            "select_representative_per_class: scores/labels size mismatch");
    if (!(percentile > 0.0 && percentile < 0.5))
        throw std::invalid_argument(
            "select_representative_per_class: percentile must lie in (0, 0.5)");

    std::map<int, std::vector<int>> by_class;
    for (std::size_t i = 0; i < scores.size(); ++i)
        by_class[observed_labels[i]].push_back(static_cast<int>(i));

    DensityReport report;
    report.scores = scores;
    report.percentile = percentile;
    double worst_delta = std::numeric_limits<double>::infinity();
    for (const auto& [cls, candidates] : by_class) {
        double delta = 0.0;
        std::vector<int> sel = select_within(scores, candidates, percentile, delta);
        report.selected_indices.insert(report.selected_indices.end(), sel.begin(),
                                       sel.end());
        worst_delta = std::min(worst_delta, delta);
    }
    report.delta = worst_delta;  // most conservative per-class threshold
    std::sort(report.selected_indices.begin(), report.selected_indices.end());
    return report;
}

std::string density_report_csv(const DensityReport& report,
                               const task::TaskDataset& task) {
    std::ostringstream out;
    out << "index,score,selected,noisy\n";
    std::vector<char> mark(report.scores.size(), 0);
    for (int i : report.selected_indices) mark[i] = 1;
    out.precision(17);
    for (std::size_t i = 0; i < report.scores.size(); ++i) {
        const bool noisy = i < task.train.size() && task.train[i].noisy;
        out << i << ',' << report.scores[i] << ',' << int(mark[i]) << ','
            << int(noisy) << '\n';
    }
    return out.str();
}

}  // namespace eraser::ident
