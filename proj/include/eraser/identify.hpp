#pragma once
// Error identification: score every training sample's feature density under
// the flow (conditioned on its observed label) and select the low-density
// representative set via a percentile threshold.

#include <string>
#include <vector>

#include "eraser/backbone.hpp"
#include "eraser/flow.hpp"
#include "eraser/taskstream.hpp"

namespace eraser::ident {

struct DensityReport {
    std::vector<double> scores;         // log-densities, dataset order
    double delta = 0.0;                 // selection threshold
    std::vector<int> selected_indices;  // ascending index order
    double percentile = 0.0;
};

// log p(feat_b(x_i) | observed_label_i) for every training sample, computed
// without building gradient graphs; throws naming the first non-finite index
std::vector<double> score_dataset(const model::BackboneModel& model,
                                  const flow::FlowModel& flow,
                                  const task::TaskDataset& task,
                                  int batch_size = 256);

// strict-below-threshold membership (ties excluded)
std::vector<int> indices_below(const std::vector<double>& scores, double delta);

// delta = percentile quantile (linear interpolation on sorted scores);
// selected = strict-below indices, padded by the lowest remaining scores
// (ties broken by index) up to floor(percentile * N)
DensityReport select_representative(const std::vector<double>& scores,
                                    double percentile);

// same rule applied within each observed class, unioned
DensityReport select_representative_per_class(
    const std::vector<double>& scores, const std::vector<int>& observed_labels,
    double percentile);

// per-sample audit table: index, score, selected flag, noisy ground truth
std::string density_report_csv(const DensityReport& report,
                               const task::TaskDataset& task);

}  // namespace eraser::ident
