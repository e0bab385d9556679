#pragma once

#include <vector>

#include "ckda/tensor.hpp"

namespace ckda {

struct MetricRecord {
    double map = 0.0;
    double r1 = 0.0;
};

// a[t][i]: performance on stage i+1 test data of the model after training
// stage t+1; defined only for i <= t.
struct MetricsMatrix {
    int stages = 0;
    std::vector<std::vector<MetricRecord>> a;

    static MetricsMatrix empty(int stages);
    const MetricRecord& at(int t, int i) const;  // 1-based stage indices
    void set(int t, int i, MetricRecord rec);
    std::vector<double> final_row(bool use_map) const;
    double final_average(bool use_map) const;
};

// Gallery indices by descending cosine similarity; ties broken by ascending
// gallery index.
std::vector<int> rank_gallery(const Tensor& query_feature, const Tensor& gallery_features);

double mean_ap(const std::vector<std::vector<int>>& rankings,
               const std::vector<std::vector<char>>& relevant);
double rank1(const std::vector<std::vector<int>>& rankings,
             const std::vector<std::vector<char>>& relevant);

enum class MetricSelector { map, r1 };

// Drop from the just-after-training diagonal to the final row, averaged over
// non-final stages. The drop-from-max variant is kept for comparison.
double average_forgetting(const MetricsMatrix& m, MetricSelector sel, bool from_max = false);

// Full retrieval evaluation of one query/gallery pair.
MetricRecord evaluate_retrieval(const Tensor& query_features, const std::vector<int>& query_ids,
                                const Tensor& gallery_features,
                                const std::vector<int>& gallery_ids);

}  // namespace ckda
