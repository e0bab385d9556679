#include "ckda/eval.hpp"

#include <algorithm>
#include <cmath>

namespace ckda {

MetricsMatrix MetricsMatrix::empty(int stages) {
    MetricsMatrix m;
    m.stages = stages;
    m.a.resize(static_cast<size_t>(stages));
    for (int t = 0; t < stages; ++t) m.a[static_cast<size_t>(t)].resize(static_cast<size_t>(t) + 1);
    return m;
}

const MetricRecord& MetricsMatrix::at(int t, int i) const {
    if (t < 1 || t > stages || i < 1 || i > t)
        throw StateError("metrics matrix: entry (" + std::to_string(t) + "," + std::to_string(i) +
                         ") is undefined");
    return a[static_cast<size_t>(t - 1)][static_cast<size_t>(i - 1)];
}

void MetricsMatrix::set(int t, int i, MetricRecord rec) {
    if (t < 1 || t > stages || i < 1 || i > t)
        throw StateError("metrics matrix: entry (" + std::to_string(t) + "," + std::to_string(i) +
                         ") is undefined");
    a[static_cast<size_t>(t - 1)][static_cast<size_t>(i - 1)] = rec;
}

std::vector<double> MetricsMatrix::final_row(bool use_map) const {
    std::vector<double> row;
    for (int i = 1; i <= stages; ++i) {
        const MetricRecord& r = at(stages, i);
        row.push_back(use_map ? r.map : r.r1);
    }
    return row;
}

double MetricsMatrix::final_average(bool use_map) const {
    double s = 0.0;
    auto row = final_row(use_map);
    for (double v : row) s += v;
    return s / static_cast<double>(row.size());
}

std::vector<int> rank_gallery(const Tensor& query_feature, const Tensor& gallery_features) {
    if (query_feature.rank() != 1 || gallery_features.rank() != 2 ||
        gallery_features.dim(1) != query_feature.dim(0))
        throw StateError("rank_gallery: shape mismatch");
    const int g = gallery_features.dim(0);
    if (g < 1) throw StateError("rank_gallery: empty gallery");
    const int d = query_feature.dim(0);

    double qn = 0.0;
    for (int j = 0; j < d; ++j) qn += query_feature[j] * query_feature[j];
    if (qn == 0.0 || !std::isfinite(qn)) throw NumericError("rank_gallery: bad query norm");
    qn = std::sqrt(qn);

    std::vector<std::pair<double, int>> scored(static_cast<size_t>(g));
    for (int i = 0; i < g; ++i) {
        double dot = 0.0, gn = 0.0;
        for (int j = 0; j < d; ++j) {
            dot += gallery_features.at2(i, j) * query_feature[j];
            gn += gallery_features.at2(i, j) * gallery_features.at2(i, j);
        }
        if (gn == 0.0 || !std::isfinite(gn))
            throw NumericError("rank_gallery: bad gallery norm at row " + std::to_string(i));
        scored[static_cast<size_t>(i)] = {dot / (qn * std::sqrt(gn)), i};
    }
    std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first > b.first;
        return a.second < b.second;
    });
    std::vector<int> order(static_cast<size_t>(g));
    for (int i = 0; i < g; ++i) order[static_cast<size_t>(i)] = scored[static_cast<size_t>(i)].second;
    return order;
}

namespace {

double average_precision(const std::vector<int>& ranking, const std::vector<char>& relevant) {
    int hits = 0;
    double ap = 0.0;
    for (size_t k = 0; k < ranking.size(); ++k) {
        if (relevant[static_cast<size_t>(ranking[k])]) {
            ++hits;
            ap += static_cast<double>(hits) / static_cast<double>(k + 1);
        }
    }
    if (hits == 0) throw StateError("average_precision: query has no relevant gallery item");
    return ap / hits;
}

}  // namespace

double mean_ap(const std::vector<std::vector<int>>& rankings,
               const std::vector<std::vector<char>>& relevant) {
    if (rankings.empty() || rankings.size() != relevant.size())
        throw StateError("mean_ap: ranking/relevance count mismatch");
    double s = 0.0;
    for (size_t q = 0; q < rankings.size(); ++q) s += average_precision(rankings[q], relevant[q]);
    return s / static_cast<double>(rankings.size());
}

double rank1(const std::vector<std::vector<int>>& rankings,
             const std::vector<std::vector<char>>& relevant) {
    if (rankings.empty() || rankings.size() != relevant.size())
        throw StateError("rank1: ranking/relevance count mismatch");
    int hit = 0;
    for (size_t q = 0; q < rankings.size(); ++q) {
        bool any = false;
        for (char r : relevant[q]) any |= (r != 0);
        if (!any) throw StateError("rank1: query has no relevant gallery item");
        if (relevant[q][static_cast<size_t>(rankings[q][0])]) ++hit;
    }
    return static_cast<double>(hit) / static_cast<double>(rankings.size());
}

double average_forgetting(const MetricsMatrix& m, MetricSelector sel, bool from_max) {
    if (m.stages < 2) throw StateError("average_forgetting: undefined for a single stage");
    auto pick = [sel](const MetricRecord& r) { return sel == MetricSelector::map ? r.map : r.r1; };
    double s = 0.0;
    for (int i = 1; i < m.stages; ++i) {
        double ref;
        if (from_max) {
            ref = pick(m.at(i, i));
            for (int t = i; t <= m.stages; ++t) ref = std::max(ref, pick(m.at(t, i)));
        } else {
            ref = pick(m.at(i, i));
        }
        s += ref - pick(m.at(m.stages, i));
    }
    return s / static_cast<double>(m.stages - 1);
}

MetricRecord evaluate_retrieval(const Tensor& query_features, const std::vector<int>& query_ids,
                                const Tensor& gallery_features,
                                const std::vector<int>& gallery_ids) {
    const int q = query_features.dim(0);
    const int g = gallery_features.dim(0);
    if (static_cast<int>(query_ids.size()) != q || static_cast<int>(gallery_ids.size()) != g)
        throw StateError("evaluate_retrieval: id count mismatch");
    std::vector<std::vector<int>> rankings;
    std::vector<std::vector<char>> relevant;
    const int d = query_features.dim(1);
    for (int i = 0; i < q; ++i) {
        Tensor qf({d});
        for (int j = 0; j < d; ++j) qf[j] = query_features.at2(i, j);
        rankings.push_back(rank_gallery(qf, gallery_features));
        std::vector<char> rel(static_cast<size_t>(g), 0);
        for (int k = 0; k < g; ++k)
            rel[static_cast<size_t>(k)] =
                gallery_ids[static_cast<size_t>(k)] == query_ids[static_cast<size_t>(i)] ? 1 : 0;
        relevant.push_back(std::move(rel));
    }
    return {mean_ap(rankings, relevant), rank1(rankings, relevant)};
}

}  // namespace ckda
