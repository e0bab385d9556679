#include "ckda/losses.hpp"

#include <cmath>

namespace ckda {

void LossWeights::validate() const {
    if (alpha < 0.0) throw ConfigError("loss weight alpha must be >= 0");
    if (beta < 0.0) throw ConfigError("loss weight beta must be >= 0");
    if (mu < 0.0 || mu > 1.0) throw ConfigError("loss weight mu must be in [0,1]");
    if (margin < 0.0) throw ConfigError("triplet margin must be >= 0");
}

Var ce_loss(const Var& logits, const std::vector<int>& labels) {
    return ag::cross_entropy(logits, labels);
}

Var triplet_loss(const Var& features, const std::vector<int>& labels, double margin,
                 bool within_modality, const std::vector<Modality>* modalities,
                 TripletInfo* info) {
    const Tensor& fv = features->value;
    if (fv.rank() != 2) throw StateError("triplet_loss: features must be (B,d)");
    const int bsz = fv.dim(0), d = fv.dim(1);
    if (static_cast<int>(labels.size()) != bsz)
        throw StateError("triplet_loss: label count mismatch");
    if (within_modality && (!modalities || static_cast<int>(modalities->size()) != bsz))
        throw StateError("triplet_loss: within-modality mining needs modality tags");

    // pairwise Euclidean distances, values only; the graph is built from the
    // mined index pairs afterwards
    std::vector<double> dist(static_cast<size_t>(bsz) * bsz, 0.0);
    for (int i = 0; i < bsz; ++i)
        for (int j = i + 1; j < bsz; ++j) {
            double s = 0.0;
            for (int k = 0; k < d; ++k) {
                double diff = fv.at2(i, k) - fv.at2(j, k);
                s += diff * diff;
            }
            double dd = std::sqrt(s);
            dist[static_cast<size_t>(i) * bsz + j] = dd;
            dist[static_cast<size_t>(j) * bsz + i] = dd;
        }

    std::vector<int> anchors, positives, negatives;
    TripletInfo local;
    for (int a = 0; a < bsz; ++a) {
        int best_p = -1, best_n = -1;
        double dp = -1.0, dn = 0.0;
        for (int j = 0; j < bsz; ++j) {
            if (j == a) continue;
            if (within_modality && (*modalities)[static_cast<size_t>(j)] !=
                                       (*modalities)[static_cast<size_t>(a)])
                continue;
            double dd = dist[static_cast<size_t>(a) * bsz + j];
            if (labels[static_cast<size_t>(j)] == labels[static_cast<size_t>(a)]) {
                if (dd > dp) {
                    dp = dd;
                    best_p = j;
                }
            } else {
                if (best_n < 0 || dd < dn) {
                    dn = dd;
                    best_n = j;
                }
            }
        }
        if (best_p < 0 || best_n < 0) continue;  // anchor skipped
        anchors.push_back(a);
        positives.push_back(best_p);
        negatives.push_back(best_n);
        local.anchors.push_back(
            {a, best_p, best_n, dp, dn, std::max(0.0, dp - dn + margin)});
    }
    if (anchors.empty())
        throw StateError("triplet_loss: no anchor has both a positive and a negative");
    if (info) *info = std::move(local);

    Var fa = ag::gather_rows(features, anchors);
    Var fp = ag::gather_rows(features, positives);
    Var fn = ag::gather_rows(features, negatives);
    Var d_ap = ag::rows_l2_dist(fa, fp);
    Var d_an = ag::rows_l2_dist(fa, fn);
    Var hinge = ag::relu(ag::affine(ag::sub(d_ap, d_an), 1.0, margin));
    return ag::mean_all(hinge);
}

Var total_loss(const Var& l_base, const Var& l_p, const Var& l_inter, const Var& l_intra,
               const LossWeights& weights, int stage) {
    weights.validate();
    if (!l_base) throw StateError("total_loss: base loss is required");
    if (stage < 1) throw StateError("total_loss: stage must be >= 1");
    if (stage == 1 && (l_p || l_inter || l_intra))
        throw StateError("total_loss: anti-forgetting terms are undefined at stage 1");

    Var total = l_base;
    if (l_p) total = ag::add(total, ag::affine(l_p, weights.alpha, 0.0));
    if (l_inter) total = ag::add(total, ag::affine(l_inter, weights.beta * weights.mu, 0.0));
    if (l_intra)
        total = ag::add(total, ag::affine(l_intra, weights.beta * (1.0 - weights.mu), 0.0));
    return total;
}

}  // namespace ckda
