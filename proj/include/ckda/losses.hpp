#pragma once

#include <optional>

#include "ckda/autograd.hpp"
#include "ckda/synth_data.hpp"

namespace ckda {

struct LossWeights {
    double alpha = 1.0;   // prompt alignment
    double beta = 1.0;    // knowledge alignment
    double mu = 0.5;      // inter/intra balance
    double margin = 0.3;  // triplet margin

    void validate() const;
};

Var ce_loss(const Var& logits, const std::vector<int>& labels);

// Batch-hard mining record, exposed so the hand-checked per-anchor terms are
// directly observable.
struct TripletAnchor {
    int anchor = -1, hardest_pos = -1, hardest_neg = -1;
    double d_ap = 0.0, d_an = 0.0, hinge = 0.0;
};
struct TripletInfo {
    std::vector<TripletAnchor> anchors;
};

// Hardest positive / hardest negative per anchor over Euclidean distances;
// anchors without a positive are skipped, a batch with no usable anchor is an
// error. Mining is global across modalities unless restricted.
Var triplet_loss(const Var& features, const std::vector<int>& labels, double margin,
                 bool within_modality = false, const std::vector<Modality>* modalities = nullptr,
                 TripletInfo* info = nullptr);

// L = L_base + alpha*L_p + beta*(mu*L_inter + (1-mu)*L_intra). Absent
// anti-forgetting terms (stage 1) enter as zero; passing them at stage 1 is a
// state error.
Var total_loss(const Var& l_base, const Var& l_p, const Var& l_inter, const Var& l_intra,
               const LossWeights& weights, int stage);

}  // namespace ckda
