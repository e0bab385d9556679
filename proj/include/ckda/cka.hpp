#pragma once

#include "ckda/model.hpp"

namespace ckda {

// Per-identity, per-modality feature centers from the previous stage's model.
struct PrototypeBank {
    int stage = 0;  // stage whose training data produced the bank
    std::vector<int> identity_ids;
    Tensor visible;   // (N, d_f)
    Tensor infrared;  // (N, d_f)

    void validate() const;  // finite entries, nonzero row norms, aligned ids
};

// Mean post-neck feature per (identity, modality) over the stage's training
// set, computed in eval mode with prompts included per toggles.
PrototypeBank extract_prototypes(Model& model, const StageDataset& dataset,
                                 const ForwardToggles& toggles, bool use_pre_neck = false);

// Row-stochastic temperature-softmax over cosine similarities between feature
// rows and prototype rows.
Var affinity(const Var& features, const Tensor& prototypes, double tau);

// Y = softmax(A A^T / tau), row-wise.
Var relational(const Var& affinity_matrix, double tau);

// KL(Y_old || Y_new) summed over the two direction pairs, row-averaged.
Var inter_loss(const Var& y_old_vt, const Var& y_new_vt, const Var& y_old_tv,
               const Var& y_new_tv);
Var intra_loss(const Var& y_old_vv, const Var& y_new_vv, const Var& y_old_tt,
               const Var& y_new_tt);

}  // namespace ckda
