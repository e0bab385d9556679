#include "ckda/cka.hpp"

#include <cmath>
#include <map>

namespace ckda {

void PrototypeBank::validate() const {
    const int n = static_cast<int>(identity_ids.size());
    if (visible.rank() != 2 || infrared.rank() != 2 || visible.dim(0) != n ||
        infrared.dim(0) != n || visible.dim(1) != infrared.dim(1))
        throw StateError("prototype bank: inconsistent shapes");
    for (const Tensor* t : {&visible, &infrared}) {
        for (int r = 0; r < n; ++r) {
            double norm = 0.0;
            for (int j = 0; j < t->dim(1); ++j) {
                double v = t->at2(r, j);
                if (!std::isfinite(v))
                    throw NumericError("prototype bank: non-finite entry in row " +
                                       std::to_string(r));
                norm += v * v;
            }
            if (norm == 0.0)
                throw NumericError("prototype bank: zero-norm prototype row " +
                                   std::to_string(r));
        }
    }
}

PrototypeBank extract_prototypes(Model& model, const StageDataset& dataset,
                                 const ForwardToggles& toggles, bool use_pre_neck) {
    NoGradGuard ng;
    const int d = model.feature_dim();
    const int n = static_cast<int>(dataset.identity_roster.size());

    struct Acc {
        std::vector<double> sum;
        int count = 0;
    };
    std::map<std::pair<int, Modality>, Acc> acc;
    for (const Sample& s : dataset.train) {
        FeaturePair f = model.encode(s.image, s.modality, toggles);
        const Tensor& feat = use_pre_neck ? f.z_pre : f.z;
        Acc& a = acc[{s.identity, s.modality}];
        if (a.sum.empty()) a.sum.assign(static_cast<size_t>(d), 0.0);
        for (int j = 0; j < d; ++j) a.sum[static_cast<size_t>(j)] += feat[j];
        ++a.count;
    }

    PrototypeBank bank;
    bank.stage = dataset.stage_index;
    bank.visible = Tensor({n, d});
    bank.infrared = Tensor({n, d});
    for (int i = 0; i < n; ++i) {
        const int id = dataset.identity_roster[static_cast<size_t>(i)].identity_id;
        bank.identity_ids.push_back(id);
        for (Modality m : {Modality::visible, Modality::infrared}) {
            auto it = acc.find({id, m});
            if (it == acc.end() || it->second.count == 0)
                throw StateError("extract_prototypes: identity " + std::to_string(id) +
                                 " has no " + modality_name(m) + " training samples");
            Tensor& dst = m == Modality::visible ? bank.visible : bank.infrared;
            for (int j = 0; j < d; ++j)
                dst.at2(i, j) = it->second.sum[static_cast<size_t>(j)] / it->second.count;
        }
    }
    bank.validate();
    return bank;
}

Var affinity(const Var& features, const Tensor& prototypes, double tau) {
    if (tau <= 0.0) throw ConfigError("affinity: tau must be positive");
    const Tensor& fv = features->value;
    if (fv.rank() != 2 || prototypes.rank() != 2 || fv.dim(1) != prototypes.dim(1))
        throw StateError("affinity: feature/prototype dimension mismatch");
    if (prototypes.dim(0) < 1) throw StateError("affinity: empty prototype set");

    for (int r = 0; r < fv.dim(0); ++r) {
        double s = 0.0;
        for (int j = 0; j < fv.dim(1); ++j) s += fv.at2(r, j) * fv.at2(r, j);
        if (s == 0.0) throw NumericError("affinity: zero-norm feature row " + std::to_string(r));
    }
    for (int r = 0; r < prototypes.dim(0); ++r) {
        double s = 0.0;
        for (int j = 0; j < prototypes.dim(1); ++j) s += prototypes.at2(r, j) * prototypes.at2(r, j);
        if (s == 0.0)
            throw NumericError("affinity: zero-norm prototype row " + std::to_string(r));
    }

    Var fn = ag::l2_normalize_rows(features);
    Var pn = ag::l2_normalize_rows(make_const(prototypes));
    Var cos = ag::matmul(fn, pn, false, true);  // (B,N)
    return ag::softmax_last(ag::affine(cos, 1.0 / tau, 0.0));
}

Var relational(const Var& affinity_matrix, double tau) {
    if (tau <= 0.0) throw ConfigError("relational: tau must be positive");
    if (affinity_matrix->value.rank() != 2)
        throw StateError("relational: affinity must be 2-D");
    Var gram = ag::matmul(affinity_matrix, affinity_matrix, false, true);
    return ag::softmax_last(ag::affine(gram, 1.0 / tau, 0.0));
}

Var inter_loss(const Var& y_old_vt, const Var& y_new_vt, const Var& y_old_tv,
               const Var& y_new_tv) {
    return ag::add(ag::kl_rows_mean(y_old_vt, y_new_vt), ag::kl_rows_mean(y_old_tv, y_new_tv));
}

Var intra_loss(const Var& y_old_vv, const Var& y_new_vv, const Var& y_old_tt,
               const Var& y_new_tt) {
    return ag::add(ag::kl_rows_mean(y_old_vv, y_new_vv), ag::kl_rows_mean(y_old_tt, y_new_tt));
}

}  // namespace ckda
