#include "ckda/layers.hpp"

#include <cmath>

namespace ckda {

void LinearLayer::init(int in_dim, int out_dim, Rng& rng, double weight_std) {
    in = in_dim;
    out = out_dim;
    Tensor wt({in_dim, out_dim});
    for (int64_t i = 0; i < wt.numel(); ++i) wt[i] = weight_std * rng.normal();
    w = make_leaf(std::move(wt));
    b = make_leaf(Tensor({out_dim}));
}

void LinearLayer::init_zero(int in_dim, int out_dim) {
    in = in_dim;
    out = out_dim;
    w = make_leaf(Tensor({in_dim, out_dim}));
    b = make_leaf(Tensor({out_dim}));
}

void LinearLayer::collect(const std::string& prefix, ParamMap& map) const {
    map.add(prefix + ".w", w);
    map.add(prefix + ".b", b);
}

void LayerNormLayer::init(int dim) {
    gamma = make_leaf(Tensor({dim}, 1.0));
    beta = make_leaf(Tensor({dim}));
}

void LayerNormLayer::collect(const std::string& prefix, ParamMap& map) const {
    map.add(prefix + ".gamma", gamma);
    map.add(prefix + ".beta", beta);
}

void BatchNormLayer::init(int dim) {
    gamma = make_leaf(Tensor({dim}, 1.0));
    beta = make_leaf(Tensor({dim}));
    running_mean = Tensor({dim});
    running_var = Tensor({dim}, 1.0);
}

void BatchNormLayer::collect(const std::string& prefix, ParamMap& map) {
    map.add(prefix + ".gamma", gamma);
    map.add(prefix + ".beta", beta);
    map.add_buffer(prefix + ".running_mean", &running_mean);
    map.add_buffer(prefix + ".running_var", &running_var);
}

AdamW::AdamW(std::vector<Var> params, double weight_decay, double beta1, double beta2, double eps)
    : params_(std::move(params)),
      weight_decay_(weight_decay),
      beta1_(beta1),
      beta2_(beta2),
      eps_(eps) {
    for (const Var& p : params_) {
        m_.emplace_back(p->value.shape());
        v_.emplace_back(p->value.shape());
    }
}

void AdamW::zero_grad() {
    for (Var& p : params_) p->grad = Tensor();
}

void AdamW::step(double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (size_t i = 0; i < params_.size(); ++i) {
        Node& p = *params_[i];
        if (p.grad.empty()) continue;  // no gradient reached this parameter
        Tensor& m = m_[i];
        Tensor& v = v_[i];
        for (int64_t j = 0; j < p.value.numel(); ++j) {
            double g = p.grad[j];
            m[j] = beta1_ * m[j] + (1.0 - beta1_) * g;
            v[j] = beta2_ * v[j] + (1.0 - beta2_) * g * g;
            double mhat = m[j] / bc1;
            double vhat = v[j] / bc2;
            p.value[j] -= lr * (mhat / (std::sqrt(vhat) + eps_) + weight_decay_ * p.value[j]);
        }
    }
}

}  // namespace ckda
