#pragma once

#include <string>
#include <vector>

#include "ckda/autograd.hpp"

namespace ckda {

// Named views over a model's trainable parameters and persistent state
// (batch-norm running statistics). Used by the optimizer, EMA merge,
// snapshotting and checkpoint serialization.
struct ParamRef {
    std::string name;
    Var var;
};
struct BufferRef {
    std::string name;
    Tensor* tensor;
};

struct ParamMap {
    std::vector<ParamRef> params;
    std::vector<BufferRef> buffers;

    void add(std::string name, const Var& v) { params.push_back({std::move(name), v}); }
    void add_buffer(std::string name, Tensor* t) { buffers.push_back({std::move(name), t}); }
};

struct LinearLayer {
    Var w;  // (in, out)
    Var b;  // (out)
    int in = 0, out = 0;

    void init(int in_dim, int out_dim, Rng& rng, double weight_std);
    void init_zero(int in_dim, int out_dim);
    Var forward(const Var& x) const { return ag::linear(x, w, b); }
    void collect(const std::string& prefix, ParamMap& map) const;
};

struct LayerNormLayer {
    Var gamma, beta;
    double eps = 1e-6;

    void init(int dim);
    Var forward(const Var& x) const { return ag::layer_norm(x, gamma, beta, eps); }
    void collect(const std::string& prefix, ParamMap& map) const;
};

struct BatchNormLayer {
    Var gamma, beta;
    Tensor running_mean, running_var;
    double momentum = 0.1;
    double eps = 1e-5;

    void init(int dim);
    Var forward(const Var& x, bool training) {
        return ag::batch_norm(x, gamma, beta, running_mean, running_var, training, momentum, eps);
    }
    void collect(const std::string& prefix, ParamMap& map);
};

// AdamW over a fixed parameter list; decoupled weight decay.
class AdamW {
public:
    AdamW(std::vector<Var> params, double weight_decay, double beta1 = 0.9, double beta2 = 0.999,
          double eps = 1e-8);

    void zero_grad();
    void step(double lr);

private:
    std::vector<Var> params_;
    std::vector<Tensor> m_, v_;
    double weight_decay_, beta1_, beta2_, eps_;
    int64_t t_ = 0;
};

}  // namespace ckda
