#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace ckda {

// Error taxonomy: configuration problems (bad shapes, invalid fields),
// state problems (missing head, stage misuse), numeric problems (zero norms).
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};
class StateError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};
class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

using Shape = std::vector<int>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);
bool shape_eq(const Shape& a, const Shape& b);

// Dense row-major double tensor. All model math is done in 64-bit.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape) : shape_(std::move(shape)), data_(shape_numel(shape_), 0.0) {}
    Tensor(Shape shape, double fill) : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
    static Tensor full(Shape shape, double v) { return Tensor(std::move(shape), v); }
    static Tensor from(Shape shape, std::vector<double> values);

    bool empty() const { return data_.empty(); }
    int rank() const { return static_cast<int>(shape_.size()); }
    const Shape& shape() const { return shape_; }
    int dim(int i) const { return shape_[static_cast<size_t>(i)]; }
    int64_t numel() const { return static_cast<int64_t>(data_.size()); }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    std::vector<double>& vec() { return data_; }
    const std::vector<double>& vec() const { return data_; }

    double& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
    double operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

    // 2-D / 3-D / 4-D accessors for readable indexing in module code.
    double& at2(int i, int j) { return data_[static_cast<size_t>(i) * dim(1) + j]; }
    double at2(int i, int j) const { return data_[static_cast<size_t>(i) * dim(1) + j]; }
    double& at3(int i, int j, int k) {
        return data_[(static_cast<size_t>(i) * dim(1) + j) * dim(2) + k];
    }
    double at3(int i, int j, int k) const {
        return data_[(static_cast<size_t>(i) * dim(1) + j) * dim(2) + k];
    }
    double& at4(int i, int j, int k, int l) {
        return data_[((static_cast<size_t>(i) * dim(1) + j) * dim(2) + k) * dim(3) + l];
    }
    double at4(int i, int j, int k, int l) const {
        return data_[((static_cast<size_t>(i) * dim(1) + j) * dim(2) + k) * dim(3) + l];
    }

    Tensor reshaped(Shape new_shape) const;
    bool same_shape(const Tensor& other) const { return shape_eq(shape_, other.shape_); }

    void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

private:
    Shape shape_;
    std::vector<double> data_;
};

double max_abs(const Tensor& t);
double max_abs_diff(const Tensor& a, const Tensor& b);
bool tensors_equal(const Tensor& a, const Tensor& b);  // bitwise

// xoshiro256** with splitmix64 seeding. Hand-rolled distributions so the
// stream is identical across standard-library implementations.
class Rng {
public:
    explicit Rng(uint64_t seed);

    uint64_t next_u64();
    double uniform();                      // [0, 1)
    double uniform(double lo, double hi);  // [lo, hi)
    double normal();                       // standard normal, Box-Muller
    int uniform_int(int n);                // [0, n)

    // Independent deterministic substream.
    Rng child(uint64_t salt) const;

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (int i = static_cast<int>(v.size()) - 1; i > 0; --i) {
            int j = uniform_int(i + 1);
            std::swap(v[static_cast<size_t>(i)], v[static_cast<size_t>(j)]);
        }
    }

private:
    uint64_t s_[4];
    uint64_t seed_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

uint64_t splitmix64(uint64_t& state);
uint64_t fnv1a64(const std::string& text);

}  // namespace ckda
