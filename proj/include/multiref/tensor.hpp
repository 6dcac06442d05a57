#pragma once

#include <cstddef>
#include <initializer_list>
#include <string>
#include <vector>

#include "multiref/common.hpp"
#include "multiref/rng.hpp"

namespace multiref {

/// Dense row-major double tensor. The shape is dynamic; rank is small (<= 6).
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::vector<int> shape, real fill = 0.0);
    Tensor(std::initializer_list<int> shape, real fill = 0.0)
        : Tensor(std::vector<int>(shape), fill) {}

    static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }
    static Tensor full(std::vector<int> shape, real v) { return Tensor(std::move(shape), v); }
    static Tensor scalar(real v) { return Tensor(std::vector<int>{1}, v); }
    static Tensor from_data(std::vector<int> shape, std::vector<real> data);
    static Tensor randn(std::vector<int> shape, Rng& rng, real stddev = 1.0);
    static Tensor rand_uniform(std::vector<int> shape, Rng& rng, real lo, real hi);

    int ndim() const { return static_cast<int>(shape_.size()); }
    int dim(int i) const { return shape_[static_cast<size_t>(i)]; }
    const std::vector<int>& shape() const { return shape_; }
    size_t numel() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    real* data() { return data_.data(); }
    const real* data() const { return data_.data(); }
    std::vector<real>& vec() { return data_; }
    const std::vector<real>& vec() const { return data_; }

    real& operator[](size_t i) { return data_[i]; }
    real operator[](size_t i) const { return data_[i]; }

    // Index helpers for the common low ranks.
    real& at(int a) { return data_[static_cast<size_t>(a)]; }
    real& at(int a, int b) { return data_[static_cast<size_t>(a) * shape_[1] + b]; }
    real& at(int a, int b, int c) {
        return data_[(static_cast<size_t>(a) * shape_[1] + b) * shape_[2] + c];
    }
    real& at(int a, int b, int c, int d) {
        return data_[((static_cast<size_t>(a) * shape_[1] + b) * shape_[2] + c) * shape_[3] + d];
    }
    real at(int a) const { return data_[static_cast<size_t>(a)]; }
    real at(int a, int b) const { return data_[static_cast<size_t>(a) * shape_[1] + b]; }
    real at(int a, int b, int c) const {
        return data_[(static_cast<size_t>(a) * shape_[1] + b) * shape_[2] + c];
    }
    real at(int a, int b, int c, int d) const {
        return data_[((static_cast<size_t>(a) * shape_[1] + b) * shape_[2] + c) * shape_[3] + d];
    }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    Tensor reshaped(std::vector<int> new_shape) const;

    bool all_finite() const;
    real min_value() const;
    real max_value() const;
    real abs_max() const;
    real sum() const;
    real mean() const;

    /// Elementwise in-place helpers used by non-autodiff code paths.
    Tensor& add_(const Tensor& o);
    Tensor& sub_(const Tensor& o);
    Tensor& scale_(real s);
    Tensor& clamp_(real lo, real hi);

    std::string shape_str() const;

private:
    std::vector<int> shape_;
    std::vector<real> data_;
};

size_t shape_numel(const std::vector<int>& shape);
bool shapes_equal(const std::vector<int>& a, const std::vector<int>& b);
std::string shape_to_string(const std::vector<int>& shape);

/// Largest absolute elementwise difference; tensors must share a shape.
real max_abs_diff(const Tensor& a, const Tensor& b);

/// True when both tensors are bitwise identical (shape and payload).
bool bit_equal(const Tensor& a, const Tensor& b);

}  // namespace multiref
