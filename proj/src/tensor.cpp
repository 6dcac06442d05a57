#include "multiref/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>

namespace multiref {

size_t shape_numel(const std::vector<int>& shape) {
    size_t n = 1;
    for (int d : shape) {
        if (d < 0) throw config_error("negative tensor dimension");
        n *= static_cast<size_t>(d);
    }
    return n;
}

bool shapes_equal(const std::vector<int>& a, const std::vector<int>& b) { return a == b; }

std::string shape_to_string(const std::vector<int>& shape) {
    std::ostringstream os;
    os << "(";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ", ";
        os << shape[i];
    }
    os << ")";
    return os.str();
}

Tensor::Tensor(std::vector<int> shape, real fill)
    : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

Tensor Tensor::from_data(std::vector<int> shape, std::vector<real> data) {
    if (shape_numel(shape) != data.size())
        throw config_error("tensor data size does not match shape " + shape_to_string(shape));
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = std::move(data);
    return t;
}

Tensor Tensor::randn(std::vector<int> shape, Rng& rng, real stddev) {
    Tensor t(std::move(shape));
    for (auto& v : t.data_) v = rng.normal() * stddev;
    return t;
}

Tensor Tensor::rand_uniform(std::vector<int> shape, Rng& rng, real lo, real hi) {
    Tensor t(std::move(shape));
    for (auto& v : t.data_) v = rng.uniform(lo, hi);
    return t;
}

Tensor Tensor::reshaped(std::vector<int> new_shape) const {
    if (shape_numel(new_shape) != numel())
        throw config_error("reshape " + shape_to_string(shape_) + " -> " +
                           shape_to_string(new_shape) + " changes element count");
    Tensor t;
    t.shape_ = std::move(new_shape);
    t.data_ = data_;
    return t;
}

bool Tensor::all_finite() const {
    for (real v : data_)
        if (!std::isfinite(v)) return false;
    return true;
}

real Tensor::min_value() const {
    return *std::min_element(data_.begin(), data_.end());
}

real Tensor::max_value() const {
    return *std::max_element(data_.begin(), data_.end());
}

real Tensor::abs_max() const {
    real m = 0.0;
    for (real v : data_) m = std::max(m, std::fabs(v));
    return m;
}

real Tensor::sum() const {
    real s = 0.0;
    for (real v : data_) s += v;
    return s;
}

real Tensor::mean() const { return data_.empty() ? 0.0 : sum() / static_cast<real>(data_.size()); }

Tensor& Tensor::add_(const Tensor& o) {
    if (!same_shape(o)) throw config_error("add_: shape mismatch");
    for (size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
}

Tensor& Tensor::sub_(const Tensor& o) {
    if (!same_shape(o)) throw config_error("sub_: shape mismatch");
    for (size_t i = 0; i < data_.size(); ++i) data_[i] -= o.data_[i];
    return *this;
}

Tensor& Tensor::scale_(real s) {
    for (auto& v : data_) v *= s;
    return *this;
}

Tensor& Tensor::clamp_(real lo, real hi) {
    for (auto& v : data_) v = std::min(hi, std::max(lo, v));
    return *this;
}

std::string Tensor::shape_str() const { return shape_to_string(shape_); }

real max_abs_diff(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) throw config_error("max_abs_diff: shape mismatch");
    real m = 0.0;
    for (size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::fabs(a[i] - b[i]));
    return m;
}

bool bit_equal(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) return false;
    return std::memcmp(a.data(), b.data(), a.numel() * sizeof(real)) == 0;
}

}  // namespace multiref
