#pragma once

// Dense row-major n-d tensor. Scalar type is a template parameter: float is
// the training type, double exists for tight gradient-check tolerances.

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "ncd/errors.hpp"
#include "ncd/rng.hpp"

namespace ncd {

template <typename S>
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
        data_.assign(count(shape_), S(0));
    }

    Tensor(std::vector<int> shape, std::vector<S> data)
        : shape_(std::move(shape)), data_(std::move(data)) {
        if (count(shape_) != data_.size())
            throw std::invalid_argument("Tensor: shape " + shape_str() + " does not match " +
                                        std::to_string(data_.size()) + " values");
    }

    static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }

    static Tensor full(std::vector<int> shape, S value) {
        Tensor t(std::move(shape));
        for (auto& v : t.data_) v = value;
        return t;
    }

    static Tensor scalar(S value) { return Tensor({1}, {value}); }

    // He-style normal init: std = sqrt(2 / fan_in).
    static Tensor he_normal(std::vector<int> shape, int fan_in, Rng& rng) {
        Tensor t(std::move(shape));
        S std_dev = S(std::sqrt(2.0 / double(fan_in)));
        for (auto& v : t.data_) v = S(rng.normal()) * std_dev;
        return t;
    }

    const std::vector<int>& shape() const { return shape_; }
    size_t size() const { return data_.size(); }
    int dim(int i) const { return shape_[size_t(i)]; }
    int ndim() const { return int(shape_.size()); }

    S* data() { return data_.data(); }
    const S* data() const { return data_.data(); }
    std::vector<S>& values() { return data_; }
    const std::vector<S>& values() const { return data_; }

    S& operator[](size_t i) { return data_[i]; }
    S operator[](size_t i) const { return data_[i]; }

    S& at4(int a, int b, int c, int d) {
        return data_[((size_t(a) * shape_[1] + b) * shape_[2] + c) * shape_[3] + d];
    }
    S at4(int a, int b, int c, int d) const {
        return data_[((size_t(a) * shape_[1] + b) * shape_[2] + c) * shape_[3] + d];
    }
    S& at2(int r, int c) { return data_[size_t(r) * shape_[1] + c]; }
    S at2(int r, int c) const { return data_[size_t(r) * shape_[1] + c]; }

    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

    bool all_finite() const {
        for (S v : data_)
            if (!std::isfinite(double(v))) return false;
        return true;
    }

    // NaN/Inf is an error, never silent state.
    void require_finite(const char* context) const {
        if (!all_finite())
            throw NumericError(std::string(context) + ": non-finite value in tensor " + shape_str());
    }

    std::string shape_str() const {
        std::ostringstream os;
        os << "[";
        for (size_t i = 0; i < shape_.size(); ++i) os << (i ? "x" : "") << shape_[i];
        os << "]";
        return os.str();
    }

    static size_t count(const std::vector<int>& shape) {
        size_t n = 1;
        for (int d : shape) {
            if (d <= 0) throw std::invalid_argument("Tensor: non-positive extent");
            n *= size_t(d);
        }
        return n;
    }

private:
    std::vector<int> shape_;
    std::vector<S> data_;
};

using Tensorf = Tensor<float>;

}  // namespace ncd
