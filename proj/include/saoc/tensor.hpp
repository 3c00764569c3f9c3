#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "saoc/errors.hpp"
#include "saoc/rng.hpp"

namespace saoc {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << "]";
    return os.str();
}

// Dense n-d array of doubles with an optional gradient buffer.
// Plain value type; graph attachment lives on the Tape side (Tape::watch
// remembers which Tensor a leaf came from and writes grads back into it).
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Shape shape) : shape_(std::move(shape)) {
        validate_shape();
        data_.assign(static_cast<size_t>(numel()), 0.0);
    }

    Tensor(Shape shape, std::vector<double> data)
        : shape_(std::move(shape)), data_(std::move(data)) {
        validate_shape();
        if (static_cast<int64_t>(data_.size()) != numel())
            throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                                 " does not match shape " + shape_str(shape_));
        check_finite();
    }

    static Tensor scalar(double v) { return Tensor({1}, {v}); }

    static Tensor randn(Shape shape, Rng& rng, double stddev) {
        Tensor t(std::move(shape));
        for (auto& v : t.data_) v = rng.normal(0.0, stddev);
        return t;
    }

    const Shape& shape() const { return shape_; }
    int64_t dim(size_t i) const { return shape_.at(i); }
    int64_t numel() const { return shape_numel(shape_); }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    std::vector<double>& values() { return data_; }
    const std::vector<double>& values() const { return data_; }

    double& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
    double operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

    bool has_grad() const { return !grad_.empty(); }
    std::vector<double>& grad() {
        if (grad_.empty()) grad_.assign(data_.size(), 0.0);
        return grad_;
    }
    const std::vector<double>& grad() const { return grad_; }
    void zero_grad() { grad_.assign(data_.size(), 0.0); }
    void drop_grad() { grad_.clear(); }

    void check_finite() const {
        for (double v : data_)
            if (!std::isfinite(v)) throw ContractError("tensor holds a non-finite value");
    }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

private:
    void validate_shape() const {
        if (shape_.empty()) throw DimensionError("tensor shape must have at least one dimension");
        for (int64_t d : shape_)
            if (d <= 0) throw DimensionError("tensor dimensions must be positive, got " + shape_str(shape_));
    }

    Shape shape_;
    std::vector<double> data_;
    std::vector<double> grad_;
};

}  // namespace saoc
