#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace msfuse {

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw std::runtime_error(msg);
}

/// Dense row-major tensor of doubles. Rank is the length of the shape
/// vector; a scalar is rank 0 with one element.
class Tensor {
public:
    Tensor() : data_(1, 0.0) {}

    explicit Tensor(std::vector<int> shape)
        : shape_(std::move(shape)), data_(count(shape_), 0.0) {}

    Tensor(std::vector<int> shape, std::vector<double> data)
        : shape_(std::move(shape)), data_(std::move(data)) {
        require(static_cast<int>(data_.size()) == count(shape_),
                "Tensor: data size does not match shape");
    }

    static Tensor scalar(double v) {
        Tensor t;
        t.data_[0] = v;
        return t;
    }

    static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }

    static Tensor full(std::vector<int> shape, double v) {
        Tensor t(std::move(shape));
        for (auto& x : t.data_) x = v;
        return t;
    }

    int size() const { return static_cast<int>(data_.size()); }
    int rank() const { return static_cast<int>(shape_.size()); }
    int dim(int i) const { return shape_.at(static_cast<size_t>(i)); }
    const std::vector<int>& shape() const { return shape_; }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }

    double& operator[](int i) { return data_[static_cast<size_t>(i)]; }
    double operator[](int i) const { return data_[static_cast<size_t>(i)]; }

    // rank-2 element access, row r / column c
    double& at(int r, int c) { return data_[static_cast<size_t>(r) * dim(1) + c]; }
    double at(int r, int c) const { return data_[static_cast<size_t>(r) * dim(1) + c]; }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    bool all_finite() const {
        for (double v : data_) {
            if (!std::isfinite(v)) return false;
        }
        return true;
    }

    void fill(double v) {
        for (auto& x : data_) x = v;
    }

    std::string shape_str() const {
        std::string s = "(";
        for (int i = 0; i < rank(); ++i) {
            if (i) s += ",";
            s += std::to_string(shape_[static_cast<size_t>(i)]);
        }
        return s + ")";
    }

private:
    static int count(const std::vector<int>& shape) {
        long long n = 1;
        for (int d : shape) {
            require(d > 0, "Tensor: nonpositive dimension");
            n *= d;
        }
        require(n < (1LL << 31), "Tensor: too large");
        return static_cast<int>(n);
    }

    std::vector<int> shape_;
    std::vector<double> data_;
};

}  // namespace msfuse
