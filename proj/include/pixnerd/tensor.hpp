#pragma once

#include <cstdint>
#include <initializer_list>
#include <string>
#include <vector>

#include "pixnerd/rng.hpp"

namespace pixnerd {

using Shape = std::vector<int>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

// Dense row-major double tensor. All model math runs in double: the desk-scale
// workloads are small and the acceptance tolerances (finite-difference
// gradient checks, basis orthogonality) want the headroom.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape) : shape_(std::move(shape)), data_(shape_numel(shape_), 0.0) {}
    Tensor(Shape shape, double fill) : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

    static Tensor from_data(Shape shape, std::vector<double> data);
    static Tensor scalar(double v) { return from_data({1}, {v}); }

    const Shape& shape() const { return shape_; }
    int ndim() const { return static_cast<int>(shape_.size()); }
    int dim(int i) const { return shape_[static_cast<size_t>(i)]; }
    int64_t numel() const { return static_cast<int64_t>(data_.size()); }
    bool empty() const { return data_.empty(); }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }

    double& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
    double operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

    double& at(std::initializer_list<int> idx);
    double at(std::initializer_list<int> idx) const;

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }
    Tensor reshaped(Shape new_shape) const;

    void fill(double v);
    void zero() { fill(0.0); }
    bool all_finite() const;
    double max_abs() const;

private:
    Shape shape_;
    std::vector<double> data_;
};

Tensor randn(const Shape& shape, Rng& rng);
Tensor rand_uniform(const Shape& shape, Rng& rng, double lo, double hi);

// Elementwise helpers used outside the autograd path.
Tensor operator+(const Tensor& a, const Tensor& b);
Tensor operator-(const Tensor& a, const Tensor& b);
Tensor operator*(const Tensor& t, double c);
void axpy(Tensor& y, double alpha, const Tensor& x);  // y += alpha * x
double max_abs_diff(const Tensor& a, const Tensor& b);
double mean_sq_diff(const Tensor& a, const Tensor& b);

namespace lin {

// C[m,n] = alpha * op(A) * op(B) + beta * C, all row-major.
// op(A) is [m,k]; stored A is [k,m] when trans_a.
void gemm(double* c, const double* a, const double* b, int m, int k, int n, bool trans_a, bool trans_b,
          double alpha, double beta);

}  // namespace lin

}  // namespace pixnerd
