#include "pixnerd/tensor.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <sstream>

#include "pixnerd/errors.hpp"

namespace pixnerd {

int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int d : s) {
        if (d < 0) throw ContractError("negative dimension in shape " + shape_str(s));
        n *= d;
    }
    return n;
}

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << "]";
    return os.str();
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data) {
    if (shape_numel(shape) != static_cast<int64_t>(data.size()))
        throw ContractError("data size " + std::to_string(data.size()) + " does not match shape " + shape_str(shape));
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = std::move(data);
    return t;
}

double& Tensor::at(std::initializer_list<int> idx) {
    return const_cast<double&>(static_cast<const Tensor*>(this)->at(idx));
}

double Tensor::at(std::initializer_list<int> idx) const {
    if (static_cast<int>(idx.size()) != ndim()) throw ContractError("index rank mismatch for shape " + shape_str(shape_));
    int64_t off = 0;
    int i = 0;
    for (int v : idx) {
        if (v < 0 || v >= shape_[static_cast<size_t>(i)]) throw ContractError("index out of range");
        off = off * shape_[static_cast<size_t>(i)] + v;
        ++i;
    }
    return data_[static_cast<size_t>(off)];
}

Tensor Tensor::reshaped(Shape new_shape) const {
    if (shape_numel(new_shape) != numel())
        throw ContractError("reshape " + shape_str(shape_) + " -> " + shape_str(new_shape) + " changes element count");
    Tensor t = *this;
    t.shape_ = std::move(new_shape);
    return t;
}

void Tensor::fill(double v) {
    std::fill(data_.begin(), data_.end(), v);
}

bool Tensor::all_finite() const {
    for (double v : data_)
        if (!std::isfinite(v)) return false;
    return true;
}

double Tensor::max_abs() const {
    double m = 0.0;
    for (double v : data_) m = std::max(m, std::abs(v));
    return m;
}

Tensor randn(const Shape& shape, Rng& rng) {
    Tensor t(shape);
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = rng.normal();
    return t;
}

Tensor rand_uniform(const Shape& shape, Rng& rng, double lo, double hi) {
    Tensor t(shape);
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(lo, hi);
    return t;
}

Tensor operator+(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) throw ContractError("add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor r = a;
    for (int64_t i = 0; i < r.numel(); ++i) r[i] += b[i];
    return r;
}

Tensor operator-(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) throw ContractError("sub: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor r = a;
    for (int64_t i = 0; i < r.numel(); ++i) r[i] -= b[i];
    return r;
}

Tensor operator*(const Tensor& t, double c) {
    Tensor r = t;
    for (int64_t i = 0; i < r.numel(); ++i) r[i] *= c;
    return r;
}

void axpy(Tensor& y, double alpha, const Tensor& x) {
    if (!y.same_shape(x)) throw ContractError("axpy: shape mismatch");
    for (int64_t i = 0; i < y.numel(); ++i) y[i] += alpha * x[i];
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) throw ContractError("max_abs_diff: shape mismatch");
    double m = 0.0;
    for (int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

double mean_sq_diff(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) throw ContractError("mean_sq_diff: shape mismatch");
    double s = 0.0;
    for (int64_t i = 0; i < a.numel(); ++i) {
        const double d = a[i] - b[i];
        s += d * d;
    }
    return a.numel() ? s / static_cast<double>(a.numel()) : 0.0;
}

namespace lin {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

void gemm(double* c, const double* a, const double* b, int m, int k, int n, bool trans_a, bool trans_b,
          double alpha, double beta) {
    MapMat C(c, m, n);
    CMapMat A(a, trans_a ? k : m, trans_a ? m : k);
    CMapMat B(b, trans_b ? n : k, trans_b ? k : n);
    if (beta == 0.0)
        C.setZero();
    else if (beta != 1.0)
        C *= beta;
    if (!trans_a && !trans_b)
        C.noalias() += alpha * A * B;
    else if (!trans_a && trans_b)
        C.noalias() += alpha * A * B.transpose();
    else if (trans_a && !trans_b)
        C.noalias() += alpha * A.transpose() * B;
    else
        C.noalias() += alpha * A.transpose() * B.transpose();
}

}  // namespace lin

}  // namespace pixnerd
