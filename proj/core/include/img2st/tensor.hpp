#pragma once

#include <cmath>
#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace img2st {

// Dense row-major tensor with 1 to 4 axes. Activations use (N,C,H,W),
// weights (O,I,Kh,Kw). Scalar type is float for training and benchmarks,
// double for gradient checks.
template <typename S>
struct Tensor {
    std::vector<int> shape;
    std::vector<S> data;
    std::vector<S> grad;  // optional; empty unless ensure_grad() was called

    Tensor() = default;

    explicit Tensor(std::vector<int> shp, S fill = S(0)) : shape(std::move(shp)) {
        validate_shape();
        data.assign(static_cast<std::size_t>(numel()), fill);
    }

    static Tensor zeros(std::vector<int> shp) { return Tensor(std::move(shp)); }

    static Tensor from(std::vector<int> shp, std::vector<S> values) {
        Tensor t;
        t.shape = std::move(shp);
        t.validate_shape();
        if (static_cast<std::int64_t>(values.size()) != t.numel()) {
            throw std::invalid_argument("tensor data length " + std::to_string(values.size()) +
                                        " does not match shape " + t.shape_str());
        }
        t.data = std::move(values);
        return t;
    }

    int ndim() const { return static_cast<int>(shape.size()); }

    int dim(int i) const {
        if (i < 0 || i >= ndim()) throw std::out_of_range("tensor axis out of range");
        return shape[static_cast<std::size_t>(i)];
    }

    std::int64_t numel() const {
        std::int64_t n = 1;
        for (int d : shape) n *= d;
        return shape.empty() ? 0 : n;
    }

    S* ptr() { return data.data(); }
    const S* ptr() const { return data.data(); }

    S& at(int i) { return data[static_cast<std::size_t>(i)]; }
    S at(int i) const { return data[static_cast<std::size_t>(i)]; }

    S& at(int a, int b) { return data[static_cast<std::size_t>(a) * shape[1] + b]; }
    S at(int a, int b) const { return data[static_cast<std::size_t>(a) * shape[1] + b]; }

    S& at(int a, int b, int c) {
        return data[(static_cast<std::size_t>(a) * shape[1] + b) * shape[2] + c];
    }
    S at(int a, int b, int c) const {
        return data[(static_cast<std::size_t>(a) * shape[1] + b) * shape[2] + c];
    }

    S& at(int a, int b, int c, int d) {
        return data[((static_cast<std::size_t>(a) * shape[1] + b) * shape[2] + c) * shape[3] + d];
    }
    S at(int a, int b, int c, int d) const {
        return data[((static_cast<std::size_t>(a) * shape[1] + b) * shape[2] + c) * shape[3] + d];
    }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    std::string shape_str() const {
        std::ostringstream os;
        os << '[';
        for (std::size_t i = 0; i < shape.size(); ++i) {
            if (i) os << 'x';
            os << shape[i];
        }
        os << ']';
        return os.str();
    }

    // Reinterpret the same storage under a new shape with equal element count.
    Tensor reshaped(std::vector<int> shp) const {
        Tensor t;
        t.shape = std::move(shp);
        t.validate_shape();
        if (t.numel() != numel()) {
            throw std::invalid_argument("reshape " + shape_str() + " -> " + t.shape_str() +
                                        " changes element count");
        }
        t.data = data;
        return t;
    }

    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), S(0));
    }

    bool all_finite() const {
        for (S v : data) {
            if (!std::isfinite(static_cast<double>(v))) return false;
        }
        return true;
    }

    void check_finite(const std::string& what) const {
        if (!all_finite()) throw std::runtime_error(what + ": non-finite value in tensor " + shape_str());
    }

private:
    void validate_shape() const {
        if (shape.empty() || shape.size() > 4) {
            throw std::invalid_argument("tensor rank must be 1..4");
        }
        for (int d : shape) {
            if (d <= 0) throw std::invalid_argument("tensor extent must be positive, got shape " + shape_str());
        }
    }
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

template <typename To, typename From>
Tensor<To> cast(const Tensor<From>& t) {
    Tensor<To> out;
    out.shape = t.shape;
    out.data.resize(t.data.size());
    for (std::size_t i = 0; i < t.data.size(); ++i) out.data[i] = static_cast<To>(t.data[i]);
    return out;
}

template <typename S>
void axpy(Tensor<S>& y, S alpha, const Tensor<S>& x) {
    if (!y.same_shape(x)) {
        throw std::invalid_argument("axpy shape mismatch " + y.shape_str() + " vs " + x.shape_str());
    }
    for (std::size_t i = 0; i < y.data.size(); ++i) y.data[i] += alpha * x.data[i];
}

template <typename S>
void scale(Tensor<S>& t, S alpha) {
    for (S& v : t.data) v *= alpha;
}

}  // namespace img2st
