#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace d2pcca::diff {

using Shape = std::vector<std::size_t>;

std::string to_string(const Shape& shape);
std::size_t element_count(const Shape& shape);

// Dense row-major array of doubles. An empty shape denotes a scalar.
class Tensor {
public:
    Tensor() : data_(1, 0.0) {}
    explicit Tensor(Shape shape, double fill = 0.0);
    Tensor(Shape shape, std::vector<double> values);

    static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }
    static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values) {
        return Tensor(Shape{rows, cols}, std::move(values));
    }
    static Tensor vector(std::vector<double> values) {
        const auto n = values.size();
        return Tensor(Shape{n}, std::move(values));
    }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t size() const noexcept { return data_.size(); }
    std::size_t dim(std::size_t axis) const { return shape_.at(axis); }

    // Matrix view helpers: rank-1 tensors are treated as a single row.
    std::size_t rows() const noexcept;
    std::size_t cols() const noexcept;

    std::span<const double> values() const noexcept { return data_; }
    std::span<double> values() noexcept { return data_; }
    const double* data() const noexcept { return data_.data(); }
    double* data() noexcept { return data_.data(); }

    double operator[](std::size_t i) const { return data_[i]; }
    double& operator[](std::size_t i) { return data_[i]; }
    double at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }
    double& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }

    double item() const;
    bool all_finite() const noexcept;

    // Bitwise comparison of shape and every value.
    bool identical(const Tensor& other) const noexcept;

    void fill(double v);

private:
    Shape shape_;
    std::vector<double> data_;
};

}  // namespace d2pcca::diff
