#pragma once

#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace pacmeta {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string to_string(const Shape& shape) {
    std::string out = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(shape[i]);
    }
    return out + "]";
}

class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Dense row-major array of doubles. A rank-0 tensor holds one value.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Shape shape, double fill = 0.0)
        : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}

    Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
        if (shape_size(shape_) != data_.size()) {
            throw ShapeError("tensor: shape " + to_string(shape_) + " needs " +
                             std::to_string(shape_size(shape_)) + " values, got " +
                             std::to_string(data_.size()));
        }
    }

    static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }

    const Shape& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t dim(std::size_t i) const { return shape_.at(i); }
    std::size_t size() const { return data_.size(); }

    std::span<const double> data() const { return data_; }
    std::span<double> data() { return data_; }
    const std::vector<double>& values() const { return data_; }

    double operator[](std::size_t i) const { return data_[i]; }
    double& operator[](std::size_t i) { return data_[i]; }

    double operator()(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }
    double& operator()(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }

    double item() const {
        if (data_.size() != 1) {
            throw ShapeError("item: tensor of shape " + to_string(shape_) + " is not a scalar");
        }
        return data_[0];
    }

    bool operator==(const Tensor&) const = default;

private:
    Shape shape_;
    std::vector<double> data_;
};

} // namespace pacmeta
