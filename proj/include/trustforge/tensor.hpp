#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace trustforge {

using Scalar = double;
using Index = Eigen::Index;
using Shape = std::vector<Index>;
using Array = Eigen::ArrayXd;   // flat storage, row-major index order
using Rng = std::mt19937_64;

// matrix view over flat row-major storage
using MatRM = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<MatRM>;
using ConstMatMap = Eigen::Map<const MatRM>;

struct DimensionError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};
struct ContractError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};
struct FormatError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct LengthError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct StratificationError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ConvergenceError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct AttackError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct AttributionError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct SingularError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline Index numel(const Shape& s) {
    Index n = 1;
    for (Index d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

// value type used by datasets and op results outside the graph
struct Tensor {
    Shape shape;
    Array data;

    Tensor() = default;
    Tensor(Shape s, Array d) : shape(std::move(s)), data(std::move(d)) {
        if (data.size() != numel(shape))
            throw DimensionError("tensor storage size " + std::to_string(data.size()) +
                                 " does not match shape " + shape_str(shape));
    }
    static Tensor zeros(const Shape& s) { return Tensor(s, Array::Zero(numel(s))); }
    Index size() const { return data.size(); }
};

inline MatMap as_matrix(Array& a, Index rows, Index cols) {
    if (a.size() != rows * cols)
        throw DimensionError("cannot view " + std::to_string(a.size()) + " values as " +
                             std::to_string(rows) + "x" + std::to_string(cols));
    return MatMap(a.data(), rows, cols);
}

inline ConstMatMap as_matrix(const Array& a, Index rows, Index cols) {
    if (a.size() != rows * cols)
        throw DimensionError("cannot view " + std::to_string(a.size()) + " values as " +
                             std::to_string(rows) + "x" + std::to_string(cols));
    return ConstMatMap(a.data(), rows, cols);
}

}  // namespace trustforge
