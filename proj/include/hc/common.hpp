#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <cstdlib>
#include <optional>
#include <stdexcept>
#include <string>

namespace hc {

// Row-vector convention throughout: a residual-stream state is a row,
// activations are seq x d matrices, and weights multiply on the right.
using MatrixF = Eigen::MatrixXf;
using VectorF = Eigen::VectorXf;
using RowVectorF = Eigen::RowVectorXf;

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Raised when an operation is asked for something outside the model's
// layer/head/position bounds.
struct RangeError : Error {
    using Error::Error;
};

struct ShapeError : Error {
    using Error::Error;
};

inline std::optional<std::string> env_var(const char* name) {
    const char* v = std::getenv(name);
    if (v == nullptr || *v == '\0') return std::nullopt;
    return std::string(v);
}

inline bool env_flag(const char* name) {
    auto v = env_var(name);
    return v && *v != "0" && *v != "false";
}

}  // namespace hc
