#pragma once

#include <Eigen/Dense>

namespace neuronscope {

template <typename T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using MatrixF = Matrix<float>;
using MatrixD = Matrix<double>;
using VectorD = Eigen::VectorXd;
using RowVectorD = Eigen::RowVectorXd;

}  // namespace neuronscope
