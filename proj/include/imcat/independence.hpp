#pragma once

#include <span>

#include "imcat/common.hpp"

namespace imcat {

/// Distance correlation of two equally long vectors, treating coordinates as
/// paired scalar samples. Returns 0 when either vector has zero distance
/// variance. Gradients are accumulated (times `weight`) when requested.
Real distance_correlation(const Eigen::Ref<const Vector>& a, const Eigen::Ref<const Vector>& b,
                          Vector* grad_a = nullptr, Vector* grad_b = nullptr, Real weight = 1.0);

/// Mean distance correlation over unordered pairs of rows of `centers`;
/// 0 for a single row.
Real independence_penalty(const Matrix& centers, Matrix* grad = nullptr, Real weight = 1.0);

/// Chunk variant: mean over `rows` of the pairwise distance correlation
/// between the K chunks of each row of `table`.
Real chunk_independence_penalty(const Matrix& table, std::span<const Index> rows, std::size_t K,
                                Matrix* grad = nullptr, Real weight = 1.0);

}  // namespace imcat
