#pragma once

#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "imcat/common.hpp"

namespace imcat {

/// Binary incidence matrix in compressed-row layout. Column indices within a
/// row are sorted ascending and unique.
class Csr {
 public:
  Csr() = default;
  Csr(std::size_t rows, std::size_t cols) : rows_(rows), cols_(cols), row_ptr_(rows + 1, 0) {}
  Csr(std::size_t rows, std::size_t cols, std::vector<std::uint64_t> row_ptr,
      std::vector<Index> col_idx);

  /// Builds from (row, col) pairs; duplicates are merged.
  static Csr from_pairs(std::size_t rows, std::size_t cols,
                        std::vector<std::pair<Index, Index>> pairs);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t nnz() const noexcept { return col_idx_.size(); }

  std::span<const Index> row(std::size_t r) const {
    return {col_idx_.data() + row_ptr_[r], col_idx_.data() + row_ptr_[r + 1]};
  }
  std::size_t degree(std::size_t r) const { return row_ptr_[r + 1] - row_ptr_[r]; }
  bool contains(std::size_t r, Index c) const;

  /// Row that owns the nnz-th stored entry.
  std::size_t row_of_entry(std::size_t entry) const;

  Csr transpose() const;
  std::vector<std::pair<Index, Index>> pairs() const;

  const std::vector<std::uint64_t>& row_ptr() const noexcept { return row_ptr_; }
  const std::vector<Index>& col_idx() const noexcept { return col_idx_; }

  bool operator==(const Csr&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<std::uint64_t> row_ptr_{0};
  std::vector<Index> col_idx_;
};

/// Real-valued CSR used for the normalized propagation matrix.
struct WeightedCsr {
  std::size_t n = 0;
  std::vector<std::uint64_t> row_ptr{0};
  std::vector<Index> col_idx;
  std::vector<Real> values;

  /// out = A * in (dense row-major tables).
  void multiply(const Matrix& in, Matrix& out) const;
};

}  // namespace imcat
