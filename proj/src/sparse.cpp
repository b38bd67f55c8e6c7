#include "imcat/sparse.hpp"

#include <algorithm>

namespace imcat {

Csr::Csr(std::size_t rows, std::size_t cols, std::vector<std::uint64_t> row_ptr,
         std::vector<Index> col_idx)
    : rows_(rows), cols_(cols), row_ptr_(std::move(row_ptr)), col_idx_(std::move(col_idx)) {
  if (row_ptr_.size() != rows_ + 1 || row_ptr_.front() != 0 || row_ptr_.back() != col_idx_.size())
    throw FormatError("inconsistent CSR row pointers");
  for (std::size_t r = 0; r < rows_; ++r) {
    if (row_ptr_[r] > row_ptr_[r + 1]) throw FormatError("CSR row pointers not monotone");
    for (auto k = row_ptr_[r]; k < row_ptr_[r + 1]; ++k) {
      if (col_idx_[k] >= cols_) throw FormatError("CSR column index out of range");
      if (k > row_ptr_[r] && col_idx_[k - 1] >= col_idx_[k])
        throw FormatError("CSR columns not strictly increasing");
    }
  }
}

Csr Csr::from_pairs(std::size_t rows, std::size_t cols,
                    std::vector<std::pair<Index, Index>> pairs) {
  std::sort(pairs.begin(), pairs.end());
  pairs.erase(std::unique(pairs.begin(), pairs.end()), pairs.end());
  Csr m(rows, cols);
  m.col_idx_.reserve(pairs.size());
  for (const auto& [r, c] : pairs) {
    if (r >= rows || c >= cols) throw DimError("pair outside matrix bounds");
    ++m.row_ptr_[r + 1];
    m.col_idx_.push_back(c);
  }
  for (std::size_t r = 0; r < rows; ++r) m.row_ptr_[r + 1] += m.row_ptr_[r];
  return m;
}

bool Csr::contains(std::size_t r, Index c) const {
  auto cols = row(r);
  return std::binary_search(cols.begin(), cols.end(), c);
}

std::size_t Csr::row_of_entry(std::size_t entry) const {
  auto it = std::upper_bound(row_ptr_.begin(), row_ptr_.end(), static_cast<std::uint64_t>(entry));
  return static_cast<std::size_t>(it - row_ptr_.begin()) - 1;
}

Csr Csr::transpose() const {
  Csr t(cols_, rows_);
  t.col_idx_.resize(nnz());
  for (Index c : col_idx_) ++t.row_ptr_[c + 1];
  for (std::size_t c = 0; c < cols_; ++c) t.row_ptr_[c + 1] += t.row_ptr_[c];
  std::vector<std::uint64_t> cursor(t.row_ptr_.begin(), t.row_ptr_.end() - 1);
  // Rows are visited in ascending order, so each transposed row comes out sorted.
  for (std::size_t r = 0; r < rows_; ++r)
    for (Index c : row(r)) t.col_idx_[cursor[c]++] = static_cast<Index>(r);
  return t;
}

std::vector<std::pair<Index, Index>> Csr::pairs() const {
  std::vector<std::pair<Index, Index>> out;
  out.reserve(nnz());
  for (std::size_t r = 0; r < rows_; ++r)
    for (Index c : row(r)) out.emplace_back(static_cast<Index>(r), c);
  return out;
}

void WeightedCsr::multiply(const Matrix& in, Matrix& out) const {
  out.setZero(static_cast<Eigen::Index>(n), in.cols());
  for (std::size_t r = 0; r < n; ++r)
    for (auto k = row_ptr[r]; k < row_ptr[r + 1]; ++k)
      out.row(static_cast<Eigen::Index>(r)) += values[k] * in.row(col_idx[k]);
}

}  // namespace imcat
