#include "tsca/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <mutex>
#include <utility>

#include "tsca/errors.hpp"

namespace tsca {

namespace {

std::mutex& handler_mutex() {
  static std::mutex m;
  return m;
}

void write_to_stderr(const std::string& msg) { std::cerr << "warning: " << msg << '\n'; }

WarningHandler& handler_slot() {
  static WarningHandler h = write_to_stderr;
  return h;
}

}  // namespace

void set_warning_handler(WarningHandler handler) {
  std::lock_guard lock(handler_mutex());
  handler_slot() = handler ? std::move(handler) : WarningHandler(write_to_stderr);
}

void warn(const std::string& message) {
  std::lock_guard lock(handler_mutex());
  if (handler_slot()) handler_slot()(message);
}

Tensor::Tensor(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Tensor::Tensor(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows_ * cols_) {
    throw ContractError("tensor data length does not match shape");
  }
}

Tensor Tensor::column(std::vector<double> values) {
  const std::size_t n = values.size();
  return Tensor(n, 1, std::move(values));
}

Tensor Tensor::rows_of(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r == 0 ? 0 : rows.begin()->size();
  std::vector<double> data;
  data.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw ContractError("ragged tensor literal");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Tensor(r, c, std::move(data));
}

Tensor Tensor::identity(std::size_t n) {
  Tensor t(n, n);
  for (std::size_t i = 0; i < n; ++i) t(i, i) = 1.0;
  return t;
}

Tensor Tensor::col(std::size_t c) const {
  if (c >= cols_) throw ContractError("column index out of range");
  Tensor out(rows_, 1);
  for (std::size_t r = 0; r < rows_; ++r) out[r] = (*this)(r, c);
  return out;
}

Tensor Tensor::row(std::size_t r) const {
  if (r >= rows_) throw ContractError("row index out of range");
  Tensor out(1, cols_);
  std::copy_n(data_.begin() + static_cast<std::ptrdiff_t>(r * cols_), cols_, out.data_.begin());
  return out;
}

double Tensor::item() const {
  if (data_.size() != 1) throw ContractError("item() requires a 1x1 tensor");
  return data_[0];
}

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) throw ContractError("max_abs_diff: shape mismatch");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace tsca
