#include "stylevox/tensor.hpp"

#include <atomic>
#include <cmath>

#include "stylevox/rng.hpp"

namespace sv {

namespace {
std::atomic<bool> g_debug_finite{false};
}

const char* dtype_name(DType dt) { return dt == DType::F32 ? "f32" : "f64"; }

int64_t shape_numel(const std::vector<int64_t>& shape) {
  int64_t n = 1;
  for (int64_t e : shape) {
    if (e < 0) throw std::invalid_argument("negative extent in shape " + shape_str(shape));
    n *= e;
  }
  return n;
}

std::string shape_str(const std::vector<int64_t>& shape) {
  std::string s = "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

bool same_shape(const Tensor& a, const Tensor& b) { return a.shape() == b.shape(); }

Tensor::Tensor(std::vector<int64_t> shape, DType dt) {
  numel_ = shape_numel(shape);
  shape_ = std::move(shape);
  storage_ = std::make_shared<Storage>();
  storage_->dtype = dt;
  if (dt == DType::F32)
    storage_->f32.assign(static_cast<size_t>(numel_), 0.0f);
  else
    storage_->f64.assign(static_cast<size_t>(numel_), 0.0);
}

Tensor Tensor::zeros(std::vector<int64_t> shape, DType dt) { return Tensor(std::move(shape), dt); }

Tensor Tensor::full(std::vector<int64_t> shape, double value, DType dt) {
  Tensor t(std::move(shape), dt);
  if (dt == DType::F32) {
    for (auto& v : t.storage_->f32) v = static_cast<float>(value);
  } else {
    for (auto& v : t.storage_->f64) v = value;
  }
  return t;
}

Tensor Tensor::from_f32(std::vector<int64_t> shape, std::vector<float> values) {
  int64_t n = shape_numel(shape);
  if (n != static_cast<int64_t>(values.size()))
    throw std::invalid_argument("from_f32: " + std::to_string(values.size()) +
                                " values for shape " + shape_str(shape));
  Tensor t;
  t.numel_ = n;
  t.shape_ = std::move(shape);
  t.storage_ = std::make_shared<Storage>();
  t.storage_->dtype = DType::F32;
  t.storage_->f32 = std::move(values);
  return t;
}

Tensor Tensor::from_f64(std::vector<int64_t> shape, std::vector<double> values) {
  int64_t n = shape_numel(shape);
  if (n != static_cast<int64_t>(values.size()))
    throw std::invalid_argument("from_f64: " + std::to_string(values.size()) +
                                " values for shape " + shape_str(shape));
  Tensor t;
  t.numel_ = n;
  t.shape_ = std::move(shape);
  t.storage_ = std::make_shared<Storage>();
  t.storage_->dtype = DType::F64;
  t.storage_->f64 = std::move(values);
  return t;
}

Tensor Tensor::scalar(double value, DType dt) { return full({1}, value, dt); }

DType Tensor::dtype() const {
  if (!storage_) throw std::logic_error("dtype() on undefined tensor");
  return storage_->dtype;
}

template <>
std::span<float> Tensor::data<float>() {
  if (!storage_ || storage_->dtype != DType::F32)
    throw std::logic_error("f32 access on non-f32 tensor");
  return storage_->f32;
}

template <>
std::span<const float> Tensor::data<float>() const {
  if (!storage_ || storage_->dtype != DType::F32)
    throw std::logic_error("f32 access on non-f32 tensor");
  return storage_->f32;
}

template <>
std::span<double> Tensor::data<double>() {
  if (!storage_ || storage_->dtype != DType::F64)
    throw std::logic_error("f64 access on non-f64 tensor");
  return storage_->f64;
}

template <>
std::span<const double> Tensor::data<double>() const {
  if (!storage_ || storage_->dtype != DType::F64)
    throw std::logic_error("f64 access on non-f64 tensor");
  return storage_->f64;
}

double Tensor::item() const {
  if (numel_ != 1) throw std::logic_error("item() on tensor with " + std::to_string(numel_) + " elements");
  return at(0);
}

Tensor Tensor::detached() const {
  Tensor t = *this;
  t.node = nullptr;
  return t;
}

Tensor Tensor::clone() const {
  if (!storage_) return {};
  Tensor t;
  t.shape_ = shape_;
  t.numel_ = numel_;
  t.storage_ = std::make_shared<Storage>(*storage_);
  return t;
}

Tensor Tensor::astype(DType dt) const {
  if (!storage_) return {};
  if (dt == storage_->dtype) return clone();
  Tensor t(shape_, dt);
  for (int64_t i = 0; i < numel_; ++i) t.set(i, at(i));
  return t;
}

bool Tensor::all_finite() const {
  if (!storage_) return true;
  if (storage_->dtype == DType::F32) {
    for (float v : storage_->f32)
      if (!std::isfinite(v)) return false;
  } else {
    for (double v : storage_->f64)
      if (!std::isfinite(v)) return false;
  }
  return true;
}

bool debug_check_finite() { return g_debug_finite.load(std::memory_order_relaxed); }
void set_debug_check_finite(bool enabled) { g_debug_finite.store(enabled, std::memory_order_relaxed); }

void check_finite(const Tensor& t, const char* op) {
  if (!debug_check_finite()) return;
  if (!t.all_finite()) throw NonFiniteError(std::string("non-finite value in output of ") + op);
}

void fill_normal(Tensor& t, CounterRng& rng, double mean, double stddev) {
  for (int64_t i = 0; i < t.numel(); ++i) t.set(i, mean + stddev * rng.normal());
}

void fill_uniform(Tensor& t, CounterRng& rng, double lo, double hi) {
  for (int64_t i = 0; i < t.numel(); ++i) t.set(i, lo + (hi - lo) * rng.uniform());
}

}  // namespace sv
