#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace sv {

enum class DType : uint8_t { F32 = 0, F64 = 1 };

const char* dtype_name(DType dt);

namespace ad {
struct Node;
}

struct NonFiniteError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Dense N-dimensional array, row-major, last axis fastest. Copies share the
// underlying buffer; tensors that participate in a recorded graph must be
// treated as immutable. Parameter buffers are the one exception and are only
// mutated between optimizer steps.
class Tensor {
 public:
  Tensor() = default;
  Tensor(std::vector<int64_t> shape, DType dt);

  static Tensor zeros(std::vector<int64_t> shape, DType dt = DType::F32);
  static Tensor full(std::vector<int64_t> shape, double value, DType dt = DType::F32);
  static Tensor from_f32(std::vector<int64_t> shape, std::vector<float> values);
  static Tensor from_f64(std::vector<int64_t> shape, std::vector<double> values);
  static Tensor scalar(double value, DType dt = DType::F32);

  bool defined() const { return storage_ != nullptr; }
  const std::vector<int64_t>& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int64_t extent(int axis) const { return shape_.at(static_cast<size_t>(axis)); }
  int64_t numel() const { return numel_; }
  DType dtype() const;

  template <class T>
  std::span<T> data();
  template <class T>
  std::span<const T> data() const;

  // dtype-agnostic scalar access by flat index
  double at(int64_t flat) const {
    return storage_->dtype == DType::F32
               ? static_cast<double>(storage_->f32[static_cast<size_t>(flat)])
               : storage_->f64[static_cast<size_t>(flat)];
  }
  void set(int64_t flat, double value) {
    if (storage_->dtype == DType::F32)
      storage_->f32[static_cast<size_t>(flat)] = static_cast<float>(value);
    else
      storage_->f64[static_cast<size_t>(flat)] = value;
  }
  // value of a single-element tensor
  double item() const;

  // same storage, detached from any recorded graph
  Tensor detached() const;
  // deep copy, detached
  Tensor clone() const;
  Tensor astype(DType dt) const;

  bool all_finite() const;

  std::shared_ptr<ad::Node> node;  // grad handle; null when off-tape

 private:
  struct Storage {
    DType dtype = DType::F32;
    std::vector<float> f32;
    std::vector<double> f64;
  };
  std::shared_ptr<Storage> storage_;
  std::vector<int64_t> shape_;
  int64_t numel_ = 0;
};

int64_t shape_numel(const std::vector<int64_t>& shape);
std::string shape_str(const std::vector<int64_t>& shape);
bool same_shape(const Tensor& a, const Tensor& b);

// Debug-mode NaN/Inf surfacing: when enabled, every op output is scanned and a
// non-finite value raises NonFiniteError naming the op.
bool debug_check_finite();
void set_debug_check_finite(bool enabled);
void check_finite(const Tensor& t, const char* op);

class CounterRng;
void fill_normal(Tensor& t, CounterRng& rng, double mean = 0.0, double stddev = 1.0);
void fill_uniform(Tensor& t, CounterRng& rng, double lo = 0.0, double hi = 1.0);

}  // namespace sv
