#pragma once

#include <functional>
#include <span>
#include <vector>

#include "stylevox/tensor.hpp"

namespace sv::ad {

// One recorded operation (or leaf). The vjp maps the gradient w.r.t. the op's
// output to gradients w.r.t. each input, in input order; it is expressed in
// terms of other recorded ops so that backward passes are themselves
// differentiable one level deep (needed by the path-length regularizer).
struct Node {
  uint64_t seq = 0;
  std::vector<Tensor> inputs;
  std::function<std::vector<Tensor>(const Tensor& grad_out)> vjp;  // null for leaves

  bool is_leaf() const { return !vjp; }
};

bool grad_enabled();

// RAII recording guards
class NoGrad {
 public:
  NoGrad();
  ~NoGrad();
  NoGrad(const NoGrad&) = delete;

 private:
  bool prev_;
};

class GradMode {
 public:
  explicit GradMode(bool enabled);
  ~GradMode();
  GradMode(const GradMode&) = delete;

 private:
  bool prev_;
};

// Marks a tensor as a differentiation leaf (fresh node, shared storage).
Tensor make_leaf(const Tensor& t);

// Attaches a node to `out` if recording is on and any input is on the tape.
Tensor record(Tensor out, std::vector<Tensor> inputs,
              std::function<std::vector<Tensor>(const Tensor&)> vjp);

// Reverse-mode gradient of a single-element output w.r.t. `wrt`. Nodes are
// visited in exact reverse order of recording; a node's gradient is complete
// before its own vjp runs. Tensors in `wrt` that the output does not depend on
// get zero gradients. With create_graph the returned tensors stay on the tape
// and can be differentiated once more.
std::vector<Tensor> gradient(const Tensor& output, std::span<const Tensor> wrt,
                             bool create_graph = false);

}  // namespace sv::ad
