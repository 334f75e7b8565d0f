#include "stylevox/autodiff.hpp"

#include <algorithm>
#include <atomic>
#include <unordered_map>
#include <unordered_set>

#include "stylevox/ops.hpp"

namespace sv::ad {

namespace {
thread_local bool g_grad_enabled = true;
std::atomic<uint64_t> g_seq{0};
}  // namespace

bool grad_enabled() { return g_grad_enabled; }

NoGrad::NoGrad() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGrad::~NoGrad() { g_grad_enabled = prev_; }

GradMode::GradMode(bool enabled) : prev_(g_grad_enabled) { g_grad_enabled = enabled; }
GradMode::~GradMode() { g_grad_enabled = prev_; }

Tensor make_leaf(const Tensor& t) {
  if (!t.defined()) throw std::logic_error("make_leaf on undefined tensor");
  Tensor out = t;
  out.node = std::make_shared<Node>();
  out.node->seq = ++g_seq;
  return out;
}

Tensor record(Tensor out, std::vector<Tensor> inputs,
              std::function<std::vector<Tensor>(const Tensor&)> vjp) {
  if (!g_grad_enabled) return out;
  bool any = false;
  for (const auto& in : inputs)
    if (in.node) {
      any = true;
      break;
    }
  if (!any) return out;
  out.node = std::make_shared<Node>();
  out.node->seq = ++g_seq;
  out.node->inputs = std::move(inputs);
  out.node->vjp = std::move(vjp);
  return out;
}

std::vector<Tensor> gradient(const Tensor& output, std::span<const Tensor> wrt,
                             bool create_graph) {
  if (!output.defined() || output.numel() != 1)
    throw std::invalid_argument("gradient: output must be a defined single-element tensor");
  std::vector<Tensor> result(wrt.size());
  auto zero_fill = [&] {
    for (size_t i = 0; i < wrt.size(); ++i)
      result[i] = Tensor::zeros(wrt[i].shape(), wrt[i].dtype());
  };
  if (!output.node) {
    zero_fill();
    return result;
  }

  // Collect reachable nodes; recording order is a topological order.
  std::vector<Node*> order;
  {
    std::unordered_set<Node*> seen;
    std::vector<Node*> stack{output.node.get()};
    seen.insert(output.node.get());
    while (!stack.empty()) {
      Node* n = stack.back();
      stack.pop_back();
      order.push_back(n);
      for (const auto& in : n->inputs)
        if (in.node && seen.insert(in.node.get()).second) stack.push_back(in.node.get());
    }
    std::sort(order.begin(), order.end(), [](Node* a, Node* b) { return a->seq < b->seq; });
  }

  std::unordered_set<Node*> targets;
  for (const auto& t : wrt)
    if (t.node) targets.insert(t.node.get());

  // need[n]: n is a target, or some input subtree contains one. Only needed
  // nodes receive gradient pushes; vjps for dead branches never run.
  std::unordered_map<Node*, bool> need;
  need.reserve(order.size());
  for (Node* n : order) {
    bool v = targets.count(n) > 0;
    if (!v)
      for (const auto& in : n->inputs)
        if (in.node) {
          auto it = need.find(in.node.get());
          if (it != need.end() && it->second) {
            v = true;
            break;
          }
        }
    need[n] = v;
  }

  std::unordered_map<Node*, Tensor> grads;
  grads[output.node.get()] = Tensor::full(output.shape(), 1.0, output.dtype());

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    auto git = grads.find(n);
    if (git == grads.end()) continue;
    if (n->is_leaf()) continue;
    bool needs_below = false;
    for (const auto& in : n->inputs)
      if (in.node && need[in.node.get()]) {
        needs_below = true;
        break;
      }
    if (!needs_below) {
      if (!targets.count(n)) grads.erase(git);
      continue;
    }
    Tensor g = git->second;
    std::vector<Tensor> input_grads;
    {
      GradMode gm(create_graph);
      input_grads = n->vjp(g);
    }
    if (input_grads.size() != n->inputs.size())
      throw std::logic_error("vjp returned wrong number of gradients");
    for (size_t i = 0; i < input_grads.size(); ++i) {
      const Tensor& gi = input_grads[i];
      if (!gi.defined()) continue;
      Node* parent = n->inputs[i].node.get();
      if (!parent || !need[parent]) continue;
      auto pit = grads.find(parent);
      if (pit == grads.end()) {
        grads.emplace(parent, gi);
      } else {
        GradMode gm(create_graph);
        pit->second = ops::add(pit->second, gi);
      }
    }
    if (!targets.count(n)) grads.erase(n);
  }

  for (size_t i = 0; i < wrt.size(); ++i) {
    Node* n = wrt[i].node.get();
    auto it = n ? grads.find(n) : grads.end();
    if (it != grads.end())
      result[i] = it->second;
    else
      result[i] = Tensor::zeros(wrt[i].shape(), wrt[i].dtype());
  }
  return result;
}

}  // namespace sv::ad
