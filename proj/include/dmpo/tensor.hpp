#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <memory>
#include <unordered_map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "dmpo/common.hpp"

namespace dmpo {

using Shape = std::vector<std::int64_t>;

// Size-bucketed recycler for tensor storage. Training rebuilds the whole
// graph every step with identical shapes, so steady state reuses the same
// hot pages instead of returning them to the OS. Main thread only.
class BufferPool {
 public:
  static BufferPool& instance() {
    thread_local BufferPool p;  // one pool per training thread
    return p;
  }

  std::vector<double> acquire(std::size_t n) {
    auto it = buckets_.find(n);
    if (it != buckets_.end() && !it->second.empty()) {
      std::vector<double> v = std::move(it->second.back());
      it->second.pop_back();
      return v;
    }
    return std::vector<double>(n);  // freshly zeroed
  }

  void release(std::vector<double>&& v) {
    if (v.empty()) return;
    buckets_[v.size()].push_back(std::move(v));
  }

 private:
  std::unordered_map<std::size_t, std::vector<std::vector<double>>> buckets_;
};

inline std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (auto e : s) n *= e;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << "]";
  return os.str();
}

struct TensorNode {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // filled by a backward sweep, else empty
  bool requires_grad = false;
  const void* produced_on = nullptr;  // tape that recorded the producing op

  std::int64_t numel() const { return static_cast<std::int64_t>(value.size()); }

  ~TensorNode() {
    BufferPool::instance().release(std::move(value));
    BufferPool::instance().release(std::move(grad));
  }
};

// Value-semantics handle over a shared node. Ops create fresh nodes; values
// are never mutated after construction except for leaf parameters updated
// between tapes by the optimizer.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    Tensor t = uninitialized(std::move(shape), requires_grad);
    std::fill(t.node_->value.begin(), t.node_->value.end(), 0.0);
    return t;
  }

  // Storage from the pool with stale contents; for op outputs that overwrite
  // every element.
  static Tensor uninitialized(Shape shape, bool requires_grad = false) {
    auto n = std::make_shared<TensorNode>();
    std::int64_t count = shape_numel(shape);
    n->shape = std::move(shape);
    n->value = BufferPool::instance().acquire(static_cast<std::size_t>(count));
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor full(Shape shape, double v, bool requires_grad = false) {
    Tensor t = zeros(std::move(shape), requires_grad);
    for (auto& x : t.node_->value) x = v;
    return t;
  }

  static Tensor from(Shape shape, std::vector<double> data, bool requires_grad = false) {
    if (shape_numel(shape) != static_cast<std::int64_t>(data.size()))
      throw DimError("tensor data length " + std::to_string(data.size()) +
                     " does not match shape " + shape_str(shape));
    auto n = std::make_shared<TensorNode>();
    n->shape = std::move(shape);
    n->value = std::move(data);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor scalar(double v, bool requires_grad = false) {
    return from({1}, {v}, requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::int64_t dim(int i) const { return node_->shape[static_cast<std::size_t>(i)]; }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  std::int64_t numel() const { return node_->numel(); }
  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool b) { node_->requires_grad = b; }

  std::vector<double>& value() { return node_->value; }
  const std::vector<double>& value() const { return node_->value; }
  double* data() { return node_->value.data(); }
  const double* data() const { return node_->value.data(); }

  bool has_grad() const { return !node_->grad.empty(); }
  std::vector<double>& grad() {
    if (node_->grad.empty()) throw StateError("gradient not populated; run a backward sweep first");
    return node_->grad;
  }
  const std::vector<double>& grad() const {
    if (node_->grad.empty()) throw StateError("gradient not populated; run a backward sweep first");
    return node_->grad;
  }
  void clear_grad() {
    BufferPool::instance().release(std::move(node_->grad));
    node_->grad.clear();
  }

  double item() const {
    if (numel() != 1) throw DimError("item() requires a scalar, got shape " + shape_str(shape()));
    return node_->value[0];
  }

  // Value copy detached from any gradient history.
  Tensor detach() const {
    auto n = std::make_shared<TensorNode>();
    n->shape = node_->shape;
    n->value = node_->value;
    n->requires_grad = false;
    return Tensor(std::move(n));
  }

  std::shared_ptr<TensorNode> node() const { return node_; }

  explicit Tensor(std::shared_ptr<TensorNode> n) : node_(std::move(n)) {}

 private:
  std::shared_ptr<TensorNode> node_;
};

// Define-by-run tape. One tape is built per forward pass; backward replays
// the recorded ops in reverse. A second sweep on the same tape is rejected.
class Tape {
 public:
  Tape() { stack().push_back(this); }

  ~Tape() {
    auto& s = stack();
    for (auto it = s.rbegin(); it != s.rend(); ++it) {
      if (*it == this) {
        s.erase(std::next(it).base());
        break;
      }
    }
  }

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active() {
    auto& s = stack();
    return s.empty() ? nullptr : s.back();
  }

  void record(std::shared_ptr<TensorNode> out,
              std::vector<std::shared_ptr<TensorNode>> grad_participants,
              std::function<void()> backward_fn) {
    out->produced_on = this;
    Entry e;
    e.fn = std::move(backward_fn);
    entries_.push_back(std::move(e));
    for (auto& p : grad_participants) {
      if (p->requires_grad) touched_.push_back(std::move(p));
    }
    touched_.push_back(std::move(out));
  }

  std::size_t size() const { return entries_.size(); }

  void backward(const Tensor& result) {
    if (swept_) throw StateError("backward sweep already ran on this tape; rebuild the forward pass");
    if (result.numel() != 1)
      throw DimError("backward sweep requires a scalar result, got shape " + shape_str(result.shape()));
    if (result.node()->produced_on != this)
      throw StateError("result was not produced on the active tape");
    swept_ = true;
    for (auto& n : touched_) {
      if (n->grad.size() != n->value.size()) {
        BufferPool::instance().release(std::move(n->grad));
        n->grad = BufferPool::instance().acquire(n->value.size());
      }
      std::fill(n->grad.begin(), n->grad.end(), 0.0);
    }
    result.node()->grad[0] = 1.0;
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
      it->fn();
    }
  }

 private:
  struct Entry {
    std::function<void()> fn;
  };

  static std::vector<Tape*>& stack() {
    thread_local std::vector<Tape*> s;  // independent tapes per thread
    return s;
  }

  std::vector<Entry> entries_;
  std::vector<std::shared_ptr<TensorNode>> touched_;
  bool swept_ = false;
};

namespace detail {

// True when the op must be recorded: a tape is active and some input
// participates in differentiation.
inline bool tracing(std::initializer_list<const Tensor*> inputs) {
  if (!Tape::active()) return false;
  for (const Tensor* t : inputs)
    if (t->requires_grad()) return true;
  return false;
}

}  // namespace detail

}  // namespace dmpo
