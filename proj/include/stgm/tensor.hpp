#pragma once

// Dense row-major double tensor and the reverse-mode tape that records
// operations on it.
//
// A Tensor is a cheap handle: copies share the same storage. Operations never
// mutate their inputs, so sharing is only observable through mutable_values(),
// which is meant for leaves (parameters, freshly built inputs).
//
// Recording is opt-in: operations append a node to the thread's active Tape
// (see TapeScope) whenever at least one input is tracked on it. A tensor is
// tracked if it was produced by a recorded operation on that tape or if its
// storage has requires_grad set, in which case it becomes a leaf on first use.

#include <atomic>
#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "stgm/errors.hpp"

namespace stgm {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

class Tape;
class Tensor;

// Gradient buffers of an operation's inputs during the backward sweep. An
// input that is not tracked gets an empty span and must be skipped.
struct GradRefs {
  std::vector<std::vector<double>*> slots;
  bool has(std::size_t k) const { return slots[k] != nullptr; }
  std::span<double> operator[](std::size_t k) const {
    if (!slots[k]) return {};
    return *slots[k];
  }
};

using BackwardFn = std::function<void(std::span<const double> gout, GradRefs& grads)>;


namespace detail {

struct Storage {
  std::vector<double> data;
  std::vector<double> grad;
  bool requires_grad = false;
};

inline Tape* active_tape_slot(Tape* replace, bool set);

// A double is non-finite exactly when its exponent bits are all set; adding
// one exponent step then carries into the sign bit. Branch-free so it vectorizes.
inline bool all_finite(std::span<const double> v) {
  constexpr std::uint64_t kExp = 0x7ff0000000000000ULL, kStep = 0x0010000000000000ULL;
  std::uint64_t acc = 0;
  for (double d : v) acc |= (std::bit_cast<std::uint64_t>(d) & kExp) + kStep;
  return (acc >> 63) == 0;
}

}  // namespace detail

class Tensor {
 public:
  Tensor() : Tensor(Shape{}, 0.0) {}

  explicit Tensor(Shape shape, double fill = 0.0)
      : shape_(std::move(shape)), st_(std::make_shared<detail::Storage>()) {
    st_->data.assign(shape_numel(shape_), fill);
  }

  Tensor(Shape shape, std::vector<double> values)
      : shape_(std::move(shape)), st_(std::make_shared<detail::Storage>()) {
    if (values.size() != shape_numel(shape_)) {
      throw DimensionError("tensor: " + std::to_string(values.size()) +
                           " values do not fill shape " + shape_str(shape_));
    }
    st_->data = std::move(values);
  }

  static Tensor scalar(double v) { return Tensor(Shape{}, v); }

  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t n = rows.size();
    const std::size_t m = n ? rows.begin()->size() : 0;
    std::vector<double> v;
    v.reserve(n * m);
    for (const auto& r : rows) {
      if (r.size() != m) throw DimensionError("tensor: ragged matrix literal");
      v.insert(v.end(), r.begin(), r.end());
    }
    return Tensor({n, m}, std::move(v));
  }

  static Tensor vector(std::vector<double> v) {
    const std::size_t n = v.size();
    return Tensor({n}, std::move(v));
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t numel() const { return st_->data.size(); }

  std::span<const double> values() const { return st_->data; }
  std::span<double> mutable_values() { return st_->data; }
  const double* data() const { return st_->data.data(); }

  double operator[](std::size_t i) const { return st_->data[i]; }

  double at(std::initializer_list<std::size_t> idx) const { return st_->data[offset(idx)]; }

  double item() const {
    if (numel() != 1) throw ContractError("tensor: item() on " + shape_str(shape_));
    return st_->data[0];
  }

  bool requires_grad() const { return st_->requires_grad; }
  Tensor& set_requires_grad(bool on = true) {
    st_->requires_grad = on;
    return *this;
  }

  // Gradient accumulated into this tensor's storage by the last backward
  // pass. Empty until a backward pass reaches (or registers) the leaf.
  std::span<const double> grad() const { return st_->grad; }
  void zero_grad() { std::fill(st_->grad.begin(), st_->grad.end(), 0.0); }

  std::optional<std::int64_t> tape_id() const {
    if (node_ < 0) return std::nullopt;
    return node_;
  }

  // Deep copy detached from any tape.
  Tensor clone() const { return Tensor(shape_, st_->data); }

  bool shares_storage(const Tensor& other) const { return st_ == other.st_; }

 private:
  friend class Tape;
  friend Tensor record_op(Tensor, std::span<const Tensor* const>, BackwardFn);
  friend Tensor reshape(const Tensor&, Shape);

  std::size_t offset(std::initializer_list<std::size_t> idx) const {
    if (idx.size() != shape_.size()) throw DimensionError("tensor: index rank mismatch");
    std::size_t off = 0;
    std::size_t k = 0;
    for (std::size_t i : idx) {
      if (i >= shape_[k]) throw DimensionError("tensor: index out of range");
      off = off * shape_[k] + i;
      ++k;
    }
    return off;
  }

  Shape shape_;
  std::shared_ptr<detail::Storage> st_;
  std::int64_t node_ = -1;
  std::uint64_t tape_serial_ = 0;
};

class Tape {
 public:
  enum class Mode {
    single,      // one backward per tape; leaf gradients are overwritten
    accumulate,  // repeated backward passes add into leaf gradients
  };

  explicit Tape(Mode mode = Mode::single) : mode_(mode), serial_(next_serial()) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Registers a trainable leaf. Registered leaves always receive a gradient
  // of their own shape after backward, zeros when the loss does not depend
  // on them.
  void watch(Tensor& t) {
    t.set_requires_grad(true);
    leaf_node(t.st_, t.numel());
    params_.push_back(t.st_);
  }

  std::size_t size() const { return nodes_.size(); }

  void backward(const Tensor& loss) {
    if (loss.numel() != 1) {
      throw ContractError("backward: loss must be scalar, got " + shape_str(loss.shape()));
    }
    if (loss.tape_serial_ != serial_ || loss.node_ < 0) {
      throw ContractError("backward: loss is not recorded on this tape");
    }
    if (mode_ == Mode::single && backward_done_) {
      throw ContractError("backward: tape already consumed; use Tape::Mode::accumulate to replay");
    }
    backward_done_ = true;

    if (mode_ == Mode::single) {
      for (auto& n : nodes_) {
        if (n.leaf) n.leaf->grad.assign(n.leaf->data.size(), 0.0);
      }
    }

    std::vector<std::vector<double>> grads(nodes_.size());
    const auto root = static_cast<std::size_t>(loss.node_);
    grads[root].assign(1, 1.0);
    GradRefs refs;
    for (std::size_t i = root + 1; i-- > 0;) {
      if (grads[i].empty()) continue;
      Node& n = nodes_[i];
      if (n.leaf) {
        auto& g = n.leaf->grad;
        if (g.size() != grads[i].size()) g.assign(grads[i].size(), 0.0);
        for (std::size_t k = 0; k < g.size(); ++k) g[k] += grads[i][k];
      }
      if (n.fn) {
        refs.slots.assign(n.parents.size(), nullptr);
        for (std::size_t k = 0; k < n.parents.size(); ++k) {
          const auto p = n.parents[k];
          if (p < 0) continue;
          auto& pg = grads[static_cast<std::size_t>(p)];
          if (pg.empty()) pg.assign(nodes_[static_cast<std::size_t>(p)].numel, 0.0);
          refs.slots[k] = &pg;
        }
        n.fn(grads[i], refs);
      }
      std::vector<double>().swap(grads[i]);
    }

    for (auto& st : params_) {
      if (st->grad.size() != st->data.size()) st->grad.assign(st->data.size(), 0.0);
    }
  }

 private:
  friend Tensor record_op(Tensor, std::span<const Tensor* const>, BackwardFn);

  struct Node {
    std::vector<std::int64_t> parents;
    BackwardFn fn;
    std::shared_ptr<detail::Storage> leaf;
    std::size_t numel = 0;
  };

  std::int64_t leaf_node(const std::shared_ptr<detail::Storage>& st, std::size_t numel) {
    auto it = leaf_ids_.find(st.get());
    if (it != leaf_ids_.end()) return it->second;
    const auto id = static_cast<std::int64_t>(nodes_.size());
    nodes_.push_back(Node{{}, {}, st, numel});
    leaf_ids_.emplace(st.get(), id);
    return id;
  }

  std::int64_t resolve(const Tensor& t) {
    if (t.tape_serial_ == serial_ && t.node_ >= 0) return t.node_;
    if (t.st_->requires_grad) return leaf_node(t.st_, t.numel());
    return -1;
  }

  static std::uint64_t next_serial() {
    static std::atomic<std::uint64_t> counter{0};
    return ++counter;
  }

  Mode mode_;
  std::uint64_t serial_;
  bool backward_done_ = false;
  std::vector<Node> nodes_;
  std::unordered_map<const detail::Storage*, std::int64_t> leaf_ids_;
  std::vector<std::shared_ptr<detail::Storage>> params_;
};

namespace detail {

inline Tape* active_tape_slot(Tape* replace, bool set) {
  thread_local Tape* active = nullptr;
  Tape* prev = active;
  if (set) active = replace;
  return prev;
}

}  // namespace detail

inline Tape* active_tape() { return detail::active_tape_slot(nullptr, false); }

// Makes `tape` the active recording tape of the current thread for the
// lifetime of the scope.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape) : prev_(detail::active_tape_slot(&tape, true)) {}
  ~TapeScope() { detail::active_tape_slot(prev_, true); }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* prev_;
};

// Suspends recording for the lifetime of the scope.
class NoGradScope {
 public:
  NoGradScope() : prev_(detail::active_tape_slot(nullptr, true)) {}
  ~NoGradScope() { detail::active_tape_slot(prev_, true); }
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape* prev_;
};

// Attaches `out` to the active tape with the given inputs and backward
// closure. Returns `out` unchanged when nothing is being recorded.
inline Tensor record_op(Tensor out, std::span<const Tensor* const> inputs, BackwardFn fn) {
  if (!detail::all_finite(out.st_->data)) throw NumericError("non-finite value produced in forward pass");
  Tape* tape = active_tape();
  if (!tape) return out;
  std::vector<std::int64_t> parents;
  parents.reserve(inputs.size());
  bool any = false;
  for (const Tensor* t : inputs) {
    parents.push_back(tape->resolve(*t));
    any = any || parents.back() >= 0;
  }
  if (!any) return out;
  out.node_ = static_cast<std::int64_t>(tape->nodes_.size());
  out.tape_serial_ = tape->serial_;
  tape->nodes_.push_back(Tape::Node{std::move(parents), std::move(fn), nullptr, out.numel()});
  return out;
}

inline Tensor record_op(Tensor out, std::initializer_list<const Tensor*> inputs, BackwardFn fn) {
  return record_op(std::move(out), std::span<const Tensor* const>(inputs.begin(), inputs.size()),
                   std::move(fn));
}

}  // namespace stgm
