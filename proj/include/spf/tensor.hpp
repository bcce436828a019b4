#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "spf/parallel.hpp"

namespace spf {

using Shape = std::vector<std::int64_t>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "(";
  for (std::size_t i = 0; i < s.size(); ++i) os << s[i] << (i + 1 < s.size() ? "," : "");
  os << ")";
  return os.str();
}

[[noreturn]] inline void fail(const std::string& msg) { throw std::invalid_argument(msg); }

inline void check(bool ok, const std::string& msg) {
  if (!ok) fail(msg);
}

inline std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

template <typename T>
struct TensorStorage {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // allocated on first accumulation
  bool requires_grad = false;
};

// Dense row-major value array with optional gradient tracking. Copies are
// shallow handles onto shared storage; values are never mutated after an
// operation produces them (gradient accumulation and optimizer updates are
// the two sanctioned exceptions).
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return Tensor(std::move(shape), requires_grad);
  }

  static Tensor full(Shape shape, T v, bool requires_grad = false) {
    Tensor t(std::move(shape), requires_grad);
    std::fill(t.s_->data.begin(), t.s_->data.end(), v);
    return t;
  }

  static Tensor from(Shape shape, std::vector<T> values, bool requires_grad = false) {
    check(shape_numel(shape) == std::int64_t(values.size()),
          "tensor data length " + std::to_string(values.size()) + " does not match shape " + shape_str(shape));
    Tensor t;
    t.s_ = std::make_shared<TensorStorage<T>>();
    t.s_->shape = std::move(shape);
    t.s_->data = std::move(values);
    t.s_->requires_grad = requires_grad;
    return t;
  }

  static Tensor scalar(T v, bool requires_grad = false) { return from({1}, {v}, requires_grad); }

  bool defined() const { return bool(s_); }
  const Shape& shape() const { return s_->shape; }
  int rank() const { return int(s_->shape.size()); }
  std::int64_t dim(int i) const { return s_->shape[std::size_t(i)]; }
  std::int64_t numel() const { return std::int64_t(s_->data.size()); }

  T* data() { return s_->data.data(); }
  const T* data() const { return s_->data.data(); }
  std::vector<T>& values() { return s_->data; }
  const std::vector<T>& values() const { return s_->data; }

  T item() const {
    check(numel() == 1, "item() requires a scalar tensor, got shape " + shape_str(shape()));
    return s_->data[0];
  }

  bool requires_grad() const { return s_ && s_->requires_grad; }
  void set_requires_grad(bool rg) { s_->requires_grad = rg; }

  bool has_grad() const { return s_ && !s_->grad.empty(); }

  // grad buffer, allocated to zeros on first use
  std::vector<T>& grad() {
    if (s_->grad.empty()) s_->grad.assign(s_->data.size(), T(0));
    return s_->grad;
  }
  const std::vector<T>& grad() const { return s_->grad; }

  void zero_grad() {
    if (s_ && !s_->grad.empty()) std::fill(s_->grad.begin(), s_->grad.end(), T(0));
  }

  Tensor clone() const {
    Tensor t;
    t.s_ = std::make_shared<TensorStorage<T>>();
    t.s_->shape = s_->shape;
    t.s_->data = s_->data;
    t.s_->requires_grad = s_->requires_grad;
    return t;
  }

  bool same_storage(const Tensor& o) const { return s_ == o.s_; }

  std::shared_ptr<TensorStorage<T>> storage() const { return s_; }

 private:
  Tensor(Shape shape, bool requires_grad) {
    tune_allocator();
    s_ = std::make_shared<TensorStorage<T>>();
    s_->data.assign(std::size_t(shape_numel(shape)), T(0));
    s_->shape = std::move(shape);
    s_->requires_grad = requires_grad;
  }

  std::shared_ptr<TensorStorage<T>> s_;
};

// Recorded-operation reverse-mode tape. Operations executed inside a
// Tape::Scope append their backward rules in forward order; backward()
// replays them exactly once in reverse. A tape can be consumed only once;
// calling backward() again is rejected (gradients on leaves accumulate
// additively across tapes until explicitly zeroed).
template <typename T>
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  class Scope {
   public:
    explicit Scope(Tape& t) : prev_(active_) { active_ = &t; }
    ~Scope() { active_ = prev_; }
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    Tape* prev_;
  };

  static Tape* active() { return active_; }

  void record(std::function<void()> backward_rule) { recs_.push_back(std::move(backward_rule)); }

  std::size_t size() const { return recs_.size(); }

  void backward(Tensor<T> loss) {
    check(loss.defined() && loss.numel() == 1,
          "backward requires a scalar loss, got shape " + (loss.defined() ? shape_str(loss.shape()) : std::string("<empty>")));
    check(!consumed_, "tape already consumed; record a fresh tape per backward pass");
    loss.grad()[0] += T(1);
    for (auto it = recs_.rbegin(); it != recs_.rend(); ++it) (*it)();
    consumed_ = true;
    recs_.clear();
  }

 private:
  std::vector<std::function<void()>> recs_;
  bool consumed_ = false;
  static thread_local Tape* active_;
};

template <typename T>
thread_local Tape<T>* Tape<T>::active_ = nullptr;

namespace detail {

// Broadcast classes accepted for binary elementwise operations. Only the
// patterns the network actually uses: equal shapes, a 1-element scalar, and
// a channel-1 map over the channel axis of a 4-D tensor.
enum class Bcast { Same, Scalar, ChannelMap };

template <typename T>
Bcast classify_broadcast(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() == b.shape()) return Bcast::Same;
  if (b.numel() == 1) return Bcast::Scalar;
  if (a.rank() == 4 && b.rank() == 4 && b.dim(0) == a.dim(0) && b.dim(1) == 1 && b.dim(2) == a.dim(2) &&
      b.dim(3) == a.dim(3))
    return Bcast::ChannelMap;
  fail(std::string(op) + ": shapes not broadcastable: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

// index of b's element matching flat index i of a
template <typename T>
inline std::int64_t bcast_index(Bcast bc, const Tensor<T>& a, std::int64_t i) {
  switch (bc) {
    case Bcast::Same:
      return i;
    case Bcast::Scalar:
      return 0;
    case Bcast::ChannelMap: {
      const std::int64_t hw = a.dim(2) * a.dim(3);
      const std::int64_t chw = a.dim(1) * hw;
      return (i / chw) * hw + (i % hw);
    }
  }
  return 0;
}

template <typename T>
bool any_requires_grad(std::initializer_list<Tensor<T>> ts) {
  for (const auto& t : ts)
    if (t.requires_grad()) return true;
  return false;
}

template <typename T>
void maybe_record(Tensor<T>& out, std::initializer_list<Tensor<T>> inputs, std::function<void()> rule) {
  if (auto* tp = Tape<T>::active(); tp && any_requires_grad(inputs)) {
    out.set_requires_grad(true);
    tp->record(std::move(rule));
  }
}

}  // namespace detail

template <typename T, typename FwdFn, typename DaFn, typename DbFn>
Tensor<T> binary_op(const char* name, const Tensor<T>& a, const Tensor<T>& b, FwdFn fwd, DaFn da_rule, DbFn db_rule) {
  const auto bc = detail::classify_broadcast(a, b, name);
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  const T* pa = a.data();
  const T* pb = b.data();
  T* po = out.data();
  const std::int64_t n = a.numel();
  for (std::int64_t i = 0; i < n; ++i) po[i] = fwd(pa[i], pb[detail::bcast_index(bc, a, i)]);
  detail::maybe_record(out, {a, b}, [=]() mutable {
    const auto& g = out.grad();
    if (a.requires_grad()) {
      auto& ga = a.storage()->grad;
      if (ga.empty()) ga.assign(std::size_t(a.numel()), T(0));
      for (std::int64_t i = 0; i < n; ++i) ga[std::size_t(i)] += da_rule(g[std::size_t(i)], a.data()[i], b.data()[detail::bcast_index(bc, a, i)]);
    }
    if (b.requires_grad()) {
      auto& gb = b.storage()->grad;
      if (gb.empty()) gb.assign(std::size_t(b.numel()), T(0));
      for (std::int64_t i = 0; i < n; ++i) gb[std::size_t(detail::bcast_index(bc, a, i))] += db_rule(g[std::size_t(i)], a.data()[i], b.data()[detail::bcast_index(bc, a, i)]);
    }
  });
  return out;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op(
      "add", a, b, [](T x, T y) { return x + y; }, [](T g, T, T) { return g; }, [](T g, T, T) { return g; });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op(
      "sub", a, b, [](T x, T y) { return x - y; }, [](T g, T, T) { return g; }, [](T g, T, T) { return -g; });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op(
      "mul", a, b, [](T x, T y) { return x * y; }, [](T g, T, T y) { return g * y; }, [](T g, T x, T) { return g * x; });
}

template <typename T, typename FwdFn, typename BackFn>
Tensor<T> unary_op(const Tensor<T>& a, FwdFn fwd, BackFn back) {
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  const T* pa = a.data();
  T* po = out.data();
  const std::int64_t n = a.numel();
  for (std::int64_t i = 0; i < n; ++i) po[i] = fwd(pa[i]);
  detail::maybe_record(out, {a}, [=]() mutable {
    const auto& g = out.grad();
    auto& ga = a.storage()->grad;
    if (ga.empty()) ga.assign(std::size_t(a.numel()), T(0));
    for (std::int64_t i = 0; i < n; ++i) ga[std::size_t(i)] += back(g[std::size_t(i)], a.data()[i], out.data()[i]);
  });
  return out;
}

template <typename T>
Tensor<T> scalar_mul(const Tensor<T>& a, T c) {
  return unary_op(a, [c](T x) { return c * x; }, [c](T g, T, T) { return c * g; });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  return unary_op(a, [](T x) { return x > T(0) ? x : T(0); }, [](T g, T x, T) { return x > T(0) ? g : T(0); });
}

template <typename T>
Tensor<T> leaky_relu(const Tensor<T>& a, T slope) {
  return unary_op(a, [slope](T x) { return x > T(0) ? x : slope * x; },
                  [slope](T g, T x, T) { return x > T(0) ? g : slope * g; });
}

template <typename T>
Tensor<T> tanh_op(const Tensor<T>& a) {
  return unary_op(a, [](T x) { return std::tanh(x); }, [](T g, T, T y) { return g * (T(1) - y * y); });
}

// subgradient 0 at the kink
template <typename T>
Tensor<T> abs_op(const Tensor<T>& a) {
  return unary_op(a, [](T x) { return std::abs(x); },
                  [](T g, T x, T) { return x > T(0) ? g : (x < T(0) ? -g : T(0)); });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  Tensor<T> out = Tensor<T>::zeros({1});
  const T* pa = a.data();
  T acc = 0;
  const std::int64_t n = a.numel();
  for (std::int64_t i = 0; i < n; ++i) acc += pa[i];
  out.data()[0] = acc;
  detail::maybe_record(out, {a}, [=]() mutable {
    const T g = out.grad()[0];
    auto& ga = a.storage()->grad;
    if (ga.empty()) ga.assign(std::size_t(a.numel()), T(0));
    for (std::int64_t i = 0; i < n; ++i) ga[std::size_t(i)] += g;
  });
  return out;
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  check(shape_numel(shape) == a.numel(),
        "reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  Tensor<T> out = Tensor<T>::from(std::move(shape), a.values());
  detail::maybe_record(out, {a}, [=]() mutable {
    const auto& g = out.grad();
    auto& ga = a.storage()->grad;
    if (ga.empty()) ga.assign(std::size_t(a.numel()), T(0));
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
  return out;
}

// dtype conversion at data boundaries; not differentiable
template <typename To, typename From>
Tensor<To> cast_to(const Tensor<From>& a) {
  std::vector<To> v(std::size_t(a.numel()));
  for (std::int64_t i = 0; i < a.numel(); ++i) v[std::size_t(i)] = To(a.data()[i]);
  return Tensor<To>::from(a.shape(), std::move(v));
}

// concatenate 4-D tensors along the channel axis
template <typename T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& parts) {
  check(!parts.empty(), "concat_channels: no inputs");
  const auto& s0 = parts[0].shape();
  check(s0.size() == 4, "concat_channels: expects 4-D tensors, got " + shape_str(s0));
  std::int64_t ctot = 0;
  for (const auto& p : parts) {
    check(p.rank() == 4 && p.dim(0) == s0[0] && p.dim(2) == s0[2] && p.dim(3) == s0[3],
          "concat_channels: incompatible shape " + shape_str(p.shape()) + " vs " + shape_str(s0));
    ctot += p.dim(1);
  }
  Tensor<T> out = Tensor<T>::zeros({s0[0], ctot, s0[2], s0[3]});
  const std::int64_t hw = s0[2] * s0[3];
  const std::int64_t b_count = s0[0];
  std::int64_t coff = 0;
  for (const auto& p : parts) {
    const std::int64_t pc = p.dim(1);
    for (std::int64_t b = 0; b < b_count; ++b)
      std::copy_n(p.data() + b * pc * hw, pc * hw, out.data() + (b * ctot + coff) * hw);
    coff += pc;
  }
  bool any_rg = false;
  for (const auto& p : parts) any_rg = any_rg || p.requires_grad();
  if (auto* tp = Tape<T>::active(); tp && any_rg) {
    out.set_requires_grad(true);
    auto parts_copy = parts;
    tp->record([=]() mutable {
      const auto& g = out.grad();
      std::int64_t off = 0;
      for (auto& p : parts_copy) {
        const std::int64_t pc = p.dim(1);
        if (p.requires_grad()) {
          auto& gp = p.storage()->grad;
          if (gp.empty()) gp.assign(std::size_t(p.numel()), T(0));
          for (std::int64_t b = 0; b < b_count; ++b) {
            const T* src = g.data() + (b * ctot + off) * hw;
            T* dst = gp.data() + b * pc * hw;
            for (std::int64_t i = 0; i < pc * hw; ++i) dst[i] += src[i];
          }
        }
        off += pc;
      }
    });
  }
  return out;
}

}  // namespace spf
