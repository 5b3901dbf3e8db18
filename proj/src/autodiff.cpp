#include "cainn/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace cainn::ad {

namespace {

template <typename T>
void accumulate(Tensor<T>* dst, const Tensor<T>& src) {
  if (dst == nullptr) return;
  auto d = dst->data();
  auto s = src.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
}

// Sums `g` down to the broadcast operand's shape.
template <typename T>
void accumulate_reduced(Tensor<T>* dst, const Tensor<T>& g, Broadcast kind) {
  if (dst == nullptr) return;
  if (kind == Broadcast::None) {
    accumulate(dst, g);
    return;
  }
  const Shape& s = g.shape();
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t c = 0; c < s.c; ++c) {
      const T* pg = g.plane(n, c);
      if (kind == Broadcast::Channel) {
        T acc = 0;
        for (std::size_t i = 0; i < s.plane(); ++i) acc += pg[i];
        dst->at(n, c, 0, 0) += acc;
      } else {
        T* pd = dst->plane(n, 0);
        for (std::size_t i = 0; i < s.plane(); ++i) pd[i] += pg[i];
      }
    }
  }
}

}  // namespace

template <typename T>
Var<T> Tape<T>::push(Tensor<T> value, std::vector<std::size_t> inputs, Backward vjp, bool requires_grad) {
  nodes_.push_back(Node{std::move(value), std::move(inputs), std::move(vjp), requires_grad});
  return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
Var<T> Tape<T>::record(Tensor<T> value, std::initializer_list<Var<T>> inputs, Backward vjp) {
  std::vector<std::size_t> ids;
  ids.reserve(inputs.size());
  bool needs_grad = false;
  for (const Var<T>& v : inputs) {
    if (&v.tape() != this) throw ContractError("autodiff: operand belongs to a different tape");
    ids.push_back(v.id());
    needs_grad = needs_grad || nodes_[v.id()].requires_grad;
  }
  // Nodes that cannot reach a parameter keep no closure.
  if (!needs_grad) vjp = nullptr;
  return push(std::move(value), std::move(ids), std::move(vjp), needs_grad);
}

template <typename T>
Gradients<T> Tape<T>::backward(const Var<T>& loss) const {
  if (&loss.tape() != this) throw ContractError("backward: loss belongs to a different tape");
  const Tensor<T>& loss_value = value(loss.id());
  if (loss_value.numel() != 1) {
    throw ContractError("backward: loss must be scalar, got shape " + loss_value.shape().str());
  }
  std::vector<Tensor<T>> grads(nodes_.size());
  std::vector<bool> reached(nodes_.size(), false);
  grads[loss.id()] = Tensor<T>(loss_value.shape(), T(1));
  reached[loss.id()] = true;

  std::vector<Tensor<T>*> slots;
  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    const Node& node = nodes_[i];
    if (!reached[i] || !node.vjp) continue;
    slots.assign(node.inputs.size(), nullptr);
    for (std::size_t k = 0; k < node.inputs.size(); ++k) {
      const std::size_t in = node.inputs[k];
      if (!nodes_[in].requires_grad) continue;
      if (!reached[in]) {
        grads[in] = Tensor<T>(nodes_[in].value.shape());
        reached[in] = true;
      }
      slots[k] = &grads[in];
    }
    node.vjp(grads[i], std::span<Tensor<T>* const>(slots));
  }
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    if (!reached[i]) grads[i] = Tensor<T>(nodes_[i].value.shape());
  }
  return Gradients<T>(std::move(grads));
}

template <typename T>
Var<T> conv2d(const Var<T>& input, const Var<T>& weight) {
  Tape<T>& tape = input.tape();
  const std::size_t xi = input.id();
  const std::size_t wi = weight.id();
  return tape.record(cainn::conv2d(input.value(), weight.value()), {input, weight},
                     [&tape, xi, wi](const Tensor<T>& g, std::span<Tensor<T>* const> slots) {
                       const Tensor<T>& x = tape.value(xi);
                       const Tensor<T>& w = tape.value(wi);
                       if (slots[0]) accumulate(slots[0], conv2d_grad_input(g, w, x.shape()));
                       if (slots[1]) accumulate(slots[1], conv2d_grad_weight(g, x, w.shape()));
                     });
}

template <typename T>
Var<T> conv2d(const Var<T>& input, const Var<T>& weight, const Var<T>& bias) {
  Tape<T>& tape = input.tape();
  const std::size_t xi = input.id();
  const std::size_t wi = weight.id();
  return tape.record(cainn::conv2d(input.value(), weight.value(), bias.value()), {input, weight, bias},
                     [&tape, xi, wi](const Tensor<T>& g, std::span<Tensor<T>* const> slots) {
                       const Tensor<T>& x = tape.value(xi);
                       const Tensor<T>& w = tape.value(wi);
                       if (slots[0]) accumulate(slots[0], conv2d_grad_input(g, w, x.shape()));
                       if (slots[1]) accumulate(slots[1], conv2d_grad_weight(g, x, w.shape()));
                       if (slots[2]) accumulate(slots[2], conv2d_grad_bias(g));
                     });
}

template <typename T>
Var<T> global_pool(const Var<T>& input, PoolMode mode) {
  Tape<T>& tape = input.tape();
  const std::size_t xi = input.id();
  return tape.record(cainn::global_pool(input.value(), mode), {input},
                     [&tape, xi, mode](const Tensor<T>& g, std::span<Tensor<T>* const> slots) {
                       const Tensor<T>& x = tape.value(xi);
                       const Shape& s = x.shape();
                       Tensor<T>& dx = *slots[0];
                       for (std::size_t n = 0; n < s.n; ++n) {
                         for (std::size_t c = 0; c < s.c; ++c) {
                           const T gv = g.at(n, c, 0, 0);
                           T* pd = dx.plane(n, c);
                           if (mode == PoolMode::Avg) {
                             const T share = gv / static_cast<T>(s.plane());
                             for (std::size_t i = 0; i < s.plane(); ++i) pd[i] += share;
                           } else {
                             // max_element returns the first maximum in scan order.
                             const T* px = x.plane(n, c);
                             pd[std::max_element(px, px + s.plane()) - px] += gv;
                           }
                         }
                       }
                     });
}

template <typename T>
Var<T> channelwise_pool(const Var<T>& input, PoolMode mode) {
  Tape<T>& tape = input.tape();
  const std::size_t xi = input.id();
  return tape.record(cainn::channelwise_pool(input.value(), mode), {input},
                     [&tape, xi, mode](const Tensor<T>& g, std::span<Tensor<T>* const> slots) {
                       const Tensor<T>& x = tape.value(xi);
                       const Shape& s = x.shape();
                       Tensor<T>& dx = *slots[0];
                       for (std::size_t n = 0; n < s.n; ++n) {
                         const T* pg = g.plane(n, 0);
                         if (mode == PoolMode::Avg) {
                           const T inv = T(1) / static_cast<T>(s.c);
                           for (std::size_t c = 0; c < s.c; ++c) {
                             T* pd = dx.plane(n, c);
                             for (std::size_t i = 0; i < s.plane(); ++i) pd[i] += pg[i] * inv;
                           }
                         } else {
                           for (std::size_t i = 0; i < s.plane(); ++i) {
                             std::size_t best = 0;
                             for (std::size_t c = 1; c < s.c; ++c) {
                               if (x.plane(n, c)[i] > x.plane(n, best)[i]) best = c;
                             }
                             dx.plane(n, best)[i] += pg[i];
                           }
                         }
                       }
                     });
}

template <typename T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b) {
  const std::size_t ca = a.shape().c;
  const std::size_t cb = b.shape().c;
  return a.tape().record(cainn::concat_channels(a.value(), b.value()), {a, b},
                         [ca, cb](const Tensor<T>& g, std::span<Tensor<T>* const> slots) {
                           if (slots[0]) accumulate(slots[0], cainn::slice_channels(g, 0, ca));
                           if (slots[1]) accumulate(slots[1], cainn::slice_channels(g, ca, cb));
                         });
}

template <typename T>
Var<T> slice_channels(const Var<T>& input, std::size_t begin, std::size_t count) {
  return input.tape().record(cainn::slice_channels(input.value(), begin, count), {input},
                             [begin, count](const Tensor<T>& g, std::span<Tensor<T>* const> slots) {
                               Tensor<T>& dx = *slots[0];
                               const Shape& s = g.shape();
                               for (std::size_t n = 0; n < s.n; ++n) {
                                 const T* pg = g.plane(n, 0);
                                 T* pd = dx.plane(n, begin);
                                 for (std::size_t i = 0; i < count * s.plane(); ++i) pd[i] += pg[i];
                               }
                             });
}

template <typename T>
Var<T> map_unary(const Var<T>& input, UnaryOp op) {
  Tape<T>& tape = input.tape();
  const std::size_t xi = input.id();
  const std::size_t yi = tape.size();
  return tape.record(cainn::map_unary(input.value(), op), {input},
                     [&tape, xi, yi, op](const Tensor<T>& g, std::span<Tensor<T>* const> slots) {
                       auto dx = slots[0]->data();
                       auto y = tape.value(yi).data();
                       auto x = tape.value(xi).data();
                       auto gd = g.data();
                       switch (op) {
                         case UnaryOp::Exp:
                           for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += gd[i] * y[i];
                           break;
                         case UnaryOp::Tanh:
                           for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += gd[i] * (T(1) - y[i] * y[i]);
                           break;
                         case UnaryOp::Relu:
                           // Subgradient 0 at exactly 0.
                           for (std::size_t i = 0; i < dx.size(); ++i) {
                             if (x[i] > T(0)) dx[i] += gd[i];
                           }
                           break;
                         case UnaryOp::Sigmoid:
                           for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += gd[i] * y[i] * (T(1) - y[i]);
                           break;
                       }
                     });
}

template <typename T>
Var<T> elementwise(const Var<T>& a, const Var<T>& b, BinaryOp op) {
  Tape<T>& tape = a.tape();
  const Broadcast kind = broadcast_kind(a.shape(), b.shape());
  const std::size_t ai = a.id();
  const std::size_t bi = b.id();
  return tape.record(cainn::elementwise(a.value(), b.value(), op), {a, b},
                     [&tape, ai, bi, op, kind](const Tensor<T>& g, std::span<Tensor<T>* const> slots) {
                       if (op == BinaryOp::Add) {
                         accumulate(slots[0], g);
                         accumulate_reduced(slots[1], g, kind);
                         return;
                       }
                       if (slots[0]) accumulate(slots[0], cainn::elementwise(g, tape.value(bi), BinaryOp::Mul));
                       if (slots[1]) {
                         accumulate_reduced(slots[1], cainn::elementwise(g, tape.value(ai), BinaryOp::Mul), kind);
                       }
                     });
}

template <typename T>
Var<T> scale(const Var<T>& input, T factor) {
  return input.tape().record(cainn::scale(input.value(), factor), {input},
                             [factor](const Tensor<T>& g, std::span<Tensor<T>* const> slots) {
                               accumulate(slots[0], cainn::scale(g, factor));
                             });
}

template <typename T>
Var<T> permute_channels(const Var<T>& input, std::span<const std::size_t> perm) {
  std::vector<std::size_t> p(perm.begin(), perm.end());
  return input.tape().record(cainn::permute_channels(input.value(), perm), {input},
                             [p = std::move(p)](const Tensor<T>& g, std::span<Tensor<T>* const> slots) {
                               accumulate(slots[0], cainn::unpermute_channels(g, std::span<const std::size_t>(p)));
                             });
}

template <typename T>
Var<T> unpermute_channels(const Var<T>& input, std::span<const std::size_t> perm) {
  std::vector<std::size_t> p(perm.begin(), perm.end());
  return input.tape().record(cainn::unpermute_channels(input.value(), perm), {input},
                             [p = std::move(p)](const Tensor<T>& g, std::span<Tensor<T>* const> slots) {
                               accumulate(slots[0], cainn::permute_channels(g, std::span<const std::size_t>(p)));
                             });
}

template <typename T>
Var<T> sum(const Var<T>& input) {
  T acc = 0;
  for (T v : input.value().data()) acc += v;
  return input.tape().record(Tensor<T>(Shape{1, 1, 1, 1}, acc), {input},
                             [](const Tensor<T>& g, std::span<Tensor<T>* const> slots) {
                               const T gv = g[0];
                               for (T& d : slots[0]->data()) d += gv;
                             });
}

template <typename T>
Var<T> add_constant(const Var<T>& input, T constant) {
  Tensor<T> out = input.value();
  for (T& v : out.data()) v += constant;
  return input.tape().record(std::move(out), {input},
                             [](const Tensor<T>& g, std::span<Tensor<T>* const> slots) { accumulate(slots[0], g); });
}

namespace {

template <typename T>
double evaluate_scalar(const ScalarFunction<T>& f, const Tensor<T>& point) {
  Tape<T> tape;
  const Var<T> out = f(tape, tape.constant(point));
  if (out.value().numel() != 1) throw ContractError("grad_check: function must return a scalar");
  const double v = static_cast<double>(out.value()[0]);
  if (!std::isfinite(v)) throw NumericError("grad_check: function value is not finite");
  return v;
}

}  // namespace

template <typename T>
double grad_check(const ScalarFunction<T>& f, const Tensor<T>& point, double eps) {
  if (!(eps > 0.0)) throw ContractError("grad_check: eps must be positive");
  Tape<T> tape;
  const Var<T> p = tape.leaf(point);
  const Var<T> loss = f(tape, p);
  if (!std::isfinite(static_cast<double>(loss.value()[0]))) {
    throw NumericError("grad_check: function value is not finite");
  }
  const Tensor<T> analytic = tape.backward(loss)[p];

  double worst = 0.0;
  Tensor<T> probe = point;
  for (std::size_t i = 0; i < point.numel(); ++i) {
    const T original = probe[i];
    probe[i] = static_cast<T>(static_cast<double>(original) + eps);
    const double up = evaluate_scalar(f, probe);
    probe[i] = static_cast<T>(static_cast<double>(original) - eps);
    const double down = evaluate_scalar(f, probe);
    probe[i] = original;
    const double fd = (up - down) / (2.0 * eps);
    const double err = std::abs(static_cast<double>(analytic[i]) - fd) / std::max(1.0, std::abs(fd));
    worst = std::max(worst, err);
  }
  return worst;
}

#define CAINN_INSTANTIATE_AD(T)                                                         \
  template class Tape<T>;                                                               \
  template Var<T> conv2d<T>(const Var<T>&, const Var<T>&);                              \
  template Var<T> conv2d<T>(const Var<T>&, const Var<T>&, const Var<T>&);               \
  template Var<T> global_pool<T>(const Var<T>&, PoolMode);                              \
  template Var<T> channelwise_pool<T>(const Var<T>&, PoolMode);                         \
  template Var<T> concat_channels<T>(const Var<T>&, const Var<T>&);                     \
  template Var<T> slice_channels<T>(const Var<T>&, std::size_t, std::size_t);           \
  template Var<T> map_unary<T>(const Var<T>&, UnaryOp);                                 \
  template Var<T> elementwise<T>(const Var<T>&, const Var<T>&, BinaryOp);               \
  template Var<T> scale<T>(const Var<T>&, T);                                           \
  template Var<T> permute_channels<T>(const Var<T>&, std::span<const std::size_t>);     \
  template Var<T> unpermute_channels<T>(const Var<T>&, std::span<const std::size_t>);   \
  template Var<T> sum<T>(const Var<T>&);                                                \
  template Var<T> add_constant<T>(const Var<T>&, T);                                    \
  template double grad_check<T>(const ScalarFunction<T>&, const Tensor<T>&, double);

CAINN_INSTANTIATE_AD(float)
CAINN_INSTANTIATE_AD(double)

#undef CAINN_INSTANTIATE_AD

}  // namespace cainn::ad
