#include "smmrec/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include <Eigen/Core>
#include <fmt/format.h>

#include "smmrec/errors.hpp"
#include "smmrec/random.hpp"

namespace smmrec::ad {

std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  return fmt::format("[{}]", fmt::join(shape, ", "));
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> values, bool requires_grad)
    : storage_(std::make_shared<TensorStorage<T>>()) {
  if (numel(shape) != values.size()) {
    throw DimensionError(fmt::format("shape {} needs {} values, got {}", shape_str(shape),
                                     numel(shape), values.size()));
  }
  storage_->shape = std::move(shape);
  storage_->value = std::move(values);
  storage_->requires_grad = requires_grad;
}

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
  auto n = numel(shape);
  return Tensor(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
  return Tensor(Shape{}, std::vector<T>{value}, requires_grad);
}

template <typename T>
std::size_t Tensor<T>::dim(int axis) const {
  const auto r = static_cast<int>(rank());
  int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    throw DimensionError(fmt::format("axis {} out of range for shape {}", axis, shape_str(shape())));
  }
  return shape()[static_cast<std::size_t>(a)];
}

template <typename T>
T Tensor<T>::item() const {
  if (size() != 1) {
    throw UsageError(fmt::format("item() on tensor of shape {}", shape_str(shape())));
  }
  return storage_->value[0];
}

template <typename T>
std::span<T> Tensor<T>::mutable_grad() {
  if (storage_->grad.empty()) storage_->grad.assign(storage_->value.size(), T(0));
  return storage_->grad;
}

namespace {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMatrix<T>>;

template <typename T>
std::vector<T>& grad_buffer(TensorStorage<T>& s) {
  if (s.grad.empty()) s.grad.assign(s.value.size(), T(0));
  return s.grad;
}

std::size_t normalize_axis(int axis, std::size_t rank, const Shape& shape) {
  const auto r = static_cast<int>(rank);
  int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    throw DimensionError(fmt::format("axis {} out of range for shape {}", axis, shape_str(shape)));
  }
  return static_cast<std::size_t>(a);
}

// Splits `shape` around `axis` into (outer, axis length, inner).
struct AxisSplit {
  std::size_t outer = 1, length = 1, inner = 1;
};

AxisSplit split_at(const Shape& shape, std::size_t axis) {
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.length = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

bool is_trailing_suffix(const Shape& full, const Shape& suffix) {
  if (suffix.size() > full.size()) return false;
  return std::equal(suffix.rbegin(), suffix.rend(), full.rbegin());
}

template <typename T>
T gelu_value(T x) {
  return T(0.5) * x * (T(1) + std::erf(x / std::sqrt(T(2))));
}

template <typename T>
T gelu_derivative(T x) {
  const T cdf = T(0.5) * (T(1) + std::erf(x / std::sqrt(T(2))));
  const T pdf = std::exp(T(-0.5) * x * x) / std::sqrt(T(2) * T(3.14159265358979323846));
  return cdf + x * pdf;
}

template <typename T>
T sigmoid_value(T x) {
  if (x >= 0) return T(1) / (T(1) + std::exp(-x));
  T e = std::exp(x);
  return e / (T(1) + e);
}

}  // namespace

template <typename T>
Tensor<T> Tape<T>::finish(Tensor<T> out, std::initializer_list<const Tensor<T>*> inputs,
                          std::function<void()> backward_fn) {
  if (!record_) return out;
  bool any = false;
  for (const auto* in : inputs) any = any || in->requires_grad();
  if (!any) return out;
  out.set_requires_grad(true);
  entries_.push_back(std::move(backward_fn));
  return out;
}

template <typename T>
Tensor<T> Tape<T>::add(const Tensor<T>& a, const Tensor<T>& b) {
  if (!is_trailing_suffix(a.shape(), b.shape())) {
    throw DimensionError(fmt::format("add: shapes {} and {} are incompatible",
                                     shape_str(a.shape()), shape_str(b.shape())));
  }
  const std::size_t n = a.size(), m = b.size();
  std::vector<T> v(a.values().begin(), a.values().end());
  auto bv = b.values();
  for (std::size_t i = 0; i < n; ++i) v[i] += bv[i % m];
  Tensor<T> out(a.shape(), std::move(v));
  auto as = a.storage(), bs = b.storage(), os = out.storage();
  return finish(out, {&a, &b}, [as, bs, os, n, m] {
    if (os->grad.empty()) return;
    const auto& g = os->grad;
    if (as->requires_grad) {
      auto& ga = grad_buffer(*as);
      for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
    }
    if (bs->requires_grad) {
      auto& gb = grad_buffer(*bs);
      for (std::size_t i = 0; i < n; ++i) gb[i % m] += g[i];
    }
  });
}

template <typename T>
Tensor<T> Tape<T>::mul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError(fmt::format("mul: shapes {} and {} differ", shape_str(a.shape()),
                                     shape_str(b.shape())));
  }
  std::vector<T> v(a.size());
  auto av = a.values(), bv = b.values();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = av[i] * bv[i];
  Tensor<T> out(a.shape(), std::move(v));
  auto as = a.storage(), bs = b.storage(), os = out.storage();
  return finish(out, {&a, &b}, [as, bs, os] {
    if (os->grad.empty()) return;
    const auto& g = os->grad;
    if (as->requires_grad) {
      auto& ga = grad_buffer(*as);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bs->value[i];
    }
    if (bs->requires_grad) {
      auto& gb = grad_buffer(*bs);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * as->value[i];
    }
  });
}

template <typename T>
Tensor<T> Tape<T>::scale(const Tensor<T>& a, T factor) {
  std::vector<T> v(a.values().begin(), a.values().end());
  for (auto& x : v) x *= factor;
  Tensor<T> out(a.shape(), std::move(v));
  auto as = a.storage(), os = out.storage();
  return finish(out, {&a}, [as, os, factor] {
    if (os->grad.empty()) return;
    auto& ga = grad_buffer(*as);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += factor * os->grad[i];
  });
}

template <typename T>
Tensor<T> Tape<T>::sum(const Tensor<T>& a) {
  T total = std::accumulate(a.values().begin(), a.values().end(), T(0));
  Tensor<T> out = Tensor<T>::scalar(total);
  auto as = a.storage(), os = out.storage();
  return finish(out, {&a}, [as, os] {
    if (os->grad.empty()) return;
    auto& ga = grad_buffer(*as);
    for (auto& g : ga) g += os->grad[0];
  });
}

template <typename T>
Tensor<T> Tape<T>::matmul(const Tensor<T>& a, const Tensor<T>& b) {
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  auto mismatch = [&] {
    return DimensionError(
        fmt::format("matmul: shapes {} and {} are incompatible", shape_str(sa), shape_str(sb)));
  };
  if (sa.size() < 2 || sb.size() < 2) throw mismatch();
  const std::size_t m = sa[sa.size() - 2], k = sa.back();
  const std::size_t kb = sb[sb.size() - 2], n = sb.back();
  if (k != kb) throw mismatch();

  const bool shared = sb.size() == 2;
  std::size_t batches = 1;
  if (!shared) {
    if (sa.size() != sb.size() || !std::equal(sa.begin(), sa.end() - 2, sb.begin())) {
      throw mismatch();
    }
    for (std::size_t i = 0; i + 2 < sa.size(); ++i) batches *= sa[i];
  }
  Shape out_shape(sa.begin(), sa.end() - 1);
  out_shape.push_back(n);
  std::vector<T> v(numel(out_shape));

  if (shared) {
    const std::size_t rows = a.size() / k;
    MatMap<T>(v.data(), rows, n).noalias() =
        ConstMatMap<T>(a.values().data(), rows, k) * ConstMatMap<T>(b.values().data(), k, n);
  } else {
    for (std::size_t bi = 0; bi < batches; ++bi) {
      MatMap<T>(v.data() + bi * m * n, m, n).noalias() =
          ConstMatMap<T>(a.values().data() + bi * m * k, m, k) *
          ConstMatMap<T>(b.values().data() + bi * k * n, k, n);
    }
  }
  Tensor<T> out(std::move(out_shape), std::move(v));
  auto as = a.storage(), bs = b.storage(), os = out.storage();
  return finish(out, {&a, &b}, [as, bs, os, shared, batches, m, k, n] {
    if (os->grad.empty()) return;
    if (shared) {
      const std::size_t rows = as->value.size() / k;
      ConstMatMap<T> g(os->grad.data(), rows, n);
      if (as->requires_grad) {
        MatMap<T>(grad_buffer(*as).data(), rows, k).noalias() +=
            g * ConstMatMap<T>(bs->value.data(), k, n).transpose();
      }
      if (bs->requires_grad) {
        MatMap<T>(grad_buffer(*bs).data(), k, n).noalias() +=
            ConstMatMap<T>(as->value.data(), rows, k).transpose() * g;
      }
      return;
    }
    for (std::size_t bi = 0; bi < batches; ++bi) {
      ConstMatMap<T> g(os->grad.data() + bi * m * n, m, n);
      if (as->requires_grad) {
        MatMap<T>(grad_buffer(*as).data() + bi * m * k, m, k).noalias() +=
            g * ConstMatMap<T>(bs->value.data() + bi * k * n, k, n).transpose();
      }
      if (bs->requires_grad) {
        MatMap<T>(grad_buffer(*bs).data() + bi * k * n, k, n).noalias() +=
            ConstMatMap<T>(as->value.data() + bi * m * k, m, k).transpose() * g;
      }
    }
  });
}

template <typename T>
Tensor<T> Tape<T>::transpose(const Tensor<T>& a) {
  if (a.rank() < 2) {
    throw DimensionError(fmt::format("transpose needs rank >= 2, got {}", shape_str(a.shape())));
  }
  std::vector<std::size_t> axes(a.rank());
  std::iota(axes.begin(), axes.end(), std::size_t{0});
  std::swap(axes[axes.size() - 1], axes[axes.size() - 2]);
  return permute(a, axes);
}

template <typename T>
Tensor<T> Tape<T>::reshape(const Tensor<T>& a, Shape shape) {
  if (numel(shape) != a.size()) {
    throw DimensionError(fmt::format("reshape: cannot view {} as {}", shape_str(a.shape()),
                                     shape_str(shape)));
  }
  Tensor<T> out(std::move(shape), std::vector<T>(a.values().begin(), a.values().end()));
  auto as = a.storage(), os = out.storage();
  return finish(out, {&a}, [as, os] {
    if (os->grad.empty()) return;
    auto& ga = grad_buffer(*as);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += os->grad[i];
  });
}

template <typename T>
Tensor<T> Tape<T>::permute(const Tensor<T>& a, const std::vector<std::size_t>& axes) {
  const auto& in_shape = a.shape();
  const std::size_t r = in_shape.size();
  std::vector<bool> seen(r, false);
  if (axes.size() != r) {
    throw DimensionError(fmt::format("permute: {} axes given for shape {}", axes.size(),
                                     shape_str(in_shape)));
  }
  for (auto ax : axes) {
    if (ax >= r || seen[ax]) {
      throw DimensionError(fmt::format("permute: invalid axis list for shape {}", shape_str(in_shape)));
    }
    seen[ax] = true;
  }
  std::vector<std::size_t> in_strides(r, 1);
  for (std::size_t i = r; i-- > 1;) in_strides[i - 1] = in_strides[i] * in_shape[i];
  Shape out_shape(r);
  for (std::size_t i = 0; i < r; ++i) out_shape[i] = in_shape[axes[i]];

  // source offset of every output element
  const std::size_t total = a.size();
  std::vector<std::size_t> source(total);
  std::vector<std::size_t> index(r, 0);
  for (std::size_t o = 0; o < total; ++o) {
    std::size_t off = 0;
    for (std::size_t i = 0; i < r; ++i) off += index[i] * in_strides[axes[i]];
    source[o] = off;
    for (std::size_t i = r; i-- > 0;) {
      if (++index[i] < out_shape[i]) break;
      index[i] = 0;
    }
  }
  std::vector<T> v(total);
  auto av = a.values();
  for (std::size_t o = 0; o < total; ++o) v[o] = av[source[o]];
  Tensor<T> out(std::move(out_shape), std::move(v));
  auto as = a.storage(), os = out.storage();
  return finish(out, {&a}, [as, os, source = std::move(source)] {
    if (os->grad.empty()) return;
    auto& ga = grad_buffer(*as);
    for (std::size_t o = 0; o < source.size(); ++o) ga[source[o]] += os->grad[o];
  });
}

template <typename T>
Tensor<T> Tape<T>::concat(std::span<const Tensor<T>> parts, int axis) {
  if (parts.empty()) throw DimensionError("concat of zero tensors");
  const Shape& first = parts[0].shape();
  const std::size_t ax = normalize_axis(axis, first.size(), first);
  Shape out_shape = first;
  out_shape[ax] = 0;
  for (const auto& p : parts) {
    const auto& s = p.shape();
    bool ok = s.size() == first.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = i == ax || s[i] == first[i];
    if (!ok) {
      throw DimensionError(fmt::format("concat: shapes {} and {} differ off axis {}",
                                       shape_str(first), shape_str(s), axis));
    }
    out_shape[ax] += s[ax];
  }
  const AxisSplit os_split = split_at(out_shape, ax);
  std::vector<T> v(numel(out_shape));
  std::vector<std::size_t> offsets;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const AxisSplit ps = split_at(p.shape(), ax);
    const std::size_t chunk = ps.length * ps.inner;
    auto pv = p.values();
    for (std::size_t o = 0; o < ps.outer; ++o) {
      std::copy_n(pv.begin() + static_cast<std::ptrdiff_t>(o * chunk), chunk,
                  v.begin() + static_cast<std::ptrdiff_t>(o * os_split.length * os_split.inner +
                                                          offset * os_split.inner));
    }
    offsets.push_back(offset);
    offset += ps.length;
  }
  Tensor<T> out(std::move(out_shape), std::move(v));
  std::vector<Storage> stores;
  for (const auto& p : parts) stores.push_back(p.storage());
  bool any = std::any_of(parts.begin(), parts.end(), [](const auto& p) { return p.requires_grad(); });
  if (!record_ || !any) return out;
  auto os = out.storage();
  out.set_requires_grad(true);
  entries_.push_back([stores, os, offsets, os_split, ax] {
    if (os->grad.empty()) return;
    for (std::size_t pi = 0; pi < stores.size(); ++pi) {
      auto& st = *stores[pi];
      if (!st.requires_grad) continue;
      const AxisSplit ps = split_at(st.shape, ax);
      const std::size_t chunk = ps.length * ps.inner;
      auto& g = grad_buffer(st);
      for (std::size_t o = 0; o < ps.outer; ++o) {
        const T* src = os->grad.data() + o * os_split.length * os_split.inner +
                       offsets[pi] * os_split.inner;
        for (std::size_t i = 0; i < chunk; ++i) g[o * chunk + i] += src[i];
      }
    }
  });
  return out;
}

template <typename T>
Tensor<T> Tape<T>::slice(const Tensor<T>& a, int axis, std::size_t begin, std::size_t end) {
  const std::size_t ax = normalize_axis(axis, a.rank(), a.shape());
  if (begin > end || end > a.shape()[ax]) {
    throw IndexError(fmt::format("slice [{}, {}) out of range for axis {} of {}", begin, end, axis,
                                 shape_str(a.shape())));
  }
  const AxisSplit sp = split_at(a.shape(), ax);
  Shape out_shape = a.shape();
  out_shape[ax] = end - begin;
  const std::size_t chunk = (end - begin) * sp.inner;
  std::vector<T> v(numel(out_shape));
  auto av = a.values();
  for (std::size_t o = 0; o < sp.outer; ++o) {
    std::copy_n(av.begin() + static_cast<std::ptrdiff_t>((o * sp.length + begin) * sp.inner), chunk,
                v.begin() + static_cast<std::ptrdiff_t>(o * chunk));
  }
  Tensor<T> out(std::move(out_shape), std::move(v));
  auto as = a.storage(), os = out.storage();
  return finish(out, {&a}, [as, os, sp, begin, chunk] {
    if (os->grad.empty()) return;
    auto& ga = grad_buffer(*as);
    for (std::size_t o = 0; o < sp.outer; ++o) {
      for (std::size_t i = 0; i < chunk; ++i) {
        ga[(o * sp.length + begin) * sp.inner + i] += os->grad[o * chunk + i];
      }
    }
  });
}

template <typename T>
Tensor<T> Tape<T>::embedding_lookup(const Tensor<T>& table, std::span<const int> indices,
                                    Shape index_shape) {
  if (table.rank() != 2) {
    throw DimensionError(fmt::format("embedding table must be 2-D, got {}", shape_str(table.shape())));
  }
  if (numel(index_shape) != indices.size()) {
    throw DimensionError(fmt::format("{} indices do not fill index shape {}", indices.size(),
                                     shape_str(index_shape)));
  }
  const std::size_t rows = table.shape()[0], cols = table.shape()[1];
  std::vector<std::size_t> sel(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] < 0 || static_cast<std::size_t>(indices[i]) >= rows) {
      throw IndexError(fmt::format("embedding index {} out of range [0, {})", indices[i], rows));
    }
    sel[i] = static_cast<std::size_t>(indices[i]);
  }
  Shape out_shape = std::move(index_shape);
  out_shape.push_back(cols);
  std::vector<T> v(sel.size() * cols);
  auto tv = table.values();
  for (std::size_t i = 0; i < sel.size(); ++i) {
    std::copy_n(tv.begin() + static_cast<std::ptrdiff_t>(sel[i] * cols), cols,
                v.begin() + static_cast<std::ptrdiff_t>(i * cols));
  }
  Tensor<T> out(std::move(out_shape), std::move(v));
  auto ts = table.storage(), os = out.storage();
  return finish(out, {&table}, [ts, os, sel = std::move(sel), cols] {
    if (os->grad.empty()) return;
    auto& g = grad_buffer(*ts);
    for (std::size_t i = 0; i < sel.size(); ++i) {
      for (std::size_t c = 0; c < cols; ++c) g[sel[i] * cols + c] += os->grad[i * cols + c];
    }
  });
}

template <typename T>
Tensor<T> Tape<T>::gather_rows(const Tensor<T>& a, std::span<const std::size_t> rows) {
  if (a.rank() < 1) throw DimensionError("gather_rows on a scalar");
  const std::size_t cols = a.shape().back();
  const std::size_t n = cols == 0 ? 0 : a.size() / cols;
  for (auto r : rows) {
    if (r >= n) throw IndexError(fmt::format("row {} out of range [0, {})", r, n));
  }
  std::vector<std::size_t> sel(rows.begin(), rows.end());
  std::vector<T> v(sel.size() * cols);
  auto av = a.values();
  for (std::size_t i = 0; i < sel.size(); ++i) {
    std::copy_n(av.begin() + static_cast<std::ptrdiff_t>(sel[i] * cols), cols,
                v.begin() + static_cast<std::ptrdiff_t>(i * cols));
  }
  Tensor<T> out(Shape{sel.size(), cols}, std::move(v));
  auto as = a.storage(), os = out.storage();
  return finish(out, {&a}, [as, os, sel = std::move(sel), cols] {
    if (os->grad.empty()) return;
    auto& g = grad_buffer(*as);
    for (std::size_t i = 0; i < sel.size(); ++i) {
      for (std::size_t c = 0; c < cols; ++c) g[sel[i] * cols + c] += os->grad[i * cols + c];
    }
  });
}

template <typename T>
Tensor<T> Tape<T>::gelu(const Tensor<T>& a) {
  std::vector<T> v(a.size());
  auto av = a.values();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = gelu_value(av[i]);
  Tensor<T> out(a.shape(), std::move(v));
  auto as = a.storage(), os = out.storage();
  return finish(out, {&a}, [as, os] {
    if (os->grad.empty()) return;
    auto& g = grad_buffer(*as);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += os->grad[i] * gelu_derivative(as->value[i]);
  });
}

template <typename T>
Tensor<T> Tape<T>::sigmoid(const Tensor<T>& a) {
  std::vector<T> v(a.size());
  auto av = a.values();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = sigmoid_value(av[i]);
  Tensor<T> out(a.shape(), std::move(v));
  auto as = a.storage(), os = out.storage();
  return finish(out, {&a}, [as, os] {
    if (os->grad.empty()) return;
    auto& g = grad_buffer(*as);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T y = os->value[i];
      g[i] += os->grad[i] * y * (T(1) - y);
    }
  });
}

template <typename T>
Tensor<T> Tape<T>::softmax(const Tensor<T>& a, int axis) {
  const std::size_t ax = normalize_axis(axis, a.rank(), a.shape());
  const AxisSplit sp = split_at(a.shape(), ax);
  std::vector<T> v(a.size());
  auto av = a.values();
  constexpr T kNegInf = -std::numeric_limits<T>::infinity();
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t in = 0; in < sp.inner; ++in) {
      const std::size_t base = o * sp.length * sp.inner + in;
      T mx = kNegInf;
      for (std::size_t l = 0; l < sp.length; ++l) mx = std::max(mx, av[base + l * sp.inner]);
      if (mx == kNegInf) continue;  // fully masked row stays zero
      T total = 0;
      for (std::size_t l = 0; l < sp.length; ++l) {
        const T e = std::exp(av[base + l * sp.inner] - mx);
        v[base + l * sp.inner] = e;
        total += e;
      }
      for (std::size_t l = 0; l < sp.length; ++l) v[base + l * sp.inner] /= total;
    }
  }
  Tensor<T> out(a.shape(), std::move(v));
  auto as = a.storage(), os = out.storage();
  return finish(out, {&a}, [as, os, sp] {
    if (os->grad.empty()) return;
    auto& g = grad_buffer(*as);
    const auto& y = os->value;
    const auto& dy = os->grad;
    for (std::size_t o = 0; o < sp.outer; ++o) {
      for (std::size_t in = 0; in < sp.inner; ++in) {
        const std::size_t base = o * sp.length * sp.inner + in;
        T dot = 0;
        for (std::size_t l = 0; l < sp.length; ++l) {
          const std::size_t idx = base + l * sp.inner;
          dot += dy[idx] * y[idx];
        }
        for (std::size_t l = 0; l < sp.length; ++l) {
          const std::size_t idx = base + l * sp.inner;
          g[idx] += y[idx] * (dy[idx] - dot);
        }
      }
    }
  });
}

template <typename T>
Tensor<T> Tape<T>::rms_norm(const Tensor<T>& x, const Tensor<T>& gain, T eps) {
  if (x.rank() < 1 || gain.rank() != 1 || gain.shape()[0] != x.shape().back()) {
    throw DimensionError(fmt::format("rms_norm: input {} and gain {} are incompatible",
                                     shape_str(x.shape()), shape_str(gain.shape())));
  }
  if (!(eps >= 0)) throw ConfigError("rms_norm eps must be >= 0");
  const std::size_t d = x.shape().back();
  const std::size_t rows = x.size() / d;
  std::vector<T> v(x.size());
  std::vector<T> inv_rms(rows);
  auto xv = x.values();
  auto gv = gain.values();
  for (std::size_t r = 0; r < rows; ++r) {
    T ms = 0;
    for (std::size_t c = 0; c < d; ++c) ms += xv[r * d + c] * xv[r * d + c];
    ms /= static_cast<T>(d);
    inv_rms[r] = T(1) / std::sqrt(ms + eps);
    for (std::size_t c = 0; c < d; ++c) v[r * d + c] = gv[c] * xv[r * d + c] * inv_rms[r];
  }
  Tensor<T> out(x.shape(), std::move(v));
  auto xs = x.storage(), gs = gain.storage(), os = out.storage();
  return finish(out, {&x, &gain}, [xs, gs, os, inv_rms = std::move(inv_rms), d, rows] {
    if (os->grad.empty()) return;
    const auto& dy = os->grad;
    const auto& xv = xs->value;
    const auto& gv = gs->value;
    if (gs->requires_grad) {
      auto& gg = grad_buffer(*gs);
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < d; ++c) gg[c] += dy[r * d + c] * xv[r * d + c] * inv_rms[r];
      }
    }
    if (xs->requires_grad) {
      auto& gx = grad_buffer(*xs);
      for (std::size_t r = 0; r < rows; ++r) {
        T dot = 0;
        for (std::size_t c = 0; c < d; ++c) dot += gv[c] * dy[r * d + c] * xv[r * d + c];
        const T ir = inv_rms[r];
        const T coef = dot * ir * ir * ir / static_cast<T>(d);
        for (std::size_t c = 0; c < d; ++c) {
          gx[r * d + c] += gv[c] * dy[r * d + c] * ir - xv[r * d + c] * coef;
        }
      }
    }
  });
}

template <typename T>
Tensor<T> Tape<T>::layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                              T eps) {
  if (x.rank() < 1 || gain.rank() != 1 || gain.shape()[0] != x.shape().back() ||
      bias.shape() != gain.shape()) {
    throw DimensionError(fmt::format("layer_norm: input {}, gain {}, bias {} are incompatible",
                                     shape_str(x.shape()), shape_str(gain.shape()),
                                     shape_str(bias.shape())));
  }
  const std::size_t d = x.shape().back();
  const std::size_t rows = x.size() / d;
  std::vector<T> v(x.size());
  std::vector<T> xhat(x.size());
  std::vector<T> inv_std(rows);
  auto xv = x.values();
  auto gv = gain.values();
  auto bv = bias.values();
  for (std::size_t r = 0; r < rows; ++r) {
    T mean = 0;
    for (std::size_t c = 0; c < d; ++c) mean += xv[r * d + c];
    mean /= static_cast<T>(d);
    T var = 0;
    for (std::size_t c = 0; c < d; ++c) {
      const T z = xv[r * d + c] - mean;
      var += z * z;
    }
    var /= static_cast<T>(d);
    inv_std[r] = T(1) / std::sqrt(var + eps);
    for (std::size_t c = 0; c < d; ++c) {
      xhat[r * d + c] = (xv[r * d + c] - mean) * inv_std[r];
      v[r * d + c] = gv[c] * xhat[r * d + c] + bv[c];
    }
  }
  Tensor<T> out(x.shape(), std::move(v));
  auto xs = x.storage(), gs = gain.storage(), bs = bias.storage(), os = out.storage();
  return finish(out, {&x, &gain, &bias},
                [xs, gs, bs, os, xhat = std::move(xhat), inv_std = std::move(inv_std), d, rows] {
                  if (os->grad.empty()) return;
                  const auto& dy = os->grad;
                  const auto& gv = gs->value;
                  if (gs->requires_grad) {
                    auto& gg = grad_buffer(*gs);
                    for (std::size_t i = 0; i < dy.size(); ++i) gg[i % d] += dy[i] * xhat[i];
                  }
                  if (bs->requires_grad) {
                    auto& gb = grad_buffer(*bs);
                    for (std::size_t i = 0; i < dy.size(); ++i) gb[i % d] += dy[i];
                  }
                  if (xs->requires_grad) {
                    auto& gx = grad_buffer(*xs);
                    for (std::size_t r = 0; r < rows; ++r) {
                      T mean_d = 0, mean_dx = 0;
                      for (std::size_t c = 0; c < d; ++c) {
                        const T dxh = dy[r * d + c] * gv[c];
                        mean_d += dxh;
                        mean_dx += dxh * xhat[r * d + c];
                      }
                      mean_d /= static_cast<T>(d);
                      mean_dx /= static_cast<T>(d);
                      for (std::size_t c = 0; c < d; ++c) {
                        const T dxh = dy[r * d + c] * gv[c];
                        gx[r * d + c] += inv_std[r] * (dxh - mean_d - xhat[r * d + c] * mean_dx);
                      }
                    }
                  }
                });
}

template <typename T>
Tensor<T> Tape<T>::dropout(const Tensor<T>& x, T p, std::uint64_t seed) {
  if (!(p >= 0 && p < 1)) throw ConfigError(fmt::format("dropout p must lie in [0, 1), got {}", p));
  if (p == 0) return x;
  Rng rng = make_rng({seed, 0xD0u});
  const T keep_scale = T(1) / (T(1) - p);
  std::vector<T> factor(x.size());
  for (auto& f : factor) f = uniform01(rng) < static_cast<double>(p) ? T(0) : keep_scale;
  std::vector<T> v(x.size());
  auto xv = x.values();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = xv[i] * factor[i];
  Tensor<T> out(x.shape(), std::move(v));
  auto xs = x.storage(), os = out.storage();
  return finish(out, {&x}, [xs, os, factor = std::move(factor)] {
    if (os->grad.empty()) return;
    auto& g = grad_buffer(*xs);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += os->grad[i] * factor[i];
  });
}

template <typename T>
Tensor<T> Tape<T>::masked_fill(const Tensor<T>& x, const Mask& mask, T value) {
  if (mask.empty() || x.size() % mask.size() != 0) {
    throw DimensionError(fmt::format("masked_fill: mask of {} entries does not tile {}",
                                     mask.size(), shape_str(x.shape())));
  }
  const std::size_t m = mask.size();
  std::vector<T> v(x.values().begin(), x.values().end());
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (mask[i % m]) v[i] = value;
  }
  Tensor<T> out(x.shape(), std::move(v));
  auto xs = x.storage(), os = out.storage();
  return finish(out, {&x}, [xs, os, mask, m] {
    if (os->grad.empty()) return;
    auto& g = grad_buffer(*xs);
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (!mask[i % m]) g[i] += os->grad[i];
    }
  });
}

template <typename T>
Tensor<T> Tape<T>::cross_entropy(const Tensor<T>& logits, std::span<const int> targets) {
  if (logits.rank() != 2 || logits.shape()[0] != targets.size()) {
    throw DimensionError(fmt::format("cross_entropy: logits {} vs {} targets",
                                     shape_str(logits.shape()), targets.size()));
  }
  const std::size_t n = targets.size(), vsz = logits.shape()[1];
  if (n == 0) throw InputError("cross_entropy over zero rows");
  for (int t : targets) {
    if (t < 0 || static_cast<std::size_t>(t) >= vsz) {
      throw IndexError(fmt::format("target index {} out of range [0, {})", t, vsz));
    }
  }
  auto lv = logits.values();
  std::vector<T> probs(lv.size());
  T total = 0;
  for (std::size_t r = 0; r < n; ++r) {
    const T* row = lv.data() + r * vsz;
    T mx = *std::max_element(row, row + vsz);
    T z = 0;
    for (std::size_t c = 0; c < vsz; ++c) {
      probs[r * vsz + c] = std::exp(row[c] - mx);
      z += probs[r * vsz + c];
    }
    for (std::size_t c = 0; c < vsz; ++c) probs[r * vsz + c] /= z;
    total += (std::log(z) + mx) - row[targets[r]];
  }
  Tensor<T> out = Tensor<T>::scalar(total / static_cast<T>(n));
  auto ls = logits.storage(), os = out.storage();
  std::vector<int> tgt(targets.begin(), targets.end());
  return finish(out, {&logits}, [ls, os, probs = std::move(probs), tgt = std::move(tgt), n, vsz] {
    if (os->grad.empty()) return;
    auto& g = grad_buffer(*ls);
    const T scale = os->grad[0] / static_cast<T>(n);
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t c = 0; c < vsz; ++c) g[r * vsz + c] += scale * probs[r * vsz + c];
      g[r * vsz + static_cast<std::size_t>(tgt[r])] -= scale;
    }
  });
}

template <typename T>
Tensor<T> Tape<T>::cope_position_logits(const Tensor<T>& q, const Tensor<T>& scores,
                                        const Mask& mask, const Tensor<T>& table,
                                        std::size_t p_max, CopeState<T>* state) {
  const auto& sq = q.shape();
  const auto& ss = scores.shape();
  if (sq.size() < 2 || ss.size() != sq.size() || ss.back() != ss[ss.size() - 2] ||
      ss[ss.size() - 2] != sq[sq.size() - 2] ||
      !std::equal(sq.begin(), sq.end() - 2, ss.begin())) {
    throw DimensionError(fmt::format("cope: q {} and scores {} are incompatible", shape_str(sq),
                                     shape_str(ss)));
  }
  const std::size_t len = sq[sq.size() - 2], d = sq.back();
  if (table.rank() != 2 || table.shape()[0] != p_max + 1 || table.shape()[1] != d) {
    throw DimensionError(fmt::format("cope: table {} must be [{}, {}]", shape_str(table.shape()),
                                     p_max + 1, d));
  }
  if (mask.size() != scores.size()) {
    throw DimensionError(fmt::format("cope: mask of {} entries for scores {}", mask.size(),
                                     shape_str(ss)));
  }
  const std::size_t groups = scores.size() / (len * len);
  const std::size_t npos = p_max + 1;
  const T pmax = static_cast<T>(p_max);

  auto qv = q.values();
  auto sv = scores.values();
  auto tv = table.values();

  std::vector<T> gates(scores.size(), T(0));
  std::vector<T> pos(scores.size(), T(0));
  std::vector<T> qe(groups * len * npos);  // q_i . e_t
  std::vector<T> v(scores.size(), T(0));

  for (std::size_t g = 0; g < groups; ++g) {
    ConstMatMap<T> qg(qv.data() + g * len * d, len, d);
    MatMap<T>(qe.data() + g * len * npos, len, npos).noalias() =
        qg * ConstMatMap<T>(tv.data(), npos, d).transpose();
    for (std::size_t i = 0; i < len; ++i) {
      const std::size_t row = (g * len + i) * len;
      for (std::size_t j = 0; j < len; ++j) {
        if (!mask[row + j]) gates[row + j] = sigmoid_value(sv[row + j]);
      }
      T acc = 0;
      for (std::size_t j = i + 1; j-- > 0;) {
        acc += gates[row + j];
        pos[row + j] = acc;
      }
      acc = gates[row + i];
      for (std::size_t j = i + 1; j < len; ++j) {
        acc += gates[row + j];
        pos[row + j] = acc;
      }
      const T* qerow = qe.data() + (g * len + i) * npos;
      for (std::size_t j = 0; j < len; ++j) {
        T p = std::min(pos[row + j], pmax);
        pos[row + j] = p;
        if (mask[row + j]) continue;
        const auto lo = static_cast<std::size_t>(std::floor(p));
        const std::size_t hi = std::min(lo + 1, p_max);
        const T w = p - static_cast<T>(lo);
        v[row + j] = w * qerow[hi] + (T(1) - w) * qerow[lo];
      }
    }
  }
  if (state) {
    state->gates = gates;
    state->positions = pos;
  }

  Tensor<T> out(ss, std::move(v));
  auto qs = q.storage(), scs = scores.storage(), ts = table.storage(), os = out.storage();
  return finish(out, {&q, &scores, &table},
                [qs, scs, ts, os, mask, gates = std::move(gates), pos = std::move(pos),
                 qe = std::move(qe), groups, len, d, npos, p_max, pmax] {
                  if (os->grad.empty()) return;
                  const auto& dout = os->grad;
                  std::vector<T> dqe(groups * len * npos, T(0));
                  std::vector<T> dp(len);
                  std::vector<T> dgate(len);
                  std::vector<T>* dscores =
                      scs->requires_grad ? &grad_buffer(*scs) : nullptr;
                  for (std::size_t g = 0; g < groups; ++g) {
                    for (std::size_t i = 0; i < len; ++i) {
                      const std::size_t row = (g * len + i) * len;
                      const T* qerow = qe.data() + (g * len + i) * npos;
                      T* dqerow = dqe.data() + (g * len + i) * npos;
                      for (std::size_t j = 0; j < len; ++j) {
                        dp[j] = 0;
                        if (mask[row + j]) continue;
                        const T p = pos[row + j];
                        const auto lo = static_cast<std::size_t>(std::floor(p));
                        const std::size_t hi = std::min(lo + 1, p_max);
                        const T w = p - static_cast<T>(lo);
                        const T go = dout[row + j];
                        dqerow[hi] += w * go;
                        dqerow[lo] += (T(1) - w) * go;
                        // clamped positions carry no gradient
                        if (p < pmax) dp[j] = go * (qerow[hi] - qerow[lo]);
                      }
                      if (!dscores) continue;
                      // left spans [j, i] contain u for j <= u; right spans [i, j] for j >= u
                      T acc = 0;
                      for (std::size_t u = 0; u <= i; ++u) {
                        acc += dp[u];
                        dgate[u] = acc;
                      }
                      acc = 0;
                      for (std::size_t u = len; u-- > i;) {
                        acc += dp[u];
                        if (u > i) dgate[u] = acc;
                      }
                      dgate[i] += acc - dp[i];
                      for (std::size_t u = 0; u < len; ++u) {
                        if (mask[row + u]) continue;
                        const T gt = gates[row + u];
                        (*dscores)[row + u] += dgate[u] * gt * (T(1) - gt);
                      }
                    }
                  }
                  for (std::size_t g = 0; g < groups; ++g) {
                    ConstMatMap<T> dqeg(dqe.data() + g * len * npos, len, npos);
                    if (qs->requires_grad) {
                      MatMap<T>(grad_buffer(*qs).data() + g * len * d, len, d).noalias() +=
                          dqeg * ConstMatMap<T>(ts->value.data(), npos, d);
                    }
                    if (ts->requires_grad) {
                      MatMap<T>(grad_buffer(*ts).data(), npos, d).noalias() +=
                          dqeg.transpose() * ConstMatMap<T>(qs->value.data() + g * len * d, len, d);
                    }
                  }
                });
}

template <typename T>
void Tape<T>::backward(const Tensor<T>& loss) {
  if (loss.size() != 1) {
    throw UsageError(fmt::format("backward needs a scalar loss, got shape {}",
                                 shape_str(loss.shape())));
  }
  if (consumed_) throw UsageError("backward called twice on one tape");
  consumed_ = true;
  if (!loss.requires_grad()) return;
  auto& g = grad_buffer(*loss.storage());
  g[0] += T(1);
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) (*it)();
  entries_.clear();
}

template class Tensor<float>;
template class Tensor<double>;
template class Tape<float>;
template class Tape<double>;

GradCheckResult gradient_check(const std::function<Tensor<double>(Tape<double>&)>& loss_fn,
                               std::span<const Parameter<double>> params, double eps) {
  for (const auto& p : params) {
    auto t = p.tensor;
    t.zero_grad();
  }
  {
    Tape<double> tape;
    auto loss = loss_fn(tape);
    if (!std::isfinite(loss.item())) throw NumericError("gradient_check: loss is not finite");
    tape.backward(loss);
  }

  GradCheckResult result;
  for (const auto& p : params) {
    Tensor<double> t = p.tensor;
    std::vector<double> analytic(t.size(), 0.0);
    if (t.has_grad()) std::copy(t.grad().begin(), t.grad().end(), analytic.begin());
    auto values = t.values();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + eps;
      double up = 0, down = 0;
      {
        Tape<double> tape(false);
        up = loss_fn(tape).item();
      }
      values[i] = saved - eps;
      {
        Tape<double> tape(false);
        down = loss_fn(tape).item();
      }
      values[i] = saved;
      const double numeric = (up - down) / (2 * eps);
      if (!std::isfinite(numeric) || !std::isfinite(analytic[i])) {
        throw NumericError(fmt::format("gradient_check: non-finite value in parameter '{}'[{}]",
                                       p.name, i));
      }
      const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-8});
      const double rel = std::abs(analytic[i] - numeric) / denom;
      ++result.components;
      if (rel > result.max_rel_error) {
        result.max_rel_error = rel;
        result.worst_parameter = p.name;
        result.worst_index = i;
      }
    }
  }
  return result;
}

}  // namespace smmrec::ad
