#include "smokelens/diff.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "smokelens/errors.hpp"

namespace smokelens::diff {

Tensor::Tensor(Shape shape, double fill) : shape_(shape), data_(shape.numel(), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(shape), data_(std::move(data)) {
  require(data_.size() == shape_.numel(), "Tensor: data length does not match shape");
}

Tensor Tensor::from_map(const GrayMap& map) {
  return Tensor(Shape{1, 1, map.height(), map.width()}, map.values());
}

Tensor Tensor::from_maps(std::span<const GrayMap> maps) {
  require(!maps.empty(), "Tensor::from_maps: no maps");
  const int h = maps[0].height();
  const int w = maps[0].width();
  Tensor out(Shape{static_cast<int>(maps.size()), 1, h, w});
  for (std::size_t i = 0; i < maps.size(); ++i) {
    require(maps[i].width() == w && maps[i].height() == h, "Tensor::from_maps: size mismatch");
    std::copy(maps[i].data().begin(), maps[i].data().end(),
              out.data() + i * static_cast<std::size_t>(h) * static_cast<std::size_t>(w));
  }
  return out;
}

Tensor Tensor::from_image(const ImageRGB& image) {
  const int h = image.height();
  const int w = image.width();
  Tensor out(Shape{1, 3, h, w});
  for (int c = 0; c < 3; ++c) {
    const auto& ch = image.channel(c).data();
    std::copy(ch.begin(), ch.end(), out.data() + out.offset(0, c, 0, 0));
  }
  return out;
}

GrayMap Tensor::to_map(int n, int c) const {
  GrayMap out(shape_.w, shape_.h);
  const double* src = data() + offset(n, c, 0, 0);
  std::copy(src, src + shape_.plane(), out.data().begin());
  return out;
}

const Tensor& Var::value() const { return tape_->value(id_); }
const Tensor& Var::grad() const { return tape_->grad(id_); }
bool Var::requires_grad() const { return tape_->requires_grad(id_); }

double Var::item() const {
  require(numel() == 1, "Var::item: not a scalar");
  return value()[0];
}

Var Tape::leaf(Tensor value) {
  nodes_.push_back(Node{std::move(value), Tensor{}, true, nullptr});
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

Var Tape::constant(Tensor value) {
  nodes_.push_back(Node{std::move(value), Tensor{}, false, nullptr});
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

Var Tape::record(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn) {
  return record(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()),
                std::move(fn));
}

Var Tape::record(Tensor value, std::span<const Var> inputs, BackwardFn fn) {
  bool needs = false;
  for (const Var& v : inputs) {
    require(v.valid() && &v.tape() == this, "Tape::record: input belongs to another tape");
    needs = needs || requires_grad(v.id());
  }
  nodes_.push_back(Node{std::move(value), Tensor{}, needs, needs ? std::move(fn) : nullptr});
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

void Tape::backward(const Var& root) {
  require(root.valid() && &root.tape() == this, "backward: root is not on this tape");
  require(root.numel() == 1, "backward: root must be a scalar");
  for (Node& node : nodes_) {
    node.grad = node.requires_grad ? Tensor(node.value.shape(), 0.0) : Tensor{};
  }
  Node& r = nodes_[static_cast<std::size_t>(root.id())];
  if (!r.requires_grad) return;
  r.grad[0] = 1.0;
  for (int i = root.id(); i >= 0; --i) {
    Node& node = nodes_[static_cast<std::size_t>(i)];
    if (node.backward) node.backward(*this, i);
  }
}

namespace {

Shape broadcast_shape(const Var& a, const Var& b, const char* op) {
  if (a.shape() == b.shape()) return a.shape();
  if (b.numel() == 1) return a.shape();
  if (a.numel() == 1) return b.shape();
  throw InvalidArgument(std::string(op) + ": shape mismatch");
}

// f(a,b) forward; da/db give the local partials given (a, b, out).
template <typename F, typename DA, typename DB>
Var binary(const Var& a, const Var& b, const char* op, F f, DA da, DB db) {
  const Shape shape = broadcast_shape(a, b, op);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const bool sa = av.numel() == 1 && shape.numel() != 1;
  const bool sb = bv.numel() == 1 && shape.numel() != 1;
  Tensor out(shape);
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = f(av[sa ? 0 : i], bv[sb ? 0 : i]);
  const int ia = a.id();
  const int ib = b.id();
  return a.tape().record(std::move(out), {a, b}, [=](Tape& t, int self) {
    const Tensor& g = t.grad(self);
    const Tensor& o = t.value(self);
    const Tensor& x = t.value(ia);
    const Tensor& y = t.value(ib);
    const bool ga = t.requires_grad(ia);
    const bool gb = t.requires_grad(ib);
    for (std::size_t i = 0; i < g.numel(); ++i) {
      const double xv = x[sa ? 0 : i];
      const double yv = y[sb ? 0 : i];
      if (ga) t.grad_mut(ia)[sa ? 0 : i] += g[i] * da(xv, yv, o[i]);
      if (gb) t.grad_mut(ib)[sb ? 0 : i] += g[i] * db(xv, yv, o[i]);
    }
  });
}

// f(a) forward; d gives the local derivative given (a, out).
template <typename F, typename D>
Var unary(const Var& a, F f, D d) {
  const Tensor& av = a.value();
  Tensor out(av.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = f(av[i]);
  const int ia = a.id();
  return a.tape().record(std::move(out), {a}, [=](Tape& t, int self) {
    const Tensor& g = t.grad(self);
    const Tensor& o = t.value(self);
    const Tensor& x = t.value(ia);
    Tensor& gx = t.grad_mut(ia);
    for (std::size_t i = 0; i < g.numel(); ++i) gx[i] += g[i] * d(x[i], o[i]);
  });
}

double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double stable_softplus(double x) {
  return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
}

}  // namespace

Var add(const Var& a, const Var& b) {
  return binary(a, b, "add", [](double x, double y) { return x + y; },
                [](double, double, double) { return 1.0; },
                [](double, double, double) { return 1.0; });
}

Var sub(const Var& a, const Var& b) {
  return binary(a, b, "sub", [](double x, double y) { return x - y; },
                [](double, double, double) { return 1.0; },
                [](double, double, double) { return -1.0; });
}

Var mul(const Var& a, const Var& b) {
  return binary(a, b, "mul", [](double x, double y) { return x * y; },
                [](double, double y, double) { return y; },
                [](double x, double, double) { return x; });
}

Var div(const Var& a, const Var& b) {
  return binary(a, b, "div", [](double x, double y) { return x / y; },
                [](double, double y, double) { return 1.0 / y; },
                [](double, double y, double o) { return -o / y; });
}

Var add_scalar(const Var& a, double c) {
  return unary(a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

Var mul_scalar(const Var& a, double c) {
  return unary(a, [c](double x) { return x * c; }, [c](double, double) { return c; });
}

Var rsub_scalar(double c, const Var& a) {
  return unary(a, [c](double x) { return c - x; }, [](double, double) { return -1.0; });
}

Var neg(const Var& a) { return mul_scalar(a, -1.0); }

Var exp(const Var& a) {
  return unary(a, [](double x) { return std::exp(x); }, [](double, double o) { return o; });
}

Var log(const Var& a) {
  return unary(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Var abs(const Var& a) {
  return unary(a, [](double x) { return std::abs(x); },
               [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

Var square(const Var& a) {
  return unary(a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Var sigmoid(const Var& a) {
  return unary(a, stable_sigmoid, [](double, double o) { return o * (1.0 - o); });
}

Var softplus(const Var& a) {
  return unary(a, stable_softplus, [](double x, double) { return stable_sigmoid(x); });
}

Var leaky_relu(const Var& a, double slope) {
  return unary(a, [slope](double x) { return x > 0.0 ? x : slope * x; },
               [slope](double x, double) { return x > 0.0 ? 1.0 : slope; });
}

Var sum(const Var& a) {
  const Tensor& av = a.value();
  double s = 0.0;
  for (std::size_t i = 0; i < av.numel(); ++i) s += av[i];
  const int ia = a.id();
  return a.tape().record(Tensor::scalar(s), {a}, [=](Tape& t, int self) {
    const double g = t.grad(self)[0];
    Tensor& gx = t.grad_mut(ia);
    for (std::size_t i = 0; i < gx.numel(); ++i) gx[i] += g;
  });
}

Var mean(const Var& a) {
  require(a.numel() > 0, "mean: empty tensor");
  return mul_scalar(sum(a), 1.0 / static_cast<double>(a.numel()));
}

Var sum_per_sample(const Var& a) {
  const Tensor& av = a.value();
  const int n = av.shape().n;
  const std::size_t per = av.numel() / static_cast<std::size_t>(std::max(n, 1));
  Tensor out(Shape{n, 1, 1, 1});
  for (int s = 0; s < n; ++s) {
    double acc = 0.0;
    for (std::size_t i = 0; i < per; ++i) acc += av[static_cast<std::size_t>(s) * per + i];
    out[static_cast<std::size_t>(s)] = acc;
  }
  const int ia = a.id();
  return a.tape().record(std::move(out), {a}, [=](Tape& t, int self) {
    const Tensor& g = t.grad(self);
    Tensor& gx = t.grad_mut(ia);
    for (int s = 0; s < n; ++s) {
      for (std::size_t i = 0; i < per; ++i) gx[static_cast<std::size_t>(s) * per + i] += g[static_cast<std::size_t>(s)];
    }
  });
}

namespace {

template <typename Better>
Var window_extreme(const Var& a, int k, const char* op, Better better) {
  if (k < 1 || k % 2 == 0) throw InvalidArgument(std::string(op) + ": k must be odd and >= 1");
  const Tensor& av = a.value();
  const Shape s = av.shape();
  const int r = k / 2;
  Tensor out(s);
  std::vector<std::size_t> arg(out.numel());
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      for (int y = 0; y < s.h; ++y) {
        for (int x = 0; x < s.w; ++x) {
          std::size_t best = av.offset(n, c, std::clamp(y - r, 0, s.h - 1), std::clamp(x - r, 0, s.w - 1));
          for (int dy = -r; dy <= r; ++dy) {
            const int yy = std::clamp(y + dy, 0, s.h - 1);
            for (int dx = -r; dx <= r; ++dx) {
              const std::size_t idx = av.offset(n, c, yy, std::clamp(x + dx, 0, s.w - 1));
              if (better(av[idx], av[best])) best = idx;
            }
          }
          const std::size_t o = out.offset(n, c, y, x);
          out[o] = av[best];
          arg[o] = best;
        }
      }
    }
  }
  const int ia = a.id();
  return a.tape().record(std::move(out), {a}, [ia, arg = std::move(arg)](Tape& t, int self) {
    const Tensor& g = t.grad(self);
    Tensor& gx = t.grad_mut(ia);
    for (std::size_t i = 0; i < g.numel(); ++i) gx[arg[i]] += g[i];
  });
}

}  // namespace

Var window_min(const Var& a, int k) {
  return window_extreme(a, k, "window_min", [](double v, double best) { return v < best; });
}

Var window_max(const Var& a, int k) {
  return window_extreme(a, k, "window_max", [](double v, double best) { return v > best; });
}

Var shift(const Var& a, int dy, int dx) {
  const Tensor& av = a.value();
  const Shape s = av.shape();
  Tensor out(s);
  const int x0 = std::max(0, -dx);
  const int x1 = std::min(s.w, s.w - dx);
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      for (int y = 0; y < s.h; ++y) {
        const int sy = y + dy;
        if (sy < 0 || sy >= s.h) continue;
        for (int x = x0; x < x1; ++x) out.at(n, c, y, x) = av.at(n, c, sy, x + dx);
      }
    }
  }
  const int ia = a.id();
  return a.tape().record(std::move(out), {a}, [=](Tape& t, int self) {
    const Tensor& g = t.grad(self);
    Tensor& gx = t.grad_mut(ia);
    for (int n = 0; n < s.n; ++n) {
      for (int c = 0; c < s.c; ++c) {
        for (int y = 0; y < s.h; ++y) {
          const int sy = y + dy;
          if (sy < 0 || sy >= s.h) continue;
          for (int x = x0; x < x1; ++x) gx.at(n, c, sy, x + dx) += g.at(n, c, y, x);
        }
      }
    }
  });
}

Var concat_channels(std::initializer_list<Var> parts) {
  return concat_channels(std::span<const Var>(parts.begin(), parts.size()));
}

Var concat_channels(std::span<const Var> parts) {
  require(!parts.empty(), "concat_channels: nothing to concatenate");
  const Shape first = parts[0].shape();
  int channels = 0;
  for (const Var& p : parts) {
    const Shape s = p.shape();
    require(s.n == first.n && s.h == first.h && s.w == first.w, "concat_channels: shape mismatch");
    channels += s.c;
  }
  const Shape out_shape{first.n, channels, first.h, first.w};
  Tensor out(out_shape);
  const std::size_t plane = first.plane();
  std::vector<int> ids;
  std::vector<int> widths;
  for (const Var& p : parts) {
    ids.push_back(p.id());
    widths.push_back(p.shape().c);
  }
  for (int n = 0; n < first.n; ++n) {
    int c0 = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
      const Tensor& pv = parts[k].value();
      const double* src = pv.data() + pv.offset(n, 0, 0, 0);
      std::copy(src, src + plane * static_cast<std::size_t>(widths[k]), out.data() + out.offset(n, c0, 0, 0));
      c0 += widths[k];
    }
  }
  return parts[0].tape().record(std::move(out), parts, [=](Tape& t, int self) {
    const Tensor& g = t.grad(self);
    for (int n = 0; n < out_shape.n; ++n) {
      int c0 = 0;
      for (std::size_t k = 0; k < ids.size(); ++k) {
        if (t.requires_grad(ids[k])) {
          Tensor& gx = t.grad_mut(ids[k]);
          const double* src = g.data() + g.offset(n, c0, 0, 0);
          double* dst = gx.data() + gx.offset(n, 0, 0, 0);
          for (std::size_t i = 0; i < plane * static_cast<std::size_t>(widths[k]); ++i) dst[i] += src[i];
        }
        c0 += widths[k];
      }
    }
  });
}

Var upsample_nearest(const Var& a, int factor) {
  require(factor >= 1, "upsample_nearest: factor must be >= 1");
  const Shape s = a.shape();
  const Shape os{s.n, s.c, s.h * factor, s.w * factor};
  const Tensor& av = a.value();
  Tensor out(os);
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c)
      for (int y = 0; y < os.h; ++y)
        for (int x = 0; x < os.w; ++x) out.at(n, c, y, x) = av.at(n, c, y / factor, x / factor);
  const int ia = a.id();
  return a.tape().record(std::move(out), {a}, [=](Tape& t, int self) {
    const Tensor& g = t.grad(self);
    Tensor& gx = t.grad_mut(ia);
    for (int n = 0; n < s.n; ++n)
      for (int c = 0; c < s.c; ++c)
        for (int y = 0; y < os.h; ++y)
          for (int x = 0; x < os.w; ++x) gx.at(n, c, y / factor, x / factor) += g.at(n, c, y, x);
  });
}

Var tile_spatial(const Var& a, int h, int w) {
  const Shape s = a.shape();
  require(s.h == 1 && s.w == 1, "tile_spatial: input must be [N,C,1,1]");
  const Shape os{s.n, s.c, h, w};
  Tensor out(os);
  const Tensor& av = a.value();
  const std::size_t plane = os.plane();
  for (std::size_t i = 0; i < av.numel(); ++i) {
    std::fill(out.data() + i * plane, out.data() + (i + 1) * plane, av[i]);
  }
  const int ia = a.id();
  return a.tape().record(std::move(out), {a}, [=](Tape& t, int self) {
    const Tensor& g = t.grad(self);
    Tensor& gx = t.grad_mut(ia);
    for (std::size_t i = 0; i < gx.numel(); ++i) {
      double acc = 0.0;
      for (std::size_t j = 0; j < plane; ++j) acc += g[i * plane + j];
      gx[i] += acc;
    }
  });
}

Var global_avg_pool(const Var& a) {
  const Shape s = a.shape();
  const std::size_t plane = s.plane();
  const double inv = 1.0 / static_cast<double>(plane);
  Tensor out(Shape{s.n, s.c, 1, 1});
  const Tensor& av = a.value();
  for (std::size_t i = 0; i < out.numel(); ++i) {
    double acc = 0.0;
    for (std::size_t j = 0; j < plane; ++j) acc += av[i * plane + j];
    out[i] = acc * inv;
  }
  const int ia = a.id();
  return a.tape().record(std::move(out), {a}, [=](Tape& t, int self) {
    const Tensor& g = t.grad(self);
    Tensor& gx = t.grad_mut(ia);
    for (std::size_t i = 0; i < g.numel(); ++i) {
      for (std::size_t j = 0; j < plane; ++j) gx[i * plane + j] += g[i] * inv;
    }
  });
}

namespace {

struct ConvGeometry {
  int n, cin, h, w, cout, k, stride, pad, oh, ow;
};

// Valid output column range [lo, hi) for kernel column kx.
inline void column_range(const ConvGeometry& g, int kx, int& lo, int& hi) {
  // ix = ox*stride + kx - pad must lie in [0, w)
  lo = 0;
  while (lo < g.ow && lo * g.stride + kx - g.pad < 0) ++lo;
  hi = g.ow;
  while (hi > lo && (hi - 1) * g.stride + kx - g.pad >= g.w) --hi;
}

}  // namespace

Var conv2d(const Var& x, const Var& weight, const Var& bias, int stride, int pad) {
  const Shape xs = x.shape();
  const Shape ws = weight.shape();
  require(stride >= 1 && pad >= 0, "conv2d: bad stride or padding");
  require(ws.c == xs.c, "conv2d: weight input channels do not match x");
  require(ws.h == ws.w, "conv2d: kernel must be square");
  const bool has_bias = bias.valid();
  if (has_bias) require(bias.numel() == static_cast<std::size_t>(ws.n), "conv2d: bias size");
  const int oh = (xs.h + 2 * pad - ws.h) / stride + 1;
  const int ow = (xs.w + 2 * pad - ws.w) / stride + 1;
  require(oh > 0 && ow > 0, "conv2d: kernel larger than padded input");
  const ConvGeometry geo{xs.n, xs.c, xs.h, xs.w, ws.n, ws.h, stride, pad, oh, ow};

  const Tensor& xv = x.value();
  const Tensor& wv = weight.value();
  Tensor out(Shape{xs.n, ws.n, oh, ow});
  std::vector<int> lo(static_cast<std::size_t>(geo.k)), hi(static_cast<std::size_t>(geo.k));
  for (int kx = 0; kx < geo.k; ++kx) column_range(geo, kx, lo[static_cast<std::size_t>(kx)], hi[static_cast<std::size_t>(kx)]);

  for (int n = 0; n < geo.n; ++n) {
    for (int co = 0; co < geo.cout; ++co) {
      double* op = out.data() + out.offset(n, co, 0, 0);
      if (has_bias) std::fill(op, op + static_cast<std::size_t>(oh) * static_cast<std::size_t>(ow), bias.value()[static_cast<std::size_t>(co)]);
      for (int ci = 0; ci < geo.cin; ++ci) {
        const double* ip = xv.data() + xv.offset(n, ci, 0, 0);
        for (int ky = 0; ky < geo.k; ++ky) {
          for (int kx = 0; kx < geo.k; ++kx) {
            const double wk = wv.at(co, ci, ky, kx);
            const int a = lo[static_cast<std::size_t>(kx)];
            const int b = hi[static_cast<std::size_t>(kx)];
            for (int oy = 0; oy < oh; ++oy) {
              const int iy = oy * stride + ky - pad;
              if (iy < 0 || iy >= geo.h) continue;
              double* orow = op + static_cast<std::ptrdiff_t>(oy) * ow;
              const std::ptrdiff_t base = static_cast<std::ptrdiff_t>(iy) * geo.w + kx - pad;
              if (stride == 1) {
                for (int ox = a; ox < b; ++ox) orow[ox] += wk * ip[base + ox];
              } else {
                for (int ox = a; ox < b; ++ox) orow[ox] += wk * ip[base + static_cast<std::ptrdiff_t>(ox) * stride];
              }
            }
          }
        }
      }
    }
  }

  const int ix = x.id();
  const int iw = weight.id();
  const int ib = has_bias ? bias.id() : -1;
  auto backward = [=](Tape& t, int self) {
    const Tensor& g = t.grad(self);
    const Tensor& xval = t.value(ix);
    const Tensor& wval = t.value(iw);
    const bool gx_needed = t.requires_grad(ix);
    const bool gw_needed = t.requires_grad(iw);
    if (ib >= 0 && t.requires_grad(ib)) {
      Tensor& gb = t.grad_mut(ib);
      for (int n = 0; n < geo.n; ++n) {
        for (int co = 0; co < geo.cout; ++co) {
          const double* gp = g.data() + g.offset(n, co, 0, 0);
          double acc = 0.0;
          for (int i = 0; i < geo.oh * geo.ow; ++i) acc += gp[i];
          gb[static_cast<std::size_t>(co)] += acc;
        }
      }
    }
    if (!gx_needed && !gw_needed) return;
    Tensor* gxp = gx_needed ? &t.grad_mut(ix) : nullptr;
    Tensor* gwp = gw_needed ? &t.grad_mut(iw) : nullptr;
    for (int n = 0; n < geo.n; ++n) {
      for (int co = 0; co < geo.cout; ++co) {
        const double* gp = g.data() + g.offset(n, co, 0, 0);
        for (int ci = 0; ci < geo.cin; ++ci) {
          const double* ip = xval.data() + xval.offset(n, ci, 0, 0);
          double* gip = gxp ? gxp->data() + gxp->offset(n, ci, 0, 0) : nullptr;
          for (int ky = 0; ky < geo.k; ++ky) {
            for (int kx = 0; kx < geo.k; ++kx) {
              const double wk = wval.at(co, ci, ky, kx);
              const int a = lo[static_cast<std::size_t>(kx)];
              const int b = hi[static_cast<std::size_t>(kx)];
              double wacc = 0.0;
              for (int oy = 0; oy < geo.oh; ++oy) {
                const int iy = oy * geo.stride + ky - geo.pad;
                if (iy < 0 || iy >= geo.h) continue;
                const double* grow = gp + static_cast<std::size_t>(oy) * static_cast<std::size_t>(geo.ow);
                const std::ptrdiff_t base = static_cast<std::ptrdiff_t>(iy) * geo.w + kx - geo.pad;
                if (geo.stride == 1) {
                  if (gip) {
                    for (int ox = a; ox < b; ++ox) gip[base + ox] += wk * grow[ox];
                  }
                  if (gwp) {
                    for (int ox = a; ox < b; ++ox) wacc += grow[ox] * ip[base + ox];
                  }
                } else {
                  const std::ptrdiff_t st = geo.stride;
                  if (gip) {
                    for (int ox = a; ox < b; ++ox) gip[base + ox * st] += wk * grow[ox];
                  }
                  if (gwp) {
                    for (int ox = a; ox < b; ++ox) wacc += grow[ox] * ip[base + ox * st];
                  }
                }
              }
              if (gwp) gwp->at(co, ci, ky, kx) += wacc;
            }
          }
        }
      }
    }
  };
  if (has_bias) return x.tape().record(std::move(out), {x, weight, bias}, backward);
  return x.tape().record(std::move(out), {x, weight}, backward);
}

Var apply_mask(const Var& x, const Tensor& mask) {
  require(mask.shape() == x.shape(), "apply_mask: mask shape mismatch");
  const Tensor& xv = x.value();
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = xv[i] * mask[i];
  const int ix = x.id();
  return x.tape().record(std::move(out), {x}, [ix, mask](Tape& t, int self) {
    const Tensor& g = t.grad(self);
    Tensor& gx = t.grad_mut(ix);
    for (std::size_t i = 0; i < g.numel(); ++i) gx[i] += g[i] * mask[i];
  });
}

BatchNormOutput batch_norm_train(const Var& x, const Var& gamma, const Var& beta, double eps) {
  const Shape s = x.shape();
  require(gamma.numel() == static_cast<std::size_t>(s.c) && beta.numel() == static_cast<std::size_t>(s.c),
          "batch_norm: parameter size must equal channel count");
  const Tensor& xv = x.value();
  const std::size_t plane = s.plane();
  const double count = static_cast<double>(plane) * static_cast<double>(s.n);
  Tensor mean_t(Shape{1, s.c, 1, 1});
  Tensor var_t(Shape{1, s.c, 1, 1});
  for (int c = 0; c < s.c; ++c) {
    double acc = 0.0;
    for (int n = 0; n < s.n; ++n) {
      const double* p = xv.data() + xv.offset(n, c, 0, 0);
      for (std::size_t i = 0; i < plane; ++i) acc += p[i];
    }
    const double m = acc / count;
    double vacc = 0.0;
    for (int n = 0; n < s.n; ++n) {
      const double* p = xv.data() + xv.offset(n, c, 0, 0);
      for (std::size_t i = 0; i < plane; ++i) vacc += (p[i] - m) * (p[i] - m);
    }
    mean_t[static_cast<std::size_t>(c)] = m;
    var_t[static_cast<std::size_t>(c)] = vacc / count;
  }
  Tensor xhat(s);
  Tensor out(s);
  std::vector<double> inv_std(static_cast<std::size_t>(s.c));
  for (int c = 0; c < s.c; ++c) {
    const auto cc = static_cast<std::size_t>(c);
    inv_std[cc] = 1.0 / std::sqrt(var_t[cc] + eps);
    for (int n = 0; n < s.n; ++n) {
      const std::size_t o = xv.offset(n, c, 0, 0);
      for (std::size_t i = 0; i < plane; ++i) {
        xhat[o + i] = (xv[o + i] - mean_t[cc]) * inv_std[cc];
        out[o + i] = gamma.value()[cc] * xhat[o + i] + beta.value()[cc];
      }
    }
  }
  const int ix = x.id();
  const int ig = gamma.id();
  const int ibeta = beta.id();
  Var y = x.tape().record(std::move(out), {x, gamma, beta},
                          [=, xhat = std::move(xhat)](Tape& t, int self) {
    const Tensor& g = t.grad(self);
    const Tensor& gam = t.value(ig);
    for (int c = 0; c < s.c; ++c) {
      const auto cc = static_cast<std::size_t>(c);
      double sum_g = 0.0;
      double sum_gx = 0.0;
      for (int n = 0; n < s.n; ++n) {
        const std::size_t o = g.offset(n, c, 0, 0);
        for (std::size_t i = 0; i < plane; ++i) {
          sum_g += g[o + i];
          sum_gx += g[o + i] * xhat[o + i];
        }
      }
      if (t.requires_grad(ig)) t.grad_mut(ig)[cc] += sum_gx;
      if (t.requires_grad(ibeta)) t.grad_mut(ibeta)[cc] += sum_g;
      if (t.requires_grad(ix)) {
        Tensor& gx = t.grad_mut(ix);
        const double scale = gam[cc] * inv_std[cc] / count;
        for (int n = 0; n < s.n; ++n) {
          const std::size_t o = g.offset(n, c, 0, 0);
          for (std::size_t i = 0; i < plane; ++i) {
            gx[o + i] += scale * (count * g[o + i] - sum_g - xhat[o + i] * sum_gx);
          }
        }
      }
    }
  });
  return {y, std::move(mean_t), std::move(var_t)};
}

Var batch_norm_fixed(const Var& x, const Var& gamma, const Var& beta, const Tensor& mean,
                     const Tensor& var, double eps) {
  const Shape s = x.shape();
  const auto channels = static_cast<std::size_t>(s.c);
  require(gamma.numel() == channels && beta.numel() == channels && mean.numel() == channels &&
              var.numel() == channels,
          "batch_norm: parameter size must equal channel count");
  const Tensor& xv = x.value();
  const std::size_t plane = s.plane();
  std::vector<double> inv_std(channels);
  for (std::size_t c = 0; c < channels; ++c) inv_std[c] = 1.0 / std::sqrt(var[c] + eps);
  Tensor out(s);
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      const auto cc = static_cast<std::size_t>(c);
      const std::size_t o = xv.offset(n, c, 0, 0);
      for (std::size_t i = 0; i < plane; ++i) {
        out[o + i] = gamma.value()[cc] * (xv[o + i] - mean[cc]) * inv_std[cc] + beta.value()[cc];
      }
    }
  }
  const int ix = x.id();
  const int ig = gamma.id();
  const int ibeta = beta.id();
  return x.tape().record(std::move(out), {x, gamma, beta}, [=](Tape& t, int self) {
    const Tensor& g = t.grad(self);
    const Tensor& xval = t.value(ix);
    const Tensor& gam = t.value(ig);
    for (int n = 0; n < s.n; ++n) {
      for (int c = 0; c < s.c; ++c) {
        const auto cc = static_cast<std::size_t>(c);
        const std::size_t o = g.offset(n, c, 0, 0);
        for (std::size_t i = 0; i < plane; ++i) {
          const double xh = (xval[o + i] - mean[cc]) * inv_std[cc];
          if (t.requires_grad(ix)) t.grad_mut(ix)[o + i] += g[o + i] * gam[cc] * inv_std[cc];
          if (t.requires_grad(ig)) t.grad_mut(ig)[cc] += g[o + i] * xh;
          if (t.requires_grad(ibeta)) t.grad_mut(ibeta)[cc] += g[o + i];
        }
      }
    }
  });
}

Var detach(const Var& a) { return a.tape().constant(a.value()); }

}  // namespace smokelens::diff
