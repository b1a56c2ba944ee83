#include "regce/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>
#include <stdexcept>

namespace regce {

std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (std::int64_t d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ',';
    os << s[i];
  }
  os << ']';
  return os.str();
}

void check(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

// ---- Tensor --------------------------------------------------------------

template <class S>
Tensor<S> Tensor<S>::zeros(Shape shape, bool requires_grad) {
  const std::int64_t n = shape_numel(shape);
  check(n >= 0, "Tensor::zeros: negative extent in " + shape_str(shape));
  auto impl = std::make_shared<detail::TensorImpl<S>>();
  impl->shape = std::move(shape);
  impl->data.assign(static_cast<std::size_t>(n), S(0));
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

template <class S>
Tensor<S> Tensor<S>::full(Shape shape, S value, bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  std::fill(t.values().begin(), t.values().end(), value);
  return t;
}

template <class S>
Tensor<S> Tensor<S>::from_data(Shape shape, std::vector<S> data, bool requires_grad) {
  check(shape_numel(shape) == static_cast<std::int64_t>(data.size()),
        "Tensor::from_data: shape " + shape_str(shape) + " does not match data length " +
            std::to_string(data.size()));
  auto impl = std::make_shared<detail::TensorImpl<S>>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

template <class S>
Tensor<S> Tensor<S>::scalar_value(S value) {
  return from_data({1}, {value});
}

template <class S>
S Tensor<S>::item() const {
  check(defined() && numel() == 1,
        "Tensor::item: expected a one-element tensor, got " + (defined() ? shape_str(shape()) : "<empty>"));
  return impl_->data[0];
}

template <class S>
Tensor<S> Tensor<S>::detached_copy() const {
  auto impl = std::make_shared<detail::TensorImpl<S>>();
  impl->shape = impl_->shape;
  impl->data = impl_->data;
  return Tensor(std::move(impl));
}

// ---- grad mode -----------------------------------------------------------

namespace {
thread_local int t_no_grad_depth = 0;
}

NoGradGuard::NoGradGuard() { ++t_no_grad_depth; }
NoGradGuard::~NoGradGuard() { --t_no_grad_depth; }
bool NoGradGuard::grad_enabled() { return t_no_grad_depth == 0; }

// ---- Tape ----------------------------------------------------------------

namespace {
template <class S>
thread_local Tape<S>* t_current_tape = nullptr;
}

template <class S>
Tape<S>::~Tape() = default;

template <class S>
Tape<S>::Activation::Activation(Tape* t) : tape_(t), previous_(t_current_tape<S>) {
  t_current_tape<S> = t;
}

template <class S>
Tape<S>::Activation::~Activation() {
  t_current_tape<S> = previous_;
}

template <class S>
Tape<S>* Tape<S>::current() {
  return t_current_tape<S>;
}

template <class S>
void Tape<S>::record(const char* op,
                     std::vector<std::shared_ptr<detail::TensorImpl<S>>> involved,
                     std::function<void(std::uint64_t)> backward_fn) {
  entries_.push_back(Entry{op, std::move(involved), std::move(backward_fn)});
}

namespace {

template <class S>
std::vector<S>& flow_ref(detail::TensorImpl<S>& t, std::uint64_t pass) {
  if (t.flow_pass != pass) {
    t.flow.assign(t.data.size(), S(0));
    t.flow_pass = pass;
  }
  return t.flow;
}

template <class S>
bool has_flow(const detail::TensorImpl<S>& t, std::uint64_t pass) {
  return t.flow_pass == pass;
}

template <class S>
void merge_flow(detail::TensorImpl<S>& t, std::uint64_t pass) {
  if (t.flow_pass != pass || !t.requires_grad || t.merge_pass == pass) return;
  if (t.grad.size() != t.data.size()) t.grad.assign(t.data.size(), S(0));
  for (std::size_t i = 0; i < t.grad.size(); ++i) t.grad[i] += t.flow[i];
  t.merge_pass = pass;
}

}  // namespace

template <class S>
void Tape<S>::backward(const Tensor<S>& loss) {
  check(loss.defined() && loss.numel() == 1,
        "backward: loss must be a one-element tensor, got " +
            (loss.defined() ? shape_str(loss.shape()) : "<empty>"));
  const std::uint64_t pass = ++pass_counter_;
  flow_ref(*loss.impl(), pass)[0] = S(1);
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
    it->backward(pass);
  }
  merge_flow(*loss.impl(), pass);
  for (auto& e : entries_) {
    for (auto& t : e.tensors) merge_flow(*t, pass);
  }
}

// ---- kernels ---------------------------------------------------------------

namespace {

// C[M,N] += A[M,K] * B[K,N], row-major. The j-contiguous inner loop keeps
// the compiler's vectorizer happy without reassociating reductions.
template <class S>
void gemm_acc(std::int64_t m, std::int64_t k, std::int64_t n, const S* a, const S* b, S* c) {
  for (std::int64_t i = 0; i < m; ++i) {
    S* ci = c + i * n;
    const S* ai = a + i * k;
    for (std::int64_t p = 0; p < k; ++p) {
      const S av = ai[p];
      const S* bp = b + p * n;
      for (std::int64_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

template <class S>
void transpose(std::int64_t rows, std::int64_t cols, const S* src, S* dst) {
  for (std::int64_t i = 0; i < rows; ++i)
    for (std::int64_t j = 0; j < cols; ++j) dst[j * rows + i] = src[i * cols + j];
}

struct ConvDims {
  std::int64_t n, c, h, w;      // input
  std::int64_t o, kh, kw;       // kernel
  std::int64_t ho, wo;          // output
  int stride, pad;
};

template <class S>
void im2col(const ConvDims& d, const S* x, S* col) {
  // col[(c*kh + i)*kw + j][y*wo + x] over one sample.
  const std::int64_t plane = d.h * d.w;
  for (std::int64_t c = 0; c < d.c; ++c) {
    for (std::int64_t ki = 0; ki < d.kh; ++ki) {
      for (std::int64_t kj = 0; kj < d.kw; ++kj) {
        S* row = col + ((c * d.kh + ki) * d.kw + kj) * (d.ho * d.wo);
        for (std::int64_t oy = 0; oy < d.ho; ++oy) {
          const std::int64_t iy = oy * d.stride + ki - d.pad;
          if (iy < 0 || iy >= d.h) {
            std::fill(row + oy * d.wo, row + (oy + 1) * d.wo, S(0));
            continue;
          }
          const S* src = x + c * plane + iy * d.w;
          for (std::int64_t ox = 0; ox < d.wo; ++ox) {
            const std::int64_t ix = ox * d.stride + kj - d.pad;
            row[oy * d.wo + ox] = (ix >= 0 && ix < d.w) ? src[ix] : S(0);
          }
        }
      }
    }
  }
}

template <class S>
void col2im_acc(const ConvDims& d, const S* col, S* x) {
  const std::int64_t plane = d.h * d.w;
  for (std::int64_t c = 0; c < d.c; ++c) {
    for (std::int64_t ki = 0; ki < d.kh; ++ki) {
      for (std::int64_t kj = 0; kj < d.kw; ++kj) {
        const S* row = col + ((c * d.kh + ki) * d.kw + kj) * (d.ho * d.wo);
        for (std::int64_t oy = 0; oy < d.ho; ++oy) {
          const std::int64_t iy = oy * d.stride + ki - d.pad;
          if (iy < 0 || iy >= d.h) continue;
          S* dst = x + c * plane + iy * d.w;
          for (std::int64_t ox = 0; ox < d.wo; ++ox) {
            const std::int64_t ix = ox * d.stride + kj - d.pad;
            if (ix >= 0 && ix < d.w) dst[ix] += row[oy * d.wo + ox];
          }
        }
      }
    }
  }
}

template <class S>
bool all_finite(const std::vector<S>& v) {
  for (S x : v)
    if (!std::isfinite(static_cast<double>(x))) return false;
  return true;
}

// Shared softmax-style row pass: writes exp(x - logsumexp) into `probs`
// (when non-null) and returns per-row logsumexp values.
template <class S>
std::vector<double> row_logsumexp(const S* x, std::int64_t n, std::int64_t k, S* probs) {
  std::vector<double> lse(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) {
    const S* row = x + i * k;
    double m = static_cast<double>(row[0]);
    for (std::int64_t j = 1; j < k; ++j) m = std::max(m, static_cast<double>(row[j]));
    double s = 0.0;
    for (std::int64_t j = 0; j < k; ++j) s += std::exp(static_cast<double>(row[j]) - m);
    lse[static_cast<std::size_t>(i)] = m + std::log(s);
    if (probs) {
      S* prow = probs + i * k;
      for (std::int64_t j = 0; j < k; ++j)
        prow[j] = static_cast<S>(std::exp(static_cast<double>(row[j]) - lse[static_cast<std::size_t>(i)]));
    }
  }
  return lse;
}

template <class S>
bool should_record(std::initializer_list<const Tensor<S>*> inputs) {
  if (!NoGradGuard::grad_enabled() || Tape<S>::current() == nullptr) return false;
  for (const Tensor<S>* t : inputs)
    if (t->defined() && t->requires_grad()) return true;
  return false;
}

}  // namespace

// ---- ops -------------------------------------------------------------------

namespace {
enum class AddMode { same, bias_last, bias_channel };
}

template <class S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  AddMode mode;
  if (a.shape() == b.shape()) {
    mode = AddMode::same;
  } else if (a.rank() == 2 && b.rank() == 1 && b.dim(0) == a.dim(1)) {
    mode = AddMode::bias_last;
  } else if (a.rank() == 4 && b.rank() == 1 && b.dim(0) == a.dim(1)) {
    mode = AddMode::bias_channel;
  } else {
    throw std::invalid_argument("add: incompatible shapes " + shape_str(a.shape()) + " and " +
                                shape_str(b.shape()));
  }

  Tensor<S> out = a.detached_copy();
  S* o = out.data();
  const S* bd = b.data();
  if (mode == AddMode::same) {
    for (std::int64_t i = 0; i < out.numel(); ++i) o[i] += bd[i];
  } else if (mode == AddMode::bias_last) {
    const std::int64_t n = a.dim(0), k = a.dim(1);
    for (std::int64_t i = 0; i < n; ++i)
      for (std::int64_t j = 0; j < k; ++j) o[i * k + j] += bd[j];
  } else {
    const std::int64_t n = a.dim(0), c = a.dim(1), hw = a.dim(2) * a.dim(3);
    for (std::int64_t i = 0; i < n; ++i)
      for (std::int64_t ch = 0; ch < c; ++ch) {
        const S bias = bd[ch];
        S* p = o + (i * c + ch) * hw;
        for (std::int64_t j = 0; j < hw; ++j) p[j] += bias;
      }
  }

  if (should_record<S>({&a, &b})) {
    out.set_requires_grad(true);
    auto ai = a.impl(), bi = b.impl(), oi = out.impl();
    Tape<S>::current()->record("add", {ai, bi, oi}, [ai, bi, oi, mode](std::uint64_t pass) {
      if (!has_flow(*oi, pass)) return;
      const std::vector<S>& g = oi->flow;
      if (ai->requires_grad) {
        std::vector<S>& fa = flow_ref(*ai, pass);
        for (std::size_t i = 0; i < g.size(); ++i) fa[i] += g[i];
      }
      if (bi->requires_grad) {
        std::vector<S>& fb = flow_ref(*bi, pass);
        if (mode == AddMode::same) {
          for (std::size_t i = 0; i < g.size(); ++i) fb[i] += g[i];
        } else if (mode == AddMode::bias_last) {
          const std::int64_t n = ai->shape[0], k = ai->shape[1];
          for (std::int64_t i = 0; i < n; ++i)
            for (std::int64_t j = 0; j < k; ++j) fb[static_cast<std::size_t>(j)] += g[static_cast<std::size_t>(i * k + j)];
        } else {
          const std::int64_t n = ai->shape[0], c = ai->shape[1], hw = ai->shape[2] * ai->shape[3];
          for (std::int64_t i = 0; i < n; ++i)
            for (std::int64_t ch = 0; ch < c; ++ch) {
              const S* p = g.data() + (i * c + ch) * hw;
              S acc = S(0);
              for (std::int64_t j = 0; j < hw; ++j) acc += p[j];
              fb[static_cast<std::size_t>(ch)] += acc;
            }
        }
      }
    });
  }
  return out;
}

template <class S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  check(a.shape() == b.shape(),
        "mul: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  Tensor<S> out = Tensor<S>::zeros(a.shape());
  const S* ad = a.data();
  const S* bd = b.data();
  S* o = out.data();
  for (std::int64_t i = 0; i < out.numel(); ++i) o[i] = ad[i] * bd[i];

  if (should_record<S>({&a, &b})) {
    out.set_requires_grad(true);
    auto ai = a.impl(), bi = b.impl(), oi = out.impl();
    Tape<S>::current()->record("mul", {ai, bi, oi}, [ai, bi, oi](std::uint64_t pass) {
      if (!has_flow(*oi, pass)) return;
      const std::vector<S>& g = oi->flow;
      if (ai->requires_grad) {
        std::vector<S>& fa = flow_ref(*ai, pass);
        for (std::size_t i = 0; i < g.size(); ++i) fa[i] += g[i] * bi->data[i];
      }
      if (bi->requires_grad) {
        std::vector<S>& fb = flow_ref(*bi, pass);
        for (std::size_t i = 0; i < g.size(); ++i) fb[i] += g[i] * ai->data[i];
      }
    });
  }
  return out;
}

template <class S>
Tensor<S> scale(const Tensor<S>& a, S factor) {
  Tensor<S> out = Tensor<S>::zeros(a.shape());
  const S* ad = a.data();
  S* o = out.data();
  for (std::int64_t i = 0; i < out.numel(); ++i) o[i] = ad[i] * factor;

  if (should_record<S>({&a})) {
    out.set_requires_grad(true);
    auto ai = a.impl(), oi = out.impl();
    Tape<S>::current()->record("scale", {ai, oi}, [ai, oi, factor](std::uint64_t pass) {
      if (!has_flow(*oi, pass) || !ai->requires_grad) return;
      const std::vector<S>& g = oi->flow;
      std::vector<S>& fa = flow_ref(*ai, pass);
      for (std::size_t i = 0; i < g.size(); ++i) fa[i] += g[i] * factor;
    });
  }
  return out;
}

template <class S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  check(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(0),
        "matmul: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  const std::int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor<S> out = Tensor<S>::zeros({m, n});
  gemm_acc(m, k, n, a.data(), b.data(), out.data());

  if (should_record<S>({&a, &b})) {
    out.set_requires_grad(true);
    auto ai = a.impl(), bi = b.impl(), oi = out.impl();
    Tape<S>::current()->record("matmul", {ai, bi, oi}, [ai, bi, oi, m, k, n](std::uint64_t pass) {
      if (!has_flow(*oi, pass)) return;
      const S* g = oi->flow.data();
      if (ai->requires_grad) {
        // dA += g * B^T
        std::vector<S> bt(static_cast<std::size_t>(k * n));
        transpose(k, n, bi->data.data(), bt.data());
        gemm_acc(m, n, k, g, bt.data(), flow_ref(*ai, pass).data());
      }
      if (bi->requires_grad) {
        // dB += A^T * g
        std::vector<S> at(static_cast<std::size_t>(m * k));
        transpose(m, k, ai->data.data(), at.data());
        gemm_acc(k, m, n, at.data(), g, flow_ref(*bi, pass).data());
      }
    });
  }
  return out;
}

template <class S>
Tensor<S> relu(const Tensor<S>& x) {
  Tensor<S> out = Tensor<S>::zeros(x.shape());
  const S* xd = x.data();
  S* o = out.data();
  for (std::int64_t i = 0; i < out.numel(); ++i) o[i] = xd[i] > S(0) ? xd[i] : S(0);

  if (should_record<S>({&x})) {
    out.set_requires_grad(true);
    auto xi = x.impl(), oi = out.impl();
    Tape<S>::current()->record("relu", {xi, oi}, [xi, oi](std::uint64_t pass) {
      if (!has_flow(*oi, pass) || !xi->requires_grad) return;
      const std::vector<S>& g = oi->flow;
      std::vector<S>& fx = flow_ref(*xi, pass);
      for (std::size_t i = 0; i < g.size(); ++i)
        if (xi->data[i] > S(0)) fx[i] += g[i];
    });
  }
  return out;
}

template <class S>
Tensor<S> conv2d(const Tensor<S>& x, const Tensor<S>& w, int stride, int padding) {
  check(x.rank() == 4 && w.rank() == 4,
        "conv2d: expected NCHW input and OIHW kernel, got " + shape_str(x.shape()) + " and " +
            shape_str(w.shape()));
  check(x.dim(1) == w.dim(1), "conv2d: input channels " + shape_str(x.shape()) +
                                  " do not match kernel " + shape_str(w.shape()));
  check(stride >= 1 && padding >= 0, "conv2d: stride must be >= 1 and padding >= 0");
  ConvDims d;
  d.n = x.dim(0); d.c = x.dim(1); d.h = x.dim(2); d.w = x.dim(3);
  d.o = w.dim(0); d.kh = w.dim(2); d.kw = w.dim(3);
  d.stride = stride; d.pad = padding;
  d.ho = (d.h + 2 * padding - d.kh) / stride + 1;
  d.wo = (d.w + 2 * padding - d.kw) / stride + 1;
  check(d.ho >= 1 && d.wo >= 1, "conv2d: kernel " + shape_str(w.shape()) + " larger than padded input " +
                                    shape_str(x.shape()));

  Tensor<S> out = Tensor<S>::zeros({d.n, d.o, d.ho, d.wo});
  const std::int64_t ckk = d.c * d.kh * d.kw;
  const std::int64_t owo = d.ho * d.wo;
  std::vector<S> col(static_cast<std::size_t>(ckk * owo));
  for (std::int64_t n = 0; n < d.n; ++n) {
    im2col(d, x.data() + n * d.c * d.h * d.w, col.data());
    gemm_acc(d.o, ckk, owo, w.data(), col.data(), out.data() + n * d.o * owo);
  }

  if (should_record<S>({&x, &w})) {
    out.set_requires_grad(true);
    auto xi = x.impl(), wi = w.impl(), oi = out.impl();
    Tape<S>::current()->record("conv2d", {xi, wi, oi}, [xi, wi, oi, d](std::uint64_t pass) {
      if (!has_flow(*oi, pass)) return;
      const std::int64_t ckk = d.c * d.kh * d.kw;
      const std::int64_t owo = d.ho * d.wo;
      const S* g = oi->flow.data();
      std::vector<S> col(static_cast<std::size_t>(ckk * owo));
      if (wi->requires_grad) {
        std::vector<S>& fw = flow_ref(*wi, pass);
        std::vector<S> colt(static_cast<std::size_t>(ckk * owo));
        for (std::int64_t n = 0; n < d.n; ++n) {
          im2col(d, xi->data.data() + n * d.c * d.h * d.w, col.data());
          transpose(ckk, owo, col.data(), colt.data());
          gemm_acc(d.o, owo, ckk, g + n * d.o * owo, colt.data(), fw.data());
        }
      }
      if (xi->requires_grad) {
        std::vector<S>& fx = flow_ref(*xi, pass);
        std::vector<S> wt(static_cast<std::size_t>(d.o * ckk));
        transpose(d.o, ckk, wi->data.data(), wt.data());
        for (std::int64_t n = 0; n < d.n; ++n) {
          std::fill(col.begin(), col.end(), S(0));
          gemm_acc(ckk, d.o, owo, wt.data(), g + n * d.o * owo, col.data());
          col2im_acc(d, col.data(), fx.data() + n * d.c * d.h * d.w);
        }
      }
    });
  }
  return out;
}

template <class S>
Tensor<S> batchnorm2d(const Tensor<S>& x, const Tensor<S>& gamma, const Tensor<S>& beta,
                      Tensor<S>& running_mean, Tensor<S>& running_var, bool training,
                      double momentum, double eps) {
  check(x.rank() == 4, "batchnorm2d: expected NCHW input, got " + shape_str(x.shape()));
  const std::int64_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  for (const Tensor<S>* t : {&gamma, &beta, &running_mean, &running_var}) {
    check(t->rank() == 1 && t->dim(0) == c,
          "batchnorm2d: per-channel tensor " + shape_str(t->shape()) + " does not match input " +
              shape_str(x.shape()));
  }
  const std::int64_t count = n * hw;
  check(count >= 1, "batchnorm2d: empty input");

  std::vector<double> mean(static_cast<std::size_t>(c), 0.0);
  std::vector<double> var(static_cast<std::size_t>(c), 0.0);
  const S* xd = x.data();
  if (training) {
    for (std::int64_t ch = 0; ch < c; ++ch) {
      double s = 0.0, s2 = 0.0;
      for (std::int64_t i = 0; i < n; ++i) {
        const S* p = xd + (i * c + ch) * hw;
        for (std::int64_t j = 0; j < hw; ++j) {
          const double v = static_cast<double>(p[j]);
          s += v;
          s2 += v * v;
        }
      }
      const double m = s / static_cast<double>(count);
      mean[static_cast<std::size_t>(ch)] = m;
      var[static_cast<std::size_t>(ch)] = std::max(0.0, s2 / static_cast<double>(count) - m * m);
    }
    // Running buffers: biased batch variance is used for normalization, the
    // unbiased estimate goes into the running average.
    S* rm = running_mean.data();
    S* rv = running_var.data();
    const double unbias = count > 1 ? static_cast<double>(count) / static_cast<double>(count - 1) : 1.0;
    for (std::int64_t ch = 0; ch < c; ++ch) {
      rm[ch] = static_cast<S>((1.0 - momentum) * static_cast<double>(rm[ch]) + momentum * mean[static_cast<std::size_t>(ch)]);
      rv[ch] = static_cast<S>((1.0 - momentum) * static_cast<double>(rv[ch]) + momentum * var[static_cast<std::size_t>(ch)] * unbias);
    }
  } else {
    for (std::int64_t ch = 0; ch < c; ++ch) {
      mean[static_cast<std::size_t>(ch)] = static_cast<double>(running_mean.data()[ch]);
      var[static_cast<std::size_t>(ch)] = static_cast<double>(running_var.data()[ch]);
    }
  }

  std::vector<double> invstd(static_cast<std::size_t>(c));
  for (std::int64_t ch = 0; ch < c; ++ch)
    invstd[static_cast<std::size_t>(ch)] = 1.0 / std::sqrt(var[static_cast<std::size_t>(ch)] + eps);

  Tensor<S> out = Tensor<S>::zeros(x.shape());
  S* o = out.data();
  const S* gm = gamma.data();
  const S* bt = beta.data();
  for (std::int64_t i = 0; i < n; ++i) {
    for (std::int64_t ch = 0; ch < c; ++ch) {
      const double m = mean[static_cast<std::size_t>(ch)];
      const double is = invstd[static_cast<std::size_t>(ch)];
      const double g = static_cast<double>(gm[ch]);
      const double b = static_cast<double>(bt[ch]);
      const S* px = xd + (i * c + ch) * hw;
      S* po = o + (i * c + ch) * hw;
      for (std::int64_t j = 0; j < hw; ++j)
        po[j] = static_cast<S>((static_cast<double>(px[j]) - m) * is * g + b);
    }
  }

  if (should_record<S>({&x, &gamma, &beta})) {
    out.set_requires_grad(true);
    auto xi = x.impl(), gi = gamma.impl(), bi = beta.impl(), oi = out.impl();
    Tape<S>::current()->record(
        "batchnorm2d", {xi, gi, bi, oi},
        [xi, gi, bi, oi, mean, invstd, training, n, c, hw](std::uint64_t pass) {
          if (!has_flow(*oi, pass)) return;
          const std::vector<S>& g = oi->flow;
          const std::int64_t count = n * hw;
          // Per-channel sums of dy and dy*xhat drive every term.
          std::vector<double> sum_g(static_cast<std::size_t>(c), 0.0);
          std::vector<double> sum_gx(static_cast<std::size_t>(c), 0.0);
          for (std::int64_t i = 0; i < n; ++i) {
            for (std::int64_t ch = 0; ch < c; ++ch) {
              const double m = mean[static_cast<std::size_t>(ch)];
              const double is = invstd[static_cast<std::size_t>(ch)];
              const S* pg = g.data() + (i * c + ch) * hw;
              const S* px = xi->data.data() + (i * c + ch) * hw;
              double sg = 0.0, sgx = 0.0;
              for (std::int64_t j = 0; j < hw; ++j) {
                const double gv = static_cast<double>(pg[j]);
                sg += gv;
                sgx += gv * (static_cast<double>(px[j]) - m) * is;
              }
              sum_g[static_cast<std::size_t>(ch)] += sg;
              sum_gx[static_cast<std::size_t>(ch)] += sgx;
            }
          }
          if (gi->requires_grad) {
            std::vector<S>& fg = flow_ref(*gi, pass);
            for (std::int64_t ch = 0; ch < c; ++ch) fg[static_cast<std::size_t>(ch)] += static_cast<S>(sum_gx[static_cast<std::size_t>(ch)]);
          }
          if (bi->requires_grad) {
            std::vector<S>& fb = flow_ref(*bi, pass);
            for (std::int64_t ch = 0; ch < c; ++ch) fb[static_cast<std::size_t>(ch)] += static_cast<S>(sum_g[static_cast<std::size_t>(ch)]);
          }
          if (xi->requires_grad) {
            std::vector<S>& fx = flow_ref(*xi, pass);
            for (std::int64_t i = 0; i < n; ++i) {
              for (std::int64_t ch = 0; ch < c; ++ch) {
                const double m = mean[static_cast<std::size_t>(ch)];
                const double is = invstd[static_cast<std::size_t>(ch)];
                const double gam = static_cast<double>(gi->data[static_cast<std::size_t>(ch)]);
                const S* pg = g.data() + (i * c + ch) * hw;
                const S* px = xi->data.data() + (i * c + ch) * hw;
                S* pf = fx.data() + (i * c + ch) * hw;
                if (training) {
                  const double k1 = sum_g[static_cast<std::size_t>(ch)] / static_cast<double>(count);
                  const double k2 = sum_gx[static_cast<std::size_t>(ch)] / static_cast<double>(count);
                  for (std::int64_t j = 0; j < hw; ++j) {
                    const double xhat = (static_cast<double>(px[j]) - m) * is;
                    pf[j] += static_cast<S>(gam * is * (static_cast<double>(pg[j]) - k1 - xhat * k2));
                  }
                } else {
                  for (std::int64_t j = 0; j < hw; ++j)
                    pf[j] += static_cast<S>(gam * is * static_cast<double>(pg[j]));
                }
              }
            }
          }
        });
  }
  return out;
}

template <class S>
Tensor<S> global_avg_pool(const Tensor<S>& x) {
  check(x.rank() == 4, "global_avg_pool: expected NCHW input, got " + shape_str(x.shape()));
  const std::int64_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  check(hw >= 1, "global_avg_pool: empty spatial extent " + shape_str(x.shape()));
  Tensor<S> out = Tensor<S>::zeros({n, c});
  const S* xd = x.data();
  S* o = out.data();
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t ch = 0; ch < c; ++ch) {
      const S* p = xd + (i * c + ch) * hw;
      double acc = 0.0;
      for (std::int64_t j = 0; j < hw; ++j) acc += static_cast<double>(p[j]);
      o[i * c + ch] = static_cast<S>(acc / static_cast<double>(hw));
    }

  if (should_record<S>({&x})) {
    out.set_requires_grad(true);
    auto xi = x.impl(), oi = out.impl();
    Tape<S>::current()->record("global_avg_pool", {xi, oi}, [xi, oi, n, c, hw](std::uint64_t pass) {
      if (!has_flow(*oi, pass) || !xi->requires_grad) return;
      const std::vector<S>& g = oi->flow;
      std::vector<S>& fx = flow_ref(*xi, pass);
      const S inv = static_cast<S>(1.0 / static_cast<double>(hw));
      for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t ch = 0; ch < c; ++ch) {
          const S gv = g[static_cast<std::size_t>(i * c + ch)] * inv;
          S* p = fx.data() + (i * c + ch) * hw;
          for (std::int64_t j = 0; j < hw; ++j) p[j] += gv;
        }
    });
  }
  return out;
}

template <class S>
Tensor<S> max_pool2d(const Tensor<S>& x, int kernel, int stride) {
  check(x.rank() == 4, "max_pool2d: expected NCHW input, got " + shape_str(x.shape()));
  check(kernel >= 1 && stride >= 1, "max_pool2d: kernel and stride must be positive");
  const std::int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::int64_t ho = (h - kernel) / stride + 1;
  const std::int64_t wo = (w - kernel) / stride + 1;
  check(ho >= 1 && wo >= 1,
        "max_pool2d: window " + std::to_string(kernel) + " larger than input " + shape_str(x.shape()));

  Tensor<S> out = Tensor<S>::zeros({n, c, ho, wo});
  auto argmax = std::make_shared<std::vector<std::int64_t>>(static_cast<std::size_t>(out.numel()));
  const S* xd = x.data();
  S* o = out.data();
  std::int64_t oidx = 0;
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t ch = 0; ch < c; ++ch) {
      const S* plane = xd + (i * c + ch) * h * w;
      for (std::int64_t oy = 0; oy < ho; ++oy)
        for (std::int64_t ox = 0; ox < wo; ++ox, ++oidx) {
          S best = plane[oy * stride * w + ox * stride];
          std::int64_t best_at = oy * stride * w + ox * stride;
          for (std::int64_t ki = 0; ki < kernel; ++ki)
            for (std::int64_t kj = 0; kj < kernel; ++kj) {
              const std::int64_t at = (oy * stride + ki) * w + (ox * stride + kj);
              if (plane[at] > best) {
                best = plane[at];
                best_at = at;
              }
            }
          o[oidx] = best;
          (*argmax)[static_cast<std::size_t>(oidx)] = (i * c + ch) * h * w + best_at;
        }
    }

  if (should_record<S>({&x})) {
    out.set_requires_grad(true);
    auto xi = x.impl(), oi = out.impl();
    Tape<S>::current()->record("max_pool2d", {xi, oi}, [xi, oi, argmax](std::uint64_t pass) {
      if (!has_flow(*oi, pass) || !xi->requires_grad) return;
      const std::vector<S>& g = oi->flow;
      std::vector<S>& fx = flow_ref(*xi, pass);
      for (std::size_t i = 0; i < g.size(); ++i) fx[static_cast<std::size_t>((*argmax)[i])] += g[i];
    });
  }
  return out;
}

template <class S>
Tensor<S> reshape(const Tensor<S>& x, Shape new_shape) {
  check(shape_numel(new_shape) == x.numel(),
        "reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(new_shape));
  Tensor<S> out = Tensor<S>::from_data(std::move(new_shape), x.values());

  if (should_record<S>({&x})) {
    out.set_requires_grad(true);
    auto xi = x.impl(), oi = out.impl();
    Tape<S>::current()->record("reshape", {xi, oi}, [xi, oi](std::uint64_t pass) {
      if (!has_flow(*oi, pass) || !xi->requires_grad) return;
      const std::vector<S>& g = oi->flow;
      std::vector<S>& fx = flow_ref(*xi, pass);
      for (std::size_t i = 0; i < g.size(); ++i) fx[i] += g[i];
    });
  }
  return out;
}

template <class S>
Tensor<S> concat(const std::vector<Tensor<S>>& parts, int axis) {
  check(!parts.empty(), "concat: no inputs");
  const int rank = parts.front().rank();
  check(axis >= 0 && axis < rank, "concat: axis " + std::to_string(axis) + " out of range for rank " +
                                      std::to_string(rank));
  Shape out_shape = parts.front().shape();
  for (std::size_t p = 1; p < parts.size(); ++p) {
    check(parts[p].rank() == rank, "concat: rank mismatch between " + shape_str(parts.front().shape()) +
                                       " and " + shape_str(parts[p].shape()));
    for (int d = 0; d < rank; ++d) {
      if (d == axis) continue;
      check(parts[p].dim(d) == out_shape[static_cast<std::size_t>(d)],
            "concat: shapes " + shape_str(parts.front().shape()) + " and " + shape_str(parts[p].shape()) +
                " differ off the concat axis");
    }
    out_shape[static_cast<std::size_t>(axis)] += parts[p].dim(axis);
  }

  // outer x axis x inner layout
  std::int64_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= out_shape[static_cast<std::size_t>(d)];
  for (int d = axis + 1; d < rank; ++d) inner *= out_shape[static_cast<std::size_t>(d)];

  Tensor<S> out = Tensor<S>::zeros(out_shape);
  S* o = out.data();
  const std::int64_t out_axis = out_shape[static_cast<std::size_t>(axis)];
  std::int64_t offset = 0;
  for (const Tensor<S>& part : parts) {
    const std::int64_t pa = part.dim(axis);
    const S* pd = part.data();
    for (std::int64_t i = 0; i < outer; ++i)
      std::memcpy(o + (i * out_axis + offset) * inner, pd + i * pa * inner,
                  static_cast<std::size_t>(pa * inner) * sizeof(S));
    offset += pa;
  }

  bool record = false;
  for (const Tensor<S>& part : parts)
    if (part.requires_grad()) record = true;
  if (record && NoGradGuard::grad_enabled() && Tape<S>::current() != nullptr) {
    out.set_requires_grad(true);
    std::vector<std::shared_ptr<detail::TensorImpl<S>>> impls;
    impls.reserve(parts.size() + 1);
    for (const Tensor<S>& part : parts) impls.push_back(part.impl());
    auto oi = out.impl();
    impls.push_back(oi);
    std::vector<std::int64_t> axis_sizes;
    for (const Tensor<S>& part : parts) axis_sizes.push_back(part.dim(axis));
    Tape<S>::current()->record(
        "concat", impls, [impls, oi, axis_sizes, outer, inner, out_axis](std::uint64_t pass) {
          if (!has_flow(*oi, pass)) return;
          const std::vector<S>& g = oi->flow;
          std::int64_t offset = 0;
          for (std::size_t p = 0; p + 1 < impls.size(); ++p) {
            const std::int64_t pa = axis_sizes[p];
            if (impls[p]->requires_grad) {
              std::vector<S>& fp = flow_ref(*impls[p], pass);
              for (std::int64_t i = 0; i < outer; ++i) {
                const S* src = g.data() + (i * out_axis + offset) * inner;
                S* dst = fp.data() + i * pa * inner;
                for (std::int64_t j = 0; j < pa * inner; ++j) dst[j] += src[j];
              }
            }
            offset += pa;
          }
        });
  }
  return out;
}

template <class S>
Tensor<S> sum(const Tensor<S>& x) {
  double acc = 0.0;
  const S* xd = x.data();
  for (std::int64_t i = 0; i < x.numel(); ++i) acc += static_cast<double>(xd[i]);
  Tensor<S> out = Tensor<S>::scalar_value(static_cast<S>(acc));

  if (should_record<S>({&x})) {
    out.set_requires_grad(true);
    auto xi = x.impl(), oi = out.impl();
    Tape<S>::current()->record("sum", {xi, oi}, [xi, oi](std::uint64_t pass) {
      if (!has_flow(*oi, pass) || !xi->requires_grad) return;
      const S g = oi->flow[0];
      std::vector<S>& fx = flow_ref(*xi, pass);
      for (std::size_t i = 0; i < fx.size(); ++i) fx[i] += g;
    });
  }
  return out;
}

template <class S>
Tensor<S> softmax(const Tensor<S>& x) {
  check(x.rank() == 2, "softmax: expected [N,K] input, got " + shape_str(x.shape()));
  Tensor<S> out = Tensor<S>::zeros(x.shape());
  const std::int64_t n = x.dim(0), k = x.dim(1);
  row_logsumexp(x.data(), n, k, out.data());

  if (should_record<S>({&x})) {
    out.set_requires_grad(true);
    auto xi = x.impl(), oi = out.impl();
    Tape<S>::current()->record("softmax", {xi, oi}, [xi, oi, n, k](std::uint64_t pass) {
      if (!has_flow(*oi, pass) || !xi->requires_grad) return;
      const std::vector<S>& g = oi->flow;
      std::vector<S>& fx = flow_ref(*xi, pass);
      for (std::int64_t i = 0; i < n; ++i) {
        const S* s = oi->data.data() + i * k;
        const S* gr = g.data() + i * k;
        double dot = 0.0;
        for (std::int64_t j = 0; j < k; ++j) dot += static_cast<double>(gr[j]) * static_cast<double>(s[j]);
        S* f = fx.data() + i * k;
        for (std::int64_t j = 0; j < k; ++j)
          f[j] += static_cast<S>(static_cast<double>(s[j]) * (static_cast<double>(gr[j]) - dot));
      }
    });
  }
  return out;
}

// ---- losses ----------------------------------------------------------------

namespace {

template <class S>
void validate_logits(const Tensor<S>& logits) {
  check(logits.defined() && logits.rank() == 2 && logits.dim(0) >= 1,
        "softmax_cross_entropy: expected non-empty [N,K] logits, got " +
            (logits.defined() ? shape_str(logits.shape()) : "<empty>"));
  check(all_finite(logits.values()), "softmax_cross_entropy: non-finite logits rejected");
}

template <class S>
LossValue<S> cross_entropy_core(const Tensor<S>& logits, const std::vector<std::int32_t>* indices,
                                const Tensor<S>* rows) {
  validate_logits(logits);
  const std::int64_t n = logits.dim(0), k = logits.dim(1);
  if (indices) {
    check(static_cast<std::int64_t>(indices->size()) == n,
          "softmax_cross_entropy: got " + std::to_string(indices->size()) + " targets for " +
              std::to_string(n) + " rows");
    for (std::int32_t t : *indices)
      check(t >= 0 && t < k, "softmax_cross_entropy: target index " + std::to_string(t) +
                                 " out of range for " + std::to_string(k) + " classes");
  } else {
    check(rows->shape() == logits.shape(), "softmax_cross_entropy: target rows " +
                                               shape_str(rows->shape()) + " do not match logits " +
                                               shape_str(logits.shape()));
    for (std::int64_t i = 0; i < n; ++i) {
      double s = 0.0;
      for (std::int64_t j = 0; j < k; ++j) s += static_cast<double>(rows->data()[i * k + j]);
      check(std::abs(s - 1.0) < 1e-4, "softmax_cross_entropy: target row " + std::to_string(i) +
                                          " sums to " + std::to_string(s) + ", expected 1");
    }
  }

  // probs buffer doubles as the saved softmax for the backward pass
  auto probs = std::make_shared<std::vector<S>>(static_cast<std::size_t>(n * k));
  const std::vector<double> lse = row_logsumexp(logits.data(), n, k, probs->data());

  LossValue<S> result;
  result.per_example.resize(static_cast<std::size_t>(n));
  double total = 0.0;
  for (std::int64_t i = 0; i < n; ++i) {
    double row_loss;
    if (indices) {
      row_loss = lse[static_cast<std::size_t>(i)] -
                 static_cast<double>(logits.data()[i * k + (*indices)[static_cast<std::size_t>(i)]]);
    } else {
      double dot = 0.0;
      for (std::int64_t j = 0; j < k; ++j)
        dot += static_cast<double>(rows->data()[i * k + j]) * static_cast<double>(logits.data()[i * k + j]);
      row_loss = lse[static_cast<std::size_t>(i)] - dot;
    }
    result.per_example[static_cast<std::size_t>(i)] = row_loss;
    total += row_loss;
  }
  result.loss = Tensor<S>::scalar_value(static_cast<S>(total / static_cast<double>(n)));

  const Tensor<S>* row_targets = rows;
  if (should_record<S>({&logits})) {
    result.loss.set_requires_grad(true);
    auto li = logits.impl();
    auto oi = result.loss.impl();
    std::shared_ptr<std::vector<std::int32_t>> idx;
    std::shared_ptr<detail::TensorImpl<S>> ri;
    if (indices) idx = std::make_shared<std::vector<std::int32_t>>(*indices);
    if (row_targets) ri = row_targets->impl();
    Tape<S>::current()->record("softmax_cross_entropy", {li, oi},
                               [li, oi, probs, idx, ri, n, k](std::uint64_t pass) {
                                 if (!has_flow(*oi, pass) || !li->requires_grad) return;
                                 const S g = oi->flow[0];
                                 const S invn = static_cast<S>(1.0 / static_cast<double>(n));
                                 std::vector<S>& fl = flow_ref(*li, pass);
                                 for (std::int64_t i = 0; i < n; ++i)
                                   for (std::int64_t j = 0; j < k; ++j) {
                                     S t;
                                     if (idx) t = ((*idx)[static_cast<std::size_t>(i)] == j) ? S(1) : S(0);
                                     else t = ri->data[static_cast<std::size_t>(i * k + j)];
                                     fl[static_cast<std::size_t>(i * k + j)] +=
                                         g * ((*probs)[static_cast<std::size_t>(i * k + j)] - t) * invn;
                                   }
                               });
  }
  return result;
}

}  // namespace

template <class S>
LossValue<S> softmax_cross_entropy(const Tensor<S>& logits, const std::vector<std::int32_t>& targets) {
  return cross_entropy_core<S>(logits, &targets, nullptr);
}

template <class S>
LossValue<S> softmax_cross_entropy(const Tensor<S>& logits, const Tensor<S>& target_rows) {
  return cross_entropy_core<S>(logits, nullptr, &target_rows);
}

template <class S>
Tensor<S> softmax_mse(const Tensor<S>& logits, const Tensor<S>& target_rows) {
  check(logits.defined() && logits.rank() == 2 && logits.dim(0) >= 1,
        "softmax_mse: expected non-empty [N,K] logits, got " +
            (logits.defined() ? shape_str(logits.shape()) : "<empty>"));
  check(target_rows.shape() == logits.shape(),
        "softmax_mse: target rows " + shape_str(target_rows.shape()) + " do not match logits " +
            shape_str(logits.shape()));
  check(all_finite(logits.values()), "softmax_mse: non-finite logits rejected");
  const std::int64_t n = logits.dim(0), k = logits.dim(1);

  auto probs = std::make_shared<std::vector<S>>(static_cast<std::size_t>(n * k));
  row_logsumexp(logits.data(), n, k, probs->data());
  double total = 0.0;
  for (std::int64_t i = 0; i < n * k; ++i) {
    const double d = static_cast<double>((*probs)[static_cast<std::size_t>(i)]) -
                     static_cast<double>(target_rows.data()[i]);
    total += d * d;
  }
  Tensor<S> out = Tensor<S>::scalar_value(static_cast<S>(total / static_cast<double>(n * k)));

  if (should_record<S>({&logits})) {
    out.set_requires_grad(true);
    auto li = logits.impl(), ti = target_rows.impl(), oi = out.impl();
    Tape<S>::current()->record("softmax_mse", {li, oi}, [li, ti, oi, probs, n, k](std::uint64_t pass) {
      if (!has_flow(*oi, pass) || !li->requires_grad) return;
      const double g = static_cast<double>(oi->flow[0]);
      const double inv = 2.0 / static_cast<double>(n * k);
      std::vector<S>& fl = flow_ref(*li, pass);
      for (std::int64_t i = 0; i < n; ++i) {
        const S* p = probs->data() + i * k;
        const S* t = ti->data.data() + i * k;
        // chain through softmax: dL/dx_j = p_j * (v_j - sum_i v_i p_i)
        double dot = 0.0;
        std::vector<double> v(static_cast<std::size_t>(k));
        for (std::int64_t j = 0; j < k; ++j) {
          v[static_cast<std::size_t>(j)] = inv * (static_cast<double>(p[j]) - static_cast<double>(t[j]));
          dot += v[static_cast<std::size_t>(j)] * static_cast<double>(p[j]);
        }
        S* f = fl.data() + i * k;
        for (std::int64_t j = 0; j < k; ++j)
          f[j] += static_cast<S>(g * static_cast<double>(p[j]) * (v[static_cast<std::size_t>(j)] - dot));
      }
    });
  }
  return out;
}

// ---- optimizer ---------------------------------------------------------------

template <class S>
void sgd_step(std::vector<std::pair<std::string, Tensor<S>>>& params, SgdState<S>& state) {
  if (state.velocity.size() != params.size()) state.velocity.resize(params.size());
  for (std::size_t p = 0; p < params.size(); ++p) {
    const std::string& name = params[p].first;
    Tensor<S>& param = params[p].second;
    check(param.has_grad(), "sgd_step: parameter '" + name + "' has no gradient");
    const std::vector<S>& g = param.grad();
    for (S v : g) {
      if (!std::isfinite(static_cast<double>(v)))
        throw std::runtime_error("sgd_step: non-finite gradient in parameter '" + name + "'");
    }
    std::vector<S>& vel = state.velocity[p];
    if (vel.size() != g.size()) vel.assign(g.size(), S(0));
    const S mom = static_cast<S>(state.momentum);
    const S wd = static_cast<S>(state.weight_decay);
    const S lr = static_cast<S>(state.learning_rate);
    S* w = param.data();
    for (std::size_t i = 0; i < g.size(); ++i) {
      vel[i] = mom * vel[i] + g[i] + wd * w[i];
      w[i] -= lr * vel[i];
    }
  }
}

// ---- explicit instantiations ---------------------------------------------------

template class Tensor<float>;
template class Tensor<double>;
template class Tape<float>;
template class Tape<double>;

#define REGCE_INSTANTIATE_OPS(S)                                                                      \
  template Tensor<S> add<S>(const Tensor<S>&, const Tensor<S>&);                                      \
  template Tensor<S> mul<S>(const Tensor<S>&, const Tensor<S>&);                                      \
  template Tensor<S> scale<S>(const Tensor<S>&, S);                                                   \
  template Tensor<S> matmul<S>(const Tensor<S>&, const Tensor<S>&);                                   \
  template Tensor<S> relu<S>(const Tensor<S>&);                                                       \
  template Tensor<S> conv2d<S>(const Tensor<S>&, const Tensor<S>&, int, int);                         \
  template Tensor<S> batchnorm2d<S>(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&, Tensor<S>&, \
                                    Tensor<S>&, bool, double, double);                                \
  template Tensor<S> global_avg_pool<S>(const Tensor<S>&);                                            \
  template Tensor<S> max_pool2d<S>(const Tensor<S>&, int, int);                                       \
  template Tensor<S> reshape<S>(const Tensor<S>&, Shape);                                             \
  template Tensor<S> concat<S>(const std::vector<Tensor<S>>&, int);                                   \
  template Tensor<S> sum<S>(const Tensor<S>&);                                                        \
  template Tensor<S> softmax<S>(const Tensor<S>&);                                                    \
  template LossValue<S> softmax_cross_entropy<S>(const Tensor<S>&, const std::vector<std::int32_t>&); \
  template LossValue<S> softmax_cross_entropy<S>(const Tensor<S>&, const Tensor<S>&);                 \
  template Tensor<S> softmax_mse<S>(const Tensor<S>&, const Tensor<S>&);                              \
  template void sgd_step<S>(std::vector<std::pair<std::string, Tensor<S>>>&, SgdState<S>&);

REGCE_INSTANTIATE_OPS(float)
REGCE_INSTANTIATE_OPS(double)

#undef REGCE_INSTANTIATE_OPS

}  // namespace regce
