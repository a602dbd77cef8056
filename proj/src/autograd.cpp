#include "cdre/autograd.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <unordered_set>

#include "cdre/error.hpp"

namespace cdre::ag {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

thread_local std::uint64_t g_macs = 0;

Var make(Tensor value, std::vector<Var> inputs,
         std::function<void(Node&)> backward_fn) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  bool needs = false;
  for (const auto& in : inputs) needs = needs || in.requires_grad();
  if (needs) {
    node->requires_grad = true;
    node->parents.reserve(inputs.size());
    for (const auto& in : inputs) node->parents.push_back(in.node());
    node->backward_fn = std::move(backward_fn);
  }
  return Var(std::move(node));
}

// Gradient buffer of parent i, or nullptr when it does not need one.
double* parent_grad(Node& self, std::size_t i) {
  Node* p = self.parents[i].get();
  if (!p || !p->requires_grad) return nullptr;
  return p->grad_buffer().data();
}

void require(bool cond, const std::string& what) {
  if (!cond) throw invalid_argument(what);
}

void require_rank(const Var& v, std::size_t rank, const char* op) {
  require(v.defined(), std::string(op) + ": undefined input");
  require(v.shape().size() == rank,
          std::string(op) + ": expected rank " + std::to_string(rank) +
              " input, got " + shape_str(v.shape()));
}

void require_same_shape(const Var& a, const Var& b, const char* op) {
  require(a.shape() == b.shape(), std::string(op) + ": shape mismatch " +
                                      shape_str(a.shape()) + " vs " +
                                      shape_str(b.shape()));
}

double sigmoid_scalar(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

} // namespace

std::vector<double>& Node::grad_buffer() {
  if (grad.empty()) grad.assign(value.numel(), 0.0);
  return grad;
}

Var Var::constant(Tensor value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  return Var(std::move(node));
}

Var Var::leaf(Tensor value, bool requires_grad) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->requires_grad = requires_grad;
  return Var(std::move(node));
}

std::vector<double> Var::grad() const {
  if (!node_->grad.empty()) return node_->grad;
  return std::vector<double>(node_->value.numel(), 0.0);
}

double Var::item() const {
  require(numel() == 1, "item() on non-scalar " + shape_str(shape()));
  return node_->value.data[0];
}

void backward(const Var& root) {
  require(root.numel() == 1, "backward() requires a scalar root");
  if (!root.requires_grad()) return;

  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p && p->requires_grad && seen.insert(p).second) {
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root.node()->grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
  }
}

std::uint64_t mac_counter() { return g_macs; }
void reset_mac_counter() { g_macs = 0; }

// ---------------------------------------------------------------------------
// Elementwise

Var add(const Var& a, const Var& b) {
  require_same_shape(a, b, "add");
  Tensor out = a.value();
  const auto& bv = b.value().data;
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += bv[i];
  return make(std::move(out), {a, b}, [](Node& self) {
    for (std::size_t k = 0; k < 2; ++k) {
      if (double* g = parent_grad(self, k)) {
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
      }
    }
  });
}

Var sub(const Var& a, const Var& b) {
  require_same_shape(a, b, "sub");
  Tensor out = a.value();
  const auto& bv = b.value().data;
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] -= bv[i];
  return make(std::move(out), {a, b}, [](Node& self) {
    if (double* g = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
    if (double* g = parent_grad(self, 1)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

Var mul(const Var& a, const Var& b) {
  require_same_shape(a, b, "mul");
  Tensor out = a.value();
  const auto& bv = b.value().data;
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] *= bv[i];
  return make(std::move(out), {a, b}, [](Node& self) {
    const auto& av = self.parents[0]->value.data;
    const auto& bv = self.parents[1]->value.data;
    if (double* g = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * bv[i];
    }
    if (double* g = parent_grad(self, 1)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * av[i];
    }
  });
}

Var scale(const Var& a, double s) {
  Tensor out = a.value();
  for (double& v : out.data) v *= s;
  return make(std::move(out), {a}, [s](Node& self) {
    if (double* g = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * s;
    }
  });
}

Var add_scalar(const Var& a, double s) {
  Tensor out = a.value();
  for (double& v : out.data) v += s;
  return make(std::move(out), {a}, [](Node& self) {
    if (double* g = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
  });
}

Var relu(const Var& a) { return leaky_relu(a, 0.0); }

Var leaky_relu(const Var& a, double negative_slope) {
  Tensor out = a.value();
  for (double& v : out.data) {
    if (v < 0) v *= negative_slope;
  }
  return make(std::move(out), {a}, [negative_slope](Node& self) {
    const auto& x = self.parents[0]->value.data;
    if (double* g = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) {
        g[i] += x[i] < 0 ? self.grad[i] * negative_slope : self.grad[i];
      }
    }
  });
}

Var sigmoid(const Var& a) {
  Tensor out = a.value();
  for (double& v : out.data) v = sigmoid_scalar(v);
  return make(std::move(out), {a}, [](Node& self) {
    if (double* g = parent_grad(self, 0)) {
      const auto& y = self.value.data;
      for (std::size_t i = 0; i < self.grad.size(); ++i) {
        g[i] += self.grad[i] * y[i] * (1.0 - y[i]);
      }
    }
  });
}

Var binarize_ste(const Var& a) {
  Tensor out = a.value();
  for (double& v : out.data) v = v >= 0.0 ? 1.0 : 0.0;
  return make(std::move(out), {a}, [](Node& self) {
    if (double* g = parent_grad(self, 0)) {
      const auto& x = self.parents[0]->value.data;
      for (std::size_t i = 0; i < self.grad.size(); ++i) {
        const double s = sigmoid_scalar(x[i]);
        g[i] += self.grad[i] * s * (1.0 - s);
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions

Var sum(const Var& a) {
  double total = 0.0;
  for (double v : a.value().data) total += v;
  return make(Tensor({1}, {total}), {a}, [](Node& self) {
    if (double* g = parent_grad(self, 0)) {
      const std::size_t n = self.parents[0]->value.numel();
      for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[0];
    }
  });
}

Var mean(const Var& a) {
  require(a.numel() > 0, "mean of empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.numel()));
}

Var reshape(const Var& a, Shape shape) {
  require(shape_numel(shape) == a.numel(),
          "reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape));
  Tensor out(std::move(shape), a.value().data);
  return make(std::move(out), {a}, [](Node& self) {
    if (double* g = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
  });
}

// ---------------------------------------------------------------------------
// Spatial

Var conv2d(const Var& x, const Var& weight, const Var& bias, int stride,
           int pad) {
  require_rank(x, 3, "conv2d");
  require_rank(weight, 4, "conv2d weight");
  const int C = x.dim(0), H = x.dim(1), W = x.dim(2);
  const int O = weight.dim(0), k = weight.dim(2);
  require(weight.dim(1) == C && weight.dim(3) == k,
          "conv2d: weight " + shape_str(weight.shape()) +
              " incompatible with input " + shape_str(x.shape()));
  require(stride >= 1 && pad >= 0, "conv2d: bad stride/pad");
  require(H + 2 * pad >= k && W + 2 * pad >= k, "conv2d: input smaller than kernel");
  if (bias.defined()) {
    require(bias.shape() == Shape{O}, "conv2d: bias shape " + shape_str(bias.shape()));
  }
  const int Ho = (H + 2 * pad - k) / stride + 1;
  const int Wo = (W + 2 * pad - k) / stride + 1;
  const int K = C * k * k;
  const int P = Ho * Wo;

  auto col = std::make_shared<std::vector<double>>(static_cast<std::size_t>(K) * P, 0.0);
  const auto& xv = x.value().data;
  for (int c = 0; c < C; ++c) {
    for (int ki = 0; ki < k; ++ki) {
      for (int kj = 0; kj < k; ++kj) {
        double* row = col->data() + static_cast<std::size_t>((c * k + ki) * k + kj) * P;
        for (int oh = 0; oh < Ho; ++oh) {
          const int ih = oh * stride - pad + ki;
          if (ih < 0 || ih >= H) continue;
          const double* src = xv.data() + (static_cast<std::size_t>(c) * H + ih) * W;
          for (int ow = 0; ow < Wo; ++ow) {
            const int iw = ow * stride - pad + kj;
            if (iw >= 0 && iw < W) row[oh * Wo + ow] = src[iw];
          }
        }
      }
    }
  }

  Tensor out({O, Ho, Wo});
  MatMap om(out.data.data(), O, P);
  ConstMatMap wm(weight.value().data.data(), O, K);
  ConstMatMap cm(col->data(), K, P);
  om.noalias() = wm * cm;
  if (bias.defined()) {
    const auto& b = bias.value().data;
    for (int o = 0; o < O; ++o) om.row(o).array() += b[o];
  }
  g_macs += static_cast<std::uint64_t>(O) * K * P;

  std::vector<Var> inputs{x, weight};
  if (bias.defined()) inputs.push_back(bias);
  return make(std::move(out), std::move(inputs),
              [col, C, H, W, O, k, K, P, Ho, Wo, stride, pad](Node& self) {
    ConstMatMap gm(self.grad.data(), O, P);
    if (double* gw = parent_grad(self, 1)) {
      ConstMatMap cm(col->data(), K, P);
      MatMap(gw, O, K).noalias() += gm * cm.transpose();
    }
    if (self.parents.size() > 2) {
      if (double* gb = parent_grad(self, 2)) {
        for (int o = 0; o < O; ++o) gb[o] += gm.row(o).sum();
      }
    }
    if (double* gx = parent_grad(self, 0)) {
      ConstMatMap wm(self.parents[1]->value.data.data(), O, K);
      RowMat dcol = wm.transpose() * gm;
      for (int c = 0; c < C; ++c) {
        for (int ki = 0; ki < k; ++ki) {
          for (int kj = 0; kj < k; ++kj) {
            const double* row = dcol.data() + static_cast<std::size_t>((c * k + ki) * k + kj) * P;
            for (int oh = 0; oh < Ho; ++oh) {
              const int ih = oh * stride - pad + ki;
              if (ih < 0 || ih >= H) continue;
              double* dst = gx + (static_cast<std::size_t>(c) * H + ih) * W;
              for (int ow = 0; ow < Wo; ++ow) {
                const int iw = ow * stride - pad + kj;
                if (iw >= 0 && iw < W) dst[iw] += row[oh * Wo + ow];
              }
            }
          }
        }
      }
    }
  });
}

Var upsample_nearest2x(const Var& x) {
  require_rank(x, 3, "upsample_nearest2x");
  const int C = x.dim(0), H = x.dim(1), W = x.dim(2);
  Tensor out({C, 2 * H, 2 * W});
  const Tensor& in = x.value();
  for (int c = 0; c < C; ++c)
    for (int h = 0; h < 2 * H; ++h)
      for (int w = 0; w < 2 * W; ++w) out.at(c, h, w) = in.at(c, h / 2, w / 2);
  return make(std::move(out), {x}, [C, H, W](Node& self) {
    if (double* g = parent_grad(self, 0)) {
      for (int c = 0; c < C; ++c)
        for (int h = 0; h < 2 * H; ++h)
          for (int w = 0; w < 2 * W; ++w)
            g[(static_cast<std::size_t>(c) * H + h / 2) * W + w / 2] +=
                self.grad[(static_cast<std::size_t>(c) * 2 * H + h) * 2 * W + w];
    }
  });
}

Var crop(const Var& x, int height, int width) {
  require_rank(x, 3, "crop");
  const int C = x.dim(0), H = x.dim(1), W = x.dim(2);
  require(height > 0 && width > 0 && height <= H && width <= W,
          "crop: target exceeds input " + shape_str(x.shape()));
  if (height == H && width == W) return x;
  Tensor out({C, height, width});
  for (int c = 0; c < C; ++c)
    for (int h = 0; h < height; ++h)
      for (int w = 0; w < width; ++w) out.at(c, h, w) = x.value().at(c, h, w);
  return make(std::move(out), {x}, [C, H, W, height, width](Node& self) {
    if (double* g = parent_grad(self, 0)) {
      for (int c = 0; c < C; ++c)
        for (int h = 0; h < height; ++h)
          for (int w = 0; w < width; ++w)
            g[(static_cast<std::size_t>(c) * H + h) * W + w] +=
                self.grad[(static_cast<std::size_t>(c) * height + h) * width + w];
    }
  });
}

Var instance_norm(const Var& x, double eps) {
  require_rank(x, 3, "instance_norm");
  const int C = x.dim(0);
  const std::size_t N = static_cast<std::size_t>(x.dim(1)) * x.dim(2);
  Tensor out(x.shape());
  auto inv_std = std::make_shared<std::vector<double>>(C);
  const auto& xv = x.value().data;
  for (int c = 0; c < C; ++c) {
    const double* src = xv.data() + c * N;
    double m = 0.0;
    for (std::size_t i = 0; i < N; ++i) m += src[i];
    m /= static_cast<double>(N);
    double var = 0.0;
    for (std::size_t i = 0; i < N; ++i) var += (src[i] - m) * (src[i] - m);
    var /= static_cast<double>(N);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[c] = is;
    double* dst = out.data.data() + c * N;
    for (std::size_t i = 0; i < N; ++i) dst[i] = (src[i] - m) * is;
  }
  return make(std::move(out), {x}, [C, N, inv_std](Node& self) {
    double* g = parent_grad(self, 0);
    if (!g) return;
    const double n = static_cast<double>(N);
    for (int c = 0; c < C; ++c) {
      const double* dy = self.grad.data() + c * N;
      const double* y = self.value.data.data() + c * N;
      double sum_dy = 0.0, sum_dy_y = 0.0;
      for (std::size_t i = 0; i < N; ++i) {
        sum_dy += dy[i];
        sum_dy_y += dy[i] * y[i];
      }
      const double is = (*inv_std)[c];
      for (std::size_t i = 0; i < N; ++i) {
        g[c * N + i] += is / n * (n * dy[i] - sum_dy - y[i] * sum_dy_y);
      }
    }
  });
}

Var concat_channels(const std::vector<Var>& parts) {
  require(!parts.empty(), "concat_channels: no inputs");
  Shape tail(parts[0].shape().begin() + 1, parts[0].shape().end());
  int total = 0;
  for (const auto& p : parts) {
    Shape t(p.shape().begin() + 1, p.shape().end());
    require(t == tail, "concat_channels: incompatible shapes " +
                           shape_str(parts[0].shape()) + " vs " + shape_str(p.shape()));
    total += p.dim(0);
  }
  Shape shape{total};
  shape.insert(shape.end(), tail.begin(), tail.end());
  Tensor out(shape);
  std::size_t off = 0;
  std::vector<std::size_t> sizes;
  for (const auto& p : parts) {
    std::copy(p.value().data.begin(), p.value().data.end(), out.data.begin() + off);
    off += p.numel();
    sizes.push_back(p.numel());
  }
  return make(std::move(out), parts, [sizes](Node& self) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < sizes.size(); ++k) {
      if (double* g = parent_grad(self, k)) {
        for (std::size_t i = 0; i < sizes[k]; ++i) g[i] += self.grad[off + i];
      }
      off += sizes[k];
    }
  });
}

Var channel_mean(const Var& x) {
  require_rank(x, 3, "channel_mean");
  const int C = x.dim(0);
  const std::size_t N = static_cast<std::size_t>(x.dim(1)) * x.dim(2);
  Tensor out({1, x.dim(1), x.dim(2)});
  for (int c = 0; c < C; ++c)
    for (std::size_t i = 0; i < N; ++i) out.data[i] += x.value().data[c * N + i];
  for (double& v : out.data) v /= C;
  return make(std::move(out), {x}, [C, N](Node& self) {
    if (double* g = parent_grad(self, 0)) {
      for (int c = 0; c < C; ++c)
        for (std::size_t i = 0; i < N; ++i) g[c * N + i] += self.grad[i] / C;
    }
  });
}

Var channel_max(const Var& x) {
  require_rank(x, 3, "channel_max");
  const int C = x.dim(0);
  const std::size_t N = static_cast<std::size_t>(x.dim(1)) * x.dim(2);
  Tensor out({1, x.dim(1), x.dim(2)});
  auto arg = std::make_shared<std::vector<int>>(N, 0);
  for (std::size_t i = 0; i < N; ++i) {
    double best = x.value().data[i];
    for (int c = 1; c < C; ++c) {
      const double v = x.value().data[c * N + i];
      if (v > best) {
        best = v;
        (*arg)[i] = c;
      }
    }
    out.data[i] = best;
  }
  return make(std::move(out), {x}, [N, arg](Node& self) {
    if (double* g = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < N; ++i) g[(*arg)[i] * N + i] += self.grad[i];
    }
  });
}

Var global_avg_pool(const Var& x) {
  require_rank(x, 3, "global_avg_pool");
  const int C = x.dim(0);
  const std::size_t N = static_cast<std::size_t>(x.dim(1)) * x.dim(2);
  Tensor out({C});
  for (int c = 0; c < C; ++c) {
    double s = 0.0;
    for (std::size_t i = 0; i < N; ++i) s += x.value().data[c * N + i];
    out.data[c] = s / static_cast<double>(N);
  }
  return make(std::move(out), {x}, [C, N](Node& self) {
    if (double* g = parent_grad(self, 0)) {
      for (int c = 0; c < C; ++c)
        for (std::size_t i = 0; i < N; ++i)
          g[c * N + i] += self.grad[c] / static_cast<double>(N);
    }
  });
}

Var mul_channel(const Var& x, const Var& gate) {
  require_rank(x, 3, "mul_channel");
  const int C = x.dim(0);
  require(gate.numel() == static_cast<std::size_t>(C),
          "mul_channel: gate " + shape_str(gate.shape()) + " vs " + shape_str(x.shape()));
  const std::size_t N = static_cast<std::size_t>(x.dim(1)) * x.dim(2);
  Tensor out = x.value();
  for (int c = 0; c < C; ++c)
    for (std::size_t i = 0; i < N; ++i) out.data[c * N + i] *= gate.value().data[c];
  return make(std::move(out), {x, gate}, [C, N](Node& self) {
    const auto& xv = self.parents[0]->value.data;
    const auto& gv = self.parents[1]->value.data;
    if (double* g = parent_grad(self, 0)) {
      for (int c = 0; c < C; ++c)
        for (std::size_t i = 0; i < N; ++i) g[c * N + i] += self.grad[c * N + i] * gv[c];
    }
    if (double* g = parent_grad(self, 1)) {
      for (int c = 0; c < C; ++c) {
        double s = 0.0;
        for (std::size_t i = 0; i < N; ++i) s += self.grad[c * N + i] * xv[c * N + i];
        g[c] += s;
      }
    }
  });
}

Var mul_spatial(const Var& x, const Var& gate) {
  require_rank(x, 3, "mul_spatial");
  const int C = x.dim(0);
  const std::size_t N = static_cast<std::size_t>(x.dim(1)) * x.dim(2);
  require(gate.numel() == N,
          "mul_spatial: gate " + shape_str(gate.shape()) + " vs " + shape_str(x.shape()));
  Tensor out = x.value();
  for (int c = 0; c < C; ++c)
    for (std::size_t i = 0; i < N; ++i) out.data[c * N + i] *= gate.value().data[i];
  return make(std::move(out), {x, gate}, [C, N](Node& self) {
    const auto& xv = self.parents[0]->value.data;
    const auto& gv = self.parents[1]->value.data;
    if (double* g = parent_grad(self, 0)) {
      for (int c = 0; c < C; ++c)
        for (std::size_t i = 0; i < N; ++i) g[c * N + i] += self.grad[c * N + i] * gv[i];
    }
    if (double* g = parent_grad(self, 1)) {
      for (int c = 0; c < C; ++c)
        for (std::size_t i = 0; i < N; ++i) g[i] += self.grad[c * N + i] * xv[c * N + i];
    }
  });
}

// ---------------------------------------------------------------------------
// Tokens

Var linear(const Var& x, const Var& weight, const Var& bias) {
  require_rank(x, 2, "linear");
  require_rank(weight, 2, "linear weight");
  const int N = x.dim(0), In = x.dim(1), Out = weight.dim(0);
  require(weight.dim(1) == In, "linear: weight " + shape_str(weight.shape()) +
                                   " incompatible with input " + shape_str(x.shape()));
  if (bias.defined()) {
    require(bias.shape() == Shape{Out}, "linear: bias shape " + shape_str(bias.shape()));
  }
  Tensor out({N, Out});
  MatMap om(out.data.data(), N, Out);
  om.noalias() = ConstMatMap(x.value().data.data(), N, In) *
                 ConstMatMap(weight.value().data.data(), Out, In).transpose();
  if (bias.defined()) {
    for (int r = 0; r < N; ++r)
      for (int c = 0; c < Out; ++c) om(r, c) += bias.value().data[c];
  }
  g_macs += static_cast<std::uint64_t>(N) * In * Out;
  std::vector<Var> inputs{x, weight};
  if (bias.defined()) inputs.push_back(bias);
  return make(std::move(out), std::move(inputs), [N, In, Out](Node& self) {
    ConstMatMap gm(self.grad.data(), N, Out);
    if (double* gx = parent_grad(self, 0)) {
      MatMap(gx, N, In).noalias() +=
          gm * ConstMatMap(self.parents[1]->value.data.data(), Out, In);
    }
    if (double* gw = parent_grad(self, 1)) {
      MatMap(gw, Out, In).noalias() +=
          gm.transpose() * ConstMatMap(self.parents[0]->value.data.data(), N, In);
    }
    if (self.parents.size() > 2) {
      if (double* gb = parent_grad(self, 2)) {
        for (int c = 0; c < Out; ++c) gb[c] += gm.col(c).sum();
      }
    }
  });
}

Var matmul(const Var& a, const Var& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const int N = a.dim(0), K = a.dim(1), M = b.dim(1);
  require(b.dim(0) == K, "matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  Tensor out({N, M});
  MatMap(out.data.data(), N, M).noalias() =
      ConstMatMap(a.value().data.data(), N, K) * ConstMatMap(b.value().data.data(), K, M);
  g_macs += static_cast<std::uint64_t>(N) * K * M;
  return make(std::move(out), {a, b}, [N, K, M](Node& self) {
    ConstMatMap gm(self.grad.data(), N, M);
    if (double* ga = parent_grad(self, 0)) {
      MatMap(ga, N, K).noalias() +=
          gm * ConstMatMap(self.parents[1]->value.data.data(), K, M).transpose();
    }
    if (double* gb = parent_grad(self, 1)) {
      MatMap(gb, K, M).noalias() +=
          ConstMatMap(self.parents[0]->value.data.data(), N, K).transpose() * gm;
    }
  });
}

Var matmul_nt(const Var& a, const Var& b) {
  require_rank(a, 2, "matmul_nt");
  require_rank(b, 2, "matmul_nt");
  const int N = a.dim(0), K = a.dim(1), M = b.dim(0);
  require(b.dim(1) == K, "matmul_nt: " + shape_str(a.shape()) + " x " + shape_str(b.shape()) + "^T");
  Tensor out({N, M});
  MatMap(out.data.data(), N, M).noalias() =
      ConstMatMap(a.value().data.data(), N, K) *
      ConstMatMap(b.value().data.data(), M, K).transpose();
  g_macs += static_cast<std::uint64_t>(N) * K * M;
  return make(std::move(out), {a, b}, [N, K, M](Node& self) {
    ConstMatMap gm(self.grad.data(), N, M);
    if (double* ga = parent_grad(self, 0)) {
      MatMap(ga, N, K).noalias() += gm * ConstMatMap(self.parents[1]->value.data.data(), M, K);
    }
    if (double* gb = parent_grad(self, 1)) {
      MatMap(gb, M, K).noalias() +=
          gm.transpose() * ConstMatMap(self.parents[0]->value.data.data(), N, K);
    }
  });
}

Var softmax_rows(const Var& x) {
  require_rank(x, 2, "softmax_rows");
  const int N = x.dim(0), M = x.dim(1);
  Tensor out = x.value();
  for (int r = 0; r < N; ++r) {
    double* row = out.data.data() + static_cast<std::size_t>(r) * M;
    const double mx = *std::max_element(row, row + M);
    double s = 0.0;
    for (int c = 0; c < M; ++c) {
      row[c] = std::exp(row[c] - mx);
      s += row[c];
    }
    for (int c = 0; c < M; ++c) row[c] /= s;
  }
  return make(std::move(out), {x}, [N, M](Node& self) {
    if (double* g = parent_grad(self, 0)) {
      for (int r = 0; r < N; ++r) {
        const double* y = self.value.data.data() + static_cast<std::size_t>(r) * M;
        const double* dy = self.grad.data() + static_cast<std::size_t>(r) * M;
        double dot = 0.0;
        for (int c = 0; c < M; ++c) dot += dy[c] * y[c];
        for (int c = 0; c < M; ++c) g[static_cast<std::size_t>(r) * M + c] += y[c] * (dy[c] - dot);
      }
    }
  });
}

Var slice_cols(const Var& x, int start, int count) {
  require_rank(x, 2, "slice_cols");
  const int N = x.dim(0), M = x.dim(1);
  require(start >= 0 && count > 0 && start + count <= M, "slice_cols: out of range");
  Tensor out({N, count});
  for (int r = 0; r < N; ++r)
    for (int c = 0; c < count; ++c) out.at(r, c) = x.value().at(r, start + c);
  return make(std::move(out), {x}, [N, M, start, count](Node& self) {
    if (double* g = parent_grad(self, 0)) {
      for (int r = 0; r < N; ++r)
        for (int c = 0; c < count; ++c)
          g[static_cast<std::size_t>(r) * M + start + c] += self.grad[static_cast<std::size_t>(r) * count + c];
    }
  });
}

Var concat_cols(const std::vector<Var>& parts) {
  require(!parts.empty(), "concat_cols: no inputs");
  const int N = parts[0].dim(0);
  int total = 0;
  std::vector<int> widths;
  for (const auto& p : parts) {
    require_rank(p, 2, "concat_cols");
    require(p.dim(0) == N, "concat_cols: row count mismatch");
    widths.push_back(p.dim(1));
    total += p.dim(1);
  }
  Tensor out({N, total});
  int off = 0;
  for (const auto& p : parts) {
    for (int r = 0; r < N; ++r)
      for (int c = 0; c < p.dim(1); ++c) out.at(r, off + c) = p.value().at(r, c);
    off += p.dim(1);
  }
  return make(std::move(out), parts, [N, total, widths](Node& self) {
    int off = 0;
    for (std::size_t k = 0; k < widths.size(); ++k) {
      if (double* g = parent_grad(self, k)) {
        for (int r = 0; r < N; ++r)
          for (int c = 0; c < widths[k]; ++c)
            g[static_cast<std::size_t>(r) * widths[k] + c] +=
                self.grad[static_cast<std::size_t>(r) * total + off + c];
      }
      off += widths[k];
    }
  });
}

Var mean_rows(const Var& x) {
  require_rank(x, 2, "mean_rows");
  const int N = x.dim(0), M = x.dim(1);
  Tensor out({1, M});
  for (int r = 0; r < N; ++r)
    for (int c = 0; c < M; ++c) out.data[c] += x.value().at(r, c);
  for (double& v : out.data) v /= N;
  return make(std::move(out), {x}, [N, M](Node& self) {
    if (double* g = parent_grad(self, 0)) {
      for (int r = 0; r < N; ++r)
        for (int c = 0; c < M; ++c) g[static_cast<std::size_t>(r) * M + c] += self.grad[c] / N;
    }
  });
}

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
  require_rank(x, 2, "layer_norm");
  const int N = x.dim(0), M = x.dim(1);
  require(gamma.numel() == static_cast<std::size_t>(M) &&
              beta.numel() == static_cast<std::size_t>(M),
          "layer_norm: affine size mismatch");
  auto xhat = std::make_shared<std::vector<double>>(x.numel());
  auto inv_std = std::make_shared<std::vector<double>>(N);
  Tensor out(x.shape());
  for (int r = 0; r < N; ++r) {
    const double* src = x.value().data.data() + static_cast<std::size_t>(r) * M;
    double m = 0.0;
    for (int c = 0; c < M; ++c) m += src[c];
    m /= M;
    double var = 0.0;
    for (int c = 0; c < M; ++c) var += (src[c] - m) * (src[c] - m);
    var /= M;
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (int c = 0; c < M; ++c) {
      const double h = (src[c] - m) * is;
      (*xhat)[static_cast<std::size_t>(r) * M + c] = h;
      out.at(r, c) = h * gamma.value().data[c] + beta.value().data[c];
    }
  }
  return make(std::move(out), {x, gamma, beta}, [N, M, xhat, inv_std](Node& self) {
    const auto& gv = self.parents[1]->value.data;
    double* gx = parent_grad(self, 0);
    double* gg = parent_grad(self, 1);
    double* gb = parent_grad(self, 2);
    std::vector<double> dxhat(M);
    for (int r = 0; r < N; ++r) {
      const double* dy = self.grad.data() + static_cast<std::size_t>(r) * M;
      const double* h = xhat->data() + static_cast<std::size_t>(r) * M;
      double s1 = 0.0, s2 = 0.0;
      for (int c = 0; c < M; ++c) {
        if (gg) gg[c] += dy[c] * h[c];
        if (gb) gb[c] += dy[c];
        dxhat[c] = dy[c] * gv[c];
        s1 += dxhat[c];
        s2 += dxhat[c] * h[c];
      }
      if (gx) {
        const double is = (*inv_std)[r];
        for (int c = 0; c < M; ++c) {
          gx[static_cast<std::size_t>(r) * M + c] += is / M * (M * dxhat[c] - s1 - h[c] * s2);
        }
      }
    }
  });
}

Var spatial_to_tokens(const Var& x) {
  require_rank(x, 3, "spatial_to_tokens");
  const int C = x.dim(0);
  const int N = x.dim(1) * x.dim(2);
  Tensor out({N, C});
  for (int c = 0; c < C; ++c)
    for (int i = 0; i < N; ++i) out.at(i, c) = x.value().data[static_cast<std::size_t>(c) * N + i];
  return make(std::move(out), {x}, [C, N](Node& self) {
    if (double* g = parent_grad(self, 0)) {
      for (int c = 0; c < C; ++c)
        for (int i = 0; i < N; ++i)
          g[static_cast<std::size_t>(c) * N + i] += self.grad[static_cast<std::size_t>(i) * C + c];
    }
  });
}

Var tokens_to_spatial(const Var& t, int height, int width) {
  require_rank(t, 2, "tokens_to_spatial");
  const int N = t.dim(0), C = t.dim(1);
  require(N == height * width, "tokens_to_spatial: " + std::to_string(N) +
                                   " tokens cannot form " + std::to_string(height) +
                                   "x" + std::to_string(width));
  Tensor out({C, height, width});
  for (int c = 0; c < C; ++c)
    for (int i = 0; i < N; ++i) out.data[static_cast<std::size_t>(c) * N + i] = t.value().at(i, c);
  return make(std::move(out), {t}, [C, N](Node& self) {
    if (double* g = parent_grad(self, 0)) {
      for (int c = 0; c < C; ++c)
        for (int i = 0; i < N; ++i)
          g[static_cast<std::size_t>(i) * C + c] += self.grad[static_cast<std::size_t>(c) * N + i];
    }
  });
}

// ---------------------------------------------------------------------------
// Losses

Var cross_entropy(const Var& logits, int label) {
  const int K = static_cast<int>(logits.numel());
  require(K > 0, "cross_entropy: empty logits");
  if (label < 0 || label >= K) {
    throw invalid_argument("label " + std::to_string(label) + " out of range [0, " +
                           std::to_string(K) + ")");
  }
  const auto& z = logits.value().data;
  const double mx = *std::max_element(z.begin(), z.end());
  double s = 0.0;
  for (double v : z) s += std::exp(v - mx);
  const double lse = mx + std::log(s);
  return make(Tensor({1}, {lse - z[label]}), {logits}, [label, lse](Node& self) {
    if (double* g = parent_grad(self, 0)) {
      const auto& z = self.parents[0]->value.data;
      for (std::size_t i = 0; i < z.size(); ++i) {
        const double p = std::exp(z[i] - lse);
        g[i] += self.grad[0] * (p - (static_cast<int>(i) == label ? 1.0 : 0.0));
      }
    }
  });
}

Var cosine_mean(const Var& a, const Var& b, double eps) {
  require_rank(a, 3, "cosine_mean");
  require_same_shape(a, b, "cosine_mean");
  const int C = a.dim(0);
  const std::size_t P = static_cast<std::size_t>(a.dim(1)) * a.dim(2);
  require(P > 0, "cosine_mean: empty spatial extent");
  const auto& av = a.value().data;
  const auto& bv = b.value().data;
  auto na = std::make_shared<std::vector<double>>(P);
  auto nb = std::make_shared<std::vector<double>>(P);
  auto cs = std::make_shared<std::vector<double>>(P);
  double total = 0.0;
  for (std::size_t p = 0; p < P; ++p) {
    double dot = 0.0, sa = 0.0, sb = 0.0;
    for (int c = 0; c < C; ++c) {
      const double x = av[c * P + p], y = bv[c * P + p];
      dot += x * y;
      sa += x * x;
      sb += y * y;
    }
    (*na)[p] = std::sqrt(sa);
    (*nb)[p] = std::sqrt(sb);
    (*cs)[p] = dot / (std::max((*na)[p], eps) * std::max((*nb)[p], eps));
    total += (*cs)[p];
  }
  return make(Tensor({1}, {total / static_cast<double>(P)}), {a, b},
              [C, P, eps, na, nb, cs](Node& self) {
    const auto& av = self.parents[0]->value.data;
    const auto& bv = self.parents[1]->value.data;
    double* ga = parent_grad(self, 0);
    double* gb = parent_grad(self, 1);
    const double g = self.grad[0] / static_cast<double>(P);
    for (std::size_t p = 0; p < P; ++p) {
      const double ra = std::max((*na)[p], eps), rb = std::max((*nb)[p], eps);
      const double inv = 1.0 / (ra * rb);
      const bool clamp_a = (*na)[p] <= eps, clamp_b = (*nb)[p] <= eps;
      for (int c = 0; c < C; ++c) {
        const double x = av[c * P + p], y = bv[c * P + p];
        if (ga) {
          const double norm_term = clamp_a ? 0.0 : (*cs)[p] * x / (ra * ra);
          ga[c * P + p] += g * (y * inv - norm_term);
        }
        if (gb) {
          const double norm_term = clamp_b ? 0.0 : (*cs)[p] * y / (rb * rb);
          gb[c * P + p] += g * (x * inv - norm_term);
        }
      }
    }
  });
}

} // namespace cdre::ag
