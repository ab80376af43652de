#include "fusionbench/nn.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace fusionbench {

ParamArray::ParamArray(std::string n, std::vector<int> s) : name(std::move(n)), shape(std::move(s)) {
  std::size_t count = 1;
  for (int d : shape) count *= static_cast<std::size_t>(d);
  values.assign(count, 0.0);
}

Conv2d::Conv2d(const std::string& name, int in, int out, int s)
    : in_channels(in), out_channels(out), stride(s),
      weight(name + ".weight", {out, in, 3, 3}), bias(name + ".bias", {out}) {}

void Conv2d::init(Rng& rng) {
  const double stddev = std::sqrt(2.0 / (9.0 * in_channels));
  for (double& w : weight.values) w = rng.normal(0.0, stddev);
  std::fill(bias.values.begin(), bias.values.end(), 0.0);
}

namespace {

// Output columns ox with 0 <= ox*stride + kx - 1 < in_width.
inline void column_range(int kx, int stride, int in_width, int out_width, int& lo, int& hi) {
  lo = kx == 0 ? 1 : 0;  // ox*stride - 1 >= 0 needs ox >= 1 for any stride >= 1
  hi = std::min(out_width - 1, (in_width - kx) / stride);
}

}  // namespace

void Conv2d::forward(const Tensor& in, Tensor& out) const {
  const int ho = output_extent(in.height);
  const int wo = output_extent(in.width);
  if (out.channels != out_channels || out.height != ho || out.width != wo) {
    out = Tensor(out_channels, ho, wo);
  }
  const int wi = in.width;
  for (int oc = 0; oc < out_channels; ++oc) {
    auto oplane = out.plane(oc);
    std::fill(oplane.begin(), oplane.end(), bias.values[oc]);
    for (int ic = 0; ic < in_channels; ++ic) {
      const double* iplane = in.plane(ic).data();
      const double* wk = &weight.values[(static_cast<std::size_t>(oc) * in_channels + ic) * 9];
      for (int ky = 0; ky < 3; ++ky) {
        for (int kx = 0; kx < 3; ++kx) {
          const double w = wk[ky * 3 + kx];
          int lo, hi;
          column_range(kx, stride, wi, wo, lo, hi);
          for (int oy = 0; oy < ho; ++oy) {
            const int iy = oy * stride + ky - 1;
            if (iy < 0 || iy >= in.height) continue;
            const double* irow = iplane + static_cast<std::size_t>(iy) * wi;
            double* orow = oplane.data() + static_cast<std::size_t>(oy) * wo;
            const int shift = kx - 1;
            if (stride == 1) {
              for (int ox = lo; ox <= hi; ++ox) orow[ox] += w * irow[ox + shift];
            } else {
              for (int ox = lo; ox <= hi; ++ox) orow[ox] += w * irow[ox * stride + shift];
            }
          }
        }
      }
    }
  }
}

void Conv2d::backward(const Tensor& in, const Tensor& grad_out, Conv2d* grad_params,
                      Tensor* grad_in) const {
  const int ho = grad_out.height;
  const int wo = grad_out.width;
  const int wi = in.width;
  if (grad_in && !grad_in->same_shape(in)) *grad_in = zeros_like(in);
  for (int oc = 0; oc < out_channels; ++oc) {
    const double* gplane = grad_out.plane(oc).data();
    if (grad_params) {
      double s = 0.0;
      for (std::size_t i = 0; i < grad_out.plane_size(); ++i) s += gplane[i];
      grad_params->bias.values[oc] += s;
    }
    for (int ic = 0; ic < in_channels; ++ic) {
      const double* iplane = in.plane(ic).data();
      double* giplane = grad_in ? grad_in->plane(ic).data() : nullptr;
      const std::size_t wbase = (static_cast<std::size_t>(oc) * in_channels + ic) * 9;
      for (int ky = 0; ky < 3; ++ky) {
        for (int kx = 0; kx < 3; ++kx) {
          const double w = weight.values[wbase + ky * 3 + kx];
          int lo, hi;
          column_range(kx, stride, wi, wo, lo, hi);
          double acc = 0.0;
          for (int oy = 0; oy < ho; ++oy) {
            const int iy = oy * stride + ky - 1;
            if (iy < 0 || iy >= in.height) continue;
            const std::size_t ioff = static_cast<std::size_t>(iy) * wi;
            const int shift = kx - 1;
            const double* grow = gplane + static_cast<std::size_t>(oy) * wo;
            if (grad_params) {
              const double* irow = iplane + ioff;
              if (stride == 1) {
                for (int ox = lo; ox <= hi; ++ox) acc += grow[ox] * irow[ox + shift];
              } else {
                for (int ox = lo; ox <= hi; ++ox) acc += grow[ox] * irow[ox * stride + shift];
              }
            }
            if (giplane) {
              double* girow = giplane + ioff;
              if (stride == 1) {
                for (int ox = lo; ox <= hi; ++ox) girow[ox + shift] += w * grow[ox];
              } else {
                for (int ox = lo; ox <= hi; ++ox) girow[ox * stride + shift] += w * grow[ox];
              }
            }
          }
          if (grad_params) grad_params->weight.values[wbase + ky * 3 + kx] += acc;
        }
      }
    }
  }
}

void ConvStack::forward(const Tensor& input, Cache& cache) const {
  cache.activations.resize(layers.size() + 1);
  cache.activations[0] = input;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    Tensor& out = cache.activations[i + 1];
    layers[i].forward(cache.activations[i], out);
    for (double& x : out.data) x = x > 0.0 ? x : 0.0;
  }
}

void ConvStack::backward(const Cache& cache, Tensor grad, ConvStack* grad_params,
                         Tensor* grad_input) const {
  for (std::size_t li = layers.size(); li-- > 0;) {
    const Tensor& out = cache.activations[li + 1];
    for (std::size_t k = 0; k < grad.data.size(); ++k) {
      if (out.data[k] <= 0.0) grad.data[k] = 0.0;
    }
    Conv2d* gp = grad_params ? &grad_params->layers[li] : nullptr;
    if (li == 0) {
      if (!gp && !grad_input) return;
      layers[li].backward(cache.activations[0], grad, gp, grad_input);
    } else {
      Tensor grad_prev = zeros_like(cache.activations[li]);
      layers[li].backward(cache.activations[li], grad, gp, &grad_prev);
      grad = std::move(grad_prev);
    }
  }
}

Dense::Dense(const std::string& name, int i, int o)
    : in(i), out(o), weight(name + ".weight", {o, i}), bias(name + ".bias", {o}) {}

void Dense::init(Rng& rng, double gain) {
  const double stddev = gain * std::sqrt(2.0 / in);
  for (double& w : weight.values) w = rng.normal(0.0, stddev);
  std::fill(bias.values.begin(), bias.values.end(), 0.0);
}

void Dense::forward(std::span<const double> x, std::span<double> y) const {
  for (int o = 0; o < out; ++o) {
    const double* w = &weight.values[static_cast<std::size_t>(o) * in];
    double acc = bias.values[o];
    for (int i = 0; i < in; ++i) acc += w[i] * x[i];
    y[o] = acc;
  }
}

void Dense::backward(std::span<const double> x, std::span<const double> gy, Dense* gp,
                     std::span<double> gx) const {
  for (int o = 0; o < out; ++o) {
    const double g = gy[o];
    if (g == 0.0) continue;
    const double* w = &weight.values[static_cast<std::size_t>(o) * in];
    if (gp) {
      double* gw = &gp->weight.values[static_cast<std::size_t>(o) * in];
      for (int i = 0; i < in; ++i) gw[i] += g * x[i];
      gp->bias.values[o] += g;
    }
    if (!gx.empty()) {
      for (int i = 0; i < in; ++i) gx[i] += g * w[i];
    }
  }
}

Mlp::Mlp(const std::string& name, int in, int width, int out)
    : hidden(name + ".hidden", in, width), output(name + ".output", width, out) {}

void Mlp::init(Rng& rng) {
  hidden.init(rng, 1.0);
  output.init(rng, 0.5);
}

std::vector<double> Mlp::forward(std::span<const double> x, Cache* cache) const {
  std::vector<double> h(hidden.out);
  hidden.forward(x, h);
  for (double& v : h) v = v > 0.0 ? v : 0.0;
  std::vector<double> y(output.out);
  output.forward(h, y);
  if (cache) {
    cache->input.assign(x.begin(), x.end());
    cache->hidden = std::move(h);
  }
  return y;
}

void Mlp::backward(const Cache& cache, std::span<const double> grad_out, Mlp* gp,
                   std::span<double> grad_input) const {
  std::vector<double> gh(hidden.out, 0.0);
  output.backward(cache.hidden, grad_out, gp ? &gp->output : nullptr, gh);
  for (std::size_t i = 0; i < gh.size(); ++i) {
    if (cache.hidden[i] <= 0.0) gh[i] = 0.0;
  }
  hidden.backward(cache.input, gh, gp ? &gp->hidden : nullptr, grad_input);
}

CropPlan make_crop_plan(const Box2& box, int map_height, int map_width, int size) {
  CropPlan plan;
  plan.size = size;
  plan.index.resize(static_cast<std::size_t>(size) * size);
  plan.weight.resize(plan.index.size());
  const double step_x = box.width() / size;
  const double step_y = box.height() / size;
  for (int sy = 0; sy < size; ++sy) {
    const double fy = std::clamp(box.y0 + (sy + 0.5) * step_y - 0.5, 0.0, map_height - 1.0);
    const int y0 = std::min(static_cast<int>(fy), map_height - 1);
    const int y1 = std::min(y0 + 1, map_height - 1);
    const double ty = fy - y0;
    for (int sx = 0; sx < size; ++sx) {
      const double fx = std::clamp(box.x0 + (sx + 0.5) * step_x - 0.5, 0.0, map_width - 1.0);
      const int x0 = std::min(static_cast<int>(fx), map_width - 1);
      const int x1 = std::min(x0 + 1, map_width - 1);
      const double tx = fx - x0;
      const std::size_t k = static_cast<std::size_t>(sy) * size + sx;
      plan.index[k] = {y0 * map_width + x0, y0 * map_width + x1, y1 * map_width + x0,
                       y1 * map_width + x1};
      plan.weight[k] = {(1 - ty) * (1 - tx), (1 - ty) * tx, ty * (1 - tx), ty * tx};
    }
  }
  return plan;
}

void crop_features(const Tensor& map, const CropPlan& plan, std::span<double> out) {
  const std::size_t n = plan.index.size();
  for (int c = 0; c < map.channels; ++c) {
    const double* p = map.plane(c).data();
    for (std::size_t k = 0; k < n; ++k) {
      const auto& ix = plan.index[k];
      const auto& w = plan.weight[k];
      out[c * n + k] = w[0] * p[ix[0]] + w[1] * p[ix[1]] + w[2] * p[ix[2]] + w[3] * p[ix[3]];
    }
  }
}

void crop_features_backward(const CropPlan& plan, std::span<const double> grad_out,
                            Tensor& grad_map) {
  const std::size_t n = plan.index.size();
  for (int c = 0; c < grad_map.channels; ++c) {
    double* p = grad_map.plane(c).data();
    for (std::size_t k = 0; k < n; ++k) {
      const double g = grad_out[c * n + k];
      if (g == 0.0) continue;
      const auto& ix = plan.index[k];
      const auto& w = plan.weight[k];
      p[ix[0]] += w[0] * g;
      p[ix[1]] += w[1] * g;
      p[ix[2]] += w[2] * g;
      p[ix[3]] += w[3] * g;
    }
  }
}

std::vector<double> softmax(std::span<const double> logits) {
  const double m = *std::max_element(logits.begin(), logits.end());
  std::vector<double> p(logits.size());
  double z = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    p[i] = std::exp(logits[i] - m);
    z += p[i];
  }
  for (double& v : p) v /= z;
  return p;
}

std::vector<double> softmax_backward(std::span<const double> probs,
                                     std::span<const double> grad_probs) {
  double dot = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) dot += probs[i] * grad_probs[i];
  std::vector<double> g(probs.size());
  for (std::size_t i = 0; i < probs.size(); ++i) g[i] = probs[i] * (grad_probs[i] - dot);
  return g;
}

}  // namespace fusionbench
