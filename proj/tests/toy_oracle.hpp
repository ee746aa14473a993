#pragma once

// Reference re-execution of the toy model: whole sequence at once, no KV
// cache, double precision. Shares only the weights with the real backend.

#include <algorithm>
#include <cmath>
#include <map>
#include <utility>
#include <vector>

#include "pcomp/toy_model.hpp"

namespace oracle {

using Vec = std::vector<double>;
using Overrides = std::map<std::pair<int, int>, std::vector<float>>;  // (layer, position)

struct Trace {
  std::vector<std::vector<Vec>> states;  // [layer][position]
  std::vector<Vec> logits;               // [position]
};

inline Vec mul(const pcomp::toy::Matrix& m, const Vec& x) {
  Vec out(static_cast<std::size_t>(m.rows), 0.0);
  for (int r = 0; r < m.rows; ++r) {
    for (int c = 0; c < m.cols; ++c) out[r] += static_cast<double>(m.row(r)[c]) * x[c];
  }
  return out;
}

inline Vec rms(const Vec& x, const std::vector<float>& gain, double eps) {
  double ss = 0.0;
  for (double v : x) ss += v * v;
  const double s = 1.0 / std::sqrt(ss / static_cast<double>(x.size()) + eps);
  Vec out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * s * gain[i];
  return out;
}

inline void rope(Vec& v, int heads, int pos, double base) {
  const int hd = static_cast<int>(v.size()) / heads;
  for (int h = 0; h < heads; ++h) {
    for (int i = 0; i < hd / 2; ++i) {
      const double angle = pos * std::pow(base, -2.0 * i / hd);
      const double a = v[h * hd + i];
      const double b = v[h * hd + i + hd / 2];
      v[h * hd + i] = a * std::cos(angle) - b * std::sin(angle);
      v[h * hd + i + hd / 2] = a * std::sin(angle) + b * std::cos(angle);
    }
  }
}

inline double gelu(double x) {
  return 0.5 * x * (1.0 + std::tanh(std::sqrt(2.0 / M_PI) * (x + 0.044715 * x * x * x)));
}

inline Trace run(const pcomp::toy::Weights& w, const std::vector<pcomp::TokenId>& tokens,
                 const Overrides& overrides = {}) {
  const auto& cfg = w.config;
  const int n = static_cast<int>(tokens.size());
  const int d = cfg.hidden_dim;
  const int hd = d / cfg.num_heads;
  std::vector<Vec> x(n);
  for (int p = 0; p < n; ++p) x[p] = Vec(w.embedding.row(tokens[p]), w.embedding.row(tokens[p]) + d);

  Trace t;
  for (int l = 0; l < cfg.num_layers; ++l) {
    const auto& lw = w.layers[l];
    std::vector<Vec> q(n), k(n), v(n);
    for (int p = 0; p < n; ++p) {
      const Vec h = rms(x[p], lw.attn_norm, cfg.norm_eps);
      q[p] = mul(lw.wq, h);
      k[p] = mul(lw.wk, h);
      v[p] = mul(lw.wv, h);
      rope(q[p], cfg.num_heads, p, cfg.rope_base);
      rope(k[p], cfg.num_heads, p, cfg.rope_base);
    }
    std::vector<Vec> next(n);
    for (int p = 0; p < n; ++p) {
      Vec attn(d, 0.0);
      for (int h = 0; h < cfg.num_heads; ++h) {
        Vec score(p + 1);
        for (int s = 0; s <= p; ++s) {
          double dp = 0.0;
          for (int i = 0; i < hd; ++i) dp += q[p][h * hd + i] * k[s][h * hd + i];
          score[s] = dp / std::sqrt(static_cast<double>(hd));
        }
        const double mx = *std::max_element(score.begin(), score.end());
        double z = 0.0;
        for (double& sc : score) z += (sc = std::exp(sc - mx));
        for (int s = 0; s <= p; ++s) {
          for (int i = 0; i < hd; ++i) attn[h * hd + i] += score[s] / z * v[s][h * hd + i];
        }
      }
      Vec y = x[p];
      const Vec o = mul(lw.wo, attn);
      for (int i = 0; i < d; ++i) y[i] += o[i];
      Vec hidden = mul(lw.w_in, rms(y, lw.mlp_norm, cfg.norm_eps));
      for (double& hv : hidden) hv = gelu(hv);
      const Vec m = mul(lw.w_out, hidden);
      for (int i = 0; i < d; ++i) y[i] += m[i];
      if (auto it = overrides.find({l, p}); it != overrides.end()) {
        y.assign(it->second.begin(), it->second.end());
      }
      next[p] = std::move(y);
    }
    x = std::move(next);
    t.states.push_back(x);
  }
  for (int p = 0; p < n; ++p) t.logits.push_back(mul(w.unembedding, rms(x[p], w.final_norm, cfg.norm_eps)));
  return t;
}

inline int argmax(const Vec& logits) {
  return static_cast<int>(std::max_element(logits.begin(), logits.end()) - logits.begin());
}

inline Vec softmax(const Vec& logits) {
  const double mx = *std::max_element(logits.begin(), logits.end());
  Vec p(logits.size());
  double z = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) z += (p[i] = std::exp(logits[i] - mx));
  for (double& v : p) v /= z;
  return p;
}

// Greedy decode by re-running the whole sequence at every step.
inline std::vector<pcomp::TokenId> greedy(const pcomp::toy::Weights& w,
                                          std::vector<pcomp::TokenId> tokens, int n,
                                          const Overrides& overrides = {}) {
  std::vector<pcomp::TokenId> out;
  for (int i = 0; i < n; ++i) {
    const Trace t = run(w, tokens, overrides);
    const int next = argmax(t.logits.back());
    out.push_back(next);
    tokens.push_back(next);
  }
  return out;
}

inline double max_abs_diff(const std::vector<float>& a, const Vec& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

inline double max_abs(const Vec& v) {
  double m = 0.0;
  for (double x : v) m = std::max(m, std::abs(x));
  return m;
}

}  // namespace oracle
