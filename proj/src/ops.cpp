#include "acros/ops.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace acros::ops {

namespace {

struct AxisView {
  int64_t outer, mid, inner;
};

AxisView axis_view(const Shape& s, int axis) {
  if (axis < 0 || axis >= static_cast<int>(s.size()))
    throw std::invalid_argument("axis out of range for shape " + shape_str(s));
  AxisView v{1, s[static_cast<size_t>(axis)], 1};
  for (int i = 0; i < axis; ++i) v.outer *= s[static_cast<size_t>(i)];
  for (int i = axis + 1; i < static_cast<int>(s.size()); ++i) v.inner *= s[static_cast<size_t>(i)];
  return v;
}

}  // namespace

Tensor softmax(const Tensor& x, int axis, const std::vector<uint8_t>* mask) {
  for (float v : x.data())
    if (!std::isfinite(v)) throw std::domain_error("softmax: non-finite input");
  const auto view = axis_view(x.shape(), axis);
  const bool full_mask = mask && static_cast<int64_t>(mask->size()) == x.numel();
  const bool slice_mask = mask && static_cast<int64_t>(mask->size()) == view.mid;
  if (mask && !full_mask && !slice_mask)
    throw std::invalid_argument("softmax: mask must match the tensor or the softmax axis");
  std::vector<float> out(static_cast<size_t>(x.numel()), 0.0f);
  for (int64_t o = 0; o < view.outer; ++o)
    for (int64_t i = 0; i < view.inner; ++i) {
      auto at = [&](int64_t m) { return static_cast<size_t>((o * view.mid + m) * view.inner + i); };
      auto keep = [&](int64_t m) {
        if (!mask) return true;
        return full_mask ? (*mask)[at(m)] != 0 : (*mask)[static_cast<size_t>(m)] != 0;
      };
      double mx = -1e300;
      int64_t kept = 0;
      for (int64_t m = 0; m < view.mid; ++m)
        if (keep(m)) {
          mx = std::max(mx, static_cast<double>(x.data()[at(m)]));
          ++kept;
        }
      if (kept == 0) throw std::domain_error("softmax: fully masked slice");
      double sum = 0.0;
      for (int64_t m = 0; m < view.mid; ++m)
        if (keep(m)) sum += std::exp(static_cast<double>(x.data()[at(m)]) - mx);
      for (int64_t m = 0; m < view.mid; ++m)
        if (keep(m)) out[at(m)] = static_cast<float>(std::exp(static_cast<double>(x.data()[at(m)]) - mx) / sum);
    }
  return Tensor::from(x.shape(), std::move(out));
}

double kl_divergence(const Tensor& p, const Tensor& q) {
  if (p.shape() != q.shape()) throw std::invalid_argument("kl_divergence: shape mismatch");
  double sp = 0.0, sq = 0.0;
  for (float v : p.data()) sp += v;
  for (float v : q.data()) sq += v;
  if (std::abs(sp - 1.0) > 1e-6 || std::abs(sq - 1.0) > 1e-6)
    throw std::invalid_argument("kl_divergence: inputs are not normalized within 1e-6");
  double kl = 0.0;
  for (int64_t i = 0; i < p.numel(); ++i) {
    const double pi = p.data()[static_cast<size_t>(i)];
    if (pi <= 0.0) continue;
    const double qi = std::max(static_cast<double>(q.data()[static_cast<size_t>(i)]), 1e-12);
    kl += pi * std::log(pi / qi);
  }
  return std::max(kl, 0.0);
}

Tensor l2_normalize(const Tensor& v, int axis) {
  const auto view = axis_view(v.shape(), axis);
  std::vector<float> out(static_cast<size_t>(v.numel()));
  for (int64_t o = 0; o < view.outer; ++o)
    for (int64_t i = 0; i < view.inner; ++i) {
      auto at = [&](int64_t m) { return static_cast<size_t>((o * view.mid + m) * view.inner + i); };
      double ss = 0.0;
      for (int64_t m = 0; m < view.mid; ++m) {
        const double x = v.data()[at(m)];
        ss += x * x;
      }
      const double norm = std::sqrt(ss);
      if (norm < 1e-12) throw std::domain_error("l2_normalize: degenerate slice");
      for (int64_t m = 0; m < view.mid; ++m) out[at(m)] = static_cast<float>(v.data()[at(m)] / norm);
    }
  return Tensor::from(v.shape(), std::move(out));
}

namespace {

template <class T>
double cosine_impl(std::span<const T> u, std::span<const T> v) {
  if (u.size() != v.size()) throw std::invalid_argument("cosine: length mismatch");
  double uu = 0.0, vv = 0.0, uv = 0.0;
  for (size_t i = 0; i < u.size(); ++i) {
    uu += static_cast<double>(u[i]) * u[i];
    vv += static_cast<double>(v[i]) * v[i];
    uv += static_cast<double>(u[i]) * v[i];
  }
  if (std::sqrt(uu) < 1e-12 || std::sqrt(vv) < 1e-12) throw std::domain_error("cosine: zero vector");
  return std::clamp(uv / (std::sqrt(uu) * std::sqrt(vv)), -1.0, 1.0);
}

}  // namespace

double cosine(std::span<const float> u, std::span<const float> v) { return cosine_impl(u, v); }
double cosine_d(std::span<const double> u, std::span<const double> v) { return cosine_impl(u, v); }

SvdCumvar svd_cumvariance(const std::vector<double>& h, int n, int d) {
  if (n < 2 || d < 1) throw std::invalid_argument("svd_cumvariance: degenerate shape");
  if (static_cast<int64_t>(h.size()) != static_cast<int64_t>(n) * d)
    throw std::invalid_argument("svd_cumvariance: data length mismatch");
  // Column-major work copy of the column-centered matrix.
  std::vector<double> a(static_cast<size_t>(n) * d);
  for (int j = 0; j < d; ++j) {
    double mean = 0.0;
    for (int i = 0; i < n; ++i) mean += h[static_cast<size_t>(i) * d + static_cast<size_t>(j)];
    mean /= n;
    for (int i = 0; i < n; ++i)
      a[static_cast<size_t>(j) * n + static_cast<size_t>(i)] = h[static_cast<size_t>(i) * d + static_cast<size_t>(j)] - mean;
  }
  // One-sided Jacobi: rotate column pairs until all are mutually orthogonal.
  // Works directly on the centered matrix, so tiny singular values keep high
  // relative accuracy (a Gram-matrix route would square the condition number).
  const int max_sweeps = 60;
  const double tol = 1e-14;
  for (int sweep = 0; sweep < max_sweeps; ++sweep) {
    bool rotated = false;
    for (int p = 0; p < d - 1; ++p)
      for (int q = p + 1; q < d; ++q) {
        double app = 0.0, aqq = 0.0, apq = 0.0;
        const double* cp = a.data() + static_cast<size_t>(p) * n;
        const double* cq = a.data() + static_cast<size_t>(q) * n;
        for (int i = 0; i < n; ++i) {
          app += cp[i] * cp[i];
          aqq += cq[i] * cq[i];
          apq += cp[i] * cq[i];
        }
        if (std::abs(apq) <= tol * std::sqrt(app * aqq) || apq == 0.0) continue;
        rotated = true;
        const double zeta = (aqq - app) / (2.0 * apq);
        const double t = (zeta >= 0.0 ? 1.0 : -1.0) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        double* mp = a.data() + static_cast<size_t>(p) * n;
        double* mq = a.data() + static_cast<size_t>(q) * n;
        for (int i = 0; i < n; ++i) {
          const double vp = mp[i], vq = mq[i];
          mp[i] = c * vp - s * vq;
          mq[i] = s * vp + c * vq;
        }
      }
    if (!rotated) break;
  }
  SvdCumvar out;
  out.singular_values.resize(static_cast<size_t>(std::min(n, d)));
  std::vector<double> norms(static_cast<size_t>(d));
  for (int j = 0; j < d; ++j) {
    double ss = 0.0;
    const double* cj = a.data() + static_cast<size_t>(j) * n;
    for (int i = 0; i < n; ++i) ss += cj[i] * cj[i];
    norms[static_cast<size_t>(j)] = std::sqrt(ss);
  }
  std::sort(norms.begin(), norms.end(), std::greater<double>());
  std::copy(norms.begin(), norms.begin() + std::min(n, d), out.singular_values.begin());
  double total = 0.0;
  for (double s : out.singular_values) total += s * s;
  out.cumvar.resize(out.singular_values.size());
  double acc = 0.0;
  for (size_t k = 0; k < out.singular_values.size(); ++k) {
    acc += out.singular_values[k] * out.singular_values[k];
    out.cumvar[k] = total > 0.0 ? acc / total : 1.0;
  }
  return out;
}

SvdCumvar svd_cumvariance(const Tensor& h) {
  if (h.rank() != 2) throw std::invalid_argument("svd_cumvariance: matrix input required");
  std::vector<double> data(h.data().begin(), h.data().end());
  return svd_cumvariance(data, h.dim(0), h.dim(1));
}

double logsumexp(std::span<const float> x) {
  double mx = -1e300;
  for (float v : x) mx = std::max(mx, static_cast<double>(v));
  double sum = 0.0;
  for (float v : x) sum += std::exp(static_cast<double>(v) - mx);
  return mx + std::log(sum);
}

std::vector<double> softmax_row(std::span<const float> x) {
  const double lse = logsumexp(x);
  std::vector<double> p(x.size());
  for (size_t i = 0; i < x.size(); ++i) p[i] = std::exp(static_cast<double>(x[i]) - lse);
  return p;
}

double kl_rows(std::span<const double> p, std::span<const double> q) {
  double kl = 0.0;
  for (size_t i = 0; i < p.size(); ++i) {
    if (p[i] <= 0.0) continue;
    kl += p[i] * std::log(p[i] / std::max(q[i], 1e-12));
  }
  return std::max(kl, 0.0);
}

int argmax_row(std::span<const float> x) {
  int best = 0;
  for (size_t i = 1; i < x.size(); ++i)
    if (x[i] > x[best]) best = static_cast<int>(i);
  return best;
}

}  // namespace acros::ops
