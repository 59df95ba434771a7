#pragma once

// Reference implementations written as plain nested loops over row-major
// vectors. They share no code with the graph-building losses.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <deque>
#include <optional>
#include <vector>

namespace clipbench::oracle {

using Matrix = std::vector<double>;  // row-major

inline double dot(const Matrix& a, std::size_t i, const Matrix& b, std::size_t j, std::size_t d) {
  double s = 0.0;
  for (std::size_t k = 0; k < d; ++k) s += a[i * d + k] * b[j * d + k];
  return s;
}

// -mean_i log( exp(l_i.r_i/τ) / Σ_j exp(l_i.r_j/τ) )
inline double info_nce(const Matrix& left, const Matrix& right, std::size_t n, std::size_t d, double tau) {
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double mx = -INFINITY;
    for (std::size_t j = 0; j < n; ++j) mx = std::fmax(mx, dot(left, i, right, j, d) / tau);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += std::exp(dot(left, i, right, j, d) / tau - mx);
    total += -(dot(left, i, right, i, d) / tau - mx - std::log(z));
  }
  return total / static_cast<double>(n);
}

inline double clip_loss(const Matrix& img, const Matrix& txt, std::size_t n, std::size_t d, double tau) {
  return 0.5 * (info_nce(img, txt, n, d, tau) + info_nce(txt, img, n, d, tau));
}

// NT-Xent over the 2n stacked views, self-similarity excluded.
inline double iss(const Matrix& a, const Matrix& b, std::size_t n, std::size_t d, double tau) {
  Matrix z(a);
  z.insert(z.end(), b.begin(), b.end());
  const std::size_t m = 2 * n;
  double total = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    const std::size_t pos = (i + n) % m;
    double mx = -INFINITY;
    for (std::size_t k = 0; k < m; ++k)
      if (k != i) mx = std::fmax(mx, dot(z, i, z, k, d) / tau);
    double den = 0.0;
    for (std::size_t k = 0; k < m; ++k)
      if (k != i) den += std::exp(dot(z, i, z, k, d) / tau - mx);
    total += -(dot(z, i, z, pos, d) / tau - mx - std::log(den));
  }
  return total / static_cast<double>(m);
}

// Tokens of one sample as a list of vectors.
struct TokenSet {
  std::vector<std::vector<double>> tokens;
  std::vector<std::uint8_t> mask;
};

// Lowest index among valid maxima of row/column of the per-pair matrix.
inline std::size_t first_argmax(const std::vector<double>& values, const std::vector<std::uint8_t>& valid) {
  std::size_t best = values.size();
  for (std::size_t r = 0; r < values.size(); ++r)
    if (valid[r] && (best == values.size() || values[r] > values[best])) best = r;
  return best;
}

inline double vdot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) s += a[k] * b[k];
  return s;
}

// sim^I: mean over the image's valid tokens of the best text-token match.
inline double sim_image(const TokenSet& img, const TokenSet& txt) {
  double acc = 0.0;
  std::size_t n = 0;
  for (std::size_t k = 0; k < img.tokens.size(); ++k) {
    if (!img.mask[k]) continue;
    double best = -INFINITY;
    for (std::size_t m = 0; m < txt.tokens.size(); ++m)
      if (txt.mask[m]) best = std::fmax(best, vdot(img.tokens[k], txt.tokens[m]));
    acc += best;
    ++n;
  }
  return acc / static_cast<double>(n);
}

// sim^T: mean over the text's valid tokens of the best image-token match.
inline double sim_text(const TokenSet& img, const TokenSet& txt) {
  double acc = 0.0;
  std::size_t n = 0;
  for (std::size_t m = 0; m < txt.tokens.size(); ++m) {
    if (!txt.mask[m]) continue;
    double best = -INFINITY;
    for (std::size_t k = 0; k < img.tokens.size(); ++k)
      if (img.mask[k]) best = std::fmax(best, vdot(img.tokens[k], txt.tokens[m]));
    acc += best;
    ++n;
  }
  return acc / static_cast<double>(n);
}

// Matched text-token index for every image token (image side) or matched
// image-token index for every text token; invalid tokens map to the size.
inline std::vector<std::size_t> matches(const TokenSet& img, const TokenSet& txt, bool image_side) {
  std::vector<std::size_t> out;
  const auto& from = image_side ? img : txt;
  const auto& to = image_side ? txt : img;
  for (std::size_t k = 0; k < from.tokens.size(); ++k) {
    if (!from.mask[k]) {
      out.push_back(to.tokens.size());
      continue;
    }
    std::vector<double> v;
    for (const auto& t : to.tokens) v.push_back(vdot(from.tokens[k], t));
    out.push_back(first_argmax(v, to.mask));
  }
  return out;
}

inline double cross_entropy_rows(const std::vector<std::vector<double>>& logits) {
  double total = 0.0;
  const std::size_t n = logits.size();
  for (std::size_t i = 0; i < n; ++i) {
    double mx = -INFINITY;
    for (double v : logits[i]) mx = std::fmax(mx, v);
    double z = 0.0;
    for (double v : logits[i]) z += std::exp(v - mx);
    total += -(logits[i][i] - mx - std::log(z));
  }
  return total / static_cast<double>(n);
}

// ½ (CE over images of sim^I/τ + CE over texts of sim^T/τ)
inline double filip_loss(const std::vector<TokenSet>& images, const std::vector<TokenSet>& texts, double tau) {
  const std::size_t n = images.size();
  std::vector<std::vector<double>> li(n, std::vector<double>(n)), lt(n, std::vector<double>(n));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      li[i][j] = sim_image(images[i], texts[j]) / tau;
      lt[j][i] = sim_text(images[i], texts[j]) / tau;
    }
  return 0.5 * (cross_entropy_rows(li) + cross_entropy_rows(lt));
}

struct QueueEntry {
  std::vector<double> vector;
  std::uint64_t step = 0;
};

// Exhaustive cosine scan skipping entries from `step`; ties keep the older.
inline std::optional<std::size_t> nearest(const std::deque<QueueEntry>& q, const std::vector<double>& query,
                                          std::uint64_t step) {
  std::optional<std::size_t> best;
  double best_cos = 0.0;
  for (std::size_t i = 0; i < q.size(); ++i) {
    if (q[i].step == step) continue;
    const double c = vdot(query, q[i].vector) / std::sqrt(vdot(query, query) * vdot(q[i].vector, q[i].vector));
    if (!best || c > best_cos) {
      best = i;
      best_cos = c;
    }
  }
  return best;
}

// Symmetric InfoNCE of images against their texts' queue neighbours; 0 when
// some text has no eligible neighbour.
inline double nns(const Matrix& img, const Matrix& txt, std::size_t n, std::size_t d,
                  const std::deque<QueueEntry>& q, double tau, std::uint64_t step) {
  Matrix nn;
  for (std::size_t i = 0; i < n; ++i) {
    auto idx = nearest(q, std::vector<double>(txt.begin() + static_cast<long>(i * d),
                                              txt.begin() + static_cast<long>((i + 1) * d)),
                       step);
    if (!idx) return 0.0;
    nn.insert(nn.end(), q[*idx].vector.begin(), q[*idx].vector.end());
  }
  return clip_loss(img, nn, n, d, tau);
}

// Bounded FIFO model: the newest `capacity` pushes, oldest first.
inline std::deque<QueueEntry> fifo(const std::vector<QueueEntry>& pushes, std::size_t capacity) {
  std::deque<QueueEntry> q;
  for (const auto& e : pushes) {
    q.push_back(e);
    if (q.size() > capacity) q.pop_front();
  }
  return q;
}

inline double mvs(const Matrix& img, const Matrix& img_aug, const Matrix& txt, const Matrix& txt_aug, std::size_t n,
                  std::size_t d, double tau) {
  return (clip_loss(img_aug, txt, n, d, tau) + clip_loss(img, txt_aug, n, d, tau) +
          clip_loss(img_aug, txt_aug, n, d, tau)) /
         3.0;
}

}  // namespace clipbench::oracle
