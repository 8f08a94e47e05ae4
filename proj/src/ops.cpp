#include "kore/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "kore/errors.hpp"

namespace kore {

namespace {

bool tracked(const Tensor& a) { return a.requires_grad(); }

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (!a.same_shape(b)) {
    throw invalid_argument(std::string(op) + ": shape mismatch " + a.shape_str() +
                           " vs " + b.shape_str());
  }
}

void require_2d(const Tensor& a, const char* op) {
  if (a.shape().size() != 2) {
    throw invalid_argument(std::string(op) + ": expected 2-D tensor, got " + a.shape_str());
  }
}

void require_scalar(const Tensor& s, const char* op) {
  if (s.numel() != 1) {
    throw invalid_argument(std::string(op) + ": expected scalar tensor, got " + s.shape_str());
  }
}

// Records the closure only when it can ever fire.
void maybe_record(Tensor& out, bool any_input_tracked, std::function<void()> fn) {
  Tape* tape = Tape::active();
  if (tape && any_input_tracked) {
    out.set_requires_grad(true);
    tape->record(std::move(fn));
  }
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  Tensor out = Tensor::zeros(a.shape());
  const std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) out.value()[i] = a.value()[i] + b.value()[i];
  maybe_record(out, tracked(a) || tracked(b), [a = a, b = b, out]() mutable {
    if (!out.has_grad()) return;
    const std::size_t m = out.numel();
    if (a.requires_grad()) {
      a.ensure_grad();
      for (std::size_t i = 0; i < m; ++i) a.grad()[i] += out.grad()[i];
    }
    if (b.requires_grad()) {
      b.ensure_grad();
      for (std::size_t i = 0; i < m; ++i) b.grad()[i] += out.grad()[i];
    }
  });
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  Tensor out = Tensor::zeros(a.shape());
  const std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) out.value()[i] = a.value()[i] - b.value()[i];
  maybe_record(out, tracked(a) || tracked(b), [a = a, b = b, out]() mutable {
    if (!out.has_grad()) return;
    const std::size_t m = out.numel();
    if (a.requires_grad()) {
      a.ensure_grad();
      for (std::size_t i = 0; i < m; ++i) a.grad()[i] += out.grad()[i];
    }
    if (b.requires_grad()) {
      b.ensure_grad();
      for (std::size_t i = 0; i < m; ++i) b.grad()[i] -= out.grad()[i];
    }
  });
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  Tensor out = Tensor::zeros(a.shape());
  const std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) out.value()[i] = a.value()[i] * b.value()[i];
  maybe_record(out, tracked(a) || tracked(b), [a = a, b = b, out]() mutable {
    if (!out.has_grad()) return;
    const std::size_t m = out.numel();
    if (a.requires_grad()) {
      a.ensure_grad();
      for (std::size_t i = 0; i < m; ++i) a.grad()[i] += out.grad()[i] * b.value()[i];
    }
    if (b.requires_grad()) {
      b.ensure_grad();
      for (std::size_t i = 0; i < m; ++i) b.grad()[i] += out.grad()[i] * a.value()[i];
    }
  });
  return out;
}

Tensor div(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "div");
  Tensor out = Tensor::zeros(a.shape());
  const std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) out.value()[i] = a.value()[i] / b.value()[i];
  maybe_record(out, tracked(a) || tracked(b), [a = a, b = b, out]() mutable {
    if (!out.has_grad()) return;
    const std::size_t m = out.numel();
    if (a.requires_grad()) {
      a.ensure_grad();
      for (std::size_t i = 0; i < m; ++i) a.grad()[i] += out.grad()[i] / b.value()[i];
    }
    if (b.requires_grad()) {
      b.ensure_grad();
      for (std::size_t i = 0; i < m; ++i) {
        b.grad()[i] -= out.grad()[i] * a.value()[i] / (b.value()[i] * b.value()[i]);
      }
    }
  });
  return out;
}

Tensor scale(const Tensor& a, double c) {
  Tensor out = Tensor::zeros(a.shape());
  const std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) out.value()[i] = a.value()[i] * c;
  maybe_record(out, tracked(a), [a = a, out, c]() mutable {
    if (!out.has_grad() || !a.requires_grad()) return;
    a.ensure_grad();
    for (std::size_t i = 0; i < out.numel(); ++i) a.grad()[i] += out.grad()[i] * c;
  });
  return out;
}

Tensor add_scalar(const Tensor& a, double c) {
  Tensor out = Tensor::zeros(a.shape());
  const std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) out.value()[i] = a.value()[i] + c;
  maybe_record(out, tracked(a), [a = a, out]() mutable {
    if (!out.has_grad() || !a.requires_grad()) return;
    a.ensure_grad();
    for (std::size_t i = 0; i < out.numel(); ++i) a.grad()[i] += out.grad()[i];
  });
  return out;
}

Tensor mul_bc(const Tensor& a, const Tensor& s) {
  require_scalar(s, "mul_bc");
  Tensor out = Tensor::zeros(a.shape());
  const double sv = s.value()[0];
  for (std::size_t i = 0; i < a.numel(); ++i) out.value()[i] = a.value()[i] * sv;
  maybe_record(out, tracked(a) || tracked(s), [a = a, s = s, out, sv]() mutable {
    if (!out.has_grad()) return;
    if (a.requires_grad()) {
      a.ensure_grad();
      for (std::size_t i = 0; i < out.numel(); ++i) a.grad()[i] += out.grad()[i] * sv;
    }
    if (s.requires_grad()) {
      s.ensure_grad();
      double acc = 0.0;
      for (std::size_t i = 0; i < out.numel(); ++i) acc += out.grad()[i] * a.value()[i];
      s.grad()[0] += acc;
    }
  });
  return out;
}

Tensor sub_bc(const Tensor& a, const Tensor& s) {
  require_scalar(s, "sub_bc");
  Tensor out = Tensor::zeros(a.shape());
  const double sv = s.value()[0];
  for (std::size_t i = 0; i < a.numel(); ++i) out.value()[i] = a.value()[i] - sv;
  maybe_record(out, tracked(a) || tracked(s), [a = a, s = s, out]() mutable {
    if (!out.has_grad()) return;
    if (a.requires_grad()) {
      a.ensure_grad();
      for (std::size_t i = 0; i < out.numel(); ++i) a.grad()[i] += out.grad()[i];
    }
    if (s.requires_grad()) {
      s.ensure_grad();
      double acc = 0.0;
      for (std::size_t i = 0; i < out.numel(); ++i) acc += out.grad()[i];
      s.grad()[0] -= acc;
    }
  });
  return out;
}

Tensor div_bc(const Tensor& a, const Tensor& s) {
  require_scalar(s, "div_bc");
  Tensor out = Tensor::zeros(a.shape());
  const double sv = s.value()[0];
  for (std::size_t i = 0; i < a.numel(); ++i) out.value()[i] = a.value()[i] / sv;
  maybe_record(out, tracked(a) || tracked(s), [a = a, s = s, out, sv]() mutable {
    if (!out.has_grad()) return;
    if (a.requires_grad()) {
      a.ensure_grad();
      for (std::size_t i = 0; i < out.numel(); ++i) a.grad()[i] += out.grad()[i] / sv;
    }
    if (s.requires_grad()) {
      s.ensure_grad();
      double acc = 0.0;
      for (std::size_t i = 0; i < out.numel(); ++i) acc += out.grad()[i] * a.value()[i];
      s.grad()[0] -= acc / (sv * sv);
    }
  });
  return out;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_2d(a, "matmul");
  require_2d(b, "matmul");
  const std::size_t m = a.rows(), k = a.cols(), k2 = b.rows(), n = b.cols();
  if (k != k2) {
    throw invalid_argument("matmul: inner dimensions disagree, " + a.shape_str() +
                           " x " + b.shape_str());
  }
  Tensor out = Tensor::zeros({m, n});
  const double* av = a.value().data();
  const double* bv = b.value().data();
  double* ov = out.value().data();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = av[i * k + p];
      if (aip == 0.0) continue;
      const double* brow = bv + p * n;
      double* orow = ov + i * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += aip * brow[j];
    }
  }
  maybe_record(out, tracked(a) || tracked(b), [a = a, b = b, out, m, k, n]() mutable {
    if (!out.has_grad()) return;
    const double* g = out.grad().data();
    if (a.requires_grad()) {
      a.ensure_grad();
      double* ga = a.grad().data();
      const double* bv2 = b.value().data();
      // dA = G * B^T
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          double acc = 0.0;
          const double* grow = g + i * n;
          const double* brow = bv2 + p * n;
          for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
          ga[i * k + p] += acc;
        }
      }
    }
    if (b.requires_grad()) {
      b.ensure_grad();
      double* gb = b.grad().data();
      const double* av2 = a.value().data();
      // dB = A^T * G
      for (std::size_t i = 0; i < m; ++i) {
        const double* grow = g + i * n;
        for (std::size_t p = 0; p < k; ++p) {
          const double aip = av2[i * k + p];
          if (aip == 0.0) continue;
          double* brow = gb + p * n;
          for (std::size_t j = 0; j < n; ++j) brow[j] += aip * grow[j];
        }
      }
    }
  });
  return out;
}

Tensor transpose(const Tensor& a) {
  require_2d(a, "transpose");
  const std::size_t m = a.rows(), n = a.cols();
  Tensor out = Tensor::zeros({n, m});
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) out.value()[j * m + i] = a.value()[i * n + j];
  }
  maybe_record(out, tracked(a), [a = a, out, m, n]() mutable {
    if (!out.has_grad() || !a.requires_grad()) return;
    a.ensure_grad();
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < n; ++j) a.grad()[i * n + j] += out.grad()[j * m + i];
    }
  });
  return out;
}

Tensor tile_rows(const Tensor& row, std::size_t n) {
  require_2d(row, "tile_rows");
  if (row.rows() != 1) throw invalid_argument("tile_rows: expected {1,d}, got " + row.shape_str());
  const std::size_t d = row.cols();
  Tensor out = Tensor::zeros({n, d});
  for (std::size_t i = 0; i < n; ++i) {
    std::copy(row.value().begin(), row.value().end(), out.value().begin() + i * d);
  }
  maybe_record(out, tracked(row), [row = row, out, n, d]() mutable {
    if (!out.has_grad() || !row.requires_grad()) return;
    row.ensure_grad();
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < d; ++j) row.grad()[j] += out.grad()[i * d + j];
    }
  });
  return out;
}

Tensor tile_cols(const Tensor& col, std::size_t d) {
  require_2d(col, "tile_cols");
  if (col.cols() != 1) throw invalid_argument("tile_cols: expected {n,1}, got " + col.shape_str());
  const std::size_t n = col.rows();
  Tensor out = Tensor::zeros({n, d});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < d; ++j) out.value()[i * d + j] = col.value()[i];
  }
  maybe_record(out, tracked(col), [col = col, out, n, d]() mutable {
    if (!out.has_grad() || !col.requires_grad()) return;
    col.ensure_grad();
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < d; ++j) col.grad()[i] += out.grad()[i * d + j];
    }
  });
  return out;
}

Tensor sum_all(const Tensor& a) {
  double acc = 0.0;
  for (double v : a.value()) acc += v;
  Tensor out = Tensor::scalar(acc);
  maybe_record(out, tracked(a), [a = a, out]() mutable {
    if (!out.has_grad() || !a.requires_grad()) return;
    a.ensure_grad();
    const double g = out.grad()[0];
    for (std::size_t i = 0; i < a.numel(); ++i) a.grad()[i] += g;
  });
  return out;
}

Tensor mean_all(const Tensor& a) {
  return scale(sum_all(a), 1.0 / static_cast<double>(a.numel()));
}

Tensor sum_axis0(const Tensor& a) {
  require_2d(a, "sum_axis0");
  const std::size_t n = a.rows(), d = a.cols();
  Tensor out = Tensor::zeros({1, d});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < d; ++j) out.value()[j] += a.value()[i * d + j];
  }
  maybe_record(out, tracked(a), [a = a, out, n, d]() mutable {
    if (!out.has_grad() || !a.requires_grad()) return;
    a.ensure_grad();
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < d; ++j) a.grad()[i * d + j] += out.grad()[j];
    }
  });
  return out;
}

Tensor sum_axis1(const Tensor& a) {
  require_2d(a, "sum_axis1");
  const std::size_t n = a.rows(), d = a.cols();
  Tensor out = Tensor::zeros({n, 1});
  for (std::size_t i = 0; i < n; ++i) {
    double acc = 0.0;
    for (std::size_t j = 0; j < d; ++j) acc += a.value()[i * d + j];
    out.value()[i] = acc;
  }
  maybe_record(out, tracked(a), [a = a, out, n, d]() mutable {
    if (!out.has_grad() || !a.requires_grad()) return;
    a.ensure_grad();
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < d; ++j) a.grad()[i * d + j] += out.grad()[i];
    }
  });
  return out;
}

Tensor gather_rows(const Tensor& a, const std::vector<std::size_t>& idx) {
  require_2d(a, "gather_rows");
  const std::size_t n = a.rows(), d = a.cols();
  for (std::size_t i : idx) {
    if (i >= n) throw invalid_argument("gather_rows: index out of range");
  }
  Tensor out = Tensor::zeros({idx.size(), d});
  for (std::size_t r = 0; r < idx.size(); ++r) {
    std::copy(a.value().begin() + idx[r] * d, a.value().begin() + (idx[r] + 1) * d,
              out.value().begin() + r * d);
  }
  maybe_record(out, tracked(a), [a = a, out, idx, d]() mutable {
    if (!out.has_grad() || !a.requires_grad()) return;
    a.ensure_grad();
    for (std::size_t r = 0; r < idx.size(); ++r) {
      for (std::size_t j = 0; j < d; ++j) a.grad()[idx[r] * d + j] += out.grad()[r * d + j];
    }
  });
  return out;
}

Tensor slice_rows(const Tensor& a, std::size_t start, std::size_t len) {
  require_2d(a, "slice_rows");
  if (start + len > a.rows()) throw invalid_argument("slice_rows: range out of bounds");
  const std::size_t d = a.cols();
  Tensor out = Tensor::zeros({len, d});
  std::copy(a.value().begin() + start * d, a.value().begin() + (start + len) * d,
            out.value().begin());
  maybe_record(out, tracked(a), [a = a, out, start, len, d]() mutable {
    if (!out.has_grad() || !a.requires_grad()) return;
    a.ensure_grad();
    for (std::size_t i = 0; i < len * d; ++i) a.grad()[start * d + i] += out.grad()[i];
  });
  return out;
}

Tensor slice_cols(const Tensor& a, std::size_t start, std::size_t len) {
  require_2d(a, "slice_cols");
  if (start + len > a.cols()) throw invalid_argument("slice_cols: range out of bounds");
  const std::size_t n = a.rows(), d = a.cols();
  Tensor out = Tensor::zeros({n, len});
  for (std::size_t i = 0; i < n; ++i) {
    std::copy(a.value().begin() + i * d + start, a.value().begin() + i * d + start + len,
              out.value().begin() + i * len);
  }
  maybe_record(out, tracked(a), [a = a, out, start, len, n, d]() mutable {
    if (!out.has_grad() || !a.requires_grad()) return;
    a.ensure_grad();
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < len; ++j) {
        a.grad()[i * d + start + j] += out.grad()[i * len + j];
      }
    }
  });
  return out;
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw invalid_argument("concat_rows: no parts");
  const std::size_t d = parts.front().cols();
  std::size_t total = 0;
  bool any_tracked = false;
  for (const Tensor& p : parts) {
    require_2d(p, "concat_rows");
    if (p.cols() != d) throw invalid_argument("concat_rows: column mismatch");
    total += p.rows();
    any_tracked = any_tracked || tracked(p);
  }
  Tensor out = Tensor::zeros({total, d});
  std::size_t row = 0;
  for (const Tensor& p : parts) {
    std::copy(p.value().begin(), p.value().end(), out.value().begin() + row * d);
    row += p.rows();
  }
  maybe_record(out, any_tracked, [parts = parts, out, d]() mutable {
    if (!out.has_grad()) return;
    std::size_t row = 0;
    for (Tensor p : parts) {
      if (p.requires_grad()) {
        p.ensure_grad();
        for (std::size_t i = 0; i < p.numel(); ++i) p.grad()[i] += out.grad()[row * d + i];
      }
      row += p.rows();
    }
  });
  return out;
}

Tensor segment_softmax(const Tensor& scores, const std::vector<std::size_t>& seg,
                       std::size_t n_segments) {
  require_2d(scores, "segment_softmax");
  const std::size_t e = scores.rows(), h = scores.cols();
  if (seg.size() != e) throw invalid_argument("segment_softmax: segment ids do not match rows");
  for (std::size_t s : seg) {
    if (s >= n_segments) throw invalid_argument("segment_softmax: segment id out of range");
  }
  Tensor out = Tensor::zeros({e, h});
  for (std::size_t c = 0; c < h; ++c) {
    std::vector<double> mx(n_segments, -std::numeric_limits<double>::infinity());
    for (std::size_t r = 0; r < e; ++r) {
      mx[seg[r]] = std::max(mx[seg[r]], scores.value()[r * h + c]);
    }
    std::vector<double> denom(n_segments, 0.0);
    for (std::size_t r = 0; r < e; ++r) {
      const double x = std::exp(scores.value()[r * h + c] - mx[seg[r]]);
      out.value()[r * h + c] = x;
      denom[seg[r]] += x;
    }
    for (std::size_t r = 0; r < e; ++r) out.value()[r * h + c] /= denom[seg[r]];
  }
  maybe_record(out, tracked(scores), [scores = scores, out, seg, n_segments, e, h]() mutable {
    if (!out.has_grad() || !scores.requires_grad()) return;
    scores.ensure_grad();
    // dx = y * (g - sum_seg(g * y)) per segment per column
    for (std::size_t c = 0; c < h; ++c) {
      std::vector<double> dot(n_segments, 0.0);
      for (std::size_t r = 0; r < e; ++r) {
        dot[seg[r]] += out.grad()[r * h + c] * out.value()[r * h + c];
      }
      for (std::size_t r = 0; r < e; ++r) {
        scores.grad()[r * h + c] +=
            out.value()[r * h + c] * (out.grad()[r * h + c] - dot[seg[r]]);
      }
    }
  });
  return out;
}

Tensor segment_sum(const Tensor& a, const std::vector<std::size_t>& seg,
                   std::size_t n_segments) {
  require_2d(a, "segment_sum");
  const std::size_t e = a.rows(), w = a.cols();
  if (seg.size() != e) throw invalid_argument("segment_sum: segment ids do not match rows");
  for (std::size_t s : seg) {
    if (s >= n_segments) throw invalid_argument("segment_sum: segment id out of range");
  }
  Tensor out = Tensor::zeros({n_segments, w});
  for (std::size_t r = 0; r < e; ++r) {
    for (std::size_t j = 0; j < w; ++j) out.value()[seg[r] * w + j] += a.value()[r * w + j];
  }
  maybe_record(out, tracked(a), [a = a, out, seg, e, w]() mutable {
    if (!out.has_grad() || !a.requires_grad()) return;
    a.ensure_grad();
    for (std::size_t r = 0; r < e; ++r) {
      for (std::size_t j = 0; j < w; ++j) a.grad()[r * w + j] += out.grad()[seg[r] * w + j];
    }
  });
  return out;
}

Tensor sum_col_groups(const Tensor& a, std::size_t n_groups) {
  require_2d(a, "sum_col_groups");
  const std::size_t e = a.rows(), w = a.cols();
  if (n_groups == 0 || w % n_groups != 0) {
    throw invalid_argument("sum_col_groups: column count not divisible by group count");
  }
  const std::size_t k = w / n_groups;
  Tensor out = Tensor::zeros({e, n_groups});
  for (std::size_t r = 0; r < e; ++r) {
    for (std::size_t g = 0; g < n_groups; ++g) {
      double acc = 0.0;
      for (std::size_t j = 0; j < k; ++j) acc += a.value()[r * w + g * k + j];
      out.value()[r * n_groups + g] = acc;
    }
  }
  maybe_record(out, tracked(a), [a = a, out, e, w, n_groups, k]() mutable {
    if (!out.has_grad() || !a.requires_grad()) return;
    a.ensure_grad();
    for (std::size_t r = 0; r < e; ++r) {
      for (std::size_t g = 0; g < n_groups; ++g) {
        const double gr = out.grad()[r * n_groups + g];
        for (std::size_t j = 0; j < k; ++j) a.grad()[r * w + g * k + j] += gr;
      }
    }
  });
  return out;
}

Tensor repeat_cols(const Tensor& a, std::size_t k) {
  require_2d(a, "repeat_cols");
  const std::size_t e = a.rows(), g = a.cols();
  Tensor out = Tensor::zeros({e, g * k});
  for (std::size_t r = 0; r < e; ++r) {
    for (std::size_t c = 0; c < g; ++c) {
      const double v = a.value()[r * g + c];
      for (std::size_t j = 0; j < k; ++j) out.value()[r * g * k + c * k + j] = v;
    }
  }
  maybe_record(out, tracked(a), [a = a, out, e, g, k]() mutable {
    if (!out.has_grad() || !a.requires_grad()) return;
    a.ensure_grad();
    for (std::size_t r = 0; r < e; ++r) {
      for (std::size_t c = 0; c < g; ++c) {
        double acc = 0.0;
        for (std::size_t j = 0; j < k; ++j) acc += out.grad()[r * g * k + c * k + j];
        a.grad()[r * g + c] += acc;
      }
    }
  });
  return out;
}

namespace {

// Stable row softmax on a flat buffer.
void softmax_rows(const double* x, double* y, std::size_t n, std::size_t d) {
  for (std::size_t i = 0; i < n; ++i) {
    const double* xr = x + i * d;
    double* yr = y + i * d;
    double mx = xr[0];
    for (std::size_t j = 1; j < d; ++j) mx = std::max(mx, xr[j]);
    double denom = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      yr[j] = std::exp(xr[j] - mx);
      denom += yr[j];
    }
    for (std::size_t j = 0; j < d; ++j) yr[j] /= denom;
  }
}

}  // namespace

Tensor softmax(const Tensor& x, int axis) {
  const bool is_1d = x.shape().size() == 1;
  const std::size_t n = is_1d ? 1 : x.rows();
  const std::size_t d = is_1d ? x.numel() : x.cols();
  if (!is_1d && x.shape().size() != 2) {
    throw invalid_argument("softmax: expected 1-D or 2-D tensor, got " + x.shape_str());
  }
  if (!is_1d && axis == 0) {
    // Column softmax via the transpose path.
    return transpose(softmax(transpose(x), 1));
  }
  if (axis != -1 && axis != 1 && !(is_1d && axis == 0)) {
    throw invalid_argument("softmax: unsupported axis");
  }
  Tensor out = Tensor::zeros(x.shape());
  softmax_rows(x.value().data(), out.value().data(), n, d);
  maybe_record(out, tracked(x), [x = x, out, n, d]() mutable {
    if (!out.has_grad() || !x.requires_grad()) return;
    x.ensure_grad();
    for (std::size_t i = 0; i < n; ++i) {
      const double* y = out.value().data() + i * d;
      const double* g = out.grad().data() + i * d;
      double dot = 0.0;
      for (std::size_t j = 0; j < d; ++j) dot += g[j] * y[j];
      double* dx = x.grad().data() + i * d;
      for (std::size_t j = 0; j < d; ++j) dx[j] += y[j] * (g[j] - dot);
    }
  });
  return out;
}

Tensor rsqrt(const Tensor& x, double eps) {
  Tensor out = Tensor::zeros(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) {
    out.value()[i] = 1.0 / std::sqrt(x.value()[i] + eps);
  }
  maybe_record(out, tracked(x), [x = x, out, eps]() mutable {
    if (!out.has_grad() || !x.requires_grad()) return;
    x.ensure_grad();
    for (std::size_t i = 0; i < x.numel(); ++i) {
      const double t = x.value()[i] + eps;
      x.grad()[i] += out.grad()[i] * (-0.5) / (t * std::sqrt(t));
    }
  });
  return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  require_2d(x, "layer_norm");
  const std::size_t n = x.rows(), d = x.cols();
  if (gain.numel() != d || bias.numel() != d) {
    throw invalid_argument("layer_norm: gain/bias must match last dimension " +
                           std::to_string(d));
  }
  // Composite: mean/var over the last dim, eps inside the square root.
  Tensor m = scale(sum_axis1(x), 1.0 / static_cast<double>(d));
  Tensor centered = sub(x, tile_cols(m, d));
  Tensor var = scale(sum_axis1(mul(centered, centered)), 1.0 / static_cast<double>(d));
  Tensor inv_std = rsqrt(var, eps);
  Tensor normed = mul(centered, tile_cols(inv_std, d));
  return add(mul(normed, tile_rows(gain, n)), tile_rows(bias, n));
}

Tensor gelu(const Tensor& x) {
  Tensor out = Tensor::zeros(x.shape());
  constexpr double inv_sqrt2 = 0.7071067811865475244;
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const double v = x.value()[i];
    out.value()[i] = 0.5 * v * (1.0 + std::erf(v * inv_sqrt2));
  }
  maybe_record(out, tracked(x), [x = x, out]() mutable {
    if (!out.has_grad() || !x.requires_grad()) return;
    x.ensure_grad();
    constexpr double inv_sqrt2 = 0.7071067811865475244;
    constexpr double inv_sqrt2pi = 0.3989422804014326779;
    for (std::size_t i = 0; i < x.numel(); ++i) {
      const double v = x.value()[i];
      const double cdf = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
      const double pdf = inv_sqrt2pi * std::exp(-0.5 * v * v);
      x.grad()[i] += out.grad()[i] * (cdf + v * pdf);
    }
  });
  return out;
}

Tensor masked_cross_entropy(const Tensor& logits, const std::vector<std::size_t>& targets,
                            const std::vector<bool>& mask) {
  require_2d(logits, "masked_cross_entropy");
  const std::size_t t = logits.rows(), v = logits.cols();
  if (targets.size() != t || mask.size() != t) {
    throw invalid_argument("masked_cross_entropy: targets/mask must match sequence length");
  }
  std::size_t count = 0;
  for (bool b : mask) count += b ? 1 : 0;
  if (count == 0) throw invalid_argument("masked_cross_entropy: empty answer mask");
  for (std::size_t i = 0; i < t; ++i) {
    if (mask[i] && targets[i] >= v) {
      throw invalid_argument("masked_cross_entropy: target id out of vocabulary");
    }
  }

  // Keep softmax rows for backward.
  Tensor probs = Tensor::zeros({t, v});
  softmax_rows(logits.value().data(), probs.value().data(), t, v);
  double loss = 0.0;
  for (std::size_t i = 0; i < t; ++i) {
    if (!mask[i]) continue;
    loss -= std::log(std::max(probs.value()[i * v + targets[i]], 1e-300));
  }
  Tensor out = Tensor::scalar(loss / static_cast<double>(count));
  maybe_record(out, tracked(logits), [logits = logits, out, probs, targets, mask, t, v, count]() mutable {
    if (!out.has_grad() || !logits.requires_grad()) return;
    logits.ensure_grad();
    const double g = out.grad()[0] / static_cast<double>(count);
    for (std::size_t i = 0; i < t; ++i) {
      if (!mask[i]) continue;
      for (std::size_t j = 0; j < v; ++j) {
        const double onehot = (j == targets[i]) ? 1.0 : 0.0;
        logits.grad()[i * v + j] += g * (probs.value()[i * v + j] - onehot);
      }
    }
  });
  return out;
}

Tensor dropout(const Tensor& x, double rate, Rng& rng) {
  if (rate < 0.0 || rate >= 1.0) throw invalid_argument("dropout: rate must be in [0,1)");
  if (rate == 0.0) return x;
  Tensor out = Tensor::zeros(x.shape());
  auto keep = std::make_shared<std::vector<double>>(x.numel());
  const double inv_keep = 1.0 / (1.0 - rate);
  for (std::size_t i = 0; i < x.numel(); ++i) {
    (*keep)[i] = rng.uniform() >= rate ? inv_keep : 0.0;
    out.value()[i] = x.value()[i] * (*keep)[i];
  }
  maybe_record(out, tracked(x), [x = x, out, keep]() mutable {
    if (!out.has_grad() || !x.requires_grad()) return;
    x.ensure_grad();
    for (std::size_t i = 0; i < x.numel(); ++i) x.grad()[i] += out.grad()[i] * (*keep)[i];
  });
  return out;
}

double l2_norm(std::span<const double> v) {
  double acc = 0.0;
  for (double x : v) acc += x * x;
  return std::sqrt(acc);
}

double cosine_sim(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) {
    throw invalid_argument("cosine_sim: length mismatch " + std::to_string(a.size()) +
                           " vs " + std::to_string(b.size()));
  }
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) {
    throw invalid_argument("cosine_sim: degenerate zero-norm vector");
  }
  return std::clamp(dot / std::sqrt(na * nb), -1.0, 1.0);
}

double grad_check(const std::function<Tensor()>& f, std::vector<Tensor> inputs, double h) {
  for (Tensor& in : inputs) {
    in.set_requires_grad(true);
    in.ensure_grad();
    in.zero_grad();
  }
  std::vector<std::vector<double>> analytic;
  {
    Tape tape;
    Tape::Scope scope(tape);
    Tensor loss = f();
    tape.backward(loss);
  }
  for (Tensor& in : inputs) analytic.push_back(in.grad());

  double max_rel = 0.0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    Tensor& in = inputs[k];
    for (std::size_t i = 0; i < in.numel(); ++i) {
      const double orig = in.value()[i];
      in.value()[i] = orig + h;
      const double f_plus = f().item();
      in.value()[i] = orig - h;
      const double f_minus = f().item();
      in.value()[i] = orig;
      const double numeric = (f_plus - f_minus) / (2.0 * h);
      const double a = analytic[k][i];
      const double rel =
          std::fabs(a - numeric) / std::max({std::fabs(a), std::fabs(numeric), 1e-4});
      max_rel = std::max(max_rel, rel);
    }
  }
  return max_rel;
}

}  // namespace kore
