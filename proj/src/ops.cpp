// SPDX-License-Identifier: Apache-2.0
#include "pamoe/ops.hpp"

#include <cmath>
#include <string>

namespace pamoe::ad {
namespace {

std::string dims(const Matrix& m) {
  return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + dims(a.value()) +
                     " vs " + dims(b.value()));
  }
}

Matrix softmax_rows_impl(const Matrix& z) {
  Matrix out(z.rows(), z.cols());
  for (Index i = 0; i < z.rows(); ++i) {
    const double m = z.row(i).maxCoeff();
    out.row(i) = (z.row(i).array() - m).exp().matrix();
    out.row(i) /= out.row(i).sum();
  }
  return out;
}

}  // namespace

Var add(const Var& a, const Var& b) {
  Graph& g = common_graph(a, b);
  require_same_shape(a, b, "add");
  return g.emit(a.value() + b.value(), {a, b},
                [a, b](Graph& g, const Matrix&, const Matrix& up) {
                  g.accumulate(a, up);
                  g.accumulate(b, up);
                });
}

Var sub(const Var& a, const Var& b) {
  Graph& g = common_graph(a, b);
  require_same_shape(a, b, "sub");
  return g.emit(a.value() - b.value(), {a, b},
                [a, b](Graph& g, const Matrix&, const Matrix& up) {
                  g.accumulate(a, up);
                  if (b.requires_grad()) g.accumulate(b, -up);
                });
}

Var mul(const Var& a, const Var& b) {
  Graph& g = common_graph(a, b);
  require_same_shape(a, b, "mul");
  return g.emit(a.value().cwiseProduct(b.value()), {a, b},
                [a, b](Graph& g, const Matrix&, const Matrix& up) {
                  if (a.requires_grad()) g.accumulate(a, up.cwiseProduct(b.value()));
                  if (b.requires_grad()) g.accumulate(b, up.cwiseProduct(a.value()));
                });
}

Var scale(const Var& a, double s) {
  return a.graph()->emit(a.value() * s, {a},
                         [a, s](Graph& g, const Matrix&, const Matrix& up) {
                           g.accumulate(a, up * s);
                         });
}

Var add_scalar(const Var& a, double s) {
  return a.graph()->emit((a.value().array() + s).matrix(), {a},
                         [a](Graph& g, const Matrix&, const Matrix& up) {
                           g.accumulate(a, up);
                         });
}

Var add_row(const Var& a, const Var& row) {
  Graph& g = common_graph(a, row);
  if (row.rows() != 1 || row.cols() != a.cols()) {
    throw ShapeError("add_row: expected 1x" + std::to_string(a.cols()) + " row, got " +
                     dims(row.value()));
  }
  Matrix out = a.value();
  out.rowwise() += row.value().row(0);
  return g.emit(std::move(out), {a, row},
                [a, row](Graph& g, const Matrix&, const Matrix& up) {
                  g.accumulate(a, up);
                  if (row.requires_grad()) g.accumulate(row, up.colwise().sum());
                });
}

Var mul_col(const Var& a, const Var& col) {
  Graph& g = common_graph(a, col);
  if (col.cols() != 1 || col.rows() != a.rows()) {
    throw ShapeError("mul_col: expected " + std::to_string(a.rows()) + "x1 column, got " +
                     dims(col.value()));
  }
  Matrix out = a.value().array().colwise() * col.value().col(0).array();
  return g.emit(std::move(out), {a, col},
                [a, col](Graph& g, const Matrix&, const Matrix& up) {
                  if (a.requires_grad()) {
                    Matrix ga = up.array().colwise() * col.value().col(0).array();
                    g.accumulate(a, ga);
                  }
                  if (col.requires_grad()) {
                    g.accumulate(col, up.cwiseProduct(a.value()).rowwise().sum());
                  }
                });
}

Var matmul(const Var& a, const Var& b) {
  Graph& g = common_graph(a, b);
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: inner dimensions differ, " + dims(a.value()) + " x " +
                     dims(b.value()));
  }
  Matrix out = a.value() * b.value();
  return g.emit(std::move(out), {a, b},
                [a, b](Graph& g, const Matrix&, const Matrix& up) {
                  if (a.requires_grad()) g.accumulate(a, up * b.value().transpose());
                  if (b.requires_grad()) g.accumulate(b, a.value().transpose() * up);
                });
}

Var sigmoid(const Var& a) {
  Matrix out = (1.0 / (1.0 + (-a.value().array()).exp())).matrix();
  return a.graph()->emit(std::move(out), {a},
                         [a](Graph& g, const Matrix& y, const Matrix& up) {
                           g.accumulate(a, (up.array() * y.array() * (1.0 - y.array())).matrix());
                         });
}

Var tanh(const Var& a) {
  Matrix out = a.value().array().tanh().matrix();
  return a.graph()->emit(std::move(out), {a},
                         [a](Graph& g, const Matrix& y, const Matrix& up) {
                           g.accumulate(a, (up.array() * (1.0 - y.array().square())).matrix());
                         });
}

Var relu(const Var& a) {
  Matrix out = a.value().cwiseMax(0.0);
  return a.graph()->emit(std::move(out), {a},
                         [a](Graph& g, const Matrix&, const Matrix& up) {
                           g.accumulate(a, (a.value().array() > 0.0).select(up, 0.0).matrix());
                         });
}

Var exp(const Var& a) {
  Matrix out = a.value().array().exp().matrix();
  return a.graph()->emit(std::move(out), {a},
                         [a](Graph& g, const Matrix& y, const Matrix& up) {
                           g.accumulate(a, up.cwiseProduct(y));
                         });
}

Var log(const Var& a, double floor) {
  Matrix out = a.value().cwiseMax(floor).array().log().matrix();
  return a.graph()->emit(std::move(out), {a},
                         [a, floor](Graph& g, const Matrix&, const Matrix& up) {
                           const auto& x = a.value().array();
                           g.accumulate(a, (x > floor).select(up.array() / x, 0.0).matrix());
                         });
}

Var square(const Var& a) {
  Matrix out = a.value().array().square().matrix();
  return a.graph()->emit(std::move(out), {a},
                         [a](Graph& g, const Matrix&, const Matrix& up) {
                           g.accumulate(a, 2.0 * up.cwiseProduct(a.value()));
                         });
}

Var sum(const Var& a) {
  Matrix out(1, 1);
  out(0, 0) = a.value().sum();
  return a.graph()->emit(std::move(out), {a},
                         [a](Graph& g, const Matrix&, const Matrix& up) {
                           g.accumulate(a, Matrix::Constant(a.rows(), a.cols(), up(0, 0)));
                         });
}

Var mean(const Var& a) {
  if (a.value().size() == 0) throw DomainError("mean of empty tensor");
  const double n = static_cast<double>(a.value().size());
  Matrix out(1, 1);
  out(0, 0) = a.value().sum() / n;
  return a.graph()->emit(std::move(out), {a},
                         [a, n](Graph& g, const Matrix&, const Matrix& up) {
                           g.accumulate(a, Matrix::Constant(a.rows(), a.cols(), up(0, 0) / n));
                         });
}

Var sum_cols(const Var& a) {
  Matrix out = a.value().rowwise().sum();
  return a.graph()->emit(std::move(out), {a},
                         [a](Graph& g, const Matrix&, const Matrix& up) {
                           Matrix ga = up.col(0).replicate(1, a.cols());
                           g.accumulate(a, ga);
                         });
}

Var softmax_temperature(const Var& logits, double tau) {
  if (!(tau > 0.0)) throw DomainError("softmax_temperature: tau must be positive");
  Matrix out = softmax_rows_impl(logits.value() / tau);
  return logits.graph()->emit(
      std::move(out), {logits},
      [logits, tau](Graph& g, const Matrix& s, const Matrix& up) {
        Vector dot = up.cwiseProduct(s).rowwise().sum();
        Matrix ga = (s.array() * (up.colwise() - dot).array()).matrix() / tau;
        g.accumulate(logits, ga);
      });
}

Var log_softmax(const Var& logits) {
  const Matrix& z = logits.value();
  Matrix out(z.rows(), z.cols());
  for (Index i = 0; i < z.rows(); ++i) {
    const double m = z.row(i).maxCoeff();
    const double lse = m + std::log((z.row(i).array() - m).exp().sum());
    out.row(i) = (z.row(i).array() - lse).matrix();
  }
  return logits.graph()->emit(std::move(out), {logits},
                              [logits](Graph& g, const Matrix& y, const Matrix& up) {
                                Vector total = up.rowwise().sum();
                                Matrix s = y.array().exp().matrix();
                                Matrix ga = up - (s.array().colwise() * total.array()).matrix();
                                g.accumulate(logits, ga);
                              });
}

Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const Index n = parts.front().rows();
  Index total = 0;
  for (const Var& p : parts) {
    common_graph(parts.front(), p);
    if (p.rows() != n) throw ShapeError("concat_cols: row counts differ");
    total += p.cols();
  }
  Matrix out(n, total);
  Index offset = 0;
  for (const Var& p : parts) {
    out.middleCols(offset, p.cols()) = p.value();
    offset += p.cols();
  }
  return parts.front().graph()->emit(std::move(out), parts,
                                     [parts](Graph& g, const Matrix&, const Matrix& up) {
                                       Index off = 0;
                                       for (const Var& p : parts) {
                                         if (p.requires_grad()) {
                                           g.accumulate(p, up.middleCols(off, p.cols()));
                                         }
                                         off += p.cols();
                                       }
                                     });
}

Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  const Index m = parts.front().cols();
  Index total = 0;
  for (const Var& p : parts) {
    common_graph(parts.front(), p);
    if (p.cols() != m) throw ShapeError("concat_rows: column counts differ");
    total += p.rows();
  }
  Matrix out(total, m);
  Index offset = 0;
  for (const Var& p : parts) {
    out.middleRows(offset, p.rows()) = p.value();
    offset += p.rows();
  }
  return parts.front().graph()->emit(std::move(out), parts,
                                     [parts](Graph& g, const Matrix&, const Matrix& up) {
                                       Index off = 0;
                                       for (const Var& p : parts) {
                                         if (p.requires_grad()) {
                                           g.accumulate(p, up.middleRows(off, p.rows()));
                                         }
                                         off += p.rows();
                                       }
                                     });
}

Var slice_cols(const Var& a, Index start, Index count) {
  if (start < 0 || count < 0 || start + count > a.cols()) {
    throw ShapeError("slice_cols: range out of bounds");
  }
  return a.graph()->emit(a.value().middleCols(start, count), {a},
                         [a, start, count](Graph& g, const Matrix&, const Matrix& up) {
                           Matrix ga = Matrix::Zero(a.rows(), a.cols());
                           ga.middleCols(start, count) = up;
                           g.accumulate(a, ga);
                         });
}

Var gather_rows(const Var& a, std::span<const Index> rows) {
  std::vector<Index> idx(rows.begin(), rows.end());
  Matrix out(static_cast<Index>(idx.size()), a.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= a.rows()) throw ShapeError("gather_rows: index out of range");
    out.row(static_cast<Index>(i)) = a.value().row(idx[i]);
  }
  return a.graph()->emit(std::move(out), {a},
                         [a, idx](Graph& g, const Matrix&, const Matrix& up) {
                           Matrix ga = Matrix::Zero(a.rows(), a.cols());
                           for (std::size_t i = 0; i < idx.size(); ++i) {
                             ga.row(idx[i]) += up.row(static_cast<Index>(i));
                           }
                           g.accumulate(a, ga);
                         });
}

Var scatter_rows(const Var& a, std::span<const Index> rows, Index out_rows) {
  if (static_cast<Index>(rows.size()) != a.rows()) {
    throw ShapeError("scatter_rows: one target row per input row required");
  }
  std::vector<Index> idx(rows.begin(), rows.end());
  Matrix out = Matrix::Zero(out_rows, a.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= out_rows) throw ShapeError("scatter_rows: index out of range");
    out.row(idx[i]) += a.value().row(static_cast<Index>(i));
  }
  return a.graph()->emit(std::move(out), {a},
                         [a, idx](Graph& g, const Matrix&, const Matrix& up) {
                           Matrix ga(a.rows(), a.cols());
                           for (std::size_t i = 0; i < idx.size(); ++i) {
                             ga.row(static_cast<Index>(i)) = up.row(idx[i]);
                           }
                           g.accumulate(a, ga);
                         });
}

Var pick(const Var& a, std::span<const Index> cols) {
  if (static_cast<Index>(cols.size()) != a.rows()) {
    throw ShapeError("pick: one column index per row required");
  }
  std::vector<Index> idx(cols.begin(), cols.end());
  Matrix out(a.rows(), 1);
  for (Index i = 0; i < a.rows(); ++i) {
    if (idx[i] < 0 || idx[i] >= a.cols()) throw ShapeError("pick: index out of range");
    out(i, 0) = a.value()(i, idx[i]);
  }
  return a.graph()->emit(std::move(out), {a},
                         [a, idx](Graph& g, const Matrix&, const Matrix& up) {
                           Matrix ga = Matrix::Zero(a.rows(), a.cols());
                           for (Index i = 0; i < a.rows(); ++i) ga(i, idx[i]) = up(i, 0);
                           g.accumulate(a, ga);
                         });
}

Var embed_sum(const Var& table, const std::vector<std::vector<int>>& codes) {
  const Matrix& t = table.value();
  Matrix out = Matrix::Zero(static_cast<Index>(codes.size()), t.cols());
  for (std::size_t i = 0; i < codes.size(); ++i) {
    for (int c : codes[i]) {
      if (c < 0 || c >= t.rows()) throw ShapeError("embed_sum: code out of range");
      out.row(static_cast<Index>(i)) += t.row(c);
    }
  }
  return table.graph()->emit(std::move(out), {table},
                             [table, codes](Graph& g, const Matrix&, const Matrix& up) {
                               Matrix gt = Matrix::Zero(table.rows(), table.cols());
                               for (std::size_t i = 0; i < codes.size(); ++i) {
                                 for (int c : codes[i]) gt.row(c) += up.row(static_cast<Index>(i));
                               }
                               g.accumulate(table, gt);
                             });
}

Var mean_pool(const Var& xs) {
  if (xs.rows() == 0) throw DomainError("mean_pool: empty sequence");
  const double n = static_cast<double>(xs.rows());
  Matrix out = xs.value().colwise().sum() / n;
  return xs.graph()->emit(std::move(out), {xs},
                          [xs, n](Graph& g, const Matrix&, const Matrix& up) {
                            g.accumulate(xs, up.replicate(xs.rows(), 1) / n);
                          });
}

Var segment_mean(const Var& a, Index segment) {
  if (segment <= 0 || a.rows() % segment != 0) {
    throw ShapeError("segment_mean: rows not divisible by segment");
  }
  const Index blocks = a.rows() / segment;
  Matrix out(blocks, a.cols());
  for (Index b = 0; b < blocks; ++b) {
    out.row(b) = a.value().middleRows(b * segment, segment).colwise().mean();
  }
  return a.graph()->emit(std::move(out), {a},
                         [a, segment, blocks](Graph& g, const Matrix&, const Matrix& up) {
                           Matrix ga(a.rows(), a.cols());
                           const double inv = 1.0 / static_cast<double>(segment);
                           for (Index b = 0; b < blocks; ++b) {
                             ga.middleRows(b * segment, segment) =
                                 (up.row(b) * inv).replicate(segment, 1);
                           }
                           g.accumulate(a, ga);
                         });
}

Var layer_norm(const Var& a, double eps) {
  const Matrix& x = a.value();
  const Index n = x.rows();
  const Index m = x.cols();
  Matrix y(n, m);
  Vector inv_std(n);
  for (Index i = 0; i < n; ++i) {
    const double mu = x.row(i).mean();
    const double var = (x.row(i).array() - mu).square().mean();
    inv_std(i) = 1.0 / std::sqrt(var + eps);
    y.row(i) = ((x.row(i).array() - mu) * inv_std(i)).matrix();
  }
  return a.graph()->emit(std::move(y), {a},
                         [a, inv_std](Graph& g, const Matrix& y, const Matrix& up) {
                           Matrix ga(y.rows(), y.cols());
                           for (Index i = 0; i < y.rows(); ++i) {
                             const double mg = up.row(i).mean();
                             const double mgy = up.row(i).cwiseProduct(y.row(i)).mean();
                             ga.row(i) = (inv_std(i) *
                                          (up.row(i).array() - mg - y.row(i).array() * mgy))
                                             .matrix();
                           }
                           g.accumulate(a, ga);
                         });
}

Var block_attention(const Var& q, const Var& k, const Var& v, Index segment) {
  Graph& g = common_graph(q, k);
  common_graph(q, v);
  require_same_shape(q, k, "block_attention");
  if (v.rows() != q.rows()) throw ShapeError("block_attention: value rows differ");
  if (segment <= 0 || q.rows() % segment != 0) {
    throw ShapeError("block_attention: rows not divisible by segment");
  }
  const Index blocks = q.rows() / segment;
  const double scale_factor = 1.0 / std::sqrt(static_cast<double>(q.cols()));
  Matrix out(q.rows(), v.cols());
  std::vector<Matrix> weights(static_cast<std::size_t>(blocks));
  for (Index b = 0; b < blocks; ++b) {
    const auto qb = q.value().middleRows(b * segment, segment);
    const auto kb = k.value().middleRows(b * segment, segment);
    const auto vb = v.value().middleRows(b * segment, segment);
    Matrix w = softmax_rows_impl((qb * kb.transpose()) * scale_factor);
    out.middleRows(b * segment, segment) = w * vb;
    weights[static_cast<std::size_t>(b)] = std::move(w);
  }
  return g.emit(
      std::move(out), {q, k, v},
      [q, k, v, segment, blocks, scale_factor, weights = std::move(weights)](
          Graph& g, const Matrix&, const Matrix& up) {
        Matrix gq = Matrix::Zero(q.rows(), q.cols());
        Matrix gk = Matrix::Zero(k.rows(), k.cols());
        Matrix gv = Matrix::Zero(v.rows(), v.cols());
        for (Index b = 0; b < blocks; ++b) {
          const Matrix& w = weights[static_cast<std::size_t>(b)];
          const auto ub = up.middleRows(b * segment, segment);
          const auto qb = q.value().middleRows(b * segment, segment);
          const auto kb = k.value().middleRows(b * segment, segment);
          const auto vb = v.value().middleRows(b * segment, segment);
          gv.middleRows(b * segment, segment) = w.transpose() * ub;
          Matrix gw = ub * vb.transpose();
          Vector dot = gw.cwiseProduct(w).rowwise().sum();
          Matrix gs = (w.array() * (gw.colwise() - dot).array()).matrix() * scale_factor;
          gq.middleRows(b * segment, segment) = gs * kb;
          gk.middleRows(b * segment, segment) = gs.transpose() * qb;
        }
        if (q.requires_grad()) g.accumulate(q, gq);
        if (k.requires_grad()) g.accumulate(k, gk);
        if (v.requires_grad()) g.accumulate(v, gv);
      });
}

Var cross_attention(const Var& q, const std::vector<Var>& keys,
                    const std::vector<Var>& values) {
  if (keys.empty() || keys.size() != values.size()) {
    throw ShapeError("cross_attention: need matching nonempty key/value lists");
  }
  Graph& g = *q.graph();
  const Index n = q.rows();
  const Index d = q.cols();
  for (std::size_t j = 0; j < keys.size(); ++j) {
    common_graph(q, keys[j]);
    common_graph(q, values[j]);
    if (keys[j].rows() != n || keys[j].cols() != d || values[j].rows() != n) {
      throw ShapeError("cross_attention: key/value width or count mismatch");
    }
  }
  const Index s = static_cast<Index>(keys.size());
  const Index dv = values.front().cols();
  const double scale_factor = 1.0 / std::sqrt(static_cast<double>(d));
  Matrix scores(n, s);
  for (Index j = 0; j < s; ++j) {
    scores.col(j) = q.value().cwiseProduct(keys[static_cast<std::size_t>(j)].value())
                        .rowwise().sum() * scale_factor;
  }
  Matrix w = softmax_rows_impl(scores);
  Matrix out = Matrix::Zero(n, dv);
  for (Index j = 0; j < s; ++j) {
    const Matrix& vj = values[static_cast<std::size_t>(j)].value();
    if (vj.cols() != dv) throw ShapeError("cross_attention: value widths differ");
    out += (vj.array().colwise() * w.col(j).array()).matrix();
  }
  std::vector<Var> inputs{q};
  inputs.insert(inputs.end(), keys.begin(), keys.end());
  inputs.insert(inputs.end(), values.begin(), values.end());
  return g.emit(
      std::move(out), inputs,
      [q, keys, values, w, s, scale_factor](Graph& g, const Matrix&, const Matrix& up) {
        const Index n = q.rows();
        Matrix gw(n, s);
        for (Index j = 0; j < s; ++j) {
          const auto& vj = values[static_cast<std::size_t>(j)];
          gw.col(j) = up.cwiseProduct(vj.value()).rowwise().sum();
          if (vj.requires_grad()) {
            g.accumulate(vj, (up.array().colwise() * w.col(j).array()).matrix());
          }
        }
        Vector dot = gw.cwiseProduct(w).rowwise().sum();
        Matrix gs = (w.array() * (gw.colwise() - dot).array()).matrix() * scale_factor;
        Matrix gq = Matrix::Zero(q.rows(), q.cols());
        for (Index j = 0; j < s; ++j) {
          const auto& kj = keys[static_cast<std::size_t>(j)];
          gq += (kj.value().array().colwise() * gs.col(j).array()).matrix();
          if (kj.requires_grad()) {
            g.accumulate(kj, (q.value().array().colwise() * gs.col(j).array()).matrix());
          }
        }
        if (q.requires_grad()) g.accumulate(q, gq);
      });
}

Var cross_attention(const Var& q, const Var& k, const Var& v) {
  return cross_attention(q, std::vector<Var>{k}, std::vector<Var>{v});
}

LstmState lstm_step(const Var& x, const LstmState& state, const LstmParams& params) {
  const Index hidden = state.h.cols();
  if (state.c.cols() != hidden || x.rows() != state.h.rows()) {
    throw ShapeError("lstm_step: state shape mismatch");
  }
  if (params.weight.rows() != x.cols() + hidden || params.weight.cols() != 4 * hidden ||
      params.bias.cols() != 4 * hidden) {
    throw ShapeError("lstm_step: parameter widths do not match input/hidden");
  }
  Var gates = add_row(matmul(concat_cols({x, state.h}), params.weight), params.bias);
  Var input_gate = sigmoid(slice_cols(gates, 0, hidden));
  Var forget_gate = sigmoid(slice_cols(gates, hidden, hidden));
  Var candidate = tanh(slice_cols(gates, 2 * hidden, hidden));
  Var output_gate = sigmoid(slice_cols(gates, 3 * hidden, hidden));
  Var c = add(mul(forget_gate, state.c), mul(input_gate, candidate));
  Var h = mul(output_gate, tanh(c));
  return {h, c};
}

constexpr double kFloor = 1e-12;

Var kl_divergence_rows(const Var& p, const Var& q) {
  Graph& g = common_graph(p, q);
  require_same_shape(p, q, "kl_divergence_rows");
  const Matrix& pv = p.value();
  const Matrix qf = q.value().cwiseMax(kFloor);
  Matrix out(pv.rows(), 1);
  for (Index i = 0; i < pv.rows(); ++i) {
    double acc = 0.0;
    for (Index j = 0; j < pv.cols(); ++j) {
      const double pij = pv(i, j);
      if (pij > 0.0) acc += pij * (std::log(pij) - std::log(qf(i, j)));
    }
    out(i, 0) = acc;
  }
  return g.emit(std::move(out), {p, q},
                [p, q, qf](Graph& g, const Matrix&, const Matrix& up) {
                  const Matrix& pv = p.value();
                  if (p.requires_grad()) {
                    Matrix gp(pv.rows(), pv.cols());
                    for (Index i = 0; i < pv.rows(); ++i) {
                      for (Index j = 0; j < pv.cols(); ++j) {
                        const double pij = std::max(pv(i, j), kFloor);
                        gp(i, j) = up(i, 0) * (std::log(pij) - std::log(qf(i, j)) + 1.0);
                      }
                    }
                    g.accumulate(p, gp);
                  }
                  if (q.requires_grad()) {
                    Matrix gq(pv.rows(), pv.cols());
                    for (Index i = 0; i < pv.rows(); ++i) {
                      for (Index j = 0; j < pv.cols(); ++j) {
                        gq(i, j) = q.value()(i, j) > kFloor ? -up(i, 0) * pv(i, j) / qf(i, j)
                                                            : 0.0;
                      }
                    }
                    g.accumulate(q, gq);
                  }
                });
}

Var straight_through(const Var& p, std::span<const Index> selected) {
  if (static_cast<Index>(selected.size()) != p.rows()) {
    throw ShapeError("straight_through: one selection per row required");
  }
  std::vector<Index> idx(selected.begin(), selected.end());
  for (Index z : idx) {
    if (z < 0 || z >= p.cols()) throw ShapeError("straight_through: index out of range");
  }
  return p.graph()->emit(Matrix::Ones(p.rows(), 1), {p},
                         [p, idx](Graph& g, const Matrix&, const Matrix& up) {
                           Matrix gp = Matrix::Zero(p.rows(), p.cols());
                           for (Index i = 0; i < p.rows(); ++i) gp(i, idx[i]) = up(i, 0);
                           g.accumulate(p, gp);
                         });
}

Var detach(const Var& a) { return a.graph()->constant(a.value()); }

double kl_divergence(const Vector& p, const Vector& q) {
  if (p.size() != q.size()) throw ShapeError("kl_divergence: length mismatch");
  constexpr double kTol = 1e-9;
  if ((p.array() < 0.0).any() || (q.array() < 0.0).any() ||
      std::abs(p.sum() - 1.0) > kTol || std::abs(q.sum() - 1.0) > kTol) {
    throw DomainError("kl_divergence: inputs must be probability vectors");
  }
  double acc = 0.0;
  for (Index j = 0; j < p.size(); ++j) {
    if (p(j) > 0.0) acc += p(j) * (std::log(p(j)) - std::log(std::max(q(j), 1e-12)));
  }
  return acc;
}

Matrix softmax_rows(const Matrix& logits, double tau) {
  if (!(tau > 0.0)) throw DomainError("softmax_rows: tau must be positive");
  return softmax_rows_impl(logits / tau);
}

}  // namespace pamoe::ad
