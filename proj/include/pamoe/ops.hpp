// SPDX-License-Identifier: Apache-2.0
//
// Differentiable ops on Var. Batched ops treat each row as one sample.
#pragma once

#include <span>
#include <vector>

#include "pamoe/autodiff.hpp"

namespace pamoe::ad {

// Elementwise arithmetic (identical shapes).
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);

/// a (n x m) + row (1 x m) broadcast over rows.
Var add_row(const Var& a, const Var& row);
/// a (n x m) with row i multiplied by col(i) (col is n x 1).
Var mul_col(const Var& a, const Var& col);

Var matmul(const Var& a, const Var& b);

Var sigmoid(const Var& a);
Var tanh(const Var& a);
Var relu(const Var& a);
Var exp(const Var& a);
/// log(max(a, floor)); gradient is zero where the floor is active.
Var log(const Var& a, double floor = 1e-12);
Var square(const Var& a);

Var sum(const Var& a);
Var mean(const Var& a);
/// Per-row sum, n x 1.
Var sum_cols(const Var& a);

/// Row-wise softmax(a / tau), max-subtracted. Throws DomainError for tau <= 0.
Var softmax_temperature(const Var& logits, double tau);
Var log_softmax(const Var& logits);

Var concat_cols(const std::vector<Var>& parts);
Var concat_rows(const std::vector<Var>& parts);
Var slice_cols(const Var& a, Index start, Index count);
Var gather_rows(const Var& a, std::span<const Index> rows);
/// Places row i of `a` at row rows[i] of an (out_rows x cols) zero matrix.
Var scatter_rows(const Var& a, std::span<const Index> rows, Index out_rows);
/// Element a(i, cols[i]) for every row, n x 1.
Var pick(const Var& a, std::span<const Index> cols);

/// Row i is the sum of table rows codes[i] (an embedding bag).
Var embed_sum(const Var& table, const std::vector<std::vector<int>>& codes);

/// Column means over all rows (1 x m). Throws DomainError on zero rows.
Var mean_pool(const Var& xs);
/// Mean over consecutive blocks of `segment` rows, (n/segment) x m.
Var segment_mean(const Var& a, Index segment);

/// Per-row layer normalization without affine parameters.
Var layer_norm(const Var& a, double eps = 1e-5);

/// Scaled dot-product self-attention applied independently to consecutive
/// blocks of `segment` rows (one block per sample).
Var block_attention(const Var& q, const Var& k, const Var& v, Index segment);

/// Scaled dot-product attention of each query row over S key/value rows
/// (keys[j] and values[j] are n x d; row i of each belongs to query i).
Var cross_attention(const Var& q, const std::vector<Var>& keys,
                    const std::vector<Var>& values);
/// Single key/value pair per query; the output equals v.
Var cross_attention(const Var& q, const Var& k, const Var& v);

struct LstmParams {
  Var weight;  // (input + hidden) x 4*hidden, gate order i, f, g, o
  Var bias;    // 1 x 4*hidden
};

struct LstmState {
  Var h;  // n x hidden
  Var c;  // n x hidden
};

/// One gated LSTM update for a batch of rows.
LstmState lstm_step(const Var& x, const LstmState& state, const LstmParams& params);

/// Row-wise KL(p || q) with q floored at 1e-12 before the log, n x 1.
Var kl_divergence_rows(const Var& p, const Var& q);

/// Forward value 1 per row; backward routes the upstream gradient into
/// p(i, selected[i]) so the hard selection trains the soft distribution.
Var straight_through(const Var& p, std::span<const Index> selected);

/// Stops gradient flow.
Var detach(const Var& a);

// Plain-value helpers (no graph).

double kl_divergence(const Vector& p, const Vector& q);
Matrix softmax_rows(const Matrix& logits, double tau = 1.0);

}  // namespace pamoe::ad
