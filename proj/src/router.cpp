// SPDX-License-Identifier: Apache-2.0
#include "pamoe/router.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "pamoe/ops.hpp"

namespace pamoe {
namespace {

using ad::Graph;
using ad::Index;
using ad::Matrix;
using ad::Tensor;
using ad::Var;

Matrix gaussian(Index rows, Index cols, double std_dev, Rng& rng) {
  std::normal_distribution<double> dist(0.0, std_dev);
  Matrix m(rows, cols);
  for (Index j = 0; j < cols; ++j) {
    for (Index i = 0; i < rows; ++i) m(i, j) = dist(rng);
  }
  return m;
}

double fan_in(Index n) { return 1.0 / std::sqrt(static_cast<double>(n)); }

Matrix standardize(const Matrix& x, const Tensor& shift, const Tensor& scale) {
  return ((x.rowwise() - shift.value.row(0)).array().rowwise() / scale.value.row(0).array()).matrix();
}

void fit(const Matrix& rows, Tensor& shift, Tensor& scale) {
  if (rows.rows() == 0) return;
  const ad::RowVector mean = rows.colwise().mean();
  const ad::RowVector var = (rows.rowwise() - mean).array().square().colwise().mean();
  shift.value = mean;
  scale.value = (var.array() + 1e-6).sqrt().matrix();
}

}  // namespace

double anneal_temperature(const AnnealSchedule& s, double t) {
  if (t < 0.0) throw DomainError("anneal_temperature: negative step");
  if (s.anneal_steps <= 0.0) return s.tauf;
  return std::max(s.tauf, s.tau0 - (s.tau0 - s.tauf) * t / s.anneal_steps);
}

RouterParams::RouterParams(RouterConfig config, int d_model, int num_actions, std::uint64_t seed)
    : config_(config), d_model_(d_model), num_actions_(num_actions) {
  if (config_.num_experts < 1) throw ConfigError("router needs K >= 1");
  if (config_.history < 1) throw ConfigError("router history window must be >= 1");
  if (config_.lstm_layers < 1) throw ConfigError("router needs at least one LSTM layer");
  const Index d = d_model;
  const Index h = config_.hidden;
  const Index ae = config_.action_embedding;
  Rng rng = make_rng(seed, "router-init");
  for (auto [t, name] : {std::pair{&obs_shift, "obs"}, {&goal_shift, "goal"}, {&hist_shift, "hist"}}) {
    *t = Tensor(std::string("router.") + name + "_shift", Matrix::Zero(1, d), false);
  }
  for (auto [t, name] : {std::pair{&obs_scale, "obs"}, {&goal_scale, "goal"}, {&hist_scale, "hist"}}) {
    *t = Tensor(std::string("router.") + name + "_scale", Matrix::Ones(1, d), false);
  }
  attn_q = Tensor("router.attn_q", gaussian(d, h, fan_in(d), rng), true);
  attn_k = Tensor("router.attn_k", gaussian(d, h, fan_in(d), rng), true);
  attn_v = Tensor("router.attn_v", gaussian(d, h, fan_in(d), rng), true);
  action_table = Tensor("router.action_table", gaussian(num_actions, ae, 0.5, rng), true);
  null_entry = Tensor("router.null_entry", gaussian(1, ae + d, 0.5, rng), true);
  for (int l = 0; l < config_.lstm_layers; ++l) {
    const Index in = (l == 0 ? ae + d : h) + h;
    Matrix bias = Matrix::Zero(1, 4 * h);
    bias.middleCols(h, h).setOnes();  // forget gate
    lstm_weight.emplace_back("router.lstm" + std::to_string(l) + ".weight",
                             gaussian(in, 4 * h, fan_in(in), rng), true);
    lstm_bias.emplace_back("router.lstm" + std::to_string(l) + ".bias", bias, true);
  }
  mlp_w1 = Tensor("router.mlp_w1", gaussian(2 * h, config_.mlp_hidden, fan_in(2 * h), rng), true);
  mlp_b1 = Tensor("router.mlp_b1", Matrix::Zero(1, config_.mlp_hidden), true);
  mlp_w2 = Tensor("router.mlp_w2",
                  gaussian(config_.mlp_hidden, config_.num_experts, fan_in(config_.mlp_hidden), rng),
                  true);
  mlp_b2 = Tensor("router.mlp_b2", Matrix::Zero(1, config_.num_experts), true);
}

std::vector<Tensor*> RouterParams::parameters() {
  std::vector<Tensor*> out{&attn_q, &attn_k, &attn_v, &action_table, &null_entry};
  for (std::size_t l = 0; l < lstm_weight.size(); ++l) {
    out.push_back(&lstm_weight[l]);
    out.push_back(&lstm_bias[l]);
  }
  for (Tensor* t : {&mlp_w1, &mlp_b1, &mlp_w2, &mlp_b2}) out.push_back(t);
  return out;
}

void RouterParams::fit_input_statistics(const Matrix& obs, const Matrix& goals, const Matrix& history) {
  fit(obs, obs_shift, obs_scale);
  fit(goals, goal_shift, goal_scale);
  fit(history, hist_shift, hist_scale);
}

RouterBatch make_router_batch(const RouterParams& params, Index rows, int goal_tokens) {
  const Index d = params.d_model();
  const int window = params.config().history;
  RouterBatch b;
  b.obs_encoding = Matrix::Zero(rows, d);
  b.goal_encodings.assign(static_cast<std::size_t>(goal_tokens), Matrix::Zero(rows, d));
  b.history_actions = Eigen::MatrixXi::Constant(rows, window, -1);
  b.history_obs.assign(static_cast<std::size_t>(window), Matrix::Zero(rows, d));
  return b;
}

Var router_logits(Graph& g, RouterParams& params, const RouterBatch& batch) {
  const RouterConfig& cfg = params.config();
  const Index n = batch.obs_encoding.rows();
  const Index h = cfg.hidden;

  Var obs = g.constant(standardize(batch.obs_encoding, params.obs_shift, params.obs_scale));
  Var q = ad::matmul(obs, g.param(params.attn_q));
  Var aligned = q;
  if (cfg.use_goal_attention && !batch.goal_encodings.empty()) {
    std::vector<Var> keys;
    std::vector<Var> values;
    for (const Matrix& ge : batch.goal_encodings) {
      Var e = g.constant(standardize(ge, params.goal_shift, params.goal_scale));
      keys.push_back(ad::matmul(e, g.param(params.attn_k)));
      values.push_back(ad::matmul(e, g.param(params.attn_v)));
    }
    aligned = ad::add(q, ad::cross_attention(q, keys, values));
  }

  Var encoded;
  if (cfg.use_history) {
    if (batch.history_actions.cols() != cfg.history ||
        static_cast<int>(batch.history_obs.size()) != cfg.history) {
      throw ShapeError("router_logits: history window mismatch");
    }
    std::vector<ad::LstmParams> layers;
    std::vector<ad::LstmState> states;
    for (int l = 0; l < cfg.lstm_layers; ++l) {
      layers.push_back({g.param(params.lstm_weight[static_cast<std::size_t>(l)]),
                        g.param(params.lstm_bias[static_cast<std::size_t>(l)])});
      states.push_back({g.constant(Matrix::Zero(n, h)), g.constant(Matrix::Zero(n, h))});
    }
    Var table = g.param(params.action_table);
    Var null_entry = g.param(params.null_entry);
    for (int slot = 0; slot < cfg.history; ++slot) {
      std::vector<std::vector<int>> codes(static_cast<std::size_t>(n));
      Matrix null_mask = Matrix::Zero(n, 1);
      Matrix obs_part = standardize(batch.history_obs[static_cast<std::size_t>(slot)],
                                    params.hist_shift, params.hist_scale);
      for (Index i = 0; i < n; ++i) {
        const int a = batch.history_actions(i, slot);
        if (a < 0) {
          null_mask(i, 0) = 1.0;
          obs_part.row(i).setZero();
        } else {
          codes[static_cast<std::size_t>(i)] = {a};
        }
      }
      Var entry = ad::concat_cols({ad::embed_sum(table, codes), g.constant(obs_part)});
      if (null_mask.any()) entry = ad::add(entry, ad::matmul(g.constant(null_mask), null_entry));
      Var x = entry;
      for (int l = 0; l < cfg.lstm_layers; ++l) {
        states[static_cast<std::size_t>(l)] =
            ad::lstm_step(x, states[static_cast<std::size_t>(l)], layers[static_cast<std::size_t>(l)]);
        x = states[static_cast<std::size_t>(l)].h;
      }
    }
    encoded = states.back().h;
  } else {
    encoded = g.constant(Matrix::Zero(n, h));
  }

  Var hidden = ad::relu(ad::add_row(ad::matmul(ad::concat_cols({aligned, encoded}), g.param(params.mlp_w1)),
                                    g.param(params.mlp_b1)));
  return ad::add_row(ad::matmul(hidden, g.param(params.mlp_w2)), g.param(params.mlp_b2));
}

Index argmax_lowest(const Eigen::Ref<const ad::RowVector>& p) {
  Index best = 0;
  for (Index k = 1; k < p.size(); ++k) {
    if (p(k) > p(best)) best = k;
  }
  return best;
}

void RouterState::reset(int window) {
  if (window < 1) throw UsageError("RouterState: window must be >= 1");
  window_ = window;
  entries_.clear();
}

void RouterState::push(int action, const ad::Vector& obs_embedding) {
  if (!initialized()) throw UsageError("RouterState used before reset()");
  entries_.push_back({action, obs_embedding});
  while (static_cast<int>(entries_.size()) > window_) entries_.pop_front();
}

void RouterState::fill(RouterBatch& batch, Index row) const {
  if (!initialized()) throw UsageError("RouterState used before reset()");
  const int pad = window_ - static_cast<int>(entries_.size());
  for (int slot = 0; slot < window_; ++slot) {
    if (slot < pad) {
      batch.history_actions(row, slot) = -1;
      batch.history_obs[static_cast<std::size_t>(slot)].row(row).setZero();
    } else {
      const Entry& e = entries_[static_cast<std::size_t>(slot - pad)];
      batch.history_actions(row, slot) = e.action;
      batch.history_obs[static_cast<std::size_t>(slot)].row(row) = e.obs_embedding.transpose();
    }
  }
}

std::vector<RouterOutput> route_batch(RouterParams& params, const RouterBatch& batch, double tau) {
  if (!(tau > 0.0)) throw DomainError("route: tau must be positive");
  Graph g(false);
  const Matrix p = ad::softmax_rows(router_logits(g, params, batch).value(), tau);
  std::vector<RouterOutput> out(static_cast<std::size_t>(p.rows()));
  for (Index i = 0; i < p.rows(); ++i) {
    auto& o = out[static_cast<std::size_t>(i)];
    o.p = p.row(i).transpose();
    o.z = static_cast<int>(argmax_lowest(p.row(i)));
    o.tau_used = tau;
  }
  return out;
}

RouterOutput route(RouterParams& params, const RouterState& state, const ad::Vector& obs_encoding,
                   const std::vector<ad::Vector>& goal_encodings, double tau) {
  if (!state.initialized()) throw UsageError("route: router state was not reset");
  if (state.window() != params.config().history) throw UsageError("route: window mismatch");
  RouterBatch batch = make_router_batch(params, 1, static_cast<int>(goal_encodings.size()));
  batch.obs_encoding.row(0) = obs_encoding.transpose();
  for (std::size_t j = 0; j < goal_encodings.size(); ++j) {
    batch.goal_encodings[j].row(0) = goal_encodings[j].transpose();
  }
  state.fill(batch, 0);
  return route_batch(params, batch, tau).front();
}

Var switching_penalty(const Var& p, std::span<const Index> z, double lambda_s) {
  const Index T = p.rows();
  if (T == 0 || z.empty()) throw DomainError("switching_penalty: empty trajectory");
  if (static_cast<Index>(z.size()) != T) throw ShapeError("switching_penalty: z/p length mismatch");
  Graph& g = *p.graph();
  if (T == 1) return g.constant(Matrix::Zero(1, 1));
  const double c = lambda_s / static_cast<double>(T - 1);
  int switches = 0;
  for (Index t = 0; t + 1 < T; ++t) switches += z[static_cast<std::size_t>(t)] != z[static_cast<std::size_t>(t + 1)];
  Matrix out(1, 1);
  out(0, 0) = c * switches;
  return g.emit(std::move(out), {p}, [p, c, T](Graph& g, const Matrix&, const Matrix& up) {
    Matrix gp = Matrix::Zero(T, p.cols());
    gp.topRows(T - 1) = -(c * up(0, 0)) * p.value().bottomRows(T - 1);
    g.accumulate(p, gp);
  });
}

double switching_penalty_value(std::span<const int> z, double lambda_s) {
  if (z.empty()) throw DomainError("switching_penalty: empty trajectory");
  if (z.size() == 1) return 0.0;
  return lambda_s / static_cast<double>(z.size() - 1) * count_switches(z);
}

Selection straight_through_select(const ad::Vector& p) {
  Selection s;
  s.z = argmax_lowest(p.transpose());
  s.grad_path = ad::Vector::Zero(p.size());
  s.grad_path(s.z) = 1.0;
  return s;
}

int count_switches(std::span<const int> z) {
  int n = 0;
  for (std::size_t t = 1; t < z.size(); ++t) n += z[t] != z[t - 1];
  return n;
}

}  // namespace pamoe
