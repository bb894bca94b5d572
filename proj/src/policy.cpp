// SPDX-License-Identifier: Apache-2.0
#include "pamoe/policy.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "pamoe/ops.hpp"
#include "pamoe/optim.hpp"

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

Tensor make(std::string name, Matrix init) { return Tensor(std::move(name), std::move(init), true); }

Var project(Graph& g, const Var& x, Tensor& w, LoraPair* lora) {
  Var out = ad::matmul(x, g.param(w));
  if (lora != nullptr) {
    out = ad::add(out, ad::matmul(ad::matmul(x, g.param(lora->b)), g.param(lora->a)));
  }
  return out;
}

}  // namespace

std::vector<Tensor*> Backbone::parameters() {
  std::vector<Tensor*> out{&embedding, &slot};
  for (auto& b : blocks) {
    for (Tensor* t : {&b.q_proj, &b.k_proj, &b.v_proj, &b.o_proj, &b.ffn_in, &b.ffn_in_bias,
                      &b.ffn_out, &b.ffn_out_bias}) {
      out.push_back(t);
    }
  }
  out.push_back(&head);
  out.push_back(&head_bias);
  return out;
}

void Backbone::set_trainable(bool trainable) {
  for (Tensor* t : parameters()) t->requires_grad = trainable;
}

std::vector<Tensor*> LoraExpert::parameters() {
  std::vector<Tensor*> out;
  for (std::size_t b = 0; b < q.size(); ++b) {
    out.push_back(&q[b].b);
    out.push_back(&q[b].a);
    out.push_back(&v[b].b);
    out.push_back(&v[b].a);
  }
  return out;
}

std::vector<Tensor*> ValueHead::parameters() { return {&w1, &b1, &w2, &b2}; }

void TokenBatch::append(const Observation& obs, const Goal& goal) {
  const int per = static_cast<int>(obs.tokens.size() + goal.tokens.size());
  if (tokens_per_sample == 0) tokens_per_sample = per;
  if (per != tokens_per_sample) throw ShapeError("TokenBatch: inconsistent token count");
  tokens.insert(tokens.end(), obs.tokens.begin(), obs.tokens.end());
  tokens.insert(tokens.end(), goal.tokens.begin(), goal.tokens.end());
}

void TokenBatch::append_sample(const TokenBatch& other, int sample) {
  if (tokens_per_sample == 0) tokens_per_sample = other.tokens_per_sample;
  if (other.tokens_per_sample != tokens_per_sample) {
    throw ShapeError("TokenBatch: inconsistent token count");
  }
  const auto begin = other.tokens.begin() + static_cast<std::ptrdiff_t>(sample) * tokens_per_sample;
  tokens.insert(tokens.end(), begin, begin + tokens_per_sample);
}

TokenBatch TokenBatch::select(const std::vector<Index>& samples) const {
  TokenBatch out;
  out.tokens_per_sample = tokens_per_sample;
  out.tokens.reserve(samples.size() * static_cast<std::size_t>(tokens_per_sample));
  for (Index s : samples) out.append_sample(*this, static_cast<int>(s));
  return out;
}

SampledAction sample_action(const ActionDistribution& dist, Rng& rng) {
  const double u = uniform01(rng);
  double acc = 0.0;
  int chosen = -1;
  for (Index a = 0; a < dist.probs.size(); ++a) {
    if (dist.probs(a) <= 0.0) continue;
    chosen = static_cast<int>(a);
    acc += dist.probs(a);
    if (u < acc) break;
  }
  if (chosen < 0) throw DomainError("sample_action: distribution has no mass");
  return {chosen, std::log(dist.probs(chosen))};
}

double policy_entropy(const ad::Vector& probs) {
  double h = 0.0;
  for (Index a = 0; a < probs.size(); ++a) {
    if (probs(a) > 0.0) h -= probs(a) * std::log2(probs(a));
  }
  return h;
}

double policy_entropy(const ActionDistribution& dist) { return policy_entropy(dist.probs); }

MoEPolicy::MoEPolicy(const EnvSpec& spec, PolicyConfig config, std::uint64_t seed)
    : spec_(spec), config_(config) {
  if (config_.num_experts < 1) throw ConfigError("policy needs at least one adapter");
  if (config_.rank < 1) throw ConfigError("LoRA rank must be >= 1");
  if (config_.d_model < 2) throw ConfigError("d_model must be >= 2");
  const Index d = config_.d_model;
  const Index f = config_.ffn_width;
  const Index tokens = spec_.obs_tokens + spec_.goal_tokens;

  Rng rng = make_rng(seed, "policy-init");
  const double w_std = 1.0 / std::sqrt(static_cast<double>(d));
  backbone_.embedding = make("backbone.embedding", gaussian(spec_.vocab_size, d, 0.5, rng));
  backbone_.slot = make("backbone.slot", gaussian(tokens, d, 0.5, rng));
  for (int b = 0; b < config_.blocks; ++b) {
    const std::string p = "backbone.block" + std::to_string(b) + ".";
    TransformerBlock blk;
    blk.q_proj = make(p + "q_proj", gaussian(d, d, w_std, rng));
    blk.k_proj = make(p + "k_proj", gaussian(d, d, w_std, rng));
    blk.v_proj = make(p + "v_proj", gaussian(d, d, w_std, rng));
    blk.o_proj = make(p + "o_proj", gaussian(d, d, w_std, rng));
    blk.ffn_in = make(p + "ffn_in", gaussian(d, f, w_std, rng));
    blk.ffn_in_bias = make(p + "ffn_in_bias", Matrix::Zero(1, f));
    blk.ffn_out = make(p + "ffn_out", gaussian(f, d, 1.0 / std::sqrt(static_cast<double>(f)), rng));
    blk.ffn_out_bias = make(p + "ffn_out_bias", Matrix::Zero(1, d));
    backbone_.blocks.push_back(std::move(blk));
  }
  backbone_.head = make("backbone.head", gaussian(d, spec_.num_actions, w_std, rng));
  backbone_.head_bias = make("backbone.head_bias", Matrix::Zero(1, spec_.num_actions));
  backbone_.set_trainable(false);

  for (int k = 0; k < config_.num_experts; ++k) {
    Rng expert_rng = make_rng(seed, "expert-init", static_cast<std::uint64_t>(k));
    LoraExpert e;
    for (int b = 0; b < config_.blocks; ++b) {
      const std::string p = "expert" + std::to_string(k) + ".block" + std::to_string(b) + ".";
      for (const char* proj : {"q_proj", "v_proj"}) {
        LoraPair pair;
        pair.b = make(p + proj + ".lora_B", Matrix::Zero(d, config_.rank));
        pair.a = make(p + proj + ".lora_A", gaussian(config_.rank, d, config_.lora_init_std, expert_rng));
        (std::string(proj) == "q_proj" ? e.q : e.v).push_back(std::move(pair));
      }
    }
    experts_.push_back(std::move(e));
  }

  Rng value_rng = make_rng(seed, "value-init");
  const Index h = config_.value_hidden;
  value_head_.w1 = make("value.w1", gaussian(d, h, w_std, value_rng));
  value_head_.b1 = make("value.b1", Matrix::Zero(1, h));
  value_head_.w2 = make("value.w2", gaussian(h, 1, 1.0 / std::sqrt(static_cast<double>(h)), value_rng));
  value_head_.b2 = make("value.b2", Matrix::Zero(1, 1));
}

LoraExpert& MoEPolicy::expert(int k) {
  if (k < 0 || k >= num_experts()) {
    throw std::out_of_range("expert index " + std::to_string(k) + " out of range");
  }
  return experts_[static_cast<std::size_t>(k)];
}

BackboneOutput MoEPolicy::forward(Graph& g, const TokenBatch& batch, LoraExpert* adapter) {
  const Index per = batch.tokens_per_sample;
  if (per != spec_.obs_tokens + spec_.goal_tokens) throw ShapeError("forward: wrong token count");
  const Index n = batch.size();
  if (n == 0) throw ShapeError("forward: empty batch");

  Var x = ad::embed_sum(g.param(backbone_.embedding), batch.tokens);
  Var slot = g.param(backbone_.slot);
  std::vector<Index> slot_rows(static_cast<std::size_t>(n * per));
  for (std::size_t i = 0; i < slot_rows.size(); ++i) slot_rows[i] = static_cast<Index>(i) % per;
  x = ad::add(x, ad::gather_rows(slot, slot_rows));

  for (std::size_t b = 0; b < backbone_.blocks.size(); ++b) {
    TransformerBlock& blk = backbone_.blocks[b];
    Var h = ad::layer_norm(x);
    Var q = project(g, h, blk.q_proj, adapter ? &adapter->q[b] : nullptr);
    Var k = ad::matmul(h, g.param(blk.k_proj));
    Var v = project(g, h, blk.v_proj, adapter ? &adapter->v[b] : nullptr);
    Var att = ad::block_attention(q, k, v, per);
    x = ad::add(x, ad::matmul(att, g.param(blk.o_proj)));
    Var h2 = ad::layer_norm(x);
    Var ff = ad::relu(ad::add_row(ad::matmul(h2, g.param(blk.ffn_in)), g.param(blk.ffn_in_bias)));
    x = ad::add(x, ad::add_row(ad::matmul(ff, g.param(blk.ffn_out)), g.param(blk.ffn_out_bias)));
  }
  Var pooled = ad::segment_mean(x, per);
  Var logits = ad::add_row(ad::matmul(pooled, g.param(backbone_.head)), g.param(backbone_.head_bias));
  return {x, pooled, logits};
}

Var MoEPolicy::expert_logits(Graph& g, const TokenBatch& batch, int k) {
  return forward(g, batch, &expert(k)).logits;
}

ActionDistribution MoEPolicy::expert_forward(int k, const Observation& obs, const Goal& goal) {
  TokenBatch batch;
  batch.append(obs, goal);
  return {expert_probs(batch, k).row(0).transpose()};
}

Matrix MoEPolicy::expert_probs(const TokenBatch& batch, int k) {
  Graph g(false);
  return ad::softmax_rows(expert_logits(g, batch, k).value());
}

BaseFeatures MoEPolicy::base_features(const TokenBatch& batch) {
  Graph g(false);
  BackboneOutput out = forward(g, batch, nullptr);
  const Index n = batch.size();
  const Index per = batch.tokens_per_sample;
  const Index obs = spec_.obs_tokens;
  const Index d = config_.d_model;
  const Matrix& hidden = out.hidden.value();
  const Matrix& table = backbone_.embedding.value;

  BaseFeatures f;
  f.pooled = out.pooled.value();
  f.obs_encoding.resize(n, d);
  f.obs_embedding = Matrix::Zero(n, d);
  f.goal_encodings.assign(static_cast<std::size_t>(spec_.goal_tokens), Matrix(n, d));
  for (Index i = 0; i < n; ++i) {
    f.obs_encoding.row(i) = hidden.middleRows(i * per, obs).colwise().mean();
    for (Index j = 0; j < spec_.goal_tokens; ++j) {
      f.goal_encodings[static_cast<std::size_t>(j)].row(i) = hidden.row(i * per + obs + j);
    }
    for (Index t = 0; t < obs; ++t) {
      for (int c : batch.tokens[static_cast<std::size_t>(i * per + t)]) {
        f.obs_embedding.row(i) += table.row(c);
      }
    }
  }
  f.obs_embedding /= static_cast<double>(obs);
  return f;
}

Var MoEPolicy::value(Graph& g, const Matrix& features) {
  Var x = g.constant(features);
  Var h = ad::tanh(ad::add_row(ad::matmul(x, g.param(value_head_.w1)), g.param(value_head_.b1)));
  return ad::add_row(ad::matmul(h, g.param(value_head_.w2)), g.param(value_head_.b2));
}

std::vector<Tensor*> MoEPolicy::adapter_parameters() {
  std::vector<Tensor*> out;
  for (auto& e : experts_) {
    for (Tensor* t : e.parameters()) out.push_back(t);
  }
  return out;
}

std::vector<Tensor*> MoEPolicy::named_tensors() {
  std::vector<Tensor*> out = backbone_.parameters();
  for (Tensor* t : adapter_parameters()) out.push_back(t);
  for (Tensor* t : value_head_.parameters()) out.push_back(t);
  return out;
}

WarmupReport warmup_backbone(MoEPolicy& policy, const GridWorldConfig& env_config,
                             const WarmupConfig& config, std::uint64_t seed) {
  PhasedGridWorld env(env_config);
  Rng rng = make_rng(seed, "warmup");
  TokenBatch data;
  std::vector<ad::Vector> targets;
  for (int e = 0; e < config.episodes; ++e) {
    env.reset(derive_seed(seed, "warmup-env", static_cast<std::uint64_t>(e)),
              derive_seed(seed, "warmup-fault", static_cast<std::uint64_t>(e)));
    while (!env.done()) {
      const ad::Vector p = scripted_action_distribution(env, config.teacher);
      data.append(env.observation(), env.goal());
      targets.push_back(p);
      env.step(sample_action({p}, rng).action);
    }
  }

  Backbone& bb = policy.backbone();
  bb.set_trainable(true);
  std::vector<Tensor*> params = bb.parameters();
  ad::Adam adam({config.lr, 0.9, 0.999, 1e-8});
  const int n = data.size();
  std::vector<Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  WarmupReport report;
  report.samples = n;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    int batches = 0;
    for (int start = 0; start < n; start += config.batch_size) {
      const int end = std::min(n, start + config.batch_size);
      std::vector<Index> rows(order.begin() + start, order.begin() + end);
      TokenBatch mb = data.select(rows);
      Matrix target(static_cast<Index>(rows.size()), policy.num_actions());
      for (std::size_t i = 0; i < rows.size(); ++i) {
        target.row(static_cast<Index>(i)) = targets[static_cast<std::size_t>(rows[i])].transpose();
      }
      ad::zero_grad(params);
      Graph g;
      Var logits = policy.forward(g, mb, nullptr).logits;
      Var loss = ad::scale(ad::sum(ad::mul(g.constant(target), ad::log_softmax(logits))),
                           -1.0 / static_cast<double>(rows.size()));
      g.backward(loss);
      ad::clip_grad_norm(params, 1.0);
      adam.step(params);
      loss_sum += loss.scalar();
      ++batches;
    }
    report.final_loss = loss_sum / std::max(1, batches);
  }
  ad::zero_grad(params);
  bb.set_trainable(false);
  return report;
}

}  // namespace pamoe
