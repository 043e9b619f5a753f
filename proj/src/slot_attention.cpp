#include "slotnorm/slot_attention.hpp"

#include <cmath>

namespace slotnorm {

const char* norm_variant_name(NormVariant v) {
  switch (v) {
    case NormVariant::WeightedMean: return "weighted_mean";
    case NormVariant::LayerNormed: return "layer_normed";
    case NormVariant::WeightedSum: return "weighted_sum";
    case NormVariant::BatchScaled: return "batch_scaled";
  }
  return "unknown";
}

NormVariant norm_variant_from_name(const std::string& name) {
  if (name == "weighted_mean") return NormVariant::WeightedMean;
  if (name == "layer_normed") return NormVariant::LayerNormed;
  if (name == "weighted_sum") return NormVariant::WeightedSum;
  if (name == "batch_scaled") return NormVariant::BatchScaled;
  throw std::invalid_argument("unknown normalization variant: " + name);
}

namespace {

Tensor xavier(Rng& rng, std::int64_t fan_in, std::int64_t fan_out, Shape shape) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  Array a(shape_size(shape));
  for (std::int64_t i = 0; i < a.size(); ++i) a[i] = rng.uniform(-limit, limit);
  return Tensor::from_array(std::move(shape), std::move(a));
}

LayerNormParams unit_layernorm(std::int64_t d) {
  return LayerNormParams{Tensor::full({d}, 1.0), Tensor::zeros({d}), 1e-5};
}

}  // namespace

SlotAttentionParams make_slot_attention_params(std::int64_t d, std::int64_t mlp_hidden,
                                               NormalizationMode mode, Rng& rng) {
  require(d >= 1 && mlp_hidden >= 1, "dimensions must be positive");
  SlotAttentionParams p;
  p.input_layernorm = unit_layernorm(d);
  p.slot_layernorm = unit_layernorm(d);
  p.k_map = xavier(rng, d, d, {d, d});
  p.q_map = xavier(rng, d, d, {d, d});
  p.v_map = xavier(rng, d, d, {d, d});
  p.update_layernorm = unit_layernorm(d);
  p.gru.w_ir = xavier(rng, d, d, {d, d});
  p.gru.w_iz = xavier(rng, d, d, {d, d});
  p.gru.w_in = xavier(rng, d, d, {d, d});
  p.gru.w_hr = xavier(rng, d, d, {d, d});
  p.gru.w_hz = xavier(rng, d, d, {d, d});
  p.gru.w_hn = xavier(rng, d, d, {d, d});
  p.gru.b_ir = Tensor::zeros({d});
  p.gru.b_iz = Tensor::zeros({d});
  p.gru.b_in = Tensor::zeros({d});
  p.gru.b_hr = Tensor::zeros({d});
  p.gru.b_hz = Tensor::zeros({d});
  p.gru.b_hn = Tensor::zeros({d});
  p.pre_mlp_layernorm = unit_layernorm(d);
  p.mlp.w1 = xavier(rng, d, mlp_hidden, {d, mlp_hidden});
  p.mlp.b1 = Tensor::zeros({mlp_hidden});
  p.mlp.w2 = xavier(rng, mlp_hidden, d, {mlp_hidden, d});
  p.mlp.b2 = Tensor::zeros({d});
  p.bs_alpha = Tensor::scalar(mode.alpha);
  p.bs_beta = Tensor::scalar(mode.beta);
  p.slot_mu = xavier(rng, 1, d, {d});
  p.slot_logsigma = xavier(rng, 1, d, {d});
  p.mode = mode;
  p.temperature = std::sqrt(static_cast<double>(d));
  return p;
}

std::vector<std::pair<std::string, Tensor*>> named_parameters(SlotAttentionParams& p) {
  std::vector<std::pair<std::string, Tensor*>> out = {
      {"sa.input_ln.alpha", &p.input_layernorm.alpha},
      {"sa.input_ln.beta", &p.input_layernorm.beta},
      {"sa.slot_ln.alpha", &p.slot_layernorm.alpha},
      {"sa.slot_ln.beta", &p.slot_layernorm.beta},
      {"sa.k", &p.k_map},
      {"sa.q", &p.q_map},
      {"sa.v", &p.v_map},
      {"sa.gru.w_ir", &p.gru.w_ir},
      {"sa.gru.w_iz", &p.gru.w_iz},
      {"sa.gru.w_in", &p.gru.w_in},
      {"sa.gru.w_hr", &p.gru.w_hr},
      {"sa.gru.w_hz", &p.gru.w_hz},
      {"sa.gru.w_hn", &p.gru.w_hn},
      {"sa.gru.b_ir", &p.gru.b_ir},
      {"sa.gru.b_iz", &p.gru.b_iz},
      {"sa.gru.b_in", &p.gru.b_in},
      {"sa.gru.b_hr", &p.gru.b_hr},
      {"sa.gru.b_hz", &p.gru.b_hz},
      {"sa.gru.b_hn", &p.gru.b_hn},
      {"sa.pre_mlp_ln.alpha", &p.pre_mlp_layernorm.alpha},
      {"sa.pre_mlp_ln.beta", &p.pre_mlp_layernorm.beta},
      {"sa.mlp.w1", &p.mlp.w1},
      {"sa.mlp.b1", &p.mlp.b1},
      {"sa.mlp.w2", &p.mlp.w2},
      {"sa.mlp.b2", &p.mlp.b2},
      {"sa.slot_mu", &p.slot_mu},
      {"sa.slot_logsigma", &p.slot_logsigma},
  };
  if (p.mode.variant == NormVariant::LayerNormed) {
    out.push_back({"sa.update_ln.alpha", &p.update_layernorm.alpha});
    out.push_back({"sa.update_ln.beta", &p.update_layernorm.beta});
  }
  if (p.mode.variant == NormVariant::BatchScaled) {
    out.push_back({"sa.bs_alpha", &p.bs_alpha});
    out.push_back({"sa.bs_beta", &p.bs_beta});
  }
  return out;
}

void ema_update(BatchStats& stats, double m_batch, double v_batch) {
  require(stats.training, "EMA updates are a training-time operation");
  if (!stats.ema_initialized) {
    stats.ema_m = m_batch;
    stats.ema_v = v_batch;
    stats.ema_initialized = true;
    return;
  }
  stats.ema_m = stats.momentum * stats.ema_m + (1.0 - stats.momentum) * m_batch;
  stats.ema_v = stats.momentum * stats.ema_v + (1.0 - stats.momentum) * v_batch;
}

namespace {

struct Attention {
  Tensor gamma;   // [B,N,K]
  Tensor keys;    // [B,N,D]
  Tensor values;  // [B,N,D]
};

Attention attention_batched(const Tensor& x, const Tensor& s, const SlotAttentionParams& p) {
  require(x.ndim() == 3 && s.ndim() == 3, "attention expects [B,N,D] inputs and [B,K,D] slots");
  const std::int64_t B = x.dim(0), N = x.dim(1), Din = x.dim(2);
  const std::int64_t K = s.dim(1), Ds = s.dim(2);
  require(B == s.dim(0), "batch extents must match");
  require(N >= 1 && K >= 1, "need at least one token and one slot");
  const std::int64_t D = p.d();
  Tensor xn = layer_norm_rows(x.reshaped({B * N, Din}), p.input_layernorm);
  Tensor sn = layer_norm_rows(s.reshaped({B * K, Ds}), p.slot_layernorm);
  Tensor keys = matmul(xn, p.k_map).reshaped({B, N, D});
  Tensor queries = matmul(sn, p.q_map).reshaped({B, K, D});
  Tensor values = matmul(xn, p.v_map).reshaped({B, N, D});
  Tensor logits = bmm(keys, queries, false, true);  // [B,N,K]
  Tensor gamma =
      softmax_rows(logits.reshaped({B * N, K}), p.temperature).reshaped({B, N, K});
  return {gamma, keys, values};
}

// u~_k = sum_n gamma[n,k] v_n, batched.
Tensor accumulate_codes(const Tensor& gamma, const Tensor& values) {
  return bmm(gamma, values, true, false);  // [B,K,D]
}

// Applies the selected normalization to raw codes [B,K,D]. `m`/`v` are only
// consulted for BatchScaled and must then be 1-element tensors.
Tensor normalize_codes(const Tensor& u_tilde, const Tensor& gamma, const NormalizationMode& mode,
                       const SlotAttentionParams& p, const Tensor& m, const Tensor& v) {
  const std::int64_t B = u_tilde.dim(0), K = u_tilde.dim(1), D = u_tilde.dim(2);
  switch (mode.variant) {
    case NormVariant::WeightedMean: {
      Tensor colsum = sum_mid(gamma).reshaped({B * K});
      return div_rows(u_tilde.reshaped({B * K, D}), colsum).reshaped({B, K, D});
    }
    case NormVariant::WeightedSum: {
      const double c =
          mode.c_is_token_count ? static_cast<double>(gamma.dim(1)) : mode.C;
      require(c > 0.0, "weighted-sum constant must be positive");
      return scale_add(u_tilde, 1.0 / c, 0.0);
    }
    case NormVariant::LayerNormed:
      return layer_norm_rows(u_tilde.reshaped({B * K, D}), p.update_layernorm)
          .reshaped({B, K, D});
    case NormVariant::BatchScaled: {
      Tensor centered = sub_scalar_t(u_tilde, m);
      Tensor inv = pow_scalar(scale_add(v, 1.0, mode.eps), -0.5);
      return add_scalar_t(mul_scalar_t(mul_scalar_t(centered, inv), p.bs_alpha), p.bs_beta);
    }
  }
  throw std::logic_error("unreachable");
}

// Resolves the BatchScaled statistics for a forward pass: fresh from `u0`
// during training, the cached EMA at inference.
std::pair<Tensor, Tensor> resolve_stats(const Tensor& u0, BatchStats* stats) {
  require(stats != nullptr, "BatchScaled normalization requires batch statistics");
  if (stats->training) {
    auto [m, v] = batch_statistics(u0);
    stats->m = m;
    stats->v = v;
    return {m, v};
  }
  require(stats->ema_initialized, "inference requires initialized EMA statistics");
  return {Tensor::scalar(stats->ema_m), Tensor::scalar(stats->ema_v)};
}

Tensor update_rows(const Tensor& h, const Tensor& x, const SlotAttentionParams& p) {
  const GruParams& g = p.gru;
  Tensor r = sigmoid(add(add_rowvec(matmul(x, g.w_ir), g.b_ir),
                         add_rowvec(matmul(h, g.w_hr), g.b_hr)));
  Tensor z = sigmoid(add(add_rowvec(matmul(x, g.w_iz), g.b_iz),
                         add_rowvec(matmul(h, g.w_hz), g.b_hz)));
  Tensor n = tanh(add(add_rowvec(matmul(x, g.w_in), g.b_in),
                      mul(r, add_rowvec(matmul(h, g.w_hn), g.b_hn))));
  Tensor hnew = add(mul(z, h), mul(scale_add(z, -1.0, 1.0), n));
  Tensor ln = layer_norm_rows(hnew, p.pre_mlp_layernorm);
  Tensor hidden = relu(add_rowvec(matmul(ln, p.mlp.w1), p.mlp.b1));
  return add(hnew, add_rowvec(matmul(hidden, p.mlp.w2), p.mlp.b2));
}

}  // namespace

std::tuple<Tensor, Tensor, Tensor> compute_attention(const Tensor& inputs, const Tensor& slots,
                                                     const SlotAttentionParams& params) {
  require(inputs.ndim() == 2 && slots.ndim() == 2,
          "compute_attention expects [N,D] inputs and [K,D] slots");
  const std::int64_t N = inputs.dim(0), K = slots.dim(0), D = params.d();
  Attention a = attention_batched(inputs.reshaped({1, N, inputs.dim(1)}),
                                  slots.reshaped({1, K, slots.dim(1)}), params);
  return {a.gamma.reshaped({N, K}), a.keys.reshaped({N, D}), a.values.reshaped({N, D})};
}

std::pair<Tensor, Tensor> batch_statistics(const Tensor& u0) {
  require(u0.ndim() == 3, "batch_statistics expects [L,K,D]");
  const std::int64_t n = u0.size();
  require(n >= 2, "batch statistics need at least two entries");
  Tensor m = mean_all(u0);
  Tensor centered = sub_scalar_t(u0, m);
  Tensor v = scale_add(sum_all(mul(centered, centered)), 1.0 / static_cast<double>(n - 1), 0.0);
  return {m, v};
}

Tensor aggregate(const Tensor& gamma, const Tensor& values, const NormalizationMode& mode,
                 const SlotAttentionParams& params, BatchStats* stats) {
  require(gamma.ndim() == 2 && values.ndim() == 2, "aggregate expects [N,K] and [N,D]");
  require(gamma.dim(0) == values.dim(0), "one value row per attention row required");
  const std::int64_t N = gamma.dim(0), K = gamma.dim(1), D = values.dim(1);
  Tensor g3 = gamma.reshaped({1, N, K});
  Tensor u_tilde = accumulate_codes(g3, values.reshaped({1, N, D}));
  Tensor m, v;
  if (mode.variant == NormVariant::BatchScaled) std::tie(m, v) = resolve_stats(u_tilde, stats);
  return normalize_codes(u_tilde, g3, mode, params, m, v).reshaped({K, D});
}

Tensor update_slots(const Tensor& slots, const Tensor& u, const SlotAttentionParams& params) {
  require(slots.ndim() == 2 && u.ndim() == 2, "update_slots expects [K,D] tensors");
  require(slots.dim(0) == u.dim(0), "one update code per slot required");
  return update_rows(slots, u, params);
}

std::pair<Tensor, Tensor> run_batch(const Tensor& inputs, const Tensor& init_slots,
                                    std::int64_t iters, const SlotAttentionParams& params,
                                    BatchStats* stats) {
  require(iters >= 1, "at least one iteration required");
  const std::int64_t B = inputs.dim(0), N = inputs.dim(1);
  const std::int64_t K = init_slots.dim(1), Ds = init_slots.dim(2);
  Tensor slots = init_slots;
  Tensor gamma;
  Tensor m, v;  // BatchScaled statistics, fixed after the first iteration
  for (std::int64_t it = 0; it < iters; ++it) {
    Attention a = attention_batched(inputs, slots, params);
    gamma = a.gamma;
    Tensor u_tilde = accumulate_codes(a.gamma, a.values);
    if (params.mode.variant == NormVariant::BatchScaled && it == 0)
      std::tie(m, v) = resolve_stats(u_tilde, stats);
    Tensor u = normalize_codes(u_tilde, a.gamma, params.mode, params, m, v);
    slots = update_rows(slots.reshaped({B * K, Ds}), u.reshaped({B * K, params.d()}), params)
                .reshaped({B, K, Ds});
  }
  return {slots, gamma.reshaped({B, N, K})};
}

std::pair<Tensor, Tensor> run(const Tensor& inputs, const Tensor& init_slots, std::int64_t iters,
                              const SlotAttentionParams& params, BatchStats* stats) {
  require(inputs.ndim() == 2 && init_slots.ndim() == 2,
          "run expects [N,D] inputs and [K,D] slots");
  const std::int64_t N = inputs.dim(0), K = init_slots.dim(0);
  auto [slots, gamma] =
      run_batch(inputs.reshaped({1, N, inputs.dim(1)}),
                init_slots.reshaped({1, K, init_slots.dim(1)}), iters, params, stats);
  return {slots.reshaped({K, init_slots.dim(1)}), gamma.reshaped({N, K})};
}

Tensor sample_initial_slots(const SlotAttentionParams& params, std::int64_t batch, std::int64_t k,
                            Rng& rng) {
  require(batch >= 1 && k >= 1, "need at least one sample and one slot");
  const std::int64_t d = params.d_slot();
  Array noise(batch * k * d);
  for (std::int64_t i = 0; i < noise.size(); ++i) noise[i] = rng.normal();
  Tensor eps = Tensor::from_array({batch * k, d}, std::move(noise));
  Tensor sigma_rows = tile_rows(exp(params.slot_logsigma).reshaped({1, d}), batch * k);
  return add_rowvec(mul(eps, sigma_rows), params.slot_mu).reshaped({batch, k, d});
}

}  // namespace slotnorm
