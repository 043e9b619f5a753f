#pragma once

#include <cstdint>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "slotnorm/rng.hpp"
#include "slotnorm/tensor.hpp"

namespace slotnorm {

enum class NormVariant { WeightedMean, LayerNormed, WeightedSum, BatchScaled };

// Which normalization is applied to the raw per-slot update codes, plus the
// per-variant configuration. The weighted-sum constant may be fixed or
// resolved to the token count N at call time; alpha/beta are the initial
// values of the learned batch-scale parameters.
struct NormalizationMode {
  NormVariant variant = NormVariant::WeightedMean;
  double C = 1.0;
  bool c_is_token_count = false;
  double alpha = 1.0;
  double beta = 0.0;
  double eps = 1e-5;
  double momentum = 0.99;

  static NormalizationMode weighted_mean() { return {}; }
  static NormalizationMode layer_normed() { return {NormVariant::LayerNormed}; }
  static NormalizationMode weighted_sum(double c) {
    NormalizationMode m{NormVariant::WeightedSum};
    require(c > 0.0, "weighted-sum constant must be positive");
    m.C = c;
    return m;
  }
  // The constant "N": resolved to the current token count on every call, so
  // one parameter set serves any input resolution.
  static NormalizationMode weighted_sum_tokens() {
    NormalizationMode m{NormVariant::WeightedSum};
    m.c_is_token_count = true;
    return m;
  }
  static NormalizationMode batch_scaled(double eps = 1e-5, double momentum = 0.99) {
    NormalizationMode m{NormVariant::BatchScaled};
    require(eps > 0.0, "batch-scale eps must be positive");
    require(momentum > 0.0 && momentum < 1.0, "EMA momentum must lie in (0,1)");
    m.eps = eps;
    m.momentum = momentum;
    return m;
  }
};

const char* norm_variant_name(NormVariant v);
NormVariant norm_variant_from_name(const std::string& name);

struct GruParams {
  Tensor w_ir, w_iz, w_in;              // input-to-gate maps [D, D_slot]
  Tensor w_hr, w_hz, w_hn;              // hidden-to-gate maps [D_slot, D_slot]
  Tensor b_ir, b_iz, b_in;              // [D_slot]
  Tensor b_hr, b_hz, b_hn;              // [D_slot]
};

struct MlpParams {
  Tensor w1, b1;  // [D_slot, H], [H]
  Tensor w2, b2;  // [H, D_slot], [D_slot]
};

// Every learnable piece of the module. All linear maps act on row vectors
// (x_row * W); k/q/v carry no bias. The update map (GRU + residual MLP) is
// shared across slots.
struct SlotAttentionParams {
  LayerNormParams input_layernorm;    // over D_input
  LayerNormParams slot_layernorm;     // over D_slot
  Tensor k_map, q_map, v_map;         // [D_input, D], [D_slot, D], [D_input, D]
  LayerNormParams update_layernorm;   // LayerNormed variant only, shared across slots
  GruParams gru;
  LayerNormParams pre_mlp_layernorm;
  MlpParams mlp;
  Tensor bs_alpha, bs_beta;           // BatchScaled learnables, one element each
  Tensor slot_mu, slot_logsigma;      // learned diagonal Gaussian for slot init
  NormalizationMode mode;
  double temperature = 1.0;           // sqrt(D)

  std::int64_t d_input() const { return k_map.dim(0); }
  std::int64_t d() const { return k_map.dim(1); }
  std::int64_t d_slot() const { return slot_mu.size(); }
};

SlotAttentionParams make_slot_attention_params(std::int64_t d, std::int64_t mlp_hidden,
                                               NormalizationMode mode, Rng& rng);

// Name -> tensor for optimization and checkpointing; only tensors the mode
// actually uses are listed. Order is fixed (it defines optimizer state
// layout).
std::vector<std::pair<std::string, Tensor*>> named_parameters(SlotAttentionParams& p);

// Scalar batch statistics of the first iteration's update codes, and their
// running averages for inference.
struct BatchStats {
  Tensor m, v;               // filled by run/run_batch during training
  double ema_m = 0.0, ema_v = 0.0;
  bool ema_initialized = false;
  bool training = true;
  double momentum = 0.99;
};

// ema <- momentum * ema + (1 - momentum) * batch; the first call adopts the
// batch values outright.
void ema_update(BatchStats& stats, double m_batch, double v_batch);

// One attention read-out: layer-norm inputs and slots, project to keys/
// queries/values, softmax over slots per token at the given temperature.
// Returns (Gamma [N,K], keys [N,D], values [N,D]).
std::tuple<Tensor, Tensor, Tensor> compute_attention(const Tensor& inputs, const Tensor& slots,
                                                     const SlotAttentionParams& params);

// Raw update codes u~_k = sum_n Gamma[n,k] * v_n followed by the mode's
// normalization. For BatchScaled, training statistics come from this very
// tensor (as the first iteration would) and inference uses the cached EMA.
Tensor aggregate(const Tensor& gamma, const Tensor& values, const NormalizationMode& mode,
                 const SlotAttentionParams& params, BatchStats* stats);

// Scalar mean and sample variance (divisor L*K*D - 1) over a [L,K,D] tensor
// of first-iteration update codes; gradients flow through both.
std::pair<Tensor, Tensor> batch_statistics(const Tensor& u0);

// Per-slot GRU step with the update code as input, then a residual MLP on a
// layer-normed copy; the identical map is applied to every slot.
Tensor update_slots(const Tensor& slots, const Tensor& u, const SlotAttentionParams& params);

// Full iteration loop on one instance: attention -> aggregate -> update,
// `iters` times. Returns final slots and the last iteration's Gamma.
std::pair<Tensor, Tensor> run(const Tensor& inputs, const Tensor& init_slots, std::int64_t iters,
                              const SlotAttentionParams& params, BatchStats* stats = nullptr);

// Batched loop on [B,N,D_input] / [B,K,D_slot]. BatchScaled training
// statistics span the whole mini-batch (all of B, K and the feature axis)
// and are computed once, on the first iteration's raw codes.
std::pair<Tensor, Tensor> run_batch(const Tensor& inputs, const Tensor& init_slots,
                                    std::int64_t iters, const SlotAttentionParams& params,
                                    BatchStats* stats = nullptr);

// Draw [B,K,D_slot] initial slots from the learned diagonal Gaussian;
// gradients flow into slot_mu / slot_logsigma when they are tape leaves.
Tensor sample_initial_slots(const SlotAttentionParams& params, std::int64_t batch,
                            std::int64_t k, Rng& rng);

}  // namespace slotnorm
