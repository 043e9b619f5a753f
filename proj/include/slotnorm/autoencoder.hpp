#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "slotnorm/rng.hpp"
#include "slotnorm/slot_attention.hpp"
#include "slotnorm/tensor.hpp"

namespace slotnorm {

// Convolutional encoder: four 5x5 stride-1 same-padding convolutions, an
// additive positional embedding, then a per-token layer norm and a two-layer
// MLP. Spatial resolution is preserved; the token dimension is mlp_w2's
// output width.
struct EncoderParams {
  std::vector<Tensor> conv_w;  // [5,5,Cin,C] each, first Cin = 3
  std::vector<Tensor> conv_b;  // [C] each
  Tensor pos_w, pos_b;         // affine R^4 -> R^C on the ramp tensor
  LayerNormParams token_layernorm;
  Tensor mlp_w1, mlp_b1;       // [C,H_mlp], [H_mlp]
  Tensor mlp_w2, mlp_b2;       // [H_mlp,D], [D]

  std::int64_t channels() const { return conv_w.back().dim(3); }
  std::int64_t token_dim() const { return mlp_w2.dim(1); }
};

// Spatial broadcast decoder: the slot is copied onto an h0 x w0 grid,
// positionally embedded, and upsampled through a transposed-conv stack whose
// final layer emits 4 channels (3 RGB + 1 unnormalized alpha). ReLU follows
// every layer except the last.
struct DecoderParams {
  std::int64_t broadcast_h = 4, broadcast_w = 4;
  Tensor pos_w, pos_b;          // affine R^4 -> R^D on the ramp tensor
  std::vector<Tensor> tconv_w;  // [kh,kw,Cout,Cin] each, last Cout = 4
  std::vector<Tensor> tconv_b;  // [Cout] each
  std::vector<std::int64_t> stride, pad, out_pad;  // one entry per layer

  std::int64_t slot_dim() const { return tconv_w.front().dim(3); }
};

struct AutoencoderParams {
  EncoderParams encoder;
  SlotAttentionParams slot_attention;
  DecoderParams decoder;
  std::int64_t height = 0, width = 0;  // image resolution the params target
};

// Model-scale knobs. channels is the conv stack width (and the token MLP
// hidden width); slot_dim doubles as the token dimension fed to slot
// attention and the decoder width. height/width must equal broadcast times a
// power of two, shared between the axes, which fixes the number of stride-2
// upsampling layers.
struct AutoencoderConfig {
  std::int64_t height = 32, width = 32;
  std::int64_t channels = 32;
  std::int64_t slot_dim = 32;
  std::int64_t slot_mlp_hidden = 64;
  std::int64_t broadcast = 4;
};

void validate(const AutoencoderConfig& config);

AutoencoderParams make_autoencoder_params(const AutoencoderConfig& config,
                                          const NormalizationMode& mode, Rng& rng);

// Name -> tensor over every learnable in the model, encoder first, then slot
// attention, then decoder. Order is fixed (it defines optimizer state and
// checkpoint layout).
std::vector<std::pair<std::string, Tensor*>> named_parameters(AutoencoderParams& p);

// features [H,W,C] plus affine(P[i,j,:]) where P holds four linear ramps:
// channel 0 grows 0 -> 1 left to right, channel 1 is its reverse, channels
// 2-3 the top-to-bottom pair. An extent of 1 degenerates to constant 0.
Tensor positional_embed(const Tensor& features, const Tensor& pos_w, const Tensor& pos_b);

// image [H,W,3] -> tokens [(H*W), D], row-major over pixels.
Tensor encode(const Tensor& image, const EncoderParams& p);

// slots [K,D] -> (rgb [K,H,W,3], alpha_logit [K,H,W]); every slot runs
// through the same decoder.
std::pair<Tensor, Tensor> decode_slots(const Tensor& slots, const DecoderParams& p);

// Single-slot convenience form: [D] -> (rgb [H,W,3], alpha_logit [H,W]).
std::pair<Tensor, Tensor> decode_slot(const Tensor& slot, const DecoderParams& p);

// Per-pixel softmax of the alpha logits over the slot axis, then the convex
// combination of the per-slot images, summed in ascending slot order.
// rgbs [K,H,W,3], alpha_logits [K,H,W] -> (reconstruction [H,W,3],
// masks [K,H,W]).
std::pair<Tensor, Tensor> blend(const Tensor& rgbs, const Tensor& alpha_logits);

// Mean squared error over all entries.
Tensor reconstruction_loss(const Tensor& x, const Tensor& x_hat);

// Per-pixel argmax over the slot axis, ties broken toward the lowest slot
// index. masks [K,H,W] -> labels [H,W]; not differentiable.
Tensor extract_segmentation(const Tensor& masks);

// One full forward pass over a mini-batch of images.
struct AutoencoderOutput {
  Tensor loss;                          // scalar, mean over images of the MSE
  std::vector<Tensor> reconstructions;  // [H,W,3] each
  std::vector<Tensor> masks;            // [K,H,W] each
  Tensor slots;                         // [B,K,D]
  Tensor gamma;                         // [B,N,K], last iteration's attention
};

// Encodes every image, runs slot attention jointly over the batch (the
// batch-scaled variant's statistics span all of it), decodes and blends per
// image. init_slots is [B,K,D]; stats may be null for the statistics-free
// variants.
AutoencoderOutput run_autoencoder(const std::vector<Tensor>& images, const Tensor& init_slots,
                                  std::int64_t sa_iters, const AutoencoderParams& p,
                                  BatchStats* stats = nullptr);

}  // namespace slotnorm
