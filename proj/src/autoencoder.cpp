#include "slotnorm/autoencoder.hpp"

#include <cmath>
#include <utility>

namespace slotnorm {

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

// Four linear ramps per cell, [H*W, 4]: channel 0 grows 0 -> 1 left to
// right, channel 1 is its reverse, channels 2-3 the top-to-bottom pair. A
// degenerate extent of 1 yields constant 0 in both of its channels.
Tensor ramp_tensor(std::int64_t H, std::int64_t W) {
  Array p(H * W * 4);
  for (std::int64_t i = 0; i < H; ++i) {
    const double down = H > 1 ? static_cast<double>(i) / static_cast<double>(H - 1) : 0.0;
    const double up = H > 1 ? static_cast<double>(H - 1 - i) / static_cast<double>(H - 1) : 0.0;
    for (std::int64_t j = 0; j < W; ++j) {
      const double right = W > 1 ? static_cast<double>(j) / static_cast<double>(W - 1) : 0.0;
      const double left = W > 1 ? static_cast<double>(W - 1 - j) / static_cast<double>(W - 1) : 0.0;
      double* cell = p.data() + (i * W + j) * 4;
      cell[0] = right;
      cell[1] = left;
      cell[2] = down;
      cell[3] = up;
    }
  }
  return Tensor::from_array({H * W, 4}, std::move(p));
}

// Number of stride-2 upsampling layers taking `from` to `to`; requires an
// exact power-of-two ratio.
std::int64_t upsample_steps(std::int64_t from, std::int64_t to) {
  std::int64_t steps = 0, extent = from;
  while (extent < to) {
    extent *= 2;
    ++steps;
  }
  require(extent == to, "image extent must be the broadcast extent times a power of two");
  return steps;
}

}  // namespace

void validate(const AutoencoderConfig& config) {
  require(config.height >= 1 && config.width >= 1, "image extents must be positive");
  require(config.channels >= 1 && config.slot_dim >= 1 && config.slot_mlp_hidden >= 1,
          "model widths must be positive");
  require(config.broadcast >= 1, "broadcast extent must be positive");
  const std::int64_t steps_h = upsample_steps(config.broadcast, config.height);
  const std::int64_t steps_w = upsample_steps(config.broadcast, config.width);
  require(steps_h == steps_w,
          "height and width must need the same number of upsampling steps");
}

AutoencoderParams make_autoencoder_params(const AutoencoderConfig& config,
                                          const NormalizationMode& mode, Rng& rng) {
  validate(config);
  const std::int64_t C = config.channels, D = config.slot_dim;
  AutoencoderParams p;
  p.height = config.height;
  p.width = config.width;

  for (int i = 0; i < 4; ++i) {
    const std::int64_t cin = i == 0 ? 3 : C;
    p.encoder.conv_w.push_back(xavier(rng, 25 * cin, 25 * C, {5, 5, cin, C}));
    p.encoder.conv_b.push_back(Tensor::zeros({C}));
  }
  p.encoder.pos_w = xavier(rng, 4, C, {4, C});
  p.encoder.pos_b = Tensor::zeros({C});
  p.encoder.token_layernorm = unit_layernorm(C);
  p.encoder.mlp_w1 = xavier(rng, C, C, {C, C});
  p.encoder.mlp_b1 = Tensor::zeros({C});
  p.encoder.mlp_w2 = xavier(rng, C, D, {C, D});
  p.encoder.mlp_b2 = Tensor::zeros({D});

  p.slot_attention = make_slot_attention_params(D, config.slot_mlp_hidden, mode, rng);

  p.decoder.broadcast_h = config.broadcast;
  p.decoder.broadcast_w = config.broadcast;
  p.decoder.pos_w = xavier(rng, 4, D, {4, D});
  p.decoder.pos_b = Tensor::zeros({D});
  const std::int64_t steps = upsample_steps(config.broadcast, config.height);
  for (std::int64_t i = 0; i < steps; ++i) {
    p.decoder.tconv_w.push_back(xavier(rng, 25 * D, 25 * D, {5, 5, D, D}));
    p.decoder.tconv_b.push_back(Tensor::zeros({D}));
    p.decoder.stride.push_back(2);
    p.decoder.pad.push_back(2);
    p.decoder.out_pad.push_back(1);
  }
  p.decoder.tconv_w.push_back(xavier(rng, 25 * D, 25 * D, {5, 5, D, D}));
  p.decoder.tconv_b.push_back(Tensor::zeros({D}));
  p.decoder.stride.push_back(1);
  p.decoder.pad.push_back(2);
  p.decoder.out_pad.push_back(0);
  p.decoder.tconv_w.push_back(xavier(rng, 9 * D, 9 * 4, {3, 3, 4, D}));
  p.decoder.tconv_b.push_back(Tensor::zeros({4}));
  p.decoder.stride.push_back(1);
  p.decoder.pad.push_back(1);
  p.decoder.out_pad.push_back(0);
  return p;
}

std::vector<std::pair<std::string, Tensor*>> named_parameters(AutoencoderParams& p) {
  std::vector<std::pair<std::string, Tensor*>> out;
  for (std::size_t i = 0; i < p.encoder.conv_w.size(); ++i) {
    const std::string layer = "enc.conv" + std::to_string(i + 1);
    out.push_back({layer + "_w", &p.encoder.conv_w[i]});
    out.push_back({layer + "_b", &p.encoder.conv_b[i]});
  }
  out.push_back({"enc.pos_w", &p.encoder.pos_w});
  out.push_back({"enc.pos_b", &p.encoder.pos_b});
  out.push_back({"enc.token_ln.alpha", &p.encoder.token_layernorm.alpha});
  out.push_back({"enc.token_ln.beta", &p.encoder.token_layernorm.beta});
  out.push_back({"enc.mlp.w1", &p.encoder.mlp_w1});
  out.push_back({"enc.mlp.b1", &p.encoder.mlp_b1});
  out.push_back({"enc.mlp.w2", &p.encoder.mlp_w2});
  out.push_back({"enc.mlp.b2", &p.encoder.mlp_b2});
  for (auto& [name, tensor] : named_parameters(p.slot_attention)) out.push_back({name, tensor});
  out.push_back({"dec.pos_w", &p.decoder.pos_w});
  out.push_back({"dec.pos_b", &p.decoder.pos_b});
  for (std::size_t i = 0; i < p.decoder.tconv_w.size(); ++i) {
    const std::string layer = "dec.tconv" + std::to_string(i + 1);
    out.push_back({layer + "_w", &p.decoder.tconv_w[i]});
    out.push_back({layer + "_b", &p.decoder.tconv_b[i]});
  }
  return out;
}

Tensor positional_embed(const Tensor& features, const Tensor& pos_w, const Tensor& pos_b) {
  require(features.ndim() == 3, "positional_embed: features must be [H,W,C]");
  const std::int64_t H = features.dim(0), W = features.dim(1), C = features.dim(2);
  require(pos_w.ndim() == 2 && pos_w.dim(0) == 4 && pos_w.dim(1) == C,
          "positional_embed: affine weight must be [4,C]");
  require(pos_b.size() == C, "positional_embed: affine bias must have C entries");
  const Tensor emb = add_rowvec(matmul(ramp_tensor(H, W), pos_w), pos_b);
  return add(features.reshaped({H * W, C}), emb).reshaped({H, W, C});
}

Tensor encode(const Tensor& image, const EncoderParams& p) {
  require(image.ndim() == 3 && image.dim(2) == 3, "encode: image must be [H,W,3]");
  require(!p.conv_w.empty() && p.conv_w.size() == p.conv_b.size(),
          "encode: conv weights and biases must pair up");
  const std::int64_t H = image.dim(0), W = image.dim(1);
  Tensor x = image.reshaped({1, H, W, 3});
  for (std::size_t i = 0; i < p.conv_w.size(); ++i) {
    const std::int64_t kh = p.conv_w[i].dim(0);
    x = relu(conv2d(x, p.conv_w[i], p.conv_b[i], 1, (kh - 1) / 2));
  }
  const std::int64_t C = x.dim(3);
  x = positional_embed(x.reshaped({H, W, C}), p.pos_w, p.pos_b);
  Tensor t = layer_norm_rows(x.reshaped({H * W, C}), p.token_layernorm);
  t = relu(add_rowvec(matmul(t, p.mlp_w1), p.mlp_b1));
  return add_rowvec(matmul(t, p.mlp_w2), p.mlp_b2);
}

std::pair<Tensor, Tensor> decode_slots(const Tensor& slots, const DecoderParams& p) {
  require(slots.ndim() == 2, "decode_slots: slots must be [K,D]");
  require(slots.dim(1) == p.slot_dim(), "decode_slots: slot width must match the decoder");
  require(!p.tconv_w.empty() && p.tconv_w.size() == p.tconv_b.size() &&
              p.tconv_w.size() == p.stride.size() && p.tconv_w.size() == p.pad.size() &&
              p.tconv_w.size() == p.out_pad.size(),
          "decode_slots: per-layer decoder fields must pair up");
  const std::int64_t K = slots.dim(0), D = slots.dim(1);
  const std::int64_t h0 = p.broadcast_h, w0 = p.broadcast_w;
  // Broadcast each slot onto its own h0 x w0 grid and add the (slot-
  // independent) positional embedding.
  Tensor grid = broadcast_rows(slots, h0 * w0);
  const Tensor emb = add_rowvec(matmul(tile_rows(ramp_tensor(h0, w0), K), p.pos_w), p.pos_b);
  Tensor x = add(grid, emb).reshaped({K, h0, w0, D});
  for (std::size_t i = 0; i < p.tconv_w.size(); ++i) {
    x = conv_transpose2d(x, p.tconv_w[i], p.tconv_b[i], p.stride[i], p.pad[i], p.out_pad[i]);
    if (i + 1 < p.tconv_w.size()) x = relu(x);
  }
  require(x.dim(3) == 4, "decode_slots: final layer must emit 3 RGB + 1 alpha channel");
  const std::int64_t H = x.dim(1), W = x.dim(2);
  const Tensor flat = x.reshaped({K * H * W, 4});
  return {slice_last(flat, 0, 3).reshaped({K, H, W, 3}),
          slice_last(flat, 3, 1).reshaped({K, H, W})};
}

std::pair<Tensor, Tensor> decode_slot(const Tensor& slot, const DecoderParams& p) {
  require(slot.ndim() == 1, "decode_slot: slot must be 1-D");
  auto [rgb, alpha] = decode_slots(slot.reshaped({1, slot.size()}), p);
  const std::int64_t H = rgb.dim(1), W = rgb.dim(2);
  return {rgb.reshaped({H, W, 3}), alpha.reshaped({H, W})};
}

std::pair<Tensor, Tensor> blend(const Tensor& rgbs, const Tensor& alpha_logits) {
  require(rgbs.ndim() == 4 && rgbs.dim(3) == 3, "blend: rgbs must be [K,H,W,3]");
  require(alpha_logits.ndim() == 3, "blend: alpha logits must be [K,H,W]");
  const std::int64_t K = rgbs.dim(0), H = rgbs.dim(1), W = rgbs.dim(2);
  require(alpha_logits.dim(0) == K && alpha_logits.dim(1) == H && alpha_logits.dim(2) == W,
          "blend: rgbs and alpha logits must agree on [K,H,W]");
  auto [mix, weights] =
      softmax_mix(alpha_logits.reshaped({K, H * W}), rgbs.reshaped({K, H * W, 3}));
  return {mix.reshaped({H, W, 3}), weights.reshaped({K, H, W})};
}

Tensor reconstruction_loss(const Tensor& x, const Tensor& x_hat) {
  require(x.shape() == x_hat.shape(), "reconstruction_loss: shape mismatch");
  const Tensor diff = sub(x, x_hat);
  return mean_all(mul(diff, diff));
}

Tensor extract_segmentation(const Tensor& masks) {
  require(masks.ndim() == 3, "extract_segmentation: masks must be [K,H,W]");
  const std::int64_t K = masks.dim(0), H = masks.dim(1), W = masks.dim(2);
  Array labels(H * W);
  for (std::int64_t p = 0; p < H * W; ++p) {
    std::int64_t best = 0;
    double best_value = masks.at(p);
    for (std::int64_t k = 1; k < K; ++k) {
      const double v = masks.at(k * H * W + p);
      if (v > best_value) {
        best_value = v;
        best = k;
      }
    }
    labels[p] = static_cast<double>(best);
  }
  return Tensor::from_array({H, W}, std::move(labels));
}

AutoencoderOutput run_autoencoder(const std::vector<Tensor>& images, const Tensor& init_slots,
                                  std::int64_t sa_iters, const AutoencoderParams& p,
                                  BatchStats* stats) {
  require(!images.empty(), "run_autoencoder: needs at least one image");
  const std::int64_t B = static_cast<std::int64_t>(images.size());
  require(init_slots.ndim() == 3 && init_slots.dim(0) == B,
          "run_autoencoder: init_slots must be [B,K,D]");
  const std::int64_t K = init_slots.dim(1), D = init_slots.dim(2);
  for (const Tensor& image : images)
    require(image.ndim() == 3 && image.dim(0) == p.height && image.dim(1) == p.width &&
                image.dim(2) == 3,
            "run_autoencoder: image shape must match the model resolution");

  std::vector<Tensor> tokens;
  tokens.reserve(images.size());
  for (const Tensor& image : images) tokens.push_back(encode(image, p.encoder));
  auto [slots, gamma] = run_batch(stack_first(tokens), init_slots, sa_iters, p.slot_attention,
                                  stats);

  AutoencoderOutput out;
  Tensor total;
  for (std::int64_t b = 0; b < B; ++b) {
    const Tensor slots_b = slice_first(slots, b, 1).reshaped({K, D});
    auto [rgb, alpha] = decode_slots(slots_b, p.decoder);
    auto [reconstruction, masks] = blend(rgb, alpha);
    const Tensor loss_b = reconstruction_loss(images[static_cast<std::size_t>(b)],
                                              reconstruction);
    total = b == 0 ? loss_b : add(total, loss_b);
    out.reconstructions.push_back(std::move(reconstruction));
    out.masks.push_back(std::move(masks));
  }
  out.loss = scale_add(total, 1.0 / static_cast<double>(B), 0.0);
  out.slots = std::move(slots);
  out.gamma = std::move(gamma);
  return out;
}

}  // namespace slotnorm
