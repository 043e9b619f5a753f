#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "slotnorm/autoencoder.hpp"
#include "slotnorm/rng.hpp"
#include "slotnorm/tensor.hpp"

using namespace slotnorm;

namespace {

Tensor randn(Rng& rng, Shape shape) {
  Array a(shape_size(shape));
  for (std::int64_t i = 0; i < a.size(); ++i) a[i] = rng.normal();
  return Tensor::from_array(std::move(shape), std::move(a));
}

Tensor random_image(Rng& rng, std::int64_t h, std::int64_t w) {
  Array a(h * w * 3);
  for (std::int64_t i = 0; i < a.size(); ++i) a[i] = rng.uniform(-1.0, 1.0);
  return Tensor::from_array({h, w, 3}, std::move(a));
}

double sup_diff(const Tensor& a, const Tensor& b) {
  double worst = 0.0;
  for (std::int64_t i = 0; i < a.size(); ++i)
    worst = std::max(worst, std::abs(a.at(i) - b.at(i)));
  return worst;
}

// Rows `a` and `b` of a [N,D] token matrix, compared exactly.
bool rows_equal(const Tensor& t, std::int64_t a, std::int64_t b) {
  const std::int64_t d = t.dim(1);
  for (std::int64_t c = 0; c < d; ++c)
    if (t.at(a * d + c) != t.at(b * d + c)) return false;
  return true;
}

AutoencoderConfig toy_config(std::int64_t extent, std::int64_t channels, std::int64_t slot_dim,
                             std::int64_t broadcast) {
  AutoencoderConfig config;
  config.height = extent;
  config.width = extent;
  config.channels = channels;
  config.slot_dim = slot_dim;
  config.slot_mlp_hidden = 2 * slot_dim;
  config.broadcast = broadcast;
  return config;
}

}  // namespace

TEST_CASE("zero affine embedding is the identity") {
  Rng rng(1);
  Tensor features = randn(rng, {5, 7, 6});
  Tensor out = positional_embed(features, Tensor::zeros({4, 6}), Tensor::zeros({6}));
  for (std::int64_t i = 0; i < features.size(); ++i) CHECK(out.at(i) == features.at(i));
}

TEST_CASE("degenerate one-by-one grid embeds only the bias") {
  Rng rng(2);
  Tensor pos_w = randn(rng, {4, 3});
  Tensor pos_b = randn(rng, {3});
  // Both ramps of an extent-1 axis are the single value 0, so the affine map
  // sees the zero vector and contributes only its bias.
  Tensor out = positional_embed(Tensor::zeros({1, 1, 3}), pos_w, pos_b);
  for (std::int64_t c = 0; c < 3; ++c) CHECK(out.at(c) == pos_b.at(c));
  Tensor features = randn(rng, {1, 1, 3});
  Tensor shifted = positional_embed(features, pos_w, pos_b);
  for (std::int64_t c = 0; c < 3; ++c) CHECK(shifted.at(c) == features.at(c) + pos_b.at(c));
}

TEST_CASE("three-by-three ramps reach every cell with the expected values") {
  // With the identity affine map the output exposes the raw ramp tensor:
  // channel 0 grows left to right, channel 1 is its reverse, channels 2-3
  // the vertical pair. All values are multiples of 1/2, so exact.
  Tensor eye = Tensor::from_values({4, 4}, {1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1});
  Tensor out = positional_embed(Tensor::zeros({3, 3, 4}), eye, Tensor::zeros({4}));
  for (std::int64_t i = 0; i < 3; ++i)
    for (std::int64_t j = 0; j < 3; ++j) {
      const double* cell = out.data() + (i * 3 + j) * 4;
      CHECK(cell[0] == static_cast<double>(j) / 2.0);
      CHECK(cell[1] == static_cast<double>(2 - j) / 2.0);
      CHECK(cell[2] == static_cast<double>(i) / 2.0);
      CHECK(cell[3] == static_cast<double>(2 - i) / 2.0);
    }
  const double* corner = out.data();
  CHECK(corner[0] == 0.0);
  CHECK(corner[1] == 1.0);
  CHECK(corner[2] == 0.0);
  CHECK(corner[3] == 1.0);
}

TEST_CASE("shape contracts are enforced") {
  Rng rng(3);
  AutoencoderParams p = make_autoencoder_params(toy_config(8, 4, 4, 2),
                                                NormalizationMode::weighted_mean(), rng);
  CHECK_THROWS_AS((void)encode(randn(rng, {8, 8, 4}), p.encoder), std::invalid_argument);
  CHECK_THROWS_AS((void)positional_embed(randn(rng, {3, 3, 5}), Tensor::zeros({4, 4}),
                                         Tensor::zeros({4})),
                  std::invalid_argument);
  CHECK_THROWS_AS((void)decode_slots(randn(rng, {2, 5}), p.decoder), std::invalid_argument);
  CHECK_THROWS_AS((void)blend(randn(rng, {2, 4, 4, 3}), randn(rng, {3, 4, 4})),
                  std::invalid_argument);
  CHECK_THROWS_AS((void)reconstruction_loss(randn(rng, {2, 2}), randn(rng, {2, 3})),
                  std::invalid_argument);
  AutoencoderConfig bad = toy_config(12, 4, 4, 5);  // 5 cannot reach 12 by doubling
  CHECK_THROWS_AS((void)validate(bad), std::invalid_argument);
  AutoencoderConfig ratio8 = toy_config(24, 4, 4, 3);  // 3 -> 6 -> 12 -> 24
  CHECK_NOTHROW(validate(ratio8));
  AutoencoderConfig ratio6 = toy_config(18, 4, 4, 3);  // ratio 6 is not a power of two
  CHECK_THROWS_AS((void)validate(ratio6), std::invalid_argument);
}

TEST_CASE("zero convolutions reduce encoding to the embedding path") {
  Rng rng(4);
  AutoencoderParams p = make_autoencoder_params(toy_config(8, 6, 6, 2),
                                                NormalizationMode::weighted_mean(), rng);
  for (Tensor& w : p.encoder.conv_w) w = Tensor::zeros(w.shape());
  const Tensor image = Tensor::zeros({8, 8, 3});
  const Tensor tokens = encode(image, p.encoder);
  REQUIRE(tokens.shape() == Shape{64, 6});

  // Zero weights and biases silence the conv stack, so the tokens are the
  // MLP of the layer-normed embedding alone.
  Tensor expected = positional_embed(Tensor::zeros({8, 8, 6}), p.encoder.pos_w, p.encoder.pos_b);
  expected = layer_norm_rows(expected.reshaped({64, 6}), p.encoder.token_layernorm);
  expected = relu(add_rowvec(matmul(expected, p.encoder.mlp_w1), p.encoder.mlp_b1));
  expected = add_rowvec(matmul(expected, p.encoder.mlp_w2), p.encoder.mlp_b2);
  for (std::int64_t i = 0; i < tokens.size(); ++i) CHECK(tokens.at(i) == expected.at(i));

  const Tensor again = encode(image, p.encoder);
  for (std::int64_t i = 0; i < tokens.size(); ++i) CHECK(tokens.at(i) == again.at(i));
}

TEST_CASE("constant images give position-only token differences") {
  // Four 5x5 convolutions see an 8-pixel neighborhood, so tokens at least 8
  // pixels from every border share identical conv features on a constant
  // image; any difference between them must come through the embedding.
  Rng rng(5);
  AutoencoderParams p = make_autoencoder_params(toy_config(20, 6, 6, 5),
                                                NormalizationMode::weighted_mean(), rng);
  const Tensor image = Tensor::full({20, 20, 3}, 0.3);

  p.encoder.pos_w = Tensor::zeros({4, 6});
  p.encoder.pos_b = Tensor::zeros({6});
  Tensor tokens = encode(image, p.encoder);
  for (std::int64_t i = 8; i <= 11; ++i)
    for (std::int64_t j = 8; j <= 11; ++j)
      CHECK(rows_equal(tokens, 8 * 20 + 8, i * 20 + j));

  // Re-enable only the left-to-right ramp: tokens now vary with the column
  // and with nothing else.
  Array w = Array::Zero(4 * 6);
  for (std::int64_t c = 0; c < 6; ++c) w[c] = rng.normal();
  p.encoder.pos_w = Tensor::from_array({4, 6}, std::move(w));
  p.encoder.pos_b = randn(rng, {6});
  tokens = encode(image, p.encoder);
  for (std::int64_t j = 8; j <= 11; ++j) {
    CHECK(rows_equal(tokens, 8 * 20 + j, 9 * 20 + j));
    CHECK(rows_equal(tokens, 8 * 20 + j, 11 * 20 + j));
  }
  double column_spread = 0.0;
  for (std::int64_t c = 0; c < 6; ++c)
    column_spread = std::max(column_spread,
                             std::abs(tokens.at((8 * 20 + 8) * 6 + c) -
                                      tokens.at((8 * 20 + 9) * 6 + c)));
  CHECK(column_spread > 1e-9);
}

TEST_CASE("encoder gradients match finite differences") {
  Rng rng(6);
  AutoencoderParams p = make_autoencoder_params(toy_config(8, 5, 4, 2),
                                                NormalizationMode::weighted_mean(), rng);
  const Tensor image = random_image(rng, 8, 8);
  const Tensor weigh = randn(rng, {64, 4});

  auto loss_for = [&](const AutoencoderParams& model, const Tensor& img) {
    return sum_all(mul(encode(img, model.encoder), weigh));
  };
  CHECK(grad_check([&](const Tensor& t) { return loss_for(p, t); }, image, 1e-6) < 1e-5);

  const std::vector<std::string> leaves = {
      "enc.conv1_w", "enc.conv2_w", "enc.conv3_w", "enc.conv4_w", "enc.conv2_b",
      "enc.pos_w",   "enc.pos_b",   "enc.token_ln.alpha", "enc.token_ln.beta",
      "enc.mlp.w1",  "enc.mlp.b1",  "enc.mlp.w2",  "enc.mlp.b2"};
  for (const std::string& name : leaves) {
    CAPTURE(name);
    Tensor start;
    for (auto& [n, tensor] : named_parameters(p))
      if (n == name) start = *tensor;
    REQUIRE(start.defined());
    const double err = grad_check(
        [&](const Tensor& t) {
          AutoencoderParams q = p;
          for (auto& [n, tensor] : named_parameters(q))
            if (n == name) *tensor = t;
          return loss_for(q, image);
        },
        start, 1e-6);
    CHECK(err < 1e-5);
  }
}

TEST_CASE("identical slots decode identically") {
  Rng rng(7);
  AutoencoderParams p = make_autoencoder_params(toy_config(16, 6, 6, 4),
                                                NormalizationMode::weighted_mean(), rng);
  Tensor one = randn(rng, {6});
  Array both(12);
  both.segment(0, 6) = one.flat();
  both.segment(6, 6) = one.flat();
  auto [rgb, alpha] = decode_slots(Tensor::from_array({2, 6}, std::move(both)), p.decoder);
  REQUIRE(rgb.shape() == Shape{2, 16, 16, 3});
  REQUIRE(alpha.shape() == Shape{2, 16, 16});
  const std::int64_t pixels = 16 * 16;
  for (std::int64_t i = 0; i < pixels * 3; ++i) CHECK(rgb.at(i) == rgb.at(pixels * 3 + i));
  for (std::int64_t i = 0; i < pixels; ++i) CHECK(alpha.at(i) == alpha.at(pixels + i));

  auto [rgb1, alpha1] = decode_slot(one, p.decoder);
  REQUIRE(rgb1.shape() == Shape{16, 16, 3});
  for (std::int64_t i = 0; i < pixels * 3; ++i) CHECK(rgb1.at(i) == rgb.at(i));
  for (std::int64_t i = 0; i < pixels; ++i) CHECK(alpha1.at(i) == alpha.at(i));
}

TEST_CASE("a zeroed final layer decodes to its bias") {
  Rng rng(8);
  AutoencoderParams p = make_autoencoder_params(toy_config(16, 6, 6, 4),
                                                NormalizationMode::weighted_mean(), rng);
  p.decoder.tconv_w.back() = Tensor::zeros(p.decoder.tconv_w.back().shape());
  p.decoder.tconv_b.back() = Tensor::from_values({4}, {0.2, -0.3, 0.4, 0.7});
  auto [rgb, alpha] = decode_slot(randn(rng, {6}), p.decoder);
  for (std::int64_t i = 0; i < rgb.size(); i += 3) {
    CHECK(rgb.at(i) == 0.2);
    CHECK(rgb.at(i + 1) == -0.3);
    CHECK(rgb.at(i + 2) == 0.4);
  }
  for (std::int64_t i = 0; i < alpha.size(); ++i) CHECK(alpha.at(i) == 0.7);
}

TEST_CASE("decoder gradients match finite differences") {
  Rng rng(9);
  AutoencoderParams p = make_autoencoder_params(toy_config(16, 6, 6, 4),
                                                NormalizationMode::weighted_mean(), rng);
  const Tensor slots = randn(rng, {2, 6});
  const Tensor weigh_rgb = randn(rng, {2, 16, 16, 3});
  const Tensor weigh_alpha = randn(rng, {2, 16, 16});

  auto loss_for = [&](const AutoencoderParams& model, const Tensor& s) {
    auto [rgb, alpha] = decode_slots(s, model.decoder);
    return add(sum_all(mul(rgb, weigh_rgb)), sum_all(mul(alpha, weigh_alpha)));
  };
  CHECK(grad_check([&](const Tensor& t) { return loss_for(p, t); }, slots, 1e-6) < 1e-5);

  const std::vector<std::string> leaves = {"dec.pos_w",    "dec.pos_b",    "dec.tconv1_w",
                                           "dec.tconv2_w", "dec.tconv3_w", "dec.tconv4_w",
                                           "dec.tconv1_b", "dec.tconv4_b"};
  for (const std::string& name : leaves) {
    CAPTURE(name);
    Tensor start;
    for (auto& [n, tensor] : named_parameters(p))
      if (n == name) start = *tensor;
    REQUIRE(start.defined());
    const double err = grad_check(
        [&](const Tensor& t) {
          AutoencoderParams q = p;
          for (auto& [n, tensor] : named_parameters(q))
            if (n == name) *tensor = t;
          return loss_for(q, slots);
        },
        start, 1e-6);
    CHECK(err < 1e-5);
  }
}

TEST_CASE("blending is a per-pixel convex combination") {
  Rng rng(10);
  // One slot: the mask is exactly one and the image passes through.
  Tensor rgb1 = randn(rng, {1, 4, 4, 3});
  auto [solo, solo_mask] = blend(rgb1, randn(rng, {1, 4, 4}));
  for (std::int64_t i = 0; i < solo.size(); ++i) CHECK(solo.at(i) == rgb1.at(i));
  for (std::int64_t i = 0; i < solo_mask.size(); ++i) CHECK(solo_mask.at(i) == 1.0);

  // Equal logits: masks are exactly 1/3 and the blend is the mean.
  Tensor rgb3 = randn(rng, {3, 4, 4, 3});
  auto [mean3, mask3] = blend(rgb3, Tensor::full({3, 4, 4}, 0.7));
  for (std::int64_t i = 0; i < mask3.size(); ++i) CHECK(mask3.at(i) == 1.0 / 3.0);
  for (std::int64_t i = 0; i < mean3.size(); ++i) {
    const double mean = (rgb3.at(i) + rgb3.at(48 + i) + rgb3.at(96 + i)) / 3.0;
    CHECK(mean3.at(i) == doctest::Approx(mean).epsilon(1e-14));
  }

  // Random instance: per-pixel mask sums are 1 within 1e-12.
  auto [mixed, masks] = blend(randn(rng, {5, 6, 7, 3}), randn(rng, {5, 6, 7}));
  REQUIRE(masks.shape() == Shape{5, 6, 7});
  for (std::int64_t pix = 0; pix < 42; ++pix) {
    double total = 0.0;
    for (std::int64_t k = 0; k < 5; ++k) total += masks.at(k * 42 + pix);
    CHECK(std::abs(total - 1.0) < 1e-12);
  }
}

TEST_CASE("reconstruction loss is the mean squared error") {
  Rng rng(11);
  Tensor x = randn(rng, {4, 5, 3});
  CHECK(reconstruction_loss(x, x).value() == 0.0);
  CHECK(reconstruction_loss(Tensor::zeros({2, 3}), Tensor::full({2, 3}, 1.0)).value() == 1.0);

  Tensor y = randn(rng, {4, 5, 3});
  long double expected = 0.0L;
  for (std::int64_t i = 0; i < x.size(); ++i) {
    const long double d = static_cast<long double>(x.at(i)) - static_cast<long double>(y.at(i));
    expected += d * d;
  }
  expected /= static_cast<long double>(x.size());
  CHECK(std::abs(reconstruction_loss(x, y).value() - static_cast<double>(expected)) < 1e-12);
}

TEST_CASE("segmentation takes the highest mask with ties to the lowest slot") {
  // One-hot masks recover the hot slot exactly.
  Tensor hot = Tensor::from_values({3, 2, 2}, {0, 0, 1, 0,  //
                                               1, 0, 0, 0,  //
                                               0, 1, 0, 1});
  Tensor labels = extract_segmentation(hot);
  CHECK(labels.at(0) == 1.0);
  CHECK(labels.at(1) == 2.0);
  CHECK(labels.at(2) == 0.0);
  CHECK(labels.at(3) == 2.0);

  // Uniform masks tie everywhere; the tie-break picks slot 0.
  Tensor uniform = Tensor::full({4, 3, 3}, 0.25);
  Tensor flat = extract_segmentation(uniform);
  for (std::int64_t i = 0; i < flat.size(); ++i) CHECK(flat.at(i) == 0.0);

  // Random masks against a per-pixel linear scan.
  Rng rng(12);
  Tensor masks = randn(rng, {4, 5, 5});
  Tensor got = extract_segmentation(masks);
  for (std::int64_t pix = 0; pix < 25; ++pix) {
    std::int64_t best = 0;
    for (std::int64_t k = 1; k < 4; ++k)
      if (masks.at(k * 25 + pix) > masks.at(best * 25 + pix)) best = k;
    CHECK(got.at(pix) == static_cast<double>(best));
  }

  // Any strictly monotone per-pixel rescaling preserves the argmax.
  auto [recon, soft] = blend(randn(rng, {4, 5, 5, 3}), masks);
  (void)recon;
  Array bent(soft.size());
  for (std::int64_t i = 0; i < soft.size(); ++i) {
    const double m = soft.at(i);
    bent[i] = 2.0 * m * m * m + 0.5 * m;
  }
  Tensor before = extract_segmentation(soft);
  Tensor after = extract_segmentation(Tensor::from_array({4, 5, 5}, std::move(bent)));
  for (std::int64_t i = 0; i < before.size(); ++i) CHECK(before.at(i) == after.at(i));
}

TEST_CASE("permuting slots permutes masks and preserves the blend") {
  Rng rng(13);
  AutoencoderParams p = make_autoencoder_params(toy_config(16, 6, 6, 4),
                                                NormalizationMode::weighted_mean(), rng);
  const Tensor slots = randn(rng, {3, 6});
  const std::int64_t perm[3] = {2, 0, 1};
  Array shuffled(slots.size());
  for (std::int64_t k = 0; k < 3; ++k)
    shuffled.segment(k * 6, 6) = slots.flat().segment(perm[k] * 6, 6);

  auto [rgb_a, alpha_a] = decode_slots(slots, p.decoder);
  auto [recon_a, masks_a] = blend(rgb_a, alpha_a);
  auto [rgb_b, alpha_b] = decode_slots(Tensor::from_array({3, 6}, std::move(shuffled)),
                                       p.decoder);
  auto [recon_b, masks_b] = blend(rgb_b, alpha_b);

  CHECK(sup_diff(recon_a, recon_b) < 1e-10);
  const std::int64_t pixels = 16 * 16;
  for (std::int64_t k = 0; k < 3; ++k)
    for (std::int64_t i = 0; i < pixels; ++i)
      CHECK(std::abs(masks_b.at(k * pixels + i) - masks_a.at(perm[k] * pixels + i)) < 1e-12);
}

TEST_CASE("batched forward is deterministic and well-shaped") {
  Rng rng(14);
  AutoencoderParams p = make_autoencoder_params(toy_config(16, 8, 8, 4),
                                                NormalizationMode::batch_scaled(), rng);
  std::vector<Tensor> images = {random_image(rng, 16, 16), random_image(rng, 16, 16)};
  const Tensor init = randn(rng, {2, 3, 8});

  BatchStats stats_a;
  AutoencoderOutput a = run_autoencoder(images, init, 3, p, &stats_a);
  REQUIRE(a.reconstructions.size() == 2);
  REQUIRE(a.masks.size() == 2);
  REQUIRE(a.slots.shape() == Shape{2, 3, 8});
  REQUIRE(a.gamma.shape() == Shape{2, 256, 3});
  REQUIRE(a.reconstructions[0].shape() == Shape{16, 16, 3});
  REQUIRE(a.masks[0].shape() == Shape{3, 16, 16});
  CHECK(std::isfinite(a.loss.value()));
  CHECK(a.loss.value() > 0.0);

  BatchStats stats_b;
  AutoencoderOutput b = run_autoencoder(images, init, 3, p, &stats_b);
  CHECK(a.loss.value() == b.loss.value());
  CHECK(sup_diff(a.reconstructions[1], b.reconstructions[1]) == 0.0);
  CHECK(stats_a.ema_m == stats_b.ema_m);
  CHECK(stats_a.ema_v == stats_b.ema_v);

  CHECK_THROWS_AS((void)run_autoencoder({random_image(rng, 8, 8)}, randn(rng, {1, 3, 8}), 3, p,
                                        nullptr),
                  std::invalid_argument);
  CHECK_THROWS_AS((void)run_autoencoder(images, randn(rng, {3, 3, 8}), 3, p, nullptr),
                  std::invalid_argument);
}

TEST_CASE("full model gradients on a toy configuration") {
  Rng rng(15);
  AutoencoderParams params = make_autoencoder_params(toy_config(16, 16, 16, 4),
                                                     NormalizationMode::batch_scaled(), rng);
  std::vector<Tensor> images = {random_image(rng, 16, 16), random_image(rng, 16, 16)};
  const Tensor init = randn(rng, {2, 3, 16});

  auto loss_with = [&](const std::string& name, const Tensor& value, const Tensor& init_slots,
                       const std::vector<Tensor>& batch) {
    AutoencoderParams q = params;
    if (!name.empty())
      for (auto& [n, tensor] : named_parameters(q))
        if (n == name) *tensor = value;
    BatchStats stats;
    return run_autoencoder(batch, init_slots, 2, q, &stats).loss;
  };

  CHECK(grad_check([&](const Tensor& t) { return loss_with("", Tensor(), t, images); }, init,
                   1e-6, 32) < 1e-4);
  CHECK(grad_check(
            [&](const Tensor& t) {
              std::vector<Tensor> batch = {t, images[1]};
              return loss_with("", Tensor(), init, batch);
            },
            images[0], 1e-6, 32) < 1e-4);

  for (auto& [name, tensor] : named_parameters(params)) {
    CAPTURE(name);
    const double err = grad_check(
        [&, leaf = name](const Tensor& t) { return loss_with(leaf, t, init, images); }, *tensor,
        1e-6, 32);
    CHECK(err < 1e-4);
  }
}
