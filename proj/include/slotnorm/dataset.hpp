#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "slotnorm/rng.hpp"
#include "slotnorm/tensor.hpp"

namespace slotnorm {

enum class SpriteShape : std::uint8_t { Circle = 0, Square = 1, Triangle = 2 };

// Flat 2-D sprite scenes: colored shapes on a uniform background with exact
// per-pixel instance labels. Sizes are shape diameters/side lengths in
// pixels; colors live in [0,1] per channel.
struct SceneSpec {
  std::int64_t height = 32;
  std::int64_t width = 32;
  int min_objects = 1;
  int max_objects = 4;
  std::vector<SpriteShape> shapes{SpriteShape::Circle, SpriteShape::Square,
                                  SpriteShape::Triangle};
  double min_size = 8.0;
  double max_size = 14.0;
  std::vector<std::array<double, 3>> palette;
  std::array<double, 3> background{0.25, 0.25, 0.25};
  bool allow_occlusion = true;
  std::uint64_t seed = 0;
};

// 32x32 scenes with up to four objects and a ten-color palette whose
// channels are multiples of 1/4 (exactly representable as 32-bit floats, so
// split files round-trip losslessly).
SceneSpec default_scene_spec();

struct SceneSample {
  Tensor image;   // [H,W,3] in [-1,1]
  Tensor labels;  // [H,W] instance ids; 0 is background
  int object_count = 0;
};

// Contract checks: positive object range, sizes that fit the image, at
// least 8 distinct palette colors and one per possible object, label ids
// that fit the on-disk 8-bit encoding.
void validate(const SceneSpec& spec);

// Draws an object count uniformly in range, places shapes back-to-front
// (later shapes occlude earlier ones), and re-samples any object that ends
// up fully hidden or between pixel centers, so every instance id keeps at
// least one visible pixel. Colors are drawn without replacement. With
// allow_occlusion = false, placements are rejected until disjoint. A spec
// that cannot be satisfied within the retry budget raises an error.
SceneSample generate_scene(const SceneSpec& spec, Rng& rng);

// Seed for a named split (train/val/test), disjoint across names.
std::uint64_t derive_split_seed(std::uint64_t base_seed, const char* split_name);

// Generates candidates at per-index child seeds mix_seed(split_seed, index)
// and keeps the first n whose object count is at most max_objects. The
// per-index seeding makes parallel and serial generation identical.
std::vector<SceneSample> make_split(const SceneSpec& spec, std::int64_t n, int max_objects,
                                    std::uint64_t split_seed);

// With probability 1/2 flips image and labels together along the width
// axis; always consumes exactly one uniform draw.
SceneSample augment_hflip(const SceneSample& sample, Rng& rng);

// Binary split files: fixed header with a spec echo, then packed samples
// (f32 image, u8 labels). See docs/formats.md.
void save_split(const std::string& path, const SceneSpec& spec,
                const std::vector<SceneSample>& samples);
std::pair<SceneSpec, std::vector<SceneSample>> load_split(const std::string& path);

}  // namespace slotnorm
