#include "slotnorm/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <exception>
#include <fstream>
#include <mutex>
#include <numeric>
#include <set>
#include <stdexcept>

#include "slotnorm/threads.hpp"

namespace slotnorm {

namespace {

constexpr int kPlacementRetries = 100;

struct Sprite {
  SpriteShape shape;
  double cx, cy, size;
  int color;
};

bool covers(const Sprite& s, double px, double py) {
  const double dx = px - s.cx, dy = py - s.cy, h = s.size / 2.0;
  switch (s.shape) {
    case SpriteShape::Circle:
      return dx * dx + dy * dy <= h * h;
    case SpriteShape::Square:
      return std::abs(dx) <= h && std::abs(dy) <= h;
    case SpriteShape::Triangle: {
      // Apex at the top, base at the bottom; half-plane tests against the
      // three edges (image y grows downward).
      if (dy < -h || dy > h) return false;
      const double half_width_at = (dy + h) / 2.0;  // width/2 at this height
      return std::abs(dx) <= half_width_at;
    }
  }
  return false;
}

// Paints sprites back-to-front into an instance-id grid; later sprites win.
void rasterize(const SceneSpec& spec, const std::vector<Sprite>& sprites,
               std::vector<int>& grid) {
  std::fill(grid.begin(), grid.end(), 0);
  for (std::size_t i = 0; i < sprites.size(); ++i) {
    const Sprite& s = sprites[i];
    const std::int64_t y0 = std::max<std::int64_t>(0, std::int64_t(s.cy - s.size / 2 - 1));
    const std::int64_t y1 = std::min(spec.height, std::int64_t(s.cy + s.size / 2 + 2));
    const std::int64_t x0 = std::max<std::int64_t>(0, std::int64_t(s.cx - s.size / 2 - 1));
    const std::int64_t x1 = std::min(spec.width, std::int64_t(s.cx + s.size / 2 + 2));
    for (std::int64_t y = y0; y < y1; ++y)
      for (std::int64_t x = x0; x < x1; ++x)
        if (covers(s, x + 0.5, y + 0.5)) grid[y * spec.width + x] = static_cast<int>(i) + 1;
  }
}

Sprite sample_sprite(const SceneSpec& spec, Rng& rng, int color) {
  Sprite s;
  s.shape = spec.shapes[static_cast<std::size_t>(rng.below(spec.shapes.size()))];
  s.size = rng.uniform(spec.min_size, spec.max_size);
  const double half = s.size / 2.0;
  s.cx = rng.uniform(half, static_cast<double>(spec.width) - half);
  s.cy = rng.uniform(half, static_cast<double>(spec.height) - half);
  s.color = color;
  return s;
}

bool overlaps_any(const SceneSpec& spec, const Sprite& s, const std::vector<int>& grid) {
  for (std::int64_t y = 0; y < spec.height; ++y)
    for (std::int64_t x = 0; x < spec.width; ++x)
      if (grid[y * spec.width + x] != 0 && covers(s, x + 0.5, y + 0.5)) return true;
  return false;
}

// Binary little-endian primitives for the split files.
template <typename T>
void write_raw(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_raw(std::istream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw std::runtime_error("split file truncated");
  return v;
}

constexpr char kMagic[4] = {'S', 'N', 'D', 'S'};
constexpr std::uint32_t kVersion = 1;

}  // namespace

SceneSpec default_scene_spec() {
  SceneSpec spec;
  spec.palette = {
      {1.00, 0.00, 0.00}, {0.00, 1.00, 0.00}, {0.00, 0.00, 1.00}, {1.00, 1.00, 0.00},
      {1.00, 0.00, 1.00}, {0.00, 1.00, 1.00}, {1.00, 0.50, 0.00}, {0.50, 0.00, 1.00},
      {0.75, 0.75, 0.75}, {0.50, 0.25, 0.00},
  };
  return spec;
}

void validate(const SceneSpec& spec) {
  require(spec.height >= 1 && spec.width >= 1, "image must have positive extent");
  require(spec.min_objects >= 1, "need at least one object per scene");
  require(spec.max_objects >= spec.min_objects, "object count range is inverted");
  require(spec.max_objects <= 255, "instance ids must fit 8 bits");
  require(!spec.shapes.empty(), "need at least one shape kind");
  require(spec.min_size > 0.0 && spec.min_size <= spec.max_size, "size range is invalid");
  require(spec.max_size <= static_cast<double>(std::min(spec.height, spec.width)),
          "largest sprite must fit inside the image");
  std::set<std::array<double, 3>> distinct(spec.palette.begin(), spec.palette.end());
  require(distinct.size() >= 8, "palette needs at least 8 distinct colors");
  require(spec.palette.size() >= static_cast<std::size_t>(spec.max_objects),
          "palette needs one color per possible object");
  for (const auto& c : spec.palette)
    require(c[0] >= 0 && c[0] <= 1 && c[1] >= 0 && c[1] <= 1 && c[2] >= 0 && c[2] <= 1,
            "palette channels must lie in [0,1]");
}

SceneSample generate_scene(const SceneSpec& spec, Rng& rng) {
  validate(spec);
  const int count = static_cast<int>(rng.uniform_int(spec.min_objects, spec.max_objects));

  // Distinct palette colors via a partial shuffle.
  std::vector<int> colors(spec.palette.size());
  std::iota(colors.begin(), colors.end(), 0);
  for (int i = 0; i < count; ++i) {
    const std::size_t j = static_cast<std::size_t>(i) +
                          static_cast<std::size_t>(rng.below(colors.size() - i));
    std::swap(colors[static_cast<std::size_t>(i)], colors[j]);
  }

  std::vector<int> grid(static_cast<std::size_t>(spec.height * spec.width));
  std::vector<Sprite> sprites;
  sprites.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    Sprite s = sample_sprite(spec, rng, colors[static_cast<std::size_t>(i)]);
    if (!spec.allow_occlusion) {
      rasterize(spec, sprites, grid);
      int attempts = 0;
      while (overlaps_any(spec, s, grid)) {
        if (++attempts > kPlacementRetries)
          throw std::runtime_error("could not place a non-overlapping object");
        s = sample_sprite(spec, rng, colors[static_cast<std::size_t>(i)]);
      }
    }
    sprites.push_back(s);
  }

  // Re-sample any object that ends up with no visible pixel (fully occluded
  // or fallen between pixel centers) until all ids survive.
  std::vector<std::int64_t> visible(static_cast<std::size_t>(count));
  for (int round = 0;; ++round) {
    rasterize(spec, sprites, grid);
    std::fill(visible.begin(), visible.end(), 0);
    for (const int id : grid)
      if (id > 0) ++visible[static_cast<std::size_t>(id - 1)];
    bool all_visible = true;
    for (int i = 0; i < count; ++i) {
      if (visible[static_cast<std::size_t>(i)] > 0) continue;
      all_visible = false;
      sprites[static_cast<std::size_t>(i)] =
          sample_sprite(spec, rng, sprites[static_cast<std::size_t>(i)].color);
    }
    if (all_visible) break;
    if (round >= kPlacementRetries)
      throw std::runtime_error("could not keep every object visible");
  }

  Array image(spec.height * spec.width * 3);
  Array labels(spec.height * spec.width);
  for (std::int64_t p = 0; p < spec.height * spec.width; ++p) {
    const int id = grid[static_cast<std::size_t>(p)];
    const std::array<double, 3>& c =
        id == 0 ? spec.background
                : spec.palette[static_cast<std::size_t>(sprites[static_cast<std::size_t>(id - 1)].color)];
    for (int ch = 0; ch < 3; ++ch) image[p * 3 + ch] = 2.0 * c[static_cast<std::size_t>(ch)] - 1.0;
    labels[p] = static_cast<double>(id);
  }

  SceneSample sample;
  sample.image = Tensor::from_array({spec.height, spec.width, 3}, std::move(image));
  sample.labels = Tensor::from_array({spec.height, spec.width}, std::move(labels));
  sample.object_count = count;
  return sample;
}

std::uint64_t derive_split_seed(std::uint64_t base_seed, const char* split_name) {
  return mix_seed(base_seed, hash_name(split_name));
}

std::vector<SceneSample> make_split(const SceneSpec& spec, std::int64_t n, int max_objects,
                                    std::uint64_t split_seed) {
  validate(spec);
  require(n >= 0, "sample count must be non-negative");
  require(max_objects <= spec.max_objects, "object cap exceeds the generation range");
  require(max_objects >= spec.min_objects, "object cap would reject every sample");

  std::vector<SceneSample> out;
  out.reserve(static_cast<std::size_t>(n));
  std::int64_t next_index = 0;
  while (static_cast<std::int64_t>(out.size()) < n) {
    const std::int64_t block = std::max<std::int64_t>(64, n - static_cast<std::int64_t>(out.size()));
    std::vector<SceneSample> batch(static_cast<std::size_t>(block));
    std::exception_ptr failure;
    std::mutex failure_mutex;
    parallel_for(block, 8, [&](std::int64_t begin, std::int64_t end) {
      try {
        for (std::int64_t i = begin; i < end; ++i) {
          Rng child(mix_seed(split_seed, static_cast<std::uint64_t>(next_index + i)));
          batch[static_cast<std::size_t>(i)] = generate_scene(spec, child);
        }
      } catch (...) {
        std::scoped_lock lock(failure_mutex);
        if (!failure) failure = std::current_exception();
      }
    });
    if (failure) std::rethrow_exception(failure);
    for (auto& sample : batch) {
      if (static_cast<std::int64_t>(out.size()) >= n) break;
      if (sample.object_count <= max_objects) out.push_back(std::move(sample));
    }
    next_index += block;
  }
  return out;
}

SceneSample augment_hflip(const SceneSample& sample, Rng& rng) {
  const bool flip = rng.uniform() < 0.5;
  if (!flip) return sample;
  const std::int64_t h = sample.image.dim(0), w = sample.image.dim(1);
  Array image(h * w * 3);
  Array labels(h * w);
  for (std::int64_t y = 0; y < h; ++y) {
    for (std::int64_t x = 0; x < w; ++x) {
      const std::int64_t src = y * w + (w - 1 - x), dst = y * w + x;
      for (int ch = 0; ch < 3; ++ch) image[dst * 3 + ch] = sample.image.at(src * 3 + ch);
      labels[dst] = sample.labels.at(src);
    }
  }
  SceneSample flipped;
  flipped.image = Tensor::from_array({h, w, 3}, std::move(image));
  flipped.labels = Tensor::from_array({h, w}, std::move(labels));
  flipped.object_count = sample.object_count;
  return flipped;
}

void save_split(const std::string& path, const SceneSpec& spec,
                const std::vector<SceneSample>& samples) {
  validate(spec);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open split file for writing: " + path);
  out.write(kMagic, 4);
  write_raw(out, kVersion);
  write_raw(out, static_cast<std::uint32_t>(samples.size()));
  write_raw(out, static_cast<std::uint32_t>(spec.height));
  write_raw(out, static_cast<std::uint32_t>(spec.width));
  write_raw(out, static_cast<std::uint32_t>(spec.min_objects));
  write_raw(out, static_cast<std::uint32_t>(spec.max_objects));
  write_raw(out, static_cast<std::uint32_t>(spec.shapes.size()));
  for (const SpriteShape s : spec.shapes) write_raw(out, static_cast<std::uint8_t>(s));
  write_raw(out, spec.min_size);
  write_raw(out, spec.max_size);
  write_raw(out, static_cast<std::uint32_t>(spec.palette.size()));
  for (const auto& c : spec.palette)
    for (int ch = 0; ch < 3; ++ch) write_raw(out, static_cast<float>(c[static_cast<std::size_t>(ch)]));
  for (int ch = 0; ch < 3; ++ch)
    write_raw(out, static_cast<float>(spec.background[static_cast<std::size_t>(ch)]));
  write_raw(out, static_cast<std::uint8_t>(spec.allow_occlusion ? 1 : 0));
  write_raw(out, spec.seed);

  for (const SceneSample& s : samples) {
    require(s.image.ndim() == 3 && s.image.dim(0) == spec.height && s.image.dim(1) == spec.width &&
                s.image.dim(2) == 3,
            "sample image does not match the spec extent");
    write_raw(out, static_cast<std::uint32_t>(s.object_count));
    for (std::int64_t i = 0; i < s.image.size(); ++i)
      write_raw(out, static_cast<float>(s.image.at(i)));
    for (std::int64_t i = 0; i < s.labels.size(); ++i)
      write_raw(out, static_cast<std::uint8_t>(s.labels.at(i)));
  }
  if (!out) throw std::runtime_error("failed writing split file: " + path);
}

std::pair<SceneSpec, std::vector<SceneSample>> load_split(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open split file: " + path);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0)
    throw std::runtime_error("not a split file: " + path);
  const std::uint32_t version = read_raw<std::uint32_t>(in);
  if (version != kVersion)
    throw std::runtime_error("unsupported split file version " + std::to_string(version));

  const std::uint32_t n = read_raw<std::uint32_t>(in);
  SceneSpec spec;
  spec.height = read_raw<std::uint32_t>(in);
  spec.width = read_raw<std::uint32_t>(in);
  spec.min_objects = static_cast<int>(read_raw<std::uint32_t>(in));
  spec.max_objects = static_cast<int>(read_raw<std::uint32_t>(in));
  spec.shapes.resize(read_raw<std::uint32_t>(in));
  for (SpriteShape& s : spec.shapes) s = static_cast<SpriteShape>(read_raw<std::uint8_t>(in));
  spec.min_size = read_raw<double>(in);
  spec.max_size = read_raw<double>(in);
  spec.palette.resize(read_raw<std::uint32_t>(in));
  for (auto& c : spec.palette)
    for (int ch = 0; ch < 3; ++ch) c[static_cast<std::size_t>(ch)] = read_raw<float>(in);
  for (int ch = 0; ch < 3; ++ch)
    spec.background[static_cast<std::size_t>(ch)] = read_raw<float>(in);
  spec.allow_occlusion = read_raw<std::uint8_t>(in) != 0;
  spec.seed = read_raw<std::uint64_t>(in);
  validate(spec);

  std::vector<SceneSample> samples(n);
  for (SceneSample& s : samples) {
    s.object_count = static_cast<int>(read_raw<std::uint32_t>(in));
    Array image(spec.height * spec.width * 3);
    for (std::int64_t i = 0; i < image.size(); ++i) image[i] = read_raw<float>(in);
    Array labels(spec.height * spec.width);
    for (std::int64_t i = 0; i < labels.size(); ++i)
      labels[i] = static_cast<double>(read_raw<std::uint8_t>(in));
    s.image = Tensor::from_array({spec.height, spec.width, 3}, std::move(image));
    s.labels = Tensor::from_array({spec.height, spec.width}, std::move(labels));
  }
  return {spec, std::move(samples)};
}

}  // namespace slotnorm
