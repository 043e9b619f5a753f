#include "slotnorm/harness.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <limits>
#include <set>
#include <stdexcept>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"
#include "slotnorm/metrics.hpp"
#include "slotnorm/threads.hpp"
#include "slotnorm/vmf_em.hpp"

namespace slotnorm {

namespace {

std::string fmt_g17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string run_basename(const ExperimentConfig& config, std::uint64_t seed) {
  return config.out_dir + "/" + config.variant + "_seed" + std::to_string(seed);
}

Tensor randn(Rng& rng, Shape shape) {
  Array a(shape_size(shape));
  for (std::int64_t i = 0; i < a.size(); ++i) a[i] = rng.normal();
  return Tensor::from_array(std::move(shape), std::move(a));
}

// Fresh parameters initialize layer norms at gain 1 / bias 0, which is the
// measure-zero case where the affine offset vanishes; the theory checks need
// a generic draw.
LayerNormParams random_layernorm(Rng& rng, std::int64_t d) {
  Array alpha(d), beta(d);
  for (std::int64_t i = 0; i < d; ++i) {
    alpha[i] = 0.5 + rng.uniform();
    beta[i] = rng.normal();
  }
  return {Tensor::from_array({d}, std::move(alpha)), Tensor::from_array({d}, std::move(beta))};
}

}  // namespace

double default_peak_lr() { return 4.0 * std::pow(0.5, 0.1) * 1e-4; }

NormalizationMode variant_mode(const std::string& variant) {
  if (variant == "baseline") return NormalizationMode::weighted_mean();
  if (variant == "layer") return NormalizationMode::layer_normed();
  if (variant == "weighted_sum") return NormalizationMode::weighted_sum_tokens();
  if (variant == "batch") return NormalizationMode::batch_scaled();
  throw std::invalid_argument("unknown variant: " + variant +
                              " (expected baseline, layer, weighted_sum, or batch)");
}

SceneSpec scene_spec_for(const ExperimentConfig& config) {
  SceneSpec spec = default_scene_spec();
  spec.height = spec.width = config.image_size;
  spec.min_objects = config.min_objects;
  spec.max_objects = config.max_objects;
  spec.min_size = config.sprite_min;
  spec.max_size = config.sprite_max;
  spec.allow_occlusion = config.allow_occlusion;
  spec.seed = config.data_seed;
  return spec;
}

AutoencoderConfig model_config_for(const ExperimentConfig& config) {
  AutoencoderConfig model;
  model.height = model.width = config.image_size;
  model.channels = config.channels;
  model.slot_dim = config.slot_dim;
  model.slot_mlp_hidden = config.slot_mlp_hidden;
  model.broadcast = config.broadcast;
  return model;
}

void validate(const ExperimentConfig& config) {
  (void)variant_mode(config.variant);
  require(config.min_objects >= 1, "min_objects must be at least 1");
  require(config.max_objects >= config.min_objects, "max_objects must be at least min_objects");
  require(!config.eval_slots.empty(), "at least one evaluation slot count is required");
  for (const std::int64_t k : config.eval_slots)
    require(k >= 1, "evaluation slot counts must be at least 1");
  require(!config.seeds.empty(), "at least one seed is required");
  require(config.train_slots >= 1, "train_slots must be at least 1");
  require(config.train_iters >= 1 && config.eval_iters >= 1,
          "iteration counts must be at least 1");
  require(config.peak_lr > 0.0, "peak_lr must be positive");
  require(config.warmup_steps >= 1, "warmup_steps must be at least 1");
  require(config.half_life_steps >= 1, "half_life_steps must be at least 1");
  require(config.batch_size >= 1, "batch_size must be at least 1");
  require(config.total_steps >= 1, "total_steps must be at least 1");
  require(config.log_every >= 1, "log_every must be at least 1");
  require(config.train_scenes >= 1 && config.val_scenes >= 1 && config.eval_scenes >= 1,
          "every split needs at least one scene");
  require(config.fail_threshold >= 0.0 && config.fail_threshold <= 1.0,
          "fail_threshold must lie in [0,1]");
  require(!config.out_dir.empty(), "out_dir must not be empty");
  validate(model_config_for(config));
  validate(scene_spec_for(config));
}

std::string experiment_config_to_json(const ExperimentConfig& c) {
  nlohmann::json j;
  j["variant"] = c.variant;
  j["min_objects"] = c.min_objects;
  j["max_objects"] = c.max_objects;
  j["image_size"] = c.image_size;
  j["sprite_min"] = c.sprite_min;
  j["sprite_max"] = c.sprite_max;
  j["allow_occlusion"] = c.allow_occlusion;
  j["data_seed"] = c.data_seed;
  j["train_scenes"] = c.train_scenes;
  j["val_scenes"] = c.val_scenes;
  j["eval_scenes"] = c.eval_scenes;
  j["channels"] = c.channels;
  j["slot_dim"] = c.slot_dim;
  j["slot_mlp_hidden"] = c.slot_mlp_hidden;
  j["broadcast"] = c.broadcast;
  j["train_slots"] = c.train_slots;
  j["train_iters"] = c.train_iters;
  j["eval_iters"] = c.eval_iters;
  j["peak_lr"] = c.peak_lr;
  j["warmup_steps"] = c.warmup_steps;
  j["half_life_steps"] = c.half_life_steps;
  j["batch_size"] = c.batch_size;
  j["total_steps"] = c.total_steps;
  j["log_every"] = c.log_every;
  j["eval_slots"] = c.eval_slots;
  j["eval_object_breakdown"] = c.eval_object_breakdown;
  j["seeds"] = c.seeds;
  j["fail_threshold"] = c.fail_threshold;
  j["out_dir"] = c.out_dir;
  return j.dump(2) + "\n";
}

ExperimentConfig experiment_config_from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(std::string("config is not valid JSON: ") + e.what());
  }
  require(j.is_object(), "config must be a JSON object");

  ExperimentConfig c;
  const auto read = [&](const char* key, auto& field) {
    if (!j.contains(key)) return;
    try {
      field = j.at(key).get<std::decay_t<decltype(field)>>();
    } catch (const nlohmann::json::exception&) {
      throw std::invalid_argument(std::string("config key has the wrong type: ") + key);
    }
    j.erase(key);
  };
  read("variant", c.variant);
  read("min_objects", c.min_objects);
  read("max_objects", c.max_objects);
  read("image_size", c.image_size);
  read("sprite_min", c.sprite_min);
  read("sprite_max", c.sprite_max);
  read("allow_occlusion", c.allow_occlusion);
  read("data_seed", c.data_seed);
  read("train_scenes", c.train_scenes);
  read("val_scenes", c.val_scenes);
  read("eval_scenes", c.eval_scenes);
  read("channels", c.channels);
  read("slot_dim", c.slot_dim);
  read("slot_mlp_hidden", c.slot_mlp_hidden);
  read("broadcast", c.broadcast);
  read("train_slots", c.train_slots);
  read("train_iters", c.train_iters);
  read("eval_iters", c.eval_iters);
  read("peak_lr", c.peak_lr);
  read("warmup_steps", c.warmup_steps);
  read("half_life_steps", c.half_life_steps);
  read("batch_size", c.batch_size);
  read("total_steps", c.total_steps);
  read("log_every", c.log_every);
  read("eval_slots", c.eval_slots);
  read("eval_object_breakdown", c.eval_object_breakdown);
  read("seeds", c.seeds);
  read("fail_threshold", c.fail_threshold);
  read("out_dir", c.out_dir);
  if (!j.empty()) throw std::invalid_argument("unknown config key: " + j.begin().key());
  return c;
}

std::vector<SceneSample> make_named_split(const ExperimentConfig& config, const char* name) {
  validate(config);
  const std::string split = name == nullptr ? "" : name;
  std::int64_t count = 0;
  if (split == "train") {
    count = config.train_scenes;
  } else if (split == "val") {
    count = config.val_scenes;
  } else if (split == "test") {
    count = config.eval_scenes;
  } else {
    throw std::invalid_argument("unknown split name: " + split);
  }
  return make_split(scene_spec_for(config), count, config.max_objects,
                    derive_split_seed(config.data_seed, split.c_str()));
}

double schedule_lr(std::int64_t step, double peak, std::int64_t warmup_steps,
                   std::int64_t half_life_steps) {
  require(step >= 0, "step must be non-negative");
  require(peak > 0.0, "peak learning rate must be positive");
  require(warmup_steps >= 1 && half_life_steps >= 1, "schedule lengths must be at least 1");
  const double warm =
      std::min(static_cast<double>(step) / static_cast<double>(warmup_steps), 1.0);
  const double past = static_cast<double>(std::max<std::int64_t>(step - warmup_steps, 0)) /
                      static_cast<double>(half_life_steps);
  return peak * warm * std::exp2(-past);
}

double median(std::vector<double> values) {
  require(!values.empty(), "median requires at least one value");
  std::sort(values.begin(), values.end());
  const std::size_t n = values.size();
  if (n % 2 == 1) return values[n / 2];
  return 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

Adam::Adam(std::vector<std::pair<std::string, Tensor*>> params, double beta1, double beta2,
           double eps)
    : params_(std::move(params)), beta1_(beta1), beta2_(beta2), eps_(eps) {
  require(beta1_ > 0.0 && beta1_ < 1.0 && beta2_ > 0.0 && beta2_ < 1.0,
          "Adam betas must lie in (0,1)");
  require(eps_ > 0.0, "Adam eps must be positive");
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (const auto& [name, tensor] : params_) {
    require(tensor != nullptr && tensor->defined(), "Adam parameters must be defined tensors");
    m_.push_back(Array::Zero(tensor->size()));
    v_.push_back(Array::Zero(tensor->size()));
  }
}

void Adam::step(double lr, const std::vector<Array>& grads) {
  require(grads.size() == params_.size(), "one gradient per parameter is required");
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor& p = *params_[i].second;
    require(grads[i].size() == p.size(), "gradient size mismatch for " + params_[i].first);
    m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * grads[i];
    v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * grads[i].square();
    const Array update = (m_[i] / bc1) / ((v_[i] / bc2).sqrt() + eps_);
    p = Tensor::from_array(p.shape(), p.flat() - lr * update);
  }
}

namespace {

struct SceneScore {
  double f_ari = 0.0, ari = 0.0, l2 = 0.0;
  int objects = 0;
};

// Forward passes are independent across scenes; the per-scene seed keeps
// results identical for any worker count. Inference only reads the EMA
// statistics, so sharing one BatchStats copy is safe.
std::vector<SceneScore> score_scenes(const AutoencoderParams& params, const BatchStats& stats,
                                     const std::vector<SceneSample>& scenes,
                                     std::int64_t slot_count, std::int64_t iters,
                                     std::uint64_t base_seed) {
  BatchStats eval_stats = stats;
  eval_stats.training = false;
  std::vector<SceneScore> scores(scenes.size());
  parallel_for(static_cast<std::int64_t>(scenes.size()), 1,
               [&](std::int64_t begin, std::int64_t end) {
                 for (std::int64_t i = begin; i < end; ++i) {
                   Rng rng(mix_seed(base_seed, static_cast<std::uint64_t>(i)));
                   const Tensor init =
                       sample_initial_slots(params.slot_attention, 1, slot_count, rng);
                   const AutoencoderOutput out =
                       run_autoencoder({scenes[i].image}, init, iters, params, &eval_stats);
                   const Tensor pred = extract_segmentation(out.masks[0]);
                   scores[i].f_ari = foreground_ari(pred, scenes[i].labels);
                   scores[i].ari = adjusted_rand_index(contingency(pred, scenes[i].labels));
                   scores[i].l2 = out.loss.value();
                   scores[i].objects = scenes[i].object_count;
                 }
               });
  return scores;
}

}  // namespace

TrainResult train(const ExperimentConfig& config, std::uint64_t seed) {
  validate(config);
  const auto train_set = make_named_split(config, "train");
  const auto val_set = make_named_split(config, "val");

  Rng init_rng(mix_seed(seed, hash_name("init")));
  TrainResult result;
  result.params =
      make_autoencoder_params(model_config_for(config), variant_mode(config.variant), init_rng);
  result.stats.momentum = result.params.slot_attention.mode.momentum;

  Adam optimizer(named_parameters(result.params));
  Rng step_rng(mix_seed(seed, hash_name("steps")));
  double last_loss = 0.0;
  std::int64_t last_step = -1;
  for (std::int64_t t = 0; t < config.total_steps; ++t) {
    std::vector<Tensor> images;
    images.reserve(config.batch_size);
    for (std::int64_t b = 0; b < config.batch_size; ++b) {
      const SceneSample& sample = train_set[step_rng.below(train_set.size())];
      images.push_back(augment_hflip(sample, step_rng).image);
    }

    Tape tape;
    AutoencoderParams live = result.params;
    auto live_named = named_parameters(live);
    for (auto& [name, tensor] : live_named) *tensor = tape.leaf(*tensor);
    result.stats.training = true;
    const Tensor init =
        sample_initial_slots(live.slot_attention, config.batch_size, config.train_slots, step_rng);
    const AutoencoderOutput out =
        run_autoencoder(images, init, config.train_iters, live, &result.stats);
    if (live.slot_attention.mode.variant == NormVariant::BatchScaled)
      ema_update(result.stats, result.stats.m.value(), result.stats.v.value());

    const double loss = out.loss.value();
    if (!std::isfinite(loss)) {
      throw std::runtime_error(
          "training diverged at step " + std::to_string(t) + "; last finite loss " +
          (last_step < 0 ? std::string("none")
                         : fmt_g17(last_loss) + " at step " + std::to_string(last_step)));
    }
    if (t % config.log_every == 0 || t + 1 == config.total_steps) {
      result.logged_steps.push_back(t);
      result.logged_loss.push_back(loss);
    }

    tape.backward(out.loss);
    std::vector<Array> grads;
    grads.reserve(live_named.size());
    for (auto& [name, tensor] : live_named) grads.push_back(tape.grad(*tensor));
    optimizer.step(schedule_lr(t, config.peak_lr, config.warmup_steps, config.half_life_steps),
                   grads);
    last_loss = loss;
    last_step = t;
  }
  result.final_loss = last_loss;

  // End-of-training validation at the training slot count; this is the value
  // the failed-run policy reads.
  const std::uint64_t val_base =
      mix_seed(mix_seed(seed, hash_name("val")), static_cast<std::uint64_t>(config.train_slots));
  const auto val_scores =
      score_scenes(result.params, result.stats, val_set, config.train_slots, config.eval_iters,
                   val_base);
  for (const SceneScore& s : val_scores) {
    result.val_f_ari += s.f_ari;
    result.val_ari += s.ari;
    result.val_l2 += s.l2;
  }
  const double n_val = static_cast<double>(val_scores.size());
  result.val_f_ari /= n_val;
  result.val_ari /= n_val;
  result.val_l2 /= n_val;
  result.failed = result.val_f_ari < config.fail_threshold;

  std::filesystem::create_directories(config.out_dir);
  const std::string base = run_basename(config, seed);
  const Checkpoint checkpoint =
      to_checkpoint(result.params, result.stats, config, seed,
                    {{"steps", std::to_string(config.total_steps)},
                     {"final_loss", fmt_g17(result.final_loss)},
                     {"val_f_ari", fmt_g17(result.val_f_ari)},
                     {"val_ari", fmt_g17(result.val_ari)},
                     {"val_l2", fmt_g17(result.val_l2)},
                     {"failed", result.failed ? "1" : "0"}});
  result.checkpoint_file = base + ".ckpt";
  save_checkpoint(result.checkpoint_file, checkpoint);

  nlohmann::json log;
  log["variant"] = config.variant;
  log["seed"] = seed;
  log["max_objects"] = config.max_objects;
  log["train_slots"] = config.train_slots;
  log["total_steps"] = config.total_steps;
  log["logged_steps"] = result.logged_steps;
  log["loss"] = result.logged_loss;
  log["final_loss"] = result.final_loss;
  log["val_f_ari"] = result.val_f_ari;
  log["val_ari"] = result.val_ari;
  log["val_l2"] = result.val_l2;
  log["failed"] = result.failed;
  result.log_file = base + "_log.json";
  write_text_file(result.log_file, log.dump(2) + "\n");
  return result;
}

std::vector<SweepResult> evaluate_sweep(const AutoencoderParams& params, const BatchStats& stats,
                                        const ExperimentConfig& config, std::uint64_t seed) {
  validate(config);
  require(params.slot_attention.mode.variant == variant_mode(config.variant).variant,
          "model normalization does not match the config variant");
  const auto test_set = make_named_split(config, "test");

  std::vector<SweepResult> results;
  for (const std::int64_t slot_count : config.eval_slots) {
    const std::uint64_t base =
        mix_seed(mix_seed(seed, hash_name("eval")), static_cast<std::uint64_t>(slot_count));
    const auto scores =
        score_scenes(params, stats, test_set, slot_count, config.eval_iters, base);

    const auto add_row = [&](int objects) {
      SweepResult r;
      r.variant = config.variant;
      r.seed = seed;
      r.max_objects = config.max_objects;
      r.train_slots = config.train_slots;
      r.eval_slots = slot_count;
      r.eval_objects = objects;
      for (const SceneScore& s : scores) {
        if (objects != 0 && s.objects != objects) continue;
        r.f_ari += s.f_ari;
        r.ari += s.ari;
        r.l2 += s.l2;
        ++r.n_scenes;
      }
      if (r.n_scenes == 0) return;  // object count absent from the split
      const double n = static_cast<double>(r.n_scenes);
      r.f_ari /= n;
      r.ari /= n;
      r.l2 /= n;
      results.push_back(std::move(r));
    };
    add_row(0);
    if (config.eval_object_breakdown)
      for (int c = config.min_objects; c <= config.max_objects; ++c) add_row(c);
  }
  return results;
}

namespace {

const std::array<const char*, 10> kSweepHeader = {
    "variant", "seed", "O", "K", "eval_slots", "eval_objects", "f_ari", "ari", "l2", "n_scenes"};

}  // namespace

std::vector<std::vector<std::string>> sweep_to_rows(const std::vector<SweepResult>& results) {
  std::vector<std::vector<std::string>> rows;
  rows.reserve(results.size() + 1);
  rows.emplace_back(kSweepHeader.begin(), kSweepHeader.end());
  for (const SweepResult& r : results) {
    rows.push_back({r.variant, std::to_string(r.seed), std::to_string(r.max_objects),
                    std::to_string(r.train_slots), std::to_string(r.eval_slots),
                    r.eval_objects == 0 ? std::string("all") : std::to_string(r.eval_objects),
                    fmt_g17(r.f_ari), fmt_g17(r.ari), fmt_g17(r.l2),
                    std::to_string(r.n_scenes)});
  }
  return rows;
}

std::vector<SweepResult> sweep_from_rows(const std::vector<std::vector<std::string>>& rows) {
  if (rows.empty() || rows.front().size() != kSweepHeader.size() ||
      !std::equal(kSweepHeader.begin(), kSweepHeader.end(), rows.front().begin())) {
    throw std::runtime_error("sweep table must start with the standard header");
  }
  std::vector<SweepResult> out;
  out.reserve(rows.size() - 1);
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const auto& row = rows[i];
    if (row.size() != kSweepHeader.size())
      throw std::runtime_error("sweep row " + std::to_string(i) + " has the wrong field count");
    try {
      SweepResult r;
      r.variant = row[0];
      r.seed = std::stoull(row[1]);
      r.max_objects = std::stoi(row[2]);
      r.train_slots = std::stoll(row[3]);
      r.eval_slots = std::stoll(row[4]);
      r.eval_objects = row[5] == "all" ? 0 : std::stoi(row[5]);
      r.f_ari = std::stod(row[6]);
      r.ari = std::stod(row[7]);
      r.l2 = std::stod(row[8]);
      r.n_scenes = std::stoll(row[9]);
      out.push_back(std::move(r));
    } catch (const std::logic_error&) {
      throw std::runtime_error("malformed sweep row " + std::to_string(i));
    }
  }
  return out;
}

void write_sweep_csv(const std::string& path, const std::vector<SweepResult>& results) {
  write_text_file(path, csv_encode(sweep_to_rows(results)));
}

std::vector<SweepResult> read_sweep_csv(const std::string& path) {
  return sweep_from_rows(csv_decode(read_text_file(path)));
}

namespace {

double metric_of(const SweepResult& r, const std::string& metric) {
  if (metric == "f_ari") return r.f_ari;
  if (metric == "ari") return r.ari;
  if (metric == "l2") return r.l2;
  throw std::invalid_argument("unknown metric: " + metric);
}

std::string variant_color(const std::string& variant, std::size_t order) {
  if (variant == "baseline") return "#1f77b4";
  if (variant == "layer") return "#ff7f0e";
  if (variant == "weighted_sum") return "#2ca02c";
  if (variant == "batch") return "#d62728";
  const std::array<const char*, 4> extras = {"#9467bd", "#8c564b", "#e377c2", "#7f7f7f"};
  return extras[order % extras.size()];
}

std::set<std::pair<std::string, std::uint64_t>> failed_runs(
    const std::vector<SweepResult>& results, double fail_threshold) {
  std::set<std::pair<std::string, std::uint64_t>> failed;
  for (const SweepResult& r : results) {
    if (r.eval_objects == 0 && r.eval_slots == r.train_slots && r.f_ari < fail_threshold)
      failed.insert({r.variant, r.seed});
  }
  return failed;
}

}  // namespace

std::vector<ReportSeries> report_series(const std::vector<SweepResult>& results,
                                        const std::string& metric, bool vs_objects,
                                        double fail_threshold) {
  const auto failed = failed_runs(results, fail_threshold);
  std::vector<std::string> variants;
  for (const SweepResult& r : results) {
    if (failed.count({r.variant, r.seed})) continue;
    if (std::find(variants.begin(), variants.end(), r.variant) == variants.end())
      variants.push_back(r.variant);
  }

  std::vector<ReportSeries> series;
  for (const std::string& variant : variants) {
    std::map<double, std::vector<double>> cells;
    for (const SweepResult& r : results) {
      if (r.variant != variant || failed.count({r.variant, r.seed})) continue;
      if (vs_objects) {
        if (r.eval_objects == 0 || r.eval_slots != r.train_slots) continue;
        cells[static_cast<double>(r.eval_objects)].push_back(metric_of(r, metric));
      } else {
        if (r.eval_objects != 0) continue;
        cells[static_cast<double>(r.eval_slots)].push_back(metric_of(r, metric));
      }
    }
    if (cells.empty()) continue;
    ReportSeries s;
    s.variant = variant;
    for (const auto& [x, values] : cells) {
      s.x.push_back(x);
      s.med.push_back(median(values));
      s.lo.push_back(*std::min_element(values.begin(), values.end()));
      s.hi.push_back(*std::max_element(values.begin(), values.end()));
    }
    series.push_back(std::move(s));
  }
  return series;
}

void emit_report(const std::vector<SweepResult>& results, const std::string& out_dir,
                 double fail_threshold) {
  require(!results.empty(), "emit_report requires at least one result");
  std::filesystem::create_directories(out_dir);
  write_sweep_csv(out_dir + "/results.csv", results);

  const auto write_plot = [&](const std::string& file, const std::string& metric,
                              bool vs_objects, const std::string& title,
                              const std::string& x_label, const std::string& y_label) {
    const auto series = report_series(results, metric, vs_objects, fail_threshold);
    if (series.empty()) return;  // every contributing run failed; the CSV still has them
    PlotSpec spec;
    spec.title = title;
    spec.x_label = x_label;
    spec.y_label = y_label;
    for (std::size_t i = 0; i < series.size(); ++i) {
      PlotSeries line;
      line.label = series[i].variant;
      line.color = variant_color(series[i].variant, i);
      line.x = series[i].x;
      line.y = series[i].med;
      line.y_low = series[i].lo;
      line.y_high = series[i].hi;
      spec.series.push_back(std::move(line));
    }
    write_text_file(out_dir + "/" + file, render_line_plot(spec));
  };
  write_plot("f_ari_vs_slots.svg", "f_ari", false, "F-ARI vs evaluation slot count",
             "slots at evaluation", "F-ARI");
  write_plot("ari_vs_slots.svg", "ari", false, "ARI vs evaluation slot count",
             "slots at evaluation", "ARI");
  write_plot("l2_vs_slots.svg", "l2", false, "Reconstruction error vs evaluation slot count",
             "slots at evaluation", "mean squared error");
  write_plot("f_ari_vs_objects.svg", "f_ari", true, "F-ARI vs scene object count",
             "objects in scene", "F-ARI");
}

Checkpoint to_checkpoint(AutoencoderParams& params, const BatchStats& stats,
                         const ExperimentConfig& config, std::uint64_t seed,
                         std::map<std::string, std::string> extra_meta) {
  Checkpoint checkpoint;
  for (auto& [name, tensor] : named_parameters(params)) checkpoint.arrays.emplace_back(name, *tensor);
  checkpoint.meta = std::move(extra_meta);
  checkpoint.meta["variant"] = config.variant;
  checkpoint.meta["seed"] = std::to_string(seed);
  checkpoint.meta["max_objects"] = std::to_string(config.max_objects);
  checkpoint.meta["train_slots"] = std::to_string(config.train_slots);
  checkpoint.meta["image_size"] = std::to_string(config.image_size);
  checkpoint.meta["channels"] = std::to_string(config.channels);
  checkpoint.meta["slot_dim"] = std::to_string(config.slot_dim);
  checkpoint.meta["slot_mlp_hidden"] = std::to_string(config.slot_mlp_hidden);
  checkpoint.meta["broadcast"] = std::to_string(config.broadcast);
  checkpoint.meta["ema_m"] = fmt_g17(stats.ema_m);
  checkpoint.meta["ema_v"] = fmt_g17(stats.ema_v);
  checkpoint.meta["ema_initialized"] = stats.ema_initialized ? "1" : "0";
  return checkpoint;
}

namespace {

const std::string& meta_str(const std::map<std::string, std::string>& meta, const char* key) {
  const auto it = meta.find(key);
  if (it == meta.end())
    throw std::runtime_error(std::string("checkpoint meta is missing ") + key);
  return it->second;
}

std::int64_t meta_int(const std::map<std::string, std::string>& meta, const char* key) {
  try {
    return std::stoll(meta_str(meta, key));
  } catch (const std::logic_error&) {
    throw std::runtime_error(std::string("checkpoint meta field is not an integer: ") + key);
  }
}

double meta_double(const std::map<std::string, std::string>& meta, const char* key) {
  try {
    return std::stod(meta_str(meta, key));
  } catch (const std::logic_error&) {
    throw std::runtime_error(std::string("checkpoint meta field is not a number: ") + key);
  }
}

}  // namespace

LoadedModel model_from_checkpoint(const Checkpoint& checkpoint) {
  AutoencoderConfig model;
  model.height = model.width = meta_int(checkpoint.meta, "image_size");
  model.channels = meta_int(checkpoint.meta, "channels");
  model.slot_dim = meta_int(checkpoint.meta, "slot_dim");
  model.slot_mlp_hidden = meta_int(checkpoint.meta, "slot_mlp_hidden");
  model.broadcast = meta_int(checkpoint.meta, "broadcast");

  Rng rng(0);
  LoadedModel out{
      make_autoencoder_params(model, variant_mode(meta_str(checkpoint.meta, "variant")), rng),
      BatchStats{}, checkpoint.meta};
  auto named = named_parameters(out.params);
  if (named.size() != checkpoint.arrays.size()) {
    throw std::runtime_error("checkpoint holds " + std::to_string(checkpoint.arrays.size()) +
                             " arrays but the model has " + std::to_string(named.size()) +
                             " parameters");
  }
  for (auto& [name, tensor] : named) {
    const Tensor& loaded = checkpoint.find(name);
    if (loaded.shape() != tensor->shape())
      throw std::runtime_error("checkpoint array has the wrong shape: " + name);
    *tensor = loaded;
  }
  out.stats.training = false;
  out.stats.momentum = out.params.slot_attention.mode.momentum;
  out.stats.ema_m = meta_double(checkpoint.meta, "ema_m");
  out.stats.ema_v = meta_double(checkpoint.meta, "ema_v");
  out.stats.ema_initialized = meta_str(checkpoint.meta, "ema_initialized") == "1";
  return out;
}

bool run_theory_suite(std::ostream& out) {
  bool all_ok = true;
  const auto report = [&](bool ok, const std::string& text) {
    out << text << (ok ? "  [ok]" : "  [FAILED]") << "\n";
    all_ok = all_ok && ok;
  };
  Rng rng(904);

  // Weighted-sum codes determine their slot's attention column sum: the
  // recovery function built from the value map's affine decomposition reads
  // it back across random instances of every slot count.
  {
    const std::int64_t d = 6, n_tokens = 50;
    double max_err = 0.0;
    for (int trial = 0; trial < 200; ++trial) {
      // The recovery function divides by the offset norm squared, so its
      // conditioning degrades without bound as a draw approaches the a = 0
      // null set where no recovery exists at all. Instances inside a thin
      // neighborhood of that set (small offset, e.g. from a near-singular
      // value map) are redrawn whole.
      double c = 0.0;
      SlotAttentionParams p;
      AffineDecomposition dec;
      for (int attempt = 0;; ++attempt) {
        c = 0.5 + 4.5 * rng.uniform();
        p = make_slot_attention_params(d, 2 * d, NormalizationMode::weighted_sum(c), rng);
        p.input_layernorm = random_layernorm(rng, d);
        dec = affine_decompose(p.v_map, p.input_layernorm);
        if (dec.a.norm() >= 0.01) break;
        require(attempt < 100, "generic parameter draws keep landing near the null set");
      }
      const auto f = recovery_function(dec, c, n_tokens);

      const std::int64_t k = 1 + trial % 6;
      const Tensor inputs = randn(rng, {n_tokens, d});
      const auto [gamma, keys, values] = compute_attention(inputs, randn(rng, {k, d}), p);
      const Tensor codes = aggregate(gamma, values, p.mode, p, nullptr);
      for (std::int64_t s = 0; s < k; ++s) {
        double column_sum = 0.0;
        for (std::int64_t n = 0; n < n_tokens; ++n) column_sum += gamma.at(n * k + s);
        const Eigen::VectorXd code = codes.mat().row(s).transpose();
        max_err = std::max(max_err, std::abs(f(code) - column_sum / n_tokens));
      }
    }
    char line[160];
    std::snprintf(line, sizeof line,
                  "column-sum recovery from weighted-sum codes: max error %.2e over 200 "
                  "instances (K in 1..6, N=50)",
                  max_err);
    report(max_err < 1e-9, line);
  }

  // Weighted-mean codes cannot: a single slot and its duplicated pair give
  // the same codes while their column fractions are exactly 1 and 1/2.
  {
    SlotAttentionParams p =
        make_slot_attention_params(8, 16, NormalizationMode::weighted_mean(), rng);
    const Prop1Report witness = verify_prop1_counterexample(p, randn(rng, {40, 8}));
    const bool ok = witness.weighted_mean_code_diff < 1e-12 &&
                    witness.layer_normed_code_diff < 1e-4 &&
                    witness.weighted_sum_halving_err < 1e-12 &&
                    witness.column_fraction_single == 1.0 &&
                    witness.column_fraction_pair[0] == 0.5 &&
                    witness.column_fraction_pair[1] == 0.5;
    char line[200];
    std::snprintf(line, sizeof line,
                  "duplicate-slot witness: weighted-mean code gap %.2e (fractions %g vs %g/%g), "
                  "weighted-sum halving error %.2e",
                  witness.weighted_mean_code_diff, witness.column_fraction_single,
                  witness.column_fraction_pair[0], witness.column_fraction_pair[1],
                  witness.weighted_sum_halving_err);
    report(ok, line);
  }

  // Layer-norm + linear images live on an affine slice a + V with a nonzero
  // offset for generic parameters.
  {
    const std::int64_t d = 6;
    double max_residual = 0.0;
    double min_offset = std::numeric_limits<double>::infinity();
    for (int draw = 0; draw < 100; ++draw) {
      const LayerNormParams ln = random_layernorm(rng, d);
      const Tensor map = randn(rng, {d, d});
      const AffineDecomposition dec = affine_decompose(map, ln);
      min_offset = std::min(min_offset, dec.a.norm());
      for (int i = 0; i < 10; ++i) {
        const Tensor x = randn(rng, {1, d});
        const Eigen::VectorXd y = matmul(layer_norm_rows(x, ln), map).mat().row(0).transpose();
        const Eigen::VectorXd centered = y - dec.a;
        max_residual = std::max(max_residual, (centered - dec.project_v(centered)).norm());
      }
    }
    char line[160];
    std::snprintf(line, sizeof line,
                  "affine structure of layer-norm+linear images: max residual %.2e over 1000 "
                  "samples, min offset norm %.2g over 100 draws",
                  max_residual, min_offset);
    report(max_residual < 1e-8 && min_offset > 1e-12, line);
  }
  return all_ok;
}

int run_cli(int argc, const char* const* argv) {
  CLI::App app{"update-code normalization for slot attention: datasets, training, sweeps, reports"};
  app.require_subcommand(1);

  std::string config_path, out_override, variant_override, checkpoint_override;
  std::vector<std::string> csv_inputs;
  std::vector<std::int64_t> slots_override;
  std::int64_t steps_override = -1;
  std::uint64_t seed = 0;

  const auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--config", config_path, "experiment config, a flat JSON document")
        ->required();
    cmd->add_option("--out", out_override, "override the config's output directory");
  };

  CLI::App* generate = app.add_subcommand("generate", "write the train/val/test scene splits");
  add_common(generate);
  CLI::App* train_cmd = app.add_subcommand("train", "train one model and save its checkpoint");
  add_common(train_cmd);
  train_cmd->add_option("--seed", seed, "training seed")->required();
  train_cmd->add_option("--variant", variant_override, "override the config's variant tag");
  train_cmd->add_option("--steps", steps_override, "override the config's total step count");
  CLI::App* eval_cmd = app.add_subcommand("eval", "sweep a trained checkpoint over slot counts");
  add_common(eval_cmd);
  eval_cmd->add_option("--seed", seed, "seed of the run to evaluate")->required();
  eval_cmd->add_option("--checkpoint", checkpoint_override,
                       "checkpoint path (default: the train output for this config and seed)");
  eval_cmd->add_option("--slots", slots_override, "evaluation slot counts")->delimiter(',');
  eval_cmd->add_option("--variant", variant_override, "override the config's variant tag");
  CLI::App* report_cmd = app.add_subcommand("report", "merge sweep CSVs into a table and plots");
  add_common(report_cmd);
  report_cmd
      ->add_option("--csv", csv_inputs,
                   "sweep CSV inputs (default: every *_sweep.csv in the output directory)")
      ->delimiter(',');
  app.add_subcommand("verify", "run the analytic self-checks");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (app.got_subcommand("verify")) return run_theory_suite(std::cout) ? 0 : 1;

    ExperimentConfig config = experiment_config_from_json(read_text_file(config_path));
    if (!out_override.empty()) config.out_dir = out_override;
    if (!variant_override.empty()) config.variant = variant_override;
    if (steps_override >= 0) config.total_steps = steps_override;
    if (!slots_override.empty()) config.eval_slots = slots_override;
    validate(config);

    if (app.got_subcommand("generate")) {
      std::filesystem::create_directories(config.out_dir);
      for (const char* name : {"train", "val", "test"}) {
        const auto samples = make_named_split(config, name);
        const std::string path = config.out_dir + "/" + name + ".snds";
        save_split(path, scene_spec_for(config), samples);
        std::cout << path << ": " << samples.size() << " scenes\n";
      }
    } else if (app.got_subcommand("train")) {
      const TrainResult result = train(config, seed);
      std::cout << "final loss " << result.final_loss << ", validation F-ARI "
                << result.val_f_ari
                << (result.failed ? " (flagged non-object-centric)" : "") << "\n"
                << result.checkpoint_file << "\n";
    } else if (app.got_subcommand("eval")) {
      const std::string path = checkpoint_override.empty()
                                   ? run_basename(config, seed) + ".ckpt"
                                   : checkpoint_override;
      const LoadedModel model = model_from_checkpoint(load_checkpoint(path));
      if (meta_str(model.meta, "variant") != config.variant) {
        throw std::runtime_error("checkpoint variant " + meta_str(model.meta, "variant") +
                                 " does not match config variant " + config.variant);
      }
      const auto results = evaluate_sweep(model.params, model.stats, config, seed);
      const std::string csv_path = run_basename(config, seed) + "_sweep.csv";
      write_sweep_csv(csv_path, results);
      for (const SweepResult& r : results) {
        if (r.eval_objects == 0)
          std::cout << "slots " << r.eval_slots << ": F-ARI " << r.f_ari << " over "
                    << r.n_scenes << " scenes\n";
      }
      std::cout << csv_path << "\n";
    } else if (app.got_subcommand("report")) {
      std::vector<std::string> inputs = csv_inputs;
      if (inputs.empty()) {
        for (const auto& entry : std::filesystem::directory_iterator(config.out_dir)) {
          const std::string p = entry.path().string();
          if (p.size() >= 10 && p.substr(p.size() - 10) == "_sweep.csv") inputs.push_back(p);
        }
        std::sort(inputs.begin(), inputs.end());
      }
      if (inputs.empty())
        throw std::runtime_error("no sweep CSVs found in " + config.out_dir);
      std::vector<SweepResult> all;
      for (const std::string& p : inputs) {
        const auto rows = read_sweep_csv(p);
        all.insert(all.end(), rows.begin(), rows.end());
      }
      emit_report(all, config.out_dir, config.fail_threshold);
      std::cout << config.out_dir << "/results.csv (" << all.size() << " rows)\n";
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

}  // namespace slotnorm
