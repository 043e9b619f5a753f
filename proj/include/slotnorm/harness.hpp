#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "slotnorm/autoencoder.hpp"
#include "slotnorm/dataset.hpp"
#include "slotnorm/serialize.hpp"
#include "slotnorm/tensor.hpp"

namespace slotnorm {

// Default peak learning rate, 4 * 0.5^0.1 * 1e-4.
double default_peak_lr();

// One training/evaluation experiment, addressable as a flat JSON document
// (experiment_config_to_json / _from_json, unknown keys rejected). Defaults
// are the 32x32 desk scale; configs/ ships a reduced trend configuration.
struct ExperimentConfig {
  std::string variant = "baseline";  // baseline | layer | weighted_sum | batch

  // Scenes. Sprite extents are in pixels; data_seed fixes the dataset
  // independently of the training seed, so every run sees the same splits.
  int min_objects = 1;
  int max_objects = 4;  // the O of the training tuple (O, K)
  std::int64_t image_size = 32;
  double sprite_min = 8.0, sprite_max = 14.0;
  bool allow_occlusion = true;
  std::uint64_t data_seed = 0;
  std::int64_t train_scenes = 8192, val_scenes = 128, eval_scenes = 512;

  // Model scale.
  std::int64_t channels = 32, slot_dim = 32, slot_mlp_hidden = 64, broadcast = 4;
  std::int64_t train_slots = 5;  // the K of the training tuple (O, K)
  std::int64_t train_iters = 3, eval_iters = 5;

  // Optimization.
  double peak_lr = default_peak_lr();
  std::int64_t warmup_steps = 1000;
  std::int64_t half_life_steps = 5000;
  std::int64_t batch_size = 16;
  std::int64_t total_steps = 20000;
  std::int64_t log_every = 100;

  // Evaluation and reporting. A run whose end-of-training validation F-ARI
  // at K = train_slots falls below fail_threshold is flagged as failed:
  // kept in every CSV, excluded from plots.
  std::vector<std::int64_t> eval_slots{5, 7, 9, 11};
  bool eval_object_breakdown = true;
  std::vector<std::uint64_t> seeds{1, 2, 3};
  double fail_threshold = 0.5;
  std::string out_dir = "out";
};

void validate(const ExperimentConfig& config);

std::string experiment_config_to_json(const ExperimentConfig& config);
ExperimentConfig experiment_config_from_json(const std::string& text);

// Maps a variant tag to its update normalization. The weighted-sum constant
// resolves to the token count, so one tag serves any resolution.
NormalizationMode variant_mode(const std::string& variant);

SceneSpec scene_spec_for(const ExperimentConfig& config);
AutoencoderConfig model_config_for(const ExperimentConfig& config);

// The "train" / "val" / "test" split of the config's dataset; deterministic
// in (config, name).
std::vector<SceneSample> make_named_split(const ExperimentConfig& config, const char* name);

// peak * min(t/warmup, 1) * 2^(-max(t-warmup, 0)/half_life). Exact at the
// warmup joint (peak) and one half-life later (peak/2).
double schedule_lr(std::int64_t step, double peak, std::int64_t warmup_steps,
                   std::int64_t half_life_steps);

// Middle order statistic; even counts average the two middle values.
double median(std::vector<double> values);

// Adam with bias correction. Holds first/second moment state per parameter
// and rewrites the referenced tensors in place on every step.
class Adam {
 public:
  explicit Adam(std::vector<std::pair<std::string, Tensor*>> params, double beta1 = 0.9,
                double beta2 = 0.999, double eps = 1e-8);

  // Gradients in parameter-list order; lr is this step's learning rate.
  void step(double lr, const std::vector<Array>& grads);

  std::int64_t steps_taken() const { return t_; }

 private:
  std::vector<std::pair<std::string, Tensor*>> params_;
  std::vector<Array> m_, v_;
  double beta1_, beta2_, eps_;
  std::int64_t t_ = 0;
};

struct TrainResult {
  AutoencoderParams params;
  BatchStats stats;  // carries the EMA statistics for the batch variant
  std::vector<std::int64_t> logged_steps;
  std::vector<double> logged_loss;
  double final_loss = 0.0;
  // End-of-training validation at K = train_slots on the val split.
  double val_f_ari = 0.0, val_ari = 0.0, val_l2 = 0.0;
  bool failed = false;  // val_f_ari below the configured threshold
  std::string checkpoint_file, log_file;
};

// Full optimization loop: fresh parameters from the seed, Adam under the
// warmup+decay schedule, horizontal-flip augmentation, loss logged every
// log_every steps. Writes <out_dir>/<variant>_seed<seed>.ckpt and
// ..._log.json. A non-finite loss aborts with the last finite step quoted.
TrainResult train(const ExperimentConfig& config, std::uint64_t seed);

struct SweepResult {
  std::string variant;
  std::uint64_t seed = 0;
  int max_objects = 0;           // O of the training tuple
  std::int64_t train_slots = 0;  // K of the training tuple
  std::int64_t eval_slots = 0;   // slot count used at evaluation
  int eval_objects = 0;          // scene object count; 0 aggregates all scenes
  double f_ari = 0.0, ari = 0.0, l2 = 0.0;  // means over n_scenes
  std::int64_t n_scenes = 0;

  bool operator==(const SweepResult&) const = default;
};

// Scores the test split at every configured evaluation slot count: slots are
// drawn from the model's learned prior with a per-scene seed, segmentations
// come from the decoder masks, and rows aggregate over all scenes first,
// then per object count when the breakdown is enabled. Scene scoring runs in
// parallel with per-scene seeding, so thread count never changes results.
std::vector<SweepResult> evaluate_sweep(const AutoencoderParams& params, const BatchStats& stats,
                                        const ExperimentConfig& config, std::uint64_t seed);

// CSV bridge. Column order: variant, seed, O, K, eval_slots, eval_objects,
// f_ari, ari, l2, n_scenes; the aggregate rows write "all" for eval_objects
// and floats carry enough digits to round-trip exactly.
std::vector<std::vector<std::string>> sweep_to_rows(const std::vector<SweepResult>& results);
std::vector<SweepResult> sweep_from_rows(const std::vector<std::vector<std::string>>& rows);
void write_sweep_csv(const std::string& path, const std::vector<SweepResult>& results);
std::vector<SweepResult> read_sweep_csv(const std::string& path);

// One plot line: per-x median across seeds with a min-max band. Runs whose
// F-ARI at their training slot count (aggregate row) is below fail_threshold
// are excluded here but never from the CSV.
struct ReportSeries {
  std::string variant;
  std::vector<double> x, med, lo, hi;
};
std::vector<ReportSeries> report_series(const std::vector<SweepResult>& results,
                                        const std::string& metric, bool vs_objects,
                                        double fail_threshold);

// Writes results.csv (every row, failed runs included) plus SVG plots of
// each metric against the evaluation slot count and of F-ARI against the
// scene object count at the training slot count.
void emit_report(const std::vector<SweepResult>& results, const std::string& out_dir,
                 double fail_threshold = 0.5);

// Model <-> checkpoint bridge. Arrays are the named parameters; meta records
// the variant, model scale, EMA statistics, and training provenance.
Checkpoint to_checkpoint(AutoencoderParams& params, const BatchStats& stats,
                         const ExperimentConfig& config, std::uint64_t seed,
                         std::map<std::string, std::string> extra_meta = {});

struct LoadedModel {
  AutoencoderParams params;
  BatchStats stats;  // eval mode, EMA restored
  std::map<std::string, std::string> meta;
};
LoadedModel model_from_checkpoint(const Checkpoint& checkpoint);

// Analytic self-checks of the update-normalization theory: the attention
// column-sum recovery function on weighted-sum codes, the duplicate-slot
// indistinguishability witness for weighted-mean codes, and the affine
// structure of layer-norm+linear images. Prints one line per check.
bool run_theory_suite(std::ostream& out);

// generate | train | eval | report | verify. Returns the process exit code.
int run_cli(int argc, const char* const* argv);

}  // namespace slotnorm
