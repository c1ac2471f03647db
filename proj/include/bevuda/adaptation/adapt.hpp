#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "bevuda/adaptation/objectives.hpp"
#include "bevuda/geometry/model.hpp"
#include "bevuda/synth/scene.hpp"
#include "bevuda/uncertainty/uncertainty.hpp"

namespace bevuda::adaptation {

using synth::SceneSample;

/// Ablation switches. DA: LiDAR-fused teacher depth. UEMA: uncertainty term
/// of the teacher update. KT: pseudo-label and transfer losses. BA/IA/VA:
/// BEV, image and voxel blocks of the prototype.
struct Switches {
  bool da = true;
  bool uema = true;
  bool kt = true;
  bool ba = true;
  bool ia = true;
  bool va = true;

  static Switches all_off() { return {false, false, false, false, false, false}; }
  SpaceMask spaces() const { return SpaceMask{ia, va, ba}; }
  /// Compact tag such as "DA+UEMA+KT" or "none".
  std::string name() const;
  friend bool operator==(const Switches&, const Switches&) = default;
};

struct AdaptConfig {
  geometry::ModelDims dims;
  LossWeights weights;
  UemaConfig uema;
  uncertainty::FusionConfig fusion;
  Switches switches;
  double lr = 1e-2;
  double disc_lr = 1e-2;
  double pseudo_threshold = 0.5;
  /// Weight of the source LiDAR depth cross-entropy inside L_SUP.
  double depth_weight = 1.0;
  /// Dropout on the depth net's hidden layer while training.
  double train_dropout = 0.2;
  /// Rescales the gradient when its global norm exceeds this; 0 disables.
  double grad_clip = 0.0;
  std::uint64_t seed = 0;

  void validate() const;
  /// Weights after the KT and space switches are applied.
  LossWeights effective_weights() const;
  UemaConfig effective_uema() const;
};

struct AdaptState {
  ParameterSet student;
  ParameterSet teacher;
  ParameterSet disc;
  std::size_t step = 0;
};

/// Teacher and student start bit-identical from the source checkpoint.
AdaptState init_adaptation(const ParameterSet& source, const geometry::ModelDims& dims, std::uint64_t seed);

struct LossReport {
  std::size_t step = 0;
  double l_unc = 0.0;
  double l_sup = 0.0;
  double l_mkt = 0.0;
  double l_ali = 0.0;
  double total = 0.0;
  double u_mean = 0.0;
};

inline constexpr const char* kLossCsvHeader = "step,l_unc,l_sup,l_mkt,l_ali,total,u_mean";
void write_loss_row(std::ostream& os, const LossReport& r);

struct StepResult {
  AdaptState state;
  LossReport report;
};

using Batch = std::span<const SceneSample* const>;

/// Frozen teacher outputs for one target batch: pseudo labels plus the
/// feature, voxel and BEV cell tensors the transfer loss matches.
struct TeacherOutputs {
  std::vector<Tensor> features;  // per view (P, C_I)
  Tensor voxel;
  Tensor cells;
};

struct TeacherTargets {
  std::vector<geometry::DetectionTargets> pseudo;
  std::vector<TeacherOutputs> outputs;
};

/// True when any target-side loss survives the switches.
bool needs_target(const AdaptConfig& cfg);

TeacherTargets teacher_targets(const ParameterSet& teacher, Batch target, const AdaptConfig& cfg, std::size_t step);

/// Records the weighted student objective of `step` on `tape`. With
/// `disc_next` the discriminator first takes its ascent step from `disc` and
/// the updated copy scores L_ALI; without it `disc` is used as is. Teacher
/// targets may be empty when needs_target(cfg) is false.
Var student_objective(Tape& tape, Batch source, Batch target, const TeacherTargets& teacher, const ParameterSet& disc,
                      const AdaptConfig& cfg, std::size_t step, LossReport* report = nullptr,
                      ParameterSet* disc_next = nullptr);

/// One step of the combined objective: discriminator ascent on L_ALI, one
/// gradient step of the student on the weighted sum, then the UEMA teacher
/// update. The input state is never modified; a non-finite loss throws
/// NumericError.
StepResult adapt_step(const AdaptState& state, Batch source, Batch target, const AdaptConfig& cfg);

/// Source-only gradient step on L_SUP with the same dropout seeds that
/// adapt_step uses at `step`.
std::pair<ParameterSet, double> supervised_step(const ParameterSet& params, Batch source, const AdaptConfig& cfg,
                                                std::size_t step);

/// Records L_SUP (detection + weighted LiDAR depth loss, averaged over the
/// batch) on `tape`. Source scenes must carry labels.
Var source_objective(Tape& tape, Batch source, const AdaptConfig& cfg, std::uint64_t dropout_seed,
                     std::vector<geometry::ForwardVars>* forwards = nullptr);

/// Per-scene mean of the student's MC-dropout uncertainty over all views.
double batch_uncertainty(const ParameterSet& params, Batch scenes, const AdaptConfig& cfg, std::uint64_t seed);

/// Teacher depth for each view of each scene after the configured
/// selection rule, as (C_D, H, W) tensors.
std::vector<std::vector<Tensor>> teacher_depth(const ParameterSet& teacher, Batch scenes, const AdaptConfig& cfg,
                                               std::uint64_t seed);

/// Category-pooled features of one domain: per-space (n, C_I) means plus the
/// per-category instance counts.
struct PooledVars {
  Var image;
  Var voxel;
  Var bev;
  std::vector<std::size_t> counts;
};

PooledVars pool_categories(Tape& tape, const geometry::ModelDims& dims,
                           std::span<const geometry::ForwardVars> forwards,
                           std::span<const geometry::DetectionTargets> labels);

}  // namespace bevuda::adaptation
