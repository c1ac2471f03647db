#pragma once

#include <array>
#include <span>
#include <string>
#include <vector>

#include "bevuda/geometry/model.hpp"
#include "bevuda/geometry/types.hpp"
#include "bevuda/numerics/tape.hpp"

namespace bevuda::adaptation {

using geometry::DetectionSet;
using geometry::DetectionTargets;
using numerics::ParameterSet;
using numerics::Tape;
using numerics::Tensor;
using numerics::Var;

inline constexpr std::size_t kPrototypeChannels = 256;
inline constexpr double kAlignmentEps = 1e-7;

/// Feature spaces embedded into the shared prototype space, in
/// concatenation order.
enum class Space { image = 0, voxel = 1, bev = 2 };
inline constexpr std::array<Space, 3> kSpaces{Space::image, Space::voxel, Space::bev};
std::string to_string(Space s);

/// Which spaces contribute their 256-row block; a disabled block is zero.
struct SpaceMask {
  bool image = true;
  bool voxel = true;
  bool bev = true;

  bool enabled(Space s) const;
  bool any() const { return image || voxel || bev; }
};

struct LossWeights {
  double lambda1 = 1.0;  // pseudo-label detection loss
  double lambda2 = 1.0;  // source supervision
  double lambda3 = 0.1;  // multi-space knowledge transfer
  double lambda4 = 0.1;  // prototype alignment

  void validate() const;
};

struct UemaConfig {
  double alpha = 0.999;
  double sigma = 0.001;

  /// Requires alpha in (0, 1), sigma >= 0 and alpha + 0.5 sigma <= 1.
  void validate() const;
};

// ---------------------------------------------------------------------------
// Prototypes

/// Per-space category features, each (C_I, n): column k is the mean feature
/// of category k's instances.
struct CategoryFeatures {
  Tensor image;
  Tensor voxel;
  Tensor bev;
};

struct Prototype {
  Tensor concatenated;  // (768, n)
  Tensor tensor;        // (256, n)
};

/// Embeds each space with its 2-layer MLP, stacks the three (256, n) blocks
/// and maps each column through the shared layer.
Prototype build_prototype(const CategoryFeatures& feats, const ParameterSet& params, const SpaceMask& mask = {});

/// Tape form over row layout: each input (n, C_I) -> (n, 256). Also returns
/// the (n, 768) concatenation when `concat_out` is non-null.
Var build_prototype(Tape& tape, Var image, Var voxel, Var bev, const SpaceMask& mask, Var* concat_out = nullptr);

// ---------------------------------------------------------------------------
// Alignment

/// Discriminator probabilities for prototype rows (n, 256) -> (n, 1).
Var discriminate(Tape& tape, const ParameterSet& disc, Var rows);

/// Mean over valid categories of log D(s_k) + log(1 - D(t_k)), with D
/// clamped to [eps, 1 - eps]. `valid` empty means every category. Rows
/// layout (n, 256).
Var alignment_loss(Tape& tape, Var proto_s, Var proto_t, const ParameterSet& disc,
                   const std::vector<bool>& valid = {});

/// Value form over (256, n) prototypes.
double alignment_loss(const Tensor& proto_s, const Tensor& proto_t, const ParameterSet& disc,
                      const std::vector<bool>& valid = {});

/// Value of alignment_loss for given discriminator outputs, per category.
double alignment_from_probabilities(std::span<const double> d_source, std::span<const double> d_target);

// ---------------------------------------------------------------------------
// Knowledge transfer

/// sum over positions of the squared channel-difference norm, divided by the
/// number of positions.
Var transfer_term(Tape& tape, Var teacher, Var student, double positions);

/// Sum over spaces of the per-space normalized squared distance. Each tensor
/// is (C, spatial...): the first axis is the channel axis and every other
/// axis counts toward the position normalizer.
double transfer_loss(std::span<const Tensor> teacher_feats, std::span<const Tensor> student_feats);

// ---------------------------------------------------------------------------
// Teacher update and pseudo labels

/// T <- (alpha + sigma u) T + (1 - alpha - sigma u) S for every entry,
/// computed as T + w (S - T) and kept inside [min(T, S), max(T, S)].
ParameterSet uema_update(const ParameterSet& teacher, const ParameterSet& student, double u_mean,
                         const UemaConfig& cfg);

/// Per-entry teacher blend used by uema_update.
double uema_blend(double teacher, double student, double u_mean, const UemaConfig& cfg);

/// Cells whose occupancy is at least `threshold` become positives carrying
/// the predicted offsets and argmax class.
DetectionTargets pseudo_labels(const DetectionSet& pred, geometry::BevGrid grid, double threshold);

double total_da_loss(double l_unc, double l_sup, double l_mkt, double l_ali, const LossWeights& w);

}  // namespace bevuda::adaptation
