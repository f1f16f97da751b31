#pragma once

#include "links/checkpoint.hpp"
#include "links/data.hpp"
#include "links/geometry.hpp"
#include "links/lifter.hpp"
#include "links/nn.hpp"

#include <array>
#include <functional>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace links::occlusion {

using nn::Matrix;

inline constexpr std::array<std::string_view, 8> kScenarioNames{
    "left-arm",         "right-arm",         "left-leg",  "right-leg",
    "left-arm-and-leg", "right-arm-and-leg", "both-legs", "full-torso"};

/// Masked joints plus the lifters that cover the visible ones. Lifters are
/// taken in the order legs, torso, left, right when their whole input segment
/// is visible; each claims the visible joints not yet covered.
struct OcclusionScenario
{
   std::string name;
   std::vector<int> masked;  // sorted
   lifter::Routing routing;

   std::vector<int> visible(const SkeletonTopology& topo) const; // non-root, sorted

   /// One of kScenarioNames on the 17-joint skeleton.
   static OcclusionScenario named(std::string_view name, const SkeletonTopology& topo);
   /// Visible joints that no fully visible lifter covers are added to the
   /// mask. Throws std::invalid_argument for the root and for masks that
   /// leave no usable lifter.
   static OcclusionScenario custom(std::vector<int> masked, const SkeletonTopology& topo,
                                   std::string name = "custom");

   Json to_json(const SkeletonTopology& topo) const;
   static OcclusionScenario from_json(const Json& j, const SkeletonTopology& topo);
};

/// Thrown when no fully visible lifter remains.
struct UnsupportedScenario : std::invalid_argument
{
   using std::invalid_argument::invalid_argument;
};

struct MaskedPose
{
   Pose2D pose;            // masked rows zeroed
   std::vector<bool> mask; // true = absent
};

MaskedPose mask_pose(const Pose2D& pose, const OcclusionScenario& scenario);

struct PartialLift
{
   Pose3D pose; // masked rows at the root (0, 0, c)
   double elevation = 0.0;
};

PartialLift partial_lift(const Pose2D& partial, const OcclusionScenario& scenario,
                         const lifter::LifterSet& lifters, const SkeletonTopology& topo,
                         double c = kDefaultDepth);

/// Batched partial lift.
std::vector<Pose3D> partial_lift(const std::vector<Pose2D>& partial, const OcclusionScenario& scenario,
                                 const lifter::LifterSet& lifters, const SkeletonTopology& topo,
                                 double c = kDefaultDepth);

// ------------------------------------------------------------ fill networks
//
enum class Space { d3, d2 };

std::string_view to_string(Space s) noexcept;
Space space_from_string(std::string_view s);

struct OcclusionNetConfig
{
   int width = 1024;
   int blocks = 2;
   double head_gain = 0.1;
};

/// Residual MLP from the visible non-root joints to the masked ones. In 3D the
/// coordinates are taken relative to the root at (0, 0, c); in 2D they are
/// multiplied by c.
class OcclusionNet final : public nn::Module
{
 public:
   OcclusionNet() = default;
   OcclusionNet(const OcclusionScenario& scenario, Space space, const SkeletonTopology& topo,
                const OcclusionNetConfig& cfg = {});

   const OcclusionScenario& scenario() const noexcept { return scenario_; }
   Space space() const noexcept { return space_; }
   const std::vector<int>& visible() const noexcept { return visible_; }
   int dims() const noexcept { return space_ == Space::d3 ? 3 : 2; }
   nn::ResidualNet& net() noexcept { return net_; }
   const nn::ResidualNet& net() const noexcept { return net_; }
   std::uint64_t seed() const noexcept { return seed_; }

   void init(std::uint64_t seed);

   Matrix forward(const Matrix& x, nn::ResidualNet::Tape* tape = nullptr) const;
   Matrix backward(const nn::ResidualNet::Tape& tape, const Matrix& dy);

   std::vector<nn::Param*> params() override;
   using Module::params;

   Json to_json(const SkeletonTopology& topo) const;
   static OcclusionNet from_json(const Json& j, const SkeletonTopology& topo);

 private:
   OcclusionScenario scenario_;
   Space space_ = Space::d3;
   OcclusionNetConfig cfg_;
   std::vector<int> visible_;
   nn::ResidualNet net_;
   std::uint64_t seed_ = 0;
};

/// Network input columns: visible non-root joints, flattened.
Matrix encode_input_3d(const std::vector<Pose3D>& partial, const std::vector<int>& visible, double c);
Matrix encode_input_2d(const std::vector<Pose2D>& partial, const std::vector<int>& visible, double c);

/// Replaces the masked rows with network predictions; visible rows are copied.
Pose3D fill_3d(const OcclusionNet& net, const Pose3D& partial, double c = kDefaultDepth);
Pose2D fill_2d(const OcclusionNet& net, const Pose2D& partial, double c = kDefaultDepth);

/// 2D completion followed by the legs + torso lift.
Pose3D fill_2d_baseline(const OcclusionNet& net, const Pose2D& partial, const lifter::LifterSet& lifters,
                        const SkeletonTopology& topo, double c = kDefaultDepth);

/// Mean squared error over all output entries.
double distillation_loss(const Matrix& prediction, const Matrix& target, Matrix* grad = nullptr);

// ------------------------------------------------------------ training
//
struct OcclusionTrainConfig
{
   int epochs          = 10;
   int batch           = 256;
   nn::AdamConfig adam = {};
   bool augment        = true; // azimuth rotation of 3D inputs and targets
   std::uint64_t seed  = 0;
   double c            = kDefaultDepth;
};

struct OcclusionEpoch
{
   int epoch = 0;
   double loss = 0.0;
   double learning_rate = 0.0;
};

struct OcclusionTrainResult
{
   std::vector<OcclusionEpoch> trace;
};

/// Training pairs before augmentation: network inputs and targets in network units.
struct OcclusionTargets
{
   std::vector<Pose3D> inputs_3d; // partial lifts (3D)
   std::vector<Pose3D> teacher;   // full legs + torso lifts (3D)
   std::vector<Pose2D> inputs_2d; // unoccluded 2D poses (2D)
};

OcclusionTargets make_targets(const OcclusionNet& net, const lifter::LifterSet& lifters,
                              const SkeletonTopology& topo, const std::vector<Pose2D>& poses, double c);

/// Loss of `net` on the pairs, each 3D pair rotated about (0, 0, c) by the given azimuth.
double occlusion_loss(const OcclusionNet& net, const OcclusionTargets& t, const std::vector<double>& azimuths,
                      double c);

/// 3D: distillation towards the legs + torso lift with azimuth augmentation.
/// 2D: regression of the true 2D coordinates of the masked joints.
OcclusionTrainResult train_occlusion(OcclusionNet& net, const lifter::LifterSet& lifters,
                                     const SkeletonTopology& topo, const std::vector<Pose2D>& poses,
                                     const OcclusionTrainConfig& cfg,
                                     const std::function<void(const OcclusionEpoch&)>& on_epoch = {});

// ------------------------------------------------------------ evaluation
//
struct OcclusionRow
{
   std::string scenario;
   std::string space;
   double pa_mpjpe = 0.0;
   double n_mpjpe = 0.0;
   int sample_count = 0;
};

/// Scenarios with no masked joints need no network. A missing network skips
/// the row and appends a warning.
std::vector<OcclusionRow> evaluate_occlusion(const std::vector<OcclusionScenario>& scenarios,
                                             const std::map<std::string, const OcclusionNet*>& nets_3d,
                                             const std::map<std::string, const OcclusionNet*>& nets_2d,
                                             const lifter::LifterSet& lifters, const SkeletonTopology& topo,
                                             const std::vector<data::PoseRecord>& records, double c,
                                             std::vector<std::string>* warnings = nullptr);

void write_occlusion_csv(std::ostream& out, const std::vector<OcclusionRow>& rows);

} // namespace links::occlusion
