#pragma once

#include "links/checkpoint.hpp"
#include "links/flow.hpp"
#include "links/geometry.hpp"
#include "links/nn.hpp"

#include <array>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

namespace links::lifter {

using nn::Matrix;

struct LifterConfig
{
   int width     = 1024;
   int blocks    = 3;   // per path
   double head_gain = 0.1;
   double input_scale = 1.0; // normalized 2D is multiplied by this before the stem
};

/// Shared stem and residual block, then a depth path (one offset per segment
/// joint) and an elevation path (one angle).
class LifterModel final : public nn::Module
{
 public:
   struct Tape
   {
      const LifterModel* owner = nullptr;
      std::uint64_t version    = 0;
      Matrix input;
      Matrix stem_pre;
      nn::ResidualBlock::Tape shared;
      std::vector<nn::ResidualBlock::Tape> depth;
      std::vector<nn::ResidualBlock::Tape> elevation;
      Matrix depth_head_in;
      Matrix elevation_head_in;
   };

   LifterModel() = default;
   LifterModel(Segment segment, int joints, const LifterConfig& cfg);

   Segment segment() const noexcept { return segment_; }
   int joints() const noexcept { return joints_; }
   const LifterConfig& config() const noexcept { return cfg_; }
   std::uint64_t seed() const noexcept { return seed_; }

   void init(std::uint64_t seed);

   /// Input: 2*joints rows (x, y per joint). Output: joints depth rows, then elevation.
   /// backward returns the gradient with respect to the unscaled input.
   Matrix forward(const Matrix& x, Tape* tape = nullptr) const;
   Matrix backward(const Tape& tape, const Matrix& dy);

   nn::Dense& depth_head() noexcept { return depth_head_; }
   nn::Dense& elevation_head() noexcept { return elevation_head_; }

   std::vector<nn::Param*> params() override;
   using Module::params;

   Json to_json() const;
   static LifterModel from_json(const Json& j);

 private:
   Segment segment_ = Segment::legs;
   int joints_      = 0;
   LifterConfig cfg_;
   std::uint64_t seed_ = 0;
   nn::Dense stem_;
   nn::ResidualBlock shared_;
   std::vector<nn::ResidualBlock> depth_blocks_;
   std::vector<nn::ResidualBlock> elevation_blocks_;
   nn::Dense depth_head_;
   nn::Dense elevation_head_;
};

/// Segment lifters indexed by Segment.
using LifterSet = std::array<LifterModel, 4>;

LifterSet make_lifters(const SkeletonTopology& topo, const LifterConfig& cfg, std::uint64_t seed);

struct SegmentLift
{
   Eigen::VectorXd depth_offsets; // one per segment joint
   double elevation = 0.0;
};

SegmentLift lift_segment(const LifterModel& model, const Pose2D& pose, const SkeletonTopology& topo);

// ------------------------------------------------------------ assembly
//
enum class Candidate { legs_torso = 0, left_right_r = 1, left_right_l = 2 };
inline constexpr std::array<Candidate, 3> kCandidates{Candidate::legs_torso, Candidate::left_right_r,
                                                      Candidate::left_right_l};

std::string_view to_string(Candidate c) noexcept;
Candidate candidate_from_string(std::string_view s);

/// Which lifter supplies the depth of which joints. Every routed joint belongs
/// to the segment of its lifter; the elevation is the mean over listed lifters.
struct Routing
{
   std::vector<std::pair<Segment, std::vector<int>>> parts;

   std::vector<int> joints() const;
};

Routing candidate_routing(const SkeletonTopology& topo, Candidate c);

struct Assembled
{
   Eigen::VectorXd depth_offsets; // per joint; root and unrouted joints are 0
   double elevation = 0.0;
};

using SegmentLifts = std::array<std::optional<SegmentLift>, 4>;

/// Throws std::invalid_argument when a routed lifter has no prediction.
Assembled assemble(const SkeletonTopology& topo, const Routing& routing, const SegmentLifts& lifts);

struct AssembledPrediction
{
   std::array<Pose3D, 3> candidates;
   std::array<double, 3> elevations{};
};

AssembledPrediction assemble(const SkeletonTopology& topo, const Pose2D& pose, const SegmentLifts& lifts,
                             double c = kDefaultDepth);

/// Runs every lifter on every pose and lifts the chosen candidate.
std::vector<Pose3D> lift_poses(const LifterSet& lifters, const SkeletonTopology& topo,
                               const std::vector<Pose2D>& poses, Candidate candidate,
                               double c = kDefaultDepth);

/// All four segment lifts for a batch of poses.
std::vector<SegmentLifts> run_lifters(const LifterSet& lifters, const SkeletonTopology& topo,
                                      const std::vector<Pose2D>& poses);

// ------------------------------------------------------------ cycle geometry
//
/// Projection with the depth clamped to >= 1.
Pose2D project_clamped(const Pose3D& pose);

struct CycleView
{
   Pose3D lifted;           // Y3 = lift(Y2, d)
   Eigen::Matrix3d rotation; // R = R_x(elevation) R_y(azimuth)
   Pose3D rotated;          // R (Y3 - p) + p
   Pose2D virtual_2d;       // projection of the rotated pose
};

CycleView forward_view(const Pose2D& pose, const Eigen::VectorXd& depth_offsets, double elevation,
                       double azimuth, double c = kDefaultDepth);

struct CycleReturn
{
   Pose3D relifted;      // lift of the virtual view
   Pose3D back_rotated;  // R^-1 applied about p
   Pose2D reprojected;
};

CycleReturn return_view(const CycleView& view, const Eigen::VectorXd& relift_offsets,
                        double c = kDefaultDepth);

/// Per-lifter reprojection error: mean absolute deviation over the coordinates
/// of the joints that lifter supplied. `grads`, when given, receives
/// d(term)/d(reprojected) for each part.
std::vector<double> l2d_terms(const Pose2D& target, const Pose2D& reprojected, const Routing& routing,
                              std::vector<Pose2D>* grads = nullptr);

/// Mean absolute deviation over non-root coordinates.
double l3d_loss(const Pose3D& lifted, const Pose3D& back_rotated, int root);

/// Mean squared deviation of relative bone lengths from `mean_lengths`.
double bone_loss(const Pose3D& pose, const Eigen::VectorXd& mean_lengths, const SkeletonTopology& topo,
                 Pose3D* grad = nullptr);

/// ||(a_real - b_real) - (a_virtual - b_virtual)||^2 averaged over adjacent
/// pairs (0,1), (2,3), ...; 0 for fewer than two samples.
double deformation_loss(const std::vector<Pose3D>& real, const std::vector<Pose3D>& virt);

// ------------------------------------------------------------ losses
//
struct LossBreakdown
{
   double l_nf  = 0.0;
   double l_2d  = 0.0;
   double l_3d  = 0.0;
   double l_def = 0.0;
   double l_b   = 0.0;
   double bone_weight = 50.0;
   long skipped = 0; // virtual views whose flow likelihood was non-finite

   double total() const noexcept { return l_nf + l_2d + l_3d + l_def + bone_weight * l_b; }
};

struct CycleConfig
{
   double c = kDefaultDepth;
   double bone_weight = 50.0;
   std::array<double, 3> candidate_weights{1.0, 1.0, 1.0};
};

/// Segment flows by Segment; entries may be null to drop the likelihood term.
using FlowRefs = std::array<flow::FlowModel*, 4>;

/// Full rotation-reprojection objective for a batch, summed over the three
/// candidates and averaged over samples. `azimuths` is 3 x batch (one angle per
/// candidate and sample). With `backprop` the lifters' gradients are accumulated.
LossBreakdown cycle_losses(const SkeletonTopology& topo, LifterSet& lifters, const FlowRefs& flows,
                           const Eigen::VectorXd& bone_means, const std::vector<Pose2D>& poses,
                           const Eigen::MatrixXd& azimuths, const CycleConfig& cfg, bool backprop);

/// Single-pose objective with azimuths drawn uniformly from [-pi, pi].
LossBreakdown consistency_cycle(const SkeletonTopology& topo, const Pose2D& pose, LifterSet& lifters,
                                const FlowRefs& flows, const Eigen::VectorXd& bone_means,
                                std::mt19937_64& rng, const CycleConfig& cfg = {});

// ------------------------------------------------------------ training
//
struct LifterTrainConfig
{
   int epochs          = 100;
   int batch           = 256;
   nn::AdamConfig adam = {};
   double sigma        = 0.2;
   bool sampling       = true;
   std::uint64_t seed  = 0;
   CycleConfig cycle   = {};
};

struct LifterEpoch
{
   int epoch = 0;
   LossBreakdown mean;
   double learning_rate = 0.0;
};

struct LifterTrainResult
{
   std::vector<LifterEpoch> trace;
};

/// `flows` holds the four segment flows; `full_flow` generates the sampled poses.
LifterTrainResult train_lifters(const SkeletonTopology& topo, LifterSet& lifters, const FlowRefs& flows,
                                const flow::FlowModel* full_flow, const Eigen::VectorXd& bone_means,
                                const std::vector<Pose2D>& poses, const LifterTrainConfig& cfg,
                                const std::function<void(const LifterEpoch&)>& on_epoch = {});

} // namespace links::lifter
