#pragma once

#include <Eigen/Core>

#include <array>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace links {

/// Root-centred keypoints, one row per joint.
using Pose2D = Eigen::Matrix<double, Eigen::Dynamic, 2>;
using Pose3D = Eigen::Matrix<double, Eigen::Dynamic, 3>;

/// Fixed camera distance of the root; also the 2D head-root distance is 1/c.
inline constexpr double kDefaultDepth = 10.0;

enum class Segment { legs = 0, torso = 1, left = 2, right = 3 };
inline constexpr std::array<Segment, 4> kSegments{Segment::legs, Segment::torso,
                                                  Segment::left, Segment::right};

std::string_view to_string(Segment s) noexcept;
Segment segment_from_string(std::string_view s);

// ------------------------------------------------------------ topology
//
struct SkeletonTopology
{
   std::vector<std::string> joint_names;
   std::vector<std::pair<int, int>> bones; // (parent, child)
   std::array<std::vector<int>, 4> segments;
   int root = 0;
   int head = 0;

   int joint_count() const noexcept { return int(joint_names.size()); }
   int bone_count() const noexcept { return int(bones.size()); }
   const std::vector<int>& segment(Segment s) const noexcept { return segments[size_t(s)]; }

   // Joints shared by the left and right segments (spine, neck, head, head-top).
   std::vector<int> spine_chain() const;
   std::vector<int> non_root_joints() const;
   int index_of(std::string_view name) const;

   // Throws std::invalid_argument when any structural invariant is violated.
   void validate() const;

   // Human3.6M-style 17-joint skeleton.
   static SkeletonTopology human17();
   // Five joints (root, two legs, spine, head) for cheap gradient audits.
   static SkeletonTopology toy5();
};

bool operator==(const SkeletonTopology& a, const SkeletonTopology& b);

// ------------------------------------------------------------ normalization
//
struct NormalizedPose
{
   Pose2D pose;
   double scale = 1.0;              // factor applied after translating the root
   Eigen::Vector2d origin{0.0, 0.0}; // raw root position
};

/// Translate the root to the origin and scale so the head-root distance is 1/c.
NormalizedPose normalize_pose(const Pose2D& raw, const SkeletonTopology& topo,
                              double c = kDefaultDepth);

// ------------------------------------------------------------ camera
//
/// x_i -> (x z, y z, z) with z = max(1, d + c).
Pose3D perspective_lift(const Pose2D& pose, const Eigen::VectorXd& depth_offsets,
                        double c = kDefaultDepth);

/// (X, Y, Z) -> (X/Z, Y/Z). Throws std::domain_error for Z <= 0.
Pose2D project(const Pose3D& pose);

struct RotationParams
{
   double azimuth   = 0.0; // about the vertical (y) axis
   double elevation = 0.0; // about the horizontal (x) axis
};

/// R = R_x(elevation) * R_y(azimuth).
Eigen::Matrix3d rotation_matrix(const RotationParams& rot);
Eigen::Matrix3d rotation_x(double angle);
Eigen::Matrix3d rotation_y(double angle);

/// Rotates about the pivot (0, 0, c). With `inverse` the transpose is applied.
Pose3D rotate_pose(const Pose3D& pose, const RotationParams& rot, bool inverse,
                   double c = kDefaultDepth);

// ------------------------------------------------------------ alignment + metrics
//
/// Similarity transform (rotation, uniform scale, translation) of `pred` onto `target`.
Pose3D procrustes_align(const Pose3D& pred, const Pose3D& target);

/// Least-squares uniform scaling of `pred` onto `target` (no rotation or translation).
Pose3D scale_align(const Pose3D& pred, const Pose3D& target);

enum class Metric { mpjpe, pa_mpjpe, n_mpjpe, pck150, auc };

std::string_view to_string(Metric m) noexcept;
Metric metric_from_string(std::string_view s);

inline constexpr double kPckThreshold = 150.0;

/// Per-joint Euclidean distances.
Eigen::VectorXd joint_errors(const Pose3D& pred, const Pose3D& gt);

/// Percentage of joints with error <= threshold.
double pck(const Pose3D& pred, const Pose3D& gt, double threshold);

/// Errors in the units of `gt`; PCK and AUC in percent. AUC averages PCK over
/// the integer thresholds 0..150.
double compute_metric(const Pose3D& pred, const Pose3D& gt, Metric metric);

/// Evaluation protocol: both poses root-centred; PCK and AUC after scale alignment.
double evaluate_metric(const Pose3D& pred, const Pose3D& gt, int root, Metric metric);

// ------------------------------------------------------------ bones
//
Eigen::VectorXd absolute_bone_lengths(const Pose3D& pose, const SkeletonTopology& topo);

/// Bone lengths divided by their sum.
Eigen::VectorXd bone_lengths(const Pose3D& pose, const SkeletonTopology& topo);

/// Embeds a 2D pose in the z = 0 plane.
Pose3D to_plane(const Pose2D& pose);

} // namespace links
