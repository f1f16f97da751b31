#pragma once

#include "links/checkpoint.hpp"
#include "links/geometry.hpp"

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace links::data {

struct PoseRecord
{
   std::string id;
   Pose2D joints_2d;
   std::optional<Pose3D> joints_3d; // millimetres
   std::optional<std::string> camera_tag;
};

struct LoadIssue
{
   int line = 0; // 1-based
   std::string message;
};

struct LoadResult
{
   std::vector<PoseRecord> records;
   std::vector<LoadIssue> errors;
};

/// One JSON object per line. Bad lines are reported and skipped.
LoadResult parse_dataset(std::istream& in, const SkeletonTopology& topo);
/// Throws ConfigError when the file cannot be opened.
LoadResult load_dataset(const std::filesystem::path& path, const SkeletonTopology& topo);

Json record_to_json(const PoseRecord& r);
void save_dataset(const std::filesystem::path& path, const std::vector<PoseRecord>& records);

std::vector<Pose2D> poses_2d(const std::vector<PoseRecord>& records);

// ------------------------------------------------------------ synthetic skeletons
//
struct AngleRange
{
   double lo = 0.0;
   double hi = 0.0;
};

/// Limb lengths in mm and joint-angle ranges in radians. Every entry is
/// required; see default_generator_config() for the names.
struct GeneratorConfig
{
   std::map<std::string, double> limbs;
   std::map<std::string, AngleRange> angles;
   double c = kDefaultDepth;
   std::optional<std::uint64_t> seed;

   /// Throws ConfigError on missing names, non-positive lengths or lo > hi.
   void validate() const;

   Json to_json() const;
   static GeneratorConfig from_json(const Json& j);
};

GeneratorConfig default_generator_config();

/// Body-frame forward kinematics in mm, root at the origin, y pointing down.
Pose3D forward_kinematics(const GeneratorConfig& cfg, const std::map<std::string, double>& angles);

std::vector<PoseRecord> generate_synthetic(int count, std::uint64_t seed, const GeneratorConfig& cfg,
                                           const SkeletonTopology& topo = SkeletonTopology::human17());

/// Depth offsets of a camera-frame 3D pose once placed so that its projection
/// is normalized (root at depth c, head-root image distance 1/c).
Eigen::VectorXd true_depth_offsets(const Pose3D& pose_mm, const SkeletonTopology& topo,
                                   double c = kDefaultDepth);

// ------------------------------------------------------------ bone statistics
//
struct BoneStats
{
   Eigen::VectorXd means; // relative lengths, sum 1
   std::string source;    // "computed-from-data" or "user-supplied"
};

/// Mean of per-pose relative bone lengths over records with 3D, renormalized.
BoneStats compute_bone_stats(const std::vector<PoseRecord>& records, const SkeletonTopology& topo);

std::string bone_name(const SkeletonTopology& topo, int bone);
Json bone_stats_to_json(const BoneStats& s, const SkeletonTopology& topo);
BoneStats bone_stats_from_json(const Json& j, const SkeletonTopology& topo);

} // namespace links::data
