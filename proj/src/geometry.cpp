#include "links/geometry.hpp"

#include <Eigen/LU>
#include <Eigen/SVD>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <stdexcept>

namespace links {

namespace {

std::vector<int> sorted(std::vector<int> v)
{
   std::sort(v.begin(), v.end());
   return v;
}

void require_same_shape(const Pose3D& a, const Pose3D& b)
{
   if(a.rows() != b.rows())
      throw std::invalid_argument("pose topology mismatch: " + std::to_string(a.rows())
                                  + " vs " + std::to_string(b.rows()) + " joints");
}

} // namespace

std::string_view to_string(Segment s) noexcept
{
   switch(s) {
   case Segment::legs: return "legs";
   case Segment::torso: return "torso";
   case Segment::left: return "left";
   case Segment::right: return "right";
   }
   return "?";
}

Segment segment_from_string(std::string_view s)
{
   for(auto seg : kSegments)
      if(to_string(seg) == s) return seg;
   throw std::invalid_argument("unknown segment '" + std::string(s) + "'");
}

// ------------------------------------------------------------ topology
//
std::vector<int> SkeletonTopology::spine_chain() const
{
   std::vector<int> out;
   const auto l = sorted(segment(Segment::left));
   const auto r = sorted(segment(Segment::right));
   std::set_intersection(l.begin(), l.end(), r.begin(), r.end(), std::back_inserter(out));
   return out;
}

std::vector<int> SkeletonTopology::non_root_joints() const
{
   std::vector<int> out;
   for(int i = 0; i < joint_count(); ++i)
      if(i != root) out.push_back(i);
   return out;
}

int SkeletonTopology::index_of(std::string_view name) const
{
   for(int i = 0; i < joint_count(); ++i)
      if(joint_names[size_t(i)] == name) return i;
   throw std::invalid_argument("unknown joint '" + std::string(name) + "'");
}

void SkeletonTopology::validate() const
{
   const int n = joint_count();
   auto fail = [](const std::string& msg) { throw std::invalid_argument("topology: " + msg); };

   if(n < 2) fail("need at least two joints");
   if(root < 0 || root >= n) fail("root out of range");
   if(head < 0 || head >= n || head == root) fail("head must be a non-root joint");
   if(bone_count() != n - 1) fail("a tree over N joints has N-1 bones");

   std::vector<int> parent(size_t(n), -1);
   for(const auto& [p, c] : bones) {
      if(p < 0 || p >= n || c < 0 || c >= n || p == c) fail("bone index out of range");
      if(c == root) fail("root cannot be a child");
      if(parent[size_t(c)] != -1) fail("joint with two parents");
      parent[size_t(c)] = p;
   }
   // Every joint must reach the root without revisiting a node.
   for(int j = 0; j < n; ++j) {
      int steps = 0;
      for(int k = j; k != root; k = parent[size_t(k)]) {
         if(k < 0 || ++steps > n) fail("bones do not form a tree rooted at the root");
      }
   }

   const auto all = non_root_joints();
   for(const auto& seg : segments) {
      if(seg.empty()) fail("empty segment");
      std::set<int> uniq(seg.begin(), seg.end());
      if(uniq.size() != seg.size()) fail("duplicate joint in segment");
      for(int j : seg)
         if(j < 0 || j >= n || j == root) fail("segment contains root or invalid joint");
   }

   std::vector<int> lt = segment(Segment::legs);
   lt.insert(lt.end(), segment(Segment::torso).begin(), segment(Segment::torso).end());
   if(sorted(lt) != all) fail("legs and torso must partition the non-root joints");

   std::set<int> lr(segment(Segment::left).begin(), segment(Segment::left).end());
   lr.insert(segment(Segment::right).begin(), segment(Segment::right).end());
   if(std::vector<int>(lr.begin(), lr.end()) != all)
      fail("left and right must cover the non-root joints");

   const auto chain  = spine_chain();
   const auto torso  = sorted(segment(Segment::torso));
   if(chain.empty()) fail("left and right must share a spine chain");
   if(!std::includes(torso.begin(), torso.end(), chain.begin(), chain.end()))
      fail("spine chain must lie in the torso");
}

SkeletonTopology SkeletonTopology::human17()
{
   SkeletonTopology t;
   t.joint_names = {"pelvis",  "r_hip",      "r_knee",  "r_ankle",    "l_hip",   "l_knee",
                    "l_ankle", "spine",      "neck",    "head",       "head_top", "l_shoulder",
                    "l_elbow", "l_wrist",    "r_shoulder", "r_elbow", "r_wrist"};
   t.bones       = {{0, 1},  {1, 2},  {2, 3},  {0, 4},   {4, 5},   {5, 6},   {0, 7},   {7, 8},
                    {8, 9},  {9, 10}, {8, 11}, {11, 12}, {12, 13}, {8, 14}, {14, 15}, {15, 16}};
   t.segments[size_t(Segment::legs)]  = {1, 2, 3, 4, 5, 6};
   t.segments[size_t(Segment::torso)] = {7, 8, 9, 10, 11, 12, 13, 14, 15, 16};
   t.segments[size_t(Segment::left)]  = {4, 5, 6, 7, 8, 9, 10, 11, 12, 13};
   t.segments[size_t(Segment::right)] = {1, 2, 3, 7, 8, 9, 10, 14, 15, 16};
   t.root = 0;
   t.head = 9;
   return t;
}

SkeletonTopology SkeletonTopology::toy5()
{
   SkeletonTopology t;
   t.joint_names = {"pelvis", "r_foot", "l_foot", "spine", "head"};
   t.bones       = {{0, 1}, {0, 2}, {0, 3}, {3, 4}};
   t.segments[size_t(Segment::legs)]  = {1, 2};
   t.segments[size_t(Segment::torso)] = {3, 4};
   t.segments[size_t(Segment::left)]  = {2, 3, 4};
   t.segments[size_t(Segment::right)] = {1, 3, 4};
   t.root = 0;
   t.head = 4;
   return t;
}

bool operator==(const SkeletonTopology& a, const SkeletonTopology& b)
{
   return a.joint_names == b.joint_names && a.bones == b.bones && a.segments == b.segments
          && a.root == b.root && a.head == b.head;
}

// ------------------------------------------------------------ normalization
//
NormalizedPose normalize_pose(const Pose2D& raw, const SkeletonTopology& topo, double c)
{
   if(raw.rows() != topo.joint_count())
      throw std::invalid_argument("normalize_pose: expected " + std::to_string(topo.joint_count())
                                  + " joints, got " + std::to_string(raw.rows()));
   if(!(c > 0.0)) throw std::invalid_argument("normalize_pose: c must be positive");
   if(!raw.allFinite()) throw std::invalid_argument("normalize_pose: non-finite coordinates");

   NormalizedPose out;
   out.origin      = raw.row(topo.root).transpose();
   const double hd = (raw.row(topo.head) - raw.row(topo.root)).norm();
   if(!(hd > 0.0))
      throw std::invalid_argument("normalize_pose: degenerate pose (head coincides with root)");

   out.scale = (1.0 / c) / hd;
   out.pose  = (raw.rowwise() - out.origin.transpose()) * out.scale;
   return out;
}

// ------------------------------------------------------------ camera
//
Pose3D perspective_lift(const Pose2D& pose, const Eigen::VectorXd& depth_offsets, double c)
{
   if(depth_offsets.size() != pose.rows())
      throw std::invalid_argument("perspective_lift: one depth offset per keypoint required");
   Pose3D out(pose.rows(), 3);
   for(Eigen::Index i = 0; i < pose.rows(); ++i) {
      const double z = std::max(1.0, depth_offsets(i) + c);
      out(i, 0)      = pose(i, 0) * z;
      out(i, 1)      = pose(i, 1) * z;
      out(i, 2)      = z;
   }
   return out;
}

Pose2D project(const Pose3D& pose)
{
   Pose2D out(pose.rows(), 2);
   for(Eigen::Index i = 0; i < pose.rows(); ++i) {
      const double z = pose(i, 2);
      if(!(z > 0.0)) throw std::domain_error("project: keypoint behind the camera");
      out(i, 0) = pose(i, 0) / z;
      out(i, 1) = pose(i, 1) / z;
   }
   return out;
}

Eigen::Matrix3d rotation_x(double angle)
{
   const double cs = std::cos(angle), sn = std::sin(angle);
   Eigen::Matrix3d r;
   r << 1.0, 0.0, 0.0, 0.0, cs, -sn, 0.0, sn, cs;
   return r;
}

Eigen::Matrix3d rotation_y(double angle)
{
   const double cs = std::cos(angle), sn = std::sin(angle);
   Eigen::Matrix3d r;
   r << cs, 0.0, sn, 0.0, 1.0, 0.0, -sn, 0.0, cs;
   return r;
}

Eigen::Matrix3d rotation_matrix(const RotationParams& rot)
{
   return rotation_x(rot.elevation) * rotation_y(rot.azimuth);
}

Pose3D rotate_pose(const Pose3D& pose, const RotationParams& rot, bool inverse, double c)
{
   const Eigen::Matrix3d r = inverse ? Eigen::Matrix3d(rotation_matrix(rot).transpose())
                                     : rotation_matrix(rot);
   const Eigen::RowVector3d pivot(0.0, 0.0, c);
   Pose3D out = ((pose.rowwise() - pivot) * r.transpose()).rowwise() + pivot;
   return out;
}

// ------------------------------------------------------------ alignment
//
Pose3D procrustes_align(const Pose3D& pred, const Pose3D& target)
{
   require_same_shape(pred, target);
   const double n = double(pred.rows());

   const Eigen::RowVector3d mu_p = pred.colwise().mean();
   const Eigen::RowVector3d mu_t = target.colwise().mean();
   const Pose3D p                = pred.rowwise() - mu_p;
   const Pose3D t                = target.rowwise() - mu_t;

   const double var_p = p.squaredNorm() / n;
   if(!(var_p > 1e-300)) throw std::invalid_argument("procrustes_align: degenerate prediction");

   const Eigen::Matrix3d cov = t.transpose() * p / n;
   Eigen::JacobiSVD<Eigen::Matrix3d> svd(cov, Eigen::ComputeFullU | Eigen::ComputeFullV);
   Eigen::Vector3d s(1.0, 1.0, 1.0);
   if(svd.matrixU().determinant() * svd.matrixV().determinant() < 0.0) s(2) = -1.0;

   const Eigen::Matrix3d r = svd.matrixU() * s.asDiagonal() * svd.matrixV().transpose();
   const double scale      = svd.singularValues().dot(s) / var_p;

   Pose3D out = ((scale * p) * r.transpose()).rowwise() + mu_t;
   return out;
}

Pose3D scale_align(const Pose3D& pred, const Pose3D& target)
{
   require_same_shape(pred, target);
   const double pp = pred.squaredNorm();
   if(!(pp > 0.0)) throw std::invalid_argument("scale_align: degenerate prediction");
   return pred * (pred.cwiseProduct(target).sum() / pp);
}

std::string_view to_string(Metric m) noexcept
{
   switch(m) {
   case Metric::mpjpe: return "mpjpe";
   case Metric::pa_mpjpe: return "pa-mpjpe";
   case Metric::n_mpjpe: return "n-mpjpe";
   case Metric::pck150: return "pck150";
   case Metric::auc: return "auc";
   }
   return "?";
}

Metric metric_from_string(std::string_view s)
{
   for(auto m : {Metric::mpjpe, Metric::pa_mpjpe, Metric::n_mpjpe, Metric::pck150, Metric::auc})
      if(to_string(m) == s) return m;
   throw std::invalid_argument("unknown metric '" + std::string(s) + "'");
}

Eigen::VectorXd joint_errors(const Pose3D& pred, const Pose3D& gt)
{
   require_same_shape(pred, gt);
   return (pred - gt).rowwise().norm();
}

double pck(const Pose3D& pred, const Pose3D& gt, double threshold)
{
   const Eigen::VectorXd err = joint_errors(pred, gt);
   if(err.size() == 0) return 100.0;
   const auto hits = (err.array() <= threshold).count();
   return 100.0 * double(hits) / double(err.size());
}

double compute_metric(const Pose3D& pred, const Pose3D& gt, Metric metric)
{
   require_same_shape(pred, gt);
   switch(metric) {
   case Metric::mpjpe: return joint_errors(pred, gt).mean();
   case Metric::pa_mpjpe: return joint_errors(procrustes_align(pred, gt), gt).mean();
   case Metric::n_mpjpe: return joint_errors(scale_align(pred, gt), gt).mean();
   case Metric::pck150: return pck(pred, gt, kPckThreshold);
   case Metric::auc: {
      const Eigen::VectorXd err = joint_errors(pred, gt);
      double total              = 0.0;
      for(int t = 0; t <= int(kPckThreshold); ++t)
         total += 100.0 * double((err.array() <= double(t)).count()) / double(err.size());
      return total / (kPckThreshold + 1.0);
   }
   }
   throw std::invalid_argument("compute_metric: unknown metric");
}

double evaluate_metric(const Pose3D& pred, const Pose3D& gt, int root, Metric metric)
{
   require_same_shape(pred, gt);
   if(root < 0 || root >= pred.rows()) throw std::invalid_argument("evaluate_metric: bad root");
   const Pose3D p = pred.rowwise() - pred.row(root);
   const Pose3D g = gt.rowwise() - gt.row(root);
   if(metric == Metric::pck150 || metric == Metric::auc) return compute_metric(scale_align(p, g), g, metric);
   return compute_metric(p, g, metric);
}

// ------------------------------------------------------------ bones
//
Eigen::VectorXd absolute_bone_lengths(const Pose3D& pose, const SkeletonTopology& topo)
{
   if(pose.rows() != topo.joint_count())
      throw std::invalid_argument("bone_lengths: pose does not match topology");
   Eigen::VectorXd out(topo.bone_count());
   for(int b = 0; b < topo.bone_count(); ++b) {
      const auto [p, c] = topo.bones[size_t(b)];
      out(b)            = (pose.row(c) - pose.row(p)).norm();
   }
   return out;
}

Eigen::VectorXd bone_lengths(const Pose3D& pose, const SkeletonTopology& topo)
{
   const Eigen::VectorXd len = absolute_bone_lengths(pose, topo);
   const double total        = len.sum();
   if(!(total > 0.0)) throw std::invalid_argument("bone_lengths: zero total length");
   return len / total;
}

Pose3D to_plane(const Pose2D& pose)
{
   Pose3D out = Pose3D::Zero(pose.rows(), 3);
   out.leftCols<2>() = pose;
   return out;
}

} // namespace links
