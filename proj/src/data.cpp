#include "links/data.hpp"

#include "links/errors.hpp"

#include <Eigen/Geometry>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

namespace links::data {

namespace {

template<int Cols>
Eigen::Matrix<double, Eigen::Dynamic, Cols> parse_joints(const Json& j, int joints, const char* field)
{
   if(!j.is_array()) throw std::invalid_argument(std::string(field) + " must be an array");
   if(int(j.size()) != joints)
      throw std::invalid_argument(std::string(field) + ": expected " + std::to_string(joints) + " joints, got "
                                  + std::to_string(j.size()));
   Eigen::Matrix<double, Eigen::Dynamic, Cols> m(joints, Cols);
   for(int r = 0; r < joints; ++r) {
      const auto& row = j[size_t(r)];
      if(!row.is_array() || int(row.size()) != Cols)
         throw std::invalid_argument(std::string(field) + ": joint " + std::to_string(r) + " needs "
                                     + std::to_string(Cols) + " coordinates");
      for(int c = 0; c < Cols; ++c) {
         if(!row[size_t(c)].is_number())
            throw std::invalid_argument(std::string(field) + ": joint " + std::to_string(r) + " is not numeric");
         m(r, c) = row[size_t(c)].get<double>();
         if(!std::isfinite(m(r, c)))
            throw std::invalid_argument(std::string(field) + ": joint " + std::to_string(r) + " is not finite");
      }
   }
   return m;
}

template<typename M>
Json joints_to_json(const M& m)
{
   Json out = Json::array();
   for(Eigen::Index r = 0; r < m.rows(); ++r) {
      Json row = Json::array();
      for(Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
      out.push_back(std::move(row));
   }
   return out;
}

const std::vector<std::string> kLimbNames = {"hip_width", "thigh",     "shin",      "spine",    "neck",
                                             "head",      "head_top",  "shoulder",  "upper_arm", "forearm"};
const std::vector<std::string> kAngleNames = {"azimuth",       "elevation",        "torso_pitch",
                                              "torso_roll",    "torso_twist",      "neck_pitch",
                                              "hip_flexion",   "hip_abduction",    "knee_flexion",
                                              "shoulder_flexion", "shoulder_abduction", "elbow_flexion"};
const std::set<std::string> kSided = {"hip_flexion",      "hip_abduction",      "knee_flexion",
                                      "shoulder_flexion", "shoulder_abduction", "elbow_flexion"};

Eigen::Matrix3d rot_z(double a)
{
   return Eigen::AngleAxisd(a, Eigen::Vector3d::UnitZ()).toRotationMatrix();
}

// Direction of a limb hanging down (+y), swung forward (+z) by `flex` and
// outward by `abduct` on the given side (+1 right, -1 left).
Eigen::Vector3d limb_direction(double flex, double abduct, double side)
{
   return {side * std::sin(abduct), std::cos(abduct) * std::cos(flex), std::cos(abduct) * std::sin(flex)};
}

} // namespace

// ------------------------------------------------------------ I/O
//
LoadResult parse_dataset(std::istream& in, const SkeletonTopology& topo)
{
   LoadResult out;
   std::set<std::string> ids;
   std::string line;
   int number = 0;
   while(std::getline(in, line)) {
      ++number;
      if(line.find_first_not_of(" \t\r") == std::string::npos) continue;
      try {
         const Json j = Json::parse(line);
         if(!j.is_object()) throw std::invalid_argument("record must be an object");
         PoseRecord r;
         if(!j.contains("id") || !j["id"].is_string()) throw std::invalid_argument("missing string field 'id'");
         r.id = j["id"].get<std::string>();
         if(!j.contains("joints_2d")) throw std::invalid_argument("missing field 'joints_2d'");
         r.joints_2d = parse_joints<2>(j["joints_2d"], topo.joint_count(), "joints_2d");
         if(j.contains("joints_3d") && !j["joints_3d"].is_null())
            r.joints_3d = parse_joints<3>(j["joints_3d"], topo.joint_count(), "joints_3d");
         if(j.contains("camera_tag") && !j["camera_tag"].is_null()) {
            if(!j["camera_tag"].is_string()) throw std::invalid_argument("camera_tag must be a string");
            r.camera_tag = j["camera_tag"].get<std::string>();
         }
         if(!ids.insert(r.id).second) throw std::invalid_argument("duplicate id '" + r.id + "'");
         out.records.push_back(std::move(r));
      } catch(const Json::exception& e) {
         out.errors.push_back({number, std::string("malformed JSON: ") + e.what()});
      } catch(const std::invalid_argument& e) {
         out.errors.push_back({number, e.what()});
      }
   }
   return out;
}

LoadResult load_dataset(const std::filesystem::path& path, const SkeletonTopology& topo)
{
   std::ifstream in(path);
   if(!in) throw ConfigError("cannot open dataset '" + path.string() + "'");
   return parse_dataset(in, topo);
}

Json record_to_json(const PoseRecord& r)
{
   Json j = {{"id", r.id}, {"joints_2d", joints_to_json(r.joints_2d)}};
   if(r.joints_3d) j["joints_3d"] = joints_to_json(*r.joints_3d);
   if(r.camera_tag) j["camera_tag"] = *r.camera_tag;
   return j;
}

void save_dataset(const std::filesystem::path& path, const std::vector<PoseRecord>& records)
{
   if(path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
   std::ofstream out(path);
   if(!out) throw ConfigError("cannot write dataset '" + path.string() + "'");
   for(const auto& r : records) out << record_to_json(r).dump() << '\n';
   if(!out) throw DataError("failed writing dataset '" + path.string() + "'");
}

std::vector<Pose2D> poses_2d(const std::vector<PoseRecord>& records)
{
   std::vector<Pose2D> out;
   out.reserve(records.size());
   for(const auto& r : records) out.push_back(r.joints_2d);
   return out;
}

// ------------------------------------------------------------ generator
//
void GeneratorConfig::validate() const
{
   for(const auto& name : kLimbNames) {
      const auto it = limbs.find(name);
      if(it == limbs.end()) throw ConfigError("generator: missing limb length '" + name + "'");
      if(!(it->second > 0.0) || !std::isfinite(it->second))
         throw ConfigError("generator: limb length '" + name + "' must be positive");
   }
   for(const auto& name : kAngleNames) {
      const auto it = angles.find(name);
      if(it == angles.end()) throw ConfigError("generator: missing angle range '" + name + "'");
      const auto [lo, hi] = it->second;
      if(!std::isfinite(lo) || !std::isfinite(hi) || lo > hi)
         throw ConfigError("generator: invalid range for '" + name + "'");
   }
   for(const auto& [name, v] : limbs)
      if(std::find(kLimbNames.begin(), kLimbNames.end(), name) == kLimbNames.end())
         throw ConfigError("generator: unknown limb '" + name + "'");
   for(const auto& [name, v] : angles)
      if(std::find(kAngleNames.begin(), kAngleNames.end(), name) == kAngleNames.end())
         throw ConfigError("generator: unknown angle '" + name + "'");
   if(!(c > 1.0)) throw ConfigError("generator: depth c must exceed 1");
}

Json GeneratorConfig::to_json() const
{
   Json j;
   j["limbs_mm"] = limbs;
   Json a        = Json::object();
   for(const auto& [name, r] : angles) a[name] = {r.lo, r.hi};
   j["angles_rad"] = a;
   j["c"]          = c;
   if(seed) j["seed"] = *seed;
   return j;
}

GeneratorConfig GeneratorConfig::from_json(const Json& j)
{
   GeneratorConfig cfg = default_generator_config();
   try {
      if(j.contains("limbs_mm"))
         for(const auto& [name, v] : j.at("limbs_mm").items()) cfg.limbs[name] = v.get<double>();
      if(j.contains("angles_rad"))
         for(const auto& [name, v] : j.at("angles_rad").items()) {
            if(!v.is_array() || v.size() != 2) throw ConfigError("generator: range '" + name + "' needs [lo, hi]");
            cfg.angles[name] = {v[0].get<double>(), v[1].get<double>()};
         }
      if(j.contains("c")) cfg.c = j.at("c").get<double>();
      if(j.contains("seed")) cfg.seed = j.at("seed").get<std::uint64_t>();
   } catch(const Json::exception& e) {
      throw ConfigError(std::string("generator config: ") + e.what());
   }
   cfg.validate();
   return cfg;
}

GeneratorConfig default_generator_config()
{
   GeneratorConfig cfg;
   cfg.limbs  = {{"hip_width", 130.0}, {"thigh", 450.0},    {"shin", 440.0},     {"spine", 240.0},
                 {"neck", 250.0},      {"head", 110.0},     {"head_top", 110.0}, {"shoulder", 150.0},
                 {"upper_arm", 280.0}, {"forearm", 250.0}};
   const double pi = 3.14159265358979323846;
   cfg.angles = {{"azimuth", {-pi, pi}},
                 {"elevation", {0.0, 0.3}},
                 {"torso_pitch", {-0.2, 0.5}},
                 {"torso_roll", {-0.2, 0.2}},
                 {"torso_twist", {-0.4, 0.4}},
                 {"neck_pitch", {-0.3, 0.4}},
                 {"hip_flexion", {-0.5, 1.4}},
                 {"hip_abduction", {-0.1, 0.5}},
                 {"knee_flexion", {0.0, 1.8}},
                 {"shoulder_flexion", {-0.6, 2.2}},
                 {"shoulder_abduction", {0.0, 1.4}},
                 {"elbow_flexion", {0.0, 2.2}}};
   return cfg;
}

Pose3D forward_kinematics(const GeneratorConfig& cfg, const std::map<std::string, double>& a)
{
   auto len   = [&](const char* n) { return cfg.limbs.at(n); };
   auto angle = [&](const std::string& n) { return a.at(n); };

   Pose3D p = Pose3D::Zero(17, 3);
   auto set = [&](int j, const Eigen::Vector3d& v) { p.row(j) = v.transpose(); };
   auto at  = [&](int j) { return Eigen::Vector3d(p.row(j).transpose()); };

   // Legs.
   for(int s = 0; s < 2; ++s) {
      const double side = s == 0 ? 1.0 : -1.0;
      const std::string pre = s == 0 ? "r_" : "l_";
      const int hip = s == 0 ? 1 : 4;
      const double flex = angle(pre + "hip_flexion"), abd = angle(pre + "hip_abduction");
      set(hip, Eigen::Vector3d(side * len("hip_width"), 0.0, 0.0));
      set(hip + 1, at(hip) + len("thigh") * limb_direction(flex, abd, side));
      set(hip + 2, at(hip + 1) + len("shin") * limb_direction(flex - angle(pre + "knee_flexion"), abd, side));
   }

   // Torso: twist, then forward pitch, then sideways roll.
   const Eigen::Matrix3d rt = Eigen::AngleAxisd(angle("torso_twist"), Eigen::Vector3d::UnitY()).toRotationMatrix()
                              * Eigen::AngleAxisd(-angle("torso_pitch"), Eigen::Vector3d::UnitX()).toRotationMatrix()
                              * rot_z(angle("torso_roll"));
   const Eigen::Vector3d up(0.0, -1.0, 0.0);
   set(7, rt * up * len("spine"));
   set(8, at(7) + rt * up * len("neck"));
   const Eigen::Matrix3d rn = rt * Eigen::AngleAxisd(-angle("neck_pitch"), Eigen::Vector3d::UnitX()).toRotationMatrix();
   set(9, at(8) + rn * up * len("head"));
   set(10, at(9) + rn * up * len("head_top"));

   // Arms hang from the shoulders in the torso frame.
   for(int s = 0; s < 2; ++s) {
      const double side = s == 0 ? -1.0 : 1.0;
      const std::string pre = s == 0 ? "l_" : "r_";
      const int sh = s == 0 ? 11 : 14;
      const double flex = angle(pre + "shoulder_flexion"), abd = angle(pre + "shoulder_abduction");
      set(sh, at(8) + rt * Eigen::Vector3d(side * len("shoulder"), 0.0, 0.0));
      set(sh + 1, at(sh) + rt * (len("upper_arm") * limb_direction(flex, abd, side)));
      set(sh + 2, at(sh + 1) + rt * (len("forearm") * limb_direction(flex + angle(pre + "elbow_flexion"), abd, side)));
   }
   return p;
}

Eigen::VectorXd true_depth_offsets(const Pose3D& pose_mm, const SkeletonTopology& topo, double c)
{
   const Pose3D g     = pose_mm.rowwise() - pose_mm.row(topo.root);
   const double denom = c * g.row(topo.head).head<2>().norm() - g(topo.head, 2);
   if(!(denom > 0.0)) throw std::invalid_argument("true_depth_offsets: head projects onto the root");
   return (c / denom) * g.col(2);
}

std::vector<PoseRecord> generate_synthetic(int count, std::uint64_t seed, const GeneratorConfig& cfg,
                                           const SkeletonTopology& topo)
{
   cfg.validate();
   if(count < 0) throw ConfigError("generator: negative count");
   if(topo.joint_count() != 17) throw ConfigError("generator: requires the 17-joint skeleton");

   std::mt19937_64 rng(seed);
   auto draw = [&](const std::string& name) {
      const auto [lo, hi] = cfg.angles.at(name);
      return std::uniform_real_distribution<double>(lo, hi)(rng);
   };

   std::vector<PoseRecord> out;
   out.reserve(size_t(count));
   for(int i = 0; i < count; ++i) {
      bool placed = false;
      for(int attempt = 0; attempt < 1000 && !placed; ++attempt) {
         std::map<std::string, double> a;
         for(const auto& name : kAngleNames) {
            if(kSided.count(name)) {
               a["l_" + name] = draw(name);
               a["r_" + name] = draw(name);
            } else {
               a[name] = draw(name);
            }
         }
         const Pose3D body  = forward_kinematics(cfg, a);
         const Eigen::Matrix3d r = rotation_matrix({a["azimuth"], a["elevation"]});
         const Pose3D cam   = body * r.transpose();

         const Eigen::RowVector3d head = cam.row(topo.head);
         if(head.head<2>().norm() < 0.3 * head.norm()) continue;
         const Eigen::VectorXd offsets = true_depth_offsets(cam, topo, cfg.c);
         if((offsets.array() + cfg.c).minCoeff() < 1.5) continue;

         const double lambda = cfg.c / (cfg.c * head.head<2>().norm() - head(2));
         Pose3D scaled = lambda * cam;
         scaled.col(2).array() += cfg.c;

         PoseRecord rec;
         char id[32];
         std::snprintf(id, sizeof id, "synth-%06d", i);
         rec.id         = id;
         rec.joints_2d  = normalize_pose(project(scaled), topo, cfg.c).pose;
         rec.joints_3d  = cam;
         rec.camera_tag = "synthetic";
         out.push_back(std::move(rec));
         placed = true;
      }
      if(!placed) throw ConfigError("generator: angle ranges never give a usable view");
   }
   return out;
}

// ------------------------------------------------------------ bone statistics
//
BoneStats compute_bone_stats(const std::vector<PoseRecord>& records, const SkeletonTopology& topo)
{
   Eigen::VectorXd sum = Eigen::VectorXd::Zero(topo.bone_count());
   int n               = 0;
   for(const auto& r : records) {
      if(!r.joints_3d) continue;
      sum += bone_lengths(*r.joints_3d, topo);
      ++n;
   }
   if(n == 0) throw DataError("bone stats: no records carry 3D joints");
   const Eigen::VectorXd mean = sum / double(n);
   return {mean / mean.sum(), "computed-from-data"};
}

std::string bone_name(const SkeletonTopology& topo, int bone)
{
   const auto [p, c] = topo.bones.at(size_t(bone));
   return topo.joint_names[size_t(p)] + "-" + topo.joint_names[size_t(c)];
}

Json bone_stats_to_json(const BoneStats& s, const SkeletonTopology& topo)
{
   Json bones = Json::object();
   for(int b = 0; b < topo.bone_count(); ++b) bones[bone_name(topo, b)] = s.means(b);
   return {{"source", s.source}, {"relative_lengths", bones}};
}

BoneStats bone_stats_from_json(const Json& j, const SkeletonTopology& topo)
{
   BoneStats s;
   s.means = Eigen::VectorXd(topo.bone_count());
   try {
      const auto& bones = j.at("relative_lengths");
      if(int(bones.size()) != topo.bone_count())
         throw DataError("bone stats: expected " + std::to_string(topo.bone_count()) + " bones");
      for(int b = 0; b < topo.bone_count(); ++b) {
         const double v = bones.at(bone_name(topo, b)).get<double>();
         if(!(v > 0.0) || !std::isfinite(v)) throw DataError("bone stats: '" + bone_name(topo, b) + "' must be positive");
         s.means(b) = v;
      }
      s.source = j.value("source", std::string("user-supplied"));
   } catch(const Json::exception& e) {
      throw DataError(std::string("bone stats: ") + e.what());
   }
   s.means /= s.means.sum();
   return s;
}

} // namespace links::data
