#include "links/occlusion.hpp"

#include "links/errors.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <ostream>
#include <random>

namespace links::occlusion {

namespace {

bool contains(const std::vector<int>& v, int x)
{
   return std::find(v.begin(), v.end(), x) != v.end();
}

std::vector<int> names_to_indices(const SkeletonTopology& topo, std::initializer_list<const char*> names)
{
   std::vector<int> out;
   for(const char* n : names) out.push_back(topo.index_of(n));
   std::sort(out.begin(), out.end());
   return out;
}

// Rows of `pose` relative to the root, rotated about the vertical axis.
Matrix relative_rows(const Pose3D& pose, const std::vector<int>& rows, double c, const Eigen::Matrix3d* rot)
{
   Matrix out(3 * rows.size(), 1);
   const Eigen::RowVector3d pivot(0.0, 0.0, c);
   for(size_t q = 0; q < rows.size(); ++q) {
      Eigen::RowVector3d v = pose.row(rows[q]) - pivot;
      if(rot) v = v * rot->transpose();
      out.block<3, 1>(Eigen::Index(3 * q), 0) = v.transpose();
   }
   return out;
}

} // namespace

// ------------------------------------------------------------ scenarios
//
std::vector<int> OcclusionScenario::visible(const SkeletonTopology& topo) const
{
   std::vector<int> out;
   for(int j : topo.non_root_joints())
      if(!contains(masked, j)) out.push_back(j);
   return out;
}

OcclusionScenario OcclusionScenario::named(std::string_view name, const SkeletonTopology& topo)
{
   std::vector<int> m;
   if(name == "left-arm") m = names_to_indices(topo, {"l_shoulder", "l_elbow", "l_wrist"});
   else if(name == "right-arm") m = names_to_indices(topo, {"r_shoulder", "r_elbow", "r_wrist"});
   else if(name == "left-leg") m = names_to_indices(topo, {"l_hip", "l_knee", "l_ankle"});
   else if(name == "right-leg") m = names_to_indices(topo, {"r_hip", "r_knee", "r_ankle"});
   else if(name == "left-arm-and-leg")
      m = names_to_indices(topo, {"l_shoulder", "l_elbow", "l_wrist", "l_hip", "l_knee", "l_ankle"});
   else if(name == "right-arm-and-leg")
      m = names_to_indices(topo, {"r_shoulder", "r_elbow", "r_wrist", "r_hip", "r_knee", "r_ankle"});
   else if(name == "both-legs") m = topo.segment(Segment::legs);
   else if(name == "full-torso") m = topo.segment(Segment::torso);
   else throw std::invalid_argument("unknown occlusion scenario '" + std::string(name) + "'");
   return custom(std::move(m), topo, std::string(name));
}

OcclusionScenario OcclusionScenario::custom(std::vector<int> masked, const SkeletonTopology& topo,
                                            std::string name)
{
   std::sort(masked.begin(), masked.end());
   masked.erase(std::unique(masked.begin(), masked.end()), masked.end());
   for(int j : masked) {
      if(j == topo.root) throw std::invalid_argument("occlusion: the root cannot be masked");
      if(j < 0 || j >= topo.joint_count()) throw std::invalid_argument("occlusion: joint index out of range");
   }

   OcclusionScenario s;
   s.name = std::move(name);
   std::vector<int> covered;
   for(auto seg : kSegments) {
      const auto& members = topo.segment(seg);
      if(std::any_of(members.begin(), members.end(), [&](int j) { return contains(masked, j); })) continue;
      std::vector<int> claim;
      for(int j : members)
         if(!contains(covered, j)) claim.push_back(j);
      if(claim.empty()) continue;
      covered.insert(covered.end(), claim.begin(), claim.end());
      s.routing.parts.emplace_back(seg, std::move(claim));
   }
   if(s.routing.parts.empty())
      throw UnsupportedScenario("occlusion scenario '" + s.name + "' leaves no fully visible lifter");

   for(int j : topo.non_root_joints())
      if(!contains(covered, j) && !contains(masked, j)) masked.push_back(j);
   std::sort(masked.begin(), masked.end());
   s.masked = std::move(masked);
   return s;
}

Json OcclusionScenario::to_json(const SkeletonTopology&) const
{
   Json routing = Json::array();
   for(const auto& [seg, joints] : this->routing.parts)
      routing.push_back({{"lifter", std::string(links::to_string(seg))}, {"joints", joints}});
   return {{"name", name}, {"masked", masked}, {"routing", routing}};
}

OcclusionScenario OcclusionScenario::from_json(const Json& j, const SkeletonTopology& topo)
{
   try {
      OcclusionScenario s = custom(j.at("masked").get<std::vector<int>>(), topo, j.at("name").get<std::string>());
      if(j.contains("routing")) {
         lifter::Routing given;
         for(const auto& part : j.at("routing"))
            given.parts.emplace_back(segment_from_string(part.at("lifter").get<std::string>()),
                                     part.at("joints").get<std::vector<int>>());
         if(given.parts != s.routing.parts)
            throw DataError("occlusion scenario '" + s.name + "': routing does not match its mask");
      }
      return s;
   } catch(const Json::exception& e) {
      throw DataError(std::string("occlusion scenario: ") + e.what());
   }
}

MaskedPose mask_pose(const Pose2D& pose, const OcclusionScenario& scenario)
{
   MaskedPose out{pose, std::vector<bool>(size_t(pose.rows()), false)};
   for(int j : scenario.masked) {
      if(j >= pose.rows()) throw std::invalid_argument("mask_pose: scenario does not match the pose");
      out.pose.row(j).setZero();
      out.mask[size_t(j)] = true;
   }
   return out;
}

std::vector<Pose3D> partial_lift(const std::vector<Pose2D>& partial, const OcclusionScenario& scenario,
                                 const lifter::LifterSet& lifters, const SkeletonTopology& topo, double c)
{
   std::vector<Pose3D> out;
   out.reserve(partial.size());
   std::array<Matrix, 4> pred;
   for(const auto& [seg, joints] : scenario.routing.parts)
      pred[size_t(seg)] = lifters[size_t(seg)].forward(flow::flatten_poses(partial, topo.segment(seg)));
   for(size_t b = 0; b < partial.size(); ++b) {
      lifter::SegmentLifts lifts;
      for(const auto& [seg, joints] : scenario.routing.parts) {
         const int n       = lifters[size_t(seg)].joints();
         lifts[size_t(seg)] = lifter::SegmentLift{pred[size_t(seg)].col(Eigen::Index(b)).head(n),
                                                  pred[size_t(seg)](n, Eigen::Index(b))};
      }
      const auto a = lifter::assemble(topo, scenario.routing, lifts);
      out.push_back(perspective_lift(partial[b], a.depth_offsets, c));
   }
   return out;
}

PartialLift partial_lift(const Pose2D& partial, const OcclusionScenario& scenario, const lifter::LifterSet& lifters,
                         const SkeletonTopology& topo, double c)
{
   lifter::SegmentLifts lifts;
   for(const auto& [seg, joints] : scenario.routing.parts)
      lifts[size_t(seg)] = lifter::lift_segment(lifters[size_t(seg)], partial, topo);
   const auto a = lifter::assemble(topo, scenario.routing, lifts);
   return {perspective_lift(partial, a.depth_offsets, c), a.elevation};
}

// ------------------------------------------------------------ fill networks
//
std::string_view to_string(Space s) noexcept
{
   return s == Space::d3 ? "3d" : "2d";
}

Space space_from_string(std::string_view s)
{
   if(s == "3d") return Space::d3;
   if(s == "2d") return Space::d2;
   throw std::invalid_argument("unknown occlusion space '" + std::string(s) + "'");
}

OcclusionNet::OcclusionNet(const OcclusionScenario& scenario, Space space, const SkeletonTopology& topo,
                           const OcclusionNetConfig& cfg)
    : scenario_(scenario)
    , space_(space)
    , cfg_(cfg)
    , visible_(scenario.visible(topo))
{
   if(scenario.masked.empty()) throw std::invalid_argument("occlusion net: scenario masks nothing");
   if(visible_.empty()) throw std::invalid_argument("occlusion net: nothing visible");
   net_ = nn::ResidualNet(dims() * int(visible_.size()), cfg.width, cfg.blocks, dims() * int(scenario.masked.size()));
}

void OcclusionNet::init(std::uint64_t seed)
{
   seed_ = seed;
   std::mt19937_64 rng(seed);
   net_.init(rng, cfg_.head_gain);
   touch();
}

Matrix OcclusionNet::forward(const Matrix& x, nn::ResidualNet::Tape* tape) const
{
   if(x.rows() != net_.in())
      throw std::invalid_argument("occlusion net: expected " + std::to_string(net_.in()) + " inputs, got "
                                  + std::to_string(x.rows()));
   return net_.forward(x, tape);
}

Matrix OcclusionNet::backward(const nn::ResidualNet::Tape& tape, const Matrix& dy)
{
   return net_.backward(tape, dy);
}

std::vector<nn::Param*> OcclusionNet::params()
{
   return net_.params();
}

Json OcclusionNet::to_json(const SkeletonTopology& topo) const
{
   return Json{{"format_version", kCheckpointFormatVersion},
               {"kind", "occlusion"},
               {"architecture",
                {{"space", std::string(to_string(space_))},
                 {"scenario", scenario_.to_json(topo)},
                 {"width", cfg_.width},
                 {"blocks", cfg_.blocks},
                 {"head_gain", cfg_.head_gain}}},
               {"init", {{"scheme", "kaiming_uniform"}, {"seed", seed_}}},
               {"params", params_to_json(net_)}};
}

OcclusionNet OcclusionNet::from_json(const Json& j, const SkeletonTopology& topo)
{
   check_header(j, "occlusion");
   try {
      const auto& a = j.at("architecture");
      OcclusionNetConfig cfg;
      cfg.width     = a.at("width").get<int>();
      cfg.blocks    = a.at("blocks").get<int>();
      cfg.head_gain = a.at("head_gain").get<double>();
      OcclusionNet n(OcclusionScenario::from_json(a.at("scenario"), topo),
                     space_from_string(a.at("space").get<std::string>()), topo, cfg);
      n.seed_ = j.at("init").at("seed").get<std::uint64_t>();
      params_from_json(n.net_, j.at("params"));
      n.touch();
      return n;
   } catch(const Json::exception& e) {
      throw DataError(std::string("occlusion checkpoint: ") + e.what());
   } catch(const std::invalid_argument& e) {
      throw DataError(std::string("occlusion checkpoint: ") + e.what());
   }
}

Matrix encode_input_3d(const std::vector<Pose3D>& partial, const std::vector<int>& visible, double c)
{
   Matrix x(3 * visible.size(), partial.size());
   for(size_t b = 0; b < partial.size(); ++b) x.col(Eigen::Index(b)) = relative_rows(partial[b], visible, c, nullptr);
   return x;
}

Matrix encode_input_2d(const std::vector<Pose2D>& partial, const std::vector<int>& visible, double c)
{
   return c * flow::flatten_poses(partial, visible);
}

Pose3D fill_3d(const OcclusionNet& net, const Pose3D& partial, double c)
{
   if(net.space() != Space::d3) throw std::invalid_argument("fill_3d: network works in 2D");
   const Matrix y = net.forward(encode_input_3d({partial}, net.visible(), c));
   Pose3D out     = partial;
   const auto& m  = net.scenario().masked;
   for(size_t q = 0; q < m.size(); ++q)
      out.row(m[q]) = Eigen::RowVector3d(y(Eigen::Index(3 * q), 0), y(Eigen::Index(3 * q + 1), 0),
                                         y(Eigen::Index(3 * q + 2), 0) + c);
   return out;
}

Pose2D fill_2d(const OcclusionNet& net, const Pose2D& partial, double c)
{
   if(net.space() != Space::d2) throw std::invalid_argument("fill_2d: network works in 3D");
   const Matrix y = net.forward(encode_input_2d({partial}, net.visible(), c));
   Pose2D out     = partial;
   const auto& m  = net.scenario().masked;
   for(size_t q = 0; q < m.size(); ++q)
      out.row(m[q]) = Eigen::RowVector2d(y(Eigen::Index(2 * q), 0) / c, y(Eigen::Index(2 * q + 1), 0) / c);
   return out;
}

Pose3D fill_2d_baseline(const OcclusionNet& net, const Pose2D& partial, const lifter::LifterSet& lifters,
                        const SkeletonTopology& topo, double c)
{
   return lifter::lift_poses(lifters, topo, {fill_2d(net, partial, c)}, lifter::Candidate::legs_torso, c).front();
}

double distillation_loss(const Matrix& prediction, const Matrix& target, Matrix* grad)
{
   if(prediction.rows() != target.rows() || prediction.cols() != target.cols())
      throw std::invalid_argument("distillation_loss: shape mismatch");
   const double n     = double(prediction.size());
   const Matrix diff  = prediction - target;
   if(grad) *grad = (2.0 / n) * diff;
   return diff.squaredNorm() / n;
}

// ------------------------------------------------------------ training
//
OcclusionTargets make_targets(const OcclusionNet& net, const lifter::LifterSet& lifters,
                              const SkeletonTopology& topo, const std::vector<Pose2D>& poses, double c)
{
   OcclusionTargets t;
   if(net.space() == Space::d2) {
      t.inputs_2d = poses;
      return t;
   }
   std::vector<Pose2D> masked;
   masked.reserve(poses.size());
   for(const auto& p : poses) masked.push_back(mask_pose(p, net.scenario()).pose);
   t.inputs_3d = partial_lift(masked, net.scenario(), lifters, topo, c);
   t.teacher   = lifter::lift_poses(lifters, topo, poses, lifter::Candidate::legs_torso, c);
   return t;
}

namespace {

void build_batch(const OcclusionNet& net, const OcclusionTargets& t, const std::vector<int>& idx,
                 const std::vector<double>* azimuths, double c, Matrix& x, Matrix& y)
{
   const auto& vis = net.visible();
   const auto& msk = net.scenario().masked;
   const int d     = net.dims();
   x.resize(Eigen::Index(d * vis.size()), Eigen::Index(idx.size()));
   y.resize(Eigen::Index(d * msk.size()), Eigen::Index(idx.size()));
   for(size_t b = 0; b < idx.size(); ++b) {
      const size_t i = size_t(idx[b]);
      if(net.space() == Space::d3) {
         Eigen::Matrix3d r;
         if(azimuths) r = rotation_y((*azimuths)[b]);
         x.col(Eigen::Index(b)) = relative_rows(t.inputs_3d[i], vis, c, azimuths ? &r : nullptr);
         y.col(Eigen::Index(b)) = relative_rows(t.teacher[i], msk, c, azimuths ? &r : nullptr);
      } else {
         const Pose2D& p = t.inputs_2d[i];
         for(size_t q = 0; q < vis.size(); ++q)
            for(int k = 0; k < 2; ++k) x(Eigen::Index(2 * q + size_t(k)), Eigen::Index(b)) = c * p(vis[q], k);
         for(size_t q = 0; q < msk.size(); ++q)
            for(int k = 0; k < 2; ++k) y(Eigen::Index(2 * q + size_t(k)), Eigen::Index(b)) = c * p(msk[q], k);
      }
   }
}

size_t target_count(const OcclusionTargets& t)
{
   return std::max(t.inputs_3d.size(), t.inputs_2d.size());
}

} // namespace

double occlusion_loss(const OcclusionNet& net, const OcclusionTargets& t, const std::vector<double>& azimuths,
                      double c)
{
   std::vector<int> idx(target_count(t));
   std::iota(idx.begin(), idx.end(), 0);
   Matrix x, y;
   build_batch(net, t, idx, azimuths.empty() ? nullptr : &azimuths, c, x, y);
   return distillation_loss(net.forward(x), y);
}

OcclusionTrainResult train_occlusion(OcclusionNet& net, const lifter::LifterSet& lifters,
                                     const SkeletonTopology& topo, const std::vector<Pose2D>& poses,
                                     const OcclusionTrainConfig& cfg,
                                     const std::function<void(const OcclusionEpoch&)>& on_epoch)
{
   if(cfg.batch < 1 || cfg.epochs < 0) throw std::invalid_argument("train_occlusion: invalid schedule");
   OcclusionTrainResult result;
   if(cfg.epochs == 0 || poses.empty()) return result;

   const OcclusionTargets t = make_targets(net, lifters, topo, poses, cfg.c);
   const bool rotate        = cfg.augment && net.space() == Space::d3;
   std::mt19937_64 rng(cfg.seed);
   std::uniform_real_distribution<double> az(-std::numbers::pi, std::numbers::pi);
   nn::Adam adam(cfg.adam);
   std::vector<int> order(poses.size());
   std::iota(order.begin(), order.end(), 0);

   for(int epoch = 1; epoch <= cfg.epochs; ++epoch) {
      std::shuffle(order.begin(), order.end(), rng);
      OcclusionEpoch rec;
      rec.epoch         = epoch;
      rec.learning_rate = adam.current_learning_rate();
      int batches       = 0;
      for(size_t begin = 0; begin < order.size(); begin += size_t(cfg.batch)) {
         const size_t end = std::min(order.size(), begin + size_t(cfg.batch));
         const std::vector<int> idx(order.begin() + long(begin), order.begin() + long(end));
         std::vector<double> angles;
         if(rotate)
            for(size_t b = 0; b < idx.size(); ++b) angles.push_back(az(rng));
         Matrix x, y, g;
         build_batch(net, t, idx, rotate ? &angles : nullptr, cfg.c, x, y);
         nn::ResidualNet::Tape tape;
         const double loss = distillation_loss(net.forward(x, &tape), y, &g);
         if(!std::isfinite(loss))
            throw DivergenceError("occlusion '" + net.scenario().name + "': loss diverged at epoch "
                                  + std::to_string(epoch));
         net.zero_grad();
         net.backward(tape, g);
         adam.step(net);
         rec.loss += loss;
         ++batches;
      }
      adam.end_epoch();
      rec.loss /= double(batches);
      result.trace.push_back(rec);
      if(on_epoch) on_epoch(rec);
   }
   return result;
}

// ------------------------------------------------------------ evaluation
//
std::vector<OcclusionRow> evaluate_occlusion(const std::vector<OcclusionScenario>& scenarios,
                                             const std::map<std::string, const OcclusionNet*>& nets_3d,
                                             const std::map<std::string, const OcclusionNet*>& nets_2d,
                                             const lifter::LifterSet& lifters, const SkeletonTopology& topo,
                                             const std::vector<data::PoseRecord>& records, double c,
                                             std::vector<std::string>* warnings)
{
   std::vector<const data::PoseRecord*> usable;
   for(const auto& r : records)
      if(r.joints_3d) usable.push_back(&r);
   if(usable.empty()) throw DataError("evaluate_occlusion: no records carry 3D ground truth");

   std::vector<OcclusionRow> rows;
   for(const auto& s : scenarios) {
      std::vector<Pose2D> masked;
      for(const auto* r : usable) masked.push_back(mask_pose(r->joints_2d, s).pose);

      for(Space space : {Space::d3, Space::d2}) {
         const auto& nets = space == Space::d3 ? nets_3d : nets_2d;
         const auto it    = nets.find(s.name);
         const OcclusionNet* net = it == nets.end() ? nullptr : it->second;
         if(!s.masked.empty() && !net) {
            if(warnings)
               warnings->push_back("no " + std::string(to_string(space)) + " network for scenario '" + s.name
                                   + "'; row skipped");
            continue;
         }
         std::vector<Pose3D> pred;
         if(space == Space::d3) {
            pred = partial_lift(masked, s, lifters, topo, c);
            if(net)
               for(auto& p : pred) p = fill_3d(*net, p, c);
         } else {
            std::vector<Pose2D> filled = masked;
            if(net)
               for(auto& p : filled) p = fill_2d(*net, p, c);
            if(net) pred = lifter::lift_poses(lifters, topo, filled, lifter::Candidate::legs_torso, c);
            else pred = partial_lift(filled, s, lifters, topo, c);
         }
         OcclusionRow row{s.name, std::string(to_string(space)), 0.0, 0.0, int(usable.size())};
         for(size_t b = 0; b < usable.size(); ++b) {
            row.pa_mpjpe += evaluate_metric(pred[b], *usable[b]->joints_3d, topo.root, Metric::pa_mpjpe);
            row.n_mpjpe += evaluate_metric(pred[b], *usable[b]->joints_3d, topo.root, Metric::n_mpjpe);
         }
         row.pa_mpjpe /= double(usable.size());
         row.n_mpjpe /= double(usable.size());
         rows.push_back(row);
      }
   }
   return rows;
}

void write_occlusion_csv(std::ostream& out, const std::vector<OcclusionRow>& rows)
{
   out << "scenario,space,pa_mpjpe,n_mpjpe,sample_count\n";
   out.precision(17);
   for(const auto& r : rows)
      out << r.scenario << ',' << r.space << ',' << r.pa_mpjpe << ',' << r.n_mpjpe << ',' << r.sample_count << '\n';
}

} // namespace links::occlusion
