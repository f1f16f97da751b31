#include "links/lifter.hpp"

#include "links/errors.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <stdexcept>

namespace links::lifter {

namespace {

int position_in(const std::vector<int>& v, int x)
{
   const auto it = std::find(v.begin(), v.end(), x);
   return it == v.end() ? -1 : int(it - v.begin());
}

double sign(double x)
{
   return double((x > 0.0) - (x < 0.0));
}

Eigen::Matrix3d rotation_x_derivative(double angle)
{
   const double cs = std::cos(angle), sn = std::sin(angle);
   Eigen::Matrix3d r;
   r << 0.0, 0.0, 0.0, 0.0, -sn, -cs, 0.0, cs, -sn;
   return r;
}

// d/d(pose) of project_clamped.
Pose3D project_clamped_backward(const Pose3D& pose, const Pose2D& dy)
{
   Pose3D dp(pose.rows(), 3);
   for(Eigen::Index j = 0; j < pose.rows(); ++j) {
      const double z = pose(j, 2);
      if(z > 1.0) {
         dp(j, 0) = dy(j, 0) / z;
         dp(j, 1) = dy(j, 1) / z;
         dp(j, 2) = -(dy(j, 0) * pose(j, 0) + dy(j, 1) * pose(j, 1)) / (z * z);
      } else {
         dp(j, 0) = dy(j, 0);
         dp(j, 1) = dy(j, 1);
         dp(j, 2) = 0.0;
      }
   }
   return dp;
}

// d/d(pose2d) and d/d(offsets) of perspective_lift.
void lift_backward(const Pose2D& pose, const Eigen::VectorXd& offsets, double c, const Pose3D& dy,
                   Pose2D* dpose, Eigen::VectorXd& doffsets)
{
   doffsets.resize(pose.rows());
   if(dpose) dpose->resize(pose.rows(), 2);
   for(Eigen::Index j = 0; j < pose.rows(); ++j) {
      const double raw = offsets(j) + c;
      const double z   = std::max(1.0, raw);
      const double dz  = dy(j, 0) * pose(j, 0) + dy(j, 1) * pose(j, 1) + dy(j, 2);
      doffsets(j)      = raw > 1.0 ? dz : 0.0;
      if(dpose) {
         (*dpose)(j, 0) = dy(j, 0) * z;
         (*dpose)(j, 1) = dy(j, 1) * z;
      }
   }
}

std::vector<int> set_difference(const std::vector<int>& a, const std::vector<int>& b)
{
   std::vector<int> out;
   for(int x : a)
      if(position_in(b, x) < 0) out.push_back(x);
   return out;
}

} // namespace

// ------------------------------------------------------------ model
//
LifterModel::LifterModel(Segment segment, int joints, const LifterConfig& cfg)
    : segment_(segment)
    , joints_(joints)
    , cfg_(cfg)
    , stem_(2 * joints, cfg.width)
    , shared_(cfg.width)
    , depth_blocks_(size_t(cfg.blocks), nn::ResidualBlock(cfg.width))
    , elevation_blocks_(size_t(cfg.blocks), nn::ResidualBlock(cfg.width))
    , depth_head_(cfg.width, joints)
    , elevation_head_(cfg.width, 1)
{
   if(joints < 1 || cfg.width < 1 || cfg.blocks < 0 || !(cfg.input_scale > 0.0))
      throw std::invalid_argument("lifter: invalid architecture");
}

void LifterModel::init(std::uint64_t seed)
{
   seed_ = seed;
   std::mt19937_64 rng(seed);
   stem_.init(nn::Init::kaiming_uniform, 1.0, rng);
   shared_.init(rng);
   for(auto& b : depth_blocks_) b.init(rng);
   for(auto& b : elevation_blocks_) b.init(rng);
   depth_head_.init(nn::Init::kaiming_uniform, cfg_.head_gain, rng);
   elevation_head_.init(nn::Init::kaiming_uniform, cfg_.head_gain, rng);
   touch();
}

Matrix LifterModel::forward(const Matrix& x, Tape* tape) const
{
   if(x.rows() != 2 * joints_)
      throw std::invalid_argument("lifter '" + std::string(to_string(segment_)) + "': expected "
                                  + std::to_string(2 * joints_) + " inputs, got "
                                  + std::to_string(x.rows()));
   Matrix scaled = x * cfg_.input_scale;
   Matrix pre    = stem_.forward(scaled);
   Matrix h      = nn::relu(pre);
   if(tape) {
      tape->owner   = this;
      tape->version = version();
      tape->input   = std::move(scaled);
      tape->depth.assign(depth_blocks_.size(), {});
      tape->elevation.assign(elevation_blocks_.size(), {});
   }
   h = shared_.forward(h, tape ? &tape->shared : nullptr);

   Matrix hd = h;
   for(size_t i = 0; i < depth_blocks_.size(); ++i)
      hd = depth_blocks_[i].forward(hd, tape ? &tape->depth[i] : nullptr);
   Matrix he = h;
   for(size_t i = 0; i < elevation_blocks_.size(); ++i)
      he = elevation_blocks_[i].forward(he, tape ? &tape->elevation[i] : nullptr);

   Matrix out(joints_ + 1, x.cols());
   out.topRows(joints_) = depth_head_.forward(hd);
   out.bottomRows(1)    = elevation_head_.forward(he);
   if(tape) {
      tape->stem_pre          = std::move(pre);
      tape->depth_head_in     = std::move(hd);
      tape->elevation_head_in = std::move(he);
   }
   return out;
}

Matrix LifterModel::backward(const Tape& tape, const Matrix& dy)
{
   if(tape.owner != this || tape.version != version() || tape.depth.size() != depth_blocks_.size())
      throw std::logic_error("lifter: stale or mismatched tape");
   if(dy.rows() != joints_ + 1 || dy.cols() != tape.input.cols())
      throw std::invalid_argument("lifter: output gradient shape mismatch");

   Matrix gd = depth_head_.backward(tape.depth_head_in, dy.topRows(joints_));
   for(size_t i = depth_blocks_.size(); i-- > 0;) gd = depth_blocks_[i].backward(tape.depth[i], gd);
   Matrix ge = elevation_head_.backward(tape.elevation_head_in, dy.bottomRows(1));
   for(size_t i = elevation_blocks_.size(); i-- > 0;)
      ge = elevation_blocks_[i].backward(tape.elevation[i], ge);

   Matrix g = shared_.backward(tape.shared, gd + ge);
   g        = nn::relu_backward(tape.stem_pre, g);
   return stem_.backward(tape.input, g) * cfg_.input_scale;
}

std::vector<nn::Param*> LifterModel::params()
{
   std::vector<nn::Param*> out;
   stem_.append_params(out);
   shared_.append_params(out);
   for(auto& b : depth_blocks_) b.append_params(out);
   for(auto& b : elevation_blocks_) b.append_params(out);
   depth_head_.append_params(out);
   elevation_head_.append_params(out);
   return out;
}

Json LifterModel::to_json() const
{
   return Json{{"format_version", kCheckpointFormatVersion},
               {"kind", "lifter"},
               {"architecture",
                {{"segment", std::string(to_string(segment_))},
                 {"joints", joints_},
                 {"width", cfg_.width},
                 {"blocks", cfg_.blocks},
                 {"head_gain", cfg_.head_gain},
                 {"input_scale", cfg_.input_scale}}},
               {"init", {{"scheme", "kaiming_uniform"}, {"seed", seed_}}},
               {"params", params_to_json(*this)}};
}

LifterModel LifterModel::from_json(const Json& j)
{
   check_header(j, "lifter");
   try {
      const auto& a = j.at("architecture");
      LifterConfig cfg;
      cfg.width     = a.at("width").get<int>();
      cfg.blocks    = a.at("blocks").get<int>();
      cfg.head_gain = a.at("head_gain").get<double>();
      cfg.input_scale = a.at("input_scale").get<double>();
      LifterModel m(segment_from_string(a.at("segment").get<std::string>()), a.at("joints").get<int>(), cfg);
      m.seed_ = j.at("init").at("seed").get<std::uint64_t>();
      params_from_json(m, j.at("params"));
      return m;
   } catch(const Json::exception& e) {
      throw DataError(std::string("lifter checkpoint: ") + e.what());
   } catch(const std::invalid_argument& e) {
      throw DataError(std::string("lifter checkpoint: ") + e.what());
   }
}

LifterSet make_lifters(const SkeletonTopology& topo, const LifterConfig& cfg, std::uint64_t seed)
{
   LifterSet out;
   for(auto s : kSegments) {
      out[size_t(s)] = LifterModel(s, int(topo.segment(s).size()), cfg);
      out[size_t(s)].init(seed + std::uint64_t(s));
   }
   return out;
}

SegmentLift lift_segment(const LifterModel& model, const Pose2D& pose, const SkeletonTopology& topo)
{
   const auto& joints = topo.segment(model.segment());
   if(pose.rows() != topo.joint_count())
      throw std::invalid_argument("lift_segment: pose does not match topology");
   const Matrix out = model.forward(flow::flatten_poses({pose}, joints));
   return {out.col(0).head(model.joints()), out(model.joints(), 0)};
}

// ------------------------------------------------------------ assembly
//
std::string_view to_string(Candidate c) noexcept
{
   switch(c) {
   case Candidate::legs_torso: return "legs-torso";
   case Candidate::left_right_r: return "left-right-r";
   case Candidate::left_right_l: return "left-right-l";
   }
   return "?";
}

Candidate candidate_from_string(std::string_view s)
{
   for(auto c : kCandidates)
      if(to_string(c) == s) return c;
   throw std::invalid_argument("unknown candidate '" + std::string(s) + "'");
}

std::vector<int> Routing::joints() const
{
   std::vector<int> out;
   for(const auto& [seg, js] : parts) out.insert(out.end(), js.begin(), js.end());
   std::sort(out.begin(), out.end());
   return out;
}

Routing candidate_routing(const SkeletonTopology& topo, Candidate c)
{
   const auto chain = topo.spine_chain();
   const auto& l    = topo.segment(Segment::left);
   const auto& r    = topo.segment(Segment::right);
   switch(c) {
   case Candidate::legs_torso:
      return {{{Segment::legs, topo.segment(Segment::legs)}, {Segment::torso, topo.segment(Segment::torso)}}};
   case Candidate::left_right_r: return {{{Segment::left, set_difference(l, chain)}, {Segment::right, r}}};
   case Candidate::left_right_l: return {{{Segment::left, l}, {Segment::right, set_difference(r, chain)}}};
   }
   throw std::invalid_argument("candidate_routing: unknown candidate");
}

Assembled assemble(const SkeletonTopology& topo, const Routing& routing, const SegmentLifts& lifts)
{
   if(routing.parts.empty()) throw std::invalid_argument("assemble: empty routing");
   Assembled out;
   out.depth_offsets = Eigen::VectorXd::Zero(topo.joint_count());
   for(const auto& [seg, joints] : routing.parts) {
      const auto& lift = lifts[size_t(seg)];
      if(!lift)
         throw std::invalid_argument("assemble: missing prediction for segment '"
                                     + std::string(to_string(seg)) + "'");
      const auto& members = topo.segment(seg);
      if(lift->depth_offsets.size() != Eigen::Index(members.size()))
         throw std::invalid_argument("assemble: prediction size mismatch");
      for(int j : joints) {
         const int k = position_in(members, j);
         if(k < 0) throw std::invalid_argument("assemble: joint routed to a lifter that does not see it");
         out.depth_offsets(j) = lift->depth_offsets(k);
      }
      out.elevation += lift->elevation;
   }
   out.elevation /= double(routing.parts.size());
   return out;
}

AssembledPrediction assemble(const SkeletonTopology& topo, const Pose2D& pose, const SegmentLifts& lifts,
                             double c)
{
   AssembledPrediction out;
   for(auto cand : kCandidates) {
      const Assembled a                = assemble(topo, candidate_routing(topo, cand), lifts);
      out.candidates[size_t(cand)] = perspective_lift(pose, a.depth_offsets, c);
      out.elevations[size_t(cand)] = a.elevation;
   }
   return out;
}

std::vector<SegmentLifts> run_lifters(const LifterSet& lifters, const SkeletonTopology& topo,
                                      const std::vector<Pose2D>& poses)
{
   std::vector<SegmentLifts> out(poses.size());
   for(auto s : kSegments) {
      const auto& model = lifters[size_t(s)];
      const Matrix y    = model.forward(flow::flatten_poses(poses, topo.segment(s)));
      for(size_t b = 0; b < poses.size(); ++b)
         out[b][size_t(s)] = SegmentLift{y.col(Eigen::Index(b)).head(model.joints()),
                                         y(model.joints(), Eigen::Index(b))};
   }
   return out;
}

std::vector<Pose3D> lift_poses(const LifterSet& lifters, const SkeletonTopology& topo,
                               const std::vector<Pose2D>& poses, Candidate candidate, double c)
{
   const auto lifts   = run_lifters(lifters, topo, poses);
   const auto routing = candidate_routing(topo, candidate);
   std::vector<Pose3D> out;
   out.reserve(poses.size());
   for(size_t b = 0; b < poses.size(); ++b)
      out.push_back(perspective_lift(poses[b], assemble(topo, routing, lifts[b]).depth_offsets, c));
   return out;
}

// ------------------------------------------------------------ cycle geometry
//
Pose2D project_clamped(const Pose3D& pose)
{
   Pose2D out(pose.rows(), 2);
   for(Eigen::Index j = 0; j < pose.rows(); ++j) {
      const double z = std::max(1.0, pose(j, 2));
      out(j, 0)      = pose(j, 0) / z;
      out(j, 1)      = pose(j, 1) / z;
   }
   return out;
}

CycleView forward_view(const Pose2D& pose, const Eigen::VectorXd& depth_offsets, double elevation,
                       double azimuth, double c)
{
   CycleView v;
   v.lifted   = perspective_lift(pose, depth_offsets, c);
   v.rotation = rotation_matrix({azimuth, elevation});
   const Eigen::RowVector3d pivot(0.0, 0.0, c);
   v.rotated    = ((v.lifted.rowwise() - pivot) * v.rotation.transpose()).rowwise() + pivot;
   v.virtual_2d = project_clamped(v.rotated);
   return v;
}

CycleReturn return_view(const CycleView& view, const Eigen::VectorXd& relift_offsets, double c)
{
   CycleReturn r;
   r.relifted = perspective_lift(view.virtual_2d, relift_offsets, c);
   const Eigen::RowVector3d pivot(0.0, 0.0, c);
   r.back_rotated = ((r.relifted.rowwise() - pivot) * view.rotation).rowwise() + pivot;
   r.reprojected  = project_clamped(r.back_rotated);
   return r;
}

std::vector<double> l2d_terms(const Pose2D& target, const Pose2D& reprojected, const Routing& routing,
                              std::vector<Pose2D>* grads)
{
   std::vector<double> out;
   if(grads) grads->clear();
   for(const auto& [seg, joints] : routing.parts) {
      double sum       = 0.0;
      const double cnt = 2.0 * double(joints.size());
      Pose2D g;
      if(grads) g = Pose2D::Zero(target.rows(), 2);
      for(int j : joints)
         for(int k = 0; k < 2; ++k) {
            const double diff = reprojected(j, k) - target(j, k);
            sum += std::abs(diff);
            if(grads) g(j, k) = sign(diff) / cnt;
         }
      out.push_back(joints.empty() ? 0.0 : sum / cnt);
      if(grads) grads->push_back(std::move(g));
   }
   return out;
}

double l3d_loss(const Pose3D& lifted, const Pose3D& back_rotated, int root)
{
   double sum = 0.0;
   for(Eigen::Index j = 0; j < lifted.rows(); ++j)
      if(j != root) sum += (lifted.row(j) - back_rotated.row(j)).cwiseAbs().sum();
   return sum / (3.0 * double(lifted.rows() - 1));
}

double bone_loss(const Pose3D& pose, const Eigen::VectorXd& mean_lengths, const SkeletonTopology& topo,
                 Pose3D* grad)
{
   const int nb = topo.bone_count();
   if(mean_lengths.size() != nb) throw std::invalid_argument("bone_loss: expected one mean per bone");
   const Eigen::VectorXd len = absolute_bone_lengths(pose, topo);
   const double total        = len.sum();
   if(!(total > 0.0)) throw std::invalid_argument("bone_loss: zero-length skeleton");

   const Eigen::VectorXd diff = len / total - mean_lengths;
   const double loss          = diff.squaredNorm() / double(nb);
   if(grad) {
      // dL/dr = 2 diff / K; r_b = l_b / S.
      const Eigen::VectorXd dr = 2.0 * diff / double(nb);
      const double cross       = dr.dot(len) / (total * total);
      *grad                    = Pose3D::Zero(pose.rows(), 3);
      for(int b = 0; b < nb; ++b) {
         if(!(len(b) > 0.0)) continue;
         const auto [p, c]              = topo.bones[size_t(b)];
         const double dl                = dr(b) / total - cross;
         const Eigen::RowVector3d unit  = (pose.row(c) - pose.row(p)) / len(b);
         grad->row(c) += dl * unit;
         grad->row(p) -= dl * unit;
      }
   }
   return loss;
}

double deformation_loss(const std::vector<Pose3D>& real, const std::vector<Pose3D>& virt)
{
   if(real.size() != virt.size()) throw std::invalid_argument("deformation_loss: batch size mismatch");
   const size_t pairs = real.size() / 2;
   if(pairs == 0) return 0.0;
   double sum = 0.0;
   for(size_t p = 0; p < pairs; ++p) {
      const size_t a = 2 * p, b = 2 * p + 1;
      sum += ((real[a] - real[b]) - (virt[a] - virt[b])).squaredNorm();
   }
   return sum / double(pairs);
}

// ------------------------------------------------------------ batched objective
//
namespace {

struct Work
{
   Assembled first;
   CycleView view;
   Assembled second;
   CycleReturn ret;
   Pose3D d_lifted;
   Pose3D d_back;
   Pose2D d_virtual;
};

} // namespace

LossBreakdown cycle_losses(const SkeletonTopology& topo, LifterSet& lifters, const FlowRefs& flows,
                           const Eigen::VectorXd& bone_means, const std::vector<Pose2D>& poses,
                           const Eigen::MatrixXd& azimuths, const CycleConfig& cfg, bool backprop)
{
   const int nb      = int(poses.size());
   const int n       = topo.joint_count();
   const double c    = cfg.c;
   const double inv_b = nb > 0 ? 1.0 / double(nb) : 0.0;
   LossBreakdown lb;
   lb.bone_weight = cfg.bone_weight;
   if(nb == 0) return lb;
   if(azimuths.rows() != 3 || azimuths.cols() != nb)
      throw std::invalid_argument("cycle_losses: azimuths must be 3 x batch");
   for(const auto& p : poses)
      if(p.rows() != n) throw std::invalid_argument("cycle_losses: pose does not match topology");

   std::array<Routing, 3> routing;
   for(auto k : kCandidates) routing[size_t(k)] = candidate_routing(topo, k);

   auto lifts_for = [&](const std::array<Matrix, 4>& out, Eigen::Index col) {
      SegmentLifts l;
      for(auto s : kSegments) {
         const int js = lifters[size_t(s)].joints();
         l[size_t(s)] = SegmentLift{out[size_t(s)].col(col).head(js), out[size_t(s)](js, col)};
      }
      return l;
   };

   // Pass 1: lift the real view.
   std::array<Matrix, 4> out1;
   std::array<LifterModel::Tape, 4> tape1;
   for(auto s : kSegments)
      out1[size_t(s)] = lifters[size_t(s)].forward(flow::flatten_poses(poses, topo.segment(s)),
                                                   backprop ? &tape1[size_t(s)] : nullptr);

   std::vector<Work> work(size_t(3 * nb));
   std::vector<Pose2D> virt(size_t(3 * nb));
   for(auto k : kCandidates)
      for(int b = 0; b < nb; ++b) {
         const size_t col = size_t(int(k) * nb + b);
         auto& w          = work[col];
         w.first          = assemble(topo, routing[size_t(k)], lifts_for(out1, b));
         w.view = forward_view(poses[size_t(b)], w.first.depth_offsets, w.first.elevation,
                               azimuths(int(k), b), c);
         virt[col] = w.view.virtual_2d;
      }

   // Likelihood of each virtual segment under its flow.
   int flow_count = 0;
   for(auto* f : flows) flow_count += f ? 1 : 0;
   std::array<Matrix, 4> flow_grad;
   for(auto s : kSegments) {
      auto* f = flows[size_t(s)];
      if(!f) continue;
      const auto& joints = topo.segment(s);
      const Matrix x     = flow::flatten_poses(virt, joints);
      flow::FlowModel::Tape tape;
      Eigen::RowVectorXd ld;
      const Matrix z              = f->encode(x, &ld, backprop ? &tape : nullptr);
      const Eigen::RowVectorXd lp = flow::standard_normal_log_density(z) + ld;
      Eigen::RowVectorXd dlp      = Eigen::RowVectorXd::Zero(lp.size());
      for(auto k : kCandidates)
         for(int b = 0; b < nb; ++b) {
            const Eigen::Index col = int(k) * nb + b;
            if(!std::isfinite(lp(col))) {
               ++lb.skipped;
               continue;
            }
            const double wgt = cfg.candidate_weights[size_t(k)] * inv_b / double(flow_count);
            lb.l_nf -= wgt * lp(col);
            dlp(col) = -wgt;
         }
      if(backprop) {
         Matrix g = f->backward_log_prob(tape, dlp, false);
         for(Eigen::Index col = 0; col < g.cols(); ++col)
            if(dlp(col) == 0.0) g.col(col).setZero();
         flow_grad[size_t(s)] = std::move(g);
      }
   }

   // Pass 2: re-lift the virtual view.
   std::array<Matrix, 4> out2;
   std::array<LifterModel::Tape, 4> tape2;
   for(auto s : kSegments)
      out2[size_t(s)] = lifters[size_t(s)].forward(flow::flatten_poses(virt, topo.segment(s)),
                                                   backprop ? &tape2[size_t(s)] : nullptr);

   for(auto k : kCandidates) {
      const double wk = cfg.candidate_weights[size_t(k)];
      for(int b = 0; b < nb; ++b) {
         const size_t col = size_t(int(k) * nb + b);
         auto& w          = work[col];
         w.second         = assemble(topo, routing[size_t(k)], lifts_for(out2, Eigen::Index(col)));
         w.ret            = return_view(w.view, w.second.depth_offsets, c);

         std::vector<Pose2D> g2d;
         const auto terms = l2d_terms(poses[size_t(b)], w.ret.reprojected, routing[size_t(k)],
                                      backprop ? &g2d : nullptr);
         for(double t : terms) lb.l_2d += wk * inv_b * t;
         lb.l_3d += wk * inv_b * l3d_loss(w.view.lifted, w.ret.back_rotated, topo.root);
         Pose3D gb;
         lb.l_b += wk * inv_b * bone_loss(w.view.lifted, bone_means, topo, backprop ? &gb : nullptr);

         if(backprop) {
            Pose2D d_repro = Pose2D::Zero(n, 2);
            for(const auto& g : g2d) d_repro += g;
            w.d_back   = project_clamped_backward(w.ret.back_rotated, wk * inv_b * d_repro);
            w.d_lifted = (wk * inv_b * cfg.bone_weight) * gb;
            const double s3 = wk * inv_b / (3.0 * double(n - 1));
            for(int j = 0; j < n; ++j) {
               if(j == topo.root) continue;
               for(int a = 0; a < 3; ++a) {
                  const double sg = s3 * sign(w.view.lifted(j, a) - w.ret.back_rotated(j, a));
                  w.d_lifted(j, a) += sg;
                  w.d_back(j, a) -= sg;
               }
            }
         }
      }

      // Deformation between adjacent batch entries.
      const int pairs = nb / 2;
      for(int p = 0; p < pairs; ++p) {
         auto& wa            = work[size_t(int(k) * nb + 2 * p)];
         auto& wb            = work[size_t(int(k) * nb + 2 * p + 1)];
         const Pose3D delta  = (wa.view.lifted - wb.view.lifted) - (wa.ret.back_rotated - wb.ret.back_rotated);
         lb.l_def += wk * delta.squaredNorm() / double(pairs);
         if(backprop) {
            const Pose3D g = (2.0 * wk / double(pairs)) * delta;
            wa.d_lifted += g;
            wb.d_lifted -= g;
            wa.d_back -= g;
            wb.d_back += g;
         }
      }
   }

   if(!backprop) return lb;

   // Backward through the return view into pass-2 outputs.
   std::array<Matrix, 4> dout2, dout1;
   for(auto s : kSegments) {
      dout2[size_t(s)] = Matrix::Zero(out2[size_t(s)].rows(), out2[size_t(s)].cols());
      dout1[size_t(s)] = Matrix::Zero(out1[size_t(s)].rows(), out1[size_t(s)].cols());
   }
   const Eigen::RowVector3d pivot(0.0, 0.0, c);
   std::vector<Eigen::Matrix3d> d_rot(work.size(), Eigen::Matrix3d::Zero());

   for(auto k : kCandidates)
      for(int b = 0; b < nb; ++b) {
         const size_t col = size_t(int(k) * nb + b);
         auto& w          = work[col];
         const Pose3D d_relifted = w.d_back * w.view.rotation.transpose();
         d_rot[col] += (w.ret.relifted.rowwise() - pivot).transpose() * w.d_back;
         Eigen::VectorXd d_off2;
         lift_backward(w.view.virtual_2d, w.second.depth_offsets, c, d_relifted, &w.d_virtual, d_off2);
         for(const auto& [seg, joints] : routing[size_t(k)].parts) {
            const auto& members = topo.segment(seg);
            for(int j : joints) dout2[size_t(seg)](position_in(members, j), Eigen::Index(col)) += d_off2(j);
         }
      }

   for(auto s : kSegments) {
      const auto& joints = topo.segment(s);
      Matrix dx          = lifters[size_t(s)].backward(tape2[size_t(s)], dout2[size_t(s)]);
      if(flows[size_t(s)]) dx += flow_grad[size_t(s)];
      for(size_t col = 0; col < work.size(); ++col)
         for(size_t q = 0; q < joints.size(); ++q) {
            work[col].d_virtual(joints[q], 0) += dx(Eigen::Index(2 * q), Eigen::Index(col));
            work[col].d_virtual(joints[q], 1) += dx(Eigen::Index(2 * q + 1), Eigen::Index(col));
         }
   }

   // Backward through the forward view into pass-1 outputs.
   for(auto k : kCandidates)
      for(int b = 0; b < nb; ++b) {
         const size_t col = size_t(int(k) * nb + b);
         auto& w          = work[col];
         const Pose3D d_rotated = project_clamped_backward(w.view.rotated, w.d_virtual);
         w.d_lifted += d_rotated * w.view.rotation;
         d_rot[col] += d_rotated.transpose() * (w.view.lifted.rowwise() - pivot);

         const double elev = w.first.elevation;
         const double az   = azimuths(int(k), b);
         const double d_elev = d_rot[col].cwiseProduct(rotation_x_derivative(elev) * rotation_y(az)).sum();

         Eigen::VectorXd d_off1;
         lift_backward(poses[size_t(b)], w.first.depth_offsets, c, w.d_lifted, nullptr, d_off1);
         const auto& parts = routing[size_t(k)].parts;
         for(const auto& [seg, joints] : parts) {
            const auto& members = topo.segment(seg);
            auto& d             = dout1[size_t(seg)];
            for(int j : joints) d(position_in(members, j), b) += d_off1(j);
            d(Eigen::Index(members.size()), b) += d_elev / double(parts.size());
         }
      }

   for(auto s : kSegments) lifters[size_t(s)].backward(tape1[size_t(s)], dout1[size_t(s)]);
   return lb;
}

LossBreakdown consistency_cycle(const SkeletonTopology& topo, const Pose2D& pose, LifterSet& lifters,
                                const FlowRefs& flows, const Eigen::VectorXd& bone_means,
                                std::mt19937_64& rng, const CycleConfig& cfg)
{
   std::uniform_real_distribution<double> az(-std::numbers::pi, std::numbers::pi);
   Eigen::MatrixXd azimuths(3, 1);
   for(int k = 0; k < 3; ++k) azimuths(k, 0) = az(rng);
   return cycle_losses(topo, lifters, flows, bone_means, {pose}, azimuths, cfg, false);
}

// ------------------------------------------------------------ training
//
LifterTrainResult train_lifters(const SkeletonTopology& topo, LifterSet& lifters, const FlowRefs& flows,
                                const flow::FlowModel* full_flow, const Eigen::VectorXd& bone_means,
                                const std::vector<Pose2D>& poses, const LifterTrainConfig& cfg,
                                const std::function<void(const LifterEpoch&)>& on_epoch)
{
   if(cfg.batch < 1 || cfg.epochs < 0) throw std::invalid_argument("train_lifters: invalid schedule");
   if(cfg.sampling && !full_flow) throw std::invalid_argument("train_lifters: sampling needs the full-pose flow");
   LifterTrainResult result;
   if(cfg.epochs == 0 || poses.empty()) return result;

   const auto full_joints = topo.non_root_joints();
   std::mt19937_64 rng(cfg.seed);
   std::uniform_real_distribution<double> az(-std::numbers::pi, std::numbers::pi);
   std::array<nn::Adam, 4> adam{nn::Adam(cfg.adam), nn::Adam(cfg.adam), nn::Adam(cfg.adam),
                                nn::Adam(cfg.adam)};
   std::vector<int> order(poses.size());
   std::iota(order.begin(), order.end(), 0);

   for(int epoch = 1; epoch <= cfg.epochs; ++epoch) {
      std::shuffle(order.begin(), order.end(), rng);
      LifterEpoch rec;
      rec.epoch         = epoch;
      rec.learning_rate = adam[0].current_learning_rate();
      rec.mean.bone_weight = cfg.cycle.bone_weight;
      int batches = 0;

      for(size_t begin = 0; begin < poses.size(); begin += size_t(cfg.batch)) {
         const size_t end = std::min(poses.size(), begin + size_t(cfg.batch));
         std::vector<Pose2D> batch;
         for(size_t i = begin; i < end; ++i) batch.push_back(poses[size_t(order[i])]);

         if(cfg.sampling) {
            const Matrix sampled = flow::sample_perturbed(*full_flow, flow::flatten_poses(batch, full_joints),
                                                          cfg.sigma, rng);
            const size_t real = batch.size();
            for(Eigen::Index col = 0; col < sampled.cols(); ++col) {
               if(!sampled.col(col).allFinite()) continue;
               try {
                  batch.push_back(normalize_pose(
                                      flow::unflatten_pose(sampled.col(col), full_joints, topo.joint_count()),
                                      topo, cfg.cycle.c)
                                      .pose);
               } catch(const std::invalid_argument&) {
               }
            }
            (void)real;
         }

         Eigen::MatrixXd azimuths(3, Eigen::Index(batch.size()));
         for(Eigen::Index b = 0; b < azimuths.cols(); ++b)
            for(int k = 0; k < 3; ++k) azimuths(k, b) = az(rng);

         for(auto& l : lifters) l.zero_grad();
         const LossBreakdown lb = cycle_losses(topo, lifters, flows, bone_means, batch, azimuths, cfg.cycle, true);
         if(!std::isfinite(lb.total()))
            throw DivergenceError("lifters: loss diverged at epoch " + std::to_string(epoch));
         for(auto s : kSegments) adam[size_t(s)].step(lifters[size_t(s)]);

         rec.mean.l_nf += lb.l_nf;
         rec.mean.l_2d += lb.l_2d;
         rec.mean.l_3d += lb.l_3d;
         rec.mean.l_def += lb.l_def;
         rec.mean.l_b += lb.l_b;
         rec.mean.skipped += lb.skipped;
         ++batches;
      }
      for(auto& a : adam) a.end_epoch();
      const double inv = 1.0 / double(batches);
      rec.mean.l_nf *= inv;
      rec.mean.l_2d *= inv;
      rec.mean.l_3d *= inv;
      rec.mean.l_def *= inv;
      rec.mean.l_b *= inv;
      result.trace.push_back(rec);
      if(on_epoch) on_epoch(rec);
   }
   return result;
}

} // namespace links::lifter
