// Acceptance run: one PASS/FAIL line per criterion. Pass criterion numbers as
// arguments to run a subset.
#include "gradcheck.hpp"

#include "links/data.hpp"
#include "links/flow.hpp"
#include "links/lifter.hpp"
#include "links/occlusion.hpp"
#include "links/pipeline.hpp"

#include <Eigen/Geometry>
#include <Eigen/LU>

#include <chrono>
#include <cstdio>
#include <iostream>
#include <map>
#include <numbers>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>

using namespace links;
using nn::Matrix;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0)
{
   return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Verdict
{
   bool pass = false;
   std::string detail;
};

std::string fmt(const char* f, auto... args)
{
   char buf[512];
   std::snprintf(buf, sizeof buf, f, args...);
   return buf;
}

Matrix gaussian(int r, int c, std::mt19937_64& rng, double sd = 1.0)
{
   std::normal_distribution<double> g(0.0, sd);
   Matrix m(r, c);
   for(Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = g(rng);
   return m;
}

flow::FlowModel random_flow(int dims, int width, int blocks, std::uint64_t seed, std::mt19937_64& rng)
{
   flow::FlowConfig c;
   c.dims   = dims;
   c.width  = width;
   c.blocks = blocks;
   flow::FlowModel f(c, "random");
   f.init(seed, 0.1);
   f.set_standardization(gaussian(dims, 1, rng), (gaussian(dims, 1, rng).array().abs() + 0.5).matrix());
   return f;
}

const SkeletonTopology& human()
{
   static const auto t = SkeletonTopology::human17();
   return t;
}

// ------------------------------------------------------------ 1
Verdict flow_invertibility()
{
   const auto t0 = Clock::now();
   std::mt19937_64 rng(101);
   double worst = 0.0;
   for(int k = 0; k < 10; ++k) {
      auto f         = random_flow(32, 64, 8, 200 + k, rng);
      const Matrix x = gaussian(32, 100, rng, 2.0);
      worst          = std::max(worst, (f.decode(f.encode(x)) - x).cwiseAbs().maxCoeff());
   }
   const double secs = seconds_since(t0);
   return {worst < 1e-9 && secs < 10.0, fmt("max |decode(encode(x)) - x| = %.3g over 1000 inputs, %.2f s", worst, secs)};
}

// ------------------------------------------------------------ 2
Verdict jacobian_log_det()
{
   std::mt19937_64 rng(102);
   double worst = 0.0;
   for(int k = 0; k < 100; ++k) {
      const int d    = 1 + k % 8;
      auto f         = random_flow(d, 16, 4 + 2 * (k % 3), 300 + k, rng);
      const Matrix x = gaussian(d, 1, rng);
      Eigen::RowVectorXd ld;
      f.encode(x, &ld);
      Eigen::MatrixXd j(d, d);
      const double h = 1e-6;
      for(int i = 0; i < d; ++i) {
         Matrix xp = x, xm = x;
         xp(i, 0) += h;
         xm(i, 0) -= h;
         j.col(i) = (f.encode(xp) - f.encode(xm)) / (2.0 * h);
      }
      const double numeric = std::log(std::abs(j.determinant()));
      worst                = std::max(worst, test::relative_error(ld(0), numeric, 1e-3));
   }
   return {worst < 1e-6, fmt("worst relative error %.3g over 100 flows of dimension 1..8", worst)};
}

// ------------------------------------------------------------ 3
Verdict gradient_audit()
{
   std::mt19937_64 rng(103);
   std::vector<std::pair<std::string, test::GradReport>> report;

   {
      nn::Mlp m({5, 7, 6, 3});
      m.init(rng, 0.7);
      test::jitter(m, rng);
      const Matrix x = gaussian(5, 4, rng), w = gaussian(3, 4, rng);
      nn::Mlp::Tape tape;
      m.forward(x, &tape);
      m.zero_grad();
      m.backward(tape, w);
      report.emplace_back("mlp", test::check_params(m, [&] { return m.forward(x).cwiseProduct(w).sum(); }));
   }
   {
      nn::ResidualNet n(5, 6, 2, 3);
      n.init(rng, 0.7);
      test::jitter(n, rng);
      const Matrix x = gaussian(5, 4, rng), w = gaussian(3, 4, rng);
      nn::ResidualNet::Tape tape;
      n.forward(x, &tape);
      n.zero_grad();
      n.backward(tape, w);
      report.emplace_back("residual net",
                          test::check_params(n, [&] { return n.forward(x).cwiseProduct(w).sum(); }));
   }
   {
      auto f = random_flow(6, 8, 4, 7, rng);
      test::jitter(f, rng);
      const Matrix x = gaussian(6, 5, rng);
      const Eigen::RowVectorXd w = gaussian(1, 5, rng);
      flow::FlowModel::Tape tape;
      f.log_prob(x, &tape);
      f.zero_grad();
      f.backward_log_prob(tape, w);
      report.emplace_back("coupling blocks", test::check_params(f, [&] { return f.log_prob(x).dot(w); }));
   }
   for(auto s : kSegments) {
      lifter::LifterConfig lc;
      lc.width     = 8;
      lc.blocks    = 2;
      lc.head_gain = 0.5;
      auto model   = lifter::make_lifters(human(), lc, 4)[size_t(s)];
      test::jitter(model, rng);
      const auto poses = data::poses_2d(data::generate_synthetic(5, 6, data::default_generator_config()));
      const Matrix x   = flow::flatten_poses(poses, human().segment(s));
      const Matrix w   = gaussian(model.joints() + 1, 5, rng);
      lifter::LifterModel::Tape tape;
      model.forward(x, &tape);
      model.zero_grad();
      model.backward(tape, w);
      report.emplace_back("lifter " + std::string(to_string(s)),
                          test::check_params(model, [&] { return model.forward(x).cwiseProduct(w).sum(); }));
   }
   // The whole rotation cycle through all four lifters. Its loss is O(10-100),
   // so the step is 1e-5 to keep central-difference round-off below the bar.
   {
      const auto topo = SkeletonTopology::toy5();
      lifter::LifterConfig lc;
      lc.width     = 6;
      lc.blocks    = 1;
      lc.head_gain = 0.5;
      auto lifters = lifter::make_lifters(topo, lc, 3);
      for(auto& l : lifters) test::jitter(l, rng);
      std::vector<flow::FlowModel> flows;
      lifter::FlowRefs refs{};
      for(auto s : kSegments) {
         flow::FlowConfig fc;
         fc.dims   = 2 * int(topo.segment(s).size());
         fc.width  = 5;
         fc.blocks = 2;
         flows.emplace_back(fc, std::string(to_string(s)));
         flows.back().init(11 + int(s), 0.3);
      }
      for(auto s : kSegments) refs[size_t(s)] = &flows[size_t(s)];
      std::vector<Pose2D> poses;
      for(int i = 0; i < 4; ++i) {
         Pose2D p = gaussian(5, 2, rng, 0.05);
         p.row(0).setZero();
         poses.push_back(normalize_pose(p, topo).pose);
      }
      Eigen::MatrixXd az(3, 4);
      std::uniform_real_distribution<double> u(-3.0, 3.0);
      for(Eigen::Index i = 0; i < az.size(); ++i) az.data()[i] = u(rng);
      const Eigen::VectorXd means = Eigen::VectorXd::Constant(topo.bone_count(), 1.0 / topo.bone_count());
      lifter::CycleConfig cc;
      for(auto& l : lifters) l.zero_grad();
      lifter::cycle_losses(topo, lifters, refs, means, poses, az, cc, true);
      auto loss = [&] { return lifter::cycle_losses(topo, lifters, refs, means, poses, az, cc, false).total(); };
      for(auto s : kSegments)
         report.emplace_back("cycle " + std::string(to_string(s)),
                             test::check_params(lifters[size_t(s)], loss, 1e-5));
   }
   for(auto space : {occlusion::Space::d3, occlusion::Space::d2}) {
      occlusion::OcclusionNetConfig cfg;
      cfg.width     = 6;
      cfg.head_gain = 0.5;
      occlusion::OcclusionNet net(occlusion::OcclusionScenario::named("left-leg", human()), space, human(), cfg);
      net.init(5);
      test::jitter(net, rng);
      const Matrix x = gaussian(net.net().in(), 4, rng), y = gaussian(net.net().out(), 4, rng);
      nn::ResidualNet::Tape tape;
      Matrix g;
      occlusion::distillation_loss(net.forward(x, &tape), y, &g);
      net.zero_grad();
      net.backward(tape, g);
      report.emplace_back("occlusion " + std::string(to_string(space)),
                          test::check_params(net, [&] { return occlusion::distillation_loss(net.forward(x), y); }));
   }

   double worst = 0.0;
   long checked = 0, kinks = 0;
   std::string where, all;
   for(const auto& [name, r] : report) {
      all += fmt(" %s=%.1e", name.c_str(), r.worst);
      checked += r.checked;
      kinks += r.kinks;
      if(r.worst > worst) {
         worst = r.worst;
         where = name;
      }
   }
   // A handful of entries may straddle a ReLU kink; they are not differentiable there.
   const bool ok = worst < 1e-4 && kinks * 100 <= checked;
   return {ok, fmt("worst relative error %.3g (%s) over %ld entries, %ld at a kink;", worst, where.c_str(), checked,
                   kinks)
                   + all};
}

// ------------------------------------------------------------ 4
Verdict oracle_consistency()
{
   const auto& topo = human();
   const auto recs  = data::generate_synthetic(1000, 104, data::default_generator_config());
   std::mt19937_64 rng(104);
   std::uniform_real_distribution<double> az(-std::numbers::pi, std::numbers::pi), el(0.0, 0.3);
   double w2 = 0.0, w3 = 0.0, wb = 0.0, wd = 0.0;
   for(size_t i = 0; i < recs.size(); ++i) {
      const auto& r        = recs[i];
      const auto d         = data::true_depth_offsets(*r.joints_3d, topo);
      const auto view      = lifter::forward_view(r.joints_2d, d, el(rng), az(rng));
      const Eigen::VectorXd relift = view.rotated.col(2).array() - kDefaultDepth;
      const auto back      = lifter::return_view(view, relift);
      for(auto c : lifter::kCandidates)
         for(double t : lifter::l2d_terms(r.joints_2d, back.reprojected, lifter::candidate_routing(topo, c)))
            w2 = std::max(w2, t);
      w3 = std::max(w3, lifter::l3d_loss(view.lifted, back.back_rotated, topo.root));
      wb = std::max(wb, lifter::bone_loss(view.lifted, bone_lengths(view.lifted, topo), topo));
      const Pose3D& other = recs[(i + 1) % recs.size()].joints_3d.value();
      wd = std::max(wd, lifter::deformation_loss({*r.joints_3d, *r.joints_3d}, {other, other}));
   }
   return {w2 < 1e-9 && w3 < 1e-9 && wb < 1e-12 && wd == 0.0,
           fmt("max L2D %.2g, L3D %.2g, bone %.2g, deformation %.2g over 1000 synthetic poses", w2, w3, wb, wd)};
}

// ------------------------------------------------------------ 5
Verdict metric_correctness()
{
   std::mt19937_64 rng(105);
   std::uniform_real_distribution<double> u(0.3, 3.0);
   double worst_pa = 0.0;
   bool nm_ok = true, pck_ok = true;
   for(int k = 0; k < 1000; ++k) {
      const Pose3D gt = gaussian(17, 3, rng, 300.0);
      const Eigen::Quaterniond q(Eigen::Vector4d(gaussian(4, 1, rng)).normalized());
      const Eigen::RowVector3d shift = gaussian(1, 3, rng, 500.0);
      const Pose3D moved = ((u(rng) * gt * q.toRotationMatrix().transpose()).rowwise() + shift);
      worst_pa = std::max(worst_pa, compute_metric(moved, gt, Metric::pa_mpjpe));

      const Pose3D pred = gaussian(17, 3, rng, 300.0);
      nm_ok = nm_ok && compute_metric(pred, gt, Metric::n_mpjpe) <= compute_metric(pred, gt, Metric::mpjpe) + 1e-9;

      const Pose3D noise = gaussian(17, 3, rng, 60.0);
      double last_pck = 101.0, last_auc = 101.0;
      for(double s : {0.0, 0.5, 1.0, 2.0, 4.0}) {
         const Pose3D p  = gt + s * noise;
         const double pk = compute_metric(p, gt, Metric::pck150), au = compute_metric(p, gt, Metric::auc);
         pck_ok          = pck_ok && pk <= last_pck && au <= last_auc;
         last_pck        = pk;
         last_auc        = au;
      }
      double last = -1.0;
      for(double th : {0.0, 50.0, 100.0, 150.0, 300.0}) {
         const double pk = pck(pred, gt, th);
         pck_ok          = pck_ok && pk >= last;
         last            = pk;
      }
   }
   return {worst_pa < 1e-9 && nm_ok && pck_ok,
           fmt("PA-MPJPE under similarity %.2g; N-MPJPE <= MPJPE %s; PCK/AUC monotone %s", worst_pa,
               nm_ok ? "yes" : "no", pck_ok ? "yes" : "no")};
}

// ------------------------------------------------------------ 6
Eigen::VectorXd relative_2d_bones(const Pose2D& p, const SkeletonTopology& topo)
{
   Eigen::VectorXd len(topo.bone_count());
   for(int b = 0; b < topo.bone_count(); ++b)
      len(b) = (p.row(topo.bones[size_t(b)].second) - p.row(topo.bones[size_t(b)].first)).norm();
   return len / len.sum();
}

double bone_deviation(const Matrix& flat, const Eigen::VectorXd& means, const SkeletonTopology& topo)
{
   const auto joints = topo.non_root_joints();
   double sum        = 0.0;
   int n             = 0;
   for(Eigen::Index c = 0; c < flat.cols(); ++c) {
      if(!flat.col(c).allFinite()) continue;
      sum += (relative_2d_bones(flow::unflatten_pose(flat.col(c), joints, topo.joint_count()), topo) - means)
                 .cwiseAbs()
                 .mean();
      ++n;
   }
   return sum / std::max(1, n);
}

Verdict sampling_behaviour()
{
   const auto t0    = Clock::now();
   const auto& topo = human();
   const auto poses = data::poses_2d(data::generate_synthetic(5000, 106, data::default_generator_config()));
   pipeline::FlowJob job;
   job.tag                 = "full";
   job.width               = 128;
   job.train.epochs        = 10;
   job.train.adam.learning_rate = 1e-3;
   job.train.seed          = 106;
   const auto f            = pipeline::train_flow_job(topo, poses, job, nullptr);
   const Matrix x          = flow::flatten_poses(poses, topo.non_root_joints());
   std::mt19937_64 rng(106);

   const double zero_dev = (flow::sample_perturbed(f, x, 0.0, rng) - x).cwiseAbs().maxCoeff();
   Matrix draws(32, 10000);
   for(int k = 0; k < 2; ++k) draws.middleCols(k * 5000, 5000) = x;
   std::vector<double> dev;
   bool monotone = true;
   for(double s : {0.05, 0.1, 0.2, 0.4}) {
      dev.push_back((flow::sample_perturbed(f, draws, s, rng) - draws).cwiseAbs().mean());
      if(dev.size() > 1) monotone = monotone && dev.back() > dev[dev.size() - 2];
   }

   Eigen::VectorXd means = Eigen::VectorXd::Zero(topo.bone_count());
   for(const auto& p : poses) means += relative_2d_bones(p, topo);
   means /= double(poses.size());
   const double sampled = bone_deviation(flow::sample_perturbed(f, x, 0.2, rng), means, topo);
   const double random  = bone_deviation(flow::sample_unconditioned(f, 5000, rng), means, topo);
   const double secs    = seconds_since(t0);
   return {zero_dev < 1e-9 && monotone && sampled < random && secs < 300.0,
           fmt("sigma=0 max dev %.2g; mean dev %.4f %.4f %.4f %.4f; bone dev sampled %.4f vs unconditioned %.4f; "
               "%.0f s",
               zero_dev, dev[0], dev[1], dev[2], dev[3], sampled, random, secs)};
}

// ------------------------------------------------------------ 7 and 8
struct DeskRun
{
   lifter::LifterSet lifters;
   std::vector<data::PoseRecord> train;
   std::vector<data::PoseRecord> held;
   double seconds = 0.0;
};

constexpr int kDeskWidth  = 128;
constexpr double kDeskLr  = 1e-3;

DeskRun& desk_run()
{
   static std::optional<DeskRun> run;
   if(run) return *run;
   run.emplace();
   const auto& topo = human();
   const auto t0    = Clock::now();
   const auto cfg   = data::default_generator_config();
   run->train       = data::generate_synthetic(5000, 7, cfg);
   run->held        = data::generate_synthetic(500, 8, cfg);
   const auto poses = data::poses_2d(run->train);

   pipeline::FlowJob job;
   job.width                    = kDeskWidth;
   job.train.epochs             = 10;
   job.train.batch              = 256;
   job.train.adam.learning_rate = kDeskLr;
   job.train.seed               = 7;
   job.tag                      = "full";
   pipeline::FlowSet flows;
   flows.full = pipeline::train_flow_job(topo, poses, job, nullptr);
   std::cout << fmt("  full flow trained, %.0f s", seconds_since(t0)) << std::endl;
   for(auto s : kSegments) {
      job.tag = std::string(to_string(s));
      flows.segments[size_t(s)] = pipeline::train_flow_job(topo, poses, job, &*flows.full);
   }
   std::cout << fmt("  segment flows trained, %.0f s", seconds_since(t0)) << std::endl;

   lifter::LifterConfig lc;
   lc.width    = kDeskWidth;
   run->lifters = lifter::make_lifters(topo, lc, 7);
   lifter::LifterTrainConfig tc;
   tc.epochs             = 20;
   tc.batch              = 256;
   tc.adam.learning_rate = kDeskLr;
   tc.seed               = 7;
   const auto bones      = data::compute_bone_stats(run->train, topo);
   lifter::train_lifters(topo, run->lifters, flows.refs(), &*flows.full, bones.means, poses, tc,
                         [&](const lifter::LifterEpoch& e) {
                            if(e.epoch % 5 == 0)
                               std::cout << fmt("  lifter epoch %d, loss %.3f, %.0f s", e.epoch, e.mean.total(),
                                                seconds_since(t0))
                                         << std::endl;
                         });
   run->seconds = seconds_since(t0);
   return *run;
}

Verdict desk_training()
{
   const auto& topo = human();
   auto& run        = desk_run();
   const auto poses = data::poses_2d(run.held);
   const auto pred  = lifter::lift_poses(run.lifters, topo, poses, lifter::Candidate::legs_torso);
   double model = 0.0, zero = 0.0;
   for(size_t i = 0; i < poses.size(); ++i) {
      model += evaluate_metric(pred[i], *run.held[i].joints_3d, topo.root, Metric::pa_mpjpe);
      zero += evaluate_metric(perspective_lift(poses[i], Eigen::VectorXd::Zero(17)), *run.held[i].joints_3d,
                              topo.root, Metric::pa_mpjpe);
   }
   model /= double(poses.size());
   zero /= double(poses.size());
   return {model < zero && run.seconds < 3600.0,
           fmt("held-out PA-MPJPE legs-torso %.2f mm vs zero-depth %.2f mm; 5 flows + 4 lifters in %.1f min", model,
               zero, run.seconds / 60.0)};
}

Verdict occlusion_ordering()
{
   const auto& topo = human();
   auto& run        = desk_run();
   const auto poses = data::poses_2d(run.train);
   occlusion::OcclusionNetConfig nc;
   nc.width = kDeskWidth;
   occlusion::OcclusionTrainConfig oc;
   oc.epochs             = 10;
   oc.adam.learning_rate = kDeskLr;
   oc.seed               = 9;

   std::vector<occlusion::OcclusionScenario> scenarios;
   std::vector<occlusion::OcclusionNet> nets;
   nets.reserve(16);
   std::map<std::string, const occlusion::OcclusionNet*> n3, n2;
   for(auto name : occlusion::kScenarioNames) {
      scenarios.push_back(occlusion::OcclusionScenario::named(name, topo));
      for(auto space : {occlusion::Space::d3, occlusion::Space::d2}) {
         nets.emplace_back(scenarios.back(), space, topo, nc);
         nets.back().init(oc.seed);
         occlusion::train_occlusion(nets.back(), run.lifters, topo, poses, oc);
         (space == occlusion::Space::d3 ? n3 : n2)[std::string(name)] = &nets.back();
      }
   }
   const auto rows = occlusion::evaluate_occlusion(scenarios, n3, n2, run.lifters, topo, run.held, kDefaultDepth);
   std::map<std::string, std::pair<double, double>> pa;
   for(const auto& r : rows) (r.space == "3d" ? pa[r.scenario].first : pa[r.scenario].second) = r.pa_mpjpe;
   int wins = 0;
   std::string detail;
   for(auto name : occlusion::kScenarioNames) {
      const auto [d3, d2] = pa[std::string(name)];
      wins += d3 <= d2;
      detail += fmt(" %s %.1f/%.1f", std::string(name).c_str(), d3, d2);
   }
   return {wins >= 6, fmt("O_3D <= O_2D on %d of 8 (PA-MPJPE 3d/2d mm):", wins) + detail};
}

// ------------------------------------------------------------ 9
Verdict determinism()
{
   const auto& topo = human();
   const auto recs  = data::generate_synthetic(400, 109, data::default_generator_config());
   const auto poses = data::poses_2d(recs);

   auto run = [&] {
      std::ostringstream out;
      pipeline::FlowJob job;
      job.width        = 16;
      job.train.epochs = 2;
      job.train.batch  = 64;
      job.train.seed   = 9;
      auto trace       = [&](const flow::FlowEpoch& e) { out << e.loss << ' ' << e.nll_real << '\n'; };
      job.tag          = "full";
      pipeline::FlowSet flows;
      flows.full = pipeline::train_flow_job(topo, poses, job, nullptr, trace);
      out << flows.full->to_json().dump();
      for(auto s : kSegments) {
         job.tag                   = std::string(to_string(s));
         flows.segments[size_t(s)] = pipeline::train_flow_job(topo, poses, job, &*flows.full, trace);
         out << flows.segments[size_t(s)]->to_json().dump();
      }
      lifter::LifterConfig lc;
      lc.width     = 16;
      auto lifters = lifter::make_lifters(topo, lc, 9);
      lifter::LifterTrainConfig tc;
      tc.epochs = 2;
      tc.batch  = 64;
      tc.seed   = 9;
      lifter::train_lifters(topo, lifters, flows.refs(), &*flows.full, data::compute_bone_stats(recs, topo).means,
                            poses, tc, [&](const lifter::LifterEpoch& e) { out << e.mean.total() << '\n'; });
      for(const auto& l : lifters) out << l.to_json().dump();
      for(auto space : {occlusion::Space::d3, occlusion::Space::d2}) {
         occlusion::OcclusionNetConfig nc;
         nc.width = 16;
         occlusion::OcclusionNet net(occlusion::OcclusionScenario::named("right-arm", topo), space, topo, nc);
         net.init(9);
         occlusion::OcclusionTrainConfig oc;
         oc.epochs = 2;
         oc.batch  = 64;
         oc.seed   = 9;
         occlusion::train_occlusion(net, lifters, topo, poses, oc,
                                    [&](const occlusion::OcclusionEpoch& e) { out << e.loss << '\n'; });
         out << net.to_json(topo).dump();
      }
      return out.str();
   };
   const std::string a = run(), b = run();
   return {a == b, fmt("two seeded runs of every training stage: %s (%zu bytes of checkpoints and traces)",
                       a == b ? "bit-identical" : "DIFFERENT", a.size())};
}

} // namespace

int main(int argc, char** argv)
{
   const std::vector<std::pair<int, Verdict (*)()>> criteria = {
       {1, flow_invertibility}, {2, jacobian_log_det},  {3, gradient_audit},
       {4, oracle_consistency}, {5, metric_correctness}, {6, sampling_behaviour},
       {7, desk_training},      {8, occlusion_ordering}, {9, determinism}};
   std::set<int> wanted;
   for(int i = 1; i < argc; ++i) wanted.insert(std::atoi(argv[i]));

   int failed = 0;
   for(const auto& [id, fn] : criteria) {
      if(!wanted.empty() && !wanted.count(id)) continue;
      const auto t0 = Clock::now();
      Verdict v;
      try {
         v = fn();
      } catch(const std::exception& e) {
         v = {false, std::string("exception: ") + e.what()};
      }
      failed += !v.pass;
      std::cout << "criterion " << id << ": " << (v.pass ? "PASS" : "FAIL") << "  " << v.detail
                << fmt("  [%.1f s]", seconds_since(t0)) << std::endl;
   }
   return failed == 0 ? 0 : 1;
}
