#include "gradcheck.hpp"

#include "links/data.hpp"
#include "links/lifter.hpp"

#include <doctest.h>

#include <random>

using namespace links;
using namespace links::lifter;

namespace {

std::vector<Pose2D> random_poses(const SkeletonTopology& topo, int n, std::mt19937_64& rng)
{
   std::normal_distribution<double> g(0.0, 0.05);
   std::vector<Pose2D> out;
   for(int i = 0; i < n; ++i) {
      Pose2D p(topo.joint_count(), 2);
      for(Eigen::Index k = 0; k < p.size(); ++k) p.data()[k] = g(rng);
      p.row(topo.root).setZero();
      out.push_back(normalize_pose(p, topo).pose);
   }
   return out;
}

} // namespace

TEST_SUITE("lifter")
{
   TEST_CASE("cycle gradients match finite differences on the toy skeleton")
   {
      const auto topo = SkeletonTopology::toy5();
      LifterConfig lc;
      lc.width     = 6;
      lc.blocks    = 1;
      lc.head_gain = 0.5;
      auto lifters = make_lifters(topo, lc, 3);
      std::mt19937_64 jrng(9);
      for(auto& l : lifters) test::jitter(l, jrng);

      std::vector<flow::FlowModel> flows;
      FlowRefs refs{};
      for(auto s : kSegments) {
         flow::FlowConfig fc;
         fc.dims  = 2 * int(topo.segment(s).size());
         fc.width = 5;
         fc.blocks = 2;
         flows.emplace_back(fc, std::string(to_string(s)));
         flows.back().init(11 + int(s), 0.3);
      }
      for(auto s : kSegments) refs[size_t(s)] = &flows[size_t(s)];

      std::mt19937_64 rng(5);
      const auto poses = random_poses(topo, 4, rng);
      Eigen::MatrixXd az(3, 4);
      std::uniform_real_distribution<double> u(-3.0, 3.0);
      for(Eigen::Index i = 0; i < az.size(); ++i) az.data()[i] = u(rng);
      const Eigen::VectorXd means = Eigen::VectorXd::Constant(topo.bone_count(), 1.0 / topo.bone_count());
      CycleConfig cc;

      for(auto& l : lifters) l.zero_grad();
      cycle_losses(topo, lifters, refs, means, poses, az, cc, true);
      auto loss = [&] { return cycle_losses(topo, lifters, refs, means, poses, az, cc, false).total(); };
      for(auto s : kSegments) {
         const auto r = test::check_params(lifters[size_t(s)], loss);
         MESSAGE(to_string(s), " worst ", r.worst, " ", r.where);
         INFO(to_string(s), " ", r.where);
         CHECK(r.worst < 1e-4);
      }
   }

   TEST_CASE("oracle depths close the cycle")
   {
      const auto topo  = SkeletonTopology::human17();
      const auto recs  = data::generate_synthetic(200, 21, data::default_generator_config());
      std::mt19937_64 rng(21);
      std::uniform_real_distribution<double> az(-3.14159, 3.14159), el(-0.3, 0.3);
      double worst2d = 0.0, worst3d = 0.0;
      for(const auto& r : recs) {
         const auto d       = data::true_depth_offsets(*r.joints_3d, topo);
         const auto view    = forward_view(r.joints_2d, d, el(rng), az(rng));
         const auto relift  = Eigen::VectorXd(view.rotated.col(2).array() - kDefaultDepth);
         const auto ret     = return_view(view, relift);
         for(auto cand : kCandidates)
            for(double t : l2d_terms(r.joints_2d, ret.reprojected, candidate_routing(topo, cand)))
               worst2d = std::max(worst2d, t);
         worst3d = std::max(worst3d, l3d_loss(view.lifted, ret.back_rotated, topo.root));
      }
      CHECK(worst2d < 1e-9);
      CHECK(worst3d < 1e-9);
   }

   TEST_CASE("zero rotation is the identity cycle")
   {
      const auto topo = SkeletonTopology::human17();
      std::mt19937_64 rng(22);
      const auto poses = random_poses(topo, 20, rng);
      std::normal_distribution<double> g(0.0, 0.3);
      for(const auto& p : poses) {
         Eigen::VectorXd d(17);
         for(int j = 0; j < 17; ++j) d(j) = g(rng);
         const auto view = forward_view(p, d, 0.0, 0.0);
         CHECK(view.rotated == view.lifted);
         const auto ret = return_view(view, d);
         CHECK(l3d_loss(view.lifted, ret.back_rotated, topo.root) < 1e-14);
      }
   }

   TEST_CASE("reprojection loss by hand")
   {
      const auto topo = SkeletonTopology::toy5();
      Pose2D target   = Pose2D::Zero(5, 2);
      Pose2D reproj   = target;
      reproj(1, 0)    = 0.2;  // legs
      reproj(3, 1)    = -0.4; // torso
      Routing r;
      r.parts = {{Segment::legs, {1, 2}}, {Segment::torso, {3, 4}}};
      std::vector<Pose2D> grads;
      const auto terms = l2d_terms(target, reproj, r, &grads);
      REQUIRE(terms.size() == 2);
      CHECK(terms[0] == doctest::Approx(0.05));
      CHECK(terms[1] == doctest::Approx(0.1));
      CHECK(grads[0](1, 0) == doctest::Approx(0.25));
      CHECK(grads[1](3, 1) == doctest::Approx(-0.25));
      CHECK(grads[1](1, 0) == 0.0);
   }

   TEST_CASE("bone and deformation losses")
   {
      const auto topo = SkeletonTopology::human17();
      const auto rec  = data::generate_synthetic(2, 23, data::default_generator_config());
      const Pose3D& p = *rec[0].joints_3d;
      Eigen::VectorXd means = bone_lengths(p, topo);
      CHECK(bone_loss(p, means, topo) < 1e-30);
      CHECK(bone_loss(3.5 * p, means, topo) < 1e-30);
      const double delta = 0.01;
      means(4) += delta;
      CHECK(bone_loss(p, means, topo) == doctest::Approx(delta * delta / 16.0).epsilon(1e-9));

      Pose3D g;
      means = Eigen::VectorXd::Constant(16, 1.0 / 16.0);
      bone_loss(p, means, topo, &g);
      double worst = 0.0;
      for(Eigen::Index i = 0; i < p.size(); ++i) {
         Pose3D a = p, b = p;
         a.data()[i] += 1e-4;
         b.data()[i] -= 1e-4;
         const double num = (bone_loss(a, means, topo) - bone_loss(b, means, topo)) / 2e-4;
         worst            = std::max(worst, test::relative_error(g.data()[i], num, 1e-10));
      }
      CHECK(worst < 1e-4);

      const Pose3D q = *rec[1].joints_3d;
      CHECK(deformation_loss({p, p}, {q, q}) == 0.0);
      CHECK(deformation_loss({p, q}, {p, q}) == 0.0);
      CHECK(deformation_loss({p}, {q}) == 0.0);
      Pose3D shifted = q;
      shifted(5, 2) += 2.0;
      CHECK(deformation_loss({p, q}, {p, shifted}) == doctest::Approx(4.0));
      CHECK(deformation_loss({p, q, p, q}, {p, shifted, p, q}) == doctest::Approx(2.0));
   }

   TEST_CASE("candidate assembly")
   {
      const auto topo = SkeletonTopology::human17();
      SegmentLifts lifts;
      for(auto s : kSegments) {
         SegmentLift l;
         l.depth_offsets = Eigen::VectorXd::Constant(Eigen::Index(topo.segment(s).size()), 1.0 + int(s));
         l.elevation     = 0.1 * (1 + int(s));
         lifts[size_t(s)] = l;
      }
      const auto a = assemble(topo, candidate_routing(topo, Candidate::legs_torso), lifts);
      CHECK(a.elevation == doctest::Approx(0.15));
      CHECK(a.depth_offsets(0) == 0.0);
      CHECK(a.depth_offsets(2) == 1.0);
      CHECK(a.depth_offsets(9) == 2.0);

      const auto r = assemble(topo, candidate_routing(topo, Candidate::left_right_r), lifts);
      CHECK(r.elevation == doctest::Approx(0.35));
      CHECK(r.depth_offsets(5) == 3.0);
      CHECK(r.depth_offsets(12) == 3.0);
      CHECK(r.depth_offsets(2) == 4.0);
      for(int j : {7, 8, 9, 10}) CHECK(r.depth_offsets(j) == 4.0);

      const auto l = assemble(topo, candidate_routing(topo, Candidate::left_right_l), lifts);
      for(int j : {7, 8, 9, 10}) CHECK(l.depth_offsets(j) == 3.0);
      CHECK(l.depth_offsets(15) == 4.0);

      for(auto cand : kCandidates) {
         auto joints = candidate_routing(topo, cand).joints();
         std::sort(joints.begin(), joints.end());
         CHECK(joints == topo.non_root_joints());
      }

      lifts[size_t(Segment::torso)].reset();
      CHECK_THROWS_AS(assemble(topo, candidate_routing(topo, Candidate::legs_torso), lifts), std::invalid_argument);
      CHECK(candidate_from_string(to_string(Candidate::left_right_l)) == Candidate::left_right_l);
   }

   TEST_CASE("right-wrist error reaches only the right lifter")
   {
      const auto topo = SkeletonTopology::human17();
      Pose2D target   = Pose2D::Zero(17, 2);
      Pose2D reproj   = target;
      reproj(16, 0)   = 0.3;
      const auto routing = candidate_routing(topo, Candidate::left_right_r);
      std::vector<Pose2D> grads;
      const auto terms = l2d_terms(target, reproj, routing, &grads);
      for(size_t k = 0; k < routing.parts.size(); ++k) {
         const bool right = routing.parts[k].first == Segment::right;
         CHECK((terms[k] > 0.0) == right);
         CHECK((grads[k].cwiseAbs().maxCoeff() > 0.0) == right);
      }
   }

   TEST_CASE("loss total and untouched lifters")
   {
      LossBreakdown lb;
      lb.l_nf  = -3.25;
      lb.l_2d  = 0.125;
      lb.l_3d  = 0.0625;
      lb.l_def = 1.5;
      lb.l_b   = 0.001;
      CHECK(lb.total() == lb.l_nf + lb.l_2d + lb.l_3d + lb.l_def + 50.0 * lb.l_b);

      const auto topo = SkeletonTopology::toy5();
      LifterConfig lc;
      lc.width  = 8;
      lc.blocks = 1;
      auto lifters      = make_lifters(topo, lc, 2);
      const auto before = lifters[0].to_json();
      std::mt19937_64 rng(2);
      LifterTrainConfig cfg;
      cfg.epochs   = 0;
      cfg.sampling = false;
      const auto res = train_lifters(topo, lifters, {}, nullptr, Eigen::VectorXd::Constant(4, 0.25),
                                     random_poses(topo, 10, rng), cfg);
      CHECK(res.trace.empty());
      CHECK(lifters[0].to_json() == before);

      const auto back = LifterModel::from_json(Json::parse(lifters[1].to_json().dump()));
      const Matrix x  = Matrix::Random(back.joints() * 2, 3);
      CHECK(back.forward(x) == lifters[1].forward(x));
   }

   TEST_CASE("lifter training is deterministic")
   {
      const auto topo = SkeletonTopology::toy5();
      LifterConfig lc;
      lc.width  = 8;
      lc.blocks = 1;
      std::mt19937_64 rng(3);
      const auto poses = random_poses(topo, 12, rng);
      LifterTrainConfig cfg;
      cfg.epochs   = 2;
      cfg.batch    = 4;
      cfg.sampling = false;
      cfg.seed     = 8;
      const Eigen::VectorXd means = Eigen::VectorXd::Constant(4, 0.25);
      auto a        = make_lifters(topo, lc, 4);
      auto b        = make_lifters(topo, lc, 4);
      const auto ta = train_lifters(topo, a, {}, nullptr, means, poses, cfg);
      const auto tb = train_lifters(topo, b, {}, nullptr, means, poses, cfg);
      for(int s = 0; s < 4; ++s) CHECK(a[size_t(s)].to_json().dump() == b[size_t(s)].to_json().dump());
      REQUIRE(ta.trace.size() == 2);
      for(size_t e = 0; e < 2; ++e) CHECK(ta.trace[e].mean.total() == tb.trace[e].mean.total());
      CHECK(a[0].to_json().dump() != make_lifters(topo, lc, 4)[0].to_json().dump());
   }
}
