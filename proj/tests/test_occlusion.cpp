#include "gradcheck.hpp"

#include "links/data.hpp"
#include "links/errors.hpp"
#include "links/occlusion.hpp"

#include <doctest.h>

#include <set>
#include <sstream>

using namespace links;
using namespace links::occlusion;

namespace {

const SkeletonTopology& topo()
{
   static const auto t = SkeletonTopology::human17();
   return t;
}

lifter::LifterSet small_lifters(std::uint64_t seed, double head_gain = 0.5)
{
   lifter::LifterConfig cfg;
   cfg.width     = 24;
   cfg.blocks    = 1;
   cfg.head_gain = head_gain;
   return lifter::make_lifters(topo(), cfg, seed);
}

std::vector<Pose2D> synthetic_poses(int n, std::uint64_t seed)
{
   return data::poses_2d(data::generate_synthetic(n, seed, data::default_generator_config()));
}

OcclusionNetConfig small_net()
{
   OcclusionNetConfig c;
   c.width  = 32;
   c.blocks = 1;
   return c;
}

std::set<Segment> lifters_used(const OcclusionScenario& s)
{
   std::set<Segment> out;
   for(const auto& [seg, joints] : s.routing.parts) out.insert(seg);
   return out;
}

} // namespace

TEST_SUITE("occlusion")
{
   TEST_CASE("masks")
   {
      const auto& t = topo();
      const auto la = OcclusionScenario::named("left-arm", t);
      CHECK(la.masked == std::vector<int>{t.index_of("l_shoulder"), t.index_of("l_elbow"), t.index_of("l_wrist")});

      const auto ft = OcclusionScenario::named("full-torso", t);
      CHECK(ft.masked.size() == 10);
      CHECK(ft.visible(t) == t.segment(Segment::legs));

      const Pose2D p = synthetic_poses(1, 3)[0];
      const auto none = OcclusionScenario::custom({}, t);
      const auto mp   = mask_pose(p, none);
      CHECK(mp.pose == p);
      CHECK(std::count(mp.mask.begin(), mp.mask.end(), true) == 0);

      const auto masked = mask_pose(p, la);
      for(int j = 0; j < 17; ++j) {
         const bool gone = std::find(la.masked.begin(), la.masked.end(), j) != la.masked.end();
         CHECK(masked.mask[size_t(j)] == gone);
         if(!gone) CHECK(masked.pose.row(j) == p.row(j));
      }

      CHECK_THROWS_AS(OcclusionScenario::custom({0, 5}, t), std::invalid_argument);
   }

   TEST_CASE("routing tables")
   {
      const auto& t = topo();
      using S       = std::set<Segment>;
      CHECK(lifters_used(OcclusionScenario::named("right-arm", t)) == S{Segment::legs, Segment::left});
      CHECK(lifters_used(OcclusionScenario::named("left-arm", t)) == S{Segment::legs, Segment::right});
      CHECK(lifters_used(OcclusionScenario::named("left-leg", t)) == S{Segment::torso, Segment::right});
      CHECK(lifters_used(OcclusionScenario::named("right-leg", t)) == S{Segment::torso, Segment::left});
      CHECK(lifters_used(OcclusionScenario::named("both-legs", t)) == S{Segment::torso});
      CHECK(lifters_used(OcclusionScenario::named("full-torso", t)) == S{Segment::legs});
      CHECK(lifters_used(OcclusionScenario::named("left-arm-and-leg", t)) == S{Segment::right});
      CHECK(lifters_used(OcclusionScenario::named("right-arm-and-leg", t)) == S{Segment::left});

      // Single leg: the opposite side only contributes its leg joints.
      const auto rl = OcclusionScenario::named("right-leg", t);
      for(const auto& [seg, joints] : rl.routing.parts)
         if(seg == Segment::left) CHECK(joints == std::vector<int>{4, 5, 6});

      for(auto name : kScenarioNames) {
         const auto s = OcclusionScenario::named(name, t);
         std::vector<int> routed;
         for(const auto& [seg, joints] : s.routing.parts) {
            const auto& segment = t.segment(seg);
            for(int j : joints) {
               CHECK(std::find(segment.begin(), segment.end(), j) != segment.end());
               routed.push_back(j);
            }
            for(int j : segment) CHECK(std::find(s.masked.begin(), s.masked.end(), j) == s.masked.end());
         }
         std::sort(routed.begin(), routed.end());
         CHECK(std::adjacent_find(routed.begin(), routed.end()) == routed.end());
         CHECK(routed == s.visible(t));

         const auto back = OcclusionScenario::from_json(s.to_json(t), t);
         CHECK(back.masked == s.masked);
         CHECK(back.routing.joints() == s.routing.joints());
      }

      CHECK_THROWS_AS(OcclusionScenario::custom({t.index_of("l_wrist"), t.index_of("r_ankle")}, t),
                      UnsupportedScenario);
   }

   TEST_CASE("partial lifts")
   {
      const auto& t       = topo();
      const auto lifters  = small_lifters(4);
      const auto poses    = synthetic_poses(20, 4);

      const auto both = OcclusionScenario::named("both-legs", t);
      for(size_t i = 0; i < poses.size(); ++i) {
         const auto pl  = partial_lift(mask_pose(poses[i], both).pose, both, lifters, t);
         const auto tl  = lifter::lift_segment(lifters[size_t(Segment::torso)], poses[i], t);
         CHECK(pl.elevation == tl.elevation);
         const auto& torso = t.segment(Segment::torso);
         for(size_t k = 0; k < torso.size(); ++k) {
            const double z = std::max(1.0, tl.depth_offsets(Eigen::Index(k)) + kDefaultDepth);
            CHECK(pl.pose(torso[k], 2) == z);
            CHECK(pl.pose(torso[k], 0) == poses[i](torso[k], 0) * z);
         }
         for(int j : both.masked) CHECK(pl.pose.row(j) == Eigen::RowVector3d(0.0, 0.0, kDefaultDepth));
      }

      const auto none  = OcclusionScenario::custom({}, t);
      const auto full  = partial_lift(poses, none, lifters, t);
      const auto cand1 = lifter::lift_poses(lifters, t, poses, lifter::Candidate::legs_torso);
      for(size_t i = 0; i < poses.size(); ++i) CHECK(full[i] == cand1[i]);
   }

   TEST_CASE("fill pass-through and zero nets")
   {
      const auto& t      = topo();
      const auto lifters = small_lifters(5);
      const auto poses   = synthetic_poses(10, 5);
      for(auto name : kScenarioNames) {
         const auto s = OcclusionScenario::named(name, t);
         OcclusionNet n3(s, Space::d3, t, small_net());
         OcclusionNet n2(s, Space::d2, t, small_net());
         n3.init(1);
         n2.init(2);
         CHECK(n3.net().in() == 3 * int(s.visible(t).size()));
         CHECK(n3.net().out() == 3 * int(s.masked.size()));
         CHECK(n2.net().in() == 2 * int(s.visible(t).size()));
         for(const auto& p : poses) {
            const Pose2D partial = mask_pose(p, s).pose;
            const Pose3D lifted  = partial_lift(partial, s, lifters, t).pose;
            const Pose3D f3      = fill_3d(n3, lifted);
            const Pose2D f2      = fill_2d(n2, partial);
            for(int j : s.visible(t)) {
               CHECK(f3.row(j) == lifted.row(j));
               CHECK(f2.row(j) == partial.row(j));
            }
            CHECK(f3.row(t.root) == lifted.row(t.root));
         }
         for(auto* prm : n3.params()) prm->value.setZero();
         n3.touch();
         const Pose3D z = fill_3d(n3, partial_lift(mask_pose(poses[0], s).pose, s, lifters, t).pose);
         for(int j : s.masked) CHECK(z.row(j) == Eigen::RowVector3d(0.0, 0.0, kDefaultDepth));
      }

      // A perfect 2D completion reduces to the unoccluded pipeline.
      const auto la = OcclusionScenario::named("left-arm", t);
      OcclusionNet n2(la, Space::d2, t, small_net());
      n2.init(3);
      const Pose2D filled = fill_2d(n2, mask_pose(poses[0], la).pose);
      CHECK(filled.row(t.index_of("l_wrist")) != poses[0].row(t.index_of("l_wrist")));
      Pose2D perfect = filled;
      for(int j : la.masked) perfect.row(j) = poses[0].row(j);
      CHECK(lifter::lift_poses(lifters, t, {perfect}, lifter::Candidate::legs_torso)[0]
            == lifter::lift_poses(lifters, t, {poses[0]}, lifter::Candidate::legs_torso)[0]);
   }

   TEST_CASE("occlusion net gradients match finite differences")
   {
      std::mt19937_64 rng(6);
      for(auto name : {"left-arm", "both-legs"}) {
         for(Space space : {Space::d3, Space::d2}) {
            const auto s = OcclusionScenario::named(name, topo());
            OcclusionNetConfig cfg;
            cfg.width     = 6;
            cfg.blocks    = 2;
            cfg.head_gain = 0.5;
            OcclusionNet net(s, space, topo(), cfg);
            net.init(7);
            test::jitter(net, rng);
            const Matrix x = Matrix::Random(net.net().in(), 5);
            const Matrix y = Matrix::Random(net.net().out(), 5);
            nn::ResidualNet::Tape tape;
            Matrix g;
            distillation_loss(net.forward(x, &tape), y, &g);
            net.zero_grad();
            net.backward(tape, g);
            const auto r = test::check_params(net, [&] { return distillation_loss(net.forward(x), y); });
            INFO(r.where);
            CHECK(r.worst < 1e-4);
         }
      }
   }

   TEST_CASE("distillation loss and augmentation")
   {
      Matrix a = Matrix::Random(6, 4);
      CHECK(distillation_loss(a, a) == 0.0);
      Matrix b = a;
      b(2, 1) += 2.0;
      Matrix g;
      CHECK(distillation_loss(a, b, &g) == doctest::Approx(4.0 / 24.0));
      CHECK(g(2, 1) == doctest::Approx(-4.0 / 24.0));

      const auto& t      = topo();
      const auto lifters = small_lifters(8);
      const auto poses   = synthetic_poses(30, 8);
      const auto s       = OcclusionScenario::named("right-leg", t);
      OcclusionNet net(s, Space::d3, t, small_net());
      net.init(9);
      const auto targets = make_targets(net, lifters, t, poses, kDefaultDepth);
      const double plain = occlusion_loss(net, targets, {}, kDefaultDepth);
      CHECK(occlusion_loss(net, targets, std::vector<double>(30, 0.0), kDefaultDepth) == plain);
      CHECK(occlusion_loss(net, targets, std::vector<double>(30, 1.0), kDefaultDepth) != plain);

      // Output equal to the teacher gives zero loss.
      std::vector<Pose3D> filled;
      for(size_t i = 0; i < poses.size(); ++i) {
         Pose3D f = targets.inputs_3d[i];
         for(int j : s.masked) f.row(j) = targets.teacher[i].row(j);
         filled.push_back(f);
      }
      const Matrix teacher_cols = encode_input_3d(filled, s.masked, kDefaultDepth);
      CHECK(distillation_loss(teacher_cols, encode_input_3d(targets.teacher, s.masked, kDefaultDepth)) == 0.0);
   }

   TEST_CASE("training")
   {
      const auto& t      = topo();
      const auto lifters = small_lifters(10, 1.0);
      const auto train   = synthetic_poses(1500, 10);
      const auto held    = synthetic_poses(300, 11);
      const auto s       = OcclusionScenario::named("left-leg", t);

      OcclusionNet net(s, Space::d3, t, small_net());
      net.init(12);
      const Json before = net.to_json(t);
      OcclusionTrainConfig cfg;
      cfg.epochs = 0;
      train_occlusion(net, lifters, t, train, cfg);
      CHECK(net.to_json(t) == before);

      cfg.epochs             = 10;
      cfg.batch              = 64;
      cfg.adam.learning_rate = 1e-3;
      cfg.seed               = 4;
      const auto trace       = train_occlusion(net, lifters, t, train, cfg).trace;
      REQUIRE(trace.size() == 10);
      CHECK(trace.back().loss < trace.front().loss);

      OcclusionNet again(s, Space::d3, t, small_net());
      again.init(12);
      const auto trace2 = train_occlusion(again, lifters, t, train, cfg).trace;
      CHECK(again.to_json(t).dump() == net.to_json(t).dump());
      for(size_t e = 0; e < trace.size(); ++e) CHECK(trace2[e].loss == trace[e].loss);

      // Masked-joint error against the teacher, versus the training mean.
      const auto train_t = make_targets(net, lifters, t, train, kDefaultDepth);
      Eigen::MatrixXd mean = Eigen::MatrixXd::Zero(17, 3);
      for(const auto& p : train_t.teacher) mean += p;
      mean /= double(train.size());
      const auto held_t = make_targets(net, lifters, t, held, kDefaultDepth);
      double err_net = 0.0, err_mean = 0.0;
      for(size_t i = 0; i < held.size(); ++i) {
         const Pose3D f = fill_3d(net, held_t.inputs_3d[i]);
         for(int j : s.masked) {
            err_net += (f.row(j) - held_t.teacher[i].row(j)).norm();
            err_mean += (mean.row(j) - held_t.teacher[i].row(j)).norm();
         }
      }
      CHECK(err_net < err_mean);

      OcclusionNet net2(s, Space::d2, t, small_net());
      net2.init(13);
      const auto t2 = train_occlusion(net2, lifters, t, train, cfg).trace;
      CHECK(t2.back().loss < t2.front().loss);
   }

   TEST_CASE("evaluation table")
   {
      const auto& t       = topo();
      const auto lifters  = small_lifters(14);
      const auto records  = data::generate_synthetic(20, 14, data::default_generator_config());
      const auto none     = OcclusionScenario::custom({}, t, "none");
      const auto la       = OcclusionScenario::named("left-arm", t);
      OcclusionNet n3(la, Space::d3, t, small_net());
      n3.init(1);
      std::vector<std::string> warnings;
      const auto rows = evaluate_occlusion({none, la}, {{"left-arm", &n3}}, {}, lifters, t, records,
                                           kDefaultDepth, &warnings);
      REQUIRE(rows.size() == 3);
      CHECK(warnings.size() == 1);
      CHECK(rows[0].scenario == "none");
      CHECK(rows[0].pa_mpjpe == rows[1].pa_mpjpe);

      const auto plain = lifter::lift_poses(lifters, t, data::poses_2d(records), lifter::Candidate::legs_torso);
      double pa = 0.0;
      for(size_t i = 0; i < records.size(); ++i)
         pa += evaluate_metric(plain[i], *records[i].joints_3d, t.root, Metric::pa_mpjpe);
      CHECK(rows[0].pa_mpjpe == doctest::Approx(pa / 20.0).epsilon(1e-12));
      CHECK(rows[0].sample_count == 20);

      std::ostringstream csv;
      write_occlusion_csv(csv, rows);
      const std::string text = csv.str();
      CHECK(text.rfind("scenario,space,pa_mpjpe,n_mpjpe,sample_count\n", 0) == 0);
      CHECK(std::count(text.begin(), text.end(), '\n') == 4);

      auto no3d = records;
      for(auto& r : no3d) r.joints_3d.reset();
      CHECK_THROWS_AS(evaluate_occlusion({la}, {}, {}, lifters, t, no3d, kDefaultDepth), DataError);
   }
}
