#include "links/pipeline.hpp"

#include "links/checkpoint.hpp"
#include "links/errors.hpp"

#include <atomic>
#include <fstream>
#include <map>
#include <sstream>
#include <thread>

namespace links::pipeline {

namespace fs = std::filesystem;

flow::FlowModel train_flow_job(const SkeletonTopology& topo, const std::vector<Pose2D>& poses, const FlowJob& job,
                               const flow::FlowModel* full,
                               const std::function<void(const flow::FlowEpoch&)>& on_epoch)
{
   const auto joints = flow::flow_joints(topo, job.tag);
   flow::FlowConfig fc;
   fc.dims  = 2 * int(joints.size());
   fc.width = job.width;
   flow::FlowModel model(fc, job.tag);
   model.init(job.train.seed);

   const nn::Matrix x = flow::flatten_poses(poses, joints);
   model.fit_standardization(x);

   if(job.tag == "full" || !job.train.sampling) {
      flow::train_flow(model, x, job.train, nullptr, on_epoch);
      return model;
   }
   if(!full) throw std::invalid_argument("train_flow_job: segment flows need the full-pose flow");
   const auto full_joints = topo.non_root_joints();
   const nn::Matrix xf    = flow::flatten_poses(poses, full_joints);
   const flow::FullPoseSampler sampler{full, &xf, flow::flat_rows(full_joints, joints)};
   flow::train_flow(model, x, job.train, &sampler, on_epoch);
   return model;
}

lifter::FlowRefs FlowSet::refs()
{
   lifter::FlowRefs r{};
   for(size_t i = 0; i < segments.size(); ++i)
      if(segments[i]) r[i] = &*segments[i];
   return r;
}

FlowSet load_flows(const fs::path& dir, bool segments, bool full)
{
   FlowSet set;
   auto load = [&](const std::string& tag) {
      const fs::path p = dir / "flows" / (tag + ".json");
      if(!fs::is_regular_file(p))
         throw ConfigError("flow '" + tag + "' not trained yet: '" + p.string() + "' missing (run train-flow first)");
      return flow::FlowModel::from_json(read_json_file(p));
   };
   if(full) set.full = load("full");
   if(segments)
      for(auto s : kSegments) set.segments[size_t(s)] = load(std::string(to_string(s)));
   return set;
}

void save_lifters(const fs::path& dir, const lifter::LifterSet& lifters)
{
   for(const auto& l : lifters)
      write_json_file(dir / "lifters" / (std::string(to_string(l.segment())) + ".json"), l.to_json());
}

lifter::LifterSet load_lifters(const fs::path& dir)
{
   lifter::LifterSet set;
   for(auto s : kSegments) {
      const fs::path p = dir / "lifters" / (std::string(to_string(s)) + ".json");
      if(!fs::is_regular_file(p))
         throw ConfigError("lifter '" + std::string(to_string(s)) + "' not trained yet: '" + p.string()
                           + "' missing (run train-lifters first)");
      set[size_t(s)] = lifter::LifterModel::from_json(read_json_file(p));
      if(set[size_t(s)].segment() != s) throw DataError("lifter checkpoint '" + p.string() + "' holds the wrong segment");
   }
   return set;
}

fs::path occlusion_path(const fs::path& dir, occlusion::Space space, const std::string& scenario)
{
   return dir / "occlusion" / std::string(occlusion::to_string(space)) / (scenario + ".json");
}

std::optional<occlusion::OcclusionNet> load_occlusion(const fs::path& dir, occlusion::Space space,
                                                      const std::string& scenario, const SkeletonTopology& topo)
{
   const fs::path p = occlusion_path(dir, space, scenario);
   if(!fs::is_regular_file(p)) return std::nullopt;
   return occlusion::OcclusionNet::from_json(read_json_file(p), topo);
}

void train_occlusion_set(const SkeletonTopology& topo, const lifter::LifterSet& lifters,
                         const std::vector<Pose2D>& poses, const std::vector<occlusion::OcclusionScenario>& scenarios,
                         occlusion::Space space, const occlusion::OcclusionNetConfig& net_cfg,
                         const occlusion::OcclusionTrainConfig& cfg, const fs::path& dir, int workers)
{
   std::vector<std::exception_ptr> errors(scenarios.size());
   std::atomic<size_t> next{0};

   auto work = [&] {
      for(size_t i = next++; i < scenarios.size(); i = next++) {
         try {
            const auto& s = scenarios[i];
            occlusion::OcclusionNet net(s, space, topo, net_cfg);
            net.init(cfg.seed + i);
            auto c = cfg;
            c.seed = cfg.seed + i;
            std::ostringstream trace;
            trace.precision(17);
            trace << "epoch,loss,learning_rate\n";
            occlusion::train_occlusion(net, lifters, topo, poses, c, [&](const occlusion::OcclusionEpoch& e) {
               trace << e.epoch << ',' << e.loss << ',' << e.learning_rate << '\n';
            });
            const fs::path p = occlusion_path(dir, space, s.name);
            write_json_file(p, net.to_json(topo));
            std::ofstream t(p.parent_path() / (s.name + "_trace.csv"));
            t << trace.str();
         } catch(...) {
            errors[i] = std::current_exception();
         }
      }
   };

   if(workers <= 1) {
      work();
   } else {
      std::vector<std::thread> pool;
      for(int w = 0; w < workers; ++w) pool.emplace_back(work);
      for(auto& t : pool) t.join();
   }
   for(auto& e : errors)
      if(e) std::rethrow_exception(e);
}

double mean_metric(const std::vector<Pose3D>& pred, const std::vector<data::PoseRecord>& records,
                   const SkeletonTopology& topo, Metric metric)
{
   if(pred.size() != records.size() || pred.empty()) throw std::invalid_argument("mean_metric: size mismatch");
   double sum = 0.0;
   for(size_t i = 0; i < pred.size(); ++i) {
      if(!records[i].joints_3d) throw DataError("record '" + records[i].id + "' has no 3D ground truth");
      sum += evaluate_metric(pred[i], *records[i].joints_3d, topo.root, metric);
   }
   return sum / double(pred.size());
}

EvalTable evaluate(const SkeletonTopology& topo, const lifter::LifterSet& lifters,
                   const std::vector<data::PoseRecord>& records, const EvalRequest& req, const fs::path& dir,
                   std::vector<std::string>* warnings)
{
   auto candidates = req.candidates;
   if(candidates.empty()) candidates.push_back(lifter::Candidate::legs_torso);
   auto metrics = req.metrics;
   if(metrics.empty()) metrics = {Metric::mpjpe, Metric::pa_mpjpe, Metric::n_mpjpe, Metric::pck150, Metric::auc};

   EvalTable table;
   const auto poses = data::poses_2d(records);
   const int n      = int(records.size());
   for(auto c : candidates) {
      const auto pred = lifter::lift_poses(lifters, topo, poses, c);
      for(auto m : metrics)
         table.rows.push_back({"none", std::string(to_string(c)), "-", std::string(to_string(m)),
                               mean_metric(pred, records, topo, m), n});
   }

   if(req.scenarios.empty()) return table;
   std::vector<occlusion::OcclusionNet> owned;
   owned.reserve(2 * req.scenarios.size());
   std::map<std::string, const occlusion::OcclusionNet*> nets3, nets2;
   for(const auto& s : req.scenarios)
      for(auto space : {occlusion::Space::d3, occlusion::Space::d2}) {
         auto net = load_occlusion(dir, space, s.name, topo);
         if(!net) continue;
         owned.push_back(std::move(*net));
         (space == occlusion::Space::d3 ? nets3 : nets2)[s.name] = &owned.back();
      }
   table.occlusion = occlusion::evaluate_occlusion(req.scenarios, nets3, nets2, lifters, topo, records,
                                                   kDefaultDepth, warnings);

   for(const auto& s : req.scenarios) {
      std::vector<Pose2D> masked;
      for(const auto& p : poses) masked.push_back(occlusion::mask_pose(p, s).pose);
      for(auto space : {occlusion::Space::d3, occlusion::Space::d2}) {
         const auto& nets = space == occlusion::Space::d3 ? nets3 : nets2;
         const auto it    = nets.find(s.name);
         if(it == nets.end()) continue;
         std::vector<Pose3D> pred;
         if(space == occlusion::Space::d3) {
            pred = occlusion::partial_lift(masked, s, lifters, topo);
            for(auto& p : pred) p = occlusion::fill_3d(*it->second, p);
         } else {
            auto filled = masked;
            for(auto& p : filled) p = occlusion::fill_2d(*it->second, p);
            pred = lifter::lift_poses(lifters, topo, filled, lifter::Candidate::legs_torso);
         }
         for(auto m : metrics)
            table.rows.push_back({s.name, std::string(to_string(lifter::Candidate::legs_torso)),
                                  std::string(occlusion::to_string(space)), std::string(to_string(m)),
                                  mean_metric(pred, records, topo, m), n});
      }
   }
   return table;
}

} // namespace links::pipeline
