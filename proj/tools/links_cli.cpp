#include "links/checkpoint.hpp"
#include "links/data.hpp"
#include "links/errors.hpp"
#include "links/flow.hpp"
#include "links/lifter.hpp"
#include "links/occlusion.hpp"
#include "links/pipeline.hpp"
#include "links/render.hpp"

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>

using namespace links;
namespace fs = std::filesystem;

namespace {

enum ExitCode { ok = 0, config_error = 2, data_error = 3, divergence = 4 };

std::uint64_t resolve_seed(const std::optional<std::uint64_t>& flag, bool required)
{
   if(flag) return *flag;
   if(const char* env = std::getenv("LINKS_SEED")) {
      try {
         return std::stoull(env);
      } catch(const std::exception&) {
         throw ConfigError(std::string("LINKS_SEED is not an unsigned integer: '") + env + "'");
      }
   }
   if(required) throw ConfigError("a seed is required: pass --seed or set LINKS_SEED");
   return 0;
}

void require_file(const fs::path& p, const char* what)
{
   if(!fs::is_regular_file(p)) throw ConfigError(std::string(what) + " not found: '" + p.string() + "'");
}

std::vector<data::PoseRecord> load_records(const fs::path& path, const SkeletonTopology& topo)
{
   require_file(path, "dataset");
   auto r = data::load_dataset(path, topo);
   for(const auto& e : r.errors) std::cerr << path.string() << ":" << e.line << ": " << e.message << '\n';
   if(!r.errors.empty())
      throw DataError(std::to_string(r.errors.size()) + " malformed record(s) in '" + path.string() + "'");
   if(r.records.empty()) throw DataError("dataset '" + path.string() + "' is empty");
   return std::move(r.records);
}

struct Schedule
{
   int epochs = 0;
   int batch  = 256;
   double lr  = 2e-4;
   double decay = 0.95;
   int width  = 0;
   std::optional<std::uint64_t> seed;
};

void add_schedule(CLI::App* cmd, Schedule& s, int epochs, int width)
{
   s.epochs = epochs;
   s.width  = width;
   cmd->add_option("--epochs", s.epochs, "Training epochs")->capture_default_str()->check(CLI::NonNegativeNumber);
   cmd->add_option("--batch", s.batch, "Minibatch size")->capture_default_str()->check(CLI::PositiveNumber);
   cmd->add_option("--lr", s.lr, "Initial Adam learning rate")->capture_default_str()->check(CLI::PositiveNumber);
   cmd->add_option("--decay", s.decay, "Per-epoch learning-rate decay")->capture_default_str();
   cmd->add_option("--width", s.width, "Hidden width")->capture_default_str()->check(CLI::PositiveNumber);
   cmd->add_option("--seed", s.seed, "Random seed (falls back to LINKS_SEED)");
}

nn::AdamConfig adam_config(const Schedule& s)
{
   nn::AdamConfig a;
   a.learning_rate = s.lr;
   a.decay         = s.decay;
   return a;
}

void write_csv_header(std::ofstream& out, const fs::path& p, const std::string& header)
{
   if(p.has_parent_path()) fs::create_directories(p.parent_path());
   out.open(p);
   if(!out) throw ConfigError("cannot write '" + p.string() + "'");
   out.precision(17);
   out << header << '\n';
}

} // namespace

int main(int argc, char** argv)
{
   CLI::App app{"Unsupervised 2D-to-3D human pose lifting with segment lifters and normalizing flows"};
   app.require_subcommand(1);
   const auto topo = SkeletonTopology::human17();

   // synth
   auto* synth = app.add_subcommand("synth", "Generate synthetic poses by forward kinematics");
   int synth_count = 5000;
   fs::path synth_out, synth_config;
   std::optional<std::uint64_t> synth_seed;
   synth->add_option("--count", synth_count, "Number of poses")->capture_default_str()->check(CLI::NonNegativeNumber);
   synth->add_option("--out", synth_out, "Output pose file (JSON lines)")->required();
   synth->add_option("--config", synth_config, "Generator config (JSON); defaults built in");
   synth->add_option("--seed", synth_seed, "Random seed (falls back to the config, then LINKS_SEED)");
   bool synth_dump = false;
   synth->add_flag("--print-config", synth_dump, "Print the effective generator config and exit");

   // train-flow
   auto* tf = app.add_subcommand("train-flow", "Train one normalizing flow");
   Schedule tf_s;
   add_schedule(tf, tf_s, 100, pipeline::kDefaultWidth);
   fs::path tf_data, tf_out, tf_full;
   std::string tf_segment = "full";
   double tf_sigma = 0.2;
   double tf_noise = flow::FlowTrainConfig{}.noise;
   bool tf_no_sampling = false;
   tf->add_option("--data", tf_data, "Training pose file")->required();
   tf->add_option("--segment", tf_segment, "full|legs|torso|left|right")
       ->capture_default_str()
       ->check(CLI::IsMember({"full", "legs", "torso", "left", "right"}));
   tf->add_option("--out", tf_out, "Checkpoint directory (writes flows/<segment>.json)")->required();
   tf->add_option("--full-flow", tf_full, "Full-pose flow checkpoint used for sampling (segment flows)");
   tf->add_option("--sigma", tf_sigma, "Latent perturbation scale")->capture_default_str();
   tf->add_flag("--no-sampling", tf_no_sampling, "Train on real poses only");
   tf->add_option("--noise", tf_noise, "Std of Gaussian noise added to training poses")
      ->check(CLI::NonNegativeNumber)
      ->capture_default_str();

   // train-lifters
   auto* tl = app.add_subcommand("train-lifters", "Train the four segment lifters");
   Schedule tl_s;
   add_schedule(tl, tl_s, 100, pipeline::kDefaultWidth);
   fs::path tl_data, tl_out, tl_bones;
   double tl_sigma = 0.2;
   bool tl_no_sampling = false, tl_no_flows = false;
   std::array<double, 3> tl_weights{1.0, 1.0, 1.0};
   tl->add_option("--data", tl_data, "Training pose file")->required();
   tl->add_option("--out", tl_out, "Checkpoint directory holding flows/; writes lifters/")->required();
   tl->add_option("--bone-stats", tl_bones, "Mean relative bone lengths (JSON); computed from --data if absent");
   tl->add_option("--sigma", tl_sigma, "Latent perturbation scale")->capture_default_str();
   tl->add_flag("--no-sampling", tl_no_sampling, "Do not add flow-sampled poses to each batch");
   tl->add_flag("--no-flows", tl_no_flows, "Drop the flow likelihood term");
   tl->add_option("--candidate-weights", tl_weights, "Weights of legs-torso, left-right-r, left-right-l")
       ->expected(3);

   // train-occlusion
   auto* to = app.add_subcommand("train-occlusion", "Train per-scenario occlusion networks");
   Schedule to_s;
   add_schedule(to, to_s, 10, pipeline::kDefaultWidth);
   fs::path to_data, to_out;
   std::string to_space = "3d";
   std::vector<std::string> to_scenarios;
   bool to_no_augment = false;
   int to_parallel = 1;
   to->add_option("--data", to_data, "Training pose file")->required();
   to->add_option("--out", to_out, "Checkpoint directory holding lifters/; writes occlusion/<space>/")->required();
   to->add_option("--space", to_space, "3d|2d")->capture_default_str()->check(CLI::IsMember({"3d", "2d"}));
   to->add_option("--scenario", to_scenarios, "Scenario names (default: all eight)");
   to->add_flag("--no-augment", to_no_augment, "Disable azimuth augmentation");
   to->add_option("--parallel", to_parallel, "Worker threads across scenarios")->capture_default_str()
       ->check(CLI::PositiveNumber);

   // eval
   auto* ev = app.add_subcommand("eval", "Evaluate lifters and occlusion networks");
   fs::path ev_data, ev_ckpt, ev_out, ev_svg;
   std::vector<std::string> ev_candidates, ev_metrics, ev_scenarios;
   int ev_svg_count = 0;
   ev->add_option("--data", ev_data, "Pose file with 3D ground truth")->required();
   ev->add_option("--checkpoints", ev_ckpt, "Checkpoint directory")->required();
   ev->add_option("--out", ev_out, "Metrics CSV")->required();
   ev->add_option("--candidate", ev_candidates, "legs-torso|left-right-r|left-right-l (default legs-torso)");
   ev->add_option("--metric", ev_metrics, "mpjpe|pa-mpjpe|n-mpjpe|pck150|auc (default: all)");
   ev->add_option("--scenario", ev_scenarios, "Occlusion scenarios to add (needs occlusion checkpoints)");
   ev->add_option("--svg-dir", ev_svg, "Directory for per-pose SVG renders");
   ev->add_option("--svg-count", ev_svg_count, "Number of poses to render")->capture_default_str();
   fs::path ev_occ_out;
   ev->add_option("--occlusion-out", ev_occ_out, "Occlusion table CSV (scenario, space, pa_mpjpe, n_mpjpe, sample_count)");

   // render
   auto* rd = app.add_subcommand("render", "Draw poses from a pose file as SVG");
   fs::path rd_data, rd_out;
   int rd_count = 1;
   rd->add_option("--data", rd_data, "Pose file")->required();
   rd->add_option("--out", rd_out, "Output directory")->required();
   rd->add_option("--count", rd_count, "Number of poses")->capture_default_str();

   try {
      app.parse(argc, argv);
   } catch(const CLI::ParseError& e) {
      const int code = app.exit(e);
      return code == 0 ? ok : config_error;
   }

   try {
      if(*synth) {
         data::GeneratorConfig cfg = data::default_generator_config();
         if(!synth_config.empty()) {
            require_file(synth_config, "generator config");
            cfg = data::GeneratorConfig::from_json(read_json_file(synth_config));
         }
         if(synth_dump) {
            std::cout << cfg.to_json().dump(2) << '\n';
            return ok;
         }
         const auto seed = synth_seed ? *synth_seed : cfg.seed ? *cfg.seed : resolve_seed({}, true);
         data::save_dataset(synth_out, data::generate_synthetic(synth_count, seed, cfg, topo));
         return ok;
      }

      if(*tf) {
         const auto seed    = resolve_seed(tf_s.seed, true);
         const auto records = load_records(tf_data, topo);
         pipeline::FlowJob job;
         job.tag       = tf_segment;
         job.width     = tf_s.width;
         job.train.epochs = tf_s.epochs;
         job.train.batch  = tf_s.batch;
         job.train.adam   = adam_config(tf_s);
         job.train.sigma  = tf_sigma;
         job.train.noise  = tf_noise;
         job.train.sampling = !tf_no_sampling;
         job.train.seed   = seed;
         std::optional<flow::FlowModel> full;
         if(tf_segment != "full" && job.train.sampling) {
            const fs::path fp = tf_full.empty() ? tf_out / "flows" / "full.json" : tf_full;
            if(!fs::is_regular_file(fp))
               throw ConfigError("segment flow '" + tf_segment + "' samples from the full-pose flow; train it first ('"
                                 + fp.string() + "' missing)");
            full = flow::FlowModel::from_json(read_json_file(fp));
         }
         std::ofstream trace;
         write_csv_header(trace, tf_out / "flows" / (tf_segment + "_trace.csv"), "epoch,loss,nll_real,learning_rate");
         const auto model = pipeline::train_flow_job(topo, data::poses_2d(records), job, full ? &*full : nullptr,
                                                     [&](const flow::FlowEpoch& e) {
                                                        trace << e.epoch << ',' << e.loss << ',' << e.nll_real << ','
                                                              << e.learning_rate << '\n';
                                                     });
         write_json_file(tf_out / "flows" / (tf_segment + ".json"), model.to_json());
         return ok;
      }

      if(*tl) {
         const auto seed    = resolve_seed(tl_s.seed, true);
         const auto records = load_records(tl_data, topo);
         data::BoneStats bones;
         if(!tl_bones.empty()) {
            require_file(tl_bones, "bone stats");
            bones = data::bone_stats_from_json(read_json_file(tl_bones), topo);
         } else {
            bones = data::compute_bone_stats(records, topo);
         }
         auto flows = pipeline::load_flows(tl_out, !tl_no_flows, !tl_no_sampling);
         lifter::LifterTrainConfig cfg;
         cfg.epochs = tl_s.epochs;
         cfg.batch  = tl_s.batch;
         cfg.adam   = adam_config(tl_s);
         cfg.sigma  = tl_sigma;
         cfg.sampling = !tl_no_sampling;
         cfg.seed   = seed;
         cfg.cycle.candidate_weights = tl_weights;
         lifter::LifterConfig lc;
         lc.width = tl_s.width;
         auto lifters = lifter::make_lifters(topo, lc, seed);

         std::ofstream trace;
         write_csv_header(trace, tl_out / "lifters" / "trace.csv",
                          "epoch,l_nf,l_2d,l_3d,l_def,l_b,total,skipped,learning_rate");
         auto last_good = lifters;
         try {
            lifter::train_lifters(topo, lifters, flows.refs(), flows.full ? &*flows.full : nullptr, bones.means,
                                  data::poses_2d(records), cfg, [&](const lifter::LifterEpoch& e) {
                                     trace << e.epoch << ',' << e.mean.l_nf << ',' << e.mean.l_2d << ','
                                           << e.mean.l_3d << ',' << e.mean.l_def << ',' << e.mean.l_b << ','
                                           << e.mean.total() << ',' << e.mean.skipped << ',' << e.learning_rate
                                           << '\n';
                                     last_good = lifters;
                                  });
         } catch(const DivergenceError&) {
            pipeline::save_lifters(tl_out, last_good);
            std::cerr << "saved the lifters of the last completed epoch\n";
            throw;
         }
         pipeline::save_lifters(tl_out, lifters);
         write_json_file(tl_out / "lifters" / "bone_stats.json", data::bone_stats_to_json(bones, topo));
         return ok;
      }

      if(*to) {
         const auto seed    = resolve_seed(to_s.seed, true);
         const auto records = load_records(to_data, topo);
         const auto lifters = pipeline::load_lifters(to_out);
         const auto space   = occlusion::space_from_string(to_space);
         std::vector<occlusion::OcclusionScenario> scenarios;
         if(to_scenarios.empty())
            for(auto n : occlusion::kScenarioNames) scenarios.push_back(occlusion::OcclusionScenario::named(n, topo));
         for(const auto& n : to_scenarios) scenarios.push_back(occlusion::OcclusionScenario::named(n, topo));

         occlusion::OcclusionTrainConfig cfg;
         cfg.epochs  = to_s.epochs;
         cfg.batch   = to_s.batch;
         cfg.adam    = adam_config(to_s);
         cfg.augment = !to_no_augment;
         cfg.seed    = seed;
         occlusion::OcclusionNetConfig nc;
         nc.width = to_s.width;
         pipeline::train_occlusion_set(topo, lifters, data::poses_2d(records), scenarios, space, nc, cfg, to_out,
                                       to_parallel);
         return ok;
      }

      if(*ev) {
         const auto records = load_records(ev_data, topo);
         for(const auto& r : records)
            if(!r.joints_3d)
               throw DataError("evaluation needs 3D ground truth; record '" + r.id + "' has none");
         const auto lifters = pipeline::load_lifters(ev_ckpt);
         pipeline::EvalRequest req;
         for(const auto& c : ev_candidates) req.candidates.push_back(lifter::candidate_from_string(c));
         for(const auto& m : ev_metrics) req.metrics.push_back(metric_from_string(m));
         for(const auto& s : ev_scenarios) req.scenarios.push_back(occlusion::OcclusionScenario::named(s, topo));
         std::vector<std::string> warnings;
         const auto table = pipeline::evaluate(topo, lifters, records, req, ev_ckpt, &warnings);
         for(const auto& w : warnings) std::cerr << "warning: " << w << '\n';
         std::ofstream out;
         write_csv_header(out, ev_out, "scenario,candidate,space,metric,value,sample_count");
         for(const auto& r : table.rows)
            out << r.scenario << ',' << r.candidate << ',' << r.space << ',' << r.metric << ',' << r.value << ','
                << r.sample_count << '\n';
         if(!ev_occ_out.empty()) {
            std::ofstream occ;
            if(ev_occ_out.has_parent_path()) fs::create_directories(ev_occ_out.parent_path());
            occ.open(ev_occ_out);
            if(!occ) throw ConfigError("cannot write '" + ev_occ_out.string() + "'");
            occlusion::write_occlusion_csv(occ, table.occlusion);
         }
         if(!ev_svg.empty()) {
            const auto cand = req.candidates.empty() ? lifter::Candidate::legs_torso : req.candidates.front();
            const int n     = std::min<int>(ev_svg_count, int(records.size()));
            std::vector<Pose2D> poses;
            for(int i = 0; i < n; ++i) poses.push_back(records[size_t(i)].joints_2d);
            const auto pred = lifter::lift_poses(lifters, topo, poses, cand);
            for(int i = 0; i < n; ++i) {
               const auto& r  = records[size_t(i)];
               const Pose3D g = r.joints_3d->rowwise() - r.joints_3d->row(topo.root);
               const Pose3D p = procrustes_align(Pose3D(pred[size_t(i)].rowwise() - pred[size_t(i)].row(topo.root)), g);
               render::write_text(ev_svg / (r.id + ".svg"), render::svg_3d(p, topo, g, r.id));
            }
         }
         return ok;
      }

      if(*rd) {
         const auto records = load_records(rd_data, topo);
         const int n         = std::min<int>(rd_count, int(records.size()));
         for(int i = 0; i < n; ++i) {
            const auto& r = records[size_t(i)];
            render::write_text(rd_out / (r.id + "_2d.svg"), render::svg_2d(r.joints_2d, topo, r.id));
            if(r.joints_3d) render::write_text(rd_out / (r.id + "_3d.svg"), render::svg_3d(*r.joints_3d, topo, {}, r.id));
         }
         return ok;
      }
   } catch(const ConfigError& e) {
      std::cerr << "config error: " << e.what() << '\n';
      return config_error;
   } catch(const DivergenceError& e) {
      std::cerr << "diverged: " << e.what() << '\n';
      return divergence;
   } catch(const DataError& e) {
      std::cerr << "data error: " << e.what() << '\n';
      return data_error;
   } catch(const std::invalid_argument& e) {
      std::cerr << "config error: " << e.what() << '\n';
      return config_error;
   }
   return ok;
}
