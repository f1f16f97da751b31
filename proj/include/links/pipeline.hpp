#pragma once

#include "links/data.hpp"
#include "links/flow.hpp"
#include "links/lifter.hpp"
#include "links/occlusion.hpp"

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

/// Staged training and evaluation over a checkpoint directory:
/// flows/ -> lifters/ -> occlusion/<space>/.
namespace links::pipeline {

inline constexpr int kDefaultWidth = 1024;

struct FlowJob
{
   std::string tag = "full"; // "full" or a segment name
   int width       = kDefaultWidth;
   flow::FlowTrainConfig train;
};

/// Builds, standardizes and trains one flow. Segment flows draw their sampled
/// poses from `full` when given.
flow::FlowModel train_flow_job(const SkeletonTopology& topo, const std::vector<Pose2D>& poses, const FlowJob& job,
                               const flow::FlowModel* full,
                               const std::function<void(const flow::FlowEpoch&)>& on_epoch = {});

struct FlowSet
{
   std::optional<flow::FlowModel> full;
   std::array<std::optional<flow::FlowModel>, 4> segments;

   lifter::FlowRefs refs();
};

/// Throws ConfigError naming the missing stage.
FlowSet load_flows(const std::filesystem::path& dir, bool segments, bool full);

void save_lifters(const std::filesystem::path& dir, const lifter::LifterSet& lifters);
lifter::LifterSet load_lifters(const std::filesystem::path& dir);

std::filesystem::path occlusion_path(const std::filesystem::path& dir, occlusion::Space space,
                                     const std::string& scenario);
std::optional<occlusion::OcclusionNet> load_occlusion(const std::filesystem::path& dir, occlusion::Space space,
                                                      const std::string& scenario, const SkeletonTopology& topo);

/// Trains one network per scenario (seed + scenario index) and writes each
/// checkpoint and loss trace. `workers` > 1 trains scenarios concurrently.
void train_occlusion_set(const SkeletonTopology& topo, const lifter::LifterSet& lifters,
                         const std::vector<Pose2D>& poses, const std::vector<occlusion::OcclusionScenario>& scenarios,
                         occlusion::Space space, const occlusion::OcclusionNetConfig& net_cfg,
                         const occlusion::OcclusionTrainConfig& cfg, const std::filesystem::path& dir, int workers = 1);

struct EvalRequest
{
   std::vector<lifter::Candidate> candidates; // empty: legs-torso
   std::vector<Metric> metrics;               // empty: all
   std::vector<occlusion::OcclusionScenario> scenarios;
};

struct EvalRow
{
   std::string scenario; // "none" without occlusion
   std::string candidate;
   std::string space;    // "-" without occlusion
   std::string metric;
   double value = 0.0;
   int sample_count = 0;
};

struct EvalTable
{
   std::vector<EvalRow> rows;
   std::vector<occlusion::OcclusionRow> occlusion;
};

/// Mean of the per-pose metric over records, one row per (scenario, candidate, metric).
double mean_metric(const std::vector<Pose3D>& pred, const std::vector<data::PoseRecord>& records,
                   const SkeletonTopology& topo, Metric metric);

EvalTable evaluate(const SkeletonTopology& topo, const lifter::LifterSet& lifters,
                   const std::vector<data::PoseRecord>& records, const EvalRequest& req,
                   const std::filesystem::path& dir, std::vector<std::string>* warnings = nullptr);

} // namespace links::pipeline
