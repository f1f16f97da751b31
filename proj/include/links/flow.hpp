#pragma once

#include "links/checkpoint.hpp"
#include "links/geometry.hpp"
#include "links/nn.hpp"

#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace links::flow {

using nn::Matrix;

struct FlowConfig
{
   int dims          = 0;
   int width         = 1024; // hidden units per subnet layer
   int hidden_layers = 2;
   int blocks        = 8;
   double scale_bound = 2.0; // log-scale is squashed to (-bound, bound)
};

/// Affine coupling: active = active * exp(s(cond)) + t(cond), cond passes through.
class CouplingBlock
{
 public:
   struct Tape
   {
      nn::Mlp::Tape scale_tape;
      nn::Mlp::Tape shift_tape;
      Matrix active_in;
      Matrix squashed; // tanh(raw / bound)
      Matrix exp_scale;
   };

   CouplingBlock() = default;
   CouplingBlock(std::vector<int> cond, std::vector<int> active, const FlowConfig& cfg);

   const std::vector<int>& cond() const noexcept { return cond_; }
   const std::vector<int>& active() const noexcept { return active_; }
   nn::Mlp& scale_net() noexcept { return scale_net_; }
   nn::Mlp& shift_net() noexcept { return shift_net_; }
   double bound() const noexcept { return bound_; }

   /// Data -> latent direction. Adds the per-sample log-determinant to `log_det`.
   Matrix forward(const Matrix& x, Eigen::RowVectorXd& log_det, Tape* tape) const;
   Matrix inverse(const Matrix& z, Eigen::RowVectorXd* log_det = nullptr) const;
   /// `dlog_det` is the loss gradient with respect to this block's log-det term.
   Matrix backward(const Tape& tape, const Matrix& dz, const Eigen::RowVectorXd& dlog_det,
                   bool param_grads);

   void append_params(std::vector<nn::Param*>& out);

 private:
   Matrix log_scale(const Matrix& cond_in, Matrix* squashed, nn::Mlp::Tape* tape) const;

   std::vector<int> cond_;
   std::vector<int> active_;
   nn::Mlp scale_net_;
   nn::Mlp shift_net_;
   double bound_ = 2.0;
};

/// Stack of coupling blocks behind a fixed elementwise input standardization.
class FlowModel final : public nn::Module
{
 public:
   struct Tape
   {
      const FlowModel* owner = nullptr;
      std::uint64_t version  = 0;
      std::vector<CouplingBlock::Tape> blocks;
      Matrix latent;
      Eigen::RowVectorXd log_det;
   };

   FlowModel() = default;
   /// Identity-initialized: all subnet output layers are zero.
   FlowModel(const FlowConfig& cfg, std::string tag);

   const FlowConfig& config() const noexcept { return cfg_; }
   const std::string& tag() const noexcept { return tag_; }
   int dims() const noexcept { return cfg_.dims; }
   std::vector<CouplingBlock>& blocks() noexcept { return blocks_; }
   const std::vector<CouplingBlock>& blocks() const noexcept { return blocks_; }

   /// Kaiming-uniform hidden layers; output layers scaled by `head_gain`.
   void init(std::uint64_t seed, double head_gain = 0.0);
   std::uint64_t seed() const noexcept { return seed_; }
   double head_gain() const noexcept { return head_gain_; }

   /// u = (x - shift) / scale ahead of the first block.
   void set_standardization(Eigen::VectorXd shift, Eigen::VectorXd scale);
   /// Per-dimension mean and standard deviation of `data` (dims x samples).
   void fit_standardization(const Matrix& data);
   const Eigen::VectorXd& input_shift() const noexcept { return shift_; }
   const Eigen::VectorXd& input_scale() const noexcept { return scale_; }

   /// Data -> latent; `log_det` receives log|det d latent / d x| per sample.
   Matrix encode(const Matrix& x, Eigen::RowVectorXd* log_det = nullptr, Tape* tape = nullptr) const;
   /// Latent -> data, the exact inverse of encode.
   Matrix decode(const Matrix& z, Eigen::RowVectorXd* log_det = nullptr) const;
   /// Standard-normal latent density plus log-det. Throws DivergenceError when non-finite.
   Eigen::RowVectorXd log_prob(const Matrix& x, Tape* tape = nullptr) const;

   /// Back-propagates dL/dlog_prob (one entry per sample); returns dL/dx.
   Matrix backward_log_prob(const Tape& tape, const Eigen::RowVectorXd& dlog_prob,
                            bool param_grads = true);

   std::vector<nn::Param*> params() override;
   using Module::params;

   Json to_json() const;
   static FlowModel from_json(const Json& j);

 private:
   void check_dims(const Matrix& x, const char* what) const;

   FlowConfig cfg_;
   std::string tag_;
   std::vector<CouplingBlock> blocks_;
   Eigen::VectorXd shift_;
   Eigen::VectorXd scale_;
   std::uint64_t seed_ = 0;
   double head_gain_   = 0.0;
};

/// Standard-normal log density summed over rows, per column.
Eigen::RowVectorXd standard_normal_log_density(const Matrix& z);

/// z = encode(x); z' = z + sigma * z * eps (elementwise, eps ~ N(0, 1)); returns decode(z').
Matrix sample_perturbed(const FlowModel& flow, const Matrix& x, double sigma, std::mt19937_64& rng);

/// decode(eps) with eps ~ N(0, 1): unconditioned generative sampling.
Matrix sample_unconditioned(const FlowModel& flow, int count, std::mt19937_64& rng);

// ------------------------------------------------------------ training
//
struct FlowTrainConfig
{
   int epochs          = 100;
   int batch           = 256;
   nn::AdamConfig adam = {};
   double sigma        = 0.2;
   bool sampling       = true;
   double noise        = 0.005; // std of Gaussian noise added to each real batch
   std::uint64_t seed  = 0;
};

/// Draws sampled poses for a segment flow from the full-pose flow; the sampled
/// full poses are sliced to `rows` of the full-pose vector.
struct FullPoseSampler
{
   const FlowModel* full = nullptr;
   const Matrix* full_data = nullptr; // columns aligned with the segment data
   std::vector<int> rows;
};

struct FlowEpoch
{
   int epoch = 0;
   double loss = 0.0;     // mean minibatch joint NLL
   double nll_real = 0.0; // mean NLL of the real samples
   double learning_rate = 0.0;
};

struct FlowTrainResult
{
   std::vector<FlowEpoch> trace;
   long steps = 0;
};

/// Minimizes -(1/N) sum[log p(x') + log p(x)] over minibatches with Adam.
/// Without a FullPoseSampler the flow samples from itself.
FlowTrainResult train_flow(FlowModel& flow, const Matrix& data, const FlowTrainConfig& cfg,
                           const FullPoseSampler* sampler = nullptr,
                           const std::function<void(const FlowEpoch&)>& on_epoch = {});

/// Joints modelled by a flow: "full" = every non-root joint, else a segment name.
std::vector<int> flow_joints(const SkeletonTopology& topo, const std::string& tag);

/// Rows of the full-pose vector holding `joints` (each joint contributes x, y).
std::vector<int> flat_rows(const std::vector<int>& full_joints, const std::vector<int>& joints);

/// One column per pose: x0, y0, x1, y1, ... over `joints`.
Matrix flatten_poses(const std::vector<Pose2D>& poses, const std::vector<int>& joints);
Pose2D unflatten_pose(const Eigen::VectorXd& column, const std::vector<int>& joints, int joint_count);

} // namespace links::flow
