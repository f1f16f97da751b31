#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace links::nn {

/// Activations are stored feature-major: one column per sample.
using Matrix = Eigen::MatrixXd;

/// A trainable tensor and its accumulated gradient.
struct Param
{
   Matrix value;
   Matrix grad;

   explicit Param(Eigen::Index rows = 0, Eigen::Index cols = 0)
       : value(Matrix::Zero(rows, cols))
       , grad(Matrix::Zero(rows, cols))
   {}
};

/// Anything that owns parameters. The version counter is bumped whenever the
/// parameters change, which invalidates tapes recorded before the change.
class Module
{
 public:
   virtual ~Module() = default;

   virtual std::vector<Param*> params() = 0;
   std::vector<const Param*> params() const;

   void zero_grad();
   void touch() noexcept { ++version_; }
   std::uint64_t version() const noexcept { return version_; }
   std::size_t parameter_count() const;

 private:
   std::uint64_t version_ = 0;
};

enum class Init { kaiming_uniform, zero };

/// Fills `w` with U(-g*sqrt(6/fan_in), g*sqrt(6/fan_in)).
void kaiming_uniform(Matrix& w, double gain, std::mt19937_64& rng);

// ------------------------------------------------------------ dense
//
struct Dense
{
   Param weights; // out x in
   Param biases;  // out x 1

   Dense() = default;
   Dense(int in, int out);

   int in() const noexcept { return int(weights.value.cols()); }
   int out() const noexcept { return int(weights.value.rows()); }

   Matrix forward(const Matrix& x) const;
   // Accumulates parameter gradients unless `param_grads` is false; returns the
   // input gradient.
   Matrix backward(const Matrix& x, const Matrix& dy, bool param_grads = true);

   void init(Init scheme, double gain, std::mt19937_64& rng);
   void append_params(std::vector<Param*>& out);
};

Matrix relu(const Matrix& x);
Matrix relu_backward(const Matrix& pre, const Matrix& dy);

// ------------------------------------------------------------ residual block
//
/// y = x + relu(W2 relu(W1 x + b1) + b2)
struct ResidualBlock
{
   Dense first;
   Dense second;

   struct Tape
   {
      Matrix input;
      Matrix pre1;
      Matrix hidden;
      Matrix pre2;
   };

   ResidualBlock() = default;
   explicit ResidualBlock(int width);

   int width() const noexcept { return first.in(); }

   Matrix forward(const Matrix& x, Tape* tape) const;
   Matrix backward(const Tape& tape, const Matrix& dy);

   void init(std::mt19937_64& rng);
   void append_params(std::vector<Param*>& out);
};

// ------------------------------------------------------------ MLP
//
/// Dense layers with ReLU between them (none after the last).
class Mlp final : public Module
{
 public:
   struct Tape
   {
      const Mlp* owner      = nullptr;
      std::uint64_t version = 0;
      std::vector<Matrix> inputs; // input to each layer
      std::vector<Matrix> pre;    // pre-activations of hidden layers
   };

   Mlp() = default;
   /// widths = {in, hidden..., out}
   explicit Mlp(const std::vector<int>& widths);

   const std::vector<Dense>& layers() const noexcept { return layers_; }
   std::vector<Dense>& layers() noexcept { return layers_; }
   int in() const noexcept { return layers_.front().in(); }
   int out() const noexcept { return layers_.back().out(); }

   Matrix forward(const Matrix& x, Tape* tape = nullptr) const;
   Matrix backward(const Tape& tape, const Matrix& dy, bool param_grads = true);

   void init(std::mt19937_64& rng, double head_gain);

   std::vector<Param*> params() override;
   using Module::params;

 private:
   std::vector<Dense> layers_;
};

// ------------------------------------------------------------ residual net
//
/// stem (dense + relu) -> residual blocks -> linear head
class ResidualNet final : public Module
{
 public:
   struct Tape
   {
      const ResidualNet* owner = nullptr;
      std::uint64_t version    = 0;
      Matrix input;
      Matrix stem_pre;
      std::vector<ResidualBlock::Tape> blocks;
      Matrix head_input;
   };

   ResidualNet() = default;
   ResidualNet(int in, int width, int blocks, int out);

   int in() const noexcept { return stem_.in(); }
   int out() const noexcept { return head_.out(); }
   int width() const noexcept { return stem_.out(); }
   int block_count() const noexcept { return int(blocks_.size()); }

   Dense& stem() noexcept { return stem_; }
   Dense& head() noexcept { return head_; }
   std::vector<ResidualBlock>& blocks() noexcept { return blocks_; }

   Matrix forward(const Matrix& x, Tape* tape = nullptr) const;
   Matrix backward(const Tape& tape, const Matrix& dy);

   void init(std::mt19937_64& rng, double head_gain);

   std::vector<Param*> params() override;
   using Module::params;

 private:
   Dense stem_;
   std::vector<ResidualBlock> blocks_;
   Dense head_;
};

// ------------------------------------------------------------ optimizer
//
struct AdamConfig
{
   double learning_rate = 2e-4;
   double decay         = 0.95; // multiplied into the learning rate per epoch
   double beta1         = 0.9;
   double beta2         = 0.999;
   double epsilon       = 1e-8;
};

/// Adam with bias correction and exponential per-epoch learning-rate decay.
class Adam
{
 public:
   explicit Adam(AdamConfig cfg = {});

   const AdamConfig& config() const noexcept { return cfg_; }
   long steps() const noexcept { return step_; }
   int epoch() const noexcept { return epoch_; }
   double current_learning_rate() const;

   /// Applies one update from the gradients stored in `module`. Throws
   /// DivergenceError on non-finite gradients. A step whose gradients are all
   /// exactly zero leaves parameters and moments untouched.
   void step(Module& module);
   void end_epoch() noexcept { ++epoch_; }

 private:
   AdamConfig cfg_;
   long step_  = 0;
   int epoch_  = 0;
   std::vector<Matrix> m_;
   std::vector<Matrix> v_;
};

} // namespace links::nn
