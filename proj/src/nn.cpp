#include "links/nn.hpp"

#include "links/errors.hpp"

#include <cmath>
#include <stdexcept>

namespace links::nn {

std::vector<const Param*> Module::params() const
{
   auto ps = const_cast<Module*>(this)->params();
   return {ps.begin(), ps.end()};
}

void Module::zero_grad()
{
   for(auto* p : params()) p->grad.setZero();
}

std::size_t Module::parameter_count() const
{
   std::size_t n = 0;
   for(const auto* p : params()) n += std::size_t(p->value.size());
   return n;
}

void kaiming_uniform(Matrix& w, double gain, std::mt19937_64& rng)
{
   if(w.size() == 0) return;
   const double bound = gain * std::sqrt(6.0 / double(w.cols()));
   std::uniform_real_distribution<double> dist(-bound, bound);
   for(Eigen::Index j = 0; j < w.cols(); ++j)
      for(Eigen::Index i = 0; i < w.rows(); ++i) w(i, j) = dist(rng);
}

// ------------------------------------------------------------ dense
//
Dense::Dense(int in, int out)
    : weights(out, in)
    , biases(out, 1)
{}

Matrix Dense::forward(const Matrix& x) const
{
   if(x.rows() != in())
      throw std::invalid_argument("dense: input width " + std::to_string(x.rows())
                                  + " != " + std::to_string(in()));
   Matrix y = weights.value * x;
   y.colwise() += biases.value.col(0);
   return y;
}

Matrix Dense::backward(const Matrix& x, const Matrix& dy, bool param_grads)
{
   if(param_grads) {
      weights.grad.noalias() += dy * x.transpose();
      biases.grad.col(0) += dy.rowwise().sum();
   }
   return weights.value.transpose() * dy;
}

void Dense::init(Init scheme, double gain, std::mt19937_64& rng)
{
   biases.value.setZero();
   if(scheme == Init::zero || gain == 0.0)
      weights.value.setZero();
   else
      kaiming_uniform(weights.value, gain, rng);
}

void Dense::append_params(std::vector<Param*>& out)
{
   out.push_back(&weights);
   out.push_back(&biases);
}

Matrix relu(const Matrix& x)
{
   return x.cwiseMax(0.0);
}

Matrix relu_backward(const Matrix& pre, const Matrix& dy)
{
   return (pre.array() > 0.0).select(dy, 0.0);
}

// ------------------------------------------------------------ residual block
//
ResidualBlock::ResidualBlock(int width)
    : first(width, width)
    , second(width, width)
{}

Matrix ResidualBlock::forward(const Matrix& x, Tape* tape) const
{
   Matrix pre1   = first.forward(x);
   Matrix hidden = relu(pre1);
   Matrix pre2   = second.forward(hidden);
   Matrix y      = x + relu(pre2);
   if(tape) {
      tape->input  = x;
      tape->pre1   = std::move(pre1);
      tape->hidden = std::move(hidden);
      tape->pre2   = std::move(pre2);
   }
   return y;
}

Matrix ResidualBlock::backward(const Tape& tape, const Matrix& dy)
{
   const Matrix d2 = relu_backward(tape.pre2, dy);
   const Matrix dh = second.backward(tape.hidden, d2);
   const Matrix d1 = relu_backward(tape.pre1, dh);
   return dy + first.backward(tape.input, d1);
}

void ResidualBlock::init(std::mt19937_64& rng)
{
   first.init(Init::kaiming_uniform, 1.0, rng);
   second.init(Init::kaiming_uniform, 1.0, rng);
}

void ResidualBlock::append_params(std::vector<Param*>& out)
{
   first.append_params(out);
   second.append_params(out);
}

// ------------------------------------------------------------ MLP
//
Mlp::Mlp(const std::vector<int>& widths)
{
   if(widths.size() < 2) throw std::invalid_argument("mlp: need at least input and output widths");
   for(size_t i = 0; i + 1 < widths.size(); ++i) layers_.emplace_back(widths[i], widths[i + 1]);
}

Matrix Mlp::forward(const Matrix& x, Tape* tape) const
{
   if(tape) {
      tape->owner   = this;
      tape->version = version();
      tape->inputs.clear();
      tape->pre.clear();
   }
   Matrix h = x;
   for(size_t i = 0; i < layers_.size(); ++i) {
      Matrix a = layers_[i].forward(h);
      if(tape) tape->inputs.push_back(std::move(h));
      if(i + 1 == layers_.size()) return a;
      h = relu(a);
      if(tape) tape->pre.push_back(std::move(a));
   }
   return h;
}

Matrix Mlp::backward(const Tape& tape, const Matrix& dy, bool param_grads)
{
   if(tape.owner != this || tape.version != version() || tape.inputs.size() != layers_.size())
      throw std::logic_error("mlp: stale or mismatched tape");
   Matrix g = dy;
   for(size_t i = layers_.size(); i-- > 0;) {
      if(i + 1 < layers_.size()) g = relu_backward(tape.pre[i], g);
      g = layers_[i].backward(tape.inputs[i], g, param_grads);
   }
   return g;
}

void Mlp::init(std::mt19937_64& rng, double head_gain)
{
   for(size_t i = 0; i + 1 < layers_.size(); ++i) layers_[i].init(Init::kaiming_uniform, 1.0, rng);
   layers_.back().init(Init::kaiming_uniform, head_gain, rng);
   touch();
}

std::vector<Param*> Mlp::params()
{
   std::vector<Param*> out;
   for(auto& l : layers_) l.append_params(out);
   return out;
}

// ------------------------------------------------------------ residual net
//
ResidualNet::ResidualNet(int in, int width, int blocks, int out)
    : stem_(in, width)
    , blocks_(size_t(blocks), ResidualBlock(width))
    , head_(width, out)
{}

Matrix ResidualNet::forward(const Matrix& x, Tape* tape) const
{
   Matrix pre = stem_.forward(x);
   Matrix h   = relu(pre);
   if(tape) {
      tape->owner    = this;
      tape->version  = version();
      tape->input    = x;
      tape->stem_pre = std::move(pre);
      tape->blocks.assign(blocks_.size(), {});
   }
   for(size_t i = 0; i < blocks_.size(); ++i)
      h = blocks_[i].forward(h, tape ? &tape->blocks[i] : nullptr);
   Matrix y = head_.forward(h);
   if(tape) tape->head_input = std::move(h);
   return y;
}

Matrix ResidualNet::backward(const Tape& tape, const Matrix& dy)
{
   if(tape.owner != this || tape.version != version() || tape.blocks.size() != blocks_.size())
      throw std::logic_error("residual net: stale or mismatched tape");
   Matrix g = head_.backward(tape.head_input, dy);
   for(size_t i = blocks_.size(); i-- > 0;) g = blocks_[i].backward(tape.blocks[i], g);
   g = relu_backward(tape.stem_pre, g);
   return stem_.backward(tape.input, g);
}

void ResidualNet::init(std::mt19937_64& rng, double head_gain)
{
   stem_.init(Init::kaiming_uniform, 1.0, rng);
   for(auto& b : blocks_) b.init(rng);
   head_.init(Init::kaiming_uniform, head_gain, rng);
   touch();
}

std::vector<Param*> ResidualNet::params()
{
   std::vector<Param*> out;
   stem_.append_params(out);
   for(auto& b : blocks_) b.append_params(out);
   head_.append_params(out);
   return out;
}

// ------------------------------------------------------------ optimizer
//
Adam::Adam(AdamConfig cfg)
    : cfg_(cfg)
{
   if(!(cfg_.learning_rate > 0.0) || !(cfg_.decay > 0.0) || !(cfg_.epsilon > 0.0))
      throw std::invalid_argument("adam: learning rate, decay and epsilon must be positive");
}

double Adam::current_learning_rate() const
{
   return cfg_.learning_rate * std::pow(cfg_.decay, double(epoch_));
}

void Adam::step(Module& module)
{
   auto ps = module.params();
   if(m_.empty()) {
      for(auto* p : ps) {
         m_.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
         v_.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
      }
   }
   if(m_.size() != ps.size()) throw std::invalid_argument("adam: parameter set changed");

   bool any = false;
   for(size_t i = 0; i < ps.size(); ++i) {
      if(ps[i]->grad.rows() != m_[i].rows() || ps[i]->grad.cols() != m_[i].cols())
         throw std::invalid_argument("adam: parameter shape changed");
      if(!ps[i]->grad.allFinite()) throw DivergenceError("adam: non-finite gradient");
      any = any || (ps[i]->grad.array() != 0.0).any();
   }
   if(!any) return;

   ++step_;
   const double lr  = current_learning_rate();
   const double bc1 = 1.0 - std::pow(cfg_.beta1, double(step_));
   const double bc2 = 1.0 - std::pow(cfg_.beta2, double(step_));
   for(size_t i = 0; i < ps.size(); ++i) {
      const auto g = ps[i]->grad.array();
      m_[i]        = cfg_.beta1 * m_[i].array() + (1.0 - cfg_.beta1) * g;
      v_[i]        = cfg_.beta2 * v_[i].array() + (1.0 - cfg_.beta2) * g.square();
      ps[i]->value.array()
          -= lr * (m_[i].array() / bc1) / ((v_[i].array() / bc2).sqrt() + cfg_.epsilon);
   }
   module.touch();
}

} // namespace links::nn
