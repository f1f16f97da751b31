#include "links/flow.hpp"

#include "links/errors.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <stdexcept>

namespace links::flow {

namespace {

Matrix gather_rows(const Matrix& m, const std::vector<int>& rows)
{
   Matrix out(Eigen::Index(rows.size()), m.cols());
   for(size_t i = 0; i < rows.size(); ++i) out.row(Eigen::Index(i)) = m.row(rows[i]);
   return out;
}

void scatter_rows(Matrix& dst, const Matrix& src, const std::vector<int>& rows)
{
   for(size_t i = 0; i < rows.size(); ++i) dst.row(rows[i]) = src.row(Eigen::Index(i));
}

Matrix gather_cols(const Matrix& m, const std::vector<int>& cols, size_t begin, size_t end)
{
   Matrix out(m.rows(), Eigen::Index(end - begin));
   for(size_t i = begin; i < end; ++i) out.col(Eigen::Index(i - begin)) = m.col(cols[i]);
   return out;
}

std::vector<int> riffle(const std::vector<int>& o)
{
   const size_t n1 = o.size() / 2;
   std::vector<int> out;
   out.reserve(o.size());
   for(size_t i = 0; out.size() < o.size(); ++i) {
      if(n1 + i < o.size()) out.push_back(o[n1 + i]);
      if(i < n1) out.push_back(o[i]);
   }
   return out;
}

std::vector<int> mlp_widths(int in, const FlowConfig& cfg, int out)
{
   std::vector<int> w{in};
   for(int i = 0; i < cfg.hidden_layers; ++i) w.push_back(cfg.width);
   w.push_back(out);
   return w;
}

Json index_list(const std::vector<int>& v)
{
   return Json(v);
}

} // namespace

// ------------------------------------------------------------ coupling block
//
CouplingBlock::CouplingBlock(std::vector<int> cond, std::vector<int> active, const FlowConfig& cfg)
    : cond_(std::move(cond))
    , active_(std::move(active))
    , scale_net_(mlp_widths(int(cond_.size()), cfg, int(active_.size())))
    , shift_net_(mlp_widths(int(cond_.size()), cfg, int(active_.size())))
    , bound_(cfg.scale_bound)
{
   if(!(bound_ > 0.0)) throw std::invalid_argument("coupling: scale bound must be positive");
}

Matrix CouplingBlock::log_scale(const Matrix& cond_in, Matrix* squashed, nn::Mlp::Tape* tape) const
{
   Matrix th = (scale_net_.forward(cond_in, tape).array() / bound_).tanh().matrix();
   Matrix s  = bound_ * th;
   if(squashed) *squashed = std::move(th);
   return s;
}

Matrix CouplingBlock::forward(const Matrix& x, Eigen::RowVectorXd& log_det, Tape* tape) const
{
   const Matrix xc = gather_rows(x, cond_);
   Matrix xa       = gather_rows(x, active_);
   Matrix squashed;
   const Matrix s  = log_scale(xc, &squashed, tape ? &tape->scale_tape : nullptr);
   const Matrix t  = shift_net_.forward(xc, tape ? &tape->shift_tape : nullptr);
   Matrix es       = s.array().exp().matrix();

   Matrix z = x;
   scatter_rows(z, (xa.array() * es.array() + t.array()).matrix(), active_);
   log_det += s.colwise().sum();

   if(tape) {
      tape->active_in = std::move(xa);
      tape->squashed  = std::move(squashed);
      tape->exp_scale = std::move(es);
   }
   return z;
}

Matrix CouplingBlock::inverse(const Matrix& z, Eigen::RowVectorXd* log_det) const
{
   const Matrix zc = gather_rows(z, cond_);
   const Matrix za = gather_rows(z, active_);
   const Matrix s  = log_scale(zc, nullptr, nullptr);
   const Matrix t  = shift_net_.forward(zc);

   Matrix x = z;
   scatter_rows(x, ((za - t).array() * (-s.array()).exp()).matrix(), active_);
   if(log_det) *log_det -= s.colwise().sum();
   return x;
}

Matrix CouplingBlock::backward(const Tape& tape, const Matrix& dz, const Eigen::RowVectorXd& dlog_det,
                               bool param_grads)
{
   const Matrix dza = gather_rows(dz, active_);
   Matrix ds        = (dza.array() * tape.active_in.array() * tape.exp_scale.array()).matrix();
   ds.rowwise() += dlog_det;
   const Matrix draw = (ds.array() * (1.0 - tape.squashed.array().square())).matrix();

   Matrix dxc = gather_rows(dz, cond_);
   dxc += scale_net_.backward(tape.scale_tape, draw, param_grads);
   dxc += shift_net_.backward(tape.shift_tape, dza, param_grads);

   Matrix dx(dz.rows(), dz.cols());
   scatter_rows(dx, dxc, cond_);
   scatter_rows(dx, (dza.array() * tape.exp_scale.array()).matrix(), active_);
   return dx;
}

void CouplingBlock::append_params(std::vector<nn::Param*>& out)
{
   auto a = scale_net_.params();
   auto b = shift_net_.params();
   out.insert(out.end(), a.begin(), a.end());
   out.insert(out.end(), b.begin(), b.end());
}

// ------------------------------------------------------------ flow model
//
FlowModel::FlowModel(const FlowConfig& cfg, std::string tag)
    : cfg_(cfg)
    , tag_(std::move(tag))
    , shift_(Eigen::VectorXd::Zero(cfg.dims))
    , scale_(Eigen::VectorXd::Ones(cfg.dims))
{
   if(cfg.dims < 1 || cfg.width < 1 || cfg.hidden_layers < 0 || cfg.blocks < 1)
      throw std::invalid_argument("flow: invalid architecture");

   std::vector<int> order(size_t(cfg.dims));
   std::iota(order.begin(), order.end(), 0);
   const size_t n1 = order.size() / 2;
   for(int k = 0; k < cfg.blocks; ++k) {
      if(k > 0 && k % 2 == 0) order = riffle(order);
      std::vector<int> first(order.begin(), order.begin() + long(n1));
      std::vector<int> second(order.begin() + long(n1), order.end());
      if(k % 2 == 0)
         blocks_.emplace_back(first, second, cfg);
      else
         blocks_.emplace_back(second, first, cfg);
   }
}

void FlowModel::init(std::uint64_t seed, double head_gain)
{
   seed_      = seed;
   head_gain_ = head_gain;
   std::mt19937_64 rng(seed);
   for(auto& b : blocks_) {
      b.scale_net().init(rng, head_gain);
      b.shift_net().init(rng, head_gain);
   }
   touch();
}

void FlowModel::set_standardization(Eigen::VectorXd shift, Eigen::VectorXd scale)
{
   if(shift.size() != cfg_.dims || scale.size() != cfg_.dims)
      throw std::invalid_argument("flow: standardization size mismatch");
   if(!((scale.array() > 0.0).all()) || !scale.allFinite() || !shift.allFinite())
      throw std::invalid_argument("flow: standardization scale must be positive and finite");
   shift_ = std::move(shift);
   scale_ = std::move(scale);
   touch();
}

void FlowModel::fit_standardization(const Matrix& data)
{
   check_dims(data, "fit_standardization");
   if(data.cols() == 0) throw std::invalid_argument("flow: empty data");
   Eigen::VectorXd mean = data.rowwise().mean();
   Eigen::VectorXd sd   = ((data.colwise() - mean).array().square().rowwise().sum()
                         / double(data.cols()))
                            .sqrt();
   for(Eigen::Index i = 0; i < sd.size(); ++i)
      if(!(sd(i) > 1e-12)) sd(i) = 1.0;
   set_standardization(std::move(mean), std::move(sd));
}

void FlowModel::check_dims(const Matrix& x, const char* what) const
{
   if(x.rows() != cfg_.dims)
      throw std::invalid_argument(std::string("flow ") + what + ": expected " + std::to_string(cfg_.dims)
                                  + " dims, got " + std::to_string(x.rows()));
}

Matrix FlowModel::encode(const Matrix& x, Eigen::RowVectorXd* log_det, Tape* tape) const
{
   check_dims(x, "encode");
   Eigen::RowVectorXd ld = Eigen::RowVectorXd::Constant(x.cols(), -scale_.array().log().sum());
   Matrix z = ((x.colwise() - shift_).array().colwise() / scale_.array()).matrix();
   if(tape) {
      tape->owner   = this;
      tape->version = version();
      tape->blocks.assign(blocks_.size(), {});
   }
   for(size_t k = 0; k < blocks_.size(); ++k)
      z = blocks_[k].forward(z, ld, tape ? &tape->blocks[k] : nullptr);
   if(tape) {
      tape->latent  = z;
      tape->log_det = ld;
   }
   if(log_det) *log_det = std::move(ld);
   return z;
}

Matrix FlowModel::decode(const Matrix& z, Eigen::RowVectorXd* log_det) const
{
   check_dims(z, "decode");
   Eigen::RowVectorXd ld = Eigen::RowVectorXd::Constant(z.cols(), scale_.array().log().sum());
   Matrix x = z;
   for(size_t k = blocks_.size(); k-- > 0;) x = blocks_[k].inverse(x, &ld);
   x = ((x.array().colwise() * scale_.array()).matrix()).colwise() + shift_;
   if(log_det) *log_det = std::move(ld);
   return x;
}

Eigen::RowVectorXd standard_normal_log_density(const Matrix& z)
{
   const double norm = 0.5 * double(z.rows()) * std::log(2.0 * std::numbers::pi);
   return (-0.5 * z.array().square().colwise().sum() - norm).matrix();
}

Eigen::RowVectorXd FlowModel::log_prob(const Matrix& x, Tape* tape) const
{
   Eigen::RowVectorXd ld;
   const Matrix z        = encode(x, &ld, tape);
   Eigen::RowVectorXd lp = standard_normal_log_density(z) + ld;
   if(!lp.allFinite()) throw DivergenceError("flow '" + tag_ + "': non-finite log-likelihood");
   return lp;
}

Matrix FlowModel::backward_log_prob(const Tape& tape, const Eigen::RowVectorXd& dlog_prob,
                                    bool param_grads)
{
   if(tape.owner != this || tape.version != version() || tape.blocks.size() != blocks_.size())
      throw std::logic_error("flow: stale or mismatched tape");
   if(dlog_prob.size() != tape.latent.cols())
      throw std::invalid_argument("flow: gradient batch size mismatch");

   Matrix g = -(tape.latent.array().rowwise() * dlog_prob.array()).matrix();
   for(size_t k = blocks_.size(); k-- > 0;)
      g = blocks_[k].backward(tape.blocks[k], g, dlog_prob, param_grads);
   return (g.array().colwise() / scale_.array()).matrix();
}

std::vector<nn::Param*> FlowModel::params()
{
   std::vector<nn::Param*> out;
   for(auto& b : blocks_) b.append_params(out);
   return out;
}

Json FlowModel::to_json() const
{
   Json masks = Json::array();
   for(const auto& b : blocks_)
      masks.push_back({{"cond", index_list(b.cond())}, {"active", index_list(b.active())}});
   return Json{
       {"format_version", kCheckpointFormatVersion},
       {"kind", "flow"},
       {"architecture",
        {{"dims", cfg_.dims},
         {"width", cfg_.width},
         {"hidden_layers", cfg_.hidden_layers},
         {"blocks", cfg_.blocks},
         {"scale_bound", cfg_.scale_bound},
         {"scale_squash", "bound*tanh(raw/bound)"},
         {"tag", tag_}}},
       {"masks", std::move(masks)},
       {"standardization",
        {{"shift", std::vector<double>(shift_.data(), shift_.data() + shift_.size())},
         {"scale", std::vector<double>(scale_.data(), scale_.data() + scale_.size())}}},
       {"init", {{"scheme", "kaiming_uniform"}, {"head_gain", head_gain_}, {"seed", seed_}}},
       {"params", params_to_json(*this)}};
}

FlowModel FlowModel::from_json(const Json& j)
{
   check_header(j, "flow");
   try {
      const auto& a = j.at("architecture");
      FlowConfig cfg;
      cfg.dims          = a.at("dims").get<int>();
      cfg.width         = a.at("width").get<int>();
      cfg.hidden_layers = a.at("hidden_layers").get<int>();
      cfg.blocks        = a.at("blocks").get<int>();
      cfg.scale_bound   = a.at("scale_bound").get<double>();
      FlowModel f(cfg, a.at("tag").get<std::string>());

      const auto& masks = j.at("masks");
      if(masks.size() != f.blocks_.size()) throw DataError("flow checkpoint: mask count mismatch");
      for(size_t k = 0; k < masks.size(); ++k) {
         const auto cond   = masks[k].at("cond").get<std::vector<int>>();
         const auto active = masks[k].at("active").get<std::vector<int>>();
         if(cond.size() != f.blocks_[k].cond().size() || active.size() != f.blocks_[k].active().size())
            throw DataError("flow checkpoint: mask shape mismatch");
         std::vector<int> all = cond;
         all.insert(all.end(), active.begin(), active.end());
         std::sort(all.begin(), all.end());
         for(int i = 0; i < cfg.dims; ++i)
            if(all[size_t(i)] != i) throw DataError("flow checkpoint: mask is not a partition");
         f.blocks_[k] = CouplingBlock(cond, active, cfg);
      }
      const auto& st = j.at("standardization");
      const auto sh  = st.at("shift").get<std::vector<double>>();
      const auto sc  = st.at("scale").get<std::vector<double>>();
      f.set_standardization(Eigen::Map<const Eigen::VectorXd>(sh.data(), Eigen::Index(sh.size())),
                            Eigen::Map<const Eigen::VectorXd>(sc.data(), Eigen::Index(sc.size())));
      f.seed_      = j.at("init").at("seed").get<std::uint64_t>();
      f.head_gain_ = j.at("init").at("head_gain").get<double>();
      params_from_json(f, j.at("params"));
      return f;
   } catch(const Json::exception& e) {
      throw DataError(std::string("flow checkpoint: ") + e.what());
   } catch(const std::invalid_argument& e) {
      throw DataError(std::string("flow checkpoint: ") + e.what());
   }
}

// ------------------------------------------------------------ sampling
//
Matrix sample_perturbed(const FlowModel& flow, const Matrix& x, double sigma, std::mt19937_64& rng)
{
   if(sigma < 0.0) throw std::invalid_argument("sample_perturbed: sigma must be non-negative");
   Matrix z = flow.encode(x);
   std::normal_distribution<double> gauss(0.0, 1.0);
   for(Eigen::Index j = 0; j < z.cols(); ++j)
      for(Eigen::Index i = 0; i < z.rows(); ++i) z(i, j) += sigma * z(i, j) * gauss(rng);
   return flow.decode(z);
}

Matrix sample_unconditioned(const FlowModel& flow, int count, std::mt19937_64& rng)
{
   std::normal_distribution<double> gauss(0.0, 1.0);
   Matrix z(flow.dims(), count);
   for(Eigen::Index j = 0; j < z.cols(); ++j)
      for(Eigen::Index i = 0; i < z.rows(); ++i) z(i, j) = gauss(rng);
   return flow.decode(z);
}

// ------------------------------------------------------------ training
//
FlowTrainResult train_flow(FlowModel& flow, const Matrix& data, const FlowTrainConfig& cfg,
                           const FullPoseSampler* sampler,
                           const std::function<void(const FlowEpoch&)>& on_epoch)
{
   if(data.rows() != flow.dims()) throw std::invalid_argument("train_flow: data dims mismatch");
   if(cfg.batch < 1 || cfg.epochs < 0) throw std::invalid_argument("train_flow: invalid schedule");
   if(!(cfg.noise >= 0.0)) throw std::invalid_argument("train_flow: noise must be non-negative");
   if(sampler) {
      if(!sampler->full || !sampler->full_data || sampler->full_data->cols() != data.cols()
         || int(sampler->rows.size()) != flow.dims())
         throw std::invalid_argument("train_flow: inconsistent sampler source");
   }

   FlowTrainResult result;
   const auto n = size_t(data.cols());
   if(cfg.epochs == 0 || n == 0) return result;

   std::mt19937_64 rng(cfg.seed);
   nn::Adam adam(cfg.adam);
   std::vector<int> order(n);
   std::iota(order.begin(), order.end(), 0);

   for(int epoch = 1; epoch <= cfg.epochs; ++epoch) {
      std::shuffle(order.begin(), order.end(), rng);
      FlowEpoch rec;
      rec.epoch         = epoch;
      rec.learning_rate = adam.current_learning_rate();
      double loss_sum = 0.0, real_sum = 0.0;
      int batches = 0;

      for(size_t begin = 0; begin < n; begin += size_t(cfg.batch)) {
         const size_t end = std::min(n, begin + size_t(cfg.batch));
         Matrix x         = gather_cols(data, order, begin, end);
         const double bn  = double(end - begin);
         if(cfg.noise > 0.0) {
            std::normal_distribution<double> g(0.0, cfg.noise);
            for(Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] += g(rng);
         }

         flow.zero_grad();
         FlowModel::Tape tape;
         const Eigen::RowVectorXd lp = flow.log_prob(x, &tape);
         flow.backward_log_prob(tape, Eigen::RowVectorXd::Constant(x.cols(), -1.0 / bn));
         double loss = -lp.sum() / bn;
         real_sum += -lp.sum() / bn;

         if(cfg.sampling) {
            Matrix xs;
            if(sampler) {
               const Matrix full = gather_cols(*sampler->full_data, order, begin, end);
               xs = gather_rows(sample_perturbed(*sampler->full, full, cfg.sigma, rng), sampler->rows);
            } else {
               xs = sample_perturbed(flow, x, cfg.sigma, rng);
            }
            if(!xs.allFinite()) throw DivergenceError("flow '" + flow.tag() + "': non-finite samples");
            FlowModel::Tape stape;
            const Eigen::RowVectorXd lps = flow.log_prob(xs, &stape);
            flow.backward_log_prob(stape, Eigen::RowVectorXd::Constant(xs.cols(), -1.0 / bn));
            loss -= lps.sum() / bn;
         }
         if(!std::isfinite(loss))
            throw DivergenceError("flow '" + flow.tag() + "': loss diverged at epoch "
                                  + std::to_string(epoch));
         adam.step(flow);
         loss_sum += loss;
         ++batches;
      }
      adam.end_epoch();
      rec.loss     = loss_sum / double(batches);
      rec.nll_real = real_sum / double(batches);
      result.trace.push_back(rec);
      if(on_epoch) on_epoch(rec);
   }
   result.steps = adam.steps();
   return result;
}

// ------------------------------------------------------------ pose plumbing
//
std::vector<int> flow_joints(const SkeletonTopology& topo, const std::string& tag)
{
   if(tag == "full") return topo.non_root_joints();
   return topo.segment(segment_from_string(tag));
}

std::vector<int> flat_rows(const std::vector<int>& full_joints, const std::vector<int>& joints)
{
   std::vector<int> rows;
   for(int j : joints) {
      const auto it = std::find(full_joints.begin(), full_joints.end(), j);
      if(it == full_joints.end()) throw std::invalid_argument("flat_rows: joint not in full set");
      const int k = int(it - full_joints.begin());
      rows.push_back(2 * k);
      rows.push_back(2 * k + 1);
   }
   return rows;
}

Matrix flatten_poses(const std::vector<Pose2D>& poses, const std::vector<int>& joints)
{
   Matrix out(Eigen::Index(2 * joints.size()), Eigen::Index(poses.size()));
   for(size_t p = 0; p < poses.size(); ++p)
      for(size_t k = 0; k < joints.size(); ++k) {
         out(Eigen::Index(2 * k), Eigen::Index(p))     = poses[p](joints[k], 0);
         out(Eigen::Index(2 * k + 1), Eigen::Index(p)) = poses[p](joints[k], 1);
      }
   return out;
}

Pose2D unflatten_pose(const Eigen::VectorXd& column, const std::vector<int>& joints, int joint_count)
{
   if(column.size() != Eigen::Index(2 * joints.size()))
      throw std::invalid_argument("unflatten_pose: size mismatch");
   Pose2D out = Pose2D::Zero(joint_count, 2);
   for(size_t k = 0; k < joints.size(); ++k) {
      out(joints[k], 0) = column(Eigen::Index(2 * k));
      out(joints[k], 1) = column(Eigen::Index(2 * k + 1));
   }
   return out;
}

} // namespace links::flow
