#include "network.hpp"

#include <cmath>

#include "rng.hpp"

namespace inrc {

namespace {

constexpr double kBnEps = 1e-5;
constexpr double kBnMomentum = 0.1;

Eigen::MatrixXd act_value(Activation a, double omega, const Eigen::MatrixXd& q) {
  switch (a) {
    case Activation::relu: return q.cwiseMax(0.0);
    case Activation::tanh_fn: return q.array().tanh();
    case Activation::sine: return (omega * q.array()).sin();
    case Activation::none: return q;
  }
  fail(Errc::internal, "unknown activation");
}

Eigen::MatrixXd act_prime(Activation a, double omega, const Eigen::MatrixXd& q) {
  switch (a) {
    case Activation::relu: return (q.array() > 0.0).cast<double>();
    case Activation::tanh_fn: return 1.0 - q.array().tanh().square();
    case Activation::sine: return omega * (omega * q.array()).cos();
    case Activation::none: return Eigen::MatrixXd::Ones(q.rows(), q.cols());
  }
  fail(Errc::internal, "unknown activation");
}

// Second derivative; relu uses the a.e. convention (0 everywhere).
Eigen::MatrixXd act_second(Activation a, double omega, const Eigen::MatrixXd& q) {
  switch (a) {
    case Activation::relu:
    case Activation::none:
      return Eigen::MatrixXd::Zero(q.rows(), q.cols());
    case Activation::tanh_fn: {
      Eigen::ArrayXXd t = q.array().tanh();
      return -2.0 * t * (1.0 - t.square());
    }
    case Activation::sine: return -omega * omega * (omega * q.array()).sin();
  }
  fail(Errc::internal, "unknown activation");
}

bool act_has_curvature(Activation a) {
  return a == Activation::tanh_fn || a == Activation::sine;
}

} // namespace

Activation activation_from_string(const std::string& s) {
  if (s == "relu") return Activation::relu;
  if (s == "tanh") return Activation::tanh_fn;
  if (s == "sine") return Activation::sine;
  if (s == "none") return Activation::none;
  fail(Errc::invalid_argument, "unknown activation '" + s + "' (expected relu|tanh|sine)");
}

std::string to_string(Activation a) {
  switch (a) {
    case Activation::relu: return "relu";
    case Activation::tanh_fn: return "tanh";
    case Activation::sine: return "sine";
    case Activation::none: return "none";
  }
  return "?";
}

const std::vector<std::string>& preset_names() {
  static const std::vector<std::string> names = {
      "default",       "default-BN",    "default-L",  "skip-double", "skip-L-double",
      "skip-XL-double", "skip-ten",     "skip-ten-only", "skip-twenty"};
  return names;
}

ArchPreset arch_preset(const std::string& name) {
  using K = LayerKind;
  ArchPreset p;
  p.name = name;
  if (name == "default") {
    p.blocks = {{K::fc, 256, 1}, {K::fc, 128, 1}, {K::fc, 64, 1}};
  } else if (name == "default-BN") {
    p.blocks = {{K::fc_bn, 256, 1}, {K::fc_bn, 128, 1}, {K::fc_bn, 64, 1}};
  } else if (name == "default-L") {
    p.blocks = {{K::fc, 1024, 1}, {K::fc, 512, 1}, {K::fc, 256, 1}, {K::fc, 128, 1}, {K::fc, 64, 1}};
  } else if (name == "skip-double") {
    p.blocks = {{K::fc_skip, 512, 2}, {K::fc_skip, 256, 2}, {K::fc_skip, 128, 1}, {K::fc_skip, 64, 1}};
  } else if (name == "skip-L-double") {
    p.blocks = {{K::fc_skip, 1024, 2}, {K::fc_skip, 512, 2}, {K::fc_skip, 256, 2},
                {K::fc_skip, 128, 2},  {K::fc_skip, 64, 2}};
  } else if (name == "skip-XL-double") {
    p.blocks = {{K::fc_skip, 1024, 4}, {K::fc_skip, 512, 4}, {K::fc_skip, 256, 3},
                {K::fc_skip, 128, 2},  {K::fc_skip, 64, 2}};
  } else if (name == "skip-ten") {
    p.blocks = {{K::fc_skip, 512, 10}, {K::fc_skip, 256, 1}, {K::fc_skip, 128, 1}, {K::fc_skip, 64, 1}};
  } else if (name == "skip-ten-only") {
    p.blocks = {{K::fc_skip, 256, 10}};
  } else if (name == "skip-twenty") {
    p.blocks = {{K::fc_skip, 256, 20}, {K::fc_skip, 128, 2}, {K::fc_skip, 64, 2}};
  } else {
    fail(Errc::invalid_argument, "unknown architecture preset '" + name + "'");
  }
  return p;
}

std::size_t FieldModel::param_count() const {
  std::size_t n = 0;
  for (const auto& l : layers) {
    n += static_cast<std::size_t>(l.W.size()) + static_cast<std::size_t>(l.b.size());
    if (l.has_bn()) n += 2 * static_cast<std::size_t>(l.gamma.size());
  }
  return n;
}

namespace {

// Flat parameter ordering: per layer W (row-major), b, then gamma, beta.
template <typename ModelT, typename Fn>
bool locate_param(ModelT& model, std::size_t i, Fn&& fn) {
  for (auto& l : model.layers) {
    const std::size_t nw = static_cast<std::size_t>(l.W.size());
    if (i < nw) {
      fn(l.W(static_cast<Eigen::Index>(i / l.W.cols()), static_cast<Eigen::Index>(i % l.W.cols())));
      return true;
    }
    i -= nw;
    const std::size_t nb = static_cast<std::size_t>(l.b.size());
    if (i < nb) {
      fn(l.b(static_cast<Eigen::Index>(i)));
      return true;
    }
    i -= nb;
    if (l.has_bn()) {
      const std::size_t ng = static_cast<std::size_t>(l.gamma.size());
      if (i < ng) {
        fn(l.gamma(static_cast<Eigen::Index>(i)));
        return true;
      }
      i -= ng;
      if (i < ng) {
        fn(l.beta(static_cast<Eigen::Index>(i)));
        return true;
      }
      i -= ng;
    }
  }
  return false;
}

struct GradsLayersView {
  std::vector<GradsLayerProxy>* layers;
};

} // namespace

double FieldModel::param(std::size_t i) const {
  double v = 0.0;
  if (!locate_param(*this, i, [&](const double& p) { v = p; }))
    fail(Errc::invalid_argument, "parameter index out of range");
  return v;
}

void FieldModel::set_param(std::size_t i, double v) {
  if (!locate_param(*this, i, [&](double& p) { p = v; }))
    fail(Errc::invalid_argument, "parameter index out of range");
}

void Grads::set_zero() {
  for (auto& l : layers) {
    l.dW.setZero();
    l.db.setZero();
    if (l.dgamma.size()) l.dgamma.setZero();
    if (l.dbeta.size()) l.dbeta.setZero();
  }
}

void Grads::add(const Grads& other) {
  for (std::size_t i = 0; i < layers.size(); ++i) {
    layers[i].dW += other.layers[i].dW;
    layers[i].db += other.layers[i].db;
    if (layers[i].dgamma.size()) layers[i].dgamma += other.layers[i].dgamma;
    if (layers[i].dbeta.size()) layers[i].dbeta += other.layers[i].dbeta;
  }
}

bool Grads::all_finite() const {
  for (const auto& l : layers) {
    if (!l.dW.allFinite() || !l.db.allFinite()) return false;
    if (l.dgamma.size() && !l.dgamma.allFinite()) return false;
    if (l.dbeta.size() && !l.dbeta.allFinite()) return false;
  }
  return true;
}

double Grads::param(std::size_t i) const {
  for (const auto& l : layers) {
    const std::size_t nw = static_cast<std::size_t>(l.dW.size());
    if (i < nw)
      return l.dW(static_cast<Eigen::Index>(i / l.dW.cols()), static_cast<Eigen::Index>(i % l.dW.cols()));
    i -= nw;
    const std::size_t nb = static_cast<std::size_t>(l.db.size());
    if (i < nb) return l.db(static_cast<Eigen::Index>(i));
    i -= nb;
    if (l.dgamma.size()) {
      const std::size_t ng = static_cast<std::size_t>(l.dgamma.size());
      if (i < ng) return l.dgamma(static_cast<Eigen::Index>(i));
      i -= ng;
      if (i < ng) return l.dbeta(static_cast<Eigen::Index>(i));
      i -= ng;
    }
  }
  fail(Errc::invalid_argument, "gradient index out of range");
}

Grads make_zero_grads(const FieldModel& model) {
  Grads g;
  g.layers.resize(model.layers.size());
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    const Layer& l = model.layers[i];
    g.layers[i].dW = Eigen::MatrixXd::Zero(l.W.rows(), l.W.cols());
    g.layers[i].db = Eigen::VectorXd::Zero(l.b.size());
    if (l.has_bn()) {
      g.layers[i].dgamma = Eigen::VectorXd::Zero(l.gamma.size());
      g.layers[i].dbeta = Eigen::VectorXd::Zero(l.beta.size());
    }
  }
  return g;
}

FieldModel assemble_model(Encoding encoding, std::vector<Layer> layers, Activation hidden_act,
                          double siren_scale, std::string preset_name) {
  if (layers.empty()) fail(Errc::invalid_argument, "model needs at least the output layer");
  if (hidden_act == Activation::sine && !(siren_scale > 0.0))
    fail(Errc::invalid_argument, "siren scale must be positive");
  int cur = encoding.output_dim();
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const Layer& l = layers[i];
    if (l.in_dim() != cur)
      fail(Errc::invalid_argument, "layer " + std::to_string(i) + ": input width " +
                                       std::to_string(l.in_dim()) + " != " + std::to_string(cur));
    if (l.kind == LayerKind::fc_skip && l.in_dim() != l.out_dim())
      fail(Errc::invalid_argument, "layer " + std::to_string(i) + ": skip layers need equal widths");
    if (l.b.size() != l.out_dim())
      fail(Errc::invalid_argument, "layer " + std::to_string(i) + ": bias width mismatch");
    if (l.has_bn() && (l.gamma.size() != l.out_dim() || l.beta.size() != l.out_dim()))
      fail(Errc::invalid_argument, "layer " + std::to_string(i) + ": batch-norm width mismatch");
    cur = l.out_dim();
  }
  if (cur != 1) fail(Errc::invalid_argument, "model must end in a single output unit");
  if (layers.back().act != Activation::none)
    fail(Errc::invalid_argument, "the output layer carries no activation");

  FieldModel m;
  m.encoding = std::move(encoding);
  m.layers = std::move(layers);
  m.hidden_act = hidden_act;
  m.siren_scale = siren_scale;
  m.preset_name = std::move(preset_name);
  return m;
}

FieldModel build_model(const ArchPreset& preset, Encoding encoding, Activation hidden_act,
                       double siren_scale, std::uint64_t seed) {
  if (hidden_act == Activation::none)
    fail(Errc::invalid_argument, "hidden activation must be relu, tanh or sine");
  if (hidden_act == Activation::sine && !(siren_scale > 0.0))
    fail(Errc::invalid_argument, "siren scale must be positive");

  struct Planned {
    LayerKind kind;
    int in, out;
    Activation act;
  };
  std::vector<Planned> plan;
  int cur = encoding.output_dim();
  for (const auto& block : preset.blocks) {
    if (block.kind == LayerKind::fc_skip && cur != block.width) {
      plan.push_back({LayerKind::fc, cur, block.width, hidden_act}); // width transition
      cur = block.width;
    }
    for (int i = 0; i < block.count; ++i) {
      plan.push_back({block.kind, cur, block.width, hidden_act});
      cur = block.width;
    }
  }
  plan.push_back({LayerKind::fc, cur, 1, Activation::none});

  Rng rng(mix_seed(seed, 0x4e4554)); // "NET"
  std::vector<Layer> layers;
  layers.reserve(plan.size());
  for (std::size_t idx = 0; idx < plan.size(); ++idx) {
    const auto& p = plan[idx];
    Layer l;
    l.kind = p.kind;
    l.act = p.act;
    l.W.resize(p.out, p.in);
    l.b = Eigen::VectorXd::Zero(p.out);

    const double fan_in = static_cast<double>(p.in);
    double bound;
    if (hidden_act == Activation::sine) {
      // SIREN contract: first layer U(+-1/fan_in), the rest U(+-sqrt(6/fan_in)/omega)
      bound = idx == 0 ? 1.0 / fan_in : std::sqrt(6.0 / fan_in) / siren_scale;
    } else if (p.act == Activation::relu) {
      bound = std::sqrt(6.0 / fan_in);
    } else if (p.act == Activation::tanh_fn) {
      bound = (5.0 / 3.0) * std::sqrt(3.0 / fan_in);
    } else {
      bound = std::sqrt(3.0 / fan_in); // output layer, gain 1
    }
    for (int r = 0; r < p.out; ++r)
      for (int c = 0; c < p.in; ++c) l.W(r, c) = rng.uniform(-bound, bound);
    if (hidden_act == Activation::sine) {
      const double bbound = 1.0 / std::sqrt(fan_in);
      for (int r = 0; r < p.out; ++r) l.b(r) = rng.uniform(-bbound, bbound);
    }
    if (l.has_bn()) {
      l.gamma = Eigen::VectorXd::Ones(p.out);
      l.beta = Eigen::VectorXd::Zero(p.out);
      l.run_mean = Eigen::VectorXd::Zero(p.out);
      l.run_var = Eigen::VectorXd::Ones(p.out);
    }
    layers.push_back(std::move(l));
  }
  return assemble_model(std::move(encoding), std::move(layers), hidden_act, siren_scale, preset.name);
}

namespace {

// Shared forward core. `update` non-null in training mode to refresh BN
// running statistics.
Tape forward_impl(const FieldModel& model, const Eigen::MatrixXd& X, bool training,
                  FieldModel* update) {
  if (X.rows() != model.input_dim())
    fail(Errc::invalid_argument, "forward: input dimension " + std::to_string(X.rows()) +
                                     " != model dimension " + std::to_string(model.input_dim()));
  const std::size_t L = model.layers.size();
  Tape tape;
  tape.training = training;
  tape.feat = model.encoding.encode_batch(X);
  tape.z.resize(L);
  tape.q.resize(L);
  tape.h.resize(L);
  tape.bn_mean.resize(L);
  tape.bn_var.resize(L);

  const Eigen::MatrixXd* a = &tape.feat;
  const double omega = model.siren_scale;
  for (std::size_t l = 0; l < L; ++l) {
    const Layer& layer = model.layers[l];
    Eigen::MatrixXd z = (layer.W * (*a)).colwise() + layer.b;
    const Eigen::MatrixXd* pre = &z;
    Eigen::MatrixXd q;
    if (layer.has_bn()) {
      Eigen::VectorXd mean, var;
      if (training) {
        mean = z.rowwise().mean();
        Eigen::MatrixXd centered = z.colwise() - mean;
        var = centered.array().square().rowwise().mean();
        if (update) {
          const double n = static_cast<double>(z.cols());
          const double unbias = n > 1.0 ? n / (n - 1.0) : 1.0;
          Layer& ml = update->layers[l];
          ml.run_mean = (1.0 - kBnMomentum) * ml.run_mean + kBnMomentum * mean;
          ml.run_var = (1.0 - kBnMomentum) * ml.run_var + kBnMomentum * (unbias * var);
        }
      } else {
        mean = layer.run_mean;
        var = layer.run_var;
      }
      const Eigen::ArrayXd scale = layer.gamma.array() / (var.array() + kBnEps).sqrt();
      q = (((z.colwise() - mean).array().colwise() * scale).colwise() + layer.beta.array()).matrix();
      tape.bn_mean[l] = std::move(mean);
      tape.bn_var[l] = std::move(var);
      pre = &q;
    }
    Eigen::MatrixXd h = act_value(layer.act, omega, *pre);
    if (layer.kind == LayerKind::fc_skip) h += *a;
    if (!h.allFinite())
      fail(Errc::numeric, "non-finite activation at layer " + std::to_string(l));
    tape.z[l] = std::move(z);
    if (layer.has_bn()) tape.q[l] = std::move(q);
    tape.h[l] = std::move(h);
    a = &tape.h[l];
  }
  return tape;
}

inline const Eigen::MatrixXd& layer_input(const Tape& tape, std::size_t l) {
  return l == 0 ? tape.feat : tape.h[l - 1];
}

inline const Eigen::MatrixXd& layer_preact(const FieldModel& model, const Tape& tape, std::size_t l) {
  return model.layers[l].has_bn() ? tape.q[l] : tape.z[l];
}

} // namespace

Tape forward_batch(FieldModel& model, const Eigen::MatrixXd& X, bool training) {
  return forward_impl(model, X, training, training ? &model : nullptr);
}

Tape forward_batch_eval(const FieldModel& model, const Eigen::MatrixXd& X) {
  return forward_impl(model, X, false, nullptr);
}

double forward_point(const FieldModel& model, const Eigen::VectorXd& v) {
  return forward_batch_eval(model, v).output()(0, 0);
}

void backward_params(const FieldModel& model, const Tape& tape,
                     const Eigen::RowVectorXd& upstream, Grads& out) {
  const std::size_t L = model.layers.size();
  if (tape.h.size() != L) fail(Errc::invalid_argument, "stale tape: layer count mismatch");
  if (upstream.cols() != tape.batch_size())
    fail(Errc::invalid_argument, "upstream width does not match tape batch");

  const double omega = model.siren_scale;
  Eigen::MatrixXd G = upstream; // dL/dh for the current layer, out x B
  for (std::size_t li = L; li-- > 0;) {
    const Layer& layer = model.layers[li];
    const Eigen::MatrixXd& a = layer_input(tape, li);
    const Eigen::MatrixXd& pre = layer_preact(model, tape, li);

    Eigen::MatrixXd dq = act_prime(layer.act, omega, pre).cwiseProduct(G);
    Eigen::MatrixXd dz;
    if (layer.has_bn()) {
      const Eigen::ArrayXd inv_std = 1.0 / (tape.bn_var[li].array() + kBnEps).sqrt();
      Eigen::MatrixXd xhat =
          ((tape.z[li].colwise() - tape.bn_mean[li]).array().colwise() * inv_std).matrix();
      out.layers[li].dgamma += (dq.array() * xhat.array()).rowwise().sum().matrix();
      out.layers[li].dbeta += dq.rowwise().sum();
      Eigen::MatrixXd dxhat = (dq.array().colwise() * layer.gamma.array()).matrix();
      if (tape.training) {
        // batch statistics are functions of z: standard batch-norm backward
        Eigen::VectorXd m1 = dxhat.rowwise().mean();
        Eigen::VectorXd m2 = (dxhat.array() * xhat.array()).rowwise().mean().matrix();
        dz = (((dxhat.colwise() - m1).array() - xhat.array().colwise() * m2.array())
                  .colwise() * inv_std)
                 .matrix();
      } else {
        dz = (dxhat.array().colwise() * inv_std).matrix();
      }
    } else {
      dz = std::move(dq);
    }

    out.layers[li].dW += dz * a.transpose();
    out.layers[li].db += dz.rowwise().sum();
    Eigen::MatrixXd Gn = layer.W.transpose() * dz;
    if (layer.kind == LayerKind::fc_skip) Gn += G;
    G = std::move(Gn);
  }
}

TangentTape forward_with_input_grad(const FieldModel& model, const Eigen::MatrixXd& X,
                                    std::span<const int> dirs, bool batch_stats) {
  const int d = model.input_dim();
  for (int k : dirs)
    if (k < 0 || k >= d) fail(Errc::invalid_argument, "input-gradient direction out of range");

  TangentTape tt;
  tt.dirs.assign(dirs.begin(), dirs.end());
  tt.primal = forward_impl(model, X, batch_stats, nullptr);

  const auto K = static_cast<Eigen::Index>(dirs.size());
  const Eigen::Index B = X.cols();
  const std::size_t L = model.layers.size();
  const double omega = model.siren_scale;

  // tangent of the feature map, direction-major blocks
  const Encoding& enc = model.encoding;
  tt.t_feat.resize(enc.output_dim(), K * B);
  if (enc.is_rff()) {
    const Eigen::MatrixXd& Bm = enc.rff_matrix().B;
    const Eigen::Index m = Bm.rows();
    const Eigen::MatrixXd phase = 2.0 * M_PI * (Bm * X);
    const Eigen::ArrayXXd sinp = phase.array().sin();
    const Eigen::ArrayXXd cosp = phase.array().cos();
    for (Eigen::Index k = 0; k < K; ++k) {
      const Eigen::ArrayXd bcol = 2.0 * M_PI * Bm.col(tt.dirs[static_cast<std::size_t>(k)]).array();
      tt.t_feat.middleCols(k * B, B).topRows(m) = (sinp.colwise() * (-bcol)).matrix();
      tt.t_feat.middleCols(k * B, B).bottomRows(m) = (cosp.colwise() * bcol).matrix();
    }
  } else {
    tt.t_feat.setZero();
    for (Eigen::Index k = 0; k < K; ++k)
      tt.t_feat.middleCols(k * B, B).row(tt.dirs[static_cast<std::size_t>(k)]).setOnes();
  }

  tt.t_q.resize(L);
  tt.t_h.resize(L);
  const Eigen::MatrixXd* ta = &tt.t_feat;
  for (std::size_t l = 0; l < L; ++l) {
    const Layer& layer = model.layers[l];
    Eigen::MatrixXd tz = layer.W * (*ta);
    Eigen::MatrixXd tq;
    if (layer.has_bn()) {
      const Eigen::ArrayXd scale =
          layer.gamma.array() / (tt.primal.bn_var[l].array() + kBnEps).sqrt();
      tq = (tz.array().colwise() * scale).matrix();
    } else {
      tq = std::move(tz);
    }
    const Eigen::MatrixXd sp = act_prime(layer.act, omega, layer_preact(model, tt.primal, l));
    Eigen::MatrixXd th(layer.out_dim(), K * B);
    for (Eigen::Index k = 0; k < K; ++k) {
      th.middleCols(k * B, B) = sp.cwiseProduct(tq.middleCols(k * B, B));
      if (layer.kind == LayerKind::fc_skip) th.middleCols(k * B, B) += ta->middleCols(k * B, B);
    }
    tt.t_q[l] = std::move(tq);
    tt.t_h[l] = std::move(th);
    ta = &tt.t_h[l];
  }

  tt.g.resize(K, B);
  for (Eigen::Index k = 0; k < K; ++k) tt.g.row(k) = tt.t_h.back().middleCols(k * B, B).row(0);
  return tt;
}

void backward_params_of_input_grad(const FieldModel& model, const TangentTape& tt,
                                   const Eigen::MatrixXd& upstream, Grads& out) {
  const auto K = static_cast<Eigen::Index>(tt.dirs.size());
  const Eigen::Index B = tt.primal.batch_size();
  if (upstream.rows() != K || upstream.cols() != B)
    fail(Errc::invalid_argument, "upstream must be (directions x batch)");

  const std::size_t L = model.layers.size();
  const double omega = model.siren_scale;

  // adjoints of (h, t_h) for the layer currently being unwound
  Eigen::MatrixXd hbar = Eigen::MatrixXd::Zero(1, B);
  Eigen::MatrixXd tbar(1, K * B);
  for (Eigen::Index k = 0; k < K; ++k) tbar.middleCols(k * B, B) = upstream.row(k);

  for (std::size_t li = L; li-- > 0;) {
    const Layer& layer = model.layers[li];
    const Eigen::MatrixXd& a = layer_input(tt.primal, li);
    const Eigen::MatrixXd& ta = li == 0 ? tt.t_feat : tt.t_h[li - 1];
    const Eigen::MatrixXd& pre = layer_preact(model, tt.primal, li);
    const Eigen::MatrixXd sp = act_prime(layer.act, omega, pre);

    Eigen::MatrixXd qbar = sp.cwiseProduct(hbar);
    if (act_has_curvature(layer.act)) {
      Eigen::MatrixXd mixed = Eigen::MatrixXd::Zero(layer.out_dim(), B);
      for (Eigen::Index k = 0; k < K; ++k)
        mixed += tt.t_q[li].middleCols(k * B, B).cwiseProduct(tbar.middleCols(k * B, B));
      qbar += act_second(layer.act, omega, pre).cwiseProduct(mixed);
    }
    Eigen::MatrixXd tbar_q(layer.out_dim(), K * B);
    for (Eigen::Index k = 0; k < K; ++k)
      tbar_q.middleCols(k * B, B) = sp.cwiseProduct(tbar.middleCols(k * B, B));

    Eigen::MatrixXd zbar, tbar_z;
    if (layer.has_bn()) {
      // statistics frozen: the BN map is affine with slope gamma * inv_std
      const Eigen::ArrayXd inv_std = 1.0 / (tt.primal.bn_var[li].array() + kBnEps).sqrt();
      const Eigen::MatrixXd xhat =
          ((tt.primal.z[li].colwise() - tt.primal.bn_mean[li]).array().colwise() * inv_std)
              .matrix();
      Eigen::VectorXd dgamma = (qbar.array() * xhat.array()).rowwise().sum().matrix();
      // tangent path: t_q = gamma * (t_z * inv_std); recover t_z from t_q
      for (Eigen::Index k = 0; k < K; ++k) {
        const auto tq_blk = tt.t_q[li].middleCols(k * B, B);
        const auto tb_blk = tbar_q.middleCols(k * B, B);
        // t_xhat = t_q / gamma; guard gamma ~ 0 by rebuilding from W t_a instead
        dgamma += ((tb_blk.array() *
                    ((layer.W * ta.middleCols(k * B, B)).array().colwise() * inv_std))
                       .rowwise()
                       .sum())
                      .matrix();
        (void)tq_blk;
      }
      out.layers[li].dgamma += dgamma;
      out.layers[li].dbeta += qbar.rowwise().sum();
      const Eigen::ArrayXd scale = layer.gamma.array() * inv_std;
      zbar = (qbar.array().colwise() * scale).matrix();
      tbar_z.resize(layer.out_dim(), K * B);
      for (Eigen::Index k = 0; k < K; ++k)
        tbar_z.middleCols(k * B, B) =
            (tbar_q.middleCols(k * B, B).array().colwise() * scale).matrix();
    } else {
      zbar = std::move(qbar);
      tbar_z = std::move(tbar_q);
    }

    out.layers[li].dW += zbar * a.transpose();
    Eigen::MatrixXd ta_all(ta.rows(), K * B);
    ta_all = ta; // ta already spans K*B columns
    out.layers[li].dW += tbar_z * ta_all.transpose();
    out.layers[li].db += zbar.rowwise().sum();

    Eigen::MatrixXd hbar_next = layer.W.transpose() * zbar;
    Eigen::MatrixXd tbar_next = layer.W.transpose() * tbar_z;
    if (layer.kind == LayerKind::fc_skip) {
      hbar_next += hbar;
      tbar_next += tbar;
    }
    hbar = std::move(hbar_next);
    tbar = std::move(tbar_next);
  }
}

Eigen::VectorXd input_gradient(const FieldModel& model, const Eigen::VectorXd& v) {
  std::vector<int> dirs(static_cast<std::size_t>(model.input_dim()));
  for (std::size_t i = 0; i < dirs.size(); ++i) dirs[i] = static_cast<int>(i);
  TangentTape tt = forward_with_input_grad(model, v, dirs, false);
  return tt.g.col(0);
}

void backward_params_of_input_gradient(const FieldModel& model, const Eigen::VectorXd& v,
                                       const Eigen::VectorXd& upstream, Grads& out) {
  if (upstream.size() != model.input_dim())
    fail(Errc::invalid_argument, "upstream must have one entry per input coordinate");
  std::vector<int> dirs(static_cast<std::size_t>(model.input_dim()));
  for (std::size_t i = 0; i < dirs.size(); ++i) dirs[i] = static_cast<int>(i);
  TangentTape tt = forward_with_input_grad(model, v, dirs, false);
  backward_params_of_input_grad(model, tt, upstream, out);
}

} // namespace inrc
