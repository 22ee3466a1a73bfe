#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "encoding.hpp"
#include "error.hpp"

namespace inrc {

enum class Activation { relu, tanh_fn, sine, none };

enum class LayerKind {
  fc,      // h = act(W a + b)
  fc_skip, // h = a + act(W a + b), requires in == out
  fc_bn,   // h = act(gamma * norm(W a + b) + beta)
};

Activation activation_from_string(const std::string& s);
std::string to_string(Activation a);

struct Layer {
  LayerKind kind = LayerKind::fc;
  Activation act = Activation::none;
  Eigen::MatrixXd W; // out x in
  Eigen::VectorXd b;
  // batch-norm parameters and running statistics (fc_bn only)
  Eigen::VectorXd gamma, beta, run_mean, run_var;

  int in_dim() const { return static_cast<int>(W.cols()); }
  int out_dim() const { return static_cast<int>(W.rows()); }
  bool has_bn() const { return kind == LayerKind::fc_bn; }
};

// One block of an architecture preset: `count` layers of `kind` at `width`.
struct PresetBlock {
  LayerKind kind;
  int width;
  int count;
};

struct ArchPreset {
  std::string name;
  std::vector<PresetBlock> blocks;
};

const std::vector<std::string>& preset_names();
ArchPreset arch_preset(const std::string& name);

// Coordinate network f_theta: encoding followed by an MLP with a final
// linear map to one output. Immutable during inference; training mutates
// parameters (and batch-norm running statistics) under exclusive access.
struct FieldModel {
  Encoding encoding = Encoding::identity(2);
  std::vector<Layer> layers; // last layer: width 1, activation none
  Activation hidden_act = Activation::tanh_fn;
  double siren_scale = 30.0; // omega, used only when hidden_act == sine
  std::string preset_name;

  int input_dim() const { return encoding.input_dim(); }

  std::size_t param_count() const;
  double param(std::size_t i) const;
  void set_param(std::size_t i, double v);
};

// Builds a preset architecture on top of `encoding`. Skip blocks at a new
// width get a plain FC transition inserted in front of them. Weight
// initialization is deterministic under `seed`.
FieldModel build_model(const ArchPreset& preset, Encoding encoding, Activation hidden_act,
                       double siren_scale, std::uint64_t seed);

// Assembles a model from explicit layers (used by tests and the checkpoint
// loader); validates widths and skip-layer constraints.
FieldModel assemble_model(Encoding encoding, std::vector<Layer> layers, Activation hidden_act,
                          double siren_scale, std::string preset_name = "custom");

struct Grads {
  struct PerLayer {
    Eigen::MatrixXd dW;
    Eigen::VectorXd db;
    Eigen::VectorXd dgamma, dbeta; // fc_bn only
  };
  std::vector<PerLayer> layers;

  void set_zero();
  void add(const Grads& other);
  bool all_finite() const;
  double param(std::size_t i) const; // flat view, same ordering as FieldModel
};

Grads make_zero_grads(const FieldModel& model);

// Cached activations from one batched forward pass; sufficient to reproduce
// the output and to run the reverse pass.
struct Tape {
  Eigen::MatrixXd feat;            // encoded input, E x B
  std::vector<Eigen::MatrixXd> z;  // per layer, pre-normalization pre-activation
  std::vector<Eigen::MatrixXd> q;  // pre-activation after BN (empty when no BN)
  std::vector<Eigen::MatrixXd> h;  // per layer output
  std::vector<Eigen::VectorXd> bn_mean, bn_var; // statistics used in this pass
  bool training = false;

  const Eigen::MatrixXd& output() const { return h.back(); } // 1 x B
  Eigen::Index batch_size() const { return feat.cols(); }
};

// X holds one normalized coordinate per column. Training mode uses per-batch
// BN statistics and updates the running ones; eval mode uses the running
// statistics. Throws on non-finite intermediates, reporting the layer index.
Tape forward_batch(FieldModel& model, const Eigen::MatrixXd& X, bool training);
Tape forward_batch_eval(const FieldModel& model, const Eigen::MatrixXd& X);

double forward_point(const FieldModel& model, const Eigen::VectorXd& v);

// Accumulates d(sum_b upstream_b * y_b)/d(params) into `out`.
void backward_params(const FieldModel& model, const Tape& tape,
                     const Eigen::RowVectorXd& upstream, Grads& out);

// Forward-mode pass carrying directional derivatives of the output w.r.t.
// the raw input coordinates listed in `dirs`. Tangent blocks are stored
// direction-major: block k spans columns [k*B, (k+1)*B).
struct TangentTape {
  Tape primal;
  std::vector<int> dirs;
  Eigen::MatrixXd t_feat;             // E x (K*B)
  std::vector<Eigen::MatrixXd> t_q;   // per layer, out x (K*B)
  std::vector<Eigen::MatrixXd> t_h;   // per layer, out x (K*B)
  Eigen::MatrixXd g;                  // K x B, g(k, s) = df/dv_dirs[k] at sample s
};

// `batch_stats` freezes this batch's BN statistics inside the pass (training
// use); otherwise the running statistics are used. Either way the statistics
// are treated as constants when differentiating.
TangentTape forward_with_input_grad(const FieldModel& model, const Eigen::MatrixXd& X,
                                    std::span<const int> dirs, bool batch_stats);

// Accumulates d(sum_{k,b} upstream(k,b) * g(k,b))/d(params) into `out`
// (reverse pass over the tangent computation).
void backward_params_of_input_grad(const FieldModel& model, const TangentTape& tape,
                                   const Eigen::MatrixXd& upstream, Grads& out);

// Single-point wrappers (eval-mode statistics).
Eigen::VectorXd input_gradient(const FieldModel& model, const Eigen::VectorXd& v);
void backward_params_of_input_gradient(const FieldModel& model, const Eigen::VectorXd& v,
                                       const Eigen::VectorXd& upstream, Grads& out);

} // namespace inrc
