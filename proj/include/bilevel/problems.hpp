#pragma once

#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "bilevel/tape.hpp"

namespace bilevel::problems {

// ---------------------------------------------------------------------------
// plain losses (evaluation paths; the differentiable versions live on tapes)
// ---------------------------------------------------------------------------

// -log softmax(logits)[y]
double cross_entropy(std::span<const double> logits, int y);

double mse(std::span<const double> pred, std::span<const double> target);

// argmax with ties broken toward the lowest class index
int argmax_lowest(std::span<const double> v);

// fraction of rows whose argmax equals the label
double accuracy(const std::vector<std::vector<double>>& logits, const std::vector<int>& labels);

// ---------------------------------------------------------------------------
// datasets
// ---------------------------------------------------------------------------

struct LabelledExample {
  std::vector<double> x;
  int y = 0;
};

struct SplitDataset {
  std::vector<LabelledExample> train;
  std::vector<LabelledExample> val;
};

// ---------------------------------------------------------------------------
// hyperparameter vector construction
// ---------------------------------------------------------------------------

// Feedforward affine(+relu) stack mapping inputs to representations. Empty
// `widths` means the identity representation.
struct ReprArch {
  int input_dim = 0;
  std::vector<int> widths;
  bool final_relu = true;  // pretrained baselines freeze at a linear output

  int output_dim() const { return widths.empty() ? input_dim : widths.back(); }
  int layer_count() const { return static_cast<int>(widths.size()); }
};

// Which pieces of the outer variable exist and how they are initialized.
// Step size and regularizer are stored as logs (positivity by construction);
// momentum as a logit.
struct ModelConfig {
  ReprArch arch;
  int n_classes = 2;

  bool learn_step = true;
  double init_step = 0.1;   // when learned
  double fixed_step = 0.1;  // when not

  bool learn_reg = false;
  double init_reg = 1e-3;
  double fixed_reg = 0.0;  // 0 disables the L2 term entirely

  bool learn_init = false;

  bool learn_momentum = false;
  double init_momentum = 0.5;

  int ground_dim() const { return n_classes * (arch.output_dim() + 1); }
};

LayoutPtr lambda_layout(const ModelConfig& cfg);
LayoutPtr ground_layout(const ModelConfig& cfg);  // groups "W" (K x m), "b" (1 x K)

// Representation weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), log_step =
// ln(init_step), learned init = 0.
FlatVector init_lambda(const ModelConfig& cfg, uint64_t seed);

// ---------------------------------------------------------------------------
// bilevel problem surface consumed by dynamics / hypergrad
// ---------------------------------------------------------------------------

// All tapes take ground weights and hyperparameters through slots named
// after the layout groups; minibatch data is baked in as constants.
// inner_grad outputs the packed gradient of the inner loss w.r.t. w,
// laid out exactly like w_layout.
class BilevelProblem {
 public:
  virtual ~BilevelProblem() = default;
  virtual const LayoutPtr& w_layout() const = 0;
  virtual const LayoutPtr& lambda_layout() const = 0;
  virtual int batch_count() const = 0;
  virtual const Tape& inner_grad(int batch) const = 0;
  virtual const Tape& inner_loss(int batch) const = 0;
  virtual const Tape& outer() const = 0;
};

// Concrete problem holding prebuilt tapes.
class TapeProblem final : public BilevelProblem {
 public:
  TapeProblem(LayoutPtr w, LayoutPtr lambda, std::vector<Tape> grad_tapes,
              std::vector<Tape> loss_tapes, Tape outer_tape);

  const LayoutPtr& w_layout() const override { return w_; }
  const LayoutPtr& lambda_layout() const override { return lambda_; }
  int batch_count() const override { return static_cast<int>(grads_.size()); }
  const Tape& inner_grad(int batch) const override { return grads_.at(batch); }
  const Tape& inner_loss(int batch) const override { return losses_.at(batch); }
  const Tape& outer() const override { return outer_; }

 private:
  LayoutPtr w_, lambda_;
  std::vector<Tape> grads_, losses_;
  Tape outer_;
};

// Pre-resolved mapping from a tape's slots onto a (w, lambda) pair of flat
// vectors. Slots must name groups of one of the two layouts.
class PairBinder {
 public:
  PairBinder(const Tape& tape, const GroupLayout& w, const GroupLayout& lambda);

  Bindings bind(const FlatVector& w, const FlatVector& lambda) const;
  // Tangent bindings drawn from optional flat tangents (null = zero).
  Bindings bind_tangent(const FlatVector* tw, const FlatVector* tlambda) const;
  Bindings bind_tangent(std::span<const double> tw, std::span<const double> tlambda) const;

  // Accumulate slot adjoints of `ev` into dw / dlambda (either may be null).
  void add_grads(const TapeEval& ev, FlatVector* dw, FlatVector* dlambda,
                 double scale = 1.0) const;

 private:
  struct Entry {
    int slot;
    bool from_w;
    int offset;
    int len;
  };
  std::vector<Entry> entries_;
  size_t slot_count_;
};

// ---------------------------------------------------------------------------
// concrete problems
// ---------------------------------------------------------------------------

// Multinomial logistic regression (optionally on top of the learned
// representation) with mean cross-entropy; inner loss optionally adds the
// learned L2 term exp(log_reg)*||w||^2. The outer objective is the mean
// validation cross-entropy; `outer_on_train` redirects it to the training
// set instead.
TapeProblem make_supervised(const ModelConfig& cfg, const SplitDataset& data, int minibatch = 0,
                            bool outer_on_train = false);

// Inner loss 0.5*||w - target||^2, outer 0.5*||w_T||^2; closed forms for
// gd from w0 = 0: w_T = target*(1-(1-eta)^T).
TapeProblem make_quadratic(int dim, bool learn_step, double init_step = 0.5);

// Convenience scalar evaluations through the problem tapes.
double inner_loss_value(const BilevelProblem& p, const FlatVector& w, const FlatVector& lambda,
                        int batch = 0);
double outer_loss_value(const BilevelProblem& p, const FlatVector& w, const FlatVector& lambda);

}  // namespace bilevel::problems
