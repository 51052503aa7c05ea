#pragma once

#include <memory>
#include <span>
#include <string>
#include <vector>

#include "bilevel/flat_vector.hpp"

namespace bilevel {

// Recorded differentiable computation over matrix-valued slots. Ops are
// coarse (a matmul is one node). A built tape is immutable and safe to
// share between threads; all per-evaluation storage lives in TapeEval.
//
// Every primitive has a VJP and a JVP rule. relu/max take derivative 0 at
// the kink (relu'(0) = 0; elementwise max propagates nothing on ties).

enum class Op : uint8_t {
  kInput,
  kConst,
  kAdd,
  kSub,
  kMul,
  kAddRow,   // (n x m) + broadcast (1 x m)
  kSubCol,   // (n x m) - broadcast (n x 1)
  kScale,    // a * literal
  kScaleBy,  // a * s, s a 1x1 node
  kMatMul,   // trans flags on either operand
  kExp,
  kLog,
  kRelu,
  kSigmoid,
  kMax,
  kSoftmaxRows,
  kLogSumExpRows,  // (n x m) -> (n x 1)
  kSum,            // -> 1x1
  kColSum,         // (n x m) -> (1 x m)
  kGatherCols,     // (n x m), indices[n] -> (n x 1)
  kPack,           // concat flattened args -> (1 x total)
};

struct SlotInfo {
  std::string name;
  Shape shape;
  bool differentiable = true;
  int node = -1;
};

class Tape;

class TapeBuilder {
 public:
  int input(const std::string& name, Shape shape, bool differentiable = true);
  int constant(Shape shape, std::vector<double> values);
  int constant_scalar(double v) { return constant({1, 1}, {v}); }

  int add(int a, int b);
  int sub(int a, int b);
  int mul(int a, int b);
  int add_row(int a, int b);
  int sub_col(int a, int b);
  int scale(int a, double c);
  int scale_by(int a, int s);
  int matmul(int a, int b, bool trans_a = false, bool trans_b = false);
  int exp(int a);
  int log(int a);
  int relu(int a);
  int sigmoid(int a);
  int max(int a, int b);
  int softmax_rows(int a);
  int logsumexp_rows(int a);
  int sum(int a);
  int col_sum(int a);
  int gather_cols(int a, std::vector<int> indices);
  int pack(const std::vector<int>& parts);

  Shape shape(int node) const;
  Tape build(int output) &&;

 private:
  friend class Tape;
  struct Node {
    Op op;
    int a = -1, b = -1;
    Shape shape;
    double c = 0.0;
    bool ta = false, tb = false;
    int aux = -1;  // index into indices_/consts_/packs_
  };
  int push(Node n);

  std::vector<Node> nodes_;
  std::vector<SlotInfo> slots_;
  std::vector<std::vector<int>> indices_;
  std::vector<std::vector<double>> consts_;
  std::vector<std::vector<int>> packs_;
};

class Tape {
 public:
  Shape output_shape() const { return nodes_[output_].shape; }
  int output_size() const { return output_shape().size(); }
  int node_count() const { return static_cast<int>(nodes_.size()); }

  const std::vector<SlotInfo>& slots() const { return slots_; }
  int slot_index(const std::string& name) const;  // -1 if absent
  bool has_slot(const std::string& name) const { return slot_index(name) >= 0; }

 private:
  friend class TapeBuilder;
  friend class TapeEval;
  std::vector<TapeBuilder::Node> nodes_;
  std::vector<SlotInfo> slots_;
  std::vector<std::vector<int>> indices_;
  std::vector<std::vector<double>> consts_;
  std::vector<std::vector<int>> packs_;
  std::vector<int> val_offset_;
  int total_values_ = 0;
  int output_ = -1;
};

// Per-slot value bindings, indexed like Tape::slots(). Empty spans are only
// legal for tangents (meaning zero).
using Bindings = std::vector<std::span<const double>>;

// One evaluation workspace: primal sweep, then any number of cotangent
// pulls / tangent pushes against the stored primals. Not thread-safe;
// create one per thread.
class TapeEval {
 public:
  explicit TapeEval(const Tape& tape);

  void forward(const Bindings& inputs);
  std::span<const double> output() const;
  double output_scalar() const { return output()[0]; }

  // Reverse sweep; cotangent must match the output shape. Accumulates into
  // per-slot adjoints readable via slot_grad.
  void backward(std::span<const double> cotangent);
  std::span<const double> slot_grad(int slot) const;

  // Forward tangent sweep; tangents[i] is the tangent for slot i (empty =
  // zero). Writes the output tangent into `out`.
  void push_tangent(const Bindings& tangents, std::span<double> out);

 private:
  std::span<double> val(int n);
  std::span<const double> cval(int n) const;
  std::span<double> adj(int n) { return {adj_.data() + tape_->val_offset_[n],
                                         static_cast<size_t>(tape_->nodes_[n].shape.size())}; }
  std::span<double> tan(int n) { return {tan_.data() + tape_->val_offset_[n],
                                         static_cast<size_t>(tape_->nodes_[n].shape.size())}; }

  const Tape* tape_;
  std::vector<double> vals_, adj_, tan_;
  bool have_primal_ = false;
};

// Spec-level conveniences: all slots bound by name from one FlatVector.
FlatVector forward_eval(const Tape& tape, const FlatVector& inputs);
// c^T (d out / d in); returns gradient in `inputs`'s layout (groups that are
// not differentiable slots stay zero).
FlatVector vjp(const Tape& tape, const FlatVector& inputs, std::span<const double> cotangent);
// (d out / d in) t; tangent shares `inputs`'s layout.
std::vector<double> jvp(const Tape& tape, const FlatVector& inputs, const FlatVector& tangent);

Bindings bind_by_name(const Tape& tape, const FlatVector& inputs);

}  // namespace bilevel
