#include "bilevel/tape.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace bilevel {

namespace {

// C (n x m) (+)= opA * opB with opA = trans_a ? A^T : A, likewise opB.
void mm(double* C, int n, int m, const double* A, Shape sa, bool ta, const double* B, Shape sb,
        bool tb, bool accumulate) {
  const int k = ta ? sa.rows : sa.cols;
  if (!accumulate) std::memset(C, 0, sizeof(double) * static_cast<size_t>(n) * m);
  for (int i = 0; i < n; ++i) {
    for (int p = 0; p < k; ++p) {
      const double a = ta ? A[p * sa.cols + i] : A[i * sa.cols + p];
      if (a == 0.0) continue;
      const double* brow = tb ? nullptr : B + p * sb.cols;
      double* crow = C + i * m;
      if (tb) {
        for (int j = 0; j < m; ++j) crow[j] += a * B[j * sb.cols + p];
      } else {
        for (int j = 0; j < m; ++j) crow[j] += a * brow[j];
      }
    }
  }
}

double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

int TapeBuilder::push(Node n) {
  nodes_.push_back(n);
  return static_cast<int>(nodes_.size()) - 1;
}

Shape TapeBuilder::shape(int node) const { return nodes_[node].shape; }

int TapeBuilder::input(const std::string& name, Shape shape, bool differentiable) {
  for (const auto& s : slots_)
    BL_CHECK_CONFIG(s.name != name, "duplicate slot '%s'", name.c_str());
  int id = push({Op::kInput, -1, -1, shape});
  slots_.push_back({name, shape, differentiable, id});
  return id;
}

int TapeBuilder::constant(Shape shape, std::vector<double> values) {
  BL_CHECK_SHAPE(static_cast<int>(values.size()) == shape.size(),
                 "constant value count %zu != shape size %d", values.size(), shape.size());
  consts_.push_back(std::move(values));
  Node n{Op::kConst, -1, -1, shape};
  n.aux = static_cast<int>(consts_.size()) - 1;
  return push(n);
}

#define BL_SAME_SHAPE(a, b, op)                                                       \
  BL_CHECK_SHAPE(nodes_[a].shape == nodes_[b].shape, "%s: shape mismatch %dx%d vs %dx%d", op, \
                 nodes_[a].shape.rows, nodes_[a].shape.cols, nodes_[b].shape.rows,    \
                 nodes_[b].shape.cols)

int TapeBuilder::add(int a, int b) {
  BL_SAME_SHAPE(a, b, "add");
  return push({Op::kAdd, a, b, nodes_[a].shape});
}

int TapeBuilder::sub(int a, int b) {
  BL_SAME_SHAPE(a, b, "sub");
  return push({Op::kSub, a, b, nodes_[a].shape});
}

int TapeBuilder::mul(int a, int b) {
  BL_SAME_SHAPE(a, b, "mul");
  return push({Op::kMul, a, b, nodes_[a].shape});
}

int TapeBuilder::add_row(int a, int b) {
  BL_CHECK_SHAPE(nodes_[b].shape.rows == 1 && nodes_[b].shape.cols == nodes_[a].shape.cols,
                 "add_row: %dx%d + %dx%d", nodes_[a].shape.rows, nodes_[a].shape.cols,
                 nodes_[b].shape.rows, nodes_[b].shape.cols);
  return push({Op::kAddRow, a, b, nodes_[a].shape});
}

int TapeBuilder::sub_col(int a, int b) {
  BL_CHECK_SHAPE(nodes_[b].shape.cols == 1 && nodes_[b].shape.rows == nodes_[a].shape.rows,
                 "sub_col: %dx%d - %dx%d", nodes_[a].shape.rows, nodes_[a].shape.cols,
                 nodes_[b].shape.rows, nodes_[b].shape.cols);
  return push({Op::kSubCol, a, b, nodes_[a].shape});
}

int TapeBuilder::scale(int a, double c) {
  Node n{Op::kScale, a, -1, nodes_[a].shape};
  n.c = c;
  return push(n);
}

int TapeBuilder::scale_by(int a, int s) {
  BL_CHECK_SHAPE(nodes_[s].shape.size() == 1, "scale_by: scalar operand must be 1x1");
  return push({Op::kScaleBy, a, s, nodes_[a].shape});
}

int TapeBuilder::matmul(int a, int b, bool trans_a, bool trans_b) {
  Shape sa = nodes_[a].shape, sb = nodes_[b].shape;
  int n = trans_a ? sa.cols : sa.rows;
  int ka = trans_a ? sa.rows : sa.cols;
  int kb = trans_b ? sb.cols : sb.rows;
  int m = trans_b ? sb.rows : sb.cols;
  BL_CHECK_SHAPE(ka == kb, "matmul: inner dims %d vs %d", ka, kb);
  Node node{Op::kMatMul, a, b, {n, m}};
  node.ta = trans_a;
  node.tb = trans_b;
  return push(node);
}

int TapeBuilder::exp(int a) { return push({Op::kExp, a, -1, nodes_[a].shape}); }
int TapeBuilder::log(int a) { return push({Op::kLog, a, -1, nodes_[a].shape}); }
int TapeBuilder::relu(int a) { return push({Op::kRelu, a, -1, nodes_[a].shape}); }
int TapeBuilder::sigmoid(int a) { return push({Op::kSigmoid, a, -1, nodes_[a].shape}); }

int TapeBuilder::max(int a, int b) {
  BL_SAME_SHAPE(a, b, "max");
  return push({Op::kMax, a, b, nodes_[a].shape});
}

int TapeBuilder::softmax_rows(int a) { return push({Op::kSoftmaxRows, a, -1, nodes_[a].shape}); }

int TapeBuilder::logsumexp_rows(int a) {
  return push({Op::kLogSumExpRows, a, -1, {nodes_[a].shape.rows, 1}});
}

int TapeBuilder::sum(int a) { return push({Op::kSum, a, -1, {1, 1}}); }

int TapeBuilder::col_sum(int a) { return push({Op::kColSum, a, -1, {1, nodes_[a].shape.cols}}); }

int TapeBuilder::gather_cols(int a, std::vector<int> indices) {
  const Shape s = nodes_[a].shape;
  BL_CHECK_SHAPE(static_cast<int>(indices.size()) == s.rows,
                 "gather_cols: %zu indices for %d rows", indices.size(), s.rows);
  for (int i : indices)
    BL_CHECK_CONFIG(i >= 0 && i < s.cols, "gather_cols: index %d out of range [0,%d)", i, s.cols);
  indices_.push_back(std::move(indices));
  Node n{Op::kGatherCols, a, -1, {s.rows, 1}};
  n.aux = static_cast<int>(indices_.size()) - 1;
  return push(n);
}

int TapeBuilder::pack(const std::vector<int>& parts) {
  BL_CHECK_CONFIG(!parts.empty(), "pack: no parts");
  int total = 0;
  for (int p : parts) total += nodes_[p].shape.size();
  packs_.push_back(parts);
  Node n{Op::kPack, -1, -1, {1, total}};
  n.aux = static_cast<int>(packs_.size()) - 1;
  return push(n);
}

Tape TapeBuilder::build(int output) && {
  BL_CHECK_CONFIG(output >= 0 && output < static_cast<int>(nodes_.size()),
                  "build: bad output node %d", output);
  Tape t;
  t.nodes_ = std::move(nodes_);
  t.slots_ = std::move(slots_);
  t.indices_ = std::move(indices_);
  t.consts_ = std::move(consts_);
  t.packs_ = std::move(packs_);
  t.output_ = output;
  t.val_offset_.resize(t.nodes_.size());
  int off = 0;
  for (size_t i = 0; i < t.nodes_.size(); ++i) {
    t.val_offset_[i] = off;
    off += t.nodes_[i].shape.size();
  }
  t.total_values_ = off;
  return t;
}

int Tape::slot_index(const std::string& name) const {
  for (size_t i = 0; i < slots_.size(); ++i)
    if (slots_[i].name == name) return static_cast<int>(i);
  return -1;
}

TapeEval::TapeEval(const Tape& tape) : tape_(&tape) {
  vals_.resize(tape.total_values_, 0.0);
  adj_.resize(tape.total_values_, 0.0);
  tan_.resize(tape.total_values_, 0.0);
  for (size_t i = 0; i < tape.nodes_.size(); ++i) {
    const auto& n = tape.nodes_[i];
    if (n.op == Op::kConst)
      std::memcpy(vals_.data() + tape.val_offset_[i], tape.consts_[n.aux].data(),
                  sizeof(double) * tape.consts_[n.aux].size());
  }
}

std::span<double> TapeEval::val(int n) {
  return {vals_.data() + tape_->val_offset_[n],
          static_cast<size_t>(tape_->nodes_[n].shape.size())};
}

std::span<const double> TapeEval::cval(int n) const {
  return {vals_.data() + tape_->val_offset_[n],
          static_cast<size_t>(tape_->nodes_[n].shape.size())};
}

std::span<const double> TapeEval::output() const { return cval(tape_->output_); }

void TapeEval::forward(const Bindings& inputs) {
  BL_CHECK_CONFIG(inputs.size() == tape_->slots_.size(),
                  "expected %zu slot bindings, got %zu", tape_->slots_.size(), inputs.size());
  const auto& nodes = tape_->nodes_;
  for (size_t si = 0; si < tape_->slots_.size(); ++si) {
    const SlotInfo& slot = tape_->slots_[si];
    BL_CHECK_CONFIG(!inputs[si].empty(), "missing value for slot '%s'", slot.name.c_str());
    BL_CHECK_SHAPE(static_cast<int>(inputs[si].size()) == slot.shape.size(),
                   "slot '%s' expects %d values, got %zu", slot.name.c_str(),
                   slot.shape.size(), inputs[si].size());
    std::memcpy(val(slot.node).data(), inputs[si].data(), sizeof(double) * inputs[si].size());
  }

  for (size_t ni = 0; ni < nodes.size(); ++ni) {
    const auto& n = nodes[ni];
    auto out = val(static_cast<int>(ni));
    const int sz = n.shape.size();
    switch (n.op) {
      case Op::kInput:
      case Op::kConst:
        break;
      case Op::kAdd: {
        auto a = cval(n.a), b = cval(n.b);
        for (int i = 0; i < sz; ++i) out[i] = a[i] + b[i];
        break;
      }
      case Op::kSub: {
        auto a = cval(n.a), b = cval(n.b);
        for (int i = 0; i < sz; ++i) out[i] = a[i] - b[i];
        break;
      }
      case Op::kMul: {
        auto a = cval(n.a), b = cval(n.b);
        for (int i = 0; i < sz; ++i) out[i] = a[i] * b[i];
        break;
      }
      case Op::kAddRow: {
        auto a = cval(n.a), b = cval(n.b);
        const int m = n.shape.cols;
        for (int i = 0; i < n.shape.rows; ++i)
          for (int j = 0; j < m; ++j) out[i * m + j] = a[i * m + j] + b[j];
        break;
      }
      case Op::kSubCol: {
        auto a = cval(n.a), b = cval(n.b);
        const int m = n.shape.cols;
        for (int i = 0; i < n.shape.rows; ++i)
          for (int j = 0; j < m; ++j) out[i * m + j] = a[i * m + j] - b[i];
        break;
      }
      case Op::kScale: {
        auto a = cval(n.a);
        for (int i = 0; i < sz; ++i) out[i] = n.c * a[i];
        break;
      }
      case Op::kScaleBy: {
        auto a = cval(n.a);
        const double s = cval(n.b)[0];
        for (int i = 0; i < sz; ++i) out[i] = s * a[i];
        break;
      }
      case Op::kMatMul:
        mm(out.data(), n.shape.rows, n.shape.cols, cval(n.a).data(), nodes[n.a].shape, n.ta,
           cval(n.b).data(), nodes[n.b].shape, n.tb, false);
        break;
      case Op::kExp: {
        auto a = cval(n.a);
        for (int i = 0; i < sz; ++i) out[i] = std::exp(a[i]);
        break;
      }
      case Op::kLog: {
        auto a = cval(n.a);
        for (int i = 0; i < sz; ++i) out[i] = std::log(a[i]);
        break;
      }
      case Op::kRelu: {
        auto a = cval(n.a);
        for (int i = 0; i < sz; ++i) out[i] = a[i] > 0.0 ? a[i] : 0.0;
        break;
      }
      case Op::kSigmoid: {
        auto a = cval(n.a);
        for (int i = 0; i < sz; ++i) out[i] = stable_sigmoid(a[i]);
        break;
      }
      case Op::kMax: {
        auto a = cval(n.a), b = cval(n.b);
        for (int i = 0; i < sz; ++i) out[i] = std::max(a[i], b[i]);
        break;
      }
      case Op::kSoftmaxRows: {
        auto a = cval(n.a);
        const int m = n.shape.cols;
        for (int i = 0; i < n.shape.rows; ++i) {
          const double* row = a.data() + i * m;
          double mx = row[0];
          for (int j = 1; j < m; ++j) mx = std::max(mx, row[j]);
          double s = 0.0;
          for (int j = 0; j < m; ++j) {
            out[i * m + j] = std::exp(row[j] - mx);
            s += out[i * m + j];
          }
          for (int j = 0; j < m; ++j) out[i * m + j] /= s;
        }
        break;
      }
      case Op::kLogSumExpRows: {
        auto a = cval(n.a);
        const int m = nodes[n.a].shape.cols;
        for (int i = 0; i < n.shape.rows; ++i) {
          const double* row = a.data() + i * m;
          double mx = row[0];
          for (int j = 1; j < m; ++j) mx = std::max(mx, row[j]);
          double s = 0.0;
          for (int j = 0; j < m; ++j) s += std::exp(row[j] - mx);
          out[i] = mx + std::log(s);
        }
        break;
      }
      case Op::kSum: {
        auto a = cval(n.a);
        double s = 0.0;
        for (double x : a) s += x;
        out[0] = s;
        break;
      }
      case Op::kColSum: {
        auto a = cval(n.a);
        const int rows = nodes[n.a].shape.rows, m = n.shape.cols;
        for (int j = 0; j < m; ++j) out[j] = 0.0;
        for (int i = 0; i < rows; ++i)
          for (int j = 0; j < m; ++j) out[j] += a[i * m + j];
        break;
      }
      case Op::kGatherCols: {
        auto a = cval(n.a);
        const auto& idx = tape_->indices_[n.aux];
        const int m = nodes[n.a].shape.cols;
        for (int i = 0; i < n.shape.rows; ++i) out[i] = a[i * m + idx[i]];
        break;
      }
      case Op::kPack: {
        int off = 0;
        for (int p : tape_->packs_[n.aux]) {
          auto part = cval(p);
          std::memcpy(out.data() + off, part.data(), sizeof(double) * part.size());
          off += static_cast<int>(part.size());
        }
        break;
      }
    }
    for (int i = 0; i < sz; ++i)
      if (!std::isfinite(out[i]))
        throw NumericError(
            detail::strf("non-finite value at tape node %zu (op %d)", ni, int(n.op)),
            static_cast<long>(ni));
  }
  have_primal_ = true;
}

void TapeEval::backward(std::span<const double> cotangent) {
  BL_CHECK_CONFIG(have_primal_, "backward before forward");
  BL_CHECK_SHAPE(static_cast<int>(cotangent.size()) == tape_->output_size(),
                 "cotangent size %zu != output size %d", cotangent.size(),
                 tape_->output_size());
  std::fill(adj_.begin(), adj_.end(), 0.0);
  std::memcpy(adj(tape_->output_).data(), cotangent.data(),
              sizeof(double) * cotangent.size());

  const auto& nodes = tape_->nodes_;
  for (int ni = static_cast<int>(nodes.size()) - 1; ni >= 0; --ni) {
    const auto& n = nodes[ni];
    if (n.op == Op::kInput || n.op == Op::kConst) continue;
    auto g = adj(ni);
    const int sz = n.shape.size();
    switch (n.op) {
      case Op::kAdd: {
        auto ga = adj(n.a), gb = adj(n.b);
        for (int i = 0; i < sz; ++i) {
          ga[i] += g[i];
          gb[i] += g[i];
        }
        break;
      }
      case Op::kSub: {
        auto ga = adj(n.a), gb = adj(n.b);
        for (int i = 0; i < sz; ++i) {
          ga[i] += g[i];
          gb[i] -= g[i];
        }
        break;
      }
      case Op::kMul: {
        auto ga = adj(n.a), gb = adj(n.b);
        auto a = cval(n.a), b = cval(n.b);
        for (int i = 0; i < sz; ++i) {
          ga[i] += g[i] * b[i];
          gb[i] += g[i] * a[i];
        }
        break;
      }
      case Op::kAddRow: {
        auto ga = adj(n.a), gb = adj(n.b);
        const int m = n.shape.cols;
        for (int i = 0; i < n.shape.rows; ++i)
          for (int j = 0; j < m; ++j) {
            ga[i * m + j] += g[i * m + j];
            gb[j] += g[i * m + j];
          }
        break;
      }
      case Op::kSubCol: {
        auto ga = adj(n.a), gb = adj(n.b);
        const int m = n.shape.cols;
        for (int i = 0; i < n.shape.rows; ++i)
          for (int j = 0; j < m; ++j) {
            ga[i * m + j] += g[i * m + j];
            gb[i] -= g[i * m + j];
          }
        break;
      }
      case Op::kScale: {
        auto ga = adj(n.a);
        for (int i = 0; i < sz; ++i) ga[i] += n.c * g[i];
        break;
      }
      case Op::kScaleBy: {
        auto ga = adj(n.a), gs = adj(n.b);
        auto a = cval(n.a);
        const double s = cval(n.b)[0];
        double acc = 0.0;
        for (int i = 0; i < sz; ++i) {
          ga[i] += s * g[i];
          acc += g[i] * a[i];
        }
        gs[0] += acc;
        break;
      }
      case Op::kMatMul: {
        const Shape sa = nodes[n.a].shape, sb = nodes[n.b].shape;
        const Shape sg = n.shape;
        // d/dA: (G opB^T) or its transpose when A enters transposed
        if (!n.ta)
          mm(adj(n.a).data(), sa.rows, sa.cols, g.data(), sg, false, cval(n.b).data(), sb,
             !n.tb, true);
        else
          mm(adj(n.a).data(), sa.rows, sa.cols, cval(n.b).data(), sb, n.tb, g.data(), sg, true,
             true);
        if (!n.tb)
          mm(adj(n.b).data(), sb.rows, sb.cols, cval(n.a).data(), sa, !n.ta, g.data(), sg,
             false, true);
        else
          mm(adj(n.b).data(), sb.rows, sb.cols, g.data(), sg, true, cval(n.a).data(), sa, n.ta,
             true);
        break;
      }
      case Op::kExp: {
        auto ga = adj(n.a);
        auto out = cval(ni);
        for (int i = 0; i < sz; ++i) ga[i] += g[i] * out[i];
        break;
      }
      case Op::kLog: {
        auto ga = adj(n.a);
        auto a = cval(n.a);
        for (int i = 0; i < sz; ++i) ga[i] += g[i] / a[i];
        break;
      }
      case Op::kRelu: {
        auto ga = adj(n.a);
        auto a = cval(n.a);
        for (int i = 0; i < sz; ++i)
          if (a[i] > 0.0) ga[i] += g[i];
        break;
      }
      case Op::kSigmoid: {
        auto ga = adj(n.a);
        auto out = cval(ni);
        for (int i = 0; i < sz; ++i) ga[i] += g[i] * out[i] * (1.0 - out[i]);
        break;
      }
      case Op::kMax: {
        auto ga = adj(n.a), gb = adj(n.b);
        auto a = cval(n.a), b = cval(n.b);
        for (int i = 0; i < sz; ++i) {
          if (a[i] > b[i])
            ga[i] += g[i];
          else if (b[i] > a[i])
            gb[i] += g[i];
        }
        break;
      }
      case Op::kSoftmaxRows: {
        auto ga = adj(n.a);
        auto p = cval(ni);
        const int m = n.shape.cols;
        for (int i = 0; i < n.shape.rows; ++i) {
          double dot = 0.0;
          for (int j = 0; j < m; ++j) dot += g[i * m + j] * p[i * m + j];
          for (int j = 0; j < m; ++j) ga[i * m + j] += p[i * m + j] * (g[i * m + j] - dot);
        }
        break;
      }
      case Op::kLogSumExpRows: {
        auto ga = adj(n.a);
        auto a = cval(n.a);
        auto out = cval(ni);
        const int m = nodes[n.a].shape.cols;
        for (int i = 0; i < n.shape.rows; ++i)
          for (int j = 0; j < m; ++j) ga[i * m + j] += g[i] * std::exp(a[i * m + j] - out[i]);
        break;
      }
      case Op::kSum: {
        auto ga = adj(n.a);
        for (auto& x : ga) x += g[0];
        break;
      }
      case Op::kColSum: {
        auto ga = adj(n.a);
        const int rows = nodes[n.a].shape.rows, m = n.shape.cols;
        for (int i = 0; i < rows; ++i)
          for (int j = 0; j < m; ++j) ga[i * m + j] += g[j];
        break;
      }
      case Op::kGatherCols: {
        auto ga = adj(n.a);
        const auto& idx = tape_->indices_[n.aux];
        const int m = nodes[n.a].shape.cols;
        for (int i = 0; i < n.shape.rows; ++i) ga[i * m + idx[i]] += g[i];
        break;
      }
      case Op::kPack: {
        int off = 0;
        for (int p : tape_->packs_[n.aux]) {
          auto gp = adj(p);
          for (size_t i = 0; i < gp.size(); ++i) gp[i] += g[off + static_cast<int>(i)];
          off += static_cast<int>(gp.size());
        }
        break;
      }
      default:
        break;
    }
  }
}

std::span<const double> TapeEval::slot_grad(int slot) const {
  const auto& s = tape_->slots_[slot];
  return {adj_.data() + tape_->val_offset_[s.node], static_cast<size_t>(s.shape.size())};
}

void TapeEval::push_tangent(const Bindings& tangents, std::span<double> out) {
  BL_CHECK_CONFIG(have_primal_, "push_tangent before forward");
  BL_CHECK_CONFIG(tangents.size() == tape_->slots_.size(),
                  "expected %zu slot tangents, got %zu", tape_->slots_.size(), tangents.size());
  BL_CHECK_SHAPE(static_cast<int>(out.size()) == tape_->output_size(),
                 "tangent out size %zu != output size %d", out.size(), tape_->output_size());
  std::fill(tan_.begin(), tan_.end(), 0.0);
  for (size_t si = 0; si < tape_->slots_.size(); ++si) {
    if (tangents[si].empty()) continue;
    const SlotInfo& slot = tape_->slots_[si];
    BL_CHECK_SHAPE(static_cast<int>(tangents[si].size()) == slot.shape.size(),
                   "tangent for slot '%s' has size %zu, expected %d", slot.name.c_str(),
                   tangents[si].size(), slot.shape.size());
    std::memcpy(tan(slot.node).data(), tangents[si].data(),
                sizeof(double) * tangents[si].size());
  }

  const auto& nodes = tape_->nodes_;
  for (size_t ni = 0; ni < nodes.size(); ++ni) {
    const auto& n = nodes[ni];
    if (n.op == Op::kInput || n.op == Op::kConst) continue;
    auto t = tan(static_cast<int>(ni));
    const int sz = n.shape.size();
    switch (n.op) {
      case Op::kAdd: {
        auto ta = tan(n.a), tb = tan(n.b);
        for (int i = 0; i < sz; ++i) t[i] = ta[i] + tb[i];
        break;
      }
      case Op::kSub: {
        auto ta = tan(n.a), tb = tan(n.b);
        for (int i = 0; i < sz; ++i) t[i] = ta[i] - tb[i];
        break;
      }
      case Op::kMul: {
        auto ta = tan(n.a), tb = tan(n.b);
        auto a = cval(n.a), b = cval(n.b);
        for (int i = 0; i < sz; ++i) t[i] = ta[i] * b[i] + a[i] * tb[i];
        break;
      }
      case Op::kAddRow: {
        auto ta = tan(n.a), tb = tan(n.b);
        const int m = n.shape.cols;
        for (int i = 0; i < n.shape.rows; ++i)
          for (int j = 0; j < m; ++j) t[i * m + j] = ta[i * m + j] + tb[j];
        break;
      }
      case Op::kSubCol: {
        auto ta = tan(n.a), tb = tan(n.b);
        const int m = n.shape.cols;
        for (int i = 0; i < n.shape.rows; ++i)
          for (int j = 0; j < m; ++j) t[i * m + j] = ta[i * m + j] - tb[i];
        break;
      }
      case Op::kScale: {
        auto ta = tan(n.a);
        for (int i = 0; i < sz; ++i) t[i] = n.c * ta[i];
        break;
      }
      case Op::kScaleBy: {
        auto ta = tan(n.a);
        auto a = cval(n.a);
        const double s = cval(n.b)[0];
        const double ts = tan(n.b)[0];
        for (int i = 0; i < sz; ++i) t[i] = s * ta[i] + ts * a[i];
        break;
      }
      case Op::kMatMul: {
        const Shape sa = nodes[n.a].shape, sb = nodes[n.b].shape;
        mm(t.data(), n.shape.rows, n.shape.cols, tan(n.a).data(), sa, n.ta, cval(n.b).data(),
           sb, n.tb, false);
        mm(t.data(), n.shape.rows, n.shape.cols, cval(n.a).data(), sa, n.ta, tan(n.b).data(),
           sb, n.tb, true);
        break;
      }
      case Op::kExp: {
        auto ta = tan(n.a);
        auto out = cval(ni);
        for (int i = 0; i < sz; ++i) t[i] = ta[i] * out[i];
        break;
      }
      case Op::kLog: {
        auto ta = tan(n.a);
        auto a = cval(n.a);
        for (int i = 0; i < sz; ++i) t[i] = ta[i] / a[i];
        break;
      }
      case Op::kRelu: {
        auto ta = tan(n.a);
        auto a = cval(n.a);
        for (int i = 0; i < sz; ++i) t[i] = a[i] > 0.0 ? ta[i] : 0.0;
        break;
      }
      case Op::kSigmoid: {
        auto ta = tan(n.a);
        auto out = cval(ni);
        for (int i = 0; i < sz; ++i) t[i] = ta[i] * out[i] * (1.0 - out[i]);
        break;
      }
      case Op::kMax: {
        auto ta = tan(n.a), tb = tan(n.b);
        auto a = cval(n.a), b = cval(n.b);
        for (int i = 0; i < sz; ++i)
          t[i] = a[i] > b[i] ? ta[i] : (b[i] > a[i] ? tb[i] : 0.0);
        break;
      }
      case Op::kSoftmaxRows: {
        auto ta = tan(n.a);
        auto p = cval(ni);
        const int m = n.shape.cols;
        for (int i = 0; i < n.shape.rows; ++i) {
          double dot = 0.0;
          for (int j = 0; j < m; ++j) dot += ta[i * m + j] * p[i * m + j];
          for (int j = 0; j < m; ++j) t[i * m + j] = p[i * m + j] * (ta[i * m + j] - dot);
        }
        break;
      }
      case Op::kLogSumExpRows: {
        auto ta = tan(n.a);
        auto a = cval(n.a);
        auto out = cval(ni);
        const int m = nodes[n.a].shape.cols;
        for (int i = 0; i < n.shape.rows; ++i) {
          double s = 0.0;
          for (int j = 0; j < m; ++j) s += std::exp(a[i * m + j] - out[i]) * ta[i * m + j];
          t[i] = s;
        }
        break;
      }
      case Op::kSum: {
        auto ta = tan(n.a);
        double s = 0.0;
        for (double x : ta) s += x;
        t[0] = s;
        break;
      }
      case Op::kColSum: {
        auto ta = tan(n.a);
        const int rows = nodes[n.a].shape.rows, m = n.shape.cols;
        for (int j = 0; j < m; ++j) t[j] = 0.0;
        for (int i = 0; i < rows; ++i)
          for (int j = 0; j < m; ++j) t[j] += ta[i * m + j];
        break;
      }
      case Op::kGatherCols: {
        auto ta = tan(n.a);
        const auto& idx = tape_->indices_[n.aux];
        const int m = nodes[n.a].shape.cols;
        for (int i = 0; i < n.shape.rows; ++i) t[i] = ta[i * m + idx[i]];
        break;
      }
      case Op::kPack: {
        int off = 0;
        for (int p : tape_->packs_[n.aux]) {
          auto tp = tan(p);
          std::memcpy(t.data() + off, tp.data(), sizeof(double) * tp.size());
          off += static_cast<int>(tp.size());
        }
        break;
      }
      default:
        break;
    }
  }
  std::memcpy(out.data(), tan(tape_->output_).data(), sizeof(double) * out.size());
}

Bindings bind_by_name(const Tape& tape, const FlatVector& inputs) {
  Bindings b(tape.slots().size());
  for (size_t i = 0; i < tape.slots().size(); ++i) {
    const auto& slot = tape.slots()[i];
    BL_CHECK_CONFIG(inputs.layout().has(slot.name), "missing value for slot '%s'",
                    slot.name.c_str());
    b[i] = inputs.group(slot.name);
  }
  return b;
}

FlatVector forward_eval(const Tape& tape, const FlatVector& inputs) {
  inputs.check_finite("tape inputs");
  TapeEval ev(tape);
  ev.forward(bind_by_name(tape, inputs));
  auto layout = make_layout({{"out", tape.output_shape()}});
  FlatVector out(layout);
  auto o = ev.output();
  out.set_group("out", o);
  return out;
}

FlatVector vjp(const Tape& tape, const FlatVector& inputs, std::span<const double> cotangent) {
  TapeEval ev(tape);
  ev.forward(bind_by_name(tape, inputs));
  ev.backward(cotangent);
  FlatVector grad(inputs.layout_ptr());
  for (size_t i = 0; i < tape.slots().size(); ++i) {
    if (!tape.slots()[i].differentiable) continue;
    grad.set_group(tape.slots()[i].name, ev.slot_grad(static_cast<int>(i)));
  }
  grad.check_finite("vjp result");
  return grad;
}

std::vector<double> jvp(const Tape& tape, const FlatVector& inputs, const FlatVector& tangent) {
  BL_CHECK_SHAPE(tangent.layout() == inputs.layout(), "jvp: tangent layout differs from inputs");
  TapeEval ev(tape);
  ev.forward(bind_by_name(tape, inputs));
  Bindings tb(tape.slots().size());
  for (size_t i = 0; i < tape.slots().size(); ++i) {
    const auto& slot = tape.slots()[i];
    if (slot.differentiable && tangent.layout().has(slot.name)) tb[i] = tangent.group(slot.name);
  }
  std::vector<double> out(tape.output_size());
  ev.push_tangent(tb, out);
  return out;
}

}  // namespace bilevel
