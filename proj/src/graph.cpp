#include "sleepstage/graph.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstring>

namespace sleepstage {

namespace {

using RowMatrix =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMatrix>;
using MutMap = Eigen::Map<RowMatrix>;

ConstMap as_matrix(const Tensor& t) {
  return ConstMap(t.storage().data(), static_cast<Eigen::Index>(t.rows()),
                  static_cast<Eigen::Index>(t.cols()));
}

MutMap as_matrix(Tensor& t) {
  return MutMap(t.storage().data(), static_cast<Eigen::Index>(t.rows()),
                static_cast<Eigen::Index>(t.cols()));
}

double sigmoid_of(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

const char* op_name(OpKind kind) {
  switch (kind) {
    case OpKind::Input: return "input";
    case OpKind::Parameter: return "parameter";
    case OpKind::Constant: return "constant";
    case OpKind::Add: return "add";
    case OpKind::Sub: return "sub";
    case OpKind::Mul: return "mul";
    case OpKind::AddRow: return "add_row";
    case OpKind::MulCol: return "mul_col";
    case OpKind::Scale: return "scale";
    case OpKind::AddScalar: return "add_scalar";
    case OpKind::MatMul: return "matmul";
    case OpKind::Sigmoid: return "sigmoid";
    case OpKind::Tanh: return "tanh";
    case OpKind::Exp: return "exp";
    case OpKind::Log: return "log";
    case OpKind::Square: return "square";
    case OpKind::SoftmaxRows: return "softmax_rows";
    case OpKind::ConcatCols: return "concat_cols";
    case OpKind::ConcatRows: return "concat_rows";
    case OpKind::SliceCols: return "slice_cols";
    case OpKind::SliceRows: return "slice_rows";
    case OpKind::RowBlock: return "row_block";
    case OpKind::Sum: return "sum";
    case OpKind::Mean: return "mean";
    case OpKind::BatchNorm: return "batch_norm";
  }
  return "?";
}

GraphError::GraphError(const std::string& what, std::size_t node, OpKind kind)
    : std::runtime_error("node " + std::to_string(node) + " (" +
                         op_name(kind) + "): " + what),
      node_(node),
      kind_(kind) {}

Var Graph::push(OpKind kind, std::vector<std::size_t> inputs) {
  for (std::size_t in : inputs) {
    if (in >= nodes_.size()) {
      throw GraphError("input refers to unknown node " + std::to_string(in),
                       nodes_.size(), kind);
    }
  }
  Node n;
  n.kind = kind;
  n.inputs = std::move(inputs);
  nodes_.push_back(std::move(n));
  return Var{nodes_.size() - 1};
}

Var Graph::input(const std::string& name) {
  if (leaves_.count(name)) {
    throw std::invalid_argument("duplicate leaf name '" + name + "'");
  }
  Var v = push(OpKind::Input, {});
  nodes_[v.id].name = name;
  leaves_[name] = v.id;
  return v;
}

Var Graph::parameter(const std::string& name, bool trainable) {
  Var v = input(name);
  nodes_[v.id].kind = OpKind::Parameter;
  nodes_[v.id].trainable = trainable;
  return v;
}

Var Graph::constant(Tensor value) {
  Var v = push(OpKind::Constant, {});
  nodes_[v.id].value = std::move(value);
  return v;
}

Var Graph::add(Var a, Var b) { return push(OpKind::Add, {a.id, b.id}); }
Var Graph::sub(Var a, Var b) { return push(OpKind::Sub, {a.id, b.id}); }
Var Graph::mul(Var a, Var b) { return push(OpKind::Mul, {a.id, b.id}); }
Var Graph::add_row(Var a, Var row) {
  return push(OpKind::AddRow, {a.id, row.id});
}
Var Graph::mul_col(Var col, Var b) {
  return push(OpKind::MulCol, {col.id, b.id});
}
Var Graph::scale(Var a, double s) {
  Var v = push(OpKind::Scale, {a.id});
  nodes_[v.id].scalar = s;
  return v;
}
Var Graph::add_scalar(Var a, double s) {
  Var v = push(OpKind::AddScalar, {a.id});
  nodes_[v.id].scalar = s;
  return v;
}
Var Graph::matmul(Var a, Var b) { return push(OpKind::MatMul, {a.id, b.id}); }
Var Graph::sigmoid(Var a) { return push(OpKind::Sigmoid, {a.id}); }
Var Graph::tanh(Var a) { return push(OpKind::Tanh, {a.id}); }
Var Graph::exp(Var a) { return push(OpKind::Exp, {a.id}); }
Var Graph::log(Var a, double epsilon) {
  Var v = push(OpKind::Log, {a.id});
  nodes_[v.id].scalar = epsilon;
  return v;
}
Var Graph::square(Var a) { return push(OpKind::Square, {a.id}); }
Var Graph::softmax_rows(Var a) { return push(OpKind::SoftmaxRows, {a.id}); }

Var Graph::concat_cols(const std::vector<Var>& parts) {
  std::vector<std::size_t> ids;
  for (Var p : parts) ids.push_back(p.id);
  if (ids.empty()) throw std::invalid_argument("concat_cols of nothing");
  return push(OpKind::ConcatCols, std::move(ids));
}

Var Graph::concat_rows(const std::vector<Var>& parts) {
  std::vector<std::size_t> ids;
  for (Var p : parts) ids.push_back(p.id);
  if (ids.empty()) throw std::invalid_argument("concat_rows of nothing");
  return push(OpKind::ConcatRows, std::move(ids));
}

Var Graph::slice_cols(Var a, std::size_t begin, std::size_t end) {
  Var v = push(OpKind::SliceCols, {a.id});
  nodes_[v.id].begin = begin;
  nodes_[v.id].end = end;
  return v;
}

Var Graph::slice_rows(Var a, std::size_t begin, std::size_t end) {
  Var v = push(OpKind::SliceRows, {a.id});
  nodes_[v.id].begin = begin;
  nodes_[v.id].end = end;
  return v;
}

Var Graph::row_block(Var a, std::size_t block, std::size_t blocks) {
  if (block >= blocks) throw std::invalid_argument("row block index out of range");
  Var v = push(OpKind::RowBlock, {a.id});
  nodes_[v.id].begin = block;
  nodes_[v.id].end = blocks;
  return v;
}

Var Graph::sum(Var a) { return push(OpKind::Sum, {a.id}); }
Var Graph::mean(Var a) { return push(OpKind::Mean, {a.id}); }

Var Graph::batch_norm(Var x, Var gamma, const std::string& buffer,
                      double eps) {
  Var v = push(OpKind::BatchNorm, {x.id, gamma.id});
  nodes_[v.id].buffer = buffer;
  nodes_[v.id].scalar = eps;
  buffers_.try_emplace(buffer);
  return v;
}

void Graph::set_name(Var v, const std::string& name) {
  if (v.id >= nodes_.size()) throw std::out_of_range("unknown node");
  nodes_[v.id].name = name;
  named_[name] = v.id;
}

std::size_t Graph::leaf_id(const std::string& name) const {
  auto it = leaves_.find(name);
  if (it == leaves_.end()) {
    throw std::invalid_argument("no input or parameter named '" + name + "'");
  }
  return it->second;
}

void Graph::bind(const std::string& name, const Tensor& value) {
  Node& n = nodes_[leaf_id(name)];
  n.value.reset(value.shape());
  std::copy(value.storage().begin(), value.storage().end(),
            n.value.storage().begin());
}

bool Graph::has_leaf(const std::string& name) const {
  return leaves_.count(name) > 0;
}

void Graph::set_trainable(const std::string& name, bool trainable) {
  Node& n = nodes_[leaf_id(name)];
  if (n.kind != OpKind::Parameter) {
    throw std::invalid_argument("'" + name + "' is not a parameter");
  }
  n.trainable = trainable;
}

bool Graph::is_trainable(const std::string& name) const {
  const Node& n = nodes_[leaf_id(name)];
  return n.kind == OpKind::Parameter && n.trainable;
}

std::vector<std::string> Graph::parameter_names() const {
  std::vector<std::string> out;
  for (const auto& [name, id] : leaves_) {
    if (nodes_[id].kind == OpKind::Parameter) out.push_back(name);
  }
  return out;
}

std::vector<std::string> Graph::trainable_names() const {
  std::vector<std::string> out;
  for (const auto& [name, id] : leaves_) {
    if (nodes_[id].kind == OpKind::Parameter && nodes_[id].trainable) {
      out.push_back(name);
    }
  }
  return out;
}

const Tensor& Graph::value(Var v) const { return nodes_.at(v.id).value; }
const Tensor& Graph::leaf_value(const std::string& name) const {
  return nodes_[leaf_id(name)].value;
}
OpKind Graph::kind(Var v) const { return nodes_.at(v.id).kind; }
const std::vector<std::size_t>& Graph::inputs_of(Var v) const {
  return nodes_.at(v.id).inputs;
}

void Graph::forward() {
  for (std::size_t id = 0; id < nodes_.size(); ++id) {
    forward_node(id);
    if (!nodes_[id].value.all_finite()) {
      throw NonFiniteError("non-finite output", id, nodes_[id].kind);
    }
  }
}

TensorMap Graph::evaluate(const TensorMap& inputs) {
  for (const auto& [name, t] : inputs) bind(name, t);
  forward();
  TensorMap out;
  for (const auto& [name, id] : named_) out[name] = nodes_[id].value;
  return out;
}

void Graph::forward_node(std::size_t id) {
  Node& n = nodes_[id];
  auto in = [&](std::size_t k) -> const Tensor& {
    return nodes_[n.inputs[k]].value;
  };
  auto fail = [&](const std::string& msg) {
    throw ShapeError(msg, id, n.kind);
  };
  Tensor& out = n.value;

  switch (n.kind) {
    case OpKind::Input:
    case OpKind::Parameter:
      if (out.size() == 0) fail("leaf '" + n.name + "' is not bound");
      return;
    case OpKind::Constant:
      return;
    case OpKind::Add:
    case OpKind::Sub:
    case OpKind::Mul: {
      const Tensor& a = in(0);
      const Tensor& b = in(1);
      if (a.shape() != b.shape()) {
        fail("operand shapes " + shape_string(a.shape()) + " and " +
             shape_string(b.shape()) + " differ");
      }
      out.reset(a.shape());
      const std::size_t size = a.size();
      if (n.kind == OpKind::Add) {
        for (std::size_t i = 0; i < size; ++i) out[i] = a[i] + b[i];
      } else if (n.kind == OpKind::Sub) {
        for (std::size_t i = 0; i < size; ++i) out[i] = a[i] - b[i];
      } else {
        for (std::size_t i = 0; i < size; ++i) out[i] = a[i] * b[i];
      }
      return;
    }
    case OpKind::AddRow: {
      const Tensor& a = in(0);
      const Tensor& row = in(1);
      if (row.size() != a.cols()) {
        fail("row of size " + std::to_string(row.size()) +
             " cannot broadcast over " + shape_string(a.shape()));
      }
      out.reset(a.shape());
      const std::size_t rows = a.rows(), cols = a.cols();
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) {
          out[r * cols + c] = a[r * cols + c] + row[c];
        }
      }
      return;
    }
    case OpKind::MulCol: {
      const Tensor& col = in(0);
      const Tensor& b = in(1);
      if (col.cols() != 1 || col.rows() != b.rows()) {
        fail("column " + shape_string(col.shape()) +
             " cannot broadcast over " + shape_string(b.shape()));
      }
      out.reset(b.shape());
      const std::size_t rows = b.rows(), cols = b.cols();
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) {
          out[r * cols + c] = col[r] * b[r * cols + c];
        }
      }
      return;
    }
    case OpKind::Scale:
    case OpKind::AddScalar: {
      const Tensor& a = in(0);
      out.reset(a.shape());
      if (n.kind == OpKind::Scale) {
        for (std::size_t i = 0; i < a.size(); ++i) out[i] = n.scalar * a[i];
      } else {
        for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] + n.scalar;
      }
      return;
    }
    case OpKind::MatMul: {
      const Tensor& a = in(0);
      const Tensor& b = in(1);
      if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows()) {
        fail("cannot multiply " + shape_string(a.shape()) + " by " +
             shape_string(b.shape()));
      }
      out.reset({a.rows(), b.cols()});
      as_matrix(out).noalias() = as_matrix(a) * as_matrix(b);
      return;
    }
    case OpKind::Sigmoid:
    case OpKind::Tanh:
    case OpKind::Exp:
    case OpKind::Log:
    case OpKind::Square: {
      const Tensor& a = in(0);
      out.reset(a.shape());
      const std::size_t size = a.size();
      switch (n.kind) {
        case OpKind::Sigmoid:
          for (std::size_t i = 0; i < size; ++i) out[i] = sigmoid_of(a[i]);
          break;
        case OpKind::Tanh:
          for (std::size_t i = 0; i < size; ++i) out[i] = std::tanh(a[i]);
          break;
        case OpKind::Exp:
          for (std::size_t i = 0; i < size; ++i) out[i] = std::exp(a[i]);
          break;
        case OpKind::Log:
          for (std::size_t i = 0; i < size; ++i) {
            out[i] = std::log(a[i] + n.scalar);
          }
          break;
        default:
          for (std::size_t i = 0; i < size; ++i) out[i] = a[i] * a[i];
      }
      return;
    }
    case OpKind::SoftmaxRows: {
      const Tensor& a = in(0);
      out.reset(a.shape());
      const std::size_t rows = a.rows(), cols = a.cols();
      for (std::size_t r = 0; r < rows; ++r) {
        const double* x = &a[r * cols];
        double* y = &out[r * cols];
        const double peak = *std::max_element(x, x + cols);
        double total = 0.0;
        for (std::size_t c = 0; c < cols; ++c) {
          y[c] = std::exp(x[c] - peak);
          total += y[c];
        }
        for (std::size_t c = 0; c < cols; ++c) y[c] /= total;
      }
      return;
    }
    case OpKind::ConcatCols: {
      const std::size_t rows = in(0).rows();
      std::size_t cols = 0;
      for (std::size_t k = 0; k < n.inputs.size(); ++k) {
        if (in(k).rows() != rows) {
          fail("concat_cols part " + std::to_string(k) + " has " +
               std::to_string(in(k).rows()) + " rows, expected " +
               std::to_string(rows));
        }
        cols += in(k).cols();
      }
      out.reset({rows, cols});
      std::size_t offset = 0;
      for (std::size_t k = 0; k < n.inputs.size(); ++k) {
        const Tensor& part = in(k);
        const std::size_t pc = part.cols();
        for (std::size_t r = 0; r < rows; ++r) {
          std::copy_n(&part[r * pc], pc, &out[r * cols + offset]);
        }
        offset += pc;
      }
      return;
    }
    case OpKind::ConcatRows: {
      const std::size_t cols = in(0).cols();
      std::size_t rows = 0;
      for (std::size_t k = 0; k < n.inputs.size(); ++k) {
        if (in(k).cols() != cols) {
          fail("concat_rows part " + std::to_string(k) + " has " +
               std::to_string(in(k).cols()) + " columns, expected " +
               std::to_string(cols));
        }
        rows += in(k).rows();
      }
      out.reset({rows, cols});
      std::size_t offset = 0;
      for (std::size_t k = 0; k < n.inputs.size(); ++k) {
        const Tensor& part = in(k);
        std::copy(part.storage().begin(), part.storage().end(),
                  out.storage().begin() + static_cast<std::ptrdiff_t>(offset));
        offset += part.size();
      }
      return;
    }
    case OpKind::SliceCols: {
      const Tensor& a = in(0);
      if (n.begin >= n.end || n.end > a.cols()) {
        fail("column slice [" + std::to_string(n.begin) + "," +
             std::to_string(n.end) + ") out of " + shape_string(a.shape()));
      }
      const std::size_t rows = a.rows(), cols = a.cols(), w = n.end - n.begin;
      out.reset({rows, w});
      for (std::size_t r = 0; r < rows; ++r) {
        std::copy_n(&a[r * cols + n.begin], w, &out[r * w]);
      }
      return;
    }
    case OpKind::SliceRows: {
      const Tensor& a = in(0);
      if (n.begin >= n.end || n.end > a.rows()) {
        fail("row slice [" + std::to_string(n.begin) + "," +
             std::to_string(n.end) + ") out of " + shape_string(a.shape()));
      }
      const std::size_t cols = a.cols();
      out.reset({n.end - n.begin, cols});
      std::copy_n(&a[n.begin * cols], (n.end - n.begin) * cols,
                  out.storage().data());
      return;
    }
    case OpKind::RowBlock: {
      const Tensor& a = in(0);
      if (a.rows() % n.end != 0) {
        fail("cannot split " + shape_string(a.shape()) + " into " +
             std::to_string(n.end) + " row blocks");
      }
      const std::size_t cols = a.cols(), h = a.rows() / n.end;
      out.reset({h, cols});
      std::copy_n(&a[n.begin * h * cols], h * cols, out.storage().data());
      return;
    }
    case OpKind::Sum:
    case OpKind::Mean: {
      const Tensor& a = in(0);
      double total = 0.0;
      for (double v : a.values()) total += v;
      out.reset({});
      out[0] = n.kind == OpKind::Sum ? total
                                     : total / static_cast<double>(a.size());
      return;
    }
    case OpKind::BatchNorm: {
      const Tensor& x = in(0);
      const Tensor& gamma = in(1);
      const std::size_t rows = x.rows(), cols = x.cols();
      if (gamma.size() != cols) {
        fail("gamma of size " + std::to_string(gamma.size()) +
             " does not match " + shape_string(x.shape()));
      }
      Tensor& running = buffers_[n.buffer];
      if (running.size() == 0) {
        running.reset({2, cols});
        for (std::size_t c = 0; c < cols; ++c) {
          running[c] = 0.0;
          running[cols + c] = 1.0;
        }
      } else if (running.cols() != cols) {
        fail("running statistics '" + n.buffer + "' have the wrong width");
      }
      // cache: normalized x; cache2: row 0 mean, row 1 variance, row 2 1/std
      n.cache.reset(x.shape());
      n.cache2.reset({3, cols});
      for (std::size_t c = 0; c < cols; ++c) {
        double mu = running[c];
        double var = running[cols + c];
        if (training_) {
          mu = 0.0;
          for (std::size_t r = 0; r < rows; ++r) mu += x[r * cols + c];
          mu /= static_cast<double>(rows);
          var = 0.0;
          for (std::size_t r = 0; r < rows; ++r) {
            const double d = x[r * cols + c] - mu;
            var += d * d;
          }
          var /= static_cast<double>(rows);
        }
        n.cache2[c] = mu;
        n.cache2[cols + c] = var;
        n.cache2[2 * cols + c] = 1.0 / std::sqrt(var + n.scalar);
      }
      out.reset(x.shape());
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) {
          const double xhat =
              (x[r * cols + c] - n.cache2[c]) * n.cache2[2 * cols + c];
          n.cache[r * cols + c] = xhat;
          out[r * cols + c] = gamma[c] * xhat;
        }
      }
      // begin: statistics pending a fold; end: batch statistics were used
      n.begin = training_ ? 1 : 0;
      n.end = training_ ? 1 : 0;
      return;
    }
  }
}

void Graph::update_running_stats(double momentum) {
  for (Node& n : nodes_) {
    if (n.kind != OpKind::BatchNorm || n.begin != 1) continue;
    Tensor& running = buffers_[n.buffer];
    const std::size_t cols = running.cols();
    for (std::size_t c = 0; c < cols; ++c) {
      running[c] = (1.0 - momentum) * running[c] + momentum * n.cache2[c];
      running[cols + c] =
          (1.0 - momentum) * running[cols + c] + momentum * n.cache2[cols + c];
    }
    n.begin = 0;
  }
}

TensorMap Graph::backprop(Var loss) {
  if (loss.id >= nodes_.size()) throw std::out_of_range("unknown loss node");
  if (nodes_[loss.id].value.size() != 1) {
    throw ShapeError("loss must be scalar, got shape " +
                         shape_string(nodes_[loss.id].value.shape()),
                     loss.id, nodes_[loss.id].kind);
  }
  needs_grad_.assign(nodes_.size(), 0);
  for (std::size_t id = 0; id < nodes_.size(); ++id) {
    Node& n = nodes_[id];
    if (n.kind == OpKind::Parameter) {
      needs_grad_[id] = n.trainable;
      n.grad.reset(n.value.shape());
      n.grad.fill(0.0);
      continue;
    }
    for (std::size_t in : n.inputs) {
      if (needs_grad_[in]) {
        needs_grad_[id] = 1;
        break;
      }
    }
    if (needs_grad_[id] && id <= loss.id) {
      n.grad.reset(n.value.shape());
      n.grad.fill(0.0);
    }
  }
  if (needs_grad_[loss.id]) {
    nodes_[loss.id].grad.fill(1.0);
    for (std::size_t id = loss.id + 1; id-- > 0;) {
      if (needs_grad_[id] && !nodes_[id].inputs.empty()) backward_node(id);
    }
  }
  TensorMap grads;
  for (const auto& [name, id] : leaves_) {
    if (nodes_[id].kind == OpKind::Parameter && nodes_[id].trainable) {
      grads[name] = nodes_[id].grad;
    }
  }
  return grads;
}

const Tensor& Graph::gradient(const std::string& leaf_name) const {
  auto it = leaves_.find(leaf_name);
  if (it == leaves_.end()) {
    if (named_.count(leaf_name)) {
      throw std::invalid_argument("gradient requested for non-leaf '" +
                                  leaf_name + "'");
    }
    throw std::invalid_argument("no leaf named '" + leaf_name + "'");
  }
  const Node& n = nodes_[it->second];
  if (n.kind != OpKind::Parameter) {
    throw std::invalid_argument("'" + leaf_name +
                                "' is an input and has no gradient");
  }
  return n.grad;
}

void Graph::backward_node(std::size_t id) {
  Node& n = nodes_[id];
  const Tensor& g = n.grad;
  const Tensor& y = n.value;
  auto wants = [&](std::size_t k) { return needs_grad_[n.inputs[k]] != 0; };
  auto x = [&](std::size_t k) -> const Tensor& {
    return nodes_[n.inputs[k]].value;
  };
  auto dx = [&](std::size_t k) -> Tensor& { return nodes_[n.inputs[k]].grad; };

  switch (n.kind) {
    case OpKind::Input:
    case OpKind::Parameter:
    case OpKind::Constant:
      return;
    case OpKind::Add:
      if (wants(0)) for (std::size_t i = 0; i < g.size(); ++i) dx(0)[i] += g[i];
      if (wants(1)) for (std::size_t i = 0; i < g.size(); ++i) dx(1)[i] += g[i];
      return;
    case OpKind::Sub:
      if (wants(0)) for (std::size_t i = 0; i < g.size(); ++i) dx(0)[i] += g[i];
      if (wants(1)) for (std::size_t i = 0; i < g.size(); ++i) dx(1)[i] -= g[i];
      return;
    case OpKind::Mul:
      if (wants(0)) {
        for (std::size_t i = 0; i < g.size(); ++i) dx(0)[i] += g[i] * x(1)[i];
      }
      if (wants(1)) {
        for (std::size_t i = 0; i < g.size(); ++i) dx(1)[i] += g[i] * x(0)[i];
      }
      return;
    case OpKind::AddRow: {
      const std::size_t rows = g.rows(), cols = g.cols();
      if (wants(0)) for (std::size_t i = 0; i < g.size(); ++i) dx(0)[i] += g[i];
      if (wants(1)) {
        Tensor& d = dx(1);
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t c = 0; c < cols; ++c) d[c] += g[r * cols + c];
        }
      }
      return;
    }
    case OpKind::MulCol: {
      const std::size_t rows = g.rows(), cols = g.cols();
      const Tensor& col = x(0);
      const Tensor& b = x(1);
      if (wants(0)) {
        Tensor& d = dx(0);
        for (std::size_t r = 0; r < rows; ++r) {
          double acc = 0.0;
          for (std::size_t c = 0; c < cols; ++c) {
            acc += g[r * cols + c] * b[r * cols + c];
          }
          d[r] += acc;
        }
      }
      if (wants(1)) {
        Tensor& d = dx(1);
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t c = 0; c < cols; ++c) {
            d[r * cols + c] += g[r * cols + c] * col[r];
          }
        }
      }
      return;
    }
    case OpKind::Scale:
      for (std::size_t i = 0; i < g.size(); ++i) dx(0)[i] += n.scalar * g[i];
      return;
    case OpKind::AddScalar:
      for (std::size_t i = 0; i < g.size(); ++i) dx(0)[i] += g[i];
      return;
    case OpKind::MatMul:
      if (wants(0)) {
        as_matrix(dx(0)).noalias() += as_matrix(g) * as_matrix(x(1)).transpose();
      }
      if (wants(1)) {
        as_matrix(dx(1)).noalias() += as_matrix(x(0)).transpose() * as_matrix(g);
      }
      return;
    case OpKind::Sigmoid:
      for (std::size_t i = 0; i < g.size(); ++i) {
        dx(0)[i] += g[i] * y[i] * (1.0 - y[i]);
      }
      return;
    case OpKind::Tanh:
      for (std::size_t i = 0; i < g.size(); ++i) {
        dx(0)[i] += g[i] * (1.0 - y[i] * y[i]);
      }
      return;
    case OpKind::Exp:
      for (std::size_t i = 0; i < g.size(); ++i) dx(0)[i] += g[i] * y[i];
      return;
    case OpKind::Log:
      for (std::size_t i = 0; i < g.size(); ++i) {
        dx(0)[i] += g[i] / (x(0)[i] + n.scalar);
      }
      return;
    case OpKind::Square:
      for (std::size_t i = 0; i < g.size(); ++i) {
        dx(0)[i] += 2.0 * g[i] * x(0)[i];
      }
      return;
    case OpKind::SoftmaxRows: {
      const std::size_t rows = g.rows(), cols = g.cols();
      Tensor& d = dx(0);
      for (std::size_t r = 0; r < rows; ++r) {
        double dot = 0.0;
        for (std::size_t c = 0; c < cols; ++c) {
          dot += g[r * cols + c] * y[r * cols + c];
        }
        for (std::size_t c = 0; c < cols; ++c) {
          d[r * cols + c] += y[r * cols + c] * (g[r * cols + c] - dot);
        }
      }
      return;
    }
    case OpKind::ConcatCols: {
      const std::size_t rows = g.rows(), cols = g.cols();
      std::size_t offset = 0;
      for (std::size_t k = 0; k < n.inputs.size(); ++k) {
        const std::size_t pc = x(k).cols();
        if (wants(k)) {
          Tensor& d = dx(k);
          for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t c = 0; c < pc; ++c) {
              d[r * pc + c] += g[r * cols + offset + c];
            }
          }
        }
        offset += pc;
      }
      return;
    }
    case OpKind::ConcatRows: {
      std::size_t offset = 0;
      for (std::size_t k = 0; k < n.inputs.size(); ++k) {
        const std::size_t size = x(k).size();
        if (wants(k)) {
          Tensor& d = dx(k);
          for (std::size_t i = 0; i < size; ++i) d[i] += g[offset + i];
        }
        offset += size;
      }
      return;
    }
    case OpKind::SliceCols: {
      Tensor& d = dx(0);
      const std::size_t rows = g.rows(), w = g.cols(), cols = d.cols();
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < w; ++c) {
          d[r * cols + n.begin + c] += g[r * w + c];
        }
      }
      return;
    }
    case OpKind::SliceRows: {
      Tensor& d = dx(0);
      const std::size_t offset = n.begin * d.cols();
      for (std::size_t i = 0; i < g.size(); ++i) d[offset + i] += g[i];
      return;
    }
    case OpKind::RowBlock: {
      Tensor& d = dx(0);
      const std::size_t offset = n.begin * g.size();
      for (std::size_t i = 0; i < g.size(); ++i) d[offset + i] += g[i];
      return;
    }
    case OpKind::Sum:
    case OpKind::Mean: {
      Tensor& d = dx(0);
      const double s = n.kind == OpKind::Sum
                           ? g[0]
                           : g[0] / static_cast<double>(d.size());
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += s;
      return;
    }
    case OpKind::BatchNorm: {
      const Tensor& gamma = x(1);
      const Tensor& xhat = n.cache;
      const std::size_t rows = g.rows(), cols = g.cols();
      const bool batch_stats = n.end == 1;
      for (std::size_t c = 0; c < cols; ++c) {
        double sum_g = 0.0, sum_gx = 0.0;
        for (std::size_t r = 0; r < rows; ++r) {
          sum_g += g[r * cols + c];
          sum_gx += g[r * cols + c] * xhat[r * cols + c];
        }
        if (wants(1)) dx(1)[c] += sum_gx;
        if (!wants(0)) continue;
        Tensor& d = dx(0);
        const double inv_std = n.cache2[2 * cols + c];
        const double scale = gamma[c] * inv_std;
        if (batch_stats) {
          const double m = static_cast<double>(rows);
          for (std::size_t r = 0; r < rows; ++r) {
            d[r * cols + c] += scale * (g[r * cols + c] - sum_g / m -
                                        xhat[r * cols + c] * sum_gx / m);
          }
        } else {
          for (std::size_t r = 0; r < rows; ++r) {
            d[r * cols + c] += scale * g[r * cols + c];
          }
        }
      }
      return;
    }
  }
}

CheckReport grad_check(Graph& graph, Var loss, double step, double tol,
                       const GroupFn& group_of, double floor) {
  if (!(step > 0.0)) throw std::invalid_argument("grad_check step must be > 0");
  auto group = [&](const std::string& name) {
    if (group_of) return group_of(name);
    return name.substr(0, name.find('.'));
  };

  graph.forward();
  const double first = graph.value(loss).item();
  graph.forward();
  const double second = graph.value(loss).item();
  if (std::memcmp(&first, &second, sizeof(double)) != 0) {
    throw std::runtime_error(
        "non-deterministic forward: two evaluations of the loss differ");
  }

  CheckReport report;
  report.tolerance = tol;
  const TensorMap analytic = graph.backprop(loss);
  std::map<std::string, GroupError> groups;

  for (const auto& [name, grad] : analytic) {
    Tensor param = graph.leaf_value(name);
    GroupError& ge = groups[group(name)];
    ge.group = group(name);
    for (std::size_t i = 0; i < param.size(); ++i) {
      const double saved = param[i];
      param[i] = saved + step;
      graph.bind(name, param);
      graph.forward();
      const double up = graph.value(loss).item();
      param[i] = saved - step;
      graph.bind(name, param);
      graph.forward();
      const double down = graph.value(loss).item();
      param[i] = saved;

      const double numeric = (up - down) / (2.0 * step);
      const double denom =
          std::max({std::abs(grad[i]), std::abs(numeric), floor});
      const double rel = std::abs(grad[i] - numeric) / denom;
      ++ge.checked;
      if (rel > ge.max_relative_error || ge.worst_parameter.empty()) {
        ge.max_relative_error = rel;
        ge.worst_parameter = name;
        ge.worst_index = i;
      }
    }
    graph.bind(name, param);
  }
  graph.forward();

  for (auto& [_, ge] : groups) {
    report.max_relative_error =
        std::max(report.max_relative_error, ge.max_relative_error);
    report.groups.push_back(ge);
  }
  report.passed = report.max_relative_error < tol;
  return report;
}

}  // namespace sleepstage
