#pragma once

#include <cstddef>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "sleepstage/tensor.hpp"

namespace sleepstage {

/// Guard added inside every log() used by a loss expression.
inline constexpr double kLogEpsilon = 1e-12;

enum class OpKind {
  Input,      // bound by name; never receives a gradient
  Parameter,  // bound by name; receives a gradient when trainable
  Constant,
  Add,
  Sub,
  Mul,
  AddRow,     // a (N x K) + b (1 x K), b broadcast over rows
  MulCol,     // a (N x 1) * b (N x K), a broadcast over columns
  Scale,
  AddScalar,
  MatMul,
  Sigmoid,
  Tanh,
  Exp,
  Log,        // log(a + attr)
  Square,
  SoftmaxRows,
  ConcatCols,
  ConcatRows,
  SliceCols,
  SliceRows,
  RowBlock,   // block k of n equal row blocks; n must divide the row count
  Sum,
  Mean,
  BatchNorm,  // per-column normalization, batch or running statistics
};

const char* op_name(OpKind kind);

/// Handle to a node inside one Graph.
struct Var {
  std::size_t id = 0;
};

class GraphError : public std::runtime_error {
 public:
  GraphError(const std::string& what, std::size_t node, OpKind kind);
  std::size_t node() const { return node_; }
  OpKind kind() const { return kind_; }

 private:
  std::size_t node_;
  OpKind kind_;
};

class ShapeError : public GraphError {
  using GraphError::GraphError;
};

class NonFiniteError : public GraphError {
  using GraphError::GraphError;
};

using TensorMap = std::map<std::string, Tensor>;

/// Static computation graph with reverse-mode differentiation.
///
/// Nodes are appended in construction order, which is a topological order.
/// The graph is built once and evaluated many times; shapes are resolved at
/// evaluation time, so one graph serves every batch size. A Graph is
/// single-writer: build and evaluate it from one thread.
class Graph {
 public:
  Var input(const std::string& name);
  Var parameter(const std::string& name, bool trainable = true);
  Var constant(Tensor value);

  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  Var add_row(Var a, Var row);
  Var mul_col(Var col, Var b);
  Var scale(Var a, double s);
  Var add_scalar(Var a, double s);
  Var matmul(Var a, Var b);
  Var sigmoid(Var a);
  Var tanh(Var a);
  Var exp(Var a);
  Var log(Var a, double epsilon = 0.0);
  Var square(Var a);
  Var softmax_rows(Var a);
  Var concat_cols(const std::vector<Var>& parts);
  Var concat_rows(const std::vector<Var>& parts);
  Var slice_cols(Var a, std::size_t begin, std::size_t end);
  Var slice_rows(Var a, std::size_t begin, std::size_t end);
  Var row_block(Var a, std::size_t block, std::size_t blocks);
  Var sum(Var a);
  Var mean(Var a);
  // y = gamma * (x - mu) / sqrt(var + eps). In training mode mu/var are the
  // batch statistics over rows; otherwise they are read from the named
  // running-statistics buffer.
  Var batch_norm(Var x, Var gamma, const std::string& buffer, double eps = 1e-5);

  void set_name(Var v, const std::string& name);

  void bind(const std::string& name, const Tensor& value);
  bool has_leaf(const std::string& name) const;
  void set_trainable(const std::string& name, bool trainable);
  bool is_trainable(const std::string& name) const;
  std::vector<std::string> parameter_names() const;
  std::vector<std::string> trainable_names() const;

  void set_training(bool training) { training_ = training; }
  bool training() const { return training_; }
  TensorMap& buffers() { return buffers_; }
  const TensorMap& buffers() const { return buffers_; }
  // Folds the batch statistics of the last training-mode forward pass into
  // the running buffers: running = (1 - momentum) * running + momentum * batch.
  void update_running_stats(double momentum);

  // Computes every node in order. Throws ShapeError / NonFiniteError naming
  // the offending node.
  void forward();
  // Binds every entry of `inputs`, runs forward, and returns the values of
  // all named nodes.
  TensorMap evaluate(const TensorMap& inputs);

  // Reverse pass from a scalar node. Returns one gradient per trainable
  // parameter, shaped like the parameter; unused parameters get zeros.
  TensorMap backprop(Var loss);
  // Gradient of a leaf from the last backprop. Throws for non-leaf names.
  const Tensor& gradient(const std::string& leaf_name) const;

  const Tensor& value(Var v) const;
  const Tensor& leaf_value(const std::string& name) const;
  std::size_t size() const { return nodes_.size(); }
  OpKind kind(Var v) const;
  const std::vector<std::size_t>& inputs_of(Var v) const;

 private:
  struct Node {
    OpKind kind;
    std::vector<std::size_t> inputs;
    double scalar = 0.0;
    std::size_t begin = 0;
    std::size_t end = 0;
    std::string name;
    std::string buffer;
    bool trainable = false;
    Tensor value;
    Tensor grad;
    Tensor cache;  // op-specific forward state
    Tensor cache2;
  };

  Var push(OpKind kind, std::vector<std::size_t> inputs);
  void check(std::size_t id) const;
  void forward_node(std::size_t id);
  void backward_node(std::size_t id);
  std::size_t leaf_id(const std::string& name) const;

  std::vector<Node> nodes_;
  std::map<std::string, std::size_t> leaves_;
  std::map<std::string, std::size_t> named_;
  TensorMap buffers_;
  std::vector<char> needs_grad_;
  bool training_ = true;
};

struct GroupError {
  std::string group;
  double max_relative_error = 0.0;
  std::string worst_parameter;
  std::size_t worst_index = 0;
  std::size_t checked = 0;
};

struct CheckReport {
  std::vector<GroupError> groups;
  double max_relative_error = 0.0;
  double tolerance = 0.0;
  bool passed = true;
};

/// Maps a parameter name to its report group. The default groups by the text
/// before the first '.'.
using GroupFn = std::function<std::string(const std::string&)>;

/// Compares backprop against central finite differences for every entry of
/// every trainable parameter. The relative error of one entry is
/// |analytic - numeric| / max(|analytic|, |numeric|, floor).
CheckReport grad_check(Graph& graph, Var loss, double step, double tol,
                       const GroupFn& group_of = {}, double floor = 1e-6);

}  // namespace sleepstage
