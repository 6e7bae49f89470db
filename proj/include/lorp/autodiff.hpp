#pragma once

#include "lorp/common.hpp"

#include <initializer_list>
#include <string>
#include <vector>

namespace lorp::ad {

using lorp::Matrix;
using lorp::NamedMatrices;

enum class Op {
    Constant,
    Parameter,
    Input,
    MatMul,
    Add,
    Sub,
    Hadamard,
    Scale,
    AddRow,        // broadcast a 1 x M row over every row of a T x M matrix
    Gelu,
    SoftmaxRows,
    LayerNormRows,
    SliceCols,
    ConcatCols,
    SumAll,
    MeanAll,
    Embed,         // gather rows of a table by ids held in a T x 1 input
    Rotary,
    Transpose,
};

const char* op_name(Op op);

struct NodeId {
    int index = -1;
    bool valid() const { return index >= 0; }
};

struct Node {
    Op op;
    std::vector<int> inputs;
    int rows = 0;
    int cols = 0;
    double scalar = 0.0;              // Scale factor, LayerNorm epsilon
    int begin = 0, end = 0;           // SliceCols column range [begin, end)
    Matrix constant;                  // Constant payload
    std::vector<double> positions;    // Rotary positions, one per row
    std::string name;                 // Parameter / Input
};

class Graph;

// Builds a graph node by node. Shapes are validated at construction time;
// a mismatch throws with the offending node id in the message.
class GraphBuilder {
public:
    NodeId constant(Matrix m);
    NodeId parameter(const std::string& name, int rows, int cols);
    NodeId input(const std::string& name, int rows, int cols);

    NodeId matmul(NodeId a, NodeId b);
    NodeId add(NodeId a, NodeId b);
    NodeId sub(NodeId a, NodeId b);
    NodeId hadamard(NodeId a, NodeId b);
    NodeId scale(NodeId a, double factor);
    NodeId add_row(NodeId mat, NodeId row);
    NodeId gelu(NodeId a);
    NodeId softmax_rows(NodeId a);
    NodeId layer_norm_rows(NodeId x, NodeId gain, NodeId bias, double eps = 1e-5);
    NodeId slice_cols(NodeId a, int begin, int end);
    NodeId concat_cols(const std::vector<NodeId>& parts);
    NodeId sum_all(NodeId a);
    NodeId mean_all(NodeId a);
    NodeId embed(NodeId table, NodeId ids);
    NodeId rotary(NodeId a, std::vector<double> positions);
    NodeId transpose(NodeId a);

    void mark_output(const std::string& name, NodeId id);

    int rows(NodeId id) const;
    int cols(NodeId id) const;

    Graph build();

private:
    friend class Graph;
    NodeId push(Node n);
    const Node& at(NodeId id) const;
    std::vector<Node> nodes_;
    std::map<std::string, int> params_;
    std::map<std::string, int> inputs_;
    std::map<std::string, int> outputs_;
    bool built_ = false;
};

// Immutable computation graph. Nodes are stored in topological order by
// construction, so forward evaluation is a single pass and reverse-mode
// differentiation is the reverse pass.
class Graph {
public:
    int node_count() const { return static_cast<int>(nodes_.size()); }
    const Node& node(int i) const { return nodes_[static_cast<size_t>(i)]; }
    const std::map<std::string, int>& parameters() const { return params_; }
    const std::map<std::string, int>& inputs() const { return inputs_; }
    const std::map<std::string, int>& outputs() const { return outputs_; }
    int output_node(const std::string& name) const;
    std::pair<int, int> param_shape(const std::string& name) const;
    std::pair<int, int> input_shape(const std::string& name) const;

private:
    friend class GraphBuilder;
    std::vector<Node> nodes_;
    std::map<std::string, int> params_;
    std::map<std::string, int> inputs_;
    std::map<std::string, int> outputs_;
};

// Read-only view over one or more parameter stores, searched in order.
// Lets adapter weights ride alongside frozen base weights without copying.
class ParamView {
public:
    ParamView() = default;
    ParamView(std::initializer_list<const NamedMatrices*> stores);
    explicit ParamView(const NamedMatrices& single);
    void add(const NamedMatrices* store);
    const Matrix* find(const std::string& name) const;
    const Matrix& at(const std::string& name) const;

private:
    std::vector<const NamedMatrices*> stores_;
};

struct ForwardResult {
    std::vector<Matrix> values;  // one per node
    const Matrix& value(NodeId id) const { return values[static_cast<size_t>(id.index)]; }
};

// Evaluates every node. Deterministic: identical inputs give bit-identical
// outputs. Throws on missing/malformed inputs and on non-finite intermediates
// (the message names the offending node).
ForwardResult forward_eval(const Graph& g, const ParamView& params, const NamedMatrices& inputs);

const Matrix& output_value(const Graph& g, const ForwardResult& fwd, const std::string& name);

// Reverse-mode gradients of a scalar output with respect to every parameter
// (zero matrices for parameters not on any path) and, optionally, selected
// leaf inputs. Requires the ForwardResult of the same graph.
NamedMatrices backward(const Graph& g, const ForwardResult& fwd, const std::string& output_name,
                       const std::vector<std::string>& leaf_inputs = {});

// Max relative error between analytic and central-difference gradients over
// sampled parameter coordinates. The independent oracle for the engine.
double finite_diff_check(const Graph& g, const NamedMatrices& params, const NamedMatrices& inputs,
                         const std::string& output_name, double eps, int samples, Rng& rng);

// Kernel shared by the graph op and the standalone rotary API: pairwise 2-D
// rotations with the geometric frequency schedule theta_p = base^(-2p/d).
Matrix rotary_apply(const Matrix& x, const std::vector<double>& positions, bool inverse = false,
                    double base = 10000.0);

}  // namespace lorp::ad
