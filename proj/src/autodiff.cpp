#include "lorp/autodiff.hpp"

#include <cmath>

namespace lorp::ad {

const char* op_name(Op op) {
    switch (op) {
        case Op::Constant: return "constant";
        case Op::Parameter: return "parameter";
        case Op::Input: return "input";
        case Op::MatMul: return "matmul";
        case Op::Add: return "add";
        case Op::Sub: return "sub";
        case Op::Hadamard: return "hadamard";
        case Op::Scale: return "scale";
        case Op::AddRow: return "add_row";
        case Op::Gelu: return "gelu";
        case Op::SoftmaxRows: return "softmax_rows";
        case Op::LayerNormRows: return "layer_norm_rows";
        case Op::SliceCols: return "slice_cols";
        case Op::ConcatCols: return "concat_cols";
        case Op::SumAll: return "sum_all";
        case Op::MeanAll: return "mean_all";
        case Op::Embed: return "embed";
        case Op::Rotary: return "rotary";
        case Op::Transpose: return "transpose";
    }
    return "?";
}

namespace {

[[noreturn]] void build_error(const std::string& what, int node_index) {
    throw std::invalid_argument("graph build: " + what + " (node " + std::to_string(node_index) + ")");
}

double gelu_scalar(double x) { return 0.5 * x * (1.0 + std::erf(x / M_SQRT2)); }

double gelu_grad_scalar(double x) {
    // d/dx [0.5 x (1 + erf(x/sqrt(2)))] = 0.5 (1 + erf(x/sqrt2)) + x * pdf(x)
    static const double inv_sqrt_2pi = 0.3989422804014326779;
    return 0.5 * (1.0 + std::erf(x / M_SQRT2)) + x * inv_sqrt_2pi * std::exp(-0.5 * x * x);
}

}  // namespace

// ---------------------------------------------------------------------------
// GraphBuilder

NodeId GraphBuilder::push(Node n) {
    if (built_) throw std::logic_error("graph build: builder already consumed");
    nodes_.push_back(std::move(n));
    return NodeId{static_cast<int>(nodes_.size()) - 1};
}

const Node& GraphBuilder::at(NodeId id) const {
    if (!id.valid() || id.index >= static_cast<int>(nodes_.size()))
        throw std::invalid_argument("graph build: invalid node id");
    return nodes_[static_cast<size_t>(id.index)];
}

int GraphBuilder::rows(NodeId id) const { return at(id).rows; }
int GraphBuilder::cols(NodeId id) const { return at(id).cols; }

NodeId GraphBuilder::constant(Matrix m) {
    Node n{Op::Constant, {}, static_cast<int>(m.rows()), static_cast<int>(m.cols())};
    n.constant = std::move(m);
    return push(std::move(n));
}

NodeId GraphBuilder::parameter(const std::string& name, int r, int c) {
    if (params_.count(name)) throw std::invalid_argument("graph build: duplicate parameter '" + name + "'");
    if (r < 1 || c < 1) build_error("parameter shape must be positive", static_cast<int>(nodes_.size()));
    Node n{Op::Parameter, {}, r, c};
    n.name = name;
    NodeId id = push(std::move(n));
    params_[name] = id.index;
    return id;
}

NodeId GraphBuilder::input(const std::string& name, int r, int c) {
    if (inputs_.count(name)) throw std::invalid_argument("graph build: duplicate input '" + name + "'");
    if (r < 1 || c < 1) build_error("input shape must be positive", static_cast<int>(nodes_.size()));
    Node n{Op::Input, {}, r, c};
    n.name = name;
    NodeId id = push(std::move(n));
    inputs_[name] = id.index;
    return id;
}

NodeId GraphBuilder::matmul(NodeId a, NodeId b) {
    if (cols(a) != rows(b)) build_error("matmul inner dimension mismatch", static_cast<int>(nodes_.size()));
    return push(Node{Op::MatMul, {a.index, b.index}, rows(a), cols(b)});
}

NodeId GraphBuilder::add(NodeId a, NodeId b) {
    if (rows(a) != rows(b) || cols(a) != cols(b))
        build_error("add shape mismatch", static_cast<int>(nodes_.size()));
    return push(Node{Op::Add, {a.index, b.index}, rows(a), cols(a)});
}

NodeId GraphBuilder::sub(NodeId a, NodeId b) {
    if (rows(a) != rows(b) || cols(a) != cols(b))
        build_error("sub shape mismatch", static_cast<int>(nodes_.size()));
    return push(Node{Op::Sub, {a.index, b.index}, rows(a), cols(a)});
}

NodeId GraphBuilder::hadamard(NodeId a, NodeId b) {
    if (rows(a) != rows(b) || cols(a) != cols(b))
        build_error("hadamard shape mismatch", static_cast<int>(nodes_.size()));
    return push(Node{Op::Hadamard, {a.index, b.index}, rows(a), cols(a)});
}

NodeId GraphBuilder::scale(NodeId a, double factor) {
    Node n{Op::Scale, {a.index}, rows(a), cols(a)};
    n.scalar = factor;
    return push(std::move(n));
}

NodeId GraphBuilder::add_row(NodeId mat, NodeId row) {
    if (rows(row) != 1 || cols(row) != cols(mat))
        build_error("add_row expects a 1 x cols(mat) row", static_cast<int>(nodes_.size()));
    return push(Node{Op::AddRow, {mat.index, row.index}, rows(mat), cols(mat)});
}

NodeId GraphBuilder::gelu(NodeId a) { return push(Node{Op::Gelu, {a.index}, rows(a), cols(a)}); }

NodeId GraphBuilder::softmax_rows(NodeId a) {
    return push(Node{Op::SoftmaxRows, {a.index}, rows(a), cols(a)});
}

NodeId GraphBuilder::layer_norm_rows(NodeId x, NodeId gain, NodeId bias, double eps) {
    if (rows(gain) != 1 || cols(gain) != cols(x) || rows(bias) != 1 || cols(bias) != cols(x))
        build_error("layer_norm gain/bias must be 1 x cols(x)", static_cast<int>(nodes_.size()));
    Node n{Op::LayerNormRows, {x.index, gain.index, bias.index}, rows(x), cols(x)};
    n.scalar = eps;
    return push(std::move(n));
}

NodeId GraphBuilder::slice_cols(NodeId a, int begin, int end) {
    if (begin < 0 || end > cols(a) || begin >= end)
        build_error("slice_cols range out of bounds", static_cast<int>(nodes_.size()));
    Node n{Op::SliceCols, {a.index}, rows(a), end - begin};
    n.begin = begin;
    n.end = end;
    return push(std::move(n));
}

NodeId GraphBuilder::concat_cols(const std::vector<NodeId>& parts) {
    if (parts.empty()) build_error("concat_cols of nothing", static_cast<int>(nodes_.size()));
    int r = rows(parts[0]);
    int total = 0;
    std::vector<int> idx;
    for (NodeId p : parts) {
        if (rows(p) != r) build_error("concat_cols row mismatch", static_cast<int>(nodes_.size()));
        total += cols(p);
        idx.push_back(p.index);
    }
    return push(Node{Op::ConcatCols, std::move(idx), r, total});
}

NodeId GraphBuilder::sum_all(NodeId a) { return push(Node{Op::SumAll, {a.index}, 1, 1}); }

NodeId GraphBuilder::mean_all(NodeId a) { return push(Node{Op::MeanAll, {a.index}, 1, 1}); }

NodeId GraphBuilder::embed(NodeId table, NodeId ids) {
    if (cols(ids) != 1) build_error("embed ids must be T x 1", static_cast<int>(nodes_.size()));
    return push(Node{Op::Embed, {table.index, ids.index}, rows(ids), cols(table)});
}

NodeId GraphBuilder::rotary(NodeId a, std::vector<double> positions) {
    if (cols(a) % 2 != 0) build_error("rotary requires even column count", static_cast<int>(nodes_.size()));
    if (static_cast<int>(positions.size()) != rows(a))
        build_error("rotary needs one position per row", static_cast<int>(nodes_.size()));
    Node n{Op::Rotary, {a.index}, rows(a), cols(a)};
    n.positions = std::move(positions);
    return push(std::move(n));
}

NodeId GraphBuilder::transpose(NodeId a) {
    return push(Node{Op::Transpose, {a.index}, cols(a), rows(a)});
}

void GraphBuilder::mark_output(const std::string& name, NodeId id) {
    at(id);
    if (outputs_.count(name)) throw std::invalid_argument("graph build: duplicate output '" + name + "'");
    outputs_[name] = id.index;
}

Graph GraphBuilder::build() {
    if (built_) throw std::logic_error("graph build: builder already consumed");
    built_ = true;
    Graph g;
    g.nodes_ = std::move(nodes_);
    g.params_ = std::move(params_);
    g.inputs_ = std::move(inputs_);
    g.outputs_ = std::move(outputs_);
    return g;
}

// ---------------------------------------------------------------------------
// Graph

int Graph::output_node(const std::string& name) const {
    auto it = outputs_.find(name);
    if (it == outputs_.end()) throw std::invalid_argument("graph: unknown output '" + name + "'");
    return it->second;
}

std::pair<int, int> Graph::param_shape(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw std::invalid_argument("graph: unknown parameter '" + name + "'");
    const Node& n = nodes_[static_cast<size_t>(it->second)];
    return {n.rows, n.cols};
}

std::pair<int, int> Graph::input_shape(const std::string& name) const {
    auto it = inputs_.find(name);
    if (it == inputs_.end()) throw std::invalid_argument("graph: unknown input '" + name + "'");
    const Node& n = nodes_[static_cast<size_t>(it->second)];
    return {n.rows, n.cols};
}

// ---------------------------------------------------------------------------
// ParamView

ParamView::ParamView(std::initializer_list<const NamedMatrices*> stores) {
    for (const NamedMatrices* s : stores)
        if (s) stores_.push_back(s);
}

ParamView::ParamView(const NamedMatrices& single) { stores_.push_back(&single); }

void ParamView::add(const NamedMatrices* store) {
    if (store) stores_.push_back(store);
}

const Matrix* ParamView::find(const std::string& name) const {
    for (const NamedMatrices* s : stores_) {
        auto it = s->find(name);
        if (it != s->end()) return &it->second;
    }
    return nullptr;
}

const Matrix& ParamView::at(const std::string& name) const {
    const Matrix* m = find(name);
    if (!m) throw std::invalid_argument("params: missing '" + name + "'");
    return *m;
}

// ---------------------------------------------------------------------------
// Rotary kernel

Matrix rotary_apply(const Matrix& x, const std::vector<double>& positions, bool inverse,
                    double base) {
    const int d = static_cast<int>(x.cols());
    if (d % 2 != 0) throw std::invalid_argument("rotary: feature dimension must be even");
    if (static_cast<int>(positions.size()) != x.rows())
        throw std::invalid_argument("rotary: one position per row required");
    Matrix out(x.rows(), d);
    const double sign = inverse ? -1.0 : 1.0;
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
        for (int p = 0; p < d / 2; ++p) {
            double theta = std::pow(base, -2.0 * p / d);
            double angle = sign * positions[static_cast<size_t>(r)] * theta;
            double c = std::cos(angle), s = std::sin(angle);
            double x0 = x(r, 2 * p), x1 = x(r, 2 * p + 1);
            out(r, 2 * p) = c * x0 - s * x1;
            out(r, 2 * p + 1) = s * x0 + c * x1;
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Forward

namespace {

Matrix softmax_rows_value(const Matrix& x) {
    Matrix y(x.rows(), x.cols());
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
        double mx = x.row(r).maxCoeff();
        Eigen::RowVectorXd e = (x.row(r).array() - mx).exp();
        y.row(r) = e / e.sum();
    }
    return y;
}

}  // namespace

ForwardResult forward_eval(const Graph& g, const ParamView& params, const NamedMatrices& inputs) {
    ForwardResult fwd;
    fwd.values.resize(static_cast<size_t>(g.node_count()));
    for (int i = 0; i < g.node_count(); ++i) {
        const Node& n = g.node(i);
        Matrix& out = fwd.values[static_cast<size_t>(i)];
        auto in = [&](int k) -> const Matrix& {
            return fwd.values[static_cast<size_t>(n.inputs[static_cast<size_t>(k)])];
        };
        switch (n.op) {
            case Op::Constant:
                out = n.constant;
                break;
            case Op::Parameter: {
                const Matrix& v = params.at(n.name);
                if (v.rows() != n.rows || v.cols() != n.cols)
                    throw std::invalid_argument("forward: parameter '" + n.name + "' shape mismatch at node " +
                                                std::to_string(i));
                out = v;
                break;
            }
            case Op::Input: {
                auto it = inputs.find(n.name);
                if (it == inputs.end())
                    throw std::invalid_argument("forward: missing input '" + n.name + "'");
                if (it->second.rows() != n.rows || it->second.cols() != n.cols)
                    throw std::invalid_argument("forward: input '" + n.name + "' shape mismatch at node " +
                                                std::to_string(i));
                out = it->second;
                break;
            }
            case Op::MatMul:
                out.noalias() = in(0) * in(1);
                break;
            case Op::Add:
                out = in(0) + in(1);
                break;
            case Op::Sub:
                out = in(0) - in(1);
                break;
            case Op::Hadamard:
                out = in(0).cwiseProduct(in(1));
                break;
            case Op::Scale:
                out = in(0) * n.scalar;
                break;
            case Op::AddRow:
                out = in(0).rowwise() + in(1).row(0);
                break;
            case Op::Gelu:
                out = in(0).unaryExpr([](double v) { return gelu_scalar(v); });
                break;
            case Op::SoftmaxRows:
                out = softmax_rows_value(in(0));
                break;
            case Op::LayerNormRows: {
                const Matrix& x = in(0);
                const double eps = n.scalar;
                out.resize(x.rows(), x.cols());
                for (Eigen::Index r = 0; r < x.rows(); ++r) {
                    double mu = x.row(r).mean();
                    double var = (x.row(r).array() - mu).square().mean();
                    double inv = 1.0 / std::sqrt(var + eps);
                    out.row(r) = ((x.row(r).array() - mu) * inv) * in(1).row(0).array() +
                                 in(2).row(0).array();
                }
                break;
            }
            case Op::SliceCols:
                out = in(0).middleCols(n.begin, n.end - n.begin);
                break;
            case Op::ConcatCols: {
                out.resize(n.rows, n.cols);
                int c0 = 0;
                for (size_t k = 0; k < n.inputs.size(); ++k) {
                    const Matrix& part = in(static_cast<int>(k));
                    out.middleCols(c0, part.cols()) = part;
                    c0 += static_cast<int>(part.cols());
                }
                break;
            }
            case Op::SumAll:
                out.resize(1, 1);
                out(0, 0) = in(0).sum();
                break;
            case Op::MeanAll:
                out.resize(1, 1);
                out(0, 0) = in(0).mean();
                break;
            case Op::Embed: {
                const Matrix& table = in(0);
                const Matrix& ids = in(1);
                out.resize(ids.rows(), table.cols());
                for (Eigen::Index r = 0; r < ids.rows(); ++r) {
                    long idx = std::lround(ids(r, 0));
                    if (idx < 0 || idx >= table.rows())
                        throw std::invalid_argument("forward: embed id " + std::to_string(idx) +
                                                    " out of range at node " + std::to_string(i));
                    out.row(r) = table.row(idx);
                }
                break;
            }
            case Op::Rotary:
                out = rotary_apply(in(0), n.positions);
                break;
            case Op::Transpose:
                out = in(0).transpose();
                break;
        }
        if (!out.allFinite())
            throw std::runtime_error("forward: non-finite value at node " + std::to_string(i) + " (" +
                                     op_name(n.op) + ")");
    }
    return fwd;
}

const Matrix& output_value(const Graph& g, const ForwardResult& fwd, const std::string& name) {
    return fwd.values[static_cast<size_t>(g.output_node(name))];
}

// ---------------------------------------------------------------------------
// Backward

NamedMatrices backward(const Graph& g, const ForwardResult& fwd, const std::string& output_name,
                       const std::vector<std::string>& leaf_inputs) {
    if (static_cast<int>(fwd.values.size()) != g.node_count())
        throw std::logic_error("backward: forward_eval result does not match graph");
    const int out_node = g.output_node(output_name);
    const Node& out = g.node(out_node);
    if (out.rows != 1 || out.cols != 1)
        throw std::invalid_argument("backward: output '" + output_name + "' is not scalar");

    std::vector<Matrix> grads(static_cast<size_t>(g.node_count()));
    std::vector<bool> has_grad(static_cast<size_t>(g.node_count()), false);
    auto accumulate = [&](int node, const Matrix& delta) {
        size_t k = static_cast<size_t>(node);
        if (!has_grad[k]) {
            grads[k] = delta;
            has_grad[k] = true;
        } else {
            grads[k] += delta;
        }
    };
    grads[static_cast<size_t>(out_node)] = Matrix::Ones(1, 1);
    has_grad[static_cast<size_t>(out_node)] = true;

    for (int i = out_node; i >= 0; --i) {
        if (!has_grad[static_cast<size_t>(i)]) continue;
        const Node& n = g.node(i);
        const Matrix& dy = grads[static_cast<size_t>(i)];
        auto val = [&](int k) -> const Matrix& {
            return fwd.values[static_cast<size_t>(n.inputs[static_cast<size_t>(k)])];
        };
        auto nid = [&](int k) { return n.inputs[static_cast<size_t>(k)]; };
        switch (n.op) {
            case Op::Constant:
            case Op::Parameter:
            case Op::Input:
                break;
            case Op::MatMul:
                accumulate(nid(0), dy * val(1).transpose());
                accumulate(nid(1), val(0).transpose() * dy);
                break;
            case Op::Add:
                accumulate(nid(0), dy);
                accumulate(nid(1), dy);
                break;
            case Op::Sub:
                accumulate(nid(0), dy);
                accumulate(nid(1), -dy);
                break;
            case Op::Hadamard:
                accumulate(nid(0), dy.cwiseProduct(val(1)));
                accumulate(nid(1), dy.cwiseProduct(val(0)));
                break;
            case Op::Scale:
                accumulate(nid(0), dy * n.scalar);
                break;
            case Op::AddRow:
                accumulate(nid(0), dy);
                accumulate(nid(1), dy.colwise().sum());
                break;
            case Op::Gelu: {
                const Matrix& x = val(0);
                accumulate(nid(0), dy.cwiseProduct(x.unaryExpr(
                                       [](double v) { return gelu_grad_scalar(v); })));
                break;
            }
            case Op::SoftmaxRows: {
                const Matrix& y = fwd.values[static_cast<size_t>(i)];
                Matrix dx(y.rows(), y.cols());
                for (Eigen::Index r = 0; r < y.rows(); ++r) {
                    double dot = dy.row(r).cwiseProduct(y.row(r)).sum();
                    dx.row(r) = (dy.row(r).array() - dot) * y.row(r).array();
                }
                accumulate(nid(0), dx);
                break;
            }
            case Op::LayerNormRows: {
                const Matrix& x = val(0);
                const Eigen::RowVectorXd gain = val(1).row(0);
                const double eps = n.scalar;
                const int m = static_cast<int>(x.cols());
                Matrix dx(x.rows(), x.cols());
                Eigen::RowVectorXd dgain = Eigen::RowVectorXd::Zero(m);
                Eigen::RowVectorXd dbias = Eigen::RowVectorXd::Zero(m);
                for (Eigen::Index r = 0; r < x.rows(); ++r) {
                    double mu = x.row(r).mean();
                    double var = (x.row(r).array() - mu).square().mean();
                    double inv = 1.0 / std::sqrt(var + eps);
                    Eigen::RowVectorXd xhat = (x.row(r).array() - mu) * inv;
                    Eigen::RowVectorXd gdy = dy.row(r).cwiseProduct(gain);
                    double mean_gdy = gdy.mean();
                    double mean_gdy_xhat = gdy.cwiseProduct(xhat).mean();
                    dx.row(r) = (gdy.array() - mean_gdy - xhat.array() * mean_gdy_xhat) * inv;
                    dgain += dy.row(r).cwiseProduct(xhat);
                    dbias += dy.row(r);
                }
                accumulate(nid(0), dx);
                accumulate(nid(1), dgain);
                accumulate(nid(2), dbias);
                break;
            }
            case Op::SliceCols: {
                Matrix dx = Matrix::Zero(val(0).rows(), val(0).cols());
                dx.middleCols(n.begin, n.end - n.begin) = dy;
                accumulate(nid(0), dx);
                break;
            }
            case Op::ConcatCols: {
                int c0 = 0;
                for (size_t k = 0; k < n.inputs.size(); ++k) {
                    int w = static_cast<int>(val(static_cast<int>(k)).cols());
                    accumulate(n.inputs[k], dy.middleCols(c0, w));
                    c0 += w;
                }
                break;
            }
            case Op::SumAll:
                accumulate(nid(0), Matrix::Constant(val(0).rows(), val(0).cols(), dy(0, 0)));
                break;
            case Op::MeanAll:
                accumulate(nid(0), Matrix::Constant(val(0).rows(), val(0).cols(),
                                                    dy(0, 0) / static_cast<double>(val(0).size())));
                break;
            case Op::Embed: {
                const Matrix& table = val(0);
                const Matrix& ids = val(1);
                Matrix dtable = Matrix::Zero(table.rows(), table.cols());
                for (Eigen::Index r = 0; r < ids.rows(); ++r)
                    dtable.row(std::lround(ids(r, 0))) += dy.row(r);
                accumulate(nid(0), dtable);
                break;
            }
            case Op::Rotary:
                // rotations are orthogonal; the adjoint rotates by -angle
                accumulate(nid(0), rotary_apply(dy, n.positions, /*inverse=*/true));
                break;
            case Op::Transpose:
                accumulate(nid(0), dy.transpose());
                break;
        }
    }

    NamedMatrices out_grads;
    for (const auto& [name, node] : g.parameters()) {
        size_t k = static_cast<size_t>(node);
        out_grads[name] = has_grad[k] ? grads[k] : Matrix::Zero(g.node(node).rows, g.node(node).cols);
    }
    for (const std::string& name : leaf_inputs) {
        auto it = g.inputs().find(name);
        if (it == g.inputs().end())
            throw std::invalid_argument("backward: unknown leaf input '" + name + "'");
        size_t k = static_cast<size_t>(it->second);
        out_grads[name] =
            has_grad[k] ? grads[k] : Matrix::Zero(g.node(it->second).rows, g.node(it->second).cols);
    }
    return out_grads;
}

// ---------------------------------------------------------------------------
// Gradient check

double finite_diff_check(const Graph& g, const NamedMatrices& params, const NamedMatrices& inputs,
                         const std::string& output_name, double eps, int samples, Rng& rng) {
    if (eps < 1e-6 || eps > 1e-2) throw std::invalid_argument("finite_diff_check: eps out of [1e-6, 1e-2]");
    ForwardResult fwd = forward_eval(g, ParamView(params), inputs);
    NamedMatrices analytic = backward(g, fwd, output_name);

    std::vector<std::string> names;
    for (const auto& [name, node] : g.parameters()) {
        (void)node;
        names.push_back(name);
    }
    if (names.empty()) return 0.0;

    NamedMatrices perturbed = params;
    double max_rel = 0.0;
    for (int s = 0; s < samples; ++s) {
        const std::string& name = names[static_cast<size_t>(rng.uniform_int(0, static_cast<int>(names.size()) - 1))];
        Matrix& p = perturbed[name];
        int r = rng.uniform_int(0, static_cast<int>(p.rows()) - 1);
        int c = rng.uniform_int(0, static_cast<int>(p.cols()) - 1);
        double saved = p(r, c);
        p(r, c) = saved + eps;
        double up = forward_eval(g, ParamView(perturbed), inputs).values[static_cast<size_t>(g.output_node(output_name))](0, 0);
        p(r, c) = saved - eps;
        double down = forward_eval(g, ParamView(perturbed), inputs).values[static_cast<size_t>(g.output_node(output_name))](0, 0);
        p(r, c) = saved;
        double numeric = (up - down) / (2.0 * eps);
        double a = analytic[name](r, c);
        double rel = std::abs(a - numeric) / (std::abs(a) + std::abs(numeric) + 1e-12);
        max_rel = std::max(max_rel, rel);
    }
    return max_rel;
}

}  // namespace lorp::ad
