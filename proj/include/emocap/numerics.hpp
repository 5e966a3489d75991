#pragma once

#include <cstddef>
#include <initializer_list>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "emocap/error.hpp"

namespace emocap {

enum class Precision { F32, F64 };

const char* to_string(Precision p) noexcept;
Precision parse_precision(const std::string& text);

using Shape = std::vector<std::size_t>;

/// Row-major dense array of reals. Storage is always double; in F32 mode every
/// value is rounded through float so results match single-precision arithmetic
/// at each operation boundary.
class DenseArray {
public:
    DenseArray() = default;
    explicit DenseArray(Shape shape, double fill = 0.0, Precision precision = Precision::F64);
    DenseArray(Shape shape, std::vector<double> data, Precision precision = Precision::F64);

    static DenseArray matrix(std::size_t rows, std::size_t cols, std::initializer_list<double> values);
    static DenseArray vector(std::initializer_list<double> values);
    static DenseArray scalar(double value);
    static DenseArray identity(std::size_t n);

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    // Matrix view: rank-1 arrays are 1×n, higher ranks fold trailing extents into columns.
    std::size_t rows() const noexcept;
    std::size_t cols() const noexcept;

    Precision precision() const noexcept { return precision_; }
    void set_precision(Precision p);

    std::span<double> data() noexcept { return data_; }
    std::span<const double> data() const noexcept { return data_; }
    std::vector<double>& storage() noexcept { return data_; }
    const std::vector<double>& storage() const noexcept { return data_; }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }
    double& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
    double at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

    std::span<const double> row(std::size_t r) const { return data().subspan(r * cols(), cols()); }
    std::span<double> row(std::size_t r) { return data().subspan(r * cols(), cols()); }

    bool all_finite() const noexcept;
    DenseArray reshaped(Shape shape) const;

    friend bool operator==(const DenseArray& a, const DenseArray& b) {
        return a.shape_ == b.shape_ && a.data_ == b.data_;
    }

private:
    void round_storage();

    Shape shape_;
    std::vector<double> data_;
    Precision precision_ = Precision::F64;
};

std::string shape_string(const Shape& shape);

/// Index of a node inside one ValueGraph.
struct NodeId {
    std::size_t index = 0;
    friend bool operator==(NodeId, NodeId) = default;
};

enum class OpKind {
    Input,
    Constant,
    MatMul,
    Transpose,
    Add,
    Sub,
    Mul,
    Scale,
    DivScalar,
    Exp,
    Log,
    RowSoftmax,
    RowLogSoftmax,
    L2NormalizeRows,
    Sum,
    Mean,
    GatherRows,
    SegmentMean,
    PickElements,
    ClampedExp,
};

inline constexpr double kNormalizeEpsilon = 1e-12;

using Bindings = std::map<std::string, DenseArray>;
using Gradients = std::map<std::string, DenseArray>;

/// Append-only computation graph. Nodes only reference earlier nodes, so
/// creation order is a topological order and the graph is acyclic.
class ValueGraph {
public:
    explicit ValueGraph(Precision precision = Precision::F64) : precision_(precision) {}

    Precision precision() const noexcept { return precision_; }

    // Leaves
    NodeId input(const std::string& name);
    NodeId constant(DenseArray value);

    NodeId matmul(NodeId a, NodeId b);
    NodeId transpose(NodeId a);
    NodeId add(NodeId a, NodeId b);
    NodeId sub(NodeId a, NodeId b);
    NodeId mul(NodeId a, NodeId b);
    NodeId scale(NodeId a, double factor);
    NodeId div_scalar(NodeId a, NodeId scalar);
    NodeId exp(NodeId a);
    NodeId log(NodeId a);
    NodeId row_softmax(NodeId a);
    NodeId row_log_softmax(NodeId a);
    NodeId l2_normalize_rows(NodeId a);
    NodeId sum(NodeId a);
    NodeId mean(NodeId a);
    NodeId gather_rows(NodeId a, std::vector<std::size_t> rows);
    /// Consecutive row segments of the given lengths, each averaged to one row.
    /// Zero-length segments produce zero rows.
    NodeId segment_mean(NodeId a, std::vector<std::size_t> lengths);
    /// Selects entries (r, c) into a 1×k row.
    NodeId pick(NodeId a, std::vector<std::pair<std::size_t, std::size_t>> entries);
    /// clamp(exp(a), lo, hi) for a 1×1 input; gradient is zero where clamped.
    NodeId clamped_exp(NodeId a, double lo, double hi);

    void set_output(NodeId node) { output_ = node; }
    std::optional<NodeId> output() const noexcept { return output_; }

    std::size_t node_count() const noexcept { return nodes_.size(); }
    std::vector<std::string> input_names() const;
    std::optional<NodeId> find_input(const std::string& name) const;

    // Internal node record; exposed only so builders in numerics.cpp can fill it.
    struct Node {
        OpKind op = OpKind::Constant;
        std::vector<NodeId> inputs;
        std::string name;
        DenseArray value;
        double p0 = 0.0;
        double p1 = 0.0;
        std::vector<std::size_t> indices;
        std::vector<std::pair<std::size_t, std::size_t>> entries;
    };

private:
    friend class Evaluation;

    NodeId push(Node node);
    void check_id(NodeId id) const;

    Precision precision_;
    std::vector<Node> nodes_;
    std::map<std::string, NodeId> inputs_by_name_;
    std::optional<NodeId> output_;
};

/// Memoized forward/backward pass over one graph. Leaves can be bound after
/// construction, so some values (e.g. embeddings) can be read before the
/// leaves that only later nodes need are supplied.
class Evaluation {
public:
    Evaluation(const ValueGraph& graph, Bindings bindings);

    void bind(const std::string& name, DenseArray value);
    const DenseArray& value(NodeId node);

    /// Reverse-mode gradient of a scalar node with respect to named leaves.
    /// Leaves the output does not depend on receive zero arrays.
    Gradients backward(NodeId output, const std::vector<std::string>& wrt);

private:
    std::vector<std::size_t> ancestors(NodeId node, bool stop_at_cached) const;
    void compute(std::size_t index);
    const DenseArray& leaf_value(const std::string& name) const;

    const ValueGraph& graph_;
    Bindings bindings_;
    std::vector<std::optional<DenseArray>> values_;
};

DenseArray evaluate(const ValueGraph& graph, const Bindings& bindings);
DenseArray evaluate(const ValueGraph& graph, const Bindings& bindings, NodeId node);
Gradients gradients(const ValueGraph& graph, const Bindings& bindings, const std::vector<std::string>& wrt);

struct GradReport {
    std::map<std::string, double> max_relative_error;
    double step = 0.0;
    Precision precision = Precision::F64;

    double worst() const;
};

/// Compares reverse-mode gradients with central finite differences
/// (sixth-order stencil) for every coordinate of every `wrt` leaf.
/// Relative error per coordinate is |a - n| / max(|a|, |n|, 1e-8).
/// `analytic_sign` is a fault-injection hook for negative-control tests.
GradReport check_gradients(const ValueGraph& graph, const Bindings& bindings, const std::vector<std::string>& wrt,
                           double step = 1e-3, double analytic_sign = 1.0);

// Helpers on concrete arrays, used outside graphs (mining, evaluation).
DenseArray matmul(const DenseArray& a, const DenseArray& b);
DenseArray transpose(const DenseArray& a);
DenseArray l2_normalize_rows(const DenseArray& a);
double dot(std::span<const double> a, std::span<const double> b);
double norm(std::span<const double> a);
DenseArray cosine_matrix(const DenseArray& a, const DenseArray& b);
DenseArray vstack(std::span<const DenseArray> parts);

} // namespace emocap
