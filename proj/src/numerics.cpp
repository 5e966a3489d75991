#include "emocap/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

namespace emocap {

const char* to_string(Precision p) noexcept { return p == Precision::F32 ? "f32" : "f64"; }

Precision parse_precision(const std::string& text) {
    if (text == "f32") return Precision::F32;
    if (text == "f64") return Precision::F64;
    throw Error(ErrorKind::ConfigInvalid, "precision must be f32 or f64, got '" + text + "'");
}

std::string shape_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ']';
    return os.str();
}

namespace {

std::size_t shape_product(const Shape& shape) {
    std::size_t n = 1;
    for (auto e : shape) n *= e;
    return n;
}

void require(bool ok, const std::string& what) {
    if (!ok) throw Error(ErrorKind::ShapeMismatch, what);
}

} // namespace

// ---------------------------------------------------------------- DenseArray

DenseArray::DenseArray(Shape shape, double fill, Precision precision)
    : shape_(std::move(shape)), data_(shape_product(shape_), fill), precision_(precision) {
    for (auto e : shape_) require(e > 0, "array extents must be positive, got " + shape_string(shape_));
    round_storage();
}

DenseArray::DenseArray(Shape shape, std::vector<double> data, Precision precision)
    : shape_(std::move(shape)), data_(std::move(data)), precision_(precision) {
    for (auto e : shape_) require(e > 0, "array extents must be positive, got " + shape_string(shape_));
    require(shape_product(shape_) == data_.size(),
            "shape " + shape_string(shape_) + " does not match " + std::to_string(data_.size()) + " values");
    round_storage();
}

DenseArray DenseArray::matrix(std::size_t rows, std::size_t cols, std::initializer_list<double> values) {
    return DenseArray({rows, cols}, std::vector<double>(values));
}

DenseArray DenseArray::vector(std::initializer_list<double> values) {
    return DenseArray({values.size()}, std::vector<double>(values));
}

DenseArray DenseArray::scalar(double value) { return DenseArray({1, 1}, std::vector<double>{value}); }

DenseArray DenseArray::identity(std::size_t n) {
    DenseArray out({n, n});
    for (std::size_t i = 0; i < n; ++i) out.at(i, i) = 1.0;
    return out;
}

std::size_t DenseArray::rows() const noexcept {
    if (shape_.empty()) return 0;
    return shape_.size() == 1 ? 1 : shape_[0];
}

std::size_t DenseArray::cols() const noexcept {
    if (shape_.empty()) return 0;
    return shape_.size() == 1 ? shape_[0] : data_.size() / shape_[0];
}

void DenseArray::set_precision(Precision p) {
    precision_ = p;
    round_storage();
}

void DenseArray::round_storage() {
    if (precision_ != Precision::F32) return;
    for (auto& v : data_) v = static_cast<double>(static_cast<float>(v));
}

bool DenseArray::all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

DenseArray DenseArray::reshaped(Shape shape) const {
    return DenseArray(std::move(shape), data_, precision_);
}

// ------------------------------------------------------------- array helpers

double dot(std::span<const double> a, std::span<const double> b) {
    require(a.size() == b.size(), "dot of mismatched lengths");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

double norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

DenseArray matmul(const DenseArray& a, const DenseArray& b) {
    const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
    require(k == b.rows(), "matmul " + shape_string(a.shape()) + " x " + shape_string(b.shape()));
    DenseArray out({n, m});
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    double* po = out.data().data();
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
            const double av = pa[i * k + p];
            if (av == 0.0) continue;
            const double* brow = pb + p * m;
            double* orow = po + i * m;
            for (std::size_t j = 0; j < m; ++j) orow[j] += av * brow[j];
        }
    }
    return out;
}

DenseArray transpose(const DenseArray& a) {
    const std::size_t r = a.rows(), c = a.cols();
    DenseArray out({c, r});
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out.at(j, i) = a.at(i, j);
    return out;
}

DenseArray l2_normalize_rows(const DenseArray& a) {
    DenseArray out({a.rows(), a.cols()});
    for (std::size_t i = 0; i < a.rows(); ++i) {
        const double n = std::max(norm(a.row(i)), kNormalizeEpsilon);
        auto src = a.row(i);
        auto dst = out.row(i);
        for (std::size_t j = 0; j < src.size(); ++j) dst[j] = src[j] / n;
    }
    return out;
}

DenseArray cosine_matrix(const DenseArray& a, const DenseArray& b) {
    return matmul(l2_normalize_rows(a), transpose(l2_normalize_rows(b)));
}

DenseArray vstack(std::span<const DenseArray> parts) {
    require(!parts.empty(), "vstack of nothing");
    const std::size_t c = parts[0].cols();
    std::size_t r = 0;
    for (const auto& p : parts) {
        require(p.cols() == c, "vstack column mismatch");
        r += p.rows();
    }
    std::vector<double> data;
    data.reserve(r * c);
    for (const auto& p : parts) data.insert(data.end(), p.data().begin(), p.data().end());
    return DenseArray({r, c}, std::move(data));
}

// ---------------------------------------------------------------- ValueGraph

NodeId ValueGraph::push(Node node) {
    for (auto in : node.inputs) check_id(in);
    nodes_.push_back(std::move(node));
    return NodeId{nodes_.size() - 1};
}

void ValueGraph::check_id(NodeId id) const {
    if (id.index >= nodes_.size()) throw Error(ErrorKind::ShapeMismatch, "node id out of range");
}

NodeId ValueGraph::input(const std::string& name) {
    if (auto it = inputs_by_name_.find(name); it != inputs_by_name_.end()) return it->second;
    Node n;
    n.op = OpKind::Input;
    n.name = name;
    auto id = push(std::move(n));
    inputs_by_name_.emplace(name, id);
    return id;
}

NodeId ValueGraph::constant(DenseArray value) {
    Node n;
    n.op = OpKind::Constant;
    value.set_precision(precision_);
    n.value = std::move(value);
    return push(std::move(n));
}

namespace {

ValueGraph::Node make_node(OpKind op, std::vector<NodeId> inputs) {
    ValueGraph::Node n;
    n.op = op;
    n.inputs = std::move(inputs);
    return n;
}

} // namespace

NodeId ValueGraph::matmul(NodeId a, NodeId b) { return push(make_node(OpKind::MatMul, {a, b})); }
NodeId ValueGraph::transpose(NodeId a) { return push(make_node(OpKind::Transpose, {a})); }
NodeId ValueGraph::add(NodeId a, NodeId b) { return push(make_node(OpKind::Add, {a, b})); }
NodeId ValueGraph::sub(NodeId a, NodeId b) { return push(make_node(OpKind::Sub, {a, b})); }
NodeId ValueGraph::mul(NodeId a, NodeId b) { return push(make_node(OpKind::Mul, {a, b})); }

NodeId ValueGraph::scale(NodeId a, double factor) {
    auto n = make_node(OpKind::Scale, {a});
    n.p0 = factor;
    return push(std::move(n));
}

NodeId ValueGraph::div_scalar(NodeId a, NodeId scalar) { return push(make_node(OpKind::DivScalar, {a, scalar})); }
NodeId ValueGraph::exp(NodeId a) { return push(make_node(OpKind::Exp, {a})); }
NodeId ValueGraph::log(NodeId a) { return push(make_node(OpKind::Log, {a})); }
NodeId ValueGraph::row_softmax(NodeId a) { return push(make_node(OpKind::RowSoftmax, {a})); }
NodeId ValueGraph::row_log_softmax(NodeId a) { return push(make_node(OpKind::RowLogSoftmax, {a})); }
NodeId ValueGraph::l2_normalize_rows(NodeId a) { return push(make_node(OpKind::L2NormalizeRows, {a})); }
NodeId ValueGraph::sum(NodeId a) { return push(make_node(OpKind::Sum, {a})); }
NodeId ValueGraph::mean(NodeId a) { return push(make_node(OpKind::Mean, {a})); }

NodeId ValueGraph::gather_rows(NodeId a, std::vector<std::size_t> rows) {
    auto n = make_node(OpKind::GatherRows, {a});
    n.indices = std::move(rows);
    return push(std::move(n));
}

NodeId ValueGraph::segment_mean(NodeId a, std::vector<std::size_t> lengths) {
    require(!lengths.empty(), "segment_mean needs at least one segment");
    auto n = make_node(OpKind::SegmentMean, {a});
    n.indices = std::move(lengths);
    return push(std::move(n));
}

NodeId ValueGraph::pick(NodeId a, std::vector<std::pair<std::size_t, std::size_t>> entries) {
    require(!entries.empty(), "pick needs at least one entry");
    auto n = make_node(OpKind::PickElements, {a});
    n.entries = std::move(entries);
    return push(std::move(n));
}

NodeId ValueGraph::clamped_exp(NodeId a, double lo, double hi) {
    auto n = make_node(OpKind::ClampedExp, {a});
    n.p0 = lo;
    n.p1 = hi;
    return push(std::move(n));
}

std::vector<std::string> ValueGraph::input_names() const {
    std::vector<std::string> names;
    for (const auto& [name, id] : inputs_by_name_) names.push_back(name);
    return names;
}

std::optional<NodeId> ValueGraph::find_input(const std::string& name) const {
    if (auto it = inputs_by_name_.find(name); it != inputs_by_name_.end()) return it->second;
    return std::nullopt;
}

// ---------------------------------------------------------------- Evaluation

Evaluation::Evaluation(const ValueGraph& graph, Bindings bindings)
    : graph_(graph), bindings_(std::move(bindings)), values_(graph.nodes_.size()) {}

void Evaluation::bind(const std::string& name, DenseArray value) {
    if (auto id = graph_.find_input(name); id && values_[id->index])
        throw Error(ErrorKind::ShapeMismatch, "leaf '" + name + "' already consumed; cannot rebind");
    bindings_[name] = std::move(value);
}

const DenseArray& Evaluation::leaf_value(const std::string& name) const {
    auto it = bindings_.find(name);
    if (it == bindings_.end()) throw Error(ErrorKind::UnboundLeaf, "leaf '" + name + "' is not bound");
    return it->second;
}

std::vector<std::size_t> Evaluation::ancestors(NodeId node, bool stop_at_cached) const {
    graph_.check_id(node);
    std::vector<char> needed(node.index + 1, 0);
    needed[node.index] = 1;
    for (std::size_t i = node.index + 1; i-- > 0;) {
        if (!needed[i] || (stop_at_cached && values_[i])) continue;
        for (auto in : graph_.nodes_[i].inputs) needed[in.index] = 1;
    }
    std::vector<std::size_t> order;
    for (std::size_t i = 0; i <= node.index; ++i)
        if (needed[i]) order.push_back(i);
    return order;
}

const DenseArray& Evaluation::value(NodeId node) {
    for (auto i : ancestors(node, true))
        if (!values_[i]) compute(i);
    return *values_[node.index];
}

namespace {

void require_same(const DenseArray& a, const DenseArray& b, const char* op) {
    require(a.rows() == b.rows() && a.cols() == b.cols(),
            std::string(op) + " " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
}

DenseArray as_matrix(const DenseArray& a) { return a.reshaped({a.rows(), a.cols()}); }

DenseArray softmax_rows(const DenseArray& x) {
    DenseArray out({x.rows(), x.cols()});
    for (std::size_t i = 0; i < x.rows(); ++i) {
        auto src = x.row(i);
        auto dst = out.row(i);
        const double mx = *std::max_element(src.begin(), src.end());
        double z = 0.0;
        for (std::size_t j = 0; j < src.size(); ++j) z += (dst[j] = std::exp(src[j] - mx));
        for (auto& v : dst) v /= z;
    }
    return out;
}

DenseArray log_softmax_rows(const DenseArray& x) {
    DenseArray out({x.rows(), x.cols()});
    for (std::size_t i = 0; i < x.rows(); ++i) {
        auto src = x.row(i);
        auto dst = out.row(i);
        const double mx = *std::max_element(src.begin(), src.end());
        double z = 0.0;
        for (double v : src) z += std::exp(v - mx);
        const double lse = mx + std::log(z);
        for (std::size_t j = 0; j < src.size(); ++j) dst[j] = src[j] - lse;
    }
    return out;
}

void accumulate(std::optional<DenseArray>& slot, const DenseArray& g) {
    if (!slot) {
        slot = g;
        return;
    }
    auto dst = slot->data();
    auto src = g.data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

} // namespace

void Evaluation::compute(std::size_t index) {
    const auto& node = graph_.nodes_[index];
    auto in = [&](std::size_t k) -> const DenseArray& { return *values_[node.inputs[k].index]; };
    DenseArray out;

    switch (node.op) {
        case OpKind::Input: out = leaf_value(node.name); break;
        case OpKind::Constant: out = node.value; break;
        case OpKind::MatMul: out = emocap::matmul(in(0), in(1)); break;
        case OpKind::Transpose: out = emocap::transpose(in(0)); break;
        case OpKind::Add:
        case OpKind::Sub:
        case OpKind::Mul: {
            const auto& a = in(0);
            const auto& b = in(1);
            require_same(a, b, "elementwise");
            out = as_matrix(a);
            auto o = out.data();
            auto bv = b.data();
            for (std::size_t i = 0; i < o.size(); ++i) {
                if (node.op == OpKind::Add) o[i] += bv[i];
                else if (node.op == OpKind::Sub) o[i] -= bv[i];
                else o[i] *= bv[i];
            }
            break;
        }
        case OpKind::Scale: {
            out = as_matrix(in(0));
            for (auto& v : out.data()) v *= node.p0;
            break;
        }
        case OpKind::DivScalar: {
            require(in(1).size() == 1, "div_scalar divisor must be 1x1");
            const double s = in(1)[0];
            out = as_matrix(in(0));
            for (auto& v : out.data()) v /= s;
            break;
        }
        case OpKind::Exp:
            out = as_matrix(in(0));
            for (auto& v : out.data()) v = std::exp(v);
            break;
        case OpKind::Log:
            out = as_matrix(in(0));
            for (auto& v : out.data()) v = std::log(v);
            break;
        case OpKind::RowSoftmax: out = softmax_rows(in(0)); break;
        case OpKind::RowLogSoftmax: out = log_softmax_rows(in(0)); break;
        case OpKind::L2NormalizeRows: out = emocap::l2_normalize_rows(in(0)); break;
        case OpKind::Sum:
        case OpKind::Mean: {
            double s = 0.0;
            for (double v : in(0).data()) s += v;
            if (node.op == OpKind::Mean) s /= static_cast<double>(in(0).size());
            out = DenseArray::scalar(s);
            break;
        }
        case OpKind::GatherRows: {
            const auto& a = in(0);
            require(!node.indices.empty(), "gather_rows needs at least one index");
            out = DenseArray({node.indices.size(), a.cols()});
            for (std::size_t r = 0; r < node.indices.size(); ++r) {
                require(node.indices[r] < a.rows(), "gather_rows index out of range");
                auto src = a.row(node.indices[r]);
                std::copy(src.begin(), src.end(), out.row(r).begin());
            }
            break;
        }
        case OpKind::SegmentMean: {
            const auto& a = in(0);
            std::size_t total = 0;
            for (auto len : node.indices) total += len;
            require(total == a.rows(), "segment lengths sum to " + std::to_string(total) + ", input has " +
                                           std::to_string(a.rows()) + " rows");
            out = DenseArray({node.indices.size(), a.cols()});
            std::size_t r = 0;
            for (std::size_t s = 0; s < node.indices.size(); ++s) {
                const auto len = node.indices[s];
                auto dst = out.row(s);
                for (std::size_t k = 0; k < len; ++k, ++r) {
                    auto src = a.row(r);
                    for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += src[j];
                }
                if (len > 0) for (auto& v : dst) v /= static_cast<double>(len);
            }
            break;
        }
        case OpKind::PickElements: {
            const auto& a = in(0);
            out = DenseArray({1, node.entries.size()});
            for (std::size_t k = 0; k < node.entries.size(); ++k) {
                const auto [r, c] = node.entries[k];
                require(r < a.rows() && c < a.cols(), "pick entry out of range");
                out[k] = a.at(r, c);
            }
            break;
        }
        case OpKind::ClampedExp: {
            require(in(0).size() == 1, "clamped_exp input must be 1x1");
            out = DenseArray::scalar(std::clamp(std::exp(in(0)[0]), node.p0, node.p1));
            break;
        }
    }
    out.set_precision(graph_.precision_);
    values_[index] = std::move(out);
}

Gradients Evaluation::backward(NodeId output, const std::vector<std::string>& wrt) {
    const auto& result = value(output);
    if (result.size() != 1) throw Error(ErrorKind::NonScalarOutput, "output has shape " + shape_string(result.shape()));

    const auto order = ancestors(output, false);
    std::vector<std::optional<DenseArray>> grads(graph_.nodes_.size());
    grads[output.index] = DenseArray::scalar(1.0);
    const auto precision = graph_.precision_;

    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        const std::size_t idx = *it;
        if (!grads[idx]) continue;
        const auto& node = graph_.nodes_[idx];
        DenseArray& g = *grads[idx];
        g.set_precision(precision);
        const DenseArray& y = *values_[idx];
        auto in = [&](std::size_t k) -> const DenseArray& { return *values_[node.inputs[k].index]; };
        auto send = [&](std::size_t k, const DenseArray& d) { accumulate(grads[node.inputs[k].index], d); };

        switch (node.op) {
            case OpKind::Input:
            case OpKind::Constant: break;
            case OpKind::MatMul:
                send(0, emocap::matmul(g, emocap::transpose(in(1))));
                send(1, emocap::matmul(emocap::transpose(in(0)), g));
                break;
            case OpKind::Transpose: send(0, emocap::transpose(g)); break;
            case OpKind::Add: send(0, g); send(1, g); break;
            case OpKind::Sub: {
                send(0, g);
                DenseArray ng = g;
                for (auto& v : ng.data()) v = -v;
                send(1, ng);
                break;
            }
            case OpKind::Mul: {
                DenseArray da = g, db = g;
                auto a = in(0).data();
                auto b = in(1).data();
                for (std::size_t i = 0; i < da.size(); ++i) {
                    da[i] *= b[i];
                    db[i] *= a[i];
                }
                send(0, da);
                send(1, db);
                break;
            }
            case OpKind::Scale: {
                DenseArray d = g;
                for (auto& v : d.data()) v *= node.p0;
                send(0, d);
                break;
            }
            case OpKind::DivScalar: {
                const double s = in(1)[0];
                DenseArray d = g;
                double ds = 0.0;
                for (std::size_t i = 0; i < d.size(); ++i) {
                    ds -= g[i] * y[i];
                    d[i] /= s;
                }
                send(0, d);
                send(1, DenseArray::scalar(ds / s));
                break;
            }
            case OpKind::Exp: {
                DenseArray d = g;
                for (std::size_t i = 0; i < d.size(); ++i) d[i] *= y[i];
                send(0, d);
                break;
            }
            case OpKind::Log: {
                DenseArray d = g;
                auto x = in(0).data();
                for (std::size_t i = 0; i < d.size(); ++i) d[i] /= x[i];
                send(0, d);
                break;
            }
            case OpKind::RowSoftmax: {
                DenseArray d({y.rows(), y.cols()});
                for (std::size_t r = 0; r < y.rows(); ++r) {
                    const double s = dot(g.row(r), y.row(r));
                    for (std::size_t c = 0; c < y.cols(); ++c) d.at(r, c) = y.at(r, c) * (g.at(r, c) - s);
                }
                send(0, d);
                break;
            }
            case OpKind::RowLogSoftmax: {
                DenseArray d({y.rows(), y.cols()});
                for (std::size_t r = 0; r < y.rows(); ++r) {
                    double gs = 0.0;
                    for (double v : g.row(r)) gs += v;
                    for (std::size_t c = 0; c < y.cols(); ++c) d.at(r, c) = g.at(r, c) - std::exp(y.at(r, c)) * gs;
                }
                send(0, d);
                break;
            }
            case OpKind::L2NormalizeRows: {
                const auto& x = in(0);
                DenseArray d({y.rows(), y.cols()});
                for (std::size_t r = 0; r < y.rows(); ++r) {
                    const double n = norm(x.row(r));
                    if (n > kNormalizeEpsilon) {
                        const double proj = dot(g.row(r), y.row(r));
                        for (std::size_t c = 0; c < y.cols(); ++c) d.at(r, c) = (g.at(r, c) - y.at(r, c) * proj) / n;
                    } else {
                        for (std::size_t c = 0; c < y.cols(); ++c) d.at(r, c) = g.at(r, c) / kNormalizeEpsilon;
                    }
                }
                send(0, d);
                break;
            }
            case OpKind::Sum:
            case OpKind::Mean: {
                const auto& x = in(0);
                double v = g[0];
                if (node.op == OpKind::Mean) v /= static_cast<double>(x.size());
                send(0, DenseArray({x.rows(), x.cols()}, v));
                break;
            }
            case OpKind::GatherRows: {
                const auto& x = in(0);
                DenseArray d({x.rows(), x.cols()});
                for (std::size_t r = 0; r < node.indices.size(); ++r) {
                    auto src = g.row(r);
                    auto dst = d.row(node.indices[r]);
                    for (std::size_t c = 0; c < src.size(); ++c) dst[c] += src[c];
                }
                send(0, d);
                break;
            }
            case OpKind::SegmentMean: {
                const auto& x = in(0);
                DenseArray d({x.rows(), x.cols()});
                std::size_t r = 0;
                for (std::size_t s = 0; s < node.indices.size(); ++s) {
                    const auto len = node.indices[s];
                    for (std::size_t k = 0; k < len; ++k, ++r) {
                        auto src = g.row(s);
                        auto dst = d.row(r);
                        for (std::size_t c = 0; c < src.size(); ++c) dst[c] = src[c] / static_cast<double>(len);
                    }
                }
                send(0, d);
                break;
            }
            case OpKind::PickElements: {
                const auto& x = in(0);
                DenseArray d({x.rows(), x.cols()});
                for (std::size_t k = 0; k < node.entries.size(); ++k) {
                    const auto [r, c] = node.entries[k];
                    d.at(r, c) += g[k];
                }
                send(0, d);
                break;
            }
            case OpKind::ClampedExp: {
                const double raw = std::exp(in(0)[0]);
                const double slope = (raw > node.p0 && raw < node.p1) ? raw : 0.0;
                send(0, DenseArray::scalar(g[0] * slope));
                break;
            }
        }
    }

    Gradients out;
    for (const auto& name : wrt) {
        const auto& bound = leaf_value(name);
        auto id = graph_.find_input(name);
        if (id && grads[id->index]) {
            DenseArray g = grads[id->index]->reshaped(bound.shape());
            g.set_precision(precision);
            out[name] = std::move(g);
        } else {
            out[name] = DenseArray(bound.shape(), 0.0, precision);
        }
    }
    return out;
}

// -------------------------------------------------------------- free helpers

namespace {

NodeId require_output(const ValueGraph& graph) {
    auto out = graph.output();
    if (!out) throw Error(ErrorKind::ShapeMismatch, "graph has no output node");
    return *out;
}

} // namespace

DenseArray evaluate(const ValueGraph& graph, const Bindings& bindings) {
    return evaluate(graph, bindings, require_output(graph));
}

DenseArray evaluate(const ValueGraph& graph, const Bindings& bindings, NodeId node) {
    Evaluation ev(graph, bindings);
    return ev.value(node);
}

Gradients gradients(const ValueGraph& graph, const Bindings& bindings, const std::vector<std::string>& wrt) {
    Evaluation ev(graph, bindings);
    return ev.backward(require_output(graph), wrt);
}

double GradReport::worst() const {
    double w = 0.0;
    for (const auto& [name, err] : max_relative_error) w = std::max(w, err);
    return w;
}

GradReport check_gradients(const ValueGraph& graph, const Bindings& bindings, const std::vector<std::string>& wrt,
                           double step, double analytic_sign) {
    if (graph.precision() != Precision::F64)
        throw Error(ErrorKind::ConfigInvalid, "gradient checks require double precision");
    if (!(step >= 1e-7 && step <= 1e-3))
        throw Error(ErrorKind::ConfigInvalid, "finite-difference step must lie in [1e-7, 1e-3]");

    const NodeId out = require_output(graph);
    const Gradients analytic = gradients(graph, bindings, wrt);

    GradReport report;
    report.step = step;
    report.precision = graph.precision();

    Bindings probe = bindings;
    auto f = [&]() { return evaluate(graph, probe, out)[0]; };

    for (const auto& name : wrt) {
        auto& x = probe.at(name);
        const auto& a = analytic.at(name);
        double worst = 0.0;
        for (std::size_t i = 0; i < x.size(); ++i) {
            const double orig = x[i];
            double diff[3];
            for (int k = 0; k < 3; ++k) {
                x[i] = orig + (k + 1) * step;
                const double fp = f();
                x[i] = orig - (k + 1) * step;
                const double fm = f();
                diff[k] = fp - fm;
            }
            x[i] = orig;
            // Sixth-order central stencil; identical evaluations give exactly 0.
            const double numeric = (45.0 * diff[0] - 9.0 * diff[1] + diff[2]) / (60.0 * step);
            const double an = analytic_sign * a[i];
            const double denom = std::max({std::abs(an), std::abs(numeric), 1e-8});
            worst = std::max(worst, std::abs(an - numeric) / denom);
        }
        report.max_relative_error[name] = worst;
    }
    return report;
}

} // namespace emocap
