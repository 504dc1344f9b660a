#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <functional>
#include <unordered_map>
#include <vector>

#include "msfuse/tensor.hpp"

namespace msfuse::ad {

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using EMap = Eigen::Map<EMat>;
using ECMap = Eigen::Map<const EMat>;
using EVec = Eigen::VectorXd;
using EVMap = Eigen::Map<Eigen::VectorXd>;
using ECVMap = Eigen::Map<const Eigen::VectorXd>;

/// Handle to a node on a Tape.
struct Var {
    int id = -1;
    bool valid() const { return id >= 0; }
};

/// Reverse-mode automatic differentiation over Tensors.
///
/// A Tape is built once per forward pass: leaves are parameters (gradients
/// tracked, value referenced in place) or constants, interior nodes record a
/// backward closure. backward() walks the tape in reverse creation order,
/// which is a valid topological order because nodes only reference earlier
/// nodes. Parameter gradients are read back through grad().
class Tape {
public:
    Tape() { nodes_.reserve(1024); }

    /// Leaf whose gradient is tracked. The tensor must outlive the tape.
    /// Binding the same tensor twice returns the existing node, so a
    /// parameter accumulates one gradient no matter how many modules
    /// reference it.
    Var param(const Tensor* t) {
        auto it = param_index_.find(t);
        if (it != param_index_.end()) return Var{it->second};
        Node n;
        n.external = t;
        n.requires_grad = true;
        Var v = push(std::move(n));
        param_index_[t] = v.id;
        return v;
    }

    /// Gradient of a bound parameter tensor after backward().
    const Tensor& grad_for(const Tensor* t) {
        auto it = param_index_.find(t);
        require(it != param_index_.end(), "grad_for: tensor was never bound");
        return grad(Var{it->second});
    }

    /// Leaf with no gradient, value stored on the tape.
    Var constant(Tensor t) {
        Node n;
        n.owned = std::move(t);
        return push(std::move(n));
    }

    /// Leaf with no gradient, value referenced in place.
    Var constant_view(const Tensor* t) {
        Node n;
        n.external = t;
        return push(std::move(n));
    }

    const Tensor& val(Var v) const { return value_of(v.id); }

    /// Gradient of the last backward() target w.r.t. node v (zeros if the
    /// node was never reached).
    const Tensor& grad(Var v) {
        ensure_grad(v.id);
        return nodes_[static_cast<size_t>(v.id)].grad;
    }

    void backward(Var loss) {
        require(val(loss).size() == 1, "backward: loss must be scalar");
        ensure_grad(loss.id);
        nodes_[static_cast<size_t>(loss.id)].grad[0] = 1.0;
        for (int i = loss.id; i >= 0; --i) {
            Node& n = nodes_[static_cast<size_t>(i)];
            if (n.requires_grad && n.grad_alloc && n.backward) n.backward(*this);
        }
    }

    int node_count() const { return static_cast<int>(nodes_.size()); }

    // ---- elementwise ----

    Var add(Var a, Var b) {
        const Tensor& x = val(a);
        const Tensor& y = val(b);
        require(x.same_shape(y), "add: shape mismatch " + x.shape_str() + " vs " + y.shape_str());
        Tensor out = x;
        for (int i = 0; i < out.size(); ++i) out[i] += y[i];
        return unary_or_binary(std::move(out), a, b, [](Tape& t, int oid, int aid, int bid) {
            const Tensor& g = t.nodes_[static_cast<size_t>(oid)].grad;
            t.accumulate(aid, g);
            t.accumulate(bid, g);
        });
    }

    Var sub(Var a, Var b) {
        const Tensor& x = val(a);
        const Tensor& y = val(b);
        require(x.same_shape(y), "sub: shape mismatch");
        Tensor out = x;
        for (int i = 0; i < out.size(); ++i) out[i] -= y[i];
        return unary_or_binary(std::move(out), a, b, [](Tape& t, int oid, int aid, int bid) {
            const Tensor& g = t.nodes_[static_cast<size_t>(oid)].grad;
            t.accumulate(aid, g);
            t.accumulate_scaled(bid, g, -1.0);
        });
    }

    Var mul(Var a, Var b) {
        const Tensor& x = val(a);
        const Tensor& y = val(b);
        require(x.same_shape(y), "mul: shape mismatch");
        Tensor out = x;
        for (int i = 0; i < out.size(); ++i) out[i] *= y[i];
        return unary_or_binary(std::move(out), a, b, [](Tape& t, int oid, int aid, int bid) {
            const Tensor& g = t.nodes_[static_cast<size_t>(oid)].grad;
            const Tensor& x = t.value_of(aid);
            const Tensor& y = t.value_of(bid);
            if (t.wants_grad(aid)) {
                Tensor d = g;
                for (int i = 0; i < d.size(); ++i) d[i] *= y[i];
                t.accumulate(aid, d);
            }
            if (t.wants_grad(bid)) {
                Tensor d = g;
                for (int i = 0; i < d.size(); ++i) d[i] *= x[i];
                t.accumulate(bid, d);
            }
        });
    }

    /// y = mul * x + add, elementwise.
    Var affine(Var a, double mul, double add_c) {
        Tensor out = val(a);
        for (int i = 0; i < out.size(); ++i) out[i] = mul * out[i] + add_c;
        return unary(std::move(out), a, [mul](Tape& t, int oid, int aid) {
            t.accumulate_scaled(aid, t.nodes_[static_cast<size_t>(oid)].grad, mul);
        });
    }

    Var scale(Var a, double c) { return affine(a, c, 0.0); }

    /// Elementwise product with a fixed tensor (dropout masks and the like).
    Var mul_mask(Var a, Tensor mask) {
        const Tensor& x = val(a);
        require(x.same_shape(mask), "mul_mask: shape mismatch");
        Tensor out = x;
        for (int i = 0; i < out.size(); ++i) out[i] *= mask[i];
        Node n;
        n.owned = std::move(out);
        n.requires_grad = wants_grad(a.id);
        if (n.requires_grad) {
            int aid = a.id;
            n.backward = [aid, mask](Tape& t) {
                const Tensor& g = t.nodes_[static_cast<size_t>(t.backward_node_)].grad;
                Tensor d = g;
                for (int i = 0; i < d.size(); ++i) d[i] *= mask[i];
                t.accumulate(aid, d);
            };
        }
        return push_with_self(std::move(n));
    }

    Var relu(Var a) {
        Tensor out = val(a);
        for (int i = 0; i < out.size(); ++i) out[i] = out[i] > 0.0 ? out[i] : 0.0;
        return unary(std::move(out), a, [](Tape& t, int oid, int aid) {
            const Tensor& g = t.nodes_[static_cast<size_t>(oid)].grad;
            const Tensor& x = t.value_of(aid);
            Tensor d = g;
            for (int i = 0; i < d.size(); ++i) {
                if (x[i] <= 0.0) d[i] = 0.0;
            }
            t.accumulate(aid, d);
        });
    }

    Var sigmoid(Var a) {
        Tensor out = val(a);
        for (int i = 0; i < out.size(); ++i) out[i] = 1.0 / (1.0 + std::exp(-out[i]));
        return unary(std::move(out), a, [](Tape& t, int oid, int aid) {
            const Tensor& g = t.nodes_[static_cast<size_t>(oid)].grad;
            const Tensor& y = t.value_of(oid);
            Tensor d = g;
            for (int i = 0; i < d.size(); ++i) d[i] *= y[i] * (1.0 - y[i]);
            t.accumulate(aid, d);
        });
    }

    Var tanh_(Var a) {
        Tensor out = val(a);
        for (int i = 0; i < out.size(); ++i) out[i] = std::tanh(out[i]);
        return unary(std::move(out), a, [](Tape& t, int oid, int aid) {
            const Tensor& g = t.nodes_[static_cast<size_t>(oid)].grad;
            const Tensor& y = t.value_of(oid);
            Tensor d = g;
            for (int i = 0; i < d.size(); ++i) d[i] *= 1.0 - y[i] * y[i];
            t.accumulate(aid, d);
        });
    }

    // ---- reductions / vector ops ----

    Var sum(Var a) {
        double s = 0.0;
        const Tensor& x = val(a);
        for (int i = 0; i < x.size(); ++i) s += x[i];
        return unary(Tensor::scalar(s), a, [](Tape& t, int oid, int aid) {
            double g = t.nodes_[static_cast<size_t>(oid)].grad[0];
            t.ensure_grad(aid);
            Tensor& d = t.nodes_[static_cast<size_t>(aid)].grad;
            for (int i = 0; i < d.size(); ++i) d[i] += g;
        });
    }

    Var mean(Var a) {
        int n = val(a).size();
        return scale(sum(a), 1.0 / n);
    }

    Var dot(Var a, Var b) {
        const Tensor& x = val(a);
        const Tensor& y = val(b);
        require(x.size() == y.size(), "dot: size mismatch");
        double s = 0.0;
        for (int i = 0; i < x.size(); ++i) s += x[i] * y[i];
        return unary_or_binary(Tensor::scalar(s), a, b, [](Tape& t, int oid, int aid, int bid) {
            double g = t.nodes_[static_cast<size_t>(oid)].grad[0];
            t.accumulate_scaled_tensor(aid, t.value_of(bid), g);
            t.accumulate_scaled_tensor(bid, t.value_of(aid), g);
        });
    }

    /// Euclidean norm of a vector; gradient is zero at the origin.
    Var norm2(Var a) {
        const Tensor& x = val(a);
        double s = 0.0;
        for (int i = 0; i < x.size(); ++i) s += x[i] * x[i];
        double nrm = std::sqrt(s);
        return unary(Tensor::scalar(nrm), a, [](Tape& t, int oid, int aid) {
            double g = t.nodes_[static_cast<size_t>(oid)].grad[0];
            double nrm = t.value_of(oid)[0];
            if (nrm < 1e-12) return;
            t.accumulate_scaled_tensor(aid, t.value_of(aid), g / nrm);
        });
    }

    /// Softmax over a rank-1 vector.
    Var softmax(Var a) {
        const Tensor& x = val(a);
        require(x.rank() == 1, "softmax: expects rank-1");
        Tensor out = x;
        double mx = out[0];
        for (int i = 1; i < out.size(); ++i) mx = std::max(mx, out[i]);
        double z = 0.0;
        for (int i = 0; i < out.size(); ++i) {
            out[i] = std::exp(out[i] - mx);
            z += out[i];
        }
        for (int i = 0; i < out.size(); ++i) out[i] /= z;
        return unary(std::move(out), a, [](Tape& t, int oid, int aid) {
            const Tensor& g = t.nodes_[static_cast<size_t>(oid)].grad;
            const Tensor& y = t.value_of(oid);
            double gy = 0.0;
            for (int i = 0; i < y.size(); ++i) gy += g[i] * y[i];
            Tensor d = y;
            for (int i = 0; i < d.size(); ++i) d[i] = y[i] * (g[i] - gy);
            t.accumulate(aid, d);
        });
    }

    /// Numerically stable binary cross-entropy on a logit.
    Var bce_with_logit(Var logit, double label) {
        double z = val(logit)[0];
        double loss = std::max(z, 0.0) - z * label + std::log1p(std::exp(-std::abs(z)));
        return unary(Tensor::scalar(loss), logit, [label](Tape& t, int oid, int aid) {
            double g = t.nodes_[static_cast<size_t>(oid)].grad[0];
            double z = t.value_of(aid)[0];
            double p = 1.0 / (1.0 + std::exp(-z));
            t.accumulate(aid, Tensor::scalar(g * (p - label)));
        });
    }

    // ---- shape ops ----

    Var reshape(Var a, std::vector<int> shape) {
        Tensor out(std::move(shape));
        const Tensor& x = val(a);
        require(out.size() == x.size(), "reshape: element count mismatch");
        for (int i = 0; i < x.size(); ++i) out[i] = x[i];
        return unary(std::move(out), a, [](Tape& t, int oid, int aid) {
            const Tensor& g = t.nodes_[static_cast<size_t>(oid)].grad;
            t.ensure_grad(aid);
            Tensor& d = t.nodes_[static_cast<size_t>(aid)].grad;
            for (int i = 0; i < d.size(); ++i) d[i] += g[i];
        });
    }

    Var concat(const std::vector<Var>& parts) {
        require(!parts.empty(), "concat: empty");
        int total = 0;
        bool rg = false;
        for (Var p : parts) {
            require(val(p).rank() == 1, "concat: rank-1 only");
            total += val(p).size();
            rg = rg || wants_grad(p.id);
        }
        Tensor out({total});
        int off = 0;
        for (Var p : parts) {
            const Tensor& x = val(p);
            for (int i = 0; i < x.size(); ++i) out[off + i] = x[i];
            off += x.size();
        }
        Node n;
        n.owned = std::move(out);
        n.requires_grad = rg;
        if (rg) {
            std::vector<int> ids;
            std::vector<int> sizes;
            for (Var p : parts) {
                ids.push_back(p.id);
                sizes.push_back(val(p).size());
            }
            n.backward = [ids, sizes](Tape& t) {
                const Tensor& g = t.nodes_[static_cast<size_t>(t.backward_node_)].grad;
                int off = 0;
                for (size_t k = 0; k < ids.size(); ++k) {
                    if (t.wants_grad(ids[k])) {
                        t.ensure_grad(ids[k]);
                        Tensor& d = t.nodes_[static_cast<size_t>(ids[k])].grad;
                        for (int i = 0; i < sizes[k]; ++i) d[i] += g[off + i];
                    }
                    off += sizes[k];
                }
            };
        }
        return push_with_self(std::move(n));
    }

    /// Stack equal-length rank-1 vectors into a matrix, one per row.
    Var stack_rows(const std::vector<Var>& rows) {
        require(!rows.empty(), "stack_rows: empty");
        int cols = val(rows[0]).size();
        bool rg = false;
        Tensor out({static_cast<int>(rows.size()), cols});
        for (size_t r = 0; r < rows.size(); ++r) {
            const Tensor& x = val(rows[r]);
            require(x.size() == cols, "stack_rows: ragged rows");
            for (int c = 0; c < cols; ++c) out.at(static_cast<int>(r), c) = x[c];
            rg = rg || wants_grad(rows[r].id);
        }
        Node n;
        n.owned = std::move(out);
        n.requires_grad = rg;
        if (rg) {
            std::vector<int> ids;
            for (Var r : rows) ids.push_back(r.id);
            n.backward = [ids, cols](Tape& t) {
                const Tensor& g = t.nodes_[static_cast<size_t>(t.backward_node_)].grad;
                for (size_t r = 0; r < ids.size(); ++r) {
                    if (!t.wants_grad(ids[r])) continue;
                    t.ensure_grad(ids[r]);
                    Tensor& d = t.nodes_[static_cast<size_t>(ids[r])].grad;
                    for (int c = 0; c < cols; ++c) d[c] += g[static_cast<int>(r) * cols + c];
                }
            };
        }
        return push_with_self(std::move(n));
    }

    Var row(Var m, int r) {
        const Tensor& x = val(m);
        require(x.rank() == 2 && r >= 0 && r < x.dim(0), "row: bad index");
        int cols = x.dim(1);
        Tensor out({cols});
        for (int c = 0; c < cols; ++c) out[c] = x.at(r, c);
        return unary(std::move(out), m, [r, cols](Tape& t, int oid, int aid) {
            const Tensor& g = t.nodes_[static_cast<size_t>(oid)].grad;
            t.ensure_grad(aid);
            Tensor& d = t.nodes_[static_cast<size_t>(aid)].grad;
            for (int c = 0; c < cols; ++c) d[r * cols + c] += g[c];
        });
    }

    /// Rows [r0, r1) of a matrix.
    Var slice_rows(Var m, int r0, int r1) {
        const Tensor& x = val(m);
        require(x.rank() == 2 && 0 <= r0 && r0 < r1 && r1 <= x.dim(0), "slice_rows: bad range");
        int cols = x.dim(1);
        Tensor out({r1 - r0, cols});
        for (int r = r0; r < r1; ++r)
            for (int c = 0; c < cols; ++c) out.at(r - r0, c) = x.at(r, c);
        return unary(std::move(out), m, [r0, r1, cols](Tape& t, int oid, int aid) {
            const Tensor& g = t.nodes_[static_cast<size_t>(oid)].grad;
            t.ensure_grad(aid);
            Tensor& d = t.nodes_[static_cast<size_t>(aid)].grad;
            for (int r = r0; r < r1; ++r)
                for (int c = 0; c < cols; ++c) d[r * cols + c] += g[(r - r0) * cols + c];
        });
    }

    /// Gather rows of a table by index (embedding lookup). Duplicate indices
    /// accumulate on the way back.
    Var gather_rows(Var table, std::vector<int> idx) {
        const Tensor& x = val(table);
        require(x.rank() == 2, "gather_rows: table must be rank-2");
        int cols = x.dim(1);
        Tensor out({static_cast<int>(idx.size()), cols});
        for (size_t r = 0; r < idx.size(); ++r) {
            require(idx[r] >= 0 && idx[r] < x.dim(0), "gather_rows: index out of range");
            for (int c = 0; c < cols; ++c) out.at(static_cast<int>(r), c) = x.at(idx[r], c);
        }
        return unary(std::move(out), table, [idx, cols](Tape& t, int oid, int aid) {
            const Tensor& g = t.nodes_[static_cast<size_t>(oid)].grad;
            t.ensure_grad(aid);
            Tensor& d = t.nodes_[static_cast<size_t>(aid)].grad;
            for (size_t r = 0; r < idx.size(); ++r)
                for (int c = 0; c < cols; ++c)
                    d[idx[r] * cols + c] += g[static_cast<int>(r) * cols + c];
        });
    }

    /// Zero-pad a rank-1 vector on the right to length len.
    Var pad_tail(Var a, int len) {
        const Tensor& x = val(a);
        require(x.rank() == 1 && x.size() <= len, "pad_tail: bad length");
        Tensor out({len});
        for (int i = 0; i < x.size(); ++i) out[i] = x[i];
        int n = x.size();
        return unary(std::move(out), a, [n](Tape& t, int oid, int aid) {
            const Tensor& g = t.nodes_[static_cast<size_t>(oid)].grad;
            t.ensure_grad(aid);
            Tensor& d = t.nodes_[static_cast<size_t>(aid)].grad;
            for (int i = 0; i < n; ++i) d[i] += g[i];
        });
    }

    // ---- linear algebra ----

    Var matmul(Var a, Var b) {
        const Tensor& x = val(a);
        const Tensor& y = val(b);
        require(x.rank() == 2 && y.rank() == 2 && x.dim(1) == y.dim(0), "matmul: shape mismatch");
        Tensor out({x.dim(0), y.dim(1)});
        EMap(out.data(), out.dim(0), out.dim(1)) =
            ECMap(x.data(), x.dim(0), x.dim(1)) * ECMap(y.data(), y.dim(0), y.dim(1));
        return unary_or_binary(std::move(out), a, b, [](Tape& t, int oid, int aid, int bid) {
            const Tensor& g = t.nodes_[static_cast<size_t>(oid)].grad;
            const Tensor& x = t.value_of(aid);
            const Tensor& y = t.value_of(bid);
            ECMap gm(g.data(), x.dim(0), y.dim(1));
            if (t.wants_grad(aid)) {
                t.ensure_grad(aid);
                Tensor& d = t.nodes_[static_cast<size_t>(aid)].grad;
                EMap(d.data(), x.dim(0), x.dim(1)).noalias() +=
                    gm * ECMap(y.data(), y.dim(0), y.dim(1)).transpose();
            }
            if (t.wants_grad(bid)) {
                t.ensure_grad(bid);
                Tensor& d = t.nodes_[static_cast<size_t>(bid)].grad;
                EMap(d.data(), y.dim(0), y.dim(1)).noalias() +=
                    ECMap(x.data(), x.dim(0), x.dim(1)).transpose() * gm;
            }
        });
    }

    /// A * B^T; B holds one output feature per row.
    Var matmul_nt(Var a, Var b) {
        const Tensor& x = val(a);
        const Tensor& y = val(b);
        require(x.rank() == 2 && y.rank() == 2 && x.dim(1) == y.dim(1), "matmul_nt: shape mismatch");
        Tensor out({x.dim(0), y.dim(0)});
        EMap(out.data(), out.dim(0), out.dim(1)).noalias() =
            ECMap(x.data(), x.dim(0), x.dim(1)) * ECMap(y.data(), y.dim(0), y.dim(1)).transpose();
        return unary_or_binary(std::move(out), a, b, [](Tape& t, int oid, int aid, int bid) {
            const Tensor& g = t.nodes_[static_cast<size_t>(oid)].grad;
            const Tensor& x = t.value_of(aid);
            const Tensor& y = t.value_of(bid);
            ECMap gm(g.data(), x.dim(0), y.dim(0));
            if (t.wants_grad(aid)) {
                t.ensure_grad(aid);
                Tensor& d = t.nodes_[static_cast<size_t>(aid)].grad;
                EMap(d.data(), x.dim(0), x.dim(1)).noalias() +=
                    gm * ECMap(y.data(), y.dim(0), y.dim(1));
            }
            if (t.wants_grad(bid)) {
                t.ensure_grad(bid);
                Tensor& d = t.nodes_[static_cast<size_t>(bid)].grad;
                EMap(d.data(), y.dim(0), y.dim(1)).noalias() +=
                    gm.transpose() * ECMap(x.data(), x.dim(0), x.dim(1));
            }
        });
    }

    /// W (r x c) * x (c) -> r.
    Var matvec(Var w, Var x) {
        const Tensor& wm = val(w);
        const Tensor& xv = val(x);
        require(wm.rank() == 2 && xv.rank() == 1 && wm.dim(1) == xv.size(), "matvec: shape mismatch");
        Tensor out({wm.dim(0)});
        EVMap(out.data(), out.size()) =
            ECMap(wm.data(), wm.dim(0), wm.dim(1)) * ECVMap(xv.data(), xv.size());
        return unary_or_binary(std::move(out), w, x, [](Tape& t, int oid, int aid, int bid) {
            const Tensor& g = t.nodes_[static_cast<size_t>(oid)].grad;
            const Tensor& wm = t.value_of(aid);
            const Tensor& xv = t.value_of(bid);
            ECVMap gv(g.data(), g.size());
            if (t.wants_grad(aid)) {
                t.ensure_grad(aid);
                Tensor& d = t.nodes_[static_cast<size_t>(aid)].grad;
                EMap(d.data(), wm.dim(0), wm.dim(1)).noalias() +=
                    gv * ECVMap(xv.data(), xv.size()).transpose();
            }
            if (t.wants_grad(bid)) {
                t.ensure_grad(bid);
                Tensor& d = t.nodes_[static_cast<size_t>(bid)].grad;
                EVMap(d.data(), d.size()).noalias() +=
                    ECMap(wm.data(), wm.dim(0), wm.dim(1)).transpose() * gv;
            }
        });
    }

    /// M^T (t x f) * v (t) -> f, without materializing the transpose.
    Var tmatvec(Var m, Var v) {
        const Tensor& mm = val(m);
        const Tensor& vv = val(v);
        require(mm.rank() == 2 && vv.rank() == 1 && mm.dim(0) == vv.size(), "tmatvec: shape mismatch");
        Tensor out({mm.dim(1)});
        EVMap(out.data(), out.size()) =
            ECMap(mm.data(), mm.dim(0), mm.dim(1)).transpose() * ECVMap(vv.data(), vv.size());
        return unary_or_binary(std::move(out), m, v, [](Tape& t, int oid, int aid, int bid) {
            const Tensor& g = t.nodes_[static_cast<size_t>(oid)].grad;
            const Tensor& mm = t.value_of(aid);
            const Tensor& vv = t.value_of(bid);
            ECVMap gv(g.data(), g.size());
            if (t.wants_grad(aid)) {
                t.ensure_grad(aid);
                Tensor& d = t.nodes_[static_cast<size_t>(aid)].grad;
                EMap(d.data(), mm.dim(0), mm.dim(1)).noalias() +=
                    ECVMap(vv.data(), vv.size()) * gv.transpose();
            }
            if (t.wants_grad(bid)) {
                t.ensure_grad(bid);
                Tensor& d = t.nodes_[static_cast<size_t>(bid)].grad;
                EVMap(d.data(), d.size()).noalias() +=
                    ECMap(mm.data(), mm.dim(0), mm.dim(1)) * gv;
            }
        });
    }

    /// Add a rank-1 bias to every row of a matrix.
    Var add_rowvec(Var m, Var b) {
        const Tensor& x = val(m);
        const Tensor& v = val(b);
        require(x.rank() == 2 && v.rank() == 1 && x.dim(1) == v.size(), "add_rowvec: shape mismatch");
        Tensor out = x;
        for (int r = 0; r < x.dim(0); ++r)
            for (int c = 0; c < x.dim(1); ++c) out.at(r, c) += v[c];
        return unary_or_binary(std::move(out), m, b, [](Tape& t, int oid, int aid, int bid) {
            const Tensor& g = t.nodes_[static_cast<size_t>(oid)].grad;
            const Tensor& x = t.value_of(aid);
            if (t.wants_grad(aid)) t.accumulate(aid, g);
            if (t.wants_grad(bid)) {
                t.ensure_grad(bid);
                Tensor& d = t.nodes_[static_cast<size_t>(bid)].grad;
                for (int r = 0; r < x.dim(0); ++r)
                    for (int c = 0; c < x.dim(1); ++c) d[c] += g[r * x.dim(1) + c];
            }
        });
    }

    // ---- convolutions ----

    /// 1D valid convolution. x: (Cin, L); w: (Cout, Cin, K); b: (Cout).
    Var conv1d(Var x, Var w, Var b, int stride) {
        const Tensor& xv = val(x);
        const Tensor& wv = val(w);
        const Tensor& bv = val(b);
        require(xv.rank() == 2 && wv.rank() == 3 && bv.rank() == 1, "conv1d: bad ranks");
        int cin = xv.dim(0), len = xv.dim(1);
        int cout = wv.dim(0), k = wv.dim(2);
        require(wv.dim(1) == cin && bv.size() == cout, "conv1d: channel mismatch");
        require(len >= k, "conv1d: input shorter than kernel");
        int lout = (len - k) / stride + 1;
        Tensor out({cout, lout});
        for (int oc = 0; oc < cout; ++oc) {
            for (int p = 0; p < lout; ++p) {
                double s = bv[oc];
                int base = p * stride;
                for (int ic = 0; ic < cin; ++ic) {
                    const double* xr = xv.data() + ic * len + base;
                    const double* wr = wv.data() + (oc * cin + ic) * k;
                    for (int j = 0; j < k; ++j) s += xr[j] * wr[j];
                }
                out.at(oc, p) = s;
            }
        }
        std::vector<int> ins = {x.id, w.id, b.id};
        Node n;
        n.owned = std::move(out);
        n.requires_grad = wants_grad(x.id) || wants_grad(w.id) || wants_grad(b.id);
        if (n.requires_grad) {
            int xid = x.id, wid = w.id, bid = b.id;
            n.backward = [xid, wid, bid, cin, len, cout, k, stride, lout](Tape& t) {
                const Tensor& g = t.nodes_[static_cast<size_t>(t.backward_node_)].grad;
                const Tensor& xv = t.value_of(xid);
                const Tensor& wv = t.value_of(wid);
                bool gx = t.wants_grad(xid), gw = t.wants_grad(wid), gb = t.wants_grad(bid);
                if (gx) t.ensure_grad(xid);
                if (gw) t.ensure_grad(wid);
                if (gb) t.ensure_grad(bid);
                for (int oc = 0; oc < cout; ++oc) {
                    for (int p = 0; p < lout; ++p) {
                        double go = g[oc * lout + p];
                        if (go == 0.0) continue;
                        int base = p * stride;
                        if (gb) t.nodes_[static_cast<size_t>(bid)].grad[oc] += go;
                        for (int ic = 0; ic < cin; ++ic) {
                            const double* xr = xv.data() + ic * len + base;
                            const double* wr = wv.data() + (oc * cin + ic) * k;
                            double* dxr = gx ? t.nodes_[static_cast<size_t>(xid)].grad.data() + ic * len + base
                                             : nullptr;
                            double* dwr = gw ? t.nodes_[static_cast<size_t>(wid)].grad.data() + (oc * cin + ic) * k
                                             : nullptr;
                            for (int j = 0; j < k; ++j) {
                                if (dxr) dxr[j] += go * wr[j];
                                if (dwr) dwr[j] += go * xr[j];
                            }
                        }
                    }
                }
            };
        }
        return push_with_self(std::move(n));
    }

    /// Mean over positions per channel. x: (C, L) -> (C).
    Var channel_mean(Var x) {
        const Tensor& xv = val(x);
        require(xv.rank() == 2, "channel_mean: expects rank-2");
        int c = xv.dim(0), l = xv.dim(1);
        Tensor out({c});
        for (int i = 0; i < c; ++i) {
            double s = 0.0;
            for (int j = 0; j < l; ++j) s += xv.at(i, j);
            out[i] = s / l;
        }
        return unary(std::move(out), x, [c, l](Tape& t, int oid, int aid) {
            const Tensor& g = t.nodes_[static_cast<size_t>(oid)].grad;
            t.ensure_grad(aid);
            Tensor& d = t.nodes_[static_cast<size_t>(aid)].grad;
            for (int i = 0; i < c; ++i) {
                double gi = g[i] / l;
                for (int j = 0; j < l; ++j) d[i * l + j] += gi;
            }
        });
    }

    /// 3D convolution with cubic kernel, zero padding, im2col + GEMM.
    /// x: (Cin, X, Y, Z); w: (Cout, Cin, k, k, k); b: (Cout).
    Var conv3d(Var x, Var w, Var b, int stride, int pad) {
        const Tensor& xv = val(x);
        const Tensor& wv = val(w);
        const Tensor& bv = val(b);
        require(xv.rank() == 4 && wv.rank() == 5 && bv.rank() == 1, "conv3d: bad ranks");
        int cin = xv.dim(0);
        int dx = xv.dim(1), dy = xv.dim(2), dz = xv.dim(3);
        int cout = wv.dim(0), k = wv.dim(2);
        require(wv.dim(1) == cin && wv.dim(3) == k && wv.dim(4) == k && bv.size() == cout,
                "conv3d: weight shape mismatch");
        int ex = (dx + 2 * pad - k) / stride + 1;
        int ey = (dy + 2 * pad - k) / stride + 1;
        int ez = (dz + 2 * pad - k) / stride + 1;
        require(ex > 0 && ey > 0 && ez > 0, "conv3d: output collapses");
        int ck = cin * k * k * k;
        int npos = ex * ey * ez;

        Tensor col = im2col3d(xv, cin, dx, dy, dz, k, stride, pad, ex, ey, ez);
        Tensor out({cout, ex, ey, ez});
        EMap(out.data(), cout, npos).noalias() =
            ECMap(wv.data(), cout, ck) * ECMap(col.data(), ck, npos);
        for (int oc = 0; oc < cout; ++oc) {
            double bb = bv[oc];
            double* o = out.data() + oc * npos;
            for (int p = 0; p < npos; ++p) o[p] += bb;
        }
        Node n;
        n.owned = std::move(out);
        n.requires_grad = wants_grad(x.id) || wants_grad(w.id) || wants_grad(b.id);
        if (n.requires_grad) {
            int xid = x.id, wid = w.id, bid = b.id;
            n.backward = [xid, wid, bid, cin, dx, dy, dz, cout, k, stride, pad, ex, ey, ez](Tape& t) {
                const Tensor& g = t.nodes_[static_cast<size_t>(t.backward_node_)].grad;
                const Tensor& xv = t.value_of(xid);
                const Tensor& wv = t.value_of(wid);
                int ck = cin * k * k * k;
                int npos = ex * ey * ez;
                ECMap gm(g.data(), cout, npos);
                if (t.wants_grad(bid)) {
                    t.ensure_grad(bid);
                    Tensor& db = t.nodes_[static_cast<size_t>(bid)].grad;
                    for (int oc = 0; oc < cout; ++oc) db[oc] += gm.row(oc).sum();
                }
                if (t.wants_grad(wid)) {
                    Tensor col = im2col3d(xv, cin, dx, dy, dz, k, stride, pad, ex, ey, ez);
                    t.ensure_grad(wid);
                    Tensor& dw = t.nodes_[static_cast<size_t>(wid)].grad;
                    EMap(dw.data(), cout, ck).noalias() +=
                        gm * ECMap(col.data(), ck, npos).transpose();
                }
                if (t.wants_grad(xid)) {
                    Tensor dcol({ck, npos});
                    EMap(dcol.data(), ck, npos).noalias() =
                        ECMap(wv.data(), cout, ck).transpose() * gm;
                    t.ensure_grad(xid);
                    col2im3d(dcol, t.nodes_[static_cast<size_t>(xid)].grad,
                             cin, dx, dy, dz, k, stride, pad, ex, ey, ez);
                }
            };
        }
        return push_with_self(std::move(n));
    }

    /// Mean over all spatial positions per channel. x: (C, X, Y, Z) -> (C).
    Var volume_mean(Var x) {
        const Tensor& xv = val(x);
        require(xv.rank() == 4, "volume_mean: expects rank-4");
        int c = xv.dim(0);
        int npos = xv.dim(1) * xv.dim(2) * xv.dim(3);
        Tensor out({c});
        for (int i = 0; i < c; ++i) {
            double s = 0.0;
            const double* p = xv.data() + i * npos;
            for (int j = 0; j < npos; ++j) s += p[j];
            out[i] = s / npos;
        }
        return unary(std::move(out), x, [c, npos](Tape& t, int oid, int aid) {
            const Tensor& g = t.nodes_[static_cast<size_t>(oid)].grad;
            t.ensure_grad(aid);
            Tensor& d = t.nodes_[static_cast<size_t>(aid)].grad;
            for (int i = 0; i < c; ++i) {
                double gi = g[i] / npos;
                double* p = d.data() + i * npos;
                for (int j = 0; j < npos; ++j) p[j] += gi;
            }
        });
    }

private:
    struct Node {
        Tensor owned;
        const Tensor* external = nullptr;
        Tensor grad;
        bool grad_alloc = false;
        bool requires_grad = false;
        std::function<void(Tape&)> backward;
    };

    const Tensor& value_of(int id) const {
        const Node& n = nodes_[static_cast<size_t>(id)];
        return n.external ? *n.external : n.owned;
    }

    bool wants_grad(int id) const { return nodes_[static_cast<size_t>(id)].requires_grad; }

    void ensure_grad(int id) {
        Node& n = nodes_[static_cast<size_t>(id)];
        if (!n.grad_alloc) {
            n.grad = Tensor(value_of(id).shape());
            n.grad_alloc = true;
        }
    }

    void accumulate(int id, const Tensor& g) {
        if (!wants_grad(id)) return;
        ensure_grad(id);
        Tensor& d = nodes_[static_cast<size_t>(id)].grad;
        for (int i = 0; i < d.size(); ++i) d[i] += g[i];
    }

    void accumulate_scaled(int id, const Tensor& g, double c) {
        if (!wants_grad(id)) return;
        ensure_grad(id);
        Tensor& d = nodes_[static_cast<size_t>(id)].grad;
        for (int i = 0; i < d.size(); ++i) d[i] += c * g[i];
    }

    void accumulate_scaled_tensor(int id, const Tensor& src, double c) {
        if (!wants_grad(id)) return;
        ensure_grad(id);
        Tensor& d = nodes_[static_cast<size_t>(id)].grad;
        for (int i = 0; i < d.size(); ++i) d[i] += c * src[i];
    }

    Var push(Node n) {
        nodes_.push_back(std::move(n));
        return Var{static_cast<int>(nodes_.size()) - 1};
    }

    // Wraps a node whose backward closure needs its own id (backward_node_).
    Var push_with_self(Node n) {
        Var v = push(std::move(n));
        Node& stored = nodes_[static_cast<size_t>(v.id)];
        if (stored.backward) {
            auto inner = std::move(stored.backward);
            int self = v.id;
            stored.backward = [inner, self](Tape& t) {
                t.backward_node_ = self;
                inner(t);
            };
        }
        return v;
    }

    Var unary(Tensor out, Var a, std::function<void(Tape&, int, int)> bw) {
        Node n;
        n.owned = std::move(out);
        n.requires_grad = wants_grad(a.id);
        Var v = push(std::move(n));
        if (nodes_.back().requires_grad) {
            int oid = v.id, aid = a.id;
            nodes_.back().backward = [bw, oid, aid](Tape& t) { bw(t, oid, aid); };
        }
        return v;
    }

    Var unary_or_binary(Tensor out, Var a, Var b, std::function<void(Tape&, int, int, int)> bw) {
        Node n;
        n.owned = std::move(out);
        n.requires_grad = wants_grad(a.id) || wants_grad(b.id);
        Var v = push(std::move(n));
        if (nodes_.back().requires_grad) {
            int oid = v.id, aid = a.id, bid = b.id;
            nodes_.back().backward = [bw, oid, aid, bid](Tape& t) { bw(t, oid, aid, bid); };
        }
        return v;
    }

    static Tensor im2col3d(const Tensor& x, int cin, int dx, int dy, int dz,
                           int k, int stride, int pad, int ex, int ey, int ez) {
        int ck = cin * k * k * k;
        int npos = ex * ey * ez;
        Tensor col({ck, npos});
        int rowidx = 0;
        for (int ic = 0; ic < cin; ++ic) {
            for (int ki = 0; ki < k; ++ki) {
                for (int kj = 0; kj < k; ++kj) {
                    for (int kl = 0; kl < k; ++kl, ++rowidx) {
                        double* dst = col.data() + rowidx * npos;
                        int p = 0;
                        for (int ox = 0; ox < ex; ++ox) {
                            int ix = ox * stride - pad + ki;
                            bool okx = ix >= 0 && ix < dx;
                            for (int oy = 0; oy < ey; ++oy) {
                                int iy = oy * stride - pad + kj;
                                bool oky = okx && iy >= 0 && iy < dy;
                                for (int oz = 0; oz < ez; ++oz, ++p) {
                                    int iz = oz * stride - pad + kl;
                                    dst[p] = (oky && iz >= 0 && iz < dz)
                                                 ? x[((ic * dx + ix) * dy + iy) * dz + iz]
                                                 : 0.0;
                                }
                            }
                        }
                    }
                }
            }
        }
        return col;
    }

    static void col2im3d(const Tensor& dcol, Tensor& dx_out, int cin, int dx, int dy, int dz,
                         int k, int stride, int pad, int ex, int ey, int ez) {
        int npos = ex * ey * ez;
        int rowidx = 0;
        for (int ic = 0; ic < cin; ++ic) {
            for (int ki = 0; ki < k; ++ki) {
                for (int kj = 0; kj < k; ++kj) {
                    for (int kl = 0; kl < k; ++kl, ++rowidx) {
                        const double* src = dcol.data() + rowidx * npos;
                        int p = 0;
                        for (int ox = 0; ox < ex; ++ox) {
                            int ix = ox * stride - pad + ki;
                            bool okx = ix >= 0 && ix < dx;
                            for (int oy = 0; oy < ey; ++oy) {
                                int iy = oy * stride - pad + kj;
                                bool oky = okx && iy >= 0 && iy < dy;
                                for (int oz = 0; oz < ez; ++oz, ++p) {
                                    int iz = oz * stride - pad + kl;
                                    if (oky && iz >= 0 && iz < dz)
                                        dx_out[((ic * dx + ix) * dy + iy) * dz + iz] += src[p];
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    std::vector<Node> nodes_;
    std::unordered_map<const Tensor*, int> param_index_;
    int backward_node_ = -1;
};

}  // namespace msfuse::ad
