#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "msfuse/rng.hpp"
#include "msfuse/tape.hpp"
#include "msfuse/tensor.hpp"

namespace msfuse::nn {

struct ParamRef {
    std::string name;
    Tensor* tensor;
};
using ParamRefs = std::vector<ParamRef>;

inline void append_prefixed(ParamRefs& dst, const std::string& prefix, ParamRefs src) {
    for (auto& r : src) dst.push_back({prefix + "." + r.name, r.tensor});
}

inline Tensor xavier_uniform(Rng& rng, int fan_out, int fan_in, std::vector<int> shape) {
    double s = std::sqrt(6.0 / (fan_in + fan_out));
    Tensor t(std::move(shape));
    for (int i = 0; i < t.size(); ++i) t[i] = runif(rng, -s, s);
    return t;
}

// ---- dense layer ----

struct LinearParams {
    Tensor w;  // out x in
    Tensor b;  // out

    static LinearParams init(Rng& rng, int out, int in) {
        LinearParams p;
        p.w = xavier_uniform(rng, out, in, {out, in});
        p.b = Tensor({out});
        return p;
    }

    ParamRefs params() { return {{"w", &w}, {"b", &b}}; }
};

struct BoundLinear {
    ad::Var w, b;
};

inline BoundLinear bind(ad::Tape& t, const LinearParams& p) {
    return {t.param(&p.w), t.param(&p.b)};
}

inline ad::Var apply(ad::Tape& t, const BoundLinear& l, ad::Var x) {
    return t.add(t.matvec(l.w, x), l.b);
}

/// X: n x in -> n x out, rows treated as a batch.
inline ad::Var apply_rows(ad::Tape& t, const BoundLinear& l, ad::Var x) {
    return t.add_rowvec(t.matmul_nt(x, l.w), l.b);
}

// ---- two-layer perceptron (Linear -> ReLU -> Linear) ----

struct MlpParams {
    LinearParams l1, l2;

    static MlpParams init(Rng& rng, int out, int hidden, int in) {
        return {LinearParams::init(rng, hidden, in), LinearParams::init(rng, out, hidden)};
    }

    ParamRefs params() {
        ParamRefs r;
        append_prefixed(r, "l1", l1.params());
        append_prefixed(r, "l2", l2.params());
        return r;
    }
};

struct BoundMlp {
    BoundLinear l1, l2;
};

inline BoundMlp bind(ad::Tape& t, const MlpParams& p) {
    return {bind(t, p.l1), bind(t, p.l2)};
}

inline ad::Var apply_rows(ad::Tape& t, const BoundMlp& m, ad::Var x) {
    return apply_rows(t, m.l2, t.relu(apply_rows(t, m.l1, x)));
}

// ---- GRU cell ----
// Gate convention follows the common r/z/n ("reset, update, candidate") form:
//   r = sigmoid(W_ir x + b_ir + W_hr h + b_hr)
//   z = sigmoid(W_iz x + b_iz + W_hz h + b_hz)
//   n = tanh(W_in x + b_in + r * (W_hn h + b_hn))
//   h' = (1 - z) * n + z * h

struct GruParams {
    LinearParams ir, iz, in_;
    LinearParams hr, hz, hn;

    static GruParams init(Rng& rng, int hidden, int input) {
        GruParams p;
        p.ir = LinearParams::init(rng, hidden, input);
        p.iz = LinearParams::init(rng, hidden, input);
        p.in_ = LinearParams::init(rng, hidden, input);
        p.hr = LinearParams::init(rng, hidden, hidden);
        p.hz = LinearParams::init(rng, hidden, hidden);
        p.hn = LinearParams::init(rng, hidden, hidden);
        return p;
    }

    ParamRefs params() {
        ParamRefs r;
        append_prefixed(r, "ir", ir.params());
        append_prefixed(r, "iz", iz.params());
        append_prefixed(r, "in", in_.params());
        append_prefixed(r, "hr", hr.params());
        append_prefixed(r, "hz", hz.params());
        append_prefixed(r, "hn", hn.params());
        return r;
    }
};

struct BoundGru {
    BoundLinear ir, iz, in_, hr, hz, hn;
};

inline BoundGru bind(ad::Tape& t, const GruParams& p) {
    return {bind(t, p.ir), bind(t, p.iz), bind(t, p.in_),
            bind(t, p.hr), bind(t, p.hz), bind(t, p.hn)};
}

/// One step for a whole batch of rows. x: n x input, h: n x hidden.
inline ad::Var gru_step_rows(ad::Tape& t, const BoundGru& g, ad::Var x, ad::Var h) {
    ad::Var r = t.sigmoid(t.add(apply_rows(t, g.ir, x), apply_rows(t, g.hr, h)));
    ad::Var z = t.sigmoid(t.add(apply_rows(t, g.iz, x), apply_rows(t, g.hz, h)));
    ad::Var n = t.tanh_(t.add(apply_rows(t, g.in_, x), t.mul(r, apply_rows(t, g.hn, h))));
    ad::Var one_minus_z = t.affine(z, -1.0, 1.0);
    return t.add(t.mul(one_minus_z, n), t.mul(z, h));
}

// ---- dropout ----

/// Inverted dropout mask: entries are 0 with probability rate, else 1/(1-rate).
inline Tensor dropout_mask(std::vector<int> shape, double rate, Rng& rng) {
    Tensor m(std::move(shape));
    double keep = 1.0 - rate;
    for (int i = 0; i < m.size(); ++i) m[i] = runif(rng) < rate ? 0.0 : 1.0 / keep;
    return m;
}

// ---- Adam ----

class Adam {
public:
    explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

    /// grads[i] corresponds to params[i]; slot layout must stay stable
    /// across steps.
    void step(const std::vector<Tensor*>& params, const std::vector<const Tensor*>& grads) {
        require(params.size() == grads.size(), "Adam: param/grad count mismatch");
        if (m_.empty()) {
            for (auto* p : params) {
                m_.emplace_back(p->shape());
                v_.emplace_back(p->shape());
            }
        }
        require(m_.size() == params.size(), "Adam: slot count changed");
        ++t_;
        double bc1 = 1.0 - std::pow(beta1_, t_);
        double bc2 = 1.0 - std::pow(beta2_, t_);
        for (size_t k = 0; k < params.size(); ++k) {
            Tensor& p = *params[k];
            const Tensor& g = *grads[k];
            Tensor& m = m_[k];
            Tensor& v = v_[k];
            for (int i = 0; i < p.size(); ++i) {
                m[i] = beta1_ * m[i] + (1.0 - beta1_) * g[i];
                v[i] = beta2_ * v[i] + (1.0 - beta2_) * g[i] * g[i];
                p[i] -= lr_ * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + eps_);
            }
        }
    }

    double lr() const { return lr_; }

private:
    double lr_, beta1_, beta2_, eps_;
    long t_ = 0;
    std::vector<Tensor> m_, v_;
};

}  // namespace msfuse::nn
