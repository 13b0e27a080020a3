#pragma once

#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "sgdlab/linalg.hpp"
#include "sgdlab/problem.hpp"

namespace sgdlab {

enum class Activation { identity, tanh_fn, sigmoid_fn };

inline double activate(Activation a, double h) {
    switch (a) {
        case Activation::identity: return h;
        case Activation::tanh_fn: return std::tanh(h);
        case Activation::sigmoid_fn: return 1.0 / (1.0 + std::exp(-h));
    }
    return h;
}

inline double activate_d1(Activation a, double h) {
    switch (a) {
        case Activation::identity: return 1.0;
        case Activation::tanh_fn: {
            double t = std::tanh(h);
            return 1.0 - t * t;
        }
        case Activation::sigmoid_fn: {
            double s = 1.0 / (1.0 + std::exp(-h));
            return s * (1.0 - s);
        }
    }
    return 1.0;
}

/// Feedforward net with a linear output layer and 1/sqrt(fan-in) scaling at
/// every layer:
///   a0 = x,  ai = act( Wi a_{i-1} / sqrt(m_{i-1}) )  for i = 1..l-1,
///   f(w;x) = Wl a_{l-1} / sqrt(m_{l-1}).
/// `hidden` holds m_1..m_{l-1}; layer_count() == l is the number of weight
/// matrices, so l = 1 is the pure linear map x -> W1 x / sqrt(m0).
struct NetworkSpec {
    std::size_t input_dim = 1;               // m0
    std::vector<std::size_t> hidden;         // m1..m_{l-1}
    Activation activation = Activation::tanh_fn;
    double data_bound = 1.0;                 // C

    std::size_t layer_count() const { return hidden.size() + 1; }

    std::size_t width(std::size_t i) const {  // m_i, i in [0, l]; m_l = 1
        if (i == 0) return input_dim;
        if (i <= hidden.size()) return hidden[i - 1];
        return 1;
    }

    // Shape of W^(i+1) for i in [0, l): rows m_{i+1}, cols m_i.
    std::pair<std::size_t, std::size_t> layer_shape(std::size_t i) const {
        return {width(i + 1), width(i)};
    }

    std::size_t param_count() const {
        std::size_t total = 0;
        for (std::size_t i = 0; i < layer_count(); ++i) {
            auto [r, c] = layer_shape(i);
            total += r * c;
        }
        return total;
    }

    void validate() const {
        if (input_dim < 1) throw ConfigError("network input_dim must be >= 1");
        for (std::size_t m : hidden)
            if (m < 1) throw ConfigError("network widths must be >= 1");
        if (!(data_bound > 0)) throw ConfigError("data bound C must be positive");
    }

    // Recorded activation constants: tanh and sigmoid are 1-Lipschitz
    // (sigmoid even 1/4) with bounded second derivative.
    double lipschitz_sigma() const { return 1.0; }
    double smooth_sigma() const {
        switch (activation) {
            case Activation::identity: return 0.0;
            case Activation::tanh_fn: return 4.0 / (3.0 * std::sqrt(3.0));
            case Activation::sigmoid_fn: return 1.0 / (6.0 * std::sqrt(3.0));
        }
        return 0.0;
    }
};

/// Per-layer weight matrices. The flat layout is fixed: layer-major,
/// row-major within a layer.
struct NetworkWeights {
    std::vector<Matrix> layers;

    Vec flatten() const {
        Vec out;
        for (const auto& m : layers) out.insert(out.end(), m.data.begin(), m.data.end());
        return out;
    }

    static NetworkWeights unflatten(const NetworkSpec& spec, const Vec& flat) {
        if (flat.size() != spec.param_count())
            throw ConfigError("flat weight size does not match the spec");
        NetworkWeights w;
        std::size_t off = 0;
        for (std::size_t i = 0; i < spec.layer_count(); ++i) {
            auto [r, c] = spec.layer_shape(i);
            Matrix m(r, c);
            std::copy(flat.begin() + off, flat.begin() + off + r * c, m.data.begin());
            off += r * c;
            w.layers.push_back(std::move(m));
        }
        return w;
    }
};

/// i.i.d. N(0,1) entries in flat order from the seeded stream; deterministic
/// in (spec, seed).
inline Vec init_weights(const NetworkSpec& spec, std::uint64_t seed) {
    Rng rng(seed);
    Vec w(spec.param_count());
    for (auto& x : w) x = rng.normal();
    return w;
}

namespace detail {

struct ForwardCache {
    // acts[i] = a^(i) for i = 0..l-1; pre[i] = pre-activation of layer i+1
    std::vector<Vec> acts;
    std::vector<Vec> pre;
    double output = 0.0;
};

inline void forward_cached(const NetworkSpec& spec, const Vec& w, const Vec& x,
                           ForwardCache& cache) {
    const std::size_t l = spec.layer_count();
    cache.acts.assign(l, {});
    cache.pre.assign(l - 1, {});
    cache.acts[0] = x;
    std::size_t off = 0;
    for (std::size_t i = 0; i + 1 < l; ++i) {
        auto [rows, cols] = spec.layer_shape(i);
        const double scale = 1.0 / std::sqrt(static_cast<double>(cols));
        Vec h(rows);
        const Vec& a = cache.acts[i];
        for (std::size_t r = 0; r < rows; ++r) {
            double s = 0.0;
            const double* wr = w.data() + off + r * cols;
            for (std::size_t c = 0; c < cols; ++c) s += wr[c] * a[c];
            h[r] = scale * s;
        }
        off += rows * cols;
        cache.pre[i] = h;
        Vec act(rows);
        for (std::size_t r = 0; r < rows; ++r) act[r] = activate(spec.activation, h[r]);
        cache.acts[i + 1] = std::move(act);
    }
    // linear output layer
    auto [rows, cols] = spec.layer_shape(l - 1);
    const double scale = 1.0 / std::sqrt(static_cast<double>(cols));
    const Vec& a = cache.acts[l - 1];
    double s = 0.0;
    const double* wr = w.data() + off;
    for (std::size_t c = 0; c < cols; ++c) s += wr[c] * a[c];
    cache.output = scale * s;
}

}  // namespace detail

inline double forward(const NetworkSpec& spec, const Vec& w, const Vec& x) {
    detail::ForwardCache cache;
    detail::forward_cached(spec, w, x, cache);
    if (!is_finite(cache.output)) throw NonFiniteValue("network forward overflow");
    return cache.output;
}

/// Reverse-mode gradient of f(w;x) with respect to the flat weights.
inline void grad_params(const NetworkSpec& spec, const Vec& w, const Vec& x, Vec& out) {
    const std::size_t l = spec.layer_count();
    detail::ForwardCache cache;
    detail::forward_cached(spec, w, x, cache);
    if (!is_finite(cache.output)) throw NonFiniteValue("network forward overflow");
    out.assign(spec.param_count(), 0.0);

    // layer offsets in the flat vector
    std::vector<std::size_t> offsets(l);
    std::size_t off = 0;
    for (std::size_t i = 0; i < l; ++i) {
        offsets[i] = off;
        auto [r, c] = spec.layer_shape(i);
        off += r * c;
    }

    // output layer: df/dWl = a^(l-1) / sqrt(m_{l-1})
    auto [orows, ocols] = spec.layer_shape(l - 1);
    const double oscale = 1.0 / std::sqrt(static_cast<double>(ocols));
    const Vec& alast = cache.acts[l - 1];
    for (std::size_t c = 0; c < ocols; ++c) out[offsets[l - 1] + c] = oscale * alast[c];

    // pull the sensitivity back through the hidden layers
    Vec g(ocols);  // d f / d a^(l-1)
    {
        const double* wr = w.data() + offsets[l - 1];
        for (std::size_t c = 0; c < ocols; ++c) g[c] = oscale * wr[c];
    }
    for (std::size_t i = l - 1; i-- > 0;) {
        auto [rows, cols] = spec.layer_shape(i);
        const double scale = 1.0 / std::sqrt(static_cast<double>(cols));
        const Vec& h = cache.pre[i];
        const Vec& a = cache.acts[i];
        Vec delta(rows);
        for (std::size_t r = 0; r < rows; ++r)
            delta[r] = g[r] * activate_d1(spec.activation, h[r]);
        double* go = out.data() + offsets[i];
        for (std::size_t r = 0; r < rows; ++r) {
            const double ds = delta[r] * scale;
            for (std::size_t c = 0; c < cols; ++c) go[r * cols + c] = ds * a[c];
        }
        if (i > 0) {
            Vec gnext(cols, 0.0);
            const double* wr = w.data() + offsets[i];
            for (std::size_t r = 0; r < rows; ++r) {
                const double ds = delta[r] * scale;
                for (std::size_t c = 0; c < cols; ++c) gnext[c] += ds * wr[r * cols + c];
            }
            g = std::move(gnext);
        }
    }
}

inline Vec grad_params_vec(const NetworkSpec& spec, const Vec& w, const Vec& x) {
    Vec g;
    grad_params(spec, w, x, g);
    return g;
}

/// Hessian-vector product d^2 f(w;x) . v by central differences of the
/// analytic gradient along v.
inline Vec hvp(const NetworkSpec& spec, const Vec& w, const Vec& x, const Vec& v) {
    double nv = norm2(v);
    if (!(nv > 0)) throw Error("hvp: direction must be nonzero");
    double h = fd_step(w) / nv;
    Vec wp = w, wm = w;
    axpy(h, v, wp);
    axpy(-h, v, wm);
    Vec gp = grad_params_vec(spec, wp, x);
    Vec gm = grad_params_vec(spec, wm, x);
    Vec out(w.size());
    for (std::size_t i = 0; i < w.size(); ++i) {
        out[i] = (gp[i] - gm[i]) / (2.0 * h);
        if (!is_finite(out[i])) throw NonFiniteValue("hvp overflow");
    }
    return out;
}

struct OpnormEstimate {
    double value = 0.0;
    bool converged = false;
    std::size_t iters = 0;
};

/// ||d^2 f(w;x)||_op by power iteration on v -> hvp(v). The start vector is
/// a fixed deterministic profile, so results are reproducible.
inline OpnormEstimate hessian_opnorm(const NetworkSpec& spec, const Vec& w, const Vec& x,
                                     double tol, std::size_t max_iter) {
    if (!(tol > 0)) throw Error("hessian_opnorm: tol must be positive");
    auto apply = [&](const Vec& v) { return hvp(spec, w, x, v); };
    PowerIterResult r = power_iteration(apply, power_start(w.size()), tol, max_iter);
    return OpnormEstimate{r.value, r.converged, r.iters};
}

struct Dataset {
    Matrix inputs;  // n x m0
    Vec labels;

    std::size_t size() const { return inputs.rows; }
    Vec input(std::size_t i) const {
        Vec x(inputs.cols);
        for (std::size_t j = 0; j < inputs.cols; ++j) x[j] = inputs(i, j);
        return x;
    }
};

/// Desk-scale default: inputs i.i.d. uniform on the unit sphere, labels +-1
/// alternating.
inline Dataset make_desk_dataset(std::size_t n, std::size_t input_dim, Rng& rng) {
    Dataset d;
    d.inputs = Matrix(n, input_dim);
    d.labels.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        Vec x = rng.on_sphere(input_dim);
        for (std::size_t j = 0; j < input_dim; ++j) d.inputs(i, j) = x[j];
        d.labels[i] = (i % 2 == 0) ? 1.0 : -1.0;
    }
    return d;
}

/// Neural tangent kernel K[i][j] = <grad_w f(w,x_i), grad_w f(w,x_j)>.
inline Matrix ntk_assemble(const NetworkSpec& spec, const Vec& w, const Dataset& data) {
    if (data.size() == 0) throw ConfigError("ntk_assemble: empty dataset");
    const std::size_t n = data.size();
    std::vector<Vec> grads(n);
    for (std::size_t i = 0; i < n; ++i) {
        Vec x = data.input(i);
        if (norm2(x) > spec.data_bound + 1e-9)
            throw ConfigError("ntk_assemble: input exceeds the data bound");
        grads[i] = grad_params_vec(spec, w, x);
    }
    Matrix k(n, n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i; j < n; ++j) {
            double s = dot(grads[i], grads[j]);
            k(i, j) = s;
            k(j, i) = s;
        }
    return k;
}

/// Smallest NTK eigenvalue via shifted power iteration.
inline double min_eig(const Matrix& k, double tol) { return min_eig_sym(k, tol); }

/// Least-squares training objective with per-sample loss (f(w,x_i) - y_i)^2,
/// whose mean is the displayed objective (1/n) sum (f - y)^2 = 1/2 ||F||^2.
/// No projector: the solution set of a network is not computable.
class NNProblem final : public StochasticProblem {
public:
    NNProblem(NetworkSpec spec, Vec w_init, Dataset data)
        : spec_(std::move(spec)), w_init_(std::move(w_init)), data_(std::move(data)) {
        spec_.validate();
        if (data_.size() == 0) throw ConfigError("NN problem needs data");
        for (std::size_t i = 0; i < data_.size(); ++i) {
            if (!is_finite(data_.labels[i])) throw ConfigError("labels must be finite");
            if (norm2(data_.input(i)) > spec_.data_bound + 1e-9)
                throw ConfigError("input exceeds the data bound");
        }
    }

    const NetworkSpec& spec() const { return spec_; }
    const Vec& anchor() const { return w_init_; }
    const Dataset& data() const { return data_; }

    std::size_t dim() const override { return spec_.param_count(); }
    std::optional<std::size_t> sample_count() const override { return data_.size(); }
    SampleId sample(Rng& rng) const override {
        SampleId z;
        z.index = rng.index(data_.size());
        return z;
    }

    double loss(const Vec& w, const SampleId& z) const override {
        double r = forward(spec_, w, data_.input(z.index)) - data_.labels[z.index];
        return r * r;
    }
    void grad(const Vec& w, const SampleId& z, Vec& out) const override {
        Vec x = data_.input(z.index);
        detail::ForwardCache cache;
        detail::forward_cached(spec_, w, x, cache);
        if (!is_finite(cache.output)) throw NonFiniteValue("network forward overflow");
        double r = cache.output - data_.labels[z.index];
        grad_params(spec_, w, x, out);
        for (auto& g : out) g *= 2.0 * r;
    }
    double full_loss(const Vec& w) const override {
        KahanSum s;
        SampleId z;
        for (std::size_t i = 0; i < data_.size(); ++i) {
            z.index = i;
            s.add(loss(w, z));
        }
        return s.value() / static_cast<double>(data_.size());
    }

private:
    NetworkSpec spec_;
    Vec w_init_;
    Dataset data_;
};

inline NNProblem make_nn_problem(NetworkSpec spec, Vec w_init, Dataset data) {
    return NNProblem(std::move(spec), std::move(w_init), std::move(data));
}

// ---------------------------------------------------------------------------
// Weight checkpoints: flat binary array with a small header, little-endian.
//   magic "SGLW" | u32 version=1 | u32 layout=1 (layer-major, row-major)
//   u64 seed | u32 layer count | per layer u32 rows, u32 cols | f64 payload
// ---------------------------------------------------------------------------

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    os.write(reinterpret_cast<const char*>(b), 4);
}
inline void put_u64(std::ostream& os, std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    os.write(reinterpret_cast<const char*>(b), 8);
}
inline std::uint32_t get_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    return v;
}
inline std::uint64_t get_u64(std::istream& is) {
    unsigned char b[8];
    is.read(reinterpret_cast<char*>(b), 8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
}

}  // namespace detail

inline void save_weights(const std::string& path, const NetworkSpec& spec, const Vec& flat,
                         std::uint64_t seed) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw Error("cannot open checkpoint for writing: " + path);
    os.write("SGLW", 4);
    detail::put_u32(os, 1);  // version
    detail::put_u32(os, 1);  // layout tag
    detail::put_u64(os, seed);
    detail::put_u32(os, static_cast<std::uint32_t>(spec.layer_count()));
    for (std::size_t i = 0; i < spec.layer_count(); ++i) {
        auto [r, c] = spec.layer_shape(i);
        detail::put_u32(os, static_cast<std::uint32_t>(r));
        detail::put_u32(os, static_cast<std::uint32_t>(c));
    }
    for (double x : flat) {
        std::uint64_t bits;
        std::memcpy(&bits, &x, 8);
        detail::put_u64(os, bits);
    }
}

struct Checkpoint {
    std::vector<std::pair<std::uint32_t, std::uint32_t>> shapes;
    std::uint64_t seed = 0;
    Vec flat;
};

inline Checkpoint load_weights(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw Error("cannot open checkpoint: " + path);
    char magic[4];
    is.read(magic, 4);
    if (std::memcmp(magic, "SGLW", 4) != 0) throw Error("bad checkpoint magic");
    if (detail::get_u32(is) != 1) throw Error("unsupported checkpoint version");
    if (detail::get_u32(is) != 1) throw Error("unsupported weight layout");
    Checkpoint ck;
    ck.seed = detail::get_u64(is);
    std::uint32_t layers = detail::get_u32(is);
    std::size_t total = 0;
    for (std::uint32_t i = 0; i < layers; ++i) {
        std::uint32_t r = detail::get_u32(is);
        std::uint32_t c = detail::get_u32(is);
        ck.shapes.emplace_back(r, c);
        total += static_cast<std::size_t>(r) * c;
    }
    ck.flat.resize(total);
    for (auto& x : ck.flat) {
        std::uint64_t bits = detail::get_u64(is);
        std::memcpy(&x, &bits, 8);
    }
    if (!is) throw Error("truncated checkpoint: " + path);
    return ck;
}

}  // namespace sgdlab
