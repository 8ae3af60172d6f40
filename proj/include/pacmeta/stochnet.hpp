#pragma once

// Factorized-Gaussian fully connected networks.
//
// Each layer j stores a Gaussian over a [fan_in + 1, fan_out] weight matrix;
// the last row is the bias. Hidden layers use ReLU, the output layer is linear
// followed by log-softmax.

#include "pacmeta/autodiff.hpp"
#include "pacmeta/rng.hpp"
#include "pacmeta/tensor.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <system_error>
#include <vector>

namespace pacmeta {

struct Architecture {
    std::vector<std::size_t> widths; // input, hidden..., classes

    std::size_t n_layers() const { return widths.size() < 2 ? 0 : widths.size() - 1; }
    std::size_t n_inputs() const { return widths.front(); }
    std::size_t n_classes() const { return widths.back(); }
    Shape layer_shape(std::size_t j) const { return {widths[j] + 1, widths[j + 1]}; }

    std::size_t n_params() const {
        std::size_t n = 0;
        for (std::size_t j = 0; j < n_layers(); ++j) n += (widths[j] + 1) * widths[j + 1];
        return n;
    }

    bool operator==(const Architecture&) const = default;
};

inline std::string to_string(const Architecture& arch) {
    std::string out;
    for (std::size_t i = 0; i < arch.widths.size(); ++i) {
        if (i) out += "-";
        out += std::to_string(arch.widths[i]);
    }
    return out;
}

struct GaussianLayerParams {
    Tensor mu;
    Tensor log_var;

    bool operator==(const GaussianLayerParams&) const = default;
};

/// Concrete weight realization, one [fan_in + 1, fan_out] matrix per layer.
using Weights = std::vector<Tensor>;

class StochasticNet {
public:
    StochasticNet() = default;

    StochasticNet(Architecture arch, std::vector<GaussianLayerParams> layers)
        : arch_(std::move(arch)), layers_(std::move(layers)) {
        if (arch_.n_layers() == 0) throw std::invalid_argument("stochastic net: needs at least one layer");
        // Input width 0 is allowed: a bias-only net with one weight per output.
        for (std::size_t j = 1; j < arch_.widths.size(); ++j)
            if (arch_.widths[j] == 0) throw std::invalid_argument("stochastic net: zero layer width");
        if (layers_.size() != arch_.n_layers()) {
            throw std::invalid_argument("stochastic net: architecture " + to_string(arch_) + " needs " +
                                        std::to_string(arch_.n_layers()) + " layers, got " +
                                        std::to_string(layers_.size()));
        }
        for (std::size_t j = 0; j < layers_.size(); ++j) {
            const Shape expect = arch_.layer_shape(j);
            if (layers_[j].mu.shape() != expect || layers_[j].log_var.shape() != expect) {
                throw ShapeError("stochastic net: layer " + std::to_string(j) + " expects " +
                                 to_string(expect) + ", got mu " + to_string(layers_[j].mu.shape()) +
                                 " and log_var " + to_string(layers_[j].log_var.shape()));
            }
        }
    }

    /// Net with every mean equal to `mu` and every log-variance equal to `log_var`.
    static StochasticNet constant(const Architecture& arch, double mu, double log_var) {
        std::vector<GaussianLayerParams> layers;
        for (std::size_t j = 0; j < arch.n_layers(); ++j) {
            layers.push_back({Tensor(arch.layer_shape(j), mu), Tensor(arch.layer_shape(j), log_var)});
        }
        return StochasticNet(arch, std::move(layers));
    }

    const Architecture& arch() const { return arch_; }
    const std::vector<GaussianLayerParams>& layers() const { return layers_; }
    std::vector<GaussianLayerParams>& layers() { return layers_; }
    const GaussianLayerParams& layer(std::size_t j) const { return layers_.at(j); }
    GaussianLayerParams& layer(std::size_t j) { return layers_.at(j); }
    std::size_t n_params() const { return arch_.n_params(); }

    bool operator==(const StochasticNet&) const = default;

private:
    Architecture arch_;
    std::vector<GaussianLayerParams> layers_;
};

/// Weight means ~ U(-b, b) with b = sqrt(6 / (fan_in + fan_out)), bias means 0,
/// log-variances ~ N(-10, 0.01).
inline StochasticNet init_stochastic_net(const Architecture& arch, Rng& rng,
                                         double log_var_mean = -10.0, double log_var_std = 0.1) {
    std::vector<GaussianLayerParams> layers;
    for (std::size_t j = 0; j < arch.n_layers(); ++j) {
        const std::size_t fan_in = arch.widths[j], fan_out = arch.widths[j + 1];
        const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
        GaussianLayerParams layer{Tensor(arch.layer_shape(j)), Tensor(arch.layer_shape(j))};
        for (std::size_t r = 0; r < fan_in; ++r)
            for (std::size_t c = 0; c < fan_out; ++c) layer.mu(r, c) = rng.uniform(-bound, bound);
        for (double& v : layer.log_var.data()) v = rng.normal(log_var_mean, log_var_std);
        layers.push_back(std::move(layer));
    }
    return StochasticNet(arch, std::move(layers));
}

inline void require_same_arch(const StochasticNet& a, const StochasticNet& b, const char* what) {
    if (a.arch() != b.arch()) {
        throw std::invalid_argument(std::string(what) + ": architecture mismatch " + to_string(a.arch()) +
                                    " vs " + to_string(b.arch()));
    }
}

// ---- sampling ------------------------------------------------------------------

/// Standard normal noise shaped like the net's layers.
inline Weights draw_standard_noise(const StochasticNet& net, Rng& rng) {
    Weights eps;
    for (const auto& layer : net.layers()) {
        Tensor e(layer.mu.shape());
        for (double& v : e.data()) v = rng.normal();
        eps.push_back(std::move(e));
    }
    return eps;
}

/// Reparameterized draw w = mu + exp(log_var / 2) * eps.
inline Weights sample_weights(const StochasticNet& net, const Weights& eps) {
    if (eps.size() != net.layers().size()) throw ShapeError("sample_weights: noise layer count mismatch");
    Weights w;
    for (std::size_t j = 0; j < eps.size(); ++j) {
        const auto& layer = net.layer(j);
        if (eps[j].shape() != layer.mu.shape()) {
            throw ShapeError("sample_weights: noise shape " + to_string(eps[j].shape()) + " vs " +
                             to_string(layer.mu.shape()));
        }
        Tensor out(layer.mu.shape());
        for (std::size_t i = 0; i < out.size(); ++i)
            out[i] = layer.mu[i] + std::exp(0.5 * layer.log_var[i]) * eps[j][i];
        w.push_back(std::move(out));
    }
    return w;
}

inline Weights sample_weights(const StochasticNet& net, Rng& rng) {
    return sample_weights(net, draw_standard_noise(net, rng));
}

/// Deterministic weights equal to the means.
inline Weights mean_weights(const StochasticNet& net) {
    Weights w;
    for (const auto& layer : net.layers()) w.push_back(layer.mu);
    return w;
}

/// N(0, kappa_q^2) noise for the hyper-posterior center.
inline Weights draw_center_noise(const StochasticNet& net, double kappa_q, Rng& rng) {
    if (!(kappa_q >= 0.0)) throw std::invalid_argument("perturb_center: kappa_q must be nonnegative");
    Weights eps = draw_standard_noise(net, rng);
    for (auto& e : eps)
        for (double& v : e.data()) v *= kappa_q;
    return eps;
}

/// Prior drawn from the hyper-posterior: means shifted by N(0, kappa_q^2 I) noise,
/// log-variances copied.
inline StochasticNet perturb_center(const StochasticNet& theta, double kappa_q, Rng& rng) {
    const Weights noise = draw_center_noise(theta, kappa_q, rng);
    StochasticNet out = theta;
    for (std::size_t j = 0; j < noise.size(); ++j)
        for (std::size_t i = 0; i < noise[j].size(); ++i) out.layer(j).mu[i] += noise[j][i];
    return out;
}

// ---- divergences -----------------------------------------------------------------

/// KL(q || p) between factorized Gaussians.
inline double kl_factorized_gaussian(const StochasticNet& q, const StochasticNet& p) {
    require_same_arch(q, p, "kl_factorized_gaussian");
    double total = 0.0;
    for (std::size_t j = 0; j < q.layers().size(); ++j) {
        const auto& lq = q.layer(j);
        const auto& lp = p.layer(j);
        double s = 0.0;
        for (std::size_t i = 0; i < lq.mu.size(); ++i) {
            const double d = lq.mu[i] - lp.mu[i];
            s += (lp.log_var[i] - lq.log_var[i]) + (std::exp(lq.log_var[i]) + d * d) / std::exp(lp.log_var[i]) - 1.0;
        }
        total += 0.5 * s;
    }
    return total;
}

/// E_{P ~ N(center, kappa_q^2 I)} KL(q || P) over the prior means, in closed form:
/// KL(q || center) + (kappa_q^2 / 2) * sum_k 1 / sigma_{P,k}^2.
inline double expected_kl_factorized_gaussian(const StochasticNet& q, const StochasticNet& center, double kappa_q) {
    double extra = 0.0;
    for (const auto& layer : center.layers())
        for (double lv : layer.log_var.data()) extra += std::exp(-lv);
    return kl_factorized_gaussian(q, center) + 0.5 * kappa_q * kappa_q * extra;
}

struct HyperConfig {
    double kappa_p = 2000.0;
    double kappa_q = 0.001;
    std::size_t n_params = 1;

    void validate() const {
        if (!(kappa_p > 0.0)) throw std::invalid_argument("hyper config: kappa_p must be positive");
        if (!(kappa_q > 0.0)) throw std::invalid_argument("hyper config: kappa_q must be positive");
        if (n_params < 1) throw std::invalid_argument("hyper config: n_params must be at least 1");
    }
};

enum class KlHyperMode {
    scalar,      // the one-dimensional expression applied to the whole parameter vector
    dimensional, // the N_P-dimensional isotropic Gaussian KL
};

inline double squared_norm_of_means(const StochasticNet& theta) {
    double s = 0.0;
    for (const auto& layer : theta.layers())
        for (double v : layer.mu.data()) s += v * v;
    return s;
}

/// KL(N(theta, kappa_q^2 I) || N(0, kappa_p^2 I)) from the squared norm of theta.
inline double kl_hyper_from_norm(double sq_norm, const HyperConfig& cfg, KlHyperMode mode) {
    cfg.validate();
    const double kp2 = cfg.kappa_p * cfg.kappa_p;
    const double kq2 = cfg.kappa_q * cfg.kappa_q;
    const double log_ratio = std::log(cfg.kappa_p / cfg.kappa_q);
    if (mode == KlHyperMode::scalar) return (sq_norm + kq2) / (2.0 * kp2) + log_ratio - 0.5;
    const double np = static_cast<double>(cfg.n_params);
    return (sq_norm + np * kq2) / (2.0 * kp2) + np * log_ratio - 0.5 * np;
}

inline double kl_hyper(const StochasticNet& theta, const HyperConfig& cfg, KlHyperMode mode) {
    return kl_hyper_from_norm(squared_norm_of_means(theta), cfg, mode);
}

// ---- prediction ------------------------------------------------------------------

/// Log-probabilities [batch, n_classes] for concrete weights.
inline Tensor predict(const Architecture& arch, const Weights& weights, const Tensor& inputs) {
    if (inputs.rank() != 2 || inputs.dim(1) != arch.n_inputs()) {
        throw ShapeError("predict: inputs of shape " + to_string(inputs.shape()) + " do not match " +
                         std::to_string(arch.n_inputs()) + " features");
    }
    if (weights.size() != arch.n_layers()) throw ShapeError("predict: weight layer count mismatch");
    const std::size_t batch = inputs.dim(0);
    Tensor h = inputs;
    for (std::size_t j = 0; j < weights.size(); ++j) {
        const Tensor& w = weights[j];
        if (w.shape() != arch.layer_shape(j)) {
            throw ShapeError("predict: layer " + std::to_string(j) + " weights " + to_string(w.shape()) +
                             " vs " + to_string(arch.layer_shape(j)));
        }
        const std::size_t in = arch.widths[j], out = arch.widths[j + 1];
        Tensor next(Shape{batch, out});
        const double* bias = w.data().data() + in * out;
        for (std::size_t b = 0; b < batch; ++b) {
            double* row = next.data().data() + b * out;
            for (std::size_t c = 0; c < out; ++c) row[c] = bias[c];
            const double* hrow = h.data().data() + b * in;
            for (std::size_t p = 0; p < in; ++p) {
                const double hv = hrow[p];
                if (hv == 0.0) continue;
                const double* wrow = w.data().data() + p * out;
                for (std::size_t c = 0; c < out; ++c) row[c] += hv * wrow[c];
            }
            if (j + 1 < weights.size())
                for (std::size_t c = 0; c < out; ++c) row[c] = row[c] > 0.0 ? row[c] : 0.0;
        }
        h = std::move(next);
    }
    const std::size_t k = arch.n_classes();
    for (std::size_t b = 0; b < batch; ++b) {
        double* row = h.data().data() + b * k;
        double mx = row[0];
        for (std::size_t c = 1; c < k; ++c) mx = std::max(mx, row[c]);
        double s = 0.0;
        for (std::size_t c = 0; c < k; ++c) s += std::exp(row[c] - mx);
        const double lse = mx + std::log(s);
        for (std::size_t c = 0; c < k; ++c) row[c] -= lse;
    }
    return h;
}

// ---- tape-side counterparts ---------------------------------------------------------

struct LayerVars {
    Var mu;
    Var log_var;
};
using NetVars = std::vector<LayerVars>;

inline NetVars track(Tape& tape, const StochasticNet& net, bool requires_grad = true) {
    NetVars vars;
    for (const auto& layer : net.layers()) {
        vars.push_back({tape.leaf(layer.mu, requires_grad), tape.leaf(layer.log_var, requires_grad)});
    }
    return vars;
}

inline std::vector<Var> sample_weights(const NetVars& net, const Weights& eps) {
    if (eps.size() != net.size()) throw ShapeError("sample_weights: noise layer count mismatch");
    std::vector<Var> w;
    for (std::size_t j = 0; j < net.size(); ++j) {
        Tape& tape = *net[j].mu.tape();
        const Var noise = tape.constant(eps[j]);
        w.push_back(net[j].mu + exp(scale(net[j].log_var, 0.5)) * noise);
    }
    return w;
}

/// Center shifted by constant noise; gradients flow to the unshifted means.
inline NetVars perturb_center(const NetVars& theta, const Weights& noise) {
    if (noise.size() != theta.size()) throw ShapeError("perturb_center: noise layer count mismatch");
    NetVars out;
    for (std::size_t j = 0; j < theta.size(); ++j) {
        Tape& tape = *theta[j].mu.tape();
        out.push_back({theta[j].mu + tape.constant(noise[j]), theta[j].log_var});
    }
    return out;
}

inline Var kl_factorized_gaussian(const NetVars& q, const NetVars& p) {
    if (q.size() != p.size() || q.empty()) {
        throw std::invalid_argument("kl_factorized_gaussian: architecture mismatch");
    }
    Var total;
    for (std::size_t j = 0; j < q.size(); ++j) {
        const Var d = q[j].mu - p[j].mu;
        const Var t = (p[j].log_var - q[j].log_var) + (exp(q[j].log_var) + square(d)) * exp(neg(p[j].log_var));
        const Var layer_kl = scale(sum(add_scalar(t, -1.0)), 0.5);
        total = total.valid() ? total + layer_kl : layer_kl;
    }
    return total;
}

inline Var kl_hyper(const NetVars& theta, const HyperConfig& cfg, KlHyperMode mode) {
    cfg.validate();
    Var sq;
    for (const auto& layer : theta) {
        const Var s = sum(square(layer.mu));
        sq = sq.valid() ? sq + s : s;
    }
    const double kp2 = cfg.kappa_p * cfg.kappa_p;
    const double kq2 = cfg.kappa_q * cfg.kappa_q;
    const double log_ratio = std::log(cfg.kappa_p / cfg.kappa_q);
    if (mode == KlHyperMode::scalar) return scale(sq + kq2, 1.0 / (2.0 * kp2)) + (log_ratio - 0.5);
    const double np = static_cast<double>(cfg.n_params);
    return scale(sq + np * kq2, 1.0 / (2.0 * kp2)) + (np * log_ratio - 0.5 * np);
}

inline Var predict(const Architecture& arch, const std::vector<Var>& weights, const Var& inputs) {
    if (inputs.shape().size() != 2 || inputs.shape()[1] != arch.n_inputs()) {
        throw ShapeError("predict: inputs of shape " + to_string(inputs.shape()) + " do not match " +
                         std::to_string(arch.n_inputs()) + " features");
    }
    if (weights.size() != arch.n_layers()) throw ShapeError("predict: weight layer count mismatch");
    Var h = inputs;
    for (std::size_t j = 0; j < weights.size(); ++j) {
        const std::size_t in = arch.widths[j];
        h = add_bias(matmul(h, row_slice(weights[j], 0, in)), row_slice(weights[j], in, in + 1));
        if (j + 1 < weights.size()) h = relu(h);
    }
    return log_softmax(h);
}

// ---- checkpoints -------------------------------------------------------------------
//
// Line-based text container:
//   pacmeta-checkpoint 1
//   widths <w0> <w1> ... <wL>
//   layer <j> <rows> <cols>
//   mu <rows*cols hex floats>
//   log_var <rows*cols hex floats>
//   ... (one layer block per layer)
//   end
// Values use C99 hexadecimal floating notation without the 0x prefix, so a
// save/load round trip is bit-exact.

class CheckpointError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

namespace detail {

inline void write_hex(std::ostream& os, double v) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof(buf), v, std::chars_format::hex);
    os.write(buf, res.ptr - buf);
}

inline double parse_hex(const std::string& token) {
    double v = 0.0;
    const auto res = std::from_chars(token.data(), token.data() + token.size(), v, std::chars_format::hex);
    if (res.ec != std::errc() || res.ptr != token.data() + token.size()) {
        throw CheckpointError("checkpoint: malformed value '" + token + "'");
    }
    return v;
}

inline std::istringstream expect_line(std::istream& is, const std::string& keyword) {
    std::string line;
    if (!std::getline(is, line)) throw CheckpointError("checkpoint: truncated before '" + keyword + "'");
    std::istringstream ls(line);
    std::string head;
    ls >> head;
    if (head != keyword) throw CheckpointError("checkpoint: expected '" + keyword + "', found '" + head + "'");
    return ls;
}

inline Tensor read_values(std::istream& is, const std::string& keyword, const Shape& shape) {
    std::istringstream ls = expect_line(is, keyword);
    std::vector<double> values;
    values.reserve(shape_size(shape));
    std::string token;
    while (ls >> token) values.push_back(parse_hex(token));
    if (values.size() != shape_size(shape)) {
        throw CheckpointError("checkpoint: '" + keyword + "' has " + std::to_string(values.size()) +
                              " values, expected " + std::to_string(shape_size(shape)));
    }
    return Tensor(shape, std::move(values));
}

} // namespace detail

inline void write_checkpoint(std::ostream& os, const StochasticNet& net) {
    os << "pacmeta-checkpoint 1\nwidths";
    for (std::size_t w : net.arch().widths) os << ' ' << w;
    os << '\n';
    for (std::size_t j = 0; j < net.layers().size(); ++j) {
        const auto& layer = net.layer(j);
        os << "layer " << j << ' ' << layer.mu.dim(0) << ' ' << layer.mu.dim(1) << '\n';
        for (const auto* t : {&layer.mu, &layer.log_var}) {
            os << (t == &layer.mu ? "mu" : "log_var");
            for (double v : t->data()) {
                os << ' ';
                detail::write_hex(os, v);
            }
            os << '\n';
        }
    }
    os << "end\n";
}

inline StochasticNet read_checkpoint(std::istream& is) {
    {
        std::istringstream ls = detail::expect_line(is, "pacmeta-checkpoint");
        int version = 0;
        if (!(ls >> version) || version != 1) throw CheckpointError("checkpoint: unsupported version");
    }
    Architecture arch;
    {
        std::istringstream ls = detail::expect_line(is, "widths");
        std::size_t w = 0;
        while (ls >> w) arch.widths.push_back(w);
        if (arch.widths.size() < 2) throw CheckpointError("checkpoint: need at least two widths");
    }
    std::vector<GaussianLayerParams> layers;
    for (std::size_t j = 0; j < arch.n_layers(); ++j) {
        std::istringstream ls = detail::expect_line(is, "layer");
        std::size_t idx = 0, rows = 0, cols = 0;
        if (!(ls >> idx >> rows >> cols) || idx != j || Shape{rows, cols} != arch.layer_shape(j)) {
            throw CheckpointError("checkpoint: layer header " + std::to_string(j) + " inconsistent with widths");
        }
        Tensor mu = detail::read_values(is, "mu", {rows, cols});
        Tensor lv = detail::read_values(is, "log_var", {rows, cols});
        layers.push_back({std::move(mu), std::move(lv)});
    }
    detail::expect_line(is, "end");
    return StochasticNet(std::move(arch), std::move(layers));
}

inline void save_checkpoint(const std::string& path, const StochasticNet& net) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw CheckpointError("checkpoint: cannot write " + path);
    write_checkpoint(os, net);
    if (!os) throw CheckpointError("checkpoint: write failed for " + path);
}

inline StochasticNet load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw CheckpointError("checkpoint: cannot open " + path);
    return read_checkpoint(is);
}

} // namespace pacmeta
