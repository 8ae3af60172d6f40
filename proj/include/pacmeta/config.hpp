#pragma once

// Flat `key = value` run configuration with dotted keys and `#` comments.

#include "pacmeta/envs.hpp"
#include "pacmeta/metatrain.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace pacmeta {

struct RunConfig {
    EnvironmentSpec env;
    TrainConfig train;
    std::string images = "data/mnist5k-images-idx3-ubyte.gz";
    std::string labels = "data/mnist5k-labels-idx1-ubyte.gz";
    std::string out_dir = "runs";
    std::string run_name = "run";

    /// Mirrors fields shared by the environment and the trainer.
    void sync() { train.prior_fraction = env.prior_fraction; }

    void validate() const {
        env.validate();
        train.validate();
    }
};

class ConfigError : public std::runtime_error {
public:
    ConfigError(const std::string& key, const std::string& what)
        : std::runtime_error(key.empty() ? what : key + ": " + what), key_(key) {}
    const std::string& key() const { return key_; }

private:
    std::string key_;
};

namespace detail {

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

inline double to_real(const std::string& key, const std::string& v) {
    double out = 0.0;
    const auto res = std::from_chars(v.data(), v.data() + v.size(), out);
    if (res.ec != std::errc() || res.ptr != v.data() + v.size()) throw ConfigError(key, "expected a number, got '" + v + "'");
    return out;
}

inline std::uint64_t to_uint(const std::string& key, const std::string& v) {
    std::uint64_t out = 0;
    const auto res = std::from_chars(v.data(), v.data() + v.size(), out);
    if (res.ec != std::errc() || res.ptr != v.data() + v.size()) {
        throw ConfigError(key, "expected a nonnegative integer, got '" + v + "'");
    }
    return out;
}

inline bool to_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ConfigError(key, "expected true or false, got '" + v + "'");
}

inline std::string real_text(double v) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

inline std::vector<std::size_t> to_widths(const std::string& key, const std::string& v) {
    std::vector<std::size_t> out;
    if (v.empty() || v == "none") return out;
    std::stringstream ss(v);
    std::string part;
    while (std::getline(ss, part, ',')) out.push_back(to_uint(key, trim(part)));
    return out;
}

inline std::string widths_text(const std::vector<std::size_t>& w) {
    if (w.empty()) return "none";
    std::string s;
    for (std::size_t i = 0; i < w.size(); ++i) s += (i ? "," : "") + std::to_string(w[i]);
    return s;
}

struct Field {
    const char* key;
    std::function<void(RunConfig&, const std::string&)> set;
    std::function<std::string(const RunConfig&)> get;
};

#define PACMETA_REAL(KEY, MEMBER)                                                                             \
    Field {                                                                                                   \
        KEY, [](RunConfig& c, const std::string& v) { c.MEMBER = to_real(KEY, v); },                          \
            [](const RunConfig& c) { return real_text(c.MEMBER); }                                            \
    }
#define PACMETA_UINT(KEY, MEMBER)                                                                             \
    Field {                                                                                                   \
        KEY, [](RunConfig& c, const std::string& v) { c.MEMBER = to_uint(KEY, v); },                          \
            [](const RunConfig& c) { return std::to_string(c.MEMBER); }                                       \
    }
#define PACMETA_BOOL(KEY, MEMBER)                                                                             \
    Field {                                                                                                   \
        KEY, [](RunConfig& c, const std::string& v) { c.MEMBER = to_bool(KEY, v); },                          \
            [](const RunConfig& c) { return std::string(c.MEMBER ? "true" : "false"); }                       \
    }
#define PACMETA_TEXT(KEY, MEMBER)                                                                             \
    Field {                                                                                                   \
        KEY, [](RunConfig& c, const std::string& v) { c.MEMBER = v; }, [](const RunConfig& c) { return c.MEMBER; } \
    }

inline const std::vector<Field>& fields() {
    static const std::vector<Field> table{
        Field{"env.kind", [](RunConfig& c, const std::string& v) {
                  try {
                      c.env.kind = parse_env_kind(v);
                  } catch (const std::invalid_argument& e) {
                      throw ConfigError("env.kind", e.what());
                  }
              },
              [](const RunConfig& c) { return std::string(to_string(c.env.kind)); }},
        PACMETA_UINT("env.n_train_tasks", env.n_train_tasks),
        PACMETA_UINT("env.n_test_tasks", env.n_test_tasks),
        PACMETA_UINT("env.samples_per_task", env.samples_per_task),
        PACMETA_UINT("env.test_samples_per_task", env.test_samples_per_task),
        PACMETA_UINT("env.seed", env.seed),
        PACMETA_REAL("env.prior_fraction", env.prior_fraction),
        PACMETA_TEXT("env.images", images),
        PACMETA_TEXT("env.labels", labels),
        PACMETA_UINT("env.blob_dim", env.blob_dim),
        PACMETA_UINT("env.blob_classes", env.blob_classes),
        PACMETA_REAL("env.blob_separation", env.blob_separation),
        PACMETA_REAL("env.blob_max_angle", env.blob_max_angle),
        Field{"net.hidden", [](RunConfig& c, const std::string& v) { c.train.hidden = to_widths("net.hidden", v); },
              [](const RunConfig& c) { return widths_text(c.train.hidden); }},
        Field{"train.objective", [](RunConfig& c, const std::string& v) {
                  try {
                      c.train.objective = parse_meta_bound(v);
                  } catch (const std::invalid_argument& e) {
                      throw ConfigError("train.objective", e.what());
                  }
              },
              [](const RunConfig& c) { return std::string(to_string(c.train.objective)); }},
        PACMETA_REAL("train.lambda", train.lambda),
        PACMETA_BOOL("train.lambda_proof_form", train.lambda_proof_form),
        PACMETA_REAL("train.delta", train.delta),
        PACMETA_REAL("train.kappa_p", train.kappa_p),
        PACMETA_REAL("train.kappa_q", train.kappa_q),
        Field{"train.kl_hyper_mode", [](RunConfig& c, const std::string& v) {
                  if (v == "scalar") c.train.kl_hyper_mode = KlHyperMode::scalar;
                  else if (v == "dimensional") c.train.kl_hyper_mode = KlHyperMode::dimensional;
                  else throw ConfigError("train.kl_hyper_mode", "expected scalar or dimensional, got '" + v + "'");
              },
              [](const RunConfig& c) {
                  return std::string(c.train.kl_hyper_mode == KlHyperMode::scalar ? "scalar" : "dimensional");
              }},
        PACMETA_REAL("train.lr", train.lr),
        PACMETA_UINT("train.meta_batch_tasks", train.meta_batch_tasks),
        PACMETA_UINT("train.data_batch", train.data_batch),
        PACMETA_UINT("train.epochs", train.epochs),
        PACMETA_UINT("train.prior_epochs", train.prior_epochs),
        PACMETA_UINT("train.mc_train_samples", train.mc_train_samples),
        PACMETA_UINT("train.mc_eval_samples", train.mc_eval_samples),
        PACMETA_UINT("train.trace_mc_samples", train.trace_mc_samples),
        PACMETA_REAL("train.p_min", train.p_min),
        PACMETA_UINT("train.seed", train.seed),
        PACMETA_UINT("eval.epochs", train.eval_epochs),
        PACMETA_TEXT("out_dir", out_dir),
        PACMETA_TEXT("run_name", run_name),
    };
    return table;
}

#undef PACMETA_REAL
#undef PACMETA_UINT
#undef PACMETA_BOOL
#undef PACMETA_TEXT

} // namespace detail

inline std::vector<std::string> config_keys() {
    std::vector<std::string> out;
    for (const auto& f : detail::fields()) out.emplace_back(f.key);
    return out;
}

inline void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value) {
    for (const auto& f : detail::fields()) {
        if (key == f.key) {
            f.set(cfg, value);
            cfg.sync();
            return;
        }
    }
    throw ConfigError(key, "unknown key");
}

inline std::string get_config_value(const RunConfig& cfg, const std::string& key) {
    for (const auto& f : detail::fields())
        if (key == f.key) return f.get(cfg);
    throw ConfigError(key, "unknown key");
}

/// Applies one `key=value` override.
inline void apply_override(RunConfig& cfg, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos) throw ConfigError(assignment, "override must look like key=value");
    set_config_value(cfg, detail::trim(assignment.substr(0, eq)), detail::trim(assignment.substr(eq + 1)));
}

inline void parse_config(RunConfig& cfg, std::istream& is) {
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        line = detail::trim(line);
        if (line.empty()) continue;
        if (line.find('=') == std::string::npos) {
            throw ConfigError("", "line " + std::to_string(lineno) + ": expected key = value");
        }
        apply_override(cfg, line);
    }
}

inline RunConfig parse_config_text(const std::string& text) {
    RunConfig cfg;
    std::istringstream is(text);
    parse_config(cfg, is);
    return cfg;
}

inline RunConfig load_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("", "cannot open config file " + path);
    RunConfig cfg;
    parse_config(cfg, is);
    return cfg;
}

/// Every key with its resolved value, one per line; parsing it back yields the same config.
inline std::string dump_config(const RunConfig& cfg) {
    std::string out;
    for (const auto& f : detail::fields()) out += std::string(f.key) + " = " + f.get(cfg) + "\n";
    return out;
}

} // namespace pacmeta
