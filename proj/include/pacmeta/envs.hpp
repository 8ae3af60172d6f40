#pragma once

// Task environments: permuted-pixel and permuted-label tasks over an IDX image
// dataset, plus rotated Gaussian blobs for fast experiments.

#include "pacmeta/rng.hpp"
#include "pacmeta/tensor.hpp"

#include <zlib.h>

#include <array>
#include <cmath>
#include <cstdint>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace pacmeta {

// ---- IDX ingestion ---------------------------------------------------------------

class IdxError : public std::runtime_error {
public:
    enum class Kind { open_failed, bad_magic, truncated, count_mismatch };

    IdxError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
    Kind kind() const { return kind_; }

private:
    Kind kind_;
};

inline constexpr std::uint32_t kIdxImageMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelMagic = 0x00000801;

namespace detail {

// Reads a whole file; gzip-compressed input is inflated transparently.
inline std::vector<unsigned char> read_maybe_gzip(const std::string& path) {
    gzFile f = gzopen(path.c_str(), "rb");
    if (!f) throw IdxError(IdxError::Kind::open_failed, "idx: cannot open " + path);
    std::vector<unsigned char> out;
    std::array<unsigned char, 1 << 16> buf{};
    for (;;) {
        const int got = gzread(f, buf.data(), static_cast<unsigned>(buf.size()));
        if (got < 0) {
            gzclose(f);
            throw IdxError(IdxError::Kind::truncated, "idx: corrupt compressed stream in " + path);
        }
        if (got == 0) break;
        out.insert(out.end(), buf.begin(), buf.begin() + got);
    }
    gzclose(f);
    return out;
}

inline std::uint32_t be32(const std::vector<unsigned char>& b, std::size_t at) {
    return (std::uint32_t{b[at]} << 24) | (std::uint32_t{b[at + 1]} << 16) | (std::uint32_t{b[at + 2]} << 8) |
           std::uint32_t{b[at + 3]};
}

inline std::string hex32(std::uint32_t v) {
    std::ostringstream os;
    os << "0x" << std::hex;
    os.width(8);
    os.fill('0');
    os << v;
    return os.str();
}

inline void require_bytes(const std::vector<unsigned char>& b, std::size_t need, const std::string& path) {
    if (b.size() < need) {
        throw IdxError(IdxError::Kind::truncated, "idx: " + path + " is truncated (" + std::to_string(b.size()) +
                                                      " bytes, need " + std::to_string(need) + ")");
    }
}

inline void require_magic(std::uint32_t seen, std::uint32_t want, const std::string& path) {
    if (seen != want) {
        throw IdxError(IdxError::Kind::bad_magic,
                       "idx: " + path + " has magic " + hex32(seen) + ", expected " + hex32(want));
    }
}

} // namespace detail

struct IdxImages {
    Tensor pixels; // [N, rows * cols], scaled to [0,1]
    std::size_t rows = 0;
    std::size_t cols = 0;
};

inline IdxImages load_idx_images(const std::string& path) {
    const auto bytes = detail::read_maybe_gzip(path);
    detail::require_bytes(bytes, 16, path);
    detail::require_magic(detail::be32(bytes, 0), kIdxImageMagic, path);
    const std::size_t n = detail::be32(bytes, 4);
    const std::size_t rows = detail::be32(bytes, 8);
    const std::size_t cols = detail::be32(bytes, 12);
    const std::size_t d = rows * cols;
    detail::require_bytes(bytes, 16 + n * d, path);
    Tensor pixels(Shape{n, d});
    for (std::size_t i = 0; i < n * d; ++i) pixels[i] = static_cast<double>(bytes[16 + i]) / 255.0;
    return {std::move(pixels), rows, cols};
}

inline std::vector<std::size_t> load_idx_labels(const std::string& path) {
    const auto bytes = detail::read_maybe_gzip(path);
    detail::require_bytes(bytes, 8, path);
    detail::require_magic(detail::be32(bytes, 0), kIdxLabelMagic, path);
    const std::size_t n = detail::be32(bytes, 4);
    detail::require_bytes(bytes, 8 + n, path);
    return {bytes.begin() + 8, bytes.begin() + 8 + static_cast<std::ptrdiff_t>(n)};
}

struct ImageDataset {
    Tensor images; // [N, d] in [0,1]
    std::vector<std::size_t> labels;
    std::size_t n_classes = 10;

    std::size_t size() const { return labels.size(); }
    std::size_t n_features() const { return images.rank() == 2 ? images.dim(1) : 0; }
};

inline ImageDataset load_idx_dataset(const std::string& images_path, const std::string& labels_path) {
    IdxImages img = load_idx_images(images_path);
    std::vector<std::size_t> labels = load_idx_labels(labels_path);
    if (labels.size() != img.pixels.dim(0)) {
        throw IdxError(IdxError::Kind::count_mismatch, "idx: " + std::to_string(img.pixels.dim(0)) +
                                                           " images but " + std::to_string(labels.size()) +
                                                           " labels");
    }
    std::size_t classes = 0;
    for (std::size_t y : labels) classes = std::max(classes, y + 1);
    return {std::move(img.pixels), std::move(labels), std::max<std::size_t>(classes, 10)};
}

// ---- environments ------------------------------------------------------------------

enum class EnvKind { shuffled_pixels, permuted_labels, gaussian_blobs };

inline std::string_view to_string(EnvKind k) {
    switch (k) {
    case EnvKind::shuffled_pixels: return "shuffled_pixels";
    case EnvKind::permuted_labels: return "permuted_labels";
    case EnvKind::gaussian_blobs: return "gaussian_blobs";
    }
    return "?";
}

inline EnvKind parse_env_kind(std::string_view s) {
    if (s == "shuffled_pixels") return EnvKind::shuffled_pixels;
    if (s == "permuted_labels") return EnvKind::permuted_labels;
    if (s == "gaussian_blobs") return EnvKind::gaussian_blobs;
    throw std::invalid_argument("unknown environment kind '" + std::string(s) +
                                "' (valid: shuffled_pixels, permuted_labels, gaussian_blobs)");
}

struct EnvironmentSpec {
    EnvKind kind = EnvKind::shuffled_pixels;
    std::size_t n_train_tasks = 5;
    std::size_t n_test_tasks = 20;
    std::size_t samples_per_task = 1000;     // training samples per task
    std::size_t test_samples_per_task = 500; // held-out samples per task
    std::uint64_t seed = 0;
    double prior_fraction = 0.0;

    // gaussian_blobs only
    std::size_t blob_dim = 16;
    std::size_t blob_classes = 4;
    double blob_separation = 8.0; // distance between cluster centers, in noise standard deviations
    double blob_max_angle = 0.5;  // radians; per-task rotation angle is drawn from [-a, a]

    void validate() const {
        if (n_train_tasks < 1 || n_test_tasks < 1) throw std::invalid_argument("env: task counts must be >= 1");
        if (samples_per_task < 2) throw std::invalid_argument("env: samples_per_task must be >= 2");
        if (test_samples_per_task < 1) throw std::invalid_argument("env: test_samples_per_task must be >= 1");
        if (!(prior_fraction >= 0.0 && prior_fraction < 1.0)) {
            throw std::invalid_argument("env: prior_fraction must lie in [0,1)");
        }
        if (kind == EnvKind::gaussian_blobs) {
            if (blob_classes < 2) throw std::invalid_argument("env: blob_classes must be >= 2");
            if (blob_dim < blob_classes) throw std::invalid_argument("env: blob_dim must be >= blob_classes");
            if (!(blob_separation > 0.0)) throw std::invalid_argument("env: blob_separation must be positive");
        }
    }

    std::size_t n_classes(const ImageDataset& base) const {
        return kind == EnvKind::gaussian_blobs ? blob_classes : base.n_classes;
    }
    std::size_t n_features(const ImageDataset& base) const {
        return kind == EnvKind::gaussian_blobs ? blob_dim : base.n_features();
    }
};

/// Test tasks are generated from a disjoint index range so they never coincide
/// with training tasks.
inline constexpr std::size_t kTestTaskOffset = 1'000'000;

struct TaskDataset {
    Tensor x; // [train + test, d]
    std::vector<std::size_t> y;
    std::size_t n_classes = 0;
    std::vector<std::size_t> train_idx;
    std::vector<std::size_t> test_idx;
    std::vector<std::size_t> prior_idx; // R_i
    std::vector<std::size_t> bound_idx; // S_i minus R_i
    std::vector<std::size_t> pixel_perm; // task feature j = base feature pixel_perm[j]
    std::vector<std::size_t> label_perm; // task label = label_perm[base label]
    std::size_t task_index = 0;

    std::size_t n_features() const { return x.dim(1); }

    bool operator==(const TaskDataset&) const = default;

    /// Rows `idx` of x, as a [idx.size(), d] tensor.
    Tensor rows(std::span<const std::size_t> idx) const {
        const std::size_t d = n_features();
        Tensor out(Shape{idx.size(), d});
        for (std::size_t i = 0; i < idx.size(); ++i) {
            const double* src = x.data().data() + idx[i] * d;
            std::copy(src, src + d, out.data().data() + i * d);
        }
        return out;
    }

    std::vector<std::size_t> labels(std::span<const std::size_t> idx) const {
        std::vector<std::size_t> out;
        out.reserve(idx.size());
        for (std::size_t i : idx) out.push_back(y[i]);
        return out;
    }
};

namespace detail {
inline constexpr std::uint64_t kSampleSalt = 0x5a3b1e01;
inline constexpr std::uint64_t kPixelSalt = 0x5a3b1e02;
inline constexpr std::uint64_t kLabelSalt = 0x5a3b1e03;
inline constexpr std::uint64_t kBlobSalt = 0x5a3b1e04;
inline constexpr std::uint64_t kPriorSalt = 0x5a3b1e05;
} // namespace detail

/// Moves floor(fraction * |train|) training indices into prior_idx, the rest into bound_idx.
inline TaskDataset split_prior(TaskDataset task, double fraction, std::uint64_t seed) {
    if (!(fraction >= 0.0 && fraction < 1.0)) throw std::invalid_argument("split_prior: fraction must lie in [0,1)");
    const std::size_t n = task.train_idx.size();
    const auto n_prior = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(n)));
    if (n - n_prior < 2) {
        throw std::invalid_argument("split_prior: only " + std::to_string(n - n_prior) +
                                    " bound samples would remain (need >= 2)");
    }
    std::vector<std::size_t> order = task.train_idx;
    if (n_prior > 0) {
        Rng rng{seed, task.task_index, detail::kPriorSalt};
        rng.shuffle(order);
    }
    task.prior_idx.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_prior));
    task.bound_idx.assign(order.begin() + static_cast<std::ptrdiff_t>(n_prior), order.end());
    std::sort(task.prior_idx.begin(), task.prior_idx.end());
    std::sort(task.bound_idx.begin(), task.bound_idx.end());
    return task;
}

/// Cluster centers of a gaussian_blobs task: the base configuration
/// (separation / sqrt(2)) * e_k rotated in a seeded random plane.
inline std::vector<std::vector<double>> blob_centers(const EnvironmentSpec& spec, std::size_t task_index) {
    const std::size_t d = spec.blob_dim;
    std::vector<std::vector<double>> centers(spec.blob_classes, std::vector<double>(d, 0.0));
    const double r = spec.blob_separation / std::sqrt(2.0);
    for (std::size_t k = 0; k < spec.blob_classes; ++k) centers[k][k] = r;
    if (task_index == 0) return centers;

    Rng rng{spec.seed, task_index, detail::kBlobSalt};
    std::vector<double> u(d), v(d);
    for (auto& e : u) e = rng.normal();
    for (auto& e : v) e = rng.normal();
    auto dot = [](const std::vector<double>& a, const std::vector<double>& b) {
        double s = 0.0;
        for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
        return s;
    };
    const double nu = std::sqrt(dot(u, u));
    for (auto& e : u) e /= nu;
    const double proj = dot(u, v);
    for (std::size_t i = 0; i < d; ++i) v[i] -= proj * u[i];
    const double nv = std::sqrt(dot(v, v));
    for (auto& e : v) e /= nv;
    const double angle = rng.uniform(-spec.blob_max_angle, spec.blob_max_angle);
    const double cs = std::cos(angle), sn = std::sin(angle);
    for (auto& c : centers) {
        const double a = dot(u, c), b = dot(v, c);
        const double a2 = cs * a - sn * b, b2 = sn * a + cs * b;
        for (std::size_t i = 0; i < d; ++i) c[i] += (a2 - a) * u[i] + (b2 - b) * v[i];
    }
    return centers;
}

inline TaskDataset make_task(const EnvironmentSpec& spec, const ImageDataset& base, std::size_t task_index) {
    spec.validate();
    const std::size_t n_train = spec.samples_per_task;
    const std::size_t n_total = n_train + spec.test_samples_per_task;

    TaskDataset task;
    task.task_index = task_index;
    for (std::size_t i = 0; i < n_train; ++i) task.train_idx.push_back(i);
    for (std::size_t i = n_train; i < n_total; ++i) task.test_idx.push_back(i);

    if (spec.kind == EnvKind::gaussian_blobs) {
        const auto centers = blob_centers(spec, task_index);
        const std::size_t d = spec.blob_dim;
        Rng rng{spec.seed, task_index, detail::kSampleSalt};
        task.n_classes = spec.blob_classes;
        task.x = Tensor(Shape{n_total, d});
        for (std::size_t i = 0; i < n_total; ++i) {
            const std::size_t label = rng.index(spec.blob_classes);
            task.y.push_back(label);
            for (std::size_t f = 0; f < d; ++f) task.x(i, f) = centers[label][f] + rng.normal();
        }
    } else {
        if (base.size() == 0) throw std::invalid_argument("make_task: image environment needs a base dataset");
        if (n_total > base.size()) {
            throw std::invalid_argument("make_task: " + std::to_string(n_total) + " samples per task exceed the " +
                                        std::to_string(base.size()) + " available");
        }
        const std::size_t d = base.n_features();
        task.n_classes = base.n_classes;

        Rng sample_rng{spec.seed, task_index, detail::kSampleSalt};
        std::vector<std::size_t> pick = sample_rng.permutation(base.size());
        pick.resize(n_total);

        task.pixel_perm.resize(d);
        for (std::size_t j = 0; j < d; ++j) task.pixel_perm[j] = j;
        task.label_perm.resize(base.n_classes);
        for (std::size_t c = 0; c < base.n_classes; ++c) task.label_perm[c] = c;

        if (task_index != 0) {
            if (spec.kind == EnvKind::shuffled_pixels) {
                Rng prng{spec.seed, task_index, detail::kPixelSalt};
                task.pixel_perm = prng.permutation(d);
            } else {
                Rng lrng{spec.seed, task_index, detail::kLabelSalt};
                const auto identity = task.label_perm;
                do {
                    task.label_perm = lrng.permutation(base.n_classes);
                } while (task.label_perm == identity);
            }
        }

        task.x = Tensor(Shape{n_total, d});
        for (std::size_t i = 0; i < n_total; ++i) {
            const double* src = base.images.data().data() + pick[i] * d;
            double* dst = task.x.data().data() + i * d;
            for (std::size_t j = 0; j < d; ++j) dst[j] = src[task.pixel_perm[j]];
            task.y.push_back(task.label_perm[base.labels[pick[i]]]);
        }
    }
    return split_prior(std::move(task), spec.prior_fraction, spec.seed);
}

/// gaussian_blobs tasks need no base data.
inline TaskDataset make_task(const EnvironmentSpec& spec, std::size_t task_index) {
    return make_task(spec, ImageDataset{}, task_index);
}

inline std::vector<TaskDataset> make_train_tasks(const EnvironmentSpec& spec, const ImageDataset& base) {
    std::vector<TaskDataset> tasks;
    for (std::size_t i = 0; i < spec.n_train_tasks; ++i) tasks.push_back(make_task(spec, base, i));
    return tasks;
}

inline TaskDataset make_test_task(const EnvironmentSpec& spec, const ImageDataset& base, std::size_t j) {
    return make_task(spec, base, kTestTaskOffset + j);
}

} // namespace pacmeta
