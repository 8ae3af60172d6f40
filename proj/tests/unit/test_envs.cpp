#include "pacmeta/pacmeta.hpp"

#include <gtest/gtest.h>
#include <zlib.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>

using namespace pacmeta;
namespace fs = std::filesystem;

namespace {

void put32(std::vector<unsigned char>& b, std::uint32_t v) {
    for (int s = 24; s >= 0; s -= 8) b.push_back(static_cast<unsigned char>(v >> s));
}

std::vector<unsigned char> image_bytes(std::uint32_t magic, std::uint32_t n, std::size_t payload) {
    std::vector<unsigned char> b;
    put32(b, magic);
    put32(b, n);
    put32(b, 28);
    put32(b, 28);
    for (std::size_t i = 0; i < payload; ++i) b.push_back(static_cast<unsigned char>(i % 256));
    return b;
}

std::vector<unsigned char> label_bytes(std::uint32_t n) {
    std::vector<unsigned char> b;
    put32(b, kIdxLabelMagic);
    put32(b, n);
    for (std::uint32_t i = 0; i < n; ++i) b.push_back(static_cast<unsigned char>(i % 10));
    return b;
}

class IdxFixture : public ::testing::Test {
protected:
    void SetUp() override {
        dir_ = fs::temp_directory_path() / ("pacmeta_idx_" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()) +
                                            "_" + ::testing::UnitTest::GetInstance()->current_test_info()->name());
        fs::create_directories(dir_);
    }
    void TearDown() override { fs::remove_all(dir_); }

    std::string write(const std::string& name, const std::vector<unsigned char>& bytes) {
        const std::string path = (dir_ / name).string();
        std::ofstream(path, std::ios::binary).write(reinterpret_cast<const char*>(bytes.data()),
                                                    static_cast<std::streamsize>(bytes.size()));
        return path;
    }
    std::string write_gz(const std::string& name, const std::vector<unsigned char>& bytes) {
        const std::string path = (dir_ / name).string();
        gzFile f = gzopen(path.c_str(), "wb");
        gzwrite(f, bytes.data(), static_cast<unsigned>(bytes.size()));
        gzclose(f);
        return path;
    }

    fs::path dir_;
};

template <class F>
IdxError::Kind kind_of(F f) {
    try {
        f();
    } catch (const IdxError& e) {
        return e.kind();
    }
    ADD_FAILURE() << "no IdxError thrown";
    return IdxError::Kind::open_failed;
}

// Small synthetic base set with distinct rows, so permuted rows can be traced back.
ImageDataset synthetic_base(std::size_t n, std::size_t d, std::uint64_t seed) {
    Rng rng{seed};
    ImageDataset base{Tensor(Shape{n, d}), {}, 10};
    for (double& v : base.images.data()) v = rng.uniform(0.0, 1.0);
    for (std::size_t i = 0; i < n; ++i) base.labels.push_back(rng.index(10));
    return base;
}

EnvironmentSpec small_spec(EnvKind kind, std::size_t train, std::size_t test) {
    EnvironmentSpec s;
    s.kind = kind;
    s.samples_per_task = train;
    s.test_samples_per_task = test;
    s.seed = 42;
    return s;
}

} // namespace

TEST_F(IdxFixture, LoadsTwoImages) {
    auto bytes = image_bytes(kIdxImageMagic, 2, 2 * 784);
    bytes[16] = 255;
    const auto img = load_idx_images(write("img", bytes));
    EXPECT_EQ(img.pixels.shape(), (Shape{2, 784}));
    EXPECT_EQ(img.pixels[0], 1.0);
    for (double v : img.pixels.data()) {
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 1.0);
    }
    const auto ds = load_idx_dataset(write_gz("img.gz", bytes), write_gz("lab.gz", label_bytes(2)));
    EXPECT_EQ(ds.size(), 2u);
    EXPECT_EQ(ds.n_features(), 784u);
    EXPECT_EQ(ds.images, img.pixels);
    EXPECT_EQ(ds.labels, (std::vector<std::size_t>{0, 1}));
}

TEST_F(IdxFixture, BadMagicIsNamed) {
    const auto path = write("img", image_bytes(0x00000999, 2, 2 * 784));
    try {
        load_idx_images(path);
        FAIL() << "expected IdxError";
    } catch (const IdxError& e) {
        EXPECT_EQ(e.kind(), IdxError::Kind::bad_magic);
        EXPECT_NE(std::string(e.what()).find("0x00000999"), std::string::npos) << e.what();
    }
    EXPECT_EQ(kind_of([&] { load_idx_labels(write("lab", image_bytes(kIdxImageMagic, 2, 2))); }),
              IdxError::Kind::bad_magic);
}

TEST_F(IdxFixture, DistinctErrors) {
    EXPECT_EQ(kind_of([&] { load_idx_images(write("img", image_bytes(kIdxImageMagic, 2, 784 + 10))); }),
              IdxError::Kind::truncated);
    EXPECT_EQ(kind_of([&] { load_idx_images(write("short", {0, 0})); }), IdxError::Kind::truncated);
    EXPECT_EQ(kind_of([&] {
                  load_idx_dataset(write("img2", image_bytes(kIdxImageMagic, 2, 2 * 784)), write("lab3", label_bytes(3)));
              }),
              IdxError::Kind::count_mismatch);
    EXPECT_EQ(kind_of([&] { load_idx_images((dir_ / "missing").string()); }), IdxError::Kind::open_failed);
}

TEST(Idx, BundledSubsetLoads) {
    const std::string root = PACMETA_SOURCE_DIR;
    const auto ds = load_idx_dataset(root + "/data/mnist5k-images-idx3-ubyte.gz", root + "/data/mnist5k-labels-idx1-ubyte.gz");
    EXPECT_EQ(ds.size(), 5000u);
    EXPECT_EQ(ds.n_features(), 784u);
    EXPECT_EQ(ds.n_classes, 10u);
    for (std::size_t y : ds.labels) EXPECT_LT(y, 10u);
}

TEST(MakeTask, ShuffledPixelsTaskZeroIsIdentity) {
    const auto base = synthetic_base(300, 12, 1);
    const auto t0 = make_task(small_spec(EnvKind::shuffled_pixels, 100, 50), base, 0);
    std::set<std::vector<double>> rows;
    for (std::size_t i = 0; i < base.size(); ++i) {
        rows.insert({base.images.data().begin() + i * 12, base.images.data().begin() + (i + 1) * 12});
    }
    for (std::size_t j = 0; j < 12; ++j) EXPECT_EQ(t0.pixel_perm[j], j);
    for (std::size_t i = 0; i < 150; ++i) {
        const std::vector<double> r(t0.x.data().begin() + i * 12, t0.x.data().begin() + (i + 1) * 12);
        EXPECT_TRUE(rows.count(r)) << "row " << i;
    }
}

TEST(MakeTask, InversePermutationRestoresBaseFeatures) {
    const std::size_t d = 12;
    const auto base = synthetic_base(300, d, 2);
    std::map<std::vector<double>, std::size_t> rows;
    for (std::size_t i = 0; i < base.size(); ++i) {
        rows[{base.images.data().begin() + i * d, base.images.data().begin() + (i + 1) * d}] = i;
    }
    const auto t = make_task(small_spec(EnvKind::shuffled_pixels, 100, 50), base, 7);
    std::vector<std::size_t> inv(d);
    for (std::size_t j = 0; j < d; ++j) inv[t.pixel_perm[j]] = j;
    bool moved = false;
    for (std::size_t j = 0; j < d; ++j) moved |= t.pixel_perm[j] != j;
    EXPECT_TRUE(moved);
    for (std::size_t i = 0; i < t.x.dim(0); ++i) {
        std::vector<double> restored(d);
        for (std::size_t k = 0; k < d; ++k) restored[k] = t.x(i, inv[k]);
        const auto it = rows.find(restored);
        ASSERT_NE(it, rows.end()) << "row " << i;
        EXPECT_EQ(t.y[i], base.labels[it->second]);
    }
}

TEST(MakeTask, PermutedLabelsPermutesHistogram) {
    const auto base = synthetic_base(300, 6, 3);
    const auto t = make_task(small_spec(EnvKind::permuted_labels, 200, 100), base, 5);
    std::vector<std::size_t> h_base(10, 0), h_task(10, 0);
    for (std::size_t y : base.labels) ++h_base[y];
    for (std::size_t y : t.y) ++h_task[y];
    for (std::size_t c = 0; c < 10; ++c) EXPECT_EQ(h_task[t.label_perm[c]], h_base[c]);
    std::vector<std::size_t> identity(10);
    for (std::size_t c = 0; c < 10; ++c) identity[c] = c;
    EXPECT_NE(t.label_perm, identity);
}

TEST(MakeTask, Deterministic) {
    const auto base = synthetic_base(300, 6, 4);
    for (EnvKind k : {EnvKind::shuffled_pixels, EnvKind::permuted_labels}) {
        const auto spec = small_spec(k, 100, 50);
        EXPECT_EQ(make_task(spec, base, 3), make_task(spec, base, 3));
        EXPECT_NE(make_task(spec, base, 3), make_task(spec, base, 4));
    }
    auto blobs = small_spec(EnvKind::gaussian_blobs, 100, 50);
    EXPECT_EQ(make_task(blobs, 9), make_task(blobs, 9));
}

TEST(MakeTask, DistinctPermutationsOverHundredTasks) {
    const auto base = synthetic_base(300, 40, 5);
    auto spec = small_spec(EnvKind::shuffled_pixels, 10, 5);
    std::set<std::vector<std::size_t>> seen;
    for (std::size_t i = 0; i < 100; ++i) seen.insert(make_task(spec, base, i).pixel_perm);
    EXPECT_EQ(seen.size(), 100u);
    spec.kind = EnvKind::permuted_labels;
    seen.clear();
    for (std::size_t i = 0; i < 100; ++i) seen.insert(make_task(spec, base, i).label_perm);
    EXPECT_EQ(seen.size(), 100u);
}

TEST(MakeTask, SplitsAreDisjoint) {
    const auto base = synthetic_base(300, 6, 6);
    const auto t = make_task(small_spec(EnvKind::shuffled_pixels, 120, 60), base, 1);
    EXPECT_EQ(t.train_idx.size(), 120u);
    EXPECT_EQ(t.test_idx.size(), 60u);
    std::set<std::size_t> all(t.train_idx.begin(), t.train_idx.end());
    for (std::size_t i : t.test_idx) EXPECT_FALSE(all.count(i));
    for (std::size_t y : t.y) EXPECT_LT(y, t.n_classes);
}

TEST(MakeTask, RejectsOversizedRequest) {
    const auto base = synthetic_base(100, 6, 7);
    EXPECT_THROW(make_task(small_spec(EnvKind::shuffled_pixels, 80, 30), base, 0), std::invalid_argument);
    auto spec = small_spec(EnvKind::shuffled_pixels, 10, 5);
    spec.prior_fraction = 1.0;
    EXPECT_THROW(spec.validate(), std::invalid_argument);
    EXPECT_THROW(parse_env_kind("rotated"), std::invalid_argument);
}

TEST(SplitPrior, Examples) {
    const auto base = synthetic_base(1500, 6, 8);
    const auto t = make_task(small_spec(EnvKind::shuffled_pixels, 1000, 100), base, 2);
    EXPECT_TRUE(t.prior_idx.empty());
    EXPECT_EQ(t.bound_idx, t.train_idx);

    const auto s = split_prior(t, 0.3, 11);
    EXPECT_EQ(s.prior_idx.size(), 300u);
    EXPECT_EQ(s.bound_idx.size(), 700u);
    std::vector<std::size_t> joined = s.prior_idx;
    joined.insert(joined.end(), s.bound_idx.begin(), s.bound_idx.end());
    std::sort(joined.begin(), joined.end());
    EXPECT_EQ(joined, s.train_idx);
    EXPECT_EQ(split_prior(t, 0.3, 11), s);

    auto tiny = t;
    tiny.train_idx = {0, 1, 2};
    EXPECT_THROW(split_prior(tiny, 0.7, 1), std::invalid_argument);
    EXPECT_THROW(split_prior(t, 1.0, 1), std::invalid_argument);
}

TEST(GaussianBlobs, NearestCenterIsNearlyPerfect) {
    auto spec = small_spec(EnvKind::gaussian_blobs, 2000, 1000);
    spec.blob_separation = 8.0;
    for (std::size_t idx : {std::size_t{0}, std::size_t{3}, kTestTaskOffset + 1}) {
        const auto t = make_task(spec, idx);
        const auto centers = blob_centers(spec, idx);
        std::size_t wrong = 0;
        for (std::size_t i = 0; i < t.x.dim(0); ++i) {
            std::size_t best = 0;
            double best_d = 1e300;
            for (std::size_t k = 0; k < centers.size(); ++k) {
                double d2 = 0.0;
                for (std::size_t f = 0; f < spec.blob_dim; ++f) d2 += (t.x(i, f) - centers[k][f]) * (t.x(i, f) - centers[k][f]);
                if (d2 < best_d) {
                    best_d = d2;
                    best = k;
                }
            }
            wrong += best != t.y[i];
        }
        EXPECT_LE(static_cast<double>(wrong) / static_cast<double>(t.x.dim(0)), 0.01) << "task " << idx;
    }
}

TEST(GaussianBlobs, CentersKeepTheirSeparation) {
    auto spec = small_spec(EnvKind::gaussian_blobs, 10, 5);
    const auto c = blob_centers(spec, 17);
    for (std::size_t a = 0; a < c.size(); ++a) {
        for (std::size_t b = a + 1; b < c.size(); ++b) {
            double d2 = 0.0;
            for (std::size_t f = 0; f < spec.blob_dim; ++f) d2 += (c[a][f] - c[b][f]) * (c[a][f] - c[b][f]);
            EXPECT_NEAR(std::sqrt(d2), spec.blob_separation, 1e-9);
        }
    }
}
