#include "whittle/data.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include "doctest.h"

using namespace whittle;
using data::Dataset;
using data::NormStats;

namespace {

namespace fs = std::filesystem;

struct TempFile {
    fs::path path;
    explicit TempFile(const std::string& name) {
        path = fs::temp_directory_path() / ("whittle_" + name);
    }
    ~TempFile() {
        std::error_code ec;
        fs::remove(path, ec);
    }
    void write(const std::vector<uint8_t>& bytes) const {
        std::ofstream out(path, std::ios::binary);
        out.write(reinterpret_cast<const char*>(bytes.data()),
                  static_cast<std::streamsize>(bytes.size()));
    }
};

void push_u32_be(std::vector<uint8_t>& v, uint32_t x) {
    v.push_back(static_cast<uint8_t>(x >> 24));
    v.push_back(static_cast<uint8_t>(x >> 16));
    v.push_back(static_cast<uint8_t>(x >> 8));
    v.push_back(static_cast<uint8_t>(x));
}

std::vector<uint8_t> idx_images(uint32_t n, uint32_t h, uint32_t w,
                                const std::vector<uint8_t>& pixels) {
    std::vector<uint8_t> v;
    push_u32_be(v, 0x00000803u);
    push_u32_be(v, n);
    push_u32_be(v, h);
    push_u32_be(v, w);
    v.insert(v.end(), pixels.begin(), pixels.end());
    return v;
}

std::vector<uint8_t> idx_labels(const std::vector<uint8_t>& labels) {
    std::vector<uint8_t> v;
    push_u32_be(v, 0x00000801u);
    push_u32_be(v, static_cast<uint32_t>(labels.size()));
    v.insert(v.end(), labels.begin(), labels.end());
    return v;
}

}  // namespace

TEST_CASE("handcrafted idx pair parses to exact pixels") {
    // 2 images of 3x2, bytes 0..11
    std::vector<uint8_t> pixels(12);
    for (size_t i = 0; i < pixels.size(); ++i) pixels[i] = static_cast<uint8_t>(i * 20);
    TempFile img("idx_img");
    TempFile lab("idx_lab");
    img.write(idx_images(2, 3, 2, pixels));
    lab.write(idx_labels({1, 0}));

    // identity stats expose the raw [0,1] scaling
    NormStats identity;
    identity.mean = {0.0};
    identity.stddev = {1.0};
    Dataset ds = data::load_idx(img.path.string(), lab.path.string(), &identity);

    CHECK(ds.count == 2);
    CHECK(ds.channels == 1);
    CHECK(ds.height == 3);
    CHECK(ds.width == 2);
    CHECK(ds.classes == 2);
    REQUIRE(ds.labels.size() == 2);
    CHECK(ds.labels[0] == 1);
    CHECK(ds.labels[1] == 0);
    REQUIRE(ds.images.size() == 12);
    for (size_t i = 0; i < 12; ++i) {
        CHECK(ds.images[i] == doctest::Approx(pixels[i] / 255.0).epsilon(1e-7));
    }
}

TEST_CASE("all-zero image file normalizes to zeros under its own stats") {
    TempFile img("idx_zero_img");
    TempFile lab("idx_zero_lab");
    img.write(idx_images(1, 2, 2, {0, 0, 0, 0}));
    lab.write(idx_labels({0}));
    Dataset ds = data::load_idx(img.path.string(), lab.path.string());
    CHECK(ds.normalized);
    for (float v : ds.images) CHECK(v == 0.0f);
}

TEST_CASE("idx parse failures carry byte positions") {
    TempFile img("idx_bad_img");
    TempFile lab("idx_bad_lab");

    SUBCASE("bad magic") {
        auto bytes = idx_images(1, 2, 2, {1, 2, 3, 4});
        bytes[3] = 0x05;
        img.write(bytes);
        lab.write(idx_labels({0}));
        CHECK_THROWS_WITH_AS(data::load_idx(img.path.string(), lab.path.string()),
                             doctest::Contains("magic"), std::runtime_error);
    }

    SUBCASE("truncated payload") {
        auto bytes = idx_images(2, 2, 2, {1, 2, 3, 4, 5});  // promises 8, ships 5
        img.write(bytes);
        lab.write(idx_labels({0, 1}));
        CHECK_THROWS_WITH_AS(data::load_idx(img.path.string(), lab.path.string()),
                             doctest::Contains("offset 16"), std::runtime_error);
    }

    SUBCASE("truncated header") {
        img.write({0, 0, 8});
        lab.write(idx_labels({0}));
        CHECK_THROWS_WITH_AS(data::load_idx(img.path.string(), lab.path.string()),
                             doctest::Contains("truncated"), std::runtime_error);
    }

    SUBCASE("count mismatch") {
        img.write(idx_images(2, 2, 2, {1, 2, 3, 4, 5, 6, 7, 8}));
        lab.write(idx_labels({0, 1, 1}));
        CHECK_THROWS_WITH_AS(data::load_idx(img.path.string(), lab.path.string()),
                             doctest::Contains("3 labels for 2 images"), std::runtime_error);
    }

    SUBCASE("missing file") {
        CHECK_THROWS(data::load_idx("/nonexistent/images", "/nonexistent/labels"));
    }
}

TEST_CASE("noise-free blobs repeat exactly within a class") {
    Dataset ds = data::synth_blobs(3, 4, 8, 0.0, 7);
    CHECK(ds.count == 12);
    const int64_t sz = ds.sample_size();
    for (int64_t k = 0; k < 3; ++k) {
        const float* first = &ds.images[static_cast<size_t>(k * 4 * sz)];
        for (int64_t s = 1; s < 4; ++s) {
            const float* other = &ds.images[static_cast<size_t>((k * 4 + s) * sz)];
            for (int64_t i = 0; i < sz; ++i) CHECK(first[i] == other[i]);
        }
    }
    // distinct classes are distinct patterns
    CHECK(std::vector<float>(ds.images.begin(), ds.images.begin() + sz) !=
          std::vector<float>(ds.images.begin() + 4 * sz, ds.images.begin() + 5 * sz));
}

TEST_CASE("blob generation is deterministic in the seed") {
    Dataset a = data::synth_blobs(4, 3, 10, 0.2, 99);
    Dataset b = data::synth_blobs(4, 3, 10, 0.2, 99);
    Dataset c = data::synth_blobs(4, 3, 10, 0.2, 100);
    CHECK(a.images == b.images);
    CHECK(a.labels == b.labels);
    CHECK(a.images != c.images);
}

TEST_CASE("blobs are nearest-centroid separable at working noise") {
    const int64_t K = 10, S = 20, size = 12;
    Dataset ds = data::synth_blobs(K, S, size, 0.1, 3);
    const int64_t sz = ds.sample_size();

    std::vector<std::vector<double>> centroid(K, std::vector<double>(sz, 0.0));
    for (int64_t i = 0; i < ds.count; ++i) {
        auto& c = centroid[ds.labels[i]];
        for (int64_t j = 0; j < sz; ++j) c[j] += ds.images[i * sz + j];
    }
    for (auto& c : centroid)
        for (double& v : c) v /= static_cast<double>(S);

    int64_t hits = 0;
    for (int64_t i = 0; i < ds.count; ++i) {
        double best = 1e300;
        int64_t best_k = -1;
        for (int64_t k = 0; k < K; ++k) {
            double d = 0.0;
            for (int64_t j = 0; j < sz; ++j) {
                const double diff = ds.images[i * sz + j] - centroid[k][j];
                d += diff * diff;
            }
            if (d < best) {
                best = d;
                best_k = k;
            }
        }
        hits += best_k == ds.labels[i] ? 1 : 0;
    }
    CHECK(static_cast<double>(hits) / ds.count >= 0.99);
}

TEST_CASE("normalization moves stats to zero mean, unit variance") {
    Dataset ds = data::synth_blobs(3, 10, 8, 0.3, 11);
    NormStats s = data::compute_stats(ds);
    CHECK(s.mean[0] != doctest::Approx(0.0).epsilon(1e-3));
    data::normalize(ds, s);
    NormStats after = data::compute_stats(ds);
    CHECK(after.mean[0] == doctest::Approx(0.0).epsilon(1e-4));
    CHECK(after.stddev[0] == doctest::Approx(1.0).epsilon(1e-4));
    CHECK(ds.normalized);
    CHECK(ds.stats.mean[0] == s.mean[0]);

    NormStats wrong;
    wrong.mean = {0.0, 0.0};
    wrong.stddev = {1.0, 1.0};
    CHECK_THROWS(data::normalize(ds, wrong));
}

TEST_CASE("split is disjoint and exhaustive") {
    Dataset ds = data::synth_blobs(2, 5, 8, 0.1, 5);
    auto split = data::split_and_batch(ds, 0.5, 2, 17);
    CHECK(split.train.size() == 5);
    CHECK(split.val.size() == 5);
    std::set<int64_t> seen(split.train.begin(), split.train.end());
    seen.insert(split.val.begin(), split.val.end());
    CHECK(seen.size() == 10);
    CHECK(*seen.begin() == 0);
    CHECK(*seen.rbegin() == 9);
}

TEST_CASE("train batches reshuffle per epoch but replay per seed") {
    Dataset ds = data::synth_blobs(2, 16, 8, 0.1, 5);
    auto a = data::split_and_batch(ds, 0.25, 4, 23);
    auto b = data::split_and_batch(ds, 0.25, 4, 23);

    CHECK(a.train_epoch(0) == b.train_epoch(0));
    CHECK(a.train_epoch(3) == b.train_epoch(3));
    CHECK(a.train_epoch(0) != a.train_epoch(1));
    CHECK(a.val_order() == b.val_order());

    // validation order is fixed across epochs by construction; batches chunk it
    auto vb = a.val_order();
    size_t total = 0;
    for (const auto& batch : vb) total += batch.size();
    CHECK(total == a.val.size());
}

TEST_CASE("every epoch covers the train split exactly once") {
    Dataset ds = data::synth_blobs(3, 9, 8, 0.1, 6);  // 27 samples, odd split
    auto split = data::split_and_batch(ds, 0.3, 4, 31);
    for (int epoch : {0, 1, 5}) {
        auto batches = split.train_epoch(epoch);
        std::multiset<int64_t> seen;
        for (const auto& b : batches) {
            CHECK(b.size() <= 4);
            seen.insert(b.begin(), b.end());
        }
        CHECK(seen.size() == split.train.size());
        CHECK(std::multiset<int64_t>(split.train.begin(), split.train.end()) == seen);
        // only the final batch may be partial
        for (size_t i = 0; i + 1 < batches.size(); ++i) CHECK(batches[i].size() == 4);
    }
}

TEST_CASE("degenerate split requests are rejected") {
    Dataset ds = data::synth_blobs(2, 4, 8, 0.1, 5);
    CHECK_THROWS(data::split_and_batch(ds, 0.0, 2, 1));
    CHECK_THROWS(data::split_and_batch(ds, 1.0, 2, 1));
    CHECK_THROWS(data::split_and_batch(ds, 0.5, 5, 1));  // batch > split
    CHECK_THROWS(data::split_and_batch(ds, 0.5, 0, 1));
}

TEST_CASE("gather assembles batches in index order") {
    Dataset ds = data::synth_blobs(2, 3, 6, 0.05, 8);
    auto batch = data::gather(ds, {4, 0, 5});
    CHECK(batch.images.dim(0) == 3);
    CHECK(batch.images.dim(1) == 1);
    CHECK(batch.images.dim(2) == 6);
    CHECK(batch.images.dim(3) == 6);
    REQUIRE(batch.labels.size() == 3);
    CHECK(batch.labels[0] == ds.labels[4]);
    CHECK(batch.labels[1] == ds.labels[0]);
    CHECK(batch.labels[2] == ds.labels[5]);
    const int64_t sz = ds.sample_size();
    for (int64_t j = 0; j < sz; ++j) {
        CHECK(batch.images.data()[j] == ds.images[4 * sz + j]);
        CHECK(batch.images.data()[sz + j] == ds.images[0 * sz + j]);
    }
    CHECK_THROWS(data::gather(ds, {6}));
}
