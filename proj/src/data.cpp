#include "whittle/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>
#include <stdexcept>

namespace whittle::data {

using ndgrad::Tensor;

NormStats compute_stats(const Dataset& ds) {
    NormStats s;
    s.mean.assign(static_cast<size_t>(ds.channels), 0.0);
    s.stddev.assign(static_cast<size_t>(ds.channels), 0.0);
    const int64_t area = ds.height * ds.width;
    const double n = static_cast<double>(ds.count * area);
    for (int64_t c = 0; c < ds.channels; ++c) {
        double acc = 0.0;
        for (int64_t i = 0; i < ds.count; ++i)
            for (int64_t a = 0; a < area; ++a)
                acc += ds.images[(i * ds.channels + c) * area + a];
        s.mean[c] = acc / n;
        double acc2 = 0.0;
        for (int64_t i = 0; i < ds.count; ++i)
            for (int64_t a = 0; a < area; ++a) {
                const double d = ds.images[(i * ds.channels + c) * area + a] - s.mean[c];
                acc2 += d * d;
            }
        s.stddev[c] = std::sqrt(acc2 / n);
    }
    return s;
}

void normalize(Dataset& ds, const NormStats& stats) {
    if (static_cast<int64_t>(stats.mean.size()) != ds.channels ||
        static_cast<int64_t>(stats.stddev.size()) != ds.channels) {
        throw std::runtime_error("normalization stats cover " +
                                 std::to_string(stats.mean.size()) + " channels, data has " +
                                 std::to_string(ds.channels));
    }
    const int64_t area = ds.height * ds.width;
    for (int64_t i = 0; i < ds.count; ++i)
        for (int64_t c = 0; c < ds.channels; ++c) {
            const double mu = stats.mean[c];
            const double sd = std::max(stats.stddev[c], 1e-8);
            for (int64_t a = 0; a < area; ++a) {
                float& x = ds.images[(i * ds.channels + c) * area + a];
                x = static_cast<float>((x - mu) / sd);
            }
        }
    ds.normalized = true;
    ds.stats = stats;
}

namespace {

std::vector<uint8_t> read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error(path + ": cannot open");
    return std::vector<uint8_t>((std::istreambuf_iterator<char>(in)),
                                std::istreambuf_iterator<char>());
}

uint32_t read_u32_be(const std::vector<uint8_t>& buf, size_t off, const std::string& path) {
    if (off + 4 > buf.size()) {
        throw std::runtime_error(path + ": truncated at byte " + std::to_string(buf.size()) +
                                 " (wanted 4 bytes at offset " + std::to_string(off) + ")");
    }
    return (static_cast<uint32_t>(buf[off]) << 24) | (static_cast<uint32_t>(buf[off + 1]) << 16) |
           (static_cast<uint32_t>(buf[off + 2]) << 8) | static_cast<uint32_t>(buf[off + 3]);
}

}  // namespace

Dataset load_idx(const std::string& images_path, const std::string& labels_path,
                 const NormStats* stats) {
    const auto img = read_file(images_path);
    const uint32_t img_magic = read_u32_be(img, 0, images_path);
    if (img_magic != 0x00000803u) {
        throw std::runtime_error(images_path + ": bad magic 0x" +
                                 [&] {
                                     char b[16];
                                     std::snprintf(b, sizeof b, "%08x", img_magic);
                                     return std::string(b);
                                 }() +
                                 " at byte 0 (image files use 0x00000803)");
    }
    const uint32_t n = read_u32_be(img, 4, images_path);
    const uint32_t h = read_u32_be(img, 8, images_path);
    const uint32_t w = read_u32_be(img, 12, images_path);
    const size_t want = 16 + static_cast<size_t>(n) * h * w;
    if (img.size() != want) {
        throw std::runtime_error(images_path + ": payload is " + std::to_string(img.size() - 16) +
                                 " bytes at offset 16, header promises " +
                                 std::to_string(static_cast<size_t>(n) * h * w));
    }

    const auto lab = read_file(labels_path);
    const uint32_t lab_magic = read_u32_be(lab, 0, labels_path);
    if (lab_magic != 0x00000801u) {
        throw std::runtime_error(labels_path + ": bad magic at byte 0 (label files use 0x00000801)");
    }
    const uint32_t ln = read_u32_be(lab, 4, labels_path);
    if (lab.size() != 8 + static_cast<size_t>(ln)) {
        throw std::runtime_error(labels_path + ": payload is " + std::to_string(lab.size() - 8) +
                                 " bytes at offset 8, header promises " + std::to_string(ln));
    }
    if (ln != n) {
        throw std::runtime_error(labels_path + ": " + std::to_string(ln) + " labels for " +
                                 std::to_string(n) + " images");
    }

    Dataset ds;
    ds.count = n;
    ds.channels = 1;
    ds.height = h;
    ds.width = w;
    ds.images.resize(static_cast<size_t>(n) * h * w);
    for (size_t i = 0; i < ds.images.size(); ++i) {
        ds.images[i] = static_cast<float>(img[16 + i]) / 255.0f;
    }
    ds.labels.assign(lab.begin() + 8, lab.end());
    int maxl = 0;
    for (int l : ds.labels) maxl = std::max(maxl, l);
    ds.classes = maxl + 1;

    normalize(ds, stats ? *stats : compute_stats(ds));
    return ds;
}

Dataset synth_blobs(int64_t classes, int64_t samples_per_class, int64_t image_size,
                    double noise_sigma, unsigned seed) {
    if (classes < 2) throw std::runtime_error("synth_blobs: need at least 2 classes");
    if (samples_per_class < 1 || image_size < 4) {
        throw std::runtime_error("synth_blobs: degenerate size");
    }
    Dataset ds;
    ds.count = classes * samples_per_class;
    ds.channels = 1;
    ds.height = image_size;
    ds.width = image_size;
    ds.classes = classes;
    ds.images.resize(static_cast<size_t>(ds.count * image_size * image_size));
    ds.labels.resize(static_cast<size_t>(ds.count));

    // class centers sit on a circle; bumps are narrow relative to the spacing
    const double cx = (image_size - 1) / 2.0;
    const double r = image_size * 0.32;
    const double bump_sigma = image_size / 9.0;

    std::mt19937 rng(seed);
    std::normal_distribution<double> noise(0.0, noise_sigma);
    size_t at = 0;
    for (int64_t k = 0; k < classes; ++k) {
        const double ang = 2.0 * M_PI * static_cast<double>(k) / static_cast<double>(classes);
        const double bx = cx + r * std::cos(ang);
        const double by = cx + r * std::sin(ang);
        for (int64_t s = 0; s < samples_per_class; ++s) {
            ds.labels[static_cast<size_t>(k * samples_per_class + s)] = static_cast<int>(k);
            for (int64_t y = 0; y < image_size; ++y)
                for (int64_t x = 0; x < image_size; ++x) {
                    const double d2 = (x - bx) * (x - bx) + (y - by) * (y - by);
                    double v = std::exp(-d2 / (2.0 * bump_sigma * bump_sigma));
                    if (noise_sigma > 0.0) v += noise(rng);
                    ds.images[at++] = static_cast<float>(v);
                }
        }
    }
    return ds;
}

namespace {

// explicit Fisher-Yates so the order never depends on the standard library's
// shuffle implementation
void shuffle_ids(std::vector<int64_t>& ids, std::mt19937& rng) {
    for (size_t i = ids.size(); i > 1; --i) {
        const size_t j = rng() % i;
        std::swap(ids[i - 1], ids[j]);
    }
}

}  // namespace

DataSplit split_and_batch(const Dataset& ds, double val_fraction, int64_t batch_size,
                          unsigned seed) {
    if (!(val_fraction > 0.0 && val_fraction < 1.0)) {
        throw std::runtime_error("val fraction must lie in (0,1), got " +
                                 std::to_string(val_fraction));
    }
    if (batch_size < 1) throw std::runtime_error("batch size must be positive");
    std::vector<int64_t> ids(static_cast<size_t>(ds.count));
    for (size_t i = 0; i < ids.size(); ++i) ids[i] = static_cast<int64_t>(i);
    std::mt19937 rng(seed);
    shuffle_ids(ids, rng);

    const auto val_count = static_cast<size_t>(std::llround(ds.count * val_fraction));
    DataSplit split;
    split.val.assign(ids.begin(), ids.begin() + val_count);
    split.train.assign(ids.begin() + val_count, ids.end());
    split.batch_size = batch_size;
    split.seed = seed;
    if (static_cast<size_t>(batch_size) > split.train.size() ||
        static_cast<size_t>(batch_size) > split.val.size()) {
        throw std::runtime_error("batch size " + std::to_string(batch_size) +
                                 " exceeds a split (train " + std::to_string(split.train.size()) +
                                 ", val " + std::to_string(split.val.size()) + ")");
    }
    return split;
}

namespace {

std::vector<std::vector<int64_t>> chunk(const std::vector<int64_t>& ids, int64_t batch_size) {
    std::vector<std::vector<int64_t>> batches;
    for (size_t at = 0; at < ids.size(); at += static_cast<size_t>(batch_size)) {
        const size_t end = std::min(ids.size(), at + static_cast<size_t>(batch_size));
        batches.emplace_back(ids.begin() + at, ids.begin() + end);
    }
    return batches;
}

}  // namespace

std::vector<std::vector<int64_t>> DataSplit::train_epoch(int epoch) const {
    std::vector<int64_t> ids = train;
    std::seed_seq key{seed, static_cast<unsigned>(epoch)};
    std::mt19937 rng(key);
    shuffle_ids(ids, rng);
    return chunk(ids, batch_size);
}

std::vector<std::vector<int64_t>> DataSplit::val_order() const {
    return chunk(val, batch_size);
}

Batch gather(const Dataset& ds, const std::vector<int64_t>& idx) {
    Batch b;
    const int64_t sz = ds.sample_size();
    std::vector<float> v(idx.size() * static_cast<size_t>(sz));
    b.labels.reserve(idx.size());
    for (size_t i = 0; i < idx.size(); ++i) {
        const int64_t id = idx[i];
        if (id < 0 || id >= ds.count) {
            throw std::runtime_error("sample index " + std::to_string(id) + " out of range");
        }
        std::copy(ds.images.begin() + id * sz, ds.images.begin() + (id + 1) * sz,
                  v.begin() + static_cast<int64_t>(i) * sz);
        b.labels.push_back(ds.labels[static_cast<size_t>(id)]);
    }
    b.images = Tensor::from({static_cast<int64_t>(idx.size()), ds.channels, ds.height, ds.width},
                            std::move(v));
    return b;
}

}  // namespace whittle::data
