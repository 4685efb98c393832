#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include "fever/data/datasets.hpp"
#include "fever/data/manifest.hpp"
#include "fever/data/sampler.hpp"
#include "fever/errors.hpp"

using namespace fever;
using namespace fever::data;
namespace fs = std::filesystem;

namespace {

SynthConfig tiny(std::size_t classes = 8) {
    SynthConfig c;
    c.shape = {1, 4, 4};
    c.num_classes = classes;
    return c;
}

double sq_dist(const float* a, const float* b, std::size_t n) {
    double s = 0;
    for (std::size_t i = 0; i < n; ++i) s += (double(a[i]) - b[i]) * (double(a[i]) - b[i]);
    return s;
}

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / ("fever_" + name)) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

void write_text(const fs::path& p, const std::string& text) {
    std::ofstream(p) << text;
}

}  // namespace

TEST_CASE("generation is deterministic per seed") {
    SynthConfig c;
    const auto a = gen_synthetic_labeled(800, c, 7);
    const auto b = gen_synthetic_labeled(800, c, 7);
    CHECK(ndgrad::bitwise_equal(a.images, b.images));
    CHECK(a.labels == b.labels);
    const auto d = gen_synthetic_labeled(800, c, 8);
    CHECK_FALSE(ndgrad::bitwise_equal(a.images, d.images));

    const auto t1 = gen_synthetic_triplets(50, c, 3), t2 = gen_synthetic_triplets(50, c, 3);
    CHECK(ndgrad::bitwise_equal(t1.images, t2.images));
    CHECK(t1.pairs == t2.pairs);
    const auto u1 = gen_synthetic_unlabeled(50, c, 3), u2 = gen_synthetic_unlabeled(50, c, 3);
    CHECK(ndgrad::bitwise_equal(u1.images, u2.images));
}

TEST_CASE("pixels stay in [0, 1] and prototypes are shared across datasets") {
    SynthConfig c;
    c.rendering.noise_sigma = 0.5;
    const auto ds = gen_synthetic_labeled(64, c, 1);
    for (float v : ds.images.data()) REQUIRE((v >= 0.0f && v <= 1.0f));
    CHECK(ndgrad::bitwise_equal(class_prototype(c, 3), class_prototype(SynthConfig{}, 3)));
    CHECK_FALSE(ndgrad::bitwise_equal(class_prototype(c, 3), class_prototype(c, 4)));
}

TEST_CASE("stratified labels") {
    const auto ds = gen_synthetic_labeled(8000, tiny(), 11);
    std::map<std::size_t, int> hist;
    for (auto l : ds.labels) ++hist[l];
    REQUIRE(hist.size() == 8);
    for (const auto& [cls, count] : hist) CHECK(count == 1000);
}

TEST_CASE("noise-free samples are classified by the nearest prototype") {
    SynthConfig c;
    c.rendering.noise_sigma = 0.0;
    const auto ds = gen_synthetic_labeled(400, c, 5);
    std::vector<Array<float>> protos;
    for (std::size_t k = 0; k < c.num_classes; ++k) protos.push_back(class_prototype(c, k));
    const std::size_t per = c.shape.size();
    std::size_t correct = 0;
    for (std::size_t i = 0; i < ds.size(); ++i) {
        const float* x = ds.images.data().data() + i * per;
        std::size_t best = 0;
        double best_d = INFINITY;
        for (std::size_t k = 0; k < protos.size(); ++k) {
            const double d = sq_dist(x, protos[k].data().data(), per);
            if (d < best_d) best_d = d, best = k;
        }
        correct += best == ds.labels[i];
    }
    CHECK(correct == ds.size());
}

TEST_CASE("triplet annotation marks the same-class pair") {
    SynthConfig c;
    c.rendering.noise_sigma = 0.0;
    c.rendering.brightness = 0.0;
    const auto exact = gen_synthetic_triplets(200, c, 9);
    const std::size_t per = c.shape.size();
    for (std::size_t t = 0; t < exact.size(); ++t) {
        const auto pos = pair_positions(exact.pairs[t]);
        const float* base = exact.images.data().data() + 3 * t * per;
        CHECK(sq_dist(base + pos[0] * per, base + pos[1] * per, per) == 0.0);
        CHECK(sq_dist(base + pos[0] * per, base + pos[2] * per, per) > 0.0);
    }

    // Pixel-distance oracle with the brightness jitter left on.
    c.rendering.brightness = 0.1;
    const auto ds = gen_synthetic_triplets(500, c, 10);
    std::size_t recovered = 0;
    for (std::size_t t = 0; t < ds.size(); ++t) {
        const float* b = ds.images.data().data() + 3 * t * per;
        const double d12 = sq_dist(b, b + per, per), d13 = sq_dist(b, b + 2 * per, per);
        const double d23 = sq_dist(b + per, b + 2 * per, per);
        const int guess = d12 <= d13 && d12 <= d23 ? 12 : d13 <= d23 ? 13 : 23;
        recovered += guess == pair_code(ds.pairs[t]);
    }
    CHECK(recovered == ds.size());
}

TEST_CASE("similar-pair codes are uniform") {
    const std::size_t n = 10000;
    const auto ds = gen_synthetic_triplets(n, tiny(), 21);
    std::array<int, 3> counts{};
    for (auto p : ds.pairs) ++counts[static_cast<std::size_t>(p)];
    const double expected = n / 3.0, sd = std::sqrt(n * (1.0 / 3) * (2.0 / 3));
    for (int c : counts) CHECK(std::abs(c - expected) <= 3 * sd);
}

TEST_CASE("generator argument errors") {
    CHECK_THROWS_AS(gen_synthetic_labeled(0, tiny(), 1), std::invalid_argument);
    CHECK_THROWS_AS(gen_synthetic_triplets(5, tiny(1), 1), std::invalid_argument);
}

TEST_CASE("drop-last epoch of 90 triplets in batches of 36") {
    const auto trip = gen_synthetic_triplets(90, tiny(), 1);
    const auto lab = gen_synthetic_labeled(20, tiny(), 2);
    StreamSampler s(trip, lab, nullptr, 3);
    CHECK(s.steps_per_epoch(36) == 2);
    std::set<std::size_t> seen;
    auto b1 = s.next_batches({36, 8, 0});
    CHECK_FALSE(b1.end_of_epoch);
    auto b2 = s.next_batches({36, 8, 0});
    CHECK(b2.end_of_epoch);
    CHECK(s.epoch() == 1);
    for (const auto* b : {&b1, &b2}) {
        CHECK(b->triplets.indices.size() == 36);
        CHECK(b->triplets.images.dim(0) == 108);
        seen.insert(b->triplets.indices.begin(), b->triplets.indices.end());
    }
    CHECK(seen.size() == 72);

    StreamSampler keep(trip, lab, nullptr, 3, false);
    CHECK(keep.steps_per_epoch(36) == 3);
    std::set<std::size_t> all;
    std::vector<std::size_t> lens;
    for (int i = 0; i < 3; ++i) {
        auto b = keep.next_batches({36, 8, 0});
        lens.push_back(b.triplets.indices.size());
        all.insert(b.triplets.indices.begin(), b.triplets.indices.end());
        CHECK(b.end_of_epoch == (i == 2));
    }
    CHECK(lens == std::vector<std::size_t>{36, 36, 18});
    CHECK(all.size() == 90);
}

TEST_CASE("triplet batch content matches the dataset") {
    const auto trip = gen_synthetic_triplets(40, tiny(), 4);
    const auto lab = gen_synthetic_labeled(16, tiny(), 5);
    StreamSampler s(trip, lab, nullptr, 6);
    const auto b = s.next_batches({10, 4, 0});
    const std::size_t per = trip.shape.size();
    for (std::size_t i = 0; i < 10; ++i) {
        const std::size_t t = b.triplets.indices[i];
        CHECK(b.triplets.pairs[i] == trip.pairs[t]);
        CHECK(std::equal(b.triplets.images.data().begin() + 3 * i * per,
                         b.triplets.images.data().begin() + 3 * (i + 1) * per,
                         trip.images.data().begin() + 3 * t * per));
    }
    for (std::size_t i = 0; i < 4; ++i) CHECK(b.labeled.labels[i] == lab.labels[b.labeled.indices[i]]);
}

TEST_CASE("background streams visit every element once per pass") {
    const auto trip = gen_synthetic_triplets(100, tiny(), 1);
    const auto lab = gen_synthetic_labeled(32, tiny(), 2);
    const auto unl = gen_synthetic_unlabeled(10, tiny(), 3);
    StreamSampler s(trip, lab, &unl, 4);
    std::vector<std::size_t> first, second, unl_seen;
    for (int step = 0; step < 4; ++step) {
        const auto b = s.next_batches({5, 16, 3});
        auto& dst = step < 2 ? first : second;
        dst.insert(dst.end(), b.labeled.indices.begin(), b.labeled.indices.end());
        unl_seen.insert(unl_seen.end(), b.unlabeled.indices.begin(), b.unlabeled.indices.end());
        CHECK(b.unlabeled.images.dim(0) == 3);
    }
    std::multiset<std::size_t> labels_drawn, labels_all(lab.labels.begin(), lab.labels.end());
    for (auto i : first) labels_drawn.insert(lab.labels[i]);
    CHECK(labels_drawn == labels_all);
    std::sort(first.begin(), first.end());
    std::sort(second.begin(), second.end());
    for (std::size_t i = 0; i < 32; ++i) {
        CHECK(first[i] == i);
        CHECK(second[i] == i);
    }
    std::vector<std::size_t> pass(unl_seen.begin(), unl_seen.begin() + 10);
    std::sort(pass.begin(), pass.end());
    for (std::size_t i = 0; i < 10; ++i) CHECK(pass[i] == i);
}

TEST_CASE("full-size batch sizes are accepted") {
    SynthConfig c = tiny();
    const auto trip = gen_synthetic_triplets(128, c, 1);
    const auto lab = gen_synthetic_labeled(128, c, 2);
    const auto unl = gen_synthetic_unlabeled(64, c, 3);
    StreamSampler teacher(trip, lab, nullptr, 1);
    const auto t = teacher.next_batches({64, 64, 0});
    CHECK(t.triplets.images.dim(0) == 192);
    CHECK(t.labeled.images.dim(0) == 64);
    CHECK(t.unlabeled.images.dim(0) == 0);
    StreamSampler student(trip, lab, &unl, 1);
    const auto st = student.next_batches({36, 16, 16});
    CHECK(st.triplets.images.dim(0) == 108);
    CHECK(st.unlabeled.images.dim(0) == 16);
}

TEST_CASE("sampler determinism and state round trip") {
    const auto trip = gen_synthetic_triplets(50, tiny(), 1);
    const auto lab = gen_synthetic_labeled(30, tiny(), 2);
    const auto unl = gen_synthetic_unlabeled(7, tiny(), 3);
    const BatchSizes sizes{8, 6, 2};
    StreamSampler a(trip, lab, &unl, 99), b(trip, lab, &unl, 99), other(trip, lab, &unl, 100);
    bool differs = false;
    for (int i = 0; i < 20; ++i) {
        const auto x = a.next_batches(sizes), y = b.next_batches(sizes), z = other.next_batches(sizes);
        CHECK(x.triplets.indices == y.triplets.indices);
        CHECK(x.labeled.indices == y.labeled.indices);
        CHECK(x.unlabeled.indices == y.unlabeled.indices);
        differs |= x.triplets.indices != z.triplets.indices;
    }
    CHECK(differs);

    const SamplerState saved = a.state();
    StreamSampler resumed(trip, lab, &unl, 0);
    resumed.restore(saved);
    CHECK(resumed.epoch() == a.epoch());
    for (int i = 0; i < 15; ++i) {
        const auto x = a.next_batches(sizes), y = resumed.next_batches(sizes);
        CHECK(x.triplets.indices == y.triplets.indices);
        CHECK(x.labeled.indices == y.labeled.indices);
        CHECK(x.unlabeled.indices == y.unlabeled.indices);
        CHECK(x.end_of_epoch == y.end_of_epoch);
    }

    SamplerState broken = saved;
    broken.labeled.order[0] = broken.labeled.order[1];
    CHECK_THROWS_AS(resumed.restore(broken), InvariantError);
}

TEST_CASE("sampler errors") {
    const auto trip = gen_synthetic_triplets(10, tiny(), 1);
    const auto lab = gen_synthetic_labeled(10, tiny(), 2);
    StreamSampler s(trip, lab, nullptr, 1);
    CHECK_THROWS_AS(s.next_batches({11, 4, 0}), std::invalid_argument);
    CHECK_THROWS_AS(s.next_batches({4, 0, 0}), std::invalid_argument);
    CHECK_THROWS_AS(s.next_batches({4, 4, 2}), std::invalid_argument);
    SynthConfig wide = tiny();
    wide.shape = {1, 5, 5};
    const auto lab_wide = gen_synthetic_labeled(10, wide, 2);
    CHECK_THROWS_AS(StreamSampler(trip, lab_wide, nullptr, 1), ShapeError);
}

TEST_CASE("png round trip quantizes to 1/255") {
    TempDir dir("png");
    SynthConfig c;
    c.shape = {3, 5, 7};
    const auto ds = gen_synthetic_labeled(1, c, 4);
    write_png(dir.path / "x.png", ds.images.data().data(), c.shape);
    const auto back = read_png(dir.path / "x.png");
    REQUIRE(back.shape() == ndgrad::Shape{3, 5, 7});
    for (std::size_t i = 0; i < back.size(); ++i) {
        CHECK(std::abs(back[i] - ds.images[i]) <= 0.5f / 255.0f + 1e-6f);
        CHECK(std::abs(back[i] * 255.0f - std::round(back[i] * 255.0f)) < 1e-3f);
    }
    const auto gray = read_png(dir.path / "x.png", 1);
    CHECK(gray.shape() == ndgrad::Shape{1, 5, 7});
    CHECK_THROWS_AS(read_png(dir.path / "missing.png"), DataError);
}

TEST_CASE("manifest round trip") {
    TempDir dir("manifest_rt");
    SynthConfig c;
    c.shape = {3, 6, 6};
    const auto lab = gen_synthetic_labeled(12, c, 1);
    const auto trip = gen_synthetic_triplets(5, c, 2);
    const auto unl = gen_synthetic_unlabeled(4, c, 3);

    const auto lab_back = load_labeled_manifest(write_manifest(dir.path, "labeled", lab));
    CHECK(lab_back.labels == lab.labels);
    CHECK(lab_back.shape == c.shape);
    const auto trip_back = load_triplet_manifest(write_manifest(dir.path, "triplets", trip));
    CHECK(trip_back.pairs == trip.pairs);
    CHECK(trip_back.images.dim(0) == 15);
    const auto unl_back = std::get<UnlabeledDataset>(
        load_manifest(write_manifest(dir.path, "unlabeled", unl), ManifestKind::unlabeled));
    CHECK(unl_back.size() == 4);
    for (std::size_t i = 0; i < lab.images.size(); ++i) {
        REQUIRE(std::abs(lab_back.images[i] - lab.images[i]) <= 0.5f / 255.0f + 1e-6f);
    }
}

TEST_CASE("manifest rows and validation") {
    TempDir dir("manifest_rows");
    fs::create_directories(dir.path / "imgs");
    const Array<float> px({3, 2, 2}, 0.5f);
    for (const char* name : {"imgs/a.png", "a.png", "b.png", "c.png"}) {
        write_png(dir.path / name, px.data().data(), {3, 2, 2});
    }

    write_text(dir.path / "lab.csv", "path,label\nimgs/a.png,3\n");
    const auto lab = load_labeled_manifest(dir.path / "lab.csv");
    REQUIRE(lab.size() == 1);
    CHECK(lab.labels[0] == 3);
    CHECK(lab.images[0] == doctest::Approx(128.0 / 255.0));

    write_text(dir.path / "trip.csv", "path1,path2,path3,similar_pair\r\na.png,b.png,c.png,13\r\n");
    const auto trip = load_triplet_manifest(dir.path / "trip.csv");
    REQUIRE(trip.size() == 1);
    CHECK(trip.pairs[0] == SimilarPair::p13);

    auto message = [&](const std::string& text) {
        write_text(dir.path / "bad.csv", text);
        try {
            (void)load_labeled_manifest(dir.path / "bad.csv");
        } catch (const DataError& e) {
            return std::string(e.what());
        }
        return std::string("no error");
    };
    const std::string nine = message("path,label\nimgs/a.png,1\nimgs/a.png,9\n");
    CHECK(nine.find(":3:") != std::string::npos);
    CHECK(nine.find("label 9") != std::string::npos);
    CHECK(message("path,label\nimgs/a.png\n").find(":2: expected 2 fields") != std::string::npos);
    CHECK(message("path,label\nimgs/a.png,x\n").find("not an integer") != std::string::npos);
    CHECK(message("file,label\nimgs/a.png,1\n").find("header") != std::string::npos);
    CHECK(message("path,label\nimgs/zz.png,1\n").find(":2:") != std::string::npos);
    CHECK(message("path,label\n").find("no records") != std::string::npos);

    write_text(dir.path / "badpair.csv", "path1,path2,path3,similar_pair\na.png,b.png,c.png,14\n");
    CHECK_THROWS_WITH_AS(load_triplet_manifest(dir.path / "badpair.csv"),
                         doctest::Contains("similar_pair 14"), DataError);
    CHECK_THROWS_AS(load_labeled_manifest(dir.path / "nope.csv"), DataError);
}
