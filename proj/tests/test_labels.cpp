#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>
#include <vector>

#include "pgnn/labels.hpp"

using namespace pgnn;

namespace {

AttentionMap map_of(std::size_t cls, std::size_t h, std::size_t w,
                    std::vector<double> vals) {
    AttentionMap m;
    m.image_id = "img";
    m.class_id = cls;
    m.height = h;
    m.width = w;
    m.values = std::move(vals);
    return m;
}

LabelMap labels_of(std::size_t h, std::size_t w,
                   std::vector<std::uint8_t> vals) {
    return LabelMap{h, w, std::move(vals)};
}

} // namespace

TEST_CASE("a saturated single-class map claims every pixel") {
    auto l = maps_to_labels({map_of(2, 2, 2, {1.0, 1.0, 1.0, 1.0})}, 0.3);
    CHECK(l.values == std::vector<std::uint8_t>{2, 2, 2, 2});
}

TEST_CASE("maps below the background threshold label nothing") {
    auto l = maps_to_labels({map_of(1, 2, 2, {0.1, 0.3, 0.2, 0.0}),
                             map_of(2, 2, 2, {0.3, 0.05, 0.1, 0.25})},
                            0.3);
    // 0.3 is not strictly above the threshold.
    CHECK(l.values == std::vector<std::uint8_t>{0, 0, 0, 0});
}

TEST_CASE("argmax ties resolve to the lower class index") {
    auto l = maps_to_labels({map_of(3, 1, 2, {0.8, 0.5}),
                             map_of(1, 1, 2, {0.8, 0.9})},
                            0.3);
    CHECK(l.values == std::vector<std::uint8_t>{1, 1});
    // Same maps in the opposite order give the same answer.
    auto r = maps_to_labels({map_of(1, 1, 2, {0.8, 0.9}),
                             map_of(3, 1, 2, {0.8, 0.5})},
                            0.3);
    CHECK(r.values == l.values);
}

TEST_CASE("argmax labeling matches a brute-force scan on random maps") {
    std::mt19937_64 rng(7);
    std::uniform_real_distribution<double> dist(0.0, 1.0);
    std::vector<AttentionMap> maps;
    for (std::size_t cls = 1; cls <= 3; ++cls) {
        std::vector<double> vals(64);
        for (double& v : vals) v = dist(rng);
        maps.push_back(map_of(cls, 8, 8, std::move(vals)));
    }
    auto l = maps_to_labels(maps, 0.3);
    for (std::size_t i = 0; i < 64; ++i) {
        std::size_t want = 0;
        double best = 0.3;
        for (const auto& m : maps)
            if (m.values[i] > best) {
                best = m.values[i];
                want = m.class_id;
            }
        CHECK(l.values[i] == want);
    }
}

TEST_CASE("label conversion validates maps and threshold") {
    CHECK_THROWS_AS(maps_to_labels({}, 0.3), std::invalid_argument);
    CHECK_THROWS_AS(
        maps_to_labels({map_of(1, 1, 2, {0.0, 0.0}), map_of(2, 2, 1, {0.0, 0.0})},
                       0.3),
        std::invalid_argument);
    CHECK_THROWS_AS(
        maps_to_labels({map_of(1, 1, 1, {0.0}), map_of(1, 1, 1, {0.0})}, 0.3),
        std::invalid_argument);
    CHECK_THROWS_AS(maps_to_labels({map_of(0, 1, 1, {0.0})}, 0.3),
                    std::invalid_argument);
    CHECK_THROWS_AS(maps_to_labels({map_of(1, 1, 1, {0.0})}, 0.0),
                    std::invalid_argument);
}

TEST_CASE("label update follows the three-branch rule exhaustively") {
    // Reference interpreter for the per-pixel rule.
    auto rule = [](std::uint8_t c, std::uint8_t phi) -> std::uint8_t {
        if (phi == 0) return c;
        if (c == 0) return phi;
        return phi;
    };
    for (std::uint8_t c = 0; c <= 4; ++c)
        for (std::uint8_t phi = 0; phi <= 4; ++phi) {
            auto got = mutual_update(labels_of(1, 1, {c}), labels_of(1, 1, {phi}));
            CHECK(got.values[0] == rule(c, phi));
        }
    // The documented examples.
    CHECK(mutual_update(labels_of(1, 1, {3}), labels_of(1, 1, {0})).values[0] == 3);
    CHECK(mutual_update(labels_of(1, 1, {0}), labels_of(1, 1, {5})).values[0] == 5);
    CHECK(mutual_update(labels_of(1, 1, {2}), labels_of(1, 1, {7})).values[0] == 7);
}

TEST_CASE("label update is idempotent in the prediction") {
    std::mt19937_64 rng(11);
    std::uniform_int_distribution<int> dist(0, 4);
    std::vector<std::uint8_t> c(36), phi(36);
    for (auto& v : c) v = static_cast<std::uint8_t>(dist(rng));
    for (auto& v : phi) v = static_cast<std::uint8_t>(dist(rng));
    LabelMap cur = labels_of(6, 6, c);
    LabelMap pred = labels_of(6, 6, phi);
    LabelMap once = mutual_update(cur, pred);
    CHECK(mutual_update(once, pred) == once);
}

TEST_CASE("label update never grows the background") {
    std::mt19937_64 rng(13);
    std::uniform_int_distribution<int> dist(0, 3);
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<std::uint8_t> c(25), phi(25);
        for (auto& v : c) v = static_cast<std::uint8_t>(dist(rng));
        for (auto& v : phi) v = static_cast<std::uint8_t>(dist(rng));
        LabelMap cur = labels_of(5, 5, c);
        LabelMap pred = labels_of(5, 5, phi);
        LabelMap next = mutual_update(cur, pred);
        for (std::size_t i = 0; i < 25; ++i) {
            const bool bg = next.values[i] == 0;
            CHECK(bg == (c[i] == 0 && phi[i] == 0));
        }
    }
    CHECK_THROWS_AS(mutual_update(labels_of(1, 2, {0, 0}), labels_of(2, 1, {0, 0})),
                    std::invalid_argument);
}

TEST_CASE("recall does not drop when predictions extend correct labels") {
    LabelMap gt = labels_of(2, 2, {1, 1, 1, 1});
    LabelMap cur = labels_of(2, 2, {1, 0, 0, 0});
    LabelMap pred = labels_of(2, 2, {1, 1, 0, 0});
    LabelMap next = mutual_update(cur, pred);
    const double before = recall(confusion(cur, gt, 1));
    const double after = recall(confusion(next, gt, 1));
    CHECK(after >= before);
    CHECK(after == doctest::Approx(0.5));
}

TEST_CASE("perfect predictions have clean counts and unit metrics") {
    std::mt19937_64 rng(17);
    std::uniform_int_distribution<int> dist(0, 3);
    std::vector<std::uint8_t> v(49);
    for (auto& x : v) x = static_cast<std::uint8_t>(dist(rng));
    LabelMap m = labels_of(7, 7, v);
    auto counts = confusion(m, m, 3);
    for (const auto& k : counts.per_class) {
        CHECK(k.fp == 0);
        CHECK(k.fn == 0);
    }
    CHECK(miou(counts) == 1.0);
    CHECK(precision(counts) == 1.0);
    CHECK(recall(counts) == 1.0);
}

TEST_CASE("the all-ones prediction against a half map scores by hand") {
    LabelMap pred = labels_of(2, 2, {1, 1, 1, 1});
    LabelMap gt = labels_of(2, 2, {1, 1, 0, 0});
    auto counts = confusion(pred, gt, 1);
    CHECK(counts.per_class[1].tp == 2);
    CHECK(counts.per_class[1].fp == 2);
    CHECK(counts.per_class[1].fn == 0);
    CHECK(miou(counts) == 0.5);
    CHECK(precision(counts) == 0.5);
    CHECK(recall(counts) == 1.0);
    // Including the background adds a class with zero true positives.
    CHECK(miou(counts, true) == 0.25);
    CHECK(recall(counts, true) == 0.5);
}

TEST_CASE("confusion matches an independent per-class recount") {
    std::mt19937_64 rng(19);
    std::uniform_int_distribution<int> dist(0, 4);
    std::vector<std::uint8_t> p(64), g(64);
    for (auto& x : p) x = static_cast<std::uint8_t>(dist(rng));
    for (auto& x : g) x = static_cast<std::uint8_t>(dist(rng));
    LabelMap pred = labels_of(8, 8, p);
    LabelMap gt = labels_of(8, 8, g);
    auto counts = confusion(pred, gt, 4);
    for (std::size_t c = 0; c <= 4; ++c) {
        std::uint64_t tp = 0, fp = 0, fn = 0;
        for (std::size_t i = 0; i < 64; ++i) {
            if (p[i] == c && g[i] == c) ++tp;
            if (p[i] == c && g[i] != c) ++fp;
            if (p[i] != c && g[i] == c) ++fn;
        }
        CHECK(counts.per_class[c].tp == tp);
        CHECK(counts.per_class[c].fp == fp);
        CHECK(counts.per_class[c].fn == fn);
    }
}

TEST_CASE("per-class IoU never exceeds precision or recall") {
    std::mt19937_64 rng(23);
    std::uniform_int_distribution<int> dist(0, 3);
    for (int trial = 0; trial < 10; ++trial) {
        std::vector<std::uint8_t> p(36), g(36);
        for (auto& x : p) x = static_cast<std::uint8_t>(dist(rng));
        for (auto& x : g) x = static_cast<std::uint8_t>(dist(rng));
        auto counts = confusion(labels_of(6, 6, p), labels_of(6, 6, g), 3);
        for (const auto& k : counts.per_class) {
            if (k.tp + k.fp + k.fn == 0) continue;
            const double iou =
                static_cast<double>(k.tp) / static_cast<double>(k.tp + k.fp + k.fn);
            const double pr = k.tp + k.fp == 0
                                  ? 0.0
                                  : static_cast<double>(k.tp) /
                                        static_cast<double>(k.tp + k.fp);
            const double rc = k.tp + k.fn == 0
                                  ? 0.0
                                  : static_cast<double>(k.tp) /
                                        static_cast<double>(k.tp + k.fn);
            if (k.tp > 0) {
                CHECK(iou <= pr);
                CHECK(iou <= rc);
            }
        }
    }
}

TEST_CASE("classes absent from both maps drop out of the averages") {
    // Classes 2 and 3 never appear; only class 1 is averaged.
    LabelMap pred = labels_of(1, 4, {1, 1, 0, 0});
    LabelMap gt = labels_of(1, 4, {1, 0, 1, 0});
    auto counts = confusion(pred, gt, 3);
    CHECK(miou(counts) == doctest::Approx(1.0 / 3.0));
    CHECK(precision(counts) == 0.5);
    CHECK(recall(counts) == 0.5);

    // A class present only in gt contributes 0 to precision.
    LabelMap pred2 = labels_of(1, 4, {1, 1, 0, 0});
    LabelMap gt2 = labels_of(1, 4, {1, 1, 2, 2});
    auto c2 = confusion(pred2, gt2, 3);
    CHECK(precision(c2) == doctest::Approx(0.5)); // mean of 1.0 and 0.0
    CHECK(recall(c2) == doctest::Approx(0.5));
}

TEST_CASE("ignored ground-truth pixels leave no trace in the counts") {
    LabelMap pred = labels_of(1, 4, {1, 2, 1, 0});
    LabelMap gt = labels_of(1, 4, {1, 3, 3, 0});
    auto all = confusion(pred, gt, 3);
    auto masked = confusion(pred, gt, 3, /*ignore_index=*/3);
    CHECK(all.per_class[3].fn == 2);
    CHECK(masked.per_class[3].fn == 0);
    CHECK(masked.per_class[2].fp == 0);
    CHECK(masked.per_class[1].tp == 1);
    CHECK(masked.per_class[1].fp == 0);
}

TEST_CASE("confusion counts add across images") {
    LabelMap p1 = labels_of(1, 2, {1, 0});
    LabelMap g1 = labels_of(1, 2, {1, 1});
    LabelMap p2 = labels_of(1, 2, {2, 1});
    LabelMap g2 = labels_of(1, 2, {2, 0});
    auto a = confusion(p1, g1, 2);
    auto b = confusion(p2, g2, 2);
    ConfusionCounts total = a;
    total += b;
    CHECK(total.per_class[1].tp == a.per_class[1].tp + b.per_class[1].tp);
    CHECK(total.per_class[1].fp == a.per_class[1].fp + b.per_class[1].fp);
    CHECK(total.per_class[1].fn == a.per_class[1].fn + b.per_class[1].fn);
    CHECK(total.per_class[2].tp == 1);
}

TEST_CASE("label maps survive the PGM round trip and validate range") {
    LabelMap m = labels_of(2, 3, {0, 1, 2, 3, 4, 0});
    PgmImage img = label_to_pgm(m);
    CHECK(img.width == 3);
    CHECK(img.height == 2);
    LabelMap back = label_from_pgm(img, 4);
    CHECK(back == m);
    CHECK_THROWS_AS(label_from_pgm(img, 3), std::runtime_error);
}
