#include "pgnn/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>
#include <stdexcept>

#include "pgnn/pgm.hpp"
#include "pgnn/serialize.hpp"

namespace pgnn {

namespace {

double clamp01(double v) { return std::min(1.0, std::max(0.0, v)); }

double real_in(std::mt19937_64& rng, double lo, double hi) {
    return std::uniform_real_distribution<double>(lo, hi)(rng);
}

std::size_t count_in(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
    return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

struct Rgb {
    double r, g, b;
};

// Class-neutral distractor blobs. Their tone sits between the background
// grays and the object colors so they add clutter without class signal.
constexpr Rgb kFabric{0.62, 0.45, 0.30};

// Every object is a green body with a small class-colored head poking over
// one side. The head is the strong, unambiguous class cue; the body carries
// the same cue only as a faint tint. A classifier therefore concentrates
// its response on heads, and recovering the full object means holding on
// to the weak body evidence as well.
constexpr Rgb kBody{0.30, 0.55, 0.35};

constexpr Rgb kHeadColors[4] = {
    {0.90, 0.10, 0.10}, // class 1, red
    {0.92, 0.88, 0.15}, // class 2, yellow
    {0.15, 0.45, 0.90}, // class 3, blue
    {0.80, 0.15, 0.80}, // class 4, magenta
};

constexpr std::size_t kHeadSize = 4;

// Fraction of the head color blended into the body pixels.
constexpr double kBodyTint = 0.2;

// Each scene also drops a couple of head-colored marks on the background.
// They are class-correlated context, not object, so any map that chases
// color alone pays for them in precision.
constexpr std::size_t kCompanionCount = 2;

struct Box {
    std::size_t top, left, height, width;
};

bool overlaps(const Box& a, const Box& b) {
    // A one-pixel gap keeps object outlines from touching.
    const bool rows = a.top < b.top + b.height + 1 && b.top < a.top + a.height + 1;
    const bool cols = a.left < b.left + b.width + 1 && b.left < a.left + a.width + 1;
    return rows && cols;
}

bool overlaps_any(const Box& candidate, const std::vector<Box>& taken) {
    for (const Box& b : taken)
        if (overlaps(candidate, b)) return true;
    return false;
}

// Silhouettes inside an s x s box, by shape id. Distractor blobs reuse the
// same two shapes.
bool in_shape(std::size_t shape, std::size_t i, std::size_t j, std::size_t s) {
    const double c = (static_cast<double>(s) - 1.0) / 2.0;
    const double di = static_cast<double>(i) - c;
    const double dj = static_cast<double>(j) - c;
    const double r = static_cast<double>(s) / 2.0 - 0.3;
    switch (shape) {
    case 1: return true;                       // square
    case 2: return di * di + dj * dj <= r * r; // disc
    default: throw std::logic_error("in_shape: unknown shape id");
    }
}

struct Canvas {
    std::size_t size;
    std::vector<double> rgb;       // 3 planes, row-major
    std::vector<std::uint8_t> gt;  // class per pixel

    explicit Canvas(std::size_t n) : size(n), rgb(3 * n * n, 0.0), gt(n * n, 0) {}

    void paint(std::size_t i, std::size_t j, const Rgb& color) {
        const std::size_t plane = size * size;
        const std::size_t at = i * size + j;
        rgb[at] = clamp01(color.r);
        rgb[plane + at] = clamp01(color.g);
        rgb[2 * plane + at] = clamp01(color.b);
    }
};

std::string scene_name(std::size_t index) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "img_%04zu", index);
    return buf;
}

std::string format_score(double v) {
    std::ostringstream out;
    out << std::setprecision(std::numeric_limits<double>::max_digits10) << v;
    return out.str();
}

} // namespace

std::vector<SyntheticScene> generate_dataset(const ExperimentConfig& config) {
    config.validate();
    std::mt19937_64 rng(config.seed);
    const std::size_t n = config.image_size;
    const std::size_t K = config.num_classes;

    const std::size_t body_lo = std::max<std::size_t>(8, n / 4);
    const std::size_t body_hi = body_lo + 4;

    std::vector<SyntheticScene> dataset;
    dataset.reserve(config.dataset_size);

    for (std::size_t index = 0; index < config.dataset_size; ++index) {
        Canvas canvas(n);
        SyntheticScene scene;
        scene.id = scene_name(index);
        scene.labels.assign(K, 0);

        // Textured gray background: a base tone, a few soft rectangles, then
        // per-pixel noise shared across channels so it stays colorless.
        const double gray = real_in(rng, 0.38, 0.50);
        const Rgb tint{gray + real_in(rng, -0.02, 0.02), gray + real_in(rng, -0.02, 0.02),
                       gray + real_in(rng, -0.02, 0.02)};
        std::vector<double> shade(n * n, 0.0);
        for (int rect = 0; rect < 3; ++rect) {
            const std::size_t top = count_in(rng, 0, n - 1);
            const std::size_t left = count_in(rng, 0, n - 1);
            const std::size_t h = count_in(rng, 4, n / 2);
            const std::size_t w = count_in(rng, 4, n / 2);
            const double delta = real_in(rng, -0.03, 0.03);
            for (std::size_t i = top; i < std::min(n, top + h); ++i)
                for (std::size_t j = left; j < std::min(n, left + w); ++j)
                    shade[i * n + j] += delta;
        }
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < n; ++j) {
                const double noise = real_in(rng, -0.04, 0.04);
                const double s = shade[i * n + j] + noise;
                canvas.paint(i, j, {tint.r + s, tint.g + s, tint.b + s});
            }
        }

        // One object per scene: a green body with the class-colored head
        // centered on a random side, half inside the silhouette and half
        // over the background.
        const std::size_t c = count_in(rng, 1, K);
        scene.labels[c - 1] = 1;

        const std::size_t s = count_in(rng, body_lo, body_hi);
        const std::size_t margin = kHeadSize / 2 + 1; // room for the overhang
        Box box{count_in(rng, margin, n - s - margin),
                count_in(rng, margin, n - s - margin), s, s};
        const std::size_t shape = count_in(rng, 0, 1) ? 1 : 2; // square or disc

        const Rgb head_color = kHeadColors[c - 1];
        const Rgb body_color{kBody.r + kBodyTint * (head_color.r - kBody.r),
                             kBody.g + kBodyTint * (head_color.g - kBody.g),
                             kBody.b + kBodyTint * (head_color.b - kBody.b)};
        for (std::size_t i = 0; i < s; ++i) {
            for (std::size_t j = 0; j < s; ++j) {
                if (!in_shape(shape, i, j, s)) continue;
                const double noise = real_in(rng, -0.03, 0.03);
                canvas.paint(box.top + i, box.left + j,
                             {body_color.r + noise, body_color.g + noise,
                              body_color.b + noise});
                canvas.gt[(box.top + i) * n + (box.left + j)] =
                    static_cast<std::uint8_t>(c);
            }
        }

        // Head anchored at the midpoint of a random side. The box midline
        // touches both silhouettes there, so halving the overlap works for
        // the disc as well as the square.
        const std::size_t side = count_in(rng, 0, 3); // N, E, S, W
        const std::size_t mid_i = box.top + s / 2 - kHeadSize / 2;
        const std::size_t mid_j = box.left + s / 2 - kHeadSize / 2;
        Box head{side == 0   ? box.top - kHeadSize / 2
                 : side == 2 ? box.top + s - kHeadSize / 2
                             : mid_i,
                 side == 1   ? box.left + s - kHeadSize / 2
                 : side == 3 ? box.left - kHeadSize / 2
                             : mid_j,
                 kHeadSize, kHeadSize};
        for (std::size_t i = 0; i < kHeadSize; ++i) {
            for (std::size_t j = 0; j < kHeadSize; ++j) {
                const double noise = real_in(rng, -0.03, 0.03);
                canvas.paint(head.top + i, head.left + j,
                             {head_color.r + noise, head_color.g + noise,
                              head_color.b + noise});
                canvas.gt[(head.top + i) * n + (head.left + j)] =
                    static_cast<std::uint8_t>(c);
            }
        }

        // Object bounding box (body plus head) claims the space distractors
        // and proposals work around.
        const std::size_t obj_top = std::min(box.top, head.top);
        const std::size_t obj_left = std::min(box.left, head.left);
        std::vector<Box> claimed{{obj_top, obj_left,
                                  std::max(box.top + s, head.top + kHeadSize) - obj_top,
                                  std::max(box.left + s, head.left + kHeadSize) - obj_left}};
        std::vector<Box> occupied = claimed;

        // Head-colored companion marks on the background; ground truth stays
        // background.
        for (std::size_t d = 0; d < kCompanionCount; ++d) {
            Box mark{0, 0, kHeadSize, kHeadSize};
            bool placed = false;
            for (int attempt = 0; attempt < 100 && !placed; ++attempt) {
                mark.top = count_in(rng, 0, n - kHeadSize);
                mark.left = count_in(rng, 0, n - kHeadSize);
                placed = !overlaps_any(mark, occupied);
            }
            if (!placed) continue;
            occupied.push_back(mark);
            for (std::size_t i = 0; i < kHeadSize; ++i) {
                for (std::size_t j = 0; j < kHeadSize; ++j) {
                    const double noise = real_in(rng, -0.03, 0.03);
                    canvas.paint(mark.top + i, mark.left + j,
                                 {head_color.r + noise, head_color.g + noise,
                                  head_color.b + noise});
                }
            }
        }

        // Fabric-colored distractor blobs; ground truth stays background.
        const std::size_t blob_count = count_in(rng, 1, 3);
        for (std::size_t d = 0; d < blob_count; ++d) {
            const std::size_t s = count_in(rng, 4, 8);
            const std::size_t shape = count_in(rng, 0, 1) ? 1 : 2; // square or disc
            Box box{0, 0, s, s};
            bool placed = false;
            for (int attempt = 0; attempt < 100 && !placed; ++attempt) {
                box.top = count_in(rng, 0, n - s);
                box.left = count_in(rng, 0, n - s);
                placed = !overlaps_any(box, occupied);
            }
            if (!placed) continue;
            occupied.push_back(box);
            for (std::size_t i = 0; i < s; ++i) {
                for (std::size_t j = 0; j < s; ++j) {
                    const double noise = real_in(rng, -0.03, 0.03);
                    if (!in_shape(shape, i, j, s)) continue;
                    canvas.paint(box.top + i, box.left + j,
                                 {kFabric.r + noise, kFabric.g + noise, kFabric.b + noise});
                }
            }
        }

        // Noisy proposal boxes: one jittered box per object plus a decoy.
        for (const Box& b : claimed) {
            const long long dt = static_cast<long long>(count_in(rng, 0, 4)) - 2;
            const long long dl = static_cast<long long>(count_in(rng, 0, 4)) - 2;
            const long long dh = static_cast<long long>(count_in(rng, 0, 4)) - 2;
            const long long dw = static_cast<long long>(count_in(rng, 0, 4)) - 2;
            ScoredBox sb;
            sb.image_id = scene.id;
            sb.top = static_cast<std::size_t>(std::clamp<long long>(
                static_cast<long long>(b.top) + dt, 0, static_cast<long long>(n) - 4));
            sb.left = static_cast<std::size_t>(std::clamp<long long>(
                static_cast<long long>(b.left) + dl, 0, static_cast<long long>(n) - 4));
            sb.height = static_cast<std::size_t>(std::clamp<long long>(
                static_cast<long long>(b.height) + dh, 4,
                static_cast<long long>(n - sb.top)));
            sb.width = static_cast<std::size_t>(std::clamp<long long>(
                static_cast<long long>(b.width) + dw, 4,
                static_cast<long long>(n - sb.left)));
            sb.score = real_in(rng, 0.7, 0.99);
            scene.boxes.push_back(sb);
        }
        {
            const std::size_t s = count_in(rng, 6, 10);
            ScoredBox decoy;
            decoy.image_id = scene.id;
            decoy.top = count_in(rng, 0, n - s);
            decoy.left = count_in(rng, 0, n - s);
            decoy.height = s;
            decoy.width = s;
            decoy.score = real_in(rng, 0.2, 0.5);
            scene.boxes.push_back(decoy);
        }

        scene.image = Tensor::from_data({3, n, n}, canvas.rgb);
        scene.ground_truth = LabelMap{n, n, canvas.gt};
        dataset.push_back(std::move(scene));
    }
    return dataset;
}

std::vector<std::size_t> images_with_class(const std::vector<SyntheticScene>& dataset,
                                           std::size_t c) {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < dataset.size(); ++i) {
        if (c < 1 || c > dataset[i].labels.size())
            throw std::invalid_argument("images_with_class: class " + std::to_string(c) +
                                        " out of range");
        if (dataset[i].has_class(c)) out.push_back(i);
    }
    return out;
}

std::vector<std::size_t> sample_batch(const std::vector<SyntheticScene>& dataset,
                                      std::size_t c, std::size_t size,
                                      std::mt19937_64& rng) {
    std::vector<std::size_t> pool = images_with_class(dataset, c);
    if (pool.size() < size)
        throw std::runtime_error("sample_batch: class " + std::to_string(c) + " appears in " +
                                 std::to_string(pool.size()) + " scenes, need " +
                                 std::to_string(size));
    std::shuffle(pool.begin(), pool.end(), rng);
    pool.resize(size);
    return pool;
}

void save_dataset(const std::string& dir, const std::vector<SyntheticScene>& dataset,
                  std::size_t num_classes) {
    namespace fs = std::filesystem;
    fs::create_directories(fs::path(dir) / "images");
    fs::create_directories(fs::path(dir) / "ground_truth");

    std::ofstream labels((fs::path(dir) / "labels.txt").string());
    if (!labels) throw std::runtime_error("save_dataset: cannot write labels.txt in " + dir);
    labels << "num_classes " << num_classes << "\n";

    std::ofstream boxes((fs::path(dir) / "boxes.txt").string());
    if (!boxes) throw std::runtime_error("save_dataset: cannot write boxes.txt in " + dir);

    for (const SyntheticScene& scene : dataset) {
        if (scene.labels.size() != num_classes)
            throw std::invalid_argument("save_dataset: scene " + scene.id + " carries " +
                                        std::to_string(scene.labels.size()) +
                                        " label flags, expected " +
                                        std::to_string(num_classes));
        save_tensor_file((fs::path(dir) / "images" / (scene.id + ".tensor")).string(),
                         scene.image);
        write_pgm((fs::path(dir) / "ground_truth" / (scene.id + ".pgm")).string(),
                  label_to_pgm(scene.ground_truth));
        labels << scene.id;
        for (std::uint8_t flag : scene.labels) labels << ' ' << static_cast<int>(flag);
        labels << "\n";
        for (const ScoredBox& b : scene.boxes)
            boxes << b.image_id << ' ' << b.top << ' ' << b.left << ' ' << b.height << ' '
                  << b.width << ' ' << format_score(b.score) << "\n";
    }
    if (!labels || !boxes)
        throw std::runtime_error("save_dataset: failed writing metadata in " + dir);
}

std::vector<SyntheticScene> load_dataset(const std::string& dir) {
    namespace fs = std::filesystem;
    std::ifstream labels((fs::path(dir) / "labels.txt").string());
    if (!labels) throw std::runtime_error("load_dataset: cannot open labels.txt in " + dir);

    std::string header;
    std::size_t num_classes = 0;
    if (!(labels >> header >> num_classes) || header != "num_classes" || num_classes == 0)
        throw std::runtime_error("load_dataset: labels.txt must start with 'num_classes K'");

    std::vector<ScoredBox> all_boxes;
    if (fs::exists(fs::path(dir) / "boxes.txt"))
        all_boxes = read_boxes((fs::path(dir) / "boxes.txt").string());

    std::vector<SyntheticScene> dataset;
    std::string id;
    while (labels >> id) {
        SyntheticScene scene;
        scene.id = id;
        scene.labels.resize(num_classes);
        for (std::size_t c = 0; c < num_classes; ++c) {
            int flag = 0;
            if (!(labels >> flag) || (flag != 0 && flag != 1))
                throw std::runtime_error("load_dataset: bad label flags for scene " + id);
            scene.labels[c] = static_cast<std::uint8_t>(flag);
        }
        scene.image =
            load_tensor_file((fs::path(dir) / "images" / (id + ".tensor")).string());
        scene.ground_truth = label_from_pgm(
            read_pgm((fs::path(dir) / "ground_truth" / (id + ".pgm")).string()), num_classes);
        scene.boxes = boxes_for_image(all_boxes, id);
        dataset.push_back(std::move(scene));
    }
    if (dataset.empty()) throw std::runtime_error("load_dataset: labels.txt lists no scenes");
    return dataset;
}

} // namespace pgnn
