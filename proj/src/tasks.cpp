#include "clgeo/tasks.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <numbers>
#include <random>

#include "clgeo/cl_algos.hpp"
#include "clgeo/csv.hpp"
#include "clgeo/error.hpp"

namespace clgeo {

void TaskSequence::validate() const {
    if (tasks.empty()) throw Error(ErrorKind::invalid_argument, "task sequence is empty");
    for (std::size_t i = 0; i < tasks.size(); ++i) {
        const auto& t = tasks[i];
        for (const Dataset* d : {&t.train, &t.test}) {
            if (d->inputs.cols() != input_dim)
                throw Error(ErrorKind::dimension, "task " + std::to_string(i + 1) + " has input dim " +
                                                      std::to_string(d->inputs.cols()) + ", expected " +
                                                      std::to_string(input_dim));
            if (d->task_id != static_cast<int>(i) + 1)
                throw Error(ErrorKind::invalid_argument, "task ids must be consecutive from 1");
            d->validate(num_classes);
        }
    }
}

ImageSet ImageSet::subset(const std::vector<Index>& idx) const {
    ImageSet out;
    out.rows = rows;
    out.cols = cols;
    out.pixels.resize(static_cast<Index>(idx.size()), pixels.cols());
    out.labels.reserve(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) {
        out.pixels.row(static_cast<Index>(i)) = pixels.row(idx[i]);
        out.labels.push_back(labels[static_cast<std::size_t>(idx[i])]);
    }
    return out;
}

namespace {

std::uint32_t read_be32(const std::string& b, std::size_t off) {
    if (off + 4 > b.size()) throw Error(ErrorKind::io, "idx: truncated header at byte " + std::to_string(off));
    return (std::uint32_t(static_cast<unsigned char>(b[off])) << 24) |
           (std::uint32_t(static_cast<unsigned char>(b[off + 1])) << 16) |
           (std::uint32_t(static_cast<unsigned char>(b[off + 2])) << 8) |
           std::uint32_t(static_cast<unsigned char>(b[off + 3]));
}

void write_be32(std::string& b, std::uint32_t v) {
    b += static_cast<char>((v >> 24) & 0xff);
    b += static_cast<char>((v >> 16) & 0xff);
    b += static_cast<char>((v >> 8) & 0xff);
    b += static_cast<char>(v & 0xff);
}

constexpr std::uint32_t idx_images_magic = 0x00000803;
constexpr std::uint32_t idx_labels_magic = 0x00000801;

}  // namespace

ImageSet parse_idx_images(const std::string& bytes) {
    const auto magic = read_be32(bytes, 0);
    if (magic != idx_images_magic)
        throw Error(ErrorKind::io, "idx images: bad magic " + std::to_string(magic) + " at byte 0");
    const auto n = read_be32(bytes, 4), r = read_be32(bytes, 8), c = read_be32(bytes, 12);
    if (r == 0 || c == 0) throw Error(ErrorKind::io, "idx images: zero image dimension at byte 8");
    const std::size_t need = 16 + std::size_t(n) * r * c;
    if (bytes.size() < need)
        throw Error(ErrorKind::io, "idx images: payload ends at byte " + std::to_string(bytes.size()) +
                                       ", header requires " + std::to_string(need));
    ImageSet s;
    s.rows = static_cast<int>(r);
    s.cols = static_cast<int>(c);
    s.pixels.resize(n, Index(r) * c);
    s.labels.assign(n, 0);
    const auto* p = reinterpret_cast<const unsigned char*>(bytes.data()) + 16;
    for (Index i = 0; i < Index(n); ++i)
        for (Index j = 0; j < Index(r) * c; ++j) s.pixels(i, j) = p[i * r * c + j] / 255.0;
    return s;
}

std::vector<int> parse_idx_labels(const std::string& bytes) {
    const auto magic = read_be32(bytes, 0);
    if (magic != idx_labels_magic)
        throw Error(ErrorKind::io, "idx labels: bad magic " + std::to_string(magic) + " at byte 0");
    const auto n = read_be32(bytes, 4);
    if (bytes.size() < 8 + std::size_t(n))
        throw Error(ErrorKind::io, "idx labels: payload ends at byte " + std::to_string(bytes.size()) +
                                       ", header requires " + std::to_string(8 + std::size_t(n)));
    std::vector<int> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = static_cast<unsigned char>(bytes[8 + i]);
    return out;
}

ImageSet read_idx(const std::string& images_path, const std::string& labels_path) {
    ImageSet s = parse_idx_images(read_file(images_path));
    s.labels = parse_idx_labels(read_file(labels_path));
    if (static_cast<Index>(s.labels.size()) != s.size())
        throw Error(ErrorKind::io, images_path + " holds " + std::to_string(s.size()) + " images but " +
                                       labels_path + " holds " + std::to_string(s.labels.size()) + " labels");
    return s;
}

std::string encode_idx_images(const ImageSet& set) {
    std::string b;
    write_be32(b, idx_images_magic);
    write_be32(b, static_cast<std::uint32_t>(set.size()));
    write_be32(b, static_cast<std::uint32_t>(set.rows));
    write_be32(b, static_cast<std::uint32_t>(set.cols));
    for (Index i = 0; i < set.size(); ++i)
        for (Index j = 0; j < set.pixels.cols(); ++j)
            b += static_cast<char>(static_cast<unsigned char>(std::lround(std::clamp(set.pixels(i, j), 0.0, 1.0) * 255.0)));
    return b;
}

std::string encode_idx_labels(const std::vector<int>& labels) {
    std::string b;
    write_be32(b, idx_labels_magic);
    write_be32(b, static_cast<std::uint32_t>(labels.size()));
    for (int l : labels) b += static_cast<char>(static_cast<unsigned char>(l));
    return b;
}

namespace {

// Segment endpoints in a unit box, y pointing down.
struct Seg {
    double x0, y0, x1, y1;
};

constexpr std::array<Seg, 7> segments{{
    {0.32, 0.20, 0.68, 0.20},  // top
    {0.68, 0.20, 0.68, 0.50},  // upper right
    {0.68, 0.50, 0.68, 0.80},  // lower right
    {0.32, 0.80, 0.68, 0.80},  // bottom
    {0.32, 0.50, 0.32, 0.80},  // lower left
    {0.32, 0.20, 0.32, 0.50},  // upper left
    {0.32, 0.50, 0.68, 0.50},  // middle
}};

// Bit i set when segment i is lit.
constexpr std::array<unsigned, 10> digit_segments{0x3f, 0x06, 0x5b, 0x4f, 0x66, 0x6d, 0x7d, 0x07, 0x7f, 0x6f};

double segment_distance(double px, double py, const Seg& s) {
    const double dx = s.x1 - s.x0, dy = s.y1 - s.y0;
    const double len2 = dx * dx + dy * dy;
    double u = len2 > 0.0 ? ((px - s.x0) * dx + (py - s.y0) * dy) / len2 : 0.0;
    u = std::clamp(u, 0.0, 1.0);
    const double ex = s.x0 + u * dx - px, ey = s.y0 + u * dy - py;
    return std::sqrt(ex * ex + ey * ey);
}

}  // namespace

ImageSet synthetic_digits(Index n, std::uint64_t seed, int side) {
    if (n < 0 || side < 8) throw Error(ErrorKind::invalid_argument, "synthetic_digits: bad size");
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    std::normal_distribution<double> normal;
    auto range = [&](double a, double b) { return a + (b - a) * unif(rng); };

    ImageSet s;
    s.rows = side;
    s.cols = side;
    s.pixels.resize(n, Index(side) * side);
    s.labels.resize(static_cast<std::size_t>(n));
    std::vector<Seg> lit;
    for (Index i = 0; i < n; ++i) {
        const int label = static_cast<int>(i % 10);
        s.labels[static_cast<std::size_t>(i)] = label;
        const double scale = range(0.85, 1.15), shear = range(-0.15, 0.15);
        const double tx = range(-0.06, 0.06), ty = range(-0.06, 0.06), width = range(0.035, 0.06);
        auto warp = [&](double x, double y) {
            const double cx = x - 0.5, cy = y - 0.5;
            return std::pair{0.5 + scale * (cx + shear * cy) + tx, 0.5 + scale * cy + ty};
        };
        lit.clear();
        for (int k = 0; k < 7; ++k) {
            if (!((digit_segments[static_cast<std::size_t>(label)] >> k) & 1u)) continue;
            const Seg& g = segments[static_cast<std::size_t>(k)];
            auto [x0, y0] = warp(g.x0 + range(-0.03, 0.03), g.y0 + range(-0.03, 0.03));
            auto [x1, y1] = warp(g.x1 + range(-0.03, 0.03), g.y1 + range(-0.03, 0.03));
            lit.push_back({x0, y0, x1, y1});
        }
        for (int r = 0; r < side; ++r)
            for (int c = 0; c < side; ++c) {
                const double px = (c + 0.5) / side, py = (r + 0.5) / side;
                double d = 1e9;
                for (const auto& g : lit) d = std::min(d, segment_distance(px, py, g));
                const double ink = std::clamp((width - d) * side + 0.5, 0.0, 1.0);
                s.pixels(i, Index(r) * side + c) = std::clamp(ink + 0.05 * normal(rng), 0.0, 1.0);
            }
    }
    return s;
}

namespace {

double pixel_or_zero(const Eigen::VectorXd& img, int rows, int cols, int r, int c) {
    if (r < 0 || c < 0 || r >= rows || c >= cols) return 0.0;
    return img(Index(r) * cols + c);
}

double bilinear(const Eigen::VectorXd& img, int rows, int cols, double y, double x) {
    const double fy = std::floor(y), fx = std::floor(x);
    const int r = static_cast<int>(fy), c = static_cast<int>(fx);
    const double ay = y - fy, ax = x - fx;
    return (1 - ay) * ((1 - ax) * pixel_or_zero(img, rows, cols, r, c) + ax * pixel_or_zero(img, rows, cols, r, c + 1)) +
           ay * ((1 - ax) * pixel_or_zero(img, rows, cols, r + 1, c) + ax * pixel_or_zero(img, rows, cols, r + 1, c + 1));
}

}  // namespace

Eigen::VectorXd rotate_image(const Eigen::VectorXd& img, int rows, int cols, double angle_deg) {
    if (img.size() != Index(rows) * cols) throw Error(ErrorKind::dimension, "rotate_image: size mismatch");
    if (angle_deg == 0.0) return img;
    const double th = angle_deg * std::numbers::pi / 180.0;
    const double cs = std::cos(th), sn = std::sin(th);
    const double cy = (rows - 1) / 2.0, cx = (cols - 1) / 2.0;
    Eigen::VectorXd out(img.size());
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) {
            // Inverse map of a counter-clockwise rotation (image y points down).
            const double dx = c - cx, dy = r - cy;
            const double sx = cs * dx - sn * dy + cx;
            const double sy = sn * dx + cs * dy + cy;
            out(Index(r) * cols + c) = bilinear(img, rows, cols, sy, sx);
        }
    return out;
}

Eigen::VectorXd downscale_image(const Eigen::VectorXd& img, int rows, int cols, int factor) {
    if (img.size() != Index(rows) * cols) throw Error(ErrorKind::dimension, "downscale_image: size mismatch");
    if (factor < 1 || rows % factor || cols % factor)
        throw Error(ErrorKind::invalid_argument, "downscale_image: factor must divide the image size");
    if (factor == 1) return img;
    const int ro = rows / factor, co = cols / factor;
    Eigen::VectorXd out(Index(ro) * co);
    for (int r = 0; r < ro; ++r)
        for (int c = 0; c < co; ++c)
            out(Index(r) * co + c) =
                bilinear(img, rows, cols, (r + 0.5) * factor - 0.5, (c + 0.5) * factor - 0.5);
    return out;
}

TaskSequence toy_geometric(std::uint64_t seed, int n_per_class) {
    if (n_per_class < 10) throw Error(ErrorKind::invalid_argument, "toy_geometric: n_per_class must be >= 10");
    constexpr std::array<std::array<double, 2>, 3> centers{{{0.5, 0.5}, {0.2, 0.2}, {0.8, 0.8}}};
    constexpr double half_gap = 0.08, sd = 0.025;
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal;

    TaskSequence seq;
    seq.input_dim = 2;
    seq.num_classes = 2;
    for (int t = 0; t < 3; ++t) {
        TaskData td;
        for (Dataset* d : {&td.train, &td.test}) {
            d->task_id = t + 1;
            d->inputs.resize(2 * n_per_class, 2);
            d->labels.resize(static_cast<std::size_t>(2 * n_per_class));
            for (int i = 0; i < 2 * n_per_class; ++i) {
                const int label = i % 2;
                const double off = label == 0 ? -half_gap : half_gap;
                d->inputs(i, 0) = centers[static_cast<std::size_t>(t)][0] + off + sd * normal(rng);
                d->inputs(i, 1) = centers[static_cast<std::size_t>(t)][1] - off + sd * normal(rng);
                d->labels[static_cast<std::size_t>(i)] = label;
            }
        }
        seq.tasks.push_back(std::move(td));
    }
    return seq;
}

DigitSource resolve_digit_source(DigitSource src) {
    const char* root = std::getenv(data_root_env);
    const std::filesystem::path base = root ? root : "";
    auto fill = [&](std::string& p, const char* name) {
        if (p.empty() && root) p = (base / name).string();
    };
    fill(src.train_images, "train-images-idx3-ubyte");
    fill(src.train_labels, "train-labels-idx1-ubyte");
    fill(src.test_images, "t10k-images-idx3-ubyte");
    fill(src.test_labels, "t10k-labels-idx1-ubyte");
    return src;
}

DigitPair load_digits(const DigitSource& src_in, Index synthetic_train, Index synthetic_test, std::uint64_t seed) {
    DigitPair out;
    auto synth = [&] {
        out.train = synthetic_digits(synthetic_train, seed);
        out.test = synthetic_digits(synthetic_test, seed ^ 0x9e3779b97f4a7c15ULL);
        out.synthetic = true;
        return out;
    };
    if (src_in.kind == "synthetic") return synth();
    if (src_in.kind != "idx") throw Error(ErrorKind::config, "dataset.source must be 'idx' or 'synthetic'");
    const DigitSource src = resolve_digit_source(src_in);
    namespace fs = std::filesystem;
    const bool present = !src.train_images.empty() && fs::exists(src.train_images) && fs::exists(src.train_labels) &&
                         fs::exists(src.test_images) && fs::exists(src.test_labels);
    if (!present) {
        if (src.allow_synthetic_fallback) return synth();
        throw Error(ErrorKind::io, "digit IDX files not found (set " + std::string(data_root_env) +
                                       " or dataset paths, or allow the synthetic fallback)");
    }
    out.train = read_idx(src.train_images, src.train_labels);
    out.test = read_idx(src.test_images, src.test_labels);
    return out;
}

TaskSequence rotated_digits(const DigitPair& digits, const RotatedConfig& cfg) {
    if (cfg.angles.empty()) throw Error(ErrorKind::config, "rotated_digits: no angles");
    const ImageSet train = digits.train.subset(sample_subset(digits.train.size(), cfg.n_train, cfg.seed));
    const ImageSet test = digits.test.subset(sample_subset(digits.test.size(), cfg.n_test, cfg.seed + 1));
    const int rows = train.rows, cols = train.cols;
    if (rows % cfg.downscale || cols % cfg.downscale)
        throw Error(ErrorKind::config, "rotated_digits: downscale must divide the image size");
    const int d = (rows / cfg.downscale) * (cols / cfg.downscale);

    TaskSequence seq;
    seq.input_dim = d;
    seq.num_classes = 10;
    seq.synthetic = digits.synthetic;
    for (std::size_t t = 0; t < cfg.angles.size(); ++t) {
        TaskData td;
        for (auto [src, dst] : {std::pair{&train, &td.train}, std::pair{&test, &td.test}}) {
            dst->task_id = static_cast<int>(t) + 1;
            dst->labels = src->labels;
            dst->inputs.resize(src->size(), d);
            for (Index i = 0; i < src->size(); ++i) {
                const Eigen::VectorXd img = src->pixels.row(i).transpose();
                dst->inputs.row(i) =
                    downscale_image(rotate_image(img, rows, cols, cfg.angles[t]), rows, cols, cfg.downscale)
                        .transpose();
            }
        }
        seq.tasks.push_back(std::move(td));
    }
    return seq;
}

TaskSequence rotated_digits(const RotatedConfig& cfg) {
    return rotated_digits(load_digits(cfg.source, cfg.n_train, cfg.n_test, cfg.seed), cfg);
}

TaskSequence split_by_class(const DigitPair& digits, int classes_per_task, int downscale) {
    int num_classes = 0;
    for (int l : digits.train.labels) num_classes = std::max(num_classes, l + 1);
    if (classes_per_task < 1 || num_classes % classes_per_task)
        throw Error(ErrorKind::config, "split_by_class: " + std::to_string(num_classes) +
                                           " classes cannot be split into blocks of " +
                                           std::to_string(classes_per_task));
    const int rows = digits.train.rows, cols = digits.train.cols;
    const int d = (rows / downscale) * (cols / downscale);
    TaskSequence seq;
    seq.input_dim = d;
    seq.num_classes = classes_per_task;
    seq.synthetic = digits.synthetic;
    for (int t = 0; t < num_classes / classes_per_task; ++t) {
        const int lo = t * classes_per_task;
        TaskData td;
        for (auto [src, dst] : {std::pair{&digits.train, &td.train}, std::pair{&digits.test, &td.test}}) {
            dst->task_id = t + 1;
            std::vector<Index> rows_sel;
            for (Index i = 0; i < src->size(); ++i) {
                const int l = src->labels[static_cast<std::size_t>(i)];
                if (l >= lo && l < lo + classes_per_task) rows_sel.push_back(i);
            }
            dst->inputs.resize(static_cast<Index>(rows_sel.size()), d);
            for (std::size_t k = 0; k < rows_sel.size(); ++k) {
                const Eigen::VectorXd img = src->pixels.row(rows_sel[k]).transpose();
                dst->inputs.row(static_cast<Index>(k)) = downscale_image(img, rows, cols, downscale).transpose();
                dst->labels.push_back(src->labels[static_cast<std::size_t>(rows_sel[k])] - lo);
            }
        }
        seq.tasks.push_back(std::move(td));
    }
    return seq;
}

void export_sequence_csv(const std::string& path, const TaskSequence& seq) {
    std::vector<std::string> header{"task_id", "split", "label"};
    for (int j = 0; j < seq.input_dim; ++j) header.push_back("p" + std::to_string(j));
    CsvTable t(header);
    for (const auto& td : seq.tasks)
        for (auto [name, d] : {std::pair{"train", &td.train}, std::pair{"test", &td.test}})
            for (Index i = 0; i < d->size(); ++i) {
                std::vector<std::string> row{std::to_string(d->task_id), name,
                                             std::to_string(d->labels[static_cast<std::size_t>(i)])};
                for (Index j = 0; j < d->inputs.cols(); ++j) row.push_back(format_double(d->inputs(i, j)));
                t.add_row(std::move(row));
            }
    t.write(path);
}

}  // namespace clgeo
