#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "clgeo/mlp.hpp"

namespace clgeo {

struct TaskData {
    Dataset train;
    Dataset test;
};

struct TaskSequence {
    std::vector<TaskData> tasks;
    int input_dim = 0;
    int num_classes = 0;  // output dim shared by every task
    bool synthetic = false;

    int size() const { return static_cast<int>(tasks.size()); }
    void validate() const;
};

// Grayscale images, one per row, row-major pixels scaled to [0, 1].
struct ImageSet {
    int rows = 0;
    int cols = 0;
    Eigen::MatrixXd pixels;
    std::vector<int> labels;

    Index size() const { return pixels.rows(); }
    ImageSet subset(const std::vector<Index>& idx) const;
};

// IDX files: big-endian magic (0x00000803 images, 0x00000801 labels), dims,
// unsigned-byte payload.
ImageSet parse_idx_images(const std::string& bytes);
std::vector<int> parse_idx_labels(const std::string& bytes);
ImageSet read_idx(const std::string& images_path, const std::string& labels_path);
std::string encode_idx_images(const ImageSet& set);
std::string encode_idx_labels(const std::vector<int>& labels);

// Seeded seven-segment style digits with per-sample jitter and noise.
ImageSet synthetic_digits(Index n, std::uint64_t seed, int side = 28);

// Bilinear rotation about the image centre with zero padding; angle in
// degrees, counter-clockwise. angle == 0 copies the input.
Eigen::VectorXd rotate_image(const Eigen::VectorXd& img, int rows, int cols, double angle_deg);
// Bilinear resampling onto a grid `factor` times coarser.
Eigen::VectorXd downscale_image(const Eigen::VectorXd& img, int rows, int cols, int factor);

TaskSequence toy_geometric(std::uint64_t seed, int n_per_class);

inline constexpr const char* data_root_env = "CLGEO_DATA_ROOT";

struct DigitSource {
    std::string kind = "idx";  // idx | synthetic
    std::string train_images, train_labels, test_images, test_labels;
    bool allow_synthetic_fallback = false;

    static DigitSource synthetic() {
        DigitSource s;
        s.kind = "synthetic";
        return s;
    }
};

// Resolves missing paths against $CLGEO_DATA_ROOT with the standard MNIST
// file names.
DigitSource resolve_digit_source(DigitSource src);

struct DigitPair {
    ImageSet train;
    ImageSet test;
    bool synthetic = false;
};

DigitPair load_digits(const DigitSource& src, Index synthetic_train, Index synthetic_test, std::uint64_t seed);

struct RotatedConfig {
    DigitSource source;
    std::vector<double> angles{-45.0, -22.5, 0.0, 22.5, 45.0};
    int downscale = 2;
    Index n_train = 2000;
    Index n_test = 500;
    std::uint64_t seed = 0;
};

TaskSequence rotated_digits(const RotatedConfig& cfg);
TaskSequence rotated_digits(const DigitPair& digits, const RotatedConfig& cfg);

// Consecutive class blocks; labels remapped to [0, classes_per_task).
TaskSequence split_by_class(const DigitPair& digits, int classes_per_task, int downscale = 1);

// One row per sample: task_id,split,label,p0..p{d-1}.
void export_sequence_csv(const std::string& path, const TaskSequence& seq);

}  // namespace clgeo
