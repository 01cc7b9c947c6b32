#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ptbn/tensor.hpp"

namespace ptbn {

enum class Modality { Tabular, Image };

std::string_view to_string(Modality m);

/// Provenance of a shifted split.
struct SplitInfo {
    std::string kind = "identity";
    double severity = 0.0;
    std::uint64_t seed = 0;
};

struct Dataset {
    Tensor features;  // [N, F] or [N, C, H, W]
    std::vector<int> labels;
    std::size_t num_classes = 0;
    Modality modality = Modality::Tabular;
    SplitInfo split;

    std::size_t size() const { return labels.size(); }
    /// Per-example input shape (features without the batch axis).
    Shape input_shape() const;
    Dataset subset(std::span<const std::size_t> index) const;
    Dataset slice(std::size_t begin, std::size_t end) const;
    /// Throws ShapeError if labels/features disagree or a label is out of range.
    void validate() const;
};

struct DataSplits {
    Dataset train;
    Dataset val;
    Dataset test;
};

/// Gaussian-mixture tabular task.
///
/// x = class_mean[y] + loadings * z + noise * e with z, e standard normal.
/// The shared low-rank nuisance term makes features strongly correlated, so a
/// classifier has to learn contrasts that cancel it.
struct TabularSpec {
    std::size_t num_classes = 10;
    std::size_t num_features = 16;
    std::size_t latent_factors = 4;
    double class_separation = 1.0;
    double nuisance_scale = 2.0;
    double noise = 0.5;
    std::size_t n_train = 8000;
    std::size_t n_val = 1000;
    std::size_t n_test = 4000;
    std::uint64_t seed = 1;
};

DataSplits make_tabular(const TabularSpec& spec);

/// Procedurally drawn images in [-1, 1]: each class is a shape or texture
/// pattern with random colors, placement and size.
struct ImageSpec {
    std::size_t num_classes = 10;  // at most 10
    std::size_t size = 16;
    std::size_t channels = 3;
    double pixel_noise = 0.05;
    std::size_t n_train = 4000;
    std::size_t n_val = 500;
    std::size_t n_test = 2000;
    std::uint64_t seed = 1;
};

DataSplits make_images(const ImageSpec& spec);

/// Reads "f1,...,fD,label" rows. For images, `image_shape` = {C, H, W} and D
/// must equal C*H*W. Blank lines and lines starting with '#' are skipped.
Dataset load_csv(const std::filesystem::path& path, std::size_t num_classes,
                 std::optional<Shape> image_shape = std::nullopt);

/// Per-feature empirical marginals of a tabular training set.
class FeatureMarginals {
   public:
    explicit FeatureMarginals(const Dataset& train);
    std::size_t num_features() const { return columns_.size(); }
    std::span<const Scalar> column(std::size_t j) const { return columns_.at(j); }

   private:
    std::vector<std::vector<Scalar>> columns_;
};

}  // namespace ptbn
