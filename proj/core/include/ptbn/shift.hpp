#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ptbn/data.hpp"
#include "ptbn/tensor.hpp"

namespace ptbn {

enum class ShiftKind {
    Identity,
    GaussianNoise,
    ImpulseNoise,
    GaussianBlur,
    ContrastScale,
    Pixelate,
    FeatureRandomize,
};

std::string_view to_string(ShiftKind k);
ShiftKind parse_shift_kind(std::string_view s);
bool is_image_kind(ShiftKind k);

/// Image kinds take an integer severity 1..5. FeatureRandomize takes the
/// replacement probability p in (0, 1]. Identity ignores severity.
struct ShiftSpec {
    ShiftKind kind = ShiftKind::Identity;
    double severity = 0.0;
    std::uint64_t seed = 0;

    void validate() const;
};

/// Corruption parameter for an image kind at severity 1..5:
///   GaussianNoise  noise std as a fraction of the [-1, 1] range (std = 2 * value)
///   ImpulseNoise   fraction of entries set to -1 or +1
///   GaussianBlur   kernel std in pixels
///   ContrastScale  factor applied to deviations from the per-image mean
///   Pixelate       side of the downsampled grid relative to the input
double severity_parameter(ShiftKind kind, int severity);

/// Severity grid used by FeatureRandomize sweeps.
inline constexpr double kRandomizeGrid[] = {0.05, 0.25, 0.5, 0.75, 0.95};

/// Applies the shift to a batch of inputs. Image outputs are clamped to
/// [-1, 1]. FeatureRandomize needs the training marginals.
Tensor apply_shift(const Tensor& x, const ShiftSpec& spec, const FeatureMarginals* marginals = nullptr);

/// Shifted copy of `data` with split metadata attached; labels are untouched.
Dataset build_split(const Dataset& data, const ShiftSpec& spec, const FeatureMarginals* marginals = nullptr);

struct MixedBatch {
    Dataset batch;
    std::vector<std::size_t> source;       // split index of every row
    std::vector<std::size_t> composition;  // rows drawn from each split
};

/// Draws `t` rows; each row picks a split uniformly, then an example from it.
MixedBatch build_mixed_batch(std::span<const Dataset> splits, std::size_t t, std::uint64_t seed);

/// Combines shifted versions of one dataset row by row: example i is taken
/// from a uniformly chosen split. All splits must share labels.
Dataset mix_splits(std::span<const Dataset> splits, std::uint64_t seed);

}  // namespace ptbn
