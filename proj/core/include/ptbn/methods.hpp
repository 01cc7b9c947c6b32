#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>

#include "ptbn/data.hpp"
#include "ptbn/metrics.hpp"
#include "ptbn/model.hpp"

namespace ptbn {

/// Which batch-norm layers follow the method's mode.
enum class BnScope { All, LastOnly };

std::string_view to_string(BnScope s);
BnScope parse_bn_scope(std::string_view s);

/// One evaluable method: which models, how their norms behave at prediction
/// time, and optional post-hoc temperature and epsilon.
struct MethodSpec {
    std::string name;
    /// 1 for a single model, M for a deep ensemble of M members.
    std::size_t ensemble = 1;
    NormMode bn_mode = NormMode::EvalEMA;
    BnScope bn_scope = BnScope::All;
    /// Select checkpoints trained with this norm / architecture instead of
    /// the experiment default.
    std::optional<NormKind> norm;
    std::optional<Architecture> architecture;
    bool fit_temperature = false;
    std::optional<Scalar> eps;
    /// Required for EvalFrozen: statistics come from the first prediction
    /// batch of each split.
    std::optional<FreezePolicy> freeze_policy;

    void validate() const;
    PredictOptions predict_options() const;
};

/// Mean member probabilities; a temperature other than 1 is applied to the
/// log of that mean (for one member this equals softmax(logits / T)).
Tensor method_predict(std::span<const Network* const> members, const Tensor& x, const PredictOptions& opts,
                      double temperature = 1.0);

/// Fits the method's temperature on unshifted validation data, predicted in
/// batches of `batch_size` under the method's own normalization settings.
TemperatureFit fit_method_temperature(const MethodSpec& method, std::span<const Network* const> members,
                                      const Dataset& val, std::size_t batch_size);

struct EvalOptions {
    std::size_t ece_bins = 10;
    double temperature = 1.0;
    std::uint64_t seed = 0;
};

/// Runs the split in consecutive batches of `batch_size` (the final partial
/// batch is kept) and scores all predictions together.
EvalRecord evaluate_method(const MethodSpec& method, std::span<const Network* const> members, const Dataset& split,
                           std::size_t batch_size, const EvalOptions& opts = {});

/// Per-example probabilities in split order, as used by evaluate_method.
Tensor method_probabilities(const MethodSpec& method, std::span<const Network* const> members, const Dataset& split,
                            std::size_t batch_size, double temperature = 1.0);

}  // namespace ptbn
