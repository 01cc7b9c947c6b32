#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "ptbn/tensor.hpp"

namespace ptbn {

/// Where a batch-norm layer takes its normalization statistics from.
enum class NormMode {
    Train,       // batch statistics, gradients through them, EMA updated
    EvalEMA,     // running averages accumulated in training ("train BN")
    EvalBatch,   // statistics of the current prediction batch
    EvalFrozen,  // statistics captured once by freeze_stats
};

std::string_view to_string(NormMode mode);
NormMode parse_norm_mode(std::string_view s);

enum class NormType { Batch, Instance, Layer, Group, None };

std::string_view to_string(NormType type);
NormType parse_norm_type(std::string_view s);

struct NormKind {
    NormType type = NormType::Batch;
    std::size_t groups = 2;               // GroupNorm only
    bool weight_standardization = false;  // GroupNorm only

    static NormKind batch() { return {}; }
    static NormKind none() { return {NormType::None, 0, false}; }
    static NormKind instance() { return {NormType::Instance, 0, false}; }
    static NormKind layer() { return {NormType::Layer, 0, false}; }
    static NormKind group(std::size_t groups = 2, bool ws = true) { return {NormType::Group, groups, ws}; }

    /// Throws ShapeError when `channels` is incompatible with the kind.
    void validate(std::size_t channels) const;

    bool operator==(const NormKind&) const = default;
};

struct ChannelStats {
    std::vector<Scalar> mean;
    std::vector<Scalar> var;
};

/// Per-channel mean and biased variance pooled over batch and spatial axes.
ChannelStats batch_stats(const Tensor& x);

/// Parameters and running statistics of one normalization layer.
struct NormState {
    Tensor gamma;  // [C]
    Tensor beta;   // [C]
    std::vector<Scalar> ema_mean;
    std::vector<Scalar> ema_var;
    Scalar eps = 1e-3;
    Scalar momentum = 0.99;
    NormMode mode = NormMode::Train;
    std::optional<ChannelStats> frozen;

    /// gamma = 1, beta = 0, running mean 0, running variance 1.
    static NormState init(std::size_t channels, Scalar eps, Scalar momentum);

    std::size_t channels() const { return ema_mean.size(); }
    void validate() const;
};

/// Per-call overrides for a normalization forward pass.
struct NormCall {
    std::optional<NormMode> mode;  // replaces state.mode for this call
    std::optional<Scalar> eps;     // prediction-time epsilon; checkpoint value untouched
    /// Receives the batch statistics used (Train / EvalBatch only).
    ChannelStats* stats_out = nullptr;
};

/// Batch normalization with explicit (possibly tape-tracked) affine parameters.
/// Does not mutate `state`; Train-mode callers apply update_ema afterwards.
Tensor bn_forward(const Tensor& x, const NormState& state, const Tensor& gamma, const Tensor& beta,
                  const NormCall& call = {});

/// Convenience form using the state's own gamma/beta. In Train mode the EMA
/// is updated in place.
Tensor bn_forward(const Tensor& x, NormState& state);

/// ema <- momentum * ema + (1 - momentum) * batch, for mean and variance.
void update_ema(NormState& state, const ChannelStats& batch);

/// Instance, layer or group normalization followed by the per-channel affine.
/// Statistics are per example, so there is no train/eval asymmetry.
Tensor alt_norm_forward(const Tensor& x, const NormKind& kind, const Tensor& gamma, const Tensor& beta,
                        Scalar eps);

/// Standardizes each output filter of w[F, ...] to zero mean and unit
/// (biased) variance over its fan-in. Differentiable.
Tensor weight_standardize(const Tensor& w, Scalar eps = 1e-10);

}  // namespace ptbn
