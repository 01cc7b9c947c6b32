#include "ptbn/normalization.hpp"

#include <cmath>

#include "ptbn/error.hpp"

namespace ptbn {

std::string_view to_string(NormMode mode) {
    switch (mode) {
        case NormMode::Train: return "train";
        case NormMode::EvalEMA: return "ema";
        case NormMode::EvalBatch: return "batch";
        case NormMode::EvalFrozen: return "frozen";
    }
    return "?";
}

NormMode parse_norm_mode(std::string_view s) {
    if (s == "train") return NormMode::Train;
    if (s == "ema" || s == "eval_ema") return NormMode::EvalEMA;
    if (s == "batch" || s == "eval_batch") return NormMode::EvalBatch;
    if (s == "frozen" || s == "eval_frozen") return NormMode::EvalFrozen;
    throw ConfigError("unknown normalization mode '" + std::string(s) + "'");
}

std::string_view to_string(NormType type) {
    switch (type) {
        case NormType::Batch: return "batch";
        case NormType::Instance: return "instance";
        case NormType::Layer: return "layer";
        case NormType::Group: return "group";
        case NormType::None: return "none";
    }
    return "?";
}

NormType parse_norm_type(std::string_view s) {
    if (s == "batch") return NormType::Batch;
    if (s == "instance") return NormType::Instance;
    if (s == "layer") return NormType::Layer;
    if (s == "group") return NormType::Group;
    if (s == "none") return NormType::None;
    throw ConfigError("unknown normalization kind '" + std::string(s) + "'");
}

void NormKind::validate(std::size_t channels) const {
    if (weight_standardization && type != NormType::Group) {
        throw ShapeError("weight standardization is only valid with group normalization");
    }
    if (type == NormType::Group) {
        if (groups == 0 || channels % groups != 0) {
            throw ShapeError("group norm: " + std::to_string(groups) + " groups do not divide " +
                             std::to_string(channels) + " channels");
        }
    }
}

ChannelStats batch_stats(const Tensor& x) {
    if (x.rank() < 2) throw ShapeError("batch_stats: need rank >= 2");
    const std::size_t N = x.dim(0), C = x.dim(1);
    const std::size_t inner = x.numel() / (N * C);
    const auto count = static_cast<Scalar>(N * inner);
    ChannelStats s{std::vector<Scalar>(C, 0.0), std::vector<Scalar>(C, 0.0)};
    const auto d = x.data();
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t i = 0; i < inner; ++i) s.mean[c] += d[(n * C + c) * inner + i];
    for (auto& m : s.mean) m /= count;
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t i = 0; i < inner; ++i) {
                const Scalar dev = d[(n * C + c) * inner + i] - s.mean[c];
                s.var[c] += dev * dev;
            }
    for (auto& v : s.var) v /= count;
    return s;
}

NormState NormState::init(std::size_t channels, Scalar eps, Scalar momentum) {
    NormState s;
    s.gamma = Tensor(Shape{channels}, 1.0);
    s.beta = Tensor(Shape{channels}, 0.0);
    s.ema_mean.assign(channels, 0.0);
    s.ema_var.assign(channels, 1.0);
    s.eps = eps;
    s.momentum = momentum;
    s.validate();
    return s;
}

void NormState::validate() const {
    const std::size_t C = ema_mean.size();
    if (C == 0 || ema_var.size() != C || gamma.numel() != C || beta.numel() != C) {
        throw ShapeError("norm state: inconsistent channel counts");
    }
    if (!(eps > 0.0)) throw ShapeError("norm state: epsilon must be positive");
    if (!(momentum > 0.0 && momentum < 1.0)) throw ShapeError("norm state: momentum must lie in (0, 1)");
    for (Scalar v : ema_var) {
        if (v < 0.0) throw ShapeError("norm state: negative running variance");
    }
    if (frozen) {
        if (frozen->mean.size() != C || frozen->var.size() != C) {
            throw ShapeError("norm state: frozen statistics have wrong channel count");
        }
        for (Scalar v : frozen->var) {
            if (v < 0.0) throw ShapeError("norm state: negative frozen variance");
        }
    }
}

namespace {

Tensor affine(const Tensor& xhat, const Tensor& gamma, const Tensor& beta) {
    return add_channel(mul_channel(xhat, gamma), beta);
}

Tensor normalize_with(const Tensor& x, const std::vector<Scalar>& mean, const std::vector<Scalar>& var,
                      Scalar eps) {
    const std::size_t C = mean.size();
    std::vector<Scalar> inv(C);
    for (std::size_t c = 0; c < C; ++c) inv[c] = 1.0 / std::sqrt(var[c] + eps);
    return mul_channel(sub_channel(x, Tensor(Shape{C}, mean)), Tensor(Shape{C}, std::move(inv)));
}

}  // namespace

Tensor bn_forward(const Tensor& x, const NormState& state, const Tensor& gamma, const Tensor& beta,
                  const NormCall& call) {
    if (x.rank() < 2 || x.dim(1) != state.channels()) {
        throw ShapeError("bn_forward: input " + shape_string(x.shape()) + " does not match " +
                         std::to_string(state.channels()) + " channels");
    }
    const NormMode mode = call.mode.value_or(state.mode);
    const Scalar eps = call.eps.value_or(state.eps);
    if (!(eps > 0.0)) throw ShapeError("bn_forward: epsilon must be positive");

    switch (mode) {
        case NormMode::Train:
        case NormMode::EvalBatch: {
            const Tensor mu = channel_mean(x);
            const Tensor centered = sub_channel(x, mu);
            const Tensor var = channel_mean(square(centered));
            const Tensor xhat = mul_channel(centered, rsqrt(add_scalar(var, eps)));
            if (call.stats_out) {
                call.stats_out->mean = mu.values();
                call.stats_out->var = var.values();
            }
            return affine(xhat, gamma, beta);
        }
        case NormMode::EvalEMA:
            return affine(normalize_with(x, state.ema_mean, state.ema_var, eps), gamma, beta);
        case NormMode::EvalFrozen:
            if (!state.frozen) throw Error("bn_forward: frozen mode requested but no statistics were frozen");
            return affine(normalize_with(x, state.frozen->mean, state.frozen->var, eps), gamma, beta);
    }
    throw Error("bn_forward: unknown mode");
}

Tensor bn_forward(const Tensor& x, NormState& state) {
    ChannelStats stats;
    NormCall call;
    call.stats_out = &stats;
    Tensor y = bn_forward(x, state, state.gamma, state.beta, call);
    if (state.mode == NormMode::Train) update_ema(state, stats);
    return y;
}

void update_ema(NormState& state, const ChannelStats& batch) {
    if (batch.mean.size() != state.channels() || batch.var.size() != state.channels()) {
        throw ShapeError("update_ema: channel mismatch");
    }
    const Scalar m = state.momentum;
    for (std::size_t c = 0; c < state.channels(); ++c) {
        state.ema_mean[c] = m * state.ema_mean[c] + (1.0 - m) * batch.mean[c];
        state.ema_var[c] = m * state.ema_var[c] + (1.0 - m) * batch.var[c];
    }
}

Tensor alt_norm_forward(const Tensor& x, const NormKind& kind, const Tensor& gamma, const Tensor& beta,
                        Scalar eps) {
    if (x.rank() < 2) throw ShapeError("alt_norm_forward: need rank >= 2");
    const std::size_t N = x.dim(0), C = x.dim(1);
    const std::size_t inner = x.numel() / (N * C);
    kind.validate(C);
    if (gamma.numel() != C || beta.numel() != C) throw ShapeError("alt_norm_forward: affine size mismatch");
    std::size_t groups = 0;
    switch (kind.type) {
        case NormType::Instance: groups = C; break;
        case NormType::Layer: groups = 1; break;
        case NormType::Group: groups = kind.groups; break;
        case NormType::Batch:
        case NormType::None:
            throw ShapeError("alt_norm_forward: kind must be instance, layer or group");
    }
    const Tensor rows = reshape(x, Shape{N * groups, (C / groups) * inner});
    const Tensor centered = sub_row(rows, row_mean(rows));
    const Tensor var = row_mean(square(centered));
    const Tensor xhat = reshape(mul_row(centered, rsqrt(add_scalar(var, eps))), x.shape());
    return affine(xhat, gamma, beta);
}

Tensor weight_standardize(const Tensor& w, Scalar eps) {
    if (w.rank() < 2) throw ShapeError("weight_standardize: need rank >= 2");
    const std::size_t F = w.dim(0);
    const std::size_t fan_in = w.numel() / F;
    if (fan_in < 2) throw ShapeError("weight_standardize: fan-in must be at least 2");
    const Tensor rows = reshape(w, Shape{F, fan_in});
    const Tensor centered = sub_row(rows, row_mean(rows));
    const Tensor var = row_mean(square(centered));
    return reshape(mul_row(centered, rsqrt(add_scalar(var, eps))), w.shape());
}

}  // namespace ptbn
