#include "ptbn/methods.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#include "ptbn/error.hpp"

namespace ptbn {

std::string_view to_string(BnScope s) { return s == BnScope::All ? "all" : "last_only"; }

BnScope parse_bn_scope(std::string_view s) {
    if (s == "all") return BnScope::All;
    if (s == "last_only") return BnScope::LastOnly;
    throw ConfigError("unknown bn_scope '" + std::string(s) + "'");
}

void MethodSpec::validate() const {
    if (name.empty()) throw ConfigError("method needs a name");
    if (ensemble == 0) throw ConfigError("method '" + name + "': ensemble size must be positive");
    if (bn_mode == NormMode::Train) throw ConfigError("method '" + name + "': train is not a prediction mode");
    if (bn_mode == NormMode::EvalFrozen && !freeze_policy) {
        throw ConfigError("method '" + name + "': frozen mode needs a reference-batch policy");
    }
    if (eps && !(*eps > 0.0)) throw ConfigError("method '" + name + "': eps must be positive");
}

PredictOptions MethodSpec::predict_options() const {
    PredictOptions o;
    o.mode = bn_mode;
    o.last_norm_only = bn_scope == BnScope::LastOnly;
    o.eps = eps;
    return o;
}

Tensor method_predict(std::span<const Network* const> members, const Tensor& x, const PredictOptions& opts,
                      double temperature) {
    Tensor p = ensemble_predict(members, x, opts);
    if (temperature == 1.0) return p;
    if (!(temperature > 0.0)) throw ShapeError("temperature must be positive");
    std::vector<Scalar> z(p.data().begin(), p.data().end());
    for (auto& v : z) v = std::log(std::max(v, 1e-300)) / temperature;
    return softmax(Tensor(p.shape(), std::move(z)));
}

namespace {

void check_members(const MethodSpec& method, std::span<const Network* const> members) {
    method.validate();
    if (members.size() != method.ensemble) {
        throw MissingArtifactError("method '" + method.name + "' needs " + std::to_string(method.ensemble) +
                                   " models, got " + std::to_string(members.size()));
    }
}

// log of method probabilities, which serve as logits for temperature fitting
Tensor log_probabilities(const Tensor& p) {
    std::vector<Scalar> z(p.data().begin(), p.data().end());
    for (auto& v : z) v = std::log(std::max(v, 1e-300));
    return Tensor(p.shape(), std::move(z));
}

}  // namespace

Tensor method_probabilities(const MethodSpec& method, std::span<const Network* const> members, const Dataset& split,
                            std::size_t batch_size, double temperature) {
    check_members(method, members);
    if (batch_size < 1) throw ShapeError("batch size must be at least 1");
    if (split.size() == 0) throw ShapeError("empty split");

    std::vector<Network> frozen;
    std::vector<const Network*> use(members.begin(), members.end());
    PredictOptions opts = method.predict_options();
    if (method.bn_mode == NormMode::EvalFrozen) {
        const Tensor reference = split.features.slice_rows(0, std::min(batch_size, split.size()));
        frozen.reserve(members.size());
        for (const auto* m : members) {
            frozen.push_back(*m);
            freeze_stats(frozen.back(), reference, *method.freeze_policy);
        }
        for (std::size_t i = 0; i < frozen.size(); ++i) use[i] = &frozen[i];
    }

    std::vector<Tensor> parts;
    for (std::size_t begin = 0; begin < split.size(); begin += batch_size) {
        const std::size_t end = std::min(split.size(), begin + batch_size);
        parts.push_back(method_predict(use, split.features.slice_rows(begin, end), opts, temperature));
    }
    return concat_rows(parts);
}

TemperatureFit fit_method_temperature(const MethodSpec& method, std::span<const Network* const> members,
                                      const Dataset& val, std::size_t batch_size) {
    const Tensor p = method_probabilities(method, members, val, batch_size, 1.0);
    return fit_temperature(log_probabilities(p), val.labels);
}

EvalRecord evaluate_method(const MethodSpec& method, std::span<const Network* const> members, const Dataset& split,
                           std::size_t batch_size, const EvalOptions& opts) {
    const Tensor probs = method_probabilities(method, members, split, batch_size, opts.temperature);
    EvalRecord r;
    r.method = method.name;
    r.shift_kind = split.split.kind;
    r.severity = split.split.severity;
    r.batch_size = batch_size;
    r.eps = method.eps;
    r.temperature = opts.temperature;
    r.seed = opts.seed;
    r.num_batches = (split.size() + batch_size - 1) / batch_size;
    r.last_batch_size = split.size() - (r.num_batches - 1) * batch_size;
    score_predictions(r, probs, split.labels, opts.ece_bins);
    return r;
}

}  // namespace ptbn
