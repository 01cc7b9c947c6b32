#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ptbn/data.hpp"
#include "ptbn/diagnostics.hpp"
#include "ptbn/normalization.hpp"
#include "ptbn/tensor.hpp"

namespace ptbn {

enum class Architecture {
    MLP,
    TinyCNN,
    MLPLastLayerBN,      // no internal norms, one norm before the final linear layer
    TinyCNNLastLayerBN,  // same for the CNN, norm after global pooling
};

std::string_view to_string(Architecture a);
Architecture parse_architecture(std::string_view s);

struct ModelSpec {
    Architecture architecture = Architecture::MLP;
    /// Hidden widths (MLP) or conv channel counts (TinyCNN), one per block.
    std::vector<std::size_t> hidden{64, 64};
    /// Conv strides per block; empty means 1 for the first block, 2 after.
    std::vector<std::size_t> strides;
    NormKind norm = NormKind::batch();
    std::size_t num_classes = 10;
    /// {F} for MLPs, {C, H, W} for CNNs.
    Shape input_shape{16};
    Scalar eps = 1e-3;
    Scalar momentum = 0.99;
    std::uint64_t seed = 0;

    bool is_cnn() const;
    bool last_layer_only() const;
    void validate() const;
};

enum class OptimizerKind { Adam, SgdNesterov };

struct LrDrop {
    std::size_t epoch = 0;  // multiplier applies from this epoch on
    double factor = 1.0;    // relative to the base learning rate
};

struct TrainConfig {
    OptimizerKind optimizer = OptimizerKind::Adam;
    double learning_rate = 3e-3;
    /// Adam beta1, or the Nesterov momentum coefficient.
    double momentum = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-7;
    std::size_t batch_size = 128;
    std::size_t epochs = 10;
    std::vector<LrDrop> lr_drops;
    /// Random crop (zero pad 2) and horizontal flip; images only.
    bool augment = false;
    std::uint64_t seed = 0;

    double learning_rate_at(std::size_t epoch) const;
    void validate() const;
};

struct Layer {
    enum class Op { Linear, Conv, Norm, Relu, GlobalPool };
    static constexpr std::size_t kNone = static_cast<std::size_t>(-1);

    Op op = Op::Relu;
    std::size_t weight = kNone;  // index into Network::weights()
    std::size_t bias = kNone;
    std::size_t norm = kNone;    // index into Network::norms()
    std::size_t stride = 1;
    std::size_t padding = 0;
    bool standardize_weight = false;
};

/// Per-forward options. Nothing here mutates the network.
struct ForwardOptions {
    /// Mode for every batch-norm layer; otherwise each layer's stored mode.
    std::optional<NormMode> mode;
    /// Per-norm-layer modes, taking precedence over `mode` where set.
    std::vector<std::optional<NormMode>> layer_modes;
    /// Prediction-time epsilon for all batch-norm layers.
    std::optional<Scalar> eps;
    /// Replacement trainable tensors in Network::trainable() order (training).
    std::span<const Tensor> params;
};

/// Intermediate values recorded by a forward pass.
struct ForwardTrace {
    bool capture = false;
    /// Statistics used by each norm layer running on batch statistics.
    std::vector<std::optional<ChannelStats>> batch_stats;
    /// Post-norm, pre-nonlinearity outputs (filled when capture is set).
    std::vector<Tensor> norm_outputs;
    Tensor penultimate;
    Tensor logits;
};

class Network {
   public:
    explicit Network(ModelSpec spec);
    Network(const Network& other);
    Network& operator=(const Network& other);
    Network(Network&&) noexcept = default;
    Network& operator=(Network&&) noexcept = default;

    const ModelSpec& spec() const { return spec_; }
    const std::vector<Layer>& layers() const { return layers_; }

    std::vector<Tensor>& weights() { return weights_; }
    const std::vector<Tensor>& weights() const { return weights_; }
    std::vector<NormState>& norms() { return norms_; }
    const std::vector<NormState>& norms() const { return norms_; }

    /// Weights, then gamma/beta of every norm layer, in a fixed order.
    std::vector<Tensor> trainable() const;
    std::size_t num_trainable() const { return weights_.size() + 2 * norms_.size(); }

    /// "norm0", "norm1", ... in forward order.
    std::vector<std::string> norm_layer_names() const;
    /// Indices of norm layers that are batch norms.
    std::vector<std::size_t> batch_norm_layers() const;

    /// Returns logits [N, K].
    Tensor forward(const Tensor& x, const ForwardOptions& opts = {}, ForwardTrace* trace = nullptr) const;

   private:
    void build();

    ModelSpec spec_;
    std::vector<Layer> layers_;
    std::vector<Tensor> weights_;
    std::vector<NormState> norms_;
};

/// Everything needed to reproduce a trained model's predictions.
struct Checkpoint {
    static constexpr std::uint32_t kFormatVersion = 1;

    ModelSpec spec;
    TrainConfig train;
    Network net{spec};
    std::vector<double> loss_history;  // mean training loss per epoch
};

/// Binary container: magic "PTBNCKPT", u32 version, JSON header, raw doubles.
std::string serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint deserialize_checkpoint(std::string_view bytes);
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Optional per-epoch observer: (epoch, mean loss).
using EpochCallback = std::function<void(std::size_t, double)>;

/// Deterministic minibatch training. Batches smaller than two examples are
/// skipped. On return every batch-norm layer is in EvalEMA mode.
Checkpoint train(const ModelSpec& spec, const TrainConfig& cfg, const Dataset& data,
                 const EpochCallback& on_epoch = {});

/// Switches every batch-norm layer. EvalFrozen requires freeze_stats first.
void set_prediction_mode(Network& net, NormMode mode);

/// How upstream layers behave while frozen statistics are captured.
enum class FreezePolicy {
    BatchUpstream,  // one EvalBatch pass; layer k sees layers < k on batch statistics
    EmaUpstream,    // layer k captured with layers < k on their running averages
};

/// Captures per-layer batch statistics on `reference` and stores them as the
/// frozen statistics of every batch-norm layer.
void freeze_stats(Network& net, const Tensor& reference, FreezePolicy policy = FreezePolicy::BatchUpstream);

struct PredictOptions {
    NormMode mode = NormMode::EvalEMA;
    /// Apply `mode` to the final batch-norm layer only; the rest use EvalEMA.
    bool last_norm_only = false;
    std::optional<Scalar> eps;
    double temperature = 1.0;
};

ForwardOptions forward_options(const Network& net, const PredictOptions& opts);

Tensor predict_logits(const Network& net, const Tensor& x, const PredictOptions& opts = {});
Tensor predict_proba(const Network& net, const Tensor& x, const PredictOptions& opts = {});

/// Softmax probabilities for one prediction batch under `mode`.
Tensor predict_batch(const Checkpoint& ckpt, const Tensor& x, NormMode mode);

/// Mean of member softmax outputs; each member uses its own statistics.
Tensor ensemble_predict(std::span<const Checkpoint> members, const Tensor& x, NormMode mode);
Tensor ensemble_predict(std::span<const Network* const> members, const Tensor& x, const PredictOptions& opts);

/// Activations of the selected layers ("normK", "penultimate", "logits"),
/// averaged over spatial dimensions, computed over `x` in prediction batches
/// of `batch_size`. Covariances are kept for penultimate and logits.
std::vector<ActivationSummary> capture_activations(const Network& net, const Tensor& x, const PredictOptions& opts,
                                                   std::span<const std::string> layers, std::size_t batch_size,
                                                   std::size_t n_keep = kDefaultKeep, std::uint64_t seed = 0);

}  // namespace ptbn
