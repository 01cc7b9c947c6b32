#include "ptbn/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "json_io.hpp"
#include "ptbn/error.hpp"
#include "ptbn/rng.hpp"

namespace ptbn {

static_assert(std::endian::native == std::endian::little, "checkpoint format assumes a little-endian host");

std::string_view to_string(Architecture a) {
    switch (a) {
        case Architecture::MLP: return "mlp";
        case Architecture::TinyCNN: return "tiny_cnn";
        case Architecture::MLPLastLayerBN: return "mlp_last_layer_bn";
        case Architecture::TinyCNNLastLayerBN: return "tiny_cnn_last_layer_bn";
    }
    return "?";
}

Architecture parse_architecture(std::string_view s) {
    if (s == "mlp") return Architecture::MLP;
    if (s == "tiny_cnn") return Architecture::TinyCNN;
    if (s == "mlp_last_layer_bn") return Architecture::MLPLastLayerBN;
    if (s == "tiny_cnn_last_layer_bn") return Architecture::TinyCNNLastLayerBN;
    throw ConfigError("unknown architecture '" + std::string(s) + "'");
}

bool ModelSpec::is_cnn() const {
    return architecture == Architecture::TinyCNN || architecture == Architecture::TinyCNNLastLayerBN;
}

bool ModelSpec::last_layer_only() const {
    return architecture == Architecture::MLPLastLayerBN || architecture == Architecture::TinyCNNLastLayerBN;
}

void ModelSpec::validate() const {
    if (hidden.empty()) throw ConfigError("model: need at least one hidden block");
    for (auto h : hidden) {
        if (h == 0) throw ConfigError("model: hidden sizes must be positive");
    }
    if (num_classes < 2) throw ConfigError("model: need at least two classes");
    if (is_cnn() && input_shape.size() != 3) throw ConfigError("model: CNN input shape must be {C, H, W}");
    if (!is_cnn() && input_shape.size() != 1) throw ConfigError("model: MLP input shape must be {F}");
    if (!strides.empty() && strides.size() != hidden.size()) throw ConfigError("model: one stride per conv block");
    for (auto s : strides) {
        if (s == 0) throw ConfigError("model: strides must be positive");
    }
    if (!(eps > 0.0)) throw ConfigError("model: eps must be positive");
    if (!(momentum > 0.0 && momentum < 1.0)) throw ConfigError("model: momentum must lie in (0, 1)");
    if (last_layer_only() && norm.type == NormType::None) throw ConfigError("model: last-layer variant needs a norm");
    if (norm.type == NormType::Instance && !is_cnn()) throw ConfigError("model: instance norm needs spatial inputs");
    try {
        if (last_layer_only()) {
            norm.validate(hidden.back());
        } else if (norm.type != NormType::None) {
            for (auto h : hidden) norm.validate(h);
        }
    } catch (const ShapeError& e) {
        throw ConfigError(std::string("model: ") + e.what());
    }
}

double TrainConfig::learning_rate_at(std::size_t epoch) const {
    double factor = 1.0;
    std::size_t best = 0;
    bool any = false;
    for (const auto& d : lr_drops) {
        if (epoch >= d.epoch && (!any || d.epoch >= best)) {
            factor = d.factor;
            best = d.epoch;
            any = true;
        }
    }
    return learning_rate * factor;
}

void TrainConfig::validate() const {
    if (!(learning_rate > 0.0)) throw ConfigError("train: learning rate must be positive");
    if (batch_size < 2) throw ConfigError("train: batch size must be at least 2");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("train: momentum must lie in [0, 1)");
    if (!(adam_beta2 > 0.0 && adam_beta2 < 1.0)) throw ConfigError("train: adam_beta2 must lie in (0, 1)");
    if (!(adam_eps > 0.0)) throw ConfigError("train: adam_eps must be positive");
    for (const auto& d : lr_drops) {
        if (!(d.factor > 0.0)) throw ConfigError("train: learning-rate factors must be positive");
    }
}

// ---------------------------------------------------------------------------

Network::Network(ModelSpec spec) : spec_(std::move(spec)) {
    spec_.validate();
    build();
}

Network::Network(const Network& other) : spec_(other.spec_), layers_(other.layers_), norms_(other.norms_) {
    weights_.reserve(other.weights_.size());
    for (const auto& w : other.weights_) weights_.push_back(w.detach());
    for (auto& n : norms_) {
        n.gamma = n.gamma.detach();
        n.beta = n.beta.detach();
    }
}

Network& Network::operator=(const Network& other) {
    if (this != &other) {
        Network copy(other);
        *this = std::move(copy);
    }
    return *this;
}

void Network::build() {
    Rng rng(derive_seed(spec_.seed, hash_string("init")));
    auto normal_tensor = [&](Shape shape, double fan_in, double gain) {
        Tensor t(std::move(shape));
        const double sd = std::sqrt(gain / fan_in);
        for (auto& v : t.mutable_data()) v = sd * rng.normal();
        weights_.push_back(t);
        return weights_.size() - 1;
    };
    auto zero_bias = [&](std::size_t n) {
        weights_.push_back(Tensor(Shape{n}, 0.0));
        return weights_.size() - 1;
    };
    auto add_norm = [&](std::size_t channels) {
        norms_.push_back(NormState::init(channels, spec_.eps, spec_.momentum));
        Layer l;
        l.op = Layer::Op::Norm;
        l.norm = norms_.size() - 1;
        layers_.push_back(l);
    };
    auto add_relu = [&] {
        Layer l;
        l.op = Layer::Op::Relu;
        layers_.push_back(l);
    };

    const bool internal_norms = !spec_.last_layer_only() && spec_.norm.type != NormType::None;
    std::size_t width = spec_.input_shape[0];
    for (std::size_t i = 0; i < spec_.hidden.size(); ++i) {
        const std::size_t out = spec_.hidden[i];
        Layer l;
        if (spec_.is_cnn()) {
            l.op = Layer::Op::Conv;
            l.stride = spec_.strides.empty() ? (i == 0 ? 1 : 2) : spec_.strides[i];
            l.padding = 1;
            l.standardize_weight = internal_norms && spec_.norm.type == NormType::Group &&
                                   spec_.norm.weight_standardization;
            l.weight = normal_tensor(Shape{out, width, 3, 3}, static_cast<double>(width * 9), 2.0);
        } else {
            l.op = Layer::Op::Linear;
            l.weight = normal_tensor(Shape{width, out}, static_cast<double>(width), 2.0);
        }
        if (!internal_norms) l.bias = zero_bias(out);
        layers_.push_back(l);
        if (internal_norms) add_norm(out);
        add_relu();
        width = out;
    }
    if (spec_.is_cnn()) {
        Layer pool;
        pool.op = Layer::Op::GlobalPool;
        layers_.push_back(pool);
    }
    if (spec_.last_layer_only()) add_norm(width);
    Layer head;
    head.op = Layer::Op::Linear;
    head.weight = normal_tensor(Shape{width, spec_.num_classes}, static_cast<double>(width), 1.0);
    head.bias = zero_bias(spec_.num_classes);
    layers_.push_back(head);
}

std::vector<Tensor> Network::trainable() const {
    std::vector<Tensor> out(weights_.begin(), weights_.end());
    for (const auto& n : norms_) {
        out.push_back(n.gamma);
        out.push_back(n.beta);
    }
    return out;
}

std::vector<std::string> Network::norm_layer_names() const {
    std::vector<std::string> names;
    for (std::size_t k = 0; k < norms_.size(); ++k) names.push_back("norm" + std::to_string(k));
    return names;
}

std::vector<std::size_t> Network::batch_norm_layers() const {
    std::vector<std::size_t> out;
    const NormType t = spec_.norm.type;
    if (t == NormType::Batch) {
        for (std::size_t k = 0; k < norms_.size(); ++k) out.push_back(k);
    }
    return out;
}

Tensor Network::forward(const Tensor& x, const ForwardOptions& opts, ForwardTrace* trace) const {
    Shape expected{x.dim(0)};
    expected.insert(expected.end(), spec_.input_shape.begin(), spec_.input_shape.end());
    if (x.shape() != expected) {
        throw ShapeError("model input " + shape_string(x.shape()) + " does not match " + shape_string(expected));
    }
    const bool replaced = !opts.params.empty();
    if (replaced && opts.params.size() != num_trainable()) throw ShapeError("forward: wrong number of parameters");
    auto weight = [&](std::size_t i) -> const Tensor& { return replaced ? opts.params[i] : weights_[i]; };
    auto gamma = [&](std::size_t k) -> const Tensor& {
        return replaced ? opts.params[weights_.size() + 2 * k] : norms_[k].gamma;
    };
    auto beta = [&](std::size_t k) -> const Tensor& {
        return replaced ? opts.params[weights_.size() + 2 * k + 1] : norms_[k].beta;
    };
    if (!opts.layer_modes.empty() && opts.layer_modes.size() != norms_.size()) {
        throw ShapeError("forward: layer_modes must have one entry per norm layer");
    }
    if (trace) {
        trace->batch_stats.assign(norms_.size(), std::nullopt);
        trace->norm_outputs.assign(trace->capture ? norms_.size() : 0, Tensor());
    }

    Tensor h = x;
    for (std::size_t li = 0; li < layers_.size(); ++li) {
        const Layer& l = layers_[li];
        switch (l.op) {
            case Layer::Op::Linear:
                if (li + 1 == layers_.size() && trace) trace->penultimate = h;
                h = matmul(h, weight(l.weight));
                if (l.bias != Layer::kNone) h = add_channel(h, weight(l.bias));
                break;
            case Layer::Op::Conv: {
                const Tensor w = l.standardize_weight ? weight_standardize(weight(l.weight)) : weight(l.weight);
                h = conv2d(h, w, l.stride, l.padding);
                if (l.bias != Layer::kNone) h = add_channel(h, weight(l.bias));
                break;
            }
            case Layer::Op::Norm: {
                const NormState& st = norms_[l.norm];
                if (spec_.norm.type == NormType::Batch) {
                    NormCall call;
                    if (!opts.layer_modes.empty() && opts.layer_modes[l.norm]) {
                        call.mode = opts.layer_modes[l.norm];
                    } else {
                        call.mode = opts.mode;
                    }
                    call.eps = opts.eps;
                    ChannelStats stats;
                    call.stats_out = &stats;
                    h = bn_forward(h, st, gamma(l.norm), beta(l.norm), call);
                    const NormMode used = call.mode.value_or(st.mode);
                    if (trace && (used == NormMode::Train || used == NormMode::EvalBatch)) {
                        trace->batch_stats[l.norm] = std::move(stats);
                    }
                } else {
                    h = alt_norm_forward(h, spec_.norm, gamma(l.norm), beta(l.norm), st.eps);
                }
                if (trace && trace->capture) trace->norm_outputs[l.norm] = h;
                break;
            }
            case Layer::Op::Relu:
                h = relu(h);
                break;
            case Layer::Op::GlobalPool:
                h = global_avg_pool(h);
                break;
        }
    }
    if (trace) trace->logits = h;
    return h;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kMagic[8] = {'P', 'T', 'B', 'N', 'C', 'K', 'P', 'T'};

template <typename T>
void put(std::string& out, T v) {
    char buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    out.append(buf, sizeof(T));
}

template <typename T>
T get(std::string_view bytes, std::size_t& pos) {
    if (pos + sizeof(T) > bytes.size()) throw ConfigError("checkpoint truncated");
    T v;
    std::memcpy(&v, bytes.data() + pos, sizeof(T));
    pos += sizeof(T);
    return v;
}

void put_values(std::vector<double>& out, std::span<const Scalar> v) { out.insert(out.end(), v.begin(), v.end()); }

}  // namespace

std::string serialize_checkpoint(const Checkpoint& ckpt) {
    using nlohmann::json;
    const Network& net = ckpt.net;
    json norms = json::array();
    std::vector<double> blob;
    json weight_shapes = json::array();
    for (const auto& w : net.weights()) {
        weight_shapes.push_back(w.shape());
        put_values(blob, w.data());
    }
    for (const auto& n : net.norms()) {
        norms.push_back(json{{"channels", n.channels()},
                             {"eps", n.eps},
                             {"momentum", n.momentum},
                             {"mode", std::string(to_string(n.mode))},
                             {"frozen", n.frozen.has_value()}});
        put_values(blob, n.gamma.data());
        put_values(blob, n.beta.data());
        put_values(blob, n.ema_mean);
        put_values(blob, n.ema_var);
        if (n.frozen) {
            put_values(blob, n.frozen->mean);
            put_values(blob, n.frozen->var);
        }
    }
    const json header{{"format_version", Checkpoint::kFormatVersion},
                      {"spec", to_json(ckpt.spec)},
                      {"train", to_json(ckpt.train)},
                      {"loss_history", ckpt.loss_history},
                      {"weight_shapes", weight_shapes},
                      {"norms", norms}};
    const std::string text = header.dump();
    std::string out(kMagic, sizeof(kMagic));
    put<std::uint32_t>(out, Checkpoint::kFormatVersion);
    put<std::uint64_t>(out, text.size());
    out += text;
    put<std::uint64_t>(out, blob.size());
    out.append(reinterpret_cast<const char*>(blob.data()), blob.size() * sizeof(double));
    return out;
}

Checkpoint deserialize_checkpoint(std::string_view bytes) {
    using nlohmann::json;
    if (bytes.size() < sizeof(kMagic) || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
        throw ConfigError("not a checkpoint (bad magic)");
    }
    std::size_t pos = sizeof(kMagic);
    const auto version = get<std::uint32_t>(bytes, pos);
    if (version != Checkpoint::kFormatVersion) {
        throw ConfigError("unsupported checkpoint version " + std::to_string(version));
    }
    const auto header_len = get<std::uint64_t>(bytes, pos);
    if (pos + header_len > bytes.size()) throw ConfigError("checkpoint truncated");
    const json header = json::parse(bytes.substr(pos, header_len));
    pos += header_len;
    const auto count = get<std::uint64_t>(bytes, pos);
    if (pos + count * sizeof(double) != bytes.size()) throw ConfigError("checkpoint payload size mismatch");
    std::vector<double> blob(count);
    std::memcpy(blob.data(), bytes.data() + pos, count * sizeof(double));

    Checkpoint ck;
    ck.spec = model_spec_from_json(header.at("spec"));
    ck.train = train_config_from_json(header.at("train"));
    ck.loss_history = header.at("loss_history").get<std::vector<double>>();
    ck.net = Network(ck.spec);
    std::size_t cursor = 0;
    auto take = [&](std::size_t n) {
        if (cursor + n > blob.size()) throw ConfigError("checkpoint payload too short");
        std::vector<Scalar> v(blob.begin() + static_cast<std::ptrdiff_t>(cursor),
                              blob.begin() + static_cast<std::ptrdiff_t>(cursor + n));
        cursor += n;
        return v;
    };
    auto& weights = ck.net.weights();
    const auto& shapes = header.at("weight_shapes");
    if (shapes.size() != weights.size()) throw ConfigError("checkpoint weight count does not match its spec");
    for (std::size_t i = 0; i < weights.size(); ++i) {
        Shape s = shapes[i].get<Shape>();
        if (s != weights[i].shape()) throw ConfigError("checkpoint weight shape does not match its spec");
        weights[i] = Tensor(s, take(shape_numel(s)));
    }
    auto& norms = ck.net.norms();
    const auto& nh = header.at("norms");
    if (nh.size() != norms.size()) throw ConfigError("checkpoint norm count does not match its spec");
    for (std::size_t k = 0; k < norms.size(); ++k) {
        auto& n = norms[k];
        const std::size_t C = nh[k].at("channels").get<std::size_t>();
        if (C != n.channels()) throw ConfigError("checkpoint norm width does not match its spec");
        n.eps = nh[k].at("eps").get<double>();
        n.momentum = nh[k].at("momentum").get<double>();
        n.mode = parse_norm_mode(nh[k].at("mode").get<std::string>());
        n.gamma = Tensor(Shape{C}, take(C));
        n.beta = Tensor(Shape{C}, take(C));
        n.ema_mean = take(C);
        n.ema_var = take(C);
        if (nh[k].at("frozen").get<bool>()) {
            ChannelStats f;
            f.mean = take(C);
            f.var = take(C);
            n.frozen = std::move(f);
        } else {
            n.frozen.reset();
        }
        n.validate();
    }
    if (cursor != blob.size()) throw ConfigError("checkpoint payload has trailing values");
    return ck;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    const std::string bytes = serialize_checkpoint(ckpt);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write checkpoint " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("failed writing checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw MissingArtifactError("missing checkpoint " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return deserialize_checkpoint(ss.str());
}

// ---------------------------------------------------------------------------
// Training

namespace {

// Zero-pad-2 random crop and horizontal flip, in place.
void augment_images(Tensor& x, Rng& rng) {
    const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    constexpr int pad = 2;
    auto data = x.mutable_data();
    std::vector<Scalar> img(C * H * W);
    for (std::size_t n = 0; n < N; ++n) {
        const int dy = static_cast<int>(rng.below(2 * pad + 1)) - pad;
        const int dx = static_cast<int>(rng.below(2 * pad + 1)) - pad;
        const bool flip = rng.bernoulli(0.5);
        Scalar* src = data.data() + n * C * H * W;
        std::copy(src, src + C * H * W, img.begin());
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t r = 0; r < H; ++r)
                for (std::size_t col = 0; col < W; ++col) {
                    const int sr = static_cast<int>(r) + dy;
                    int sc = static_cast<int>(col) + dx;
                    if (flip) sc = static_cast<int>(W) - 1 - sc;
                    Scalar v = 0.0;
                    if (sr >= 0 && sr < static_cast<int>(H) && sc >= 0 && sc < static_cast<int>(W)) {
                        v = img[(c * H + static_cast<std::size_t>(sr)) * W + static_cast<std::size_t>(sc)];
                    }
                    src[(c * H + r) * W + col] = v;
                }
    }
}

class Optimizer {
   public:
    Optimizer(const TrainConfig& cfg, const std::vector<Tensor>& params) : cfg_(cfg) {
        for (const auto& p : params) {
            m_.emplace_back(p.numel(), 0.0);
            v_.emplace_back(p.numel(), 0.0);
        }
    }

    void step(std::vector<Tensor>& params, const std::vector<Tensor>& watched, double lr) {
        ++t_;
        const double b1 = cfg_.momentum, b2 = cfg_.adam_beta2;
        const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
        for (std::size_t i = 0; i < params.size(); ++i) {
            auto p = params[i].mutable_data();
            const auto g = watched[i].grad();
            auto& m = m_[i];
            auto& v = v_[i];
            if (cfg_.optimizer == OptimizerKind::Adam) {
                for (std::size_t j = 0; j < p.size(); ++j) {
                    m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                    v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                    p[j] -= lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + cfg_.adam_eps);
                }
            } else {
                for (std::size_t j = 0; j < p.size(); ++j) {
                    m[j] = b1 * m[j] + g[j];
                    p[j] -= lr * (g[j] + b1 * m[j]);
                }
            }
        }
    }

   private:
    const TrainConfig& cfg_;
    std::vector<std::vector<double>> m_, v_;
    std::size_t t_ = 0;
};

}  // namespace

Checkpoint train(const ModelSpec& spec, const TrainConfig& cfg, const Dataset& data, const EpochCallback& on_epoch) {
    spec.validate();
    cfg.validate();
    data.validate();
    if (data.num_classes != spec.num_classes) throw ConfigError("train: dataset and model disagree on class count");

    Checkpoint ck;
    ck.spec = spec;
    ck.train = cfg;
    ck.net = Network(spec);
    Network& net = ck.net;
    if (data.input_shape() != spec.input_shape) throw ShapeError("train: dataset input shape does not match model");

    Rng rng(derive_seed(cfg.seed, hash_string("shuffle")));
    std::vector<Tensor> params = net.trainable();
    Optimizer opt(cfg, params);
    std::vector<std::size_t> order(data.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        const double lr = cfg.learning_rate_at(epoch);
        rng.shuffle(order.begin(), order.end());
        double loss_sum = 0.0;
        std::size_t steps = 0;
        for (std::size_t begin = 0; begin < order.size(); begin += cfg.batch_size) {
            const std::size_t end = std::min(order.size(), begin + cfg.batch_size);
            if (end - begin < 2) continue;
            const std::span<const std::size_t> idx(order.data() + begin, end - begin);
            Tensor xb = data.features.gather_rows(idx);
            if (cfg.augment && data.modality == Modality::Image) augment_images(xb, rng);
            std::vector<int> yb;
            yb.reserve(idx.size());
            for (auto i : idx) yb.push_back(data.labels[i]);

            GradTape tape;
            std::vector<Tensor> watched;
            watched.reserve(params.size());
            for (const auto& p : params) watched.push_back(tape.watch(p));
            ForwardOptions fo;
            fo.mode = NormMode::Train;
            fo.params = watched;
            ForwardTrace trace;
            Tensor loss;
            try {
                loss = nll_loss(log_softmax(net.forward(xb, fo, &trace)), yb);
            } catch (const NumericalError& e) {
                throw NumericalError("training diverged at epoch " + std::to_string(epoch) + ", step " +
                                     std::to_string(steps) + ": " + e.what());
            }
            tape.backward(loss);
            opt.step(params, watched, lr);
            for (std::size_t k = 0; k < net.norms().size(); ++k) {
                if (trace.batch_stats[k]) update_ema(net.norms()[k], *trace.batch_stats[k]);
            }
            loss_sum += loss.item();
            ++steps;
        }
        const double epoch_loss = steps ? loss_sum / static_cast<double>(steps) : 0.0;
        if (!std::isfinite(epoch_loss)) throw NumericalError("training loss is not finite");
        ck.loss_history.push_back(epoch_loss);
        if (on_epoch) on_epoch(epoch, epoch_loss);
    }
    for (auto k : net.batch_norm_layers()) net.norms()[k].mode = NormMode::EvalEMA;
    return ck;
}

// ---------------------------------------------------------------------------
// Prediction

void set_prediction_mode(Network& net, NormMode mode) {
    if (mode == NormMode::Train) throw ShapeError("set_prediction_mode: Train is not a prediction mode");
    const auto bn = net.batch_norm_layers();
    if (mode == NormMode::EvalFrozen) {
        for (auto k : bn) {
            if (!net.norms()[k].frozen) throw Error("set_prediction_mode: no frozen statistics stored");
        }
    }
    for (auto k : bn) net.norms()[k].mode = mode;
}

void freeze_stats(Network& net, const Tensor& reference, FreezePolicy policy) {
    if (reference.rank() < 2 || reference.dim(0) == 0) throw ShapeError("freeze_stats: empty reference batch");
    const auto bn = net.batch_norm_layers();
    std::vector<ChannelStats> captured(net.norms().size());
    if (policy == FreezePolicy::BatchUpstream) {
        ForwardOptions fo;
        fo.mode = NormMode::EvalBatch;
        ForwardTrace trace;
        net.forward(reference, fo, &trace);
        for (auto k : bn) captured[k] = *trace.batch_stats[k];
    } else {
        for (auto k : bn) {
            ForwardOptions fo;
            fo.layer_modes.assign(net.norms().size(), NormMode::EvalEMA);
            fo.layer_modes[k] = NormMode::EvalBatch;
            ForwardTrace trace;
            net.forward(reference, fo, &trace);
            captured[k] = *trace.batch_stats[k];
        }
    }
    for (auto k : bn) net.norms()[k].frozen = std::move(captured[k]);
}

ForwardOptions forward_options(const Network& net, const PredictOptions& opts) {
    ForwardOptions fo;
    fo.eps = opts.eps;
    if (opts.last_norm_only) {
        const auto bn = net.batch_norm_layers();
        fo.layer_modes.assign(net.norms().size(), std::nullopt);
        for (auto k : bn) fo.layer_modes[k] = NormMode::EvalEMA;
        if (!bn.empty()) fo.layer_modes[bn.back()] = opts.mode;
    } else {
        fo.mode = opts.mode;
    }
    return fo;
}

Tensor predict_logits(const Network& net, const Tensor& x, const PredictOptions& opts) {
    if (opts.mode == NormMode::Train) throw ShapeError("predict: Train is not a prediction mode");
    if (!(opts.temperature > 0.0)) throw ShapeError("predict: temperature must be positive");
    Tensor logits = net.forward(x, forward_options(net, opts));
    if (opts.temperature != 1.0) logits = scale(logits, 1.0 / opts.temperature);
    return logits;
}

Tensor predict_proba(const Network& net, const Tensor& x, const PredictOptions& opts) {
    return softmax(predict_logits(net, x, opts));
}

Tensor predict_batch(const Checkpoint& ckpt, const Tensor& x, NormMode mode) {
    PredictOptions o;
    o.mode = mode;
    return predict_proba(ckpt.net, x, o);
}

Tensor ensemble_predict(std::span<const Network* const> members, const Tensor& x, const PredictOptions& opts) {
    if (members.empty()) throw ShapeError("ensemble_predict: no members");
    const ModelSpec& ref = members.front()->spec();
    for (const auto* m : members) {
        if (m->spec().num_classes != ref.num_classes || m->spec().input_shape != ref.input_shape ||
            m->spec().architecture != ref.architecture) {
            throw ShapeError("ensemble_predict: member specs differ");
        }
    }
    std::vector<Scalar> acc;
    Shape shape;
    for (const auto* m : members) {
        const Tensor p = predict_proba(*m, x, opts);
        if (acc.empty()) {
            acc.assign(p.numel(), 0.0);
            shape = p.shape();
        }
        for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += p[i];
    }
    for (auto& v : acc) v /= static_cast<Scalar>(members.size());
    return Tensor(std::move(shape), std::move(acc));
}

Tensor ensemble_predict(std::span<const Checkpoint> members, const Tensor& x, NormMode mode) {
    std::vector<const Network*> nets;
    for (const auto& c : members) nets.push_back(&c.net);
    PredictOptions o;
    o.mode = mode;
    return ensemble_predict(std::span<const Network* const>(nets), x, o);
}

std::vector<ActivationSummary> capture_activations(const Network& net, const Tensor& x, const PredictOptions& opts,
                                                   std::span<const std::string> layers, std::size_t batch_size,
                                                   std::size_t n_keep, std::uint64_t seed) {
    if (batch_size == 0) throw ShapeError("capture_activations: batch size must be positive");
    const auto names = net.norm_layer_names();
    std::vector<std::ptrdiff_t> which;  // norm index, -1 penultimate, -2 logits
    for (const auto& name : layers) {
        if (name == "penultimate") {
            which.push_back(-1);
        } else if (name == "logits") {
            which.push_back(-2);
        } else {
            const auto it = std::find(names.begin(), names.end(), name);
            if (it == names.end()) throw ShapeError("capture_activations: unknown layer '" + name + "'");
            which.push_back(it - names.begin());
        }
    }
    const ForwardOptions fo = forward_options(net, opts);
    std::vector<std::vector<Tensor>> parts(which.size());
    for (std::size_t begin = 0; begin < x.dim(0); begin += batch_size) {
        const std::size_t end = std::min(x.dim(0), begin + batch_size);
        ForwardTrace trace;
        trace.capture = true;
        net.forward(x.slice_rows(begin, end), fo, &trace);
        for (std::size_t s = 0; s < which.size(); ++s) {
            Tensor t = which[s] == -1 ? trace.penultimate
                       : which[s] == -2 ? trace.logits
                                        : trace.norm_outputs[static_cast<std::size_t>(which[s])];
            if (t.rank() == 4) t = global_avg_pool(t);
            parts[s].push_back(t);
        }
    }
    std::vector<ActivationSummary> out;
    for (std::size_t s = 0; s < which.size(); ++s) {
        auto summary = summarize_activations(concat_rows(parts[s]), layers[s], which[s] < 0, n_keep,
                                             derive_seed(seed, s));
        summary.mode = std::string(to_string(opts.mode));
        out.push_back(std::move(summary));
    }
    return out;
}

}  // namespace ptbn
