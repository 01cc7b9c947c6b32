#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "../support/metric_oracles.hpp"
#include "ptbn/data.hpp"
#include "ptbn/error.hpp"
#include "ptbn/methods.hpp"
#include "test_util.hpp"

using namespace ptbn;

namespace {

DataSplits small_tabular() {
    TabularSpec t;
    t.num_classes = 4;
    t.num_features = 6;
    t.n_train = 200;
    t.n_val = 60;
    t.n_test = 103;
    return make_tabular(t);
}

// Trained briefly so EMA statistics differ from batch statistics.
std::vector<Network> members(const DataSplits& d, std::size_t m) {
    std::vector<Network> out;
    for (std::size_t i = 0; i < m; ++i) {
        ModelSpec s;
        s.hidden = {12, 12};
        s.input_shape = d.train.input_shape();
        s.num_classes = d.train.num_classes;
        s.seed = 10 + i;
        TrainConfig c;
        c.epochs = 2;
        c.batch_size = 32;
        c.seed = 20 + i;
        out.push_back(train(s, c, d.train).net);
    }
    return out;
}

std::vector<const Network*> pointers(const std::vector<Network>& nets) {
    std::vector<const Network*> p;
    for (const auto& n : nets) p.push_back(&n);
    return p;
}

MethodSpec method(std::string name, NormMode mode, std::size_t m = 1) {
    MethodSpec s;
    s.name = std::move(name);
    s.bn_mode = mode;
    s.ensemble = m;
    if (mode == NormMode::EvalFrozen) s.freeze_policy = FreezePolicy::BatchUpstream;
    return s;
}

}  // namespace

TEST(MethodSpec, Validation) {
    EXPECT_NO_THROW(method("ema", NormMode::EvalEMA).validate());
    EXPECT_THROW(method("", NormMode::EvalEMA).validate(), ConfigError);
    EXPECT_THROW(method("t", NormMode::Train).validate(), ConfigError);
    auto f = method("f", NormMode::EvalFrozen);
    f.freeze_policy.reset();
    EXPECT_THROW(f.validate(), ConfigError);
    auto e = method("e", NormMode::EvalEMA, 0);
    EXPECT_THROW(e.validate(), ConfigError);
    e = method("e", NormMode::EvalEMA);
    e.eps = 0.0;
    EXPECT_THROW(e.validate(), ConfigError);
    EXPECT_EQ(parse_bn_scope("last_only"), BnScope::LastOnly);
    EXPECT_EQ(to_string(BnScope::All), "all");
    EXPECT_THROW(parse_bn_scope("some"), ConfigError);
}

TEST(Methods, MemberCountMismatch) {
    const auto d = small_tabular();
    const auto nets = members(d, 2);
    const auto ptr = pointers(nets);
    EXPECT_THROW(evaluate_method(method("ens", NormMode::EvalEMA, 3), ptr, d.test, 10), MissingArtifactError);
    EXPECT_THROW(evaluate_method(method("ens", NormMode::EvalEMA, 1), ptr, d.test, 10), MissingArtifactError);
}

TEST(Methods, EmaRecordDoesNotDependOnBatchSize) {
    const auto d = small_tabular();
    const auto nets = members(d, 2);
    const auto ptr = pointers(nets);
    const auto m = method("ens", NormMode::EvalEMA, 2);
    const auto a = evaluate_method(m, ptr, d.test, 1);
    for (std::size_t t : {7, 50, 103}) {
        const auto b = evaluate_method(m, ptr, d.test, t);
        EXPECT_NEAR(b.accuracy, a.accuracy, 1e-12);
        EXPECT_NEAR(b.ece, a.ece, 1e-12);
        EXPECT_NEAR(b.nll, a.nll, 1e-12);
        EXPECT_NEAR(b.brier, a.brier, 1e-12);
    }
}

TEST(Methods, BatchSizeEqualToSplitIsOneBatch) {
    const auto d = small_tabular();
    const auto nets = members(d, 1);
    const auto ptr = pointers(nets);
    const auto m = method("batch", NormMode::EvalBatch);
    const auto r = evaluate_method(m, ptr, d.test, d.test.size());
    EXPECT_EQ(r.num_batches, 1u);
    EXPECT_EQ(r.last_batch_size, d.test.size());
    const auto direct = predict_proba(nets[0], d.test.features, {NormMode::EvalBatch});
    EXPECT_DOUBLE_EQ(r.ece, oracle::ece(direct, d.test.labels, 10));
    EXPECT_DOUBLE_EQ(r.accuracy, oracle::accuracy(direct, d.test.labels));

    const auto partial = evaluate_method(m, ptr, d.test, 25);
    EXPECT_EQ(partial.num_batches, 5u);
    EXPECT_EQ(partial.last_batch_size, 3u);
    EXPECT_EQ(partial.count, d.test.size());
}

TEST(Methods, AggregationMatchesConcatenatedBatches) {
    const auto d = small_tabular();
    const auto nets = members(d, 3);
    const auto ptr = pointers(nets);
    for (auto mode : {NormMode::EvalBatch, NormMode::EvalFrozen}) {
        const auto m = method("m", mode, 3);
        const std::size_t t = 20;
        // recompute batch by batch through the model API
        std::vector<Network> ref(nets);
        if (mode == NormMode::EvalFrozen)
            for (auto& n : ref) freeze_stats(n, d.test.features.slice_rows(0, t));
        std::vector<Tensor> parts;
        for (std::size_t b = 0; b < d.test.size(); b += t) {
            const auto x = d.test.features.slice_rows(b, std::min(d.test.size(), b + t));
            Tensor sum = predict_proba(ref[0], x, {mode});
            for (std::size_t j = 1; j < ref.size(); ++j) sum = add(sum, predict_proba(ref[j], x, {mode}));
            parts.push_back(scale(sum, 1.0 / 3.0));
        }
        const auto all = concat_rows(parts);
        const auto r = evaluate_method(m, ptr, d.test, t);
        EXPECT_NEAR(r.ece, oracle::ece(all, d.test.labels, 10), 1e-12);
        EXPECT_NEAR(r.nll, oracle::nll(all, d.test.labels), 1e-12);
        EXPECT_NEAR(r.brier, oracle::brier(all, d.test.labels), 1e-12);
        EXPECT_DOUBLE_EQ(r.accuracy, oracle::accuracy(all, d.test.labels));
    }
}

TEST(Methods, FrozenUsesFirstBatchOnly) {
    const auto d = small_tabular();
    const auto nets = members(d, 1);
    const auto ptr = pointers(nets);
    const auto m = method("frozen", NormMode::EvalFrozen);
    const auto p = method_probabilities(m, ptr, d.test, 30);
    // the first batch matches batch mode; later ones do not
    const auto batch = method_probabilities(method("b", NormMode::EvalBatch), ptr, d.test, 30);
    for (std::size_t i = 0; i < 30 * 4; ++i) EXPECT_NEAR(p[i], batch[i], 1e-12);
    double diff = 0;
    for (std::size_t i = 30 * 4; i < p.numel(); ++i) diff += std::abs(p[i] - batch[i]);
    EXPECT_GT(diff, 1e-6);
    // the caller's network is not modified
    EXPECT_FALSE(nets[0].norms()[0].frozen.has_value());
}

TEST(Methods, MemberContributionsAreIndependent) {
    const auto d = small_tabular();
    auto nets = members(d, 3);
    const auto m = method("ens", NormMode::EvalEMA, 3);
    const auto before = method_probabilities(m, pointers(nets), d.test, 40);
    const auto p0 = predict_proba(nets[0], d.test.features, {NormMode::EvalEMA});
    nets[0].weights()[0].mutable_data()[0] += 0.5;
    const auto after = method_probabilities(m, pointers(nets), d.test, 40);
    const auto q0 = predict_proba(nets[0], d.test.features, {NormMode::EvalEMA});
    for (std::size_t i = 0; i < before.numel(); ++i) EXPECT_NEAR(after[i] - before[i], (q0[i] - p0[i]) / 3.0, 1e-12);
}

TEST(Methods, TemperatureOnLogMean) {
    const auto d = small_tabular();
    const auto nets = members(d, 2);
    const auto ptr = pointers(nets);
    PredictOptions o{NormMode::EvalEMA};
    const auto x = d.test.features.slice_rows(0, 10);
    const auto p = method_predict(ptr, x, o);
    const auto pt = method_predict(ptr, x, o, 2.0);
    for (std::size_t i = 0; i < 10; ++i) {
        double s = 0;
        for (std::size_t k = 0; k < 4; ++k) s += std::sqrt(p.at(i, k));
        for (std::size_t k = 0; k < 4; ++k) EXPECT_NEAR(pt.at(i, k), std::sqrt(p.at(i, k)) / s, 1e-12);
    }
    // single member: same as softmax(logits / T)
    const Network* one[] = {&nets[0]};
    const auto logits = predict_logits(nets[0], x, o);
    const auto direct = softmax(scale(logits, 1.0 / 2.0));
    const auto via = method_predict(one, x, o, 2.0);
    for (std::size_t i = 0; i < direct.numel(); ++i) EXPECT_NEAR(via[i], direct[i], 1e-12);
}

TEST(Methods, FittedTemperatureDoesNotIncreaseValidationNll) {
    const auto d = small_tabular();
    const auto nets = members(d, 1);
    const auto ptr = pointers(nets);
    auto m = method("ts", NormMode::EvalEMA);
    m.fit_temperature = true;
    const auto fit = fit_method_temperature(m, ptr, d.val, 16);
    EXPECT_GE(fit.temperature, 0.05);
    EXPECT_LE(fit.temperature, 20.0);
    EvalOptions eo;
    eo.temperature = fit.temperature;
    const auto with = evaluate_method(m, ptr, d.val, 16, eo);
    const auto without = evaluate_method(m, ptr, d.val, 16);
    EXPECT_LE(with.nll, without.nll + 1e-9);
    EXPECT_NEAR(with.accuracy, without.accuracy, 1e-12);
    EXPECT_EQ(with.temperature, fit.temperature);
}

TEST(Methods, LastOnlyScopeAndEps) {
    const auto d = small_tabular();
    const auto nets = members(d, 1);
    const auto ptr = pointers(nets);
    auto m = method("last", NormMode::EvalBatch);
    m.bn_scope = BnScope::LastOnly;
    const auto o = m.predict_options();
    EXPECT_TRUE(o.last_norm_only);
    const auto p = method_probabilities(m, ptr, d.test, 103);
    const auto direct = predict_proba(nets[0], d.test.features, o);
    EXPECT_EQ(p.values(), direct.values());

    auto e = method("eps", NormMode::EvalEMA);
    e.eps = 0.5;
    const auto r = evaluate_method(e, ptr, d.test, 50);
    ASSERT_TRUE(r.eps.has_value());
    EXPECT_EQ(*r.eps, 0.5);
    PredictOptions po{NormMode::EvalEMA};
    po.eps = 0.5;
    EXPECT_DOUBLE_EQ(r.nll, oracle::nll(predict_proba(nets[0], d.test.features, po), d.test.labels));
}

TEST(Methods, RecordMetadata) {
    auto d = small_tabular();
    d.test.split = {"gaussian_noise", 3, 9};
    const auto nets = members(d, 1);
    const auto r = evaluate_method(method("ema", NormMode::EvalEMA), pointers(nets), d.test, 10, {15, 1.0, 4});
    EXPECT_EQ(r.method, "ema");
    EXPECT_EQ(r.shift_kind, "gaussian_noise");
    EXPECT_EQ(r.severity, 3);
    EXPECT_EQ(r.seed, 4u);
    EXPECT_EQ(r.batch_size, 10u);
    EXPECT_EQ(r.histogram.count.size(), 100u);
}
