#include "json_io.hpp"

#include "ptbn/error.hpp"

namespace ptbn {

using nlohmann::json;

namespace {

template <typename T>
T get_or(const json& j, const char* key, T fallback) {
    if (!j.contains(key) || j.at(key).is_null()) return fallback;
    try {
        return j.at(key).get<T>();
    } catch (const json::exception& e) {
        throw ConfigError(std::string("field '") + key + "': " + e.what());
    }
}

}  // namespace

json to_json(const NormKind& k) {
    return json{{"kind", std::string(to_string(k.type))},
                {"groups", k.groups},
                {"weight_standardization", k.weight_standardization}};
}

NormKind norm_kind_from_json(const json& j) {
    NormKind k;
    if (j.is_string()) {
        k.type = parse_norm_type(j.get<std::string>());
    } else {
        k.type = parse_norm_type(get_or<std::string>(j, "kind", "batch"));
        k.groups = get_or<std::size_t>(j, "groups", 2);
        k.weight_standardization = get_or<bool>(j, "weight_standardization", k.type == NormType::Group);
        return k;
    }
    if (k.type == NormType::Group) k.weight_standardization = true;
    return k;
}

json to_json(const ModelSpec& s) {
    return json{{"architecture", std::string(to_string(s.architecture))},
                {"hidden", s.hidden},
                {"strides", s.strides},
                {"norm", to_json(s.norm)},
                {"num_classes", s.num_classes},
                {"input_shape", s.input_shape},
                {"eps", s.eps},
                {"momentum", s.momentum},
                {"seed", s.seed}};
}

ModelSpec model_spec_from_json(const json& j) {
    ModelSpec s;
    s.architecture = parse_architecture(get_or<std::string>(j, "architecture", "mlp"));
    s.hidden = get_or<std::vector<std::size_t>>(j, "hidden", s.hidden);
    s.strides = get_or<std::vector<std::size_t>>(j, "strides", {});
    if (j.contains("norm")) s.norm = norm_kind_from_json(j.at("norm"));
    s.num_classes = get_or<std::size_t>(j, "num_classes", s.num_classes);
    s.input_shape = get_or<std::vector<std::size_t>>(j, "input_shape", s.input_shape);
    s.eps = get_or<double>(j, "eps", s.eps);
    s.momentum = get_or<double>(j, "momentum", s.momentum);
    s.seed = get_or<std::uint64_t>(j, "seed", s.seed);
    return s;
}

json to_json(const TrainConfig& c) {
    json drops = json::array();
    for (const auto& d : c.lr_drops) drops.push_back(json{{"epoch", d.epoch}, {"factor", d.factor}});
    return json{{"optimizer", c.optimizer == OptimizerKind::Adam ? "adam" : "sgd_nesterov"},
                {"learning_rate", c.learning_rate},
                {"momentum", c.momentum},
                {"adam_beta2", c.adam_beta2},
                {"adam_eps", c.adam_eps},
                {"batch_size", c.batch_size},
                {"epochs", c.epochs},
                {"lr_drops", drops},
                {"augment", c.augment},
                {"seed", c.seed}};
}

TrainConfig train_config_from_json(const json& j) {
    TrainConfig c;
    const auto opt = get_or<std::string>(j, "optimizer", "adam");
    if (opt == "adam") {
        c.optimizer = OptimizerKind::Adam;
    } else if (opt == "sgd_nesterov" || opt == "nesterov") {
        c.optimizer = OptimizerKind::SgdNesterov;
    } else {
        throw ConfigError("unknown optimizer '" + opt + "'");
    }
    c.learning_rate = get_or<double>(j, "learning_rate", c.learning_rate);
    c.momentum = get_or<double>(j, "momentum", c.momentum);
    c.adam_beta2 = get_or<double>(j, "adam_beta2", c.adam_beta2);
    c.adam_eps = get_or<double>(j, "adam_eps", c.adam_eps);
    c.batch_size = get_or<std::size_t>(j, "batch_size", c.batch_size);
    c.epochs = get_or<std::size_t>(j, "epochs", c.epochs);
    if (j.contains("lr_drops")) {
        for (const auto& d : j.at("lr_drops")) {
            c.lr_drops.push_back(LrDrop{get_or<std::size_t>(d, "epoch", 0), get_or<double>(d, "factor", 1.0)});
        }
    }
    c.augment = get_or<bool>(j, "augment", c.augment);
    c.seed = get_or<std::uint64_t>(j, "seed", c.seed);
    return c;
}

}  // namespace ptbn
