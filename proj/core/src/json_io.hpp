#pragma once

// nlohmann/json conversions for library types; internal to the core library.

#include <json.hpp>

#include "ptbn/model.hpp"

namespace ptbn {

nlohmann::json to_json(const NormKind& k);
NormKind norm_kind_from_json(const nlohmann::json& j);

nlohmann::json to_json(const ModelSpec& s);
ModelSpec model_spec_from_json(const nlohmann::json& j);

nlohmann::json to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const nlohmann::json& j);

}  // namespace ptbn
