#include "ptbn/harness.hpp"

#include <algorithm>
#include <atomic>
#include <bit>
#include <charconv>
#include <chrono>
#include <cmath>
#include <ctime>
#include <exception>
#include <fstream>
#include <iomanip>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include "json_io.hpp"
#include "ptbn/error.hpp"
#include "ptbn/rng.hpp"

#ifndef PTBN_VERSION
#define PTBN_VERSION "0.0.0"
#endif

namespace ptbn {

using nlohmann::json;
using ojson = nlohmann::ordered_json;

std::string_view code_version() { return PTBN_VERSION; }

// ---------------------------------------------------------------------------
// Config <-> JSON

namespace {

template <typename T>
T field(const json& j, const char* key, T fallback) {
    if (!j.contains(key) || j.at(key).is_null()) return fallback;
    try {
        return j.at(key).get<T>();
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config field '") + key + "': " + e.what());
    }
}

const char* dataset_kind_name(DatasetConfig::Kind k) {
    switch (k) {
        case DatasetConfig::Kind::SyntheticTabular: return "synthetic_tabular";
        case DatasetConfig::Kind::SyntheticImage: return "synthetic_image";
        case DatasetConfig::Kind::Csv: return "csv";
    }
    return "?";
}

json dataset_to_json(const DatasetConfig& d) {
    json j{{"kind", dataset_kind_name(d.kind)}};
    switch (d.kind) {
        case DatasetConfig::Kind::SyntheticTabular: {
            const auto& t = d.tabular;
            j.update(json{{"num_classes", t.num_classes},
                          {"num_features", t.num_features},
                          {"latent_factors", t.latent_factors},
                          {"class_separation", t.class_separation},
                          {"nuisance_scale", t.nuisance_scale},
                          {"noise", t.noise},
                          {"n_train", t.n_train},
                          {"n_val", t.n_val},
                          {"n_test", t.n_test},
                          {"seed", t.seed}});
            break;
        }
        case DatasetConfig::Kind::SyntheticImage: {
            const auto& s = d.image;
            j.update(json{{"num_classes", s.num_classes},
                          {"size", s.size},
                          {"channels", s.channels},
                          {"pixel_noise", s.pixel_noise},
                          {"n_train", s.n_train},
                          {"n_val", s.n_val},
                          {"n_test", s.n_test},
                          {"seed", s.seed}});
            break;
        }
        case DatasetConfig::Kind::Csv:
            j.update(json{{"train_path", d.train_path.string()},
                          {"val_path", d.val_path.string()},
                          {"test_path", d.test_path.string()},
                          {"num_classes", d.num_classes},
                          {"val_fraction", d.val_fraction}});
            if (d.image_shape) j["image_shape"] = *d.image_shape;
            break;
    }
    return j;
}

DatasetConfig dataset_from_json(const json& j) {
    DatasetConfig d;
    const auto kind = field<std::string>(j, "kind", "synthetic_tabular");
    if (kind == "synthetic_tabular") {
        d.kind = DatasetConfig::Kind::SyntheticTabular;
        auto& t = d.tabular;
        t.num_classes = field(j, "num_classes", t.num_classes);
        t.num_features = field(j, "num_features", t.num_features);
        t.latent_factors = field(j, "latent_factors", t.latent_factors);
        t.class_separation = field(j, "class_separation", t.class_separation);
        t.nuisance_scale = field(j, "nuisance_scale", t.nuisance_scale);
        t.noise = field(j, "noise", t.noise);
        t.n_train = field(j, "n_train", t.n_train);
        t.n_val = field(j, "n_val", t.n_val);
        t.n_test = field(j, "n_test", t.n_test);
        t.seed = field(j, "seed", t.seed);
    } else if (kind == "synthetic_image") {
        d.kind = DatasetConfig::Kind::SyntheticImage;
        auto& s = d.image;
        s.num_classes = field(j, "num_classes", s.num_classes);
        s.size = field(j, "size", s.size);
        s.channels = field(j, "channels", s.channels);
        s.pixel_noise = field(j, "pixel_noise", s.pixel_noise);
        s.n_train = field(j, "n_train", s.n_train);
        s.n_val = field(j, "n_val", s.n_val);
        s.n_test = field(j, "n_test", s.n_test);
        s.seed = field(j, "seed", s.seed);
    } else if (kind == "csv") {
        d.kind = DatasetConfig::Kind::Csv;
        d.train_path = field<std::string>(j, "train_path", "");
        d.val_path = field<std::string>(j, "val_path", "");
        d.test_path = field<std::string>(j, "test_path", "");
        d.num_classes = field<std::size_t>(j, "num_classes", 0);
        d.val_fraction = field(j, "val_fraction", d.val_fraction);
        if (j.contains("image_shape")) d.image_shape = field<Shape>(j, "image_shape", {});
    } else {
        throw ConfigError("unknown dataset kind '" + kind + "'");
    }
    return d;
}

std::string freeze_policy_name(FreezePolicy p) {
    return p == FreezePolicy::BatchUpstream ? "batch_upstream" : "ema_upstream";
}

FreezePolicy parse_freeze_policy(const std::string& s) {
    if (s == "batch_upstream") return FreezePolicy::BatchUpstream;
    if (s == "ema_upstream") return FreezePolicy::EmaUpstream;
    throw ConfigError("unknown freeze_policy '" + s + "'");
}

json method_to_json(const MethodSpec& m) {
    json j{{"name", m.name},
           {"ensemble", m.ensemble},
           {"bn_mode", std::string(to_string(m.bn_mode))},
           {"bn_scope", std::string(to_string(m.bn_scope))},
           {"temperature", m.fit_temperature ? "fitted" : "none"}};
    if (m.norm) j["norm"] = to_json(*m.norm);
    if (m.architecture) j["architecture"] = std::string(to_string(*m.architecture));
    if (m.eps) j["eps"] = *m.eps;
    if (m.freeze_policy) j["freeze_policy"] = freeze_policy_name(*m.freeze_policy);
    return j;
}

MethodSpec method_from_json(const json& j) {
    MethodSpec m;
    m.name = field<std::string>(j, "name", "");
    m.ensemble = field<std::size_t>(j, "ensemble", 1);
    m.bn_mode = parse_norm_mode(field<std::string>(j, "bn_mode", "ema"));
    m.bn_scope = parse_bn_scope(field<std::string>(j, "bn_scope", "all"));
    const auto temp = field<std::string>(j, "temperature", "none");
    if (temp != "none" && temp != "fitted") throw ConfigError("temperature must be 'none' or 'fitted'");
    m.fit_temperature = temp == "fitted";
    if (j.contains("norm")) m.norm = norm_kind_from_json(j.at("norm"));
    if (j.contains("architecture")) m.architecture = parse_architecture(field<std::string>(j, "architecture", ""));
    if (j.contains("eps")) m.eps = field<double>(j, "eps", 0.0);
    if (j.contains("freeze_policy")) {
        m.freeze_policy = parse_freeze_policy(field<std::string>(j, "freeze_policy", ""));
    } else if (m.bn_mode == NormMode::EvalFrozen) {
        m.freeze_policy = FreezePolicy::BatchUpstream;
    }
    return m;
}

json config_to_json(const ExperimentConfig& c, bool for_hash) {
    json shifts = json::array();
    for (const auto& s : c.shifts) {
        shifts.push_back(json{{"kind", std::string(to_string(s.kind))}, {"severities", s.severities}});
    }
    json methods = json::array();
    for (const auto& m : c.methods) methods.push_back(method_to_json(m));
    json model = to_json(c.model);
    if (c.model_shape_from_data) {
        model.erase("input_shape");
        model.erase("num_classes");
    }
    model.erase("seed");  // per member, derived from the run seeds
    json train = to_json(c.train);
    train.erase("seed");
    json j{{"schema_version", ExperimentConfig::kSchemaVersion},
           {"name", c.name},
           {"dataset", dataset_to_json(c.dataset)},
           {"model", model},
           {"train", train},
           {"methods", methods},
           {"include_clean", c.include_clean},
           {"shifts", shifts},
           {"batch_sizes", c.batch_sizes},
           {"seeds", c.seeds},
           {"shift_seed", c.shift_seed},
           {"eps_multipliers", c.eps_multipliers},
           {"diagnose",
            {{"histogram_layers", c.diagnose.histogram_layers},
             {"histogram_channels", c.diagnose.histogram_channels},
             {"histogram_bins", c.diagnose.histogram_bins},
             {"reference_size", c.diagnose.reference_size},
             {"n_keep", c.diagnose.n_keep}}}};
    if (c.mixed) {
        std::vector<std::string> kinds;
        for (auto k : c.mixed->kinds) kinds.emplace_back(to_string(k));
        j["mixed"] = json{{"kinds", kinds}, {"severity", c.mixed->severity}};
    }
    if (!for_hash) {
        j["output_dir"] = c.output_dir.string();
        j["workers"] = c.workers;
    }
    return j;
}

std::string hex64(std::uint64_t v) {
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << v;
    return os.str();
}

std::string utc_timestamp() {
    const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    std::ostringstream os;
    os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
    return os.str();
}

std::string read_file(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw MissingArtifactError("cannot read " + p.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_file(const std::filesystem::path& p, const std::string& text) {
    if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + p.string());
    out << text;
    if (!out) throw Error("failed writing " + p.string());
}

void log_line(const CommandOptions& opts, const std::string& line) {
    if (opts.log) opts.log(line);
}

}  // namespace

void ExperimentConfig::validate() const {
    if (methods.empty()) throw ConfigError("config: method list is empty");
    std::set<std::string> names;
    for (const auto& m : methods) {
        m.validate();
        if (!names.insert(m.name).second) throw ConfigError("config: duplicate method name '" + m.name + "'");
    }
    if (!include_clean && shifts.empty() && !mixed) throw ConfigError("config: shift grid is empty");
    for (const auto& s : shifts) {
        if (s.kind != ShiftKind::Identity && s.severities.empty()) {
            throw ConfigError(std::string("config: no severities for ") + std::string(to_string(s.kind)));
        }
        for (double v : s.severities) ShiftSpec{s.kind, v, 0}.validate();
        const bool image_data = dataset.kind == DatasetConfig::Kind::SyntheticImage ||
                                (dataset.kind == DatasetConfig::Kind::Csv && dataset.image_shape);
        if (is_image_kind(s.kind) && !image_data) {
            throw ConfigError(std::string("config: ") + std::string(to_string(s.kind)) + " needs image data");
        }
        if (s.kind == ShiftKind::FeatureRandomize && image_data) {
            throw ConfigError("config: feature_randomize needs tabular data");
        }
    }
    if (mixed) {
        if (mixed->kinds.empty()) throw ConfigError("config: mixed shift needs kinds");
        for (auto k : mixed->kinds) {
            if (!is_image_kind(k)) throw ConfigError("config: mixed shifts combine image corruptions");
            ShiftSpec{k, mixed->severity, 0}.validate();
        }
    }
    if (batch_sizes.empty()) throw ConfigError("config: batch-size grid is empty");
    for (auto t : batch_sizes) {
        if (t == 0) throw ConfigError("config: batch sizes must be positive");
    }
    if (seeds.empty()) throw ConfigError("config: seed list is empty");
    for (double m : eps_multipliers) {
        if (!(m > 0.0)) throw ConfigError("config: eps multipliers must be positive");
    }
    if (workers == 0) throw ConfigError("config: workers must be positive");
    if (diagnose.histogram_bins == 0 || diagnose.reference_size < 2) throw ConfigError("config: bad diagnose section");
    if (dataset.kind == DatasetConfig::Kind::Csv) {
        for (const auto& p : {dataset.train_path, dataset.test_path}) {
            if (p.empty()) throw ConfigError("config: csv dataset needs train_path and test_path");
            if (!std::filesystem::exists(p)) throw MissingArtifactError("dataset file not found: " + p.string());
        }
        if (!dataset.val_path.empty() && !std::filesystem::exists(dataset.val_path)) {
            throw MissingArtifactError("dataset file not found: " + dataset.val_path.string());
        }
        if (dataset.num_classes < 2) throw ConfigError("config: csv dataset needs num_classes");
    }
    train.validate();
    ModelSpec probe = model;
    if (model_shape_from_data) {
        probe.input_shape = probe.is_cnn() ? Shape{3, 8, 8} : Shape{4};
        probe.num_classes = std::max<std::size_t>(2, probe.num_classes);
    }
    for (const auto& m : methods) {
        ModelSpec variant = probe;
        if (m.architecture) variant.architecture = *m.architecture;
        if (m.norm) variant.norm = *m.norm;
        if (model_shape_from_data && variant.is_cnn() != probe.is_cnn()) {
            throw ConfigError("config: method '" + m.name + "' switches between MLP and CNN");
        }
        try {
            variant.validate();
        } catch (const ConfigError& e) {
            throw ConfigError("config: method '" + m.name + "': " + e.what());
        }
    }
}

std::string ExperimentConfig::hash() const { return hex64(hash_string(config_to_json(*this, true).dump())); }

std::string ExperimentConfig::to_json_string() const { return config_to_json(*this, false).dump(2); }

ExperimentConfig parse_config(std::string_view text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
    if (!j.is_object()) throw ConfigError("config must be a JSON object");
    const int version = field<int>(j, "schema_version", ExperimentConfig::kSchemaVersion);
    if (version != ExperimentConfig::kSchemaVersion) {
        throw ConfigError("unsupported config schema_version " + std::to_string(version));
    }
    ExperimentConfig c;
    try {
        c.name = field<std::string>(j, "name", c.name);
        if (j.contains("dataset")) c.dataset = dataset_from_json(j.at("dataset"));
        if (j.contains("model")) {
            const auto& m = j.at("model");
            c.model = model_spec_from_json(m);
            c.model_shape_from_data = !m.contains("input_shape");
        }
        if (j.contains("train")) c.train = train_config_from_json(j.at("train"));
        if (j.contains("methods")) {
            for (const auto& m : j.at("methods")) c.methods.push_back(method_from_json(m));
        }
        c.include_clean = field(j, "include_clean", c.include_clean);
        if (j.contains("shifts")) {
            for (const auto& s : j.at("shifts")) {
                ShiftGridEntry e;
                e.kind = parse_shift_kind(field<std::string>(s, "kind", "identity"));
                if (s.contains("severities")) {
                    e.severities = field<std::vector<double>>(s, "severities", {});
                } else if (e.kind == ShiftKind::FeatureRandomize) {
                    e.severities.assign(std::begin(kRandomizeGrid), std::end(kRandomizeGrid));
                } else if (e.kind != ShiftKind::Identity) {
                    e.severities = {1, 2, 3, 4, 5};
                }
                c.shifts.push_back(std::move(e));
            }
        }
        if (j.contains("mixed") && !j.at("mixed").is_null()) {
            MixedShiftConfig m;
            for (const auto& k : field<std::vector<std::string>>(j.at("mixed"), "kinds", {})) {
                m.kinds.push_back(parse_shift_kind(k));
            }
            m.severity = field(j.at("mixed"), "severity", m.severity);
            c.mixed = std::move(m);
        }
        c.batch_sizes = field(j, "batch_sizes", c.batch_sizes);
        c.seeds = field(j, "seeds", c.seeds);
        c.shift_seed = field(j, "shift_seed", c.shift_seed);
        c.eps_multipliers = field(j, "eps_multipliers", c.eps_multipliers);
        if (j.contains("diagnose")) {
            const auto& d = j.at("diagnose");
            c.diagnose.histogram_layers = field(d, "histogram_layers", c.diagnose.histogram_layers);
            c.diagnose.histogram_channels = field(d, "histogram_channels", c.diagnose.histogram_channels);
            c.diagnose.histogram_bins = field(d, "histogram_bins", c.diagnose.histogram_bins);
            c.diagnose.reference_size = field(d, "reference_size", c.diagnose.reference_size);
            c.diagnose.n_keep = field(d, "n_keep", c.diagnose.n_keep);
        }
        c.output_dir = field<std::string>(j, "output_dir", c.output_dir.string());
        c.workers = field(j, "workers", c.workers);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    c.validate();
    return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_config(ss.str());
}

void apply_overrides(ExperimentConfig& cfg, const Overrides& o) {
    if (o.output_dir) cfg.output_dir = *o.output_dir;
    if (o.seed) cfg.seeds = {*o.seed};
    if (o.workers) cfg.workers = *o.workers;
    cfg.validate();
}

// ---------------------------------------------------------------------------
// Data, splits, model families

DataSplits load_data(const DatasetConfig& cfg) {
    switch (cfg.kind) {
        case DatasetConfig::Kind::SyntheticTabular: return make_tabular(cfg.tabular);
        case DatasetConfig::Kind::SyntheticImage: return make_images(cfg.image);
        case DatasetConfig::Kind::Csv: break;
    }
    DataSplits d;
    Dataset train = load_csv(cfg.train_path, cfg.num_classes, cfg.image_shape);
    d.test = load_csv(cfg.test_path, cfg.num_classes, cfg.image_shape);
    if (!cfg.val_path.empty()) {
        d.val = load_csv(cfg.val_path, cfg.num_classes, cfg.image_shape);
        d.train = std::move(train);
    } else {
        if (!(cfg.val_fraction > 0.0 && cfg.val_fraction < 1.0)) throw ConfigError("val_fraction must lie in (0, 1)");
        const auto n_val = std::max<std::size_t>(1, static_cast<std::size_t>(cfg.val_fraction * train.size()));
        if (n_val >= train.size()) throw ConfigError("training file too small to carve a validation set");
        d.val = train.slice(train.size() - n_val, train.size());
        d.train = train.slice(0, train.size() - n_val);
    }
    return d;
}

ModelSpec resolve_model(const ExperimentConfig& cfg, const DataSplits& data) {
    ModelSpec m = cfg.model;
    if (cfg.model_shape_from_data) {
        m.input_shape = data.train.input_shape();
        m.num_classes = data.train.num_classes;
    }
    return m;
}

std::vector<Dataset> build_eval_splits(const ExperimentConfig& cfg, const DataSplits& data) {
    std::vector<Dataset> out;
    std::optional<FeatureMarginals> marginals;
    if (data.train.modality == Modality::Tabular) marginals.emplace(data.train);
    const FeatureMarginals* fm = marginals ? &*marginals : nullptr;
    auto spec_for = [&](ShiftKind k, double severity) {
        const std::uint64_t s = derive_seed(derive_seed(cfg.shift_seed, hash_string(to_string(k))),
                                            std::bit_cast<std::uint64_t>(severity));
        return ShiftSpec{k, severity, s};
    };
    if (cfg.include_clean) out.push_back(build_split(data.test, ShiftSpec{}, nullptr));
    for (const auto& e : cfg.shifts) {
        if (e.kind == ShiftKind::Identity) {
            if (!cfg.include_clean) out.push_back(build_split(data.test, ShiftSpec{}, nullptr));
            continue;
        }
        for (double sev : e.severities) out.push_back(build_split(data.test, spec_for(e.kind, sev), fm));
    }
    if (cfg.mixed) {
        std::vector<Dataset> parts;
        for (auto k : cfg.mixed->kinds) parts.push_back(build_split(data.test, spec_for(k, cfg.mixed->severity), fm));
        out.push_back(mix_splits(parts, derive_seed(cfg.shift_seed, hash_string("mixed"))));
    }
    return out;
}

std::string ModelFamily::tag() const {
    std::string t = std::string(to_string(architecture)) + "_" + std::string(to_string(norm.type));
    if (norm.type == NormType::Group) {
        t += std::to_string(norm.groups);
        if (norm.weight_standardization) t += "_ws";
    }
    return t;
}

ModelFamily family_of(const ExperimentConfig& cfg, const MethodSpec& m) {
    return ModelFamily{m.architecture.value_or(cfg.model.architecture), m.norm.value_or(cfg.model.norm)};
}

std::vector<ModelFamily> families(const ExperimentConfig& cfg) {
    std::vector<ModelFamily> out;
    for (const auto& m : cfg.methods) {
        const auto f = family_of(cfg, m);
        if (std::find(out.begin(), out.end(), f) == out.end()) out.push_back(f);
    }
    return out;
}

std::size_t members_needed(const ExperimentConfig& cfg, const ModelFamily& f) {
    std::size_t n = 0;
    for (const auto& m : cfg.methods) {
        if (family_of(cfg, m) == f) n = std::max(n, m.ensemble);
    }
    return n;
}

std::filesystem::path checkpoint_path(const ExperimentConfig& cfg, const ModelFamily& f, std::uint64_t seed,
                                      std::size_t member) {
    return cfg.output_dir / "checkpoints" / f.tag() / ("seed" + std::to_string(seed)) /
           ("member" + std::to_string(member) + ".ckpt");
}

std::uint64_t member_seed(std::uint64_t seed, std::size_t member) {
    return member == 0 ? seed : derive_seed(seed, member);
}

// ---------------------------------------------------------------------------
// Tables

namespace {

std::string format_double(double v) {
    if (!std::isfinite(v)) return std::isnan(v) ? "nan" : (v > 0 ? "inf" : "-inf");
    char buf[64];
    const auto r = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, r.ptr);
}

std::string csv_cell(const Cell& c) {
    return std::visit(
        [](const auto& v) -> std::string {
            using T = std::decay_t<decltype(v)>;
            if constexpr (std::is_same_v<T, std::monostate>) {
                return "";
            } else if constexpr (std::is_same_v<T, std::string>) {
                if (v.find_first_of(",\"\n") == std::string::npos) return v;
                std::string q = "\"";
                for (char ch : v) {
                    if (ch == '"') q += '"';
                    q += ch;
                }
                return q + "\"";
            } else if constexpr (std::is_same_v<T, std::int64_t>) {
                return std::to_string(v);
            } else {
                return format_double(v);
            }
        },
        c);
}

std::string json_cell(const Cell& c) {
    return std::visit(
        [](const auto& v) -> std::string {
            using T = std::decay_t<decltype(v)>;
            if constexpr (std::is_same_v<T, std::monostate>) {
                return "null";
            } else if constexpr (std::is_same_v<T, std::string>) {
                return json(v).dump();
            } else if constexpr (std::is_same_v<T, std::int64_t>) {
                return std::to_string(v);
            } else {
                return std::isfinite(v) ? format_double(v) : "null";
            }
        },
        c);
}

}  // namespace

std::string Table::to_csv() const {
    std::string out;
    for (std::size_t i = 0; i < columns.size(); ++i) out += (i ? "," : "") + columns[i];
    out += '\n';
    for (const auto& row : rows) {
        if (row.size() != columns.size()) throw Error("table " + name + ": ragged row");
        for (std::size_t i = 0; i < row.size(); ++i) out += (i ? "," : "") + csv_cell(row[i]);
        out += '\n';
    }
    return out;
}

std::string Table::to_jsonl() const {
    std::string out;
    for (const auto& row : rows) {
        out += '{';
        for (std::size_t i = 0; i < row.size(); ++i) {
            out += (i ? "," : "") + json(columns[i]).dump() + ":" + json_cell(row[i]);
        }
        out += "}\n";
    }
    return out;
}

void write_table(const Table& t, const std::filesystem::path& dir) {
    write_file(dir / (t.name + ".csv"), t.to_csv());
    write_file(dir / (t.name + ".jsonl"), t.to_jsonl());
}

Table read_table(const std::filesystem::path& jsonl, std::string name) {
    Table t;
    t.name = std::move(name);
    std::ifstream in(jsonl);
    if (!in) throw MissingArtifactError("missing table " + jsonl.string());
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const ojson row = ojson::parse(line);
        if (t.columns.empty()) {
            for (const auto& [k, v] : row.items()) t.columns.push_back(k);
        }
        std::vector<Cell> cells;
        for (const auto& col : t.columns) {
            const auto& v = row.at(col);
            if (v.is_null()) {
                cells.emplace_back(std::monostate{});
            } else if (v.is_string()) {
                cells.emplace_back(v.get<std::string>());
            } else if (v.is_number_integer()) {
                cells.emplace_back(v.get<std::int64_t>());
            } else {
                cells.emplace_back(v.get<double>());
            }
        }
        t.rows.push_back(std::move(cells));
    }
    return t;
}

// ---------------------------------------------------------------------------
// ResultStore

ResultStore::ResultStore(std::filesystem::path root) : root_(std::move(root)) {}

namespace {

json read_meta(const std::filesystem::path& root) {
    const auto p = root / "run_meta.json";
    if (!std::filesystem::exists(p)) return json::object();
    try {
        return json::parse(read_file(p));
    } catch (const json::exception&) {
        throw ConfigError("corrupt " + p.string());
    }
}

}  // namespace

bool ResultStore::completed(const std::string& command, const std::string& config_hash) const {
    const json meta = read_meta(root_);
    if (!meta.contains("commands") || !meta["commands"].contains(command)) return false;
    return meta["commands"][command].value("config_hash", "") == config_hash;
}

void ResultStore::check_owner(const std::string& config_hash, bool force) const {
    const json meta = read_meta(root_);
    const auto owner = meta.value("config_hash", std::string());
    if (!owner.empty() && owner != config_hash && !force) {
        throw ConfigError("output directory " + root_.string() + " holds results of config " + owner +
                          " (this config is " + config_hash + "); use --force or another --out");
    }
}

void ResultStore::mark_completed(const std::string& command, const std::string& config_hash) {
    json meta = read_meta(root_);
    if (meta.value("config_hash", std::string()) != config_hash) {
        meta = json::object();
        meta["created_at"] = utc_timestamp();
    }
    meta["config_hash"] = config_hash;
    meta["code_version"] = std::string(code_version());
    meta["schema_version"] = ExperimentConfig::kSchemaVersion;
    meta["commands"][command] = json{{"config_hash", config_hash}, {"completed_at", utc_timestamp()}};
    write_file(root_ / "run_meta.json", meta.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// Parallel helper

void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& fn) {
    workers = std::max<std::size_t>(1, std::min(workers, n));
    if (workers == 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::vector<std::exception_ptr> errors(n);
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&] {
            for (std::size_t i = next++; i < n; i = next++) {
                try {
                    fn(i);
                } catch (...) {
                    errors[i] = std::current_exception();
                }
            }
        });
    }
    for (auto& t : pool) t.join();
    for (auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }
}

// ---------------------------------------------------------------------------
// Commands

namespace {

std::string member_train_hash(const DatasetConfig& data, const ModelSpec& spec, const TrainConfig& train) {
    const json j{{"dataset", dataset_to_json(data)}, {"model", to_json(spec)}, {"train", to_json(train)},
                 {"format", Checkpoint::kFormatVersion}};
    return hex64(hash_string(j.dump()));
}

struct MemberJob {
    ModelFamily family;
    std::uint64_t seed;
    std::size_t member;
};

std::vector<MemberJob> member_jobs(const ExperimentConfig& cfg) {
    std::vector<MemberJob> jobs;
    for (const auto& f : families(cfg))
        for (auto seed : cfg.seeds)
            for (std::size_t j = 0; j < members_needed(cfg, f); ++j) jobs.push_back({f, seed, j});
    return jobs;
}

ModelSpec member_spec(const ModelSpec& base, const ModelFamily& f, std::uint64_t seed, std::size_t member) {
    ModelSpec s = base;
    s.architecture = f.architecture;
    s.norm = f.norm;
    s.seed = member_seed(seed, member);
    return s;
}

TrainConfig member_train(const TrainConfig& base, std::uint64_t seed, std::size_t member) {
    TrainConfig t = base;
    t.seed = member_seed(seed, member);
    return t;
}

// Checkpoints for every (family, seed), loaded once.
class ModelBank {
   public:
    ModelBank(const ExperimentConfig& cfg, const ModelSpec& resolved) {
        for (const auto& job : member_jobs(cfg)) {
            const auto path = checkpoint_path(cfg, job.family, job.seed, job.member);
            if (!std::filesystem::exists(path)) {
                throw MissingArtifactError("missing checkpoint " + path.string() + " (run 'train' first)");
            }
            Checkpoint ck = load_checkpoint(path);
            const ModelSpec want = member_spec(resolved, job.family, job.seed, job.member);
            if (to_json(ck.spec) != to_json(want)) {
                throw MissingArtifactError("checkpoint " + path.string() +
                                           " was trained for another config (run 'train --force')");
            }
            bank_[key(job.family, job.seed)].push_back(std::move(ck));
        }
    }

    std::vector<const Network*> members(const ModelFamily& f, std::uint64_t seed, std::size_t n) const {
        const auto& v = bank_.at(key(f, seed));
        if (v.size() < n) throw MissingArtifactError("not enough ensemble members for " + f.tag());
        std::vector<const Network*> out;
        for (std::size_t i = 0; i < n; ++i) out.push_back(&v[i].net);
        return out;
    }

   private:
    static std::string key(const ModelFamily& f, std::uint64_t seed) { return f.tag() + "#" + std::to_string(seed); }
    std::map<std::string, std::vector<Checkpoint>> bank_;
};

Cell opt_cell(const std::optional<double>& v) { return v ? Cell(*v) : Cell(std::monostate{}); }
Cell icell(std::uint64_t v) { return Cell(static_cast<std::int64_t>(v)); }


std::vector<std::string> eval_columns() {
    return {"config_hash", "seed",    "method",          "shift_kind", "severity", "batch_size",
            "eps",         "temperature", "accuracy",    "ece",        "brier",    "brier_per_class",
            "nll",         "count",   "num_batches",     "last_batch_size"};
}

std::vector<Cell> eval_row(const std::string& hash, const EvalRecord& r) {
    return {hash,
            icell(r.seed),
            r.method,
            r.shift_kind,
            r.severity,
            icell(r.batch_size),
            opt_cell(r.eps),
            r.temperature,
            r.accuracy,
            r.ece,
            r.brier,
            r.brier_per_class,
            r.nll,
            icell(r.count),
            icell(r.num_batches),
            icell(r.last_batch_size)};
}

}  // namespace

TrainSummary cmd_train(const ExperimentConfig& cfg, const CommandOptions& opts) {
    cfg.validate();
    ResultStore store(cfg.output_dir);
    store.check_owner(cfg.hash(), opts.force);
    const DataSplits data = load_data(cfg.dataset);
    const ModelSpec resolved = resolve_model(cfg, data);
    const auto jobs = member_jobs(cfg);
    std::vector<int> trained(jobs.size(), 0);
    std::mutex log_mutex;
    parallel_for(jobs.size(), cfg.workers, [&](std::size_t i) {
        const auto& job = jobs[i];
        const ModelSpec spec = member_spec(resolved, job.family, job.seed, job.member);
        const TrainConfig tc = member_train(cfg.train, job.seed, job.member);
        const auto path = checkpoint_path(cfg, job.family, job.seed, job.member);
        const auto meta_path = std::filesystem::path(path.string() + ".json");
        const std::string h = member_train_hash(cfg.dataset, spec, tc);
        if (!opts.force && std::filesystem::exists(path) && std::filesystem::exists(meta_path)) {
            const json meta = json::parse(read_file(meta_path));
            if (meta.value("train_hash", "") == h) return;
        }
        Checkpoint ck = train(spec, tc, data.train);
        save_checkpoint(ck, path);
        write_file(meta_path, json{{"train_hash", h}, {"final_loss", ck.loss_history.back()}}.dump(2) + "\n");
        trained[i] = 1;
        std::lock_guard lock(log_mutex);
        log_line(opts, "trained " + job.family.tag() + " seed " + std::to_string(job.seed) + " member " +
                           std::to_string(job.member) + " (final loss " + format_double(ck.loss_history.back()) + ")");
    });
    TrainSummary s;
    for (int t : trained) (t ? s.trained : s.reused) += 1;
    store.mark_completed("train", cfg.hash());
    return s;
}

EvalOutput cmd_eval(const ExperimentConfig& cfg, const CommandOptions& opts) {
    cfg.validate();
    const std::string hash = cfg.hash();
    ResultStore store(cfg.output_dir);
    store.check_owner(hash, opts.force);
    EvalOutput out;
    if (!opts.force && store.completed("eval", hash) &&
        std::filesystem::exists(cfg.output_dir / "results" / "eval.csv")) {
        log_line(opts, "eval: results for config " + hash + " are up to date (use --force to recompute)");
        out.skipped = true;
        return out;
    }
    const DataSplits data = load_data(cfg.dataset);
    const ModelSpec resolved = resolve_model(cfg, data);
    const ModelBank bank(cfg, resolved);
    const auto splits = build_eval_splits(cfg, data);

    struct TempKey {
        std::size_t seed, method, batch;
    };
    std::vector<TempKey> temp_jobs;
    for (std::size_t s = 0; s < cfg.seeds.size(); ++s)
        for (std::size_t m = 0; m < cfg.methods.size(); ++m)
            for (std::size_t b = 0; b < cfg.batch_sizes.size(); ++b) temp_jobs.push_back({s, m, b});
    std::vector<double> temps(temp_jobs.size(), 1.0);
    parallel_for(temp_jobs.size(), cfg.workers, [&](std::size_t i) {
        const auto& k = temp_jobs[i];
        const auto& method = cfg.methods[k.method];
        if (!method.fit_temperature) return;
        const auto members = bank.members(family_of(cfg, method), cfg.seeds[k.seed], method.ensemble);
        temps[i] = fit_method_temperature(method, members, data.val, cfg.batch_sizes[k.batch]).temperature;
    });

    const std::size_t S = splits.size(), B = cfg.batch_sizes.size(), M = cfg.methods.size();
    const std::size_t cells = cfg.seeds.size() * M * S * B;
    out.records.resize(cells);
    parallel_for(cells, cfg.workers, [&](std::size_t i) {
        const std::size_t b = i % B, sp = (i / B) % S, m = (i / (B * S)) % M, s = i / (B * S * M);
        const auto& method = cfg.methods[m];
        const auto members = bank.members(family_of(cfg, method), cfg.seeds[s], method.ensemble);
        EvalOptions eo;
        eo.temperature = temps[(s * M + m) * B + b];
        eo.seed = cfg.seeds[s];
        out.records[i] = evaluate_method(method, members, splits[sp], cfg.batch_sizes[b], eo);
    });

    Table eval{"eval", eval_columns(), {}};
    Table hist{"eval_histograms",
               {"config_hash", "seed", "method", "shift_kind", "severity", "batch_size", "bin", "count", "correct"},
               {}};
    for (const auto& r : out.records) {
        eval.rows.push_back(eval_row(hash, r));
        for (std::size_t bin = 0; bin < r.histogram.count.size(); ++bin) {
            if (r.histogram.count[bin] == 0) continue;
            hist.rows.push_back({hash, icell(r.seed), r.method, r.shift_kind, r.severity, icell(r.batch_size),
                                 icell(bin), icell(r.histogram.count[bin]), icell(r.histogram.correct[bin])});
        }
    }
    write_table(eval, cfg.output_dir / "results");
    write_table(hist, cfg.output_dir / "results");
    store.mark_completed("eval", hash);
    log_line(opts, "eval: wrote " + std::to_string(out.records.size()) + " records");
    return out;
}

DiagnoseOutput cmd_diagnose(const ExperimentConfig& cfg, const CommandOptions& opts) {
    cfg.validate();
    const std::string hash = cfg.hash();
    ResultStore store(cfg.output_dir);
    store.check_owner(hash, opts.force);
    DiagnoseOutput out;
    if (!opts.force && store.completed("diagnose", hash) &&
        std::filesystem::exists(cfg.output_dir / "diagnostics" / "discrepancy.csv")) {
        log_line(opts, "diagnose: results for config " + hash + " are up to date (use --force to recompute)");
        out.skipped = true;
        return out;
    }
    const DataSplits data = load_data(cfg.dataset);
    const ModelSpec resolved = resolve_model(cfg, data);
    // The base family only: the config's own architecture and norm.
    ExperimentConfig base_cfg = cfg;
    MethodSpec probe;
    probe.name = "probe";
    base_cfg.methods = {probe};
    const ModelBank bank(base_cfg, resolved);
    const ModelFamily family = family_of(cfg, probe);
    const auto splits = build_eval_splits(cfg, data);
    const std::size_t t = cfg.batch_sizes.front();
    const Tensor reference =
        data.train.features.slice_rows(0, std::min(cfg.diagnose.reference_size, data.train.size()));

    std::vector<std::string> hist_layers = cfg.diagnose.histogram_layers;
    {
        const auto names = bank.members(family, cfg.seeds.front(), 1).front()->norm_layer_names();
        if (hist_layers.empty()) hist_layers = names;
    }
    std::vector<std::string> layers{"penultimate", "logits"};
    layers.insert(layers.end(), hist_layers.begin(), hist_layers.end());

    const std::vector<NormMode> modes{NormMode::EvalEMA, NormMode::EvalBatch};
    struct Cellout {
        DiscrepancyRow disc;
        std::vector<std::vector<Cell>> hist, eig, conf;
    };
    const std::size_t S = splits.size();
    std::vector<Cellout> results(cfg.seeds.size() * modes.size() * S);
    // Reference summaries per (seed, mode).
    std::vector<std::vector<ActivationSummary>> ref(cfg.seeds.size() * modes.size());
    parallel_for(ref.size(), cfg.workers, [&](std::size_t i) {
        const auto* net = bank.members(family, cfg.seeds[i / modes.size()], 1).front();
        PredictOptions po;
        po.mode = modes[i % modes.size()];
        ref[i] = capture_activations(*net, reference, po, layers, t, cfg.diagnose.n_keep, cfg.seeds[i / modes.size()]);
    });

    parallel_for(results.size(), cfg.workers, [&](std::size_t i) {
        const std::size_t sp = i % S, md = (i / S) % modes.size(), s = i / (S * modes.size());
        const std::uint64_t seed = cfg.seeds[s];
        const NormMode mode = modes[md];
        const std::string mode_name(to_string(mode));
        const auto members = bank.members(family, seed, 1);
        const Dataset& split = splits[sp];
        PredictOptions po;
        po.mode = mode;
        const auto sums = capture_activations(*members.front(), split.features, po, layers, t, cfg.diagnose.n_keep,
                                              derive_seed(seed, sp + 1));
        const auto& train_sums = ref[s * modes.size() + md];
        MethodSpec method;
        method.name = mode_name;
        method.bn_mode = mode;
        const EvalRecord rec = evaluate_method(method, members, split, t);
        Cellout& c = results[i];
        c.disc = DiscrepancyRow{seed, mode_name, split.split.kind, split.split.severity,
                                gaussian_kl_discrepancy(train_sums[0], sums[0], sums[0].sample_tensor()), rec.brier};
        for (std::size_t l = 0; l < 2; ++l) {
            const auto ev = covariance_eigenspectrum(sums[l]);
            for (std::size_t k = 0; k < ev.size(); ++k) {
                c.eig.push_back({hash, icell(seed), mode_name, split.split.kind, split.split.severity, layers[l],
                                 icell(k), ev[k]});
            }
        }
        for (std::size_t l = 2; l < layers.size(); ++l) {
            std::vector<std::size_t> channels;
            for (auto ch : cfg.diagnose.histogram_channels) {
                if (ch < sums[l].channels()) channels.push_back(ch);
            }
            for (auto ch : channels) {
                const std::size_t one[] = {ch};
                const ActivationSummary* pair[] = {&train_sums[l], &sums[l]};
                const auto range = shared_range(pair, one);
                for (int src = 0; src < 2; ++src) {
                    const auto h = histogram_dump(*pair[src], one, cfg.diagnose.histogram_bins, range);
                    for (std::size_t b = 0; b < h.bins; ++b) {
                        const double width = (h.hi - h.lo) / static_cast<double>(h.bins);
                        c.hist.push_back({hash, icell(seed), mode_name, split.split.kind, split.split.severity,
                                          layers[l], icell(ch), std::string(src == 0 ? "train" : "split"), icell(b),
                                          h.lo + width * static_cast<double>(b),
                                          h.lo + width * static_cast<double>(b + 1), icell(h.counts[0][b])});
                    }
                }
            }
        }
        for (std::size_t b = 0; b < rec.histogram.count.size(); ++b) {
            if (rec.histogram.count[b] == 0) continue;
            c.conf.push_back({hash, icell(seed), mode_name, split.split.kind, split.split.severity, icell(b),
                              icell(rec.histogram.count[b]), icell(rec.histogram.correct[b])});
        }
    });

    Table disc{"discrepancy",
               {"config_hash", "seed", "mode", "shift_kind", "severity", "layer", "discrepancy", "brier"},
               {}};
    Table eig{"eigenspectra",
              {"config_hash", "seed", "mode", "shift_kind", "severity", "layer", "index", "eigenvalue"},
              {}};
    Table hist{"histograms",
               {"config_hash", "seed", "mode", "shift_kind", "severity", "layer", "channel", "source", "bin", "lo",
                "hi", "count"},
               {}};
    Table conf{"confidence",
               {"config_hash", "seed", "mode", "shift_kind", "severity", "bin", "count", "correct"},
               {}};
    for (auto& c : results) {
        out.discrepancy.push_back(c.disc);
        disc.rows.push_back({hash, icell(c.disc.seed), c.disc.mode, c.disc.shift_kind, c.disc.severity,
                             std::string("penultimate"), c.disc.discrepancy, c.disc.brier});
        for (auto& r : c.eig) eig.rows.push_back(std::move(r));
        for (auto& r : c.hist) hist.rows.push_back(std::move(r));
        for (auto& r : c.conf) conf.rows.push_back(std::move(r));
    }
    const auto dir = cfg.output_dir / "diagnostics";
    for (const auto* tbl : {&disc, &eig, &hist, &conf}) write_table(*tbl, dir);
    store.mark_completed("diagnose", hash);
    log_line(opts, "diagnose: wrote " + std::to_string(disc.rows.size()) + " discrepancy rows");
    return out;
}

SweepOutput cmd_sweep_eps(const ExperimentConfig& cfg, const CommandOptions& opts) {
    cfg.validate();
    const std::string hash = cfg.hash();
    ResultStore store(cfg.output_dir);
    store.check_owner(hash, opts.force);
    SweepOutput out;
    if (!opts.force && store.completed("sweep-eps", hash) &&
        std::filesystem::exists(cfg.output_dir / "results" / "eps_sweep.csv")) {
        log_line(opts, "sweep-eps: results for config " + hash + " are up to date (use --force to recompute)");
        out.skipped = true;
        return out;
    }
    const DataSplits data = load_data(cfg.dataset);
    const ModelSpec resolved = resolve_model(cfg, data);
    const ModelBank bank(cfg, resolved);
    const Dataset clean = build_split(data.test, ShiftSpec{}, nullptr);
    const std::size_t t = cfg.batch_sizes.front();
    const std::size_t M = cfg.methods.size(), E = cfg.eps_multipliers.size();
    out.rows.resize(cfg.seeds.size() * M * E);
    parallel_for(out.rows.size(), cfg.workers, [&](std::size_t i) {
        const std::size_t e = i % E, m = (i / E) % M, s = i / (E * M);
        MethodSpec method = cfg.methods[m];
        const auto members = bank.members(family_of(cfg, method), cfg.seeds[s], method.ensemble);
        const double base = members.front()->spec().eps;
        method.eps = base * cfg.eps_multipliers[e];
        EvalOptions eo;
        eo.seed = cfg.seeds[s];
        if (method.fit_temperature) eo.temperature = fit_method_temperature(method, members, data.val, t).temperature;
        out.rows[i] = EpsRow{cfg.seeds[s], method.name, cfg.eps_multipliers[e], *method.eps,
                             evaluate_method(method, members, clean, t, eo)};
    });
    Table tbl{"eps_sweep",
              {"config_hash", "seed", "method", "eps_multiplier", "eps", "batch_size", "temperature", "accuracy", "ece",
               "brier", "brier_per_class", "nll"},
              {}};
    for (const auto& r : out.rows) {
        tbl.rows.push_back({hash, icell(r.seed), r.method, r.multiplier, r.eps, icell(r.record.batch_size),
                            r.record.temperature, r.record.accuracy, r.record.ece, r.record.brier,
                            r.record.brier_per_class, r.record.nll});
    }
    write_table(tbl, cfg.output_dir / "results");
    store.mark_completed("sweep-eps", hash);
    log_line(opts, "sweep-eps: wrote " + std::to_string(tbl.rows.size()) + " rows");
    return out;
}

double quantile(std::vector<double> values, double q) {
    if (values.empty()) throw ShapeError("quantile of an empty set");
    std::sort(values.begin(), values.end());
    const double pos = q * static_cast<double>(values.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(values.size() - 1, lo + 1);
    return values[lo] + (pos - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

ReportOutput cmd_report(const std::filesystem::path& store, const CommandOptions& opts) {
    ReportOutput out;
    out.by_severity = Table{"summary",
                            {"method", "group", "severity", "batch_size", "metric", "n", "min", "q1", "median", "q3",
                             "max"},
                            {}};
    const auto source = store / "results" / "eval.jsonl";
    Table eval;
    if (std::filesystem::exists(source)) eval = read_table(source, "eval");
    if (eval.rows.empty()) {
        log_line(opts, "report: warning: no evaluation records under " + store.string());
        out.empty = true;
    } else {
        auto col = [&](const std::string& name) {
            const auto it = std::find(eval.columns.begin(), eval.columns.end(), name);
            if (it == eval.columns.end()) throw ConfigError("eval table lacks column " + name);
            return static_cast<std::size_t>(it - eval.columns.begin());
        };
        auto num = [](const Cell& c) {
            if (const auto* d = std::get_if<double>(&c)) return *d;
            if (const auto* i = std::get_if<std::int64_t>(&c)) return static_cast<double>(*i);
            throw ConfigError("eval table: expected a number");
        };
        const std::size_t c_method = col("method"), c_kind = col("shift_kind"), c_sev = col("severity"),
                          c_batch = col("batch_size");
        const std::vector<std::string> metrics{"accuracy", "ece", "brier", "brier_per_class", "nll"};
        using Key = std::tuple<std::string, std::string, double, std::int64_t>;
        std::map<Key, std::map<std::string, std::vector<double>>> groups;
        std::vector<Key> order;
        for (const auto& row : eval.rows) {
            const auto& kind = std::get<std::string>(row[c_kind]);
            const std::string group = kind == "identity" ? "clean" : kind == "mixed" ? "mixed" : "shifted";
            Key k{std::get<std::string>(row[c_method]), group, num(row[c_sev]),
                  static_cast<std::int64_t>(num(row[c_batch]))};
            if (!groups.count(k)) order.push_back(k);
            for (const auto& m : metrics) groups[k][m].push_back(num(row[col(m)]));
        }
        for (const auto& k : order) {
            for (const auto& m : metrics) {
                const auto& v = groups[k][m];
                out.by_severity.rows.push_back({std::get<0>(k), std::get<1>(k), std::get<2>(k), std::get<3>(k), m,
                                                static_cast<std::int64_t>(v.size()), quantile(v, 0.0),
                                                quantile(v, 0.25), quantile(v, 0.5), quantile(v, 0.75),
                                                quantile(v, 1.0)});
            }
        }
    }
    const auto dir = store / "report";
    write_file(dir / "summary.csv", out.by_severity.to_csv());
    ojson arr = ojson::array();
    for (const auto& line : [&] {
             std::vector<std::string> lines;
             std::istringstream ss(out.by_severity.to_jsonl());
             for (std::string l; std::getline(ss, l);) lines.push_back(l);
             return lines;
         }()) {
        arr.push_back(ojson::parse(line));
    }
    write_file(dir / "summary.json", arr.dump(2) + "\n");
    log_line(opts, "report: wrote " + std::to_string(out.by_severity.rows.size()) + " summary rows");
    return out;
}

}  // namespace ptbn
