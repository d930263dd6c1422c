#include "ovcp/runconfig.hpp"

#include <algorithm>
#include <fstream>

namespace ovcp {

void EvalSettings::validate() const {
  if (ep1_repeats < 1) throw UsageError("EvalSettings: ep1_repeats must be at least 1");
  if (lambda_grid.empty()) throw UsageError("EvalSettings: lambda_grid must not be empty");
  for (size_t i = 0; i < lambda_grid.size(); ++i) {
    if (!(lambda_grid[i] >= 0.0 && lambda_grid[i] <= 1.0)) {
      throw UsageError("EvalSettings: lambda_grid entries must lie in [0, 1]");
    }
    if (i > 0 && !(lambda_grid[i] > lambda_grid[i - 1])) {
      throw UsageError("EvalSettings: lambda_grid must be strictly increasing");
    }
  }
}

nlohmann::json eval_settings_to_json(const EvalSettings& s) {
  return nlohmann::json{{"ep1_repeats", s.ep1_repeats}, {"lambda_grid", s.lambda_grid}};
}

EvalSettings eval_settings_from_json(const nlohmann::json& j) {
  EvalSettings s;
  s.ep1_repeats = j.at("ep1_repeats").get<int>();
  s.lambda_grid = j.at("lambda_grid").get<std::vector<double>>();
  s.validate();
  return s;
}

void RunConfig::validate() const {
  model.validate();
  train.validate();
  data.validate();
  eval.validate();
}

nlohmann::json run_config_to_json(const RunConfig& cfg) {
  return nlohmann::json{{"seed", cfg.seed},
                        {"model", model_config_to_json(cfg.model)},
                        {"train", train_config_to_json(cfg.train)},
                        {"data", data_config_to_json(cfg.data)},
                        {"eval", eval_settings_to_json(cfg.eval)}};
}

namespace {

// Overlays the user's section onto the serialized defaults, so absent fields
// keep their default and present fields must be names the section knows.
nlohmann::json merge_section(const nlohmann::json& doc, const char* section,
                             nlohmann::json defaults) {
  if (!doc.contains(section)) return defaults;
  const nlohmann::json& user = doc.at(section);
  if (!user.is_object()) {
    throw UsageError(std::string("config: '") + section + "' must be a JSON object");
  }
  for (const auto& item : user.items()) {
    if (!defaults.contains(item.key())) {
      throw UsageError("config: unknown key '" + item.key() + "' in '" + section + "' section");
    }
    defaults[item.key()] = item.value();
  }
  return defaults;
}

}  // namespace

RunConfig run_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw UsageError("config: top level must be a JSON object");
  static const char* kSections[] = {"model", "train", "data", "eval"};
  for (const auto& item : j.items()) {
    const std::string& key = item.key();
    if (key == "seed") continue;
    if (std::find_if(std::begin(kSections), std::end(kSections),
                     [&](const char* s) { return key == s; }) == std::end(kSections)) {
      throw UsageError("config: unknown top-level key '" + key + "'");
    }
  }
  if (!j.contains("seed")) {
    throw UsageError("config: 'seed' is required (there is deliberately no default)");
  }
  const nlohmann::json& js = j.at("seed");
  if (!js.is_number_integer()) throw UsageError("config: seed must be an integer");

  RunConfig cfg;
  if (js.is_number_unsigned()) {
    cfg.seed = js.get<uint64_t>();
  } else {
    const int64_t v = js.get<int64_t>();
    if (v < 0) throw UsageError("config: seed must be non-negative");
    cfg.seed = static_cast<uint64_t>(v);
  }
  cfg.model = model_config_from_json(merge_section(j, "model", model_config_to_json(ModelConfig{})));
  cfg.train = train_config_from_json(merge_section(j, "train", train_config_to_json(TrainConfig{})));
  cfg.data = data_config_from_json(merge_section(j, "data", data_config_to_json(DataConfig{})));
  cfg.eval = eval_settings_from_json(merge_section(j, "eval", eval_settings_to_json(EvalSettings{})));
  return cfg;  // the section parsers have validated their fields already
}

nlohmann::json load_config_document(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError(path + ": cannot open run config");
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw IoError(path + ": invalid JSON: " + std::string(e.what()));
  }
}

RunConfig load_run_config(const std::string& path) {
  return run_config_from_json(load_config_document(path));
}

void write_run_config(const std::string& path, const RunConfig& cfg) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError(path + ": cannot write run config");
  out << run_config_to_json(cfg).dump(2) << "\n";
  out.flush();
  if (!out) throw IoError(path + ": short write on run config");
}

void apply_override(nlohmann::json& doc, const std::string& assignment) {
  const size_t eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw UsageError("override '" + assignment + "' is not of the form key=value");
  }
  const std::string key = assignment.substr(0, eq);
  const std::string value = assignment.substr(eq + 1);

  // Numbers, booleans and arrays pass through as typed JSON; anything that
  // does not parse ("iwr", "adamw") is taken as a bare string.
  nlohmann::json parsed;
  try {
    parsed = nlohmann::json::parse(value);
  } catch (const nlohmann::json::parse_error&) {
    parsed = value;
  }

  // Walk the dotted path, creating sections on the way. Key validity is NOT
  // checked here: the strict run_config_from_json pass that follows rejects
  // unknown names with a message naming the section.
  nlohmann::json* node = &doc;
  size_t start = 0;
  for (;;) {
    const size_t dot = key.find('.', start);
    const std::string part =
        key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw UsageError("override '" + assignment + "' has an empty path segment");
    if (dot == std::string::npos) {
      (*node)[part] = parsed;
      return;
    }
    node = &(*node)[part];
    if (node->is_null()) *node = nlohmann::json::object();
    if (!node->is_object()) {
      throw UsageError("override '" + assignment + "': '" + part + "' is not a section");
    }
    start = dot + 1;
  }
}

}  // namespace ovcp
