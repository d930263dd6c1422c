#pragma once
// Run configuration: one JSON document that pins everything an experiment
// needs — model geometry, training hyper-parameters, dataset spec, evaluation
// knobs, and the master seed. Every field has a default except the seed,
// which the user must state explicitly so no run is "accidentally" seeded.
//
// Parsing is strict: an unknown key anywhere in the document is a hard error
// rather than a silent no-op, because a typo like "lr_inti" that parses
// cleanly would burn hours of compute before anyone notices. Commands echo
// the fully-resolved config into their output directory, so the echoed file
// alone reproduces the run.

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include "ovcp/common.hpp"
#include "ovcp/data.hpp"
#include "ovcp/eval.hpp"
#include "ovcp/model.hpp"
#include "ovcp/training.hpp"

namespace ovcp {

// Knobs for the eval command that are not part of the model or data spec.
struct EvalSettings {
  int ep1_repeats = 10;  // random half-class splits per EP1 run
  std::vector<double> lambda_grid = default_lambda_grid();  // sweep patch ratios

  void validate() const;
};

nlohmann::json eval_settings_to_json(const EvalSettings& s);
EvalSettings eval_settings_from_json(const nlohmann::json& j);

struct RunConfig {
  uint64_t seed = 0;  // mandatory in the JSON document; 0 is a valid value
  ModelConfig model;
  TrainConfig train;
  DataConfig data;
  EvalSettings eval;

  void validate() const;
};

nlohmann::json run_config_to_json(const RunConfig& cfg);

// Parses a document of the form
//   { "seed": N, "model": {...}, "train": {...}, "data": {...}, "eval": {...} }
// where every section and every field inside a section is optional (defaults
// fill the gaps) but "seed" is required. Unknown keys at any level throw
// UsageError naming the offender.
RunConfig run_config_from_json(const nlohmann::json& j);

// File round trip. load reads + parses (IoError on missing/corrupt file,
// UsageError on semantic problems); write emits pretty-printed JSON, which is
// what commands drop into their run directory as config.json.
RunConfig load_run_config(const std::string& path);
void write_run_config(const std::string& path, const RunConfig& cfg);

// Raw document form of load: file -> JSON, no schema applied yet. The CLI
// goes through this so flag overrides can land before the strict parse.
nlohmann::json load_config_document(const std::string& path);

// Applies one "section.key=value" assignment onto a raw config document
// before parsing; this is how command-line flags override file fields while
// still passing through the same strict parse. The value is interpreted as
// JSON when it parses as such ("0.5", "[0,1]", "true") and as a bare string
// otherwise ("iwr"). Top-level keys use no dot ("seed=7").
void apply_override(nlohmann::json& doc, const std::string& assignment);

}  // namespace ovcp
