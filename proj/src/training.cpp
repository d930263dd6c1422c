#include "ovcp/training.hpp"

#include <utility>

#include "ovcp/checkpoint.hpp"

namespace ovcp {

namespace {

// Prefix every tensor of one param vector so several vectors can share a
// container ("theta.", "opt.m.", ...).
void append_prefixed(std::vector<NamedTensor>& out, const std::string& prefix,
                     const ParamVector& params) {
  for (NamedTensor& t : tensors_from_params(params)) {
    t.name = prefix + t.name;
    out.push_back(std::move(t));
  }
}

ParamVector extract_prefixed(const Container& c, const std::string& prefix) {
  std::vector<NamedTensor> picked;
  for (const NamedTensor& t : c.tensors) {
    if (t.name.rfind(prefix, 0) == 0) {
      NamedTensor stripped = t;
      stripped.name = t.name.substr(prefix.size());
      picked.push_back(std::move(stripped));
    }
  }
  if (picked.empty()) {
    throw IoError("train state: no tensors under prefix '" + prefix + "'");
  }
  return params_from_tensors(picked);
}

int64_t require_int(const nlohmann::json& meta, const std::string& key) {
  if (!meta.contains(key) || !meta[key].is_number_integer()) {
    throw IoError("train state: missing integer field '" + key + "'");
  }
  return meta[key].get<int64_t>();
}

std::string require_string(const nlohmann::json& meta, const std::string& key) {
  if (!meta.contains(key) || !meta[key].is_string()) {
    throw IoError("train state: missing string field '" + key + "'");
  }
  return meta[key].get<std::string>();
}

}  // namespace

void save_train_state(const std::string& path, const TrainState& st) {
  std::vector<NamedTensor> tensors;
  append_prefixed(tensors, "theta.", st.theta);
  append_prefixed(tensors, "opt.m.", st.opt.m);
  append_prefixed(tensors, "opt.v.", st.opt.v);
  append_prefixed(tensors, "opt.buf.", st.opt.buf);
  if (st.swa.count > 0) append_prefixed(tensors, "swa.mean.", st.swa.mean);

  nlohmann::json meta;
  meta["kind"] = "train_state";
  meta["next_step"] = st.next_step;
  meta["bad_streak"] = st.bad_streak;
  meta["opt_t"] = st.opt.t;
  meta["swa_count"] = st.swa.count;
  meta["batch_rng"] = st.batch_rng.serialize();
  meta["alpha_rng"] = st.alpha_rng.serialize();
  write_container(path, tensors, meta);
}

TrainState load_train_state(const std::string& path) {
  Container c = read_container(path);
  if (c.meta.value("kind", std::string()) != "train_state") {
    throw IoError(path + ": not a train state container");
  }
  TrainState st;
  st.theta = extract_prefixed(c, "theta.");
  st.opt.m = extract_prefixed(c, "opt.m.");
  st.opt.v = extract_prefixed(c, "opt.v.");
  st.opt.buf = extract_prefixed(c, "opt.buf.");
  st.opt.t = require_int(c.meta, "opt_t");
  st.next_step = require_int(c.meta, "next_step");
  st.bad_streak = static_cast<int>(require_int(c.meta, "bad_streak"));
  st.swa.count = require_int(c.meta, "swa_count");
  if (st.swa.count > 0) st.swa.mean = extract_prefixed(c, "swa.mean.");
  st.batch_rng = Rng::deserialize(require_string(c.meta, "batch_rng"));
  st.alpha_rng = Rng::deserialize(require_string(c.meta, "alpha_rng"));
  require_compatible(st.theta, st.opt.m, "load_train_state");
  require_compatible(st.theta, st.opt.v, "load_train_state");
  require_compatible(st.theta, st.opt.buf, "load_train_state");
  if (st.swa.count > 0) require_compatible(st.theta, st.swa.mean, "load_train_state");
  return st;
}

nlohmann::json train_config_to_json(const TrainConfig& cfg) {
  return nlohmann::json{{"mode", cfg.mode},
                        {"optimizer", cfg.optimizer},
                        {"precision", cfg.precision},
                        {"lr_init", cfg.lr_init},
                        {"lr_final", cfg.lr_final},
                        {"warmup_epochs", cfg.warmup_epochs},
                        {"epochs", cfg.epochs},
                        {"batch_size", cfg.batch_size},
                        {"alpha_max", cfg.alpha_max},
                        {"reg_coef", cfg.reg_coef},
                        {"l2_mu", cfg.l2_mu},
                        {"weight_decay", cfg.weight_decay},
                        {"momentum", cfg.momentum},
                        {"swa_start_step", cfg.swa_start_step},
                        {"swa_cycle", cfg.swa_cycle},
                        {"max_bad_steps", cfg.max_bad_steps}};
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig cfg;
  cfg.mode = j.at("mode").get<std::string>();
  cfg.optimizer = j.at("optimizer").get<std::string>();
  cfg.precision = j.at("precision").get<std::string>();
  cfg.lr_init = j.at("lr_init").get<double>();
  cfg.lr_final = j.at("lr_final").get<double>();
  cfg.warmup_epochs = j.at("warmup_epochs").get<int>();
  cfg.epochs = j.at("epochs").get<int>();
  cfg.batch_size = j.at("batch_size").get<int>();
  cfg.alpha_max = j.at("alpha_max").get<double>();
  cfg.reg_coef = j.at("reg_coef").get<double>();
  cfg.l2_mu = j.at("l2_mu").get<double>();
  cfg.weight_decay = j.at("weight_decay").get<double>();
  cfg.momentum = j.at("momentum").get<double>();
  cfg.swa_start_step = j.at("swa_start_step").get<int64_t>();
  cfg.swa_cycle = j.at("swa_cycle").get<int64_t>();
  cfg.max_bad_steps = j.at("max_bad_steps").get<int>();
  cfg.validate();
  return cfg;
}

}  // namespace ovcp
