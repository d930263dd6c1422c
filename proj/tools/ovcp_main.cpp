// ovcp: single binary wiring the library into reproducible experiments.
//
// Subcommands:
//   gen-data   render the synthetic corpus and write blob + manifest
//   pretrain   train an image-style encoder from scratch on the static pool
//   train      fine-tune a pretrained encoder on the motion pool
//   patch      blend two checkpoints: lambda * clip + (1 - lambda) * swa
//   eval       scoring protocols: ep1, ep2, retrieval, sweep
//   check      run the numeric invariant suite (fast | full)
//
// Every command is deterministic given (config, seed): rerunning produces
// byte-identical datasets, checkpoints and metric files. Commands that own an
// output directory echo the fully-resolved config into it as config.json, so
// that file alone reproduces the run. Config precedence is flag > file >
// default via repeatable --set section.key=value overrides.
//
// Exit codes: 0 success, 1 usage, 2 broken invariant, 3 I/O.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "ovcp/checkpoint.hpp"
#include "ovcp/data.hpp"
#include "ovcp/eval.hpp"
#include "ovcp/model.hpp"
#include "ovcp/runconfig.hpp"
#include "ovcp/training.hpp"
#include "ovcp/weightspace.hpp"

namespace fs = std::filesystem;

namespace ovcp {
namespace {

// ---------------------------------------------------------------------------
// Shared plumbing
// ---------------------------------------------------------------------------

struct ConfigOpts {
  std::string file;               // -c/--config, optional
  std::vector<std::string> sets;  // -s/--set section.key=value, repeatable
};

// file (if any) + overrides -> strict parse. raw_out receives the document
// before parsing, for the checks that need to know what was set explicitly.
RunConfig resolve_config(const ConfigOpts& c, nlohmann::json* raw_out = nullptr) {
  nlohmann::json doc = nlohmann::json::object();
  if (!c.file.empty()) doc = load_config_document(c.file);
  for (const auto& s : c.sets) apply_override(doc, s);
  if (raw_out) *raw_out = doc;
  return run_config_from_json(doc);
}

// Output directories are created if missing, but the parent must already
// exist: a typo'd path should fail loudly, not fabricate a directory tree.
void ensure_out_dir(const std::string& out) {
  const fs::path p(out);
  if (fs::exists(p)) {
    if (!fs::is_directory(p)) throw IoError(out + ": exists and is not a directory");
    return;
  }
  const fs::path parent = p.parent_path();
  if (!parent.empty() && !fs::exists(parent)) {
    throw IoError(out + ": parent directory does not exist");
  }
  std::error_code ec;
  if (!fs::create_directory(p, ec)) {
    throw IoError(out + ": cannot create directory: " + ec.message());
  }
}

std::string join_path(const std::string& dir, const std::string& name) {
  return (fs::path(dir) / name).string();
}

void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError(path + ": cannot open for writing");
  out << text;
  out.flush();
  if (!out) throw IoError(path + ": short write");
}

void write_metrics_jsonl(const std::string& path, const std::vector<LossReport>& reports) {
  std::ostringstream text;
  for (const auto& r : reports) text << r.to_json().dump() << "\n";
  write_text_file(path, text.str());
}

// The dataset blob is authoritative for its own generation config: fields the
// run config sets explicitly must agree with it, absent ones adopt it. The
// echoed config therefore always shows the data config that was really used.
void adopt_dataset_config(RunConfig& cfg, const nlohmann::json& raw, const DatasetBundle& ds,
                          const std::string& data_path) {
  if (raw.contains("data")) {
    const nlohmann::json have = data_config_to_json(ds.config);
    for (const auto& item : raw.at("data").items()) {
      if (have.at(item.key()) != item.value()) {
        throw UsageError(data_path + ": dataset has data." + item.key() + " = " +
                         have.at(item.key()).dump() + " but the run config says " +
                         item.value().dump());
      }
    }
  }
  cfg.data = ds.config;
}

// Geometry the encoder will actually see; a mismatch here would otherwise
// surface as a deep "wrong tensor shape" error inside the loss graph.
void require_geometry(const ModelConfig& m, const DataConfig& d, int frames_expected) {
  if (m.frame_size != d.frame_size) {
    throw UsageError("model.frame_size is " + std::to_string(m.frame_size) +
                     " but the dataset renders " + std::to_string(d.frame_size) + "x" +
                     std::to_string(d.frame_size) + " frames");
  }
  if (m.frames_t != frames_expected) {
    throw UsageError("model.frames_t is " + std::to_string(m.frames_t) +
                     " but this command encodes clips of length " +
                     std::to_string(frames_expected));
  }
}

Checkpoint load_model_checkpoint(const std::string& path, const ModelConfig& want) {
  Checkpoint ck = load_checkpoint(path);
  if (ck.meta.contains("model")) {
    require_shape_compatible(model_config_from_json(ck.meta.at("model")), want, path);
  }
  return ck;
}

// The train section carries knobs for every mode; point out the ones the
// chosen mode ignores so a mis-keyed experiment fails loudly at launch.
void warn_ignored_train_fields(const nlohmann::json& raw, const TrainConfig& t) {
  if (!raw.contains("train") || !raw.at("train").is_object()) return;
  const nlohmann::json& tr = raw.at("train");
  auto warn = [&](const char* k) {
    if (tr.contains(k)) {
      std::cerr << "warning: train." << k << " is ignored in mode '" << t.mode << "'\n";
    }
  };
  if (t.mode == "plain") {
    warn("reg_coef");
    warn("alpha_max");
    warn("l2_mu");
  } else if (t.mode == "l2") {
    warn("reg_coef");
    warn("alpha_max");
  } else {
    warn("l2_mu");
  }
  if (t.optimizer == "adamw" && tr.contains("momentum")) {
    std::cerr << "warning: train.momentum is ignored by the adamw optimizer\n";
  }
}

// Precision dispatch for the one-shot runs (pretrain, non-resumable train).
// f64 exists for verification; its results are narrowed to f32 for storage.
TrainResult run_training(const ModelConfig& m, const TrainConfig& t, const VideoSet& vs,
                         const ClassPromptBank& bank, const ParamVector& start,
                         const ParamVector& anchor, uint64_t seed) {
  if (t.precision == "f64") {
    TrainResultT<double> r = train<double>(m, t, vs, bank, widen(start), widen(anchor), seed);
    TrainResult out;
    out.theta = narrow(r.theta);
    out.swa.count = r.swa.count;
    if (r.swa.count > 0) out.swa.mean = narrow(r.swa.mean);
    out.reports = std::move(r.reports);
    out.total_steps = r.total_steps;
    return out;
  }
  return train<float>(m, t, vs, bank, start, anchor, seed);
}

void save_final_and_swa(const std::string& out, const std::string& final_name,
                        const ParamVector& theta, const SwaState& swa, nlohmann::json meta) {
  save_checkpoint(join_path(out, final_name), theta, meta);
  if (swa.count > 0) {
    meta["role"] = "swa";
    meta["swa_snapshots"] = swa.count;
    save_checkpoint(join_path(out, "swa.ovcp"), swa.average(), meta);
  } else {
    std::cerr << "note: swa absorbed no snapshots under this schedule; swa.ovcp not written\n";
  }
}

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

void cmd_gen_data(const ConfigOpts& c, const std::string& out) {
  RunConfig cfg = resolve_config(c);
  ensure_out_dir(out);

  DatasetBundle ds = gen_dataset(cfg.data, cfg.seed);
  const std::string blob = join_path(out, "dataset.ovcp");
  save_dataset(blob, ds);

  nlohmann::json manifest = ds.manifest();
  manifest["blob_hash"] = file_hash_hex(blob);
  write_text_file(join_path(out, "manifest.json"), manifest.dump(2) + "\n");
  write_run_config(join_path(out, "config.json"), cfg);

  const auto& counts = manifest.at("counts");
  std::cout << "dataset: " << blob << "\n"
            << "classes: " << counts.at("pretrain").get<int>() << " pretrain, "
            << counts.at("finetune").get<int>() << " finetune, "
            << counts.at("zeroshot").get<int>() << " zeroshot\n"
            << "blob hash: " << manifest.at("blob_hash").get<std::string>() << "\n";
}

// ---------------------------------------------------------------------------
// pretrain
// ---------------------------------------------------------------------------

void cmd_pretrain(const ConfigOpts& c, const std::string& data, const std::string& out) {
  nlohmann::json raw;
  RunConfig cfg = resolve_config(c, &raw);
  ensure_out_dir(out);

  DatasetBundle ds = load_dataset(data);
  adopt_dataset_config(cfg, raw, ds, data);

  // Pretraining sees single frames: image geometry, no temporal window.
  ModelConfig mcfg = cfg.model;
  mcfg.frames_t = 1;
  mcfg.window = 0;
  require_geometry(mcfg, ds.config, 1);

  TrainConfig tcfg = cfg.train;
  if (tcfg.mode != "plain") {
    std::cerr << "note: pretraining always runs in plain mode (mode '" << tcfg.mode
              << "' applies to fine-tuning)\n";
    tcfg.mode = "plain";
  }

  ClassPromptBank bank = ClassPromptBank::build(ds.prompts_in(Pool::kPretrain), mcfg.embed_dim,
                                                prompt_bank_seed(ds));
  ParamVector theta0 = init_params(mcfg, cfg.seed);
  TrainResult res = run_training(mcfg, tcfg, ds.pretrain_train, bank, theta0, theta0, cfg.seed);

  nlohmann::json meta{{"role", "pretrained"},
                      {"model", model_config_to_json(mcfg)},
                      {"seed", cfg.seed},
                      {"train", train_config_to_json(tcfg)},
                      {"dataset_hash", file_hash_hex(data)}};
  save_final_and_swa(out, "pretrained.ovcp", res.theta, res.swa, std::move(meta));
  write_metrics_jsonl(join_path(out, "metrics.jsonl"), res.reports);
  write_run_config(join_path(out, "config.json"), cfg);

  std::cout << "pretrained: " << join_path(out, "pretrained.ovcp") << "\n"
            << "steps: " << res.total_steps;
  if (!res.reports.empty()) std::cout << ", final loss " << res.reports.back().base_loss;
  std::cout << "\n";
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

void cmd_train(const ConfigOpts& c, const std::string& data, const std::string& init,
               const std::string& out, int64_t stop_after, const std::string& resume) {
  nlohmann::json raw;
  RunConfig cfg = resolve_config(c, &raw);
  warn_ignored_train_fields(raw, cfg.train);
  ensure_out_dir(out);

  DatasetBundle ds = load_dataset(data);
  adopt_dataset_config(cfg, raw, ds, data);
  const ModelConfig& mcfg = cfg.model;
  require_geometry(mcfg, ds.config, ds.config.frames_t);

  Checkpoint ck = load_model_checkpoint(init, mcfg);
  ClassPromptBank bank = ClassPromptBank::build(ds.prompts_in(Pool::kFinetune), mcfg.embed_dim,
                                                prompt_bank_seed(ds));

  nlohmann::json meta{{"role", "finetuned"},
                      {"model", model_config_to_json(mcfg)},
                      {"seed", cfg.seed},
                      {"train", train_config_to_json(cfg.train)},
                      {"dataset_hash", file_hash_hex(data)},
                      {"init_hash", file_hash_hex(init)}};

  if (cfg.train.precision != "f32") {
    if (stop_after >= 0 || !resume.empty()) {
      throw UsageError("train: stop/resume is only supported at precision f32 "
                       "(the state container stores f32 tensors)");
    }
    TrainResult res =
        run_training(mcfg, cfg.train, ds.finetune_train, bank, ck.params, ck.params, cfg.seed);
    save_final_and_swa(out, "finetuned.ovcp", res.theta, res.swa, std::move(meta));
    write_metrics_jsonl(join_path(out, "metrics.jsonl"), res.reports);
    write_run_config(join_path(out, "config.json"), cfg);
    std::cout << "finetuned: " << join_path(out, "finetuned.ovcp") << "\n";
    return;
  }

  TrainState st;
  if (resume.empty()) {
    st = init_train_state(ck.params, cfg.seed);
  } else {
    st = load_train_state(resume);
    require_compatible(st.theta, ck.params, "train --resume");
  }

  const int64_t spe = steps_per_epoch(ds.finetune_train.n, cfg.train.batch_size);
  const int64_t total = make_lr_schedule(cfg.train, spe).total_steps;

  std::vector<LossReport> reports;
  train_steps(mcfg, cfg.train, ds.finetune_train, bank, ck.params, st, stop_after, reports);

  write_metrics_jsonl(join_path(out, "metrics.jsonl"), reports);
  write_run_config(join_path(out, "config.json"), cfg);

  if (st.next_step <= total) {
    const std::string state_path = join_path(out, "state.ovcp");
    save_train_state(state_path, st);
    std::cout << "stopped after step " << (st.next_step - 1) << " of " << total
              << "; state: " << state_path << "\n";
    return;
  }

  save_final_and_swa(out, "finetuned.ovcp", st.theta, st.swa, std::move(meta));
  std::cout << "finetuned: " << join_path(out, "finetuned.ovcp") << "\n"
            << "steps: " << total;
  if (!reports.empty()) std::cout << ", final loss " << reports.back().base_loss;
  std::cout << "\n";
}

// ---------------------------------------------------------------------------
// patch
// ---------------------------------------------------------------------------

void cmd_patch(const std::string& clip, const std::string& swa, double lambda,
               const std::string& out) {
  Checkpoint a = load_checkpoint(clip);
  Checkpoint b = load_checkpoint(swa);
  if (a.meta.contains("model") && b.meta.contains("model")) {
    require_shape_compatible(model_config_from_json(a.meta.at("model")),
                             model_config_from_json(b.meta.at("model")), "patch");
  }

  ParamVector patched = interpolate(a.params, b.params, lambda);

  nlohmann::json meta{{"role", "patched"},
                      {"lambda", lambda},
                      {"parent_clip_hash", file_hash_hex(clip)},
                      {"parent_swa_hash", file_hash_hex(swa)}};
  if (a.meta.contains("model")) meta["model"] = a.meta.at("model");
  if (a.meta.contains("seed")) meta["seed"] = a.meta.at("seed");
  save_checkpoint(out, patched, meta);
  std::cout << "patched checkpoint: " << out << " (lambda " << lambda << ")\n";
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

void emit_result(const std::string& out, const std::string& name, const nlohmann::json& j) {
  std::cout << j.dump() << "\n";
  write_text_file(join_path(out, name), j.dump(2) + "\n");
}

void cmd_eval(const ConfigOpts& c, const std::string& ckpt, const std::string& data,
              const std::string& protocol, const std::string& clip, const std::string& out) {
  if (protocol != "ep1" && protocol != "ep2" && protocol != "retrieval" && protocol != "sweep") {
    throw UsageError("unknown protocol '" + protocol +
                     "'; valid protocols: ep1, ep2, retrieval, sweep");
  }
  nlohmann::json raw;
  RunConfig cfg = resolve_config(c, &raw);
  ensure_out_dir(out);

  DatasetBundle ds = load_dataset(data);
  adopt_dataset_config(cfg, raw, ds, data);
  const ModelConfig& mcfg = cfg.model;
  require_geometry(mcfg, ds.config, ds.config.frames_t);

  Checkpoint ck = load_model_checkpoint(ckpt, mcfg);
  ClassPromptBank bank =
      ClassPromptBank::build(ds.all_prompts(), mcfg.embed_dim, prompt_bank_seed(ds));
  const std::vector<int> zeroshot_ids = ds.ids_in(Pool::kZeroshot);

  if (protocol == "ep1") {
    Ep1Result r = ep1_eval(ds.zeroshot_eval, bank, zeroshot_ids, ck.params, mcfg,
                           cfg.eval.ep1_repeats, cfg.seed);
    nlohmann::json j = r.to_json();
    j["protocol"] = "ep1";
    j["checkpoint_hash"] = file_hash_hex(ckpt);
    emit_result(out, "ep1.json", j);
  } else if (protocol == "ep2") {
    Metrics m = zero_shot_accuracy(ds.zeroshot_eval, bank, zeroshot_ids, ck.params, mcfg);
    nlohmann::json j = m.to_json();
    j["protocol"] = "ep2";
    j["candidates"] = zeroshot_ids.size();
    j["checkpoint_hash"] = file_hash_hex(ckpt);
    emit_result(out, "ep2.json", j);
  } else if (protocol == "retrieval") {
    // Bijective pairing: the first stored clip of every zero-shot class pairs
    // with that class's prompt embedding.
    std::vector<int> firsts;
    std::vector<int> pair_ids;
    for (int id : zeroshot_ids) {
      for (int i = 0; i < ds.zeroshot_eval.n; ++i) {
        if (ds.zeroshot_eval.class_ids[static_cast<size_t>(i)] == id) {
          firsts.push_back(i);
          pair_ids.push_back(id);
          break;
        }
      }
    }
    VideoSet corpus = ds.zeroshot_eval.subset(firsts);
    Encoder<float> enc(mcfg);
    std::vector<float> vemb = enc.encode_videos(corpus, ck.params);
    std::vector<float> temb;
    temb.reserve(pair_ids.size() * static_cast<size_t>(mcfg.embed_dim));
    for (int id : pair_ids) {
      auto row = bank.embedding(id);
      temb.insert(temb.end(), row.begin(), row.end());
    }
    RetrievalResult r1 = retrieval_recall(vemb, temb, mcfg.embed_dim, 1);
    RetrievalResult r5 = retrieval_recall(vemb, temb, mcfg.embed_dim, 5);
    nlohmann::json j{{"protocol", "retrieval"}, {"n_pairs", pair_ids.size()},
                     {"t2v_r1", r1.t2v},        {"v2t_r1", r1.v2t},
                     {"t2v_r5", r5.t2v},        {"v2t_r5", r5.v2t},
                     {"checkpoint_hash", file_hash_hex(ckpt)}};
    emit_result(out, "retrieval.json", j);
  } else {  // sweep
    if (clip.empty()) {
      throw UsageError("eval --protocol sweep needs --clip (the zero-shot anchor checkpoint)");
    }
    Checkpoint anchor = load_model_checkpoint(clip, mcfg);
    TradeoffCurve curve =
        sweep_lambda(anchor.params, ck.params, cfg.eval.lambda_grid, ds.finetune_eval,
                     ds.ids_in(Pool::kFinetune), ds.zeroshot_eval, zeroshot_ids, bank, mcfg);
    const std::string csv = curve_to_csv(curve);
    std::cout << csv;
    write_text_file(join_path(out, "sweep.csv"), csv);
    nlohmann::json j{{"protocol", "sweep"},
                     {"curve", curve_to_json(curve)},
                     {"checkpoint_hash", file_hash_hex(ckpt)},
                     {"clip_hash", file_hash_hex(clip)}};
    write_text_file(join_path(out, "sweep.json"), j.dump(2) + "\n");
  }
  write_run_config(join_path(out, "config.json"), cfg);
}

// ---------------------------------------------------------------------------
// check
// ---------------------------------------------------------------------------

void cmd_check(const std::string& level) {
  if (level != "fast" && level != "full") {
    throw UsageError("unknown check level '" + level + "'; valid levels: fast, full");
  }

  // Small fixed geometry; every check runs in 64-bit precision so tolerances
  // reflect the mathematics, not f32 rounding.
  ModelConfig mcfg;
  mcfg.frame_size = 8;
  mcfg.patch_size = 4;
  mcfg.frames_t = 4;
  mcfg.embed_dim = 32;
  mcfg.num_layers = 1;
  mcfg.num_heads = 2;
  mcfg.window = 1;
  mcfg.temperature = 1.0;

  DataConfig dcfg;
  dcfg.frame_size = 8;
  dcfg.frames_t = 4;
  dcfg.train_per_class = 3;
  dcfg.eval_per_class = 1;

  DatasetBundle ds = gen_dataset(dcfg, 20240817ull);
  ClassPromptBank bank = ClassPromptBank::build(ds.prompts_in(Pool::kFinetune), mcfg.embed_dim,
                                                prompt_bank_seed(ds));
  const ParamVectorD theta = widen(init_params(mcfg, 1));
  const ParamVectorD anchor = widen(init_params(mcfg, 2));
  const std::vector<int> batch = {0, 5, 11, 17};

  bool all_ok = true;
  auto report = [&](const std::string& name, double dev, double tol) {
    const bool pass = dev <= tol;
    all_ok = all_ok && pass;
    std::cout << (pass ? "pass  " : "FAIL  ") << std::left << std::setw(40) << name
              << std::scientific << std::setprecision(3) << "deviation " << dev << "  (tolerance "
              << tol << ")\n";
  };

  {  // patching at the endpoints must reproduce the parents bit for bit
    ParamVector a = init_params(mcfg, 11);
    ParamVector b = init_params(mcfg, 12);
    ParamVector hi = interpolate(a, b, 1.0);
    ParamVector lo = interpolate(a, b, 0.0);
    double dev = 0.0;
    for (size_t i = 0; i < a.values.size(); ++i) {
      dev = std::max(dev, static_cast<double>(std::abs(hi.values[i] - a.values[i])));
      dev = std::max(dev, static_cast<double>(std::abs(lo.values[i] - b.values[i])));
    }
    report("patch endpoints (lambda 0/1)", dev, 0.0);
  }

  {  // averaging snapshots and patching commute
    std::vector<ParamVectorD> snaps;
    for (uint64_t s = 21; s <= 25; ++s) snaps.push_back(widen(init_params(mcfg, s)));
    report("swa/patch commutation", check_swa_commutation(anchor, snaps, 0.4), 1e-12);
  }

  {  // a static clip must embed exactly like its frame under the window
    const std::vector<int> statics = ds.zeroshot_static_ids();
    VideoSet clip = ds.zeroshot_eval.filter_classes(std::span(statics.data(), 1));
    Encoder<double> enc(mcfg);
    TapeD t1;
    auto b1 = enc.bind(t1, theta, /*requires_grad=*/false);
    const auto& e1 = t1.value(enc.video_embedding(t1, b1, clip.video(0), mcfg.window)).v;
    TapeD t2;
    auto b2 = enc.bind(t2, theta, /*requires_grad=*/false);
    const auto& e2 = t2.value(enc.frames_imagewise_embedding(t2, b2, clip.video(0))).v;
    double dev = 0.0;
    for (size_t i = 0; i < e1.size(); ++i) dev = std::max(dev, std::abs(e1[i] - e2[i]));
    report("static-video window equivalence", dev, 1e-10);
  }

  {  // one backward pass through the interpolation == two-pass combination
    const double dev = check_grad_identity(theta, anchor, ds.finetune_train, batch, bank, mcfg,
                                           /*alpha=*/0.3, /*reg_coef=*/0.5);
    report("interpolated-gradient identity", dev, 1e-9);
  }

  if (level == "full") {
    // Finite-difference sweeps over a spread of coordinates.
    std::vector<int64_t> coords;
    const int64_t stride = std::max<int64_t>(1, theta.size() / 24);
    for (int64_t i = 0; i < theta.size(); i += stride) coords.push_back(i);

    GradResultT<double> g1 = loss_and_grad<double>(ds.finetune_train, batch, bank, theta, mcfg);
    {
      std::function<double(const ParamVectorD&)> f = [&](const ParamVectorD& p) {
        return contrastive_loss<double>(ds.finetune_train, batch, bank, p, mcfg);
      };
      std::vector<double> fd = finite_difference_gradient<double>(f, theta, 1e-5, coords);
      std::vector<double> bp;
      for (int64_t ci : coords) bp.push_back(g1.grad.values[static_cast<size_t>(ci)]);
      report("finite-difference batch gradient", max_rel_deviation(bp, fd, 1e-4), 1e-6);
    }
    {
      const double al = 0.3, reg = 0.5;
      std::function<double(const ParamVectorD&)> f = [&](const ParamVectorD& p) {
        const double l1 = contrastive_loss<double>(ds.finetune_train, batch, bank, p, mcfg);
        const double l2 = contrastive_loss<double>(ds.finetune_train, batch, bank,
                                                   interpolate(anchor, p, al), mcfg);
        return l1 + reg / (1.0 - al) * l2;
      };
      GradResultT<double> g2 = loss_and_grad<double>(ds.finetune_train, batch, bank,
                                                     interpolate(anchor, theta, al), mcfg);
      std::vector<double> fd = finite_difference_gradient<double>(f, theta, 1e-5, coords);
      std::vector<double> bp;
      for (int64_t ci : coords) {
        const size_t i = static_cast<size_t>(ci);
        bp.push_back(g1.grad.values[i] + reg * g2.grad.values[i]);
      }
      report("finite-difference combined objective", max_rel_deviation(bp, fd, 1e-4), 1e-6);
    }
  }

  if (!all_ok) throw InvariantError("verification checks failed");
  std::cout << "all checks passed (" << level << ")\n";
}

// ---------------------------------------------------------------------------
// wiring
// ---------------------------------------------------------------------------

void add_config_opts(CLI::App* cmd, ConfigOpts& c) {
  cmd->add_option("-c,--config", c.file, "run config JSON file");
  cmd->add_option("-s,--set", c.sets,
                  "override a config field, e.g. --set train.lr_init=1e-5 (repeatable)");
}

int run_cli(int argc, char** argv) {
  CLI::App app{"synthetic open-vocabulary video recognition workbench"};
  app.require_subcommand(1);

  ConfigOpts gen_cfg;
  std::string gen_out;
  CLI::App* gen = app.add_subcommand("gen-data", "render the synthetic corpus");
  add_config_opts(gen, gen_cfg);
  gen->add_option("-o,--out", gen_out, "output directory")->required();
  gen->callback([&] { cmd_gen_data(gen_cfg, gen_out); });

  ConfigOpts pre_cfg;
  std::string pre_data, pre_out;
  CLI::App* pre = app.add_subcommand("pretrain", "train an image encoder on the static pool");
  add_config_opts(pre, pre_cfg);
  pre->add_option("--data", pre_data, "dataset blob from gen-data")->required();
  pre->add_option("-o,--out", pre_out, "output directory")->required();
  pre->callback([&] { cmd_pretrain(pre_cfg, pre_data, pre_out); });

  ConfigOpts tr_cfg;
  std::string tr_data, tr_init, tr_out, tr_resume;
  int64_t tr_stop = -1;
  CLI::App* tr = app.add_subcommand("train", "fine-tune a pretrained encoder on motion classes");
  add_config_opts(tr, tr_cfg);
  tr->add_option("--data", tr_data, "dataset blob from gen-data")->required();
  tr->add_option("--init", tr_init, "pretrained checkpoint (also the anchor)")->required();
  tr->add_option("-o,--out", tr_out, "output directory")->required();
  tr->add_option("--stop-after", tr_stop, "pause after this step and save state.ovcp");
  tr->add_option("--resume", tr_resume, "state.ovcp from a paused run");
  tr->callback([&] { cmd_train(tr_cfg, tr_data, tr_init, tr_out, tr_stop, tr_resume); });

  std::string pa_clip, pa_swa, pa_out;
  double pa_lambda = 0.0;
  CLI::App* pa = app.add_subcommand("patch", "blend lambda * clip + (1 - lambda) * swa");
  pa->add_option("--clip", pa_clip, "zero-shot anchor checkpoint")->required();
  pa->add_option("--swa", pa_swa, "fine-tuned (swa) checkpoint")->required();
  pa->add_option("--lam", pa_lambda, "mixing ratio in [0, 1]")->required();
  pa->add_option("-o,--out", pa_out, "output checkpoint file")->required();
  pa->callback([&] { cmd_patch(pa_clip, pa_swa, pa_lambda, pa_out); });

  ConfigOpts ev_cfg;
  std::string ev_ckpt, ev_data, ev_protocol, ev_clip, ev_out;
  CLI::App* ev = app.add_subcommand("eval", "run a scoring protocol");
  add_config_opts(ev, ev_cfg);
  ev->add_option("--ckpt", ev_ckpt, "checkpoint to evaluate")->required();
  ev->add_option("--data", ev_data, "dataset blob from gen-data")->required();
  ev->add_option("--protocol", ev_protocol, "ep1 | ep2 | retrieval | sweep")->required();
  ev->add_option("--clip", ev_clip, "anchor checkpoint (sweep only)");
  ev->add_option("-o,--out", ev_out, "output directory")->required();
  ev->callback([&] { cmd_eval(ev_cfg, ev_ckpt, ev_data, ev_protocol, ev_clip, ev_out); });

  std::string ck_level = "fast";
  CLI::App* ckc = app.add_subcommand("check", "run the numeric invariant suite");
  ckc->add_option("--level", ck_level, "fast | full (default fast)");
  ckc->callback([&] { cmd_check(ck_level); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);  // prints help or the parse error
    return rc == 0 ? 0 : 1;     // pin every flag problem to the usage exit code
  }
  return 0;
}

}  // namespace
}  // namespace ovcp

int main(int argc, char** argv) {
  try {
    return ovcp::run_cli(argc, argv);
  } catch (const ovcp::UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const ovcp::InvariantError& e) {
    std::cerr << "invariant failure: " << e.what() << "\n";
    return 2;
  } catch (const ovcp::IoError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return 3;
  }
}
