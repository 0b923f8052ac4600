#include "egrot/cli.hpp"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "egrot/checkpoint.hpp"
#include "egrot/config.hpp"
#include "egrot/dataset.hpp"
#include "egrot/error.hpp"
#include "egrot/eval.hpp"
#include "egrot/model.hpp"
#include "egrot/training.hpp"

namespace egrot::cli {

namespace {

using nlohmann::json;

std::size_t worker_threads() {
  const char* env = std::getenv("EGR_THREADS");
  if (!env || !*env) return 1;
  try {
    const long n = std::stol(env);
    if (n >= 1) return static_cast<std::size_t>(n);
  } catch (const std::exception&) {
  }
  throw ConfigError(std::string("EGR_THREADS must be a positive integer, got '") + env + "'");
}

// Calls fn.template operator()<T>() with T matching the precision.
template <typename Fn>
decltype(auto) with_precision(Precision p, Fn&& fn) {
  if (p == Precision::kF64) return fn.template operator()<double>();
  return fn.template operator()<float>();
}

// Writes to `path.tmp` and renames, so readers never see a partial file.
void save_atomically(const Checkpoint& ckpt, const std::string& path) {
  const std::string tmp = path + ".tmp";
  save_checkpoint(ckpt, tmp);
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoFailure("cannot move '" + tmp + "' to '" + path + "': " + ec.message());
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoFailure("cannot open '" + path + "' for writing");
  f << text;
  if (!f) throw IoFailure("write to '" + path + "' failed");
}

int exit_code_for(const Error& e) {
  const std::string& k = e.kind();
  if (k == "ConfigError" || k == "BadCount" || k == "InsufficientData" || k == "InsufficientReferences" ||
      k == "EmptyInput") {
    return kUsage;
  }
  if (k == "IoFailure" || k == "FormatError") return kIo;
  if (k == "HashMismatch") return kHashMismatch;
  if (k == "IncompatibleCheckpoint" || k == "ShapeMismatch") return kIncompatibleCheckpoint;
  if (k == "MissingEntity") return kMissingEntity;
  return kFailure;
}

struct LoadedCheckpoint {
  Checkpoint ckpt;
  RunConfig config;
};

LoadedCheckpoint open_checkpoint(const std::string& path) {
  LoadedCheckpoint l{load_checkpoint(path), {}};
  l.config = config_from_checkpoint(l.ckpt);
  if (config_hash(l.ckpt.config) != l.ckpt.config_hash) {
    throw IncompatibleCheckpoint("'" + path + "': stored config does not match its hash");
  }
  return l;
}

Dataset open_dataset(const std::string& path, const RunConfig& cfg, std::ostream& err) {
  Dataset ds = load_dataset(path, data_hash(cfg.data), [&](const std::string& m) { err << "warning: " << m << '\n'; });
  if (ds.crop() != cfg.model.crop) {
    throw IncompatibleCheckpoint("dataset '" + path + "' has crop " + std::to_string(ds.crop()) +
                                 " but the model expects " + std::to_string(cfg.model.crop));
  }
  return ds;
}

json accuracy_summary(const eval::EvalReport& r) {
  json j = json::object();
  for (const auto& [t, a] : r.accuracy) {
    std::ostringstream key;
    key << t;
    j[key.str()] = a;
  }
  return j;
}

// ---- gen ----

int cmd_gen(const std::string& config_path, const std::string& out_path, std::ostream& out) {
  const RunConfig cfg = load_run_config(config_path);
  const json extra{{"config_hash", data_hash(cfg.data)}, {"config", json(cfg.data)}};
  const Dataset ds = generate_dataset(cfg.data.n_objects, cfg.data.episode_spec(), cfg.data.seed, extra,
                                      worker_threads());
  write_dataset(ds, out_path);
  json summary = ds.manifest;
  summary.erase("object_seeds");
  summary["path"] = out_path;
  out << summary.dump(2) << '\n';
  return kOk;
}

// ---- train ----

struct TrainArgs {
  std::string config, data, out, val, resume, log;
  std::string precision;
  bool force = false;
};

template <typename T>
int train_as(const RunConfig& cfg, const TrainArgs& a, const Dataset& data, const std::optional<Dataset>& val,
             std::ostream& out, std::ostream& err) {
  std::optional<model::Model<T>> model;
  ag::OptimizerState<T> opt;
  opt.config = train::adamw_config(cfg.train);
  std::uint64_t start = 0;
  if (!a.resume.empty()) {
    const Checkpoint ckpt = load_checkpoint(a.resume);
    if (ckpt.config_hash != config_hash(cfg)) {
      throw IncompatibleCheckpoint("'" + a.resume + "' was written with a different config");
    }
    model.emplace(model_from_checkpoint<T>(ckpt));
    opt = optimizer_from_checkpoint<T>(ckpt, opt.config);
    start = ckpt.step;
  } else {
    model.emplace(cfg.model, derive_seed({cfg.train.seed, 0x6d6f64656cULL}));
  }

  const std::string log_path = a.log.empty() ? a.out + ".log.jsonl" : a.log;
  std::ofstream log(log_path, start > 0 ? std::ios::app : std::ios::trunc);
  if (!log) throw IoFailure("cannot open '" + log_path + "' for writing");

  train::LoopHooks<T> hooks;
  hooks.on_record = [&](const train::LogRecord& r) {
    log << train::to_json(r).dump() << '\n';
    log.flush();
    if (r.val_acc) err << "step " << r.step << " loss " << r.loss << " val_acc15 " << *r.val_acc << '\n';
  };
  hooks.on_checkpoint = [&](std::uint64_t step, const model::Model<T>& m, const ag::OptimizerState<T>& o) {
    save_atomically(make_checkpoint(cfg, m, o, step), a.out);
  };
  if (val) {
    const double thresholds[] = {15.0};
    hooks.validate = [&](const model::Model<T>& m) {
      return eval::eval_model(m, *val, cfg.train.val_k, thresholds).accuracy.at(15.0);
    };
  }
  const auto result = train::train_loop(cfg.train, data, *model, opt, start, hooks);
  if (result.records.empty()) save_atomically(make_checkpoint(cfg, *model, opt, start), a.out);

  json summary{{"checkpoint", a.out},
               {"log", log_path},
               {"config_hash", config_hash(cfg)},
               {"precision", to_string(cfg.train.precision)},
               {"start_step", start},
               {"end_step", std::max<std::uint64_t>(start, cfg.train.steps)}};
  if (!result.records.empty()) summary["final_loss"] = result.records.back().loss;
  out << summary.dump(2) << '\n';
  return kOk;
}

int cmd_train(const TrainArgs& a, std::ostream& out, std::ostream& err) {
  RunConfig cfg = load_run_config(a.config);
  if (!a.precision.empty()) cfg.train.precision = parse_precision(a.precision);
  cfg.validate();
  const Dataset data = load_dataset(a.data);
  if (data.config_hash() != data_hash(cfg.data)) {
    const std::string msg = "dataset '" + a.data + "' has config hash '" + data.config_hash() +
                            "' but the config's data section hashes to '" + data_hash(cfg.data) + "'";
    if (!a.force) throw HashMismatch(msg + " (pass --force to train anyway)");
    err << "warning: " << msg << '\n';
  }
  if (data.crop() != cfg.model.crop) {
    throw ConfigError("dataset crop " + std::to_string(data.crop()) + " does not match model.crop " +
                      std::to_string(cfg.model.crop));
  }
  std::optional<Dataset> val;
  if (!a.val.empty()) {
    val = load_dataset(a.val);
    if (val->crop() != cfg.model.crop) throw ConfigError("validation dataset crop does not match model.crop");
  }
  return with_precision(cfg.train.precision,
                        [&]<typename T>() { return train_as<T>(cfg, a, data, val, out, err); });
}

// ---- eval ----

struct EvalArgs {
  std::string checkpoint, data, csv;
  std::vector<std::size_t> k;
  std::vector<double> thresholds;
  bool oracle = false;
};

int cmd_eval(const EvalArgs& a, std::ostream& out, std::ostream& err) {
  const auto loaded = open_checkpoint(a.checkpoint);
  const Dataset data = open_dataset(a.data, loaded.config, err);
  const auto ks = a.k.empty() ? loaded.config.eval.k : a.k;
  const auto thresholds = a.thresholds.empty() ? loaded.config.eval.thresholds : a.thresholds;
  return with_precision(loaded.ckpt.precision, [&]<typename T>() {
    const auto model = model_from_checkpoint<T>(loaded.ckpt);
    json sections = json::array();
    std::ostringstream csv;
    csv << "k,method,threshold_deg,accuracy\n";
    for (std::size_t k : ks) {
      json section{{"k_refs", k}};
      const auto rep = eval::eval_model(model, data, k, thresholds);
      section["model"] = eval::to_json(rep);
      for (const auto& [t, acc] : rep.accuracy) csv << k << ",model," << t << ',' << acc << '\n';
      if (a.oracle) {
        const auto orc = eval::eval_oracle(data, k, thresholds);
        section["oracle"] = eval::to_json(orc);
        for (const auto& [t, acc] : orc.accuracy) csv << k << ",oracle," << t << ',' << acc << '\n';
        section["summary"] = {{"model", accuracy_summary(rep)}, {"oracle", accuracy_summary(orc)}};
      } else {
        section["summary"] = {{"model", accuracy_summary(rep)}};
      }
      sections.push_back(section);
    }
    json report{{"checkpoint", a.checkpoint},
                {"config_hash", loaded.ckpt.config_hash},
                {"dataset", a.data},
                {"dataset_hash", data.config_hash()},
                {"n_objects", data.objects.size()},
                {"reports", sections}};
    if (!a.csv.empty()) write_text(a.csv, csv.str());
    out << report.dump(2) << '\n';
    return int{kOk};
  });
}

// ---- bench ----

struct BenchArgs {
  std::string checkpoint;
  std::vector<std::size_t> refs{16, 32, 64};
  std::size_t queries = 30;
  std::size_t repeats = 10;
};

int cmd_bench(const BenchArgs& a, std::ostream& out) {
  const auto loaded = open_checkpoint(a.checkpoint);
  return with_precision(loaded.ckpt.precision, [&]<typename T>() {
    const auto model = model_from_checkpoint<T>(loaded.ckpt);
    const auto rows = eval::bench_latency(model, a.refs, a.queries, a.repeats);
    out << eval::latency_csv(rows);
    return int{kOk};
  });
}

// ---- sweep ----

struct SweepArgs {
  std::string checkpoint, data, mode;
  std::vector<std::size_t> k{8, 16, 32, 64};
  std::vector<double> gaps{10, 20, 30, 40, 50};
  std::vector<double> thresholds{15};
  std::size_t trials = 50;
  std::uint64_t seed = 11;
};

int cmd_sweep(const SweepArgs& a, std::ostream& out, std::ostream& err) {
  if (a.mode != "refcount" && a.mode != "separation") {
    throw ConfigError("--mode must be 'refcount' or 'separation', got '" + a.mode + "'");
  }
  const auto loaded = open_checkpoint(a.checkpoint);
  const Dataset data = open_dataset(a.data, loaded.config, err);
  return with_precision(loaded.ckpt.precision, [&]<typename T>() {
    const auto model = model_from_checkpoint<T>(loaded.ckpt);
    eval::SweepResult res;
    if (a.mode == "refcount") {
      res = eval::refcount_sweep(model, data, a.k, a.thresholds);
    } else {
      std::vector<synth::ProceduralObject> objects;
      for (const auto& o : data.objects) objects.push_back(o.object);
      res = eval::separation_sweep(model, objects, a.gaps, a.trials, a.seed,
                                   synth::parse_background_policy(loaded.config.data.background));
    }
    out << res.to_csv();
    return int{kOk};
  });
}

// ---- attn ----

struct AttnArgs {
  std::string checkpoint, data;
  std::size_t object = 0;
  std::size_t query = 0;
  std::size_t k = 16;
  std::optional<std::size_t> layer;
};

int cmd_attn(const AttnArgs& a, std::ostream& out, std::ostream& err) {
  const auto loaded = open_checkpoint(a.checkpoint);
  const Dataset data = open_dataset(a.data, loaded.config, err);
  if (a.object >= data.objects.size()) {
    throw MissingEntity("object index " + std::to_string(a.object) + " not in dataset (" +
                        std::to_string(data.objects.size()) + " objects)");
  }
  const auto& obj = data.objects[a.object];
  if (a.query >= obj.query_pool.size()) {
    throw MissingEntity("query index " + std::to_string(a.query) + " not in object " + std::to_string(a.object) +
                        " (" + std::to_string(obj.query_pool.size()) + " queries)");
  }
  std::vector<so3::RotationMatrix> pool;
  for (const auto& v : obj.ref_pool) pool.push_back(v.rotation);
  if (a.k < 1 || a.k > pool.size()) {
    throw InsufficientReferences("object has " + std::to_string(pool.size()) + " references, " +
                                 std::to_string(a.k) + " requested");
  }
  const auto picks = so3::fps_select(pool, a.k);
  model::EpisodeView ep;
  for (std::size_t i : picks) {
    ep.ref_images.push_back(&obj.ref_pool[i].image);
    ep.ref_rotations.push_back(obj.ref_pool[i].rotation);
  }
  const auto& query = obj.query_pool[a.query];
  ep.query_images.push_back(&query.image);
  const std::size_t layer = a.layer.value_or(loaded.config.model.depth - 1);

  return with_precision(loaded.ckpt.precision, [&]<typename T>() {
    const auto model = model_from_checkpoint<T>(loaded.ckpt);
    const auto scores = model::attention_scores(model, ep, layer);
    const auto pred = model::predict_rotation(model, ep)[0];
    json refs = json::array();
    for (std::size_t i = 0; i < picks.size(); ++i) {
      refs.push_back({{"pool_index", picks[i]},
                      {"rotation", ep.ref_rotations[i].data()},
                      {"weight", scores[0][i]},
                      {"angle_to_query_deg", so3::rad2deg(so3::geodesic_angle(ep.ref_rotations[i], query.rotation))}});
    }
    json report{{"checkpoint", a.checkpoint},
                {"object_index", a.object},
                {"object_id", obj.object.id},
                {"query_index", a.query},
                {"layer", layer},
                {"query_rotation", query.rotation.data()},
                {"predicted_rotation", pred.data()},
                {"error_deg", so3::rad2deg(so3::geodesic_angle(pred, query.rotation))},
                {"references", refs}};
    out << report.dump(2) << '\n';
    return int{kOk};
  });
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Reference-based rotation estimation: data generation, training, evaluation."};
  app.name("egrot");
  app.require_subcommand(1);

  std::string gen_config, gen_out;
  auto* gen = app.add_subcommand("gen", "Render a synthetic dataset");
  gen->add_option("--config", gen_config, "Run config JSON")->required();
  gen->add_option("--out", gen_out, "Dataset file to write")->required();

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "Train a model");
  train->add_option("--config", ta.config, "Run config JSON")->required();
  train->add_option("--data", ta.data, "Training dataset")->required();
  train->add_option("--out", ta.out, "Checkpoint to write")->required();
  train->add_option("--val", ta.val, "Held-out dataset for periodic validation");
  train->add_option("--resume", ta.resume, "Continue from this checkpoint");
  train->add_option("--log", ta.log, "Train log path (default <out>.log.jsonl)");
  train->add_option("--precision", ta.precision, "Override train.precision")->check(CLI::IsMember({"f32", "f64"}));
  train->add_flag("--force", ta.force, "Train even if the dataset hash does not match the config");

  EvalArgs ea;
  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset");
  ev->add_option("--checkpoint", ea.checkpoint)->required();
  ev->add_option("--data", ea.data)->required();
  ev->add_option("--k", ea.k, "Reference counts (default: eval.k)")->delimiter(',');
  ev->add_option("--thresholds", ea.thresholds, "Degrees (default: eval.thresholds)")->delimiter(',');
  ev->add_flag("--oracle", ea.oracle, "Also run the nearest-reference oracle on the same episodes");
  ev->add_option("--csv", ea.csv, "Also write accuracies as CSV");

  BenchArgs ba;
  auto* bench = app.add_subcommand("bench", "Time onboarding and per-query prediction");
  bench->add_option("--checkpoint", ba.checkpoint)->required();
  bench->add_option("--refs", ba.refs, "Reference counts")->delimiter(',');
  bench->add_option("--queries", ba.queries, "Queries for the batched pass")->check(CLI::PositiveNumber);
  bench->add_option("--repeats", ba.repeats, "Timed repetitions")->check(CLI::PositiveNumber);

  SweepArgs sa;
  auto* sweep = app.add_subcommand("sweep", "Reference-count or angular-separation sweep");
  sweep->add_option("--checkpoint", sa.checkpoint)->required();
  sweep->add_option("--data", sa.data)->required();
  sweep->add_option("--mode", sa.mode, "refcount or separation")->required();
  sweep->add_option("--k", sa.k, "Reference counts (refcount)")->delimiter(',');
  sweep->add_option("--thresholds", sa.thresholds, "Degrees (refcount)")->delimiter(',');
  sweep->add_option("--gaps", sa.gaps, "Half-separations in degrees (separation)")->delimiter(',');
  sweep->add_option("--trials", sa.trials, "Trials per gap (separation)")->check(CLI::PositiveNumber);
  sweep->add_option("--seed", sa.seed, "Trial seed (separation)");

  AttnArgs aa;
  auto* attn = app.add_subcommand("attn", "Per-reference attention weights for one query");
  attn->add_option("--checkpoint", aa.checkpoint)->required();
  attn->add_option("--data", aa.data)->required();
  attn->add_option("--object", aa.object, "Object index in the dataset")->required();
  attn->add_option("--query", aa.query, "Query index within the object")->required();
  attn->add_option("--k", aa.k, "FPS references");
  attn->add_option("--layer", aa.layer, "Transformer layer (default: last)");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n";
    const auto selected = app.get_subcommands();
    err << (selected.empty() ? app.help() : selected.front()->help());
    return kUsage;
  }

  try {
    if (*gen) return cmd_gen(gen_config, gen_out, out);
    if (*train) return cmd_train(ta, out, err);
    if (*ev) return cmd_eval(ea, out, err);
    if (*bench) return cmd_bench(ba, out);
    if (*sweep) return cmd_sweep(sa, out, err);
    if (*attn) return cmd_attn(aa, out, err);
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return exit_code_for(e);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kFailure;
  }
  return kUsage;
}

}  // namespace egrot::cli
