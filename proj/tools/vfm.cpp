// vfm: generate synthetic wells, train MAP / VI flow models, predict,
// evaluate, and run the training-set-size study.
//
// Configuration is resolved as defaults < --config file < explicit flags.
// A manifest.json written next to the outputs records the resolved config,
// seeds, and FNV-1a hashes of every input and output; passing it back as
// --config reproduces the run.

#include <atomic>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <thread>
#include <type_traits>
#include <vector>

#include "CLI11.hpp"
#include "vfm/vfm.hpp"

namespace fs = std::filesystem;
using vfm::ConfigError;
using vfm::Json;

namespace {

// ---------------------------------------------------------------------------
// Config plumbing.

enum class Kind { Str, Int, Num, Ints, Nums, Strs };

struct OptionSpec {
  std::string flag;  // without leading dashes; the config key swaps '-' for '_'
  Kind kind;
  std::string help;
};

std::string key_of(const std::string& flag) {
  std::string k = flag;
  std::replace(k.begin(), k.end(), '-', '_');
  return k;
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

Json flag_value(const OptionSpec& o, const std::vector<std::string>& raw) {
  const std::string where = "--" + o.flag;
  auto num = [&](const std::string& s) { return vfm::parse_double(s, where); };
  auto integer = [&](const std::string& s) -> std::int64_t {
    std::int64_t v = 0;
    const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
    if (r.ec != std::errc{} || r.ptr != s.data() + s.size()) throw ConfigError("cannot parse integer '" + s + "' at " + where);
    return v;
  };
  switch (o.kind) {
    case Kind::Str: return raw.back();
    case Kind::Int: return integer(raw.back());
    case Kind::Num: return num(raw.back());
    case Kind::Ints: {
      Json a = Json::array();
      for (const auto& s : split_list(raw.back())) a.push_back(integer(s));
      return a;
    }
    case Kind::Nums: {
      Json a = Json::array();
      for (const auto& s : split_list(raw.back())) a.push_back(num(s));
      return a;
    }
    case Kind::Strs: return Json(raw);
  }
  return nullptr;
}

struct Command {
  std::string name;
  Json defaults;
  std::vector<OptionSpec> options;
  std::map<std::string, std::vector<std::string>> raw;
  std::string config_path;
  CLI::App* app = nullptr;
};

const std::vector<OptionSpec>& common_options() {
  static const std::vector<OptionSpec> o{
      {"seed", Kind::Int, "master seed"},
      {"out", Kind::Str, "output directory"},
      {"jobs", Kind::Int, "wells processed in parallel"},
  };
  return o;
}

std::vector<OptionSpec> all_options(const Command& c) {
  auto out = common_options();
  out.insert(out.end(), c.options.begin(), c.options.end());
  return out;
}

void register_command(CLI::App& root, Command& c, const std::string& description) {
  c.app = root.add_subcommand(c.name, description);
  c.app->add_option("--config", c.config_path, "JSON config file or a previous manifest.json");
  for (const auto& o : all_options(c)) {
    auto* opt = c.app->add_option("--" + o.flag, c.raw[o.flag], o.help);
    if (o.kind != Kind::Strs) opt->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
    const auto key = key_of(o.flag);
    if (c.defaults.contains(key) && !c.defaults[key].is_null()) opt->default_str(c.defaults[key].dump());
  }
}

Json resolve_config(const Command& c) {
  Json cfg = c.defaults;
  if (!c.config_path.empty()) {
    Json file = vfm::read_json_file(c.config_path);
    if (file.contains("format") && file["format"] == "vfm-manifest/1") {
      if (file.at("command") != c.name) {
        throw ConfigError("manifest '" + c.config_path + "' was written by '" + file.at("command").get<std::string>() +
                          "', not '" + c.name + "'");
      }
      file = file.at("config");
    }
    if (!file.is_object()) throw ConfigError("config '" + c.config_path + "' must be a JSON object");
    for (const auto& [k, v] : file.items()) {
      if (!cfg.contains(k)) throw ConfigError("unknown config key '" + k + "' for " + c.name);
      cfg[k] = v;
    }
  }
  for (const auto& o : all_options(c)) {
    const auto it = c.raw.find(o.flag);
    if (it != c.raw.end() && !it->second.empty()) cfg[key_of(o.flag)] = flag_value(o, it->second);
  }
  return cfg;
}

template <typename T>
T get(const Json& cfg, const std::string& key) {
  try {
    const auto& v = cfg.at(key);
    if constexpr (std::is_unsigned_v<T>) {
      if (v.is_number_integer() && v.get<std::int64_t>() < 0) throw ConfigError("config key '" + key + "' must be >= 0");
    }
    return v.get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError("config key '" + key + "' is missing or has the wrong type");
  }
}

std::optional<double> get_optional(const Json& cfg, const std::string& key) {
  if (!cfg.contains(key) || cfg[key].is_null()) return std::nullopt;
  return get<double>(cfg, key);
}

std::vector<std::string> get_paths(const Json& cfg, const std::string& key) {
  const auto& v = cfg.at(key);
  if (v.is_string()) return {v.get<std::string>()};
  return get<std::vector<std::string>>(cfg, key);
}

// ---------------------------------------------------------------------------
// Manifest.

std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h = 14695981039346656037ull) {
  for (unsigned char ch : bytes) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string file_hash(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return hex64(fnv1a(ss.str()));
}

Json hashed(const std::vector<std::string>& paths) {
  Json a = Json::array();
  for (const auto& p : paths) a.push_back(Json{{"path", p}, {"fnv1a64", file_hash(p)}});
  return a;
}

void write_manifest(const std::string& command, const Json& cfg, const std::vector<std::string>& inputs,
                    const std::vector<std::string>& outputs, const Json& extra = Json::object()) {
  Json m;
  m["format"] = "vfm-manifest/1";
  m["command"] = command;
  m["config"] = cfg;
  m["config_fnv1a64"] = hex64(fnv1a(cfg.dump()));
  m["seed"] = cfg.at("seed");
  m["inputs"] = hashed(inputs);
  m["outputs"] = hashed(outputs);
  for (const auto& [k, v] : extra.items()) m[k] = v;
  vfm::write_json_file((fs::path(get<std::string>(cfg, "out")) / "manifest.json").string(), m);
}

std::string prepare_out_dir(const Json& cfg) {
  const auto out = get<std::string>(cfg, "out");
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec) throw ConfigError("cannot create output directory '" + out + "': " + ec.message());
  return out;
}

std::string in_dir(const std::string& dir, const std::string& file) { return (fs::path(dir) / file).string(); }

// Runs task(i) for i in [0, n) on up to `jobs` threads. The first failure
// (lowest index) is rethrown after every worker has finished.
template <typename F>
void parallel_for(std::size_t n, std::int64_t jobs, F task) {
  if (jobs < 1) throw ConfigError("--jobs must be >= 1");
  std::vector<std::exception_ptr> errors(n);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        task(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const auto threads = std::min<std::size_t>(static_cast<std::size_t>(jobs), n);
  if (threads <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

// ---------------------------------------------------------------------------
// Model config shared by train and size-study.

const std::vector<OptionSpec>& model_options() {
  static const std::vector<OptionSpec> o{
      {"method", Kind::Str, "map | vi"},
      {"noise", Kind::Str, "fixed | homo | hetero"},
      {"hidden", Kind::Ints, "hidden layer widths, e.g. 50,50,50"},
      {"bias-std", Kind::Num, "prior std of the biases"},
      {"relative-error", Kind::Num, "instrument MAPE E_r (default by meter type)"},
      {"sigma-n", Kind::Num, "fixed noise std in flow units (default sqrt(pi/2) E_r mean(y))"},
      {"noise-log-std", Kind::Num, "log-normal std of the noise prior"},
      {"learning-rate", Kind::Num, "Adam step size"},
      {"batch-size", Kind::Int, "mini-batch size"},
      {"mc-samples", Kind::Int, "ELBO Monte-Carlo samples per step"},
      {"max-epochs", Kind::Int, "epoch limit"},
      {"patience", Kind::Int, "early-stopping patience in epochs"},
      {"initial-sigma-scale", Kind::Num, "initial posterior std as a fraction of the prior std (vi)"},
      {"validation-fraction", Kind::Num, "random validation share of the training data"},
  };
  return o;
}

Json model_defaults(const char* method) {
  const vfm::TrainConfig t;
  return Json{{"method", method},
              {"noise", "fixed"},
              {"hidden", {50, 50, 50}},
              {"bias_std", 0.1},
              {"relative_error", nullptr},
              {"sigma_n", nullptr},
              {"noise_log_std", 0.5},
              {"learning_rate", t.learning_rate},
              {"batch_size", t.batch_size},
              {"mc_samples", t.mc_samples},
              {"max_epochs", t.max_epochs},
              {"patience", t.patience},
              {"initial_sigma_scale", t.initial_sigma_scale},
              {"validation_fraction", t.validation_fraction}};
}

vfm::ModelConfig model_config(const Json& cfg) {
  vfm::ModelConfig m;
  m.method = vfm::method_from_string(get<std::string>(cfg, "method"));
  m.noise = vfm::noise_kind_from_string(get<std::string>(cfg, "noise"));
  m.hidden = get<std::vector<std::size_t>>(cfg, "hidden");
  m.bias_std = get<double>(cfg, "bias_std");
  m.relative_error = get_optional(cfg, "relative_error");
  m.sigma_n = get_optional(cfg, "sigma_n");
  m.noise_log_std = get<double>(cfg, "noise_log_std");
  m.train.learning_rate = get<double>(cfg, "learning_rate");
  m.train.batch_size = get<std::size_t>(cfg, "batch_size");
  m.train.mc_samples = get<std::size_t>(cfg, "mc_samples");
  m.train.max_epochs = get<std::size_t>(cfg, "max_epochs");
  m.train.patience = get<std::size_t>(cfg, "patience");
  m.train.initial_sigma_scale = get<double>(cfg, "initial_sigma_scale");
  m.train.validation_fraction = get<double>(cfg, "validation_fraction");
  m.train.seed = get<std::uint64_t>(cfg, "seed");
  m.validate();
  vfm::Architecture::with_hidden(m.hidden);
  return m;
}

// ---------------------------------------------------------------------------
// Commands.

void cmd_generate(const Json& cfg) {
  const auto out = prepare_out_dir(cfg);
  const auto meter = vfm::meter_from_string(get<std::string>(cfg, "meter"));
  vfm::SyntheticWellConfig base =
      meter == vfm::MeterType::MPFM ? vfm::SyntheticWellConfig::mpfm() : vfm::SyntheticWellConfig::test_separator();
  if (cfg.contains("records") && !cfg["records"].is_null()) base.records = get<std::size_t>(cfg, "records");
  if (auto v = get_optional(cfg, "cadence_hours")) base.cadence_hours = *v;
  if (auto v = get_optional(cfg, "relative_error")) base.relative_error = *v;
  base.start = vfm::parse_timestamp(get<std::string>(cfg, "start"));
  base.choke_coefficient = get<double>(cfg, "choke_coefficient");
  base.pressure_drift = get<double>(cfg, "pressure_drift");
  base.choke_wear_per_year = get<double>(cfg, "choke_wear_per_year");
  base.eta_oil_drift_per_year = get<double>(cfg, "eta_oil_drift_per_year");
  base.eta_gas_drift_per_year = get<double>(cfg, "eta_gas_drift_per_year");
  base.choke_reopen_step = get<double>(cfg, "choke_reopen_step");
  base.choke_change_probability = get<double>(cfg, "choke_change_probability");
  base.validate();

  const auto wells = get<std::size_t>(cfg, "wells");
  if (wells < 1) throw ConfigError("--wells must be >= 1");
  const auto seed = get<std::uint64_t>(cfg, "seed");
  const auto prefix = get<std::string>(cfg, "prefix");
  std::vector<std::string> outputs(wells);
  std::vector<std::optional<std::string>> warnings(wells);
  parallel_for(wells, get<std::int64_t>(cfg, "jobs"), [&](std::size_t i) {
    char name[32];
    std::snprintf(name, sizeof name, "%02zu", i + 1);
    outputs[i] = in_dir(out, prefix + name + ".csv");
    auto w = vfm::generate_synthetic_well(base, vfm::derive_seed(seed, i));
    vfm::save_dataset(outputs[i], w.data);
    warnings[i] = w.warning;
  });
  Json warn = Json::array();
  for (std::size_t i = 0; i < wells; ++i) {
    if (warnings[i]) {
      std::cerr << Json{{"warning", outputs[i] + ": " + *warnings[i]}}.dump() << '\n';
      warn.push_back(outputs[i] + ": " + *warnings[i]);
    }
  }
  write_manifest("generate", cfg, {}, outputs, Json{{"warnings", warn}});
}

void cmd_train(const Json& cfg) {
  const auto out = prepare_out_dir(cfg);
  const auto model = model_config(cfg);
  const auto split = get<std::string>(cfg, "split");
  if (split != "historical" && split != "future" && split != "none") {
    throw ConfigError("--split must be historical, future or none");
  }
  const double window = get<double>(cfg, "window_days");
  const auto inputs = get_paths(cfg, "data");
  if (inputs.empty()) throw ConfigError("train needs at least one --data file");
  std::vector<std::vector<std::string>> written(inputs.size());
  parallel_for(inputs.size(), get<std::int64_t>(cfg, "jobs"), [&](std::size_t i) {
    const auto data = vfm::load_dataset(inputs[i]);
    const std::string stem = fs::path(inputs[i]).stem().string();
    vfm::WellDataset train = data, test;
    if (split == "historical") std::tie(train, test) = vfm::split_historical(data, window);
    if (split == "future") std::tie(train, test) = vfm::split_future(data, window);
    auto ckpt = vfm::train_well(train, model, stem);
    if (!test.empty()) {
      ckpt.test_file = stem + ".test.csv";
      vfm::save_dataset(in_dir(out, ckpt.test_file), test);
      written[i].push_back(in_dir(out, ckpt.test_file));
    }
    const auto path = in_dir(out, stem + ".ckpt.json");
    vfm::save_checkpoint(path, ckpt);
    written[i].insert(written[i].begin(), path);
  });
  std::vector<std::string> outputs;
  for (const auto& w : written) outputs.insert(outputs.end(), w.begin(), w.end());
  write_manifest("train", cfg, inputs, outputs);
}

void cmd_predict(const Json& cfg) {
  const auto out = prepare_out_dir(cfg);
  const auto ckpt_path = get<std::string>(cfg, "checkpoint");
  const auto data_path = get<std::string>(cfg, "data");
  const auto ckpt = vfm::load_checkpoint(ckpt_path);
  const auto data = vfm::load_dataset(data_path);
  if (data.empty()) throw ConfigError("no records in '" + data_path + "'");
  const auto samples = get<std::size_t>(cfg, "samples");
  const auto levels = get<std::vector<double>>(cfg, "levels");
  for (double c : levels) {
    if (!(c >= 0.0 && c <= 1.0)) throw ConfigError("interval levels must lie in [0, 1]");
  }
  const auto draws = vfm::predictive_draws(vfm::standardized_features(data, ckpt.stats), ckpt.distribution(),
                                           ckpt.model, ckpt.stats, samples, get<std::uint64_t>(cfg, "seed"));

  const auto path = in_dir(out, fs::path(data_path).stem().string() + ".predictions.csv");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ConfigError("cannot write '" + path + "'");
  os << "timestamp," << vfm::kPredictionHeader;
  for (double c : levels) os << ",lower_" << vfm::format_double(c) << ",upper_" << vfm::format_double(c);
  os << '\n';
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto s = vfm::summarize_draws(draws, static_cast<Eigen::Index>(i), levels);
    std::ostringstream row;
    vfm::write_prediction_row(row, data.records[i].x, s);
    std::string line = row.str();
    line.pop_back();
    os << vfm::format_timestamp(data.records[i].timestamp) << ',' << line;
    for (const auto& iv : s.intervals) os << ',' << vfm::format_double(iv.lower) << ',' << vfm::format_double(iv.upper);
    os << '\n';
  }
  os.close();
  write_manifest("predict", cfg, {ckpt_path, data_path}, {path});
}

void write_curves(const std::string& out, const vfm::EvaluationReport& r, std::vector<std::string>& outputs) {
  const std::string base = in_dir(out, r.group);
  {
    std::ofstream os(base + ".wells.csv", std::ios::binary);
    os << "well,points,mape,rmse,coverage95\n";
    for (const auto& w : r.wells) {
      os << w.well << ',' << w.y_true.size() << ',' << vfm::format_double(w.mape) << ',' << vfm::format_double(w.rmse)
         << ',' << (std::isfinite(w.coverage95) ? vfm::format_double(w.coverage95) : "") << '\n';
    }
  }
  outputs.push_back(base + ".wells.csv");
  {
    std::ofstream os(base + ".cumulative.csv", std::ios::binary);
    os << "threshold_percent,fraction\n";
    for (std::size_t i = 0; i < r.thresholds.size(); ++i) {
      os << vfm::format_double(r.thresholds[i]) << ',' << vfm::format_double(r.cumulative[i]) << '\n';
    }
  }
  outputs.push_back(base + ".cumulative.csv");
  if (r.has_calibration) {
    std::ofstream os(base + ".calibration.csv", std::ios::binary);
    os << "level,p25,median,p75\n";
    const auto& c = r.calibration;
    for (std::size_t i = 0; i < c.levels.size(); ++i) {
      os << vfm::format_double(c.levels[i]) << ',' << vfm::format_double(c.p25[i]) << ','
         << vfm::format_double(c.median[i]) << ',' << vfm::format_double(c.p75[i]) << '\n';
    }
    outputs.push_back(base + ".calibration.csv");
  }
}

void cmd_evaluate(const Json& cfg) {
  const auto out = prepare_out_dir(cfg);
  const auto ckpts = get_paths(cfg, "checkpoint");
  if (ckpts.empty()) throw ConfigError("evaluate needs at least one --checkpoint");
  const auto override_data = get<std::string>(cfg, "data");
  if (!override_data.empty() && ckpts.size() != 1) throw ConfigError("--data applies to a single --checkpoint only");
  const auto samples = get<std::size_t>(cfg, "samples");
  const auto seed = get<std::uint64_t>(cfg, "seed");

  std::vector<vfm::WellEvaluation> evals(ckpts.size());
  std::vector<std::string> test_files(ckpts.size());
  std::vector<std::string> methods(ckpts.size());
  parallel_for(ckpts.size(), get<std::int64_t>(cfg, "jobs"), [&](std::size_t i) {
    auto c = vfm::load_checkpoint(ckpts[i]);
    if (c.well.empty()) c.well = fs::path(ckpts[i]).stem().string();
    if (!override_data.empty()) {
      test_files[i] = override_data;
    } else {
      if (c.test_file.empty()) throw ConfigError(ckpts[i] + " has no test split; pass --data");
      test_files[i] = (fs::path(ckpts[i]).parent_path() / c.test_file).string();
    }
    methods[i] = std::string(vfm::to_string(c.method));
    evals[i] = vfm::evaluate_checkpoint(c, vfm::load_dataset(test_files[i]), samples, vfm::derive_seed(seed, i));
  });

  // One report per meter type.
  std::map<std::string, std::vector<vfm::WellEvaluation>> groups;
  for (auto& e : evals) groups[std::string(vfm::to_string(e.meter))].push_back(std::move(e));
  Json report;
  report["methods"] = Json::array();
  for (const auto& m : methods) {
    if (std::find(report["methods"].begin(), report["methods"].end(), m) == report["methods"].end()) {
      report["methods"].push_back(m);
    }
  }
  report["groups"] = Json::array();
  std::vector<std::string> outputs{in_dir(out, "report.json")};
  for (auto& [name, wells] : groups) {
    const auto r = vfm::build_report(name, std::move(wells));
    report["groups"].push_back(vfm::to_json(r));
    write_curves(out, r, outputs);
  }
  vfm::write_json_file(outputs.front(), report);
  std::vector<std::string> inputs = ckpts;
  inputs.insert(inputs.end(), test_files.begin(), test_files.end());
  write_manifest("evaluate", cfg, inputs, outputs);
}

void cmd_size_study(const Json& cfg) {
  const auto out = prepare_out_dir(cfg);
  const auto model = model_config(cfg);
  const auto inputs = get_paths(cfg, "data");
  if (inputs.empty()) throw ConfigError("size-study needs at least one --data file");
  const auto trials = get<std::size_t>(cfg, "trials");
  if (trials < 1) throw ConfigError("--trials must be >= 1");
  std::vector<int> sizes;
  for (auto k : get<std::vector<std::int64_t>>(cfg, "sizes")) sizes.push_back(static_cast<int>(k));
  std::sort(sizes.begin(), sizes.end());
  if (sizes.empty() || sizes.front() != 150) throw ConfigError("--sizes must include the k = 150 baseline as its smallest entry");
  const auto seed = get<std::uint64_t>(cfg, "seed");

  std::vector<std::vector<vfm::SizeTrial>> results(inputs.size());
  parallel_for(inputs.size(), get<std::int64_t>(cfg, "jobs"), [&](std::size_t w) {
    const auto data = vfm::load_dataset(inputs[w]);
    for (std::size_t t = 0; t < trials; ++t) {
      results[w].push_back(vfm::run_size_trial(data, model, vfm::derive_seed(vfm::derive_seed(seed, w), t), sizes));
    }
  });

  std::vector<std::map<int, double>> relative;
  Json per_well = Json::array();
  for (std::size_t w = 0; w < inputs.size(); ++w) {
    Json jt = Json::array();
    for (const auto& t : results[w]) {
      relative.push_back(vfm::relative_mape_series(t.mape));
      Json e = Json::object();
      for (const auto& [k, v] : t.mape) e[std::to_string(k)] = v;
      jt.push_back(Json{{"split_index", t.split_index}, {"mape", e}});
    }
    per_well.push_back(Json{{"data", inputs[w]}, {"trials", jt}});
  }
  const auto s = vfm::summarize_size_study(relative);
  std::vector<double> ks(s.sizes.begin(), s.sizes.end());
  const double rho = vfm::spearman(ks, s.median);

  Json j;
  j["sizes"] = s.sizes;
  j["trials"] = s.trials;
  j["relative_mape"] = Json{{"p25", s.p25}, {"median", s.median}, {"p75", s.p75}};
  j["spearman_median_vs_k"] = rho;
  j["wells"] = per_well;
  const auto json_path = in_dir(out, "size_study.json");
  vfm::write_json_file(json_path, j);
  const auto csv_path = in_dir(out, "size_study.csv");
  std::ofstream os(csv_path, std::ios::binary);
  os << "k,p25,median,p75\n";
  for (std::size_t i = 0; i < s.sizes.size(); ++i) {
    os << s.sizes[i] << ',' << vfm::format_double(s.p25[i]) << ',' << vfm::format_double(s.median[i]) << ','
       << vfm::format_double(s.p75[i]) << '\n';
  }
  os.close();
  write_manifest("size-study", cfg, inputs, {json_path, csv_path});
}

Json with_common(Json j) {
  j["seed"] = 0;
  j["out"] = "out";
  j["jobs"] = 1;
  return j;
}

Json merged(Json a, const Json& b) {
  for (const auto& [k, v] : b.items()) a[k] = v;
  return a;
}

int fail(const char* kind, const std::string& message, int code) {
  std::cerr << Json{{"error", kind}, {"message", message}}.dump() << '\n';
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Bayesian neural-network virtual flow meter"};
  app.require_subcommand(1);

  Command generate{"generate",
                   with_common(Json{{"wells", 1},
                                    {"prefix", "W"},
                                    {"meter", "MPFM"},
                                    {"records", nullptr},
                                    {"cadence_hours", nullptr},
                                    {"relative_error", nullptr},
                                    {"start", "2018-01-01T00:00:00Z"},
                                    {"choke_coefficient", 12.0},
                                    {"pressure_drift", 0.0},
                                    {"choke_wear_per_year", 0.0},
                                    {"eta_oil_drift_per_year", 0.0},
                                    {"eta_gas_drift_per_year", 0.0},
                                    {"choke_reopen_step", 0.05},
                                    {"choke_change_probability", 0.08}}),
                   {{"wells", Kind::Int, "number of wells"},
                    {"prefix", Kind::Str, "file name prefix"},
                    {"meter", Kind::Str, "MPFM | TestSeparator"},
                    {"records", Kind::Int, "records per well (default by meter)"},
                    {"cadence-hours", Kind::Num, "hours between records (default by meter)"},
                    {"relative-error", Kind::Num, "measurement MAPE E_r (default by meter)"},
                    {"start", Kind::Str, "first timestamp, YYYY-MM-DDTHH:MM:SSZ"},
                    {"choke-coefficient", Kind::Num, "ground-truth choke coefficient C"},
                    {"pressure-drift", Kind::Num, "upstream pressure decline, bar/day"},
                    {"choke-wear-per-year", Kind::Num, "relative drift of C per year (concept drift)"},
                    {"eta-oil-drift-per-year", Kind::Num, "oil mass fraction drift per year"},
                    {"eta-gas-drift-per-year", Kind::Num, "gas mass fraction drift per year"},
                    {"choke-reopen-step", Kind::Num, "choke opening per 10 bar of upstream pressure decline"},
                    {"choke-change-probability", Kind::Num, "per-record probability of a choke move"}},
                   {},
                   "",
                   nullptr};
  Command train{"train",
                with_common(merged(model_defaults("map"),
                                   Json{{"data", Json::array()}, {"split", "historical"}, {"window_days", 90.0}})),
                {{"data", Kind::Strs, "well dataset CSV (repeatable)"},
                 {"split", Kind::Str, "historical | future | none"},
                 {"window-days", Kind::Num, "test window length in days"}},
                {},
                "",
                nullptr};
  train.options.insert(train.options.end(), model_options().begin(), model_options().end());
  Command predict{"predict",
                  with_common(Json{{"checkpoint", ""}, {"data", ""}, {"samples", 1000}, {"levels", {0.5, 0.9, 0.95}}}),
                  {{"checkpoint", Kind::Str, "checkpoint JSON"},
                   {"data", Kind::Str, "dataset CSV with the inputs"},
                   {"samples", Kind::Int, "Monte-Carlo samples"},
                   {"levels", Kind::Nums, "centred interval levels"}},
                  {},
                  "",
                  nullptr};
  Command evaluate{"evaluate",
                   with_common(Json{{"checkpoint", Json::array()}, {"data", ""}, {"samples", 1000}}),
                   {{"checkpoint", Kind::Strs, "checkpoint JSON (repeatable)"},
                    {"data", Kind::Str, "test data override for a single checkpoint"},
                    {"samples", Kind::Int, "Monte-Carlo samples for VI checkpoints"}},
                   {},
                   "",
                   nullptr};
  Command size_study{"size-study",
                     with_common(merged(model_defaults("map"),
                                        Json{{"data", Json::array()},
                                             {"trials", 400},
                                             {"sizes", vfm::size_study_sizes()}})),
                     {{"data", Kind::Strs, "well dataset CSV (repeatable)"},
                      {"trials", Kind::Int, "trials per well"},
                      {"sizes", Kind::Ints, "training sizes, smallest must be 150"}},
                     {},
                     "",
                     nullptr};
  size_study.options.insert(size_study.options.end(), model_options().begin(), model_options().end());

  register_command(app, generate, "generate synthetic well datasets");
  register_command(app, train, "train one model per well");
  register_command(app, predict, "predictive summaries for a dataset");
  register_command(app, evaluate, "metrics, cumulative performance and calibration");
  register_command(app, size_study, "relative test error against training-set size");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail("config", e.what(), 2);
  }

  try {
    for (auto* c : {&generate, &train, &predict, &evaluate, &size_study}) {
      if (!c->app->parsed()) continue;
      const Json cfg = resolve_config(*c);
      if (c == &generate) cmd_generate(cfg);
      if (c == &train) cmd_train(cfg);
      if (c == &predict) cmd_predict(cfg);
      if (c == &evaluate) cmd_evaluate(cfg);
      if (c == &size_study) cmd_size_study(cfg);
    }
  } catch (const vfm::NumericalError& e) {
    return fail("numerical", e.what(), 3);
  } catch (const vfm::Error& e) {
    return fail(std::string(e.kind()).c_str(), e.what(), 2);
  } catch (const std::exception& e) {
    return fail("internal", e.what(), 1);
  }
  return 0;
}
