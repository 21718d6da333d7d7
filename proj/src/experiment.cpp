/* Copyright 2026 The divens Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/

#include "divens/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include "divens/errors.hpp"
#include "divens/metrics.hpp"
#include "divens/rng.hpp"

namespace fs = std::filesystem;

namespace divens {

std::string format_number(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

namespace {

std::string exact_number(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream is(text);
  while (std::getline(is, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

template <class T>
std::string join(const std::vector<T>& items, const std::function<std::string(const T&)>& f) {
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) out += (i ? "," : "") + f(items[i]);
  return out;
}

std::string join_strings(const std::vector<std::string>& items) {
  return join<std::string>(items, [](const std::string& s) { return s; });
}

double to_double(const std::string& v) {
  std::size_t used = 0;
  double out = 0.0;
  try {
    out = std::stod(v, &used);
  } catch (const std::exception&) {
    throw ConfigError("expected a number, got '" + v + "'");
  }
  if (used != v.size() || !std::isfinite(out)) {
    throw ConfigError("expected a finite number, got '" + v + "'");
  }
  return out;
}

std::int64_t to_int(const std::string& v) {
  std::size_t used = 0;
  long long out = 0;
  try {
    out = std::stoll(v, &used);
  } catch (const std::exception&) {
    throw ConfigError("expected an integer, got '" + v + "'");
  }
  if (used != v.size()) throw ConfigError("expected an integer, got '" + v + "'");
  return out;
}

std::size_t to_count(const std::string& v) {
  const std::int64_t n = to_int(v);
  if (n < 0) throw ConfigError("expected a non-negative integer, got '" + v + "'");
  return static_cast<std::size_t>(n);
}

bool to_bool(const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError("expected true or false, got '" + v + "'");
}

// Builder state for fields that are assembled after all lines are read.
struct RegDraft {
  std::optional<double> lambda;
  std::optional<std::string> combine_kind;
  double combine_lambda = -1.0;
};

using Handler = std::function<void(const std::string&)>;

std::map<std::string, Handler> make_handlers(ExperimentConfig& c, RegDraft& d) {
  std::map<std::string, Handler> h;
  h["name"] = [&](const std::string& v) { c.name = v; };

  h["dataset.generator"] = [&](const std::string& v) {
    if (v != "blobs" && v != "rings" && v != "cifar10") {
      throw ConfigError("unknown generator '" + v + "' (blobs, rings, cifar10)");
    }
    c.dataset.generator = v;
  };
  h["dataset.classes"] = [&](const std::string& v) { c.dataset.classes = to_count(v); };
  h["dataset.dim"] = [&](const std::string& v) { c.dataset.dim = to_count(v); };
  h["dataset.per_class"] = [&](const std::string& v) { c.dataset.per_class = to_count(v); };
  h["dataset.spread"] = [&](const std::string& v) { c.dataset.spread = to_double(v); };
  h["dataset.noise"] = [&](const std::string& v) { c.dataset.noise = to_double(v); };
  h["dataset.seed"] = [&](const std::string& v) {
    c.dataset.seed = static_cast<std::uint64_t>(to_int(v));
  };
  h["dataset.path"] = [&](const std::string& v) { c.dataset.path = v; };
  h["dataset.val_fraction"] = [&](const std::string& v) { c.dataset.val_fraction = to_double(v); };
  h["dataset.test_fraction"] = [&](const std::string& v) {
    c.dataset.test_fraction = to_double(v);
  };

  h["model.widths"] = [&](const std::string& v) {
    c.mlp.layer_widths.clear();
    for (const auto& w : split_list(v)) c.mlp.layer_widths.push_back(to_count(w));
  };
  h["model.activation"] = [&](const std::string& v) { c.mlp.activation = parse_activation(v); };
  h["model.scheme"] = [&](const std::string& v) { c.scheme = parse_scheme(v); };
  h["model.members"] = [&](const std::string& v) { c.members = to_count(v); };

  TrainConfig& t = c.train;
  h["train.learning_rate"] = [&](const std::string& v) { t.learning_rate = to_double(v); };
  h["train.weight_decay"] = [&](const std::string& v) { t.weight_decay = to_double(v); };
  h["train.batch_size"] = [&](const std::string& v) { t.batch_size = to_count(v); };
  h["train.epochs"] = [&](const std::string& v) { t.epochs = to_count(v); };
  h["train.adam_beta1"] = [&](const std::string& v) { t.adam_beta1 = to_double(v); };
  h["train.adam_beta2"] = [&](const std::string& v) { t.adam_beta2 = to_double(v); };
  h["train.adam_eps"] = [&](const std::string& v) { t.adam_eps = to_double(v); };
  h["train.warmup_only_epochs"] = [&](const std::string& v) {
    t.warmup_only_epochs = to_count(v);
  };
  h["train.ood_batch_size"] = [&](const std::string& v) { t.ood_batch_size = to_count(v); };
  h["train.fgsm_epsilon"] = [&](const std::string& v) { t.fgsm_epsilon = to_double(v); };
  h["train.patience"] = [&](const std::string& v) { t.patience = to_count(v); };
  h["train.ce_mode"] = [&](const std::string& v) { t.ce_mode = parse_ce_mode(v); };
  h["train.decoupled_weight_decay"] = [&](const std::string& v) {
    t.decoupled_weight_decay = to_bool(v);
  };
  h["train.decay_rank1_factors"] = [&](const std::string& v) {
    t.decay_rank1_factors = to_bool(v);
  };

  RegularizerSpec& r = t.reg;
  h["regularizer.kind"] = [&](const std::string& v) { r.kind = parse_reg_kind(v); };
  h["regularizer.lambda"] = [&](const std::string& v) { d.lambda = to_double(v); };
  h["regularizer.adp_alpha"] = [&](const std::string& v) { r.adp_alpha = to_double(v); };
  h["regularizer.adp_beta"] = [&](const std::string& v) { r.adp_beta = to_double(v); };
  h["regularizer.use_chi2_variant"] = [&](const std::string& v) {
    r.use_chi2_variant = to_bool(v);
  };
  h["regularizer.chi2_literal"] = [&](const std::string& v) { r.chi2_literal = to_bool(v); };
  h["regularizer.jitter"] = [&](const std::string& v) { r.jitter = to_double(v); };
  h["regularizer.combine_with"] = [&](const std::string& v) {
    parse_reg_kind(v);
    d.combine_kind = v;
  };
  h["regularizer.combine_lambda"] = [&](const std::string& v) {
    d.combine_lambda = to_double(v);
  };

  EvalConfig& e = c.eval;
  h["eval.corruptions"] = [&](const std::string& v) {
    e.corruptions.clear();
    for (const auto& k : split_list(v)) e.corruptions.push_back(parse_corruption(k));
  };
  h["eval.levels"] = [&](const std::string& v) {
    e.levels.clear();
    for (const auto& k : split_list(v)) e.levels.push_back(static_cast<int>(to_int(k)));
  };
  h["eval.ece_bins"] = [&](const std::string& v) { e.ece_bins = to_count(v); };
  h["eval.temperature_folds"] = [&](const std::string& v) {
    e.temperature_folds = to_count(v);
  };
  h["eval.temperature_path"] = [&](const std::string& v) {
    e.temperature_path = parse_temperature_path(v);
  };
  h["eval.corruption_seed"] = [&](const std::string& v) {
    e.corruption_seed = static_cast<std::uint64_t>(to_int(v));
  };

  h["ood.sets"] = [&](const std::string& v) { c.ood.sets = split_list(v); };
  h["ood.size"] = [&](const std::string& v) { c.ood.size = to_count(v); };
  h["ood.center_seed"] = [&](const std::string& v) {
    c.ood.center_seed = static_cast<std::uint64_t>(to_int(v));
  };

  h["run.seeds"] = [&](const std::string& v) {
    c.seeds.clear();
    for (const auto& s : split_list(v)) c.seeds.push_back(to_int(s));
  };
  h["run.output_dir"] = [&](const std::string& v) { c.output_dir = v; };

  h["sweep.members"] = [&](const std::string& v) { c.sweep.members = split_list(v); };
  h["sweep.split_level"] = [&](const std::string& v) { c.sweep.split_level = split_list(v); };
  h["sweep.lambda"] = [&](const std::string& v) { c.sweep.lambda = split_list(v); };
  h["sweep.ood_batch_size"] = [&](const std::string& v) {
    c.sweep.ood_batch_size = split_list(v);
  };
  return h;
}

}  // namespace

const std::vector<std::string>& SweepConfig::values(const std::string& axis) const {
  if (axis == "members") return members;
  if (axis == "split_level") return split_level;
  if (axis == "lambda") return lambda;
  if (axis == "ood_batch_size") return ood_batch_size;
  throw ConfigError("unknown sweep axis '" + axis +
                    "' (members, split_level, lambda, ood_batch_size)");
}

ExperimentConfig parse_config(const std::string& text, const std::string& source) {
  ExperimentConfig cfg;
  RegDraft draft;
  const auto handlers = make_handlers(cfg, draft);
  const std::set<std::string> sections = {"dataset", "model", "train", "regularizer",
                                          "eval",    "ood",   "run",   "sweep"};
  std::set<std::string> seen;
  std::string section;
  bool schema_seen = false;
  std::istringstream in(text);
  std::string raw;
  std::size_t line_no = 0;
  auto fail = [&](const std::string& field, const std::string& msg) -> void {
    throw ConfigError(source + ":" + std::to_string(line_no) +
                      (field.empty() ? "" : ": field '" + field + "'") + ": " + msg);
  };

  while (std::getline(in, raw)) {
    ++line_no;
    std::string line = raw;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') fail("", "unterminated section header");
      section = trim(line.substr(1, line.size() - 2));
      if (!sections.count(section)) fail("", "unknown section [" + section + "]");
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) fail("", "expected 'key = value'");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    const std::string field = section.empty() ? key : section + "." + key;
    if (key.empty()) fail("", "missing key before '='");
    if (!schema_seen) {
      if (field != "schema") fail(field, "the first entry must be 'schema = 1'");
      if (value != std::to_string(kConfigSchema)) {
        fail("schema", "unsupported schema version '" + value + "'");
      }
      schema_seen = true;
      continue;
    }
    if (field == "schema") fail(field, "schema given twice");
    const auto it = handlers.find(field);
    if (it == handlers.end()) fail(field, "unknown field");
    if (!seen.insert(field).second) fail(field, "duplicate field");
    try {
      it->second(value);
    } catch (const ConfigError& e) {
      fail(field, e.what());
    }
  }
  if (!schema_seen) {
    throw ConfigError(source + ": missing 'schema = " + std::to_string(kConfigSchema) + "'");
  }
  cfg.train.reg.lambda =
      draft.lambda.value_or(RegularizerSpec::with_defaults(cfg.train.reg.kind).lambda);
  if (draft.combine_kind) {
    auto second = RegularizerSpec::with_defaults(parse_reg_kind(*draft.combine_kind));
    if (draft.combine_lambda >= 0.0) second.lambda = draft.combine_lambda;
    cfg.train.reg.combine_with = std::make_shared<const RegularizerSpec>(second);
  }
  try {
    cfg.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(source + ": " + e.what());
  }
  return cfg;
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot read config file " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return parse_config(ss.str(), path);
}

void ExperimentConfig::validate() const {
  mlp.validate();
  if (dataset.generator == "cifar10") {
    if (dataset.path.empty()) throw ConfigError("dataset.path is required for cifar10");
    if (mlp.input_dim() != kCifarImageBytes || mlp.classes() != 10) {
      throw ConfigError("cifar10 needs model widths from 3072 to 10");
    }
  } else {
    if (dataset.generator == "rings" && dataset.dim != 2) {
      throw ConfigError("rings generator is two-dimensional; set dataset.dim = 2");
    }
    if (mlp.input_dim() != dataset.dim) {
      throw ConfigError("model.widths must start with dataset.dim (" +
                        std::to_string(dataset.dim) + ")");
    }
    if (mlp.classes() != dataset.classes) {
      throw ConfigError("model.widths must end with dataset.classes (" +
                        std::to_string(dataset.classes) + ")");
    }
  }
  if (!(dataset.val_fraction >= 0.0) || !(dataset.test_fraction > 0.0) ||
      dataset.val_fraction + dataset.test_fraction >= 1.0) {
    throw ConfigError("dataset fractions must satisfy val >= 0, test > 0, val + test < 1");
  }
  if (members < 2) throw ConfigError("model.members must be >= 2");
  train.validate();
  train.reg.validate(init_ensemble(mlp, scheme, members, 0));
  for (int level : eval.levels) {
    if (level < 1 || level > 5) throw ConfigError("eval.levels must lie in 1..5");
  }
  if (eval.ece_bins == 0) throw ConfigError("eval.ece_bins must be >= 1");
  if (eval.temperature_folds < 2) throw ConfigError("eval.temperature_folds must be >= 2");
  for (const auto& s : ood.sets) {
    if (s != "shifted_clusters" && s != "uniform") {
      throw ConfigError("unknown OOD set '" + s + "' (shifted_clusters, uniform)");
    }
    if (s == "shifted_clusters" && dataset.generator != "blobs") {
      throw ConfigError("shifted_clusters OOD set needs the blobs generator");
    }
  }
  if (!ood.sets.empty() && ood.size == 0) throw ConfigError("ood.size must be >= 1");
  if (seeds.empty()) throw ConfigError("run.seeds must not be empty");
  if (std::set<std::int64_t>(seeds.begin(), seeds.end()).size() != seeds.size()) {
    throw ConfigError("run.seeds must be distinct");
  }
}

std::string ExperimentConfig::canonical() const {
  std::ostringstream o;
  auto num = [](double v) { return exact_number(v); };
  o << "# rng = " << kRngAlgorithm << "\n";
  o << "schema = " << kConfigSchema << "\n";
  o << "name = " << name << "\n\n[dataset]\n";
  o << "generator = " << dataset.generator << "\n";
  o << "classes = " << dataset.classes << "\n";
  o << "dim = " << dataset.dim << "\n";
  o << "per_class = " << dataset.per_class << "\n";
  o << "spread = " << num(dataset.spread) << "\n";
  o << "noise = " << num(dataset.noise) << "\n";
  o << "seed = " << dataset.seed << "\n";
  if (!dataset.path.empty()) o << "path = " << dataset.path << "\n";
  o << "val_fraction = " << num(dataset.val_fraction) << "\n";
  o << "test_fraction = " << num(dataset.test_fraction) << "\n\n[model]\n";
  o << "widths = "
    << join<std::size_t>(mlp.layer_widths, [](const std::size_t& w) { return std::to_string(w); })
    << "\n";
  o << "activation = " << to_string(mlp.activation) << "\n";
  o << "scheme = " << to_string(scheme) << "\n";
  o << "members = " << members << "\n\n[train]\n";
  o << "learning_rate = " << num(train.learning_rate) << "\n";
  o << "weight_decay = " << num(train.weight_decay) << "\n";
  o << "batch_size = " << train.batch_size << "\n";
  o << "epochs = " << train.epochs << "\n";
  o << "adam_beta1 = " << num(train.adam_beta1) << "\n";
  o << "adam_beta2 = " << num(train.adam_beta2) << "\n";
  o << "adam_eps = " << num(train.adam_eps) << "\n";
  if (train.warmup_only_epochs) o << "warmup_only_epochs = " << *train.warmup_only_epochs << "\n";
  if (train.ood_batch_size) o << "ood_batch_size = " << *train.ood_batch_size << "\n";
  if (train.fgsm_epsilon) o << "fgsm_epsilon = " << num(*train.fgsm_epsilon) << "\n";
  o << "patience = " << train.patience << "\n";
  o << "ce_mode = " << to_string(train.ce_mode) << "\n";
  o << "decoupled_weight_decay = " << (train.decoupled_weight_decay ? "true" : "false") << "\n";
  o << "decay_rank1_factors = " << (train.decay_rank1_factors ? "true" : "false") << "\n";
  const RegularizerSpec& r = train.reg;
  o << "\n[regularizer]\n";
  o << "kind = " << to_string(r.kind) << "\n";
  o << "lambda = " << num(r.lambda) << "\n";
  o << "adp_alpha = " << num(r.adp_alpha) << "\n";
  o << "adp_beta = " << num(r.adp_beta) << "\n";
  o << "use_chi2_variant = " << (r.use_chi2_variant ? "true" : "false") << "\n";
  o << "chi2_literal = " << (r.chi2_literal ? "true" : "false") << "\n";
  o << "jitter = " << num(r.jitter) << "\n";
  if (r.combine_with) {
    o << "combine_with = " << to_string(r.combine_with->kind) << "\n";
    o << "combine_lambda = " << num(r.combine_with->lambda) << "\n";
  }
  o << "\n[eval]\n";
  o << "corruptions = "
    << join<CorruptionFamily>(eval.corruptions,
                              [](const CorruptionFamily& k) { return to_string(k); })
    << "\n";
  o << "levels = "
    << join<int>(eval.levels, [](const int& l) { return std::to_string(l); }) << "\n";
  o << "ece_bins = " << eval.ece_bins << "\n";
  o << "temperature_folds = " << eval.temperature_folds << "\n";
  o << "temperature_path = " << to_string(eval.temperature_path) << "\n";
  o << "corruption_seed = " << eval.corruption_seed << "\n\n[ood]\n";
  o << "sets = " << join_strings(ood.sets) << "\n";
  o << "size = " << ood.size << "\n";
  o << "center_seed = " << ood.center_seed << "\n\n[run]\n";
  o << "seeds = "
    << join<std::int64_t>(seeds, [](const std::int64_t& s) { return std::to_string(s); })
    << "\n";
  o << "output_dir = " << output_dir << "\n";
  if (!sweep.members.empty() || !sweep.split_level.empty() || !sweep.lambda.empty() ||
      !sweep.ood_batch_size.empty()) {
    o << "\n[sweep]\n";
    if (!sweep.members.empty()) o << "members = " << join_strings(sweep.members) << "\n";
    if (!sweep.split_level.empty()) {
      o << "split_level = " << join_strings(sweep.split_level) << "\n";
    }
    if (!sweep.lambda.empty()) o << "lambda = " << join_strings(sweep.lambda) << "\n";
    if (!sweep.ood_batch_size.empty()) {
      o << "ood_batch_size = " << join_strings(sweep.ood_batch_size) << "\n";
    }
  }
  return o.str();
}

std::string ExperimentConfig::architecture_label() const {
  std::string kind;
  switch (scheme.kind) {
    case SharingScheme::Kind::independent:
      kind = "deep_ensemble";
      break;
    case SharingScheme::Kind::tree_split:
      kind = "treenet(split " + std::to_string(scheme.split_level) + ")";
      break;
    case SharingScheme::Kind::rank1_factorized:
      kind = "batch_ensemble";
      break;
  }
  return kind + " M=" + std::to_string(members);
}

std::string ExperimentConfig::regularizer_label() const {
  if (!train.reg.active()) return "ind.";
  std::string out = train.reg.describe() + " lambda=" + format_number(train.reg.lambda);
  if (train.warmup_only_epochs) {
    out += " warmup=" + std::to_string(*train.warmup_only_epochs);
  }
  return out;
}

std::size_t effective_jobs(std::size_t requested) {
  if (const char* env = std::getenv("DIVENS_DETERMINISTIC"); env && std::string(env) == "1") {
    return 1;
  }
  if (requested == 0) return std::max(1u, std::thread::hardware_concurrency());
  return requested;
}

ExperimentData build_data(const ExperimentConfig& cfg) {
  const DatasetConfig& d = cfg.dataset;
  Dataset full;
  BlobSpec blobs;
  if (d.generator == "blobs") {
    blobs.classes = d.classes;
    blobs.dim = d.dim;
    blobs.per_class = d.per_class;
    blobs.spread = d.spread;
    blobs.seed = d.seed;
    full = make_blobs(blobs);
  } else if (d.generator == "rings") {
    full = make_rings(d.classes, d.per_class, d.noise, d.seed);
  } else {
    full = read_cifar10_binary(d.path);
  }
  ExperimentData data;
  data.split = split_dataset(full, d.val_fraction, d.test_fraction, d.seed);
  const Rng root(d.seed);
  for (const auto& name : cfg.ood.sets) {
    OodSet set;
    set.name = name;
    if (name == "shifted_clusters") {
      BlobSpec shifted = blobs;
      shifted.center_seed = cfg.ood.center_seed;
      shifted.per_class = (cfg.ood.size + d.classes - 1) / d.classes;
      shifted.seed = root.split("ood_shifted").next_u64();
      set.inputs = make_blobs(shifted).inputs;
    } else {
      Rng rng = root.split("ood_uniform");
      set.inputs = sample_uniform_ood(full.dim(), cfg.ood.size, rng);
    }
    data.ood_sets.push_back(std::move(set));
  }
  return data;
}

namespace {

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

std::string read_file(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  if (!f) return {};
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

void write_file(const fs::path& p, const std::string& content) {
  const fs::path tmp = p.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw Error("cannot write " + tmp.string());
    f << content;
  }
  fs::rename(tmp, p);
}

std::string fingerprint(const ExperimentConfig& cfg, std::int64_t seed) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%016llx",
                static_cast<unsigned long long>(
                    fnv1a(cfg.canonical() + "\nrun_seed = " + std::to_string(seed) + "\n")));
  return buf;
}

const std::string kResultsHeader = "experiment,seed,cell,metric,value\n";

std::string result_line(const std::string& experiment, std::int64_t seed,
                        const std::string& cell, const std::string& metric, double value) {
  return experiment + "," + std::to_string(seed) + "," + cell + "," + metric + "," +
         format_number(value) + "\n";
}

// Trains and evaluates one seed; writes only files private to that seed.
SeedOutcome run_seed(const ExperimentConfig& cfg, const ExperimentData& data,
                     std::int64_t seed, const fs::path& out, bool force) {
  SeedOutcome outcome;
  outcome.seed = seed;
  const fs::path parts = out / "parts";
  const std::string tag = std::to_string(seed);
  const fs::path fp_path = parts / (tag + ".fingerprint");
  const fs::path rows_path = parts / (tag + ".csv");
  const fs::path status_path = parts / (tag + ".status");
  const std::string fp = fingerprint(cfg, seed);
  if (!force && read_file(fp_path) == fp && fs::exists(rows_path) && fs::exists(status_path)) {
    outcome.skipped = true;
    const std::string status = read_file(status_path);
    if (status.rfind("diverged", 0) == 0) {
      outcome.diverged = true;
      outcome.diverged_step = std::stoul(status.substr(9));
    }
    return outcome;
  }
  fs::remove(fp_path);

  const auto useed = static_cast<std::uint64_t>(seed);
  EnsembleModel model = init_ensemble(cfg.mlp, cfg.scheme, cfg.members, useed);
  TrainConfig tc = cfg.train;
  tc.seed = useed;
  std::string rows;
  try {
    TrainResult trained = train(std::move(model), data.split.train, data.split.val, tc);
    trained.trace.write_csv((out / ("trace_" + tag + ".csv")).string());
    save_checkpoint(trained.model, (out / ("checkpoint_" + tag + ".txt")).string());
    const std::vector<EvalReport> reports =
        evaluate(trained.model, data.split.test, cfg.eval, data.ood_sets);
    for (const auto& r : reports) {
      for (const auto& [metric, value] : r.metrics())
        rows += result_line(cfg.name, seed, r.cell, metric, value);
    }

    // Reliability data of the clean cell for external plotting.
    const EnsemblePrediction pred = forward_all(trained.model, data.split.test.inputs);
    const TemperatureFit fit = fit_temperature(pred.logits, data.split.test.labels,
                                               std::min(cfg.eval.temperature_folds,
                                                        data.split.test.size()),
                                               cfg.eval.temperature_path);
    std::string rel = "lower,upper,count,accuracy,confidence\n";
    for (const auto& b :
         reliability_bins(fit.held_out_probs, data.split.test.labels, cfg.eval.ece_bins)) {
      rel += format_number(b.lower) + "," + format_number(b.upper) + "," +
             std::to_string(b.count) + "," + format_number(b.accuracy) + "," +
             format_number(b.confidence) + "\n";
    }
    write_file(out / ("reliability_" + tag + ".csv"), rel);
    write_file(status_path, "ok");
  } catch (const DivergenceError& e) {
    outcome.diverged = true;
    outcome.diverged_step = e.step();
    write_file(status_path, "diverged " + std::to_string(e.step()));
  }
  write_file(rows_path, rows);
  write_file(fp_path, fp);
  return outcome;
}

}  // namespace

std::vector<ResultRow> read_results(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("cannot read results file " + path);
  std::vector<ResultRow> rows;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(f, line)) {
    ++line_no;
    if (line_no == 1 || line.empty()) continue;
    std::vector<std::string> cols;
    std::string col;
    std::istringstream is(line);
    while (std::getline(is, col, ',')) cols.push_back(col);
    if (cols.size() != 5) {
      throw Error(path + ":" + std::to_string(line_no) + ": expected 5 columns");
    }
    rows.push_back({cols[0], std::stoll(cols[1]), cols[2], cols[3], std::stod(cols[4])});
  }
  return rows;
}

std::vector<SummaryRow> summarize(const std::vector<ResultRow>& rows) {
  std::vector<SummaryRow> out;
  std::map<std::tuple<std::string, std::string, std::string>, std::vector<double>> groups;
  std::vector<std::tuple<std::string, std::string, std::string>> order;
  for (const auto& r : rows) {
    auto key = std::make_tuple(r.experiment, r.cell, r.metric);
    auto [it, inserted] = groups.try_emplace(key);
    if (inserted) order.push_back(key);
    it->second.push_back(r.value);
  }
  for (const auto& key : order) {
    const auto& v = groups[key];
    SummaryRow s;
    std::tie(s.experiment, s.cell, s.metric) = key;
    s.n = v.size();
    double sum = 0.0;
    for (double x : v) sum += x;
    s.mean = sum / static_cast<double>(s.n);
    if (s.n > 1) {
      double ss = 0.0;
      for (double x : v) ss += (x - s.mean) * (x - s.mean);
      s.std = std::sqrt(ss / static_cast<double>(s.n - 1));
    }
    out.push_back(s);
  }
  return out;
}

RunSummary run_experiment(const ExperimentConfig& cfg, const RunOptions& options) {
  cfg.validate();
  RunSummary summary;
  const fs::path out = options.output_dir.value_or(cfg.output_dir);
  summary.output_dir = out.string();
  fs::create_directories(out / "parts");
  write_file(out / "experiment.ini", cfg.canonical());

  std::vector<std::int64_t> seeds;
  for (std::int64_t s : cfg.seeds) seeds.push_back(s + options.seed_offset);
  std::sort(seeds.begin(), seeds.end());

  const ExperimentData data = build_data(cfg);
  std::vector<SeedOutcome> outcomes(seeds.size());
  std::vector<std::exception_ptr> errors(seeds.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < seeds.size(); i = next++) {
      try {
        outcomes[i] = run_seed(cfg, data, seeds[i], out, options.force);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const std::size_t jobs = std::min(effective_jobs(options.jobs), seeds.size());
  if (jobs <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t j = 0; j < jobs; ++j) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);

  // Single-writer merge in ascending seed order.
  std::string results = kResultsHeader;
  std::string status = "seed,status,step\n";
  for (std::size_t i = 0; i < seeds.size(); ++i) {
    const std::string tag = std::to_string(seeds[i]);
    results += read_file(out / "parts" / (tag + ".csv"));
    status += tag + "," +
              (outcomes[i].diverged ? "diverged," + std::to_string(outcomes[i].diverged_step)
                                    : std::string("ok,")) +
              "\n";
  }
  write_file(out / "results.csv", results);
  write_file(out / "status.csv", status);

  std::string text = "experiment,cell,metric,mean,std,n\n";
  for (const auto& s : summarize(read_results((out / "results.csv").string()))) {
    text += s.experiment + "," + s.cell + "," + s.metric + "," + format_number(s.mean) + "," +
            format_number(s.std) + "," + std::to_string(s.n) + "\n";
  }
  write_file(out / "summary.csv", text);

  summary.seeds = std::move(outcomes);
  for (const auto& o : summary.seeds)
    if (o.diverged) summary.exit_code = kExitDiverged;
  return summary;
}

ExperimentConfig apply_axis(const ExperimentConfig& cfg, const std::string& axis,
                            const std::string& value) {
  ExperimentConfig c = cfg;
  c.sweep = {};
  try {
    if (axis == "members") {
      c.members = to_count(value);
    } else if (axis == "split_level") {
      c.scheme = SharingScheme::tree_split(to_count(value));
    } else if (axis == "lambda") {
      c.train.reg.lambda = to_double(value);
    } else if (axis == "ood_batch_size") {
      c.train.ood_batch_size = to_count(value);
    } else {
      cfg.sweep.values(axis);
    }
  } catch (const ConfigError& e) {
    throw ConfigError("sweep." + axis + " value '" + value + "': " + e.what());
  }
  c.name = cfg.name + "@" + axis + "=" + value;
  c.output_dir = (fs::path(cfg.output_dir) / (axis + "_" + value)).string();
  c.validate();
  return c;
}

SweepSummary run_sweep(const ExperimentConfig& cfg, const std::string& axis,
                       const RunOptions& options) {
  const auto& values = cfg.sweep.values(axis);
  if (values.empty()) throw ConfigError("sweep." + axis + " lists no values");
  const fs::path base = options.output_dir.value_or(cfg.output_dir);
  ExperimentConfig root = cfg;
  root.output_dir = base.string();
  std::vector<ExperimentConfig> configs;
  for (const auto& v : values) configs.push_back(apply_axis(root, axis, v));

  SweepSummary sweep;
  std::string csv = "axis,metric,mean,std\n";
  for (std::size_t i = 0; i < configs.size(); ++i) {
    RunOptions o = options;
    o.output_dir = configs[i].output_dir;
    RunSummary run = run_experiment(configs[i], o);
    sweep.exit_code = std::max(sweep.exit_code, run.exit_code);
    for (const auto& s : summarize(read_results((fs::path(run.output_dir) / "results.csv").string()))) {
      csv += values[i] + "," + s.cell + "/" + s.metric + "," + format_number(s.mean) + "," +
             format_number(s.std) + "\n";
    }
    sweep.runs.push_back(std::move(run));
  }
  fs::create_directories(base);
  write_file(base / ("sweep_" + axis + ".csv"), csv);
  return sweep;
}

std::vector<std::optional<std::size_t>> ReportTable::best_rows() const {
  std::vector<std::optional<std::size_t>> best(columns.size());
  for (std::size_t c = 0; c < columns.size(); ++c) {
    for (std::size_t r = 0; r < values.size(); ++r) {
      if (!values[r][c]) continue;
      if (!best[c]) {
        best[c] = r;
        continue;
      }
      const double cur = *values[*best[c]][c];
      const double v = *values[r][c];
      if (higher_is_better[c] ? v > cur : v < cur) best[c] = r;
    }
  }
  return best;
}

std::string ReportTable::to_text() const {
  const auto best = best_rows();
  std::vector<std::vector<std::string>> cells;
  std::vector<std::string> header = {"model"};
  header.insert(header.end(), columns.begin(), columns.end());
  cells.push_back(header);
  for (std::size_t r = 0; r < values.size(); ++r) {
    std::vector<std::string> line = {row_labels[r]};
    for (std::size_t c = 0; c < columns.size(); ++c) {
      if (!values[r][c]) {
        line.push_back("-");
        continue;
      }
      std::string s = format_number(*values[r][c]);
      if (stds[r][c]) s += " ± " + format_number(*stds[r][c]);
      if (best[c] == r) s = "**" + s + "**";
      line.push_back(s);
    }
    cells.push_back(line);
  }
  // Pad by code points so the ± sign does not skew alignment.
  auto width = [](const std::string& s) {
    std::size_t n = 0;
    for (unsigned char ch : s) n += (ch & 0xC0) != 0x80;
    return n;
  };
  std::vector<std::size_t> w(header.size(), 0);
  for (const auto& line : cells)
    for (std::size_t c = 0; c < line.size(); ++c) w[c] = std::max(w[c], width(line[c]));
  std::string out;
  auto emit = [&](const std::vector<std::string>& line) {
    out += "|";
    for (std::size_t c = 0; c < line.size(); ++c)
      out += " " + line[c] + std::string(w[c] - width(line[c]), ' ') + " |";
    out += "\n";
  };
  emit(cells[0]);
  out += "|";
  for (std::size_t c = 0; c < w.size(); ++c) out += std::string(w[c] + 2, '-') + "|";
  out += "\n";
  for (std::size_t i = 1; i < cells.size(); ++i) emit(cells[i]);
  return out;
}

std::string ReportTable::to_csv() const {
  const auto best = best_rows();
  std::string out = "model,column,mean,std,best\n";
  for (std::size_t r = 0; r < values.size(); ++r) {
    for (std::size_t c = 0; c < columns.size(); ++c) {
      out += row_labels[r] + "," + columns[c] + ",";
      out += values[r][c] ? format_number(*values[r][c]) : std::string("-");
      out += ",";
      out += stds[r][c] ? format_number(*stds[r][c]) : std::string("-");
      out += std::string(",") + (best[c] == r ? "1" : "0") + "\n";
    }
  }
  return out;
}

namespace {

struct RunRecord {
  std::string label;
  std::vector<ResultRow> rows;
  bool diverged = false;
};

std::optional<RunRecord> load_run(const fs::path& dir) {
  if (!fs::exists(dir / "results.csv") || !fs::exists(dir / "experiment.ini")) {
    return std::nullopt;
  }
  RunRecord rec;
  const ExperimentConfig cfg = load_config((dir / "experiment.ini").string());
  rec.label = cfg.architecture_label() + ", " + cfg.regularizer_label();
  rec.rows = read_results((dir / "results.csv").string());
  const std::string status = read_file(dir / "status.csv");
  rec.diverged = status.find(",diverged,") != std::string::npos;
  return rec;
}

int cell_level(const std::string& cell) {
  const auto colon = cell.find(':');
  if (colon == std::string::npos || cell.rfind("ood:", 0) == 0) return 0;
  return std::atoi(cell.c_str() + colon + 1);
}

}  // namespace

ReportTable build_report(const std::string& dir) {
  std::vector<RunRecord> runs;
  if (auto r = load_run(dir)) runs.push_back(std::move(*r));
  if (fs::is_directory(dir)) {
    std::vector<fs::path> children;
    for (const auto& e : fs::directory_iterator(dir))
      if (e.is_directory()) children.push_back(e.path());
    std::sort(children.begin(), children.end());
    for (const auto& c : children)
      if (auto r = load_run(c)) runs.push_back(std::move(*r));
  }
  if (runs.empty()) throw Error("no completed runs found under " + dir);

  std::map<std::string, int> label_count;
  for (const auto& r : runs) label_count[r.label]++;
  for (auto& r : runs) {
    if (label_count[r.label] > 1 && !r.rows.empty()) r.label += " [" + r.rows.front().experiment + "]";
  }

  ReportTable t;
  const std::vector<std::pair<std::string, bool>> metrics = {
      {"accuracy", true}, {"nll", false}, {"ece", false}};
  for (const auto& [m, hib] : metrics) {
    t.columns.push_back(m + " clean");
    t.higher_is_better.push_back(hib);
    t.columns.push_back(m + " corr");
    t.higher_is_better.push_back(hib);
  }
  std::set<std::string> ood_names;
  for (const auto& r : runs)
    for (const auto& row : r.rows)
      if (row.cell.rfind("ood:", 0) == 0 && row.metric == "auc_roc") ood_names.insert(row.cell);
  for (const auto& name : ood_names) {
    t.columns.push_back("auc " + name.substr(4));
    t.higher_is_better.push_back(true);
  }

  for (const auto& run : runs) {
    t.row_labels.push_back(run.label);
    int max_level = 0;
    for (const auto& row : run.rows) max_level = std::max(max_level, cell_level(row.cell));
    // Per-seed value of each column; "corr" averages the kinds at the top level.
    std::map<std::string, std::map<std::int64_t, std::pair<double, int>>> per_seed;
    for (const auto& row : run.rows) {
      std::string column;
      if (row.cell == "clean") {
        column = row.metric + " clean";
      } else if (row.cell.rfind("ood:", 0) == 0) {
        if (row.metric == "auc_roc") column = "auc " + row.cell.substr(4);
      } else if (max_level > 0 && cell_level(row.cell) == max_level) {
        column = row.metric + " corr";
      }
      if (column.empty()) continue;
      auto& acc = per_seed[column][row.seed];
      acc.first += row.value;
      acc.second += 1;
    }
    std::vector<std::optional<double>> means(t.columns.size());
    std::vector<std::optional<double>> stds(t.columns.size());
    for (std::size_t c = 0; c < t.columns.size() && !run.diverged; ++c) {
      auto it = per_seed.find(t.columns[c]);
      if (it == per_seed.end()) continue;
      std::vector<ResultRow> seeds;
      for (const auto& [seed, acc] : it->second)
        seeds.push_back({"", seed, "", "", acc.first / acc.second});
      const SummaryRow s = summarize(seeds).front();
      means[c] = s.mean;
      stds[c] = s.std;
    }
    t.values.push_back(means);
    t.stds.push_back(stds);
  }
  return t;
}

}  // namespace divens
