// SPDX-License-Identifier: Apache-2.0
//
// JSON forms of ModelConfig, TrainSchedule and the run configuration used by
// the command line. Parsing is strict: unknown keys are errors.
#pragma once

#include <filesystem>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "data.hpp"
#include "errors.hpp"
#include "model.hpp"
#include "train.hpp"

namespace mtlcer {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline nlohmann::json to_json(const ModelConfig& c) {
  return {{"embed_dim", c.embed_dim},
          {"word_hidden", c.word_hidden},
          {"utt_hidden", c.utt_hidden},
          {"num_emotions", c.num_emotions},
          {"pairs_per_conversation", c.pairs_per_conversation},
          {"si_hidden", c.si_hidden},
          {"dropout", c.dropout},
          {"multitask", c.multitask},
          {"iue_bridge", c.iue_bridge},
          {"cue_bridge", c.cue_bridge},
          {"balance_pairs", c.balance_pairs},
          {"precision", c.precision == Precision::Double ? "double" : "single"}};
}

inline nlohmann::json to_json(const TrainSchedule& s) {
  return {{"max_epochs", s.max_epochs},   {"batch_size", s.batch_size},
          {"lr_main", s.lr_main},         {"lr_embedding", s.lr_embedding},
          {"mix_ratio", s.mix_ratio},     {"early_stop_patience", s.early_stop_patience},
          {"seed", s.seed},               {"clip_norm", s.clip_norm},
          {"shuffle", s.shuffle}};
}

namespace detail {

inline void reject_unknown(const nlohmann::json& j, const std::set<std::string>& known,
                           const std::string& prefix) {
  if (!j.is_object()) throw ConfigError(prefix + " must be an object");
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!known.count(it.key())) throw ConfigError("unknown configuration key \"" + prefix + "." + it.key() + "\"");
}

template <typename V>
void read(const nlohmann::json& j, const char* key, V& out, const std::string& prefix) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<V>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError("configuration key \"" + prefix + "." + key + "\" has the wrong type");
  }
}

}  // namespace detail

inline ModelConfig model_config_from_json(const nlohmann::json& j, const std::string& prefix = "model") {
  detail::reject_unknown(j, {"embed_dim", "word_hidden", "utt_hidden", "num_emotions",
                             "pairs_per_conversation", "si_hidden", "dropout", "multitask",
                             "iue_bridge", "cue_bridge", "balance_pairs", "precision"},
                         prefix);
  ModelConfig c;
  detail::read(j, "embed_dim", c.embed_dim, prefix);
  detail::read(j, "word_hidden", c.word_hidden, prefix);
  detail::read(j, "utt_hidden", c.utt_hidden, prefix);
  detail::read(j, "num_emotions", c.num_emotions, prefix);
  detail::read(j, "pairs_per_conversation", c.pairs_per_conversation, prefix);
  detail::read(j, "si_hidden", c.si_hidden, prefix);
  detail::read(j, "dropout", c.dropout, prefix);
  detail::read(j, "multitask", c.multitask, prefix);
  detail::read(j, "iue_bridge", c.iue_bridge, prefix);
  detail::read(j, "cue_bridge", c.cue_bridge, prefix);
  detail::read(j, "balance_pairs", c.balance_pairs, prefix);
  std::string prec = "double";
  detail::read(j, "precision", prec, prefix);
  if (prec == "double")
    c.precision = Precision::Double;
  else if (prec == "single")
    c.precision = Precision::Single;
  else
    throw ConfigError(prefix + ".precision must be \"single\" or \"double\"");
  return c;
}

inline TrainSchedule schedule_from_json(const nlohmann::json& j, const std::string& prefix = "train") {
  detail::reject_unknown(j, {"max_epochs", "batch_size", "lr_main", "lr_embedding", "mix_ratio",
                             "early_stop_patience", "seed", "clip_norm", "shuffle"},
                         prefix);
  TrainSchedule s;
  detail::read(j, "max_epochs", s.max_epochs, prefix);
  detail::read(j, "batch_size", s.batch_size, prefix);
  detail::read(j, "lr_main", s.lr_main, prefix);
  detail::read(j, "lr_embedding", s.lr_embedding, prefix);
  detail::read(j, "mix_ratio", s.mix_ratio, prefix);
  detail::read(j, "early_stop_patience", s.early_stop_patience, prefix);
  detail::read(j, "seed", s.seed, prefix);
  detail::read(j, "clip_norm", s.clip_norm, prefix);
  detail::read(j, "shuffle", s.shuffle, prefix);
  return s;
}

/// Everything a training run needs: model, schedule, data and file paths.
struct RunConfig {
  ModelConfig model;
  TrainSchedule train;
  std::string dataset = "custom";
  std::vector<std::string> labels = LabelSet::emorynlp().names;
  std::size_t min_freq = 1;
  struct Paths {
    std::string train;
    std::string dev;
    std::string test;
    std::string si;          // speaker-only corpus; empty for none
    std::string embeddings;  // word vectors; empty for random vectors
  } paths;
  std::string out_dir = "out";
};

inline nlohmann::json to_json(const RunConfig& r) {
  return {{"model", to_json(r.model)},
          {"train", to_json(r.train)},
          {"data",
           {{"dataset", r.dataset}, {"labels", r.labels}, {"min_freq", r.min_freq}}},
          {"paths",
           {{"train", r.paths.train},
            {"dev", r.paths.dev},
            {"test", r.paths.test},
            {"si", r.paths.si},
            {"embeddings", r.paths.embeddings}}},
          {"out_dir", r.out_dir}};
}

inline RunConfig run_config_from_json(const nlohmann::json& j) {
  detail::reject_unknown(j, {"model", "train", "data", "paths", "out_dir"}, "config");
  RunConfig r;
  if (j.contains("model")) r.model = model_config_from_json(j["model"]);
  if (j.contains("train")) r.train = schedule_from_json(j["train"]);
  if (j.contains("data")) {
    const auto& d = j["data"];
    detail::reject_unknown(d, {"dataset", "labels", "min_freq"}, "data");
    detail::read(d, "dataset", r.dataset, "data");
    detail::read(d, "min_freq", r.min_freq, "data");
    if (d.contains("labels")) {
      const auto& l = d["labels"];
      if (l.is_string()) {
        const auto name = l.get<std::string>();
        if (name == "meld")
          r.labels = LabelSet::meld().names;
        else if (name == "emorynlp")
          r.labels = LabelSet::emorynlp().names;
        else
          throw ConfigError("data.labels: unknown label inventory \"" + name + "\"");
      } else {
        detail::read(d, "labels", r.labels, "data");
      }
    }
  }
  if (j.contains("paths")) {
    const auto& p = j["paths"];
    detail::reject_unknown(p, {"train", "dev", "test", "si", "embeddings"}, "paths");
    detail::read(p, "train", r.paths.train, "paths");
    detail::read(p, "dev", r.paths.dev, "paths");
    detail::read(p, "test", r.paths.test, "paths");
    detail::read(p, "si", r.paths.si, "paths");
    detail::read(p, "embeddings", r.paths.embeddings, "paths");
  }
  detail::read(j, "out_dir", r.out_dir, "config");
  if (r.labels.empty()) throw ConfigError("data.labels must not be empty");
  for (auto& l : r.labels) l = to_lower(l);
  r.model.num_emotions = r.labels.size();
  return r;
}

/// Settings of the two benchmark corpora: hidden size 200 and T = 3 for
/// EmoryNLP, 150 and T = 2 for MELD.
inline nlohmann::json preset_json(const std::string& name) {
  if (name == "emorynlp")
    return {{"model", {{"word_hidden", 200}, {"utt_hidden", 200}, {"si_hidden", 200},
                       {"pairs_per_conversation", 3}}},
            {"data", {{"dataset", "emorynlp"}, {"labels", "emorynlp"}}}};
  if (name == "meld")
    return {{"model", {{"word_hidden", 150}, {"utt_hidden", 150}, {"si_hidden", 150},
                       {"pairs_per_conversation", 2}}},
            {"data", {{"dataset", "meld"}, {"labels", "meld"}}}};
  throw ConfigError("unknown preset \"" + name + "\" (expected emorynlp or meld)");
}

/// Recursively merges `patch` into `base`; objects merge, other values replace.
inline void merge_json(nlohmann::json& base, const nlohmann::json& patch) {
  if (!patch.is_object() || !base.is_object()) {
    base = patch;
    return;
  }
  for (auto it = patch.begin(); it != patch.end(); ++it) {
    if (base.contains(it.key()) && base[it.key()].is_object() && it.value().is_object())
      merge_json(base[it.key()], it.value());
    else
      base[it.key()] = it.value();
  }
}

/// Applies "a.b.c=value". The value is parsed as JSON when possible and taken
/// as a string otherwise.
inline void apply_override(nlohmann::json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0)
    throw ConfigError("override \"" + assignment + "\" is not of the form key=value");
  const std::string key = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  nlohmann::json value;
  try {
    value = nlohmann::json::parse(raw);
  } catch (const nlohmann::json::parse_error&) {
    value = raw;
  }
  nlohmann::json* node = &doc;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw ConfigError("override key \"" + key + "\" has an empty component");
    if (dot == std::string::npos) {
      (*node)[part] = value;
      break;
    }
    if (!node->contains(part)) (*node)[part] = nlohmann::json::object();
    node = &(*node)[part];
    start = dot + 1;
  }
}

/// Checks every configured input path before any work starts.
inline void validate_paths(const RunConfig& r, bool need_train) {
  namespace fs = std::filesystem;
  auto check = [](const std::string& p, const char* field, bool required) {
    if (p.empty()) {
      if (required) throw ConfigError(std::string("paths.") + field + " is required");
      return;
    }
    if (!fs::is_regular_file(p))
      throw ConfigError(std::string("paths.") + field + ": file not found: " + p);
  };
  check(r.paths.train, "train", need_train);
  check(r.paths.dev, "dev", false);
  check(r.paths.test, "test", false);
  check(r.paths.si, "si", false);
  check(r.paths.embeddings, "embeddings", false);
}

}  // namespace mtlcer
