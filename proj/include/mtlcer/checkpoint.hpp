// SPDX-License-Identifier: Apache-2.0
//
// Checkpoint container (JSON):
//   {"format": "mtlcer-checkpoint", "version": 1,
//    "config": {...model config...},
//    "labels": [...], "vocab": [...], "vocab_hash": "<16 hex digits>",
//    "embedding_trainable": bool,
//    "params": {"<name>": {"shape": [...], "data": [...]}, ...}}
// Numbers are written in shortest round-trip form, so save/load is exact.
#pragma once

#include <concepts>
#include <cstdio>
#include <fstream>
#include <string>

#include <json.hpp>

#include "config.hpp"
#include "data.hpp"
#include "model.hpp"

namespace mtlcer {

template <std::floating_point T>
struct Checkpoint {
  MtlModel<T> model;
  Vocabulary vocab;
  LabelSet labels;
};

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

template <std::floating_point T>
nlohmann::json checkpoint_json(const MtlModel<T>& model, const Vocabulary& vocab, const LabelSet& labels) {
  nlohmann::json j;
  j["format"] = "mtlcer-checkpoint";
  j["version"] = 1;
  j["config"] = to_json(model.config);
  j["labels"] = labels.names;
  j["vocab"] = vocab.tokens();
  j["vocab_hash"] = hex64(vocab.hash());
  j["embedding_trainable"] = model.params.embedding.requires_grad();
  nlohmann::json params = nlohmann::json::object();
  for (const auto& [name, t] : model.named_params()) {
    std::vector<double> data(t.data().begin(), t.data().end());
    params[name] = {{"shape", t.shape()}, {"data", data}};
  }
  j["params"] = std::move(params);
  return j;
}

template <std::floating_point T>
void save_checkpoint(const std::string& path, const MtlModel<T>& model, const Vocabulary& vocab,
                     const LabelSet& labels) {
  std::ofstream out(path);
  if (!out) throw FormatError(path, "cannot write checkpoint");
  out << checkpoint_json(model, vocab, labels).dump() << '\n';
  if (!out) throw FormatError(path, "write failed");
}

template <std::floating_point T>
Checkpoint<T> checkpoint_from_json(const nlohmann::json& j, const std::string& source = "<checkpoint>") {
  if (!j.is_object() || j.value("format", "") != "mtlcer-checkpoint")
    throw FormatError(source, "not a checkpoint file");
  if (j.value("version", 0) != 1) throw FormatError(source, "unsupported checkpoint version");
  Checkpoint<T> ck;
  auto cfg = model_config_from_json(j.at("config"), "config");
  ck.labels.names = j.at("labels").get<std::vector<std::string>>();
  ck.vocab = Vocabulary(j.at("vocab").get<std::vector<std::string>>());
  if (j.at("vocab_hash").get<std::string>() != hex64(ck.vocab.hash()))
    throw FormatError(source, "vocabulary hash mismatch");
  const auto& params = j.at("params");
  auto load = [&](const std::string& name) {
    if (!params.contains(name)) throw FormatError(source, "missing parameter \"" + name + "\"");
    const auto& p = params[name];
    auto shape = p.at("shape").get<Shape>();
    auto raw = p.at("data").get<std::vector<double>>();
    std::vector<T> data(raw.begin(), raw.end());
    return Tensor<T>(std::move(shape), std::move(data), true);
  };
  auto emb = load("embedding");
  emb.set_requires_grad(j.value("embedding_trainable", false));
  ck.model = MtlModel<T>::create(cfg, emb, Rng(0));
  std::size_t seen = 0;
  ck.model.params.visit([&](const std::string& name, Tensor<T>& t) {
    ++seen;
    if (name == "embedding") return;
    auto loaded = load(name);
    if (loaded.shape() != t.shape())
      throw FormatError(source, "parameter \"" + name + "\" has shape " + shape_str(loaded.shape()) +
                                    ", expected " + shape_str(t.shape()));
    t = loaded;
  });
  if (params.size() != seen) throw FormatError(source, "unexpected extra parameters");
  if (ck.model.params.embedding.rows() != ck.vocab.size())
    throw FormatError(source, "embedding rows do not match vocabulary size");
  return ck;
}

template <std::floating_point T>
Checkpoint<T> load_checkpoint(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError(path, "cannot open checkpoint");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(path, std::string("malformed checkpoint: ") + e.what());
  }
  return checkpoint_from_json<T>(j, path);
}

/// Reads only the configuration block, e.g. to pick the precision.
inline ModelConfig peek_checkpoint_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError(path, "cannot open checkpoint");
  auto j = nlohmann::json::parse(in);
  return model_config_from_json(j.at("config"), "config");
}

}  // namespace mtlcer
