// SPDX-License-Identifier: Apache-2.0
//
// Converters from the native distribution formats to conversation-JSONL.
//
//   meld-csv           CSV with a header row containing at least Utterance,
//                      Speaker, Emotion and Dialogue_ID. Rows are grouped
//                      into conversations by Dialogue_ID in order of first
//                      appearance.
//   emorynlp-json      {"episodes": [{"scenes": [{"scene_id": str,
//                      "utterances": [{"speakers": [str...], "transcript": str,
//                      "emotion": str}]}]}]}; one conversation per scene.
//   friends-transcript Plain text. A line starting with '[' opens a new scene
//                      (conversation); "Name: text" lines are utterances with
//                      parenthesized stage directions removed; lines wholly in
//                      parentheses and blank lines are skipped. Output has no
//                      emotion fields.
#pragma once

#include <fstream>
#include <istream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "data.hpp"
#include "errors.hpp"

namespace mtlcer {

enum class SourceFormat { MeldCsv, EmoryNlpJson, FriendsTranscript };

inline SourceFormat parse_source_format(const std::string& s) {
  if (s == "meld-csv") return SourceFormat::MeldCsv;
  if (s == "emorynlp-json") return SourceFormat::EmoryNlpJson;
  if (s == "friends-transcript") return SourceFormat::FriendsTranscript;
  throw ArgumentError("unknown source format \"" + s + "\"");
}

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

// RFC 4180 records; quoted fields may hold commas, doubled quotes and newlines.
// Each record is returned with the line number where it starts.
inline std::vector<std::pair<std::size_t, std::vector<std::string>>> read_csv(std::istream& in,
                                                                            const std::string& source) {
  std::vector<std::pair<std::size_t, std::vector<std::string>>> records;
  std::vector<std::string> fields;
  std::string field;
  bool quoted = false, at_start = true, any = false;
  std::size_t line = 1, record_line = 1;
  char c;
  auto end_field = [&] {
    fields.push_back(std::move(field));
    field.clear();
    at_start = true;
  };
  while (in.get(c)) {
    any = true;
    if (quoted) {
      if (c == '"') {
        if (in.peek() == '"') {
          in.get(c);
          field.push_back('"');
        } else {
          quoted = false;
        }
      } else {
        if (c == '\n') ++line;
        field.push_back(c);
      }
      continue;
    }
    if (c == '"' && at_start) {
      quoted = true;
      at_start = false;
    } else if (c == ',') {
      end_field();
    } else if (c == '\n' || c == '\r') {
      if (c == '\r' && in.peek() == '\n') in.get(c);
      end_field();
      if (!(fields.size() == 1 && fields[0].empty())) records.emplace_back(record_line, std::move(fields));
      fields.clear();
      ++line;
      record_line = line;
    } else {
      field.push_back(c);
      at_start = false;
    }
  }
  if (quoted) throw FormatError(source + ":" + std::to_string(record_line), "unterminated quoted field");
  if (any && (!field.empty() || !fields.empty())) {
    end_field();
    records.emplace_back(record_line, std::move(fields));
  }
  return records;
}

inline std::string strip_parentheticals(const std::string& s) {
  std::string out;
  int depth = 0;
  for (char c : s) {
    if (c == '(') ++depth;
    else if (c == ')' && depth > 0) --depth;
    else if (depth == 0) out.push_back(c);
  }
  return trim(out);
}

}  // namespace detail

inline Corpus convert_meld_csv(std::istream& in, const std::string& source = "<meld>") {
  auto records = detail::read_csv(in, source);
  if (records.empty()) throw FormatError(source, "empty CSV");
  const auto& header = records[0].second;
  auto col = [&](const std::string& name) {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (detail::trim(header[i]) == name) return i;
    throw FormatError(source + ":1", "missing column \"" + name + "\"");
  };
  const auto c_text = col("Utterance"), c_spk = col("Speaker"), c_emo = col("Emotion"),
             c_dia = col("Dialogue_ID");
  const std::size_t need = std::max({c_text, c_spk, c_emo, c_dia}) + 1;
  Corpus corpus;
  std::map<std::string, std::size_t> by_id;
  for (std::size_t r = 1; r < records.size(); ++r) {
    const auto& [line, f] = records[r];
    const std::string where = source + ":" + std::to_string(line);
    if (f.size() < need)
      throw FormatError(where, "expected at least " + std::to_string(need) + " fields, found " +
                                   std::to_string(f.size()));
    const auto dia = detail::trim(f[c_dia]);
    const auto spk = detail::trim(f[c_spk]);
    if (dia.empty()) throw FormatError(where, "empty Dialogue_ID");
    if (spk.empty()) throw FormatError(where, "empty Speaker");
    auto [it, inserted] = by_id.try_emplace(dia, corpus.size());
    if (inserted) corpus.push_back(Conversation{"dia" + dia, {}, nullptr});
    corpus[it->second].utterances.push_back(
        make_utterance(spk, f[c_text], to_lower(detail::trim(f[c_emo]))));
  }
  return corpus;
}

inline Corpus convert_emorynlp_json(std::istream& in, const std::string& source = "<emorynlp>") {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(source, std::string("malformed JSON: ") + e.what());
  }
  if (!j.contains("episodes") || !j["episodes"].is_array())
    throw FormatError(source, "missing array \"episodes\"");
  Corpus corpus;
  std::size_t e = 0;
  for (const auto& ep : j["episodes"]) {
    std::size_t s = 0;
    for (const auto& sc : ep.value("scenes", nlohmann::json::array())) {
      const std::string where = source + ": episode " + std::to_string(e) + " scene " + std::to_string(s);
      Conversation conv;
      conv.id = sc.contains("scene_id") && sc["scene_id"].is_string()
                    ? sc["scene_id"].get<std::string>()
                    : "e" + std::to_string(e) + "_s" + std::to_string(s);
      if (!sc.contains("utterances") || !sc["utterances"].is_array())
        throw FormatError(where, "missing array \"utterances\"");
      std::size_t u = 0;
      for (const auto& ut : sc["utterances"]) {
        const std::string uw = where + " utterance " + std::to_string(u++);
        if (!ut.contains("speakers") || !ut["speakers"].is_array() || ut["speakers"].empty())
          throw FormatError(uw, "missing or empty \"speakers\"");
        std::string spk;
        for (const auto& p : ut["speakers"]) spk += (spk.empty() ? "" : " & ") + p.get<std::string>();
        if (!ut.contains("transcript") || !ut["transcript"].is_string())
          throw FormatError(uw, "missing string \"transcript\"");
        if (!ut.contains("emotion") || !ut["emotion"].is_string())
          throw FormatError(uw, "missing string \"emotion\"");
        conv.utterances.push_back(make_utterance(spk, ut["transcript"].get<std::string>(),
                                                 to_lower(ut["emotion"].get<std::string>())));
      }
      if (!conv.utterances.empty()) corpus.push_back(std::move(conv));
      ++s;
    }
    ++e;
  }
  return corpus;
}

inline Corpus convert_friends_transcript(std::istream& in, const std::string& source = "<transcript>",
                                         const std::string& id_prefix = "scene") {
  Corpus corpus;
  Conversation cur;
  std::size_t scene = 0;
  auto flush = [&] {
    if (!cur.utterances.empty()) {
      cur.id = id_prefix + std::to_string(scene);
      corpus.push_back(std::move(cur));
      ++scene;
    }
    cur = Conversation{};
  };
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto t = detail::trim(line);
    if (t.empty()) continue;
    if (t.front() == '[') {
      flush();
      continue;
    }
    if (t.front() == '(' && detail::strip_parentheticals(t).empty()) continue;
    const auto colon = t.find(':');
    if (colon == std::string::npos || colon == 0)
      throw FormatError(source + ":" + std::to_string(lineno), "expected \"Speaker: text\"");
    const auto spk = detail::trim(t.substr(0, colon));
    if (spk.empty()) throw FormatError(source + ":" + std::to_string(lineno), "empty speaker");
    cur.utterances.push_back(make_utterance(spk, detail::strip_parentheticals(t.substr(colon + 1))));
  }
  flush();
  return corpus;
}

inline Corpus convert_source(SourceFormat fmt, const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(path, "cannot open input");
  switch (fmt) {
    case SourceFormat::MeldCsv:
      return convert_meld_csv(in, path);
    case SourceFormat::EmoryNlpJson:
      return convert_emorynlp_json(in, path);
    case SourceFormat::FriendsTranscript:
      return convert_friends_transcript(in, path);
  }
  return {};
}

}  // namespace mtlcer
