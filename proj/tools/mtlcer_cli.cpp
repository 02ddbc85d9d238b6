// SPDX-License-Identifier: Apache-2.0
//
// mtlcer: command-line front end.
//
//   mtlcer train     --config run.json [--preset P] [--set key=value ...]
//   mtlcer eval      --checkpoint ck.json --corpus dev.jsonl
//   mtlcer predict   --checkpoint ck.json --corpus test.jsonl [--dump-attention]
//   mtlcer gradcheck
//   mtlcer convert   --format meld-csv --input in.csv --output out.jsonl
//   mtlcer ablate    --config run.json --seeds 5 [--jobs N]
//   mtlcer synth     --labeled 200 --unlabeled 800
//
// Exit codes: 0 success, 1 failed check or internal error, 2 invalid
// configuration or input, 3 training divergence.

#include <CLI11.hpp>

#include <mtlcer/convert.hpp>
#include <mtlcer/mtlcer.hpp>
#include <mtlcer/synthetic.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using namespace mtlcer;

namespace {

constexpr int kOk = 0;
constexpr int kFailed = 1;
constexpr int kBadInput = 2;
constexpr int kDiverged = 3;

struct RunOptions {
  std::string config;
  std::string preset;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::string out_dir;
};

// Defaults, then preset, then config file, then --set, then --seed/--out-dir.
RunConfig resolve_config(const RunOptions& o) {
  nlohmann::json doc = to_json(RunConfig{});
  if (!o.preset.empty()) merge_json(doc, preset_json(o.preset));
  if (!o.config.empty()) {
    std::ifstream in(o.config);
    if (!in) throw ConfigError("cannot open config file " + o.config);
    nlohmann::json file;
    try {
      file = nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
      throw ConfigError(o.config + ": malformed JSON: " + e.what());
    }
    if (!file.is_object()) throw ConfigError(o.config + ": top level must be an object");
    merge_json(doc, file);
  }
  for (const auto& s : o.overrides) apply_override(doc, s);
  if (o.seed) doc["train"]["seed"] = *o.seed;
  if (!o.out_dir.empty()) doc["out_dir"] = o.out_dir;
  auto r = run_config_from_json(doc);
  try {
    r.model.validate();
    r.train.validate();
  } catch (const ArgumentError& e) {
    throw ConfigError(e.what());
  }
  if (r.out_dir.empty()) throw ConfigError("out_dir must not be empty");
  return r;
}

// Resolves `name` inside `dir`, refusing anything that would land elsewhere.
fs::path inside(const fs::path& dir, const std::string& name) {
  const fs::path p(name);
  if (p.is_absolute()) {
    auto rel = fs::weakly_canonical(p).lexically_relative(fs::weakly_canonical(dir));
    if (rel.empty() || *rel.begin() == "..")
      throw ConfigError("output " + name + " is outside the output directory " + dir.string());
    return p;
  }
  for (const auto& part : p)
    if (part == "..") throw ConfigError("output " + name + " escapes the output directory");
  return dir / p;
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw ConfigError("cannot create output directory " + dir.string() + ": " + ec.message());
}

std::ofstream open_out(const fs::path& p) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw FormatError(p.string(), "cannot open for writing");
  return out;
}

struct Data {
  std::shared_ptr<const LabelSet> labels;
  Corpus train, dev, test, si;
  Vocabulary vocab;
};

Data load_data(const RunConfig& r) {
  Data d;
  d.labels = std::make_shared<const LabelSet>(LabelSet{r.labels});
  d.train = load_corpus(r.paths.train, d.labels);
  if (!r.paths.dev.empty()) d.dev = load_corpus(r.paths.dev, d.labels);
  if (!r.paths.test.empty()) d.test = load_corpus(r.paths.test, d.labels);
  if (!r.paths.si.empty()) d.si = load_corpus(r.paths.si, d.labels);
  d.vocab = build_vocab(std::vector<const Corpus*>{&d.train, &d.dev, &d.test, &d.si}, r.min_freq);
  return d;
}

template <std::floating_point T>
EmbeddingTable<T> make_embeddings(const RunConfig& r, const Vocabulary& vocab, bool verbose) {
  Rng rng = Rng(r.train.seed).derive("embedding");
  if (r.paths.embeddings.empty()) return random_embeddings<T>(vocab, r.model.embed_dim, rng);
  EmbeddingMissReport miss;
  auto t = load_embeddings<T>(r.paths.embeddings, vocab, r.model.embed_dim, rng, &miss);
  if (verbose)
    std::cerr << "embeddings: " << miss.found << " found, " << miss.missing.size()
              << " initialized randomly\n";
  return t;
}

nlohmann::json report_json(const EvalReport& rep, const LabelSet& labels) {
  nlohmann::json pc = nlohmann::json::array();
  for (std::size_t c = 0; c < rep.per_class.size(); ++c) {
    const auto& s = rep.per_class[c];
    pc.push_back({{"label", labels.names[c]},
                  {"precision", s.precision},
                  {"recall", s.recall},
                  {"f1", s.f1},
                  {"support", s.support}});
  }
  return {{"weighted_macro_f1", rep.weighted_macro_f1},
          {"accuracy", rep.accuracy()},
          {"n_utterances", rep.n_utterances},
          {"per_class", pc},
          {"confusion", rep.confusion}};
}

void print_report_tsv(std::ostream& out, const EvalReport& rep, const LabelSet& labels) {
  out << "weighted_macro_f1\t" << std::setprecision(6) << std::fixed << rep.weighted_macro_f1 << '\n';
  out << "n_utterances\t" << rep.n_utterances << '\n';
  out << "label\tprecision\trecall\tf1\tsupport\n";
  for (std::size_t c = 0; c < rep.per_class.size(); ++c) {
    const auto& s = rep.per_class[c];
    out << labels.names[c] << '\t' << s.precision << '\t' << s.recall << '\t' << s.f1 << '\t'
        << s.support << '\n';
  }
  out.unsetf(std::ios::floatfield);
}

// ---------------------------------------------------------------------------

template <std::floating_point T>
int train_impl(const RunConfig& r) {
  auto d = load_data(r);
  const fs::path out_dir(r.out_dir);
  ensure_dir(out_dir);
  open_out(out_dir / "config.json") << to_json(r).dump(2) << '\n';

  auto emb = make_embeddings<T>(r, d.vocab, true);
  auto model = MtlModel<T>::create(r.model, emb.matrix, Rng(r.train.seed));
  const auto tr = encode(d.train, d.vocab, *d.labels);
  const auto dv = encode(d.dev, d.vocab, *d.labels);
  const auto si = encode(d.si, d.vocab, *d.labels);

  auto log = open_out(out_dir / "train_log.jsonl");
  auto result = train<T>(std::move(model), r.train, tr, dv, si,
                         [&](const nlohmann::json& rec) { log << rec.dump() << '\n'; });
  log.flush();

  save_checkpoint((out_dir / "checkpoint.json").string(), result.best, d.vocab, *d.labels);
  const auto rep = evaluate_corpus(result.best, dv.empty() ? tr : dv);
  auto j = report_json(rep, *d.labels);
  j["best_epoch"] = result.best_epoch;
  const std::string split = dv.empty() ? "train" : "dev";
  j["split"] = split;
  open_out(out_dir / "dev_report.json") << j.dump(2) << '\n';
  std::cout << "best epoch " << result.best_epoch << ", " << split
            << " weighted F1 " << rep.weighted_macro_f1 << '\n';
  std::cout << "checkpoint: " << (out_dir / "checkpoint.json").string() << '\n';
  return kOk;
}

int cmd_train(const RunOptions& o) {
  auto r = resolve_config(o);
  validate_paths(r, true);
  return r.model.precision == Precision::Double ? train_impl<double>(r) : train_impl<float>(r);
}

template <std::floating_point T>
Checkpoint<T> load_for_corpus(const std::string& checkpoint, const std::string& corpus_path,
                              std::vector<EncodedConversation>& encoded) {
  auto ck = load_checkpoint<T>(checkpoint);
  auto labels = std::make_shared<const LabelSet>(ck.labels);
  auto corpus = load_corpus(corpus_path, labels);
  encoded = encode(corpus, ck.vocab, *labels);
  return ck;
}

template <std::floating_point T>
int eval_impl(const std::string& checkpoint, const std::string& corpus_path, const std::string& format) {
  std::vector<EncodedConversation> conv;
  auto ck = load_for_corpus<T>(checkpoint, corpus_path, conv);
  const auto rep = evaluate_corpus(ck.model, conv);
  if (format == "json")
    std::cout << report_json(rep, ck.labels).dump() << '\n';
  else
    print_report_tsv(std::cout, rep, ck.labels);
  return kOk;
}

int cmd_eval(const std::string& checkpoint, const std::string& corpus, const std::string& format) {
  const auto cfg = peek_checkpoint_config(checkpoint);
  return cfg.precision == Precision::Double ? eval_impl<double>(checkpoint, corpus, format)
                                            : eval_impl<float>(checkpoint, corpus, format);
}

template <std::floating_point T>
std::vector<double> row_values(const Tensor<T>& m, std::size_t i) {
  auto r = m.data().subspan(i * m.cols(), m.cols());
  return {r.begin(), r.end()};
}

template <std::floating_point T>
int predict_impl(const std::string& checkpoint, const std::string& corpus_path, bool dump_attention,
                 const fs::path& out_path) {
  std::vector<EncodedConversation> convs;
  auto ck = load_for_corpus<T>(checkpoint, corpus_path, convs);
  auto out = open_out(out_path);
  const bool mtl = ck.model.config.multitask;
  std::size_t n = 0;
  for (const auto& conv : convs) {
    Tape<T> tape;
    ForwardPass<T> pass(ck.model, tape, conv, mtl);
    const auto& dist = pass.cer_distributions();
    for (std::size_t i = 0; i < conv.size(); ++i) {
      auto d = row_values(dist, i);
      const auto label = static_cast<std::size_t>(std::max_element(d.begin(), d.end()) - d.begin());
      nlohmann::json rec{{"conv_id", conv.id},
                         {"utt_index", i},
                         {"label", ck.labels.names[label]},
                         {"dist", d}};
      if (dump_attention) {
        const auto& a = pass.word_attention(Side::Cer)[i];
        rec["alpha"] = std::vector<double>(a.data().begin(), a.data().end());
        if (pass.uses_cue()) rec["beta_row"] = row_values(pass.cross_weights(Side::Cer), i);
      }
      out << rec.dump() << '\n';
      ++n;
    }
  }
  std::cout << "wrote " << n << " predictions to " << out_path.string() << '\n';
  return kOk;
}

int cmd_predict(const std::string& checkpoint, const std::string& corpus, bool dump_attention,
                const std::string& out_dir, const std::string& output) {
  ensure_dir(out_dir);
  const auto path = inside(out_dir, output);
  const auto cfg = peek_checkpoint_config(checkpoint);
  return cfg.precision == Precision::Double ? predict_impl<double>(checkpoint, corpus, dump_attention, path)
                                            : predict_impl<float>(checkpoint, corpus, dump_attention, path);
}

int cmd_gradcheck(std::size_t cases, std::uint64_t seed, double fault) {
  testing_hooks::tanh_backward_scale = fault;
  const auto rep = run_gradcheck(cases, 2, seed);
  std::size_t width = 0;
  for (const auto& e : rep.entries) width = std::max(width, e.component.size());
  for (const auto& e : rep.entries) {
    std::printf("%-*s  max_rel_err=%.3e  cases=%zu  %s\n", static_cast<int>(width), e.component.c_str(),
                e.max_error, e.cases, e.passed ? "ok" : "FAIL");
  }
  std::printf("%zu components, tolerance %.0e, %.2f s: %s\n", rep.entries.size(), rep.tolerance,
              rep.seconds, rep.passed() ? "PASS" : "FAIL");
  return rep.passed() ? kOk : kFailed;
}

int cmd_convert(const std::string& format, const std::string& input, const std::string& out_dir,
                const std::string& output) {
  const auto fmt = parse_source_format(format);
  auto corpus = convert_source(fmt, input);
  ensure_dir(out_dir);
  const auto path = inside(out_dir, output);
  auto out = open_out(path);
  write_corpus(out, corpus);
  std::size_t utts = 0;
  for (const auto& c : corpus) utts += c.utterances.size();
  std::cout << "wrote " << corpus.size() << " conversations, " << utts << " utterances to "
            << path.string() << '\n';
  return kOk;
}

template <std::floating_point T>
int ablate_impl(const RunConfig& r, std::size_t n_seeds, std::size_t jobs) {
  auto d = load_data(r);
  const fs::path out_dir(r.out_dir);
  ensure_dir(out_dir);
  const auto tr = encode(d.train, d.vocab, *d.labels);
  const auto dv = encode(d.dev, d.vocab, *d.labels);
  const auto si = encode(d.si, d.vocab, *d.labels);
  const auto emb = make_embeddings<T>(r, d.vocab, true);
  std::vector<std::uint64_t> seeds(n_seeds);
  std::iota(seeds.begin(), seeds.end(), r.train.seed);
  auto make = [&](const ModelConfig& cfg, std::uint64_t seed) {
    return MtlModel<T>::create(cfg, emb.matrix.clone(), Rng(seed));
  };
  const auto rep = run_ablation<T>(r.model, r.train, make, tr, dv, si, seeds, jobs, r.dataset);
  open_out(out_dir / "ablation.tsv") << rep.to_tsv();
  nlohmann::json j;
  j["dataset"] = rep.dataset;
  j["seeds"] = seeds;
  for (const auto& row : rep.rows)
    j["rows"].push_back({{"iue", row.iue}, {"cue", row.cue}, {"seed_f1", row.seed_f1}, {"median_f1", row.median_f1}});
  j["t_test"] = {{"p_value", rep.full_vs_none.p_value},
                 {"t_statistic", rep.full_vs_none.t_statistic},
                 {"degenerate", rep.full_vs_none.degenerate}};
  open_out(out_dir / "ablation.json") << j.dump(2) << '\n';
  std::cout << rep.to_tsv();
  std::cout << "paired t-test (on,on) vs (off,off): p=" << rep.full_vs_none.p_value
            << (rep.full_vs_none.degenerate ? " (zero variance)" : "") << '\n';
  return kOk;
}

int cmd_ablate(const RunOptions& o, std::size_t n_seeds, std::size_t jobs) {
  if (n_seeds == 0) throw ConfigError("--seeds must be at least 1");
  auto r = resolve_config(o);
  validate_paths(r, true);
  return r.model.precision == Precision::Double ? ablate_impl<double>(r, n_seeds, jobs)
                                                : ablate_impl<float>(r, n_seeds, jobs);
}

int cmd_synth(SyntheticSpec spec, std::size_t dev, const std::string& labels_name, const std::string& out_dir) {
  if (dev >= spec.labeled) throw ConfigError("--dev must be smaller than --labeled");
  auto labels = std::make_shared<const LabelSet>(labels_name == "meld" ? LabelSet::meld() : LabelSet::emorynlp());
  const auto c = make_synthetic_corpus(spec, labels);
  ensure_dir(out_dir);
  const Corpus train(c.labeled.begin(), c.labeled.end() - static_cast<std::ptrdiff_t>(dev));
  const Corpus devc(c.labeled.end() - static_cast<std::ptrdiff_t>(dev), c.labeled.end());
  auto o1 = open_out(fs::path(out_dir) / "train.jsonl");
  write_corpus(o1, train);
  auto o2 = open_out(fs::path(out_dir) / "dev.jsonl");
  write_corpus(o2, devc);
  auto o3 = open_out(fs::path(out_dir) / "si.jsonl");
  write_corpus(o3, c.unlabeled);
  std::cout << "wrote " << train.size() << " train, " << devc.size() << " dev, " << c.unlabeled.size()
            << " speaker-only conversations to " << out_dir << '\n';
  return kOk;
}

void add_run_options(CLI::App* app, RunOptions& o) {
  app->add_option("--config", o.config, "JSON run configuration")->check(CLI::ExistingFile)->default_str("none");
  app->add_option("--preset", o.preset, "dataset preset applied before the config file")
      ->check(CLI::IsMember({"emorynlp", "meld"}))
      ->default_str("none");
  app->add_option("--set", o.overrides, "dotted-key override, e.g. model.dropout=0.3 (repeatable)")->default_str("none");
  app->add_option("--seed", o.seed, "overrides train.seed")->default_str("1, or the config value");
  app->add_option("--out-dir", o.out_dir, "overrides out_dir; every output file goes here")
      ->default_str("out, or the config value");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-task emotion recognition in conversation with speaker identification"};
  app.option_defaults()->always_capture_default();
  app.require_subcommand(1);

  RunOptions train_opts;
  auto* train_cmd = app.add_subcommand("train", "train a model from a run configuration");
  add_run_options(train_cmd, train_opts);

  std::string checkpoint, corpus, format = "tsv";
  auto* eval_cmd = app.add_subcommand("eval", "score a checkpoint on a labeled corpus");
  eval_cmd->add_option("--checkpoint", checkpoint, "checkpoint file")->required()->check(CLI::ExistingFile)->default_str("required");
  eval_cmd->add_option("--corpus", corpus, "conversation-JSONL with emotions")->required()->check(CLI::ExistingFile)->default_str("required");
  eval_cmd->add_option("--format", format, "output format")->check(CLI::IsMember({"tsv", "json"}));

  bool dump_attention = false;
  std::string out_dir = "out", predict_output = "predictions.jsonl";
  auto* predict_cmd = app.add_subcommand("predict", "write per-utterance predictions as JSON lines");
  predict_cmd->add_option("--checkpoint", checkpoint, "checkpoint file")->required()->check(CLI::ExistingFile)->default_str("required");
  predict_cmd->add_option("--corpus", corpus, "conversation-JSONL; emotions optional")->required()->check(CLI::ExistingFile)->default_str("required");
  predict_cmd->add_flag("--dump-attention", dump_attention, "include word attention (alpha) and cross-attention rows (beta_row)");
  predict_cmd->add_option("--out-dir", out_dir, "output directory");
  predict_cmd->add_option("--output", predict_output, "file name inside the output directory");

  std::size_t gc_cases = 20;
  std::uint64_t gc_seed = 7;
  double fault = 1.0;
  auto* gc_cmd = app.add_subcommand("gradcheck", "compare analytic gradients with central differences");
  gc_cmd->add_option("--cases", gc_cases, "random cases per operation and layer")->check(CLI::PositiveNumber);
  gc_cmd->add_option("--seed", gc_seed, "seed for the random cases");
  gc_cmd->add_option("--inject-fault", fault, "scale applied to one backward rule")->group("");

  std::string conv_format, conv_input, conv_output = "converted.jsonl";
  auto* convert_cmd = app.add_subcommand("convert", "convert a native corpus to conversation-JSONL");
  convert_cmd->add_option("--format", conv_format, "source format")
      ->required()
      ->default_str("required")
      ->check(CLI::IsMember({"meld-csv", "emorynlp-json", "friends-transcript"}));
  convert_cmd->add_option("--input", conv_input, "source file")->required()->check(CLI::ExistingFile)->default_str("required");
  convert_cmd->add_option("--out-dir", out_dir, "output directory");
  convert_cmd->add_option("--output", conv_output, "file name inside the output directory");

  RunOptions ablate_opts;
  std::size_t seeds = 5, jobs = 1;
  auto* ablate_cmd = app.add_subcommand("ablate", "train all four bridge settings over several seeds");
  add_run_options(ablate_cmd, ablate_opts);
  ablate_cmd->add_option("--seeds", seeds, "number of consecutive seeds starting at train.seed");
  ablate_cmd->add_option("--jobs", jobs, "concurrent training runs")->check(CLI::PositiveNumber);

  SyntheticSpec spec;
  std::size_t synth_dev = 40;
  std::string synth_labels = "emorynlp";
  auto* synth_cmd = app.add_subcommand("synth", "generate the synthetic speaker-cue corpus");
  synth_cmd->add_option("--labeled", spec.labeled, "labeled conversations (train + dev)");
  synth_cmd->add_option("--dev", synth_dev, "labeled conversations held out as dev");
  synth_cmd->add_option("--unlabeled", spec.unlabeled, "speaker-only conversations");
  synth_cmd->add_option("--speakers", spec.speakers, "speaker pool size");
  synth_cmd->add_option("--signature-words", spec.signature_words, "signature words per speaker");
  synth_cmd->add_option("--signature-rate", spec.signature_rate, "probability of a signature word")
      ->check(CLI::Range(0.0, 1.0));
  synth_cmd->add_option("--seed", spec.seed, "generator seed");
  synth_cmd->add_option("--labels", synth_labels, "label inventory")->check(CLI::IsMember({"emorynlp", "meld"}));
  synth_cmd->add_option("--out-dir", out_dir, "output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kBadInput;
  }

  try {
    if (*train_cmd) return cmd_train(train_opts);
    if (*eval_cmd) return cmd_eval(checkpoint, corpus, format);
    if (*predict_cmd) return cmd_predict(checkpoint, corpus, dump_attention, out_dir, predict_output);
    if (*gc_cmd) return cmd_gradcheck(gc_cases, gc_seed, fault);
    if (*convert_cmd) return cmd_convert(conv_format, conv_input, out_dir, conv_output);
    if (*ablate_cmd) return cmd_ablate(ablate_opts, seeds, jobs);
    if (*synth_cmd) return cmd_synth(spec, synth_dev, synth_labels, out_dir);
  } catch (const DivergenceError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kDiverged;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kBadInput;
  } catch (const FormatError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kBadInput;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kBadInput;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kFailed;
  }
  return kFailed;
}
