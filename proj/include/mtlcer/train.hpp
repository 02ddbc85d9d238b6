// SPDX-License-Identifier: Apache-2.0
//
// Training loop, evaluation and the bridge ablation harness.
//
// An epoch walks the labeled corpus in batches. Each labeled batch is
// followed by `mix_ratio` batches of speaker-only conversations. A labeled
// conversation contributes L_CER + L_SI (pairs sampled from its own speaker
// tags) in multi-task mode and L_CER otherwise; a speaker-only conversation
// contributes L_SI. The batch objective is the mean over its conversations,
// followed by one Adam step.
//
// All randomness (shuffling, dropout masks, pair draws) comes from streams
// derived from the schedule seed and the batch coordinates, with separate
// streams for the CER path and the SI path.
#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <functional>
#include <future>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "data.hpp"
#include "metrics.hpp"
#include "model.hpp"
#include "optim.hpp"

namespace mtlcer {

struct TrainSchedule {
  std::size_t max_epochs = 30;
  std::size_t batch_size = 4;
  double lr_main = 2.5e-4;
  double lr_embedding = 0.0;  // 0 keeps the word vectors frozen
  std::size_t mix_ratio = 1;  // speaker-only batches per labeled batch
  std::size_t early_stop_patience = 10;
  std::uint64_t seed = 1;
  double clip_norm = 0.0;  // global gradient-norm clip; 0 disables
  bool shuffle = true;

  void validate() const {
    if (max_epochs == 0) throw ArgumentError("train.max_epochs must be positive");
    if (batch_size == 0) throw ArgumentError("train.batch_size must be positive");
    if (!(lr_main > 0)) throw ArgumentError("train.lr_main must be positive");
    if (!(lr_embedding >= 0)) throw ArgumentError("train.lr_embedding must be non-negative");
    if (early_stop_patience == 0) throw ArgumentError("train.early_stop_patience must be positive");
    if (!(clip_norm >= 0)) throw ArgumentError("train.clip_norm must be non-negative");
  }
};

class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(std::size_t epoch, std::size_t batch, const std::string& what)
      : std::runtime_error("non-finite " + what + " at epoch " + std::to_string(epoch) +
                           ", batch " + std::to_string(batch)),
        epoch(epoch),
        batch(batch) {}
  std::size_t epoch;
  std::size_t batch;
};

template <std::floating_point T>
struct TrainResult {
  MtlModel<T> best;
  std::size_t best_epoch = 0;
  double best_dev_f1 = -1;
  std::vector<nlohmann::json> log;
  std::vector<double> epoch_train_loss;  // mean labeled-batch L_CER per epoch
};

// ---------------------------------------------------------------------------
// Evaluation

template <std::floating_point T>
std::vector<int> predict_labels(const MtlModel<T>& model, const EncodedConversation& conv) {
  Tape<T> tape;
  ForwardPass<T> pass(model, tape, conv, model.config.multitask);
  const auto& logits = pass.cer_logits();
  std::vector<int> out(logits.rows());
  const std::size_t k = logits.cols();
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    auto r = logits.data().subspan(i * k, k);
    out[i] = static_cast<int>(std::max_element(r.begin(), r.end()) - r.begin());
  }
  return out;
}

/// Evaluates emotion predictions on every labeled utterance of the corpus.
template <std::floating_point T>
EvalReport evaluate_corpus(const MtlModel<T>& model, std::span<const EncodedConversation> corpus) {
  std::vector<int> golds, preds;
  for (const auto& conv : corpus) {
    if (!conv.has_emotions()) continue;
    auto p = predict_labels(model, conv);
    for (std::size_t i = 0; i < conv.size(); ++i)
      if (conv.emotions[i] >= 0) {
        golds.push_back(conv.emotions[i]);
        preds.push_back(p[i]);
      }
  }
  return evaluate(golds, preds, model.config.num_emotions);
}

/// Mean per-conversation L_CER without dropout.
template <std::floating_point T>
double corpus_cer_loss(const MtlModel<T>& model, std::span<const EncodedConversation> corpus) {
  double total = 0;
  std::size_t n = 0;
  for (const auto& conv : corpus) {
    Tape<T> tape;
    ForwardPass<T> pass(model, tape, conv, model.config.multitask);
    auto l = loss_cer<T>(tape, pass.cer_logits(), conv.emotions);
    if (l.count == 0) continue;
    total += static_cast<double>(l.value.item());
    ++n;
  }
  return n ? total / static_cast<double>(n) : 0.0;
}

// ---------------------------------------------------------------------------

template <std::floating_point T>
class Trainer {
 public:
  using LogSink = std::function<void(const nlohmann::json&)>;

  Trainer(MtlModel<T> model, TrainSchedule schedule)
      : model_(std::move(model)), sched_(schedule), root_(schedule.seed) {
    sched_.validate();
    model_.params.embedding.set_requires_grad(sched_.lr_embedding > 0);
    for (auto& w : model_.params.weights()) opt_.add(w, sched_.lr_main);
    if (sched_.lr_embedding > 0) opt_.add(model_.params.embedding, sched_.lr_embedding);
  }

  const MtlModel<T>& model() const { return model_; }

  TrainResult<T> run(std::span<const EncodedConversation> cer_train,
                     std::span<const EncodedConversation> cer_dev,
                     std::span<const EncodedConversation> si_corpus, const LogSink& sink = {}) {
    if (cer_train.empty()) throw ArgumentError("train: empty labeled training corpus");
    TrainResult<T> result;
    auto emit = [&](nlohmann::json rec) {
      if (sink) sink(rec);
      result.log.push_back(std::move(rec));
    };
    const bool mtl = model_.config.multitask;
    const auto dev = cer_dev.empty() ? cer_train : cer_dev;
    std::size_t since_best = 0;
    for (std::size_t epoch = 1; epoch <= sched_.max_epochs; ++epoch) {
      auto shuffle_rng = root_.derive("shuffle-cer", epoch);
      auto batches = make_batches(cer_train.size(), sched_.batch_size, shuffle_rng, sched_.shuffle);
      double epoch_loss = 0;
      std::size_t batch_no = 0;
      for (std::size_t b = 0; b < batches.size(); ++b) {
        ++batch_no;
        auto stats = guarded_step(cer_train, batches[b], true, root_.derive("batch-cer", epoch, b), epoch, batch_no);
        epoch_loss += stats.cer;
        emit(batch_record(epoch, batch_no, "cer", stats, true, mtl));
        if (!mtl || si_corpus.empty()) continue;
        for (std::size_t m = 0; m < sched_.mix_ratio; ++m) {
          ++batch_no;
          auto si_batch = next_si_batch(si_corpus.size());
          auto s = guarded_step(si_corpus, si_batch, false, root_.derive("batch-si", si_batches_done_), epoch,
                                batch_no);
          ++si_batches_done_;
          emit(batch_record(epoch, batch_no, "si", s, false, true));
        }
      }
      epoch_loss /= static_cast<double>(batches.size());
      result.epoch_train_loss.push_back(epoch_loss);
      const double f1 = evaluate_corpus(model_, dev).weighted_macro_f1;
      emit({{"epoch", epoch}, {"dev_f1", f1}, {"train_loss_cer", epoch_loss}});
      if (f1 > result.best_dev_f1) {
        result.best_dev_f1 = f1;
        result.best_epoch = epoch;
        result.best = model_.clone();
        since_best = 0;
      } else if (++since_best >= sched_.early_stop_patience) {
        break;
      }
    }
    return result;
  }

 private:
  struct StepStats {
    double cer = 0;
    double si = 0;
    double multi = 0;
  };

  static nlohmann::json batch_record(std::size_t epoch, std::size_t batch, const char* kind,
                                     const StepStats& s, bool has_cer, bool has_si) {
    nlohmann::json j{{"epoch", epoch}, {"batch", batch}, {"kind", kind}};
    j["loss_cer"] = has_cer ? nlohmann::json(s.cer) : nlohmann::json(nullptr);
    j["loss_si"] = has_si ? nlohmann::json(s.si) : nlohmann::json(nullptr);
    j["loss_multi"] = s.multi;
    return j;
  }

  std::vector<std::size_t> next_si_batch(std::size_t n) {
    std::vector<std::size_t> out;
    while (out.size() < std::min(sched_.batch_size, n)) {
      if (si_cursor_ >= si_order_.size()) {
        si_order_.resize(n);
        for (std::size_t i = 0; i < n; ++i) si_order_[i] = i;
        auto r = root_.derive("shuffle-si", si_passes_++);
        if (sched_.shuffle) r.shuffle(std::span<std::size_t>(si_order_));
        si_cursor_ = 0;
        if (!out.empty()) break;  // do not straddle two passes
      }
      out.push_back(si_order_[si_cursor_++]);
    }
    return out;
  }

  // Non-finite values caught inside an operation also count as divergence.
  StepStats guarded_step(std::span<const EncodedConversation> corpus, const std::vector<std::size_t>& batch,
                         bool labeled, const Rng& batch_rng, std::size_t epoch, std::size_t batch_no) {
    try {
      return step(corpus, batch, labeled, batch_rng, epoch, batch_no);
    } catch (const NumericError& e) {
      throw DivergenceError(epoch, batch_no, std::string("value (") + e.what() + ")");
    }
  }

  StepStats step(std::span<const EncodedConversation> corpus, const std::vector<std::size_t>& batch,
                 bool labeled, const Rng& batch_rng, std::size_t epoch, std::size_t batch_no) {
    const bool mtl = model_.config.multitask;
    tape_.clear();
    opt_.zero_grad();
    std::vector<Tensor<T>> totals;
    StepStats stats;
    for (std::size_t k = 0; k < batch.size(); ++k) {
      const auto& conv = corpus[batch[k]];
      auto streams = DropoutStreams::from(batch_rng.derive("conv", k));
      auto pair_rng = batch_rng.derive("pairs", k);
      ForwardPass<T> pass(model_, tape_, conv, mtl, true, &streams);
      Tensor<T> total;
      Loss<T> lc{Tensor<T>::scalar(T(0)), false, 0};
      if (labeled) {
        lc = loss_cer<T>(tape_, pass.cer_logits(), conv.emotions);
        total = lc.value;
      }
      if (mtl) {
        auto pairs = sample_pairs(conv, model_.config.pairs_per_conversation, pair_rng,
                                  model_.config.balance_pairs);
        std::vector<Tensor<T>> logits;
        std::vector<int> labels;
        for (const auto& p : pairs) {
          logits.push_back(pass.si_logits(p.i, p.j));
          labels.push_back(p.label);
        }
        auto ls = loss_si<T>(tape_, logits, labels);
        stats.si += static_cast<double>(ls.value.item());
        total = labeled ? loss_multi(tape_, lc.value, ls.value) : ls.value;
      }
      stats.cer += static_cast<double>(lc.value.item());
      totals.push_back(total);
    }
    auto batch_loss = div_scalar(tape_, add_n<T>(tape_, totals), static_cast<T>(totals.size()));
    const double n = static_cast<double>(batch.size());
    stats.cer /= n;
    stats.si /= n;
    stats.multi = static_cast<double>(batch_loss.item());
    if (!std::isfinite(stats.multi)) throw DivergenceError(epoch, batch_no, "loss");
    tape_.backward(batch_loss);
    if (sched_.clip_norm > 0) {
      const double norm = opt_.clip_grad_norm(sched_.clip_norm);
      if (!std::isfinite(norm)) throw DivergenceError(epoch, batch_no, "gradient");
    }
    opt_.step();
    tape_.clear();
    return stats;
  }

  MtlModel<T> model_;
  TrainSchedule sched_;
  Rng root_;
  Adam<T> opt_;
  Tape<T> tape_;
  std::vector<std::size_t> si_order_;
  std::size_t si_cursor_ = 0;
  std::uint64_t si_passes_ = 0;
  std::uint64_t si_batches_done_ = 0;
};

template <std::floating_point T>
TrainResult<T> train(MtlModel<T> model, const TrainSchedule& schedule,
                     std::span<const EncodedConversation> cer_train,
                     std::span<const EncodedConversation> cer_dev,
                     std::span<const EncodedConversation> si_corpus,
                     const typename Trainer<T>::LogSink& sink = {}) {
  Trainer<T> trainer(std::move(model), schedule);
  return trainer.run(cer_train, cer_dev, si_corpus, sink);
}

// ---------------------------------------------------------------------------
// Ablation over the two bridges

struct AblationRow {
  bool iue = false;
  bool cue = false;
  std::vector<double> seed_f1;  // best dev weighted-F1 per seed
  double median_f1 = 0;
};

struct AblationReport {
  std::string dataset;
  std::vector<AblationRow> rows;  // (off,off), (off,on), (on,off), (on,on)
  TTestResult full_vs_none;       // paired over seeds: (on,on) vs (off,off)

  /// Tab-separated: iue, cue, dataset, f1 (median over seeds).
  std::string to_tsv() const {
    std::string s = "iue\tcue\tdataset\tf1\n";
    for (const auto& r : rows) {
      nlohmann::json f = r.median_f1;
      s += std::string(r.iue ? "1" : "0") + "\t" + (r.cue ? "1" : "0") + "\t" + dataset + "\t" +
           f.dump() + "\n";
    }
    return s;
  }
};

inline double median(std::vector<double> v) {
  if (v.empty()) throw ArgumentError("median of empty list");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

/// Trains all four bridge configurations of a multi-task model for every
/// seed in `seeds` and reports the median best-dev score per configuration.
/// `make_model(config, seed)` builds a freshly initialized model.
/// Runs with jobs > 1 execute on worker threads; each run owns its model.
template <std::floating_point T>
AblationReport run_ablation(const ModelConfig& base, const TrainSchedule& schedule,
                            const std::function<MtlModel<T>(const ModelConfig&, std::uint64_t)>& make_model,
                            std::span<const EncodedConversation> cer_train,
                            std::span<const EncodedConversation> cer_dev,
                            std::span<const EncodedConversation> si_corpus,
                            std::span<const std::uint64_t> seeds, std::size_t jobs = 1,
                            std::string dataset = "dataset") {
  if (seeds.empty()) throw ArgumentError("run_ablation: no seeds");
  AblationReport rep;
  rep.dataset = std::move(dataset);
  const bool combos[4][2] = {{false, false}, {false, true}, {true, false}, {true, true}};
  struct Job {
    std::size_t row;
    std::uint64_t seed;
  };
  std::vector<Job> work;
  for (std::size_t r = 0; r < 4; ++r) {
    AblationRow row;
    row.iue = combos[r][0];
    row.cue = combos[r][1];
    row.seed_f1.assign(seeds.size(), 0.0);
    rep.rows.push_back(row);
    for (auto s : seeds) work.push_back({r, s});
  }
  auto run_one = [&](const Job& j) {
    ModelConfig cfg = base;
    cfg.multitask = true;
    cfg.iue_bridge = rep.rows[j.row].iue;
    cfg.cue_bridge = rep.rows[j.row].cue;
    TrainSchedule sch = schedule;
    sch.seed = j.seed;
    return train(make_model(cfg, j.seed), sch, cer_train, cer_dev, si_corpus).best_dev_f1;
  };
  std::vector<double> scores(work.size());
  const std::size_t width = std::max<std::size_t>(1, jobs);
  for (std::size_t start = 0; start < work.size(); start += width) {
    std::vector<std::future<double>> fut;
    for (std::size_t k = start; k < std::min(work.size(), start + width); ++k) {
      if (width == 1)
        scores[k] = run_one(work[k]);
      else
        fut.push_back(std::async(std::launch::async, run_one, work[k]));
    }
    for (std::size_t k = 0; k < fut.size(); ++k) scores[start + k] = fut[k].get();
  }
  for (std::size_t k = 0; k < work.size(); ++k) {
    const auto pos = static_cast<std::size_t>(std::find(seeds.begin(), seeds.end(), work[k].seed) - seeds.begin());
    rep.rows[work[k].row].seed_f1[pos] = scores[k];
  }
  for (auto& r : rep.rows) r.median_f1 = median(r.seed_f1);
  if (seeds.size() >= 2) rep.full_vs_none = paired_t_test(rep.rows[3].seed_f1, rep.rows[0].seed_f1);
  return rep;
}

}  // namespace mtlcer
