#pragma once

// On-the-fly example generation, the joint BCE + length loss, the warm-up /
// linear-decay schedule and the training loop.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "encdot/checkpoint.hpp"
#include "encdot/confnet.hpp"
#include "encdot/detector.hpp"
#include "encdot/encoder.hpp"

namespace encdot {

struct Schedule {
  long warmup_steps = 2000;
  long total_steps = 18000;
  double peak_lr = 1e-4;

  void validate() const {
    if (warmup_steps < 0 || warmup_steps >= total_steps)
      throw Error("schedule: need 0 <= warmup (" + std::to_string(warmup_steps) + ") < total (" +
                  std::to_string(total_steps) + ")");
    if (!(peak_lr >= 0.0)) throw Error("schedule: peak learning rate must be >= 0");
  }
};

// Linear ramp 0 -> peak over the warm-up, then linear decay to 0 at total_steps.
inline double learning_rate(long step, const Schedule& s) {
  if (step <= 0) return 0.0;
  if (step >= s.total_steps) return 0.0;
  if (step <= s.warmup_steps) return s.peak_lr * static_cast<double>(step) / static_cast<double>(s.warmup_steps);
  return s.peak_lr * static_cast<double>(s.total_steps - step) / static_cast<double>(s.total_steps - s.warmup_steps);
}

struct TrainingExample {
  const ConfusionNetwork* network = nullptr;
  Window window;
  Query query;
  std::vector<float> labels;  // per slot
  std::vector<bool> padding;  // per slot
  double length_target = 0.0;
  bool merged = false;
  std::size_t corpus = 0;
};

struct SamplerConfig {
  std::size_t N = 256;
  std::size_t M = 16;
  double oov_merge_prob = 0.0;
  std::size_t max_merge = 3;
  std::size_t resample_budget = 10000;
};

// Slots whose time span overlaps [start, end] by more than half their own
// duration (zero-length slots: start inside the interval).
inline bool overlaps_majority(const Segment& seg, double start, double end) {
  if (seg.duration <= 0.0) return seg.start >= start && seg.start < end;
  return interval_overlap(seg.start, seg.end(), start, end) > 0.5 * seg.duration;
}

class ExampleSampler {
 public:
  ExampleSampler(std::vector<const Corpus*> corpora, std::vector<double> weights, const GraphemeInventory& inventory,
                 SamplerConfig config)
      : corpora_(std::move(corpora)), config_(config), pick_corpus_(weights.begin(), weights.end()) {
    if (corpora_.empty()) throw SamplingError("sampler needs at least one corpus");
    if (weights.size() != corpora_.size()) throw SamplingError("one mixing weight per corpus is required");
    for (const auto* corpus : corpora_) {
      auto& spelled = spelled_.emplace_back();
      for (const auto& rec : *corpus) {
        auto& words = spelled.emplace_back();
        for (const auto& w : rec.transcript.words) {
          if (!w.in_vocabulary) {
            words.emplace_back();
            continue;
          }
          words.push_back(inventory.tokenize(w.surface));
        }
      }
    }
  }

  TrainingExample sample(std::mt19937_64& rng) const {
    std::uniform_real_distribution<double> coin(0.0, 1.0);
    const bool merge = coin(rng) < config_.oov_merge_prob;
    for (std::size_t attempt = 0; attempt < config_.resample_budget; ++attempt) {
      const std::size_t c = pick_corpus_(rng);
      const auto& corpus = *corpora_[c];
      if (corpus.empty()) continue;
      const std::size_t u = std::uniform_int_distribution<std::size_t>(0, corpus.size() - 1)(rng);
      const auto& words = corpus[u].transcript.words;
      if (words.empty()) continue;
      const std::size_t first = std::uniform_int_distribution<std::size_t>(0, words.size() - 1)(rng);
      std::size_t count = 1;
      if (merge) count = std::uniform_int_distribution<std::size_t>(2, std::max<std::size_t>(2, config_.max_merge))(rng);
      if (auto ex = build(c, u, first, count, rng)) {
        ex->merged = merge;
        return std::move(*ex);
      }
    }
    throw SamplingError("could not sample a training example in " + std::to_string(config_.resample_budget) +
                        " attempts");
  }

 private:
  std::optional<TrainingExample> build(std::size_t c, std::size_t u, std::size_t first, std::size_t count,
                                       std::mt19937_64& rng) const {
    const auto& rec = (*corpora_[c])[u];
    const auto& words = rec.transcript.words;
    const auto& spelled = spelled_[c][u];
    if (first + count > words.size()) return std::nullopt;
    std::vector<GraphemeId> graphemes;
    for (std::size_t w = first; w < first + count; ++w) {
      if (!words[w].in_vocabulary) return std::nullopt;
      graphemes.insert(graphemes.end(), spelled[w].begin(), spelled[w].end());
    }
    if (graphemes.empty() || graphemes.size() > config_.M) return std::nullopt;

    const auto& segs = rec.network.segments;
    // Every occurrence of the same word sequence in the transcript is a positive.
    std::vector<std::pair<double, double>> occurrences;
    for (std::size_t s = 0; s + count <= words.size(); ++s) {
      bool same = true;
      for (std::size_t k = 0; k < count && same; ++k) same = words[s + k].surface == words[first + k].surface;
      if (same) occurrences.push_back({words[s].start, words[s + count - 1].end});
    }
    const double occ_start = words[first].start, occ_end = words[first + count - 1].end;
    std::size_t lo = segs.size(), hi = 0, own = 0;
    for (std::size_t i = 0; i < segs.size(); ++i)
      if (overlaps_majority(segs[i], occ_start, occ_end)) {
        lo = std::min(lo, i);
        hi = std::max(hi, i);
        ++own;
      }
    if (own == 0 || hi - lo + 1 > config_.N) return std::nullopt;

    const std::size_t earliest = hi + 1 >= config_.N ? hi + 1 - config_.N : 0;
    const std::size_t start = std::uniform_int_distribution<std::size_t>(earliest, lo)(rng);
    TrainingExample ex;
    ex.network = &rec.network;
    ex.window = {start, std::min(config_.N, segs.size() - start), config_.N};
    ex.query = Query{std::move(graphemes), rec.network.language};
    ex.length_target = static_cast<double>(own);
    ex.corpus = c;
    ex.labels.assign(config_.N, 0.0f);
    ex.padding.assign(config_.N, false);
    for (std::size_t slot = 0; slot < config_.N; ++slot) {
      if (ex.window.is_pad(slot)) {
        ex.padding[slot] = true;
        continue;
      }
      const auto& seg = segs[start + slot];
      for (const auto& [a, b] : occurrences)
        if (overlaps_majority(seg, a, b)) ex.labels[slot] = 1.0f;
    }
    return ex;
  }

  std::vector<const Corpus*> corpora_;
  std::vector<std::vector<std::vector<std::vector<GraphemeId>>>> spelled_;
  SamplerConfig config_;
  mutable std::discrete_distribution<std::size_t> pick_corpus_;
};

struct LossBreakdown {
  nn::Tensor total;
  double bce = 0.0;
  double length_mse = 0.0;
};

// mean over examples of [ mean BCE over non-PAD slots ] + lambda * mean (L_hat - L_target)^2.
// logits are [B*N x 1], length_hat [B x 1].
inline LossBreakdown compute_loss(const nn::Tensor& logits, const nn::Tensor& length_hat,
                                  const std::vector<TrainingExample>& batch, double lambda_len) {
  const std::size_t b = batch.size();
  if (b == 0) throw Error("compute_loss: empty batch");
  const std::size_t n = batch.front().labels.size();
  if (logits.size() != b * n || length_hat.size() != b)
    throw DimensionError("compute_loss: logits " + nn::shape_str(logits.shape()) + " / lengths " +
                         nn::shape_str(length_hat.shape()) + " do not match a batch of " + std::to_string(b));
  std::vector<float> targets(b * n), weights(b * n, 0.0f), len_targets(b), len_weights(b, 1.0f / static_cast<float>(b));
  for (std::size_t e = 0; e < b; ++e) {
    const auto& ex = batch[e];
    std::size_t valid = 0;
    for (std::size_t i = 0; i < n; ++i) valid += ex.padding[i] ? 0 : 1;
    for (std::size_t i = 0; i < n; ++i) {
      targets[e * n + i] = ex.labels[i];
      if (!ex.padding[i]) weights[e * n + i] = 1.0f / static_cast<float>(valid * b);
    }
    len_targets[e] = static_cast<float>(ex.length_target);
  }
  auto bce = nn::weighted_bce_with_logits(logits, std::move(targets), std::move(weights));
  auto mse = nn::weighted_squared_error(length_hat, std::move(len_targets), std::move(len_weights));
  LossBreakdown out;
  out.bce = bce.item();
  out.length_mse = mse.item();
  out.total = nn::add(bce, nn::scale(mse, static_cast<float>(lambda_len)));
  return out;
}

// Forward pass for a batch of examples: calibrated logits [B*N x 1] and L_hat [B x 1].
struct BatchOutputs {
  nn::Tensor logits;
  nn::Tensor length_hat;
};

inline BatchOutputs forward_batch(EncoderModel& model, const std::vector<TrainingExample>& batch, bool training) {
  std::vector<std::pair<const ConfusionNetwork*, Window>> windows;
  std::vector<Query> queries;
  for (const auto& ex : batch) {
    windows.push_back({ex.network, ex.window});
    queries.push_back(ex.query);
  }
  auto r = model.encode_hypothesis(make_hypothesis_input(windows, model.inventory()), training);
  auto q = model.encode_query(queries, training);
  return {model.segment_logits(r, q.embeddings), q.length};
}

struct CorpusSource {
  std::string path;
  double weight = 1.0;
};

struct TrainConfig {
  std::uint64_t seed = 1;
  Schedule schedule;
  long steps = -1;  // negative: run the whole schedule
  std::size_t batch_size = 8;
  double oov_merge_prob = 0.3;
  double lambda_len = 0.1;
  std::vector<CorpusSource> corpora;
  std::string inventory;
  std::string checkpoint_dir;
  long checkpoint_interval = 0;
  long log_interval = 100;
  EncoderConfig encoder;

  long effective_steps() const { return steps < 0 ? schedule.total_steps : steps; }

  friend void to_json(nlohmann::json& j, const TrainConfig& c) {
    nlohmann::json corpora = nlohmann::json::array();
    for (const auto& s : c.corpora) corpora.push_back({{"path", s.path}, {"weight", s.weight}});
    j = {{"seed", c.seed},
         {"schedule",
          {{"warmup_steps", c.schedule.warmup_steps},
           {"total_steps", c.schedule.total_steps},
           {"peak_lr", c.schedule.peak_lr}}},
         {"steps", c.steps},
         {"batch_size", c.batch_size},
         {"oov_merge_prob", c.oov_merge_prob},
         {"lambda_len", c.lambda_len},
         {"corpora", corpora},
         {"inventory", c.inventory},
         {"checkpoint_dir", c.checkpoint_dir},
         {"checkpoint_interval", c.checkpoint_interval},
         {"log_interval", c.log_interval},
         {"encoder", c.encoder}};
  }

  friend void from_json(const nlohmann::json& j, TrainConfig& c) {
    TrainConfig d;
    c.seed = j.value("seed", d.seed);
    if (j.contains("schedule")) {
      const auto& s = j.at("schedule");
      c.schedule.warmup_steps = s.value("warmup_steps", d.schedule.warmup_steps);
      c.schedule.total_steps = s.value("total_steps", d.schedule.total_steps);
      c.schedule.peak_lr = s.value("peak_lr", d.schedule.peak_lr);
    }
    c.steps = j.value("steps", d.steps);
    c.batch_size = j.value("batch_size", d.batch_size);
    c.oov_merge_prob = j.value("oov_merge_prob", d.oov_merge_prob);
    c.lambda_len = j.value("lambda_len", d.lambda_len);
    c.corpora.clear();
    if (j.contains("corpora"))
      for (const auto& e : j.at("corpora")) {
        if (e.is_string())
          c.corpora.push_back({e.get<std::string>(), 1.0});
        else
          c.corpora.push_back({e.at("path").get<std::string>(), e.value("weight", 1.0)});
      }
    c.inventory = j.value("inventory", d.inventory);
    c.checkpoint_dir = j.value("checkpoint_dir", d.checkpoint_dir);
    c.checkpoint_interval = j.value("checkpoint_interval", d.checkpoint_interval);
    c.log_interval = j.value("log_interval", d.log_interval);
    if (j.contains("encoder")) c.encoder = j.at("encoder").get<EncoderConfig>();
  }
};

struct TrainProgress {
  long step = 0;
  double loss = 0.0;
  double smoothed = 0.0;
  double bce = 0.0;
  double length_mse = 0.0;
  double lr = 0.0;
};

struct TrainResult {
  std::vector<double> losses;
  std::vector<std::string> checkpoints;
  long steps_run = 0;
};

// sample -> forward -> loss -> backward -> Adam, for config.effective_steps()
// steps. Deterministic for a fixed seed. With a checkpoint directory, writes
// step-0 before training, every checkpoint_interval steps, and the final step.
inline TrainResult train(EncoderModel& model, const std::vector<const Corpus*>& corpora,
                         const std::vector<double>& weights, const TrainConfig& cfg,
                         const std::function<void(const TrainProgress&)>& on_log = {}) {
  cfg.schedule.validate();
  if (cfg.batch_size == 0) throw Error("train: batch size must be >= 1");
  SamplerConfig sc;
  sc.N = static_cast<std::size_t>(model.config().N);
  sc.M = static_cast<std::size_t>(model.config().M);
  sc.oov_merge_prob = cfg.oov_merge_prob;
  ExampleSampler sampler(corpora, weights, model.inventory(), sc);

  TrainerState state{nn::AdamState::for_parameters(model.parameters()), 0, std::mt19937_64(cfg.seed ^ 0x5eedULL)};
  TrainResult result;
  auto checkpoint = [&](const std::string& name) {
    if (cfg.checkpoint_dir.empty()) return;
    std::filesystem::create_directories(cfg.checkpoint_dir);
    const std::string path = (std::filesystem::path(cfg.checkpoint_dir) / name).string();
    save_checkpoint(path, model, &state);
    result.checkpoints.push_back(path);
  };
  checkpoint("step-0.ckpt");

  const long steps = cfg.effective_steps();
  double smoothed = 0.0;
  model.parameters().zero_grad();
  for (long step = 1; step <= steps; ++step) {
    std::vector<TrainingExample> batch;
    for (std::size_t i = 0; i < cfg.batch_size; ++i) batch.push_back(sampler.sample(state.sampler_rng));
    const auto out = forward_batch(model, batch, true);
    auto loss = compute_loss(out.logits, out.length_hat, batch, cfg.lambda_len);
    const double value = loss.total.item();
    if (!std::isfinite(value)) {
      checkpoint("nan-step-" + std::to_string(step) + ".ckpt");
      throw TrainingError("non-finite loss at step " + std::to_string(step), step);
    }
    loss.total.backward();
    const double lr = learning_rate(step, cfg.schedule);
    nn::adam_step(model.parameters(), state.adam, lr);
    state.step = step;
    result.losses.push_back(value);
    smoothed = step == 1 ? value : 0.98 * smoothed + 0.02 * value;
    if (on_log && cfg.log_interval > 0 && (step % cfg.log_interval == 0 || step == steps))
      on_log({step, value, smoothed, loss.bce, loss.length_mse, lr});
    if (cfg.checkpoint_interval > 0 && step % cfg.checkpoint_interval == 0 && step != steps)
      checkpoint("step-" + std::to_string(step) + ".ckpt");
  }
  result.steps_run = steps;
  if (steps > 0) checkpoint("step-" + std::to_string(steps) + ".ckpt");
  return result;
}

}  // namespace encdot
