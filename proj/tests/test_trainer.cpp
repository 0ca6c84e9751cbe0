#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <set>

#include "encdot/synth.hpp"
#include "encdot/trainer.hpp"

using namespace encdot;
namespace fs = std::filesystem;

namespace {

SynthData small_data(std::vector<std::string> languages = {"la"}) {
  SynthConfig c;
  c.languages = std::move(languages);
  c.utterances = 40;
  c.lexicon_size = 20;
  return gen_synthetic(c);
}

EncoderConfig small_encoder(int n = 32) {
  EncoderConfig c;
  c.layers = 1;
  c.heads = 2;
  c.d_model = 16;
  c.d_ff = 32;
  c.N = n;
  return c;
}

TEST(Schedule, Examples) {
  const Schedule s;
  EXPECT_EQ(learning_rate(0, s), 0.0);
  EXPECT_DOUBLE_EQ(learning_rate(2000, s), 1e-4);
  EXPECT_DOUBLE_EQ(learning_rate(1000, s), 5e-5);
  EXPECT_DOUBLE_EQ(learning_rate(2000 + 8000, s), 5e-5);
  EXPECT_EQ(learning_rate(18000, s), 0.0);
  EXPECT_EQ(learning_rate(25000, s), 0.0);

  const Schedule full_scale{80000, 800000, 1e-4};
  EXPECT_DOUBLE_EQ(learning_rate(80000, full_scale), 1e-4);
  EXPECT_DOUBLE_EQ(learning_rate(80000 + 360000, full_scale), 5e-5);
}

TEST(Schedule, ContinuousPiecewiseLinearWithExactPeak) {
  const Schedule s{300, 1000, 3e-4};
  double peak = 0.0;
  for (long step = 0; step <= 1100; ++step) {
    const double lr = learning_rate(step, s);
    peak = std::max(peak, lr);
    EXPECT_LE(std::abs(lr - learning_rate(step + 1, s)), 3e-4 / 300 + 1e-15);
    if (step > 0 && step < 1000 && step != 300) {
      // Second differences vanish away from the two kinks.
      const double second = learning_rate(step + 1, s) - 2 * lr + learning_rate(step - 1, s);
      EXPECT_NEAR(second, 0.0, 1e-15);
    }
  }
  EXPECT_EQ(peak, 3e-4);
  EXPECT_THROW((Schedule{10, 10, 1e-4}.validate()), Error);
}

CorpusRecord one_word_record(const GraphemeInventory& inv) {
  CorpusRecord rec;
  rec.network.utterance = "solo";
  rec.network.language = "la";
  const auto ids = inv.tokenize("abc");
  for (std::size_t i = 0; i < ids.size(); ++i) rec.network.segments.push_back({{{ids[i], 1.0}}, 0.1 * i, 0.1});
  rec.transcript.words.push_back({"abc", 0.0, 0.3, true});
  return rec;
}

TEST(Sampler, SingleWordUtterance) {
  const auto inv = GraphemeInventory::from_languages({{"la", {"a", "b", "c"}}});
  const Corpus corpus = {one_word_record(inv)};
  SamplerConfig cfg;
  cfg.N = 8;
  ExampleSampler sampler({&corpus}, {1.0}, inv, cfg);
  std::mt19937_64 rng(1);
  const auto ex = sampler.sample(rng);
  EXPECT_EQ(inv.spell(ex.query.graphemes), "abc");
  EXPECT_EQ(ex.window.first, 0u);
  EXPECT_EQ(ex.length_target, 3.0);
  const std::vector<float> labels = {1, 1, 1, 0, 0, 0, 0, 0};
  EXPECT_EQ(ex.labels, labels);
  for (std::size_t i = 0; i < 8; ++i) EXPECT_EQ(ex.padding[i], i >= 3);
}

TEST(Sampler, NoMergingGivesTranscriptWords) {
  const auto data = small_data();
  std::set<std::string> vocab;
  for (const auto& rec : data.train.corpus)
    for (const auto& w : rec.transcript.words) vocab.insert(w.surface);
  SamplerConfig cfg;
  cfg.N = 32;
  ExampleSampler sampler({&data.train.corpus}, {1.0}, data.inventory, cfg);
  std::mt19937_64 rng(2);
  for (int i = 0; i < 500; ++i) {
    const auto ex = sampler.sample(rng);
    EXPECT_FALSE(ex.merged);
    EXPECT_TRUE(vocab.count(data.inventory.spell(ex.query.graphemes)));
  }
}

// Labels come from time overlap alone: recompute them from the transcript.
TEST(Sampler, LabelsFollowMajorityOverlap) {
  const auto data = small_data();
  SamplerConfig cfg;
  cfg.N = 32;
  cfg.oov_merge_prob = 0.5;
  ExampleSampler sampler({&data.train.corpus}, {1.0}, data.inventory, cfg);
  std::mt19937_64 rng(3);
  for (int i = 0; i < 300; ++i) {
    const auto ex = sampler.sample(rng);
    const std::string text = data.inventory.spell(ex.query.graphemes);
    EXPECT_LE(ex.query.graphemes.size(), cfg.M);
    const CorpusRecord* rec = nullptr;
    for (const auto& r : data.train.corpus)
      if (&r.network == ex.network) rec = &r;
    ASSERT_NE(rec, nullptr);
    // Spans of every word run spelling the query.
    std::vector<std::pair<double, double>> spans;
    const auto& ws = rec->transcript.words;
    for (std::size_t s = 0; s < ws.size(); ++s) {
      std::string acc;
      for (std::size_t e = s; e < ws.size() && acc.size() < text.size(); ++e) {
        acc += ws[e].surface;
        if (acc == text && (e > s) == ex.merged) spans.push_back({ws[s].start, ws[e].end});
      }
    }
    ASSERT_FALSE(spans.empty());
    bool own_inside = false;
    for (std::size_t slot = 0; slot < cfg.N; ++slot) {
      if (ex.padding[slot]) {
        EXPECT_EQ(ex.labels[slot], 0.0f);
        continue;
      }
      const auto& seg = ex.network->segments[ex.window.first + slot];
      bool positive = false;
      for (const auto& [a, b] : spans) {
        const double ov = std::min(seg.end(), b) - std::max(seg.start, a);
        positive = positive || ov > 0.5 * seg.duration;
      }
      EXPECT_EQ(ex.labels[slot], positive ? 1.0f : 0.0f);
    }
    // The sampled occurrence lies fully in the window, so L_target segments are labelled.
    double labelled = 0;
    for (float l : ex.labels) labelled += l;
    own_inside = labelled >= ex.length_target;
    EXPECT_TRUE(own_inside);
    EXPECT_GE(ex.length_target, static_cast<double>(ex.query.graphemes.size()));
  }
}

TEST(Sampler, MergedFractionMatchesProbability) {
  const auto data = small_data();
  SamplerConfig cfg;
  cfg.N = 64;
  cfg.oov_merge_prob = 0.3;
  ExampleSampler sampler({&data.train.corpus}, {1.0}, data.inventory, cfg);
  std::mt19937_64 rng(4);
  int merged = 0;
  for (int i = 0; i < 10000; ++i) merged += sampler.sample(rng).merged;
  EXPECT_NEAR(merged / 10000.0, 0.3, 0.02);
}

TEST(Sampler, MultilingualMixFollowsWeights) {
  const auto data = small_data({"la", "gr"});
  Corpus la, gr;
  for (const auto& rec : data.train.corpus) (rec.network.language == "la" ? la : gr).push_back(rec);
  SamplerConfig cfg;
  cfg.N = 64;
  ExampleSampler sampler({&la, &gr}, {1.0, 3.0}, data.inventory, cfg);
  std::mt19937_64 rng(5);
  const int n = 8000;
  int second = 0;
  for (int i = 0; i < n; ++i) {
    const auto ex = sampler.sample(rng);
    second += ex.corpus == 1;
    EXPECT_EQ(ex.query.language, ex.corpus == 1 ? "gr" : "la");
  }
  // Four standard deviations of a binomial(n, 0.75).
  EXPECT_NEAR(second / double(n), 0.75, 4 * std::sqrt(0.75 * 0.25 / n));
}

TEST(Sampler, ExhaustedBudgetIsSamplingError) {
  const auto inv = GraphemeInventory::from_languages({{"la", {"a", "b", "c"}}});
  const Corpus corpus = {one_word_record(inv)};
  SamplerConfig cfg;
  cfg.N = 8;
  cfg.M = 2;
  cfg.resample_budget = 50;
  ExampleSampler sampler({&corpus}, {1.0}, inv, cfg);
  std::mt19937_64 rng(1);
  EXPECT_THROW(sampler.sample(rng), SamplingError);
  EXPECT_THROW(ExampleSampler({}, {}, inv, cfg), SamplingError);
}

TrainingExample fake_example(std::size_t n, std::size_t valid, std::mt19937_64& rng) {
  TrainingExample ex;
  ex.labels.assign(n, 0.0f);
  ex.padding.assign(n, false);
  std::bernoulli_distribution coin(0.3);
  for (std::size_t i = 0; i < n; ++i) {
    ex.padding[i] = i >= valid;
    if (i < valid) ex.labels[i] = coin(rng) ? 1.0f : 0.0f;
  }
  ex.length_target = static_cast<double>(1 + rng() % 9);
  return ex;
}

TEST(Loss, HalfProbabilityIsLn2) {
  std::mt19937_64 rng(6);
  const std::vector<TrainingExample> batch = {fake_example(8, 5, rng), fake_example(8, 8, rng)};
  nn::Tensor logits({16, 1}), length({2, 1});
  length.data()[0] = static_cast<float>(batch[0].length_target);
  length.data()[1] = static_cast<float>(batch[1].length_target);
  const auto loss = compute_loss(logits, length, batch, 0.1);
  EXPECT_NEAR(loss.bce, std::log(2.0), 1e-6);
  EXPECT_NEAR(loss.total.item(), std::log(2.0), 1e-6);
}

TEST(Loss, NearPerfectPredictionsGiveNearZero) {
  std::mt19937_64 rng(7);
  const std::vector<TrainingExample> batch = {fake_example(8, 6, rng)};
  nn::Tensor logits({8, 1}), length({1, 1}, {static_cast<float>(batch[0].length_target)});
  for (std::size_t i = 0; i < 8; ++i) logits.data()[i] = batch[0].labels[i] > 0 ? 20.0f : -20.0f;
  EXPECT_LT(compute_loss(logits, length, batch, 0.1).total.item(), 1e-6);
}

TEST(Loss, MatchesScalarOracle) {
  std::mt19937_64 rng(8);
  std::normal_distribution<float> normal(0.0f, 2.0f);
  for (int c = 0; c < 50; ++c) {
    const std::size_t n = 4 + c % 13, b = 1 + c % 4;
    std::vector<TrainingExample> batch;
    for (std::size_t e = 0; e < b; ++e) batch.push_back(fake_example(n, 1 + (e + c) % n, rng));
    nn::Tensor logits({b * n, 1}), length({b, 1});
    for (auto& v : logits.data()) v = normal(rng);
    for (auto& v : length.data()) v = 5.0f + normal(rng);
    const double lambda = 0.1 * (1 + c % 3);
    double expect = 0.0;
    for (std::size_t e = 0; e < b; ++e) {
      double sum = 0.0;
      int valid = 0;
      for (std::size_t i = 0; i < n; ++i) {
        if (batch[e].padding[i]) continue;
        const double p = 1.0 / (1.0 + std::exp(-double(logits.data()[e * n + i])));
        const double y = batch[e].labels[i];
        sum -= y * std::log(p) + (1 - y) * std::log(1 - p);
        ++valid;
      }
      const double dl = double(length.data()[e]) - batch[e].length_target;
      expect += sum / valid + lambda * dl * dl;
    }
    expect /= static_cast<double>(b);
    const double got = compute_loss(logits, length, batch, lambda).total.item();
    EXPECT_NEAR(got, expect, 1e-6 * std::max(1.0, std::abs(expect)));
  }
}

TEST(Train, ZeroStepsWritesOnlyInitialCheckpoint) {
  const auto data = small_data();
  const auto dir = fs::temp_directory_path() / "encdot_train_zero";
  fs::remove_all(dir);
  EncoderModel model(small_encoder(), data.inventory, 1);
  TrainConfig cfg;
  cfg.steps = 0;
  cfg.checkpoint_dir = dir.string();
  const auto result = train(model, {&data.train.corpus}, {1.0}, cfg);
  EXPECT_EQ(result.steps_run, 0);
  EXPECT_TRUE(result.losses.empty());
  ASSERT_EQ(result.checkpoints.size(), 1u);
  EXPECT_EQ(fs::path(result.checkpoints[0]).filename(), "step-0.ckpt");
  EXPECT_EQ(std::distance(fs::directory_iterator(dir), fs::directory_iterator()), 1);
  fs::remove_all(dir);
}

TEST(Train, DeterministicForSeed) {
  const auto data = small_data();
  TrainConfig cfg;
  cfg.steps = 20;
  cfg.batch_size = 4;
  cfg.schedule = {5, 100, 1e-3};
  auto run = [&](std::uint64_t seed) {
    EncoderModel model(small_encoder(), data.inventory, 3);
    auto c = cfg;
    c.seed = seed;
    return train(model, {&data.train.corpus}, {1.0}, c).losses;
  };
  const auto a = run(1), b = run(1), c = run(2);
  ASSERT_EQ(a.size(), 20u);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i], b[i]);
  EXPECT_NE(a, c);
}

TEST(Train, SmoothedLossDecreases) {
  SynthConfig sc;
  sc.utterances = 20;
  sc.lexicon_size = 10;
  const auto data = gen_synthetic(sc);
  EncoderModel model(small_encoder(), data.inventory, 4);
  TrainConfig cfg;
  cfg.steps = 200;
  cfg.batch_size = 4;
  cfg.schedule = {20, 200, 3e-3};
  cfg.log_interval = 1;
  std::vector<double> smoothed;
  train(model, {&data.train.corpus}, {1.0}, cfg, [&](const TrainProgress& p) { smoothed.push_back(p.smoothed); });
  ASSERT_EQ(smoothed.size(), 200u);
  EXPECT_LT(smoothed.back(), smoothed[9]);
}

TEST(Train, OverfitsSingleExample) {
  const auto data = small_data();
  SamplerConfig sc;
  sc.N = 32;
  ExampleSampler sampler({&data.train.corpus}, {1.0}, data.inventory, sc);
  std::mt19937_64 rng(9);
  const std::vector<TrainingExample> batch = {sampler.sample(rng)};
  auto ec = small_encoder();
  ec.dropout = 0.0;
  EncoderModel model(ec, data.inventory, 5);
  auto adam = nn::AdamState::for_parameters(model.parameters());
  model.parameters().zero_grad();
  double loss = 0.0;
  for (int step = 1; step <= 500; ++step) {
    const auto out = forward_batch(model, batch, true);
    auto l = compute_loss(out.logits, out.length_hat, batch, 0.1);
    loss = l.total.item();
    l.total.backward();
    nn::adam_step(model.parameters(), adam, 3e-3);
  }
  EXPECT_LT(loss, 0.01);
}

TEST(Train, EveryParameterReceivesGradient) {
  const auto data = small_data();
  auto ec = small_encoder();
  EncoderModel model(ec, data.inventory, 6);
  SamplerConfig sc;
  sc.N = 32;
  sc.oov_merge_prob = 0.3;
  ExampleSampler sampler({&data.train.corpus}, {1.0}, data.inventory, sc);
  std::mt19937_64 rng(10);
  std::vector<bool> seen(model.parameters().size(), false);
  for (int b = 0; b < 3; ++b) {
    std::vector<TrainingExample> batch;
    for (int i = 0; i < 8; ++i) batch.push_back(sampler.sample(rng));
    model.parameters().zero_grad();
    const auto out = forward_batch(model, batch, true);
    compute_loss(out.logits, out.length_hat, batch, 0.1).total.backward();
    for (std::size_t i = 0; i < model.parameters().size(); ++i) {
      const auto& p = model.parameters()[i];
      if (!p.has_grad()) continue;
      for (float g : p.grad()) seen[i] = seen[i] || g != 0.0f;
    }
  }
  for (std::size_t i = 0; i < seen.size(); ++i) EXPECT_TRUE(seen[i]) << model.parameters().name(i);
}

TEST(Train, NonFiniteLossAbortsWithCheckpoint) {
  const auto data = small_data();
  const auto dir = fs::temp_directory_path() / "encdot_train_nan";
  fs::remove_all(dir);
  EncoderModel model(small_encoder(), data.inventory, 7);
  model.parameters().at("calib.alpha").data()[0] = std::nanf("");
  TrainConfig cfg;
  cfg.steps = 5;
  cfg.checkpoint_dir = dir.string();
  try {
    train(model, {&data.train.corpus}, {1.0}, cfg);
    FAIL();
  } catch (const TrainingError& e) {
    EXPECT_EQ(e.step(), 1);
  }
  EXPECT_TRUE(fs::exists(dir / "nan-step-1.ckpt"));
  fs::remove_all(dir);
}

TEST(Train, ConfigJsonRoundTrip) {
  TrainConfig cfg;
  cfg.corpora = {{"a.jsonl", 1.0}, {"b.jsonl", 2.5}};
  cfg.schedule.peak_lr = 3e-4;
  cfg.encoder.layers = 2;
  const auto back = nlohmann::json(cfg).get<TrainConfig>();
  ASSERT_EQ(back.corpora.size(), 2u);
  EXPECT_EQ(back.corpora[1].weight, 2.5);
  EXPECT_EQ(back.schedule.peak_lr, 3e-4);
  EXPECT_EQ(back.encoder.layers, 2);
  const auto plain = nlohmann::json::parse(R"({"corpora": ["x.jsonl"], "steps": 7})").get<TrainConfig>();
  EXPECT_EQ(plain.corpora[0].path, "x.jsonl");
  EXPECT_EQ(plain.effective_steps(), 7);
  EXPECT_EQ(TrainConfig{}.effective_steps(), 18000);
}

}  // namespace
