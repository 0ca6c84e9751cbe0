// encdot: synthetic data generation, training, search, evaluation and
// parameter accounting from the command line.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "encdot/encdot.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

enum Exit { kOk = 0, kUsage = 1, kData = 2, kRuntime = 3 };

json read_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw encdot::DataError("cannot open config '" + path + "'");
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw encdot::DataError("config '" + path + "': " + e.what());
  }
}

void write_json(const std::string& path, const json& j) {
  if (auto dir = fs::path(path).parent_path(); !dir.empty()) fs::create_directories(dir);
  std::ofstream out(path);
  if (!out) throw encdot::DataError("cannot write '" + path + "'");
  out << j.dump(2) << '\n';
}

struct GenArgs {
  std::string config, out;
  long long seed = -1;
};

int run_gen(const GenArgs& a) {
  encdot::SynthConfig cfg;
  if (!a.config.empty()) cfg = read_json(a.config).get<encdot::SynthConfig>();
  if (a.seed >= 0) cfg.seed = static_cast<std::uint64_t>(a.seed);
  const auto data = encdot::gen_synthetic(cfg);
  const auto files = encdot::write_synthetic(data, a.out);
  write_json((fs::path(a.out) / "synth_config.resolved.json").string(), cfg);
  std::cout << "wrote " << files.size() << " files to " << a.out << " (" << data.train.corpus.size() << " train, "
            << data.dev.corpus.size() << " dev, " << data.test.corpus.size() << " test utterances)\n";
  return kOk;
}

struct TrainArgs {
  std::string config, out;
  long long seed = -1;
  long steps = -2;
};

int run_train(const TrainArgs& a) {
  auto cfg = read_json(a.config).get<encdot::TrainConfig>();
  if (a.seed >= 0) cfg.seed = static_cast<std::uint64_t>(a.seed);
  if (a.steps >= -1) cfg.steps = a.steps;
  const auto base = fs::path(a.config).parent_path();
  auto resolve = [&](const std::string& p) { return fs::path(p).is_absolute() ? p : (base / p).string(); };
  if (!a.out.empty())
    cfg.checkpoint_dir = a.out;
  else if (!cfg.checkpoint_dir.empty())
    cfg.checkpoint_dir = resolve(cfg.checkpoint_dir);
  if (cfg.checkpoint_dir.empty()) throw encdot::Error("train: no checkpoint directory (set checkpoint_dir or --out)");
  if (cfg.inventory.empty()) throw encdot::Error("train: config needs an 'inventory' path");
  if (cfg.corpora.empty()) throw encdot::Error("train: config lists no corpora");

  const auto inventory = encdot::GraphemeInventory::load(resolve(cfg.inventory));
  std::vector<encdot::Corpus> corpora;
  std::vector<double> weights;
  for (const auto& src : cfg.corpora) {
    corpora.push_back(encdot::load_corpus(resolve(src.path), inventory));
    weights.push_back(src.weight);
  }
  std::vector<const encdot::Corpus*> ptrs;
  for (const auto& c : corpora) ptrs.push_back(&c);
  if (cfg.encoder.languages.empty()) cfg.encoder.languages = inventory.languages();

  fs::create_directories(cfg.checkpoint_dir);
  write_json((fs::path(cfg.checkpoint_dir) / "train_config.resolved.json").string(), cfg);
  encdot::EncoderModel model(cfg.encoder, inventory, cfg.seed);
  std::ofstream log((fs::path(cfg.checkpoint_dir) / "loss.tsv").string());
  log << "step\tloss\tsmoothed\tbce\tlength_mse\tlr\n";
  const auto result = encdot::train(model, ptrs, weights, cfg, [&](const encdot::TrainProgress& p) {
    log << p.step << '\t' << p.loss << '\t' << p.smoothed << '\t' << p.bce << '\t' << p.length_mse << '\t' << p.lr
        << '\n';
    std::printf("step %7ld  loss %.5f  (avg %.5f, bce %.5f, len %.4f)  lr %.3g\n", p.step, p.loss, p.smoothed, p.bce,
                p.length_mse, p.lr);
    std::fflush(stdout);
  });
  std::cout << "trained " << result.steps_run << " steps; final checkpoint " << result.checkpoints.back() << '\n';
  return kOk;
}

struct SearchArgs {
  std::string checkpoint, corpus, queries, out;
  double threshold = 0.5, length_scale = 1.0;
  long overlap = -1;
};

int run_search(const SearchArgs& a) {
  const auto ck = encdot::load_checkpoint(a.checkpoint);
  const auto model = ck.model();
  const auto terms = encdot::read_terms(a.queries);
  std::ofstream out(a.out);
  if (!out) throw encdot::DataError("cannot write hit file '" + a.out + "'");
  if (terms.empty()) return kOk;
  const auto corpus = encdot::load_corpus(a.corpus, ck.inventory);
  encdot::SearchOptions opts;
  opts.threshold = a.threshold;
  opts.length_scale = a.length_scale;
  opts.overlap = a.overlap;
  const encdot::HypothesisIndex index(model, corpus, opts);
  std::size_t total = 0;
  for (const auto& t : terms) {
    const auto hits =
        encdot::search(model, index, encdot::term_query(t, ck.inventory, static_cast<std::size_t>(ck.config.M)), t.id, opts);
    encdot::write_hits(out, hits);
    total += hits.size();
  }
  std::cout << total << " hits for " << terms.size() << " queries written to " << a.out << '\n';
  return kOk;
}

struct EvalArgs {
  std::string hits, refs, corpus, inventory, out, det;
  double speech_seconds = 0.0, threshold = 0.5;
};

int run_eval(const EvalArgs& a) {
  encdot::TwvConfig cfg;
  cfg.total_speech_seconds = a.speech_seconds;
  if (!a.corpus.empty()) {
    if (a.inventory.empty()) throw encdot::Error("eval: --corpus needs --inventory");
    cfg.total_speech_seconds = encdot::speech_seconds(encdot::load_corpus(a.corpus, encdot::GraphemeInventory::load(a.inventory)));
  }
  const auto hits = encdot::read_hits(a.hits);
  const auto refs = encdot::read_refs(a.refs);
  const auto report = encdot::evaluate(hits, refs, cfg, a.threshold);
  const auto j = encdot::to_json(report, cfg);
  if (!a.out.empty()) write_json(a.out, j);
  if (!a.det.empty()) {
    std::ofstream det(a.det);
    det << "threshold,p_miss,p_fa\n";
    for (const auto& p : encdot::det_curve(hits, refs, cfg)) det << p.threshold << ',' << p.p_miss << ',' << p.p_fa << '\n';
  }
  std::printf("ATWV %.4f @ %.3f   MTWV %.4f @ %.4f   (%zu queries with references)\n", report.atwv,
              report.atwv_threshold, report.mtwv, report.mtwv_threshold,
              static_cast<std::size_t>(std::count_if(report.per_query.begin(), report.per_query.end(),
                                                     [](const auto& q) { return q.second.n_ref > 0; })));
  return kOk;
}

struct ParamsArgs {
  std::string config;
  std::size_t vocab = 0;
};

int run_params(const ParamsArgs& a) {
  encdot::EncoderConfig cfg = encdot::EncoderConfig::bert_mini();
  if (!a.config.empty()) {
    auto j = read_json(a.config);
    cfg = (j.contains("encoder") ? j.at("encoder") : j).get<encdot::EncoderConfig>();
  }
  cfg.validate();
  const std::size_t vocab = a.vocab ? a.vocab : 56;
  const auto shared = encdot::count_params(cfg, vocab, true);
  const auto separated = encdot::count_params(cfg, vocab, false);
  std::printf("layers %d  heads %d  d_model %d  d_ff %d  vocab %zu\n", cfg.layers, cfg.heads, cfg.d_model, cfg.d_ff, vocab);
  std::printf("%-28s %12zu\n", "transformer stack", encdot::transformer_param_count(cfg));
  std::printf("%-28s %12zu\n", "separated transformers", separated);
  std::printf("%-28s %12zu\n", "shared transformer", shared);
  std::printf("%-28s %12zu\n", "separated - shared", separated - shared);
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"encoder-encoder spoken term detection"};
  app.require_subcommand(1);

  GenArgs gen;
  auto* g = app.add_subcommand("gen", "generate a synthetic corpus with term lists");
  g->add_option("-c,--config", gen.config, "synthesis config (JSON)")->check(CLI::ExistingFile);
  g->add_option("-o,--out", gen.out, "output directory")->required();
  g->add_option("--seed", gen.seed, "override the config seed");

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "train a model");
  t->add_option("-c,--config", tr.config, "training config (JSON)")->required()->check(CLI::ExistingFile);
  t->add_option("-o,--out", tr.out, "checkpoint directory (overrides checkpoint_dir)");
  t->add_option("--seed", tr.seed, "override the config seed");
  t->add_option("--steps", tr.steps, "number of steps (-1: full schedule)");

  SearchArgs se;
  auto* s = app.add_subcommand("search", "search a corpus for a query list");
  s->add_option("-m,--checkpoint", se.checkpoint, "model checkpoint")->required()->check(CLI::ExistingFile);
  s->add_option("--corpus", se.corpus, "corpus JSONL")->required();
  s->add_option("-q,--queries", se.queries, "query list JSONL")->required()->check(CLI::ExistingFile);
  s->add_option("-o,--out", se.out, "hit list JSONL")->required();
  s->add_option("-t,--threshold", se.threshold, "per-segment probability threshold");
  s->add_option("--length-scale", se.length_scale, "scale applied to the regressed query length");
  s->add_option("--overlap", se.overlap, "window overlap in segments (default N/4)");

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "score a hit list against references");
  e->add_option("--hits", ev.hits, "hit list JSONL")->required()->check(CLI::ExistingFile);
  e->add_option("--refs", ev.refs, "reference JSONL")->required()->check(CLI::ExistingFile);
  auto* speech = e->add_option("--speech-seconds", ev.speech_seconds, "total seconds of searched speech");
  auto* corpus = e->add_option("--corpus", ev.corpus, "searched corpus (to measure speech seconds)");
  e->add_option("--inventory", ev.inventory, "inventory for --corpus");
  speech->excludes(corpus);
  e->add_option("-t,--threshold", ev.threshold, "decision threshold for ATWV");
  e->add_option("-o,--out", ev.out, "report JSON");
  e->add_option("--det", ev.det, "DET points CSV");

  ParamsArgs pa;
  auto* p = app.add_subcommand("params", "parameter counts for shared and separated transformers");
  p->add_option("-c,--config", pa.config, "encoder or training config (JSON); default BERT-Mini");
  p->add_option("--vocab", pa.vocab, "input inventory size including specials");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*g) return run_gen(gen);
    if (*t) return run_train(tr);
    if (*s) return run_search(se);
    if (*e) {
      if (ev.corpus.empty() && !(ev.speech_seconds > 0.0)) {
        std::cerr << "eval: give --speech-seconds or --corpus\n";
        return kUsage;
      }
      return run_eval(ev);
    }
    if (*p) return run_params(pa);
  } catch (const encdot::DataError& err) {
    std::cerr << "data error: " << err.what() << '\n';
    return kData;
  } catch (const encdot::CheckpointError& err) {
    std::cerr << "checkpoint error: " << err.what() << '\n';
    return kData;
  } catch (const encdot::TrainingError& err) {
    std::cerr << "training failed at step " << err.step() << ": " << err.what() << '\n';
    return kRuntime;
  } catch (const encdot::SamplingError& err) {
    std::cerr << "sampling error: " << err.what() << '\n';
    return kRuntime;
  } catch (const encdot::Error& err) {
    std::cerr << "invalid input: " << err.what() << '\n';
    return kData;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << '\n';
    return kRuntime;
  }
  return kUsage;
}
