#pragma once

// Synthetic recognition corpora: a random lexicon per language, utterances
// sampled from it, and confusion networks obtained by corrupting the true
// grapheme string with an independent per-segment noise model.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "encdot/confnet.hpp"
#include "encdot/metrics.hpp"

namespace encdot {

struct NoiseModel {
  double substitution_prob = 0.1;
  int max_alternatives = 3;       // per segment, including the top one
  double alternative_prob = 0.3;  // chance a clean segment gets extra alternatives
  double concentration = 6.0;     // Dirichlet weight of the top alternative
  double substitution_concentration = 1.0;  // same, for substituted segments
  double eps_insertion_prob = 0.0;
  double timing_jitter = 0.2;     // relative jitter on grapheme durations

  bool silent() const { return substitution_prob == 0.0 && alternative_prob == 0.0 && eps_insertion_prob == 0.0; }
};

struct SynthConfig {
  std::uint64_t seed = 7;
  std::vector<std::string> languages{"la"};
  int inventory_size = 20;
  int lexicon_size = 50;
  int word_min = 3, word_max = 7;
  int min_word_distance = 2;  // graphemes by which any two lexicon words differ at every alignment
  int words_min = 20, words_max = 40;
  int utterances = 200;  // per language
  double grapheme_seconds = 0.08;
  double pause_seconds = 0.15;
  double eps_seconds = 0.02;
  NoiseModel noise;
  double dev_fraction = 0.1;
  double test_fraction = 0.2;
  int iv_terms = 50;   // per language and split, at most
  int oov_terms = 30;  // merged consecutive-word terms, per language and split

  void validate() const {
    auto prob = [](double p, const char* what) {
      if (!(p >= 0.0 && p <= 1.0)) throw Error(std::string("synth config: ") + what + " must lie in [0,1]");
    };
    prob(noise.substitution_prob, "substitution_prob");
    prob(noise.alternative_prob, "alternative_prob");
    prob(noise.eps_insertion_prob, "eps_insertion_prob");
    prob(dev_fraction, "dev_fraction");
    prob(test_fraction, "test_fraction");
    if (dev_fraction + test_fraction > 1.0) throw Error("synth config: dev + test fractions exceed 1");
    if (languages.empty()) throw Error("synth config: at least one language is required");
    if (languages.size() > 4) throw Error("synth config: at most 4 languages are supported");
    if (std::set<std::string>(languages.begin(), languages.end()).size() != languages.size())
      throw Error("synth config: duplicate language names");
    if (inventory_size < 2 || inventory_size > 24) throw Error("synth config: inventory_size must be in [2,24]");
    if (word_min < 1 || word_max < word_min) throw Error("synth config: need 1 <= word_min <= word_max");
    if (words_min < 1 || words_max < words_min) throw Error("synth config: need 1 <= words_min <= words_max");
    if (min_word_distance < 1 || min_word_distance > word_min)
      throw Error("synth config: min_word_distance must be in [1, word_min]");
    if (lexicon_size < 1 || utterances < 1) throw Error("synth config: lexicon_size and utterances must be >= 1");
    if (noise.max_alternatives < 1) throw Error("synth config: max_alternatives must be >= 1");
    if (noise.substitution_prob > 0.0 && (noise.max_alternatives < 2 || inventory_size < 2))
      throw Error("synth config: substitutions need max_alternatives >= 2");
    if (!(noise.concentration > 0.0)) throw Error("synth config: concentration must be > 0");
    if (!(noise.substitution_concentration > 0.0))
      throw Error("synth config: substitution_concentration must be > 0");
    if (!(grapheme_seconds > 0.0) || pause_seconds < 0.0 || !(eps_seconds > 0.0) || noise.timing_jitter < 0.0 ||
        noise.timing_jitter >= 1.0)
      throw Error("synth config: invalid timing parameters");
  }

  friend void to_json(nlohmann::json& j, const SynthConfig& c) {
    j = {{"seed", c.seed},
         {"languages", c.languages},
         {"inventory_size", c.inventory_size},
         {"lexicon_size", c.lexicon_size},
         {"word_min", c.word_min},
         {"word_max", c.word_max},
         {"min_word_distance", c.min_word_distance},
         {"words_min", c.words_min},
         {"words_max", c.words_max},
         {"utterances", c.utterances},
         {"grapheme_seconds", c.grapheme_seconds},
         {"pause_seconds", c.pause_seconds},
         {"eps_seconds", c.eps_seconds},
         {"noise",
          {{"substitution_prob", c.noise.substitution_prob},
           {"max_alternatives", c.noise.max_alternatives},
           {"alternative_prob", c.noise.alternative_prob},
           {"concentration", c.noise.concentration},
           {"substitution_concentration", c.noise.substitution_concentration},
           {"eps_insertion_prob", c.noise.eps_insertion_prob},
           {"timing_jitter", c.noise.timing_jitter}}},
         {"dev_fraction", c.dev_fraction},
         {"test_fraction", c.test_fraction},
         {"iv_terms", c.iv_terms},
         {"oov_terms", c.oov_terms}};
  }

  friend void from_json(const nlohmann::json& j, SynthConfig& c) {
    const SynthConfig d;
    c.seed = j.value("seed", d.seed);
    c.languages = j.value("languages", d.languages);
    c.inventory_size = j.value("inventory_size", d.inventory_size);
    c.lexicon_size = j.value("lexicon_size", d.lexicon_size);
    c.word_min = j.value("word_min", d.word_min);
    c.word_max = j.value("word_max", d.word_max);
    c.min_word_distance = j.value("min_word_distance", d.min_word_distance);
    c.words_min = j.value("words_min", d.words_min);
    c.words_max = j.value("words_max", d.words_max);
    c.utterances = j.value("utterances", d.utterances);
    c.grapheme_seconds = j.value("grapheme_seconds", d.grapheme_seconds);
    c.pause_seconds = j.value("pause_seconds", d.pause_seconds);
    c.eps_seconds = j.value("eps_seconds", d.eps_seconds);
    c.noise = d.noise;
    if (j.contains("noise")) {
      const auto& n = j.at("noise");
      c.noise.substitution_prob = n.value("substitution_prob", d.noise.substitution_prob);
      c.noise.max_alternatives = n.value("max_alternatives", d.noise.max_alternatives);
      c.noise.alternative_prob = n.value("alternative_prob", d.noise.alternative_prob);
      c.noise.concentration = n.value("concentration", d.noise.concentration);
      c.noise.substitution_concentration =
          n.value("substitution_concentration", d.noise.substitution_concentration);
      c.noise.eps_insertion_prob = n.value("eps_insertion_prob", d.noise.eps_insertion_prob);
      c.noise.timing_jitter = n.value("timing_jitter", d.noise.timing_jitter);
    }
    c.dev_fraction = j.value("dev_fraction", d.dev_fraction);
    c.test_fraction = j.value("test_fraction", d.test_fraction);
    c.iv_terms = j.value("iv_terms", d.iv_terms);
    c.oov_terms = j.value("oov_terms", d.oov_terms);
  }
};

// Symbols of the k-th synthetic language. Each language draws from its own
// script so inventories are disjoint.
inline std::vector<std::string> synthetic_alphabet(std::size_t language, int size) {
  static const std::vector<std::vector<std::string>> scripts = {
      {"a", "b", "c", "d", "e", "f", "g", "h", "i", "j", "k", "l", "m",
       "n", "o", "p", "q", "r", "s", "t", "u", "v", "w", "x", "y", "z"},
      {"A", "B", "C", "D", "E", "F", "G", "H", "I", "J", "K", "L", "M",
       "N", "O", "P", "Q", "R", "S", "T", "U", "V", "W", "X", "Y", "Z"},
      {"α", "β", "γ", "δ", "ε", "ζ", "η", "θ", "ι", "κ", "λ", "μ",
       "ν", "ξ", "ο", "π", "ρ", "σ", "τ", "υ", "φ", "χ", "ψ", "ω"},
      {"а", "б", "в", "г", "д", "е", "ж", "з", "и", "к", "л", "м",
       "н", "о", "п", "р", "с", "т", "у", "ф", "х", "ц", "ч", "ш"}};
  if (language >= scripts.size()) throw Error("no synthetic script for language #" + std::to_string(language));
  const auto& s = scripts[language];
  return {s.begin(), s.begin() + std::min<std::ptrdiff_t>(size, static_cast<std::ptrdiff_t>(s.size()))};
}

inline GraphemeInventory synthetic_inventory(const SynthConfig& cfg) {
  std::map<std::string, std::vector<std::string>> langs;
  for (std::size_t l = 0; l < cfg.languages.size(); ++l)
    langs[cfg.languages[l]] = synthetic_alphabet(l, cfg.inventory_size);
  return GraphemeInventory::from_languages(langs);
}

// A term in a split together with its reference occurrences.
struct SynthTerm {
  std::string id;
  std::string text;
  std::string language;
  bool merged = false;
};

struct SynthSplit {
  Corpus corpus;
  std::vector<std::vector<GraphemeId>> truth;  // per record, true grapheme per segment (EPS for insertions)
  std::vector<SynthTerm> iv_terms, oov_terms;
  std::vector<RefOccurrence> iv_refs, oov_refs;
};

struct SynthData {
  GraphemeInventory inventory;
  std::map<std::string, std::vector<std::string>> lexicon;  // per language
  SynthSplit train, dev, test;
};

namespace detail {

inline bool has_substring_relation(const std::string& a, const std::string& b) {
  return a.find(b) != std::string::npos || b.find(a) != std::string::npos;
}

// Fewest mismatches between the shorter word and any aligned stretch of the
// longer one. Zero means a substring relation.
inline int aligned_distance(const std::vector<std::size_t>& a, const std::vector<std::size_t>& b) {
  const auto& s = a.size() <= b.size() ? a : b;
  const auto& l = a.size() <= b.size() ? b : a;
  int best = static_cast<int>(s.size());
  for (std::size_t off = 0; off + s.size() <= l.size(); ++off) {
    int d = 0;
    for (std::size_t i = 0; i < s.size() && d < best; ++i) d += s[i] != l[off + i];
    best = std::min(best, d);
  }
  return best;
}

inline std::vector<std::string> make_lexicon(const std::vector<std::string>& alphabet, const SynthConfig& cfg,
                                             std::mt19937_64& rng) {
  std::uniform_int_distribution<int> length(cfg.word_min, cfg.word_max);
  std::uniform_int_distribution<std::size_t> letter(0, alphabet.size() - 1);
  std::vector<std::string> words;
  std::vector<std::vector<std::size_t>> spelled;
  std::size_t attempts = 0;
  while (words.size() < static_cast<std::size_t>(cfg.lexicon_size)) {
    if (++attempts > 100000u + 1000u * static_cast<std::size_t>(cfg.lexicon_size))
      throw Error("synth: cannot build a lexicon of " + std::to_string(cfg.lexicon_size) +
                  " words at distance >= " + std::to_string(cfg.min_word_distance) +
                  "; enlarge the inventory or word lengths");
    std::vector<std::size_t> letters(static_cast<std::size_t>(length(rng)));
    for (auto& c : letters) c = letter(rng);
    bool ok = true;
    for (const auto& other : spelled) ok = ok && aligned_distance(letters, other) >= cfg.min_word_distance;
    if (!ok) continue;
    std::string w;
    for (auto c : letters) w += alphabet[c];
    words.push_back(std::move(w));
    spelled.push_back(std::move(letters));
  }
  return words;
}

// Dirichlet draw with the first component weighted by `top`, the rest by 1,
// returned with the largest value first.
inline std::vector<double> posterior_draw(std::size_t n, double top, std::mt19937_64& rng) {
  std::vector<double> p(n);
  double sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    std::gamma_distribution<double> g(i == 0 ? top : 1.0, 1.0);
    p[i] = std::max(g(rng), 1e-12);
    sum += p[i];
  }
  for (auto& v : p) v /= sum;
  std::sort(p.begin(), p.end(), std::greater<>());
  return p;
}

struct Utterance {
  CorpusRecord record;
  std::vector<GraphemeId> truth;
};

inline Segment corrupt(GraphemeId truth, const std::vector<GraphemeId>& alphabet, const NoiseModel& noise,
                       double start, double duration, bool& substituted, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Segment seg;
  seg.start = start;
  seg.duration = duration;
  substituted = noise.substitution_prob > 0.0 && u(rng) < noise.substitution_prob;
  std::size_t count = 1;
  if (substituted)
    count = std::uniform_int_distribution<std::size_t>(2, static_cast<std::size_t>(noise.max_alternatives))(rng);
  else if (noise.max_alternatives > 1 && u(rng) < noise.alternative_prob)
    count = std::uniform_int_distribution<std::size_t>(2, static_cast<std::size_t>(noise.max_alternatives))(rng);
  count = std::min(count, alphabet.size());
  if (count == 1) {
    seg.alternatives = {{truth, 1.0}};
    return seg;
  }
  // Distinct graphemes: slot 0 gets the top posterior.
  std::vector<GraphemeId> pool;
  for (GraphemeId g : alphabet)
    if (g != truth) pool.push_back(g);
  std::shuffle(pool.begin(), pool.end(), rng);
  std::vector<GraphemeId> ids;
  if (substituted) {
    ids = {pool[0], truth};
    for (std::size_t i = 1; ids.size() < count; ++i) ids.push_back(pool[i]);
  } else {
    ids = {truth};
    for (std::size_t i = 0; ids.size() < count; ++i) ids.push_back(pool[i]);
  }
  const auto p = posterior_draw(count, substituted ? noise.substitution_concentration : noise.concentration, rng);
  for (std::size_t i = 0; i < count; ++i) seg.alternatives.push_back({ids[i], p[i]});
  return seg;
}

inline Utterance make_utterance(const std::string& id, const std::string& lang, const std::vector<std::string>& lexicon,
                                const GraphemeInventory& inv, const SynthConfig& cfg, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> words(cfg.words_min, cfg.words_max);
  std::uniform_int_distribution<std::size_t> pick(0, lexicon.size() - 1);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const auto& alphabet = inv.language_ids(lang);
  Utterance out;
  out.record.network.utterance = id;
  out.record.network.language = lang;
  out.record.transcript.utterance = id;
  auto& segs = out.record.network.segments;
  double t = cfg.pause_seconds * u(rng);
  const int n = words(rng);
  std::size_t prev = lexicon.size();
  for (int w = 0; w < n; ++w) {
    // no word directly follows itself
    std::size_t k = pick(rng);
    while (k == prev && lexicon.size() > 1) k = pick(rng);
    prev = k;
    const std::string& surface = lexicon[k];
    const double word_start = t;
    for (GraphemeId g : inv.tokenize(surface)) {
      const double d = cfg.grapheme_seconds * (1.0 + cfg.noise.timing_jitter * (2.0 * u(rng) - 1.0));
      bool substituted = false;
      segs.push_back(corrupt(g, alphabet, cfg.noise, t, d, substituted, rng));
      out.truth.push_back(g);
      t += d;
      if (cfg.noise.eps_insertion_prob > 0.0 && u(rng) < cfg.noise.eps_insertion_prob) {
        // Inserted slot dominated by EPS with a stray grapheme as runner-up.
        const auto p = posterior_draw(2, cfg.noise.concentration, rng);
        const GraphemeId stray = alphabet[std::uniform_int_distribution<std::size_t>(0, alphabet.size() - 1)(rng)];
        Segment eps;
        eps.start = t;
        eps.duration = cfg.eps_seconds;
        eps.alternatives = {{GraphemeInventory::kEps, p[0]}, {stray, p[1]}};
        segs.push_back(std::move(eps));
        out.truth.push_back(GraphemeInventory::kEps);
        t += cfg.eps_seconds;
      }
    }
    out.record.transcript.words.push_back({surface, word_start, t, true});
    t += cfg.pause_seconds * (0.5 + u(rng));
  }
  return out;
}

// References for every occurrence of `count` consecutive words spelling `words`.
inline void collect_refs(const Corpus& corpus, const std::string& query, const std::vector<std::string>& words,
                         std::vector<RefOccurrence>& out) {
  std::string text;
  for (const auto& w : words) text += w;
  for (const auto& rec : corpus) {
    const auto& ws = rec.transcript.words;
    for (std::size_t s = 0; s + words.size() <= ws.size(); ++s) {
      bool same = true;
      for (std::size_t k = 0; k < words.size() && same; ++k) same = ws[s + k].surface == words[k];
      if (same)
        out.push_back({query, rec.network.utterance, ws[s].start, ws[s + words.size() - 1].end, text});
    }
  }
}

inline void select_terms(SynthSplit& split, const std::string& lang, const std::string& tag,
                         const std::vector<std::string>& lexicon, const SynthConfig& cfg, std::mt19937_64& rng) {
  std::set<std::string> seen_words;
  std::set<std::pair<std::string, std::string>> seen_pairs;
  for (const auto& rec : split.corpus) {
    if (rec.network.language != lang) continue;
    const auto& ws = rec.transcript.words;
    for (std::size_t i = 0; i < ws.size(); ++i) {
      seen_words.insert(ws[i].surface);
      if (i + 1 < ws.size()) seen_pairs.insert({ws[i].surface, ws[i + 1].surface});
    }
  }
  std::vector<std::string> iv(seen_words.begin(), seen_words.end());
  std::shuffle(iv.begin(), iv.end(), rng);
  std::vector<std::string> chosen;
  for (const auto& w : iv) {
    if (static_cast<int>(chosen.size()) >= cfg.iv_terms) break;
    bool ok = true;
    for (const auto& c : chosen) ok = ok && !has_substring_relation(w, c);
    if (!ok) continue;
    chosen.push_back(w);
    const std::string id = tag + "-iv-" + lang + "-" + std::to_string(chosen.size() - 1);
    split.iv_terms.push_back({id, w, lang, false});
    collect_refs(split.corpus, id, {w}, split.iv_refs);
  }

  std::vector<std::pair<std::string, std::string>> pairs(seen_pairs.begin(), seen_pairs.end());
  std::shuffle(pairs.begin(), pairs.end(), rng);
  std::vector<std::string> merged;
  for (const auto& [a, b] : pairs) {
    if (static_cast<int>(merged.size()) >= cfg.oov_terms) break;
    const std::string text = a + b;
    bool ok = true;
    for (const auto& m : merged) ok = ok && !has_substring_relation(text, m);
    for (const auto& w : lexicon) ok = ok && w.find(text) == std::string::npos;
    if (!ok) continue;
    merged.push_back(text);
    const std::string id = tag + "-oov-" + lang + "-" + std::to_string(merged.size() - 1);
    split.oov_terms.push_back({id, text, lang, true});
    collect_refs(split.corpus, id, {a, b}, split.oov_refs);
  }
}

}  // namespace detail

// Builds lexicons, utterances, the train/dev/test split and term lists.
// Utterances of each language are split by position after a seeded shuffle.
inline SynthData gen_synthetic(const SynthConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed);
  SynthData data;
  data.inventory = synthetic_inventory(cfg);
  for (std::size_t l = 0; l < cfg.languages.size(); ++l) {
    const auto& lang = cfg.languages[l];
    const auto alphabet = synthetic_alphabet(l, cfg.inventory_size);
    data.lexicon[lang] = detail::make_lexicon(alphabet, cfg, rng);
  }
  for (const auto& lang : cfg.languages) {
    std::vector<detail::Utterance> utts;
    for (int i = 0; i < cfg.utterances; ++i) {
      char id[64];
      std::snprintf(id, sizeof(id), "%s-%04d", lang.c_str(), i);
      utts.push_back(detail::make_utterance(id, lang, data.lexicon[lang], data.inventory, cfg, rng));
    }
    const auto n = utts.size();
    const auto n_test = static_cast<std::size_t>(std::llround(cfg.test_fraction * static_cast<double>(n)));
    const auto n_dev = static_cast<std::size_t>(std::llround(cfg.dev_fraction * static_cast<double>(n)));
    for (std::size_t i = 0; i < n; ++i) {
      SynthSplit& split = i < n - n_test - n_dev ? data.train : (i < n - n_test ? data.dev : data.test);
      split.corpus.push_back(std::move(utts[i].record));
      split.truth.push_back(std::move(utts[i].truth));
    }
  }
  for (const auto& lang : cfg.languages) {
    detail::select_terms(data.dev, lang, "dev", data.lexicon[lang], cfg, rng);
    detail::select_terms(data.test, lang, "test", data.lexicon[lang], cfg, rng);
  }
  return data;
}

inline Query term_query(const SynthTerm& term, const GraphemeInventory& inv, std::size_t max_len) {
  return make_query(inv.tokenize(term.text), term.language, max_len);
}

inline nlohmann::json to_json(const SynthTerm& t) {
  return {{"query", t.id}, {"text", t.text}, {"lang", t.language}, {"merged", t.merged}};
}

inline std::vector<SynthTerm> read_terms(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open query list '" + path + "'");
  std::vector<SynthTerm> terms;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      terms.push_back({j.at("query").get<std::string>(), j.at("text").get<std::string>(),
                       j.value("lang", std::string()), j.value("merged", false)});
    } catch (const nlohmann::json::exception& e) {
      throw DataError(path + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return terms;
}

// Writes inventory.json, {train,dev,test}.jsonl, and per split
// {dev,test}_{iv,oov}_{queries,refs}.jsonl under `dir`.
inline std::vector<std::string> write_synthetic(const SynthData& data, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  std::vector<std::string> written;
  auto path = [&](const std::string& name) {
    written.push_back((fs::path(dir) / name).string());
    return written.back();
  };
  data.inventory.save(path("inventory.json"));
  save_corpus(path("train.jsonl"), data.train.corpus, data.inventory);
  save_corpus(path("dev.jsonl"), data.dev.corpus, data.inventory);
  save_corpus(path("test.jsonl"), data.test.corpus, data.inventory);
  auto lines = [&](const std::string& name, const auto& items) {
    std::ofstream out(path(name));
    if (!out) throw DataError("cannot write '" + written.back() + "'");
    for (const auto& item : items) out << to_json(item).dump() << '\n';
  };
  for (const auto& [tag, split] : {std::pair<std::string, const SynthSplit*>{"dev", &data.dev}, {"test", &data.test}}) {
    lines(tag + "_iv_queries.jsonl", split->iv_terms);
    lines(tag + "_iv_refs.jsonl", split->iv_refs);
    lines(tag + "_oov_queries.jsonl", split->oov_terms);
    lines(tag + "_oov_refs.jsonl", split->oov_refs);
  }
  return written;
}

}  // namespace encdot
