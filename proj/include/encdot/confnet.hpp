#pragma once

// Grapheme confusion networks, aligned transcripts and queries: data model,
// JSONL ingestion, segment featurisation and fixed-length windowing.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include <json.hpp>

#include "encdot/error.hpp"
#include "encdot/numerics/tensor.hpp"

namespace encdot {

using GraphemeId = std::int32_t;
using json = nlohmann::json;

class GraphemeInventory {
 public:
  static constexpr GraphemeId kEps = 0;
  static constexpr GraphemeId kPad = 1;
  static constexpr GraphemeId kCls = 2;
  static constexpr std::string_view kEpsSymbol = "<eps>";
  static constexpr std::string_view kPadSymbol = "<pad>";
  static constexpr std::string_view kClsSymbol = "<cls>";

  GraphemeInventory() {
    for (auto sym : {kEpsSymbol, kPadSymbol, kClsSymbol}) intern(std::string(sym));
  }

  // Union of per-language inventories; languages are taken in map order and
  // symbols shared between languages get a single id.
  static GraphemeInventory from_languages(const std::map<std::string, std::vector<std::string>>& langs) {
    GraphemeInventory inv;
    for (const auto& [lang, symbols] : langs) {
      auto& own = inv.by_language_[lang];
      for (const auto& sym : symbols) {
        if (sym.empty()) throw DataError("inventory: empty symbol in language '" + lang + "'");
        if (sym == kEpsSymbol || sym == kPadSymbol || sym == kClsSymbol)
          throw DataError("inventory: language '" + lang + "' redefines special symbol " + sym);
        own.push_back(inv.intern(sym));
      }
    }
    return inv;
  }

  static GraphemeInventory from_json(const json& j) {
    if (!j.is_object()) throw DataError("inventory: expected a JSON object {lang: [symbols...]}");
    std::map<std::string, std::vector<std::string>> langs;
    for (auto it = j.begin(); it != j.end(); ++it) {
      if (!it.value().is_array()) throw DataError("inventory: language '" + it.key() + "' must map to an array");
      for (const auto& s : it.value()) {
        if (!s.is_string()) throw DataError("inventory: non-string symbol in language '" + it.key() + "'");
        langs[it.key()].push_back(s.get<std::string>());
      }
    }
    return from_languages(langs);
  }

  json to_json() const {
    json j = json::object();
    for (const auto& [lang, ids] : by_language_) {
      json arr = json::array();
      for (GraphemeId id : ids) arr.push_back(symbols_[static_cast<std::size_t>(id)]);
      j[lang] = std::move(arr);
    }
    return j;
  }

  static GraphemeInventory load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open inventory file '" + path + "'");
    try {
      return from_json(json::parse(in));
    } catch (const json::exception& e) {
      throw DataError("inventory '" + path + "': " + e.what());
    }
  }

  void save(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write inventory file '" + path + "'");
    out << to_json().dump(1) << '\n';
  }

  std::size_t size() const { return symbols_.size(); }

  std::optional<GraphemeId> find(std::string_view symbol) const {
    auto it = ids_.find(std::string(symbol));
    if (it == ids_.end()) return std::nullopt;
    return it->second;
  }

  GraphemeId id(std::string_view symbol) const {
    if (auto found = find(symbol)) return *found;
    throw DataError("unknown grapheme symbol '" + std::string(symbol) + "'");
  }

  const std::string& symbol(GraphemeId id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= symbols_.size())
      throw DataError("grapheme id " + std::to_string(id) + " outside inventory of " +
                      std::to_string(symbols_.size()));
    return symbols_[static_cast<std::size_t>(id)];
  }

  bool contains(GraphemeId id) const { return id >= 0 && static_cast<std::size_t>(id) < symbols_.size(); }
  static bool is_special(GraphemeId id) { return id == kEps || id == kPad || id == kCls; }

  std::vector<std::string> languages() const {
    std::vector<std::string> out;
    for (const auto& [lang, _] : by_language_) out.push_back(lang);
    return out;
  }

  const std::vector<GraphemeId>& language_ids(const std::string& lang) const {
    auto it = by_language_.find(lang);
    if (it == by_language_.end()) throw DataError("inventory has no language '" + lang + "'");
    return it->second;
  }

  // Greedy longest-match split of a written word into grapheme ids.
  std::vector<GraphemeId> tokenize(std::string_view word) const {
    std::vector<GraphemeId> out;
    std::size_t pos = 0;
    while (pos < word.size()) {
      std::size_t best_len = 0;
      GraphemeId best = kEps;
      for (std::size_t len = std::min(max_symbol_len_, word.size() - pos); len >= 1; --len) {
        auto it = ids_.find(std::string(word.substr(pos, len)));
        if (it != ids_.end() && !is_special(it->second)) {
          best_len = len;
          best = it->second;
          break;
        }
      }
      if (best_len == 0)
        throw DataError("word '" + std::string(word) + "' has no grapheme at byte " + std::to_string(pos));
      out.push_back(best);
      pos += best_len;
    }
    return out;
  }

  std::string spell(const std::vector<GraphemeId>& ids) const {
    std::string out;
    for (GraphemeId id : ids) out += symbol(id);
    return out;
  }

 private:
  GraphemeId intern(const std::string& sym) {
    auto it = ids_.find(sym);
    if (it != ids_.end()) return it->second;
    const auto id = static_cast<GraphemeId>(symbols_.size());
    ids_.emplace(sym, id);
    symbols_.push_back(sym);
    max_symbol_len_ = std::max(max_symbol_len_, sym.size());
    return id;
  }

  std::vector<std::string> symbols_;
  std::unordered_map<std::string, GraphemeId> ids_;
  std::map<std::string, std::vector<GraphemeId>> by_language_;
  std::size_t max_symbol_len_ = 1;
};

struct Alternative {
  GraphemeId grapheme = GraphemeInventory::kEps;
  double posterior = 1.0;
  bool operator==(const Alternative&) const = default;
};

struct Segment {
  std::vector<Alternative> alternatives;
  double start = 0.0;
  double duration = 0.0;
  double end() const { return start + duration; }
  bool operator==(const Segment&) const = default;
};

struct ConfusionNetwork {
  std::string utterance;
  std::string language;
  std::vector<Segment> segments;
  bool operator==(const ConfusionNetwork&) const = default;
};

struct Word {
  std::string surface;
  double start = 0.0;
  double end = 0.0;
  bool in_vocabulary = true;
  bool operator==(const Word&) const = default;
};

struct AlignedTranscript {
  std::string utterance;
  std::vector<Word> words;
  bool operator==(const AlignedTranscript&) const = default;
};

struct CorpusRecord {
  ConfusionNetwork network;
  AlignedTranscript transcript;
  bool operator==(const CorpusRecord&) const = default;
};

using Corpus = std::vector<CorpusRecord>;

struct Query {
  std::vector<GraphemeId> graphemes;
  std::string language;
};

inline constexpr double kPosteriorSlack = 1e-6;
inline constexpr double kTimeSlack = 1e-6;

// Throws DataError describing the first violated invariant; `where` prefixes
// the message (e.g. "corpus.jsonl:12").
inline void validate(const Segment& seg, const GraphemeInventory& inv, const std::string& where) {
  if (seg.alternatives.empty()) throw DataError(where + ": segment has no alternatives");
  double total = 0.0;
  for (std::size_t a = 0; a < seg.alternatives.size(); ++a) {
    const auto& alt = seg.alternatives[a];
    const std::string field = where + ": alts[" + std::to_string(a) + "]";
    if (!inv.contains(alt.grapheme) || alt.grapheme == GraphemeInventory::kPad ||
        alt.grapheme == GraphemeInventory::kCls)
      throw DataError(field + " grapheme id " + std::to_string(alt.grapheme) + " not allowed in a segment");
    if (!(alt.posterior > 0.0 && alt.posterior <= 1.0))
      throw DataError(field + " posterior " + std::to_string(alt.posterior) + " outside (0,1]");
    total += alt.posterior;
  }
  if (total > 1.0 + kPosteriorSlack) throw DataError(where + ": posteriors sum to " + std::to_string(total) + " > 1");
  if (!(seg.duration >= 0.0) || !std::isfinite(seg.start))
    throw DataError(where + ": invalid timing start=" + std::to_string(seg.start) +
                    " dur=" + std::to_string(seg.duration));
}

inline void validate(const ConfusionNetwork& cn, const GraphemeInventory& inv, const std::string& where) {
  for (std::size_t i = 0; i < cn.segments.size(); ++i) {
    validate(cn.segments[i], inv, where + ": segments[" + std::to_string(i) + "]");
    if (i > 0 && cn.segments[i - 1].end() > cn.segments[i].start + kTimeSlack)
      throw DataError(where + ": segments[" + std::to_string(i) + "] overlaps its predecessor");
  }
}

inline void validate(const AlignedTranscript& tr, const std::string& where) {
  for (std::size_t i = 0; i < tr.words.size(); ++i) {
    const auto& w = tr.words[i];
    if (!(w.end > w.start))
      throw DataError(where + ": words[" + std::to_string(i) + "] end " + std::to_string(w.end) +
                      " not after start " + std::to_string(w.start));
    if (i > 0 && tr.words[i - 1].start > w.start)
      throw DataError(where + ": words[" + std::to_string(i) + "] out of time order");
  }
}

inline Query make_query(std::vector<GraphemeId> graphemes, std::string language, std::size_t max_len) {
  if (graphemes.empty() || graphemes.size() > max_len)
    throw DataError("query length " + std::to_string(graphemes.size()) + " outside [1, " + std::to_string(max_len) + "]");
  for (GraphemeId g : graphemes)
    if (g == GraphemeInventory::kPad || g == GraphemeInventory::kCls)
      throw DataError("query contains a PAD/CLS symbol");
  return Query{std::move(graphemes), std::move(language)};
}

// ---- JSONL serialisation --------------------------------------------------

inline json to_json(const CorpusRecord& rec, const GraphemeInventory& inv) {
  json segs = json::array();
  for (const auto& seg : rec.network.segments) {
    json alts = json::array();
    for (const auto& a : seg.alternatives) alts.push_back(json::array({inv.symbol(a.grapheme), a.posterior}));
    segs.push_back({{"alts", std::move(alts)}, {"start", seg.start}, {"dur", seg.duration}});
  }
  json words = json::array();
  for (const auto& w : rec.transcript.words)
    words.push_back({{"w", w.surface}, {"start", w.start}, {"end", w.end}, {"iv", w.in_vocabulary}});
  return {{"utt", rec.network.utterance},
          {"lang", rec.network.language},
          {"segments", std::move(segs)},
          {"words", std::move(words)}};
}

inline CorpusRecord record_from_json(const json& j, const GraphemeInventory& inv, const std::string& where) {
  auto field = [&](const json& obj, const char* key, const std::string& ctx) -> const json& {
    if (!obj.is_object() || !obj.contains(key)) throw DataError(ctx + ": missing field '" + key + "'");
    return obj.at(key);
  };
  try {
    CorpusRecord rec;
    rec.network.utterance = field(j, "utt", where).get<std::string>();
    rec.network.language = field(j, "lang", where).get<std::string>();
    rec.transcript.utterance = rec.network.utterance;
    const auto& segs = field(j, "segments", where);
    for (std::size_t i = 0; i < segs.size(); ++i) {
      const std::string ctx = where + ": segments[" + std::to_string(i) + "]";
      Segment seg;
      const auto& alts = field(segs[i], "alts", ctx);
      for (std::size_t a = 0; a < alts.size(); ++a) {
        const auto& pair = alts[a];
        if (!pair.is_array() || pair.size() != 2)
          throw DataError(ctx + ": alts[" + std::to_string(a) + "] must be [symbol, posterior]");
        auto id = inv.find(pair[0].get<std::string>());
        if (!id)
          throw DataError(ctx + ": alts[" + std::to_string(a) + "] unknown grapheme symbol '" +
                          pair[0].get<std::string>() + "'");
        seg.alternatives.push_back({*id, pair[1].get<double>()});
      }
      seg.start = field(segs[i], "start", ctx).get<double>();
      seg.duration = field(segs[i], "dur", ctx).get<double>();
      rec.network.segments.push_back(std::move(seg));
    }
    if (j.contains("words")) {
      const auto& words = j.at("words");
      for (std::size_t i = 0; i < words.size(); ++i) {
        const std::string ctx = where + ": words[" + std::to_string(i) + "]";
        Word w;
        w.surface = field(words[i], "w", ctx).get<std::string>();
        w.start = field(words[i], "start", ctx).get<double>();
        w.end = field(words[i], "end", ctx).get<double>();
        w.in_vocabulary = words[i].value("iv", true);
        rec.transcript.words.push_back(std::move(w));
      }
    }
    validate(rec.network, inv, where);
    validate(rec.transcript, where);
    return rec;
  } catch (const json::exception& e) {
    throw DataError(where + ": " + e.what());
  }
}

inline Corpus parse_corpus(std::istream& in, const GraphemeInventory& inv, const std::string& name) {
  Corpus corpus;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = name + ":" + std::to_string(line_no);
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw DataError(where + ": parse error: " + e.what());
    }
    corpus.push_back(record_from_json(j, inv, where));
  }
  return corpus;
}

inline Corpus load_corpus(const std::string& path, const GraphemeInventory& inv) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open corpus file '" + path + "'");
  return parse_corpus(in, inv, path);
}

inline void write_corpus(std::ostream& out, const Corpus& corpus, const GraphemeInventory& inv) {
  for (const auto& rec : corpus) out << to_json(rec, inv).dump() << '\n';
}

inline void save_corpus(const std::string& path, const Corpus& corpus, const GraphemeInventory& inv) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write corpus file '" + path + "'");
  write_corpus(out, corpus, inv);
}

// Seconds of speech: sum of each utterance's first-segment-start to last-segment-end span.
inline double speech_seconds(const Corpus& corpus) {
  double total = 0.0;
  for (const auto& rec : corpus) {
    const auto& segs = rec.network.segments;
    if (!segs.empty()) total += segs.back().end() - segs.front().start;
  }
  return total;
}

// ---- featurisation --------------------------------------------------------

// C = sum_a posterior_a * table[grapheme_a] + duration * duration_direction
inline nn::Tensor featurize(const Segment& seg, const GraphemeInventory& inv, const nn::Tensor& table,
                            const nn::Tensor& duration_direction) {
  const std::size_t d = table.cols();
  if (table.rows() != inv.size() || duration_direction.size() != d)
    throw DimensionError("featurize: table " + nn::shape_str(table.shape()) + " / duration vector of " +
                         std::to_string(duration_direction.size()) + " do not match inventory of " +
                         std::to_string(inv.size()));
  nn::Tensor out({d});
  auto values = out.data();
  for (const auto& alt : seg.alternatives) {
    if (!inv.contains(alt.grapheme)) throw DataError("featurize: unknown grapheme id " + std::to_string(alt.grapheme));
    const auto row = static_cast<std::size_t>(alt.grapheme);
    for (std::size_t c = 0; c < d; ++c) values[c] += static_cast<float>(alt.posterior) * table.at(row, c);
  }
  for (std::size_t c = 0; c < d; ++c)
    values[c] += static_cast<float>(seg.duration) * duration_direction.data()[c];
  return out;
}

// ---- windowing ------------------------------------------------------------

// N consecutive segment slots starting at `first`; slots past `length` are PAD.
struct Window {
  std::size_t first = 0;
  std::size_t length = 0;
  std::size_t size = 0;

  bool is_pad(std::size_t slot) const { return slot >= length; }
  std::size_t padding() const { return size - length; }
};

inline std::vector<Window> chunk(const ConfusionNetwork& cn, std::size_t n, std::size_t overlap) {
  if (n == 0 || overlap >= n)
    throw DimensionError("chunk: need N > overlap >= 0 (N=" + std::to_string(n) + ", overlap=" +
                         std::to_string(overlap) + ")");
  const std::size_t total = cn.segments.size(), stride = n - overlap;
  std::vector<Window> windows;
  for (std::size_t first = 0; first < total; first += stride) {
    windows.push_back({first, std::min(n, total - first), n});
    if (first + n >= total) break;
  }
  return windows;
}

// Row-per-slot inputs for the hypothesis encoder: posterior-weighted one-hot
// rows [B*N x V] and durations [B*N x 1]. PAD slots are one-hot PAD, duration 0.
struct HypothesisInput {
  nn::Tensor posteriors;
  nn::Tensor durations;
  std::size_t windows = 0;
  std::size_t length = 0;
};

inline HypothesisInput make_hypothesis_input(const std::vector<std::pair<const ConfusionNetwork*, Window>>& batch,
                                             const GraphemeInventory& inv) {
  if (batch.empty()) throw DimensionError("make_hypothesis_input: empty batch");
  const std::size_t n = batch.front().second.size, v = inv.size();
  HypothesisInput in{nn::Tensor({batch.size() * n, v}), nn::Tensor({batch.size() * n, 1}), batch.size(), n};
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const auto& [cn, w] = batch[b];
    if (w.size != n) throw DimensionError("make_hypothesis_input: windows of different sizes in one batch");
    for (std::size_t slot = 0; slot < n; ++slot) {
      const std::size_t row = b * n + slot;
      if (w.is_pad(slot)) {
        in.posteriors.at(row, GraphemeInventory::kPad) = 1.0f;
        continue;
      }
      const auto& seg = cn->segments[w.first + slot];
      for (const auto& alt : seg.alternatives) {
        if (!inv.contains(alt.grapheme))
          throw DataError("unknown grapheme id " + std::to_string(alt.grapheme) + " in " + cn->utterance);
        in.posteriors.at(row, static_cast<std::size_t>(alt.grapheme)) += static_cast<float>(alt.posterior);
      }
      in.durations.at(row, 0) = static_cast<float>(seg.duration);
    }
  }
  return in;
}

}  // namespace encdot
