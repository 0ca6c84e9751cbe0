#pragma once

// Term-weighted value scoring of hit lists against reference occurrences.
//
// TWV(t) = 1 - mean_q [ P_miss(q) + beta * P_FA(q) ] over queries with at least
// one reference, where P_miss = n_miss / n_ref and
// P_FA = n_fa / (trials_per_second * speech_seconds - n_ref).

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "encdot/detector.hpp"

namespace encdot {

struct RefOccurrence {
  std::string query;
  std::string utterance;
  double start = 0.0;
  double end = 0.0;
  std::string text;
};

struct TwvConfig {
  double beta = 999.9;
  double trials_per_second = 1.0;
  double match_overlap = 0.5;
  double total_speech_seconds = 0.0;

  void validate() const {
    if (!(beta > 0.0)) throw MetricError("TWV beta must be > 0");
    if (!(total_speech_seconds > 0.0)) throw MetricError("total speech seconds must be > 0");
  }
};

struct QueryCounts {
  long n_ref = 0;
  long n_correct = 0;
  long n_fa = 0;
  long n_miss = 0;
};

namespace detail {

// Hits of one query ordered by descending score with a flag telling whether
// each was matched to a reference. Hits are admitted in score order whenever
// an augmenting path exists, so for every score cutoff the matched hits above
// it form a maximum one-to-one matching of that prefix.
struct ScoredQuery {
  long n_ref = 0;
  std::vector<std::pair<double, bool>> hits;
};

inline bool try_augment(std::size_t hit, const std::vector<std::vector<std::size_t>>& edges,
                        std::vector<long>& ref_owner, std::vector<char>& visited) {
  for (std::size_t ref : edges[hit]) {
    if (visited[ref]) continue;
    visited[ref] = 1;
    if (ref_owner[ref] < 0 || try_augment(static_cast<std::size_t>(ref_owner[ref]), edges, ref_owner, visited)) {
      ref_owner[ref] = static_cast<long>(hit);
      return true;
    }
  }
  return false;
}

inline std::map<std::string, ScoredQuery> align(const std::vector<Hit>& hits, const std::vector<RefOccurrence>& refs,
                                               const TwvConfig& cfg) {
  std::map<std::string, std::vector<const RefOccurrence*>> refs_by_query;
  std::map<std::string, std::vector<const Hit*>> hits_by_query;
  for (const auto& r : refs) refs_by_query[r.query].push_back(&r);
  for (const auto& h : hits) hits_by_query[h.query].push_back(&h);

  std::map<std::string, ScoredQuery> out;
  for (const auto& [query, qrefs] : refs_by_query) out[query].n_ref = static_cast<long>(qrefs.size());
  for (auto& [query, qhits] : hits_by_query) {
    std::stable_sort(qhits.begin(), qhits.end(), [](const Hit* a, const Hit* b) { return a->score > b->score; });
    const auto it = refs_by_query.find(query);
    static const std::vector<const RefOccurrence*> kNone;
    const auto& qrefs = it == refs_by_query.end() ? kNone : it->second;
    std::vector<std::vector<std::size_t>> edges(qhits.size());
    for (std::size_t h = 0; h < qhits.size(); ++h)
      for (std::size_t r = 0; r < qrefs.size(); ++r) {
        const auto& ref = *qrefs[r];
        if (ref.utterance != qhits[h]->utterance) continue;
        const double need = cfg.match_overlap * (ref.end - ref.start);
        if (interval_overlap(qhits[h]->start, qhits[h]->end, ref.start, ref.end) >= need) edges[h].push_back(r);
      }
    std::vector<long> ref_owner(qrefs.size(), -1);
    auto& sq = out[query];
    for (std::size_t h = 0; h < qhits.size(); ++h) {
      std::vector<char> visited(qrefs.size(), 0);
      sq.hits.push_back({qhits[h]->score, try_augment(h, edges, ref_owner, visited)});
    }
  }
  return out;
}

inline QueryCounts counts_at(const ScoredQuery& sq, double threshold) {
  QueryCounts c;
  c.n_ref = sq.n_ref;
  for (const auto& [score, matched] : sq.hits) {
    if (score < threshold) break;
    (matched ? c.n_correct : c.n_fa) += 1;
  }
  c.n_miss = c.n_ref - c.n_correct;
  return c;
}

inline double twv_from(const std::map<std::string, ScoredQuery>& aligned, const TwvConfig& cfg, double threshold) {
  double cost = 0.0;
  long queries = 0;
  for (const auto& [query, sq] : aligned) {
    if (sq.n_ref == 0) continue;
    const auto c = counts_at(sq, threshold);
    const double p_miss = static_cast<double>(c.n_miss) / static_cast<double>(c.n_ref);
    const double p_fa = static_cast<double>(c.n_fa) / (cfg.trials_per_second * cfg.total_speech_seconds - c.n_ref);
    cost += p_miss + cfg.beta * p_fa;
    ++queries;
  }
  if (queries == 0) throw MetricError("TWV undefined: no query has a reference occurrence");
  return 1.0 - cost / static_cast<double>(queries);
}

}  // namespace detail

// One-to-one matching of hits to references, per query. A hit can match a
// reference of the same utterance when it covers at least `match_overlap` of
// the reference's duration.
inline std::map<std::string, QueryCounts> match(const std::vector<Hit>& hits, const std::vector<RefOccurrence>& refs,
                                                const TwvConfig& cfg) {
  std::map<std::string, QueryCounts> out;
  for (const auto& [query, sq] : detail::align(hits, refs, cfg))
    out[query] = detail::counts_at(sq, -std::numeric_limits<double>::infinity());
  return out;
}

// TWV keeping hits with score >= threshold.
inline double twv(const std::vector<Hit>& hits, const std::vector<RefOccurrence>& refs, const TwvConfig& cfg,
                  double threshold) {
  cfg.validate();
  std::vector<Hit> kept;
  for (const auto& h : hits)
    if (h.score >= threshold) kept.push_back(h);
  return detail::twv_from(detail::align(kept, refs, cfg), cfg, -std::numeric_limits<double>::infinity());
}

struct MtwvResult {
  double twv = 0.0;
  double threshold = 0.0;
};

// Maximum TWV over thresholds at the distinct hit scores (smallest threshold
// on ties). Rejecting every hit (TWV 0) also competes; it is reported with a
// threshold just above the top score.
inline MtwvResult mtwv(const std::vector<Hit>& hits, const std::vector<RefOccurrence>& refs, const TwvConfig& cfg) {
  cfg.validate();
  if (hits.empty()) throw MetricError("MTWV needs at least one hit");
  const auto aligned = detail::align(hits, refs, cfg);
  std::vector<double> scores;
  for (const auto& h : hits) scores.push_back(h.score);
  std::sort(scores.begin(), scores.end());
  scores.erase(std::unique(scores.begin(), scores.end()), scores.end());
  MtwvResult best{-std::numeric_limits<double>::infinity(), scores.front()};
  for (double t : scores) {
    const double v = detail::twv_from(aligned, cfg, t);
    if (v > best.twv) best = {v, t};
  }
  const double none = detail::twv_from(aligned, cfg, std::numeric_limits<double>::infinity());
  if (none > best.twv) best = {none, std::nextafter(scores.back(), std::numeric_limits<double>::infinity())};
  return best;
}

struct DetPoint {
  double threshold;
  double p_miss;
  double p_fa;
};

// Pooled (query-averaged) miss and false-alarm rates at every distinct score.
inline std::vector<DetPoint> det_curve(const std::vector<Hit>& hits, const std::vector<RefOccurrence>& refs,
                                       const TwvConfig& cfg) {
  cfg.validate();
  const auto aligned = detail::align(hits, refs, cfg);
  std::vector<double> scores;
  for (const auto& h : hits) scores.push_back(h.score);
  std::sort(scores.begin(), scores.end());
  scores.erase(std::unique(scores.begin(), scores.end()), scores.end());
  std::vector<DetPoint> out;
  for (double t : scores) {
    double miss = 0.0, fa = 0.0;
    long q = 0;
    for (const auto& [query, sq] : aligned) {
      if (sq.n_ref == 0) continue;
      const auto c = detail::counts_at(sq, t);
      miss += static_cast<double>(c.n_miss) / static_cast<double>(c.n_ref);
      fa += static_cast<double>(c.n_fa) / (cfg.trials_per_second * cfg.total_speech_seconds - c.n_ref);
      ++q;
    }
    if (q > 0) out.push_back({t, miss / q, fa / q});
  }
  return out;
}

struct TwvReport {
  double atwv = 0.0;
  double atwv_threshold = 0.5;
  double mtwv = 0.0;
  double mtwv_threshold = 0.0;
  std::map<std::string, QueryCounts> per_query;  // at the ATWV threshold
};

inline TwvReport evaluate(const std::vector<Hit>& hits, const std::vector<RefOccurrence>& refs, const TwvConfig& cfg,
                          double atwv_threshold) {
  TwvReport report;
  report.atwv_threshold = atwv_threshold;
  report.atwv = twv(hits, refs, cfg, atwv_threshold);
  if (hits.empty()) {
    report.mtwv = report.atwv;
    report.mtwv_threshold = atwv_threshold;
  } else {
    const auto best = mtwv(hits, refs, cfg);
    report.mtwv = best.twv;
    report.mtwv_threshold = best.threshold;
  }
  const auto aligned = detail::align(hits, refs, cfg);
  for (const auto& [query, sq] : aligned) report.per_query[query] = detail::counts_at(sq, atwv_threshold);
  return report;
}

inline nlohmann::json to_json(const TwvReport& r, const TwvConfig& cfg) {
  nlohmann::json per_query = nlohmann::json::object();
  for (const auto& [q, c] : r.per_query) {
    nlohmann::json entry = {{"n_ref", c.n_ref}, {"n_correct", c.n_correct}, {"n_fa", c.n_fa}, {"n_miss", c.n_miss}};
    if (c.n_ref > 0) {
      entry["p_miss"] = static_cast<double>(c.n_miss) / static_cast<double>(c.n_ref);
      entry["p_fa"] = static_cast<double>(c.n_fa) / (cfg.trials_per_second * cfg.total_speech_seconds - c.n_ref);
    }
    per_query[q] = std::move(entry);
  }
  return {{"atwv", r.atwv},
          {"atwv_threshold", r.atwv_threshold},
          {"mtwv", r.mtwv},
          {"threshold", r.mtwv_threshold},
          {"beta", cfg.beta},
          {"speech_seconds", cfg.total_speech_seconds},
          {"per_query", std::move(per_query)}};
}

inline nlohmann::json to_json(const RefOccurrence& r) {
  return {{"query", r.query}, {"text", r.text}, {"utt", r.utterance}, {"start", r.start}, {"end", r.end}};
}

inline std::vector<RefOccurrence> read_refs(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open reference file '" + path + "'");
  std::vector<RefOccurrence> refs;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      RefOccurrence r;
      r.query = j.at("query").get<std::string>();
      r.utterance = j.at("utt").get<std::string>();
      r.start = j.at("start").get<double>();
      r.end = j.at("end").get<double>();
      r.text = j.value("text", std::string());
      if (!(r.end > r.start))
        throw DataError(path + ":" + std::to_string(line_no) + ": reference end must be after start");
      refs.push_back(std::move(r));
    } catch (const nlohmann::json::exception& e) {
      throw DataError(path + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return refs;
}

}  // namespace encdot
