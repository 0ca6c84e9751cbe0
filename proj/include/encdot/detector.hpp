#pragma once

// Per-segment probabilities from embeddings, putative-hit spans, and
// corpus-wide search with cross-window deduplication.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "encdot/confnet.hpp"
#include "encdot/encoder.hpp"

namespace encdot {

struct SegmentProbs {
  std::vector<double> r;
  std::vector<bool> padding;
  std::vector<double> start;  // seconds, per segment
  std::vector<double> end;
};

struct Hit {
  std::string query;
  std::string utterance;
  std::size_t first = 0;  // I
  std::size_t last = 0;   // J
  double score = 0.0;
  double start = 0.0;
  double end = 0.0;
};

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// r_i = sigmoid(alpha * max_k(R_i . Q_k) + beta), with R [N x d] and Q [K x d].
inline SegmentProbs per_segment_probs(const nn::Tensor& r_rows, const nn::Tensor& q_rows, double alpha, double beta) {
  const std::size_t n = r_rows.rows(), k = q_rows.rows(), d = r_rows.cols();
  if (q_rows.cols() != d || k == 0)
    throw DimensionError("per_segment_probs: R " + nn::shape_str(r_rows.shape()) + " vs Q " +
                         nn::shape_str(q_rows.shape()));
  SegmentProbs out;
  out.r.resize(n);
  out.padding.assign(n, false);
  out.start.assign(n, 0.0);
  out.end.assign(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    double best = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < k; ++j) {
      double dot = 0.0;
      for (std::size_t c = 0; c < d; ++c) dot += double(r_rows.at(i, c)) * double(q_rows.at(j, c));
      best = std::max(best, dot);
    }
    out.r[i] = sigmoid(alpha * best + beta);
  }
  return out;
}

struct Span {
  std::size_t first = 0;
  std::size_t last = 0;
  double score = 0.0;
};

// Mean of r[first..last], summed left to right.
inline double span_mean(const std::vector<double>& r, std::size_t first, std::size_t last) {
  double sum = 0.0;
  for (std::size_t i = first; i <= last; ++i) sum += r[i];
  return sum / static_cast<double>(last - first + 1);
}

// One span per maximal run of r_i > t (non-PAD) that is at least L long: the
// sub-span of length >= L with the highest mean; ties go to the longer span,
// then the earlier start.
inline std::vector<Span> find_spans(const std::vector<double>& r, const std::vector<bool>& padding, std::size_t min_len,
                                    double threshold) {
  if (min_len < 1) min_len = 1;
  std::vector<Span> out;
  const std::size_t n = r.size();
  auto above = [&](std::size_t i) { return r[i] > threshold && !(i < padding.size() && padding[i]); };
  std::size_t i = 0;
  while (i < n) {
    if (!above(i)) {
      ++i;
      continue;
    }
    std::size_t run_end = i;
    while (run_end + 1 < n && above(run_end + 1)) ++run_end;
    if (run_end - i + 1 >= min_len) {
      Span best{0, 0, -1.0};
      for (std::size_t a = i; a + min_len - 1 <= run_end; ++a) {
        double sum = 0.0;
        for (std::size_t b = a; b <= run_end; ++b) {
          sum += r[b];
          const std::size_t len = b - a + 1;
          if (len < min_len) continue;
          const double mean = sum / static_cast<double>(len);
          const std::size_t best_len = best.last - best.first + 1;
          if (best.score < 0.0 || mean > best.score || (mean == best.score && len > best_len)) best = {a, b, mean};
        }
      }
      out.push_back(best);
    }
    i = run_end + 1;
  }
  return out;
}

inline std::vector<Hit> find_hits(const SegmentProbs& probs, std::size_t min_len, double threshold) {
  std::vector<Hit> hits;
  for (const auto& s : find_spans(probs.r, probs.padding, min_len, threshold)) {
    Hit h;
    h.first = s.first;
    h.last = s.last;
    h.score = s.score;
    if (s.last < probs.end.size()) {
      h.start = probs.start[s.first];
      h.end = probs.end[s.last];
    }
    hits.push_back(std::move(h));
  }
  return hits;
}

// L(g) from the regressed length: max(1, round(scale * L_hat)).
inline std::size_t min_hit_length(double length_hat, double scale = 1.0) {
  const double v = std::round(scale * length_hat);
  return v < 1.0 || !std::isfinite(v) ? 1 : static_cast<std::size_t>(v);
}

inline double interval_overlap(double a0, double a1, double b0, double b1) {
  return std::max(0.0, std::min(a1, b1) - std::max(a0, b0));
}

struct SearchOptions {
  double threshold = 0.5;
  double length_scale = 1.0;
  long overlap = -1;  // window overlap in segments; negative means N/4
  double dedup_overlap = 0.5;
  std::size_t batch = 16;
};

// Encoded hypothesis windows for a whole corpus. Built once, then every query
// is scored against the cached R rows.
class HypothesisIndex {
 public:
  struct Entry {
    std::size_t record = 0;
    Window window;
    nn::Tensor embeddings;  // [N x d]
  };

  HypothesisIndex(const EncoderModel& model, const Corpus& corpus, const SearchOptions& opts = {})
      : corpus_(&corpus) {
    const auto n = static_cast<std::size_t>(model.config().N);
    const std::size_t overlap = opts.overlap < 0 ? n / 4 : static_cast<std::size_t>(opts.overlap);
    std::vector<std::pair<std::size_t, Window>> pending;
    for (std::size_t rec = 0; rec < corpus.size(); ++rec)
      for (const auto& w : chunk(corpus[rec].network, n, overlap)) pending.push_back({rec, w});
    const std::size_t d = static_cast<std::size_t>(model.config().d_model);
    const std::size_t batch = std::max<std::size_t>(1, opts.batch);
    for (std::size_t s = 0; s < pending.size(); s += batch) {
      std::vector<std::pair<const ConfusionNetwork*, Window>> group;
      for (std::size_t j = s; j < std::min(pending.size(), s + batch); ++j)
        group.push_back({&corpus[pending[j].first].network, pending[j].second});
      const auto r = model.encode_hypothesis_eval(make_hypothesis_input(group, model.inventory()));
      for (std::size_t j = 0; j < group.size(); ++j) {
        std::vector<float> rows(r.raw() + j * n * d, r.raw() + (j + 1) * n * d);
        entries_.push_back({pending[s + j].first, pending[s + j].second, nn::Tensor({n, d}, std::move(rows))});
      }
    }
  }

  const std::vector<Entry>& entries() const { return entries_; }
  const Corpus& corpus() const { return *corpus_; }

 private:
  const Corpus* corpus_;
  std::vector<Entry> entries_;
};

// Probabilities for one indexed window, with PAD flags and segment times.
inline SegmentProbs window_probs(const HypothesisIndex::Entry& entry, const ConfusionNetwork& cn, const nn::Tensor& q,
                                 double alpha, double beta) {
  auto probs = per_segment_probs(entry.embeddings, q, alpha, beta);
  for (std::size_t slot = 0; slot < entry.window.size; ++slot) {
    if (entry.window.is_pad(slot)) {
      probs.padding[slot] = true;
      probs.r[slot] = 0.0;
      continue;
    }
    const auto& seg = cn.segments[entry.window.first + slot];
    probs.start[slot] = seg.start;
    probs.end[slot] = seg.end();
  }
  return probs;
}

// Keeps the best-scoring hit among any hits of the same utterance whose time
// intervals overlap by more than `min_overlap` of the shorter one.
inline std::vector<Hit> deduplicate(std::vector<Hit> hits, double min_overlap) {
  std::stable_sort(hits.begin(), hits.end(), [](const Hit& a, const Hit& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.utterance != b.utterance) return a.utterance < b.utterance;
    return a.start < b.start;
  });
  std::vector<Hit> kept;
  for (auto& h : hits) {
    bool duplicate = false;
    for (const auto& k : kept) {
      if (k.utterance != h.utterance || k.query != h.query) continue;
      const double shorter = std::min(h.end - h.start, k.end - k.start);
      const double ov = interval_overlap(h.start, h.end, k.start, k.end);
      if ((shorter > 0.0 && ov > min_overlap * shorter) || (shorter <= 0.0 && ov >= 0.0 && h.start == k.start)) {
        duplicate = true;
        break;
      }
    }
    if (!duplicate) kept.push_back(std::move(h));
  }
  return kept;
}

inline std::vector<Hit> search(const EncoderModel& model, const HypothesisIndex& index, const Query& query,
                               const std::string& query_id, const SearchOptions& opts = {}) {
  const auto enc = model.encode_query_eval({query});
  const std::size_t min_len = min_hit_length(enc.length.item(), opts.length_scale);
  const double alpha = model.alpha().item(), beta = model.beta().item();
  std::vector<Hit> hits;
  for (const auto& entry : index.entries()) {
    const auto& rec = index.corpus()[entry.record];
    const auto probs = window_probs(entry, rec.network, enc.embeddings, alpha, beta);
    for (auto& h : find_hits(probs, min_len, opts.threshold)) {
      h.query = query_id;
      h.utterance = rec.network.utterance;
      h.first += entry.window.first;
      h.last += entry.window.first;
      hits.push_back(std::move(h));
    }
  }
  return deduplicate(std::move(hits), opts.dedup_overlap);
}

inline nlohmann::json to_json(const Hit& h) {
  return {{"query", h.query}, {"utt", h.utterance}, {"start", h.start}, {"end", h.end}, {"score", h.score}};
}

inline void write_hits(std::ostream& out, const std::vector<Hit>& hits) {
  for (const auto& h : hits) out << to_json(h).dump() << '\n';
}

inline std::vector<Hit> read_hits(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open hit file '" + path + "'");
  std::vector<Hit> hits;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      Hit h;
      h.query = j.at("query").get<std::string>();
      h.utterance = j.at("utt").get<std::string>();
      h.start = j.at("start").get<double>();
      h.end = j.at("end").get<double>();
      h.score = j.at("score").get<double>();
      hits.push_back(std::move(h));
    } catch (const nlohmann::json::exception& e) {
      throw DataError(path + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return hits;
}

}  // namespace encdot
