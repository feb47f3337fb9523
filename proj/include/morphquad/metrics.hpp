#pragma once

// Verification protocol, FNMR/FMR, FNMR-anchored threshold solving and the
// two mated-morph presentation match rates (MinMax and ProdAvg MMPMR).

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <random>
#include <span>
#include <sstream>
#include <unordered_set>
#include <vector>

#include "morphquad/common.hpp"
#include "morphquad/data_model.hpp"
#include "morphquad/trainer.hpp"

namespace morphquad {

template <typename Scalar>
Scalar cosine(std::span<const Scalar> u, std::span<const Scalar> v) {
  if (u.size() != v.size()) throw DimensionError("cosine: dimension mismatch");
  Scalar dot = 0, nu = 0, nv = 0;
  for (std::size_t k = 0; k < u.size(); ++k) {
    dot += u[k] * v[k];
    nu += u[k] * u[k];
    nv += v[k] * v[k];
  }
  if (!(nu > 0) || !(nv > 0)) throw DimensionError("cosine: zero vector");
  return std::clamp(dot / (std::sqrt(nu) * std::sqrt(nv)), Scalar(-1), Scalar(1));
}

inline double cosine(const std::vector<double>& u, const std::vector<double>& v) {
  return cosine<double>(std::span<const double>(u), std::span<const double>(v));
}

// ---------------------------------------------------------------------------
// Verification protocol

struct VerificationConfig {
  std::size_t max_match = 0;  // 0 = keep all
  std::size_t max_nonmatch = 69000;
  std::uint64_t seed = 0;
};

struct VerificationProtocol {
  std::vector<std::pair<SampleId, SampleId>> match_pairs;     // (enrollment, reference)
  std::vector<std::pair<SampleId, SampleId>> nonmatch_pairs;  // (enrollment, reference)
  std::uint64_t seed = 0;

  bool operator==(const VerificationProtocol&) const = default;
};

namespace detail {

// k distinct sorted indices from [0, n) (Floyd's algorithm).
inline std::vector<std::size_t> sample_indices(std::size_t n, std::size_t k, std::mt19937_64& rng) {
  std::unordered_set<std::size_t> chosen;
  chosen.reserve(k * 2);
  for (std::size_t j = n - k; j < n; ++j) {
    const std::size_t t = std::uniform_int_distribution<std::size_t>(0, j)(rng);
    if (!chosen.insert(t).second) chosen.insert(j);
  }
  std::vector<std::size_t> out(chosen.begin(), chosen.end());
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace detail

inline VerificationProtocol gen_verification_protocol(const DatasetManifest& manifest, const VerificationConfig& cfg) {
  std::vector<const SampleRecord*> enroll, ref;
  for (const auto& r : manifest.records) {
    if (r.kind != SampleKind::bona_fide) continue;
    (r.modality == Modality::enrollment ? enroll : ref).push_back(&r);
  }
  if (enroll.empty() || ref.empty()) throw ValidationError("verification protocol needs enrollment and reference samples");
  std::map<IdentityId, std::size_t> ref_count;
  for (const auto* r : ref) ++ref_count[*r->identity];

  std::mt19937_64 rng(mix_seed(cfg.seed, 0x56455249));
  VerificationProtocol p;
  p.seed = cfg.seed;
  for (const auto* e : enroll)
    for (const auto* r : ref)
      if (e->identity == r->identity) p.match_pairs.emplace_back(e->sample_id, r->sample_id);
  if (cfg.max_match && p.match_pairs.size() > cfg.max_match) {
    const auto keep = detail::sample_indices(p.match_pairs.size(), cfg.max_match, rng);
    std::vector<std::pair<SampleId, SampleId>> sub;
    for (auto i : keep) sub.push_back(p.match_pairs[i]);
    p.match_pairs = std::move(sub);
  }

  // Non-match pairs are indexed enrollment-major; offsets[i] counts those
  // contributed by enrollments before i.
  std::vector<std::size_t> offsets(enroll.size() + 1, 0);
  for (std::size_t i = 0; i < enroll.size(); ++i) {
    const auto it = ref_count.find(*enroll[i]->identity);
    offsets[i + 1] = offsets[i] + ref.size() - (it == ref_count.end() ? 0 : it->second);
  }
  const std::size_t total = offsets.back();
  std::vector<std::size_t> wanted;
  if (total <= cfg.max_nonmatch) {
    wanted.resize(total);
    for (std::size_t i = 0; i < total; ++i) wanted[i] = i;
  } else {
    wanted = detail::sample_indices(total, cfg.max_nonmatch, rng);
  }
  std::size_t w = 0;
  for (std::size_t i = 0; i < enroll.size() && w < wanted.size(); ++i) {
    std::size_t local = offsets[i];
    for (const auto* r : ref) {
      if (r->identity == enroll[i]->identity) continue;
      if (w < wanted.size() && wanted[w] == local) {
        p.nonmatch_pairs.emplace_back(enroll[i]->sample_id, r->sample_id);
        ++w;
      }
      ++local;
    }
  }
  if (p.match_pairs.empty() && p.nonmatch_pairs.empty())
    throw ValidationError("no cross-modality pairs available");
  return p;
}

inline std::vector<double> pair_scores(const EmbeddingStore& store,
                                       const std::vector<std::pair<SampleId, SampleId>>& pairs) {
  std::vector<double> s;
  s.reserve(pairs.size());
  for (const auto& [a, b] : pairs) s.push_back(cosine(store.at(a), store.at(b)));
  return s;
}

// ---------------------------------------------------------------------------
// Error rates and threshold

inline double fnmr(std::span<const double> genuine, double tau) {
  if (genuine.empty()) throw ValidationError("fnmr: empty genuine score list");
  const auto rejected = std::count_if(genuine.begin(), genuine.end(), [&](double s) { return s <= tau; });
  return double(rejected) / double(genuine.size());
}

inline double fmr(std::span<const double> impostor, double tau) {
  if (impostor.empty()) throw ValidationError("fmr: empty impostor score list");
  const auto accepted = std::count_if(impostor.begin(), impostor.end(), [&](double s) { return s > tau; });
  return double(accepted) / double(impostor.size());
}

struct ThresholdResult {
  double tau = 0.0;
  double achieved_fnmr = 0.0;
  double target_fnmr = 0.0;
  // Fewer than 1/target genuine scores: the operating point is coarse.
  bool undersampled = false;
};

// Largest order statistic of the genuine scores whose FNMR stays within the
// target; below the minimum when even one rejection would exceed it.
inline ThresholdResult solve_threshold(std::span<const double> genuine, double target_fnmr = 0.01) {
  if (genuine.empty()) throw ValidationError("solve_threshold: empty genuine score list");
  if (!(target_fnmr >= 0.0 && target_fnmr <= 1.0)) throw ValidationError("target FNMR must lie in [0,1]");
  std::vector<double> g(genuine.begin(), genuine.end());
  std::sort(g.begin(), g.end());
  const std::size_t n = g.size();
  // Largest k with k/n <= target in the same arithmetic fnmr() uses.
  std::size_t k = std::min(n, std::size_t(std::floor(target_fnmr * double(n))) + 1);
  while (k > 0 && double(k) / double(n) > target_fnmr) --k;
  std::size_t j = k;  // candidate: j-th smallest score (1-based)
  while (j > 0 && j < n && g[j - 1] == g[j]) --j;
  ThresholdResult r;
  r.tau = j == 0 ? std::nextafter(g.front(), -std::numeric_limits<double>::infinity()) : g[j - 1];
  r.achieved_fnmr = fnmr(g, r.tau);
  r.target_fnmr = target_fnmr;
  r.undersampled = target_fnmr > 0.0 && double(n) < 1.0 / target_fnmr;
  return r;
}

// ---------------------------------------------------------------------------
// Morph scores

struct SubjectScores {
  IdentityId subject;
  std::vector<SampleId> probe_ids;
  std::vector<double> scores;
};

struct MorphScores {
  SampleId morph_id;
  std::vector<SubjectScores> subjects;
};

struct MorphScoreSet {
  std::vector<MorphScores> morphs;
  // Morphs dropped because a source subject had no probe samples.
  std::vector<SampleId> excluded;
};

inline MorphScoreSet collect_morph_scores(const EmbeddingStore& store, const DatasetManifest& manifest,
                                          Modality probe_modality = Modality::reference) {
  std::map<IdentityId, std::vector<SampleId>> probes;
  for (const auto& r : manifest.records)
    if (r.kind == SampleKind::bona_fide && r.modality == probe_modality) probes[*r.identity].push_back(r.sample_id);
  MorphScoreSet set;
  for (const auto& r : manifest.records) {
    if (r.kind != SampleKind::morph) continue;
    MorphScores ms{r.sample_id, {}};
    bool complete = true;
    for (const auto& subject : r.source_identities) {
      const auto it = probes.find(subject);
      if (it == probes.end() || it->second.empty()) {
        complete = false;
        break;
      }
      SubjectScores ss{subject, it->second, {}};
      for (const auto& probe : it->second) ss.scores.push_back(cosine(store.at(r.sample_id), store.at(probe)));
      ms.subjects.push_back(std::move(ss));
    }
    if (complete)
      set.morphs.push_back(std::move(ms));
    else
      set.excluded.push_back(r.sample_id);
  }
  return set;
}

inline void check_scoreset(const MorphScoreSet& set) {
  if (set.morphs.empty()) throw ValidationError("empty morph score set");
  for (const auto& m : set.morphs) {
    if (m.subjects.empty()) throw ValidationError("morph '" + m.morph_id + "' has no subjects");
    for (const auto& s : m.subjects)
      if (s.scores.empty()) throw ValidationError("morph '" + m.morph_id + "' has a subject without scores");
  }
}

// Precomputes per-morph statistics so each threshold costs O(log I) per subject.
class MmpmrEvaluator {
 public:
  explicit MmpmrEvaluator(const MorphScoreSet& set) {
    check_scoreset(set);
    for (const auto& m : set.morphs) {
      double min_of_max = std::numeric_limits<double>::infinity();
      std::vector<std::vector<double>> sorted;
      for (const auto& s : m.subjects) {
        min_of_max = std::min(min_of_max, *std::max_element(s.scores.begin(), s.scores.end()));
        auto v = s.scores;
        std::sort(v.begin(), v.end());
        sorted.push_back(std::move(v));
      }
      min_of_max_.push_back(min_of_max);
      sorted_.push_back(std::move(sorted));
    }
    sorted_min_of_max_ = min_of_max_;
    std::sort(sorted_min_of_max_.begin(), sorted_min_of_max_.end());
  }

  std::size_t size() const noexcept { return min_of_max_.size(); }

  // Fraction of morphs whose weakest subject still has one accepted sample.
  double minmax(double tau) const {
    const auto above = sorted_min_of_max_.end() - std::upper_bound(sorted_min_of_max_.begin(), sorted_min_of_max_.end(), tau);
    return double(above) / double(size());
  }

  // Mean over morphs of the product of per-subject acceptance fractions.
  double prodavg(double tau) const {
    double total = 0.0;
    for (const auto& subjects : sorted_) {
      double prod = 1.0;
      for (const auto& v : subjects) {
        const auto above = v.end() - std::upper_bound(v.begin(), v.end(), tau);
        prod *= double(above) / double(v.size());
      }
      total += prod;
    }
    return total / double(size());
  }

 private:
  std::vector<double> min_of_max_;
  std::vector<double> sorted_min_of_max_;
  std::vector<std::vector<std::vector<double>>> sorted_;
};

inline double minmax_mmpmr(const MorphScoreSet& set, double tau) { return MmpmrEvaluator(set).minmax(tau); }
inline double prodavg_mmpmr(const MorphScoreSet& set, double tau) { return MmpmrEvaluator(set).prodavg(tau); }

struct MmpmrPair {
  double minmax = 0.0;
  double prodavg = 0.0;
};

// Literal loops over morphs, subjects and samples. Reference oracle for the
// evaluator above.
inline MmpmrPair brute_force_mmpmr(const MorphScoreSet& set, double tau) {
  check_scoreset(set);
  const double M = double(set.morphs.size());
  double minmax_sum = 0.0, prodavg_sum = 0.0;
  for (const auto& m : set.morphs) {
    double min_over_subjects = std::numeric_limits<double>::infinity();
    double prod = 1.0;
    for (const auto& s : m.subjects) {
      double max_over_samples = -std::numeric_limits<double>::infinity();
      double accepted = 0.0;
      for (double score : s.scores) {
        if (score > max_over_samples) max_over_samples = score;
        if (score > tau) accepted += 1.0;
      }
      if (max_over_samples < min_over_subjects) min_over_subjects = max_over_samples;
      prod *= accepted / double(s.scores.size());
    }
    if (min_over_subjects > tau) minmax_sum += 1.0;
    prodavg_sum += prod;
  }
  return {minmax_sum / M, prodavg_sum / M};
}

struct CurveRow {
  double fnmr = 0.0;  // grid target
  double tau = 0.0;
  double achieved_fnmr = 0.0;
  double minmax = 0.0;
  double prodavg = 0.0;
};

inline std::vector<CurveRow> mmpmr_curve(const MorphScoreSet& set, std::span<const double> genuine,
                                         std::vector<double> fnmr_grid) {
  for (double f : fnmr_grid)
    if (!(f > 0.0 && f < 1.0)) throw ValidationError("FNMR grid values must lie in (0,1)");
  std::sort(fnmr_grid.begin(), fnmr_grid.end());
  const MmpmrEvaluator eval(set);
  std::vector<CurveRow> rows;
  for (double f : fnmr_grid) {
    const auto t = solve_threshold(genuine, f);
    rows.push_back({f, t.tau, t.achieved_fnmr, eval.minmax(t.tau), eval.prodavg(t.tau)});
  }
  return rows;
}

inline std::string curve_to_csv(const std::vector<CurveRow>& rows, std::string_view config_hash = {}) {
  std::ostringstream out;
  if (!config_hash.empty()) out << provenance_header(config_hash);
  out << "fnmr,tau,minmax_mmpmr,prodavg_mmpmr\n";
  for (const auto& r : rows) out << fmt9(r.fnmr) << ',' << fmt9(r.tau) << ',' << fmt9(r.minmax) << ',' << fmt9(r.prodavg) << "\n";
  return out.str();
}

inline std::string scores_to_csv(const MorphScoreSet& set, std::string_view config_hash = {}) {
  std::ostringstream out;
  if (!config_hash.empty()) out << provenance_header(config_hash);
  out << "morph_id,subject,probe_id,score\n";
  for (const auto& m : set.morphs)
    for (const auto& s : m.subjects)
      for (std::size_t i = 0; i < s.scores.size(); ++i)
        out << m.morph_id << ',' << s.subject.value << ',' << s.probe_ids[i] << ',' << fmt9(s.scores[i]) << "\n";
  return out.str();
}

// Feature-space separation summary: mean cosine of genuine pairs, impostor
// pairs, and morphs against their source subjects' probes.
struct SeparationStats {
  double mean_genuine = 0.0;
  double mean_impostor = 0.0;
  double mean_morph_to_source = 0.0;
};

inline SeparationStats separation_stats(std::span<const double> genuine, std::span<const double> impostor,
                                        const MorphScoreSet& set) {
  const auto mean = [](auto begin, auto end, std::size_t n) {
    double s = 0.0;
    for (auto it = begin; it != end; ++it) s += *it;
    return n ? s / double(n) : 0.0;
  };
  SeparationStats st;
  st.mean_genuine = mean(genuine.begin(), genuine.end(), genuine.size());
  st.mean_impostor = mean(impostor.begin(), impostor.end(), impostor.size());
  double total = 0.0;
  std::size_t count = 0;
  for (const auto& m : set.morphs)
    for (const auto& s : m.subjects)
      for (double v : s.scores) {
        total += v;
        ++count;
      }
  st.mean_morph_to_source = count ? total / double(count) : 0.0;
  return st;
}

}  // namespace morphquad
