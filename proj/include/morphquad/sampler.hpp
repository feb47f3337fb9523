#pragma once

// Morph-driven quadruplet sampling. One pass walks a seeded permutation of the
// morph list; for each morph one source identity supplies anchor and positive,
// the other supplies the negative.

#include <algorithm>
#include <map>
#include <random>
#include <span>
#include <sstream>
#include <vector>

#include "morphquad/common.hpp"
#include "morphquad/data_model.hpp"

namespace morphquad {

struct Quadruplet {
  SampleId anchor, positive, negative, morph;
  bool operator==(const Quadruplet&) const = default;
};

struct Triplet {
  SampleId anchor, positive, negative;
  bool operator==(const Triplet&) const = default;
};

struct SamplerConfig {
  int batch_size = 32;
  std::uint64_t seed = 0;
  bool include_selfmorphs = false;
  // With include_selfmorphs: true puts selfmorphs in their identity's
  // positive pool, false feeds them through the morph slot instead.
  bool selfmorph_as_positive = true;

  void validate() const {
    if (batch_size < 1) throw ValidationError("batch_size must be >= 1");
  }
};

// Raised when no morph in the manifest can form a tuple.
class NoUsableMorphError : public Error {
 public:
  using Error::Error;
};

template <typename Item>
struct SamplePlan {
  std::vector<Item> items;
  std::size_t skipped_morphs = 0;
};

using QuadrupletPlan = SamplePlan<Quadruplet>;
using TripletPlan = SamplePlan<Triplet>;

inline QuadrupletPlan build_quadruplets(const DatasetManifest& manifest, const SamplerConfig& cfg) {
  cfg.validate();
  const bool selfmorph_pool = cfg.include_selfmorphs && cfg.selfmorph_as_positive;
  const bool selfmorph_slot = cfg.include_selfmorphs && !cfg.selfmorph_as_positive;

  std::map<IdentityId, std::vector<SampleId>> bona_fide, extra;
  std::vector<const SampleRecord*> morphs;
  for (const auto& r : manifest.records) {
    if (r.kind == SampleKind::bona_fide) bona_fide[*r.identity].push_back(r.sample_id);
    if (r.kind == SampleKind::selfmorph && selfmorph_pool) extra[*r.identity].push_back(r.sample_id);
    if (r.kind == SampleKind::morph || (r.kind == SampleKind::selfmorph && selfmorph_slot)) morphs.push_back(&r);
  }
  const auto count = [](const auto& pool, const IdentityId& id) -> std::size_t {
    const auto it = pool.find(id);
    return it == pool.end() ? 0 : it->second.size();
  };
  // anchor: bona fide; positive: any other sample in the (possibly extended) pool
  const auto can_anchor = [&](const IdentityId& id) {
    return count(bona_fide, id) >= 1 && count(bona_fide, id) + count(extra, id) >= 2;
  };
  std::vector<IdentityId> negative_ids;
  for (const auto& [id, s] : bona_fide) negative_ids.push_back(id);

  std::mt19937_64 rng(mix_seed(cfg.seed, 0x51554144));
  std::shuffle(morphs.begin(), morphs.end(), rng);

  QuadrupletPlan plan;
  const auto uniform = [&](std::size_t n) { return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng); };
  for (const SampleRecord* m : morphs) {
    IdentityId a_id, n_id;
    if (m->kind == SampleKind::morph) {
      const bool flip = std::bernoulli_distribution(0.5)(rng);
      a_id = m->source_identities[flip ? 1 : 0];
      n_id = m->source_identities[flip ? 0 : 1];
      if (!(can_anchor(a_id) && count(bona_fide, n_id) >= 1)) std::swap(a_id, n_id);
      if (!(can_anchor(a_id) && count(bona_fide, n_id) >= 1)) {
        ++plan.skipped_morphs;
        continue;
      }
    } else {
      a_id = *m->identity;
      if (!can_anchor(a_id) || negative_ids.size() < 2) {
        ++plan.skipped_morphs;
        continue;
      }
      do {
        n_id = negative_ids[uniform(negative_ids.size())];
      } while (n_id == a_id);
    }
    const auto& bf = bona_fide.at(a_id);
    const std::size_t ai = uniform(bf.size());
    std::vector<SampleId> pos_pool;
    for (std::size_t k = 0; k < bf.size(); ++k)
      if (k != ai) pos_pool.push_back(bf[k]);
    if (const auto it = extra.find(a_id); it != extra.end())
      pos_pool.insert(pos_pool.end(), it->second.begin(), it->second.end());
    const auto& negs = bona_fide.at(n_id);
    Quadruplet q{bf[ai], pos_pool[uniform(pos_pool.size())], SampleId{}, m->sample_id};
    q.negative = negs[uniform(negs.size())];
    plan.items.push_back(std::move(q));
  }
  if (plan.items.empty())
    throw NoUsableMorphError("no usable morph: need a source identity with >= 2 samples and the other with >= 1 (" +
                             std::to_string(plan.skipped_morphs) + " morphs skipped)");
  return plan;
}

// Same draws as build_quadruplets with the morph slot dropped, so a triplet
// baseline sees exactly the same identity pairs.
inline TripletPlan build_triplets(const DatasetManifest& manifest, const SamplerConfig& cfg) {
  const auto q = build_quadruplets(manifest, cfg);
  TripletPlan plan;
  plan.skipped_morphs = q.skipped_morphs;
  plan.items.reserve(q.items.size());
  for (const auto& item : q.items) plan.items.push_back({item.anchor, item.positive, item.negative});
  return plan;
}

// Contiguous chunks; the final short chunk is kept.
template <typename T>
std::vector<std::span<const T>> batchify(std::span<const T> seq, std::size_t batch_size) {
  if (batch_size < 1) throw ValidationError("batch_size must be >= 1");
  std::vector<std::span<const T>> out;
  for (std::size_t i = 0; i < seq.size(); i += batch_size) out.push_back(seq.subspan(i, std::min(batch_size, seq.size() - i)));
  return out;
}

template <typename T>
std::vector<std::span<const T>> batchify(const std::vector<T>& seq, std::size_t batch_size) {
  return batchify(std::span<const T>(seq), batch_size);
}

// Independent structural check of one quadruplet against the manifest.
inline std::vector<std::string> check_quadruplet(const Quadruplet& q, const DatasetManifest& m) {
  std::vector<std::string> v;
  const auto* a = m.find(q.anchor);
  const auto* p = m.find(q.positive);
  const auto* n = m.find(q.negative);
  const auto* mm = m.find(q.morph);
  if (!a || !p || !n || !mm) return {"quadruplet references unknown sample"};
  if (!a->identity || !p->identity || !n->identity) return {"anchor/positive/negative need identities"};
  if (*a->identity != *p->identity) v.push_back("anchor and positive identities differ");
  if (q.anchor == q.positive) v.push_back("anchor and positive are the same sample");
  if (*n->identity == *a->identity) v.push_back("negative shares the anchor identity");
  if (mm->kind == SampleKind::bona_fide) v.push_back("morph slot holds a bona fide sample");
  if (mm->kind == SampleKind::morph) {
    std::vector<IdentityId> want{*a->identity, *n->identity}, got = mm->source_identities;
    std::sort(want.begin(), want.end());
    std::sort(got.begin(), got.end());
    if (want != got) v.push_back("morph sources differ from {anchor, negative} identities");
  }
  return v;
}

inline std::string plan_to_csv(const QuadrupletPlan& plan, std::string_view config_hash = {}) {
  std::ostringstream out;
  if (!config_hash.empty()) out << provenance_header(config_hash);
  out << "anchor,positive,negative,morph\n";
  for (const auto& q : plan.items) out << q.anchor << ',' << q.positive << ',' << q.negative << ',' << q.morph << "\n";
  return out.str();
}

}  // namespace morphquad
