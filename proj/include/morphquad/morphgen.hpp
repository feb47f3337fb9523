#pragma once

// Morph and selfmorph synthesis plus the morph pairing protocol. Two flavors:
// aligned pixel blending (landmark-style morphs on pre-aligned images) and
// latent interpolation through the synthetic renderer (GAN-style morphs).

#include <algorithm>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <utility>
#include <vector>

#include "morphquad/common.hpp"
#include "morphquad/data_model.hpp"

namespace morphquad {

struct MorphMethod {
  enum class Kind { pixel_blend, latent_blend };
  Kind kind = Kind::pixel_blend;
  double coeff = 0.5;

  void validate() const {
    if (!(coeff >= 0.0 && coeff <= 1.0)) throw ValidationError("morph coeff must lie in [0,1]");
  }
  // Short tag used in sample ids and file names.
  std::string tag() const { return kind == Kind::pixel_blend ? "ldm" : "stg"; }
};

inline std::string to_string(MorphMethod::Kind k) {
  return k == MorphMethod::Kind::pixel_blend ? "pixel_blend" : "latent_blend";
}

inline MorphMethod::Kind parse_morph_kind(std::string_view s) {
  if (s == "pixel_blend" || s == "ldm") return MorphMethod::Kind::pixel_blend;
  if (s == "latent_blend" || s == "stg") return MorphMethod::Kind::latent_blend;
  throw ValidationError("unknown morph method '" + std::string(s) + "'");
}

// (1-coeff)*a + coeff*b per pixel, clamped to [0,1]. The two products are
// summed in double, so blend(a,b,c) == blend(b,a,1-c) bit for bit whenever
// 1-(1-c) == c in floating point.
inline ImageTensor blend_morph(const ImageTensor& a, const ImageTensor& b, double coeff) {
  if (!a.same_shape(b)) throw DimensionError("blend_morph: image shape mismatch");
  if (!(coeff >= 0.0 && coeff <= 1.0)) throw ValidationError("blend_morph: coeff must lie in [0,1]");
  ImageTensor out(a.height, a.width, a.channels);
  const double wa = 1.0 - coeff;
  for (std::size_t i = 0; i < a.values.size(); ++i) {
    const double v = wa * double(a.values[i]) + coeff * double(b.values[i]);
    out.values[i] = float(std::clamp(v, 0.0, 1.0));
  }
  return out;
}

inline Latent interpolate_latents(const Latent& za, const Latent& zb, double coeff) {
  if (za.size() != zb.size()) throw DimensionError("latent dimension mismatch");
  Latent z(za.size());
  for (std::size_t i = 0; i < z.size(); ++i) z[i] = (1.0 - coeff) * za[i] + coeff * zb[i];
  return z;
}

// Renders the interpolation of two identities' noise-free latents.
inline ImageTensor latent_morph(const IdentityId& a, const IdentityId& b, double coeff,
                                const std::map<IdentityId, Latent>& latents, const BlobRenderer& renderer) {
  if (!(coeff >= 0.0 && coeff <= 1.0)) throw ValidationError("latent_morph: coeff must lie in [0,1]");
  const auto ia = latents.find(a);
  const auto ib = latents.find(b);
  if (ia == latents.end()) throw ValidationError("latent_morph: unknown identity '" + a.value + "'");
  if (ib == latents.end()) throw ValidationError("latent_morph: unknown identity '" + b.value + "'");
  return renderer.render(interpolate_latents(ia->second, ib->second, coeff));
}

// Everything a morph operator may need to read.
struct MorphInputs {
  const ImageMap& images;
  const std::map<SampleId, Latent>* sample_latents = nullptr;
  const BlobRenderer* renderer = nullptr;
};

// Morphs two concrete samples. Latent morphs interpolate the samples' own
// latent codes, which plays the role of projecting each image into the
// generator's latent space.
inline ImageTensor morph_samples(const SampleId& left, const SampleId& right, const MorphMethod& method,
                                 const MorphInputs& in) {
  method.validate();
  if (method.kind == MorphMethod::Kind::pixel_blend) {
    const auto il = in.images.find(left);
    const auto ir = in.images.find(right);
    if (il == in.images.end() || ir == in.images.end()) throw Error("morph: missing image for " + left + " or " + right);
    return blend_morph(il->second, ir->second, method.coeff);
  }
  if (!in.sample_latents || !in.renderer) throw Error("latent morph requires sample latents and a renderer");
  const auto zl = in.sample_latents->find(left);
  const auto zr = in.sample_latents->find(right);
  if (zl == in.sample_latents->end() || zr == in.sample_latents->end())
    throw Error("morph: missing latent for " + left + " or " + right);
  return in.renderer->render(interpolate_latents(zl->second, zr->second, method.coeff));
}

inline std::string morph_content_id(std::string_view prefix, const MorphMethod& method, const SampleId& left,
                                    const SampleId& right, const ImageTensor& img) {
  Fnv1a h;
  h.update(prefix).update("|").update(method.tag()).update_pod(method.coeff);
  h.update("|").update(left).update("|").update(right).update("|");
  h.update(img.values.data(), img.values.size() * sizeof(float));
  return std::string(prefix) + "_" + method.tag() + "_" + hex64(h.digest());
}

struct MorphedSample {
  SampleRecord record;
  ImageTensor image;
};

inline MorphedSample make_selfmorph(const SampleRecord& a, const SampleRecord& a2, const MorphMethod& method,
                                    const MorphInputs& in) {
  if (!a.identity || !a2.identity || *a.identity != *a2.identity)
    throw ValidationError("selfmorph sources must share one identity");
  if (a.kind != SampleKind::bona_fide || a2.kind != SampleKind::bona_fide)
    throw ValidationError("selfmorph sources must be bona fide");
  MorphedSample out;
  out.image = morph_samples(a.sample_id, a2.sample_id, method, in);
  out.record.sample_id = morph_content_id("self", method, a.sample_id, a2.sample_id, out.image);
  out.record.identity = a.identity;
  out.record.modality = (a.modality == Modality::enrollment && a2.modality == Modality::enrollment)
                            ? Modality::enrollment
                            : Modality::reference;
  out.record.kind = SampleKind::selfmorph;
  out.record.source_identities = {*a.identity};
  out.record.image_ref = image_ref_for(out.record.sample_id);
  return out;
}

// ---------------------------------------------------------------------------
// Pairing protocol

struct MorphPairProtocol {
  std::vector<std::pair<SampleId, SampleId>> pairs;
  std::uint64_t seed = 0;

  bool operator==(const MorphPairProtocol&) const = default;
};

namespace detail {

inline std::map<IdentityId, std::vector<SampleId>> enrollment_pool(const DatasetManifest& m) {
  std::map<IdentityId, std::vector<SampleId>> pool;
  for (const auto& r : m.records)
    if (r.kind == SampleKind::bona_fide && r.modality == Modality::enrollment && r.identity)
      pool[*r.identity].push_back(r.sample_id);
  return pool;
}

inline std::pair<SampleId, SampleId> ordered(SampleId a, SampleId b) {
  if (b < a) std::swap(a, b);
  return {std::move(a), std::move(b)};
}

}  // namespace detail

inline MorphPairProtocol gen_morph_pair_protocol(const DatasetManifest& manifest, std::size_t count,
                                                 std::uint64_t seed) {
  const auto pool = detail::enrollment_pool(manifest);
  if (pool.size() < 2) throw ValidationError("morph protocol needs >= 2 identities with enrollment samples");

  std::vector<IdentityId> ids;
  std::vector<std::pair<IdentityId, SampleId>> samples;
  std::size_t same_identity_pairs = 0;
  for (const auto& [id, s] : pool) {
    ids.push_back(id);
    for (const auto& sid : s) samples.emplace_back(id, sid);
    same_identity_pairs += s.size() * (s.size() - 1) / 2;
  }
  const std::size_t n = samples.size();
  const std::size_t total = n * (n - 1) / 2 - same_identity_pairs;
  if (count > total)
    throw ValidationError("requested " + std::to_string(count) + " morph pairs but only " + std::to_string(total) +
                          " distinct cross-identity pairs exist");

  std::mt19937_64 rng(mix_seed(seed, 0x50414952));
  MorphPairProtocol proto;
  proto.seed = seed;
  std::set<std::pair<SampleId, SampleId>> used;
  const auto pick = [&](const IdentityId& id) {
    const auto& s = pool.at(id);
    return s[std::uniform_int_distribution<std::size_t>(0, s.size() - 1)(rng)];
  };
  const auto push = [&](SampleId a, SampleId b) {
    auto p = detail::ordered(std::move(a), std::move(b));
    if (used.insert(p).second) proto.pairs.push_back(std::move(p));
  };

  // Coverage pass: chain identities in shuffled order so every identity is used.
  std::shuffle(ids.begin(), ids.end(), rng);
  if (count >= (ids.size() + 1) / 2) {
    for (std::size_t i = 0; i + 1 < ids.size(); i += 2) push(pick(ids[i]), pick(ids[i + 1]));
    if (ids.size() % 2 == 1) {
      const std::size_t partner = std::uniform_int_distribution<std::size_t>(0, ids.size() - 2)(rng);
      push(pick(ids.back()), pick(ids[partner]));
    }
  }

  if (proto.pairs.size() < count) {
    if (count - proto.pairs.size() > (total - proto.pairs.size()) / 2) {
      // Dense request: enumerate the remaining valid pairs and take a shuffled prefix.
      std::vector<std::pair<SampleId, SampleId>> rest;
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) {
          if (samples[i].first == samples[j].first) continue;
          auto p = detail::ordered(samples[i].second, samples[j].second);
          if (!used.count(p)) rest.push_back(std::move(p));
        }
      std::shuffle(rest.begin(), rest.end(), rng);
      for (auto& p : rest) {
        if (proto.pairs.size() == count) break;
        used.insert(p);
        proto.pairs.push_back(std::move(p));
      }
    } else {
      std::uniform_int_distribution<std::size_t> any(0, n - 1);
      while (proto.pairs.size() < count) {
        const auto& a = samples[any(rng)];
        const auto& b = samples[any(rng)];
        if (a.first == b.first) continue;
        push(a.second, b.second);
      }
    }
  }
  proto.pairs.resize(std::min(proto.pairs.size(), count));
  return proto;
}

inline std::vector<std::string> validate_protocol(const MorphPairProtocol& proto, const DatasetManifest& m) {
  std::vector<std::string> v;
  const auto pos = m.position_index();
  std::set<std::pair<SampleId, SampleId>> seen;
  for (const auto& [l, r] : proto.pairs) {
    const auto il = pos.find(l), ir = pos.find(r);
    if (il == pos.end() || ir == pos.end()) {
      v.push_back("pair (" + l + "," + r + ") references an unknown sample");
      continue;
    }
    const auto& a = m.records[il->second];
    const auto& b = m.records[ir->second];
    if (a.kind != SampleKind::bona_fide || b.kind != SampleKind::bona_fide || a.modality != Modality::enrollment ||
        b.modality != Modality::enrollment)
      v.push_back("pair (" + l + "," + r + ") must use bona fide enrollment samples");
    if (a.identity == b.identity) v.push_back("pair (" + l + "," + r + ") shares one identity");
    if (!seen.insert(detail::ordered(l, r)).second) v.push_back("duplicate pair (" + l + "," + r + ")");
  }
  return v;
}

inline std::string protocol_to_csv(const MorphPairProtocol& p, std::string_view config_hash = {}) {
  std::ostringstream out;
  if (!config_hash.empty()) out << provenance_header(config_hash);
  out << "# seed=" << p.seed << "\n";
  out << "left_sample_id,right_sample_id\n";
  for (const auto& [l, r] : p.pairs) out << l << ',' << r << "\n";
  return out.str();
}

inline MorphPairProtocol parse_protocol(const std::string& text, const std::string& origin = "<protocol>") {
  MorphPairProtocol p;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  bool header = false;
  while (std::getline(in, line)) {
    ++lineno;
    line = trim_cr(line);
    if (line.empty()) continue;
    if (line[0] == '#') {
      if (line.rfind("# seed=", 0) == 0) {
        try {
          p.seed = std::stoull(line.substr(7));
        } catch (const std::exception&) {
          throw ParseError(origin, lineno, "bad seed comment");
        }
      }
      continue;
    }
    if (!header) {
      if (line != "left_sample_id,right_sample_id") throw ParseError(origin, lineno, "bad protocol header");
      header = true;
      continue;
    }
    const auto cols = split(line, ',');
    if (cols.size() != 2) throw ParseError(origin, lineno, "expected 2 columns");
    p.pairs.emplace_back(cols[0], cols[1]);
  }
  return p;
}

struct MorphBatch {
  DatasetManifest manifest;  // input records followed by the new morphs
  ImageMap new_images;
};

// Appends one morph record per protocol pair; existing records are untouched.
inline MorphBatch materialize_morphs(const MorphPairProtocol& protocol, const MorphMethod& method,
                                     const DatasetManifest& manifest, const MorphInputs& in) {
  method.validate();
  if (auto v = validate_protocol(protocol, manifest); !v.empty()) throw ValidationError(v.front());
  MorphBatch out;
  out.manifest = manifest;
  const auto pos = manifest.position_index();
  std::set<SampleId> ids;
  for (const auto& r : manifest.records) ids.insert(r.sample_id);
  for (const auto& [l, r] : protocol.pairs) {
    ImageTensor img = morph_samples(l, r, method, in);
    SampleRecord rec;
    rec.sample_id = morph_content_id("morph", method, l, r, img);
    if (!ids.insert(rec.sample_id).second) throw ValidationError("morph id collision: " + rec.sample_id);
    rec.modality = Modality::enrollment;
    rec.kind = SampleKind::morph;
    rec.source_identities = {*manifest.records[pos.at(l)].identity, *manifest.records[pos.at(r)].identity};
    rec.image_ref = image_ref_for(rec.sample_id);
    out.new_images.emplace(rec.sample_id, std::move(img));
    out.manifest.records.push_back(std::move(rec));
  }
  out.manifest.rebuild_index();
  return out;
}

// Up to `per_identity` selfmorphs per identity, each from two distinct
// enrollment samples drawn with the given seed.
inline MorphBatch generate_selfmorphs(const DatasetManifest& manifest, int per_identity, const MorphMethod& method,
                                      std::uint64_t seed, const MorphInputs& in) {
  MorphBatch out;
  out.manifest = manifest;
  if (per_identity <= 0) return out;
  const auto pool = detail::enrollment_pool(manifest);
  const auto pos = manifest.position_index();
  std::mt19937_64 rng(mix_seed(seed, 0x53454c46));
  std::set<SampleId> ids;
  for (const auto& r : manifest.records) ids.insert(r.sample_id);
  for (const auto& [id, samples] : pool) {
    if (samples.size() < 2) continue;
    std::set<std::pair<SampleId, SampleId>> made;
    const std::size_t possible = samples.size() * (samples.size() - 1) / 2;
    for (int k = 0; k < per_identity && made.size() < possible;) {
      std::vector<SampleId> pick;
      std::sample(samples.begin(), samples.end(), std::back_inserter(pick), 2, rng);
      if (!made.insert(detail::ordered(pick[0], pick[1])).second) continue;
      auto sm = make_selfmorph(manifest.records[pos.at(pick[0])], manifest.records[pos.at(pick[1])], method, in);
      if (!ids.insert(sm.record.sample_id).second) throw ValidationError("selfmorph id collision");
      out.new_images.emplace(sm.record.sample_id, std::move(sm.image));
      out.manifest.records.push_back(std::move(sm.record));
      ++k;
    }
  }
  out.manifest.rebuild_index();
  return out;
}

}  // namespace morphquad
