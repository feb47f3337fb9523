#pragma once

// Dataset manifest schema, image tensors, and the seeded synthetic face-like
// data generator.

#include <algorithm>
#include <cmath>
#include <compare>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "morphquad/common.hpp"

namespace morphquad {

struct IdentityId {
  std::string value;

  auto operator<=>(const IdentityId&) const = default;
  bool empty() const noexcept { return value.empty(); }
};

using SampleId = std::string;

enum class Modality { enrollment, reference };
enum class SampleKind { bona_fide, morph, selfmorph };

inline std::string to_string(Modality m) { return m == Modality::enrollment ? "enrollment" : "reference"; }

inline std::string to_string(SampleKind k) {
  switch (k) {
    case SampleKind::bona_fide: return "bona_fide";
    case SampleKind::morph: return "morph";
    case SampleKind::selfmorph: return "selfmorph";
  }
  return "?";
}

inline std::optional<Modality> parse_modality(std::string_view s) {
  if (s == "enrollment") return Modality::enrollment;
  if (s == "reference") return Modality::reference;
  return std::nullopt;
}

inline std::optional<SampleKind> parse_kind(std::string_view s) {
  if (s == "bona_fide") return SampleKind::bona_fide;
  if (s == "morph") return SampleKind::morph;
  if (s == "selfmorph") return SampleKind::selfmorph;
  return std::nullopt;
}

struct SampleRecord {
  SampleId sample_id;
  std::optional<IdentityId> identity;  // absent only for morphs
  Modality modality = Modality::enrollment;
  SampleKind kind = SampleKind::bona_fide;
  std::vector<IdentityId> source_identities;
  std::string image_ref;

  bool operator==(const SampleRecord&) const = default;
};

// Row-major (channel, row, column) image with values in [0,1].
struct ImageTensor {
  int height = 0;
  int width = 0;
  int channels = 1;
  std::vector<float> values;

  ImageTensor() = default;
  ImageTensor(int h, int w, int c) : height(h), width(w), channels(c), values(std::size_t(h) * w * c, 0.0f) {}

  float& at(int c, int y, int x) { return values[(std::size_t(c) * height + y) * width + x]; }
  float at(int c, int y, int x) const { return values[(std::size_t(c) * height + y) * width + x]; }
  std::size_t size() const noexcept { return values.size(); }
  bool same_shape(const ImageTensor& o) const noexcept {
    return height == o.height && width == o.width && channels == o.channels;
  }
  bool operator==(const ImageTensor&) const = default;
};

inline void validate_image(const ImageTensor& img) {
  if (img.height <= 0 || img.width <= 0 || (img.channels != 1 && img.channels != 3))
    throw ValidationError("image has invalid shape");
  if (img.values.size() != std::size_t(img.height) * img.width * img.channels)
    throw ValidationError("image value count does not match shape");
  for (float v : img.values)
    if (!std::isfinite(v) || v < 0.0f || v > 1.0f) throw ValidationError("image value outside [0,1]");
}

inline double pixel_distance(const ImageTensor& a, const ImageTensor& b) {
  if (!a.same_shape(b)) throw DimensionError("image shape mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.values.size(); ++i) {
    const double d = double(a.values[i]) - double(b.values[i]);
    s += d * d;
  }
  return std::sqrt(s);
}

// Raw float tensor file: "MQT1", uint32 height, width, channels, float32 values (little endian host).
inline void save_image(const std::string& path, const ImageTensor& img) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write image " + path);
  out.write("MQT1", 4);
  const std::uint32_t dims[3] = {std::uint32_t(img.height), std::uint32_t(img.width), std::uint32_t(img.channels)};
  out.write(reinterpret_cast<const char*>(dims), sizeof dims);
  out.write(reinterpret_cast<const char*>(img.values.data()), std::streamsize(img.values.size() * sizeof(float)));
  if (!out) throw Error("write failed for image " + path);
}

inline ImageTensor load_image(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("missing image file " + path);
  char magic[4];
  std::uint32_t dims[3];
  in.read(magic, 4);
  in.read(reinterpret_cast<char*>(dims), sizeof dims);
  if (!in || std::memcmp(magic, "MQT1", 4) != 0) throw Error("not a tensor file: " + path);
  if (dims[0] == 0 || dims[1] == 0 || dims[0] > 16384 || dims[1] > 16384 || (dims[2] != 1 && dims[2] != 3))
    throw Error("bad tensor header: " + path);
  ImageTensor img(static_cast<int>(dims[0]), static_cast<int>(dims[1]), static_cast<int>(dims[2]));
  in.read(reinterpret_cast<char*>(img.values.data()), std::streamsize(img.values.size() * sizeof(float)));
  if (!in) throw Error("truncated tensor file: " + path);
  validate_image(img);
  return img;
}

// ---------------------------------------------------------------------------
// Manifest

struct DatasetManifest {
  std::vector<SampleRecord> records;
  std::map<IdentityId, std::vector<SampleId>> identity_index;
  std::string provenance;
  std::uint64_t seed = 0;

  // Rebuilds identity_index from records (every record carrying an identity).
  void rebuild_index() {
    identity_index.clear();
    for (const auto& r : records)
      if (r.identity) identity_index[*r.identity].push_back(r.sample_id);
  }

  const SampleRecord* find(const SampleId& id) const {
    for (const auto& r : records)
      if (r.sample_id == id) return &r;
    return nullptr;
  }

  std::unordered_map<SampleId, std::size_t> position_index() const {
    std::unordered_map<SampleId, std::size_t> pos;
    pos.reserve(records.size());
    for (std::size_t i = 0; i < records.size(); ++i) pos.emplace(records[i].sample_id, i);
    return pos;
  }

  bool operator==(const DatasetManifest&) const = default;
};

inline DatasetManifest make_manifest(std::vector<SampleRecord> records, std::string provenance = {},
                                     std::uint64_t seed = 0) {
  DatasetManifest m;
  m.records = std::move(records);
  m.provenance = std::move(provenance);
  m.seed = seed;
  m.rebuild_index();
  return m;
}

inline bool has_reserved_chars(std::string_view s) {
  return s.find_first_of(",|\n\r") != std::string_view::npos;
}

// Empty result iff every record and index invariant holds.
inline std::vector<std::string> validate_manifest(const DatasetManifest& m) {
  std::vector<std::string> v;
  std::set<SampleId> seen;
  for (const auto& r : m.records) {
    const std::string tag = "record '" + r.sample_id + "'";
    if (r.sample_id.empty()) v.push_back("record with empty sample_id");
    if (has_reserved_chars(r.sample_id)) v.push_back(tag + ": sample_id contains a reserved character");
    if (!seen.insert(r.sample_id).second) v.push_back("duplicate sample_id '" + r.sample_id + "'");
    if (r.identity && (r.identity->empty() || has_reserved_chars(r.identity->value)))
      v.push_back(tag + ": invalid identity token");
    for (const auto& s : r.source_identities)
      if (s.empty() || has_reserved_chars(s.value)) v.push_back(tag + ": invalid source identity token");
    switch (r.kind) {
      case SampleKind::bona_fide:
        if (!r.identity) v.push_back(tag + ": bona_fide sample without identity");
        if (!r.source_identities.empty()) v.push_back(tag + ": bona_fide sample with source identities");
        break;
      case SampleKind::morph:
        if (r.identity) v.push_back(tag + ": morph must not carry an identity");
        if (r.source_identities.size() != 2)
          v.push_back(tag + ": morph needs exactly 2 source identities");
        else if (r.source_identities[0] == r.source_identities[1])
          v.push_back(tag + ": morph source identities must be distinct");
        break;
      case SampleKind::selfmorph:
        if (r.source_identities.size() != 1)
          v.push_back(tag + ": selfmorph needs exactly 1 source identity");
        else if (!r.identity || *r.identity != r.source_identities[0])
          v.push_back(tag + ": selfmorph identity must equal its source identity");
        break;
    }
  }
  DatasetManifest rebuilt;
  rebuilt.records = m.records;
  rebuilt.rebuild_index();
  if (rebuilt.identity_index != m.identity_index) v.push_back("identity_index inconsistent with records");
  for (const auto& r : m.records) {
    if (r.kind != SampleKind::morph) continue;
    for (const auto& s : r.source_identities)
      if (!m.identity_index.count(s))
        v.push_back("record '" + r.sample_id + "': morph references unknown identity '" + s.value + "'");
  }
  return v;
}

inline constexpr const char* kManifestHeader = "sample_id,identity,modality,kind,source_identities,image_ref";

inline std::string manifest_to_csv(const DatasetManifest& m, std::string_view config_hash = {}) {
  std::ostringstream out;
  if (!config_hash.empty()) out << provenance_header(config_hash);
  out << "# seed=" << m.seed << "\n";
  out << "# provenance=" << m.provenance << "\n";
  out << kManifestHeader << "\n";
  for (const auto& r : m.records) {
    std::vector<std::string> srcs;
    for (const auto& s : r.source_identities) srcs.push_back(s.value);
    out << r.sample_id << ',' << (r.identity ? r.identity->value : "") << ',' << to_string(r.modality) << ','
        << to_string(r.kind) << ',' << join(srcs, '|') << ',' << r.image_ref << "\n";
  }
  return out.str();
}

inline void save_manifest(const std::string& path, const DatasetManifest& m, std::string_view config_hash = {}) {
  if (auto v = validate_manifest(m); !v.empty()) throw ValidationError("refusing to save invalid manifest: " + v.front());
  if (has_reserved_chars(m.provenance)) throw ValidationError("provenance must be a single line");
  write_text_file(path, manifest_to_csv(m, config_hash));
}

inline DatasetManifest parse_manifest(const std::string& text, const std::string& origin = "<manifest>") {
  DatasetManifest m;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  bool header_seen = false;
  while (std::getline(in, line)) {
    ++lineno;
    line = trim_cr(line);
    if (line.empty()) continue;
    if (line[0] == '#') {
      if (line.rfind("# seed=", 0) == 0) {
        try {
          m.seed = std::stoull(line.substr(7));
        } catch (const std::exception&) {
          throw ParseError(origin, lineno, "bad seed comment");
        }
      } else if (line.rfind("# provenance=", 0) == 0) {
        m.provenance = line.substr(13);
      }
      continue;
    }
    if (!header_seen) {
      if (line != kManifestHeader) throw ParseError(origin, lineno, "expected header '" + std::string(kManifestHeader) + "'");
      header_seen = true;
      continue;
    }
    const auto cols = split(line, ',');
    if (cols.size() != 6) throw ParseError(origin, lineno, "expected 6 columns, got " + std::to_string(cols.size()));
    SampleRecord r;
    r.sample_id = cols[0];
    if (!cols[1].empty()) r.identity = IdentityId{cols[1]};
    const auto mod = parse_modality(cols[2]);
    if (!mod) throw ParseError(origin, lineno, "unknown modality '" + cols[2] + "'");
    r.modality = *mod;
    const auto kind = parse_kind(cols[3]);
    if (!kind) throw ParseError(origin, lineno, "unknown kind '" + cols[3] + "'");
    r.kind = *kind;
    if (!cols[4].empty())
      for (auto& s : split(cols[4], '|')) r.source_identities.push_back(IdentityId{s});
    r.image_ref = cols[5];
    m.records.push_back(std::move(r));
  }
  if (!header_seen) throw ParseError(origin, lineno, "missing header");
  m.rebuild_index();
  if (auto v = validate_manifest(m); !v.empty()) throw ValidationError(origin + ": " + v.front());
  return m;
}

inline DatasetManifest load_manifest(const std::string& path) { return parse_manifest(read_text_file(path), path); }

// ---------------------------------------------------------------------------
// Synthetic generator

struct SyntheticConfig {
  int num_identities = 20;
  int samples_per_identity_enroll = 2;
  int samples_per_identity_ref = 2;
  int image_size = 32;
  int latent_dim = 16;
  double intra_class_noise = 0.35;
  std::uint64_t seed = 1;
  // Shared by every dataset drawn from the same synthetic "face space".
  std::uint64_t renderer_seed = 20240501;
  std::string id_prefix = "id";

  void validate() const {
    if (num_identities < 1 || samples_per_identity_enroll < 1 || samples_per_identity_ref < 1 || image_size < 1 ||
        latent_dim < 1)
      throw ValidationError("synthetic config counts must be >= 1");
    if (!(intra_class_noise >= 0.0) || !std::isfinite(intra_class_noise))
      throw ValidationError("intra_class_noise must be finite and >= 0");
    if (id_prefix.empty() || has_reserved_chars(id_prefix)) throw ValidationError("invalid id_prefix");
  }
};

using Latent = std::vector<double>;

// Smooth deterministic map from latent code to a face-like grayscale image:
// a fixed elliptical "head" plus oriented Gaussian blobs whose geometry and
// contrast are tanh-squashed linear functions of the latent.
class BlobRenderer {
 public:
  static constexpr int kBlobs = 10;
  static constexpr int kParams = 6;

  BlobRenderer(int latent_dim, int image_size, std::uint64_t seed)
      : latent_dim_(latent_dim), image_size_(image_size) {
    if (latent_dim < 1 || image_size < 1) throw ValidationError("renderer dimensions must be >= 1");
    std::mt19937_64 rng(mix_seed(seed, 0x52454e44));
    std::normal_distribution<double> n01(0.0, 1.0);
    weights_.resize(std::size_t(kBlobs) * kParams * latent_dim);
    bias_.resize(std::size_t(kBlobs) * kParams);
    const double scale = 1.0 / std::sqrt(double(latent_dim));
    for (auto& w : weights_) w = n01(rng) * scale;
    for (auto& b : bias_) b = 0.3 * n01(rng);
    // Anchor blob centres on a loose grid across the face region.
    anchors_.resize(kBlobs * 2);
    for (int k = 0; k < kBlobs; ++k) {
      anchors_[2 * k] = 0.5 + 0.22 * std::cos(2.0 * std::numbers::pi * k / kBlobs) * (k % 2 ? 0.5 : 1.0);
      anchors_[2 * k + 1] = 0.5 + 0.28 * std::sin(2.0 * std::numbers::pi * k / kBlobs) * (k % 2 ? 0.5 : 1.0);
    }
  }

  int latent_dim() const noexcept { return latent_dim_; }
  int image_size() const noexcept { return image_size_; }

  ImageTensor render(const Latent& z) const {
    if (int(z.size()) != latent_dim_) throw DimensionError("latent dimension mismatch");
    struct Blob {
      double cx, cy, amp, cos_t, sin_t, inv_sx2, inv_sy2;
    };
    Blob blobs[kBlobs];
    for (int k = 0; k < kBlobs; ++k) {
      double p[kParams];
      for (int j = 0; j < kParams; ++j) {
        const std::size_t row = std::size_t(k) * kParams + j;
        double s = bias_[row];
        for (int d = 0; d < latent_dim_; ++d) s += weights_[row * latent_dim_ + d] * z[d];
        p[j] = std::tanh(s);
      }
      const double theta = 0.5 * std::numbers::pi * p[3];
      const double sx = 0.07 + 0.04 * (1.0 + p[4]);
      const double sy = 0.07 + 0.04 * (1.0 + p[5]);
      blobs[k] = {anchors_[2 * k] + 0.12 * p[0], anchors_[2 * k + 1] + 0.12 * p[1], 2.2 * p[2],
                  std::cos(theta), std::sin(theta), 1.0 / (sx * sx), 1.0 / (sy * sy)};
    }
    ImageTensor img(image_size_, image_size_, 1);
    for (int y = 0; y < image_size_; ++y) {
      const double v = (y + 0.5) / image_size_;
      for (int x = 0; x < image_size_; ++x) {
        const double u = (x + 0.5) / image_size_;
        const double ex = (u - 0.5) / 0.34, ey = (v - 0.5) / 0.44;
        double s = 2.0 * std::exp(-0.5 * (ex * ex + ey * ey) * (ex * ex + ey * ey)) - 1.0;
        for (const auto& b : blobs) {
          const double dx = u - b.cx, dy = v - b.cy;
          const double ru = b.cos_t * dx + b.sin_t * dy;
          const double rv = -b.sin_t * dx + b.cos_t * dy;
          s += b.amp * std::exp(-0.5 * (ru * ru * b.inv_sx2 + rv * rv * b.inv_sy2));
        }
        img.at(0, y, x) = float(1.0 / (1.0 + std::exp(-s)));
      }
    }
    return img;
  }

 private:
  int latent_dim_;
  int image_size_;
  std::vector<double> weights_;
  std::vector<double> bias_;
  std::vector<double> anchors_;
};

inline BlobRenderer make_renderer(const SyntheticConfig& cfg) {
  return BlobRenderer(cfg.latent_dim, cfg.image_size, cfg.renderer_seed);
}

// Images keyed by sample id.
using ImageMap = std::map<SampleId, ImageTensor>;

struct SyntheticDataset {
  DatasetManifest manifest;
  ImageMap images;
  std::map<IdentityId, Latent> identity_latents;
  std::map<SampleId, Latent> sample_latents;
};

inline std::string identity_name(const std::string& prefix, int k) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%04d", k);
  return prefix + buf;
}

inline std::string image_ref_for(const SampleId& id) { return "images/" + id + ".mqt"; }

inline SyntheticDataset synth_generate(const SyntheticConfig& cfg) {
  cfg.validate();
  const BlobRenderer renderer = make_renderer(cfg);
  std::mt19937_64 rng(mix_seed(cfg.seed, 0x53594e54));
  std::normal_distribution<double> n01(0.0, 1.0);

  SyntheticDataset ds;
  std::vector<SampleRecord> records;
  for (int k = 0; k < cfg.num_identities; ++k) {
    const IdentityId id{identity_name(cfg.id_prefix, k)};
    Latent z(cfg.latent_dim);
    for (auto& v : z) v = n01(rng);
    ds.identity_latents[id] = z;
    const auto add = [&](Modality mod, int count, double sigma, const char* tag) {
      for (int i = 0; i < count; ++i) {
        char suffix[16];
        std::snprintf(suffix, sizeof suffix, "_%s%02d", tag, i);
        SampleRecord r;
        r.sample_id = id.value + suffix;
        r.identity = id;
        r.modality = mod;
        r.kind = SampleKind::bona_fide;
        r.image_ref = image_ref_for(r.sample_id);
        Latent zs = z;
        for (auto& v : zs) v += sigma * n01(rng);
        ds.images.emplace(r.sample_id, renderer.render(zs));
        ds.sample_latents.emplace(r.sample_id, std::move(zs));
        records.push_back(std::move(r));
      }
    };
    // Enrollment captures are cleaner than live reference captures.
    add(Modality::enrollment, cfg.samples_per_identity_enroll, 0.5 * cfg.intra_class_noise, "e");
    add(Modality::reference, cfg.samples_per_identity_ref, cfg.intra_class_noise, "r");
  }
  ds.manifest = make_manifest(std::move(records), "synthetic blob-renderer dataset", cfg.seed);
  return ds;
}

// Latent table CSV: `scope,key,v0,...` with scope in {identity, sample}.
inline std::string latents_to_csv(const SyntheticDataset& ds, std::string_view config_hash = {}) {
  std::ostringstream out;
  if (!config_hash.empty()) out << provenance_header(config_hash);
  out << "scope,key,values\n";
  const auto row = [&](const char* scope, const std::string& key, const Latent& z) {
    out << scope << ',' << key;
    for (double v : z) out << ',' << fmt17(v);
    out << "\n";
  };
  for (const auto& [id, z] : ds.identity_latents) row("identity", id.value, z);
  for (const auto& [id, z] : ds.sample_latents) row("sample", id, z);
  return out.str();
}

inline void parse_latents(const std::string& text, SyntheticDataset& ds, const std::string& origin = "<latents>") {
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  bool header = false;
  while (std::getline(in, line)) {
    ++lineno;
    line = trim_cr(line);
    if (line.empty() || line[0] == '#') continue;
    if (!header) {
      header = true;
      continue;
    }
    const auto cols = split(line, ',');
    if (cols.size() < 3) throw ParseError(origin, lineno, "latent row too short");
    Latent z;
    try {
      for (std::size_t i = 2; i < cols.size(); ++i) z.push_back(std::stod(cols[i]));
    } catch (const std::exception&) {
      throw ParseError(origin, lineno, "bad latent value");
    }
    if (cols[0] == "identity")
      ds.identity_latents[IdentityId{cols[1]}] = std::move(z);
    else if (cols[0] == "sample")
      ds.sample_latents[cols[1]] = std::move(z);
    else
      throw ParseError(origin, lineno, "unknown latent scope '" + cols[0] + "'");
  }
}

// Writes manifest.csv, latents.csv and images/ under `dir`.
inline void save_dataset(const std::filesystem::path& dir, const SyntheticDataset& ds, std::string_view config_hash = {}) {
  std::filesystem::create_directories(dir / "images");
  for (const auto& r : ds.manifest.records) {
    const auto it = ds.images.find(r.sample_id);
    if (it == ds.images.end()) throw Error("no image for sample " + r.sample_id);
    save_image((dir / r.image_ref).string(), it->second);
  }
  save_manifest((dir / "manifest.csv").string(), ds.manifest, config_hash);
  write_text_file((dir / "latents.csv").string(), latents_to_csv(ds, config_hash));
}

inline ImageMap load_images(const std::filesystem::path& dir, const DatasetManifest& m) {
  ImageMap images;
  for (const auto& r : m.records) images.emplace(r.sample_id, load_image((dir / r.image_ref).string()));
  return images;
}

inline SyntheticDataset load_dataset(const std::filesystem::path& dir) {
  SyntheticDataset ds;
  ds.manifest = load_manifest((dir / "manifest.csv").string());
  ds.images = load_images(dir, ds.manifest);
  if (std::filesystem::exists(dir / "latents.csv"))
    parse_latents(read_text_file((dir / "latents.csv").string()), ds, (dir / "latents.csv").string());
  return ds;
}

}  // namespace morphquad
