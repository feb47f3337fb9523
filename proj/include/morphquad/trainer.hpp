#pragma once

// Siamese embedding model, training loop over quadruplet or triplet plans,
// embedding stores and checkpoints.

#include <nlohmann/json.hpp>

#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "morphquad/common.hpp"
#include "morphquad/data_model.hpp"
#include "morphquad/losses.hpp"
#include "morphquad/nn.hpp"
#include "morphquad/sampler.hpp"

namespace morphquad {

enum class Architecture { tiny_cnn, resnet50 };

inline std::string to_string(Architecture a) { return a == Architecture::tiny_cnn ? "tiny_cnn" : "resnet50"; }

inline Architecture parse_architecture(std::string_view s) {
  if (s == "tiny_cnn") return Architecture::tiny_cnn;
  if (s == "resnet50") return Architecture::resnet50;
  throw ValidationError("unsupported architecture '" + std::string(s) + "'");
}

struct BackboneSpec {
  Architecture architecture = Architecture::tiny_cnn;
  int input_size = 32;
  int embedding_dim = 64;
  int in_channels = 1;

  void validate() const {
    if (embedding_dim < 2) throw ValidationError("embedding_dim must be >= 2");
    if (in_channels != 1 && in_channels != 3) throw ValidationError("in_channels must be 1 or 3");
    const int min_size = architecture == Architecture::tiny_cnn ? 8 : 32;
    if (input_size < min_size)
      throw ValidationError(to_string(architecture) + " needs input_size >= " + std::to_string(min_size));
  }
  bool operator==(const BackboneSpec&) const = default;
};

class EmbeddingModel {
 public:
  EmbeddingModel(BackboneSpec spec, bool normalize, std::uint64_t seed)
      : spec_(spec), normalize_(normalize), seed_(seed) {
    spec_.validate();
    std::mt19937_64 rng(mix_seed(seed, 0x4d4f444c));
    net_ = spec_.architecture == Architecture::tiny_cnn ? build_tiny_cnn(rng) : build_resnet50(rng);
    net_->collect_params(params_);
    net_->collect_buffers(buffers_);
  }

  EmbeddingModel(const EmbeddingModel&) = delete;
  EmbeddingModel& operator=(const EmbeddingModel&) = delete;
  EmbeddingModel(EmbeddingModel&&) = default;
  EmbeddingModel& operator=(EmbeddingModel&&) = default;

  const BackboneSpec& spec() const noexcept { return spec_; }
  bool normalize() const noexcept { return normalize_; }
  std::uint64_t seed() const noexcept { return seed_; }
  const std::vector<nn::Param*>& params() const noexcept { return params_; }

  // Raw (unnormalized) trunk output, one row per image.
  EmbeddingMatrix forward(const nn::Tensor& x, bool training) {
    if (x.c != spec_.in_channels || x.h != spec_.input_size || x.w != spec_.input_size)
      throw DimensionError("model input shape does not match backbone spec");
    const nn::Tensor y = net_->forward(x, training);
    return Eigen::Map<const EmbeddingMatrix>(y.data.data(), y.n, y.c);
  }

  void backward(const EmbeddingMatrix& grad) {
    nn::Tensor g(int(grad.rows()), int(grad.cols()), 1, 1);
    Eigen::Map<EmbeddingMatrix>(g.data.data(), grad.rows(), grad.cols()) = grad;
    net_->backward(g);
  }

  void zero_grad() {
    for (auto* p : params_) p->zero_grad();
  }

  // Flat parameter values followed by buffers.
  std::vector<double> state() const {
    std::vector<double> s;
    for (const auto* p : params_) s.insert(s.end(), p->value.begin(), p->value.end());
    for (const auto* b : buffers_) s.insert(s.end(), b->begin(), b->end());
    return s;
  }

  void load_state(const std::vector<double>& s) {
    if (s.size() != state_size()) throw ValidationError("checkpoint state size does not match architecture");
    std::size_t off = 0;
    for (auto* p : params_) {
      std::copy_n(s.begin() + std::ptrdiff_t(off), p->value.size(), p->value.begin());
      off += p->value.size();
    }
    for (auto* b : buffers_) {
      std::copy_n(s.begin() + std::ptrdiff_t(off), b->size(), b->begin());
      off += b->size();
    }
  }

  std::size_t state_size() const {
    std::size_t n = 0;
    for (const auto* p : params_) n += p->value.size();
    for (const auto* b : buffers_) n += b->size();
    return n;
  }

  std::string fingerprint() const {
    Fnv1a h;
    h.update(to_string(spec_.architecture)).update_pod(spec_.input_size).update_pod(spec_.embedding_dim);
    h.update_pod(spec_.in_channels).update_pod(normalize_);
    const auto s = state();
    h.update(s.data(), s.size() * sizeof(double));
    return hex64(h.digest());
  }

 private:
  std::unique_ptr<nn::Sequential> build_tiny_cnn(std::mt19937_64& rng) const {
    auto net = std::make_unique<nn::Sequential>();
    int size = spec_.input_size;
    int ch = spec_.in_channels;
    for (int width : {16, 32, 64}) {
      net->emplace<nn::Conv2d>(ch, width, 3, 1, 1, true, rng);
      net->emplace<nn::ReLU>();
      net->emplace<nn::MaxPool2d>(2, 2);
      ch = width;
      size /= 2;
    }
    net->emplace<nn::Flatten>();
    net->emplace<nn::Linear>(ch * size * size, spec_.embedding_dim, rng);
    return net;
  }

  static std::unique_ptr<nn::Sequential> bottleneck(int in_c, int planes, int stride, std::mt19937_64& rng) {
    auto main = std::make_unique<nn::Sequential>();
    main->emplace<nn::Conv2d>(in_c, planes, 1, 1, 0, false, rng);
    main->emplace<nn::BatchNorm2d>(planes);
    main->emplace<nn::ReLU>();
    main->emplace<nn::Conv2d>(planes, planes, 3, stride, 1, false, rng);
    main->emplace<nn::BatchNorm2d>(planes);
    main->emplace<nn::ReLU>();
    main->emplace<nn::Conv2d>(planes, planes * 4, 1, 1, 0, false, rng);
    main->emplace<nn::BatchNorm2d>(planes * 4);
    auto shortcut = std::make_unique<nn::Sequential>();
    if (stride != 1 || in_c != planes * 4) {
      shortcut->emplace<nn::Conv2d>(in_c, planes * 4, 1, stride, 0, false, rng);
      shortcut->emplace<nn::BatchNorm2d>(planes * 4);
    }
    auto block = std::make_unique<nn::Sequential>();
    block->emplace<nn::Residual>(std::move(main), std::move(shortcut));
    return block;
  }

  std::unique_ptr<nn::Sequential> build_resnet50(std::mt19937_64& rng) const {
    auto net = std::make_unique<nn::Sequential>();
    net->emplace<nn::Conv2d>(spec_.in_channels, 64, 7, 2, 3, false, rng);
    net->emplace<nn::BatchNorm2d>(64);
    net->emplace<nn::ReLU>();
    net->emplace<nn::MaxPool2d>(3, 2, 1);
    int in_c = 64;
    const int blocks[4] = {3, 4, 6, 3};
    const int planes[4] = {64, 128, 256, 512};
    for (int stage = 0; stage < 4; ++stage)
      for (int b = 0; b < blocks[stage]; ++b) {
        net->add(bottleneck(in_c, planes[stage], (b == 0 && stage > 0) ? 2 : 1, rng));
        in_c = planes[stage] * 4;
      }
    net->emplace<nn::GlobalAvgPool>();
    net->emplace<nn::Flatten>();
    net->emplace<nn::Linear>(in_c, spec_.embedding_dim, rng);
    return net;
  }

  BackboneSpec spec_;
  bool normalize_;
  std::uint64_t seed_;
  std::unique_ptr<nn::Sequential> net_;
  std::vector<nn::Param*> params_;
  std::vector<std::vector<double>*> buffers_;
};

inline EmbeddingModel build_model(const BackboneSpec& spec, std::uint64_t seed, bool normalize = true) {
  return EmbeddingModel(spec, normalize, seed);
}

// Stacks images into an NCHW batch.
inline nn::Tensor to_batch(const std::vector<const ImageTensor*>& images) {
  if (images.empty()) throw ValidationError("empty image batch");
  const auto& first = *images.front();
  nn::Tensor t(int(images.size()), first.channels, first.height, first.width);
  for (std::size_t i = 0; i < images.size(); ++i) {
    if (!images[i]->same_shape(first)) throw DimensionError("images in one batch differ in shape");
    std::copy(images[i]->values.begin(), images[i]->values.end(), t.data.begin() + std::ptrdiff_t(i * t.sample_size()));
  }
  return t;
}

inline void normalize_rows_inplace(EmbeddingMatrix& m) {
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    const double n = m.row(i).norm();
    if (!(n > 0)) throw DimensionError("cannot normalize a zero embedding");
    m.row(i) /= n;
  }
}

// Inference embeddings, L2-normalized when the model says so.
inline EmbeddingMatrix embed_images(EmbeddingModel& model, const std::vector<const ImageTensor*>& images) {
  EmbeddingMatrix out = model.forward(to_batch(images), false);
  if (model.normalize()) normalize_rows_inplace(out);
  return out;
}

// ---------------------------------------------------------------------------
// Training

enum class LossKind { triplet, quadruplet };

inline std::string to_string(LossKind k) { return k == LossKind::triplet ? "triplet" : "quadruplet"; }

inline LossKind parse_loss_kind(std::string_view s) {
  if (s == "triplet") return LossKind::triplet;
  if (s == "quadruplet") return LossKind::quadruplet;
  throw ValidationError("unknown loss '" + std::string(s) + "'");
}

struct TrainConfig {
  BackboneSpec backbone;
  int epochs = 10;
  double learning_rate = 1e-3;
  int batch_size = 32;
  LossKind loss = LossKind::quadruplet;
  LossConfig loss_config;
  SamplerConfig sampler;
  std::uint64_t seed = 0;

  void validate() const {
    backbone.validate();
    loss_config.validate();
    if (epochs < 0) throw ValidationError("epochs must be >= 0");
    if (!(learning_rate > 0.0)) throw ValidationError("learning rate must be > 0");
    if (batch_size < 1) throw ValidationError("batch_size must be >= 1");
  }
};

struct EpochStats {
  int epoch = 0;
  double mean_loss = 0.0;
  std::size_t skipped_morphs = 0;
};

class TrainingError : public Error {
 public:
  using Error::Error;
};

struct Checkpoint {
  BackboneSpec spec;
  bool normalize = true;
  std::uint64_t seed = 0;
  std::vector<double> state;
  std::string fingerprint;

  bool operator==(const Checkpoint&) const = default;
};

inline Checkpoint make_checkpoint(const EmbeddingModel& model) {
  return {model.spec(), model.normalize(), model.seed(), model.state(), model.fingerprint()};
}

inline EmbeddingModel restore_model(const Checkpoint& ck) {
  EmbeddingModel model(ck.spec, ck.normalize, ck.seed);
  model.load_state(ck.state);
  if (model.fingerprint() != ck.fingerprint) throw ValidationError("checkpoint fingerprint mismatch");
  return model;
}

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<EpochStats> history;
};

// Gathers the four (or three) branch images of one batch in branch-major
// order: all anchors, then positives, negatives and morphs.
template <typename Item>
std::vector<const ImageTensor*> gather_branches(std::span<const Item> batch, const ImageMap& images) {
  const auto lookup = [&](const SampleId& id) {
    const auto it = images.find(id);
    if (it == images.end()) throw Error("missing image for sample " + id);
    return &it->second;
  };
  std::vector<const ImageTensor*> out;
  for (const auto& it : batch) out.push_back(lookup(it.anchor));
  for (const auto& it : batch) out.push_back(lookup(it.positive));
  for (const auto& it : batch) out.push_back(lookup(it.negative));
  if constexpr (std::is_same_v<Item, Quadruplet>)
    for (const auto& it : batch) out.push_back(lookup(it.morph));
  return out;
}

// One forward/backward pass over a batch; returns the batch loss and leaves
// parameter gradients populated.
template <typename Item>
double batch_loss_and_grad(EmbeddingModel& model, std::span<const Item> batch, const ImageMap& images,
                           const LossConfig& loss_cfg) {
  const auto B = Eigen::Index(batch.size());
  const auto imgs = gather_branches(batch, images);
  const EmbeddingMatrix emb = model.forward(to_batch(imgs), true);
  EmbeddingMatrix grad(emb.rows(), emb.cols());
  double value;
  if constexpr (std::is_same_v<Item, Quadruplet>) {
    const QuadrupletBatch qb{emb.middleRows(0, B), emb.middleRows(B, B), emb.middleRows(2 * B, B),
                             emb.middleRows(3 * B, B)};
    const auto r = quadruplet_loss(qb, loss_cfg);
    grad << r.grad_anchors, r.grad_positives, r.grad_negatives, r.grad_morphs;
    value = r.value;
  } else {
    const TripletBatch tb{emb.middleRows(0, B), emb.middleRows(B, B), emb.middleRows(2 * B, B)};
    const auto r = triplet_loss(tb, loss_cfg);
    grad << r.grad_anchors, r.grad_positives, r.grad_negatives;
    value = r.value;
  }
  model.zero_grad();
  model.backward(grad);
  return value;
}

inline SamplerConfig epoch_sampler(const TrainConfig& cfg, int epoch) {
  SamplerConfig s = cfg.sampler;
  s.batch_size = cfg.batch_size;
  s.seed = mix_seed(cfg.sampler.seed ^ cfg.seed, std::uint64_t(epoch));
  return s;
}

inline TrainResult train(EmbeddingModel& model, const DatasetManifest& manifest, const ImageMap& images,
                         const TrainConfig& cfg) {
  cfg.validate();
  if (model.normalize() != cfg.loss_config.normalize_embeddings)
    throw ValidationError("model normalization flag differs from loss config");
  TrainResult result;
  nn::Adam opt(cfg.learning_rate);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const SamplerConfig scfg = epoch_sampler(cfg, epoch);
    double total = 0.0;
    std::size_t items = 0, skipped = 0;
    const auto run = [&](const auto& plan) {
      skipped = plan.skipped_morphs;
      for (const auto& batch : batchify(plan.items, std::size_t(cfg.batch_size))) {
        const double loss = batch_loss_and_grad(model, batch, images, cfg.loss_config);
        if (!std::isfinite(loss))
          throw TrainingError("non-finite loss at epoch " + std::to_string(epoch + 1) + " after " +
                              std::to_string(items) + " items");
        total += loss * double(batch.size());
        items += batch.size();
        opt.step(model.params());
      }
    };
    if (cfg.loss == LossKind::quadruplet)
      run(build_quadruplets(manifest, scfg));
    else
      run(build_triplets(manifest, scfg));
    result.history.push_back({epoch + 1, total / double(items), skipped});
  }
  result.checkpoint = make_checkpoint(model);
  return result;
}

inline std::string history_to_csv(const std::vector<EpochStats>& h, std::string_view config_hash = {}) {
  std::ostringstream out;
  if (!config_hash.empty()) out << provenance_header(config_hash);
  out << "epoch,mean_loss,skipped_morphs\n";
  for (const auto& e : h) out << e.epoch << ',' << fmt9(e.mean_loss) << ',' << e.skipped_morphs << "\n";
  return out.str();
}

// ---------------------------------------------------------------------------
// Checkpoint file: magic line, optional provenance comment, one JSON line
// describing the model, then raw little-endian doubles.

inline constexpr const char* kCheckpointMagic = "MORPHQUAD-CHECKPOINT 1";

inline void save_checkpoint(const std::string& path, const Checkpoint& ck, std::string_view config_hash = {}) {
  nlohmann::json meta = {{"architecture", to_string(ck.spec.architecture)},
                         {"input_size", ck.spec.input_size},
                         {"embedding_dim", ck.spec.embedding_dim},
                         {"in_channels", ck.spec.in_channels},
                         {"normalize", ck.normalize},
                         {"seed", ck.seed},
                         {"fingerprint", ck.fingerprint},
                         {"num_values", ck.state.size()}};
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write checkpoint " + path);
  out << kCheckpointMagic << "\n";
  if (!config_hash.empty()) out << provenance_header(config_hash);
  out << meta.dump() << "\n";
  out.write(reinterpret_cast<const char*>(ck.state.data()), std::streamsize(ck.state.size() * sizeof(double)));
  if (!out) throw Error("write failed for checkpoint " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("missing checkpoint " + path);
  std::string line;
  std::getline(in, line);
  if (line != kCheckpointMagic) throw Error("not a checkpoint file: " + path);
  while (in.peek() == '#') std::getline(in, line);
  std::getline(in, line);
  Checkpoint ck;
  try {
    const auto meta = nlohmann::json::parse(line);
    ck.spec.architecture = parse_architecture(meta.at("architecture").get<std::string>());
    ck.spec.input_size = meta.at("input_size").get<int>();
    ck.spec.embedding_dim = meta.at("embedding_dim").get<int>();
    ck.spec.in_channels = meta.at("in_channels").get<int>();
    ck.normalize = meta.at("normalize").get<bool>();
    ck.seed = meta.at("seed").get<std::uint64_t>();
    ck.fingerprint = meta.at("fingerprint").get<std::string>();
    ck.state.resize(meta.at("num_values").get<std::size_t>());
  } catch (const nlohmann::json::exception& e) {
    throw Error("bad checkpoint header in " + path + ": " + e.what());
  }
  in.read(reinterpret_cast<char*>(ck.state.data()), std::streamsize(ck.state.size() * sizeof(double)));
  if (!in) throw Error("truncated checkpoint " + path);
  return ck;
}

// ---------------------------------------------------------------------------
// Embedding store

struct EmbeddingStore {
  std::map<SampleId, std::vector<double>> vectors;
  std::string model_fingerprint;
  int dim = 0;

  const std::vector<double>& at(const SampleId& id) const {
    const auto it = vectors.find(id);
    if (it == vectors.end()) throw Error("no embedding for sample " + id);
    return it->second;
  }
  bool operator==(const EmbeddingStore&) const = default;
};

inline EmbeddingStore embed_all(EmbeddingModel& model, const DatasetManifest& manifest, const ImageMap& images,
                                std::size_t chunk = 64) {
  EmbeddingStore store;
  store.model_fingerprint = model.fingerprint();
  store.dim = model.spec().embedding_dim;
  for (std::size_t start = 0; start < manifest.records.size(); start += chunk) {
    const std::size_t end = std::min(manifest.records.size(), start + chunk);
    std::vector<const ImageTensor*> imgs;
    for (std::size_t i = start; i < end; ++i) {
      const auto it = images.find(manifest.records[i].sample_id);
      if (it == images.end()) throw Error("missing image for sample " + manifest.records[i].sample_id);
      imgs.push_back(&it->second);
    }
    const EmbeddingMatrix e = embed_images(model, imgs);
    for (std::size_t i = start; i < end; ++i) {
      const auto row = e.row(Eigen::Index(i - start));
      store.vectors[manifest.records[i].sample_id] = std::vector<double>(row.data(), row.data() + row.size());
    }
  }
  return store;
}

inline std::string store_to_csv(const EmbeddingStore& s, std::string_view config_hash = {}) {
  std::ostringstream out;
  if (!config_hash.empty()) out << provenance_header(config_hash);
  out << "# model_fingerprint=" << s.model_fingerprint << "\n";
  out << "sample_id";
  for (int k = 0; k < s.dim; ++k) out << ",e" << k;
  out << "\n";
  for (const auto& [id, v] : s.vectors) {
    out << id;
    for (double x : v) out << ',' << fmt17(x);
    out << "\n";
  }
  return out.str();
}

inline EmbeddingStore parse_store(const std::string& text, const std::string& origin = "<embeddings>") {
  EmbeddingStore s;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  bool header = false;
  while (std::getline(in, line)) {
    ++lineno;
    line = trim_cr(line);
    if (line.empty()) continue;
    if (line[0] == '#') {
      if (line.rfind("# model_fingerprint=", 0) == 0) s.model_fingerprint = line.substr(20);
      continue;
    }
    const auto cols = split(line, ',');
    if (!header) {
      header = true;
      s.dim = int(cols.size()) - 1;
      continue;
    }
    if (int(cols.size()) != s.dim + 1) throw ParseError(origin, lineno, "wrong embedding width");
    std::vector<double> v;
    try {
      for (std::size_t i = 1; i < cols.size(); ++i) v.push_back(std::stod(cols[i]));
    } catch (const std::exception&) {
      throw ParseError(origin, lineno, "bad embedding value");
    }
    s.vectors[cols[0]] = std::move(v);
  }
  return s;
}

}  // namespace morphquad
