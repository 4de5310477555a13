#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "dmpo/predictors.hpp"

namespace dmpo {

using json = nlohmann::json;

enum class PredictorKind { HighOrder, Linear };

inline std::string predictor_kind_name(PredictorKind k) {
  return k == PredictorKind::HighOrder ? "high_order" : "linear";
}

inline PredictorKind predictor_kind_from(const std::string& s) {
  if (s == "high_order") return PredictorKind::HighOrder;
  if (s == "linear") return PredictorKind::Linear;
  throw ConfigError("unknown predictor kind '" + s + "' (want high_order|linear)");
}

// ---------------------------------------------------------------------------
// Model configuration: a stage-partitioned ViT classifier with S stages of
// L blocks, an exit predictor after each stage, and optional low-rank
// adapters on the attention query/value projections.
// ---------------------------------------------------------------------------

struct ModelConfig {
  std::int64_t image_side = 32;
  std::int64_t patch_side = 8;
  std::int64_t channels = 1;
  std::int64_t embed_dim = 64;   // D
  std::int64_t heads = 4;
  std::int64_t mlp_ratio = 2;
  std::int64_t stages = 4;            // S
  std::int64_t blocks_per_stage = 2;  // L
  int num_classes = 16;               // K
  std::int64_t adapter_rank = 4;      // d (LoRA bottleneck)
  std::vector<PredictorKind> predictor_kinds;   // exactly S entries
  std::vector<std::int64_t> hp_proj_dims;       // one entry per HighOrder stage, in stage order
  std::int64_t hp_heads = 2;
  bool hp_conv_enabled = true;
  std::int64_t bypass_rank = 4;  // r

  std::int64_t patch_grid() const { return image_side / patch_side; }
  std::int64_t patch_tokens() const { return patch_grid() * patch_grid(); }
  std::int64_t tokens() const { return patch_tokens() + 1; }
  std::int64_t total_blocks() const { return stages * blocks_per_stage; }
  std::int64_t head_dim() const { return embed_dim / heads; }
  std::int64_t mlp_hidden() const { return mlp_ratio * embed_dim; }

  // Fill the per-stage predictor layout when unspecified: high-order heads
  // at stages 1 and 2, linear heads deeper.
  void fill_defaults() {
    if (predictor_kinds.empty()) {
      for (std::int64_t s = 0; s < stages; ++s)
        predictor_kinds.push_back(s < std::min<std::int64_t>(2, stages) ? PredictorKind::HighOrder
                                                                        : PredictorKind::Linear);
    }
    if (hp_proj_dims.empty()) {
      std::int64_t d = 16;
      for (auto k : predictor_kinds)
        if (k == PredictorKind::HighOrder) {
          hp_proj_dims.push_back(d);
          d = std::max<std::int64_t>(d / 2, 2);
        }
    }
  }

  std::int64_t hp_stage_count() const {
    std::int64_t n = 0;
    for (auto k : predictor_kinds)
      if (k == PredictorKind::HighOrder) ++n;
    return n;
  }

  void validate() const {
    if (image_side <= 0 || patch_side <= 0 || image_side % patch_side != 0)
      throw ConfigError("image_side must be a positive multiple of patch_side");
    if (channels < 1) throw ConfigError("channels must be >= 1");
    if (embed_dim <= 0 || heads <= 0 || embed_dim % heads != 0)
      throw ConfigError("embed_dim must be a positive multiple of heads");
    if (mlp_ratio < 1) throw ConfigError("mlp_ratio must be >= 1");
    if (stages < 1 || blocks_per_stage < 1)
      throw ConfigError("stages and blocks_per_stage must be >= 1");
    if (num_classes < 2) throw ConfigError("num_classes must be >= 2");
    if (static_cast<std::int64_t>(predictor_kinds.size()) != stages)
      throw ConfigError("predictor_kinds must have exactly " + std::to_string(stages) + " entries");
    if (static_cast<std::int64_t>(hp_proj_dims.size()) != hp_stage_count())
      throw ConfigError("hp_proj_dims must have one entry per high_order stage");
    for (std::size_t i = 1; i < hp_proj_dims.size(); ++i)
      if (hp_proj_dims[i] > hp_proj_dims[i - 1])
        throw ConfigError("hp_proj_dims must be weakly decreasing across stages");
    for (auto d : hp_proj_dims)
      if (d < 1) throw ConfigError("hp_proj_dims entries must be >= 1");
    if (hp_heads < 1 || embed_dim % hp_heads != 0)
      throw ConfigError("embed_dim must be a positive multiple of hp_heads");
    if (bypass_rank < 1) throw ConfigError("bypass_rank must be >= 1");
    if (adapter_rank < 0) throw ConfigError("adapter_rank must be >= 0");
  }

  json to_json() const {
    json j;
    j["image_side"] = image_side;
    j["patch_side"] = patch_side;
    j["channels"] = channels;
    j["embed_dim"] = embed_dim;
    j["heads"] = heads;
    j["mlp_ratio"] = mlp_ratio;
    j["stages"] = stages;
    j["blocks_per_stage"] = blocks_per_stage;
    j["num_classes"] = num_classes;
    j["adapter_rank"] = adapter_rank;
    std::vector<std::string> kinds;
    for (auto k : predictor_kinds) kinds.push_back(predictor_kind_name(k));
    j["predictor_kinds"] = kinds;
    j["hp_proj_dims"] = hp_proj_dims;
    j["hp_heads"] = hp_heads;
    j["hp_conv_enabled"] = hp_conv_enabled;
    j["bypass_rank"] = bypass_rank;
    return j;
  }

  static ModelConfig from_json(const json& j);
};

// ---------------------------------------------------------------------------
// Parameter registry: every learnable tensor, named, tagged frozen or
// trainable. Registry order is creation order and fixes the checkpoint
// layout.
// ---------------------------------------------------------------------------

struct ParamEntry {
  std::string name;
  Tensor tensor;
  bool frozen = false;
  bool decay = true;  // weight decay applies (matrices only)
};

class ParameterRegistry {
 public:
  Tensor add(const std::string& name, Tensor t, bool decay) {
    for (const auto& p : entries_)
      if (p.name == name) throw StateError("duplicate parameter name " + name);
    t.set_requires_grad(true);
    entries_.push_back({name, t, false, decay});
    return t;
  }

  std::vector<ParamEntry>& entries() { return entries_; }
  const std::vector<ParamEntry>& entries() const { return entries_; }

  ParamEntry* find(const std::string& name) {
    for (auto& p : entries_)
      if (p.name == name) return &p;
    return nullptr;
  }

  void set_frozen_by_prefix(const std::vector<std::string>& prefixes, bool frozen) {
    for (auto& p : entries_) {
      for (const auto& pre : prefixes) {
        if (p.name.rfind(pre, 0) == 0) {
          p.frozen = frozen;
          p.tensor.set_requires_grad(!frozen);
        }
      }
    }
  }

  std::int64_t count(bool frozen) const {
    std::int64_t n = 0;
    for (const auto& p : entries_)
      if (p.frozen == frozen) n += p.tensor.numel();
    return n;
  }

  std::int64_t total_count() const { return count(true) + count(false); }
  std::int64_t trainable_count() const { return count(false); }
  std::int64_t frozen_count() const { return count(true); }

  // FNV-1a over the raw bytes of all frozen parameters, in registry order.
  std::uint64_t frozen_bytes_hash() const {
    std::uint64_t h = 0xCBF29CE484222325ULL;
    for (const auto& p : entries_) {
      if (!p.frozen) continue;
      const auto& v = p.tensor.value();
      const auto* bytes = reinterpret_cast<const unsigned char*>(v.data());
      for (std::size_t i = 0; i < v.size() * sizeof(double); ++i) {
        h ^= bytes[i];
        h *= 0x100000001B3ULL;
      }
    }
    return h;
  }

 private:
  std::vector<ParamEntry> entries_;
};

// ---------------------------------------------------------------------------
// Transformer block with optional LoRA adapters on query/value projections.
// ---------------------------------------------------------------------------

struct LoRAAdapter {
  Tensor down;  // [D, d]
  Tensor up;    // [d, D], zero-initialized: adapted output equals frozen output
  double scaling = 1.0;
};

struct Block {
  Tensor ln1_g, ln1_b;
  Tensor wq, bq, wk, wv, bv, wo, bo;  // key bias omitted: a per-row constant in the scores, softmax-invariant
  Tensor ln2_g, ln2_b;
  Tensor w1, b1, w2, b2;
  bool has_adapters = false;
  LoRAAdapter adapt_q, adapt_v;
};

struct StageHead {
  PredictorKind kind = PredictorKind::Linear;
  BypassModule bypass;
  HighOrderPredictor hp;
  LinearPredictor lin;
};

struct ForwardResult {
  std::vector<Tensor> stage_features;  // X_i, one per stage
  std::vector<Tensor> decoupled;       // X_hat_i = bypass(X_i) + X_i
  std::vector<PredictionDistribution> predictions;
};

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

class Model {
 public:
  Model() = default;
  Model(Model&&) = default;
  Model& operator=(Model&&) = default;
  Model(const Model&) = delete;  // tensors are shared handles; no aliased copies
  Model& operator=(const Model&) = delete;

  ModelConfig config;
  ParameterRegistry registry;
  Tensor patch_w, patch_b, cls_token, pos_embed;
  std::vector<Block> blocks;
  std::vector<StageHead> heads;
  bool peft_mode = false;

  static Model build(ModelConfig cfg, std::uint64_t init_seed) {
    cfg.fill_defaults();
    cfg.validate();
    Model m;
    m.config = cfg;
    SplitMix64 rng(sub_seed(init_seed, hash64("init")));
    auto normal = [&](Shape shape, double std_dev) {
      Tensor t = Tensor::zeros(std::move(shape));
      for (auto& v : t.value()) v = rng.next_normal() * std_dev;
      return t;
    };
    const std::int64_t D = cfg.embed_dim;

    m.patch_w = m.registry.add("patch.weight", normal({cfg.patch_side * cfg.patch_side * cfg.channels, D}, 0.02), true);
    m.patch_b = m.registry.add("patch.bias", Tensor::zeros({D}), false);
    m.cls_token = m.registry.add("cls_token", normal({D}, 0.02), false);
    m.pos_embed = m.registry.add("pos_embed", normal({cfg.tokens(), D}, 0.02), true);

    for (std::int64_t i = 0; i < cfg.total_blocks(); ++i) {
      Block b;
      const std::string p = "blocks." + std::to_string(i) + ".";
      b.ln1_g = m.registry.add(p + "ln1.gamma", Tensor::full({D}, 1.0), false);
      b.ln1_b = m.registry.add(p + "ln1.beta", Tensor::zeros({D}), false);
      b.wq = m.registry.add(p + "attn.wq", normal({D, D}, 0.02), true);
      b.bq = m.registry.add(p + "attn.bq", Tensor::zeros({D}), false);
      b.wk = m.registry.add(p + "attn.wk", normal({D, D}, 0.02), true);
      b.wv = m.registry.add(p + "attn.wv", normal({D, D}, 0.02), true);
      b.bv = m.registry.add(p + "attn.bv", Tensor::zeros({D}), false);
      b.wo = m.registry.add(p + "attn.wo", normal({D, D}, 0.02), true);
      b.bo = m.registry.add(p + "attn.bo", Tensor::zeros({D}), false);
      b.ln2_g = m.registry.add(p + "ln2.gamma", Tensor::full({D}, 1.0), false);
      b.ln2_b = m.registry.add(p + "ln2.beta", Tensor::zeros({D}), false);
      b.w1 = m.registry.add(p + "mlp.w1", normal({D, cfg.mlp_hidden()}, 0.02), true);
      b.b1 = m.registry.add(p + "mlp.b1", Tensor::zeros({cfg.mlp_hidden()}), false);
      b.w2 = m.registry.add(p + "mlp.w2", normal({cfg.mlp_hidden(), D}, 0.02), true);
      b.b2 = m.registry.add(p + "mlp.b2", Tensor::zeros({D}), false);
      m.blocks.push_back(b);
    }

    std::size_t hp_dim_next = 0;
    for (std::int64_t s = 0; s < cfg.stages; ++s) {
      StageHead head;
      head.kind = cfg.predictor_kinds[static_cast<std::size_t>(s)];
      const std::string p = "predictors.stage" + std::to_string(s + 1) + ".";
      head.bypass.down = m.registry.add(p + "bypass.down", normal({D, cfg.bypass_rank}, 0.02), true);
      head.bypass.up = m.registry.add(p + "bypass.up", Tensor::zeros({cfg.bypass_rank, D}), true);
      if (head.kind == PredictorKind::HighOrder) {
        head.hp.heads = cfg.hp_heads;
        head.hp.proj_dim = cfg.hp_proj_dims[hp_dim_next++];
        head.hp.conv_enabled = cfg.hp_conv_enabled;
        const std::int64_t dh = D / cfg.hp_heads;
        for (std::int64_t h = 0; h < cfg.hp_heads; ++h) {
          head.hp.proj_a.push_back(
              m.registry.add(p + "hp.proj_a." + std::to_string(h), normal({dh, head.hp.proj_dim}, 0.05), true));
          head.hp.proj_b.push_back(
              m.registry.add(p + "hp.proj_b." + std::to_string(h), normal({dh, head.hp.proj_dim}, 0.05), true));
        }
        if (cfg.hp_conv_enabled) {
          Tensor k = Tensor::zeros({D, 3, 3});  // identity tap at init
          for (std::int64_t c = 0; c < D; ++c) k.value()[static_cast<std::size_t>(c * 9 + 4)] = 1.0;
          head.hp.conv_kernels = m.registry.add(p + "hp.conv", k, true);
        }
        const std::int64_t feat = cfg.hp_heads * head.hp.proj_dim * head.hp.proj_dim;
        head.hp.cls_w = m.registry.add(p + "hp.cls.weight", normal({feat, cfg.num_classes}, 0.02), true);
        head.hp.cls_b = m.registry.add(p + "hp.cls.bias", Tensor::zeros({cfg.num_classes}), false);
        head.hp.beta = m.registry.add(p + "beta", Tensor::full({1}, 1.0), false);
      } else {
        head.lin.w = m.registry.add(p + "linear.weight", normal({D, cfg.num_classes}, 0.02), true);
        head.lin.b = m.registry.add(p + "linear.bias", Tensor::zeros({cfg.num_classes}), false);
        head.lin.beta = m.registry.add(p + "beta", Tensor::full({1}, 1.0), false);
      }
      m.heads.push_back(head);
    }
    return m;
  }

  // Attach zero-initialized LoRA adapters to the query and value projections
  // of every block. Forward output is bitwise unchanged until training moves
  // the up-projections off zero.
  void attach_adapters(std::int64_t rank, std::uint64_t init_seed) {
    if (rank <= 0) throw ConfigError("adapter rank must be positive, got " + std::to_string(rank));
    if (!blocks.empty() && blocks[0].has_adapters) throw StateError("adapters already attached");
    SplitMix64 rng(sub_seed(init_seed, hash64("adapters")));
    auto normal = [&](Shape shape, double std_dev) {
      Tensor t = Tensor::zeros(std::move(shape));
      for (auto& v : t.value()) v = rng.next_normal() * std_dev;
      return t;
    };
    const std::int64_t D = config.embed_dim;
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      const std::string p = "adapters.blocks." + std::to_string(i) + ".";
      Block& b = blocks[i];
      b.adapt_q.down = registry.add(p + "q.down", normal({D, rank}, 0.02), true);
      b.adapt_q.up = registry.add(p + "q.up", Tensor::zeros({rank, D}), true);
      b.adapt_v.down = registry.add(p + "v.down", normal({D, rank}, 0.02), true);
      b.adapt_v.up = registry.add(p + "v.up", Tensor::zeros({rank, D}), true);
      b.has_adapters = true;
    }
    config.adapter_rank = rank;
  }

  // Mark every backbone weight frozen; adapters, bypasses, predictors and
  // the recalibration scalars stay trainable.
  void freeze_backbone() {
    registry.set_frozen_by_prefix({"patch.", "cls_token", "pos_embed", "blocks."}, true);
    peft_mode = true;
  }

  Tensor patch_embed(const Tensor& images) const {
    if (images.rank() != 4 || images.dim(1) != config.image_side ||
        images.dim(2) != config.image_side || images.dim(3) != config.channels)
      throw DimError("patch_embed: images " + shape_str(images.shape()) + " do not match config " +
                     std::to_string(config.image_side) + "x" + std::to_string(config.image_side) +
                     "x" + std::to_string(config.channels));
    Tensor patches = extract_patches(images, config.patch_side);
    Tensor projected = add_broadcast(linear(patches, patch_w), patch_b);
    return add_broadcast(prepend_token(cls_token, projected), pos_embed);
  }

  Tensor block_forward(const Block& blk, const Tensor& x) const {
    const std::int64_t H = config.heads, dh = config.head_dim();
    Tensor h = layer_norm(x, blk.ln1_g, blk.ln1_b, 1e-6);
    Tensor q = add_broadcast(linear(h, blk.wq), blk.bq);
    Tensor k = linear(h, blk.wk);
    Tensor v = add_broadcast(linear(h, blk.wv), blk.bv);
    if (blk.has_adapters) {
      q = add(q, scale(linear(linear(h, blk.adapt_q.down), blk.adapt_q.up), blk.adapt_q.scaling));
      v = add(v, scale(linear(linear(h, blk.adapt_v.down), blk.adapt_v.up), blk.adapt_v.scaling));
    }
    Tensor scores = scale(bmm(split_heads(q, H), split_heads(k, H), /*trans_b=*/true),
                          1.0 / std::sqrt(static_cast<double>(dh)));
    Tensor ctx = bmm(softmax_rows(scores), split_heads(v, H));
    Tensor merged = merge_heads(ctx, H);
    Tensor x1 = add(x, add_broadcast(linear(merged, blk.wo), blk.bo));
    Tensor m = layer_norm(x1, blk.ln2_g, blk.ln2_b, 1e-6);
    Tensor mlp = add_broadcast(linear(gelu(add_broadcast(linear(m, blk.w1), blk.b1)), blk.w2), blk.b2);
    return add(x1, mlp);
  }

  // All S intermediate stage features. X_i feeds stage i+1 unchanged; the
  // predictor path (bypass and head) never touches the inter-stage stream.
  std::vector<Tensor> forward_stages(const Tensor& tokens) const {
    std::vector<Tensor> feats;
    Tensor x = tokens;
    for (std::int64_t s = 0; s < config.stages; ++s) {
      for (std::int64_t l = 0; l < config.blocks_per_stage; ++l)
        x = block_forward(blocks[static_cast<std::size_t>(s * config.blocks_per_stage + l)], x);
      feats.push_back(x);
    }
    return feats;
  }

  PredictionDistribution predict_stage(std::int64_t stage, const Tensor& x_hat) const {
    const StageHead& head = heads[static_cast<std::size_t>(stage)];
    return head.kind == PredictorKind::HighOrder ? hp_predict(x_hat, head.hp)
                                                 : linear_predict(x_hat, head.lin);
  }

  ForwardResult forward_all(const Tensor& images) const {
    ForwardResult r;
    r.stage_features = forward_stages(patch_embed(images));
    for (std::int64_t s = 0; s < config.stages; ++s) {
      Tensor x_hat = bypass_forward(r.stage_features[static_cast<std::size_t>(s)],
                                    heads[static_cast<std::size_t>(s)].bypass);
      r.decoupled.push_back(x_hat);
      r.predictions.push_back(predict_stage(s, x_hat));
    }
    return r;
  }

  std::vector<double> beta_values() const {
    std::vector<double> out;
    for (const auto& h : heads)
      out.push_back(h.kind == PredictorKind::HighOrder ? h.hp.beta.value()[0] : h.lin.beta.value()[0]);
    return out;
  }
};

// Exact trainable parameter count of predictors, bypasses, adapters and the
// recalibration scalars, from the configured shapes.
inline std::int64_t predictor_param_count(const ModelConfig& cfg_in) {
  ModelConfig cfg = cfg_in;
  cfg.fill_defaults();
  cfg.validate();
  const std::int64_t D = cfg.embed_dim;
  std::int64_t total = 0;
  if (cfg.adapter_rank > 0)
    total += cfg.total_blocks() * 2 * (2 * D * cfg.adapter_rank);
  std::size_t hp_next = 0;
  for (std::int64_t s = 0; s < cfg.stages; ++s) {
    total += 2 * D * cfg.bypass_rank;  // bypass pair
    if (cfg.predictor_kinds[static_cast<std::size_t>(s)] == PredictorKind::HighOrder) {
      const std::int64_t d = cfg.hp_proj_dims[hp_next++];
      total += cfg.hp_heads * (D / cfg.hp_heads) * d * 2;          // paired projections
      if (cfg.hp_conv_enabled) total += D * 9;                     // depthwise kernels
      total += cfg.hp_heads * d * d * cfg.num_classes + cfg.num_classes;  // classifier
      total += 1;                                                  // beta
    } else {
      total += D * cfg.num_classes + cfg.num_classes + 1;
    }
  }
  return total;
}

// ---------------------------------------------------------------------------
// Checkpoint container: "DMPOCKPT" magic, u32 version, canonical-JSON model
// config, then each named parameter as (name length, name, rank, extents,
// little-endian f64 payload). Round trips are bitwise exact.
// ---------------------------------------------------------------------------

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline void put_f64(std::string& out, double d) {
  std::uint64_t bits;
  std::memcpy(&bits, &d, 8);
  put_u64(out, bits);
}

struct CkptReader {
  const unsigned char* p;
  std::uint64_t size;
  std::uint64_t pos = 0;
  std::string name;

  void need(std::uint64_t n, const char* what) {
    if (pos + n > size) throw ParseError(name + ": truncated reading " + std::string(what), pos);
  }

  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(p[pos + static_cast<std::uint64_t>(i)]) << (8 * i);
    pos += 4;
    return v;
  }

  std::uint64_t u64(const char* what) {
    need(8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t(p[pos + static_cast<std::uint64_t>(i)]) << (8 * i);
    pos += 8;
    return v;
  }

  double f64(const char* what) {
    std::uint64_t bits = u64(what);
    double d;
    std::memcpy(&d, &bits, 8);
    return d;
  }

  std::string str(std::uint64_t n, const char* what) {
    need(n, what);
    std::string s(reinterpret_cast<const char*>(p + pos), n);
    pos += n;
    return s;
  }
};

}  // namespace detail

constexpr std::uint32_t kCheckpointVersion = 1;

inline void save_checkpoint(const Model& m, const std::string& path) {
  std::string buf;
  buf += "DMPOCKPT";
  detail::put_u32(buf, kCheckpointVersion);
  const std::string cfg = m.config.to_json().dump();
  detail::put_u64(buf, cfg.size());
  buf += cfg;
  detail::put_u64(buf, m.registry.entries().size());
  for (const auto& p : m.registry.entries()) {
    detail::put_u32(buf, static_cast<std::uint32_t>(p.name.size()));
    buf += p.name;
    detail::put_u32(buf, static_cast<std::uint32_t>(p.tensor.rank()));
    for (auto e : p.tensor.shape()) detail::put_u64(buf, static_cast<std::uint64_t>(e));
    for (double v : p.tensor.value()) detail::put_f64(buf, v);
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write checkpoint " + path);
  f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
}

struct CheckpointData {
  ModelConfig config;
  std::vector<std::pair<std::string, Tensor>> params;
};

inline CheckpointData load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open checkpoint " + path);
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  detail::CkptReader r{bytes.data(), bytes.size(), 0, path};
  if (r.str(8, "magic") != "DMPOCKPT") throw ParseError(path + ": bad checkpoint magic", 0);
  const std::uint32_t version = r.u32("version");
  if (version != kCheckpointVersion)
    throw ParseError(path + ": unsupported checkpoint version " + std::to_string(version), 8);
  const std::uint64_t cfg_len = r.u64("config length");
  CheckpointData out;
  out.config = ModelConfig::from_json(json::parse(r.str(cfg_len, "config json")));
  const std::uint64_t n = r.u64("parameter count");
  for (std::uint64_t i = 0; i < n; ++i) {
    const std::uint32_t name_len = r.u32("name length");
    std::string name = r.str(name_len, "name");
    const std::uint32_t rank = r.u32("rank");
    Shape shape;
    std::int64_t numel = 1;
    for (std::uint32_t d = 0; d < rank; ++d) {
      shape.push_back(static_cast<std::int64_t>(r.u64("extent")));
      numel *= shape.back();
    }
    std::vector<double> data(static_cast<std::size_t>(numel));
    for (auto& v : data) v = r.f64("payload");
    out.params.emplace_back(std::move(name), Tensor::from(std::move(shape), std::move(data)));
  }
  if (r.pos != r.size) throw ParseError(path + ": trailing bytes", r.pos);
  return out;
}

// Load values into matching registry entries. strict=true requires an exact
// name set; strict=false copies the intersection (used to warm-start a
// stage-partitioned model from a pretraining checkpoint's backbone).
inline std::int64_t load_params(Model& m, const CheckpointData& ckpt, bool strict) {
  std::int64_t loaded = 0;
  std::map<std::string, const Tensor*> by_name;
  for (const auto& [name, t] : ckpt.params) by_name[name] = &t;
  for (auto& p : m.registry.entries()) {
    auto it = by_name.find(p.name);
    if (it == by_name.end()) {
      if (strict) throw ConfigError("checkpoint missing parameter " + p.name);
      continue;
    }
    if (it->second->shape() != p.tensor.shape())
      throw ConfigError("checkpoint parameter " + p.name + " has shape " +
                        shape_str(it->second->shape()) + ", model expects " +
                        shape_str(p.tensor.shape()));
    p.tensor.value() = it->second->value();
    ++loaded;
  }
  if (strict && loaded != static_cast<std::int64_t>(ckpt.params.size()))
    throw ConfigError("checkpoint has extra parameters not present in the model");
  return loaded;
}

inline ModelConfig ModelConfig::from_json(const json& j) {
  ModelConfig c;
  c.image_side = j.at("image_side").get<std::int64_t>();
  c.patch_side = j.at("patch_side").get<std::int64_t>();
  c.channels = j.at("channels").get<std::int64_t>();
  c.embed_dim = j.at("embed_dim").get<std::int64_t>();
  c.heads = j.at("heads").get<std::int64_t>();
  c.mlp_ratio = j.at("mlp_ratio").get<std::int64_t>();
  c.stages = j.at("stages").get<std::int64_t>();
  c.blocks_per_stage = j.at("blocks_per_stage").get<std::int64_t>();
  c.num_classes = j.at("num_classes").get<int>();
  c.adapter_rank = j.at("adapter_rank").get<std::int64_t>();
  c.predictor_kinds.clear();
  for (const auto& s : j.at("predictor_kinds")) c.predictor_kinds.push_back(predictor_kind_from(s.get<std::string>()));
  c.hp_proj_dims = j.at("hp_proj_dims").get<std::vector<std::int64_t>>();
  c.hp_heads = j.at("hp_heads").get<std::int64_t>();
  c.hp_conv_enabled = j.at("hp_conv_enabled").get<bool>();
  c.bypass_rank = j.at("bypass_rank").get<std::int64_t>();
  c.validate();
  return c;
}

}  // namespace dmpo
