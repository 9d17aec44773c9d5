#include "tloc/model.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

#include "tloc/error.hpp"
#include "tloc/rng.hpp"

namespace tloc::model {

using namespace tloc::ad;

std::string_view branches_name(Branches b) { return b == Branches::kDual ? "dual" : "rgb-only"; }

Branches parse_branches(std::string_view text) {
  if (text == "dual") return Branches::kDual;
  if (text == "rgb-only") return Branches::kRgbOnly;
  throw std::invalid_argument("branches must be rgb-only or dual, got '" + std::string(text) + "'");
}

void ModelConfig::validate() const {
  const auto need = [](bool ok, const std::string& what) {
    if (!ok) throw std::invalid_argument("model config: " + what);
  };
  need(patch > 0 && image_h > 0 && image_w > 0, "image and patch sizes must be positive");
  need(image_h % patch == 0 && image_w % patch == 0, "image size must be divisible by patch size");
  need(embed_dim > 0 && heads > 0 && embed_dim % heads == 0, "embed_dim must be divisible by heads");
  need(depth > 0, "depth must be positive");
  need(ffn_dim > 0 && scorer_hidden > 0, "ffn_dim and scorer_hidden must be positive");
  need(k_coarse > 0 && k_middle > 0 && k_fine > 0, "geo head class counts must be positive");
  need(!scene_head || k_scene > 0, "scene head needs a positive class count");
  need(hidden_middle > 0 && hidden_fine > 0, "head hidden sizes must be positive");
  need(embed_dim >= 2, "embed_dim must be at least 2 for layer norm");
  if (dual()) need(seg_classes > 0 && seg_embed_dim > 0, "dual mode needs segmentation classes");
  need(!mff || dual(), "mff requires dual branches");
  need(!attentive_fusion || dual(), "attentive fusion requires dual branches");
}

namespace {

const char* bool_text(bool b) { return b ? "on" : "off"; }

bool parse_bool(std::string_view key, std::string_view v) {
  if (v == "on" || v == "true" || v == "1") return true;
  if (v == "off" || v == "false" || v == "0") return false;
  throw std::invalid_argument("model config: " + std::string(key) + " must be on/off");
}

}  // namespace

std::string ModelConfig::to_text() const {
  std::ostringstream os;
  os << "image_h=" << image_h << '\n'
     << "image_w=" << image_w << '\n'
     << "patch=" << patch << '\n'
     << "seg_classes=" << seg_classes << '\n'
     << "seg_embed_dim=" << seg_embed_dim << '\n'
     << "embed_dim=" << embed_dim << '\n'
     << "depth=" << depth << '\n'
     << "heads=" << heads << '\n'
     << "ffn_dim=" << ffn_dim << '\n'
     << "branches=" << branches_name(branches) << '\n'
     << "mff=" << bool_text(mff) << '\n'
     << "attentive_fusion=" << bool_text(attentive_fusion) << '\n'
     << "scene_head=" << bool_text(scene_head) << '\n'
     << "scorer_hidden=" << scorer_hidden << '\n'
     << "k_coarse=" << k_coarse << '\n'
     << "k_middle=" << k_middle << '\n'
     << "k_fine=" << k_fine << '\n'
     << "k_scene=" << k_scene << '\n'
     << "hidden_middle=" << hidden_middle << '\n'
     << "hidden_fine=" << hidden_fine << '\n';
  return os.str();
}

ModelConfig ModelConfig::from_text(std::string_view text) {
  std::map<std::string, std::string, std::less<>> kv;
  std::istringstream is{std::string(text)};
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw std::invalid_argument("model config: malformed line '" + line + "'");
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  ModelConfig c;
  const auto take = [&](const char* key) -> std::string {
    auto it = kv.find(key);
    if (it == kv.end()) throw std::invalid_argument(std::string("model config: missing ") + key);
    std::string v = it->second;
    kv.erase(it);
    return v;
  };
  const auto num = [&](const char* key) { return static_cast<std::size_t>(std::stoull(take(key))); };
  c.image_h = num("image_h");
  c.image_w = num("image_w");
  c.patch = num("patch");
  c.seg_classes = num("seg_classes");
  c.seg_embed_dim = num("seg_embed_dim");
  c.embed_dim = num("embed_dim");
  c.depth = num("depth");
  c.heads = num("heads");
  c.ffn_dim = num("ffn_dim");
  c.branches = parse_branches(take("branches"));
  c.mff = parse_bool("mff", take("mff"));
  c.attentive_fusion = parse_bool("attentive_fusion", take("attentive_fusion"));
  c.scene_head = parse_bool("scene_head", take("scene_head"));
  c.scorer_hidden = num("scorer_hidden");
  c.k_coarse = num("k_coarse");
  c.k_middle = num("k_middle");
  c.k_fine = num("k_fine");
  c.k_scene = num("k_scene");
  c.hidden_middle = num("hidden_middle");
  c.hidden_fine = num("hidden_fine");
  if (!kv.empty()) throw std::invalid_argument("model config: unknown key " + kv.begin()->first);
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------

namespace {

constexpr double kInitStd = 0.02;

Tensor gaussian(Rng& rng, Shape shape, double stddev) {
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = rng.normal(0.0, stddev);
  return Tensor::from(std::move(shape), std::move(v), true);
}

LinearParams make_linear(Rng& rng, std::size_t in, std::size_t out) {
  return {gaussian(rng, {in, out}, kInitStd), Tensor::zeros({out}, true)};
}

LinearParams make_identity(std::size_t n) {
  std::vector<double> w(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) w[i * n + i] = 1.0;
  return {Tensor::from({n, n}, std::move(w), true), Tensor::zeros({n}, true)};
}

LayerNormParams make_ln(std::size_t n) { return {Tensor::full({n}, 1.0, true), Tensor::zeros({n}, true)}; }

BranchParams make_branch(Rng& rng, const ModelConfig& c, std::size_t in_per_pixel, bool seg) {
  BranchParams b;
  if (seg) b.seg_embed = gaussian(rng, {c.seg_classes, c.seg_embed_dim}, 1.0);
  b.patch = make_linear(rng, c.patch * c.patch * in_per_pixel, c.embed_dim);
  b.cls = gaussian(rng, {1, c.embed_dim}, kInitStd);
  b.pos = gaussian(rng, {c.tokens(), c.embed_dim}, kInitStd);
  for (std::size_t l = 0; l < c.depth; ++l) {
    BlockParams blk;
    blk.ln1 = make_ln(c.embed_dim);
    blk.qkv = make_linear(rng, c.embed_dim, 3 * c.embed_dim);
    blk.out = make_linear(rng, c.embed_dim, c.embed_dim);
    blk.ln2 = make_ln(c.embed_dim);
    blk.ffn1 = make_linear(rng, c.embed_dim, c.ffn_dim);
    blk.ffn2 = make_linear(rng, c.ffn_dim, c.embed_dim);
    b.blocks.push_back(std::move(blk));
  }
  return b;
}

HeadParams make_head(Rng& rng, std::size_t in, std::size_t hidden, std::size_t out) {
  HeadParams h;
  if (hidden == 0) {
    h.layers.push_back(make_linear(rng, in, out));
  } else {
    h.layers.push_back(make_linear(rng, in, hidden));
    h.layers.push_back(make_linear(rng, hidden, out));
  }
  return h;
}

Tensor apply_head(const HeadParams& h, const Tensor& x) {
  Tensor y = x;
  for (std::size_t i = 0; i < h.layers.size(); ++i) {
    if (i > 0) y = gelu(y);
    y = linear(y, h.layers[i].w, h.layers[i].b);
  }
  return y;
}

// Places patch embeddings and the CLS token into a [batch·T × C] sequence and
// adds positional embeddings.
Tensor assemble_tokens(const Tensor& patches, const BranchParams& p, std::size_t batch, std::size_t n,
                       std::size_t c) {
  const std::size_t t = n + 1;
  std::vector<std::size_t> patch_rows;
  patch_rows.reserve(batch * n);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t k = 0; k < n; ++k) patch_rows.push_back(b * t + 1 + k);
  }
  const std::vector<std::int32_t> zeros(batch, 0);
  const Tensor cls = embedding(p.cls, zeros);
  Tensor tokens = replace_rows(Tensor::zeros({batch * t, c}), patch_rows, patches);
  tokens = replace_rows(tokens, cls_rows(batch, t), cls);
  return reshape(add(reshape(tokens, {batch, t, c}), p.pos), {batch * t, c});
}

}  // namespace

std::vector<std::size_t> cls_rows(std::size_t batch, std::size_t tokens) {
  std::vector<std::size_t> rows(batch);
  for (std::size_t b = 0; b < batch; ++b) rows[b] = b * tokens;
  return rows;
}

Tensor patch_embed_rgb(const ModelConfig& c, const BranchParams& p, std::span<const double> rgb, std::size_t batch) {
  const std::size_t h = c.image_h, w = c.image_w, ps = c.patch, ch = ModelConfig::kRgbChannels;
  if (batch == 0 || rgb.size() != batch * ch * h * w) {
    throw std::invalid_argument("rgb input has " + std::to_string(rgb.size()) + " values, expected " +
                                std::to_string(batch * ch * h * w));
  }
  const std::size_t gw = w / ps, n = c.num_patches(), width = ps * ps * ch;
  std::vector<double> flat(batch * n * width);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t k = 0; k < n; ++k) {
      const std::size_t py = k / gw, px = k % gw;
      double* dst = flat.data() + (b * n + k) * width;
      for (std::size_t dy = 0; dy < ps; ++dy) {
        for (std::size_t dx = 0; dx < ps; ++dx) {
          for (std::size_t q = 0; q < ch; ++q) {
            const std::size_t y = py * ps + dy, x = px * ps + dx;
            *dst++ = rgb[((b * ch + q) * h + y) * w + x];
          }
        }
      }
    }
  }
  const Tensor patches = linear(Tensor::from({batch * n, width}, std::move(flat)), p.patch.w, p.patch.b);
  return assemble_tokens(patches, p, batch, n, c.embed_dim);
}

Tensor patch_embed_seg(const ModelConfig& c, const BranchParams& p, std::span<const std::int32_t> seg,
                       std::size_t batch) {
  const std::size_t h = c.image_h, w = c.image_w, ps = c.patch;
  if (batch == 0 || seg.size() != batch * h * w) {
    throw std::invalid_argument("segmentation input has " + std::to_string(seg.size()) + " values, expected " +
                                std::to_string(batch * h * w));
  }
  const std::size_t gw = w / ps, n = c.num_patches();
  // Pixel ids in (patch, dy, dx) order so the looked-up embeddings reshape
  // directly into flattened patches.
  std::vector<std::int32_t> ids;
  ids.reserve(seg.size());
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t k = 0; k < n; ++k) {
      const std::size_t py = k / gw, px = k % gw;
      for (std::size_t dy = 0; dy < ps; ++dy) {
        for (std::size_t dx = 0; dx < ps; ++dx) ids.push_back(seg[(b * h + py * ps + dy) * w + px * ps + dx]);
      }
    }
  }
  const Tensor pixels = embedding(p.seg_embed, ids);
  const Tensor flat = reshape(pixels, {batch * n, ps * ps * c.seg_embed_dim});
  return assemble_tokens(linear(flat, p.patch.w, p.patch.b), p, batch, n, c.embed_dim);
}

Tensor encoder_block(const Tensor& x, const BlockParams& p, std::size_t batch, std::size_t heads,
                     std::vector<double>* attention) {
  const Tensor qkv = linear(layer_norm(x, p.ln1.gain, p.ln1.bias), p.qkv.w, p.qkv.b);
  const Tensor y = add(x, linear(self_attention(qkv, batch, heads, attention), p.out.w, p.out.b));
  const Tensor hidden = gelu(linear(layer_norm(y, p.ln2.gain, p.ln2.bias), p.ffn1.w, p.ffn1.b));
  return add(y, linear(hidden, p.ffn2.w, p.ffn2.b));
}

BranchPair mff_exchange(const ModelConfig& config, const Tensor& rgb, const Tensor& seg, const FusionParams& p,
                        std::size_t batch) {
  if (!config.dual() || !config.mff) throw std::logic_error("mff_exchange requires a dual-branch model with MFF on");
  const auto rows = cls_rows(batch, rgb.dim(0) / batch);
  const Tensor f_rgb = linear(select_rows(rgb, rows), p.f.w, p.f.b);
  const Tensor f_seg = linear(select_rows(seg, rows), p.f.w, p.f.b);
  const Tensor fused = linear(add(f_rgb, f_seg), p.g.w, p.g.b);
  return {replace_rows(rgb, rows, fused), replace_rows(seg, rows, fused)};
}

Tensor branch_scores(const Tensor& cls_rgb, const Tensor& cls_seg, const ScorerParams& p) {
  const std::size_t batch = cls_rgb.dim(0);
  // Both CLS tokens go through the same scorer; stacking them is one pass.
  const Tensor stacked = concat({cls_rgb, cls_seg}, 0);
  const Tensor s = linear(gelu(linear(stacked, p.hidden.w, p.hidden.b)), p.out.w, p.out.b);
  return softmax(transpose(reshape(s, {2, batch})), 1);
}

FusedFeatures attentive_fuse(const Tensor& cls_rgb, const Tensor& cls_seg, const ScorerParams& p) {
  const Tensor w = branch_scores(cls_rgb, cls_seg, p);
  const Tensor f_rgb = row_scale(cls_rgb, shift(slice(w, 1, 0, 1), 1.0));
  const Tensor f_seg = row_scale(cls_seg, shift(slice(w, 1, 1, 1), 1.0));
  return {concat({f_rgb, f_seg}, 1), w};
}

std::vector<double> attention_export(const ForwardResult& result, std::size_t layer, bool seg_branch,
                                     std::size_t sample) {
  if (!result.attention) throw std::logic_error("attention was not recorded for this forward pass");
  const AttentionMaps& a = *result.attention;
  const auto& maps = seg_branch ? a.seg : a.rgb;
  if (layer >= maps.size()) throw std::out_of_range("no attention maps for requested layer/branch");
  if (sample >= a.batch) throw std::out_of_range("sample index out of range");
  const std::size_t per = a.heads * a.tokens * a.tokens;
  const auto begin = maps[layer].begin() + static_cast<std::ptrdiff_t>(sample * per);
  return {begin, begin + static_cast<std::ptrdiff_t>(per)};
}

// ---------------------------------------------------------------------------

Model::Model(const ModelConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  Rng rng(seed, "init");
  const auto& c = config_;
  rgb_ = make_branch(rng, c, ModelConfig::kRgbChannels, false);
  if (c.dual()) seg_ = make_branch(rng, c, c.seg_embed_dim, true);
  if (c.mff) {
    for (std::size_t l = 0; l < c.depth; ++l) fusion_.push_back({make_identity(c.embed_dim), make_identity(c.embed_dim)});
  }
  if (c.attentive_fusion) {
    scorer_.hidden = make_linear(rng, c.embed_dim, c.scorer_hidden);
    scorer_.out = make_linear(rng, c.scorer_hidden, 1);
  }
  const std::size_t fused = 2 * c.embed_dim;
  coarse_ = make_head(rng, fused, 0, c.k_coarse);
  middle_ = make_head(rng, fused, c.hidden_middle, c.k_middle);
  fine_ = make_head(rng, fused, c.hidden_fine, c.k_fine);
  if (c.scene_head) scene_ = make_head(rng, fused, 0, c.k_scene);
  register_params();
}

void Model::register_params() {
  params_.clear();
  const auto lin = [&](const std::string& name, const LinearParams& p) {
    params_.push_back({name + ".w", p.w});
    params_.push_back({name + ".b", p.b});
  };
  const auto branch = [&](const std::string& name, const BranchParams& b) {
    if (b.seg_embed.defined()) params_.push_back({name + ".embed", b.seg_embed});
    lin(name + ".patch", b.patch);
    params_.push_back({name + ".cls", b.cls});
    params_.push_back({name + ".pos", b.pos});
    for (std::size_t l = 0; l < b.blocks.size(); ++l) {
      const auto& blk = b.blocks[l];
      const std::string p = name + ".block" + std::to_string(l);
      params_.push_back({p + ".ln1.g", blk.ln1.gain});
      params_.push_back({p + ".ln1.b", blk.ln1.bias});
      lin(p + ".qkv", blk.qkv);
      lin(p + ".out", blk.out);
      params_.push_back({p + ".ln2.g", blk.ln2.gain});
      params_.push_back({p + ".ln2.b", blk.ln2.bias});
      lin(p + ".ffn1", blk.ffn1);
      lin(p + ".ffn2", blk.ffn2);
    }
  };
  const auto head = [&](const std::string& name, const HeadParams& h) {
    for (std::size_t i = 0; i < h.layers.size(); ++i) lin(name + ".fc" + std::to_string(i), h.layers[i]);
  };
  branch("rgb", rgb_);
  if (config_.dual()) branch("seg", seg_);
  for (std::size_t l = 0; l < fusion_.size(); ++l) {
    lin("mff" + std::to_string(l) + ".f", fusion_[l].f);
    lin("mff" + std::to_string(l) + ".g", fusion_[l].g);
  }
  if (config_.attentive_fusion) {
    lin("scorer.hidden", scorer_.hidden);
    lin("scorer.out", scorer_.out);
  }
  head("head.coarse", coarse_);
  head("head.middle", middle_);
  head("head.fine", fine_);
  if (config_.scene_head) head("head.scene", scene_);
}

std::size_t Model::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.tensor.numel();
  return n;
}

HeadParams& Model::head(std::string_view name) {
  if (name == "coarse") return coarse_;
  if (name == "middle") return middle_;
  if (name == "fine") return fine_;
  if (name == "scene") return scene_;
  throw std::invalid_argument("unknown head " + std::string(name));
}

void Model::copy_parameters_from(const Model& other) {
  if (!(other.config_ == config_)) throw std::invalid_argument("copy_parameters_from: configuration mismatch");
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const auto src = other.params_[i].tensor.data();
    auto dst = params_[i].tensor.mutable_data();
    std::copy(src.begin(), src.end(), dst.begin());
  }
}

ForwardResult Model::forward(const ImageBatch& images, const ForwardOptions& options) const {
  const auto& c = config_;
  const std::size_t batch = images.batch;
  if (c.dual() && images.seg.empty()) throw std::invalid_argument("dual-branch model requires a segmentation input");
  if (!c.dual() && !images.seg.empty()) throw std::invalid_argument("rgb-only model does not accept a segmentation input");

  ForwardResult r;
  if (options.record_attention) {
    r.attention = AttentionMaps{batch, c.heads, c.tokens(), {}, {}};
    r.attention->rgb.resize(c.depth);
    if (c.dual()) r.attention->seg.resize(c.depth);
  }
  Tensor x_rgb = patch_embed_rgb(c, rgb_, images.rgb, batch);
  Tensor x_seg;
  if (c.dual()) x_seg = patch_embed_seg(c, seg_, images.seg, batch);
  for (std::size_t l = 0; l < c.depth; ++l) {
    x_rgb = encoder_block(x_rgb, rgb_.blocks[l], batch, c.heads, r.attention ? &r.attention->rgb[l] : nullptr);
    if (c.dual()) {
      x_seg = encoder_block(x_seg, seg_.blocks[l], batch, c.heads, r.attention ? &r.attention->seg[l] : nullptr);
      if (c.mff) {
        auto pair = mff_exchange(c, x_rgb, x_seg, fusion_[l], batch);
        x_rgb = std::move(pair.rgb);
        x_seg = std::move(pair.seg);
      }
    }
  }
  const auto rows = cls_rows(batch, c.tokens());
  const Tensor cls_rgb = select_rows(x_rgb, rows);
  if (!c.dual()) {
    r.fused = concat({cls_rgb, cls_rgb}, 1);
  } else {
    const Tensor cls_seg = select_rows(x_seg, rows);
    if (c.attentive_fusion) {
      auto fused = attentive_fuse(cls_rgb, cls_seg, scorer_);
      r.fused = std::move(fused.fused);
      r.branch_weights = std::move(fused.weights);
    } else {
      r.fused = concat({cls_rgb, cls_seg}, 1);
    }
  }
  r.rgb_tokens = x_rgb;
  r.seg_tokens = x_seg;
  r.coarse = apply_head(coarse_, r.fused);
  r.middle = apply_head(middle_, r.fused);
  r.fine = apply_head(fine_, r.fused);
  if (c.scene_head) r.scene = apply_head(scene_, r.fused);
  return r;
}

// ---------------------------------------------------------------------------
// Checkpoint I/O

namespace {

constexpr std::array<char, 8> kCheckpointMagic{'T', 'L', 'O', 'C', 'K', 'P', '1', '\0'};

template <typename T>
void put_le(std::ostream& out, T v) {
  static_assert(std::is_unsigned_v<T>);
  char bytes[sizeof(T)];
  for (std::size_t i = 0; i < sizeof(T); ++i) bytes[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  out.write(bytes, sizeof(T));
}

template <typename T>
T get_le(std::istream& in) {
  unsigned char bytes[sizeof(T)];
  if (!in.read(reinterpret_cast<char*>(bytes), sizeof(T))) throw IoError("checkpoint truncated");
  T v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(bytes[i]) << (8 * i);
  return v;
}

}  // namespace

void save_checkpoint(std::ostream& out, const Model& model) {
  out.write(kCheckpointMagic.data(), kCheckpointMagic.size());
  const std::string cfg = model.config().to_text();
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(cfg.size()));
  out.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));
  const auto& params = model.parameters();
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params) {
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(p.name.size()));
    out.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(p.tensor.rank()));
    for (auto d : p.tensor.shape()) put_le<std::uint32_t>(out, static_cast<std::uint32_t>(d));
  }
  for (const auto& p : params) {
    for (double v : p.tensor.data()) put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
  }
  if (!out) throw IoError("failed writing checkpoint");
}

void save_checkpoint(const std::string& path, const Model& model) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open checkpoint for writing: " + path);
  save_checkpoint(out, model);
  out.flush();
  if (!out) throw IoError("failed writing checkpoint: " + path);
}

Model load_checkpoint(std::istream& in) {
  std::array<char, 8> magic{};
  if (!in.read(magic.data(), magic.size()) || magic != kCheckpointMagic) throw IoError("not a TLOCKP1 checkpoint");
  const auto cfg_len = get_le<std::uint32_t>(in);
  std::string cfg(cfg_len, '\0');
  if (!in.read(cfg.data(), cfg_len)) throw IoError("checkpoint truncated in config block");
  ModelConfig config;
  try {
    config = ModelConfig::from_text(cfg);
  } catch (const std::invalid_argument& e) {
    throw IoError(std::string("checkpoint config: ") + e.what());
  }
  Model model(config, 0);
  const auto& params = model.parameters();
  const auto count = get_le<std::uint32_t>(in);
  if (count != params.size()) throw IoError("checkpoint tensor count does not match its config");
  for (const auto& p : params) {
    const auto len = get_le<std::uint32_t>(in);
    std::string name(len, '\0');
    if (!in.read(name.data(), len)) throw IoError("checkpoint truncated in manifest");
    const auto rank = get_le<std::uint32_t>(in);
    Shape shape(rank);
    for (auto& d : shape) d = get_le<std::uint32_t>(in);
    if (name != p.name || shape != p.tensor.shape()) {
      throw IoError("checkpoint manifest entry " + name + " " + shape_str(shape) + " does not match expected " +
                    p.name + " " + shape_str(p.tensor.shape()));
    }
  }
  for (const auto& p : params) {
    Tensor t = p.tensor;
    for (double& v : t.mutable_data()) v = std::bit_cast<double>(get_le<std::uint64_t>(in));
  }
  return model;
}

Model load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint: " + path);
  return load_checkpoint(in);
}

}  // namespace tloc::model
