#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

#include "fixtures.hpp"
#include "tloc/error.hpp"
#include "tloc/model.hpp"

using namespace tloc;
using namespace tloc::model;
using ad::Tensor;
using tloc::testing::random_images;
using tloc::testing::randomize;
using tloc::testing::tiny_config;

namespace {

void fill(const Tensor& t, double value) {
  auto copy = t;
  for (auto& v : copy.mutable_data()) v = value;
}

void zero_outputs(Model& m) {
  for (BranchParams* b : {&m.rgb(), &m.seg()}) {
    for (auto& blk : b->blocks) {
      fill(blk.out.w, 0.0);
      fill(blk.out.b, 0.0);
      fill(blk.ffn2.w, 0.0);
      fill(blk.ffn2.b, 0.0);
    }
  }
}

bool bitwise_equal(std::span<const double> a, std::span<const double> b) {
  return a.size() == b.size() && std::equal(a.begin(), a.end(), b.begin());
}

ModelConfig toy_config() {
  ModelConfig c;
  c.k_coarse = 5;
  c.k_middle = 8;
  c.k_fine = 16;
  c.k_scene = 4;
  c.hidden_middle = 32;
  c.hidden_fine = 64;
  return c;
}

}  // namespace

TEST_CASE("config validation and text round trip") {
  ModelConfig c = toy_config();
  CHECK_NOTHROW(c.validate());
  CHECK(ModelConfig::from_text(c.to_text()) == c);
  ModelConfig bad = c;
  bad.heads = 3;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = c;
  bad.patch = 5;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = c;
  bad.branches = Branches::kRgbOnly;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);  // mff needs dual
  bad.mff = false;
  bad.attentive_fusion = false;
  CHECK_NOTHROW(bad.validate());
  CHECK(parse_branches("rgb-only") == Branches::kRgbOnly);
  CHECK(parse_branches("dual") == Branches::kDual);
  CHECK_THROWS_AS(parse_branches("both"), std::invalid_argument);
}

TEST_CASE("patch_embed") {
  const ModelConfig c = toy_config();
  Model m(c, 1);
  Rng rng(2);
  const ImageBatch img = random_images(c, 1, rng);
  const Tensor x = patch_embed_rgb(c, m.rgb(), img.rgb, 1);
  CHECK(x.shape() == ad::Shape{65, c.embed_dim});
  CHECK(patch_embed_seg(c, m.seg(), img.seg, 1).shape() == ad::Shape{65, c.embed_dim});
  CHECK_THROWS_AS(patch_embed_rgb(c, m.rgb(), std::span<const double>(img.rgb).first(10), 1), std::invalid_argument);

  // Zero image and zero projection bias: patch tokens are the position rows.
  const std::vector<double> zero(3 * 32 * 32, 0.0);
  const Tensor z = patch_embed_rgb(c, m.rgb(), zero, 1);
  const auto pos = m.rgb().pos.data();
  const std::size_t C = c.embed_dim;
  for (std::size_t i = C; i < 65 * C; ++i) CHECK(z.data()[i] == pos[i]);
  for (std::size_t j = 0; j < C; ++j) CHECK(z.data()[j] == m.rgb().cls.data()[j] + pos[j]);

  // Swapping patches 3 and 10 swaps exactly those token rows (before position add).
  std::vector<double> swapped = img.rgb;
  const auto patch_pixel = [&](std::size_t k, std::size_t q, std::size_t dy, std::size_t dx) {
    return (q * 32 + (k / 8) * 4 + dy) * 32 + (k % 8) * 4 + dx;
  };
  for (std::size_t q = 0; q < 3; ++q) {
    for (std::size_t dy = 0; dy < 4; ++dy) {
      for (std::size_t dx = 0; dx < 4; ++dx) std::swap(swapped[patch_pixel(3, q, dy, dx)], swapped[patch_pixel(10, q, dy, dx)]);
    }
  }
  const Tensor y = patch_embed_rgb(c, m.rgb(), swapped, 1);
  for (std::size_t t = 0; t < 65; ++t) {
    const std::size_t src = t == 4 ? 11 : t == 11 ? 4 : t;
    for (std::size_t j = 0; j < C; ++j) {
      const double before = x.data()[src * C + j] - pos[src * C + j];
      const double after = y.data()[t * C + j] - pos[t * C + j];
      CHECK(std::abs(before - after) < 1e-15);
    }
    if (t != 4 && t != 11) {
      CHECK(bitwise_equal(x.data().subspan(t * C, C), y.data().subspan(t * C, C)));
    }
  }
}

TEST_CASE("encoder block with zeroed output projections is the identity") {
  const ModelConfig c = toy_config();
  Model m(c, 3);
  Rng rng(4);
  randomize(m, rng, 0.2);
  zero_outputs(m);
  std::vector<double> v(2 * 65 * c.embed_dim);
  for (auto& e : v) e = rng.normal();
  const Tensor x = Tensor::from({130, c.embed_dim}, v);
  const Tensor y = encoder_block(x, m.rgb().blocks[0], 2, c.heads);
  CHECK(y.shape() == x.shape());
  CHECK(bitwise_equal(x.data(), y.data()));

  randomize(m, rng, 0.2);
  CHECK(encoder_block(x, m.rgb().blocks[1], 2, c.heads).shape() == x.shape());
}

TEST_CASE("trunk with zeroed output projections passes tokens through") {
  ModelConfig c = toy_config();
  c.mff = false;
  Model m(c, 5);
  zero_outputs(m);
  Rng rng(6);
  const ImageBatch img = random_images(c, 2, rng);
  const ForwardResult r = m.forward(img);
  CHECK(bitwise_equal(r.rgb_tokens.data(), patch_embed_rgb(c, m.rgb(), img.rgb, 2).data()));
  CHECK(bitwise_equal(r.seg_tokens.data(), patch_embed_seg(c, m.seg(), img.seg, 2).data()));
}

TEST_CASE("mff_exchange") {
  ModelConfig c = toy_config();
  c.embed_dim = 2;
  c.heads = 1;
  Model m(c, 7);
  const FusionParams& f = m.fusion()[0];  // identity at init
  const Tensor rgb = Tensor::from({3, 2}, {1, 2, 5, 6, 7, 8});
  const Tensor seg = Tensor::from({3, 2}, {3, 4, -1, -2, 0.5, 0.25});
  const BranchPair out = mff_exchange(c, rgb, seg, f, 1);
  CHECK(out.rgb.at({0, 0}) == 4);
  CHECK(out.rgb.at({0, 1}) == 6);
  CHECK(out.seg.at({0, 0}) == 4);
  CHECK(out.seg.at({0, 1}) == 6);
  CHECK(bitwise_equal(out.rgb.data().subspan(2), rgb.data().subspan(2)));
  CHECK(bitwise_equal(out.seg.data().subspan(2), seg.data().subspan(2)));

  Rng rng(8);
  randomize(m, rng, 1.0);
  fill(f.f.b, 0.0);
  fill(f.g.b, 0.0);
  const Tensor zr = Tensor::from({3, 2}, {0, 0, 5, 6, 7, 8});
  const Tensor zs = Tensor::from({3, 2}, {0, 0, -1, -2, 0.5, 0.25});
  const BranchPair zo = mff_exchange(c, zr, zs, f, 1);
  CHECK(zo.rgb.at({0, 0}) == 0);
  CHECK(zo.seg.at({0, 1}) == 0);

  ModelConfig off = c;
  off.mff = false;
  CHECK_THROWS_AS(mff_exchange(off, rgb, seg, f, 1), std::logic_error);
  ModelConfig single = off;
  single.branches = Branches::kRgbOnly;
  single.attentive_fusion = false;
  CHECK_THROWS_AS(mff_exchange(single, rgb, seg, f, 1), std::logic_error);
}

TEST_CASE("attentive_fuse") {
  ModelConfig c = toy_config();
  c.embed_dim = 2;
  c.heads = 1;
  Model m(c, 9);
  fill(m.scorer().out.w, 0.0);
  fill(m.scorer().out.b, 0.0);
  const FusedFeatures f = attentive_fuse(Tensor::from({1, 2}, {2, 0}), Tensor::from({1, 2}, {0, 2}), m.scorer());
  CHECK(f.weights.at({0, 0}) == 0.5);
  CHECK(f.weights.at({0, 1}) == 0.5);
  const double expect[] = {3, 0, 0, 3};
  for (std::size_t i = 0; i < 4; ++i) CHECK(f.fused.data()[i] == expect[i]);

  Rng rng(10);
  randomize(m, rng, 2.0);
  for (int trial = 0; trial < 50; ++trial) {
    const Tensor a = Tensor::from({1, 2}, {rng.normal(), rng.normal()});
    const Tensor b = Tensor::from({1, 2}, {0, 0});
    const FusedFeatures g = attentive_fuse(a, b, m.scorer());
    CHECK(std::abs(g.weights.at({0, 0}) + g.weights.at({0, 1}) - 1.0) < 1e-12);
    CHECK(g.fused.at({0, 2}) == 0);
    CHECK(g.fused.at({0, 3}) == 0);
  }
}

TEST_CASE("MFF symmetry: swapping branches swaps the halves of f_mm") {
  const ModelConfig c = toy_config();
  Model m(c, 11);
  Rng rng(12);
  randomize(m, rng, 0.2);
  const std::size_t batch = 2, T = c.tokens(), C = c.embed_dim;
  std::vector<double> va(batch * T * C), vb(batch * T * C);
  for (auto& e : va) e = rng.normal();
  for (auto& e : vb) e = rng.normal();
  const auto run = [&](const Tensor& first, const Tensor& second, const BranchParams& pa, const BranchParams& pb) {
    Tensor a = first, b = second;
    for (std::size_t l = 0; l < c.depth; ++l) {
      a = encoder_block(a, pa.blocks[l], batch, c.heads);
      b = encoder_block(b, pb.blocks[l], batch, c.heads);
      auto ex = mff_exchange(c, a, b, m.fusion()[l], batch);
      a = ex.rgb;
      b = ex.seg;
    }
    const auto rows = cls_rows(batch, T);
    return attentive_fuse(select_rows(a, rows), select_rows(b, rows), m.scorer());
  };
  const Tensor A = Tensor::from({batch * T, C}, va);
  const Tensor B = Tensor::from({batch * T, C}, vb);
  const FusedFeatures ab = run(A, B, m.rgb(), m.seg());
  const FusedFeatures ba = run(B, A, m.seg(), m.rgb());
  for (std::size_t s = 0; s < batch; ++s) {
    for (std::size_t j = 0; j < C; ++j) {
      CHECK(ab.fused.at({s, j}) == ba.fused.at({s, C + j}));
      CHECK(ab.fused.at({s, C + j}) == ba.fused.at({s, j}));
    }
    CHECK(ab.weights.at({s, 0}) == ba.weights.at({s, 1}));
  }
}

TEST_CASE("forward contract") {
  const ModelConfig c = toy_config();
  Model m(c, 13);
  Rng rng(14);
  const ImageBatch img = random_images(c, 3, rng);
  const ForwardResult r = m.forward(img);
  CHECK(r.coarse.shape() == ad::Shape{3, 5});
  CHECK(r.middle.shape() == ad::Shape{3, 8});
  CHECK(r.fine.shape() == ad::Shape{3, 16});
  CHECK(r.scene.shape() == ad::Shape{3, 4});
  CHECK(r.fused.shape() == ad::Shape{3, 2 * c.embed_dim});
  CHECK(r.branch_weights.shape() == ad::Shape{3, 2});

  ImageBatch no_seg = img;
  no_seg.seg.clear();
  CHECK_THROWS_AS(m.forward(no_seg), std::invalid_argument);

  ModelConfig rc = c;
  rc.branches = Branches::kRgbOnly;
  rc.mff = rc.attentive_fusion = false;
  Model rm(rc, 13);
  CHECK_THROWS_AS(rm.forward(img), std::invalid_argument);
  const ForwardResult rr = rm.forward(no_seg);
  CHECK(rr.fine.shape() == ad::Shape{3, 16});
  CHECK_FALSE(rr.branch_weights.defined());
  // Single branch: f_mm is the CLS twice.
  for (std::size_t s = 0; s < 3; ++s) {
    for (std::size_t j = 0; j < c.embed_dim; ++j) CHECK(rr.fused.at({s, j}) == rr.fused.at({s, c.embed_dim + j}));
  }

  ModelConfig nc = c;
  nc.scene_head = false;
  CHECK_FALSE(Model(nc, 1).forward(img).scene.defined());
}

TEST_CASE("without MFF the seg input cannot reach the rgb branch") {
  ModelConfig c = toy_config();
  c.mff = false;
  Model m(c, 15);
  Rng rng(16);
  randomize(m, rng, 0.1);
  const ImageBatch img = random_images(c, 2, rng);
  const ForwardResult base = m.forward(img);
  for (int trial = 0; trial < 5; ++trial) {
    ImageBatch other = img;
    for (auto& s : other.seg) s = static_cast<std::int32_t>(rng.below(c.seg_classes));
    const ForwardResult r = m.forward(other);
    CHECK(bitwise_equal(base.rgb_tokens.data(), r.rgb_tokens.data()));
    CHECK_FALSE(bitwise_equal(base.seg_tokens.data(), r.seg_tokens.data()));
  }
  // With MFF the same perturbation does leak into the rgb branch.
  ModelConfig cm = c;
  cm.mff = true;
  Model mm(cm, 15);
  ImageBatch other = img;
  for (auto& s : other.seg) s = (s + 1) % static_cast<std::int32_t>(c.seg_classes);
  CHECK_FALSE(bitwise_equal(mm.forward(img).rgb_tokens.data(), mm.forward(other).rgb_tokens.data()));
}

TEST_CASE("attention export") {
  const ModelConfig c = toy_config();
  Model m(c, 17);
  Rng rng(18);
  const ImageBatch img = random_images(c, 2, rng);
  const ForwardResult plain = m.forward(img);
  CHECK_THROWS_AS(attention_export(plain, 0, false, 0), std::logic_error);

  const ForwardResult r = m.forward(img, {.record_attention = true});
  const std::size_t T = c.tokens();
  for (std::size_t l = 0; l < c.depth; ++l) {
    for (bool seg : {false, true}) {
      const auto a = attention_export(r, l, seg, 1);
      REQUIRE(a.size() == c.heads * T * T);
      for (std::size_t row = 0; row < c.heads * T; ++row) {
        double s = 0;
        for (std::size_t j = 0; j < T; ++j) s += a[row * T + j];
        CHECK(std::abs(s - 1.0) < 1e-10);
      }
    }
  }
  CHECK_THROWS_AS(attention_export(r, c.depth, false, 0), std::out_of_range);
  CHECK_THROWS_AS(attention_export(r, 0, false, 2), std::out_of_range);

  // Zero query/key weights force uniform attention.
  for (BranchParams* b : {&m.rgb(), &m.seg()}) {
    for (auto& blk : b->blocks) {
      fill(blk.qkv.w, 0.0);
      fill(blk.qkv.b, 0.0);
    }
  }
  const ForwardResult u = m.forward(img, {.record_attention = true});
  for (double p : attention_export(u, 1, true, 0)) CHECK(std::abs(p - 1.0 / T) < 1e-15);
}

TEST_CASE("argmax is stable under positive logit scaling") {
  const ModelConfig c = toy_config();
  Model m(c, 19);
  Rng rng(20);
  randomize(m, rng, 0.1);
  const ForwardResult r = m.forward(random_images(c, 4, rng));
  for (const Tensor* t : {&r.coarse, &r.middle, &r.fine, &r.scene}) {
    const std::size_t k = t->dim(1);
    for (double s : {1e-3, 0.5, 7.0, 1e3}) {
      const Tensor scaled = ad::scale(*t, s);
      for (std::size_t b = 0; b < 4; ++b) {
        const auto row = t->data().subspan(b * k, k);
        const auto srow = scaled.data().subspan(b * k, k);
        CHECK(std::max_element(row.begin(), row.end()) - row.begin() ==
              std::max_element(srow.begin(), srow.end()) - srow.begin());
      }
    }
  }
}

TEST_CASE("checkpoint round trip") {
  const ModelConfig c = toy_config();
  Model m(c, 21);
  Rng rng(22);
  randomize(m, rng, 0.1);
  std::stringstream buf;
  save_checkpoint(buf, m);
  const std::string bytes = buf.str();
  CHECK(bytes.compare(0, 8, std::string("TLOCKP1\0", 8)) == 0);
  std::istringstream in(bytes);
  const Model back = load_checkpoint(in);
  CHECK(back.config() == c);
  const ImageBatch img = random_images(c, 2, rng);
  CHECK(bitwise_equal(m.forward(img).fine.data(), back.forward(img).fine.data()));
  std::stringstream again;
  save_checkpoint(again, back);
  CHECK(again.str() == bytes);

  std::istringstream bad_magic("TLOCKP2" + bytes.substr(7));
  CHECK_THROWS_AS(load_checkpoint(bad_magic), IoError);
  std::istringstream truncated(bytes.substr(0, bytes.size() / 2));
  CHECK_THROWS_AS(load_checkpoint(truncated), IoError);
  CHECK_THROWS_AS(load_checkpoint(std::string("/nonexistent/x.ckpt")), IoError);

  Model copy(c, 99);
  copy.copy_parameters_from(m);
  CHECK(bitwise_equal(copy.forward(img).coarse.data(), m.forward(img).coarse.data()));
  ModelConfig other = c;
  other.k_fine = 17;
  Model mismatched(other, 1);
  CHECK_THROWS_AS(mismatched.copy_parameters_from(m), std::invalid_argument);
}

TEST_CASE("parameter init") {
  const ModelConfig c = toy_config();
  Model a(c, 23), b(c, 23), d(c, 24);
  CHECK(bitwise_equal(a.parameters()[5].tensor.data(), b.parameters()[5].tensor.data()));
  CHECK_FALSE(bitwise_equal(a.rgb().patch.w.data(), d.rgb().patch.w.data()));
  // Fusion projections start at the identity.
  const auto f = a.fusion()[0].f.w.data();
  for (std::size_t i = 0; i < c.embed_dim; ++i) {
    for (std::size_t j = 0; j < c.embed_dim; ++j) CHECK(f[i * c.embed_dim + j] == (i == j ? 1.0 : 0.0));
  }
  // Weights near N(0, 0.02²).
  const auto w = a.head("fine").layers[0].w.data();
  double s2 = 0;
  for (double v : w) s2 += v * v;
  CHECK(std::abs(std::sqrt(s2 / w.size()) - 0.02) < 0.002);
  CHECK_THROWS_AS(a.head("world"), std::invalid_argument);
}

TEST_CASE("end-to-end gradient check on the tiny dual model") {
  const auto sweep = tloc::testing::end_to_end_grad_check(31);
  MESSAGE("parameters ", sweep.parameters, " elements ", sweep.elements, " worst rel err ", sweep.worst);
  CHECK(sweep.worst < 1e-4);
}
