#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <numeric>

#include "grad_check.hpp"
#include "roomroam/error.hpp"
#include "roomroam/kernels.hpp"
#include "roomroam/model.hpp"
#include "test_util.hpp"

using namespace roomroam;
using namespace roomroam::testing;

namespace {

std::vector<double> random_matrix(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> v(n);
  for (double& x : v) x = rng.uniform(-1.0, 1.0);
  return v;
}

}  // namespace

TEST(Kernels, MatchNaiveProductForAllTransposes) {
  const std::size_t m = 37, n = 23, k = 19;
  for (int ta = 0; ta < 2; ++ta)
    for (int tb = 0; tb < 2; ++tb) {
      const auto a = random_matrix(m * k, 1 + ta);
      const auto b = random_matrix(k * n, 3 + tb);
      // Stored shapes: A is m x k or k x m, B is k x n or n x k.
      kernels::MatView av{a.data(), ta ? m : k, ta == 1};
      kernels::MatView bv{b.data(), tb ? k : n, tb == 1};
      std::vector<double> c(m * n, 1.0), ser(m * n, 1.0), par(m * n, 1.0);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
          double s = 0.0;
          for (std::size_t p = 0; p < k; ++p) {
            const double aip = ta ? a[p * m + i] : a[i * k + p];
            const double bpj = tb ? b[j * k + p] : b[p * n + j];
            s += aip * bpj;
          }
          c[i * n + j] += s;
        }
      kernels::serial::gemm(m, n, k, av, bv, ser.data(), n, true);
      kernels::omp::gemm(m, n, k, av, bv, par.data(), n, true);
      for (std::size_t i = 0; i < m * n; ++i) {
        EXPECT_NEAR(ser[i], c[i], 1e-12);
        EXPECT_EQ(ser[i], par[i]);
      }
    }
}

TEST(ModelConfig, Vitb16Geometry) {
  const auto c = ModelConfig::vit_b16();
  EXPECT_EQ(c.patches(), 196);
  EXPECT_EQ(c.tokens(), 197);
  EXPECT_EQ(c.patch_dim(), 16 * 16 * 3);
  EXPECT_EQ(c.head_dim(), 64);
}

TEST(ModelConfig, RejectsInconsistentSizes) {
  auto c = toy_config();
  c.image_size = 60;
  EXPECT_EQ(code_of([&] { c.validate(); }), ErrorCode::Config);
  c = toy_config();
  c.embed_dim = 9;
  EXPECT_EQ(code_of([&] { c.validate(); }), ErrorCode::Config);
  c = toy_config();
  c.depth = 0;
  EXPECT_EQ(code_of([&] { c.validate(); }), ErrorCode::Config);
}

TEST(ModelParams, Vitb16ParameterCountFromShapes) {
  const auto c = ModelConfig::vit_b16();
  const std::size_t D = 768, T = 197, P = 768, M = 3072, L = 12;
  const std::size_t per_layer = 2 * D + 4 * (D * D + D) + 2 * D + (D * M + M) + (M * D + D);
  const std::size_t expected = (P * D + D) + D + T * D + L * per_layer + 2 * D + (D + 1);
  const ModelParams p = ModelParams::zeros(c);
  EXPECT_EQ(p.parameter_count(), expected);
  EXPECT_NEAR(static_cast<double>(expected), 86e6, 0.01 * 86e6);
  EXPECT_EQ(p.named().size(), 4 + 16 * L + 2 + 2);
}

TEST(Forward, ZeroParamsGiveHeadBias) {
  const auto c = toy_config();
  ModelParams p = ModelParams::zeros(c);
  p.head_b.data[0] = 3.25;
  for (std::uint64_t s = 0; s < 3; ++s) EXPECT_EQ(predict_value(p, c, random_image(64, s)), 3.25);
}

TEST(Forward, ZeroParamsGiveHeadBiasWithHiddenHead) {
  const auto c = toy_config(64, 8, 1, 2, 5);
  ModelParams p = ModelParams::zeros(c);
  p.head_b.data[0] = -1.5;
  EXPECT_EQ(predict_value(p, c, random_image(64, 9)), -1.5);
}

TEST(Forward, AttentionRowsSumToOne) {
  for (int depth : {1, 3}) {
    const auto c = toy_config(64, 8, depth, 2);
    const auto p = random_params(c, 11 + depth, 0.5);
    const auto r = forward(p, c, random_image(64, 5));
    ASSERT_TRUE(std::isfinite(r.output));
    ASSERT_EQ(r.attention.layers, depth);
    for (int l = 0; l < depth; ++l)
      for (int h = 0; h < c.heads; ++h)
        for (int i = 0; i < c.tokens(); ++i) {
          double s = 0.0;
          for (int j = 0; j < c.tokens(); ++j) {
            EXPECT_GE(r.attention.at(l, h, i, j), 0.0);
            s += r.attention.at(l, h, i, j);
          }
          EXPECT_NEAR(s, 1.0, 1e-6);
        }
  }
}

TEST(Forward, FullSizeToyHasStandardTokenCount) {
  const auto c = toy_config(224, 8, 1, 2);
  const auto r = forward(random_params(c, 2), c, random_image(224, 2));
  EXPECT_EQ(r.attention.rows, 197);
  EXPECT_TRUE(std::isfinite(r.output));
}

TEST(Forward, Deterministic) {
  const auto c = toy_config();
  const auto p = random_params(c, 4);
  const auto img = random_image(64, 4);
  const auto a = forward(p, c, img);
  const auto b = forward(p, c, img);
  EXPECT_EQ(a.output, b.output);
  EXPECT_EQ(a.attention.data, b.attention.data);
}

TEST(Forward, PermutingPatchesChangesOutput) {
  const auto c = toy_config();
  const auto p = random_params(c, 21);
  BinaryImage img(64, 64);
  for (int r = 0; r < 16; ++r)
    for (int col = 0; col < 16; ++col) img.at(r, col) = 1;  // top-left patch only
  BinaryImage moved(64, 64);
  for (int r = 0; r < 16; ++r)
    for (int col = 0; col < 16; ++col) moved.at(48 + r, 48 + col) = 1;  // same content, last patch
  EXPECT_GT(std::abs(predict_value(p, c, img) - predict_value(p, c, moved)), 0.0);
}

TEST(Forward, PatchFlatteningOrder) {
  auto c = toy_config(32, 8, 1, 2);
  BinaryImage img(32, 32);
  img.at(1, 18) = 1;  // patch (0, 1), py = 1, px = 2
  const auto patches = image_to_patches(img, c);
  const std::size_t P = c.patch_dim();
  std::vector<std::size_t> hot;
  for (std::size_t i = 0; i < patches.size(); ++i)
    if (patches[i] != 0.0) hot.push_back(i);
  ASSERT_EQ(hot.size(), 3u);
  for (std::size_t ch = 0; ch < 3; ++ch) EXPECT_EQ(hot[ch], 1 * P + ch * 256 + 1 * 16 + 2);
}

TEST(Forward, ImageSizeMismatchIsConfigError) {
  const auto c = toy_config();
  const auto p = random_params(c, 1);
  EXPECT_EQ(code_of([&] { forward(p, c, random_image(32, 1)); }), ErrorCode::Config);
}

TEST(Forward, NonFiniteActivationNamesLayer) {
  const auto c = toy_config(64, 8, 2, 2);
  auto p = random_params(c, 1);
  p.layers[1].fc2_b.data[0] = NAN;
  try {
    forward(p, c, random_image(64, 1));
    FAIL() << "expected numeric error";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::Numeric);
    EXPECT_EQ(e.detail(), "layer 1");
  }
}

TEST(Backward, MatchesFiniteDifferences) {
  for (int head_hidden : {0, 6}) {
    const auto c = toy_config(64, 8, 2, 2, head_hidden);
    const auto p = random_params(c, 100 + head_hidden, 0.3);
    std::vector<BinaryImage> images{random_image(64, 1), random_image(64, 2, 0.5)};
    std::vector<double> labels{1.0, -0.5};
    const auto r = gradient_check(c, p, images, labels, 240, 7);
    for (const auto& coord : r.coords)
      EXPECT_LT(coord.rel_error, 1e-4) << coord.tensor << "[" << coord.index << "] analytic " << coord.analytic
                                       << " numeric " << coord.numeric;
  }
}

TEST(Backward, SingleSampleLossIsSquaredError) {
  const auto c = toy_config();
  const auto p = random_params(c, 5);
  const auto img = random_image(64, 5);
  const double y = 2.0;
  const double yhat = predict_value(p, c, img);
  const auto g = backward(p, c, std::span(&img, 1), std::span(&y, 1));
  EXPECT_DOUBLE_EQ(g.loss, (yhat - y) * (yhat - y));
  EXPECT_EQ(g.predictions[0], yhat);
}

TEST(Backward, PerfectPredictionsGiveZeroLossAndHeadGradient) {
  const auto c = toy_config();
  const auto p = random_params(c, 6);
  std::vector<BinaryImage> images{random_image(64, 1), random_image(64, 2)};
  std::vector<double> labels{predict_value(p, c, images[0]), predict_value(p, c, images[1])};
  const auto g = backward(p, c, images, labels);
  EXPECT_EQ(g.loss, 0.0);
  for (double v : g.grads.head_w.data) EXPECT_EQ(v, 0.0);
  EXPECT_EQ(g.grads.head_b.data[0], 0.0);
}

TEST(Backward, ParallelMatchesSerialBitForBit) {
  const auto c = toy_config();
  const auto p = random_params(c, 8);
  std::vector<BinaryImage> images;
  std::vector<double> labels;
  for (int i = 0; i < 13; ++i) {
    images.push_back(random_image(64, 50 + i));
    labels.push_back(0.1 * i);
  }
  const auto a = backward(p, c, images, labels);
  const auto b = backward_serial(p, c, images, labels);
  EXPECT_EQ(a.loss, b.loss);
  const auto an = a.grads.named();
  const auto bn = b.grads.named();
  for (std::size_t t = 0; t < an.size(); ++t) EXPECT_EQ(an[t].second->data, bn[t].second->data) << an[t].first;
}

TEST(Backward, EmptyBatchIsConfigError) {
  const auto c = toy_config();
  const auto p = random_params(c, 8);
  EXPECT_EQ(code_of([&] { backward(p, c, {}, {}); }), ErrorCode::Config);
}

namespace {

// Independent rollout: explicit head mean, residual mix, row normalisation and left-multiplied product.
std::vector<double> rollout_oracle(const AttentionMaps& m) {
  const int T = m.rows;
  std::vector<std::vector<double>> r(T, std::vector<double>(T, 0.0));
  for (int i = 0; i < T; ++i) r[i][i] = 1.0;
  for (int l = 0; l < m.layers; ++l) {
    std::vector<std::vector<double>> a(T, std::vector<double>(T));
    for (int i = 0; i < T; ++i) {
      double row = 0.0;
      for (int j = 0; j < T; ++j) {
        double mean = 0.0;
        for (int h = 0; h < m.heads; ++h) mean += m.at(l, h, i, j) / m.heads;
        a[i][j] = 0.5 * mean + (i == j ? 0.5 : 0.0);
        row += a[i][j];
      }
      for (int j = 0; j < T; ++j) a[i][j] /= row;
    }
    std::vector<std::vector<double>> next(T, std::vector<double>(T, 0.0));
    for (int i = 0; i < T; ++i)
      for (int j = 0; j < T; ++j)
        for (int k = 0; k < T; ++k) next[i][j] += a[i][k] * r[k][j];
    r = next;
  }
  std::vector<double> cls(r[0].begin() + 1, r[0].end());
  const double lo = *std::min_element(cls.begin(), cls.end());
  const double hi = *std::max_element(cls.begin(), cls.end());
  for (double& v : cls) v = hi > lo ? (v - lo) / (hi - lo) : 0.0;
  return cls;
}

AttentionMaps random_maps(int layers, int heads, int tokens, std::uint64_t seed) {
  AttentionMaps m(layers, heads, tokens, tokens);
  Rng rng(seed);
  for (int l = 0; l < layers; ++l)
    for (int h = 0; h < heads; ++h)
      for (int i = 0; i < tokens; ++i) {
        double s = 0.0;
        for (int j = 0; j < tokens; ++j) s += (m.at(l, h, i, j) = rng.uniform());
        for (int j = 0; j < tokens; ++j) m.at(l, h, i, j) /= s;
      }
  return m;
}

}  // namespace

TEST(Rollout, IdentityAttentionGivesZeroHeatmap) {
  AttentionMaps m(1, 2, 17, 17);
  for (int h = 0; h < 2; ++h)
    for (int i = 0; i < 17; ++i) m.at(0, h, i, i) = 1.0;
  const auto hm = attention_rollout(m);
  EXPECT_EQ(hm.grid, 4);
  for (double v : hm.values) EXPECT_EQ(v, 0.0);
}

TEST(Rollout, UniformAttentionGivesZeroHeatmap) {
  AttentionMaps m(1, 3, 197, 197);
  std::fill(m.data.begin(), m.data.end(), 1.0 / 197.0);
  const auto hm = attention_rollout(m);
  EXPECT_EQ(hm.grid, 14);
  for (double v : hm.values) EXPECT_EQ(v, 0.0);
}

TEST(Rollout, MatchesDirectProductOracle) {
  for (std::uint64_t seed : {1, 2, 3}) {
    const auto m = random_maps(2, 3, 17, seed);
    const auto hm = attention_rollout(m);
    const auto oracle = rollout_oracle(m);
    ASSERT_EQ(hm.values.size(), oracle.size());
    for (std::size_t i = 0; i < oracle.size(); ++i) EXPECT_NEAR(hm.values[i], oracle[i], 1e-9);
    EXPECT_EQ(*std::min_element(hm.values.begin(), hm.values.end()), 0.0);
    EXPECT_EQ(*std::max_element(hm.values.begin(), hm.values.end()), 1.0);
  }
}

TEST(Rollout, ProductStaysRowStochastic) {
  for (int layers = 1; layers <= 4; ++layers) {
    const auto r = rollout_matrix(random_maps(layers, 2, 17, 40 + layers));
    for (int i = 0; i < 17; ++i) {
      double s = 0.0;
      for (int j = 0; j < 17; ++j) s += r[i * 17 + j];
      EXPECT_NEAR(s, 1.0, 1e-6);
    }
  }
}

TEST(Rollout, RejectsNonSquareMaps) {
  AttentionMaps m(1, 1, 17, 16);
  EXPECT_EQ(code_of([&] { attention_rollout(m); }), ErrorCode::Shape);
  AttentionMaps odd(1, 1, 18, 18);
  EXPECT_EQ(code_of([&] { attention_rollout(odd); }), ErrorCode::Shape);
  EXPECT_EQ(code_of([&] { attention_rollout(AttentionMaps{}); }), ErrorCode::Shape);
}

TEST(Serialize, RoundTripGivesIdenticalForward) {
  for (int head_hidden : {0, 4}) {
    const auto c = toy_config(64, 8, 2, 2, head_hidden);
    const auto p = round_to_float(random_params(c, 31));
    const auto [q, c2] = deserialize(serialize(p, c));
    EXPECT_EQ(c2, c);
    const auto img = random_image(64, 3);
    EXPECT_EQ(predict_value(p, c, img), predict_value(q, c2, img));
    EXPECT_EQ(serialize(q, c2), serialize(p, c));
  }
}

TEST(Serialize, HeaderLayout) {
  const auto c = toy_config();
  const auto bytes = serialize(ModelParams::zeros(c), c);
  EXPECT_EQ(bytes.substr(0, 4), "RRVT");
  EXPECT_EQ(static_cast<unsigned char>(bytes[4]), 1);  // version 1, little-endian
  EXPECT_EQ(static_cast<unsigned char>(bytes[8]), 64);  // image_size
}

TEST(Serialize, CorruptInputIsFormatError) {
  const auto c = toy_config();
  const auto bytes = serialize(random_params(c, 1), c);
  for (std::size_t cut : {std::size_t{0}, std::size_t{3}, std::size_t{20}, bytes.size() / 2, bytes.size() - 1})
    EXPECT_EQ(code_of([&] { deserialize(std::string_view(bytes).substr(0, cut)); }), ErrorCode::Format) << cut;
  std::string bad = bytes;
  bad[0] = 'X';
  EXPECT_EQ(code_of([&] { deserialize(bad); }), ErrorCode::Format);
  bad = bytes;
  bad[4] = 2;
  EXPECT_EQ(code_of([&] { deserialize(bad); }), ErrorCode::Format);
  EXPECT_EQ(code_of([&] { deserialize(bytes + "x"); }), ErrorCode::Format);
}

TEST(Serialize, SaveAndLoadFile) {
  TempDir dir;
  const auto c = toy_config();
  const auto p = random_params(c, 2);
  save_model(dir.file("m.bin"), p, c);
  const auto [q, c2] = load_model(dir.file("m.bin"));
  const auto img = random_image(64, 1);
  EXPECT_EQ(predict_value(round_to_float(p), c, img), predict_value(q, c2, img));
  EXPECT_EQ(code_of([&] { load_model(dir.file("missing.bin")); }), ErrorCode::Format);
}

namespace {

// Writes params in the external layout: fused qkv, [out, in] linears, conv kernel, unit-padded embeddings.
TensorDict to_external(const ModelParams& p, const ModelConfig& c) {
  const int D = c.embed_dim, P = c.patch_dim();
  TensorDict d;
  const auto transpose = [](const Tensor& t) {
    const int in = t.shape[0], out = t.shape[1];
    ExternalTensor e{{out, in}, std::vector<double>(t.size())};
    for (int i = 0; i < in; ++i)
      for (int o = 0; o < out; ++o) e.data[static_cast<std::size_t>(o) * in + i] = t.data[static_cast<std::size_t>(i) * out + o];
    return e;
  };
  auto conv = transpose(p.patch_w);
  conv.shape = {D, c.in_channels, c.patch_size, c.patch_size};
  (void)P;
  d["patch_embed.proj.weight"] = conv;
  d["patch_embed.proj.bias"] = {{D}, p.patch_b.data};
  d["cls_token"] = {{1, 1, D}, p.cls_token.data};
  d["pos_embed"] = {{1, c.tokens(), D}, p.pos_embed.data};
  for (int i = 0; i < c.depth; ++i) {
    const auto& l = p.layers[i];
    const std::string b = "blocks." + std::to_string(i) + ".";
    ExternalTensor qkv{{3 * D, D}, {}}, qkv_b{{3 * D}, {}};
    for (const Tensor* w : {&l.wq, &l.wk, &l.wv}) {
      const auto t = transpose(*w);
      qkv.data.insert(qkv.data.end(), t.data.begin(), t.data.end());
    }
    for (const Tensor* bias : {&l.bq, &l.bk, &l.bv}) qkv_b.data.insert(qkv_b.data.end(), bias->data.begin(), bias->data.end());
    d[b + "attn.qkv.weight"] = qkv;
    d[b + "attn.qkv.bias"] = qkv_b;
    d[b + "attn.proj.weight"] = transpose(l.wo);
    d[b + "attn.proj.bias"] = {{D}, l.bo.data};
    d[b + "norm1.weight"] = {{D}, l.norm1_w.data};
    d[b + "norm1.bias"] = {{D}, l.norm1_b.data};
    d[b + "norm2.weight"] = {{D}, l.norm2_w.data};
    d[b + "norm2.bias"] = {{D}, l.norm2_b.data};
    d[b + "mlp.fc1.weight"] = transpose(l.fc1_w);
    d[b + "mlp.fc1.bias"] = {{c.mlp_dim()}, l.fc1_b.data};
    d[b + "mlp.fc2.weight"] = transpose(l.fc2_w);
    d[b + "mlp.fc2.bias"] = {{D}, l.fc2_b.data};
  }
  d["norm.weight"] = {{D}, p.norm_w.data};
  d["norm.bias"] = {{D}, p.norm_b.data};
  return d;
}

std::vector<NameRule> shipped_table(int depth) {
  return load_name_table(std::string(ROOMROAM_DATA_DIR) + "/vit_b16_names.txt", depth);
}

}  // namespace

TEST(Import, SyntheticWeightFileLoadsBackbone) {
  TempDir dir;
  const auto c = toy_config(64, 8, 2, 2);
  const auto src = round_to_float(random_params(c, 77));
  write_safetensors(dir.file("w.safetensors"), to_external(src, c));
  const auto p = import_pretrained(std::filesystem::path(dir.file("w.safetensors")), c,
                                   std::string(ROOMROAM_DATA_DIR) + "/vit_b16_names.txt", 5, 12.5);
  const auto a = p.named();
  const auto b = src.named();
  for (std::size_t t = 0; t < a.size(); ++t) {
    if (a[t].first.starts_with("head.")) continue;
    EXPECT_EQ(a[t].second->data, b[t].second->data) << a[t].first;
  }
  EXPECT_EQ(p.head_b.data[0], 12.5);
  const double bound = 1.0 / std::sqrt(8.0);
  for (double w : p.head_w.data) EXPECT_LE(std::abs(w), bound);
  EXPECT_TRUE(std::isfinite(predict_value(p, c, random_image(64, 1))));
}

TEST(Import, MissingPositionalEmbeddingIsNamed) {
  const auto c = toy_config(64, 8, 1, 2);
  auto d = to_external(random_params(c, 1), c);
  d.erase("pos_embed");
  try {
    import_pretrained(d, c, shipped_table(c.depth), 1, 0.0);
    FAIL() << "expected import error";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::Import);
    EXPECT_NE(std::string(e.what()).find("pos_embed"), std::string::npos);
  }
}

TEST(Import, ListsEveryMissingKey) {
  const auto c = toy_config(64, 8, 2, 2);
  auto d = to_external(random_params(c, 1), c);
  d.erase("blocks.1.mlp.fc1.bias");
  d.erase("norm.weight");
  try {
    import_pretrained(d, c, shipped_table(c.depth), 1, 0.0);
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(e.detail().find("blocks.1.mlp.fc1.bias"), std::string::npos);
    EXPECT_NE(e.detail().find("norm.weight"), std::string::npos);
  }
}

TEST(Import, ShapeMismatchReportsExpectedAndFound) {
  const auto c = toy_config(64, 8, 1, 2);
  auto d = to_external(random_params(c, 1), c);
  d["pos_embed"] = {{1, 10, 8}, std::vector<double>(80, 0.0)};
  try {
    import_pretrained(d, c, shipped_table(c.depth), 1, 0.0);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::Import);
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[1,17,8]"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[1,10,8]"), std::string::npos) << msg;
  }
}

TEST(Import, ShippedTableCoversVitb16) {
  const auto rules = shipped_table(12);
  EXPECT_EQ(rules.size(), 4u + 12u * 16u + 2u);
}

TEST(Predict, HeatmapIsNormalised) {
  const auto c = toy_config(224, 8, 2, 2);
  const auto pred = predict(random_params(c, 3), c, random_image(224, 3));
  EXPECT_EQ(pred.heatmap.grid, 14);
  ASSERT_EQ(pred.heatmap.values.size(), 196u);
  for (double v : pred.heatmap.values) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
}
