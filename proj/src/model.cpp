#include "roomroam/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "roomroam/error.hpp"
#include "roomroam/kernels.hpp"
#include "roomroam/random.hpp"

namespace roomroam {

namespace {

using kernels::MatView;

constexpr double kLnEps = 1e-6;
constexpr std::size_t kGradChunks = 8;

std::size_t product(const std::vector<int>& shape) {
  std::size_t n = 1;
  for (int d : shape) n *= static_cast<std::size_t>(d);
  return n;
}

void gemm(std::size_t m, std::size_t n, std::size_t k, MatView a, MatView b, double* c, std::size_t ldc,
          bool accumulate) {
  kernels::gemm(m, n, k, a, b, c, ldc, accumulate);
}

// y[rows x out] = x[rows x in] * W + b
void linear(const double* x, std::size_t rows, std::size_t in, const Tensor& w, const Tensor& b, double* y) {
  const std::size_t out = b.size();
  gemm(rows, out, in, {x, in}, {w.ptr(), out}, y, out, false);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < out; ++j) y[r * out + j] += b.data[j];
}

// Accumulates dW, db and (optionally) dx for y = x * W + b.
void linear_backward(const double* x, const double* dy, std::size_t rows, std::size_t in, const Tensor& w,
                     Tensor& dw, Tensor& db, double* dx, bool accumulate_dx) {
  const std::size_t out = db.size();
  gemm(in, out, rows, {x, in, true}, {dy, out}, dw.ptr(), out, true);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < out; ++j) db.data[j] += dy[r * out + j];
  if (dx) gemm(rows, in, out, {dy, out}, {w.ptr(), out, true}, dx, in, accumulate_dx);
}

void layer_norm(const double* x, std::size_t rows, std::size_t d, const Tensor& g, const Tensor& b, double* y,
                double* xhat, double* rstd) {
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x + r * d;
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += xr[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var /= static_cast<double>(d);
    const double rs = 1.0 / std::sqrt(var + kLnEps);
    rstd[r] = rs;
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (xr[j] - mean) * rs;
      xhat[r * d + j] = h;
      y[r * d + j] = g.data[j] * h + b.data[j];
    }
  }
}

// dx += LN'(dy); dg, db accumulated.
void layer_norm_backward(const double* dy, const double* xhat, const double* rstd, std::size_t rows, std::size_t d,
                         const Tensor& g, Tensor& dg, Tensor& db, double* dx) {
  std::vector<double> dxhat(d);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* dyr = dy + r * d;
    const double* hr = xhat + r * d;
    double mean_dxhat = 0.0, mean_dxhat_h = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      dg.data[j] += dyr[j] * hr[j];
      db.data[j] += dyr[j];
      dxhat[j] = dyr[j] * g.data[j];
      mean_dxhat += dxhat[j];
      mean_dxhat_h += dxhat[j] * hr[j];
    }
    mean_dxhat /= static_cast<double>(d);
    mean_dxhat_h /= static_cast<double>(d);
    for (std::size_t j = 0; j < d; ++j) dx[r * d + j] += rstd[r] * (dxhat[j] - mean_dxhat - hr[j] * mean_dxhat_h);
  }
}

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2)); }
double gelu_grad(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x * M_SQRT1_2));
  const double pdf = std::exp(-0.5 * x * x) * (0.5 * M_2_SQRTPI * M_SQRT1_2);
  return cdf + x * pdf;
}

bool all_finite(const std::vector<double>& v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

struct LayerCache {
  std::vector<double> xhat1, rstd1, u1, q, k, v, attn, o, zmid, xhat2, rstd2, u2, hpre, hact;
};

struct Cache {
  std::vector<double> patches;         // N x P
  std::vector<std::vector<double>> z;  // encoder inputs/outputs, T x D each
  std::vector<LayerCache> layers;
  std::vector<double> xhatf, rstdf, zf, head_pre, head_act;
};

// Runs the network. With keep_all the per-layer activations are retained for backward.
double run_forward(const ModelParams& p, const ModelConfig& cfg, const BinaryImage& image, Cache& c, bool keep_all,
                   AttentionMaps* maps) {
  const std::size_t T = cfg.tokens(), N = cfg.patches(), D = cfg.embed_dim, P = cfg.patch_dim();
  const std::size_t H = cfg.heads, dh = cfg.head_dim(), M = cfg.mlp_dim(), L = cfg.depth;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  c.patches = image_to_patches(image, cfg);
  c.z.assign(keep_all ? L + 1 : 2, std::vector<double>(T * D));
  c.layers.resize(keep_all ? L : 1);

  // Embedding: class token then projected patches, plus positions.
  auto& z0 = c.z[0];
  for (std::size_t j = 0; j < D; ++j) z0[j] = p.cls_token.data[j];
  linear(c.patches.data(), N, P, p.patch_w, p.patch_b, z0.data() + D);
  for (std::size_t i = 0; i < T * D; ++i) z0[i] += p.pos_embed.data[i];
  if (!all_finite(z0)) throw Error(ErrorCode::Numeric, "non-finite activation in patch embedding", "layer -1");

  for (std::size_t l = 0; l < L; ++l) {
    LayerCache& lc = c.layers[keep_all ? l : 0];
    const LayerParams& lp = p.layers[l];
    const auto& zin = c.z[keep_all ? l : (l % 2)];
    auto& zout = c.z[keep_all ? l + 1 : ((l + 1) % 2)];

    lc.xhat1.resize(T * D);
    lc.rstd1.resize(T);
    lc.u1.resize(T * D);
    layer_norm(zin.data(), T, D, lp.norm1_w, lp.norm1_b, lc.u1.data(), lc.xhat1.data(), lc.rstd1.data());
    lc.q.resize(T * D);
    lc.k.resize(T * D);
    lc.v.resize(T * D);
    linear(lc.u1.data(), T, D, lp.wq, lp.bq, lc.q.data());
    linear(lc.u1.data(), T, D, lp.wk, lp.bk, lc.k.data());
    linear(lc.u1.data(), T, D, lp.wv, lp.bv, lc.v.data());

    lc.attn.resize(H * T * T);
    lc.o.resize(T * D);
    for (std::size_t h = 0; h < H; ++h) {
      double* a = lc.attn.data() + h * T * T;
      gemm(T, T, dh, {lc.q.data() + h * dh, D}, {lc.k.data() + h * dh, D, true}, a, T, false);
      for (std::size_t i = 0; i < T; ++i) {
        double* row = a + i * T;
        double mx = -INFINITY;
        for (std::size_t j = 0; j < T; ++j) mx = std::max(mx, row[j] * scale);
        double sum = 0.0;
        for (std::size_t j = 0; j < T; ++j) {
          row[j] = std::exp(row[j] * scale - mx);
          sum += row[j];
        }
        for (std::size_t j = 0; j < T; ++j) row[j] /= sum;
      }
      gemm(T, dh, T, {a, T}, {lc.v.data() + h * dh, D}, lc.o.data() + h * dh, D, false);
    }
    if (maps)
      std::copy(lc.attn.begin(), lc.attn.end(), maps->data.begin() + static_cast<std::ptrdiff_t>(l * H * T * T));

    lc.zmid.resize(T * D);
    linear(lc.o.data(), T, D, lp.wo, lp.bo, lc.zmid.data());
    for (std::size_t i = 0; i < T * D; ++i) lc.zmid[i] += zin[i];

    lc.xhat2.resize(T * D);
    lc.rstd2.resize(T);
    lc.u2.resize(T * D);
    layer_norm(lc.zmid.data(), T, D, lp.norm2_w, lp.norm2_b, lc.u2.data(), lc.xhat2.data(), lc.rstd2.data());
    lc.hpre.resize(T * M);
    lc.hact.resize(T * M);
    linear(lc.u2.data(), T, D, lp.fc1_w, lp.fc1_b, lc.hpre.data());
    for (std::size_t i = 0; i < T * M; ++i) lc.hact[i] = gelu(lc.hpre[i]);
    linear(lc.hact.data(), T, M, lp.fc2_w, lp.fc2_b, zout.data());
    for (std::size_t i = 0; i < T * D; ++i) zout[i] += lc.zmid[i];

    if (!all_finite(zout))
      throw Error(ErrorCode::Numeric, "non-finite activation in encoder layer " + std::to_string(l),
                  "layer " + std::to_string(l));
  }

  // Final norm on the class token only; the other rows never reach the head.
  const auto& zl = c.z[keep_all ? L : (L % 2)];
  c.xhatf.resize(D);
  c.rstdf.resize(1);
  c.zf.resize(D);
  layer_norm(zl.data(), 1, D, p.norm_w, p.norm_b, c.zf.data(), c.xhatf.data(), c.rstdf.data());

  const double* head_in = c.zf.data();
  std::size_t head_in_dim = D;
  if (cfg.head_hidden > 0) {
    const std::size_t Hh = cfg.head_hidden;
    c.head_pre.resize(Hh);
    c.head_act.resize(Hh);
    linear(c.zf.data(), 1, D, p.head_hidden_w, p.head_hidden_b, c.head_pre.data());
    for (std::size_t i = 0; i < Hh; ++i) c.head_act[i] = gelu(c.head_pre[i]);
    head_in = c.head_act.data();
    head_in_dim = Hh;
  }
  double out = 0.0;
  linear(head_in, 1, head_in_dim, p.head_w, p.head_b, &out);
  if (!std::isfinite(out)) throw Error(ErrorCode::Numeric, "non-finite output from regression head", "layer head");
  return out;
}

// Accumulates d(output)/d(params) * dout into g.
void run_backward(const ModelParams& p, const ModelConfig& cfg, const Cache& c, double dout, ModelParams& g) {
  const std::size_t T = cfg.tokens(), N = cfg.patches(), D = cfg.embed_dim, P = cfg.patch_dim();
  const std::size_t H = cfg.heads, dh = cfg.head_dim(), M = cfg.mlp_dim(), L = cfg.depth;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  std::vector<double> dzf(D, 0.0);
  if (cfg.head_hidden > 0) {
    const std::size_t Hh = cfg.head_hidden;
    std::vector<double> dact(Hh);
    for (std::size_t i = 0; i < Hh; ++i) {
      g.head_w.data[i] += c.head_act[i] * dout;
      dact[i] = p.head_w.data[i] * dout * gelu_grad(c.head_pre[i]);
    }
    g.head_b.data[0] += dout;
    linear_backward(c.zf.data(), dact.data(), 1, D, p.head_hidden_w, g.head_hidden_w, g.head_hidden_b, dzf.data(),
                    false);
  } else {
    for (std::size_t j = 0; j < D; ++j) {
      g.head_w.data[j] += c.zf[j] * dout;
      dzf[j] = p.head_w.data[j] * dout;
    }
    g.head_b.data[0] += dout;
  }

  std::vector<double> dz(T * D, 0.0);
  layer_norm_backward(dzf.data(), c.xhatf.data(), c.rstdf.data(), 1, D, p.norm_w, g.norm_w, g.norm_b, dz.data());

  std::vector<double> dzmid(T * D), dh_act(T * M), du(T * D), dq(T * D), dk(T * D), dv(T * D), dov(T * D),
      da(T * T);
  for (std::size_t li = L; li-- > 0;) {
    const LayerParams& lp = p.layers[li];
    LayerParams& lg = g.layers[li];
    const LayerCache& lc = c.layers[li];

    // MLP branch.
    dzmid = dz;
    linear_backward(lc.hact.data(), dz.data(), T, M, lp.fc2_w, lg.fc2_w, lg.fc2_b, dh_act.data(), false);
    for (std::size_t i = 0; i < T * M; ++i) dh_act[i] *= gelu_grad(lc.hpre[i]);
    linear_backward(lc.u2.data(), dh_act.data(), T, D, lp.fc1_w, lg.fc1_w, lg.fc1_b, du.data(), false);
    layer_norm_backward(du.data(), lc.xhat2.data(), lc.rstd2.data(), T, D, lp.norm2_w, lg.norm2_w, lg.norm2_b,
                        dzmid.data());

    // Attention branch.
    dz = dzmid;
    linear_backward(lc.o.data(), dzmid.data(), T, D, lp.wo, lg.wo, lg.bo, dov.data(), false);
    for (std::size_t h = 0; h < H; ++h) {
      const double* a = lc.attn.data() + h * T * T;
      gemm(T, T, dh, {dov.data() + h * dh, D}, {lc.v.data() + h * dh, D, true}, da.data(), T, false);
      gemm(T, dh, T, {a, T, true}, {dov.data() + h * dh, D}, dv.data() + h * dh, D, false);
      for (std::size_t i = 0; i < T; ++i) {
        double dot = 0.0;
        for (std::size_t j = 0; j < T; ++j) dot += da[i * T + j] * a[i * T + j];
        for (std::size_t j = 0; j < T; ++j) da[i * T + j] = a[i * T + j] * (da[i * T + j] - dot) * scale;
      }
      gemm(T, dh, T, {da.data(), T}, {lc.k.data() + h * dh, D}, dq.data() + h * dh, D, false);
      gemm(T, dh, T, {da.data(), T, true}, {lc.q.data() + h * dh, D}, dk.data() + h * dh, D, false);
    }
    linear_backward(lc.u1.data(), dq.data(), T, D, lp.wq, lg.wq, lg.bq, du.data(), false);
    linear_backward(lc.u1.data(), dk.data(), T, D, lp.wk, lg.wk, lg.bk, du.data(), true);
    linear_backward(lc.u1.data(), dv.data(), T, D, lp.wv, lg.wv, lg.bv, du.data(), true);
    layer_norm_backward(du.data(), lc.xhat1.data(), lc.rstd1.data(), T, D, lp.norm1_w, lg.norm1_w, lg.norm1_b,
                        dz.data());
  }

  for (std::size_t j = 0; j < D; ++j) g.cls_token.data[j] += dz[j];
  for (std::size_t i = 0; i < T * D; ++i) g.pos_embed.data[i] += dz[i];
  linear_backward(c.patches.data(), dz.data() + D, N, P, p.patch_w, g.patch_w, g.patch_b, nullptr, false);
}

void add_into(ModelParams& dst, const ModelParams& src) {
  auto d = dst.named();
  auto s = src.named();
  for (std::size_t t = 0; t < d.size(); ++t)
    for (std::size_t i = 0; i < d[t].second->size(); ++i) d[t].second->data[i] += s[t].second->data[i];
}

void check_batch(const ModelConfig& cfg, std::span<const BinaryImage> images, std::span<const double> labels) {
  if (images.empty()) throw Error(ErrorCode::Config, "batch is empty");
  if (images.size() != labels.size()) throw Error(ErrorCode::Shape, "batch images and labels differ in length");
  (void)cfg;
}

BatchGradient backward_impl(const ModelParams& params, const ModelConfig& cfg, std::span<const BinaryImage> images,
                            std::span<const double> labels, bool parallel) {
  check_batch(cfg, images, labels);
  const std::size_t B = images.size();
  const std::size_t chunks = std::min(kGradChunks, B);

  std::vector<ModelParams> partial(chunks);
  std::vector<double> preds(B, 0.0);
  std::vector<std::exception_ptr> errors(chunks);
  const auto run_chunk = [&](std::size_t ch) {
    try {
      partial[ch] = ModelParams::zeros(cfg);
      Cache cache;
      for (std::size_t i = ch * B / chunks; i < (ch + 1) * B / chunks; ++i) {
        preds[i] = run_forward(params, cfg, images[i], cache, true, nullptr);
        const double dout = 2.0 * (preds[i] - labels[i]) / static_cast<double>(B);
        run_backward(params, cfg, cache, dout, partial[ch]);
      }
    } catch (...) {
      errors[ch] = std::current_exception();
    }
  };
  if (parallel) {
    const auto n = static_cast<long long>(chunks);
#pragma omp parallel for schedule(dynamic, 1)
    for (long long ch = 0; ch < n; ++ch) run_chunk(static_cast<std::size_t>(ch));
  } else {
    for (std::size_t ch = 0; ch < chunks; ++ch) run_chunk(ch);
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);

  BatchGradient out;
  out.grads = std::move(partial[0]);
  for (std::size_t ch = 1; ch < chunks; ++ch) add_into(out.grads, partial[ch]);
  double loss = 0.0;
  for (std::size_t i = 0; i < B; ++i) loss += (preds[i] - labels[i]) * (preds[i] - labels[i]);
  out.loss = loss / static_cast<double>(B);
  out.predictions = std::move(preds);
  return out;
}

// ---- binary helpers ----

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::string_view take(std::size_t n) {
    need(n);
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw Error(ErrorCode::Format, "model file is truncated");
  }
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

float f32_from_le(const unsigned char* b) {
  std::uint32_t u = 0;
  for (int i = 0; i < 4; ++i) u |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return std::bit_cast<float>(u);
}

double f64_from_le(const unsigned char* b) {
  std::uint64_t u = 0;
  for (int i = 0; i < 8; ++i) u |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return std::bit_cast<double>(u);
}

std::string read_file(const std::filesystem::path& path, ErrorCode code) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(code, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

constexpr std::uint32_t kFormatVersion = 1;
constexpr std::uint32_t kMaxDim = 1u << 24;

}  // namespace

void ModelConfig::validate() const {
  const auto fail = [](const std::string& m) { throw Error(ErrorCode::Config, m); };
  if (image_size <= 0 || patch_size <= 0 || in_channels <= 0 || embed_dim <= 0 || heads <= 0 || mlp_ratio <= 0)
    fail("model sizes must be positive");
  if (image_size % patch_size != 0) fail("image_size must be divisible by patch_size");
  if (embed_dim % heads != 0) fail("embed_dim must be divisible by heads");
  if (depth < 1) fail("depth must be at least 1");
  if (head_hidden < 0) fail("head_hidden must be non-negative");
}

Tensor::Tensor(std::vector<int> s) : shape(std::move(s)), data(product(shape), 0.0) {}

std::string shape_string(const std::vector<int>& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) s += (i ? "," : "") + std::to_string(shape[i]);
  return s + "]";
}

ModelParams ModelParams::zeros(const ModelConfig& cfg) {
  cfg.validate();
  const int D = cfg.embed_dim, M = cfg.mlp_dim();
  ModelParams p;
  p.patch_w = Tensor({cfg.patch_dim(), D});
  p.patch_b = Tensor({D});
  p.cls_token = Tensor({D});
  p.pos_embed = Tensor({cfg.tokens(), D});
  p.layers.resize(static_cast<std::size_t>(cfg.depth));
  for (auto& l : p.layers) {
    l.norm1_w = l.norm1_b = l.norm2_w = l.norm2_b = Tensor({D});
    l.wq = l.wk = l.wv = l.wo = Tensor({D, D});
    l.bq = l.bk = l.bv = l.bo = Tensor({D});
    l.fc1_w = Tensor({D, M});
    l.fc1_b = Tensor({M});
    l.fc2_w = Tensor({M, D});
    l.fc2_b = Tensor({D});
  }
  p.norm_w = p.norm_b = Tensor({D});
  int head_in = D;
  if (cfg.head_hidden > 0) {
    p.head_hidden_w = Tensor({D, cfg.head_hidden});
    p.head_hidden_b = Tensor({cfg.head_hidden});
    head_in = cfg.head_hidden;
  }
  p.head_w = Tensor({head_in, 1});
  p.head_b = Tensor({1});
  return p;
}

std::vector<std::pair<std::string, Tensor*>> ModelParams::named() {
  std::vector<std::pair<std::string, Tensor*>> out{
      {"patch_embed.weight", &patch_w}, {"patch_embed.bias", &patch_b}, {"cls_token", &cls_token},
      {"pos_embed", &pos_embed}};
  for (std::size_t i = 0; i < layers.size(); ++i) {
    auto& l = layers[i];
    const std::string b = "blocks." + std::to_string(i) + ".";
    out.insert(out.end(), {{b + "norm1.weight", &l.norm1_w},    {b + "norm1.bias", &l.norm1_b},
                           {b + "attn.q.weight", &l.wq},        {b + "attn.q.bias", &l.bq},
                           {b + "attn.k.weight", &l.wk},        {b + "attn.k.bias", &l.bk},
                           {b + "attn.v.weight", &l.wv},        {b + "attn.v.bias", &l.bv},
                           {b + "attn.proj.weight", &l.wo},     {b + "attn.proj.bias", &l.bo},
                           {b + "norm2.weight", &l.norm2_w},    {b + "norm2.bias", &l.norm2_b},
                           {b + "mlp.fc1.weight", &l.fc1_w},    {b + "mlp.fc1.bias", &l.fc1_b},
                           {b + "mlp.fc2.weight", &l.fc2_w},    {b + "mlp.fc2.bias", &l.fc2_b}});
  }
  out.insert(out.end(), {{"norm.weight", &norm_w}, {"norm.bias", &norm_b}});
  if (!head_hidden_w.shape.empty())
    out.insert(out.end(), {{"head.hidden.weight", &head_hidden_w}, {"head.hidden.bias", &head_hidden_b}});
  out.insert(out.end(), {{"head.weight", &head_w}, {"head.bias", &head_b}});
  return out;
}

std::vector<std::pair<std::string, const Tensor*>> ModelParams::named() const {
  auto mut = const_cast<ModelParams*>(this)->named();
  std::vector<std::pair<std::string, const Tensor*>> out;
  out.reserve(mut.size());
  for (auto& [n, t] : mut) out.emplace_back(std::move(n), t);
  return out;
}

std::size_t ModelParams::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : named()) n += t->size();
  return n;
}

bool ModelParams::all_finite() const {
  for (const auto& [name, t] : named())
    if (!roomroam::all_finite(t->data)) return false;
  return true;
}

void check_shapes(const ModelParams& params, const ModelConfig& config) {
  const ModelParams reference = ModelParams::zeros(config);
  const auto expected = reference.named();
  const auto actual = params.named();
  if (expected.size() != actual.size())
    throw Error(ErrorCode::Shape, "parameter set has " + std::to_string(actual.size()) + " tensors, expected " +
                                      std::to_string(expected.size()));
  for (std::size_t i = 0; i < expected.size(); ++i) {
    const auto& [name, t] = actual[i];
    if (t->shape != expected[i].second->shape || t->size() != expected[i].second->size())
      throw Error(ErrorCode::Shape, "tensor " + name + " has shape " + shape_string(t->shape) + ", expected " +
                                        shape_string(expected[i].second->shape));
  }
}

bool decays(const std::string& name) {
  const bool weight = name.ends_with(".weight");
  return weight && name.find("norm") == std::string::npos;
}

void init_head(ModelParams& p, const ModelConfig& cfg, std::uint64_t seed, double label_mean) {
  Rng rng(derive_seed(seed, 0x4EADULL));
  const auto fill_uniform = [&](Tensor& t, int fan_in) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (double& x : t.data) x = rng.uniform(-bound, bound);
  };
  if (cfg.head_hidden > 0) {
    p.head_hidden_w = Tensor({cfg.embed_dim, cfg.head_hidden});
    p.head_hidden_b = Tensor({cfg.head_hidden});
    fill_uniform(p.head_hidden_w, cfg.embed_dim);
    p.head_w = Tensor({cfg.head_hidden, 1});
    fill_uniform(p.head_w, cfg.head_hidden);
  } else {
    p.head_hidden_w = Tensor();
    p.head_hidden_b = Tensor();
    p.head_w = Tensor({cfg.embed_dim, 1});
    fill_uniform(p.head_w, cfg.embed_dim);
  }
  p.head_b = Tensor({1});
  p.head_b.data[0] = label_mean;
}

ModelParams init_params(const ModelConfig& cfg, std::uint64_t seed, double label_mean) {
  ModelParams p = ModelParams::zeros(cfg);
  Rng rng(seed);
  const auto trunc_normal = [&](Tensor& t) {
    for (double& x : t.data) {
      double v;
      do v = rng.normal(0.0, 0.02);
      while (std::abs(v) > 0.04);
      x = v;
    }
  };
  trunc_normal(p.patch_w);
  trunc_normal(p.cls_token);
  trunc_normal(p.pos_embed);
  for (auto& l : p.layers) {
    std::fill(l.norm1_w.data.begin(), l.norm1_w.data.end(), 1.0);
    std::fill(l.norm2_w.data.begin(), l.norm2_w.data.end(), 1.0);
    for (Tensor* w : {&l.wq, &l.wk, &l.wv, &l.wo, &l.fc1_w, &l.fc2_w}) trunc_normal(*w);
  }
  std::fill(p.norm_w.data.begin(), p.norm_w.data.end(), 1.0);
  init_head(p, cfg, seed, label_mean);
  return p;
}

std::vector<double> image_to_patches(const BinaryImage& image, const ModelConfig& cfg) {
  if (image.width != cfg.image_size || image.height != cfg.image_size)
    throw Error(ErrorCode::Config, "image is " + std::to_string(image.width) + "x" + std::to_string(image.height) +
                                       ", model expects " + std::to_string(cfg.image_size) + "x" +
                                       std::to_string(cfg.image_size));
  const int G = cfg.grid(), ps = cfg.patch_size, C = cfg.in_channels;
  const std::size_t P = cfg.patch_dim();
  std::vector<double> out(static_cast<std::size_t>(cfg.patches()) * P);
  for (int gy = 0; gy < G; ++gy)
    for (int gx = 0; gx < G; ++gx) {
      double* patch = out.data() + (static_cast<std::size_t>(gy) * G + gx) * P;
      for (int c = 0; c < C; ++c)
        for (int py = 0; py < ps; ++py)
          for (int px = 0; px < ps; ++px)
            patch[(static_cast<std::size_t>(c) * ps + py) * ps + px] = image.at(gy * ps + py, gx * ps + px);
    }
  return out;
}

ForwardResult forward(const ModelParams& params, const ModelConfig& config, const BinaryImage& image) {
  config.validate();
  ForwardResult r;
  r.attention = AttentionMaps(config.depth, config.heads, config.tokens(), config.tokens());
  Cache cache;
  r.output = run_forward(params, config, image, cache, false, &r.attention);
  return r;
}

double predict_value(const ModelParams& params, const ModelConfig& config, const BinaryImage& image) {
  config.validate();
  Cache cache;
  return run_forward(params, config, image, cache, false, nullptr);
}

BatchGradient backward(const ModelParams& params, const ModelConfig& config, std::span<const BinaryImage> images,
                       std::span<const double> labels) {
  config.validate();
  return backward_impl(params, config, images, labels, true);
}

BatchGradient backward_serial(const ModelParams& params, const ModelConfig& config,
                              std::span<const BinaryImage> images, std::span<const double> labels) {
  config.validate();
  return backward_impl(params, config, images, labels, false);
}

std::vector<double> rollout_matrix(const AttentionMaps& maps) {
  if (maps.layers < 1 || maps.heads < 1) throw Error(ErrorCode::Shape, "rollout needs at least one attention map");
  if (maps.rows != maps.cols || maps.rows < 1)
    throw Error(ErrorCode::Shape, "attention maps must be square, got " + std::to_string(maps.rows) + "x" +
                                      std::to_string(maps.cols));
  if (maps.data.size() != static_cast<std::size_t>(maps.layers) * maps.heads * maps.rows * maps.cols)
    throw Error(ErrorCode::Shape, "attention map storage does not match its dimensions");
  const std::size_t T = maps.rows;
  std::vector<double> r(T * T, 0.0), a(T * T), next(T * T);
  for (std::size_t i = 0; i < T; ++i) r[i * T + i] = 1.0;
  for (int l = 0; l < maps.layers; ++l) {
    for (std::size_t i = 0; i < T; ++i) {
      double sum = 0.0;
      for (std::size_t j = 0; j < T; ++j) {
        double m = 0.0;
        for (int h = 0; h < maps.heads; ++h) m += maps.at(l, h, static_cast<int>(i), static_cast<int>(j));
        m /= maps.heads;
        const double v = 0.5 * m + (i == j ? 0.5 : 0.0);
        a[i * T + j] = v;
        sum += v;
      }
      for (std::size_t j = 0; j < T; ++j) a[i * T + j] /= sum;
    }
    // R <- A_l * R, so the final product is A_L ... A_1.
    kernels::gemm(T, T, T, {a.data(), T}, {r.data(), T}, next.data(), T, false);
    r.swap(next);
  }
  return r;
}

Heatmap attention_rollout(const AttentionMaps& maps) {
  const auto r = rollout_matrix(maps);
  const int T = maps.rows;
  const int grid = static_cast<int>(std::lround(std::sqrt(static_cast<double>(T - 1))));
  if (grid < 1 || grid * grid != T - 1)
    throw Error(ErrorCode::Shape, "attention maps with " + std::to_string(T) + " tokens do not cover a square grid");
  Heatmap hm;
  hm.grid = grid;
  hm.values.assign(r.begin() + 1, r.begin() + T);
  const auto [lo, hi] = std::minmax_element(hm.values.begin(), hm.values.end());
  const double mn = *lo, mx = *hi;
  for (double& v : hm.values) v = mx > mn ? (v - mn) / (mx - mn) : 0.0;
  return hm;
}

Prediction predict(const ModelParams& params, const ModelConfig& config, const BinaryImage& image) {
  auto fr = forward(params, config, image);
  return {fr.output, attention_rollout(fr.attention)};
}

std::string serialize(const ModelParams& params, const ModelConfig& config) {
  config.validate();
  check_shapes(params, config);
  std::string out = "RRVT";
  put_u32(out, kFormatVersion);
  for (int v : {config.image_size, config.patch_size, config.in_channels, config.embed_dim, config.depth, config.heads,
                config.mlp_ratio, config.head_hidden})
    put_u32(out, static_cast<std::uint32_t>(v));
  const auto named = params.named();
  put_u32(out, static_cast<std::uint32_t>(named.size()));
  for (const auto& [name, t] : named) {
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    put_u32(out, static_cast<std::uint32_t>(t->shape.size()));
    for (int d : t->shape) put_u32(out, static_cast<std::uint32_t>(d));
    for (double v : t->data) put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  }
  return out;
}

std::pair<ModelParams, ModelConfig> deserialize(std::string_view bytes) {
  Reader rd(bytes);
  if (rd.take(4) != "RRVT") throw Error(ErrorCode::Format, "bad magic: not a model file");
  const auto version = rd.u32();
  if (version != kFormatVersion)
    throw Error(ErrorCode::Format, "unsupported model file version " + std::to_string(version));
  ModelConfig cfg;
  for (int* f : {&cfg.image_size, &cfg.patch_size, &cfg.in_channels, &cfg.embed_dim, &cfg.depth, &cfg.heads,
                 &cfg.mlp_ratio, &cfg.head_hidden}) {
    const auto v = rd.u32();
    if (v > kMaxDim) throw Error(ErrorCode::Format, "model file config field out of range");
    *f = static_cast<int>(v);
  }
  try {
    cfg.validate();
  } catch (const Error& e) {
    throw Error(ErrorCode::Format, std::string("model file config is invalid: ") + e.what());
  }
  ModelParams params = ModelParams::zeros(cfg);
  auto named = params.named();
  const auto count = rd.u32();
  if (count != named.size())
    throw Error(ErrorCode::Format, "model file holds " + std::to_string(count) + " tensors, config implies " +
                                       std::to_string(named.size()));
  for (auto& [expected_name, t] : named) {
    const auto len = rd.u32();
    const auto name = rd.take(len);
    if (name != expected_name)
      throw Error(ErrorCode::Format, "unexpected tensor " + std::string(name) + ", expected " + expected_name);
    const auto ndim = rd.u32();
    if (ndim > 8) throw Error(ErrorCode::Format, "tensor " + expected_name + " has too many dimensions");
    std::vector<int> shape;
    for (std::uint32_t i = 0; i < ndim; ++i) {
      const auto d = rd.u32();
      if (d > kMaxDim) throw Error(ErrorCode::Format, "tensor " + expected_name + " dimension out of range");
      shape.push_back(static_cast<int>(d));
    }
    if (shape != t->shape)
      throw Error(ErrorCode::Format, "tensor " + expected_name + " has shape " + shape_string(shape) + ", expected " +
                                         shape_string(t->shape));
    const auto raw = rd.take(t->size() * 4);
    const auto* b = reinterpret_cast<const unsigned char*>(raw.data());
    for (std::size_t i = 0; i < t->size(); ++i) t->data[i] = f32_from_le(b + 4 * i);
  }
  if (!rd.done()) throw Error(ErrorCode::Format, "trailing bytes after model tensors");
  return {std::move(params), cfg};
}

void save_model(const std::filesystem::path& path, const ModelParams& params, const ModelConfig& config) {
  const auto bytes = serialize(params, config);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::Format, "cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorCode::Format, "failed writing " + path.string());
}

std::pair<ModelParams, ModelConfig> load_model(const std::filesystem::path& path) {
  return deserialize(read_file(path, ErrorCode::Format));
}

ModelParams round_to_float(const ModelParams& params) {
  ModelParams out = params;
  for (auto& [name, t] : out.named())
    for (double& v : t->data) v = static_cast<float>(v);
  return out;
}

// ---- external weights ----

TensorDict read_safetensors(const std::filesystem::path& path) {
  const std::string bytes = read_file(path, ErrorCode::Import);
  if (bytes.size() < 8) throw Error(ErrorCode::Import, "weight file is truncated: " + path.string());
  std::uint64_t header_len = 0;
  for (int i = 0; i < 8; ++i) header_len |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[i])) << (8 * i);
  if (header_len > bytes.size() - 8) throw Error(ErrorCode::Import, "weight file header is truncated");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(8, header_len));
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::Import, std::string("weight file header is not JSON: ") + e.what());
  }
  const std::size_t base = 8 + header_len;
  TensorDict out;
  for (const auto& [name, info] : header.items()) {
    if (name == "__metadata__") continue;
    try {
      const auto dtype = info.at("dtype").get<std::string>();
      ExternalTensor t;
      t.shape = info.at("shape").get<std::vector<int>>();
      const auto offsets = info.at("data_offsets").get<std::vector<std::size_t>>();
      const std::size_t width = dtype == "F32" ? 4 : dtype == "F64" ? 8 : 0;
      if (width == 0) throw Error(ErrorCode::Import, "tensor " + name + " has unsupported dtype " + dtype);
      const std::size_t n = product(t.shape);
      if (offsets.size() != 2 || offsets[1] < offsets[0] || offsets[1] - offsets[0] != n * width ||
          base + offsets[1] > bytes.size())
        throw Error(ErrorCode::Import, "tensor " + name + " has inconsistent data offsets");
      const auto* b = reinterpret_cast<const unsigned char*>(bytes.data() + base + offsets[0]);
      t.data.resize(n);
      for (std::size_t i = 0; i < n; ++i) t.data[i] = width == 4 ? f32_from_le(b + 4 * i) : f64_from_le(b + 8 * i);
      out.emplace(name, std::move(t));
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::Import, "malformed header entry for " + name + ": " + e.what());
    }
  }
  return out;
}

void write_safetensors(const std::filesystem::path& path, const TensorDict& tensors) {
  nlohmann::json header = nlohmann::json::object();
  std::string data;
  for (const auto& [name, t] : tensors) {
    if (product(t.shape) != t.data.size())
      throw Error(ErrorCode::Shape, "tensor " + name + " data does not match shape " + shape_string(t.shape));
    const std::size_t begin = data.size();
    for (double v : t.data) put_u32(data, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
    header[name] = {{"dtype", "F32"}, {"shape", t.shape}, {"data_offsets", {begin, data.size()}}};
  }
  std::string h = header.dump();
  while ((8 + h.size()) % 8 != 0) h.push_back(' ');
  std::string out;
  const std::uint64_t len = h.size();
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((len >> (8 * i)) & 0xFF));
  out += h;
  out += data;
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error(ErrorCode::Import, "cannot write " + path.string());
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
}

std::vector<NameRule> parse_name_table(std::string_view text, int depth) {
  std::vector<NameRule> rules;
  std::istringstream in{std::string(text)};
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    std::istringstream ls(line);
    NameRule r;
    if (!(ls >> r.external)) continue;
    std::string extra;
    if (!(ls >> r.internal >> r.transform) || (ls >> extra))
      throw Error(ErrorCode::Import, "name table line " + std::to_string(line_no) + " needs three fields");
    if (r.external.find("{i}") != std::string::npos || r.internal.find("{i}") != std::string::npos) {
      for (int i = 0; i < depth; ++i) {
        NameRule e = r;
        for (std::string* s : {&e.external, &e.internal})
          for (auto p = s->find("{i}"); p != std::string::npos; p = s->find("{i}")) s->replace(p, 3, std::to_string(i));
        rules.push_back(std::move(e));
      }
    } else {
      rules.push_back(std::move(r));
    }
  }
  return rules;
}

std::vector<NameRule> load_name_table(const std::filesystem::path& path, int depth) {
  return parse_name_table(read_file(path, ErrorCode::Import), depth);
}

ModelParams import_pretrained(const TensorDict& weights, const ModelConfig& cfg, const std::vector<NameRule>& table,
                              std::uint64_t seed, double label_mean) {
  cfg.validate();
  ModelParams params = ModelParams::zeros(cfg);
  std::map<std::string, Tensor*> targets;
  for (auto& [name, t] : params.named()) targets[name] = t;

  std::vector<std::string> missing;
  for (const auto& r : table)
    if (!weights.contains(r.external) && std::find(missing.begin(), missing.end(), r.external) == missing.end())
      missing.push_back(r.external);
  if (!missing.empty()) {
    std::string list;
    for (const auto& m : missing) list += (list.empty() ? "" : ", ") + m;
    throw Error(ErrorCode::Import, "weight file is missing " + std::to_string(missing.size()) + " tensor(s): " + list,
                list);
  }

  std::map<std::string, bool> filled;
  for (const auto& r : table) {
    const auto it = targets.find(r.internal);
    if (it == targets.end()) throw Error(ErrorCode::Import, "name table targets unknown tensor " + r.internal);
    Tensor& dst = *it->second;
    const ExternalTensor& src = weights.at(r.external);
    const std::string& tr = r.transform;

    std::vector<int> expected;
    const int D = cfg.embed_dim;
    int part = -1;
    if (tr == "copy") {
      expected = dst.shape;
    } else if (tr == "squeeze") {
      // Leading unit dimensions are dropped, e.g. [1, 1, D] -> [D].
      expected = dst.shape;
      if (src.shape.size() > expected.size())
        expected.insert(expected.begin(), src.shape.size() - expected.size(), 1);
    } else if (tr == "linear") {
      expected = {dst.shape.at(1), dst.shape.at(0)};
    } else if (tr == "conv") {
      expected = {D, cfg.in_channels, cfg.patch_size, cfg.patch_size};
    } else if (tr.starts_with("qkv_weight:") || tr.starts_with("qkv_bias:")) {
      part = std::stoi(tr.substr(tr.find(':') + 1));
      if (part < 0 || part > 2) throw Error(ErrorCode::Import, "bad qkv part in transform " + tr);
      expected = tr.starts_with("qkv_weight:") ? std::vector<int>{3 * D, D} : std::vector<int>{3 * D};
    } else {
      throw Error(ErrorCode::Import, "unknown transform " + tr + " for " + r.external);
    }
    if (src.shape != expected)
      throw Error(ErrorCode::Import,
                  "tensor " + r.external + ": expected shape " + shape_string(expected) + ", found " +
                      shape_string(src.shape),
                  "expected " + shape_string(expected) + " found " + shape_string(src.shape));

    if (tr == "copy" || tr == "squeeze" || tr == "conv") {
      if (tr == "conv") {
        // [D, C, p, p] -> [C*p*p, D]; the inner order (c, py, px) matches image_to_patches.
        const std::size_t P = cfg.patch_dim();
        for (std::size_t o = 0; o < static_cast<std::size_t>(D); ++o)
          for (std::size_t k = 0; k < P; ++k) dst.data[k * D + o] = src.data[o * P + k];
      } else {
        dst.data = src.data;
      }
    } else if (tr == "linear") {
      const std::size_t in = dst.shape[0], out = dst.shape[1];
      for (std::size_t o = 0; o < out; ++o)
        for (std::size_t i = 0; i < in; ++i) dst.data[i * out + o] = src.data[o * in + i];
    } else if (tr.starts_with("qkv_weight:")) {
      for (std::size_t o = 0; o < static_cast<std::size_t>(D); ++o)
        for (std::size_t i = 0; i < static_cast<std::size_t>(D); ++i)
          dst.data[i * D + o] = src.data[(part * D + o) * D + i];
    } else {
      std::copy_n(src.data.begin() + static_cast<std::ptrdiff_t>(part) * D, D, dst.data.begin());
    }
    filled[r.internal] = true;
  }

  for (const auto& [name, t] : params.named()) {
    if (name.starts_with("head.")) continue;
    if (!filled.contains(name)) throw Error(ErrorCode::Import, "name table does not provide tensor " + name);
  }
  init_head(params, cfg, seed, label_mean);
  if (!params.all_finite()) throw Error(ErrorCode::Import, "imported weights contain non-finite values");
  return params;
}

ModelParams import_pretrained(const std::filesystem::path& weight_file, const ModelConfig& config,
                              const std::filesystem::path& table_file, std::uint64_t seed, double label_mean) {
  return import_pretrained(read_safetensors(weight_file), config, load_name_table(table_file, config.depth), seed,
                           label_mean);
}

}  // namespace roomroam
