#include "roomroam/training.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <ostream>
#include <sstream>

#include "roomroam/error.hpp"
#include "roomroam/random.hpp"

namespace roomroam {

namespace {

using KeyValues = std::map<std::string, std::string>;

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

KeyValues parse_key_values(std::string_view text) {
  KeyValues kv;
  std::istringstream in{std::string(text)};
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const std::string t = trim(line);
    if (t.empty()) continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos)
      throw Error(ErrorCode::Config, "line " + std::to_string(line_no) + ": expected key = value");
    const std::string key = trim(std::string_view(t).substr(0, eq));
    const std::string value = trim(std::string_view(t).substr(eq + 1));
    if (key.empty() || value.empty())
      throw Error(ErrorCode::Config, "line " + std::to_string(line_no) + ": empty key or value");
    if (!kv.emplace(key, value).second) throw Error(ErrorCode::Config, "duplicate key " + key);
  }
  return kv;
}

template <class T>
T parse_number(const std::string& key, const std::string& value) {
  T out{};
  const char* end = value.data() + value.size();
  const auto [ptr, ec] = std::from_chars(value.data(), end, out);
  if (ec != std::errc() || ptr != end) throw Error(ErrorCode::Config, "invalid value for " + key + ": " + value);
  return out;
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  throw Error(ErrorCode::Config, "invalid boolean for " + key + ": " + value);
}

std::string read_text(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::Config, "cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string fmt(double v) {
  std::ostringstream ss;
  ss.precision(17);
  ss << v;
  return ss.str();
}

// Written as a convex combination so both phase endpoints come out exact.
double cosine(double start, double end, double pct) {
  const double w = (std::cos(M_PI * pct) + 1.0) / 2.0;
  return start * w + end * (1.0 - w);
}

void sgd_step(ModelParams& params, ModelParams& velocity, const ModelParams& grads, double lr, double momentum,
              double weight_decay) {
  auto p = params.named();
  auto v = velocity.named();
  const auto g = grads.named();
  for (std::size_t t = 0; t < p.size(); ++t) {
    auto& pd = p[t].second->data;
    auto& vd = v[t].second->data;
    const auto& gd = g[t].second->data;
    const double shrink = decays(p[t].first) ? 1.0 - lr * weight_decay : 1.0;
    for (std::size_t i = 0; i < pd.size(); ++i) {
      vd[i] = momentum * vd[i] + gd[i];
      pd[i] = pd[i] * shrink - lr * vd[i];
    }
  }
}

struct Prepared {
  std::vector<BinaryImage> images;
  std::vector<double> labels;
};

Prepared prepare(const std::vector<Sample>& samples, int image_size) {
  Prepared p;
  p.images.resize(samples.size());
  p.labels.resize(samples.size());
  const auto n = static_cast<long long>(samples.size());
#pragma omp parallel for schedule(dynamic, 4)
  for (long long i = 0; i < n; ++i) p.images[i] = layout_to_image(samples[i].layout, image_size);
  for (std::size_t i = 0; i < samples.size(); ++i) p.labels[i] = samples[i].mean_resets;
  return p;
}

}  // namespace

void TrainConfig::validate() const {
  const auto fail = [](const std::string& m) { throw Error(ErrorCode::Config, m); };
  if (batch_size <= 0) fail("batch_size must be positive");
  if (!(max_lr > 0.0) || !std::isfinite(max_lr)) fail("max_lr must be positive");
  if (epochs <= 0) fail("epochs must be positive");
  if (!(weight_decay >= 0.0)) fail("weight_decay must be non-negative");
  if (patience <= 0) fail("patience must be positive");
  if (patience >= epochs) fail("patience must be smaller than epochs");
  if (!(augment_prob >= 0.0 && augment_prob <= 1.0)) fail("augment_prob must be in [0, 1]");
  const auto& s = schedule;
  if (!(s.pct_start > 0.0 && s.pct_start < 1.0)) fail("pct_start must be in (0, 1)");
  if (!(s.div_factor > 0.0) || !(s.final_div_factor > 0.0)) fail("div factors must be positive");
  if (!(s.base_momentum >= 0.0 && s.base_momentum <= s.max_momentum && s.max_momentum < 1.0))
    fail("momentum range must satisfy 0 <= base <= max < 1");
  if (!(s.momentum >= 0.0 && s.momentum < 1.0)) fail("momentum must be in [0, 1)");
}

TrainConfig parse_train_config(std::string_view text) {
  TrainConfig c;
  for (const auto& [k, v] : parse_key_values(text)) {
    if (k == "batch_size") c.batch_size = parse_number<int>(k, v);
    else if (k == "max_lr") c.max_lr = parse_number<double>(k, v);
    else if (k == "epochs") c.epochs = parse_number<int>(k, v);
    else if (k == "weight_decay") c.weight_decay = parse_number<double>(k, v);
    else if (k == "patience") c.patience = parse_number<int>(k, v);
    else if (k == "augment_prob") c.augment_prob = parse_number<double>(k, v);
    else if (k == "seed") c.seed = parse_number<std::uint64_t>(k, v);
    else if (k == "pct_start") c.schedule.pct_start = parse_number<double>(k, v);
    else if (k == "div_factor") c.schedule.div_factor = parse_number<double>(k, v);
    else if (k == "final_div_factor") c.schedule.final_div_factor = parse_number<double>(k, v);
    else if (k == "base_momentum") c.schedule.base_momentum = parse_number<double>(k, v);
    else if (k == "max_momentum") c.schedule.max_momentum = parse_number<double>(k, v);
    else if (k == "cycle_momentum") c.schedule.cycle_momentum = parse_bool(k, v);
    else if (k == "momentum") c.schedule.momentum = parse_number<double>(k, v);
    else throw Error(ErrorCode::Config, "unknown training key " + k);
  }
  c.validate();
  return c;
}

TrainConfig load_train_config(const std::string& path) { return parse_train_config(read_text(path)); }

ModelConfig parse_model_config(std::string_view text) {
  ModelConfig c;
  for (const auto& [k, v] : parse_key_values(text)) {
    int* field = k == "image_size"    ? &c.image_size
                 : k == "patch_size"  ? &c.patch_size
                 : k == "in_channels" ? &c.in_channels
                 : k == "embed_dim"   ? &c.embed_dim
                 : k == "depth"       ? &c.depth
                 : k == "heads"       ? &c.heads
                 : k == "mlp_ratio"   ? &c.mlp_ratio
                 : k == "head_hidden" ? &c.head_hidden
                                      : nullptr;
    if (!field) throw Error(ErrorCode::Config, "unknown model key " + k);
    *field = parse_number<int>(k, v);
  }
  c.validate();
  return c;
}

ModelConfig load_model_config(const std::string& path) { return parse_model_config(read_text(path)); }

std::string to_text(const TrainConfig& c) {
  std::ostringstream o;
  o << "batch_size = " << c.batch_size << "\nmax_lr = " << fmt(c.max_lr) << "\nepochs = " << c.epochs
    << "\nweight_decay = " << fmt(c.weight_decay) << "\npatience = " << c.patience
    << "\naugment_prob = " << fmt(c.augment_prob) << "\nseed = " << c.seed
    << "\npct_start = " << fmt(c.schedule.pct_start) << "\ndiv_factor = " << fmt(c.schedule.div_factor)
    << "\nfinal_div_factor = " << fmt(c.schedule.final_div_factor)
    << "\nbase_momentum = " << fmt(c.schedule.base_momentum) << "\nmax_momentum = " << fmt(c.schedule.max_momentum)
    << "\ncycle_momentum = " << (c.schedule.cycle_momentum ? "true" : "false")
    << "\nmomentum = " << fmt(c.schedule.momentum) << "\n";
  return o.str();
}

std::string to_text(const ModelConfig& c) {
  std::ostringstream o;
  o << "image_size = " << c.image_size << "\npatch_size = " << c.patch_size << "\nin_channels = " << c.in_channels
    << "\nembed_dim = " << c.embed_dim << "\ndepth = " << c.depth << "\nheads = " << c.heads
    << "\nmlp_ratio = " << c.mlp_ratio << "\nhead_hidden = " << c.head_hidden << "\n";
  return o.str();
}

ScheduleValue one_cycle_lr(long step, long total_steps, const TrainConfig& cfg) {
  if (total_steps <= 0 || step < 0 || step >= total_steps)
    throw Error(ErrorCode::Range, "schedule step " + std::to_string(step) + " outside [0, " +
                                      std::to_string(total_steps) + ")");
  const auto& s = cfg.schedule;
  const double initial = cfg.max_lr / s.div_factor;
  const double final_lr = initial / s.final_div_factor;
  const double peak = s.pct_start * static_cast<double>(total_steps) - 1.0;
  const double last = static_cast<double>(total_steps - 1);
  const double x = static_cast<double>(step);

  ScheduleValue out;
  if (x <= peak) {
    const double pct = peak > 0.0 ? x / peak : 1.0;
    out.lr = cosine(initial, cfg.max_lr, pct);
    out.momentum = cosine(s.max_momentum, s.base_momentum, pct);
  } else {
    const double pct = last > peak ? (x - peak) / (last - peak) : 1.0;
    out.lr = cosine(cfg.max_lr, final_lr, pct);
    out.momentum = cosine(s.base_momentum, s.max_momentum, pct);
  }
  if (!s.cycle_momentum) out.momentum = s.momentum;
  return out;
}

bool EarlyStopping::update(int epoch, double val_loss) {
  improved_ = val_loss < best_loss_ - kMinDelta;
  if (improved_) {
    best_loss_ = val_loss;
    best_epoch_ = epoch;
    since_best_ = 0;
    return false;
  }
  return ++since_best_ >= patience_;
}

double mse_loss(const ModelParams& params, const ModelConfig& config, std::span<const BinaryImage> images,
                std::span<const double> labels) {
  if (images.size() != labels.size() || images.empty())
    throw Error(ErrorCode::Shape, "loss needs matching, non-empty images and labels");
  std::vector<double> sq(images.size());
  std::vector<std::exception_ptr> errors(images.size());
  const auto n = static_cast<long long>(images.size());
#pragma omp parallel for schedule(dynamic, 1)
  for (long long i = 0; i < n; ++i) {
    try {
      const double d = predict_value(params, config, images[i]) - labels[i];
      sq[i] = d * d;
    } catch (...) {
      errors[i] = std::current_exception();
    }
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  double sum = 0.0;
  for (double v : sq) sum += v;
  return sum / static_cast<double>(sq.size());
}

TrainResult train(const std::vector<Sample>& dataset, const ModelConfig& model_config, const TrainConfig& cfg,
                  const ModelParams* init, const EpochCallback& on_epoch) {
  model_config.validate();
  cfg.validate();
  const auto train_set = select_split(dataset, Split::Train);
  const auto val_set = select_split(dataset, Split::Val);
  if (train_set.empty()) throw Error(ErrorCode::Config, "dataset has no train samples");
  if (val_set.empty()) throw Error(ErrorCode::Config, "dataset has no val samples");

  const Prepared tr = prepare(train_set, model_config.image_size);
  const Prepared va = prepare(val_set, model_config.image_size);
  const double label_mean = std::accumulate(tr.labels.begin(), tr.labels.end(), 0.0) / tr.labels.size();

  ModelParams params = init ? *init : init_params(model_config, derive_seed(cfg.seed, 1), label_mean);
  check_shapes(params, model_config);
  ModelParams velocity = ModelParams::zeros(model_config);

  const std::size_t n = tr.images.size();
  const std::size_t bs = static_cast<std::size_t>(cfg.batch_size);
  const long steps_per_epoch = static_cast<long>((n + bs - 1) / bs);
  const long total_steps = steps_per_epoch * cfg.epochs;
  const std::uint64_t shuffle_seed = derive_seed(cfg.seed, 2);
  const std::uint64_t augment_seed = derive_seed(cfg.seed, 3);

  TrainResult result;
  result.best_params = params;
  EarlyStopping stopper(cfg.patience);
  long step = 0;
  std::vector<std::size_t> order(n);
  std::vector<BinaryImage> batch_images;
  std::vector<double> batch_labels;

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(derive_seed(shuffle_seed, static_cast<std::uint64_t>(epoch)));
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    const std::uint64_t epoch_aug = derive_seed(augment_seed, static_cast<std::uint64_t>(epoch));

    double loss_sum = 0.0;
    double lr = 0.0;
    for (std::size_t start = 0, batch = 0; start < n; start += bs, ++batch) {
      const std::size_t end = std::min(n, start + bs);
      batch_images.clear();
      batch_labels.clear();
      for (std::size_t j = start; j < end; ++j) {
        const std::size_t idx = order[j];
        if (cfg.augment_prob > 0.0) {
          auto [img, label] = augment(tr.images[idx], tr.labels[idx], derive_seed(epoch_aug, idx), cfg.augment_prob);
          batch_images.push_back(std::move(img));
          batch_labels.push_back(label);
        } else {
          batch_images.push_back(tr.images[idx]);
          batch_labels.push_back(tr.labels[idx]);
        }
      }
      const ScheduleValue sv = one_cycle_lr(step++, total_steps, cfg);
      lr = sv.lr;
      BatchGradient g;
      try {
        g = backward(params, model_config, batch_images, batch_labels);
      } catch (const Error& e) {
        if (e.code() != ErrorCode::Numeric) throw;
        throw Error(ErrorCode::Numeric,
                    "training diverged at epoch " + std::to_string(epoch) + ", batch " + std::to_string(batch) +
                        ": " + e.what(),
                    "epoch " + std::to_string(epoch) + " batch " + std::to_string(batch));
      }
      if (!std::isfinite(g.loss))
        throw Error(ErrorCode::Numeric,
                    "non-finite loss at epoch " + std::to_string(epoch) + ", batch " + std::to_string(batch),
                    "epoch " + std::to_string(epoch) + " batch " + std::to_string(batch));
      loss_sum += g.loss * static_cast<double>(end - start);
      sgd_step(params, velocity, g.grads, sv.lr, sv.momentum, cfg.weight_decay);
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / static_cast<double>(n);
    try {
      rec.val_loss = mse_loss(params, model_config, va.images, va.labels);
    } catch (const Error& e) {
      if (e.code() != ErrorCode::Numeric) throw;
      throw Error(ErrorCode::Numeric, "validation diverged after epoch " + std::to_string(epoch) + ": " + e.what(),
                  "epoch " + std::to_string(epoch));
    }
    rec.lr = lr;
    result.history.push_back(rec);
    if (on_epoch) on_epoch(rec);

    const bool stop = stopper.update(epoch, rec.val_loss);
    if (stopper.improved()) result.best_params = params;
    if (stop) break;
  }
  result.best_epoch = stopper.best_epoch();
  result.best_val_loss = stopper.best_loss();
  return result;
}

Metrics compute_metrics(std::span<const double> predicted, std::span<const double> truth) {
  if (predicted.size() != truth.size() || truth.empty())
    throw Error(ErrorCode::Shape, "metrics need matching, non-empty prediction and label lists");
  const double n = static_cast<double>(truth.size());
  double ss_res = 0.0, abs_sum = 0.0, mean = 0.0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const double d = predicted[i] - truth[i];
    ss_res += d * d;
    abs_sum += std::abs(d);
    mean += truth[i];
  }
  mean /= n;
  double ss_tot = 0.0;
  for (double y : truth) ss_tot += (y - mean) * (y - mean);
  Metrics m;
  m.rmse = std::sqrt(ss_res / n);
  m.mae = abs_sum / n;
  if (ss_tot > 0.0) m.r2 = 1.0 - ss_res / ss_tot;
  else m.r2 = ss_res == 0.0 ? 1.0 : -std::numeric_limits<double>::infinity();
  return m;
}

std::vector<double> predict_samples(const ModelParams& params, const ModelConfig& config,
                                    const std::vector<Sample>& samples) {
  std::vector<double> out(samples.size());
  std::vector<std::exception_ptr> errors(samples.size());
  const auto n = static_cast<long long>(samples.size());
#pragma omp parallel for schedule(dynamic, 1)
  for (long long i = 0; i < n; ++i) {
    try {
      out[i] = predict_value(params, config, layout_to_image(samples[i].layout, config.image_size));
    } catch (...) {
      errors[i] = std::current_exception();
    }
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  return out;
}

Metrics evaluate(const ModelParams& params, const ModelConfig& config, const std::vector<Sample>& samples) {
  if (samples.empty()) throw Error(ErrorCode::Config, "no samples to evaluate");
  const auto pred = predict_samples(params, config, samples);
  std::vector<double> truth;
  truth.reserve(samples.size());
  for (const auto& s : samples) truth.push_back(s.mean_resets);
  return compute_metrics(pred, truth);
}

void write_history_csv(std::ostream& out, const std::vector<EpochRecord>& history) {
  out << "epoch,train_loss,val_loss,lr\n";
  for (const auto& r : history) out << r.epoch << ',' << fmt(r.train_loss) << ',' << fmt(r.val_loss) << ',' << fmt(r.lr) << '\n';
}

}  // namespace roomroam
