#include "roomroam/dataset.hpp"

#include <algorithm>
#include <charconv>
#include <exception>
#include <fstream>
#include <iostream>
#include <numeric>
#include <sstream>

#include "roomroam/error.hpp"
#include "roomroam/random.hpp"

namespace roomroam {

std::string_view to_string(Split split) {
  switch (split) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
    case Split::Unassigned: return "unassigned";
  }
  return "unassigned";
}

Split split_from_string(std::string_view name) {
  if (name == "train") return Split::Train;
  if (name == "val") return Split::Val;
  if (name == "test") return Split::Test;
  if (name == "unassigned") return Split::Unassigned;
  throw Error(ErrorCode::Schema, "unknown split '" + std::string(name) + "'", "split");
}

GroupCounts parse_group_counts(const std::string& text) {
  const auto bad = [](const std::string& item) {
    return Error(ErrorCode::InvalidInput, "expected n:count, got '" + item + "'");
  };
  const auto to_int = [&](std::string_view s, const std::string& item) {
    int v = 0;
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (s.empty() || ec != std::errc() || ptr != s.data() + s.size()) throw bad(item);
    return v;
  };
  GroupCounts counts;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto colon = item.find(':');
    if (colon == std::string::npos) throw bad(item);
    const int n = to_int(std::string_view(item).substr(0, colon), item);
    const int c = to_int(std::string_view(item).substr(colon + 1), item);
    if (c < 0) throw Error(ErrorCode::InvalidInput, "group count must be non-negative");
    if (n < 3 || n > 5) throw Error(ErrorCode::InvalidCount, "object count must be 3, 4 or 5");
    if (!counts.emplace(n, c).second) throw Error(ErrorCode::InvalidInput, "group " + std::to_string(n) + " listed twice");
  }
  if (counts.empty()) throw Error(ErrorCode::InvalidInput, "no groups given");
  return counts;
}

namespace {

std::uint64_t layout_seed(std::uint64_t seed, int n, int index, int attempt) {
  return derive_seed(derive_seed(seed, static_cast<std::uint64_t>(n)),
                     static_cast<std::uint64_t>(index) + (static_cast<std::uint64_t>(attempt) << 32));
}

std::string group_id(int n, int index) { return "g" + std::to_string(n) + "-" + std::to_string(index); }

Sample make_sample(const LayoutRecord& rec, ResetEstimate est) {
  Sample s;
  s.id = rec.id;
  s.layout = rec.layout;
  s.per_path_resets = std::move(est.per_path);
  s.mean_resets = est.mean;
  return s;
}

}  // namespace

std::vector<LayoutRecord> generate_layouts(const GroupCounts& counts, std::uint64_t seed, const Rect& room,
                                           const Catalog& catalog) {
  std::vector<LayoutRecord> out;
  for (const auto& [n, count] : counts)
    for (int i = 0; i < count; ++i)
      out.push_back({group_id(n, i), sample_layout(layout_seed(seed, n, i, 0), n, room, catalog)});
  return out;
}

std::vector<Sample> simulate_layouts(const std::vector<LayoutRecord>& records, const SimConfig& cfg, int paths,
                                     std::uint64_t seed) {
  if (paths < 1) throw Error(ErrorCode::InvalidInput, "paths must be at least 1");
  const auto n = static_cast<std::int64_t>(records.size());
  std::vector<Sample> out(records.size());
  std::vector<std::exception_ptr> errors(records.size());
#pragma omp parallel for schedule(dynamic, 1)
  for (std::int64_t r = 0; r < n; ++r) {
    try {
      out[r] = make_sample(records[r], estimate_resets_serial(records[r].layout, cfg, paths,
                                                              derive_seed(seed, static_cast<std::uint64_t>(r))));
    } catch (...) {
      errors[r] = std::current_exception();
    }
  }
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);
  return out;
}

std::vector<Sample> build_dataset(const GroupCounts& counts, const SimConfig& cfg, int paths, std::uint64_t seed,
                                  const Rect& room, const Catalog& catalog) {
  std::vector<LayoutRecord> records = generate_layouts(counts, seed, room, catalog);
  std::vector<std::pair<int, int>> origin;  // (group, index) per record
  for (const auto& [group, count] : counts)
    for (int i = 0; i < count; ++i) origin.emplace_back(group, i);

  std::vector<Sample> out(records.size());
  std::vector<int> attempts(records.size(), 0);
  std::vector<std::int64_t> pending(records.size());
  std::iota(pending.begin(), pending.end(), 0);
  while (!pending.empty()) {
    std::vector<std::exception_ptr> errors(pending.size());
    std::vector<char> infeasible(pending.size(), 0);
    const auto n = static_cast<std::int64_t>(pending.size());
#pragma omp parallel for schedule(dynamic, 1)
    for (std::int64_t k = 0; k < n; ++k) {
      const std::int64_t r = pending[k];
      try {
        out[r] = make_sample(records[r], estimate_resets_serial(records[r].layout, cfg, paths,
                                                                derive_seed(seed, static_cast<std::uint64_t>(r))));
      } catch (const Error& e) {
        if (e.code() == ErrorCode::InfeasibleLayout) infeasible[k] = 1;
        else errors[k] = std::current_exception();
      } catch (...) {
        errors[k] = std::current_exception();
      }
    }
    for (const auto& e : errors)
      if (e) std::rethrow_exception(e);
    std::vector<std::int64_t> next;
    for (std::size_t k = 0; k < pending.size(); ++k) {
      if (!infeasible[k]) continue;
      const std::int64_t r = pending[k];
      const auto [group, index] = origin[r];
      if (++attempts[r] > 1000) throw Error(ErrorCode::InfeasibleLayout, "could not sample a feasible layout", records[r].id);
      std::cerr << "roomroam: layout " << records[r].id << " infeasible, resampling (attempt " << attempts[r] << ")\n";
      records[r].layout = sample_layout(layout_seed(seed, group, index, attempts[r]), group, room, catalog);
      next.push_back(r);
    }
    pending = std::move(next);
  }
  return out;
}

void assign_splits(std::vector<Sample>& samples, const SplitRatios& ratios, std::uint64_t seed) {
  const double total = ratios.train + ratios.val + ratios.test;
  if (ratios.train < 0 || ratios.val < 0 || ratios.test < 0 || std::abs(total - 1.0) > 1e-9)
    throw Error(ErrorCode::InvalidInput, "split ratios must be non-negative and sum to 1");
  const std::size_t n = samples.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return samples[a].id < samples[b].id; });
  Rng rng(seed);
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  const auto n_val = static_cast<std::size_t>(std::floor(static_cast<double>(n) * ratios.val + 1e-9));
  const auto n_test = static_cast<std::size_t>(std::floor(static_cast<double>(n) * ratios.test + 1e-9));
  const std::size_t n_train = n - n_val - n_test;
  for (std::size_t i = 0; i < n; ++i)
    samples[order[i]].split = i < n_train ? Split::Train : (i < n_train + n_val ? Split::Val : Split::Test);
}

std::vector<Sample> split(std::vector<Sample> samples, const SplitRatios& ratios, std::uint64_t seed) {
  assign_splits(samples, ratios, seed);
  return samples;
}

std::vector<Sample> select_split(const std::vector<Sample>& samples, Split which) {
  std::vector<Sample> out;
  std::copy_if(samples.begin(), samples.end(), std::back_inserter(out),
               [&](const Sample& s) { return s.split == which; });
  return out;
}

std::pair<BinaryImage, double> augment(const BinaryImage& image, double label, std::uint64_t seed, double prob) {
  Rng rng(seed);
  BinaryImage out = image;
  if (rng.bernoulli(prob)) out = flip_horizontal(out);
  if (rng.bernoulli(prob)) out = flip_vertical(out);
  for (int quarter = 1; quarter <= 3; ++quarter)
    if (rng.bernoulli(prob)) out = rotate_image(out, quarter);
  return {std::move(out), label};
}

nlohmann::json sample_to_json(const Sample& s) {
  const nlohmann::json layout = layout_to_json(s.layout);
  nlohmann::json j;
  j["id"] = s.id;
  j["room"] = layout["room"];
  j["objects"] = layout["objects"];
  j["per_path_resets"] = s.per_path_resets;
  j["mean_resets"] = s.mean_resets;
  j["split"] = std::string(to_string(s.split));
  return j;
}

Sample sample_from_json(const nlohmann::json& doc, const Catalog& catalog) {
  if (!doc.is_object()) throw Error(ErrorCode::Schema, "sample must be a JSON object", "$");
  for (const char* key : {"id", "room", "objects", "per_path_resets", "mean_resets", "split"})
    if (!doc.contains(key)) throw Error(ErrorCode::Schema, std::string("sample is missing '") + key + "'", key);
  if (doc.size() != 6) throw Error(ErrorCode::Schema, "sample has unexpected keys", "$");
  Sample s;
  if (!doc["id"].is_string()) throw Error(ErrorCode::Schema, "'id' must be a string", "id");
  s.id = doc["id"].get<std::string>();
  s.layout = layout_from_json({{"room", doc["room"]}, {"objects", doc["objects"]}}, catalog);
  const auto& per = doc["per_path_resets"];
  if (!per.is_array() || per.empty())
    throw Error(ErrorCode::Schema, "'per_path_resets' must be a non-empty array", "per_path_resets");
  for (const auto& v : per) {
    if (!v.is_number_integer() || v.get<long long>() < 0)
      throw Error(ErrorCode::Schema, "reset counts must be non-negative integers", "per_path_resets");
    s.per_path_resets.push_back(v.get<int>());
  }
  if (!doc["mean_resets"].is_number()) throw Error(ErrorCode::Schema, "'mean_resets' must be a number", "mean_resets");
  s.mean_resets = doc["mean_resets"].get<double>();
  const double expected = summarize(s.per_path_resets).mean;
  if (std::abs(expected - s.mean_resets) > 1e-9 * std::max(1.0, std::abs(expected)))
    throw Error(ErrorCode::Schema, "'mean_resets' disagrees with per_path_resets", "mean_resets");
  if (!doc["split"].is_string()) throw Error(ErrorCode::Schema, "'split' must be a string", "split");
  s.split = split_from_string(doc["split"].get<std::string>());
  return s;
}

namespace {

void write_header(std::ostream& out, const char* format) {
  out << nlohmann::json{{"format", format}, {"version", 1}}.dump() << '\n';
}

void read_header(std::istream& in, const char* format) {
  std::string line;
  if (!std::getline(in, line)) throw Error(ErrorCode::Format, "missing header line");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::Format, "header line is not JSON", e.what());
  }
  if (!header.is_object() || header.value("format", "") != format || header.value("version", 0) != 1)
    throw Error(ErrorCode::Format, std::string("expected header {\"format\":\"") + format + "\",\"version\":1}");
}

template <typename Fn>
void for_each_line(std::istream& in, Fn&& fn) {
  std::string line;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      fn(nlohmann::json::parse(line));
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::Format, "line " + std::to_string(lineno) + " is not JSON", e.what());
    } catch (const Error& e) {
      throw Error(e.code(), "line " + std::to_string(lineno) + ": " + e.what(), e.detail());
    }
  }
}

}  // namespace

void write_dataset(std::ostream& out, const std::vector<Sample>& samples) {
  write_header(out, kDatasetFormat);
  for (const Sample& s : samples) out << sample_to_json(s).dump() << '\n';
}

std::vector<Sample> read_dataset(std::istream& in, const Catalog& catalog) {
  read_header(in, kDatasetFormat);
  std::vector<Sample> out;
  for_each_line(in, [&](const nlohmann::json& j) { out.push_back(sample_from_json(j, catalog)); });
  return out;
}

void save_dataset(const std::string& path, const std::vector<Sample>& samples) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::Config, "cannot write dataset file", path);
  write_dataset(out, samples);
}

std::vector<Sample> load_dataset(const std::string& path, const Catalog& catalog) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::Config, "cannot open dataset file", path);
  return read_dataset(in, catalog);
}

void write_layouts(std::ostream& out, const std::vector<LayoutRecord>& records) {
  write_header(out, kLayoutsFormat);
  for (const LayoutRecord& r : records) {
    nlohmann::json j = layout_to_json(r.layout);
    j["id"] = r.id;
    out << j.dump() << '\n';
  }
}

std::vector<LayoutRecord> read_layouts(std::istream& in, const Catalog& catalog) {
  read_header(in, kLayoutsFormat);
  std::vector<LayoutRecord> out;
  for_each_line(in, [&](const nlohmann::json& j) {
    if (!j.is_object() || !j.contains("id") || !j["id"].is_string())
      throw Error(ErrorCode::Schema, "layout record needs a string 'id'", "id");
    out.push_back({j["id"].get<std::string>(), layout_from_json(j, catalog)});
  });
  return out;
}

}  // namespace roomroam
