#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "roomroam/layout.hpp"
#include "roomroam/rdwsim.hpp"

namespace roomroam {

enum class Split { Train, Val, Test, Unassigned };

std::string_view to_string(Split split);
Split split_from_string(std::string_view name);

struct LayoutRecord {
  std::string id;  // "g{n}-{index}"
  Layout layout;
};

struct Sample {
  std::string id;
  Layout layout;
  std::vector<int> per_path_resets;
  double mean_resets = 0.0;
  Split split = Split::Unassigned;

  int object_count() const { return static_cast<int>(layout.objects.size()); }
};

// Object count -> number of layouts.
using GroupCounts = std::map<int, int>;

// Parses "3:100,4:100,5:100".
GroupCounts parse_group_counts(const std::string& text);

// Layout for group n, index i is sampled from derive_seed(derive_seed(seed, n), i + attempt * 2^32).
std::vector<LayoutRecord> generate_layouts(const GroupCounts& counts, std::uint64_t seed,
                                           const Rect& room = square_room(),
                                           const Catalog& catalog = Catalog::standard());

// Record r is simulated with estimate seed derive_seed(seed, r). Parallel over records.
// Throws on the first infeasible layout.
std::vector<Sample> simulate_layouts(const std::vector<LayoutRecord>& records, const SimConfig& cfg, int paths,
                                     std::uint64_t seed);

// generate_layouts + simulate_layouts; an infeasible layout is logged, resampled with the next
// attempt index, and simulated again.
std::vector<Sample> build_dataset(const GroupCounts& counts, const SimConfig& cfg, int paths, std::uint64_t seed,
                                  const Rect& room = square_room(), const Catalog& catalog = Catalog::standard());

struct SplitRatios {
  double train = 0.6;
  double val = 0.2;
  double test = 0.2;
};

// Samples are ordered by id, permuted by seed and cut into contiguous train/val/test blocks.
// Val and test sizes are floor(n * ratio); the remainder goes to train.
void assign_splits(std::vector<Sample>& samples, const SplitRatios& ratios, std::uint64_t seed);
std::vector<Sample> split(std::vector<Sample> samples, const SplitRatios& ratios, std::uint64_t seed);
std::vector<Sample> select_split(const std::vector<Sample>& samples, Split which);

// Horizontal flip, vertical flip, then 90/180/270 degree rotations, each drawn independently with
// probability `prob` in that order. The label is passed through.
std::pair<BinaryImage, double> augment(const BinaryImage& image, double label, std::uint64_t seed,
                                       double prob = 0.05);

inline constexpr const char* kDatasetFormat = "roomroam-dataset";
inline constexpr const char* kLayoutsFormat = "roomroam-layouts";

void write_dataset(std::ostream& out, const std::vector<Sample>& samples);
std::vector<Sample> read_dataset(std::istream& in, const Catalog& catalog = Catalog::standard());
void save_dataset(const std::string& path, const std::vector<Sample>& samples);
std::vector<Sample> load_dataset(const std::string& path, const Catalog& catalog = Catalog::standard());

void write_layouts(std::ostream& out, const std::vector<LayoutRecord>& records);
std::vector<LayoutRecord> read_layouts(std::istream& in, const Catalog& catalog = Catalog::standard());

nlohmann::json sample_to_json(const Sample& sample);
Sample sample_from_json(const nlohmann::json& doc, const Catalog& catalog = Catalog::standard());

}  // namespace roomroam
