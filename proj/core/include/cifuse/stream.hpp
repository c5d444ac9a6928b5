#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace cifuse {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

// One image with its class index. Pixels are row-major, channel-last
// (y, x, channel), 8-bit intensities.
struct LabeledExample {
  std::vector<uint8_t> pixels;
  int label = 0;
};

struct Dataset {
  int height = 0;
  int width = 0;
  int channels = 0;
  std::vector<LabeledExample> examples;

  int pixel_count() const { return height * width * channels; }
  int num_classes() const;
};

// Thrown by dataset readers on malformed input; carries the byte offset of
// the first inconsistency.
class FormatError : public std::runtime_error {
 public:
  FormatError(const std::string& msg, uint64_t offset)
      : std::runtime_error(msg + " (byte offset " + std::to_string(offset) + ")"),
        offset_(offset) {}
  uint64_t offset() const { return offset_; }

 private:
  uint64_t offset_;
};

// Seed value that makes make_class_order return the identity permutation.
inline constexpr int64_t kNaturalOrderSeed = -1;

struct ClassOrder {
  std::vector<int> permutation;  // learning order: permutation[i] = i-th class
  int64_t seed = kNaturalOrderSeed;
};

ClassOrder make_class_order(int num_classes, int64_t seed);

// Ordered partition of the class order into rounds. Round indices are
// 1-based throughout the project.
class TaskStream {
 public:
  TaskStream(Dataset train, Dataset test, ClassOrder order,
             std::vector<int> round_sizes);

  int num_rounds() const { return static_cast<int>(round_sizes_.size()); }
  const ClassOrder& order() const { return order_; }
  const std::vector<int>& round_sizes() const { return round_sizes_; }
  const Dataset& train() const { return train_; }
  const Dataset& test() const { return test_; }

  // Classes introduced at round t, in learning order.
  std::vector<int> round_classes(int t) const;
  // Classes of rounds 1..t, in learning order.
  std::vector<int> seen_classes(int t) const;
  // Count of classes before round t (u of the round contract).
  int old_class_count(int t) const;

  std::vector<LabeledExample> round_train(int t) const;
  std::vector<LabeledExample> round_test(int t) const;
  // Test examples of every class seen up to and including round t.
  std::vector<LabeledExample> seen_test(int t) const;

  // FNV-1a over labels and pixels of all round_train sets in round order;
  // two streams feed identical training data iff their checksums match.
  uint64_t train_checksum() const;

 private:
  std::vector<LabeledExample> collect(const Dataset& d,
                                      const std::vector<int>& classes) const;
  Dataset train_;
  Dataset test_;
  ClassOrder order_;
  std::vector<int> round_sizes_;
  std::vector<int> offsets_;  // cumulative class counts, offsets_[t] = sum c_1..c_t
};

TaskStream split_rounds(Dataset train, Dataset test, ClassOrder order,
                        std::vector<int> round_sizes);

// Greedy herding order: at step s pick the unchosen candidate whose inclusion
// brings the running mean of chosen features closest to the class mean.
// `features` is one row per candidate. Ties resolve to the lowest index.
std::vector<int> herding_select(const Mat& features, int k);

// Budget-constrained exemplar store. Per-class lists are kept in herding
// selection order; shrinking the quota truncates to a prefix of that order.
class ExemplarMemory {
 public:
  explicit ExemplarMemory(int budget);

  int budget() const { return budget_; }
  int total_stored() const;
  std::vector<int> stored_classes() const;
  bool has_class(int label) const;
  const std::vector<LabeledExample>& exemplars(int label) const;
  std::vector<LabeledExample> all() const;

  // Internal: install a herded list for a new class / truncate to quota.
  void set_class(int label, std::vector<LabeledExample> ordered);
  void truncate(int quota);

 private:
  int budget_;
  std::vector<int> class_ids_;  // insertion order
  std::vector<std::vector<LabeledExample>> lists_;
  int index_of(int label) const;
};

// Candidate pool for one new class: the examples plus their feature rows in
// matching order (features drive herding, examples are what gets stored).
struct ClassCandidates {
  int label = 0;
  std::vector<LabeledExample> examples;
  Mat features;  // one row per example
};

// Fill new classes by herding up to the per-class quota floor(B / total_classes)
// and truncate every existing class to that quota.
void update_memory(ExemplarMemory& memory,
                   const std::vector<ClassCandidates>& new_classes,
                   int total_classes);

// Packed binary dataset format, little-endian:
//   "CLIS" | u32 count | u32 height | u32 width | u32 channels
//   count records of: u16 label | height*width*channels bytes (row-major,
//   channel-last)
Dataset read_packed_dataset(const std::string& path);
void write_packed_dataset(const std::string& path, const Dataset& dataset);

uint64_t dataset_checksum(const Dataset& d);

// Seeded class-conditional blob image generator for desk-scale experiments.
struct SyntheticSpec {
  int classes = 10;
  int train_per_class = 200;
  int test_per_class = 50;
  int height = 12;
  int width = 12;
  int channels = 3;
  double noise = 0.08;         // background noise sigma (0..1 intensity scale)
  double center_jitter = 0.6;  // per-image blob center jitter, pixels
  double scale_jitter = 0.06;  // per-image radial scale jitter (fraction)
  double color_jitter = 0.05;
  double pair_ratio = 0.18;    // wavelength split between the two pair members
  bool distractor = true;      // add one random clutter blob per image
  uint64_t seed = 9001;
};

// Generates train and test splits; test uses an independent sub-stream of the
// same class-conditional distributions.
void generate_synthetic(const SyntheticSpec& spec, Dataset& train, Dataset& test);

}  // namespace cifuse
