#include "cifuse/stream.hpp"

#include <algorithm>
#include <cstdio>
#include <cstring>
#include <limits>
#include <memory>
#include <numeric>

#include "cifuse/rng.hpp"

namespace cifuse {

int Dataset::num_classes() const {
  int m = -1;
  for (const auto& e : examples) m = std::max(m, e.label);
  return m + 1;
}

ClassOrder make_class_order(int num_classes, int64_t seed) {
  if (num_classes < 1) throw std::invalid_argument("make_class_order: num_classes must be >= 1");
  ClassOrder order;
  order.seed = seed;
  order.permutation.resize(num_classes);
  std::iota(order.permutation.begin(), order.permutation.end(), 0);
  if (seed != kNaturalOrderSeed) {
    Rng rng(derive_seed(static_cast<uint64_t>(seed), "class_order"));
    rng.shuffle(order.permutation.data(), order.permutation.size());
  }
  return order;
}

TaskStream::TaskStream(Dataset train, Dataset test, ClassOrder order,
                       std::vector<int> round_sizes)
    : train_(std::move(train)),
      test_(std::move(test)),
      order_(std::move(order)),
      round_sizes_(std::move(round_sizes)) {
  if (round_sizes_.empty()) throw std::invalid_argument("split_rounds: no rounds given");
  int total = 0;
  offsets_.push_back(0);
  for (int c : round_sizes_) {
    if (c <= 0) throw std::invalid_argument("split_rounds: round sizes must be positive");
    total += c;
    offsets_.push_back(total);
  }
  if (total > static_cast<int>(order_.permutation.size()))
    throw std::invalid_argument("split_rounds: round sizes exceed class count");
}

std::vector<int> TaskStream::round_classes(int t) const {
  if (t < 1 || t > num_rounds()) throw std::invalid_argument("round index out of range");
  return {order_.permutation.begin() + offsets_[t - 1],
          order_.permutation.begin() + offsets_[t]};
}

std::vector<int> TaskStream::seen_classes(int t) const {
  if (t < 1 || t > num_rounds()) throw std::invalid_argument("round index out of range");
  return {order_.permutation.begin(), order_.permutation.begin() + offsets_[t]};
}

int TaskStream::old_class_count(int t) const {
  if (t < 1 || t > num_rounds()) throw std::invalid_argument("round index out of range");
  return offsets_[t - 1];
}

std::vector<LabeledExample> TaskStream::collect(
    const Dataset& d, const std::vector<int>& classes) const {
  std::vector<LabeledExample> out;
  for (int c : classes)
    for (const auto& e : d.examples)
      if (e.label == c) out.push_back(e);
  return out;
}

std::vector<LabeledExample> TaskStream::round_train(int t) const {
  return collect(train_, round_classes(t));
}

std::vector<LabeledExample> TaskStream::round_test(int t) const {
  return collect(test_, round_classes(t));
}

std::vector<LabeledExample> TaskStream::seen_test(int t) const {
  return collect(test_, seen_classes(t));
}

uint64_t TaskStream::train_checksum() const {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (int t = 1; t <= num_rounds(); ++t) {
    for (const auto& e : round_train(t)) {
      uint32_t label = static_cast<uint32_t>(e.label);
      h = fnv1a(&label, sizeof(label), h);
      h = fnv1a(e.pixels.data(), e.pixels.size(), h);
    }
  }
  return h;
}

TaskStream split_rounds(Dataset train, Dataset test, ClassOrder order,
                        std::vector<int> round_sizes) {
  return TaskStream(std::move(train), std::move(test), std::move(order),
                    std::move(round_sizes));
}

std::vector<int> herding_select(const Mat& features, int k) {
  const int n = static_cast<int>(features.rows());
  if (n == 0) throw std::invalid_argument("herding_select: empty candidate set");
  if (k < 1 || k > n) throw std::invalid_argument("herding_select: k out of range");

  const Vec mean = features.colwise().mean();
  const int dim = static_cast<int>(features.cols());
  Vec chosen_sum = Vec::Zero(dim);
  std::vector<bool> used(n, false);
  std::vector<int> picks;
  picks.reserve(k);

  // plain scalar arithmetic keeps the distances bit-reproducible, so ties
  // resolve to the lowest index the same way everywhere
  for (int s = 1; s <= k; ++s) {
    int best = -1;
    double best_dist = std::numeric_limits<double>::infinity();
    for (int i = 0; i < n; ++i) {
      if (used[i]) continue;
      double d2 = 0.0;
      for (int j = 0; j < dim; ++j) {
        const double diff = mean[j] - (chosen_sum[j] + features(i, j)) / s;
        d2 += diff * diff;
      }
      if (d2 < best_dist) {
        best_dist = d2;
        best = i;
      }
    }
    used[best] = true;
    for (int j = 0; j < dim; ++j) chosen_sum[j] += features(best, j);
    picks.push_back(best);
  }
  return picks;
}

ExemplarMemory::ExemplarMemory(int budget) : budget_(budget) {
  if (budget < 1) throw std::invalid_argument("ExemplarMemory: budget must be positive");
}

int ExemplarMemory::total_stored() const {
  int n = 0;
  for (const auto& l : lists_) n += static_cast<int>(l.size());
  return n;
}

std::vector<int> ExemplarMemory::stored_classes() const { return class_ids_; }

bool ExemplarMemory::has_class(int label) const { return index_of(label) >= 0; }

int ExemplarMemory::index_of(int label) const {
  for (size_t i = 0; i < class_ids_.size(); ++i)
    if (class_ids_[i] == label) return static_cast<int>(i);
  return -1;
}

const std::vector<LabeledExample>& ExemplarMemory::exemplars(int label) const {
  const int i = index_of(label);
  if (i < 0) throw std::invalid_argument("ExemplarMemory: unknown class");
  return lists_[i];
}

std::vector<LabeledExample> ExemplarMemory::all() const {
  std::vector<LabeledExample> out;
  for (const auto& l : lists_) out.insert(out.end(), l.begin(), l.end());
  return out;
}

void ExemplarMemory::set_class(int label, std::vector<LabeledExample> ordered) {
  const int i = index_of(label);
  if (i >= 0) {
    lists_[i] = std::move(ordered);
  } else {
    class_ids_.push_back(label);
    lists_.push_back(std::move(ordered));
  }
}

void ExemplarMemory::truncate(int quota) {
  for (auto& l : lists_)
    if (static_cast<int>(l.size()) > quota) l.resize(quota);
}

void update_memory(ExemplarMemory& memory,
                   const std::vector<ClassCandidates>& new_classes,
                   int total_classes) {
  if (total_classes <= 0) throw std::invalid_argument("update_memory: total_classes must be positive");
  const int quota = memory.budget() / total_classes;
  if (quota == 0)
    throw std::logic_error("update_memory: budget smaller than class count");

  memory.truncate(quota);
  for (const auto& cand : new_classes) {
    if (memory.has_class(cand.label))
      throw std::invalid_argument("update_memory: class already stored");
    if (cand.examples.empty())
      throw std::invalid_argument("update_memory: empty candidate set");
    if (cand.features.rows() != static_cast<Eigen::Index>(cand.examples.size()))
      throw std::invalid_argument("update_memory: feature/example count mismatch");
    const int k = std::min<int>(quota, static_cast<int>(cand.examples.size()));
    std::vector<LabeledExample> kept;
    kept.reserve(k);
    for (int idx : herding_select(cand.features, k)) kept.push_back(cand.examples[idx]);
    memory.set_class(cand.label, std::move(kept));
  }
}

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

uint32_t read_u32le(const unsigned char* p) {
  return static_cast<uint32_t>(p[0]) | (static_cast<uint32_t>(p[1]) << 8) |
         (static_cast<uint32_t>(p[2]) << 16) | (static_cast<uint32_t>(p[3]) << 24);
}

void write_u32le(std::FILE* f, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  std::fwrite(b, 1, 4, f);
}

constexpr char kMagic[4] = {'C', 'L', 'I', 'S'};

}  // namespace

Dataset read_packed_dataset(const std::string& path) {
  FilePtr f(std::fopen(path.c_str(), "rb"));
  if (!f) throw FormatError("cannot open dataset file " + path, 0);

  unsigned char header[20];
  if (std::fread(header, 1, sizeof(header), f.get()) != sizeof(header))
    throw FormatError("truncated header", 0);
  if (std::memcmp(header, kMagic, 4) != 0) throw FormatError("bad magic bytes", 0);

  Dataset d;
  const uint32_t count = read_u32le(header + 4);
  d.height = static_cast<int>(read_u32le(header + 8));
  d.width = static_cast<int>(read_u32le(header + 12));
  d.channels = static_cast<int>(read_u32le(header + 16));
  if (d.height <= 0 || d.width <= 0 || d.channels <= 0)
    throw FormatError("invalid image dimensions", 8);

  const size_t pix = static_cast<size_t>(d.pixel_count());
  uint64_t offset = sizeof(header);
  d.examples.resize(count);
  for (uint32_t i = 0; i < count; ++i) {
    unsigned char lab[2];
    if (std::fread(lab, 1, 2, f.get()) != 2)
      throw FormatError("truncated record label", offset);
    offset += 2;
    auto& e = d.examples[i];
    e.label = static_cast<int>(lab[0]) | (static_cast<int>(lab[1]) << 8);
    e.pixels.resize(pix);
    if (std::fread(e.pixels.data(), 1, pix, f.get()) != pix)
      throw FormatError("truncated record pixels", offset);
    offset += pix;
  }
  // trailing garbage is also a format violation
  unsigned char extra;
  if (std::fread(&extra, 1, 1, f.get()) == 1)
    throw FormatError("trailing bytes after last record", offset);
  return d;
}

void write_packed_dataset(const std::string& path, const Dataset& dataset) {
  FilePtr f(std::fopen(path.c_str(), "wb"));
  if (!f) throw std::runtime_error("cannot write dataset file " + path);
  std::fwrite(kMagic, 1, 4, f.get());
  write_u32le(f.get(), static_cast<uint32_t>(dataset.examples.size()));
  write_u32le(f.get(), static_cast<uint32_t>(dataset.height));
  write_u32le(f.get(), static_cast<uint32_t>(dataset.width));
  write_u32le(f.get(), static_cast<uint32_t>(dataset.channels));
  const size_t pix = static_cast<size_t>(dataset.pixel_count());
  for (const auto& e : dataset.examples) {
    unsigned char lab[2] = {static_cast<unsigned char>(e.label & 0xff),
                            static_cast<unsigned char>((e.label >> 8) & 0xff)};
    std::fwrite(lab, 1, 2, f.get());
    if (e.pixels.size() != pix)
      throw std::runtime_error("write_packed_dataset: inconsistent pixel count");
    std::fwrite(e.pixels.data(), 1, pix, f.get());
  }
}

uint64_t dataset_checksum(const Dataset& d) {
  uint64_t h = 0xcbf29ce484222325ULL;
  const int dims[3] = {d.height, d.width, d.channels};
  h = fnv1a(dims, sizeof(dims), h);
  for (const auto& e : d.examples) {
    uint32_t label = static_cast<uint32_t>(e.label);
    h = fnv1a(&label, sizeof(label), h);
    h = fnv1a(e.pixels.data(), e.pixels.size(), h);
  }
  return h;
}

}  // namespace cifuse
