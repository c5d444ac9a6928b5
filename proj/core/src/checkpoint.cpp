#include "cifuse/checkpoint.hpp"

#include <cstdio>
#include <cstring>
#include <memory>

#include "cifuse/stream.hpp"

namespace cifuse {

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

void put_u32(std::FILE* f, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  std::fwrite(b, 1, 4, f);
}

void put_u16(std::FILE* f, uint16_t v) {
  unsigned char b[2] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff)};
  std::fwrite(b, 1, 2, f);
}

uint32_t get_u32(std::FILE* f, uint64_t off) {
  unsigned char b[4];
  if (std::fread(b, 1, 4, f) != 4) throw FormatError("truncated file", off);
  return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
         (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

uint16_t get_u16(std::FILE* f, uint64_t off) {
  unsigned char b[2];
  if (std::fread(b, 1, 2, f) != 2) throw FormatError("truncated file", off);
  return static_cast<uint16_t>(b[0] | (b[1] << 8));
}

constexpr char kTensorMagic[4] = {'C', 'I', 'F', 'T'};
constexpr char kMaskMagic[4] = {'C', 'I', 'F', 'M'};

}  // namespace

void save_tensors(const std::string& path, const std::vector<NamedTensor>& tensors) {
  FilePtr f(std::fopen(path.c_str(), "wb"));
  if (!f) throw std::runtime_error("cannot write checkpoint " + path);
  std::fwrite(kTensorMagic, 1, 4, f.get());
  put_u32(f.get(), 1);  // version
  put_u32(f.get(), static_cast<uint32_t>(tensors.size()));
  for (const auto& t : tensors) {
    put_u16(f.get(), static_cast<uint16_t>(t.name.size()));
    std::fwrite(t.name.data(), 1, t.name.size(), f.get());
    put_u16(f.get(), static_cast<uint16_t>(t.shape.size()));
    size_t expect = 1;
    for (int d : t.shape) {
      put_u32(f.get(), static_cast<uint32_t>(d));
      expect *= static_cast<size_t>(d);
    }
    if (expect != t.data.size())
      throw std::runtime_error("save_tensors: shape does not match data size");
    for (float v : t.data) {
      uint32_t bits;
      std::memcpy(&bits, &v, 4);
      put_u32(f.get(), bits);
    }
  }
}

std::vector<NamedTensor> load_tensors(const std::string& path) {
  FilePtr f(std::fopen(path.c_str(), "rb"));
  if (!f) throw FormatError("cannot open checkpoint " + path, 0);
  char magic[4];
  if (std::fread(magic, 1, 4, f.get()) != 4 || std::memcmp(magic, kTensorMagic, 4) != 0)
    throw FormatError("bad checkpoint magic", 0);
  uint64_t off = 4;
  const uint32_t version = get_u32(f.get(), off);
  off += 4;
  if (version != 1) throw FormatError("unsupported checkpoint version", 4);
  const uint32_t count = get_u32(f.get(), off);
  off += 4;

  std::vector<NamedTensor> out(count);
  for (auto& t : out) {
    const uint16_t name_len = get_u16(f.get(), off);
    off += 2;
    t.name.resize(name_len);
    if (std::fread(t.name.data(), 1, name_len, f.get()) != name_len)
      throw FormatError("truncated tensor name", off);
    off += name_len;
    const uint16_t ndim = get_u16(f.get(), off);
    off += 2;
    size_t n = 1;
    t.shape.resize(ndim);
    for (auto& d : t.shape) {
      d = static_cast<int>(get_u32(f.get(), off));
      off += 4;
      n *= static_cast<size_t>(d);
    }
    t.data.resize(n);
    for (auto& v : t.data) {
      const uint32_t bits = get_u32(f.get(), off);
      off += 4;
      std::memcpy(&v, &bits, 4);
    }
  }
  return out;
}

void save_masks(const std::string& path, const BinaryMaskSet& masks,
                const std::vector<std::string>& layer_names) {
  if (layer_names.size() != masks.keep.size())
    throw std::invalid_argument("save_masks: name/layer count mismatch");
  FilePtr f(std::fopen(path.c_str(), "wb"));
  if (!f) throw std::runtime_error("cannot write mask file " + path);
  std::fwrite(kMaskMagic, 1, 4, f.get());
  put_u32(f.get(), static_cast<uint32_t>(masks.keep.size()));
  for (size_t l = 0; l < masks.keep.size(); ++l) {
    put_u16(f.get(), static_cast<uint16_t>(layer_names[l].size()));
    std::fwrite(layer_names[l].data(), 1, layer_names[l].size(), f.get());
    const auto& bits = masks.keep[l];
    put_u32(f.get(), static_cast<uint32_t>(bits.size()));
    std::vector<unsigned char> packed((bits.size() + 7) / 8, 0);
    for (size_t i = 0; i < bits.size(); ++i)
      if (bits[i]) packed[i / 8] |= static_cast<unsigned char>(1u << (i % 8));
    std::fwrite(packed.data(), 1, packed.size(), f.get());
  }
}

BinaryMaskSet load_masks(const std::string& path, std::vector<std::string>* layer_names) {
  FilePtr f(std::fopen(path.c_str(), "rb"));
  if (!f) throw FormatError("cannot open mask file " + path, 0);
  char magic[4];
  if (std::fread(magic, 1, 4, f.get()) != 4 || std::memcmp(magic, kMaskMagic, 4) != 0)
    throw FormatError("bad mask file magic", 0);
  uint64_t off = 4;
  const uint32_t layers = get_u32(f.get(), off);
  off += 4;
  BinaryMaskSet set;
  if (layer_names) layer_names->clear();
  for (uint32_t l = 0; l < layers; ++l) {
    const uint16_t name_len = get_u16(f.get(), off);
    off += 2;
    std::string name(name_len, '\0');
    if (std::fread(name.data(), 1, name_len, f.get()) != name_len)
      throw FormatError("truncated layer name", off);
    off += name_len;
    if (layer_names) layer_names->push_back(name);
    const uint32_t bits = get_u32(f.get(), off);
    off += 4;
    std::vector<unsigned char> packed((bits + 7) / 8);
    if (std::fread(packed.data(), 1, packed.size(), f.get()) != packed.size())
      throw FormatError("truncated mask bits", off);
    off += packed.size();
    std::vector<bool> keep(bits);
    for (uint32_t i = 0; i < bits; ++i) keep[i] = (packed[i / 8] >> (i % 8)) & 1u;
    set.keep.push_back(std::move(keep));
  }
  return set;
}

std::vector<NamedTensor> snapshot_params(const std::vector<ParamView>& params) {
  std::vector<NamedTensor> out;
  out.reserve(params.size());
  for (const auto& p : params) {
    NamedTensor t;
    t.name = p.name;
    t.shape = p.shape;
    t.data.resize(p.size);
    for (size_t i = 0; i < p.size; ++i) t.data[i] = static_cast<float>(p.value[i]);
    out.push_back(std::move(t));
  }
  return out;
}

}  // namespace cifuse
