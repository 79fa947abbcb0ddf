#include "forge/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <set>

#include "forge/common.hpp"
#include "json.hpp"

namespace forge::ckpt {

using nn::ParamStore;
using nn::Tensor;

namespace {

constexpr char kMagic[8] = {'F', 'G', 'C', 'K', '0', '0', '0', '1'};
constexpr int kFormatVersion = 1;

void put_u64(std::vector<uint8_t>& out, uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<uint8_t>((v >> (8 * i)) & 0xFF));
}

uint64_t get_u64(const std::vector<uint8_t>& in, size_t at) {
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(in[at + static_cast<size_t>(i)]) << (8 * i);
  return v;
}

void put_f64(std::vector<uint8_t>& out, double x) {
  uint64_t bits;
  std::memcpy(&bits, &x, sizeof(bits));
  put_u64(out, bits);
}

double get_f64(const std::vector<uint8_t>& in, size_t at) {
  const uint64_t bits = get_u64(in, at);
  double x;
  std::memcpy(&x, &bits, sizeof(x));
  return x;
}

}  // namespace

std::vector<uint8_t> serialize(const ParamStore& ps) {
  nlohmann::json header;
  header["format_version"] = kFormatVersion;
  header["params"] = nlohmann::json::array();
  for (int p = 0; p < ps.size(); ++p) {
    nlohmann::json entry;
    entry["name"] = ps.name(p);
    entry["shape"] = ps.value(p).shape;
    header["params"].push_back(std::move(entry));
  }
  const std::string htext = header.dump();

  std::vector<uint8_t> out;
  out.insert(out.end(), kMagic, kMagic + sizeof(kMagic));
  put_u64(out, htext.size());
  out.insert(out.end(), htext.begin(), htext.end());
  for (int p = 0; p < ps.size(); ++p) {
    for (double x : ps.value(p).v) put_f64(out, x);
  }
  return out;
}

ParamStore deserialize(const std::vector<uint8_t>& bytes) {
  require(bytes.size() >= sizeof(kMagic) + 8, "checkpoint_error", "checkpoint truncated");
  require(std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) == 0, "checkpoint_error",
          "bad checkpoint magic");
  const uint64_t hlen = get_u64(bytes, sizeof(kMagic));
  const size_t data_at = sizeof(kMagic) + 8 + hlen;
  require(bytes.size() >= data_at, "checkpoint_error", "checkpoint header truncated");

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.begin() + sizeof(kMagic) + 8,
                                   bytes.begin() + static_cast<int64_t>(data_at));
  } catch (const nlohmann::json::exception& e) {
    fail("checkpoint_error", std::string("unreadable checkpoint header: ") + e.what());
  }
  require(header.is_object() && header.value("format_version", -1) == kFormatVersion,
          "checkpoint_error", "unsupported checkpoint format version");
  require(header.contains("params") && header["params"].is_array(), "checkpoint_error",
          "checkpoint header lists no parameters");

  ParamStore ps;
  std::set<std::string> seen;
  size_t at = data_at;
  for (const auto& entry : header["params"]) {
    require(entry.is_object() && entry.contains("name") && entry.contains("shape"),
            "checkpoint_error", "malformed checkpoint parameter entry");
    const std::string name = entry["name"].get<std::string>();
    require(!name.empty() && seen.insert(name).second, "checkpoint_error",
            "duplicate or empty parameter name: " + name);
    std::vector<int> shape = entry["shape"].get<std::vector<int>>();
    int64_t numel = 1;
    for (int d : shape) {
      require(d > 0, "checkpoint_error", "non-positive dimension in " + name);
      numel *= d;
    }
    require(bytes.size() >= at + static_cast<size_t>(numel) * 8, "checkpoint_error",
            "checkpoint data truncated at " + name);
    Tensor t(std::move(shape));
    for (int64_t k = 0; k < numel; ++k) {
      t[k] = get_f64(bytes, at);
      at += 8;
    }
    ps.add(name, std::move(t));
  }
  require(at == bytes.size(), "checkpoint_error", "trailing bytes after checkpoint data");
  return ps;
}

void save(const ParamStore& ps, const std::string& path) {
  const std::vector<uint8_t> bytes = serialize(ps);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  require(f.good(), "io_error", "cannot open for writing: " + path);
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  require(f.good(), "io_error", "short write: " + path);
}

ParamStore load(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  require(f.good(), "checkpoint_error", "missing checkpoint: " + path);
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                             std::istreambuf_iterator<char>());
  return deserialize(bytes);
}

}  // namespace forge::ckpt
