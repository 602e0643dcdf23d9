// SPDX-License-Identifier: Apache-2.0
#include <bit>
#include <cstring>
#include <fstream>

#include "mcvt/model.hpp"

namespace mcvt {

namespace {

constexpr char kMagic[8] = {'M', 'C', 'V', 'T', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

class Writer {
 public:
  explicit Writer(std::ostream& out) : out_(out) {}
  void bytes(const void* data, std::size_t n) { out_.write(static_cast<const char*>(data), static_cast<std::streamsize>(n)); }
  void u8(std::uint8_t v) { bytes(&v, 1); }
  void u32(std::uint32_t v) {
    const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                                static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    bytes(b, 4);
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }

 private:
  std::ostream& out_;
};

class Reader {
 public:
  Reader(std::istream& in, std::string path) : in_(in), path_(std::move(path)) {}
  void bytes(void* data, std::size_t n) {
    in_.read(static_cast<char*>(data), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in_.gcount()) != n) fail("truncated file");
  }
  std::uint8_t u8() {
    std::uint8_t v;
    bytes(&v, 1);
    return v;
  }
  std::uint32_t u32() {
    unsigned char b[4];
    bytes(b, 4);
    return static_cast<std::uint32_t>(b[0]) | static_cast<std::uint32_t>(b[1]) << 8 |
           static_cast<std::uint32_t>(b[2]) << 16 | static_cast<std::uint32_t>(b[3]) << 24;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  std::string str(std::uint32_t limit) {
    const auto n = u32();
    if (n > limit) fail("string length " + std::to_string(n) + " exceeds limit");
    std::string s(n, '\0');
    bytes(s.data(), n);
    return s;
  }
  [[noreturn]] void fail(const std::string& what) const { throw CheckpointError(path_ + ": " + what); }

 private:
  std::istream& in_;
  std::string path_;
};

CheckpointHeader read_header(Reader& r) {
  char magic[8];
  r.bytes(magic, sizeof magic);
  if (std::memcmp(magic, kMagic, sizeof magic) != 0) r.fail("not a checkpoint (bad magic)");
  const auto version = r.u32();
  if (version != kVersion) r.fail("unsupported version " + std::to_string(version));
  const auto text = r.str(1u << 24);
  CheckpointHeader header;
  try {
    const auto json = nlohmann::json::parse(text);
    header.config = model_config_from_json(json.at("config"));
    header.meta = json.value("meta", nlohmann::json::object());
  } catch (const nlohmann::json::exception& e) {
    r.fail(std::string("bad header: ") + e.what());
  } catch (const ConfigError& e) {
    r.fail(std::string("bad config: ") + e.what());
  }
  return header;
}

}  // namespace

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const McvtModel<T>& model, const nlohmann::json& meta) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError(tmp.string() + ": cannot open for writing");
    Writer w(out);
    w.bytes(kMagic, sizeof kMagic);
    w.u32(kVersion);
    w.str(nlohmann::json{{"config", to_json(model.config())}, {"meta", meta}}.dump());
    const auto state = model.state();
    w.u32(static_cast<std::uint32_t>(state.entries().size()));
    for (const auto& entry : state.entries()) {
      w.str(entry.name);
      w.u8(entry.kind == nn::StateKind::parameter ? 0 : 1);
      w.u32(static_cast<std::uint32_t>(entry.tensor.rank()));
      for (auto extent : entry.tensor.shape()) w.u32(static_cast<std::uint32_t>(extent));
      for (T v : entry.tensor.data()) w.f32(static_cast<float>(v));
    }
    if (!out) throw CheckpointError(tmp.string() + ": write failed");
  }
  std::filesystem::rename(tmp, path);
}

CheckpointHeader read_checkpoint_header(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError(path.string() + ": cannot open");
  Reader r(in, path.string());
  return read_header(r);
}

template <typename T>
McvtModel<T> load_checkpoint(const std::filesystem::path& path, nlohmann::json* meta) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError(path.string() + ": cannot open");
  Reader r(in, path.string());
  auto header = read_header(r);
  McvtModel<T> model(header.config, 0);
  const auto state = model.state();
  const auto count = r.u32();
  if (count != state.entries().size()) {
    r.fail("entry count " + std::to_string(count) + " does not match the model (" +
           std::to_string(state.entries().size()) + ")");
  }
  for (const auto& entry : state.entries()) {
    const auto name = r.str(4096);
    if (name != entry.name) r.fail("expected entry '" + entry.name + "', found '" + name + "'");
    const auto kind = r.u8();
    if (kind != (entry.kind == nn::StateKind::parameter ? 0 : 1)) r.fail("entry '" + name + "' has the wrong kind");
    const auto rank = r.u32();
    if (rank != entry.tensor.rank()) r.fail("entry '" + name + "' has the wrong rank");
    Shape shape(rank);
    for (auto& extent : shape) extent = r.u32();
    if (shape != entry.tensor.shape()) {
      r.fail("entry '" + name + "' has shape " + to_string(shape) + ", expected " + to_string(entry.tensor.shape()));
    }
    auto tensor = entry.tensor;
    auto values = tensor.mutable_data();
    for (auto& v : values) v = static_cast<T>(r.f32());
  }
  if (in.peek() != std::char_traits<char>::eof()) r.fail("trailing bytes after the last entry");
  if (meta) *meta = std::move(header.meta);
  return model;
}

template void save_checkpoint(const std::filesystem::path&, const McvtModel<float>&, const nlohmann::json&);
template void save_checkpoint(const std::filesystem::path&, const McvtModel<double>&, const nlohmann::json&);
template McvtModel<float> load_checkpoint(const std::filesystem::path&, nlohmann::json*);
template McvtModel<double> load_checkpoint(const std::filesystem::path&, nlohmann::json*);

}  // namespace mcvt
