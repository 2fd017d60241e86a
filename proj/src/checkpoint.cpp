#include "moedis/checkpoint.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>

#include "moedis/errors.hpp"

namespace moedis {

namespace {

constexpr char kMagic[8] = {'M', 'O', 'E', 'D', 'C', 'K', 'P', 'T'};

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

std::uint64_t get_u64(const std::string& in, std::size_t pos) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) {
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[pos + static_cast<std::size_t>(i)])) << (8 * i);
  }
  return v;
}

}  // namespace

const Tensor& Checkpoint::get(const std::string& name) const {
  auto it = tensors.find(name);
  if (it == tensors.end()) throw FormatError("checkpoint has no tensor named '" + name + "'");
  return it->second;
}

void Checkpoint::merge(const Checkpoint& other) {
  for (const auto& [name, t] : other.tensors) put(name, t);
  for (const auto& [key, value] : other.meta.items()) meta[key] = value;
}

std::string encode_checkpoint(const Checkpoint& ckpt) {
  nlohmann::json header;
  header["format_version"] = Checkpoint::kFormatVersion;
  header["dtype"] = "float64";
  header["meta"] = ckpt.meta;
  header["tensors"] = nlohmann::json::array();
  for (const auto& [name, t] : ckpt.tensors) {
    header["tensors"].push_back({{"name", name}, {"shape", t.shape()}});
  }
  const std::string text = header.dump();

  std::string out(kMagic, sizeof(kMagic));
  put_u64(out, text.size());
  out += text;
  for (const auto& [name, t] : ckpt.tensors) {
    for (double v : t.data()) {
      std::uint64_t bits = 0;
      std::memcpy(&bits, &v, sizeof(bits));
      put_u64(out, bits);
    }
  }
  return out;
}

Checkpoint decode_checkpoint(const std::string& bytes) {
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
    throw FormatError("not a checkpoint file (bad magic)");
  }
  const auto header_len = get_u64(bytes, 8);
  if (header_len > bytes.size() - 16) throw FormatError("checkpoint header truncated");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(16, header_len));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint header is not valid JSON: ") + e.what());
  }
  if (header.value("format_version", 0) != Checkpoint::kFormatVersion) {
    throw FormatError("unsupported checkpoint format version");
  }
  if (header.value("dtype", std::string()) != "float64") throw FormatError("unsupported checkpoint dtype");

  Checkpoint ckpt;
  ckpt.meta = header.value("meta", nlohmann::json::object());
  std::size_t pos = 16 + header_len;
  for (const auto& entry : header.at("tensors")) {
    const auto name = entry.at("name").get<std::string>();
    const auto shape = entry.at("shape").get<Shape>();
    const auto n = shape_size(shape);
    if (bytes.size() < pos || (bytes.size() - pos) / 8 < n) throw FormatError("checkpoint data truncated at " + name);
    std::vector<double> data(n);
    for (std::size_t i = 0; i < n; ++i, pos += 8) {
      const auto bits = get_u64(bytes, pos);
      std::memcpy(&data[i], &bits, sizeof(bits));
    }
    ckpt.put(name, Tensor(shape, std::move(data)));
  }
  if (pos != bytes.size()) throw FormatError("trailing bytes after checkpoint data");
  return ckpt;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("write failed for " + path.string());
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  write_file(path, encode_checkpoint(ckpt));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(read_file(path)); }

}  // namespace moedis
