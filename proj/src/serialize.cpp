#include "trup/serialize.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace trup {

namespace {

constexpr std::array<char, 4> kMagic = {'T', 'R', 'U', 'P'};
constexpr uint8_t kVersion = 0x01;

void put_u32(std::ostream& os, uint32_t v) {
  const char b[4] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                     static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
  os.write(b, 4);
}

uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) throw FormatError("TRUP1: truncated header");
  return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) | (static_cast<uint32_t>(b[2]) << 16) |
         (static_cast<uint32_t>(b[3]) << 24);
}

std::string trim(std::string s) {
  const char* ws = " \t\r\n";
  s.erase(0, s.find_first_not_of(ws));
  auto last = s.find_last_not_of(ws);
  s.erase(last == std::string::npos ? 0 : last + 1);
  return s;
}

}  // namespace

void write_trup(std::ostream& os, const Tensor& t) {
  os.write(kMagic.data(), kMagic.size());
  os.put(static_cast<char>(kVersion));
  put_u32(os, static_cast<uint32_t>(t.rank()));
  for (int64_t d : t.shape()) put_u32(os, static_cast<uint32_t>(d));
  for (float v : t.data()) put_u32(os, std::bit_cast<uint32_t>(v));
  if (!os) throw FormatError("TRUP1: write failed");
}

Tensor read_trup(std::istream& is) {
  std::array<char, 4> magic{};
  if (!is.read(magic.data(), 4) || magic != kMagic) throw FormatError("TRUP1: bad magic bytes");
  int version = is.get();
  if (version != kVersion) throw FormatError("TRUP1: unsupported version " + std::to_string(version));
  const uint32_t rank = get_u32(is);
  if (rank > 16) throw FormatError("TRUP1: implausible rank " + std::to_string(rank));
  Shape shape(rank);
  for (auto& d : shape) {
    d = get_u32(is);
    if (d == 0) throw FormatError("TRUP1: zero dimension");
  }
  std::vector<float> data(static_cast<std::size_t>(shape_numel(shape)));
  for (float& v : data) v = std::bit_cast<float>(get_u32(is));
  return Tensor(std::move(shape), std::move(data));
}

void write_trup(const std::filesystem::path& path, const Tensor& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open " + path.string() + " for writing");
  write_trup(os, t);
}

Tensor read_trup(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path.string());
  try {
    return read_trup(is);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

void write_manifest(const std::filesystem::path& path, const Manifest& manifest) {
  std::ofstream os(path);
  if (!os) throw FormatError("cannot open " + path.string() + " for writing");
  for (const auto& e : manifest) {
    os << e.name << ':';
    for (std::size_t i = 0; i < e.shape.size(); ++i) os << (i ? "," : "") << e.shape[i];
    os << '\n';
  }
}

Manifest read_manifest(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw FormatError("cannot open manifest " + path.string());
  Manifest m;
  std::string line;
  while (std::getline(is, line)) {
    line = trim(line);
    if (line.empty()) continue;
    auto colon = line.rfind(':');
    if (colon == std::string::npos || colon == 0) throw FormatError("manifest: malformed line '" + line + "'");
    ManifestEntry e{line.substr(0, colon), {}};
    std::stringstream dims(line.substr(colon + 1));
    std::string tok;
    while (std::getline(dims, tok, ',')) {
      try {
        e.shape.push_back(std::stoll(tok));
      } catch (const std::exception&) {
        throw FormatError("manifest: bad dimension in '" + line + "'");
      }
    }
    m.push_back(std::move(e));
  }
  return m;
}

void write_key_values(const std::filesystem::path& path, const std::vector<std::pair<std::string, std::string>>& kv) {
  std::ofstream os(path);
  if (!os) throw FormatError("cannot open " + path.string() + " for writing");
  for (const auto& [k, v] : kv) os << k << '=' << v << '\n';
}

KeyValues read_key_values(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw FormatError("cannot open " + path.string());
  KeyValues kv;
  std::string line;
  while (std::getline(is, line)) {
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    auto eq = line.find('=');
    if (eq == std::string::npos) throw FormatError(path.string() + ": expected key=value, got '" + line + "'");
    kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  return kv;
}

const std::string& require_key(const KeyValues& kv, const std::string& key) {
  auto it = kv.find(key);
  if (it == kv.end()) throw FormatError("missing key '" + key + "'");
  return it->second;
}

}  // namespace trup
