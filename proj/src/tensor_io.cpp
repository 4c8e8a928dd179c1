// SPDX-License-Identifier: Apache-2.0
#include "mir/tensor_io.hpp"

#include <bit>
#include <cctype>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <variant>

#include "mir/error.hpp"

namespace fs = std::filesystem;

namespace mir {
namespace {

constexpr char kMagic[] = "\x93NUMPY";
constexpr std::size_t kMagicLen = 6;
constexpr std::size_t kPreambleLen = 10;  // magic + version + u16 header length

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

std::uint32_t byteswap32(std::uint32_t x) {
  return ((x & 0xffu) << 24) | ((x & 0xff00u) << 8) | ((x >> 8) & 0xff00u) | (x >> 24);
}

// Minimal reader for the Python dict literal in an NPY header. Values are
// strings, booleans, or tuples of non-negative integers.
class HeaderParser {
 public:
  using Value = std::variant<std::string, bool, std::vector<std::int64_t>>;

  explicit HeaderParser(std::string_view text) : s_(text) {}

  std::map<std::string, Value> parse() {
    std::map<std::string, Value> out;
    skip_ws();
    expect('{');
    while (true) {
      skip_ws();
      if (peek() == '}') {
        ++pos_;
        break;
      }
      std::string key = parse_string();
      skip_ws();
      expect(':');
      skip_ws();
      Value value = parse_value();
      if (!out.emplace(key, std::move(value)).second) fail("duplicate key '" + key + "'");
      skip_ws();
      if (peek() == ',') {
        ++pos_;
        continue;
      }
      skip_ws();
      expect('}');
      break;
    }
    skip_ws();
    if (pos_ != s_.size()) fail("trailing characters after header dict");
    return out;
  }

 private:
  [[noreturn]] void fail(const std::string& why) const {
    throw Error(ErrorCode::BadHeader, "cannot parse NPY header (" + why + ")");
  }

  char peek() const { return pos_ < s_.size() ? s_[pos_] : '\0'; }

  void skip_ws() {
    while (pos_ < s_.size() && std::isspace(static_cast<unsigned char>(s_[pos_]))) ++pos_;
  }

  void expect(char c) {
    if (peek() != c) fail(std::string("expected '") + c + "'");
    ++pos_;
  }

  std::string parse_string() {
    const char quote = peek();
    if (quote != '\'' && quote != '"') fail("expected string");
    ++pos_;
    const std::size_t start = pos_;
    while (pos_ < s_.size() && s_[pos_] != quote) ++pos_;
    if (pos_ >= s_.size()) fail("unterminated string");
    std::string out(s_.substr(start, pos_ - start));
    ++pos_;
    return out;
  }

  Value parse_value() {
    const char c = peek();
    if (c == '\'' || c == '"') return parse_string();
    if (s_.substr(pos_, 4) == "True") {
      pos_ += 4;
      return true;
    }
    if (s_.substr(pos_, 5) == "False") {
      pos_ += 5;
      return false;
    }
    if (c == '(') return parse_tuple();
    fail("unsupported value");
  }

  std::vector<std::int64_t> parse_tuple() {
    expect('(');
    std::vector<std::int64_t> dims;
    while (true) {
      skip_ws();
      if (peek() == ')') {
        ++pos_;
        return dims;
      }
      if (!std::isdigit(static_cast<unsigned char>(peek()))) fail("expected integer in shape");
      std::int64_t v = 0;
      while (std::isdigit(static_cast<unsigned char>(peek()))) {
        v = v * 10 + (s_[pos_] - '0');
        if (v > (std::int64_t{1} << 40)) fail("dimension too large");
        ++pos_;
      }
      dims.push_back(v);
      skip_ws();
      if (peek() == ',') ++pos_;
      else if (peek() != ')') fail("expected ',' or ')' in shape");
    }
  }

  std::string_view s_;
  std::size_t pos_ = 0;
};

struct ParsedHeader {
  TensorShape shape;
  std::size_t data_offset = 0;
};

ParsedHeader read_header(std::istream& in, const fs::path& path) {
  char pre[kPreambleLen];
  in.read(pre, kPreambleLen);
  if (in.gcount() < static_cast<std::streamsize>(kMagicLen) ||
      std::memcmp(pre, kMagic, kMagicLen) != 0) {
    throw Error(ErrorCode::BadMagic, "not an NPY file: " + path.string());
  }
  if (in.gcount() != static_cast<std::streamsize>(kPreambleLen)) {
    throw Error(ErrorCode::BadHeader, "truncated NPY preamble: " + path.string());
  }
  if (pre[6] != 1 || pre[7] != 0) {
    throw Error(ErrorCode::BadHeader, "unsupported NPY version " + std::to_string(int(pre[6])) +
                                          "." + std::to_string(int(pre[7])) + ": " + path.string());
  }
  const std::size_t header_len = static_cast<unsigned char>(pre[8]) |
                                 (static_cast<std::size_t>(static_cast<unsigned char>(pre[9])) << 8);
  std::string header(header_len, '\0');
  in.read(header.data(), static_cast<std::streamsize>(header_len));
  if (in.gcount() != static_cast<std::streamsize>(header_len)) {
    throw Error(ErrorCode::BadHeader, "truncated NPY header: " + path.string());
  }

  auto fields = HeaderParser(header).parse();
  auto get = [&](const char* key) -> const HeaderParser::Value& {
    auto it = fields.find(key);
    if (it == fields.end()) {
      throw Error(ErrorCode::BadHeader, std::string("NPY header missing '") + key + "': " + path.string());
    }
    return it->second;
  };

  const auto* descr = std::get_if<std::string>(&get("descr"));
  if (!descr) throw Error(ErrorCode::BadHeader, "'descr' is not a string: " + path.string());
  if (*descr != "<f4") {
    throw Error(ErrorCode::UnsupportedDtype, "dtype '" + *descr + "' (only '<f4'): " + path.string());
  }
  const auto* fortran = std::get_if<bool>(&get("fortran_order"));
  if (!fortran) throw Error(ErrorCode::BadHeader, "'fortran_order' is not a bool: " + path.string());
  if (*fortran) throw Error(ErrorCode::UnsupportedLayout, "fortran_order arrays: " + path.string());
  const auto* shape = std::get_if<std::vector<std::int64_t>>(&get("shape"));
  if (!shape) throw Error(ErrorCode::BadHeader, "'shape' is not a tuple: " + path.string());
  if (shape->size() != 2) {
    throw Error(ErrorCode::UnsupportedLayout,
                "expected 2-D array, got " + std::to_string(shape->size()) + "-D: " + path.string());
  }
  return {{(*shape)[0], (*shape)[1]}, kPreambleLen + header_len};
}

std::ifstream open_input(const fs::path& path) {
  std::error_code ec;
  if (!fs::is_regular_file(path, ec)) {
    throw Error(ErrorCode::MissingFile, "no such file: " + path.string());
  }
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoFailure, "cannot open " + path.string());
  return in;
}

[[noreturn]] void malformed(const std::string& what) {
  throw Error(ErrorCode::MalformedManifest, what);
}

template <typename T>
T required(const nlohmann::json& obj, const char* key, const std::string& where) {
  auto it = obj.find(key);
  if (it == obj.end()) malformed(where + ": missing field '" + key + "'");
  try {
    if constexpr (std::is_same_v<T, int>) {
      if (!it->is_number_integer()) malformed(where + ": field '" + key + "' must be an integer");
      const auto v = it->template get<std::int64_t>();
      if (v < std::numeric_limits<int>::min() || v > std::numeric_limits<int>::max()) {
        malformed(where + ": field '" + key + "' out of range");
      }
      return static_cast<int>(v);
    } else {
      if (!it->is_string()) malformed(where + ": field '" + key + "' must be a string");
      return it->template get<std::string>();
    }
  } catch (const nlohmann::json::exception& e) {
    malformed(where + ": field '" + key + "': " + e.what());
  }
}

}  // namespace

fs::path RunManifest::resolve(const std::string& rel) const {
  fs::path p(rel);
  return p.is_absolute() ? p : root / p;
}

std::string npy_header(TensorShape shape) {
  std::string dict = "{'descr': '<f4', 'fortran_order': False, 'shape': (" +
                     std::to_string(shape.rows) + ", " + std::to_string(shape.cols) + "), }";
  // Pad with spaces so preamble + dict + '\n' is a multiple of 64 bytes.
  const std::size_t unpadded = kPreambleLen + dict.size() + 1;
  const std::size_t padded = (unpadded + 63) / 64 * 64;
  dict.append(padded - unpadded, ' ');
  dict.push_back('\n');
  const std::size_t header_len = dict.size();
  if (header_len > 0xffff) throw Error(ErrorCode::InvalidArgument, "NPY header too long");

  std::string out(kMagic, kMagicLen);
  out.push_back('\x01');
  out.push_back('\x00');
  out.push_back(static_cast<char>(header_len & 0xff));
  out.push_back(static_cast<char>((header_len >> 8) & 0xff));
  out += dict;
  return out;
}

TensorShape read_tensor_shape(const fs::path& path) {
  auto in = open_input(path);
  return read_header(in, path).shape;
}

Tensor read_tensor(const fs::path& path) {
  auto in = open_input(path);
  const auto header = read_header(in, path);
  const auto [rows, cols] = header.shape;
  const std::uintmax_t expected = header.data_offset + static_cast<std::uintmax_t>(rows * cols) * 4;
  const std::uintmax_t actual = fs::file_size(path);
  if (actual != expected) {
    throw Error(ErrorCode::BadHeader, "data size mismatch in " + path.string() + " (expected " +
                                          std::to_string(expected) + " bytes, found " +
                                          std::to_string(actual) + ")");
  }
  Tensor m(rows, cols);
  in.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(rows * cols * 4));
  if (!in) throw Error(ErrorCode::IoFailure, "short read on " + path.string());
  if constexpr (std::endian::native == std::endian::big) {
    auto* words = reinterpret_cast<std::uint32_t*>(m.data());
    for (Eigen::Index i = 0; i < m.size(); ++i) words[i] = byteswap32(words[i]);
  }
  return m;
}

void write_tensor(const Tensor& matrix, const fs::path& path) {
  if (matrix.size() == 0) {
    throw Error(ErrorCode::InvalidArgument, "refusing to write empty tensor to " + path.string());
  }
  if (!matrix.allFinite()) {
    throw Error(ErrorCode::NonFiniteValue, "refusing to write non-finite tensor to " + path.string());
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::IoFailure, "cannot open " + path.string() + " for writing");
  const std::string header = npy_header({matrix.rows(), matrix.cols()});
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  if constexpr (std::endian::native == std::endian::big) {
    std::vector<std::uint32_t> words(matrix.size());
    std::memcpy(words.data(), matrix.data(), words.size() * 4);
    for (auto& w : words) w = byteswap32(w);
    out.write(reinterpret_cast<const char*>(words.data()), static_cast<std::streamsize>(words.size() * 4));
  } else {
    out.write(reinterpret_cast<const char*>(matrix.data()), static_cast<std::streamsize>(matrix.size() * 4));
  }
  out.flush();
  if (!out) throw Error(ErrorCode::IoFailure, "write failed for " + path.string());
}

void validate_manifest_structure(const RunManifest& m) {
  if (m.hidden_dim <= 0) malformed("hidden_dim must be positive");
  if (m.num_layers <= 0) malformed("num_layers must be positive");
  if (m.num_pairs <= 0) malformed("num_pairs must be positive");
  if (static_cast<int>(m.layers.size()) != m.num_layers) {
    malformed("num_layers is " + std::to_string(m.num_layers) + " but " +
              std::to_string(m.layers.size()) + " layer entries are listed");
  }
  // Layer 0 (embedding output) is allowed as an optional first entry.
  const int first = m.layers.front().index;
  if (first != 0 && first != 1) {
    malformed("layer indices must start at 1 (or 0 for the embedding layer), got " + std::to_string(first));
  }
  for (std::size_t i = 0; i < m.layers.size(); ++i) {
    if (m.layers[i].index != first + static_cast<int>(i)) {
      malformed("layer indices must be contiguous and increasing; entry " + std::to_string(i) +
                " has index " + std::to_string(m.layers[i].index));
    }
  }
}

RunManifest read_manifest(const fs::path& path) {
  std::error_code ec;
  if (!fs::is_regular_file(path, ec)) throw Error(ErrorCode::MissingFile, "no such manifest: " + path.string());
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoFailure, "cannot open manifest " + path.string());

  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    malformed(path.string() + ": invalid JSON: " + e.what());
  }
  if (!doc.is_object()) malformed(path.string() + ": top level must be an object");

  const std::string where = path.string();
  RunManifest m;
  m.root = path.parent_path();
  m.model_id = required<std::string>(doc, "model_id", where);
  m.hidden_dim = required<int>(doc, "hidden_dim", where);
  m.num_layers = required<int>(doc, "num_layers", where);
  m.num_pairs = required<int>(doc, "num_pairs", where);

  auto layers = doc.find("layers");
  if (layers == doc.end() || !layers->is_array()) malformed(where + ": 'layers' must be an array");
  if (layers->empty()) malformed(where + ": 'layers' is empty");
  for (std::size_t i = 0; i < layers->size(); ++i) {
    const auto& obj = (*layers)[i];
    const std::string at = where + ": layers[" + std::to_string(i) + "]";
    if (!obj.is_object()) malformed(at + " must be an object");
    m.layers.push_back({required<int>(obj, "index", at), required<std::string>(obj, "vision", at),
                        required<std::string>(obj, "text", at)});
  }
  static const std::set<std::string> known = {"model_id", "hidden_dim", "num_layers", "num_pairs", "layers"};
  for (auto it = doc.begin(); it != doc.end(); ++it) {
    if (!known.count(it.key())) m.extra[it.key()] = it.value();
  }

  validate_manifest_structure(m);

  for (const auto& entry : m.layers) {
    for (const auto& [rel, modality] : {std::pair{&entry.vision, "vision"}, std::pair{&entry.text, "text"}}) {
      const auto file = m.resolve(*rel);
      TensorShape shape;
      try {
        shape = read_tensor_shape(file);
      } catch (const Error& e) {
        throw e.with_layer(entry.index);
      }
      if (shape.cols != m.hidden_dim) {
        throw Error(ErrorCode::ShapeMismatch, std::string(modality) + " tensor " + file.string() + " has " +
                                                  std::to_string(shape.cols) + " columns, hidden_dim is " +
                                                  std::to_string(m.hidden_dim))
            .with_layer(entry.index);
      }
      if (shape.rows < 2) {
        throw Error(ErrorCode::ShapeMismatch, std::string(modality) + " tensor " + file.string() + " has " +
                                                  std::to_string(shape.rows) + " rows, need at least 2")
            .with_layer(entry.index);
      }
    }
  }
  return m;
}

nlohmann::json manifest_to_json(const RunManifest& m) {
  nlohmann::json doc = m.extra.is_object() ? m.extra : nlohmann::json::object();
  doc["model_id"] = m.model_id;
  doc["hidden_dim"] = m.hidden_dim;
  doc["num_layers"] = m.num_layers;
  doc["num_pairs"] = m.num_pairs;
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& e : m.layers) layers.push_back({{"index", e.index}, {"vision", e.vision}, {"text", e.text}});
  doc["layers"] = std::move(layers);
  return doc;
}

void write_manifest(const RunManifest& m, const fs::path& path) {
  validate_manifest_structure(m);
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(ErrorCode::IoFailure, "cannot open " + path.string() + " for writing");
  out << manifest_to_json(m).dump(2) << '\n';
  if (!out) throw Error(ErrorCode::IoFailure, "write failed for " + path.string());
}

LayerActivations load_layer(const RunManifest& manifest, const LayerEntry& entry) {
  LayerActivations layer;
  layer.layer_index = entry.index;
  try {
    layer.vision = read_tensor(manifest.resolve(entry.vision));
    layer.text = read_tensor(manifest.resolve(entry.text));
  } catch (const Error& e) {
    throw e.with_layer(entry.index);
  }
  auto check = [&](const Tensor& t, const char* modality) {
    if (t.cols() != manifest.hidden_dim) {
      throw Error(ErrorCode::ShapeMismatch, std::string(modality) + " tensor has " + std::to_string(t.cols()) +
                                                " columns, hidden_dim is " + std::to_string(manifest.hidden_dim))
          .with_layer(entry.index);
    }
    if (t.rows() < 2) {
      throw Error(ErrorCode::ShapeMismatch, std::string(modality) + " tensor has fewer than 2 rows")
          .with_layer(entry.index);
    }
    if (!t.allFinite()) {
      throw Error(ErrorCode::NonFiniteValue, std::string(modality) + " tensor contains NaN or infinity")
          .with_layer(entry.index);
    }
  };
  check(layer.vision, "vision");
  check(layer.text, "text");
  return layer;
}

}  // namespace mir
