#include "tmmnn/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace tmmnn {

static_assert(std::endian::native == std::endian::little,
              "container payload is little-endian; big-endian hosts need swaps");

namespace {

constexpr char kMagic[4] = {'T', 'M', 'M', 'N'};
constexpr std::uint16_t kVersion = 1;

using ojson = nlohmann::ordered_json;

void put_u16(std::string& out, std::uint16_t v) {
  out.push_back(char(v & 0xff));
  out.push_back(char(v >> 8));
}

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}

}  // namespace

void write_blob(const std::string& path, const Blob& blob) {
  ojson header;
  header["kind"] = blob.kind;
  for (auto& [k, v] : blob.meta.items()) header[k] = v;

  std::string payload;
  ojson layers = ojson::array();
  for (const auto& [name, mat] : blob.records) {
    const std::uint64_t len = std::uint64_t(mat.size()) * sizeof(Real);
    layers.push_back({{"name", name},
                      {"shape", {mat.rows(), mat.cols()}},
                      {"byte_offset", payload.size()},
                      {"byte_len", len}});
    const std::size_t at = payload.size();
    payload.resize(at + len);
    std::memcpy(payload.data() + at, mat.data(), len);
  }
  header["layers"] = layers;

  const std::string hdr = header.dump();
  std::string out;
  out.append(kMagic, 4);
  put_u16(out, kVersion);
  put_u64(out, hdr.size());
  out += hdr;
  out += payload;

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw DataError("cannot write " + path);
  f.write(out.data(), std::streamsize(out.size()));
  if (!f) throw DataError("short write to " + path);
}

Blob read_blob(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open " + path);
  std::string buf((std::istreambuf_iterator<char>(f)),
                  std::istreambuf_iterator<char>());

  if (buf.size() < 14)
    throw FormatError(path + ": truncated container header (field magic)");
  if (std::memcmp(buf.data(), kMagic, 4) != 0)
    throw FormatError(path + ": bad magic bytes (field magic, want \"TMMN\")");
  const std::uint16_t version =
      std::uint16_t(std::uint8_t(buf[4])) | (std::uint16_t(std::uint8_t(buf[5])) << 8);
  if (version != kVersion)
    throw FormatError(path + ": unsupported version " + std::to_string(version) +
                      " (field version, want " + std::to_string(kVersion) + ")");
  std::uint64_t hlen = 0;
  for (int i = 0; i < 8; ++i)
    hlen |= std::uint64_t(std::uint8_t(buf[6 + size_t(i)])) << (8 * i);
  if (14 + hlen > buf.size())
    throw FormatError(path + ": header length exceeds file (field header_len)");

  ojson header;
  try {
    header = ojson::parse(buf.substr(14, hlen));
  } catch (const std::exception& e) {
    throw FormatError(path + ": unparsable JSON header: " + e.what());
  }
  if (!header.contains("kind") || !header.contains("layers"))
    throw FormatError(path + ": header missing field kind or layers");

  const std::size_t payload_at = 14 + std::size_t(hlen);
  const std::size_t payload_size = buf.size() - payload_at;

  Blob blob;
  blob.kind = header["kind"].get<std::string>();
  for (auto& [k, v] : header.items())
    if (k != "kind" && k != "layers") blob.meta[k] = v;

  std::uint64_t cursor = 0;
  for (const auto& rec : header["layers"]) {
    for (const char* key : {"name", "shape", "byte_offset", "byte_len"})
      if (!rec.contains(key))
        throw FormatError(path + ": layer record missing field " +
                          std::string(key));
    const auto name = rec["name"].get<std::string>();
    const auto shape = rec["shape"].get<std::vector<Index>>();
    const auto off = rec["byte_offset"].get<std::uint64_t>();
    const auto len = rec["byte_len"].get<std::uint64_t>();
    if (shape.size() != 2 || shape[0] < 1 || shape[1] < 1)
      throw FormatError(path + ": record " + name + " has invalid field shape");
    if (off != cursor)
      throw FormatError(path + ": record " + name +
                        " has non-contiguous field byte_offset");
    if (len != std::uint64_t(shape[0]) * std::uint64_t(shape[1]) * sizeof(Real))
      throw FormatError(path + ": record " + name +
                        " field byte_len disagrees with shape");
    if (off + len > payload_size)
      throw FormatError(path + ": record " + name +
                        " overruns payload (field byte_len), payload has " +
                        std::to_string(payload_size) + " bytes");
    Mat m(shape[0], shape[1]);
    std::memcpy(m.data(), buf.data() + payload_at + off, len);
    blob.records.emplace_back(name, std::move(m));
    cursor = off + len;
  }
  if (cursor != payload_size)
    throw FormatError(path + ": records cover " + std::to_string(cursor) +
                      " bytes of a " + std::to_string(payload_size) +
                      "-byte payload (field byte_len)");
  return blob;
}

nlohmann::ordered_json model_config_json(const ModelConfig& cfg) {
  return ojson{{"input_extents", cfg.input_extents},
               {"hidden_widths", cfg.hidden_widths},
               {"num_classes", cfg.num_classes},
               {"normalize_input", cfg.normalize_input},
               {"seed", cfg.seed}};
}

ModelConfig model_config_from_json(const nlohmann::ordered_json& j) {
  ModelConfig cfg;
  try {
    const auto ext = j.at("input_extents").get<std::vector<int>>();
    if (ext.size() != 3)
      throw FormatError("config field input_extents must have 3 entries");
    std::copy(ext.begin(), ext.end(), cfg.input_extents.begin());
    cfg.hidden_widths = j.at("hidden_widths").get<std::vector<int>>();
    cfg.num_classes = j.at("num_classes").get<int>();
    cfg.normalize_input = j.value("normalize_input", false);
    cfg.seed = j.at("seed").get<std::uint64_t>();
  } catch (const ojson::exception& e) {
    throw FormatError(std::string("invalid config header: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

void save_checkpoint(const Classifier& model, const std::string& path) {
  Blob blob;
  blob.kind = "classifier";
  blob.meta["config"] = model_config_json(model.config());
  for (int l = 0; l < model.num_layers(); ++l) {
    blob.records.emplace_back("w" + std::to_string(l), model.weights()[size_t(l)]);
    blob.records.emplace_back("b" + std::to_string(l), model.biases()[size_t(l)]);
  }
  if (model.config().normalize_input && model.input_mu().size() > 0) {
    blob.records.emplace_back("norm_mu", model.input_mu());
    blob.records.emplace_back("norm_inv_sigma", model.input_inv_sigma());
  }
  write_blob(path, blob);
}

Classifier load_checkpoint(const std::string& path) {
  Blob blob = read_blob(path);
  if (blob.kind != "classifier" && blob.kind != "tmm")
    throw FormatError(path + ": field kind is \"" + blob.kind +
                      "\", expected a classifier checkpoint");
  if (!blob.meta.contains("config"))
    throw FormatError(path + ": header missing field config");
  const ModelConfig cfg = model_config_from_json(blob.meta["config"]);

  const std::size_t layers = cfg.hidden_widths.size() + 1;
  const bool with_stats = blob.records.size() == 2 * layers + 2;
  if (blob.records.size() != 2 * layers && !with_stats)
    throw FormatError(path + ": expected " + std::to_string(2 * layers) +
                      " layer records, found " +
                      std::to_string(blob.records.size()));
  std::vector<Mat> ws, bs;
  for (std::size_t l = 0; l < layers; ++l) {
    const auto& [wname, w] = blob.records[2 * l];
    const auto& [bname, b] = blob.records[2 * l + 1];
    if (wname != "w" + std::to_string(l) || bname != "b" + std::to_string(l))
      throw FormatError(path + ": unexpected record order at layer " +
                        std::to_string(l));
    ws.push_back(w);
    bs.push_back(b);
  }
  try {
    Classifier model(cfg, std::move(ws), std::move(bs));
    if (with_stats) {
      if (blob.records[2 * layers].first != "norm_mu" ||
          blob.records[2 * layers + 1].first != "norm_inv_sigma")
        throw FormatError(path + ": unexpected trailing records");
      model.set_input_stats_inv(blob.records[2 * layers].second,
                                blob.records[2 * layers + 1].second);
    }
    return model;
  } catch (const DimensionError& e) {
    throw FormatError(path + ": " + e.what());
  }
}

}  // namespace tmmnn
