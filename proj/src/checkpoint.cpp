#include "captionforge/checkpoint.hpp"

#include <fstream>
#include <iterator>
#include <set>

#include "binary_io.hpp"
#include "captionforge/errors.hpp"

namespace captionforge {

namespace detail {

std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(FormatError::Kind::io, "cannot open '" + path + "' for reading");
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

void write_file_bytes(const std::string& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError(FormatError::Kind::io, "cannot open '" + path + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError(FormatError::Kind::io, "failed writing '" + path + "'");
}

}  // namespace detail

nlohmann::json to_json(const ModelConfig& c) {
  nlohmann::json j = {
      {"variant", std::string(to_string(c.variant))},
      {"layers", c.layers},
      {"d_model", c.d_model},
      {"heads", c.heads},
      {"d_ff", c.d_ff},
      {"dropout", c.dropout},
      {"vocab_size", c.vocab_size},
      {"max_decode_len", c.max_decode_len},
      {"feature_dim", c.feature_dim},
      {"encoder_positions", c.encoder_positions},
  };
  if (c.act) {
    j["act"] = {{"epsilon", c.act->epsilon},
                {"max_steps", c.act->max_steps},
                {"ponder_weight", c.act->ponder_weight}};
  } else {
    j["act"] = nullptr;
  }
  return j;
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  static const std::set<std::string> known = {"variant", "layers", "d_model", "heads", "d_ff", "dropout",
                                              "vocab_size", "max_decode_len", "feature_dim",
                                              "encoder_positions", "act"};
  if (!j.is_object()) throw DataError("model config must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (!known.contains(key)) throw ConfigError("unknown model config key '" + key + "'");
  }
  ModelConfig c;
  try {
    if (j.contains("variant")) c.variant = parse_variant(j.at("variant").get<std::string>());
    c.layers = j.value("layers", c.layers);
    c.d_model = j.value("d_model", c.d_model);
    c.heads = j.value("heads", c.heads);
    c.d_ff = j.value("d_ff", c.d_ff);
    c.dropout = j.value("dropout", c.dropout);
    c.vocab_size = j.value("vocab_size", c.vocab_size);
    c.max_decode_len = j.value("max_decode_len", c.max_decode_len);
    c.feature_dim = j.value("feature_dim", c.feature_dim);
    c.encoder_positions = j.value("encoder_positions", c.encoder_positions);
    if (j.contains("act") && !j.at("act").is_null()) {
      const auto& a = j.at("act");
      ActConfig act;
      act.epsilon = a.value("epsilon", act.epsilon);
      act.max_steps = a.value("max_steps", act.max_steps);
      act.ponder_weight = a.value("ponder_weight", act.ponder_weight);
      c.act = act;
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed model config: ") + e.what());
  }
  c.validate();
  return c;
}

void save_checkpoint(const std::filesystem::path& path, const Model& model, const nlohmann::json& metadata) {
  detail::ByteWriter w;
  w.raw("VCK1");
  w.u32(kCheckpointVersion);
  const std::string header = nlohmann::json{{"model", to_json(model.config)}, {"metadata", metadata}}.dump();
  w.u32(static_cast<std::uint32_t>(header.size()));
  w.raw(header);
  w.u32(static_cast<std::uint32_t>(model.params.size()));
  for (std::size_t i = 0; i < model.params.size(); ++i) {
    const Tensor& t = model.params[i];
    const std::string& name = model.params.name(i);
    w.u32(static_cast<std::uint32_t>(name.size()));
    w.raw(name);
    w.u32(static_cast<std::uint32_t>(t.rank()));
    for (auto extent : t.shape()) w.u32(static_cast<std::uint32_t>(extent));
    for (double v : t.values()) w.f32(v);
  }
  w.u64(w.checksum(8));
  detail::write_file_bytes(path.string(), w.bytes());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  const std::string source = path.string();
  const auto bytes = detail::read_file_bytes(source);
  detail::ByteReader r(bytes, source);
  if (bytes.size() < 4 || r.raw(4) != "VCK1") {
    throw FormatError(FormatError::Kind::bad_magic, source + ": not a checkpoint (bad magic)");
  }
  if (const auto version = r.u32(); version != kCheckpointVersion) {
    throw FormatError(FormatError::Kind::version_mismatch,
                      source + ": checkpoint version " + std::to_string(version) + ", expected " +
                          std::to_string(kCheckpointVersion));
  }
  const auto header_len = r.u32();
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(r.raw(header_len));
  } catch (const nlohmann::json::parse_error& e) {
    throw DataError(source + ": corrupt checkpoint header: " + e.what());
  }
  const ModelConfig config = model_config_from_json(header.at("model"));

  ParameterSet params;
  const auto count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = r.raw(r.u32());
    const auto rank = r.u32();
    Shape shape(rank);
    for (auto& extent : shape) extent = r.u32();
    const std::size_t n = shape_size(shape);
    r.need(n * 4);
    std::vector<double> values(n);
    for (auto& v : values) v = r.f32();
    params.add(std::move(name), Tensor(std::move(shape), std::move(values)));
  }
  const std::size_t end = r.position();
  const auto stored = r.u64();
  if (stored != r.checksum(8, end)) {
    throw FormatError(FormatError::Kind::checksum_mismatch, source + ": checkpoint checksum mismatch");
  }
  return Checkpoint{assemble(config, std::move(params)), header.value("metadata", nlohmann::json::object())};
}

}  // namespace captionforge
