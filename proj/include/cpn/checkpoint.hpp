#pragma once

// Parameter checkpoint file:
//
//   "CPK1" | u32 header length | JSON header | payload sections
//
// The JSON header carries M, d, the generator input mode, tau1, tau2 and a
// "sections" array of {name, bytes}. Payload sections follow in that order,
// each a run of little-endian f32: R (M*d), w, b (1), and when a concat head
// is present concat_W (d*2d) and concat_b (d).

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>

#include <json.hpp>

#include "cpn/binary_io.hpp"
#include "cpn/error.hpp"
#include "cpn/model.hpp"

namespace cpn {

inline constexpr std::string_view kCheckpointMagic = "CPK1";

/// Free-form labels stored alongside the parameters (stage, variant, ...).
using CheckpointTags = std::map<std::string, std::string>;

struct Checkpoint {
  CpnParams params;
  CheckpointTags tags;
};

inline io::Bytes encode_checkpoint(const CpnParams& p, const CheckpointTags& tags = {}) {
  p.validate();
  nlohmann::ordered_json header;
  header["format"] = "cpn-checkpoint";
  header["version"] = 1;
  header["M"] = p.num_attributes();
  header["d"] = p.dim();
  header["mode"] = std::string(to_string(p.mode));
  header["tau1"] = p.temps.tau1;
  header["tau2"] = p.temps.tau2;
  for (const auto& [k, v] : tags) header["tags"][k] = v;

  auto section = [](std::string name, std::size_t floats) {
    return nlohmann::ordered_json{{"name", std::move(name)}, {"bytes", 4 * floats}};
  };
  header["sections"] = nlohmann::ordered_json::array();
  header["sections"].push_back(section("R", p.protos.R.size()));
  header["sections"].push_back(section("w", p.gen.w.size()));
  header["sections"].push_back(section("b", 1));
  if (p.concat_head) {
    header["sections"].push_back(section("concat_W", p.concat_head->W.size()));
    header["sections"].push_back(section("concat_b", p.concat_head->b.size()));
  }

  const std::string text = header.dump();
  io::Bytes out;
  io::put_bytes(out, kCheckpointMagic);
  io::put_u32(out, static_cast<std::uint32_t>(text.size()));
  io::put_bytes(out, text);
  auto put_all = [&](std::span<const double> xs) {
    for (double x : xs) io::put_f32(out, static_cast<float>(x));
  };
  put_all(p.protos.R.flat());
  put_all(p.gen.w.span());
  io::put_f32(out, static_cast<float>(p.gen.b));
  if (p.concat_head) {
    put_all(p.concat_head->W.flat());
    put_all(p.concat_head->b.span());
  }
  return out;
}

inline Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4) throw Error(ErrorCode::TruncatedFile, "checkpoint shorter than its magic");
  io::Reader in(bytes);
  if (in.str(4) != kCheckpointMagic) throw Error(ErrorCode::BadMagic, "expected CPK1");
  const std::uint32_t header_len = in.u32();
  nlohmann::json h;
  try {
    h = nlohmann::json::parse(in.str(header_len));
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::ParseError, std::string("checkpoint header: ") + e.what());
  }

  Checkpoint ck;
  try {
    const auto m = h.at("M").get<std::size_t>();
    const auto d = h.at("d").get<std::size_t>();
    CpnParams& p = ck.params;
    p.mode = parse_gen_input_mode(h.at("mode").get<std::string>());
    p.temps.tau1 = h.at("tau1").get<double>();
    p.temps.tau2 = h.at("tau2").get<double>();
    if (h.contains("tags")) ck.tags = h.at("tags").get<CheckpointTags>();

    std::map<std::string, std::size_t> sizes;
    for (const auto& s : h.at("sections")) sizes[s.at("name").get<std::string>()] = s.at("bytes").get<std::size_t>();

    auto read_floats = [&](const std::string& name, std::size_t expected) {
      auto it = sizes.find(name);
      if (it == sizes.end()) throw Error(ErrorCode::ParseError, "checkpoint lacks section " + name);
      if (it->second != 4 * expected) {
        throw Error(ErrorCode::CountMismatch, "section " + name + " has " + std::to_string(it->second) +
                                                  " bytes, expected " + std::to_string(4 * expected));
      }
      std::vector<double> xs(expected);
      for (auto& x : xs) x = in.f32();
      return xs;
    };

    p.protos.R = Mat(m, d, read_floats("R", m * d));
    p.gen.w = Vec(read_floats("w", gen_input_size(p.mode, d)));
    p.gen.b = read_floats("b", 1)[0];
    if (sizes.contains("concat_W")) {
      Mat W(d, 2 * d, read_floats("concat_W", 2 * d * d));
      Vec b(read_floats("concat_b", d));
      p.concat_head = ConcatFusionHead{std::move(W), std::move(b)};
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::ParseError, std::string("checkpoint header: ") + e.what());
  }
  if (in.remaining() != 0) throw Error(ErrorCode::CountMismatch, "trailing bytes after checkpoint payload");
  ck.params.validate();
  return ck;
}

inline void save_checkpoint(const std::filesystem::path& path, const CpnParams& p, const CheckpointTags& tags = {}) {
  io::write_file(path, encode_checkpoint(p, tags));
}

/// Missing files raise MissingCheckpoint rather than IoError.
inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw Error(ErrorCode::MissingCheckpoint, path.string());
  return decode_checkpoint(io::read_file(path));
}

/// Parameters as they read back after a save: every stored array rounded to f32.
inline CpnParams round_trip_f32(const CpnParams& p) { return decode_checkpoint(encode_checkpoint(p)).params; }

}  // namespace cpn
