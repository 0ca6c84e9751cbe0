#pragma once

// Binary checkpoint container.
//
//   "ENCDOTCK"            8-byte magic
//   u32 version
//   u64 header length, header JSON (config, inventory, RNG states, step,
//       parameter manifest, optimizer flag)
//   parameter values as raw little-endian f32 in manifest order
//   optionally Adam first/second moments in the same order
//
// Values are copied byte for byte, so save/load round-trips exactly.

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "encdot/encoder.hpp"

namespace encdot {

inline constexpr char kCheckpointMagic[8] = {'E', 'N', 'C', 'D', 'O', 'T', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct TrainerState {
  nn::AdamState adam;
  long step = 0;
  std::mt19937_64 sampler_rng;
};

struct Checkpoint {
  EncoderConfig config;
  GraphemeInventory inventory;
  nn::ParameterSet parameters;
  std::mt19937_64 model_rng;
  std::optional<TrainerState> trainer;

  EncoderModel model() const { return EncoderModel(config, inventory, clone_parameters(), model_rng); }

  nn::ParameterSet clone_parameters() const {
    nn::ParameterSet out;
    for (std::size_t i = 0; i < parameters.size(); ++i) out.add(parameters.name(i), parameters[i].clone());
    return out;
  }
};

namespace detail {

inline std::string rng_to_string(const std::mt19937_64& rng) {
  std::ostringstream out;
  out << rng;
  return out.str();
}

inline std::mt19937_64 rng_from_string(const std::string& text) {
  std::mt19937_64 rng;
  std::istringstream in(text);
  in >> rng;
  if (!in) throw CheckpointError("corrupt RNG state in checkpoint");
  return rng;
}

inline void write_floats(std::ostream& out, const float* data, std::size_t n) {
  out.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(n * sizeof(float)));
}

inline void read_floats(std::istream& in, float* data, std::size_t n, const std::string& path) {
  in.read(reinterpret_cast<char*>(data), static_cast<std::streamsize>(n * sizeof(float)));
  if (!in) throw CheckpointError("checkpoint '" + path + "' is truncated");
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const EncoderModel& model,
                            const TrainerState* trainer = nullptr) {
  const auto& params = model.parameters();
  nlohmann::json manifest = nlohmann::json::array();
  for (std::size_t i = 0; i < params.size(); ++i)
    manifest.push_back({{"name", params.name(i)}, {"shape", params[i].shape()}});
  nlohmann::json header = {{"config", model.config()},
                           {"inventory", model.inventory().to_json()},
                           {"model_rng", detail::rng_to_string(model.rng())},
                           {"parameters", manifest},
                           {"has_optimizer", trainer != nullptr}};
  if (trainer) {
    header["step"] = trainer->step;
    header["adam_step"] = trainer->adam.step;
    header["adam"] = {{"beta1", trainer->adam.beta1}, {"beta2", trainer->adam.beta2}, {"epsilon", trainer->adam.epsilon}};
    header["sampler_rng"] = detail::rng_to_string(trainer->sampler_rng);
  }
  const std::string text = header.dump();

  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw CheckpointError("cannot write checkpoint '" + path + "'");
    out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
    const std::uint32_t version = kCheckpointVersion;
    const std::uint64_t length = text.size();
    out.write(reinterpret_cast<const char*>(&version), sizeof(version));
    out.write(reinterpret_cast<const char*>(&length), sizeof(length));
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (std::size_t i = 0; i < params.size(); ++i) detail::write_floats(out, params[i].raw(), params[i].size());
    if (trainer) {
      for (const auto& m : trainer->adam.first_moment) detail::write_floats(out, m.data(), m.size());
      for (const auto& v : trainer->adam.second_moment) detail::write_floats(out, v.data(), v.size());
    }
    if (!out) throw CheckpointError("failed writing checkpoint '" + path + "'");
  }
  std::rename(tmp.c_str(), path.c_str());
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint '" + path + "'");
  char magic[sizeof(kCheckpointMagic)];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0)
    throw CheckpointError("'" + path + "' is not an encdot checkpoint");
  std::uint32_t version = 0;
  std::uint64_t length = 0;
  in.read(reinterpret_cast<char*>(&version), sizeof(version));
  if (!in) throw CheckpointError("checkpoint '" + path + "' is truncated");
  if (version != kCheckpointVersion)
    throw CheckpointError("checkpoint '" + path + "' has version " + std::to_string(version) + ", this build reads " +
                          std::to_string(kCheckpointVersion));
  in.read(reinterpret_cast<char*>(&length), sizeof(length));
  if (!in) throw CheckpointError("checkpoint '" + path + "' is truncated");
  const auto here = in.tellg();
  in.seekg(0, std::ios::end);
  const auto remaining = static_cast<std::uint64_t>(in.tellg() - here);
  in.seekg(here);
  if (length > remaining) throw CheckpointError("checkpoint '" + path + "' is truncated");
  std::string text(length, '\0');
  in.read(text.data(), static_cast<std::streamsize>(length));
  if (!in) throw CheckpointError("checkpoint '" + path + "' is truncated");

  Checkpoint ck;
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
    ck.config = header.at("config").get<EncoderConfig>();
    ck.inventory = GraphemeInventory::from_json(header.at("inventory"));
    ck.model_rng = detail::rng_from_string(header.at("model_rng").get<std::string>());
    for (const auto& entry : header.at("parameters")) {
      nn::Tensor t(entry.at("shape").get<nn::Shape>());
      detail::read_floats(in, t.raw(), t.size(), path);
      ck.parameters.add(entry.at("name").get<std::string>(), std::move(t));
    }
    if (header.at("has_optimizer").get<bool>()) {
      TrainerState state;
      state.step = header.at("step").get<long>();
      state.adam.step = header.at("adam_step").get<std::int64_t>();
      state.adam.beta1 = header.at("adam").at("beta1").get<double>();
      state.adam.beta2 = header.at("adam").at("beta2").get<double>();
      state.adam.epsilon = header.at("adam").at("epsilon").get<double>();
      state.sampler_rng = detail::rng_from_string(header.at("sampler_rng").get<std::string>());
      for (auto* moments : {&state.adam.first_moment, &state.adam.second_moment})
        for (std::size_t i = 0; i < ck.parameters.size(); ++i) {
          std::vector<float> buf(ck.parameters[i].size());
          detail::read_floats(in, buf.data(), buf.size(), path);
          moments->push_back(std::move(buf));
        }
      ck.trainer = std::move(state);
    }
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError("checkpoint '" + path + "' header: " + e.what());
  } catch (const DataError& e) {
    throw CheckpointError("checkpoint '" + path + "': " + e.what());
  }
  return ck;
}

}  // namespace encdot
