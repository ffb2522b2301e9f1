#pragma once

#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "gabortex/params.hpp"
#include "gabortex/tensor_io.hpp"

namespace gabortex {

// Single-file checkpoint: "GTCP" magic, little-endian u32 JSON header length,
// the JSON header (module -> tensor names plus the flat tensor order), then
// one TNSR blob per tensor in header order.
inline void save_checkpoint(const std::string& path, const ParamStore& store) {
  nlohmann::json header;
  header["format_version"] = 1;
  std::vector<std::string> names;
  std::map<std::string, std::vector<std::string>> modules;
  for (std::size_t i = 0; i < store.size(); ++i) {
    const std::string& name = store[static_cast<int>(i)].name;
    names.push_back(name);
    std::string module = name.substr(0, name.find('.'));
    modules[module].push_back(name);
  }
  header["tensors"] = names;
  header["modules"] = modules;
  std::string json_bytes = header.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("save_checkpoint: cannot open " + path);
  std::string buf = "GTCP";
  detail::put_u32(buf, static_cast<std::uint32_t>(json_bytes.size()));
  buf += json_bytes;
  for (std::size_t i = 0; i < store.size(); ++i)
    buf += encode_tensor(store[static_cast<int>(i)].value);
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw std::runtime_error("save_checkpoint: write failed for " + path);
}

// loads values into an already-constructed store; names must match exactly
inline void load_checkpoint(const std::string& path, ParamStore& store) {
  std::string buf = read_file_bytes(path);
  if (buf.size() < 8 || std::memcmp(buf.data(), "GTCP", 4) != 0)
    throw std::runtime_error("load_checkpoint: bad magic in " + path);
  std::uint32_t json_len = detail::get_u32(reinterpret_cast<const unsigned char*>(buf.data()) + 4);
  if (8ull + json_len > buf.size()) throw std::runtime_error("load_checkpoint: truncated header");
  nlohmann::json header = nlohmann::json::parse(buf.substr(8, json_len));
  std::vector<std::string> names = header.at("tensors").get<std::vector<std::string>>();
  std::size_t offset = 8 + json_len;
  for (const std::string& name : names) {
    Tensor t = decode_tensor(buf, offset, path + ":" + name);
    int idx = store.find(name);
    if (idx < 0)
      throw std::runtime_error("load_checkpoint: unknown tensor " + name +
                               " (checkpoint does not match this configuration)");
    Parameter& p = store[idx];
    if (p.value.shape != t.shape)
      throw std::runtime_error("load_checkpoint: shape mismatch for " + name);
    t.requires_grad = true;
    p.value = std::move(t);
  }
  if (names.size() != store.size())
    throw std::runtime_error("load_checkpoint: tensor count mismatch");
}

}  // namespace gabortex
