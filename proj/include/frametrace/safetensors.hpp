#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "frametrace/error.hpp"
#include "frametrace/numkernel.hpp"

namespace frametrace {

// safetensors container: u64-LE header length, JSON header with
// {name: {dtype, shape, data_offsets}}, then raw little-endian data.
// Dtypes f32 and f16 are accepted; f16 is widened to f32 on load.

inline float f16_to_f32(std::uint16_t h) {
  std::uint32_t sign = (h & 0x8000u) << 16;
  std::uint32_t exp = (h >> 10) & 0x1f;
  std::uint32_t frac = h & 0x3ffu;
  std::uint32_t bits;
  if (exp == 0) {
    if (frac == 0) {
      bits = sign;
    } else {
      // subnormal: normalize
      int e = -1;
      do {
        frac <<= 1;
        ++e;
      } while (!(frac & 0x400u));
      bits = sign | ((127 - 15 - e) << 23) | ((frac & 0x3ffu) << 13);
    }
  } else if (exp == 0x1f) {
    bits = sign | 0x7f800000u | (frac << 13);
  } else {
    bits = sign | ((exp - 15 + 127) << 23) | (frac << 13);
  }
  float f;
  std::memcpy(&f, &bits, 4);
  return f;
}

inline std::map<std::string, Matrix> load_safetensors(
    const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCategory::io, "cannot open weights: " + path);
  std::uint64_t hlen = 0;
  in.read(reinterpret_cast<char*>(&hlen), 8);
  if (!in || hlen == 0 || hlen > (1ull << 30))
    throw Error(ErrorCategory::format, "safetensors: bad header length");
  std::string hjson(hlen, '\0');
  in.read(hjson.data(), static_cast<std::streamsize>(hlen));
  if (!in) throw Error(ErrorCategory::format, "safetensors: truncated header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(hjson);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCategory::format,
                "safetensors: header json: " + std::string(e.what()));
  }
  std::vector<char> body((std::istreambuf_iterator<char>(in)),
                         std::istreambuf_iterator<char>());
  std::map<std::string, Matrix> tensors;
  for (auto it = header.begin(); it != header.end(); ++it) {
    if (it.key() == "__metadata__") continue;
    const auto& t = it.value();
    std::string dtype = t.at("dtype").get<std::string>();
    auto shape = t.at("shape").get<std::vector<std::size_t>>();
    auto offs = t.at("data_offsets").get<std::vector<std::size_t>>();
    if (shape.size() > 2)
      throw Error(ErrorCategory::format,
                  "safetensors: tensor " + it.key() + " has rank > 2");
    std::size_t rows = shape.empty() ? 1 : shape[0];
    std::size_t cols = shape.size() < 2 ? 1 : shape[1];
    if (shape.size() == 1) {
      rows = 1;
      cols = shape[0];
    }
    std::size_t count = rows * cols;
    std::size_t nbytes = offs.at(1) - offs.at(0);
    if (offs[1] > body.size())
      throw Error(ErrorCategory::format,
                  "safetensors: data offsets beyond file for " + it.key());
    Matrix m(rows, cols);
    const char* src = body.data() + offs[0];
    if (dtype == "F32") {
      if (nbytes != count * 4)
        throw Error(ErrorCategory::format,
                    "safetensors: size mismatch for " + it.key());
      std::memcpy(m.data.data(), src, nbytes);
    } else if (dtype == "F16") {
      if (nbytes != count * 2)
        throw Error(ErrorCategory::format,
                    "safetensors: size mismatch for " + it.key());
      for (std::size_t i = 0; i < count; ++i) {
        std::uint16_t h;
        std::memcpy(&h, src + i * 2, 2);
        m.data[i] = f16_to_f32(h);
      }
    } else {
      throw Error(ErrorCategory::format,
                  "safetensors: unsupported dtype " + dtype + " for " +
                      it.key());
    }
    tensors.emplace(it.key(), std::move(m));
  }
  return tensors;
}

// Writes all tensors as F32. Tensor order follows the (sorted) map, and the
// json header is emitted with sorted keys, so identical inputs produce
// byte-identical files.
inline void save_safetensors(const std::map<std::string, Matrix>& tensors,
                             const std::string& path) {
  nlohmann::json header;
  std::size_t off = 0;
  for (const auto& [name, m] : tensors) {
    std::size_t nbytes = m.data.size() * 4;
    header[name] = {
        {"dtype", "F32"},
        {"shape", m.rows == 1 ? std::vector<std::size_t>{m.cols}
                              : std::vector<std::size_t>{m.rows, m.cols}},
        {"data_offsets", {off, off + nbytes}},
    };
    off += nbytes;
  }
  std::string hjson = header.dump();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCategory::io, "cannot write weights: " + path);
  std::uint64_t hlen = hjson.size();
  out.write(reinterpret_cast<const char*>(&hlen), 8);
  out.write(hjson.data(), static_cast<std::streamsize>(hjson.size()));
  for (const auto& [name, m] : tensors)
    out.write(reinterpret_cast<const char*>(m.data.data()),
              static_cast<std::streamsize>(m.data.size() * 4));
}

}  // namespace frametrace
