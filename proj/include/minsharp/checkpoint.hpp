// Checkpoint files:
//   {"dims": [...], "weights": [[row-major layer 0], ...], "meta": {...}}
// Weights are written with 17 significant digits so a reload is exact.

#pragma once

#include <charconv>
#include <fstream>
#include <sstream>
#include <string>

#include <nlohmann/json.hpp>

#include "minsharp/errors.hpp"
#include "minsharp/network.hpp"

namespace minsharp {

struct Checkpoint {
  Mlp net;
  nlohmann::json meta = nlohmann::json::object();
};

inline std::string format_double(double v) {
  char buf[40];
  auto res = std::to_chars(buf, buf + sizeof(buf), v, std::chars_format::general, 17);
  return std::string(buf, res.ptr);
}

inline std::string checkpoint_to_string(const Mlp& net, const nlohmann::json& meta) {
  std::ostringstream out;
  out << "{\"dims\": [";
  for (std::size_t i = 0; i < net.dims().size(); ++i) out << (i ? ", " : "") << net.dims()[i];
  out << "],\n \"weights\": [";
  for (std::size_t d = 0; d < net.num_layers(); ++d) {
    out << (d ? ",\n  [" : "\n  [");
    const auto w = net.weight(d).data();
    for (std::size_t k = 0; k < w.size(); ++k) {
      if (!std::isfinite(w[k])) throw NumericError("checkpoint: non-finite weight");
      out << (k ? ", " : "") << format_double(w[k]);
    }
    out << "]";
  }
  out << "],\n \"meta\": " << meta.dump() << "}\n";
  return out.str();
}

inline Checkpoint checkpoint_from_json(const nlohmann::json& j) {
  auto fail = [](const std::string& why) -> Checkpoint {
    throw std::invalid_argument("checkpoint: " + why);
  };
  if (!j.is_object() || !j.contains("dims") || !j.contains("weights"))
    return fail("missing \"dims\" or \"weights\"");
  std::vector<std::size_t> dims;
  for (const auto& v : j.at("dims")) {
    if (!v.is_number_integer() || v.get<long long>() < 1) return fail("dims must be positive integers");
    dims.push_back(v.get<std::size_t>());
  }
  if (dims.size() < 2) return fail("need at least two dims");
  const auto& jw = j.at("weights");
  if (!jw.is_array() || jw.size() + 1 != dims.size())
    return fail("expected " + std::to_string(dims.size() - 1) + " weight arrays");
  std::vector<Matrix> weights;
  for (std::size_t d = 0; d < jw.size(); ++d) {
    const auto& layer = jw[d];
    const std::size_t expect = dims[d + 1] * dims[d];
    if (!layer.is_array() || layer.size() != expect)
      return fail("layer " + std::to_string(d) + " has " + std::to_string(layer.size()) +
                  " values, expected " + std::to_string(expect));
    std::vector<double> values;
    values.reserve(expect);
    for (const auto& v : layer) {
      if (!v.is_number()) return fail("non-numeric weight in layer " + std::to_string(d));
      values.push_back(v.get<double>());
    }
    weights.emplace_back(dims[d + 1], dims[d], std::move(values));
  }
  Checkpoint c{Mlp(std::move(dims), std::move(weights)), nlohmann::json::object()};
  if (j.contains("meta")) c.meta = j.at("meta");
  return c;
}

inline void save_checkpoint(const std::string& path, const Mlp& net, const nlohmann::json& meta) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  out << checkpoint_to_string(net, meta);
  if (!out) throw IoError("write failed for " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw std::invalid_argument("checkpoint " + path + ": " + e.what());
  }
  return checkpoint_from_json(j);
}

}  // namespace minsharp
