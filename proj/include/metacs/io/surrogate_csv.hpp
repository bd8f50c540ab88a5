#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include "metacs/optics.hpp"

namespace metacs::io {

/// Reads `width_m,re_t,im_t,state_id` rows (header required). Widths must be
/// the first-kind Chebyshev nodes of [w_min, w_max]; the interpolant degree
/// defaults to (nodes per state - 1).
inline std::vector<optics::TransmissionSample> read_transmission_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw ConfigError("surrogate csv: empty file");
  auto trim = [](std::string s) {
    s.erase(0, s.find_first_not_of(" \t\r"));
    s.erase(s.find_last_not_of(" \t\r") + 1);
    return s;
  };
  std::vector<std::string> cols;
  {
    std::istringstream hs(line);
    for (std::string c; std::getline(hs, c, ',');) cols.push_back(trim(c));
  }
  if (cols != std::vector<std::string>{"width_m", "re_t", "im_t", "state_id"})
    throw ConfigError("surrogate csv: header must be width_m,re_t,im_t,state_id");
  std::vector<optics::TransmissionSample> out;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    std::istringstream ls(line);
    std::string a, b, c, d;
    if (!std::getline(ls, a, ',') || !std::getline(ls, b, ',') || !std::getline(ls, c, ',') || !std::getline(ls, d))
      throw ConfigError("surrogate csv: line " + std::to_string(lineno) + " needs 4 columns");
    try {
      out.push_back({std::stod(a), Complex(std::stod(b), std::stod(c)), static_cast<Index>(std::stoll(d))});
    } catch (const std::exception&) {
      throw ConfigError("surrogate csv: unparsable number on line " + std::to_string(lineno));
    }
  }
  return out;
}

inline optics::SurrogateModel load_surrogate_csv(const std::filesystem::path& path, double w_min, double w_max,
                                                 std::optional<Index> degree = std::nullopt) {
  std::ifstream f(path);
  if (!f) throw ConfigError("surrogate csv: cannot open " + path.string());
  const auto samples = read_transmission_csv(f);
  std::map<Index, Index> per_state;
  for (const auto& s : samples) ++per_state[s.state];
  if (per_state.empty()) throw ConfigError("surrogate csv: no samples");
  Index nodes = per_state.begin()->second;
  for (const auto& [s, n] : per_state) nodes = std::min(nodes, n);
  return optics::fit_surrogate(samples, w_min, w_max, degree.value_or(nodes - 1));
}

}  // namespace metacs::io
