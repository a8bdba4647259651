#include <fstream>
#include "json.hpp"

#include "mtv/tasks.hpp"

namespace mtv {

using nlohmann::json;

namespace {

json segment_json(const Segment& s) {
  json j;
  j["tokens"] = s.tokens;
  if (s.soft.rows() > 0) {
    json rows = json::array();
    for (Eigen::Index r = 0; r < s.soft.rows(); ++r) {
      json row = json::array();
      for (Eigen::Index c = 0; c < s.soft.cols(); ++c) row.push_back(s.soft(r, c));
      rows.push_back(std::move(row));
    }
    j["soft"] = std::move(rows);
  }
  return j;
}

Segment segment_from(const json& j) {
  Segment s;
  s.tokens = j.at("tokens").get<std::vector<int>>();
  if (j.contains("soft")) {
    const auto& rows = j.at("soft");
    const Eigen::Index n = Eigen::Index(rows.size());
    const Eigen::Index d = n > 0 ? Eigen::Index(rows[0].size()) : 0;
    s.soft.resize(n, d);
    for (Eigen::Index r = 0; r < n; ++r) {
      if (Eigen::Index(rows[r].size()) != d) throw FormatError("malformed episode", "ragged soft rows");
      for (Eigen::Index c = 0; c < d; ++c) s.soft(r, c) = rows[r][c].get<double>();
    }
  }
  return s;
}

}  // namespace

std::string episode_to_json(const Episode& e) {
  json j;
  j["task"] = e.task;
  j["seed"] = e.seed;
  j["n_shots"] = e.n_shots();
  json shots = json::array();
  for (const auto& s : e.shots) shots.push_back({{"input", segment_json(s.input)}, {"output", s.output}});
  j["shots"] = std::move(shots);
  j["query"] = segment_json(e.query);
  j["gold"] = e.gold;
  return j.dump();
}

Episode episode_from_json(const std::string& line) {
  try {
    const json j = json::parse(line);
    Episode e;
    e.task = j.at("task").get<std::string>();
    const auto slash = e.task.rfind('/');
    if (slash == std::string::npos) throw FormatError("malformed episode", "task name lacks '/<id>'");
    e.kind = task_kind_from_string(e.task.substr(0, slash));
    e.task_id = std::stoi(e.task.substr(slash + 1));
    e.seed = j.at("seed").get<std::uint64_t>();
    for (const auto& s : j.at("shots")) e.shots.push_back({segment_from(s.at("input")), s.at("output").get<std::vector<int>>()});
    if (j.at("n_shots").get<int>() != e.n_shots()) throw FormatError("malformed episode", "n_shots disagrees with shots[]");
    e.query = segment_from(j.at("query"));
    e.gold = j.at("gold").get<std::vector<int>>();
    return e;
  } catch (const json::exception& ex) {
    throw FormatError("malformed episode", ex.what());
  }
}

void write_episodes(const std::filesystem::path& path, const std::vector<Episode>& episodes) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw FormatError("io", "cannot open " + path.string());
  for (const auto& e : episodes) out << episode_to_json(e) << '\n';
}

std::vector<Episode> read_episodes(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("io", "cannot open " + path.string());
  std::vector<Episode> out;
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) out.push_back(episode_from_json(line));
  return out;
}

}  // namespace mtv
