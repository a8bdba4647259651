#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "mtv/mtv.hpp"

namespace mtv {

using ojson = nlohmann::ordered_json;

namespace {

// Nine significant digits reproduce any f32 exactly.
double f32_decimal(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", double(static_cast<float>(v)));
  return std::strtod(buf, nullptr);
}

ojson rows_json(const Matrix<double>& m) {
  ojson rows = ojson::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    ojson row = ojson::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(f32_decimal(m(r, c)));
    rows.push_back(std::move(row));
  }
  return rows;
}

Matrix<double> rows_from(const ojson& rows, Eigen::Index expected_rows, const char* what) {
  if (!rows.is_array()) throw FormatError("malformed json", std::string(what) + " is not an array");
  if (Eigen::Index(rows.size()) != expected_rows) throw FormatError("values/locations length mismatch", "");
  const Eigen::Index cols = rows.empty() ? 0 : Eigen::Index(rows[0].size());
  Matrix<double> m(expected_rows, cols);
  for (Eigen::Index r = 0; r < expected_rows; ++r) {
    if (Eigen::Index(rows[r].size()) != cols) throw FormatError("malformed json", std::string(what) + " rows are ragged");
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = double(static_cast<float>(rows[r][c].get<double>()));
  }
  if (!m.allFinite()) throw FormatError("malformed json", std::string(what) + " contains non-finite values");
  return m;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("io", "cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw FormatError("io", "cannot open " + path.string() + " for writing");
  out << text;
}

ojson parse(const std::string& text) {
  try {
    return ojson::parse(text);
  } catch (const ojson::parse_error& e) {
    throw FormatError("malformed json", e.what());
  }
}

}  // namespace

std::string extraction_config_to_json(const ExtractionConfig& c) {
  ojson j;
  j["steps"] = c.steps;
  j["samples_per_step"] = c.samples_per_step;
  j["init_probability"] = c.init_probability;
  j["init_noise"] = c.init_noise;
  j["baseline"] = c.baseline;
  j["final_selection"] = to_string(c.final_selection);
  j["loss"] = to_string(c.loss);
  j["examples_per_step"] = c.examples_per_step;
  j["adam"] = {{"lr", c.adam.lr}, {"beta1", c.adam.beta1}, {"beta2", c.adam.beta2}, {"eps", c.adam.eps}};
  j["patch_scope"] = to_string(c.patch_scope);
  return j.dump();
}

ExtractionConfig extraction_config_from_json(const std::string& text) {
  const ojson j = parse(text);
  if (!j.is_object()) throw ConfigError("extraction config must be a JSON object");
  ExtractionConfig c;
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "steps") c.steps = v.get<int>();
      else if (key == "samples_per_step") c.samples_per_step = v.get<int>();
      else if (key == "init_probability") c.init_probability = v.get<double>();
      else if (key == "init_noise") c.init_noise = v.get<double>();
      else if (key == "baseline") c.baseline = v.get<bool>();
      else if (key == "final_selection") c.final_selection = final_selection_from_string(v.get<std::string>());
      else if (key == "loss") c.loss = loss_mode_from_string(v.get<std::string>());
      else if (key == "examples_per_step") c.examples_per_step = v.get<int>();
      else if (key == "patch_scope") c.patch_scope = patch_scope_from_string(v.get<std::string>());
      else if (key == "adam") {
        for (const auto& [k, x] : v.items()) {
          if (k == "lr") c.adam.lr = x.get<double>();
          else if (k == "beta1") c.adam.beta1 = x.get<double>();
          else if (k == "beta2") c.adam.beta2 = x.get<double>();
          else if (k == "eps") c.adam.eps = x.get<double>();
          else throw ConfigError("unknown key 'extraction.adam." + k + "'");
        }
      } else
        throw ConfigError("unknown key 'extraction." + key + "'");
    }
  } catch (const ojson::type_error& e) {
    throw ConfigError(std::string("bad extraction config value: ") + e.what());
  }
  c.validate();
  return c;
}

std::string config_hash(const ExtractionConfig& cfg) {
  const std::string text = extraction_config_to_json(cfg);
  char buf[16];
  std::snprintf(buf, sizeof buf, "%08x", crc32_of(reinterpret_cast<const unsigned char*>(text.data()), text.size()));
  return buf;
}

std::string artifact_to_json(const MTVArtifact& a) {
  if (a.values.rows() != Eigen::Index(a.locations.size())) throw FormatError("values/locations length mismatch", "");
  ojson j;
  j["version"] = a.version;
  j["mode"] = a.mode;
  j["task"] = a.task;
  j["model_fingerprint"] = a.model_fingerprint;
  j["config_hash"] = a.config_hash;
  j["N"] = a.N;
  j["T"] = a.T;
  j["S"] = a.S;
  ojson locs = ojson::array();
  for (const auto& l : a.locations) locs.push_back({l.layer, l.head});
  j["locations"] = std::move(locs);
  j["values"] = rows_json(a.values);
  j["seeds"] = a.seeds;
  return j.dump(2) + "\n";
}

MTVArtifact artifact_from_json(const std::string& text) {
  const ojson j = parse(text);
  MTVArtifact a;
  try {
    a.version = j.at("version").get<int>();
    if (a.version != kArtifactVersion)
      throw FormatError("version mismatch",
                        "artifact version " + std::to_string(a.version) + ", expected " + std::to_string(kArtifactVersion));
    if (!j.contains("model_fingerprint") || j.at("model_fingerprint").get<std::string>().empty())
      throw FormatError("fingerprint absent", "");
    a.model_fingerprint = j.at("model_fingerprint").get<std::string>();
    a.mode = j.value("mode", std::string("mtv"));
    a.task = j.at("task").get<std::string>();
    a.config_hash = j.at("config_hash").get<std::string>();
    a.N = j.at("N").get<int>();
    a.T = j.at("T").get<int>();
    a.S = j.at("S").get<int>();
    for (const auto& l : j.at("locations")) {
      if (!l.is_array() || l.size() != 2) throw FormatError("malformed json", "location must be [layer, head]");
      a.locations.push_back({l[0].get<int>(), l[1].get<int>()});
    }
    if (!std::is_sorted(a.locations.begin(), a.locations.end()) ||
        std::adjacent_find(a.locations.begin(), a.locations.end()) != a.locations.end())
      throw FormatError("malformed json", "locations are not in canonical order");
    a.values = rows_from(j.at("values"), Eigen::Index(a.locations.size()), "values");
    a.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
  } catch (const ojson::exception& e) {
    throw FormatError("malformed json", e.what());
  }
  return a;
}

void save_artifact(const MTVArtifact& a, const std::filesystem::path& path) { write_file(path, artifact_to_json(a)); }

MTVArtifact load_artifact(const std::filesystem::path& path) { return artifact_from_json(read_file(path)); }

std::string mean_activations_to_json(const MeanActivations& m) {
  ojson j;
  j["version"] = kArtifactVersion;
  j["task"] = m.task;
  j["model_fingerprint"] = m.model_fingerprint;
  j["N"] = m.N;
  j["T"] = m.T;
  j["n_layers"] = m.n_layers;
  j["n_heads"] = m.n_heads;
  j["values"] = rows_json(m.values);
  return j.dump(2) + "\n";
}

MeanActivations mean_activations_from_json(const std::string& text) {
  const ojson j = parse(text);
  MeanActivations m;
  try {
    if (j.at("version").get<int>() != kArtifactVersion) throw FormatError("version mismatch", "mean activations");
    m.task = j.at("task").get<std::string>();
    m.model_fingerprint = j.at("model_fingerprint").get<std::string>();
    if (m.model_fingerprint.empty()) throw FormatError("fingerprint absent", "");
    m.N = j.at("N").get<int>();
    m.T = j.at("T").get<int>();
    m.n_layers = j.at("n_layers").get<int>();
    m.n_heads = j.at("n_heads").get<int>();
    if (m.T < 1) throw FormatError("malformed json", "T must be >= 1");
    m.values = rows_from(j.at("values"), Eigen::Index(m.n_layers) * m.n_heads, "values");
  } catch (const ojson::exception& e) {
    throw FormatError("malformed json", e.what());
  }
  return m;
}

void save_mean_activations(const MeanActivations& m, const std::filesystem::path& path) {
  write_file(path, mean_activations_to_json(m));
}

MeanActivations load_mean_activations(const std::filesystem::path& path) {
  return mean_activations_from_json(read_file(path));
}

}  // namespace mtv
