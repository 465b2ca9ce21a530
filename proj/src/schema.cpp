#include "panfm/schema.hpp"

#include <fstream>
#include <set>

#include <json.hpp>

#include "panfm/util.hpp"

namespace panfm {

using nlohmann::json;

OrganSchema::OrganSchema(std::vector<OrganSpec> organs) : organs_(std::move(organs)) {
  PF_CHECK(!organs_.empty(), "schema: no organs");
  std::set<std::string> names;
  int pos = 0, width = 0;
  for (const OrganSpec& o : organs_) {
    PF_CHECK(!o.name.empty(), "schema: organ with empty name");
    PF_CHECK(names.insert(o.name).second, "schema: duplicate organ name '", o.name, "'");
    PF_CHECK(o.feature_dim >= 1, "schema: organ '", o.name, "' has nonpositive feature_dim ",
             o.feature_dim);
    PF_CHECK(o.token_count >= 1, "schema: organ '", o.name, "' has nonpositive token_count ",
             o.token_count);
    spans_.emplace_back(pos, pos + o.token_count);
    pos += o.token_count;
    width += o.feature_dim;
  }
  total_tokens_ = pos;
  total_feature_dim_ = width;
}

int OrganSchema::index_of(const std::string& name) const {
  for (int i = 0; i < organ_count(); ++i)
    if (organs_[i].name == name) return i;
  return -1;
}

bool OrganSchema::operator==(const OrganSchema& other) const {
  if (organs_.size() != other.organs_.size()) return false;
  for (size_t i = 0; i < organs_.size(); ++i)
    if (organs_[i].name != other.organs_[i].name ||
        organs_[i].feature_dim != other.organs_[i].feature_dim ||
        organs_[i].token_count != other.organs_[i].token_count)
      return false;
  return true;
}

OrganSchema load_schema(const std::string& path) {
  std::ifstream f(path);
  PF_CHECK(f.good(), "schema: cannot open ", path);
  json j;
  try {
    f >> j;
  } catch (const std::exception& e) {
    fail(msg("schema: parse error in ", path, ": ", e.what()));
  }
  PF_CHECK(j.contains("organs") && j["organs"].is_array(), "schema: missing 'organs' array in ",
           path);
  std::vector<OrganSpec> organs;
  for (const auto& o : j["organs"]) {
    organs.push_back({o.at("name").get<std::string>(), o.at("feature_dim").get<int>(),
                      o.at("token_count").get<int>()});
  }
  return OrganSchema(std::move(organs));
}

void save_schema(const OrganSchema& schema, const std::string& path) {
  json organs = json::array();
  for (const OrganSpec& o : schema.organs())
    organs.push_back({{"name", o.name}, {"feature_dim", o.feature_dim},
                      {"token_count", o.token_count}});
  std::ofstream f(path);
  PF_CHECK(f.good(), "schema: cannot write ", path);
  f << json{{"organs", organs}}.dump(2) << "\n";
}

OrganSchema reference_schema() {
  return OrganSchema({{"Brain", 119, 64},
                      {"Heart", 80, 32},
                      {"Adipose", 16, 16},
                      {"Liver", 4, 4},
                      {"Kidney", 3, 4},
                      {"Spleen", 3, 4},
                      {"Pancreas", 3, 4}});
}

OrganSchema desk_schema() {
  return OrganSchema({{"Brain", 12, 8},
                      {"Heart", 8, 4},
                      {"Adipose", 4, 2},
                      {"Liver", 2, 1},
                      {"Kidney", 2, 1},
                      {"Spleen", 2, 1},
                      {"Pancreas", 2, 1}});
}

}  // namespace panfm
