#pragma once

#include <string>
#include <utility>
#include <vector>

namespace panfm {

struct OrganSpec {
  std::string name;
  int feature_dim = 0;   // width of the raw per-organ feature vector
  int token_count = 0;   // tokens this organ contributes to the sequence
};

// Ordered organ list fixing the token-sequence layout. Spans are half-open
// token index ranges over the N patch positions (CLS excluded).
class OrganSchema {
 public:
  OrganSchema() = default;
  explicit OrganSchema(std::vector<OrganSpec> organs);

  const std::vector<OrganSpec>& organs() const { return organs_; }
  int organ_count() const { return static_cast<int>(organs_.size()); }
  int total_tokens() const { return total_tokens_; }               // N
  int total_feature_dim() const { return total_feature_dim_; }
  std::pair<int, int> span(int organ) const { return spans_[organ]; }
  int index_of(const std::string& name) const;  // -1 if absent

  bool operator==(const OrganSchema& other) const;

 private:
  std::vector<OrganSpec> organs_;
  std::vector<std::pair<int, int>> spans_;
  int total_tokens_ = 0;
  int total_feature_dim_ = 0;
};

// schema.json: {"organs": [{"name", "feature_dim", "token_count"}, ...]}
OrganSchema load_schema(const std::string& path);
void save_schema(const OrganSchema& schema, const std::string& path);

// The cohort schema from the source population: dims
// (119, 80, 16, 4, 3, 3, 3), token budgets (64, 32, 16, 4, 4, 4, 4).
OrganSchema reference_schema();
// Small schema with the same seven organs and the same dimensional
// imbalance, sized so full training runs stay under a minute.
OrganSchema desk_schema();

}  // namespace panfm
