#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

namespace stonefuse {

// Serialized model state plus transfer-learning lineage metadata.
struct CkptMeta {
  std::string checkpoint_id;  // sha256 of weights.bin, set by the store
  std::string architecture_id;
  std::string view;     // SUR | SEC | MIX
  std::string tl_step;  // scratch | step1_general | step2_domain | fusion
  std::optional<std::string> parent_digest;      // single-view lineage
  std::optional<std::string> parent_sur_digest;  // fusion lineage
  std::optional<std::string> parent_sec_digest;
  std::vector<std::string> class_names;
  nlohmann::json metrics_at_save;  // MetricsReport-shaped or summary values
  std::string weight_provenance;   // e.g. "random", "cache:<digest>", parent id
  nlohmann::json fusion_spec;      // present for MIX fusion checkpoints

  void validate() const;
  nlohmann::json to_json() const;
  static CkptMeta from_json(const nlohmann::json& j);
};

struct LineageNode {
  std::string digest;
  std::string view;
  std::string tl_step;
};

struct LineageReport {
  std::vector<LineageNode> chain;      // self first, then parents to the root
  std::vector<LineageNode> sur_chain;  // fusion checkpoints only
  std::vector<LineageNode> sec_chain;
};

// Content-addressed checkpoint directory: store/ckpt-<digest>/{weights.bin,
// meta.json, trainlog.csv}. Writes go to a temp dir then rename (atomic on
// one filesystem).
class CheckpointStore {
 public:
  explicit CheckpointStore(std::filesystem::path root);

  const std::filesystem::path& root() const { return root_; }

  std::string save(CkptMeta meta, const std::vector<std::uint8_t>& weights,
                   const std::string& trainlog_csv);
  bool exists(const std::string& digest) const;
  CkptMeta load_meta(const std::string& digest) const;
  std::vector<std::uint8_t> load_weights(const std::string& digest) const;
  std::vector<std::string> list() const;

  // Walks the parent chain(s), recomputing weight digests along the way.
  LineageReport verify_lineage(const std::string& digest) const;

 private:
  std::filesystem::path dir_of(const std::string& digest) const;
  std::vector<LineageNode> walk_chain(const std::string& digest) const;
  std::filesystem::path root_;
};

}  // namespace stonefuse
