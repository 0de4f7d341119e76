#include "stonefuse/checkpoint.hpp"

#include <fstream>

#include "stonefuse/common.hpp"
#include "stonefuse/digest.hpp"

namespace stonefuse {

using nlohmann::json;

void CkptMeta::validate() const {
  if (view != "SUR" && view != "SEC" && view != "MIX") {
    fail("bad_meta", "unknown view: " + view);
  }
  if (tl_step != "scratch" && tl_step != "step1_general" && tl_step != "step2_domain" &&
      tl_step != "fusion") {
    fail("bad_meta", "unknown tl_step: " + tl_step);
  }
  if (tl_step == "step2_domain" && !parent_digest) {
    fail("lineage_invariant", "step2_domain checkpoint requires a parent digest");
  }
  if (tl_step == "scratch" && parent_digest) {
    fail("lineage_invariant", "scratch checkpoint must not have a parent");
  }
  if (tl_step == "fusion" && (!parent_sur_digest || !parent_sec_digest)) {
    fail("lineage_invariant", "fusion checkpoint requires both branch parents");
  }
}

json CkptMeta::to_json() const {
  json j;
  j["checkpoint_id"] = checkpoint_id;
  j["architecture_id"] = architecture_id;
  j["view"] = view;
  j["tl_step"] = tl_step;
  j["parent_digest"] = parent_digest ? json(*parent_digest) : json();
  j["parent_sur_digest"] = parent_sur_digest ? json(*parent_sur_digest) : json();
  j["parent_sec_digest"] = parent_sec_digest ? json(*parent_sec_digest) : json();
  j["class_names"] = class_names;
  j["metrics_at_save"] = metrics_at_save;
  j["weight_provenance"] = weight_provenance;
  j["fusion_spec"] = fusion_spec;
  return j;
}

CkptMeta CkptMeta::from_json(const json& j) {
  CkptMeta m;
  m.checkpoint_id = j.at("checkpoint_id").get<std::string>();
  m.architecture_id = j.at("architecture_id").get<std::string>();
  m.view = j.at("view").get<std::string>();
  m.tl_step = j.at("tl_step").get<std::string>();
  auto opt = [&](const char* key) -> std::optional<std::string> {
    if (j.contains(key) && !j.at(key).is_null()) return j.at(key).get<std::string>();
    return std::nullopt;
  };
  m.parent_digest = opt("parent_digest");
  m.parent_sur_digest = opt("parent_sur_digest");
  m.parent_sec_digest = opt("parent_sec_digest");
  m.class_names = j.at("class_names").get<std::vector<std::string>>();
  m.metrics_at_save = j.value("metrics_at_save", json());
  m.weight_provenance = j.value("weight_provenance", "");
  m.fusion_spec = j.value("fusion_spec", json());
  return m;
}

CheckpointStore::CheckpointStore(std::filesystem::path root) : root_(std::move(root)) {
  std::error_code ec;
  std::filesystem::create_directories(root_, ec);
}

std::filesystem::path CheckpointStore::dir_of(const std::string& digest) const {
  return root_ / ("ckpt-" + digest);
}

std::string CheckpointStore::save(CkptMeta meta, const std::vector<std::uint8_t>& weights,
                                  const std::string& trainlog_csv) {
  const std::string digest = sha256_hex(weights);
  meta.checkpoint_id = digest;
  meta.validate();
  const auto final_dir = dir_of(digest);
  if (std::filesystem::exists(final_dir)) return digest;  // content-addressed: done
  const auto tmp_dir = root_ / (".tmp-" + digest);
  std::filesystem::create_directories(tmp_dir);
  {
    std::ofstream w(tmp_dir / "weights.bin", std::ios::binary);
    w.write(reinterpret_cast<const char*>(weights.data()),
            static_cast<std::streamsize>(weights.size()));
    std::ofstream m(tmp_dir / "meta.json");
    m << meta.to_json().dump(2) << "\n";
    std::ofstream t(tmp_dir / "trainlog.csv");
    t << trainlog_csv;
  }
  std::error_code ec;
  std::filesystem::rename(tmp_dir, final_dir, ec);
  if (ec && !std::filesystem::exists(final_dir)) {
    fail("store_write", "cannot finalize checkpoint " + digest + ": " + ec.message());
  }
  return digest;
}

bool CheckpointStore::exists(const std::string& digest) const {
  return std::filesystem::exists(dir_of(digest) / "weights.bin");
}

CkptMeta CheckpointStore::load_meta(const std::string& digest) const {
  std::ifstream in(dir_of(digest) / "meta.json");
  if (!in) fail("missing_checkpoint", "no checkpoint " + digest + " in " + root_.string());
  json j;
  in >> j;
  return CkptMeta::from_json(j);
}

std::vector<std::uint8_t> CheckpointStore::load_weights(const std::string& digest) const {
  std::ifstream in(dir_of(digest) / "weights.bin", std::ios::binary);
  if (!in) fail("missing_checkpoint", "no weights for " + digest);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  return bytes;
}

std::vector<std::string> CheckpointStore::list() const {
  std::vector<std::string> out;
  if (!std::filesystem::exists(root_)) return out;
  for (const auto& e : std::filesystem::directory_iterator(root_)) {
    const auto name = e.path().filename().string();
    if (name.rfind("ckpt-", 0) == 0) out.push_back(name.substr(5));
  }
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<LineageNode> CheckpointStore::walk_chain(const std::string& digest) const {
  std::vector<LineageNode> chain;
  std::string cur = digest;
  while (true) {
    if (!exists(cur)) fail("broken_chain", "missing checkpoint in chain: " + cur);
    const std::string actual = sha256_file_hex(dir_of(cur) / "weights.bin");
    if (actual != cur) {
      fail("digest_mismatch", "weights of " + cur + " hash to " + actual);
    }
    CkptMeta meta = load_meta(cur);
    chain.push_back({cur, meta.view, meta.tl_step});
    if (chain.size() > 16) fail("broken_chain", "lineage chain too long (cycle?)");
    if (!meta.parent_digest) break;
    cur = *meta.parent_digest;
  }
  return chain;
}

LineageReport CheckpointStore::verify_lineage(const std::string& digest) const {
  LineageReport report;
  report.chain = walk_chain(digest);
  const CkptMeta meta = load_meta(digest);
  if (meta.tl_step == "fusion") {
    report.sur_chain = walk_chain(*meta.parent_sur_digest);
    report.sec_chain = walk_chain(*meta.parent_sec_digest);
  }
  return report;
}

}  // namespace stonefuse
