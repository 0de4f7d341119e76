#include "stonefuse/manifest.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include "stonefuse/common.hpp"

namespace stonefuse {

std::string view_name(View v) { return v == View::SUR ? "SUR" : "SEC"; }

View parse_view(const std::string& s) {
  if (s == "SUR") return View::SUR;
  if (s == "SEC") return View::SEC;
  fail("unknown_view", "unknown view tag: " + s);
}

int DatasetManifest::class_index(const std::string& label) const {
  auto it = std::find(class_names.begin(), class_names.end(), label);
  return it == class_names.end() ? -1 : static_cast<int>(it - class_names.begin());
}

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  std::stringstream ss(line);
  while (std::getline(ss, cur, ',')) out.push_back(cur);
  if (!line.empty() && line.back() == ',') out.push_back("");
  return out;
}

}  // namespace

void validate_manifest(const DatasetManifest& m, bool allow_any_class_count) {
  if (m.entries.empty()) fail("empty_manifest", "empty manifest");
  std::set<std::string> ids;
  for (const auto& e : m.entries) {
    if (!ids.insert(e.image_id).second) {
      fail("duplicate_id", "duplicate image_id: " + e.image_id);
    }
    if (m.class_index(e.class_label) < 0) {
      fail("unknown_class", "class " + e.class_label + " not in class_names");
    }
    if (e.width <= 0 || e.height <= 0) {
      fail("bad_dimensions", "nonpositive dimensions for " + e.image_id);
    }
  }
  if (!allow_any_class_count && m.class_names.size() != 6) {
    fail("class_count", "expected 6 classes, found " +
                            std::to_string(m.class_names.size()) +
                            " (pass the override flag to allow)");
  }
}

DatasetManifest load_manifest(const std::filesystem::path& path,
                              bool allow_any_class_count) {
  std::ifstream in(path);
  if (!in) fail("missing_file", "cannot open manifest " + path.string());
  DatasetManifest m;
  m.dataset_id = path.stem().string();
  std::string line;
  if (!std::getline(in, line)) fail("empty_manifest", "empty manifest");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != "image_id,path,view,class_label,width,height") {
    fail("bad_header", "unexpected manifest header: " + line);
  }
  std::set<std::string> classes;
  const auto base = path.parent_path();
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto f = split_csv_line(line);
    if (f.size() != 6) fail("bad_record", "manifest line has wrong field count: " + line);
    ImageEntry e;
    e.image_id = f[0];
    std::filesystem::path p(f[1]);
    e.path = p.is_absolute() ? p : base / p;
    e.view = parse_view(f[2]);
    e.class_label = f[3];
    e.width = std::stoi(f[4]);
    e.height = std::stoi(f[5]);
    classes.insert(e.class_label);
    m.entries.push_back(std::move(e));
  }
  m.class_names.assign(classes.begin(), classes.end());
  validate_manifest(m, allow_any_class_count);
  return m;
}

void save_manifest(const DatasetManifest& m, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) fail("unwritable_path", "cannot write manifest " + path.string());
  out << "image_id,path,view,class_label,width,height\n";
  const auto base = path.parent_path();
  for (const auto& e : m.entries) {
    auto rel = e.path.lexically_proximate(base);
    out << e.image_id << "," << rel.generic_string() << "," << view_name(e.view) << ","
        << e.class_label << "," << e.width << "," << e.height << "\n";
  }
}

std::string fragment_of(const std::string& image_id) {
  for (const char* suf : {"-SUR", "-SEC"}) {
    const std::size_t n = image_id.size();
    if (n > 4 && image_id.compare(n - 4, 4, suf) == 0) {
      return image_id.substr(0, n - 4);
    }
  }
  return image_id;
}

}  // namespace stonefuse
