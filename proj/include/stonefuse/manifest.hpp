#pragma once

#include <filesystem>
#include <string>
#include <vector>

namespace stonefuse {

enum class View { SUR, SEC };

std::string view_name(View v);
View parse_view(const std::string& s);

struct ImageEntry {
  std::string image_id;
  std::filesystem::path path;
  View view = View::SUR;
  std::string class_label;
  int width = 0;
  int height = 0;
};

struct DatasetManifest {
  std::string dataset_id;
  std::vector<ImageEntry> entries;
  std::vector<std::string> class_names;  // ordered, 6 by default

  int class_index(const std::string& label) const;  // -1 when unknown
};

// Manifest file: UTF-8 CSV with header
//   image_id,path,view,class_label,width,height
// Relative image paths resolve against the manifest's directory.
DatasetManifest load_manifest(const std::filesystem::path& path,
                              bool allow_any_class_count = false);
void save_manifest(const DatasetManifest& m, const std::filesystem::path& path);

void validate_manifest(const DatasetManifest& m, bool allow_any_class_count = false);

// Fragment identity for paired-view data: image ids of the form
// "<fragment>-SUR" / "<fragment>-SEC" share a fragment. Returns the id itself
// when no view suffix is present.
std::string fragment_of(const std::string& image_id);

}  // namespace stonefuse
