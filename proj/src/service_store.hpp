#pragma once

#include <filesystem>
#include <mutex>
#include <optional>
#include <random>
#include <string>
#include <string_view>

namespace stableflow::service {

/// Flat directory store: <root>/<kind>/<id>.json plus <id>.meta.json.
/// Ids are a content-hash prefix and a random nonce, so identical uploads
/// still get distinct ids. Objects are immutable once written.
class Store {
 public:
  explicit Store(std::filesystem::path root);

  /// Writes both files (each via a temporary and a rename) and returns the id.
  std::string put(std::string_view kind, std::string_view content, const std::string& meta_json);
  std::optional<std::string> content(std::string_view kind, std::string_view id) const;
  std::optional<std::string> meta(std::string_view kind, std::string_view id) const;

  /// 16 hex digits, '-', 8 hex digits; anything else can never name an object.
  static bool valid_id(std::string_view id);

  const std::filesystem::path& root() const { return root_; }

 private:
  std::filesystem::path path_for(std::string_view kind, std::string_view id, std::string_view suffix) const;

  std::filesystem::path root_;
  std::mutex nonce_mutex_;
  std::mt19937_64 nonce_engine_;
};

}  // namespace stableflow::service
