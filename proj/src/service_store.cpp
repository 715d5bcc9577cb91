#include "service_store.hpp"

#include "stableflow/encoding.hpp"
#include "stableflow/error.hpp"

#include "json_support.hpp"

#include <cstdio>

namespace stableflow::service {

namespace fs = std::filesystem;

Store::Store(fs::path root) : root_(std::move(root)), nonce_engine_(std::random_device{}()) {
  std::error_code ec;
  fs::create_directories(root_ / "datasets", ec);
  if (!ec) fs::create_directories(root_ / "models", ec);
  if (ec) throw ValidationError("cannot create store at " + root_.string() + ": " + ec.message());
}

bool Store::valid_id(std::string_view id) {
  if (id.size() != 25 || id[16] != '-') return false;
  for (std::size_t i = 0; i < id.size(); ++i) {
    if (i == 16) continue;
    const char c = id[i];
    if (!((c >= '0' && c <= '9') || (c >= 'a' && c <= 'f'))) return false;
  }
  return true;
}

fs::path Store::path_for(std::string_view kind, std::string_view id, std::string_view suffix) const {
  return root_ / std::string(kind) / (std::string(id) + std::string(suffix));
}

namespace {

void write_atomically(const fs::path& path, std::string_view content) {
  fs::path tmp = path;
  tmp += ".tmp";
  detail::write_file(tmp, content);
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw ValidationError("cannot store " + path.string() + ": " + ec.message());
}

}  // namespace

std::string Store::put(std::string_view kind, std::string_view content, const std::string& meta_json) {
  std::uint32_t nonce = 0;
  {
    std::lock_guard lock(nonce_mutex_);
    nonce = static_cast<std::uint32_t>(nonce_engine_());
  }
  char suffix[9];
  std::snprintf(suffix, sizeof suffix, "%08x", nonce);
  const std::string id = encoding::sha256_hex(content).substr(0, 16) + "-" + suffix;
  // content first: a meta file always points at a complete object
  write_atomically(path_for(kind, id, ".json"), content);
  write_atomically(path_for(kind, id, ".meta.json"), meta_json);
  return id;
}

std::optional<std::string> Store::content(std::string_view kind, std::string_view id) const {
  if (!valid_id(id)) return std::nullopt;
  const fs::path path = path_for(kind, id, ".json");
  if (!fs::exists(path)) return std::nullopt;
  return detail::read_file(path);
}

std::optional<std::string> Store::meta(std::string_view kind, std::string_view id) const {
  if (!valid_id(id)) return std::nullopt;
  const fs::path path = path_for(kind, id, ".meta.json");
  if (!fs::exists(path)) return std::nullopt;
  return detail::read_file(path);
}

}  // namespace stableflow::service
