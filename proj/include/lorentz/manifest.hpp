#pragma once

#include "lorentz/errors.hpp"
#include "lorentz/io.hpp"

#include <Eigen/Core>
#include <boost/version.hpp>
#include <json.hpp>
#include <openssl/evp.h>
#include <openssl/opensslv.h>

#include <filesystem>
#include <fstream>
#include <map>
#include <string>

namespace lorentz {

inline constexpr const char* version = "1.0.0";
inline constexpr const char* manifest_name = "manifest.json";

inline std::string sha256_hex(const std::string& bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  if (!ctx || EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr) != 1 ||
      EVP_DigestUpdate(ctx, bytes.data(), bytes.size()) != 1 || EVP_DigestFinal_ex(ctx, md, &len) != 1) {
    EVP_MD_CTX_free(ctx);
    throw std::runtime_error("sha256 failed");
  }
  EVP_MD_CTX_free(ctx);
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[md[i] >> 4];
    out += hex[md[i] & 15];
  }
  return out;
}

inline std::string read_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw config_error("InputFile", "cannot open " + path);
  return std::string(std::istreambuf_iterator<char>(is), {});
}

inline std::string sha256_file(const std::string& path) { return sha256_hex(read_file(path)); }

inline nlohmann::json build_versions() {
  return {{"lorentz", version},
          {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
                        std::to_string(EIGEN_MINOR_VERSION)},
          {"boost", BOOST_LIB_VERSION},
          {"openssl", OPENSSL_VERSION_TEXT},
          {"compiler", __VERSION__},
          {"manifest_schema", schema_version}};
}

/// Record of one run: the configuration text verbatim, the seed, library versions,
/// and SHA-256 hashes of inputs and artifacts. The thread count is deliberately
/// absent, since results do not depend on it.
struct Manifest {
  std::string command;
  std::uint64_t seed = 0;
  std::string config_text;
  std::map<std::string, std::string> inputs;     // path as given -> hash
  std::map<std::string, std::string> artifacts;  // file name in the run directory -> hash

  nlohmann::json to_json() const {
    return tagged("manifest", {{"command", command},
                               {"seed", seed},
                               {"config", config_text},
                               {"config_sha256", sha256_hex(config_text)},
                               {"versions", build_versions()},
                               {"inputs", inputs},
                               {"artifacts", artifacts}});
  }

  void add_input(const std::string& path) { inputs[path] = sha256_file(path); }
  void add_artifact(const std::filesystem::path& dir, const std::string& name) {
    artifacts[name] = sha256_file((dir / name).string());
  }

  void write(const std::filesystem::path& dir) const {
    std::ofstream os(dir / manifest_name, std::ios::binary);
    if (!os) throw config_error("OutputFile", "cannot write manifest in " + dir.string());
    os << to_json().dump(1) << '\n';
  }
};

/// True iff every artifact listed in the manifest exists with the recorded hash.
/// A directory without a manifest, or one in which none of the listed artifacts is
/// present (a bare manifest), raises MissingManifest.
inline bool manifest_check(const std::filesystem::path& dir) {
  const auto path = dir / manifest_name;
  if (!std::filesystem::exists(path))
    throw config_error("MissingManifest", "no " + std::string(manifest_name) + " in " + dir.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(path.string()));
  } catch (const nlohmann::json::exception& e) {
    throw config_error("MissingManifest", "unreadable manifest: " + std::string(e.what()));
  }
  if (!j.contains("artifacts") || !j["artifacts"].is_object())
    throw config_error("MissingManifest", "manifest lists no artifacts");
  std::size_t present = 0;
  bool ok = true;
  for (const auto& [name, hash] : j["artifacts"].items()) {
    const auto p = dir / name;
    if (!std::filesystem::exists(p)) {
      ok = false;
      continue;
    }
    ++present;
    if (sha256_file(p.string()) != hash.get<std::string>()) ok = false;
  }
  if (present == 0 && !j["artifacts"].empty())
    throw config_error("MissingManifest", "manifest present but none of its artifacts");
  return ok;
}

}  // namespace lorentz
