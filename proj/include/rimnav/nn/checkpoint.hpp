#ifndef RIMNAV_NN_CHECKPOINT_HPP_
#define RIMNAV_NN_CHECKPOINT_HPP_

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "rimnav/nn/params.hpp"

namespace rimnav::nn {

inline constexpr int kCheckpointVersion = 1;

namespace detail {

template <typename T>
void append_le(std::vector<char>& buf, T v) {
  char bytes[sizeof(T)];
  std::memcpy(bytes, &v, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  buf.insert(buf.end(), bytes, bytes + sizeof(T));
}

template <typename T>
T read_le(const char* p) {
  char bytes[sizeof(T)];
  std::memcpy(bytes, p, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  T v;
  std::memcpy(&v, bytes, sizeof(T));
  return v;
}

}  // namespace detail

/// Writes `dir/manifest.json` and `dir/params.bin`. `extra` is stored under
/// the manifest key "meta" (policy config, provenance).
template <typename T>
void save_checkpoint(const ParameterStore<T>& store, const std::filesystem::path& dir, const nlohmann::json& extra) {
  std::filesystem::create_directories(dir);
  std::vector<char> blob;
  nlohmann::json tensors = nlohmann::json::array();
  for (const auto* p : store.sorted()) {
    tensors.push_back({{"name", p->name},
                       {"shape", p->shape},
                       {"dtype", dtype_name<T>()},
                       {"byte_offset", blob.size()},
                       {"trainable", p->trainable}});
    for (Eigen::Index i = 0; i < p->value.size(); ++i) detail::append_le<T>(blob, p->value.data()[i]);
  }
  nlohmann::json manifest = {{"version", kCheckpointVersion},
                             {"blob", "params.bin"},
                             {"blob_bytes", blob.size()},
                             {"tensors", tensors},
                             {"meta", extra}};
  {
    std::ofstream out(dir / "params.bin", std::ios::binary | std::ios::trunc);
    out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
    if (!out) throw std::runtime_error("failed writing " + (dir / "params.bin").string());
  }
  std::ofstream out(dir / "manifest.json", std::ios::trunc);
  out << manifest.dump(2) << "\n";
  if (!out) throw std::runtime_error("failed writing " + (dir / "manifest.json").string());
}

inline nlohmann::json read_manifest(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw std::runtime_error("cannot open " + (dir / "manifest.json").string());
  nlohmann::json m = nlohmann::json::parse(in);
  if (m.value("version", -1) != kCheckpointVersion)
    throw std::runtime_error("unsupported checkpoint version in " + dir.string());
  return m;
}

/// Loads values into an existing store. Every parameter must be present with
/// matching shape and dtype; nothing is modified if validation fails.
/// Returns the manifest "meta" object.
template <typename T>
nlohmann::json load_checkpoint(ParameterStore<T>& store, const std::filesystem::path& dir) {
  const nlohmann::json manifest = read_manifest(dir);
  std::ifstream in(dir / manifest.at("blob").get<std::string>(), std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint blob in " + dir.string());
  std::vector<char> blob((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (blob.size() != manifest.at("blob_bytes").get<size_t>()) throw std::runtime_error("checkpoint blob size mismatch");

  const auto& tensors = manifest.at("tensors");
  auto params = store.sorted();
  if (tensors.size() != params.size())
    throw std::runtime_error("checkpoint has " + std::to_string(tensors.size()) + " tensors, model expects " +
                             std::to_string(params.size()));
  std::vector<Matrix<T>> staged;
  staged.reserve(params.size());
  for (size_t i = 0; i < params.size(); ++i) {
    const auto& e = tensors[i];
    const Parameter<T>& p = *params[i];
    if (e.at("name").get<std::string>() != p.name) throw std::runtime_error("checkpoint tensor order/name mismatch at " + p.name);
    if (e.at("shape").get<std::vector<int64_t>>() != p.shape) throw std::runtime_error("shape mismatch for " + p.name);
    if (e.at("dtype").get<std::string>() != dtype_name<T>()) throw std::runtime_error("dtype mismatch for " + p.name);
    const size_t off = e.at("byte_offset").get<size_t>();
    const size_t n = static_cast<size_t>(p.value.size());
    if (off + n * sizeof(T) > blob.size()) throw std::runtime_error("tensor " + p.name + " overruns blob");
    Matrix<T> m(p.value.rows(), p.value.cols());
    for (size_t k = 0; k < n; ++k) m.data()[k] = detail::read_le<T>(blob.data() + off + k * sizeof(T));
    staged.push_back(std::move(m));
  }
  for (size_t i = 0; i < params.size(); ++i) {
    params[i]->value = std::move(staged[i]);
    if (tensors[i].contains("trainable")) params[i]->trainable = tensors[i]["trainable"].get<bool>();
  }
  return manifest.value("meta", nlohmann::json::object());
}

}  // namespace rimnav::nn

#endif  // RIMNAV_NN_CHECKPOINT_HPP_
