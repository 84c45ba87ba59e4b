#ifndef RIMNAV_MODEL_HPP_
#define RIMNAV_MODEL_HPP_

#include <filesystem>
#include <memory>
#include <optional>
#include <string>

#include <json.hpp>

#include "rimnav/auxtasks.hpp"
#include "rimnav/nn/checkpoint.hpp"
#include "rimnav/nn/params.hpp"
#include "rimnav/policy.hpp"

#ifndef RIMNAV_VERSION
#define RIMNAV_VERSION "0.0.0"
#endif

namespace rimnav {

inline constexpr const char* kToolVersion = RIMNAV_VERSION;

/// Provenance stamp embedded in every written artifact. No timestamps, so
/// identical inputs give byte-identical artifacts.
inline json provenance(const std::string& command, const json& config, const json& seeds) {
  return {{"tool", "rimnav"}, {"version", kToolVersion}, {"command", command}, {"config", config}, {"seeds", seeds}};
}

/// Policy plus auxiliary heads over one parameter store.
template <typename T>
class NavModel {
 public:
  NavModel(const PolicyConfig& cfg, uint64_t seed) : cfg_(cfg), seed_(seed) {
    Rng rng(derive_seed(seed, {0xb0}));
    policy_ = std::make_unique<Policy<T>>(store_, cfg_, rng);
    if (cfg_.memory == MemoryVariant::kRim && cfg_.aux.any())
      aux_ = std::make_unique<AuxHeads<T>>(store_, cfg_, policy_->visual_width(), derive_seed(seed, {0xb1}));
  }

  NavModel(const NavModel&) = delete;
  NavModel& operator=(const NavModel&) = delete;

  const PolicyConfig& config() const { return cfg_; }
  uint64_t seed() const { return seed_; }
  nn::ParameterStore<T>& store() { return store_; }
  const nn::ParameterStore<T>& store() const { return store_; }
  Policy<T>& policy() { return *policy_; }
  const Policy<T>& policy() const { return *policy_; }
  const AuxHeads<T>* aux() const { return aux_.get(); }

  void save(const std::filesystem::path& dir, const json& prov = json::object()) const {
    json meta = {{"policy_config", cfg_}, {"init_seed", seed_}, {"provenance", prov}};
    nn::save_checkpoint(store_, dir, meta);
  }

  /// Rebuilds the model from a checkpoint's stored config, then loads values.
  static std::unique_ptr<NavModel> load(const std::filesystem::path& dir) {
    const json manifest = nn::read_manifest(dir);
    const json& meta = manifest.at("meta");
    auto m = std::make_unique<NavModel>(meta.at("policy_config").get<PolicyConfig>(),
                                        meta.at("init_seed").get<uint64_t>());
    nn::load_checkpoint(m->store_, dir);
    return m;
  }

  /// Copies parameter values from a model with the same config (any precision).
  template <typename U>
  void copy_from(const NavModel<U>& other) {
    store_.copy_values_from(other.store());
  }

 private:
  PolicyConfig cfg_;
  uint64_t seed_;
  nn::ParameterStore<T> store_;
  std::unique_ptr<Policy<T>> policy_;
  std::unique_ptr<AuxHeads<T>> aux_;
};

}  // namespace rimnav

#endif  // RIMNAV_MODEL_HPP_
