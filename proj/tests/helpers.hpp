#pragma once

#include "hc/harness.hpp"

#include <cstdlib>
#include <filesystem>
#include <optional>
#include <string>

namespace hc::test {

// Loads the reference checkpoint + tokenizer once per process. Returns
// nullptr when the cache is cold and the hub unreachable, so model-dependent
// tests can skip instead of fail.
inline const harness::Assets* shared_assets() {
    static const std::optional<harness::Assets> assets = []() -> std::optional<harness::Assets> {
        try {
            harness::ExperimentConfig cfg;
            return harness::load_assets(cfg);
        } catch (const std::exception&) {
            return std::nullopt;
        }
    }();
    return assets ? &*assets : nullptr;
}

inline std::filesystem::path fixtures_dir() {
    if (const char* d = std::getenv("HC_FIXTURES_DIR"); d != nullptr && *d != '\0')
        return {d};
    return hc::model::default_cache_dir() / "fixtures";
}

inline std::filesystem::path test_data_dir() { return {HC_TEST_DATA_DIR}; }

}  // namespace hc::test

#define HC_REQUIRE_MODEL(assets)                                        \
    const auto* assets = hc::test::shared_assets();                     \
    if (assets == nullptr) {                                            \
        MESSAGE("model assets unavailable (cold cache, no hub); skipping"); \
        return;                                                         \
    }
