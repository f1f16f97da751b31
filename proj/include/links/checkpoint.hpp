#pragma once

#include "links/nn.hpp"

#include <json.hpp>

#include <filesystem>
#include <string>

namespace links {

using Json = nlohmann::json;

inline constexpr int kCheckpointFormatVersion = 1;

Json matrix_to_json(const nn::Matrix& m);
nn::Matrix matrix_from_json(const Json& j);

/// Nested arrays, one entry per parameter tensor in `Module::params()` order.
Json params_to_json(const nn::Module& module);
/// Shapes must match the module's current architecture.
void params_from_json(nn::Module& module, const Json& j);

/// Reads a whole JSON document; throws ConfigError when missing, DataError when malformed.
Json read_json_file(const std::filesystem::path& path);
/// Writes with full round-trip double precision.
void write_json_file(const std::filesystem::path& path, const Json& j);

/// Checks format_version and kind; throws DataError otherwise.
void check_header(const Json& j, const std::string& kind);

} // namespace links
