#pragma once

#include "links/geometry.hpp"

#include <filesystem>
#include <optional>
#include <string>

namespace links::render {

/// Static skeleton drawing; y grows downwards as in image coordinates.
std::string svg_2d(const Pose2D& pose, const SkeletonTopology& topo, const std::string& title = {});

/// Front (x, y) and side (z, y) panels; `reference` is drawn dashed underneath.
std::string svg_3d(const Pose3D& pose, const SkeletonTopology& topo, const std::optional<Pose3D>& reference = {},
                   const std::string& title = {});

void write_text(const std::filesystem::path& path, const std::string& text);

} // namespace links::render
