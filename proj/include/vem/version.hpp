#pragma once

namespace vem {
inline constexpr const char* kVersion = "0.1.0";
}
