#pragma once

#include <array>
#include <cstdint>
#include <string_view>

namespace hsiseg {

inline constexpr int kTumor = 0;
inline constexpr int kHealthy = 1;
inline constexpr int kBackground = 2;
inline constexpr int kNumClasses = 3;

inline constexpr std::array<std::string_view, kNumClasses> kClassNames{"tumor", "healthy",
                                                                       "background"};

// Overlay colors: red, green, blue.
inline constexpr std::array<std::array<std::uint8_t, 3>, kNumClasses> kClassColors{
    {{255, 0, 0}, {0, 255, 0}, {0, 0, 255}}};

}  // namespace hsiseg
