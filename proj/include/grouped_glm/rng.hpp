#pragma once

#include <array>
#include <cstdint>

namespace grouped_glm {

/// Philox-4x32-10 block function.
std::array<std::uint32_t, 4> philox4x32_10(std::array<std::uint32_t, 4> counter, std::array<std::uint32_t, 2> key);

/// What a random stream is used for; part of the stream identity so that,
/// e.g., bootstrap draws never overlap data draws.
enum class StreamRole : std::uint32_t { Data = 1, TestData = 2, Bootstrap = 3, Misc = 4 };

/// Counter-based engine: the stream is fixed by (seed, index, role) and the
/// counter advances per block of four 32-bit outputs. Satisfies
/// UniformRandomBitGenerator, so it plugs into Boost.Random distributions.
class CounterRng {
public:
    using result_type = std::uint32_t;

    CounterRng(std::uint64_t seed, std::uint64_t index, StreamRole role = StreamRole::Data);

    static constexpr result_type min() { return 0; }
    static constexpr result_type max() { return 0xffffffffu; }
    result_type operator()();

private:
    std::array<std::uint32_t, 2> key_{};
    std::array<std::uint32_t, 4> counter_{};
    std::array<std::uint32_t, 4> block_{};
    int next_ = 4;
};

/// SplitMix64 finaliser, used to derive keys.
std::uint64_t mix64(std::uint64_t x);

}  // namespace grouped_glm
