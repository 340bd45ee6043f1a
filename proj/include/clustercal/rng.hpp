#pragma once

// Philox4x32-10 counter-based generator (Salmon et al., SC'11) with
// substreams addressed by (seed, replicate, stage).

#include <array>
#include <cstdint>
#include <limits>

namespace clustercal {

/// Stage tags used to carve independent substreams out of one seed.
enum class Stage : std::uint32_t {
    population = 1,
    sampling = 2,
    bootstrap = 3,
    instance = 4,
};

class Philox4x32 {
public:
    using result_type = std::uint64_t;
    using Block = std::array<std::uint32_t, 4>;

    Philox4x32(std::uint64_t seed, std::uint32_t replicate = 0, std::uint32_t stage = 0)
        : key_{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32)},
          replicate_(replicate), stage_(stage) {}

    Philox4x32(std::uint64_t seed, std::uint32_t replicate, Stage stage)
        : Philox4x32(seed, replicate, static_cast<std::uint32_t>(stage)) {}

    static constexpr result_type min() { return 0; }
    static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }

    result_type operator()() {
        if (used_ == 2) {
            block_ = bijection({static_cast<std::uint32_t>(position_), static_cast<std::uint32_t>(position_ >> 32),
                                replicate_, stage_},
                               key_);
            ++position_;
            used_ = 0;
        }
        const std::size_t k = 2 * used_++;
        return (static_cast<std::uint64_t>(block_[k + 1]) << 32) | block_[k];
    }

    void discard(std::uint64_t z) {
        for (std::uint64_t i = 0; i < z; ++i) (*this)();
    }

    /// The raw keyed bijection on one 128-bit counter.
    static Block bijection(Block ctr, std::array<std::uint32_t, 2> key) {
        constexpr std::uint32_t M0 = 0xD2511F53u, M1 = 0xCD9E8D57u;
        constexpr std::uint32_t W0 = 0x9E3779B9u, W1 = 0xBB67AE85u;
        for (int r = 0; r < 10; ++r) {
            const std::uint64_t p0 = static_cast<std::uint64_t>(M0) * ctr[0];
            const std::uint64_t p1 = static_cast<std::uint64_t>(M1) * ctr[2];
            ctr = {static_cast<std::uint32_t>(p1 >> 32) ^ ctr[1] ^ key[0], static_cast<std::uint32_t>(p1),
                   static_cast<std::uint32_t>(p0 >> 32) ^ ctr[3] ^ key[1], static_cast<std::uint32_t>(p0)};
            key[0] += W0;
            key[1] += W1;
        }
        return ctr;
    }

private:
    std::array<std::uint32_t, 2> key_;
    std::uint32_t replicate_;
    std::uint32_t stage_;
    std::uint64_t position_ = 0;
    Block block_{};
    std::size_t used_ = 2;
};

/// Uniform double in [0, 1) with 53 random bits.
inline double uniform01(Philox4x32& g) { return static_cast<double>(g() >> 11) * 0x1.0p-53; }

} // namespace clustercal
