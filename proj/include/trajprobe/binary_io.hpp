#pragma once

// Little-endian scalar encoding and IEEE binary16 conversion shared by the
// trace container and the binary feature table.

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>
#include <type_traits>

#include "trajprobe/errors.hpp"

namespace trajprobe::io {

template <class UInt>
constexpr UInt byteswap(UInt v) noexcept {
    static_assert(std::is_unsigned_v<UInt>);
    UInt out = 0;
    for (std::size_t i = 0; i < sizeof(UInt); ++i) {
        out = static_cast<UInt>((out << 8) | ((v >> (8 * i)) & 0xFFu));
    }
    return out;
}

template <class UInt>
constexpr UInt to_little(UInt v) noexcept {
    if constexpr (std::endian::native == std::endian::little) {
        return v;
    } else {
        return byteswap(v);
    }
}

template <class UInt>
inline void put_le(std::ostream& os, UInt v) {
    const UInt le = to_little(v);
    os.write(reinterpret_cast<const char*>(&le), sizeof(UInt));
}

template <class UInt>
inline UInt get_le(std::istream& is) {
    UInt le{};
    is.read(reinterpret_cast<char*>(&le), sizeof(UInt));
    if (is.gcount() != static_cast<std::streamsize>(sizeof(UInt))) {
        throw FormatError("unexpected end of file");
    }
    return to_little(le);
}

inline void put_f32(std::ostream& os, float v) { put_le(os, std::bit_cast<std::uint32_t>(v)); }
inline void put_f64(std::ostream& os, double v) { put_le(os, std::bit_cast<std::uint64_t>(v)); }

template <class UInt>
inline UInt load_le(const unsigned char* p) noexcept {
    UInt v{};
    std::memcpy(&v, p, sizeof(UInt));
    return to_little(v);
}

/// Round-to-nearest-even float -> binary16. Overflow saturates to infinity.
inline std::uint16_t float_to_half(float value) noexcept {
    const std::uint32_t bits = std::bit_cast<std::uint32_t>(value);
    const std::uint32_t sign = (bits >> 16) & 0x8000u;
    const std::uint32_t exp = (bits >> 23) & 0xFFu;
    std::uint32_t mant = bits & 0x7FFFFFu;

    if (exp == 0xFFu) {
        // inf or nan; keep nan quiet
        return static_cast<std::uint16_t>(sign | 0x7C00u | (mant ? 0x200u : 0u));
    }
    const int e = static_cast<int>(exp) - 127 + 15;
    if (e >= 0x1F) {
        return static_cast<std::uint16_t>(sign | 0x7C00u);
    }
    if (e <= 0) {
        if (e < -10) {
            return static_cast<std::uint16_t>(sign);
        }
        mant |= 0x800000u;
        const int shift = 14 - e;
        std::uint32_t half_mant = mant >> shift;
        const std::uint32_t rem = mant & ((1u << shift) - 1u);
        const std::uint32_t halfway = 1u << (shift - 1);
        if (rem > halfway || (rem == halfway && (half_mant & 1u))) {
            ++half_mant;
        }
        return static_cast<std::uint16_t>(sign | half_mant);
    }
    std::uint32_t half = sign | (static_cast<std::uint32_t>(e) << 10) | (mant >> 13);
    const std::uint32_t rem = mant & 0x1FFFu;
    if (rem > 0x1000u || (rem == 0x1000u && (half & 1u))) {
        ++half; // carry into the exponent is the correct rounding
    }
    return static_cast<std::uint16_t>(half);
}

inline float half_to_float(std::uint16_t h) noexcept {
    const std::uint32_t sign = (static_cast<std::uint32_t>(h) & 0x8000u) << 16;
    const std::uint32_t exp = (h >> 10) & 0x1Fu;
    std::uint32_t mant = h & 0x3FFu;
    std::uint32_t bits = 0;
    if (exp == 0) {
        if (mant == 0) {
            bits = sign;
        } else {
            int e = -1;
            do {
                ++e;
                mant <<= 1;
            } while ((mant & 0x400u) == 0);
            bits = sign | (static_cast<std::uint32_t>(127 - 15 - e) << 23) | ((mant & 0x3FFu) << 13);
        }
    } else if (exp == 0x1Fu) {
        bits = sign | 0x7F800000u | (mant << 13);
    } else {
        bits = sign | ((exp + 127 - 15) << 23) | (mant << 13);
    }
    return std::bit_cast<float>(bits);
}

/// 8-byte magic, u64 little-endian JSON length, JSON text. Returns the JSON.
inline std::string read_framed_header(std::istream& is, const std::array<char, 8>& magic) {
    std::array<char, 8> got{};
    is.read(got.data(), got.size());
    if (is.gcount() != 8 || got != magic) {
        throw FormatError("bad magic");
    }
    const auto len = get_le<std::uint64_t>(is);
    if (len > (std::uint64_t{1} << 40)) {
        throw FormatError("implausible manifest length");
    }
    std::string text(static_cast<std::size_t>(len), '\0');
    is.read(text.data(), static_cast<std::streamsize>(len));
    if (is.gcount() != static_cast<std::streamsize>(len)) {
        throw FormatError("truncated manifest");
    }
    return text;
}

inline void write_framed_header(std::ostream& os, const std::array<char, 8>& magic, const std::string& json) {
    os.write(magic.data(), magic.size());
    put_le<std::uint64_t>(os, json.size());
    os.write(json.data(), static_cast<std::streamsize>(json.size()));
}

} // namespace trajprobe::io
