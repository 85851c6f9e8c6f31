#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "qlora/error.hpp"

namespace qlora::io {

static_assert(std::endian::native == std::endian::little,
              "checkpoint codecs assume a little-endian host");

class ByteWriter {
public:
    void magic(std::string_view tag) { bytes_.insert(bytes_.end(), tag.begin(), tag.end()); }
    void u8(std::uint8_t v) { bytes_.push_back(v); }
    void u32(std::uint32_t v) {
        for (int i = 0; i < 4; ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
    void f32(double v) { f32(static_cast<float>(v)); }
    void raw(std::span<const std::uint8_t> data) {
        bytes_.insert(bytes_.end(), data.begin(), data.end());
    }

    const std::vector<std::uint8_t>& bytes() const noexcept { return bytes_; }
    std::vector<std::uint8_t> take() { return std::move(bytes_); }

private:
    std::vector<std::uint8_t> bytes_;
};

class ByteReader {
public:
    explicit ByteReader(std::span<const std::uint8_t> data) : data_(data) {}

    void expect_magic(std::string_view tag) {
        need(tag.size(), "magic");
        if (std::memcmp(data_.data() + pos_, tag.data(), tag.size()) != 0) {
            throw ValidationError("bad magic at offset " + std::to_string(pos_) + ": expected \"" +
                                  std::string(tag) + "\"");
        }
        pos_ += tag.size();
    }
    std::uint8_t u8() {
        need(1, "u8");
        return data_[pos_++];
    }
    std::uint32_t u32() {
        need(4, "u32");
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(data_[pos_ + i]) << (8 * i);
        pos_ += 4;
        return v;
    }
    float f32() { return std::bit_cast<float>(u32()); }
    std::span<const std::uint8_t> raw(std::size_t n) {
        need(n, "payload");
        auto out = data_.subspan(pos_, n);
        pos_ += n;
        return out;
    }

    std::size_t position() const noexcept { return pos_; }
    bool at_end() const noexcept { return pos_ == data_.size(); }

private:
    void need(std::size_t n, const char* what) const {
        if (data_.size() - pos_ < n) {
            throw ValidationError(std::string("truncated input reading ") + what + " at offset " +
                                  std::to_string(pos_));
        }
    }

    std::span<const std::uint8_t> data_;
    std::size_t pos_ = 0;
};

inline std::vector<std::uint8_t> read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ValidationError("cannot open " + path);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::string& path, std::span<const std::uint8_t> bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + path);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("write failed for " + path);
}

}  // namespace qlora::io
