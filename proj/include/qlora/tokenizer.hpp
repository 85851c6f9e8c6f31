#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace qlora {

inline constexpr std::uint32_t kBos = 256;
inline constexpr std::uint32_t kEos = 257;
inline constexpr std::uint32_t kPad = 258;
inline constexpr std::size_t kVocabSize = 259;

/// Byte-level token ids with a parallel flag marking supervised (answer) targets.
struct TokenSeq {
    std::vector<std::uint32_t> ids;
    std::vector<bool> loss_mask;

    std::size_t size() const noexcept { return ids.size(); }
    bool operator==(const TokenSeq&) const = default;
};

/// BOS + bytes + EOS, nothing supervised.
inline TokenSeq tokenize(std::string_view text) {
    TokenSeq seq;
    seq.ids.reserve(text.size() + 2);
    seq.ids.push_back(kBos);
    for (unsigned char c : text) seq.ids.push_back(c);
    seq.ids.push_back(kEos);
    seq.loss_mask.assign(seq.ids.size(), false);
    return seq;
}

/// BOS + prompt bytes, no EOS; the starting point for generation.
inline std::vector<std::uint32_t> encode_prompt(std::string_view prompt) {
    std::vector<std::uint32_t> ids;
    ids.reserve(prompt.size() + 1);
    ids.push_back(kBos);
    for (unsigned char c : prompt) ids.push_back(c);
    return ids;
}

/// BOS + prompt + completion + EOS with the loss on the completion bytes and the EOS.
inline TokenSeq tokenize_pair(std::string_view prompt, std::string_view completion) {
    TokenSeq seq;
    seq.ids = encode_prompt(prompt);
    seq.loss_mask.assign(seq.ids.size(), false);
    for (unsigned char c : completion) {
        seq.ids.push_back(c);
        seq.loss_mask.push_back(true);
    }
    seq.ids.push_back(kEos);
    seq.loss_mask.push_back(true);
    return seq;
}

/// Drops BOS/EOS/PAD and concatenates the raw bytes.
inline std::string detokenize(const std::vector<std::uint32_t>& ids) {
    std::string out;
    out.reserve(ids.size());
    for (auto id : ids)
        if (id < 256) out.push_back(static_cast<char>(id));
    return out;
}

}  // namespace qlora
