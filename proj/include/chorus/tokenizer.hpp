#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

namespace chorus::text {

// Byte/word-piece hybrid with an explicit special-token table.
//
// Id layout: [specials...][256 byte tokens][pieces...]. Specials act as hard
// split points during encoding (leftmost, longest match), so no piece or byte
// run ever crosses one. Pieces are restricted to ASCII letters, which keeps
// them from crossing '\n'-guarded segment boundaries; everything else falls
// back to single-byte tokens. Encoding is total and decoding is byte-exact.
class Tokenizer {
public:
    static constexpr const char* pad_text = "<pad>";
    static constexpr const char* end_of_text = "<|endoftext|>";

    // `specials` is appended after the two built-ins; duplicates are dropped.
    explicit Tokenizer(std::vector<std::string> specials, std::vector<std::string> pieces = {});

    int vocab_size() const { return static_cast<int>(token_texts_.size()); }
    int pad_id() const { return 0; }
    int end_of_text_id() const { return 1; }

    std::vector<int> encode(std::string_view text) const;
    std::string decode(std::span<const int> ids) const;

    const std::string& token_text(int id) const;
    std::optional<int> special_id(std::string_view text) const;
    bool is_special(int id) const { return id >= 0 && id < n_specials_; }

    const std::vector<std::string>& specials() const { return specials_; }
    const std::vector<std::string>& pieces() const { return pieces_; }

    nlohmann::json to_json() const;
    static Tokenizer from_json(const nlohmann::json& j);

    // Most frequent letter-only words across `texts` (count >= min_count,
    // length >= 2), capped at max_pieces. Deterministic: ties broken by name.
    static std::vector<std::string> collect_pieces(const std::vector<std::string>& texts,
                                                   std::size_t max_pieces,
                                                   std::size_t min_count = 3);

private:
    void encode_chunk(std::string_view chunk, std::vector<int>& out) const;

    std::vector<std::string> specials_;  // user-visible specials incl. built-ins
    std::vector<std::string> pieces_;
    std::vector<std::string> token_texts_;        // id -> text
    std::map<std::string, int, std::less<>> special_ids_;
    std::map<std::string, int, std::less<>> piece_ids_;
    int n_specials_ = 0;
    std::size_t max_piece_len_ = 0;
};

}  // namespace chorus::text
