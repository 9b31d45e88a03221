#include "chorus/tokenizer.hpp"

#include <algorithm>
#include <cctype>

#include "chorus/error.hpp"

namespace chorus::text {

namespace {

bool letters_only(std::string_view s) {
    return !s.empty() && std::all_of(s.begin(), s.end(), [](unsigned char c) {
        return std::isalpha(c) != 0;
    });
}

}  // namespace

Tokenizer::Tokenizer(std::vector<std::string> specials, std::vector<std::string> pieces) {
    specials_.push_back(pad_text);
    specials_.push_back(end_of_text);
    for (auto& s : specials) {
        if (s.empty()) throw Error::validation("tokenizer: empty special token");
        if (std::find(specials_.begin(), specials_.end(), s) == specials_.end()) {
            specials_.push_back(std::move(s));
        }
    }
    n_specials_ = static_cast<int>(specials_.size());
    for (int i = 0; i < n_specials_; ++i) {
        token_texts_.push_back(specials_[i]);
        special_ids_.emplace(specials_[i], i);
    }
    for (int b = 0; b < 256; ++b) {
        token_texts_.push_back(std::string(1, static_cast<char>(b)));
    }
    for (auto& p : pieces) {
        if (!letters_only(p) || p.size() < 2) {
            throw Error::validation("tokenizer: piece '" + p + "' must be >= 2 ASCII letters");
        }
        if (piece_ids_.count(p)) continue;
        piece_ids_.emplace(p, static_cast<int>(token_texts_.size()));
        max_piece_len_ = std::max(max_piece_len_, p.size());
        token_texts_.push_back(p);
        pieces_.push_back(std::move(p));
    }
}

void Tokenizer::encode_chunk(std::string_view chunk, std::vector<int>& out) const {
    std::size_t i = 0;
    while (i < chunk.size()) {
        int matched = -1;
        std::size_t matched_len = 0;
        if (!piece_ids_.empty() && std::isalpha(static_cast<unsigned char>(chunk[i]))) {
            const std::size_t longest = std::min(max_piece_len_, chunk.size() - i);
            for (std::size_t len = longest; len >= 2; --len) {
                auto it = piece_ids_.find(chunk.substr(i, len));
                if (it != piece_ids_.end()) {
                    matched = it->second;
                    matched_len = len;
                    break;
                }
            }
        }
        if (matched >= 0) {
            out.push_back(matched);
            i += matched_len;
        } else {
            out.push_back(n_specials_ + static_cast<unsigned char>(chunk[i]));
            ++i;
        }
    }
}

std::vector<int> Tokenizer::encode(std::string_view text) const {
    std::vector<int> out;
    out.reserve(text.size() / 2 + 1);
    std::size_t chunk_start = 0;
    std::size_t i = 0;
    while (i < text.size()) {
        // Longest special matching at this position wins.
        int special = -1;
        std::size_t special_len = 0;
        for (int s = 0; s < n_specials_; ++s) {
            const std::string& tok = specials_[s];
            if (tok.size() > special_len && text.substr(i, tok.size()) == tok) {
                special = s;
                special_len = tok.size();
            }
        }
        if (special >= 0) {
            encode_chunk(text.substr(chunk_start, i - chunk_start), out);
            out.push_back(special);
            i += special_len;
            chunk_start = i;
        } else {
            ++i;
        }
    }
    encode_chunk(text.substr(chunk_start), out);
    return out;
}

std::string Tokenizer::decode(std::span<const int> ids) const {
    std::string out;
    for (int id : ids) out += token_text(id);
    return out;
}

const std::string& Tokenizer::token_text(int id) const {
    if (id < 0 || id >= vocab_size()) {
        throw Error::contract("tokenizer: token id " + std::to_string(id) + " out of range");
    }
    return token_texts_[static_cast<std::size_t>(id)];
}

std::optional<int> Tokenizer::special_id(std::string_view text) const {
    auto it = special_ids_.find(text);
    if (it == special_ids_.end()) return std::nullopt;
    return it->second;
}

nlohmann::json Tokenizer::to_json() const {
    std::vector<std::string> extra(specials_.begin() + 2, specials_.end());
    return nlohmann::json{{"specials", extra}, {"pieces", pieces_}};
}

Tokenizer Tokenizer::from_json(const nlohmann::json& j) {
    return Tokenizer(j.at("specials").get<std::vector<std::string>>(),
                     j.at("pieces").get<std::vector<std::string>>());
}

std::vector<std::string> Tokenizer::collect_pieces(const std::vector<std::string>& texts,
                                                   std::size_t max_pieces,
                                                   std::size_t min_count) {
    std::map<std::string, std::size_t> counts;
    for (const auto& text : texts) {
        std::size_t i = 0;
        while (i < text.size()) {
            if (std::isalpha(static_cast<unsigned char>(text[i]))) {
                std::size_t j = i;
                while (j < text.size() && std::isalpha(static_cast<unsigned char>(text[j]))) ++j;
                if (j - i >= 2) counts[text.substr(i, j - i)]++;
                i = j;
            } else {
                ++i;
            }
        }
    }
    std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
    std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });
    std::vector<std::string> pieces;
    for (const auto& [word, count] : ranked) {
        if (count < min_count || pieces.size() >= max_pieces) break;
        pieces.push_back(word);
    }
    return pieces;
}

}  // namespace chorus::text
