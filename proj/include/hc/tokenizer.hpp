#pragma once

#include "hc/common.hpp"

#include <filesystem>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace hc::bpe {

// Token string <-> id tables plus the byte <-> printable-unicode remap that
// byte-level BPE runs on.
class Vocab {
  public:
    static Vocab from_json_file(const std::filesystem::path& vocab_json);

    int size() const { return static_cast<int>(id_to_token_.size()); }
    int id_of(const std::string& token) const;           // -1 if absent
    const std::string& token_of(int id) const;           // throws on out-of-range
    bool has(const std::string& token) const { return token_to_id_.count(token) != 0; }

    // byte value -> remapped codepoint (as UTF-8 string) and back.
    static const std::array<std::string, 256>& byte_to_unicode();
    static const std::unordered_map<uint32_t, uint8_t>& unicode_to_byte();

  private:
    std::unordered_map<std::string, int> token_to_id_;
    std::vector<std::string> id_to_token_;
};

// Ordered merge list; rank = position. Lower rank merges first.
class MergeRules {
  public:
    static MergeRules from_text_file(const std::filesystem::path& merges_txt);

    // Rank of the pair (a, b), or -1 when the pair never merges.
    int rank(std::string_view a, std::string_view b) const;
    size_t size() const { return n_rules_; }

  private:
    std::unordered_map<std::string, int> ranks_;  // key: "a b"
    size_t n_rules_ = 0;
};

class Tokenizer {
  public:
    Tokenizer(Vocab vocab, MergeRules merges);
    static Tokenizer from_files(const std::filesystem::path& vocab_json,
                                const std::filesystem::path& merges_txt);

    std::vector<int> encode(std::string_view text) const;
    std::string decode(const std::vector<int>& ids) const;
    bool is_single_token(std::string_view word) const;

    const Vocab& vocab() const { return vocab_; }

    // The pre-tokenizer split, exposed for tests: contractions, space-prefixed
    // letter/number/punctuation runs, then whitespace runs that donate their
    // final space to a following word.
    static std::vector<std::string> pretokenize(std::string_view text);

  private:
    std::vector<std::string> bpe_symbols(const std::string& pretoken) const;

    Vocab vocab_;
    MergeRules merges_;
    mutable std::unordered_map<std::string, std::vector<int>> cache_;
};

}  // namespace hc::bpe
