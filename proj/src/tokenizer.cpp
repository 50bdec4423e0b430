#include "hc/tokenizer.hpp"

#include "hc/unicode_tables.hpp"

#include <json.hpp>

#include <algorithm>
#include <array>
#include <fstream>

namespace hc::bpe {

using nlohmann::json;

namespace {

// --- UTF-8 helpers ----------------------------------------------------------

void append_utf8(std::string& out, uint32_t cp) {
    if (cp < 0x80) {
        out.push_back(static_cast<char>(cp));
    } else if (cp < 0x800) {
        out.push_back(static_cast<char>(0xC0 | (cp >> 6)));
        out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    } else if (cp < 0x10000) {
        out.push_back(static_cast<char>(0xE0 | (cp >> 12)));
        out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
        out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    } else {
        out.push_back(static_cast<char>(0xF0 | (cp >> 18)));
        out.push_back(static_cast<char>(0x80 | ((cp >> 12) & 0x3F)));
        out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
        out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    }
}

// Decoded codepoint plus its byte extent in the source. Invalid bytes decode
// one at a time with `valid = false` so the byte stream is preserved exactly.
struct Cp {
    uint32_t value;
    size_t begin, end;
    bool valid;
};

std::vector<Cp> decode_utf8(std::string_view s) {
    std::vector<Cp> cps;
    cps.reserve(s.size());
    size_t i = 0;
    while (i < s.size()) {
        const auto b0 = static_cast<uint8_t>(s[i]);
        size_t len = 0;
        uint32_t cp = 0;
        if (b0 < 0x80) {
            len = 1;
            cp = b0;
        } else if ((b0 & 0xE0) == 0xC0) {
            len = 2;
            cp = b0 & 0x1F;
        } else if ((b0 & 0xF0) == 0xE0) {
            len = 3;
            cp = b0 & 0x0F;
        } else if ((b0 & 0xF8) == 0xF0) {
            len = 4;
            cp = b0 & 0x07;
        }
        bool ok = len > 0 && i + len <= s.size();
        if (ok) {
            for (size_t k = 1; k < len; ++k) {
                const auto bk = static_cast<uint8_t>(s[i + k]);
                if ((bk & 0xC0) != 0x80) {
                    ok = false;
                    break;
                }
                cp = (cp << 6) | (bk & 0x3F);
            }
        }
        if (!ok) {
            cps.push_back({b0, i, i + 1, false});
            ++i;
        } else {
            cps.push_back({cp, i, i + len, true});
            i += len;
        }
    }
    return cps;
}

bool in_ranges(uint32_t cp, const detail::CpRange* ranges, size_t n) {
    size_t lo = 0, hi = n;
    while (lo < hi) {
        const size_t mid = (lo + hi) / 2;
        if (cp > ranges[mid].hi)
            lo = mid + 1;
        else if (cp < ranges[mid].lo)
            hi = mid;
        else
            return true;
    }
    return false;
}

bool is_letter(const Cp& c) {
    return c.valid && in_ranges(c.value, detail::kLetterRanges, std::size(detail::kLetterRanges));
}
bool is_number(const Cp& c) {
    return c.valid && in_ranges(c.value, detail::kNumberRanges, std::size(detail::kNumberRanges));
}
bool is_space(const Cp& c) {
    return c.valid && in_ranges(c.value, detail::kSpaceRanges, std::size(detail::kSpaceRanges));
}
bool is_other(const Cp& c) { return !is_letter(c) && !is_number(c) && !is_space(c); }

}  // namespace

// --- Vocab -------------------------------------------------------------------

const std::array<std::string, 256>& Vocab::byte_to_unicode() {
    static const std::array<std::string, 256> table = [] {
        std::array<std::string, 256> t;
        auto direct = [](int b) {
            return (b >= '!' && b <= '~') || (b >= 0xA1 && b <= 0xAC) || (b >= 0xAE && b <= 0xFF);
        };
        int n = 0;
        for (int b = 0; b < 256; ++b) {
            std::string s;
            if (direct(b))
                append_utf8(s, static_cast<uint32_t>(b));
            else
                append_utf8(s, static_cast<uint32_t>(256 + n++));
            t[static_cast<size_t>(b)] = std::move(s);
        }
        return t;
    }();
    return table;
}

const std::unordered_map<uint32_t, uint8_t>& Vocab::unicode_to_byte() {
    static const std::unordered_map<uint32_t, uint8_t> table = [] {
        std::unordered_map<uint32_t, uint8_t> t;
        const auto& fwd = byte_to_unicode();
        for (int b = 0; b < 256; ++b) {
            const auto cps = decode_utf8(fwd[static_cast<size_t>(b)]);
            t.emplace(cps.at(0).value, static_cast<uint8_t>(b));
        }
        return t;
    }();
    return table;
}

Vocab Vocab::from_json_file(const std::filesystem::path& vocab_json) {
    std::ifstream in(vocab_json);
    if (!in) throw Error("cannot open vocab file: " + vocab_json.string());
    json j = json::parse(in);
    Vocab v;
    v.id_to_token_.resize(j.size());
    for (auto& [token, id] : j.items()) {
        const int i = id.get<int>();
        if (i < 0 || i >= static_cast<int>(j.size()))
            throw Error("vocab id out of range: " + std::to_string(i));
        if (!v.id_to_token_[static_cast<size_t>(i)].empty())
            throw Error("duplicate vocab id: " + std::to_string(i));
        v.id_to_token_[static_cast<size_t>(i)] = token;
        v.token_to_id_.emplace(token, i);
    }
    if (v.token_to_id_.size() != v.id_to_token_.size())
        throw Error("vocab token -> id map is not bijective");
    return v;
}

int Vocab::id_of(const std::string& token) const {
    auto it = token_to_id_.find(token);
    return it == token_to_id_.end() ? -1 : it->second;
}

const std::string& Vocab::token_of(int id) const {
    if (id < 0 || id >= size())
        throw RangeError("token id " + std::to_string(id) + " out of range [0, " +
                         std::to_string(size()) + ")");
    return id_to_token_[static_cast<size_t>(id)];
}

// --- MergeRules --------------------------------------------------------------

MergeRules MergeRules::from_text_file(const std::filesystem::path& merges_txt) {
    std::ifstream in(merges_txt);
    if (!in) throw Error("cannot open merges file: " + merges_txt.string());
    MergeRules m;
    std::string line;
    int rank = 0;
    bool first = true;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (first && line.rfind("#version", 0) == 0) {
            first = false;
            continue;
        }
        first = false;
        if (line.empty()) continue;
        if (!m.ranks_.emplace(line, rank).second)
            throw Error("duplicate merge rule at rank " + std::to_string(rank) + ": " + line);
        ++rank;
    }
    m.n_rules_ = static_cast<size_t>(rank);
    return m;
}

int MergeRules::rank(std::string_view a, std::string_view b) const {
    std::string key;
    key.reserve(a.size() + b.size() + 1);
    key.append(a);
    key.push_back(' ');
    key.append(b);
    auto it = ranks_.find(key);
    return it == ranks_.end() ? -1 : it->second;
}

// --- Tokenizer ---------------------------------------------------------------

Tokenizer::Tokenizer(Vocab vocab, MergeRules merges)
    : vocab_(std::move(vocab)), merges_(std::move(merges)) {}

Tokenizer Tokenizer::from_files(const std::filesystem::path& vocab_json,
                                const std::filesystem::path& merges_txt) {
    return Tokenizer(Vocab::from_json_file(vocab_json), MergeRules::from_text_file(merges_txt));
}

std::vector<std::string> Tokenizer::pretokenize(std::string_view text) {
    const std::vector<Cp> cps = decode_utf8(text);
    const size_t n = cps.size();
    std::vector<std::string> out;

    auto slice = [&](size_t a, size_t b) {  // codepoint indices -> source bytes
        return std::string(text.substr(cps[a].begin, cps[b - 1].end - cps[a].begin));
    };
    auto is_sp = [&](size_t i) { return cps[i].valid && cps[i].value == ' '; };

    size_t i = 0;
    while (i < n) {
        // Contractions, ASCII apostrophe only, case-sensitive.
        if (cps[i].valid && cps[i].value == '\'' && i + 1 < n && cps[i + 1].valid) {
            const uint32_t c1 = cps[i + 1].value;
            size_t len = 0;
            if (c1 == 's' || c1 == 't' || c1 == 'm' || c1 == 'd') len = 2;
            if (i + 2 < n && cps[i + 2].valid) {
                const uint32_t c2 = cps[i + 2].value;
                if ((c1 == 'r' && c2 == 'e') || (c1 == 'v' && c2 == 'e') ||
                    (c1 == 'l' && c2 == 'l'))
                    len = 3;
            }
            if (len > 0) {
                out.push_back(slice(i, i + len));
                i += len;
                continue;
            }
        }

        auto run = [&](auto pred) {
            const size_t start = i;
            if (is_sp(i) && i + 1 < n && pred(cps[i + 1])) ++i;  // optional leading space
            while (i < n && pred(cps[i])) ++i;
            out.push_back(slice(start, i));
        };

        if (is_letter(cps[i]) || (is_sp(i) && i + 1 < n && is_letter(cps[i + 1]))) {
            run([](const Cp& c) { return is_letter(c); });
        } else if (is_number(cps[i]) || (is_sp(i) && i + 1 < n && is_number(cps[i + 1]))) {
            run([](const Cp& c) { return is_number(c); });
        } else if (is_other(cps[i]) || (is_sp(i) && i + 1 < n && is_other(cps[i + 1]))) {
            run([](const Cp& c) { return is_other(c); });
        } else {
            // Whitespace run. When followed by a non-space, the final
            // whitespace char is left for the next match (the (?!\S) rule).
            size_t j = i;
            while (j < n && is_space(cps[j])) ++j;
            if (j == n) {
                out.push_back(slice(i, j));
                i = j;
            } else if (j - i > 1) {
                out.push_back(slice(i, j - 1));
                i = j - 1;
            } else {
                // Single non-' ' whitespace char before a non-space.
                out.push_back(slice(i, j));
                i = j;
            }
        }
    }
    return out;
}

std::vector<std::string> Tokenizer::bpe_symbols(const std::string& pretoken) const {
    // One remapped char per byte.
    std::vector<std::string> word;
    word.reserve(pretoken.size());
    const auto& b2u = Vocab::byte_to_unicode();
    for (unsigned char b : pretoken) word.push_back(b2u[b]);

    while (word.size() >= 2) {
        int best_rank = -1;
        size_t best_i = 0;
        for (size_t k = 0; k + 1 < word.size(); ++k) {
            const int r = merges_.rank(word[k], word[k + 1]);
            if (r >= 0 && (best_rank < 0 || r < best_rank)) {
                best_rank = r;
                best_i = k;
            }
        }
        if (best_rank < 0) break;
        // Merge every occurrence of the winning pair, left to right.
        const std::string a = word[best_i], b = word[best_i + 1];
        std::vector<std::string> next;
        next.reserve(word.size());
        for (size_t k = 0; k < word.size();) {
            if (k + 1 < word.size() && word[k] == a && word[k + 1] == b) {
                next.push_back(a + b);
                k += 2;
            } else {
                next.push_back(word[k]);
                k += 1;
            }
        }
        word = std::move(next);
    }
    return word;
}

std::vector<int> Tokenizer::encode(std::string_view text) const {
    std::vector<int> ids;
    for (const std::string& pre : pretokenize(text)) {
        auto cached = cache_.find(pre);
        if (cached != cache_.end()) {
            ids.insert(ids.end(), cached->second.begin(), cached->second.end());
            continue;
        }
        std::vector<int> piece_ids;
        for (const std::string& sym : bpe_symbols(pre)) {
            const int id = vocab_.id_of(sym);
            if (id < 0) throw Error("BPE symbol missing from vocab: '" + sym + "'");
            piece_ids.push_back(id);
        }
        if (pre.size() <= 64) cache_.emplace(pre, piece_ids);
        ids.insert(ids.end(), piece_ids.begin(), piece_ids.end());
    }
    return ids;
}

std::string Tokenizer::decode(const std::vector<int>& ids) const {
    std::string bytes;
    const auto& u2b = Vocab::unicode_to_byte();
    for (int id : ids) {
        const std::string& tok = vocab_.token_of(id);
        for (const Cp& cp : decode_utf8(tok)) {
            auto it = u2b.find(cp.value);
            if (it == u2b.end())
                throw Error("token contains a codepoint outside the byte alphabet");
            bytes.push_back(static_cast<char>(it->second));
        }
    }
    return bytes;
}

bool Tokenizer::is_single_token(std::string_view word) const {
    return encode(word).size() == 1;
}

}  // namespace hc::bpe
