#pragma once

// Kashmiri Perso-Arabic text normalization and grapheme tokenization.
// Canonical form is fully decomposed (hamza/madda carriers split into base +
// combining mark) so pronunciation-critical diacritics survive as codepoints.

#include <algorithm>
#include <cstdint>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "koshur/common.hpp"

namespace koshur::text {

struct UnmappedNumber : Error {
    UnmappedNumber(const std::string& run, std::size_t begin, std::size_t end)
        : Error("number run \"" + run + "\" exceeds lexicon coverage (bytes " +
                std::to_string(begin) + ".." + std::to_string(end) + ")"),
          run(run), begin(begin), end(end) {}
    std::string run;
    std::size_t begin, end;
};

struct UnknownSymbol : Error {
    explicit UnknownSymbol(const std::string& sym)
        : Error("symbol not in vocabulary: \"" + sym + "\""), symbol(sym) {}
    std::string symbol;
};

struct InvalidId : Error {
    explicit InvalidId(int id) : Error("invalid symbol id " + std::to_string(id)), id(id) {}
    int id;
};

// ---------------------------------------------------------------------------
// UTF-8

inline std::vector<char32_t> utf8_decode(const std::string& s) {
    std::vector<char32_t> out;
    std::size_t i = 0;
    while (i < s.size()) {
        unsigned char c = static_cast<unsigned char>(s[i]);
        char32_t cp;
        int n;
        if (c < 0x80) { cp = c; n = 1; }
        else if ((c >> 5) == 0x6) { cp = c & 0x1f; n = 2; }
        else if ((c >> 4) == 0xe) { cp = c & 0x0f; n = 3; }
        else if ((c >> 3) == 0x1e) { cp = c & 0x07; n = 4; }
        else throw Error("invalid UTF-8 lead byte");
        if (i + n > s.size()) throw Error("truncated UTF-8 sequence");
        for (int k = 1; k < n; ++k) {
            unsigned char cc = static_cast<unsigned char>(s[i + k]);
            if ((cc >> 6) != 0x2) throw Error("invalid UTF-8 continuation byte");
            cp = (cp << 6) | (cc & 0x3f);
        }
        out.push_back(cp);
        i += n;
    }
    return out;
}

inline void utf8_append(std::string& out, char32_t cp) {
    if (cp < 0x80) {
        out.push_back(static_cast<char>(cp));
    } else if (cp < 0x800) {
        out.push_back(static_cast<char>(0xc0 | (cp >> 6)));
        out.push_back(static_cast<char>(0x80 | (cp & 0x3f)));
    } else if (cp < 0x10000) {
        out.push_back(static_cast<char>(0xe0 | (cp >> 12)));
        out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3f)));
        out.push_back(static_cast<char>(0x80 | (cp & 0x3f)));
    } else {
        out.push_back(static_cast<char>(0xf0 | (cp >> 18)));
        out.push_back(static_cast<char>(0x80 | ((cp >> 12) & 0x3f)));
        out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3f)));
        out.push_back(static_cast<char>(0x80 | (cp & 0x3f)));
    }
}

inline std::string utf8_encode(const std::vector<char32_t>& cps) {
    std::string out;
    for (char32_t cp : cps) utf8_append(out, cp);
    return out;
}

// ---------------------------------------------------------------------------
// Vocab

struct Vocab {
    std::vector<std::string> symbols;          // id -> symbol
    std::map<std::string, int> index;          // symbol -> id
    std::set<std::string> diacritics;          // combining-mark symbols
    int pad_id = 0, bos_id = 1, eos_id = 2;

    // derived lookups
    std::set<char32_t> diacritic_cps;          // codepoints of diacritic symbols
    std::set<char32_t> codepoints;             // every codepoint used by any symbol
    std::size_t max_symbol_len = 1;            // longest symbol, in codepoints

    bool has(const std::string& sym) const { return index.count(sym) != 0; }
    std::size_t size() const { return symbols.size(); }
};

inline const char* kPadSym = "<pad>";
inline const char* kBosSym = "<bos>";
inline const char* kEosSym = "<eos>";

// Each corpus string is one candidate symbol. Symbols are deduplicated and
// sorted by codepoint sequence; the three reserved symbols take ids 0..2.
inline Vocab build_vocab(const std::vector<std::string>& corpus_texts,
                         const std::set<std::string>& diacritic_list) {
    std::set<std::string> uniq(corpus_texts.begin(), corpus_texts.end());
    uniq.erase("");
    uniq.erase(kPadSym);
    uniq.erase(kBosSym);
    uniq.erase(kEosSym);

    Vocab v;
    v.symbols = {kPadSym, kBosSym, kEosSym};
    // std::set iterates in byte-lexicographic order, which for valid UTF-8
    // equals codepoint-sequence order.
    for (const auto& s : uniq) v.symbols.push_back(s);
    for (std::size_t i = 0; i < v.symbols.size(); ++i)
        v.index[v.symbols[i]] = static_cast<int>(i);

    for (const auto& d : diacritic_list) {
        if (!v.has(d)) continue;
        v.diacritics.insert(d);
        auto cps = utf8_decode(d);
        if (cps.size() != 1) throw Error("diacritic symbol must be a single codepoint: " + d);
        v.diacritic_cps.insert(cps[0]);
    }
    for (std::size_t i = 3; i < v.symbols.size(); ++i) {
        auto cps = utf8_decode(v.symbols[i]);
        v.max_symbol_len = std::max(v.max_symbol_len, cps.size());
        for (char32_t cp : cps) v.codepoints.insert(cp);
    }
    return v;
}

// Vocabulary file: one symbol per line, optional tab-separated `D` flag for
// combining diacritics, `#` comment lines. Lines are not trimmed — a line
// holding a single space is the space symbol.
inline Vocab load_vocab(const std::filesystem::path& path) {
    std::istringstream in(read_text_file(path));
    std::vector<std::string> syms;
    std::set<std::string> dia;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty() || line[0] == '#') continue;
        auto tab = line.find('\t');
        std::string sym = line.substr(0, tab);
        if (tab != std::string::npos && line.substr(tab + 1) == "D") dia.insert(sym);
        syms.push_back(sym);
    }
    return build_vocab(syms, dia);
}

// ---------------------------------------------------------------------------
// NormRules

struct NormRules {
    // canonicalization rules keyed by leading codepoint; each bucket is kept
    // sorted by source length descending for greedy longest-match
    std::unordered_map<char32_t, std::vector<std::pair<std::vector<char32_t>, std::vector<char32_t>>>>
        canon_map;
    std::set<char32_t> allowed;                    // permitted codepoints after filtering
    std::map<long long, std::string> number_lexicon;
    std::string connector;                         // joins units+tens compositions
};

inline std::string canonicalize(const std::string& s, const NormRules& rules);

// Rules file: `source<TAB>target` per line, `#` comments. Every target must be
// stable under the rule set, which makes a single greedy pass idempotent.
inline void load_canon_rules(NormRules& rules, const std::filesystem::path& path) {
    std::istringstream in(read_text_file(path));
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty() || line[0] == '#') continue;
        auto tab = line.find('\t');
        if (tab == std::string::npos) throw Error("malformed canonicalization rule: " + line);
        auto src = utf8_decode(line.substr(0, tab));
        auto tgt = utf8_decode(line.substr(tab + 1));
        if (src.empty()) throw Error("empty canonicalization source");
        rules.canon_map[src[0]].emplace_back(std::move(src), std::move(tgt));
    }
    for (auto& [cp, bucket] : rules.canon_map) {
        std::stable_sort(bucket.begin(), bucket.end(),
                         [](const auto& a, const auto& b) { return a.first.size() > b.first.size(); });
    }
    for (const auto& [cp, bucket] : rules.canon_map) {
        for (const auto& [src, tgt] : bucket) {
            std::string t = utf8_encode(tgt);
            if (canonicalize(t, rules) != t)
                throw Error("canonicalization target is not a fixpoint: " + utf8_encode(src));
        }
    }
}

// Number lexicon file: `integer<TAB>word-sequence` per line; the optional
// `connector` key supplies the units+tens joining word.
inline void load_number_lexicon(NormRules& rules, const std::filesystem::path& path) {
    std::istringstream in(read_text_file(path));
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty() || line[0] == '#') continue;
        auto tab = line.find('\t');
        if (tab == std::string::npos) throw Error("malformed number lexicon line: " + line);
        std::string key = line.substr(0, tab);
        std::string words = line.substr(tab + 1);
        if (key == "connector") {
            rules.connector = words;
            continue;
        }
        std::size_t pos = 0;
        long long n = std::stoll(key, &pos);
        if (pos != key.size() || n < 0) throw Error("bad number lexicon key: " + key);
        rules.number_lexicon[n] = words;
    }
}

inline NormRules load_norm_rules(const std::filesystem::path& canon_path,
                                 const std::filesystem::path& lexicon_path,
                                 const Vocab& vocab) {
    NormRules rules;
    load_canon_rules(rules, canon_path);
    load_number_lexicon(rules, lexicon_path);
    rules.allowed = vocab.codepoints;
    for (char32_t cp : vocab.diacritic_cps)
        if (!rules.allowed.count(cp)) throw Error("vocab diacritic missing from allowed set");
    return rules;
}

// ---------------------------------------------------------------------------
// Operations

namespace detail {

// One greedy longest-match rewrite pass.
inline bool canon_pass(const std::vector<char32_t>& in, const NormRules& rules,
                       std::vector<char32_t>& out) {
    bool changed = false;
    std::size_t i = 0;
    while (i < in.size()) {
        const auto it = rules.canon_map.find(in[i]);
        const std::pair<std::vector<char32_t>, std::vector<char32_t>>* hit = nullptr;
        if (it != rules.canon_map.end()) {
            for (const auto& rule : it->second) {
                const auto& src = rule.first;
                if (i + src.size() <= in.size() &&
                    std::equal(src.begin(), src.end(), in.begin() + i)) {
                    hit = &rule;
                    break;
                }
            }
        }
        if (hit) {
            out.insert(out.end(), hit->second.begin(), hit->second.end());
            i += hit->first.size();
            changed = true;
        } else {
            out.push_back(in[i]);
            ++i;
        }
    }
    return changed;
}

}  // namespace detail

inline std::string canonicalize(const std::string& s, const NormRules& rules) {
    std::vector<char32_t> cur = utf8_decode(s);
    for (int pass = 0; pass < 16; ++pass) {
        std::vector<char32_t> next;
        next.reserve(cur.size());
        if (!detail::canon_pass(cur, rules, next)) return utf8_encode(cur);
        cur = std::move(next);
    }
    throw Error("canonicalization did not reach a fixpoint (rule cycle?)");
}

namespace detail {

inline int digit_value(char32_t cp) {
    if (cp >= U'0' && cp <= U'9') return static_cast<int>(cp - U'0');
    if (cp >= 0x0660 && cp <= 0x0669) return static_cast<int>(cp - 0x0660);  // Arabic-Indic
    if (cp >= 0x06F0 && cp <= 0x06F9) return static_cast<int>(cp - 0x06F0);  // Eastern Arabic-Indic
    return -1;
}

inline std::string expand_int(long long n, const NormRules& rules, const std::string& run,
                              std::size_t begin, std::size_t end) {
    const auto& lex = rules.number_lexicon;
    auto direct = lex.find(n);
    if (direct != lex.end()) return direct->second;
    if (n < 100) {
        auto units = lex.find(n % 10);
        auto tens = lex.find((n / 10) * 10);
        if (units == lex.end() || tens == lex.end()) throw UnmappedNumber(run, begin, end);
        std::string out = units->second;
        if (!rules.connector.empty()) out += " " + rules.connector;
        return out + " " + tens->second;
    }
    if (n < 1000) {
        auto h = lex.find(n / 100);
        auto hundred = lex.find(100);
        if (h == lex.end() || hundred == lex.end()) throw UnmappedNumber(run, begin, end);
        std::string out = h->second + " " + hundred->second;
        if (n % 100) out += " " + expand_int(n % 100, rules, run, begin, end);
        return out;
    }
    if (n < 1000000) {
        auto thousand = lex.find(1000);
        if (thousand == lex.end()) throw UnmappedNumber(run, begin, end);
        std::string out = expand_int(n / 1000, rules, run, begin, end) + " " + thousand->second;
        if (n % 1000) out += " " + expand_int(n % 1000, rules, run, begin, end);
        return out;
    }
    throw UnmappedNumber(run, begin, end);
}

}  // namespace detail

// Replaces every maximal digit run (ASCII, Arabic-Indic, or Eastern
// Arabic-Indic digits) with its word expansion.
inline std::string expand_numbers(const std::string& s, const NormRules& rules) {
    auto cps = utf8_decode(s);
    std::string out;
    std::size_t i = 0;
    std::size_t byte_pos = 0;
    while (i < cps.size()) {
        if (detail::digit_value(cps[i]) < 0) {
            utf8_append(out, cps[i]);
            std::string tmp;
            utf8_append(tmp, cps[i]);
            byte_pos += tmp.size();
            ++i;
            continue;
        }
        std::size_t j = i;
        long long n = 0;
        std::string run;
        while (j < cps.size() && detail::digit_value(cps[j]) >= 0) {
            n = n * 10 + detail::digit_value(cps[j]);
            utf8_append(run, cps[j]);
            ++j;
            if (j - i > 9) throw UnmappedNumber(run, byte_pos, byte_pos + run.size());
        }
        out += detail::expand_int(n, rules, run, byte_pos, byte_pos + run.size());
        byte_pos += run.size();
        i = j;
    }
    return out;
}

namespace detail {

inline bool is_space_cp(char32_t cp) {
    return cp == U' ' || cp == U'\t' || cp == U'\n' || cp == U'\r' || cp == 0x00A0;
}

// Greedy longest-match segmentation; unmatched positions yield a negative id
// marking a single unknown codepoint.
inline void segment(const std::vector<char32_t>& cps, const Vocab& vocab,
                    std::vector<int>& ids, std::vector<std::size_t>* unknown_pos) {
    std::size_t max_len = vocab.max_symbol_len;
    std::size_t i = 0;
    while (i < cps.size()) {
        int matched = -1;
        std::size_t matched_len = 0;
        for (std::size_t len = std::min(max_len, cps.size() - i); len >= 1; --len) {
            std::string cand = utf8_encode(std::vector<char32_t>(cps.begin() + i, cps.begin() + i + len));
            auto it = vocab.index.find(cand);
            if (it != vocab.index.end()) {
                matched = it->second;
                matched_len = len;
                break;
            }
        }
        if (matched >= 0) {
            ids.push_back(matched);
            i += matched_len;
        } else {
            ids.push_back(-1);
            if (unknown_pos) unknown_pos->push_back(i);
            ++i;
        }
    }
}

}  // namespace detail

// Drops symbols outside the vocabulary (diacritics are vocabulary symbols and
// therefore always survive) and collapses whitespace runs to a single space.
inline std::string filter_chars(const std::string& s, const Vocab& vocab) {
    auto cps = utf8_decode(s);
    std::vector<char32_t> kept;
    std::size_t i = 0;
    while (i < cps.size()) {
        if (detail::is_space_cp(cps[i])) {
            while (i < cps.size() && detail::is_space_cp(cps[i])) ++i;
            kept.push_back(U' ');
            continue;
        }
        // longest-match against the vocabulary at this position
        std::size_t max_take = std::min(vocab.max_symbol_len, cps.size() - i);
        std::size_t best_len = 0;
        for (std::size_t len = max_take; len >= 1; --len) {
            std::string cand = utf8_encode(std::vector<char32_t>(cps.begin() + i, cps.begin() + i + len));
            if (vocab.has(cand)) {
                best_len = len;
                break;
            }
        }
        if (best_len > 0) {
            kept.insert(kept.end(), cps.begin() + i, cps.begin() + i + best_len);
            i += best_len;
        } else if (vocab.diacritic_cps.count(cps[i])) {
            kept.push_back(cps[i]);  // never drop a diacritic
            ++i;
        } else {
            ++i;  // out of vocabulary, drop
        }
    }
    return utf8_encode(kept);
}

struct TokenSeq {
    std::vector<int> ids;
    std::string text;
};

inline TokenSeq tokenize(const std::string& s, const Vocab& vocab) {
    auto cps = utf8_decode(s);
    TokenSeq seq;
    seq.text = s;
    std::vector<std::size_t> unknown;
    detail::segment(cps, vocab, seq.ids, &unknown);
    if (!unknown.empty()) {
        std::string sym;
        utf8_append(sym, cps[unknown[0]]);
        throw UnknownSymbol(sym);
    }
    return seq;
}

inline std::string detokenize(const TokenSeq& seq, const Vocab& vocab) {
    std::string out;
    for (int id : seq.ids) {
        if (id < 0 || static_cast<std::size_t>(id) >= vocab.symbols.size()) throw InvalidId(id);
        out += vocab.symbols[id];
    }
    return out;
}

inline std::string detokenize(const std::vector<int>& ids, const Vocab& vocab) {
    TokenSeq seq;
    seq.ids = ids;
    return detokenize(seq, vocab);
}

// Removes every diacritic codepoint; everything else is preserved in order.
inline std::string strip_diacritics(const std::string& s, const Vocab& vocab) {
    auto cps = utf8_decode(s);
    std::vector<char32_t> kept;
    for (char32_t cp : cps)
        if (!vocab.diacritic_cps.count(cp)) kept.push_back(cp);
    return utf8_encode(kept);
}

// Full normalization pipeline: canonicalize, expand digit runs, filter.
inline std::string normalize(const std::string& s, const NormRules& rules, const Vocab& vocab) {
    return filter_chars(expand_numbers(canonicalize(s, rules), rules), vocab);
}

}  // namespace koshur::text
