#pragma once

#include <algorithm>
#include <cctype>
#include <filesystem>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "ucap/io.hpp"

namespace ucap {

// Lowercases and splits a line into tokens. Alphanumeric runs form words
// (bytes >= 0x80 are treated as word bytes so UTF-8 stays intact); any other
// non-space character becomes a single-character token.
inline std::vector<std::string> tokenize(std::string_view line) {
    std::vector<std::string> words;
    std::string cur;
    auto flush = [&] {
        if (!cur.empty()) {
            words.push_back(cur);
            cur.clear();
        }
    };
    for (unsigned char ch : line) {
        if (std::isspace(ch)) {
            flush();
        } else if (std::isalnum(ch) || ch >= 0x80) {
            cur.push_back(static_cast<char>(std::tolower(ch)));
        } else {
            flush();
            words.push_back(std::string(1, static_cast<char>(ch)));
        }
    }
    flush();
    return words;
}

// Word <-> id mapping with fixed reserved ids. Non-reserved ids are assigned
// by descending corpus count with lexicographic tie-break, so building is
// invariant to corpus order.
class Vocabulary {
public:
    static constexpr int kSos = 0;
    static constexpr int kEos = 1;
    static constexpr int kUnk = 2;
    static constexpr int kReserved = 3;

    Vocabulary() { id_to_word_ = {"<sos>", "<eos>", "<unk>"}; }

    static Vocabulary build(const std::vector<std::vector<std::string>>& corpus, int min_freq,
                            const std::vector<std::string>& concept_words = {}) {
        if (min_freq < 1) throw std::invalid_argument("build_vocab: min_freq must be >= 1");
        std::map<std::string, long> counts;
        for (const auto& sentence : corpus)
            for (const auto& word : sentence) ++counts[word];
        std::vector<std::pair<std::string, long>> kept;
        for (const auto& [word, count] : counts)
            if (count >= min_freq) kept.emplace_back(word, count);
        std::sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) {
            if (a.second != b.second) return a.second > b.second;
            return a.first < b.first;
        });
        Vocabulary vocab;
        for (const auto& [word, count] : kept) vocab.insert(word);
        // detector class names are always part of the vocabulary
        for (const auto& word : concept_words)
            if (!vocab.contains(word)) vocab.insert(word);
        return vocab;
    }

    bool contains(const std::string& word) const { return word_to_id_.count(word) > 0; }

    int lookup(const std::string& word) const {
        auto it = word_to_id_.find(word);
        return it == word_to_id_.end() ? kUnk : it->second;
    }

    const std::string& word(int id) const {
        if (id < 0 || id >= static_cast<int>(id_to_word_.size()))
            throw std::invalid_argument("Vocabulary: invalid id " + std::to_string(id));
        return id_to_word_[static_cast<std::size_t>(id)];
    }

    int size() const { return static_cast<int>(id_to_word_.size()); }

    // One word per line, line number = id - 3; reserved ids are implicit.
    void save(const std::filesystem::path& path) const {
        atomic_write_file(path, [&](std::ostream& out) {
            for (std::size_t i = kReserved; i < id_to_word_.size(); ++i) out << id_to_word_[i] << '\n';
        });
    }

    static Vocabulary load(const std::filesystem::path& path) {
        std::ifstream in(path);
        if (!in) throw std::runtime_error("cannot open vocabulary: " + path.string());
        Vocabulary vocab;
        std::string line;
        while (std::getline(in, line)) {
            if (!line.empty() && line.back() == '\r') line.pop_back();
            if (line.empty()) continue;
            vocab.insert(line);
        }
        return vocab;
    }

private:
    void insert(const std::string& word) {
        if (word_to_id_.count(word))
            throw std::invalid_argument("Vocabulary: duplicate word " + word);
        word_to_id_[word] = static_cast<int>(id_to_word_.size());
        id_to_word_.push_back(word);
    }

    std::unordered_map<std::string, int> word_to_id_;
    std::vector<std::string> id_to_word_;
};

// Interior word ids of one sentence; SOS/EOS never appear here.
struct TokenSentence {
    std::vector<int> ids;

    std::size_t length() const { return ids.size(); }

    void validate(const Vocabulary& vocab) const {
        if (ids.empty()) throw std::invalid_argument("TokenSentence: empty sentence");
        for (int id : ids) {
            if (id == Vocabulary::kSos || id == Vocabulary::kEos)
                throw std::invalid_argument("TokenSentence: reserved id in interior");
            if (id < 0 || id >= vocab.size())
                throw std::invalid_argument("TokenSentence: id " + std::to_string(id) +
                                            " outside vocabulary");
        }
    }
};

inline TokenSentence encode(const std::vector<std::string>& words, const Vocabulary& vocab) {
    TokenSentence s;
    s.ids.reserve(words.size());
    for (const auto& w : words) s.ids.push_back(vocab.lookup(w));
    return s;
}

inline std::vector<std::string> decode(const TokenSentence& sentence, const Vocabulary& vocab) {
    std::vector<std::string> words;
    words.reserve(sentence.ids.size());
    for (int id : sentence.ids) {
        if (id == Vocabulary::kSos || id == Vocabulary::kEos)
            throw std::invalid_argument("decode: reserved id in sentence interior");
        words.push_back(vocab.word(id));
    }
    return words;
}

// Keeps sentences with length >= min_len whose UNK fraction is <= max_unk_frac.
inline std::vector<std::vector<std::string>> filter_corpus(
    const std::vector<std::vector<std::string>>& sentences, std::size_t min_len,
    double max_unk_frac, const Vocabulary& vocab) {
    std::vector<std::vector<std::string>> kept;
    for (const auto& words : sentences) {
        if (words.size() < min_len) continue;
        std::size_t unk = 0;
        for (const auto& w : words)
            if (vocab.lookup(w) == Vocabulary::kUnk) ++unk;
        if (static_cast<double>(unk) > max_unk_frac * static_cast<double>(words.size())) continue;
        kept.push_back(words);
    }
    return kept;
}

inline std::vector<std::string> read_corpus_lines(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open corpus: " + path.string());
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (!line.empty()) lines.push_back(line);
    }
    return lines;
}

}  // namespace ucap
