#pragma once

#include <array>
#include <cmath>
#include <cstdio>
#include <map>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "ucap/models.hpp"
#include "ucap/vocab.hpp"
#include "ucap/worldsim.hpp"

namespace ucap {

// ---------------------------------------------------------------------------
// BLEU
// ---------------------------------------------------------------------------

struct BleuResult {
    std::array<double, 4> bleu{};  // BLEU-1..4
};

namespace detail {

using NgramCounts = std::map<std::vector<std::string>, long>;

inline NgramCounts ngram_counts(const std::vector<std::string>& words, std::size_t n) {
    NgramCounts counts;
    if (words.size() < n) return counts;
    for (std::size_t i = 0; i + n <= words.size(); ++i)
        ++counts[std::vector<std::string>(words.begin() + i, words.begin() + i + n)];
    return counts;
}

}  // namespace detail

// Corpus-level BLEU with clipped modified n-gram precision, geometric mean
// over orders 1..n, and the closest-reference-length brevity penalty
// exp(1 - r/c) when c < r. No smoothing.
inline BleuResult bleu(const std::vector<std::vector<std::string>>& candidates,
                       const std::vector<std::vector<std::vector<std::string>>>& references,
                       std::size_t max_n = 4) {
    if (candidates.empty()) throw std::invalid_argument("bleu: empty candidate set");
    if (candidates.size() != references.size())
        throw std::invalid_argument("bleu: candidate/reference count mismatch");
    if (max_n < 1 || max_n > 4) throw std::invalid_argument("bleu: max_n must be in 1..4");

    std::array<long, 4> matched{}, total{};
    long cand_len = 0, ref_len = 0;
    for (std::size_t i = 0; i < candidates.size(); ++i) {
        const auto& cand = candidates[i];
        const auto& refs = references[i];
        if (refs.empty()) throw std::invalid_argument("bleu: image without references");
        cand_len += static_cast<long>(cand.size());

        // closest reference length; ties go to the shorter reference
        long best_ref = static_cast<long>(refs[0].size());
        for (const auto& r : refs) {
            const long len = static_cast<long>(r.size());
            const long cur = std::abs(best_ref - static_cast<long>(cand.size()));
            const long alt = std::abs(len - static_cast<long>(cand.size()));
            if (alt < cur || (alt == cur && len < best_ref)) best_ref = len;
        }
        ref_len += best_ref;

        for (std::size_t n = 1; n <= max_n; ++n) {
            auto cand_counts = detail::ngram_counts(cand, n);
            detail::NgramCounts clip;
            for (const auto& r : refs)
                for (const auto& [gram, count] : detail::ngram_counts(r, n))
                    clip[gram] = std::max(clip[gram], count);
            for (const auto& [gram, count] : cand_counts) {
                total[n - 1] += count;
                auto it = clip.find(gram);
                if (it != clip.end()) matched[n - 1] += std::min(count, it->second);
            }
        }
    }

    const double bp = (cand_len == 0) ? 0.0
                      : (cand_len >= ref_len)
                          ? 1.0
                          : std::exp(1.0 - static_cast<double>(ref_len) / cand_len);
    BleuResult out;
    for (std::size_t n = 1; n <= max_n; ++n) {
        double log_sum = 0.0;
        bool zero = false;
        for (std::size_t k = 1; k <= n; ++k) {
            if (matched[k - 1] == 0 || total[k - 1] == 0) {
                zero = true;
                break;
            }
            log_sum += std::log(static_cast<double>(matched[k - 1]) / total[k - 1]);
        }
        out.bleu[n - 1] = zero ? 0.0 : bp * std::exp(log_sum / static_cast<double>(n));
    }
    return out;
}

// ---------------------------------------------------------------------------
// concept metric
// ---------------------------------------------------------------------------

enum class CountMode { Types, Tokens };

// Counts concept hits in one caption. Types mode counts each distinct
// concept at most once; tokens mode counts every matching position.
inline long count_concept_hits(const std::vector<std::string>& caption_words,
                               const std::set<std::string>& concepts, CountMode mode) {
    if (mode == CountMode::Tokens) {
        long hits = 0;
        for (const auto& w : caption_words) hits += concepts.count(w) ? 1 : 0;
        return hits;
    }
    std::set<std::string> seen;
    for (const auto& w : caption_words)
        if (concepts.count(w)) seen.insert(w);
    return static_cast<long>(seen.size());
}

// Mean per-image count of caption words that hit the image's concept set
// (ground truth on synthetic worlds, detections otherwise).
inline double avg_correct_concepts(const std::vector<std::vector<std::string>>& captions,
                                   const std::vector<std::set<std::string>>& concept_sets,
                                   CountMode mode = CountMode::Types) {
    if (captions.size() != concept_sets.size())
        throw std::invalid_argument("avg_correct_concepts: caption/concept-set count mismatch");
    if (captions.empty()) return 0.0;
    double total = 0.0;
    for (std::size_t i = 0; i < captions.size(); ++i)
        total += static_cast<double>(count_concept_hits(captions[i], concept_sets[i], mode));
    return total / static_cast<double>(captions.size());
}

// ---------------------------------------------------------------------------
// caption generation + report
// ---------------------------------------------------------------------------

struct GeneratedCaption {
    std::string id;
    std::string caption;
};

inline std::string join_words(const std::vector<std::string>& words) {
    std::string out;
    for (std::size_t i = 0; i < words.size(); ++i) {
        if (i) out += ' ';
        out += words[i];
    }
    return out;
}

// Beam-search decodes a caption for every feature; fully deterministic.
inline std::vector<GeneratedCaption> generate_captions(const GeneratorParams& gen,
                                                       const std::vector<ImageFeature>& features,
                                                       const Vocabulary& vocab,
                                                       std::size_t beam_size,
                                                       std::size_t max_words) {
    std::vector<GeneratedCaption> out;
    out.reserve(features.size());
    for (const auto& img : features) {
        Tensor f = Tensor::from_data({img.vec.size()}, img.vec);
        TokenSentence s = beam_search(gen, f, beam_size, max_words);
        s.validate(vocab);
        out.push_back({img.id, join_words(decode(s, vocab))});
    }
    return out;
}

struct EvalReport {
    std::array<double, 4> bleu{};
    bool has_bleu = false;
    double avg_correct_concepts = 0.0;
    std::size_t num_images = 0;
    std::vector<GeneratedCaption> captions;

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["bleu1"] = bleu[0];
        j["bleu2"] = bleu[1];
        j["bleu3"] = bleu[2];
        j["bleu4"] = bleu[3];
        j["has_bleu"] = has_bleu;
        j["avg_correct_concepts"] = avg_correct_concepts;
        j["num_images"] = num_images;
        j["captions"] = nlohmann::json::array();
        for (const auto& c : captions) j["captions"].push_back({{"id", c.id}, {"caption", c.caption}});
        return j;
    }
};

}  // namespace ucap
