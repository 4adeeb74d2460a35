#pragma once

#include <algorithm>
#include <numeric>
#include <vector>

#include "ucap/rng.hpp"
#include "ucap/vocab.hpp"

namespace ucap {

// Word-dropout + local-shuffle noise for the sentence denoising autoencoder.
struct NoiseConfig {
    double p_drop = 0.1;  // independent per-word drop probability
    int max_shift = 3;    // no surviving word moves more than this many slots
};

// Drops each word with p_drop (keeping one uniformly random original word if
// everything got dropped), then shuffles survivors by sorting position keys
// i + U(0, max_shift + 1), which bounds every displacement by max_shift.
inline TokenSentence add_noise(const TokenSentence& sentence, const NoiseConfig& cfg, Rng& rng) {
    const std::size_t n = sentence.ids.size();
    std::vector<int> kept;
    kept.reserve(n);
    for (int id : sentence.ids)
        if (!bernoulli(rng, cfg.p_drop)) kept.push_back(id);
    if (kept.empty()) kept.push_back(sentence.ids[uniform_index(rng, n)]);

    if (cfg.max_shift > 0 && kept.size() > 1) {
        std::vector<double> keys(kept.size());
        for (std::size_t i = 0; i < kept.size(); ++i)
            keys[i] = static_cast<double>(i) + uniform(rng, 0.0, static_cast<double>(cfg.max_shift) + 1.0);
        std::vector<std::size_t> order(kept.size());
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(),
                         [&](std::size_t a, std::size_t b) { return keys[a] < keys[b]; });
        std::vector<int> shuffled(kept.size());
        for (std::size_t i = 0; i < order.size(); ++i) shuffled[i] = kept[order[i]];
        kept = std::move(shuffled);
    }
    return TokenSentence{std::move(kept)};
}

}  // namespace ucap
