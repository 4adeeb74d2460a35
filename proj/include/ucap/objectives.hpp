#pragma once

#include <cmath>
#include <span>
#include <stdexcept>
#include <unordered_map>
#include <vector>

#include "ucap/autodiff.hpp"
#include "ucap/vocab.hpp"
#include "ucap/worldsim.hpp"

namespace ucap {

// Reward/loss weights and the return discount. Defaults follow the training
// recipe this model family ships with.
struct ObjectiveWeights {
    double lambda_c = 10.0;
    double lambda_im = 0.2;
    double lambda_sen = 1.0;
    double gamma = 0.9;
};

// Probabilities are clamped away from {0,1} before any logarithm.
inline constexpr double kProbClamp = 1e-8;

inline double clamp_prob(double q) {
    if (q < kProbClamp) return kProbClamp;
    if (q > 1.0 - kProbClamp) return 1.0 - kProbClamp;
    return q;
}

// Per-step adversarial reward: log of the discriminator's belief that the
// generated prefix is real. Always <= 0 (up to the clamp).
inline std::vector<double> adversarial_reward(std::span<const double> q) {
    std::vector<double> r(q.size());
    for (std::size_t t = 0; t < q.size(); ++t) r[t] = std::log(clamp_prob(q[t]));
    return r;
}

// Discriminator adversarial loss over one real and one generated sequence of
// per-prefix probabilities:
//   -[ (1/l) sum log q_real + (1/n) sum log(1 - q_gen) ]
inline double discriminator_adv_loss(std::span<const double> q_real,
                                     std::span<const double> q_gen) {
    if (q_real.empty() || q_gen.empty())
        throw std::invalid_argument("discriminator_adv_loss: empty probability sequence");
    double real_term = 0.0, gen_term = 0.0;
    for (double q : q_real) real_term += std::log(clamp_prob(q));
    for (double q : q_gen) gen_term += std::log(clamp_prob(1.0 - q));
    return -(real_term / static_cast<double>(q_real.size()) +
             gen_term / static_cast<double>(q_gen.size()));
}

// Tape version over scalar probability tensors; the gradient path for
// discriminator updates.
inline Tensor discriminator_adv_loss(std::span<const Tensor> q_real, std::span<const Tensor> q_gen) {
    if (q_real.empty() || q_gen.empty())
        throw std::invalid_argument("discriminator_adv_loss: empty probability sequence");
    std::vector<Tensor> real_logs, gen_logs;
    real_logs.reserve(q_real.size());
    gen_logs.reserve(q_gen.size());
    for (const Tensor& q : q_real)
        real_logs.push_back(log(clamp(q, kProbClamp, 1.0 - kProbClamp)));
    for (const Tensor& q : q_gen)
        gen_logs.push_back(log(clamp(sub(Tensor::scalar(1.0), q), kProbClamp, 1.0 - kProbClamp)));
    Tensor real_term = scale(add_n(real_logs), 1.0 / static_cast<double>(real_logs.size()));
    Tensor gen_term = scale(add_n(gen_logs), 1.0 / static_cast<double>(gen_logs.size()));
    return neg(add(real_term, gen_term));
}

// Confidence-weighted concept reward: step t earns the detection confidence
// of the concept whose word the generator emitted there, else zero.
// Detections arrive pre-merged (unique words), so at most one term fires.
inline std::vector<double> concept_reward(std::span<const int> ids,
                                          const ConceptDetection& detection,
                                          const Vocabulary& vocab) {
    std::unordered_map<std::string, double> confidence;
    for (const auto& [word, score] : detection.concepts) confidence.emplace(word, score);
    std::vector<double> r(ids.size(), 0.0);
    for (std::size_t t = 0; t < ids.size(); ++t) {
        const int id = ids[t];
        if (id == Vocabulary::kSos || id == Vocabulary::kEos || id == Vocabulary::kUnk) continue;
        auto it = confidence.find(vocab.word(id));
        if (it != confidence.end()) r[t] = it->second;
    }
    return r;
}

// Squared Euclidean distance between the generator-side latent (the image
// feature or latent code the rollout started from) and the sentence's
// projection back into that space.
inline double image_recon_loss(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size())
        throw std::invalid_argument("image_recon_loss: dimension mismatch " +
                                    std::to_string(a.size()) + " vs " + std::to_string(b.size()));
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        acc += d * d;
    }
    return acc;
}

inline Tensor image_recon_loss(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) detail::shape_error("image_recon_loss", a.shape(), b.shape());
    return sum(square(sub(a, b)));
}

inline double image_recon_reward(std::span<const double> a, std::span<const double> b) {
    return -image_recon_loss(a, b);
}

// Sentence reconstruction cross-entropy: negated sum of the teacher-forced
// log-probs (terminal EOS included).
inline double sentence_recon_loss(std::span<const double> logps) {
    double acc = 0.0;
    for (double lp : logps) acc += lp;
    return -acc;
}

inline Tensor sentence_recon_loss(std::span<const Tensor> logps) {
    if (logps.empty()) throw std::invalid_argument("sentence_recon_loss: no log-probs");
    return neg(add_n(logps));
}

// Total discriminator loss: adversarial plus weighted image reconstruction.
inline double discriminator_total_loss(double l_adv, double l_im, const ObjectiveWeights& w) {
    return l_adv + w.lambda_im * l_im;
}

inline Tensor discriminator_total_loss(const Tensor& l_adv, const Tensor& l_im,
                                       const ObjectiveWeights& w) {
    return add(l_adv, scale(l_im, w.lambda_im));
}

}  // namespace ucap
