#pragma once

#include <algorithm>
#include <cstdio>
#include <functional>
#include <ostream>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "ucap/evalkit.hpp"
#include "ucap/models.hpp"
#include "ucap/noise.hpp"
#include "ucap/objectives.hpp"
#include "ucap/optim.hpp"
#include "ucap/vocab.hpp"
#include "ucap/worldsim.hpp"

namespace ucap {

struct TrainConfig {
    ObjectiveWeights weights;
    double lr_main = 1e-4;
    double lr_init = 1e-3;
    int batch_size = 32;
    int steps = 0;
    std::uint64_t seed = 1;
    std::size_t length_cap = 20;  // max interior words per sentence
    double clip_norm = 5.0;

    // The return discount normally applies as gamma^(s-t) from each step t;
    // the literal flag switches to gamma^s with s the 1-based absolute step.
    bool literal_gamma_exponent = false;
    // When set, the sentence-reconstruction loss also trains the
    // discriminator-side encoder (applied during discriminator updates).
    bool sen_updates_encoder = false;

    // objective switches for the ablation grid; adversarial is always on
    bool enable_adv = true;
    bool enable_con = true;
    bool enable_im = true;
    bool enable_sen = true;

    NoiseConfig noise;

    int init_con2sen_epochs = 4;
    int init_feat2sen_epochs = 4;
    int init_disc_steps = 100;
    int init_batch_size = 16;
    int checkpoint_every = 0;  // 0: only on completion
};

// ---------------------------------------------------------------------------
// returns
// ---------------------------------------------------------------------------

struct RewardTrace {
    std::vector<double> r_adv;  // per step, <= 0
    std::vector<double> r_c;    // per step, >= 0
    double r_im = 0.0;          // sentence-level, <= 0

    std::size_t n() const { return r_adv.size(); }
};

// Discounted reward-to-go plus the undiscounted sentence-level image term:
//   G_t = sum_{s=t..n} gamma^(s-t) (r_adv_s + lambda_c r_c_s) + lambda_im r_im
// With literal_exponent the discount is gamma^s (s 1-based), matching the
// exponent as written rather than as intended.
inline std::vector<double> compute_returns(const RewardTrace& trace, const ObjectiveWeights& w,
                                           bool literal_exponent = false) {
    const std::size_t n = trace.n();
    if (trace.r_c.size() != n)
        throw std::invalid_argument("compute_returns: reward stream lengths differ");
    std::vector<double> base(n);
    for (std::size_t t = 0; t < n; ++t) base[t] = trace.r_adv[t] + w.lambda_c * trace.r_c[t];
    std::vector<double> g(n, 0.0);
    if (literal_exponent) {
        // backward suffix sum of gamma^(t+1) * base_t
        double suffix = 0.0;
        std::vector<double> powers(n);
        double p = 1.0;
        for (std::size_t t = 0; t < n; ++t) {
            p *= w.gamma;
            powers[t] = p;
        }
        for (std::size_t t = n; t-- > 0;) {
            suffix += powers[t] * base[t];
            g[t] = suffix;
        }
    } else {
        double running = 0.0;
        for (std::size_t t = n; t-- > 0;) {
            running = base[t] + w.gamma * running;
            g[t] = running;
        }
    }
    for (double& v : g) v += w.lambda_im * trace.r_im;
    return g;
}

// ---------------------------------------------------------------------------
// model bundle and dataset
// ---------------------------------------------------------------------------

struct CaptionModels {
    ModelDims dims;
    GeneratorParams gen;
    DiscriminatorParams dis;
    Con2SenParams c2s;
    ParamSet gen_params, dis_params, c2s_params;

    static CaptionModels init(const ModelDims& dims, Rng& rng, bool share_embeddings = false) {
        CaptionModels m;
        m.dims = dims;
        m.gen = GeneratorParams::init(dims, rng);
        m.dis = DiscriminatorParams::init(dims, rng, share_embeddings ? &m.gen.embed : nullptr);
        m.c2s = Con2SenParams::init(dims, rng);
        m.gen_params = m.gen.param_set();
        m.dis_params = m.dis.param_set();
        m.c2s_params = m.c2s.param_set();
        return m;
    }

    ParamSet all_params() const {
        ParamSet all;
        all.merge(gen_params);
        all.merge(dis_params);
        all.merge(c2s_params);
        return all;
    }

    void zero_all_grads() {
        gen_params.zero_grad();
        dis_params.zero_grad();
        c2s_params.zero_grad();
    }
};

struct TrainDataset {
    std::vector<ImageFeature> images;
    std::vector<ConceptDetection> detections;  // aligned with images
    std::vector<TokenSentence> corpus;         // filtered, encoded, truncated
    ConceptDictionary dict;
    Vocabulary vocab;
};

// Tokenize, filter, encode, and truncate raw corpus lines for training.
inline std::vector<TokenSentence> prepare_corpus(const std::vector<std::string>& lines,
                                                 const Vocabulary& vocab, std::size_t min_len,
                                                 double max_unk_frac, std::size_t length_cap) {
    std::vector<std::vector<std::string>> tokenized;
    tokenized.reserve(lines.size());
    for (const auto& line : lines) tokenized.push_back(tokenize(line));
    auto kept = filter_corpus(tokenized, min_len, max_unk_frac, vocab);
    std::vector<TokenSentence> out;
    out.reserve(kept.size());
    for (const auto& words : kept) {
        TokenSentence s = encode(words, vocab);
        if (s.ids.size() > length_cap) s.ids.resize(length_cap);
        out.push_back(std::move(s));
    }
    return out;
}

inline Tensor feature_tensor(const ImageFeature& img) {
    return Tensor::from_data({img.vec.size()}, img.vec);
}

// ---------------------------------------------------------------------------
// rollout evaluation and the self-critic baseline
// ---------------------------------------------------------------------------

struct RolloutEval {
    Rollout rollout;
    RewardTrace trace;
    std::vector<double> returns;
};

// Samples (or greedily decodes) one caption for an image and prices it under
// the enabled reward streams. Pure inference: nothing here touches a tape.
inline RolloutEval evaluate_rollout(const CaptionModels& models, const Tensor& feature,
                                    const ConceptDetection& detection, const Vocabulary& vocab,
                                    const TrainConfig& cfg, DecodeMode mode, Rng& rng) {
    Tape::Pause no_grad;
    RolloutEval out;
    out.rollout = generator_rollout(models.gen, feature, mode, rng, cfg.length_cap);

    auto score = discriminator_score(models.dis, out.rollout.ids);
    out.rollout.q.reserve(score.q.size());
    for (const auto& q : score.q) out.rollout.q.push_back(q.value());

    const std::size_t n = out.rollout.n();
    out.trace.r_adv = cfg.enable_adv ? adversarial_reward(out.rollout.q)
                                     : std::vector<double>(n, 0.0);
    out.trace.r_c = cfg.enable_con ? concept_reward(out.rollout.ids, detection, vocab)
                                   : std::vector<double>(n, 0.0);
    if (cfg.enable_im) {
        Tensor latent = encode_latent(models.dis, out.rollout.ids);
        out.trace.r_im = -image_recon_loss(feature.data(), latent.data());
    }
    out.returns = compute_returns(out.trace, cfg.weights, cfg.literal_gamma_exponent);
    return out;
}

// Greedy rollout on the same input, priced identically; its return at step t
// is the baseline b_t. Steps past the greedy length reuse the final return.
inline RolloutEval self_critic_baseline(const CaptionModels& models, const Tensor& feature,
                                        const ConceptDetection& detection, const Vocabulary& vocab,
                                        const TrainConfig& cfg, Rng& rng) {
    return evaluate_rollout(models, feature, detection, vocab, cfg, DecodeMode::Greedy, rng);
}

inline double baseline_at(const std::vector<double>& greedy_returns, std::size_t t) {
    if (greedy_returns.empty()) return 0.0;
    return t < greedy_returns.size() ? greedy_returns[t] : greedy_returns.back();
}

// ---------------------------------------------------------------------------
// log
// ---------------------------------------------------------------------------

struct TrainLogRow {
    int step = 0;
    double l_adv = 0.0;
    double l_im = 0.0;
    double l_sen = 0.0;
    double mean_r_adv = 0.0;
    double mean_r_c = 0.0;
    double mean_r_im = 0.0;
    double avg_concepts = 0.0;
};

struct TrainLog {
    std::vector<TrainLogRow> rows;

    static std::string format_value(double v) {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "%.10g", v);
        return buf;
    }

    void to_csv(std::ostream& out) const {
        out << "step,l_adv,l_im,l_sen,mean_r_adv,mean_r_c,mean_r_im,avg_concepts\n";
        for (const auto& r : rows) {
            out << r.step << ',' << format_value(r.l_adv) << ',' << format_value(r.l_im) << ','
                << format_value(r.l_sen) << ',' << format_value(r.mean_r_adv) << ','
                << format_value(r.mean_r_c) << ',' << format_value(r.mean_r_im) << ','
                << format_value(r.avg_concepts) << '\n';
        }
    }

    void to_jsonl(std::ostream& out) const {
        for (const auto& r : rows) {
            nlohmann::json j;
            j["step"] = r.step;
            j["l_adv"] = r.l_adv;
            j["l_im"] = r.l_im;
            j["l_sen"] = r.l_sen;
            j["mean_r_adv"] = r.mean_r_adv;
            j["mean_r_c"] = r.mean_r_c;
            j["mean_r_im"] = r.mean_r_im;
            j["avg_concepts"] = r.avg_concepts;
            out << j.dump() << '\n';
        }
    }
};

// ---------------------------------------------------------------------------
// training steps
// ---------------------------------------------------------------------------

namespace detail {

inline std::set<std::string> concept_word_set(const ImageFeature& img,
                                              const ConceptDetection& det,
                                              const ConceptDictionary& dict) {
    std::set<std::string> s;
    if (!img.truth.empty()) {
        for (int c : img.truth) s.insert(dict.words.at(static_cast<std::size_t>(c)));
    } else {
        for (const auto& [word, score] : det.concepts) s.insert(word);
    }
    return s;
}

}  // namespace detail

struct GenStepStats {
    double pseudo_loss = 0.0;
    double l_sen = 0.0;
    double mean_r_adv = 0.0;
    double mean_r_c = 0.0;
    double mean_r_im = 0.0;
    double avg_concepts = 0.0;  // types-mode hits of sampled captions
    double grad_norm = 0.0;
};

// One REINFORCE update of the generator: sampled rollouts scored under the
// current discriminator, self-critic advantages, plus the sentence
// reconstruction term decoded from detached latent codes.
inline GenStepStats generator_step(CaptionModels& models, const TrainDataset& data,
                                   std::span<const std::size_t> image_batch,
                                   std::span<const std::size_t> sentence_batch,
                                   const TrainConfig& cfg, AdamState& gen_adam, Rng& rng) {
    if (image_batch.empty()) throw std::invalid_argument("generator_step: empty batch");
    GenStepStats stats;
    Tape tape;
    Tape::Scope scope(tape);
    std::vector<Tensor> loss_terms;

    long reward_steps = 0;
    for (std::size_t idx : image_batch) {
        const ImageFeature& img = data.images.at(idx);
        const ConceptDetection& det = data.detections.at(idx);
        Tensor feature = feature_tensor(img);

        RolloutEval sampled = evaluate_rollout(models, feature, det, data.vocab, cfg,
                                               DecodeMode::Sample, rng);
        RolloutEval greedy = self_critic_baseline(models, feature, det, data.vocab, cfg, rng);

        auto rescored = generator_score_ids(models.gen, feature, sampled.rollout.ids);
        for (std::size_t t = 0; t < rescored.size(); ++t) {
            const double advantage = sampled.returns[t] - baseline_at(greedy.returns, t);
            loss_terms.push_back(
                scale(rescored[t], -advantage / static_cast<double>(image_batch.size())));
        }

        for (std::size_t t = 0; t < sampled.trace.n(); ++t) {
            stats.mean_r_adv += sampled.trace.r_adv[t];
            stats.mean_r_c += sampled.trace.r_c[t];
        }
        reward_steps += static_cast<long>(sampled.trace.n());
        stats.mean_r_im += sampled.trace.r_im;
        stats.avg_concepts += static_cast<double>(count_concept_hits(
            decode(sampled.rollout.sentence(), data.vocab),
            detail::concept_word_set(img, det, data.dict), CountMode::Types));
    }
    stats.mean_r_adv /= static_cast<double>(reward_steps);
    stats.mean_r_c /= static_cast<double>(reward_steps);
    stats.mean_r_im /= static_cast<double>(image_batch.size());
    stats.avg_concepts /= static_cast<double>(image_batch.size());
    {
        double total = 0.0;
        for (const auto& term : loss_terms) total += term.value();
        stats.pseudo_loss = total;
    }

    if (cfg.enable_sen && !sentence_batch.empty()) {
        std::vector<Tensor> sen_terms;
        for (std::size_t idx : sentence_batch) {
            const TokenSentence& clean = data.corpus.at(idx);
            TokenSentence noised = add_noise(clean, cfg.noise, rng);
            Tensor latent;
            {
                Tape::Pause no_grad;  // the encoder stays frozen on this path
                latent = encode_latent(models.dis, with_eos(noised));
            }
            auto logps = generator_logprob(models.gen, latent.detached_copy(), clean);
            sen_terms.push_back(sentence_recon_loss(logps));
        }
        Tensor l_sen = scale(add_n(sen_terms), 1.0 / static_cast<double>(sen_terms.size()));
        stats.l_sen = l_sen.value();
        loss_terms.push_back(scale(l_sen, cfg.weights.lambda_sen));
    }

    Tensor loss = add_n(loss_terms);
    tape.backward(loss);
    stats.grad_norm = adam_step(models.gen_params, gen_adam, cfg.clip_norm);
    models.zero_all_grads();
    return stats;
}

struct DisStepStats {
    double l_adv = 0.0;
    double l_im = 0.0;
    double l_sen = 0.0;
    double mean_q_real = 0.0;
    double mean_q_gen = 0.0;
    double grad_norm = 0.0;
};

// One discriminator update: adversarial loss on fresh real sentences vs
// freshly sampled rollouts (ids held constant), plus the latent projection's
// image reconstruction loss. With sen_updates_encoder the sentence
// reconstruction loss joins in to train the encoder side of the autoencoder.
inline DisStepStats discriminator_step(CaptionModels& models, const TrainDataset& data,
                                       std::span<const std::size_t> image_batch,
                                       std::span<const std::size_t> sentence_batch,
                                       const TrainConfig& cfg, AdamState& dis_adam, Rng& rng) {
    if (image_batch.empty() || sentence_batch.empty())
        throw std::invalid_argument("discriminator_step: empty batch");
    DisStepStats stats;
    Tape tape;
    Tape::Scope scope(tape);
    const double inv_b = 1.0 / static_cast<double>(image_batch.size());

    std::vector<Tensor> adv_terms, im_terms;
    long real_steps = 0, gen_steps = 0;
    for (std::size_t b = 0; b < image_batch.size(); ++b) {
        const ImageFeature& img = data.images.at(image_batch[b]);
        const TokenSentence& real = data.corpus.at(sentence_batch[b % sentence_batch.size()]);

        Rollout sampled = generator_rollout(models.gen, feature_tensor(img), DecodeMode::Sample,
                                            rng, cfg.length_cap);
        auto q_real = discriminator_score(models.dis, with_eos(real));
        auto q_gen = discriminator_score(models.dis, sampled.ids);
        adv_terms.push_back(scale(discriminator_adv_loss(q_real.q, q_gen.q), inv_b));

        for (const auto& q : q_real.q) stats.mean_q_real += q.value();
        for (const auto& q : q_gen.q) stats.mean_q_gen += q.value();
        real_steps += static_cast<long>(q_real.q.size());
        gen_steps += static_cast<long>(q_gen.q.size());

        if (cfg.enable_im) {
            Tensor latent = encode_latent(models.dis, sampled.ids);
            im_terms.push_back(scale(image_recon_loss(feature_tensor(img), latent), inv_b));
        }
    }
    stats.mean_q_real /= static_cast<double>(real_steps);
    stats.mean_q_gen /= static_cast<double>(gen_steps);

    Tensor l_adv = add_n(adv_terms);
    stats.l_adv = l_adv.value();
    Tensor loss = l_adv;
    if (!im_terms.empty()) {
        Tensor l_im = add_n(im_terms);
        stats.l_im = l_im.value();
        loss = discriminator_total_loss(l_adv, l_im, cfg.weights);
    }

    if (cfg.sen_updates_encoder && cfg.enable_sen) {
        std::vector<Tensor> sen_terms;
        for (std::size_t idx : sentence_batch) {
            const TokenSentence& clean = data.corpus.at(idx);
            TokenSentence noised = add_noise(clean, cfg.noise, rng);
            Tensor latent = encode_latent(models.dis, with_eos(noised));  // on tape
            auto logps = generator_logprob(models.gen, latent, clean);
            sen_terms.push_back(sentence_recon_loss(logps));
        }
        Tensor l_sen = scale(add_n(sen_terms), 1.0 / static_cast<double>(sen_terms.size()));
        stats.l_sen = l_sen.value();
        loss = add(loss, scale(l_sen, cfg.weights.lambda_sen));
    }

    tape.backward(loss);
    stats.grad_norm = adam_step(models.dis_params, dis_adam, cfg.clip_norm);
    models.zero_all_grads();  // clears generator grads picked up via the shared graph
    return stats;
}

// ---------------------------------------------------------------------------
// initialization pipeline
// ---------------------------------------------------------------------------

// Vocabulary ids of the dictionary concepts present in a sentence, in
// dictionary order, capped at the con2sen input limit.
inline std::vector<int> extract_concept_ids(const TokenSentence& sentence,
                                            const ConceptDictionary& dict,
                                            const Vocabulary& vocab) {
    std::vector<int> out;
    for (const auto& word : dict.words) {
        const int id = vocab.lookup(word);
        if (id == Vocabulary::kUnk) continue;
        if (std::find(sentence.ids.begin(), sentence.ids.end(), id) != sentence.ids.end()) {
            out.push_back(id);
            if (out.size() == kMaxConceptInputs) break;
        }
    }
    return out;
}

// Detection words mapped to vocabulary ids, in dictionary order.
inline std::vector<int> detection_concept_ids(const ConceptDetection& det,
                                              const ConceptDictionary& dict,
                                              const Vocabulary& vocab) {
    std::vector<std::pair<int, int>> ordered;  // (dict index, vocab id)
    for (const auto& [word, score] : det.concepts) {
        const int di = dict.index_of(word);
        const int id = vocab.lookup(word);
        if (di >= 0 && id != Vocabulary::kUnk) ordered.emplace_back(di, id);
    }
    std::sort(ordered.begin(), ordered.end());
    std::vector<int> out;
    for (const auto& [di, id] : ordered) {
        out.push_back(id);
        if (out.size() == kMaxConceptInputs) break;
    }
    return out;
}

struct InitStats {
    std::size_t con2sen_pairs = 0;
    std::size_t sentences_without_concepts = 0;
    std::size_t images_without_detections = 0;
    std::size_t pseudo_pairs = 0;
    double con2sen_final_loss = 0.0;
    double feat2sen_final_loss = 0.0;
    double disc_final_adv_loss = 0.0;
    std::vector<std::pair<std::size_t, TokenSentence>> pseudo;  // image index -> pseudo caption
};

namespace detail {

// Mean teacher-forced cross-entropy over a minibatch, one Adam step.
template <typename ScoreFn>
double supervised_step(ParamSet& params, AdamState& adam, double clip_norm,
                       const ScoreFn& score_minibatch) {
    Tape tape;
    Tape::Scope scope(tape);
    Tensor loss = score_minibatch();
    const double value = loss.value();
    tape.backward(loss);
    adam_step(params, adam, clip_norm);
    return value;
}

}  // namespace detail

// The four-stage warm start: con2sen on the corpus, pseudo captions from the
// detector + con2sen, supervised feat2sen for the generator, and adversarial
// pretraining of the discriminator against a throwaway sentence generator.
inline InitStats init_pipeline(CaptionModels& models, const TrainDataset& data,
                               const TrainConfig& cfg) {
    InitStats stats;
    Rng rng(cfg.seed + 1000003);

    // stage 1: con2sen pairs from the corpus alone
    std::vector<std::pair<std::vector<int>, std::size_t>> pairs;  // concepts -> corpus index
    for (std::size_t i = 0; i < data.corpus.size(); ++i) {
        auto concepts = extract_concept_ids(data.corpus[i], data.dict, data.vocab);
        if (concepts.empty()) {
            ++stats.sentences_without_concepts;
            continue;
        }
        pairs.emplace_back(std::move(concepts), i);
    }
    stats.con2sen_pairs = pairs.size();

    const std::size_t bsz = static_cast<std::size_t>(std::max(1, cfg.init_batch_size));
    if (!pairs.empty()) {
        AdamState adam({.lr = cfg.lr_init});
        std::vector<std::size_t> order(pairs.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        for (int epoch = 0; epoch < cfg.init_con2sen_epochs; ++epoch) {
            std::shuffle(order.begin(), order.end(), rng);
            for (std::size_t start = 0; start < order.size(); start += bsz) {
                const std::size_t end = std::min(order.size(), start + bsz);
                stats.con2sen_final_loss = detail::supervised_step(
                    models.c2s_params, adam, cfg.clip_norm, [&] {
                        std::vector<Tensor> terms;
                        for (std::size_t k = start; k < end; ++k) {
                            const auto& [concepts, ci] = pairs[order[k]];
                            terms.push_back(sentence_recon_loss(
                                con2sen_logprob(models.c2s, concepts, data.corpus[ci])));
                        }
                        return scale(add_n(terms), 1.0 / static_cast<double>(end - start));
                    });
            }
        }
        models.zero_all_grads();
    }

    // stage 2: pseudo captions for every image with detections
    for (std::size_t i = 0; i < data.images.size(); ++i) {
        auto concepts = detection_concept_ids(data.detections[i], data.dict, data.vocab);
        if (concepts.empty()) {
            ++stats.images_without_detections;
            continue;
        }
        Rollout roll = con2sen_rollout(models.c2s, concepts, DecodeMode::Greedy, rng,
                                       cfg.length_cap);
        TokenSentence pseudo = roll.sentence();
        if (pseudo.ids.empty()) {
            ++stats.images_without_detections;
            continue;
        }
        stats.pseudo.emplace_back(i, std::move(pseudo));
    }
    stats.pseudo_pairs = stats.pseudo.size();

    // stage 3: feat2sen, supervised on the pseudo pairs
    if (!stats.pseudo.empty()) {
        AdamState adam({.lr = cfg.lr_init});
        std::vector<std::size_t> order(stats.pseudo.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        for (int epoch = 0; epoch < cfg.init_feat2sen_epochs; ++epoch) {
            std::shuffle(order.begin(), order.end(), rng);
            for (std::size_t start = 0; start < order.size(); start += bsz) {
                const std::size_t end = std::min(order.size(), start + bsz);
                stats.feat2sen_final_loss = detail::supervised_step(
                    models.gen_params, adam, cfg.clip_norm, [&] {
                        std::vector<Tensor> terms;
                        for (std::size_t k = start; k < end; ++k) {
                            const auto& [img_idx, caption] = stats.pseudo[order[k]];
                            terms.push_back(sentence_recon_loss(generator_logprob(
                                models.gen, feature_tensor(data.images[img_idx]), caption)));
                        }
                        return scale(add_n(terms), 1.0 / static_cast<double>(end - start));
                    });
            }
        }
        models.zero_all_grads();
    }

    // stage 4: discriminator pretraining against a throwaway unconditional
    // sentence generator (zero feature vector in, corpus sentences as real)
    if (!data.corpus.empty() && cfg.init_disc_steps > 0) {
        Rng throwaway_rng(cfg.seed + 2000003);
        GeneratorParams throwaway = GeneratorParams::init(models.dims, throwaway_rng);
        ParamSet throwaway_params = throwaway.param_set("tmp");
        AdamState gen_adam({.lr = cfg.lr_init});
        AdamState dis_adam({.lr = cfg.lr_init});
        const Tensor zero_feat = Tensor::zeros({models.dims.feat_dim});

        for (int step = 0; step < cfg.init_disc_steps; ++step) {
            // discriminator side: real vs throwaway samples
            {
                Tape tape;
                Tape::Scope scope(tape);
                std::vector<Tensor> terms;
                for (std::size_t b = 0; b < bsz; ++b) {
                    const TokenSentence& real =
                        data.corpus[uniform_index(rng, data.corpus.size())];
                    Rollout fake = generator_rollout(throwaway, zero_feat, DecodeMode::Sample,
                                                     rng, cfg.length_cap);
                    auto q_real = discriminator_score(models.dis, with_eos(real));
                    auto q_gen = discriminator_score(models.dis, fake.ids);
                    terms.push_back(scale(discriminator_adv_loss(q_real.q, q_gen.q),
                                          1.0 / static_cast<double>(bsz)));
                }
                Tensor loss = add_n(terms);
                stats.disc_final_adv_loss = loss.value();
                tape.backward(loss);
                adam_step(models.dis_params, dis_adam, cfg.clip_norm);
                models.zero_all_grads();
            }
            // generator side: adversarial-only REINFORCE with self-critic
            {
                Tape tape;
                Tape::Scope scope(tape);
                std::vector<Tensor> terms;
                for (std::size_t b = 0; b < bsz; ++b) {
                    Rollout sampled;
                    Rollout greedy;
                    std::vector<double> g_sample, g_greedy;
                    {
                        Tape::Pause no_grad;
                        sampled = generator_rollout(throwaway, zero_feat, DecodeMode::Sample,
                                                    rng, cfg.length_cap);
                        greedy = generator_rollout(throwaway, zero_feat, DecodeMode::Greedy, rng,
                                                   cfg.length_cap);
                        auto price = [&](const Rollout& roll) {
                            auto q = discriminator_score(models.dis, roll.ids);
                            std::vector<double> qv;
                            for (const auto& t : q.q) qv.push_back(t.value());
                            RewardTrace trace;
                            trace.r_adv = adversarial_reward(qv);
                            trace.r_c.assign(qv.size(), 0.0);
                            return compute_returns(trace, cfg.weights,
                                                   cfg.literal_gamma_exponent);
                        };
                        g_sample = price(sampled);
                        g_greedy = price(greedy);
                    }
                    auto rescored = generator_score_ids(throwaway, zero_feat, sampled.ids);
                    for (std::size_t t = 0; t < rescored.size(); ++t) {
                        const double adv = g_sample[t] - baseline_at(g_greedy, t);
                        terms.push_back(scale(rescored[t], -adv / static_cast<double>(bsz)));
                    }
                }
                tape.backward(add_n(terms));
                adam_step(throwaway_params, gen_adam, cfg.clip_norm);
                models.zero_all_grads();
                throwaway_params.zero_grad();
            }
        }
    }
    return stats;
}

// ---------------------------------------------------------------------------
// training loop
// ---------------------------------------------------------------------------

using CheckpointHook = std::function<void(int step, const CaptionModels&, const TrainLog&)>;

// Alternates one generator step and one discriminator step per iteration.
// Deterministic under cfg.seed.
inline TrainLog train(CaptionModels& models, const TrainDataset& data, const TrainConfig& cfg,
                      const CheckpointHook& hook = {}) {
    TrainLog log;
    if (cfg.steps <= 0) return log;
    if (data.images.empty() || data.corpus.empty())
        throw std::invalid_argument("train: dataset has no images or corpus");
    Rng rng(cfg.seed);
    AdamState gen_adam({.lr = cfg.lr_main});
    AdamState dis_adam({.lr = cfg.lr_main});

    const std::size_t bsz = static_cast<std::size_t>(std::max(1, cfg.batch_size));
    auto draw = [&](std::size_t limit) {
        std::vector<std::size_t> batch(bsz);
        for (auto& v : batch) v = uniform_index(rng, limit);
        return batch;
    };

    for (int step = 1; step <= cfg.steps; ++step) {
        auto gen_images = draw(data.images.size());
        auto gen_sentences = draw(data.corpus.size());
        GenStepStats g = generator_step(models, data, gen_images, gen_sentences, cfg, gen_adam, rng);

        auto dis_images = draw(data.images.size());
        auto dis_sentences = draw(data.corpus.size());  // fresh real batch
        DisStepStats d =
            discriminator_step(models, data, dis_images, dis_sentences, cfg, dis_adam, rng);

        TrainLogRow row;
        row.step = step;
        row.l_adv = d.l_adv;
        row.l_im = d.l_im;
        row.l_sen = g.l_sen;
        row.mean_r_adv = g.mean_r_adv;
        row.mean_r_c = g.mean_r_c;
        row.mean_r_im = g.mean_r_im;
        row.avg_concepts = g.avg_concepts;
        log.rows.push_back(row);

        if (hook && cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0)
            hook(step, models, log);
    }
    if (hook && !(cfg.checkpoint_every > 0 && cfg.steps % cfg.checkpoint_every == 0))
        hook(cfg.steps, models, log);
    return log;
}

}  // namespace ucap
