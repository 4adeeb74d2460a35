#pragma once

#include <algorithm>
#include <span>
#include <string>
#include <vector>

#include "ucap/autodiff.hpp"
#include "ucap/lstm.hpp"
#include "ucap/optim.hpp"
#include "ucap/rng.hpp"
#include "ucap/vocab.hpp"

namespace ucap {

struct ModelDims {
    int vocab_size = 0;
    std::size_t hidden = 512;   // LSTM hidden size, also the embedding width
    std::size_t feat_dim = 64;  // image-feature / latent-space dimension
};

enum class DecodeMode { Sample, Greedy };

// One generated sentence: sampled ids s_1..s_n where s_n is the terminal EOS.
struct Rollout {
    std::vector<int> ids;
    std::vector<double> log_probs;  // log p_t(s_t) per step
    std::vector<double> q;          // discriminator per-prefix P(real); filled by scoring
    bool greedy = false;

    std::size_t n() const { return ids.size(); }

    // Interior words only; terminal EOS (and any stray SOS an untrained model
    // sampled) are dropped.
    TokenSentence sentence() const {
        TokenSentence s;
        for (int id : ids)
            if (id != Vocabulary::kEos && id != Vocabulary::kSos) s.ids.push_back(id);
        return s;
    }
};

namespace detail {

// The decoding surface shared by the generator and the con2sen decoder:
// word embedding in, next-word logits out.
struct DecoderRef {
    const Tensor& embed;
    const LstmWeights& lstm;
    const Tensor& out_w;
    const Tensor& out_b;
};

inline Tensor decoder_logits(const DecoderRef& dec, const LstmState& state) {
    return add(matvec(dec.out_w, state.h), dec.out_b);
}

inline std::vector<double> softmax_values_of(const Tensor& logits) {
    return softmax_values(logits.data());
}

// Autoregressive decode from an initial state. Sampling/greedy choice per
// step; EOS is forced once max_words interior words have been emitted.
inline Rollout rollout_from_state(const DecoderRef& dec, LstmState state, DecodeMode mode,
                                  Rng& rng, std::size_t max_words) {
    Tape::Pause no_grad;  // gradients come from teacher-forced re-scoring, never from here
    Rollout out;
    out.greedy = mode == DecodeMode::Greedy;
    state = lstm_cell(dec.lstm, embedding_row(dec.embed, Vocabulary::kSos), state);
    std::size_t words = 0;
    while (true) {
        const Tensor logits = decoder_logits(dec, state);
        const auto probs = softmax_values_of(logits);
        std::size_t id;
        if (words >= max_words) {
            id = Vocabulary::kEos;
        } else if (mode == DecodeMode::Greedy) {
            id = argmax_index(probs);
        } else {
            id = sample_index(probs, rng);
        }
        out.ids.push_back(static_cast<int>(id));
        out.log_probs.push_back(std::log(probs[id]));
        if (id == Vocabulary::kEos) break;
        ++words;
        state = lstm_cell(dec.lstm, embedding_row(dec.embed, id), state);
    }
    return out;
}

// Teacher forcing over a raw id sequence ending in EOS (a rollout's own ids,
// for instance); returns one log-prob per id.
inline std::vector<Tensor> score_id_sequence(const DecoderRef& dec, LstmState state,
                                             std::span<const int> ids) {
    if (ids.empty()) throw std::invalid_argument("score_id_sequence: empty sequence");
    if (ids.back() != Vocabulary::kEos)
        throw std::invalid_argument("score_id_sequence: sequence must end with EOS");
    const int vocab = static_cast<int>(dec.embed.dim(0));
    for (std::size_t t = 0; t < ids.size(); ++t) {
        if (ids[t] < 0 || ids[t] >= vocab)
            throw std::invalid_argument("score_id_sequence: invalid id " + std::to_string(ids[t]));
        if (ids[t] == Vocabulary::kEos && t + 1 != ids.size())
            throw std::invalid_argument("score_id_sequence: interior EOS");
    }
    std::vector<Tensor> logps;
    logps.reserve(ids.size());
    int prev = Vocabulary::kSos;
    for (int id : ids) {
        state = lstm_cell(dec.lstm, embedding_row(dec.embed, static_cast<std::size_t>(prev)), state);
        logps.push_back(log_softmax_pick(decoder_logits(dec, state), static_cast<std::size_t>(id)));
        prev = id;
    }
    return logps;
}

// Teacher forcing of a sentence target: per-step log-prob of each target
// word plus the terminal EOS (length() + 1 scalars).
inline std::vector<Tensor> teacher_forced_logprobs(const DecoderRef& dec, LstmState state,
                                                   const TokenSentence& target) {
    if (target.ids.empty())
        throw std::invalid_argument("teacher_forced_logprobs: empty target");
    for (int id : target.ids)
        if (id == Vocabulary::kSos || id == Vocabulary::kEos)
            throw std::invalid_argument("teacher_forced_logprobs: reserved id in target interior");
    std::vector<int> ids = target.ids;
    ids.push_back(Vocabulary::kEos);
    return score_id_sequence(dec, std::move(state), ids);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// generator
// ---------------------------------------------------------------------------

struct GeneratorParams {
    ModelDims dims;
    Tensor in_proj_w;  // [hidden x feat_dim], maps f_im to the step -1 input
    Tensor in_proj_b;  // [hidden]
    Tensor embed;      // [V x hidden]
    LstmWeights lstm;  // input hidden, state hidden
    Tensor out_w;      // [V x hidden]
    Tensor out_b;      // [V]

    static GeneratorParams init(const ModelDims& dims, Rng& rng) {
        GeneratorParams g;
        g.dims = dims;
        g.in_proj_w = Tensor::param({dims.hidden, dims.feat_dim}, rng);
        g.in_proj_b = Tensor::param_zeros({dims.hidden});
        g.embed = Tensor::param({static_cast<std::size_t>(dims.vocab_size), dims.hidden}, rng);
        g.lstm = LstmWeights::init(dims.hidden, dims.hidden, rng);
        g.out_w = Tensor::param({static_cast<std::size_t>(dims.vocab_size), dims.hidden}, rng);
        g.out_b = Tensor::param_zeros({static_cast<std::size_t>(dims.vocab_size)});
        return g;
    }

    ParamSet param_set(const std::string& prefix = "gen") const {
        ParamSet p;
        p.add(prefix + ".in_proj.w", in_proj_w);
        p.add(prefix + ".in_proj.b", in_proj_b);
        p.add(prefix + ".embed", embed);
        lstm.register_params(p, prefix + ".lstm");
        p.add(prefix + ".out.w", out_w);
        p.add(prefix + ".out.b", out_b);
        return p;
    }

    detail::DecoderRef decoder() const { return {embed, lstm, out_w, out_b}; }
};

// Runs the projected feature through the LSTM as the step -1 input.
inline LstmState generator_init_state(const GeneratorParams& gen, const Tensor& feature) {
    if (feature.rank() != 1 || feature.dim(0) != gen.dims.feat_dim)
        throw std::invalid_argument("generator: feature has shape " + shape_str(feature.shape()) +
                                    ", expected [" + std::to_string(gen.dims.feat_dim) + "]");
    Tensor x = add(matvec(gen.in_proj_w, feature), gen.in_proj_b);
    return lstm_cell(gen.lstm, x, LstmState::zeros(gen.dims.hidden));
}

inline Rollout generator_rollout(const GeneratorParams& gen, const Tensor& feature,
                                 DecodeMode mode, Rng& rng, std::size_t max_words) {
    Tape::Pause no_grad;
    return detail::rollout_from_state(gen.decoder(), generator_init_state(gen, feature), mode, rng,
                                      max_words);
}

// Teacher-forced scoring of a target sentence; per-step log-probs include the
// terminal EOS. Runs on the active tape, so gradients flow to the generator
// (and to `feature` if it is itself tape-connected).
inline std::vector<Tensor> generator_logprob(const GeneratorParams& gen, const Tensor& feature,
                                             const TokenSentence& target) {
    return detail::teacher_forced_logprobs(gen.decoder(), generator_init_state(gen, feature), target);
}

// Re-scores a rollout's own id sequence (terminal EOS included) under the
// current parameters; the differentiable path behind every policy-gradient
// step.
inline std::vector<Tensor> generator_score_ids(const GeneratorParams& gen, const Tensor& feature,
                                               std::span<const int> ids) {
    return detail::score_id_sequence(gen.decoder(), generator_init_state(gen, feature), ids);
}

// ---------------------------------------------------------------------------
// discriminator
// ---------------------------------------------------------------------------

struct DiscriminatorParams {
    ModelDims dims;
    Tensor embed;      // [V x hidden]; may alias the generator table when shared
    LstmWeights lstm;
    Tensor score_w;    // [hidden], real/fake head
    Tensor score_b;    // [1]
    Tensor latent_w;   // [feat_dim x hidden], latent projection of Eq-style x'
    Tensor latent_b;   // [feat_dim]
    bool shared_embedding = false;

    static DiscriminatorParams init(const ModelDims& dims, Rng& rng,
                                    const Tensor* shared_embed = nullptr) {
        DiscriminatorParams d;
        d.dims = dims;
        if (shared_embed) {
            d.embed = *shared_embed;
            d.shared_embedding = true;
        } else {
            d.embed = Tensor::param({static_cast<std::size_t>(dims.vocab_size), dims.hidden}, rng);
        }
        d.lstm = LstmWeights::init(dims.hidden, dims.hidden, rng);
        d.score_w = Tensor::param({dims.hidden}, rng);
        d.score_b = Tensor::param_zeros({1});
        d.latent_w = Tensor::param({dims.feat_dim, dims.hidden}, rng);
        d.latent_b = Tensor::param_zeros({dims.feat_dim});
        return d;
    }

    // A shared embedding belongs to the generator's set and is updated there.
    ParamSet param_set(const std::string& prefix = "dis") const {
        ParamSet p;
        if (!shared_embedding) p.add(prefix + ".embed", embed);
        lstm.register_params(p, prefix + ".lstm");
        p.add(prefix + ".score.w", score_w);
        p.add(prefix + ".score.b", score_b);
        p.add(prefix + ".latent.w", latent_w);
        p.add(prefix + ".latent.b", latent_b);
        return p;
    }
};

struct DiscriminatorScore {
    std::vector<Tensor> q;  // per-prefix P(real), scalar tensors
    LstmState final_state;
};

// Scores every prefix of the id sequence (which should include the terminal
// EOS). q_t depends only on the first t words by construction.
inline DiscriminatorScore discriminator_score(const DiscriminatorParams& dis,
                                              std::span<const int> ids) {
    if (ids.empty()) throw std::invalid_argument("discriminator_score: empty sentence");
    DiscriminatorScore out;
    LstmState state = LstmState::zeros(dis.dims.hidden);
    for (int id : ids) {
        if (id < 0 || id >= dis.dims.vocab_size)
            throw std::invalid_argument("discriminator_score: invalid id " + std::to_string(id));
        state = lstm_cell(dis.lstm, embedding_row(dis.embed, static_cast<std::size_t>(id)), state);
        out.q.push_back(sigmoid(add(dot(dis.score_w, state.h), dis.score_b)));
    }
    out.final_state = state;
    return out;
}

// Projects the final hidden state into the image-feature space (the common
// latent space of this model family).
inline Tensor encode_latent(const DiscriminatorParams& dis, std::span<const int> ids) {
    if (ids.empty()) throw std::invalid_argument("encode_latent: empty sentence");
    LstmState state = LstmState::zeros(dis.dims.hidden);
    for (int id : ids)
        state = lstm_cell(dis.lstm, embedding_row(dis.embed, static_cast<std::size_t>(id)), state);
    return add(matvec(dis.latent_w, state.h), dis.latent_b);
}

// Appends the terminal EOS so corpus sentences are scored the same way
// generated rollouts are.
inline std::vector<int> with_eos(const TokenSentence& s) {
    std::vector<int> ids = s.ids;
    ids.push_back(Vocabulary::kEos);
    return ids;
}

// ---------------------------------------------------------------------------
// con2sen (concept words -> sentence)
// ---------------------------------------------------------------------------

struct Con2SenParams {
    ModelDims dims;
    Tensor embed;       // shared by encoder input and decoder input
    LstmWeights enc;
    LstmWeights dec;
    Tensor out_w;
    Tensor out_b;

    static Con2SenParams init(const ModelDims& dims, Rng& rng) {
        Con2SenParams c;
        c.dims = dims;
        c.embed = Tensor::param({static_cast<std::size_t>(dims.vocab_size), dims.hidden}, rng);
        c.enc = LstmWeights::init(dims.hidden, dims.hidden, rng);
        c.dec = LstmWeights::init(dims.hidden, dims.hidden, rng);
        c.out_w = Tensor::param({static_cast<std::size_t>(dims.vocab_size), dims.hidden}, rng);
        c.out_b = Tensor::param_zeros({static_cast<std::size_t>(dims.vocab_size)});
        return c;
    }

    ParamSet param_set(const std::string& prefix = "c2s") const {
        ParamSet p;
        p.add(prefix + ".embed", embed);
        enc.register_params(p, prefix + ".enc");
        dec.register_params(p, prefix + ".dec");
        p.add(prefix + ".out.w", out_w);
        p.add(prefix + ".out.b", out_b);
        return p;
    }

    detail::DecoderRef decoder() const { return {embed, dec, out_w, out_b}; }
};

inline constexpr std::size_t kMaxConceptInputs = 10;

// Encoder pass over concept-word embeddings. Callers supply the ids already
// in concept-dictionary order; both encoder state halves seed the decoder.
inline LstmState con2sen_encode(const Con2SenParams& c2s, std::span<const int> concept_ids) {
    if (concept_ids.empty())
        throw std::invalid_argument("con2sen: empty concept list");
    if (concept_ids.size() > kMaxConceptInputs)
        throw std::invalid_argument("con2sen: more than " + std::to_string(kMaxConceptInputs) +
                                    " concepts");
    LstmState state = LstmState::zeros(c2s.dims.hidden);
    for (int id : concept_ids) {
        if (id < 0 || id >= c2s.dims.vocab_size)
            throw std::invalid_argument("con2sen: invalid concept id " + std::to_string(id));
        state = lstm_cell(c2s.enc, embedding_row(c2s.embed, static_cast<std::size_t>(id)), state);
    }
    return state;
}

inline Rollout con2sen_rollout(const Con2SenParams& c2s, std::span<const int> concept_ids,
                               DecodeMode mode, Rng& rng, std::size_t max_words) {
    Tape::Pause no_grad;
    return detail::rollout_from_state(c2s.decoder(), con2sen_encode(c2s, concept_ids), mode, rng,
                                      max_words);
}

inline std::vector<Tensor> con2sen_logprob(const Con2SenParams& c2s,
                                           std::span<const int> concept_ids,
                                           const TokenSentence& target) {
    return detail::teacher_forced_logprobs(c2s.decoder(), con2sen_encode(c2s, concept_ids), target);
}

// ---------------------------------------------------------------------------
// beam search
// ---------------------------------------------------------------------------

namespace detail {

struct BeamHyp {
    LstmState state;
    std::vector<int> ids;  // interior words only
    double sum_logp = 0.0;
};

struct FinishedHyp {
    std::vector<int> ids;   // interior words only
    double sum_logp = 0.0;  // includes the EOS step
    // normalization counts every scored step, EOS included
    double norm() const { return sum_logp / static_cast<double>(ids.size() + 1); }
};

// Length-normalized beam search over a decoder. The greedy hypothesis is
// always part of the final pool, so the result never scores below greedy.
inline TokenSentence beam_search_decode(const DecoderRef& dec, const LstmState& init,
                                        std::size_t beam_size, std::size_t max_words, Rng& rng) {
    if (beam_size < 1) throw std::invalid_argument("beam_search: beam_size must be >= 1");
    Tape::Pause no_grad;
    const LstmState start = lstm_cell(dec.lstm, embedding_row(dec.embed, Vocabulary::kSos), init);

    std::vector<FinishedHyp> finished;
    std::vector<BeamHyp> live;
    live.push_back({start, {}, 0.0});
    for (std::size_t step = 0; step <= max_words && !live.empty(); ++step) {
        struct Cand {
            std::size_t beam;
            std::size_t token;
            double score;
        };
        std::vector<Cand> cands;
        std::vector<std::vector<double>> logps(live.size());
        for (std::size_t b = 0; b < live.size(); ++b) {
            const auto probs = softmax_values_of(decoder_logits(dec, live[b].state));
            logps[b].resize(probs.size());
            for (std::size_t v = 0; v < probs.size(); ++v) {
                logps[b][v] = std::log(probs[v]);
                if (step == max_words && v != Vocabulary::kEos) continue;  // cap: EOS only
                cands.push_back({b, v, live[b].sum_logp + logps[b][v]});
            }
        }
        std::stable_sort(cands.begin(), cands.end(),
                         [](const Cand& a, const Cand& b) { return a.score > b.score; });
        // only the top beam_size candidates survive; an EOS hypothesis
        // consumes its slot and moves to the finished pool, which keeps
        // beam_size=1 identical to greedy decoding
        std::vector<BeamHyp> next;
        std::size_t taken = 0;
        for (const Cand& c : cands) {
            if (taken >= beam_size) break;
            ++taken;
            if (c.token == Vocabulary::kEos) {
                finished.push_back({live[c.beam].ids, c.score});
            } else {
                BeamHyp hyp;
                hyp.ids = live[c.beam].ids;
                hyp.ids.push_back(static_cast<int>(c.token));
                hyp.sum_logp = c.score;
                hyp.state = lstm_cell(dec.lstm,
                                      embedding_row(dec.embed, c.token), live[c.beam].state);
                next.push_back(std::move(hyp));
            }
        }
        live = std::move(next);
    }

    // the greedy hypothesis joins the pool
    {
        Rollout greedy = rollout_from_state(dec, init, DecodeMode::Greedy, rng, max_words);
        FinishedHyp g;
        g.ids.assign(greedy.ids.begin(), greedy.ids.end() - 1);  // drop terminal EOS
        for (double lp : greedy.log_probs) g.sum_logp += lp;
        finished.push_back(std::move(g));
    }

    auto to_sentence = [](const std::vector<int>& ids) {
        TokenSentence s;
        for (int id : ids)
            if (id != Vocabulary::kSos) s.ids.push_back(id);
        return s;
    };
    const FinishedHyp* best = nullptr;
    for (const auto& h : finished) {
        if (to_sentence(h.ids).ids.empty()) continue;  // captions carry at least one word
        if (!best || h.norm() > best->norm()) best = &h;
    }
    if (!best) {
        // degenerate model that opens with EOS everywhere: emit the most
        // likely real word instead
        const auto probs = softmax_values_of(decoder_logits(dec, start));
        std::size_t argv = Vocabulary::kUnk;
        double bestp = -1.0;
        for (std::size_t v = 0; v < probs.size(); ++v) {
            if (v == Vocabulary::kSos || v == Vocabulary::kEos) continue;
            if (probs[v] > bestp) {
                bestp = probs[v];
                argv = v;
            }
        }
        return TokenSentence{{static_cast<int>(argv)}};
    }
    return to_sentence(best->ids);
}

}  // namespace detail

inline TokenSentence beam_search(const GeneratorParams& gen, const Tensor& feature,
                                 std::size_t beam_size, std::size_t max_words) {
    Tape::Pause no_grad;
    Rng rng(0);  // greedy decode inside uses no randomness
    return detail::beam_search_decode(gen.decoder(), generator_init_state(gen, feature), beam_size,
                                      max_words, rng);
}

}  // namespace ucap
