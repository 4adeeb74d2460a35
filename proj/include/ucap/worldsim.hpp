#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "ucap/io.hpp"
#include "ucap/rng.hpp"

namespace ucap {

// One image as the pipeline sees it: an id, a feature vector, and (synthetic
// worlds only) the ground-truth concept indices used for evaluation.
struct ImageFeature {
    std::string id;
    std::vector<double> vec;
    std::vector<int> truth;  // indices into the concept dictionary; empty for real data
};

struct ConceptDetection {
    // (concept word, confidence in [0,1]); words unique, highest confidence kept
    std::vector<std::pair<std::string, double>> concepts;

    void add(const std::string& word, double score) {
        for (auto& [w, s] : concepts) {
            if (w == word) {
                s = std::max(s, score);
                return;
            }
        }
        concepts.emplace_back(word, score);
    }
};

struct ConceptDictionary {
    std::vector<std::string> words;

    int index_of(const std::string& word) const {
        for (std::size_t i = 0; i < words.size(); ++i)
            if (words[i] == word) return static_cast<int>(i);
        return -1;
    }

    void save(const std::filesystem::path& path) const {
        atomic_write_file(path, [&](std::ostream& out) {
            for (const auto& w : words) out << w << '\n';
        });
    }

    static ConceptDictionary load(const std::filesystem::path& path) {
        std::ifstream in(path);
        if (!in) throw std::runtime_error("cannot open concept dictionary: " + path.string());
        ConceptDictionary dict;
        std::string line;
        while (std::getline(in, line)) {
            if (!line.empty() && line.back() == '\r') line.pop_back();
            if (!line.empty()) dict.words.push_back(line);
        }
        if (dict.words.empty())
            throw std::runtime_error("concept dictionary is empty: " + path.string());
        return dict;
    }
};

namespace detail {

inline const char* kConceptNames[] = {
    "dog", "cat", "car", "tree", "house", "bird", "boat", "chair", "horse", "sheep",
    "train", "plane", "apple", "table", "river", "flower", "clock", "bottle", "shirt", "phone",
    "bridge", "guitar", "lamp", "book", "fish", "mountain", "cloud", "door", "window", "street",
    "garden", "bicycle", "cup", "hat", "shoe", "ball", "box", "key", "coin", "leaf"};

}  // namespace detail

inline std::string concept_name(std::size_t index) {
    constexpr std::size_t named = sizeof(detail::kConceptNames) / sizeof(char*);
    if (index < named) return detail::kConceptNames[index];
    return "object" + std::to_string(index);
}

struct WorldConfig {
    std::uint64_t seed = 1;
    std::size_t num_concepts = 20;
    std::size_t num_images = 500;
    std::size_t feat_dim = 64;
    double noise_sigma = 0.05;
    std::size_t min_concepts_per_image = 1;
    std::size_t max_concepts_per_image = 4;
};

struct World {
    ConceptDictionary dict;
    std::vector<std::vector<double>> patterns;  // one unit vector per concept
    std::vector<ImageFeature> images;
};

// Synthetic image set: each image carries 1..4 ground-truth concepts and a
// feature equal to the sum of those concepts' fixed unit patterns plus
// isotropic Gaussian noise. Fully determined by the seed.
inline World gen_world(const WorldConfig& cfg) {
    if (cfg.num_concepts > cfg.feat_dim)
        throw std::invalid_argument("gen_world: num_concepts must not exceed feat_dim");
    if (cfg.min_concepts_per_image < 1 || cfg.max_concepts_per_image < cfg.min_concepts_per_image)
        throw std::invalid_argument("gen_world: bad concepts-per-image range");
    Rng rng(cfg.seed);
    World world;
    for (std::size_t c = 0; c < cfg.num_concepts; ++c) world.dict.words.push_back(concept_name(c));

    for (std::size_t c = 0; c < cfg.num_concepts; ++c) {
        std::vector<double> pat(cfg.feat_dim);
        double norm = 0.0;
        for (double& v : pat) {
            v = gaussian(rng, 0.0, 1.0);
            norm += v * v;
        }
        norm = std::sqrt(norm);
        for (double& v : pat) v /= norm;
        world.patterns.push_back(std::move(pat));
    }

    const std::size_t max_k = std::min(cfg.max_concepts_per_image, cfg.num_concepts);
    for (std::size_t i = 0; i < cfg.num_images; ++i) {
        ImageFeature img;
        img.id = "img" + std::to_string(i);
        const std::size_t k =
            cfg.min_concepts_per_image + uniform_index(rng, max_k - cfg.min_concepts_per_image + 1);
        std::set<int> chosen;
        while (chosen.size() < k)
            chosen.insert(static_cast<int>(uniform_index(rng, cfg.num_concepts)));
        img.truth.assign(chosen.begin(), chosen.end());
        img.vec.assign(cfg.feat_dim, 0.0);
        for (int c : img.truth)
            for (std::size_t d = 0; d < cfg.feat_dim; ++d) img.vec[d] += world.patterns[c][d];
        for (double& v : img.vec) v += gaussian(rng, 0.0, cfg.noise_sigma);
        world.images.push_back(std::move(img));
    }
    return world;
}

struct DetectorConfig {
    double p_miss = 0.1;    // probability a true concept goes unreported
    double p_false = 0.02;  // probability a non-truth concept is falsely reported
};

// Noisy stub detector over the synthetic ground truth: hits carry high
// confidence, false positives low confidence.
inline ConceptDetection detect_concepts(const ImageFeature& img, const ConceptDictionary& dict,
                                        const DetectorConfig& cfg, Rng& rng) {
    if (dict.words.empty()) throw std::invalid_argument("detect_concepts: empty dictionary");
    ConceptDetection det;
    std::set<int> truth(img.truth.begin(), img.truth.end());
    for (std::size_t c = 0; c < dict.words.size(); ++c) {
        if (truth.count(static_cast<int>(c))) {
            if (!bernoulli(rng, cfg.p_miss))
                det.add(dict.words[c], uniform(rng, 0.6, 1.0));
        } else if (bernoulli(rng, cfg.p_false)) {
            det.add(dict.words[c], uniform(rng, 0.1, 0.5));
        }
    }
    return det;
}

// Fixed sentence templates; "{c}" marks a concept slot. Every template
// tokenizes to at least eight words so the generated corpus survives the
// corpus filter untouched.
inline const std::vector<std::string>& default_templates() {
    static const std::vector<std::string> templates = {
        "a photo of a {c} in the room with light",
        "there is a {c} near the old wooden table",
        "the picture shows a {c} and a {c} together outside",
        "you can see a {c} standing by the water",
        "a {c} with a {c} appears in this scene",
        "someone took a photo of the {c} last summer",
        "an image of a {c} taken on a sunny day",
        "the {c} sits quietly beside a small green plant",
        "a very nice {c} seen from a short distance",
        "people often walk past the {c} in the morning",
        "the {c} and the {c} share the bright frame",
        "a close view of a {c} against a plain wall",
    };
    return templates;
}

inline std::size_t count_slots(const std::string& tmpl) {
    std::size_t count = 0;
    for (std::size_t pos = tmpl.find("{c}"); pos != std::string::npos;
         pos = tmpl.find("{c}", pos + 3))
        ++count;
    return count;
}

// Generates an unaligned description corpus: each sentence instantiates a
// random template with concepts drawn from one ground-truth set. The output
// keeps no record of which image the set came from.
inline std::vector<std::string> synth_corpus(const std::vector<std::vector<int>>& truth_sets,
                                             const ConceptDictionary& dict,
                                             const std::vector<std::string>& templates,
                                             std::size_t num_sentences, Rng& rng) {
    for (const auto& tmpl : templates)
        if (count_slots(tmpl) == 0)
            throw std::invalid_argument("synth_corpus: template without concept slot: " + tmpl);
    std::vector<std::string> corpus;
    if (truth_sets.empty()) return corpus;
    corpus.reserve(num_sentences);
    for (std::size_t s = 0; s < num_sentences; ++s) {
        const auto& concepts = truth_sets[uniform_index(rng, truth_sets.size())];
        // pick a template whose slot count the concept set can fill
        std::string tmpl;
        std::size_t slots = 0;
        for (int attempt = 0; attempt < 64; ++attempt) {
            tmpl = templates[uniform_index(rng, templates.size())];
            slots = count_slots(tmpl);
            if (slots <= concepts.size()) break;
        }
        if (slots > concepts.size()) {
            tmpl = templates[0];
            slots = count_slots(tmpl);
        }
        std::vector<int> pool = concepts;
        std::string sentence = tmpl;
        for (std::size_t slot = 0; slot < slots; ++slot) {
            const std::size_t pick = uniform_index(rng, pool.size());
            const std::string word = dict.words.at(pool[pick]);
            pool.erase(pool.begin() + static_cast<long>(pick));
            sentence.replace(sentence.find("{c}"), 3, word);
        }
        corpus.push_back(std::move(sentence));
    }
    return corpus;
}

// ---------------------------------------------------------------------------
// dataset files
// ---------------------------------------------------------------------------

// Features file: magic "UFEA1", u32 dim, then records of
// u16 id length + id bytes + dim * f32 (little-endian).
inline constexpr char kFeaturesMagic[5] = {'U', 'F', 'E', 'A', '1'};

inline void save_features(const std::filesystem::path& path,
                          const std::vector<ImageFeature>& images, std::uint32_t dim) {
    atomic_write_file(path, [&](std::ostream& out) {
        write_bytes(out, kFeaturesMagic, sizeof(kFeaturesMagic));
        write_scalar<std::uint32_t>(out, dim);
        for (const auto& img : images) {
            if (img.vec.size() != dim)
                throw std::invalid_argument("save_features: record " + img.id + " has dimension " +
                                            std::to_string(img.vec.size()) + ", file expects " +
                                            std::to_string(dim));
            write_scalar<std::uint16_t>(out, static_cast<std::uint16_t>(img.id.size()));
            write_bytes(out, img.id.data(), img.id.size());
            for (double v : img.vec) write_scalar<float>(out, static_cast<float>(v));
        }
    }, /*binary=*/true);
}

inline std::vector<ImageFeature> load_features(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open features file: " + path.string());
    char magic[sizeof(kFeaturesMagic)];
    read_bytes(in, magic, sizeof(magic), "features magic");
    if (std::memcmp(magic, kFeaturesMagic, sizeof(magic)) != 0)
        throw std::runtime_error("not a features file (bad magic): " + path.string());
    const auto dim = read_scalar<std::uint32_t>(in, "feature dim");
    std::vector<ImageFeature> images;
    while (true) {
        std::uint16_t id_len;
        in.read(reinterpret_cast<char*>(&id_len), sizeof(id_len));
        if (in.eof()) break;
        if (!in) throw std::runtime_error("truncated features file: " + path.string());
        ImageFeature img;
        img.id.resize(id_len);
        read_bytes(in, img.id.data(), id_len, "record id");
        img.vec.resize(dim);
        for (auto& v : img.vec)
            v = static_cast<double>(read_scalar<float>(in, ("record " + img.id).c_str()));
        images.push_back(std::move(img));
    }
    return images;
}

struct DetectionLoadResult {
    std::unordered_map<std::string, ConceptDetection> by_id;
    std::vector<std::string> ids;          // file order
    std::size_t skipped_concepts = 0;      // unknown concept words dropped
    std::size_t rejected_records = 0;      // malformed or out-of-range records
    std::vector<std::string> warnings;
};

// Detections file: JSON lines {"id": str, "concepts": [{"name": str, "score": float}]}.
// Unknown concept words are dropped with a warning; a record with any score
// outside [0,1] is rejected whole.
inline DetectionLoadResult load_detections(const std::filesystem::path& path,
                                           const ConceptDictionary& dict) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open detections file: " + path.string());
    DetectionLoadResult result;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        nlohmann::json rec;
        try {
            rec = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception&) {
            ++result.rejected_records;
            result.warnings.push_back("line " + std::to_string(line_no) + ": parse error");
            continue;
        }
        if (!rec.contains("id") || !rec["id"].is_string() || !rec.contains("concepts") ||
            !rec["concepts"].is_array()) {
            ++result.rejected_records;
            result.warnings.push_back("line " + std::to_string(line_no) + ": missing id/concepts");
            continue;
        }
        const std::string id = rec["id"].get<std::string>();
        ConceptDetection det;
        bool ok = true;
        for (const auto& c : rec["concepts"]) {
            if (!c.contains("name") || !c.contains("score") || !c["score"].is_number()) {
                ok = false;
                break;
            }
            const double score = c["score"].get<double>();
            if (score < 0.0 || score > 1.0) {
                ok = false;
                break;
            }
            const std::string name = c["name"].get<std::string>();
            if (dict.index_of(name) < 0) {
                ++result.skipped_concepts;
                result.warnings.push_back("record " + id + ": unknown concept '" + name + "'");
                continue;
            }
            det.add(name, score);
        }
        if (!ok) {
            ++result.rejected_records;
            result.warnings.push_back("record " + id + ": invalid concept entry");
            continue;
        }
        if (!result.by_id.count(id)) result.ids.push_back(id);
        result.by_id[id] = std::move(det);
    }
    return result;
}

inline void save_detections(const std::filesystem::path& path,
                            const std::vector<std::string>& ids,
                            const std::vector<ConceptDetection>& detections) {
    if (ids.size() != detections.size())
        throw std::invalid_argument("save_detections: ids/detections size mismatch");
    atomic_write_file(path, [&](std::ostream& out) {
        for (std::size_t i = 0; i < ids.size(); ++i) {
            nlohmann::json rec;
            rec["id"] = ids[i];
            rec["concepts"] = nlohmann::json::array();
            for (const auto& [word, score] : detections[i].concepts)
                rec["concepts"].push_back({{"name", word}, {"score", score}});
            out << rec.dump() << '\n';
        }
    });
}

}  // namespace ucap
