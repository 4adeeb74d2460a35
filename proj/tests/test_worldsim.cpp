#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "ucap/vocab.hpp"
#include "ucap/worldsim.hpp"

using namespace ucap;

TEST_CASE("gen_world is deterministic under its seed") {
    WorldConfig cfg;
    cfg.seed = 42;
    cfg.num_concepts = 8;
    cfg.num_images = 30;
    cfg.feat_dim = 16;
    World a = gen_world(cfg);
    World b = gen_world(cfg);
    REQUIRE(a.images.size() == b.images.size());
    for (std::size_t i = 0; i < a.images.size(); ++i) {
        CHECK(a.images[i].id == b.images[i].id);
        CHECK(a.images[i].truth == b.images[i].truth);
        CHECK(a.images[i].vec == b.images[i].vec);
    }
}

TEST_CASE("gen_world with zero noise: equal truth sets give equal vectors") {
    WorldConfig cfg;
    cfg.seed = 7;
    cfg.num_concepts = 5;
    cfg.num_images = 60;
    cfg.feat_dim = 8;
    cfg.noise_sigma = 0.0;
    cfg.min_concepts_per_image = 1;
    cfg.max_concepts_per_image = 1;
    World world = gen_world(cfg);
    for (const auto& x : world.images)
        for (const auto& y : world.images)
            if (x.truth == y.truth)
                for (std::size_t d = 0; d < x.vec.size(); ++d) CHECK(x.vec[d] == y.vec[d]);
}

TEST_CASE("same-concept images are closer in cosine than different-concept ones") {
    WorldConfig cfg;
    cfg.seed = 3;
    cfg.num_concepts = 10;
    cfg.num_images = 500;
    cfg.feat_dim = 32;
    cfg.min_concepts_per_image = 1;
    cfg.max_concepts_per_image = 1;
    World world = gen_world(cfg);
    auto cosine = [](const std::vector<double>& a, const std::vector<double>& b) {
        double ab = 0, aa = 0, bb = 0;
        for (std::size_t i = 0; i < a.size(); ++i) {
            ab += a[i] * b[i];
            aa += a[i] * a[i];
            bb += b[i] * b[i];
        }
        return ab / std::sqrt(aa * bb);
    };
    double same_sum = 0, diff_sum = 0;
    long same_n = 0, diff_n = 0;
    for (std::size_t i = 0; i < world.images.size(); i += 3)
        for (std::size_t j = i + 1; j < world.images.size(); j += 7) {
            const double c = cosine(world.images[i].vec, world.images[j].vec);
            if (world.images[i].truth == world.images[j].truth) {
                same_sum += c;
                ++same_n;
            } else {
                diff_sum += c;
                ++diff_n;
            }
        }
    REQUIRE(same_n > 0);
    REQUIRE(diff_n > 0);
    CHECK(same_sum / same_n > diff_sum / diff_n);
}

TEST_CASE("detect_concepts noise extremes") {
    WorldConfig wcfg;
    wcfg.seed = 11;
    wcfg.num_concepts = 6;
    wcfg.num_images = 40;
    wcfg.feat_dim = 8;
    World world = gen_world(wcfg);
    Rng rng(5);

    DetectorConfig perfect{0.0, 0.0};
    for (const auto& img : world.images) {
        ConceptDetection det = detect_concepts(img, world.dict, perfect, rng);
        std::set<std::string> got;
        for (const auto& [w, s] : det.concepts) {
            got.insert(w);
            CHECK(s >= 0.6);
            CHECK(s <= 1.0);
        }
        std::set<std::string> want;
        for (int c : img.truth) want.insert(world.dict.words[c]);
        CHECK(got == want);
    }

    DetectorConfig blind{1.0, 0.0};
    for (const auto& img : world.images)
        CHECK(detect_concepts(img, world.dict, blind, rng).concepts.empty());
}

TEST_CASE("detect_concepts empirical miss rate") {
    WorldConfig wcfg;
    wcfg.seed = 13;
    wcfg.num_concepts = 10;
    wcfg.num_images = 10000;
    wcfg.feat_dim = 16;
    World world = gen_world(wcfg);
    Rng rng(17);
    DetectorConfig cfg;  // defaults p_miss=0.1, p_false=0.02
    long truth_total = 0, missed = 0;
    for (const auto& img : world.images) {
        ConceptDetection det = detect_concepts(img, world.dict, cfg, rng);
        std::set<std::string> got;
        for (const auto& [w, s] : det.concepts) got.insert(w);
        for (int c : img.truth) {
            ++truth_total;
            if (!got.count(world.dict.words[c])) ++missed;
        }
    }
    const double rate = static_cast<double>(missed) / static_cast<double>(truth_total);
    CHECK(rate > 0.09);
    CHECK(rate < 0.11);
}

TEST_CASE("synth_corpus fills slots and stays filter-clean") {
    ConceptDictionary dict{{"dog", "cat", "car"}};
    Rng rng(23);

    auto one = synth_corpus({{0}}, dict, {"a photo of a {c} in the room with light"}, 10, rng);
    REQUIRE(one.size() == 10);
    for (const auto& s : one) {
        CHECK(tokenize(s).size() == 10);
        CHECK(s.find("dog") != std::string::npos);
    }

    CHECK(synth_corpus({}, dict, default_templates(), 50, rng).empty());
    CHECK_THROWS_AS(synth_corpus({{0}}, dict, {"no slots here at all"}, 5, rng),
                    std::invalid_argument);

    // a full synthetic corpus passes the corpus filter with zero removals
    std::vector<std::vector<int>> sets = {{0}, {1}, {2}, {0, 1}, {1, 2}, {0, 2}};
    auto corpus = synth_corpus(sets, dict, default_templates(), 500, rng);
    std::vector<std::vector<std::string>> tokenized;
    for (const auto& s : corpus) tokenized.push_back(tokenize(s));
    Vocabulary vocab = Vocabulary::build(tokenized, 1, dict.words);
    auto kept = filter_corpus(tokenized, 8, 0.15, vocab);
    CHECK(kept.size() == corpus.size());
}

TEST_CASE("features file round-trip is exact") {
    namespace fs = std::filesystem;
    Rng rng(31);
    std::vector<ImageFeature> images;
    for (int i = 0; i < 20; ++i) {
        ImageFeature img;
        img.id = "img" + std::to_string(i);
        for (int d = 0; d < 12; ++d)
            img.vec.push_back(static_cast<double>(static_cast<float>(uniform(rng, -2, 2))));
        images.push_back(std::move(img));
    }
    const fs::path path = fs::temp_directory_path() / "ucap_feat_test.bin";
    save_features(path, images, 12);
    auto loaded = load_features(path);
    REQUIRE(loaded.size() == images.size());
    for (std::size_t i = 0; i < images.size(); ++i) {
        CHECK(loaded[i].id == images[i].id);
        CHECK(loaded[i].vec == images[i].vec);
    }
    fs::remove(path);
}

TEST_CASE("features writer rejects dimension mismatch naming the record") {
    namespace fs = std::filesystem;
    std::vector<ImageFeature> images(2);
    images[0].id = "ok";
    images[0].vec.assign(64, 0.0);
    images[1].id = "short63";
    images[1].vec.assign(63, 0.0);
    const fs::path path = fs::temp_directory_path() / "ucap_feat_bad.bin";
    try {
        save_features(path, images, 64);
        FAIL("expected dimension error");
    } catch (const std::invalid_argument& e) {
        CHECK(std::string(e.what()).find("short63") != std::string::npos);
    }
    fs::remove(path);
}

TEST_CASE("detections loader: range check, unknown words, round-trip") {
    namespace fs = std::filesystem;
    ConceptDictionary dict{{"dog", "cat"}};
    const fs::path path = fs::temp_directory_path() / "ucap_det_test.jsonl";
    {
        std::ofstream out(path);
        out << R"({"id": "a", "concepts": [{"name": "dog", "score": 0.9}, {"name": "cat", "score": 0.3}]})" << "\n";
        out << R"({"id": "b", "concepts": [{"name": "dog", "score": 1.2}]})" << "\n";
        out << R"({"id": "c", "concepts": [{"name": "zebra", "score": 0.5}]})" << "\n";
        out << R"({"id": "d", "concepts": []})" << "\n";
    }
    auto result = load_detections(path, dict);
    CHECK(result.rejected_records == 1);   // record b: confidence 1.2
    CHECK(result.skipped_concepts == 1);   // record c: unknown word
    REQUIRE(result.by_id.count("a") == 1);
    CHECK_FALSE(result.by_id.count("b"));
    CHECK(result.by_id.at("c").concepts.empty());
    CHECK(result.by_id.at("d").concepts.empty());
    CHECK(result.by_id.at("a").concepts.size() == 2);

    // writer round-trip
    const fs::path path2 = fs::temp_directory_path() / "ucap_det_rt.jsonl";
    std::vector<std::string> ids = {"a", "c", "d"};
    std::vector<ConceptDetection> dets = {result.by_id.at("a"), result.by_id.at("c"),
                                          result.by_id.at("d")};
    save_detections(path2, ids, dets);
    auto result2 = load_detections(path2, dict);
    CHECK(result2.by_id.at("a").concepts == result.by_id.at("a").concepts);
    fs::remove(path);
    fs::remove(path2);
}

TEST_CASE("duplicate detections keep the max confidence") {
    ConceptDetection det;
    det.add("dog", 0.4);
    det.add("dog", 0.8);
    det.add("dog", 0.6);
    REQUIRE(det.concepts.size() == 1);
    CHECK(det.concepts[0].second == 0.8);
}
