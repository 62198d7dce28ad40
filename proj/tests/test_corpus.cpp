#include "clarity/corpus.hpp"
#include "support.hpp"

#include <boost/math/distributions/chi_squared.hpp>
#include <doctest.h>

#include <fstream>
#include <map>
#include <set>

using namespace clarity;
using namespace clarity::corpus;

namespace {

void check_invariants(const Corpus& c) {
    std::map<std::string, int> references;
    for (const auto& n : c.norms()) {
        CHECK_FALSE(trim(n.norm_text).empty());
        const auto& s = c.action(n.supported_action);
        const auto& o = c.action(n.opposed_action);
        CHECK(s.stance == Stance::support);
        CHECK(o.stance == Stance::oppose);
        CHECK(s.norm_id == n.norm_id);
        CHECK(o.norm_id == n.norm_id);
        ++references[s.id];
        ++references[o.id];
    }
    for (const auto& a : c.actions()) {
        CHECK_FALSE(trim(a.text).empty());
        CHECK(references[a.id] == 1);
        CHECK_NOTHROW(c.norm(a.norm_id));
    }
    CHECK(c.actions().size() == 2 * c.norms().size());
    CHECK(c.count(Stance::support) == c.norms().size());
    CHECK(c.count(Stance::oppose) == c.norms().size());
}

}  // namespace

TEST_CASE("moral stories 3-line fixture") {
    const auto a = load_moral_stories(testing::fixture("moral_stories_3.jsonl"));
    CHECK(a.errors.empty());
    CHECK(a.corpus.norms().size() == 3);
    CHECK(a.corpus.actions().size() == 6);
    check_invariants(a.corpus);
    const auto b = load_moral_stories(testing::fixture("moral_stories_3.jsonl"));
    CHECK(a.corpus == b.corpus);
    for (const auto& act : a.corpus.actions()) CHECK(act.dataset == DatasetTag::moral_stories);
}

TEST_CASE("moral stories empty input") {
    const auto r = parse_moral_stories("");
    CHECK(r.corpus.actions().empty());
    CHECK(r.corpus.norms().empty());
    CHECK(r.errors.empty());
}

TEST_CASE("moral stories record errors carry line numbers") {
    const auto r = load_moral_stories(testing::fixture("moral_stories_bad.jsonl"));
    CHECK(r.corpus.norms().size() == 2);
    REQUIRE(r.errors.size() == 2);
    CHECK(r.errors[0].line == 2);
    CHECK(r.errors[0].message.find("immoral_action") != std::string::npos);
    CHECK(r.errors[1].line == 3);
    check_invariants(r.corpus);
}

TEST_CASE("moral stories unreadable file is fatal") {
    CHECK_THROWS_AS(load_moral_stories("/nonexistent/ms.jsonl"), DataError);
}

TEST_CASE("moral stories fixtures satisfy invariants") {
    for (const char* name : {"moral_stories_train.jsonl", "moral_stories_test.jsonl"}) {
        const auto r = load_moral_stories(testing::fixture(name));
        CHECK(r.errors.empty());
        check_invariants(r.corpus);
    }
}

TEST_CASE("ethics justice maps labels to stances") {
    const auto r = load_ethics(testing::fixture("ethics_justice.csv"), EthicsSubset::justice);
    CHECK(r.errors.empty());
    REQUIRE(r.corpus.norms().size() == 3);
    check_invariants(r.corpus);
    const auto& first = r.corpus.norms().front();
    const auto& s = r.corpus.action(first.supported_action);
    CHECK(s.text == "I deserve to be paid by my boss because I keep her house clean daily.");
    CHECK(s.stance == Stance::support);
    CHECK(first.norm_text.rfind("Refer to the justice", 0) == 0);
    CHECK(s.dataset == DatasetTag::ethics_justice);
    // Quoted field with an embedded comma survives.
    bool found = false;
    for (const auto& a : r.corpus.actions()) found = found || a.text.find("arrived broken, as the photos") != std::string::npos;
    CHECK(found);
}

TEST_CASE("ethics deontology joins scenario and excuse") {
    const std::string scenario = "Can you feed the dog tonight?";
    const std::string excuse = "But the dog was already fed by my brother.";
    const auto r = load_ethics(testing::fixture("ethics_deontology.csv"), EthicsSubset::deontology);
    CHECK(r.errors.empty());
    check_invariants(r.corpus);
    const auto& s = r.corpus.action(r.corpus.norms().front().supported_action);
    CHECK(s.text == scenario + " " + excuse);
}

TEST_CASE("ethics virtue keeps the trait") {
    const auto r = load_ethics(testing::fixture("ethics_virtue.csv"), EthicsSubset::virtue);
    CHECK(r.errors.empty());
    check_invariants(r.corpus);
    const auto& s = r.corpus.action(r.corpus.norms().front().supported_action);
    CHECK(s.text == "The man shared his lunch with the new student. [SEP] generous");
}

TEST_CASE("ethics label outside {0,1}") {
    const auto r = parse_ethics("label,scenario\n1,a\n2,b\n0,c\n", EthicsSubset::justice);
    CHECK(r.corpus.norms().size() == 1);
    REQUIRE(r.errors.size() == 1);
    CHECK(r.errors[0].line == 3);
    CHECK(r.errors[0].message.find("label") != std::string::npos);
    CHECK_THROWS_AS(parse_ethics_subset("commonsense"), DataError);
}

TEST_CASE("ethics unpaired rows are reported") {
    const auto r = parse_ethics("1,a\n1,b\n0,c\n", EthicsSubset::justice);
    CHECK(r.corpus.norms().size() == 1);
    REQUIRE(r.errors.size() == 1);
    CHECK(r.errors[0].line == 2);
}

TEST_CASE("triplets on two norms") {
    CorpusBuilder b;
    b.add_group("n1", "s1", "o1", DatasetTag::synthetic);
    b.add_group("n2", "s2", "o2", DatasetTag::synthetic);
    const auto c = std::move(b).build();
    const auto t = build_triplets(c, 10, 7);
    REQUIRE(t.size() == 10);
    for (const auto& x : t) {
        const auto& anchor = c.action(x.anchor);
        CHECK(anchor.stance == Stance::support);
        CHECK(c.action(x.positive).stance == Stance::oppose);
        CHECK(c.action(x.positive).norm_id == anchor.norm_id);
        CHECK(c.action(x.negative).norm_id != anchor.norm_id);
    }
    CHECK(build_triplets(c, 10, 7) == t);
    CHECK(build_triplets(c, 0, 7).empty());
}

TEST_CASE("triplets need two norms") {
    CorpusBuilder b;
    b.add_group("n1", "s1", "o1", DatasetTag::synthetic);
    const auto c = std::move(b).build();
    CHECK_THROWS_WITH_AS(build_triplets(c, 1, 0), doctest::Contains("insufficient norm diversity"), DataError);
}

TEST_CASE("property: triplet invariants over random corpora") {
    std::mt19937_64 rng(11);
    for (int trial = 0; trial < 50; ++trial) {
        const auto c = testing::random_corpus(rng, 2 + rng() % 12);
        const auto t = build_triplets(c, 40, rng());
        REQUIRE(t.size() == 40);
        for (const auto& x : t) {
            CHECK(c.action(x.anchor).norm_id == c.action(x.positive).norm_id);
            CHECK(c.action(x.negative).norm_id != c.action(x.anchor).norm_id);
            CHECK(c.action(x.anchor).stance == Stance::support);
            CHECK(c.action(x.positive).stance == Stance::oppose);
        }
    }
}

TEST_CASE("stance-matched negatives are supported actions") {
    std::mt19937_64 rng(3);
    const auto c = testing::random_corpus(rng, 6);
    for (const auto& x : build_triplets(c, 100, 5, {true})) CHECK(c.action(x.negative).stance == Stance::support);
}

TEST_CASE("negative norm distribution is uniform") {
    std::mt19937_64 rng(19);
    const auto c = testing::random_corpus(rng, 50);
    const auto t = build_triplets(c, 1000, 23);
    // Given an anchor norm, each of the other 49 norms is equally likely, so the
    // marginal over negative norms is uniform across all 50.
    std::map<std::string, int> counts;
    for (const auto& x : t) ++counts[c.action(x.negative).norm_id];
    const double expected = 1000.0 / 50.0;
    double chi2 = 0;
    for (const auto& n : c.norms()) {
        const double o = counts[n.norm_id];
        chi2 += (o - expected) * (o - expected) / expected;
    }
    const double p = boost::math::cdf(boost::math::complement(boost::math::chi_squared(49), chi2));
    CHECK(p > 0.01);
}

TEST_CASE("canonical round trip") {
    testing::TempDir dir;
    const auto c = load_moral_stories(testing::fixture("moral_stories_3.jsonl")).corpus;
    save_canonical(c, dir.file("c.jsonl"));
    const std::string first = read_file(dir.file("c.jsonl"));
    CHECK(first.rfind("clarity-corpus v1\n", 0) == 0);
    const auto back = load_canonical(dir.file("c.jsonl"));
    CHECK(back == c);
    save_canonical(back, dir.file("d.jsonl"));
    CHECK(read_file(dir.file("d.jsonl")) == first);

    bool unicode = false;
    for (const auto& a : back.actions()) unicode = unicode || a.text.find("naïvement sans vérifier 判断") != std::string::npos;
    CHECK(unicode);
}

TEST_CASE("canonical header mismatch") {
    testing::TempDir dir;
    write_file_atomic(dir.file("bad.jsonl"), "clarity-corpus v0\n");
    CHECK_THROWS_WITH_AS(load_canonical(dir.file("bad.jsonl")), doctest::Contains("clarity-corpus v0"), DataError);
    CHECK_THROWS_AS(parse_canonical(""), DataError);
}

TEST_CASE("canonical truncation is detected") {
    const auto c = load_moral_stories(testing::fixture("moral_stories_3.jsonl")).corpus;
    auto lines = split_lines(to_canonical(c));
    std::string text;
    for (std::size_t i = 0; i + 2 < lines.size(); ++i) text += lines[i] + "\n";
    CHECK_THROWS_AS(parse_canonical(text), DataError);
}

TEST_CASE("split sizes in canonical files equal source counts") {
    const auto r = load_moral_stories(testing::fixture("moral_stories_train.jsonl"), Split::train);
    const auto back = parse_canonical(to_canonical(r.corpus));
    CHECK(back.split() == Split::train);
    CHECK(back.count(Stance::support) == 16);
    CHECK(back.count(Stance::oppose) == 16);
}

TEST_CASE("corpus construction rejects broken invariants") {
    std::vector<ActionRecord> actions{{"a", "x", Stance::support, "n", DatasetTag::synthetic},
                                      {"b", "y", Stance::support, "n", DatasetTag::synthetic}};
    std::vector<NormGroup> norms{{"n", "norm", "a", "b"}};
    CHECK_THROWS_AS(Corpus(Split::train, actions, norms), DataError);
    actions[1].stance = Stance::oppose;
    CHECK_NOTHROW(Corpus(Split::train, actions, norms));
    actions.push_back({"c", "z", Stance::oppose, "n", DatasetTag::synthetic});
    CHECK_THROWS_AS(Corpus(Split::train, actions, norms), DataError);
}
