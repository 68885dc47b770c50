#include <catch_amalgamated.hpp>

#include <sstream>

#include <magicwords/io.hpp>

#include "test_support.hpp"

using mw::Mat;

TEST_CASE("EMBS round trip is bitwise and little-endian", "[io]")
{
    const Mat X = testing::gaussian(7, 5, 1);
    std::stringstream ss;
    mw::write_embs(ss, X);
    const std::string bytes = ss.str();
    REQUIRE(bytes.size() == 4 + 3 * 4 + 7 * 5 * 8);
    CHECK(bytes.substr(0, 4) == "EMBS");
    CHECK(bytes[4] == 1); // u32 version, low byte first
    CHECK(bytes[8] == 7);
    CHECK(bytes[12] == 5);
    const Mat Y = mw::read_embs(ss);
    CHECK((X.array() == Y.array()).all());
}

TEST_CASE("EMBS rejects bad magic, version and truncation", "[io]")
{
    std::stringstream bad("EMBX....");
    CHECK_THROWS_AS(mw::read_embs(bad), mw::Error);
    std::stringstream ss;
    mw::write_embs(ss, Mat::Ones(2, 2));
    std::string s = ss.str();
    std::string v2 = s;
    v2[4] = 2;
    std::stringstream sv(v2);
    CHECK_THROWS_AS(mw::read_embs(sv), mw::Error);
    std::stringstream st(s.substr(0, s.size() - 3));
    CHECK_THROWS_AS(mw::read_embs(st), mw::Error);
}

TEST_CASE("JSONL embeddings round trip exactly", "[io]")
{
    mw::IdMatrix m;
    m.rows = testing::gaussian(4, 3, 2);
    m.ids = {"a", "b", "doc-17", "d"};
    std::stringstream ss;
    mw::write_embeddings_jsonl(ss, m);
    const auto r = mw::read_embeddings_jsonl(ss);
    CHECK(r.ids == m.ids);
    CHECK((r.rows.array() == m.rows.array()).all());
}

TEST_CASE("JSONL embeddings report the offending line", "[io]")
{
    std::stringstream ss("{\"id\":\"a\",\"embedding\":[1,2]}\n\n{\"id\":\"b\",\"embedding\":[1,2,3]}\n");
    try {
        (void)mw::read_embeddings_jsonl(ss);
        FAIL("no error");
    } catch (const mw::Error& e) {
        CHECK(std::string(e.what()).find("line 3") != std::string::npos);
    }
    std::stringstream broken("{\"id\": \n");
    CHECK_THROWS_AS(mw::read_embeddings_jsonl(broken), mw::Error);
}

TEST_CASE("vocabulary and labeled corpora round trip", "[io]")
{
    mw::Vocabulary v;
    v.tokens = {"</s>", "lucrarea", "##abia"};
    std::stringstream vs;
    mw::write_vocabulary_jsonl(vs, v);
    const auto v2 = mw::read_vocabulary_jsonl(vs);
    CHECK(v2.tokens == v.tokens);
    CHECK(v2.find("lucrarea") == 1);
    CHECK(v2.at(9) == "#9");
    CHECK_THROWS_AS(v2.find("nope"), mw::Error);

    std::vector<mw::LabeledText> data{{{1, 2, 3}, "", true}, {{}, "w4 w5", false}};
    std::stringstream ls;
    mw::write_labeled_jsonl(ls, data);
    const auto back = mw::read_labeled_jsonl(ls);
    REQUIRE(back.size() == 2);
    CHECK(back[0].tokens == mw::TextSeq{1, 2, 3});
    CHECK(back[0].harmful);
    CHECK(back[1].text == "w4 w5");
    CHECK(!back[1].harmful);

    std::stringstream bad("{\"tokens\":[1],\"label\":2}\n");
    CHECK_THROWS_AS(mw::read_labeled_jsonl(bad), mw::Error);
    std::stringstream unlabeled("{\"tokens\":[1]}\n");
    CHECK_THROWS_AS(mw::read_labeled_jsonl(unlabeled), mw::Error);
    std::stringstream corpus("{\"tokens\":[1]}\n{\"text\":\"x\",\"label\":1}\n");
    const auto c = mw::read_corpus_jsonl(corpus);
    REQUIRE(c.size() == 2);
    CHECK(!c[0].harmful);
    CHECK(c[1].harmful);
}

TEST_CASE("base64 matches the RFC 4648 test vectors", "[io]")
{
    const std::pair<const char*, const char*> cases[] = {{"", ""},         {"f", "Zg=="},         {"fo", "Zm8="},
                                                         {"foo", "Zm9v"},  {"foob", "Zm9vYg=="},  {"fooba", "Zm9vYmE="},
                                                         {"foobar", "Zm9vYmFy"}};
    for (auto [plain, enc] : cases) {
        CHECK(mw::base64_encode(plain) == enc);
        CHECK(mw::base64_decode(enc) == plain);
    }
    std::string all;
    for (int i = 0; i < 256; ++i) all += char(i);
    CHECK(mw::base64_decode(mw::base64_encode(all)) == all);
    CHECK_THROWS_AS(mw::base64_decode("Zm9"), mw::Error);
    CHECK_THROWS_AS(mw::base64_decode("Zm=v"), mw::Error);
    CHECK_THROWS_AS(mw::base64_decode("Z!9v"), mw::Error);
}

TEST_CASE("packed reals honor the declared dtype", "[io]")
{
    const double xs[] = {1.0, -2.5, 0.1, 1e-300};
    const auto f64 = mw::pack_reals(xs, 4, "f64");
    CHECK(f64.size() == 32);
    CHECK(f64.substr(0, 8) == std::string("\0\0\0\0\0\0\xf0\x3f", 8));
    const auto back = mw::unpack_reals(f64, "f64");
    for (int i = 0; i < 4; ++i) CHECK(back[std::size_t(i)] == xs[i]);
    const auto f32 = mw::unpack_reals(mw::pack_reals(xs, 4, "f32"), "f32");
    CHECK(f32[0] == 1.0);
    CHECK(f32[1] == -2.5);
    CHECK(std::abs(f32[2] - 0.1) < 1e-8);
    CHECK_THROWS_AS(mw::pack_reals(xs, 1, "f16"), mw::Error);
    CHECK_THROWS_AS(mw::unpack_reals("abc", "f32"), mw::Error);
}
