#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "teaforn/data.h"
#include "teaforn/errors.h"

using namespace teaforn;
using Ids = std::vector<TokenId>;

TEST_CASE("task examples") {
    SyntheticTask copy{TaskKind::copy, 10};
    SyntheticTask rev{TaskKind::reverse, 10};
    SyntheticTask rot{TaskKind::rotate_map, 10};
    rot.shift = 3;
    CHECK(apply_task(copy, Ids{4, 5, 6}) == Ids{4, 5, 6});
    CHECK(apply_task(rev, Ids{4, 5, 6}) == Ids{6, 5, 4});
    CHECK(apply_task(rot, Ids{4, 5}) == Ids{7, 8});
    CHECK(apply_task(rot, Ids{4, 5, 6}) == Ids{9, 8, 7});
    // 9 wraps to 4; the trailing pair keeps its order.
    CHECK(apply_task(rot, Ids{4, 5, 6, 8, 9}) == Ids{9, 8, 7, 5, 6});
    CHECK(apply_task(rot, Ids{}) == Ids{});
    CHECK(parse_task_kind("rotate_map") == TaskKind::rotate_map);
    CHECK(to_string(TaskKind::reverse) == "reverse");
    CHECK_THROWS_AS(parse_task_kind("sort"), ParameterError);
}

TEST_CASE("generation is deterministic and indexable") {
    SyntheticTask task{TaskKind::rotate_map, 64, 8, 16, 5};
    auto a = generate(task, 200);
    auto b = generate(task, 200);
    CHECK(a == b);
    auto tail = generate(task, 50, 150);
    CHECK(std::equal(tail.begin(), tail.end(), a.begin() + 150));
    for (const auto &p : a) {
        CHECK(p.source.size() >= 8);
        CHECK(p.source.size() <= 16);
        for (TokenId t : p.source) {
            CHECK(t >= kFirstWordId);
            CHECK(t < 64);
        }
        CHECK(p.target == apply_task(task, p.source));
    }
    task.seed = 6;
    CHECK(generate(task, 200) != a);

    SyntheticTask bad = task;
    bad.min_length = 5;
    bad.max_length = 4;
    CHECK_THROWS_AS(generate(bad, 1), ParameterError);
    bad = task;
    bad.vocab_size = 4;
    CHECK_THROWS_AS(generate(bad, 1), ParameterError);
    CHECK_THROWS_AS(generate(task, 0), ParameterError);
}

TEST_CASE("tsv parsing") {
    auto pairs = parse_tsv("hello world\tbonjour monde\n");
    REQUIRE(pairs.size() == 1);
    CHECK(pairs[0].source == std::vector<std::string>{"hello", "world"});
    CHECK(pairs[0].target == std::vector<std::string>{"bonjour", "monde"});
    CHECK(parse_tsv("").empty());
    CHECK(parse_tsv("a b\tc\r\n\nd\te").size() == 2);

    try {
        parse_tsv("a\tb\nx\ty\tz\n");
        FAIL("expected a parse error");
    } catch (const ParseError &e) {
        CHECK(e.line() == 2);
        CHECK(std::string(e.what()).find("line 2") != std::string::npos);
    }
    CHECK_THROWS_AS(parse_tsv("no tab here"), ParseError);

    const auto path = std::filesystem::temp_directory_path() / "teaforn_test_data.tsv";
    std::ofstream(path) << "a b\tb a\n";
    CHECK(load_tsv(path).size() == 1);
    std::filesystem::remove(path);
}

TEST_CASE("vocabulary") {
    std::vector<std::vector<std::string>> corpus{{"b", "a", "b"}, {"c", "b", "a"}};
    auto v = Vocabulary::build(corpus);
    CHECK(v.size() == 4 + 3);
    CHECK(v.id("b") == 4);
    CHECK(v.id("a") == 5);
    CHECK(v.id("c") == 6);
    CHECK(v.id("zebra") == kUnk);
    CHECK(v.token(kEos) == v.token(2));

    auto frequent = Vocabulary::build(corpus, 2);
    CHECK(frequent.contains("a"));
    CHECK_FALSE(frequent.contains("c"));
    CHECK(frequent.id("c") == kUnk);

    const auto path = std::filesystem::temp_directory_path() / "teaforn_test_vocab.txt";
    v.save(path);
    auto loaded = Vocabulary::load(path);
    std::filesystem::remove(path);
    CHECK(loaded.size() == v.size());
    for (TokenId i = 0; i < static_cast<TokenId>(v.size()); ++i) CHECK(loaded.token(i) == v.token(i));

    std::vector<std::string> words{"a", "c", "b"};
    auto ids = v.encode(words);
    CHECK(v.decode(ids) == words);
    Ids framed{kGo, 5, 6, kEos, 4};
    CHECK(v.decode(framed) == std::vector<std::string>{"a", "c"});
}

TEST_CASE("tokenize round trip") {
    auto w = tokenize("  the  cat\tsat ");
    CHECK(w == std::vector<std::string>{"the", "cat", "sat"});
    CHECK(detokenize(w) == "the cat sat");
    CHECK(tokenize(detokenize(w)) == w);
    CHECK(tokenize("").empty());
}

TEST_CASE("batch framing") {
    std::vector<SequencePair> pairs{{{4, 5, 6}, {7, 8}}, {{9}, {4, 5, 6, 7}}};
    auto b = make_batch(pairs);
    CHECK(b.size() == 2);
    CHECK(b.source.cols == 3);
    CHECK(b.target.cols == 4 + 2);
    CHECK(b.target.ids == Ids{kGo, 7, 8, kEos, kPad, kPad, kGo, 4, 5, 6, 7, kEos});
    CHECK(b.source.ids == Ids{4, 5, 6, 9, kPad, kPad});
    CHECK(b.source_mask == std::vector<std::uint8_t>{1, 1, 1, 1, 0, 0});
    CHECK(b.target_length(0) == 3);
    CHECK(b.target_length(1) == 5);
    std::size_t cells = 0;
    for (auto m : b.target_mask) cells += m;
    CHECK(cells == 2 + 2 + 4 + 2);
    CHECK_THROWS_AS(make_batch(std::vector<SequencePair>{}), ContractError);
}

TEST_CASE("batch iterator") {
    auto pairs = generate(SyntheticTask{TaskKind::copy, 20, 2, 6, 1}, 37);
    BatchIterator it(pairs, 8, 11), same(pairs, 8, 11), other(pairs, 8, 12);
    CHECK(it.batches_per_epoch() == 5);
    bool differs = false;
    for (std::uint64_t i = 0; i < 12; ++i) {
        auto expect = it.batch_at(i);
        auto got = it.next();
        CHECK(got.source.ids == expect.source.ids);
        CHECK(got.target.ids == expect.target.ids);
        CHECK(same.next().source.ids == got.source.ids);
        differs = differs || other.next().source.ids != got.source.ids;
    }
    CHECK(differs);
    CHECK(it.position() == 12);
    it.seek(3);
    CHECK(it.next().source.ids == same.batch_at(3).source.ids);

    // One epoch covers every pair exactly once.
    std::size_t rows = 0;
    for (std::uint64_t i = 0; i < it.batches_per_epoch(); ++i) rows += it.batch_at(i).size();
    CHECK(rows == pairs.size());
}

TEST_CASE("mix_seed separates streams") {
    CHECK(mix_seed(1, 0) != mix_seed(1, 1));
    CHECK(mix_seed(1, 0) != mix_seed(2, 0));
    CHECK(mix_seed(7, 3) == mix_seed(7, 3));
}
