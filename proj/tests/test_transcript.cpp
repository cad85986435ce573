#include <doctest.h>

#include "support.hpp"
#include "vlmtree/errors.hpp"
#include "vlmtree/transcript.hpp"

using namespace vlmtree;
using vlmtree::testing::data_path;

TEST_SUITE("transcript") {
  TEST_CASE("field order is fixed") {
    TranscriptRecord r;
    r.image_ref = "a.png";
    r.truth_class_id = 2;
    r.strategy = StrategyKind::TreeHistory;
    r.temperature = 0.7;
    r.run_index = 1;
    TraceStep s;
    s.question = "Q?";
    s.depth = 0;
    s.prompt_digest = "d";
    s.raw_response = "yes";
    s.extracted_answer = "yes";
    s.chosen_branch = "yes";
    r.steps.push_back(s);
    r.predicted_class_id = 2;
    CHECK(render_record(r) ==
          R"({"image_ref":"a.png","truth_class_id":2,"strategy":"tree-history","variant_id":null,"temperature":0.7,)"
          R"("run_index":1,"steps":[{"question":"Q?","depth":0,"prompt_digest":"d","raw_response":"yes",)"
          R"("extracted_answer":"yes","chosen_branch":"yes"}],"predicted_class_id":2,"failure":null})"
          "\n");
  }

  TEST_CASE("records round-trip, including captions and re-asks") {
    TranscriptRecord r;
    r.image_ref = "b.png";
    r.strategy = StrategyKind::ZeroShotDesc;
    r.variant_id = "terse";
    r.caption = "a red sign";
    TraceStep s;
    s.prompt_digest = "x";
    s.raw_response = "unsure";
    s.reask = Reask{"y", "3"};
    s.extracted_answer = "3";
    r.steps.push_back(s);
    r.predicted_class_id = 3;
    const auto text = render_record(r);
    const auto back = parse_transcript(text);
    REQUIRE(back.size() == 1);
    CHECK(back[0] == r);
    CHECK(render_record(back[0]) == text);
  }

  TEST_CASE("shipped transcripts re-emit byte-identically") {
    for (const char* name : {"fixtures/gtsrb_gpt4o_tree/transcript.jsonl", "fixtures/gtsrb_gpt4o_zero_shot/transcript.jsonl",
                             "fixtures/cifar10_gpt4o_tree/transcript.jsonl"}) {
      const auto text = read_text_file(data_path(name));
      const auto recs = parse_transcript(text, name);
      CHECK(render_transcript(recs) == text);
    }
  }

  TEST_CASE("malformed lines name their position") {
    try {
      parse_transcript("{\"image_ref\":\"a\"}\n{oops\n");
      FAIL("expected ParseError");
    } catch (const ParseError& e) {
      CHECK(e.line() >= 1);
    }
    try {
      parse_transcript("\n\n{not json}\n");
      FAIL("expected ParseError");
    } catch (const ParseError& e) {
      CHECK(e.line() == 3);
    }
  }
}
