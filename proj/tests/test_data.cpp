// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <memory>
#include <sstream>
#include <string>

#include <mtlcer/convert.hpp>
#include <mtlcer/data.hpp>
#include <mtlcer/synthetic.hpp>

using namespace mtlcer;

namespace {

std::shared_ptr<const LabelSet> meld() { return std::make_shared<const LabelSet>(LabelSet::meld()); }

Corpus parse(const std::string& text) {
  std::istringstream in(text);
  return parse_corpus(in, meld(), "mem");
}

std::string error_of(const std::string& text) {
  try {
    parse(text);
  } catch (const FormatError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST(Tokenize, LowercasesAndSplitsPunctuation) {
  EXPECT_EQ(tokenize("Hi, Joey!  How're you?"),
            (std::vector<std::string>{"hi", ",", "joey", "!", "how", "'", "re", "you", "?"}));
  EXPECT_TRUE(tokenize("   ").empty());
  EXPECT_EQ(tokenize("caf\xc3\xa9 OK"), (std::vector<std::string>{"caf\xc3\xa9", "ok"}));
  EXPECT_EQ(make_utterance("a", "").tokens, (std::vector<std::string>{"<unk>"}));
}

TEST(Corpus, ParsesConversationsAndSkipsBlankLines) {
  auto c = parse(
      R"({"id":"d1","utterances":[{"speaker":"Ross","text":"Hi","emotion":"Joy"},{"speaker":"Rachel","text":"Hey"}]})"
      "\n\n"
      R"({"id":"d2","utterances":[{"speaker":"Ross","text":"ok","emotion":null}]})"
      "\n");
  ASSERT_EQ(c.size(), 2u);
  EXPECT_EQ(c[0].id, "d1");
  EXPECT_EQ(c[0].utterances[0].emotion, std::optional<std::string>("joy"));
  EXPECT_FALSE(c[0].utterances[1].emotion.has_value());
  EXPECT_EQ(c[0].speaker_count(), 2u);
  EXPECT_TRUE(c[0].has_emotions());
  EXPECT_FALSE(c[1].has_emotions());
}

TEST(Corpus, ErrorsCarryLineNumbers) {
  const std::string good = R"({"id":"a","utterances":[{"speaker":"x","text":"t"}]})";
  EXPECT_NE(error_of(good + "\n{not json\n").find("mem:2"), std::string::npos);
  EXPECT_NE(error_of(good + "\n\n" + R"({"utterances":[]})").find("mem:3"), std::string::npos);
  EXPECT_NE(error_of(R"({"id":"a","utterances":[]})").find("no utterances"), std::string::npos);
  const auto unknown = error_of(R"({"id":"a","utterances":[{"speaker":"x","text":"t","emotion":"bored"}]})");
  EXPECT_NE(unknown.find("mem:1 utterance 0"), std::string::npos);
  EXPECT_NE(unknown.find("bored"), std::string::npos);
  EXPECT_NE(error_of(R"({"id":"a","utterances":[{"speaker":"","text":"t"}]})").find("speaker"),
            std::string::npos);
  EXPECT_THROW(load_corpus("/nonexistent/corpus.jsonl", meld()), FormatError);
}

TEST(Corpus, WriteThenParseRoundTrips) {
  auto labels = std::make_shared<const LabelSet>(LabelSet::emorynlp());
  SyntheticSpec spec;
  spec.labeled = 6;
  spec.unlabeled = 3;
  auto syn = make_synthetic_corpus(spec, labels);
  for (const Corpus* c : {&syn.labeled, &syn.unlabeled}) {
    std::stringstream ss;
    write_corpus(ss, *c);
    auto back = parse_corpus(ss, labels);
    EXPECT_EQ(back, *c);
  }
}

TEST(Vocab, MinimumFrequencyAndReservedRows) {
  auto c = parse(R"({"id":"a","utterances":[{"speaker":"x","text":"a a b"}]})");
  auto v2 = build_vocab(c, 2);
  EXPECT_EQ(v2.tokens(), (std::vector<std::string>{"<unk>", "<pad>", "a"}));
  EXPECT_EQ(v2.index("b"), kUnkIndex);
  auto v1 = build_vocab(c);
  EXPECT_EQ(v1.tokens(), (std::vector<std::string>{"<unk>", "<pad>", "a", "b"}));
}

TEST(Vocab, DeterministicOrderAndHash) {
  auto c = parse(R"({"id":"a","utterances":[{"speaker":"x","text":"z y y x x"},{"speaker":"w","text":"q"}]})");
  auto a = build_vocab(c), b = build_vocab(c);
  EXPECT_EQ(a, b);
  EXPECT_EQ(a.hash(), b.hash());
  EXPECT_EQ(a.tokens(), (std::vector<std::string>{"<unk>", "<pad>", "x", "y", "q", "z"}));
  EXPECT_NE(a.hash(), build_vocab(c, 2).hash());
  EXPECT_THROW(Vocabulary({"a", "b"}), ArgumentError);
}

TEST(Embeddings, LoadsKnownTokensAndReportsMisses) {
  auto c = parse(R"({"id":"a","utterances":[{"speaker":"x","text":"the cat sat sat"}]})");
  auto vocab = build_vocab(c);  // <unk> <pad> sat cat the
  std::istringstream in(
      "3 5\n"
      "the 1 2 3 4 5\n"
      "cat 0.5 0.5 0.5 0.5 0.5\n"
      "dog 9 9 9 9 9\n");
  Rng rng(1);
  EmbeddingMissReport rep;
  auto t = load_embeddings<double>(in, vocab, 5, rng, &rep);
  EXPECT_EQ(t.rows(), vocab.size());
  EXPECT_EQ(t.dim(), 5u);
  EXPECT_EQ(rep.found, 2u);
  EXPECT_EQ(rep.missing, (std::vector<std::string>{"sat"}));
  const auto the = vocab.index("the");
  for (std::size_t k = 0; k < 5; ++k) EXPECT_EQ(t.matrix.at(the, k), double(k + 1));
  for (std::size_t k = 0; k < 5; ++k) EXPECT_EQ(t.matrix.at(kPadIndex, k), 0.0);
  EXPECT_TRUE(t.pretrained[the]);
  EXPECT_FALSE(t.pretrained[vocab.index("sat")]);
  const double lim = std::sqrt(3.0 / 5.0);
  for (std::size_t k = 0; k < 5; ++k) EXPECT_LE(std::abs(t.matrix.at(vocab.index("sat"), k)), lim);
}

TEST(Embeddings, WrongDimensionNamesTheLine) {
  auto c = parse(R"({"id":"a","utterances":[{"speaker":"x","text":"the"}]})");
  auto vocab = build_vocab(c);
  std::istringstream in("the 1 2 3 4 5\ncat 1 2 3\n");
  Rng rng(1);
  try {
    load_embeddings<double>(in, vocab, 5, rng, nullptr, "vec.txt");
    FAIL() << "expected FormatError";
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("vec.txt:2"), std::string::npos) << e.what();
  }
  std::istringstream bad("the 1 x 3 4 5\n");
  EXPECT_THROW(load_embeddings<double>(bad, vocab, 5, rng), FormatError);
}

TEST(Embeddings, RandomTableIsSeeded) {
  auto c = parse(R"({"id":"a","utterances":[{"speaker":"x","text":"a b c"}]})");
  auto vocab = build_vocab(c);
  Rng a(4), b(4);
  EXPECT_EQ(random_embeddings<double>(vocab, 6, a).matrix.values(),
            random_embeddings<double>(vocab, 6, b).matrix.values());
}

TEST(Encode, SpeakersByFirstAppearanceAndLabelIndices) {
  auto c = parse(
      R"({"id":"a","utterances":[{"speaker":"B","text":"x","emotion":"fear"},{"speaker":"A","text":"y"},{"speaker":"B","text":"x y","emotion":"neutral"}]})");
  auto vocab = build_vocab(c);
  auto e = encode(c[0], vocab, LabelSet::meld());
  EXPECT_EQ(e.speakers, (std::vector<int>{0, 1, 0}));
  EXPECT_EQ(e.emotions, (std::vector<int>{6, -1, 0}));
  EXPECT_EQ(e.tokens[2].size(), 2u);
  EXPECT_THROW(encode(c[0], vocab, LabelSet::emorynlp()), ArgumentError);
}

TEST(Batches, NeverSplitConversations) {
  Rng rng(3);
  auto b = make_batches(10, 4, rng, false);
  ASSERT_EQ(b.size(), 3u);
  EXPECT_EQ(b[0].size(), 4u);
  EXPECT_EQ(b[1].size(), 4u);
  EXPECT_EQ(b[2].size(), 2u);
  EXPECT_EQ(b[2], (std::vector<std::size_t>{8, 9}));
  auto s = make_batches(10, 4, rng, true);
  std::vector<int> seen(10, 0);
  for (const auto& batch : s)
    for (auto i : batch) ++seen[i];
  for (int k : seen) EXPECT_EQ(k, 1);
  EXPECT_THROW(make_batches(3, 0, rng, false), ArgumentError);
}

TEST(Synthetic, LabelsFollowPreviousSameSpeakerMarker) {
  auto labels = std::make_shared<const LabelSet>(LabelSet::emorynlp());
  SyntheticSpec spec;
  spec.labeled = 20;
  spec.unlabeled = 4;
  auto syn = make_synthetic_corpus(spec, labels);
  ASSERT_EQ(syn.labeled.size(), 20u);
  for (const auto& conv : syn.labeled) {
    EXPECT_GE(conv.size(), spec.min_utterances);
    EXPECT_LE(conv.size(), spec.max_utterances);
    EXPECT_LE(conv.speaker_count(), spec.speakers_per_conversation);
    std::map<std::string, std::string> last;
    for (const auto& u : conv.utterances) {
      std::string marker;
      for (const auto& t : u.tokens)
        if (t.rfind("cue", 0) == 0) marker = t;
      ASSERT_FALSE(marker.empty());
      auto it = last.find(u.speaker);
      const std::size_t want = it == last.end() ? 0 : std::stoul(it->second.substr(3));
      EXPECT_EQ(*u.emotion, labels->names[want]);
      last[u.speaker] = marker;
    }
  }
  for (const auto& conv : syn.unlabeled) EXPECT_FALSE(conv.has_emotions());
}

TEST(Convert, MeldCsvGroupsByDialogue) {
  std::istringstream in(
      "Sr No.,Utterance,Speaker,Emotion,Sentiment,Dialogue_ID,Utterance_ID\n"
      "1,\"Oh, hi!\",Monica,Joy,positive,0,0\n"
      "2,\"He said \"\"no\"\".\",Joey,neutral,neutral,0,1\n"
      "3,Fine.,Ross,Sadness,negative,4,0\n");
  auto c = convert_meld_csv(in, "m.csv");
  ASSERT_EQ(c.size(), 2u);
  EXPECT_EQ(c[0].id, "dia0");
  ASSERT_EQ(c[0].size(), 2u);
  EXPECT_EQ(c[0].utterances[0].text, "Oh, hi!");
  EXPECT_EQ(c[0].utterances[0].emotion, std::optional<std::string>("joy"));
  EXPECT_EQ(c[0].utterances[1].text, "He said \"no\".");
  EXPECT_EQ(c[1].id, "dia4");
  EXPECT_EQ(c[1].utterances[0].speaker, "Ross");

  std::stringstream ss;
  write_corpus(ss, c);
  auto back = parse_corpus(ss, meld());
  EXPECT_EQ(back, c);
}

TEST(Convert, MeldCsvErrors) {
  std::istringstream missing("Utterance,Speaker,Emotion\nhi,A,joy\n");
  EXPECT_THROW(convert_meld_csv(missing), FormatError);
  std::istringstream short_row("Utterance,Speaker,Emotion,Dialogue_ID\nhi,A\n");
  try {
    convert_meld_csv(short_row, "s.csv");
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("s.csv:2"), std::string::npos) << e.what();
  }
  std::istringstream open_quote("Utterance,Speaker,Emotion,Dialogue_ID\n\"hi,A,joy,1\n");
  EXPECT_THROW(convert_meld_csv(open_quote), FormatError);
}

TEST(Convert, EmoryNlpJsonJoinsSpeakers) {
  std::istringstream in(R"({"episodes":[{"scenes":[{"scene_id":"s01_e01_c01","utterances":[
      {"speakers":["Monica Geller"],"transcript":"There's nothing to tell!","emotion":"Joyful"},
      {"speakers":["Joey Tribbiani","Chandler Bing"],"transcript":"C'mon.","emotion":"Neutral"}]}]}]})");
  auto c = convert_emorynlp_json(in);
  ASSERT_EQ(c.size(), 1u);
  EXPECT_EQ(c[0].id, "s01_e01_c01");
  EXPECT_EQ(c[0].utterances[1].speaker, "Joey Tribbiani & Chandler Bing");
  EXPECT_EQ(c[0].utterances[0].emotion, std::optional<std::string>("joyful"));
  std::istringstream bad(R"({"episodes":[{"scenes":[{"utterances":[{"speakers":[],"transcript":"x","emotion":"Sad"}]}]}]})");
  try {
    convert_emorynlp_json(bad, "e.json");
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("episode 0 scene 0 utterance 0"), std::string::npos);
  }
}

TEST(Convert, TranscriptKeepsSpeakersVerbatim) {
  std::istringstream in(
      "[Scene: Central Perk.]\n"
      "Monica: There's nothing to tell! (She sits.)\n"
      "(They all stare.)\n"
      "Joey Tribbiani: C'mon.\n"
      "\n"
      "[Scene: Monica's apartment.]\n"
      "Ross: Hi.\n");
  auto c = convert_friends_transcript(in);
  ASSERT_EQ(c.size(), 2u);
  EXPECT_EQ(c[0].id, "scene0");
  ASSERT_EQ(c[0].size(), 2u);
  EXPECT_EQ(c[0].utterances[0].text, "There's nothing to tell!");
  EXPECT_EQ(c[0].utterances[1].speaker, "Joey Tribbiani");
  EXPECT_FALSE(c[0].has_emotions());
  EXPECT_EQ(c[1].utterances[0].speaker, "Ross");
  std::istringstream bad("[Scene]\nno colon here\n");
  try {
    convert_friends_transcript(bad, "t.txt");
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("t.txt:2"), std::string::npos);
  }
}

TEST(Convert, UnknownFormatName) {
  EXPECT_EQ(parse_source_format("meld-csv"), SourceFormat::MeldCsv);
  EXPECT_THROW(parse_source_format("xml"), ArgumentError);
}
