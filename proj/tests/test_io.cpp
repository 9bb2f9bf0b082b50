// Copyright 2026 The UniRAG Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cstring>
#include <set>
#include <sstream>

#include "support.hpp"
#include "unirag/common.hpp"
#include "unirag/corpus.hpp"
#include "unirag/uemb.hpp"

namespace unirag {
namespace {

using namespace unirag::testing;

TEST(Rng, SplitMixMatchesPublishedVector) {
  std::uint64_t s = 0;
  EXPECT_EQ(Rng::splitmix64(s), 0xE220A8397B1DCDAFULL);
  EXPECT_EQ(Rng::splitmix64(s), 0x6E789E6AA1B965F4ULL);
}

TEST(Rng, SameSeedSameStream) {
  Rng a(42), b(42), c(43);
  bool differs = false;
  for (int i = 0; i < 100; ++i) {
    const auto x = a();
    EXPECT_EQ(x, b());
    differs |= x != c();
  }
  EXPECT_TRUE(differs);
}

TEST(Rng, BoundedStaysInRangeAndCoversIt) {
  Rng r(7);
  std::set<std::uint64_t> seen;
  for (int i = 0; i < 10000; ++i) {
    const auto v = r.bounded(13);
    ASSERT_LT(v, 13u);
    seen.insert(v);
  }
  EXPECT_EQ(seen.size(), 13u);
  for (int i = 0; i < 1000; ++i) {
    const double u = r.uniform();
    ASSERT_GE(u, 0.0);
    ASSERT_LT(u, 1.0);
  }
}

TEST(Rng, DeriveSeedSeparatesKeysAndSeeds) {
  EXPECT_EQ(derive_seed(1, "q1"), derive_seed(1, "q1"));
  EXPECT_NE(derive_seed(1, "q1"), derive_seed(1, "q2"));
  EXPECT_NE(derive_seed(1, "q1"), derive_seed(2, "q1"));
}

TEST(Hashing, Sha256KnownVectors) {
  EXPECT_EQ(sha256_hex(""), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
  EXPECT_EQ(sha256_hex("abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST(Hashing, Base64KnownVectorsAndRoundTrip) {
  EXPECT_EQ(base64_encode(""), "");
  EXPECT_EQ(base64_encode("f"), "Zg==");
  EXPECT_EQ(base64_encode("fo"), "Zm8=");
  EXPECT_EQ(base64_encode("foo"), "Zm9v");
  EXPECT_EQ(base64_encode("foobar"), "Zm9vYmFy");
  std::mt19937_64 gen(3);
  for (int len = 0; len < 40; ++len) {
    std::string bytes(static_cast<std::size_t>(len), '\0');
    for (auto& c : bytes) c = static_cast<char>(gen());
    EXPECT_EQ(base64_decode(base64_encode(bytes)), bytes) << len;
  }
  EXPECT_THROW(base64_decode("abc"), ValidationError);
}

// ---------------------------------------------------------------------------

constexpr const char* kPool =
    R"({"did":"t1","modality":"text","txt":"a dog","image_path":null,"complement_did":"i1","src_dataset":"coco"})"
    "\n"
    R"({"did":"i1","modality":"image","txt":null,"image_path":"img/1.png","complement_did":"t1","src_dataset":"coco"})"
    "\n\n"
    R"({"did":"t2","modality":"text","txt":"a cat","image_path":null,"complement_did":null,"src_dataset":"coco"})"
    "\n";

TEST(Corpus, ReadsPoolAndResolvesComplements) {
  std::istringstream in(kPool);
  const CandidatePool pool = read_pool(in);
  ASSERT_EQ(pool.size(), 3u);
  EXPECT_EQ(pool.at("t1").payload(), "a dog");
  EXPECT_EQ(pool.at("i1").payload(), "img/1.png");
  ASSERT_NE(pool.complement_of(pool.at("t1")), nullptr);
  EXPECT_EQ(pool.complement_of(pool.at("t1"))->did, "i1");
  EXPECT_EQ(pool.complement_of(pool.at("t2")), nullptr);
  EXPECT_EQ(pool.with_payload(Modality::Text, "a cat").size(), 1u);
  EXPECT_TRUE(pool.with_payload(Modality::Image, "a cat").empty());
  EXPECT_THROW(pool.at("nope"), IntegrityError);
}

TEST(Corpus, PoolRoundTripsThroughWriter) {
  std::istringstream in(kPool);
  const CandidatePool pool = read_pool(in);
  std::ostringstream out;
  write_pool(out, pool);
  std::istringstream again(out.str());
  const CandidatePool pool2 = read_pool(again);
  ASSERT_EQ(pool2.size(), pool.size());
  for (const auto& d : pool.docs()) EXPECT_EQ(to_json(pool2.at(d.did)), to_json(d));
}

TEST(Corpus, DuplicateDidNamesBothLines) {
  std::istringstream in(std::string(kPool) +
                        R"({"did":"t2","modality":"text","txt":"again","src_dataset":"coco"})" "\n");
  try {
    read_pool(in);
    FAIL() << "expected IntegrityError";
  } catch (const IntegrityError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("'t2'"), std::string::npos) << msg;
    EXPECT_NE(msg.find("line 5"), std::string::npos) << msg;
    EXPECT_NE(msg.find("line 4"), std::string::npos) << msg;
  }
}

TEST(Corpus, MalformedLineReportsLineNumber) {
  std::istringstream in("{\"did\":\"a\",\"modality\":\"text\",\"txt\":\"x\"}\n{not json}\n");
  try {
    read_pool(in);
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 2u);
  }
}

TEST(Corpus, ShapeMismatchIsParseError) {
  std::istringstream in(R"({"did":"a","modality":"image","txt":"x"})");
  EXPECT_THROW(read_pool(in), ParseError);
}

TEST(Corpus, DanglingComplementRejectedUnlessLenient) {
  const std::string text =
      R"({"did":"a","modality":"text","txt":"x","complement_did":"ghost"})" "\n";
  std::istringstream strict(text);
  EXPECT_THROW(read_pool(strict), IntegrityError);
  std::istringstream lenient(text);
  const auto pool = read_pool(lenient, PoolLoadOptions{false});
  EXPECT_EQ(pool.complement_of(pool.at("a")), nullptr);
}

TEST(Corpus, QueriesMustMatchTaskModality) {
  const std::string text =
      R"({"qid":"q1","modality":"image","content":"a.png","pos_dids":["t1"]})" "\n";
  std::istringstream ok(text);
  const auto qs = read_queries(ok, Task::Caption);
  ASSERT_EQ(qs.size(), 1u);
  EXPECT_EQ(qs[0].pos_dids, std::vector<std::string>{"t1"});
  std::istringstream bad(text);
  EXPECT_THROW(read_queries(bad, Task::ImageGen), ParseError);
}

std::vector<QueryRecord> caption_queries(int groups, int per_group) {
  std::vector<QueryRecord> qs;
  for (int g = 0; g < groups; ++g) {
    for (int m = 0; m < per_group; ++m) {
      QueryRecord q;
      q.qid = "g" + std::to_string(g) + "c" + std::to_string(m);
      q.modality = Modality::Text;
      q.content = "caption " + q.qid;
      q.group_key = "img" + std::to_string(g);
      q.pos_dids = {"img" + std::to_string(g)};
      qs.push_back(q);
    }
  }
  return qs;
}

TEST(Corpus, SamplingPicksOnePerGroupDeterministically) {
  const auto qs = caption_queries(50, 5);
  const auto a = sample_one_caption_per_image(qs, 11);
  const auto b = sample_one_caption_per_image(qs, 11);
  const auto c = sample_one_caption_per_image(qs, 12);
  EXPECT_EQ(a.selected, b.selected);
  EXPECT_NE(a.selected, c.selected);
  ASSERT_EQ(a.selected.size(), 50u);
  std::set<std::string> groups;
  for (const auto& qid : a.selected) groups.insert(qid.substr(0, qid.find('c')));
  EXPECT_EQ(groups.size(), 50u);

  // Input order of unrelated groups does not change the pick for a group.
  auto shuffled = qs;
  std::reverse(shuffled.begin(), shuffled.end());
  std::stable_sort(shuffled.begin(), shuffled.end(),
                   [](const QueryRecord& x, const QueryRecord& y) { return x.qid < y.qid; });
  EXPECT_EQ(sample_one_caption_per_image(shuffled, 11).selected, a.selected);

  const auto kept = apply_sample(qs, a);
  ASSERT_EQ(kept.size(), 50u);
  std::set<std::string> chosen(a.selected.begin(), a.selected.end());
  for (const auto& q : kept) EXPECT_TRUE(chosen.count(q.qid)) << q.qid;
}

TEST(Corpus, SamplingRequiresGroupKeys) {
  auto qs = caption_queries(2, 2);
  qs[1].group_key.clear();
  EXPECT_THROW(sample_one_caption_per_image(qs, 1), ValidationError);
}

// ---------------------------------------------------------------------------

EmbeddingStore small_store(std::uint16_t flags = kUembPlain) {
  EmbeddingStore s(3, flags);
  const std::vector<float> a{0.25f, 0.5f, 0.25f}, b{1.0f, 0.0f, 0.0f};
  s.add("alpha", Modality::Text, a);
  s.add("beta", Modality::Image, b);
  return s;
}

std::string serialize(const EmbeddingStore& s) {
  std::ostringstream os;
  write_uemb(os, s);
  return os.str();
}

EmbeddingStore parse(const std::string& bytes) {
  std::istringstream is(bytes);
  return read_uemb(is);
}

TEST(Uemb, HeaderLayoutIsByteExact) {
  const std::string bytes = serialize(small_store());
  ASSERT_GE(bytes.size(), 20u);
  EXPECT_EQ(bytes.substr(0, 4), "UEMB");
  EXPECT_EQ(static_cast<int>(bytes[4]), 1);
  EXPECT_EQ(static_cast<int>(bytes[5]), 0);
  std::uint16_t flags;
  std::uint32_t dim;
  std::uint64_t count;
  std::memcpy(&flags, bytes.data() + 6, 2);
  std::memcpy(&dim, bytes.data() + 8, 4);
  std::memcpy(&count, bytes.data() + 12, 8);
  EXPECT_EQ(flags, 0);
  EXPECT_EQ(dim, 3u);
  EXPECT_EQ(count, 2u);
  // First record: u16 len, "alpha", modality byte, 3 floats.
  std::uint16_t len;
  std::memcpy(&len, bytes.data() + 20, 2);
  EXPECT_EQ(len, 5);
  EXPECT_EQ(bytes.substr(22, 5), "alpha");
  EXPECT_EQ(static_cast<int>(bytes[27]), 0);
  float first;
  std::memcpy(&first, bytes.data() + 28, 4);
  EXPECT_EQ(first, 0.25f);
  EXPECT_EQ(bytes.size(), 20u + 2 * (2 + 3 * 4 + 1) + 5 + 4);
}

TEST(Uemb, RoundTripIsBitwise) {
  std::mt19937_64 gen(5);
  EmbeddingStore s(17);
  for (int i = 0; i < 200; ++i) {
    s.add("id" + std::to_string(i), i % 3 ? Modality::Text : Modality::Image, gaussian_vector(gen, 17));
  }
  const std::string bytes = serialize(s);
  const EmbeddingStore back = parse(bytes);
  EXPECT_EQ(back.ids(), s.ids());
  EXPECT_EQ(back.modalities(), s.modalities());
  ASSERT_EQ(back.data().size(), s.data().size());
  EXPECT_EQ(std::memcmp(back.data().data(), s.data().data(), s.data().size() * sizeof(float)), 0);
  EXPECT_EQ(serialize(back), bytes);
}

TEST(Uemb, ProbabilityFlagChecksRowSums) {
  const EmbeddingStore probs = parse(serialize(small_store(kUembProbabilities)));
  EXPECT_EQ(probs.flags(), kUembProbabilities);

  EmbeddingStore bad(2, kUembProbabilities);
  const std::vector<float> row{0.5f, 0.6f};
  bad.add("x", Modality::Image, row);
  EXPECT_THROW(parse(serialize(bad)), ValidationError);
}

TEST(Uemb, RejectsCorruptInput) {
  const std::string good = serialize(small_store());
  auto mutate = [&](std::size_t at, char v) {
    std::string b = good;
    b[at] = v;
    return b;
  };
  EXPECT_THROW(parse(mutate(0, 'X')), ValidationError);   // magic
  EXPECT_THROW(parse(mutate(4, 2)), ValidationError);     // version
  EXPECT_THROW(parse(mutate(5, 1)), ValidationError);     // dtype
  EXPECT_THROW(parse(mutate(6, 2)), ValidationError);     // flags
  EXPECT_THROW(parse(mutate(27, 7)), ValidationError);    // modality byte
  EXPECT_THROW(parse(good.substr(0, good.size() - 1)), ValidationError);  // truncated
  EXPECT_THROW(parse(good + "x"), ValidationError);       // trailing bytes

  std::string zero_dim = good;
  std::memset(zero_dim.data() + 8, 0, 4);
  EXPECT_THROW(parse(zero_dim), ValidationError);

  std::string nan = good;
  const float q = std::numeric_limits<float>::quiet_NaN();
  std::memcpy(nan.data() + 28, &q, 4);
  EXPECT_THROW(parse(nan), ValidationError);
}

TEST(Uemb, RejectsDuplicateIdsAndLengthMismatch) {
  EmbeddingStore s(2);
  const std::vector<float> v{1, 2};
  s.add("a", Modality::Text, v);
  s.add("a", Modality::Text, v);
  EXPECT_THROW(s.validate(), ValidationError);
  const std::vector<float> wrong{1, 2, 3};
  EXPECT_THROW(s.add("b", Modality::Text, wrong), ValidationError);
}

TEST(Uemb, FileHelpersRoundTrip) {
  TempDir dir;
  const auto path = (dir / "x.uemb").string();
  save_uemb(path, small_store());
  const auto back = load_uemb(path);
  EXPECT_EQ(back.ids(), small_store().ids());
  EXPECT_THROW(load_uemb((dir / "missing.uemb").string()), Error);
}

}  // namespace
}  // namespace unirag
