#include <gtest/gtest.h>

#include <fstream>
#include <random>
#include <sstream>

#include "dialoscope/error.hpp"
#include "dialoscope/prompting.hpp"
#include "support/synthetic.hpp"

namespace dialoscope::prompting {
namespace {

using corpus::Dialogue;
using corpus::LikertRating;
using corpus::Speaker;

std::string read_template_file(const std::string& name) {
    std::ifstream in(std::string(DIALOSCOPE_TEMPLATE_DIR) + "/" + name + ".txt", std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// Independent substitution: separate string replaces on a fresh copy.
std::string oracle_render(const std::string& body, const std::string& examples, const std::string& dialogue) {
    std::string out = body;
    out.replace(out.find("{examples}"), 10, examples);
    out.replace(out.find("{dialogue}"), 10, dialogue);
    return out;
}

Dialogue make(std::string id, std::vector<std::string> lines, std::optional<int> gold = std::nullopt) {
    Dialogue d;
    d.id = std::move(id);
    d.source = "t";
    for (std::size_t i = 0; i < lines.size(); ++i) {
        d.turns.push_back({i % 2 == 0 ? Speaker::user : Speaker::system, lines[i]});
    }
    if (gold) d.gold = LikertRating(*gold);
    return d;
}

const Dialogue kTarget = make("target", {"find me a jazz club", "Blue Note is open tonight"});

constexpr TemplateKind kAllKinds[] = {TemplateKind::logits, TemplateKind::rating_first, TemplateKind::analysis_first};

TEST(Templates, EmbeddedBodiesMatchFiles) {
    for (auto kind : kAllKinds) {
        const auto file = read_template_file(std::string(to_string(kind)));
        ASSERT_FALSE(file.empty()) << to_string(kind);
        EXPECT_EQ(template_body(kind), file) << to_string(kind);
    }
}

TEST(Templates, KindNames) {
    for (auto kind : kAllKinds) EXPECT_EQ(parse_template_kind(to_string(kind)), kind);
    EXPECT_THROW(parse_template_kind("chain"), ConfigError);
}

TEST(Templates, EachHasOneMarkerOfEach) {
    for (auto kind : kAllKinds) {
        const auto body = template_body(kind);
        for (auto marker : {kExamplesMarker, kDialogueMarker}) {
            const auto first = body.find(marker);
            ASSERT_NE(first, std::string_view::npos);
            EXPECT_EQ(body.find(marker, first + 1), std::string_view::npos);
        }
        EXPECT_LT(body.find(kExamplesMarker), body.find(kDialogueMarker));
    }
}

TEST(ZeroShot, ByteIdenticalToSubstitutedFile) {
    for (auto kind : kAllKinds) {
        const auto want = oracle_render(read_template_file(std::string(to_string(kind))), "",
                                        "User: find me a jazz club\nSystem: Blue Note is open tonight");
        const auto got = render_zero_shot(kind, kTarget);
        EXPECT_EQ(got.text, want);
        EXPECT_TRUE(got.example_ids.empty());
        EXPECT_FALSE(got.truncated);
    }
}

TEST(ZeroShot, LogitsEndsWithScoreCue) {
    const auto text = render_zero_shot(TemplateKind::logits, kTarget).text;
    EXPECT_TRUE(text.ends_with("Score:"));
    EXPECT_NE(text.find("[1,2,3,4,5]"), std::string::npos);
    EXPECT_NE(text.find("User: find me a jazz club\nSystem: Blue Note is open tonight"), std::string::npos);
}

TEST(ZeroShot, AnalysisFirstListsAspects) {
    const auto text = render_zero_shot(TemplateKind::analysis_first, kTarget).text;
    for (const char* aspect : {"1.User goal.", "2.User feedback.", "3.System response.", "4.System feedback."}) {
        EXPECT_NE(text.find(aspect), std::string::npos) << aspect;
    }
    EXPECT_LT(text.find("4.System feedback."), text.find("Based the above analysis"));
}

TEST(ZeroShot, RatingFirstAsksForExplanation) {
    const auto text = render_zero_shot(TemplateKind::rating_first, kTarget).text;
    EXPECT_NE(text.find("give an explanation for choosing that score"), std::string::npos);
    EXPECT_NE(text.find("A score of 5 means very satisfied"), std::string::npos);
}

TEST(FewShot, SingleExampleBlockFormat) {
    const auto ex = InContextExample::from(make("e1", {"play rock", "playing jazz", "no, rock!"}, 2));
    const auto got = render_few_shot(TemplateKind::logits, kTarget, std::span(&ex, 1));
    const std::string block = "User: play rock\nSystem: playing jazz\nUser: no, rock!\nScore: 2\n\n";
    EXPECT_EQ(render_example_block(ex), block);
    EXPECT_EQ(got.text, block + render_zero_shot(TemplateKind::logits, kTarget).text);
    EXPECT_EQ(got.example_ids, std::vector<std::string>{"e1"});
    EXPECT_EQ(got.example_block_sizes, std::vector<std::size_t>{block.size()});
}

TEST(FewShot, FourExamplesRenderedBestLast) {
    std::vector<InContextExample> ranked;
    for (int i = 0; i < 4; ++i) {
        ranked.push_back(InContextExample::from(make("e" + std::to_string(i), {"turn " + std::to_string(i)}, i + 1)));
    }
    for (auto kind : kAllKinds) {
        const auto got = render_few_shot(kind, kTarget, ranked);
        EXPECT_EQ(got.example_ids, (std::vector<std::string>{"e3", "e2", "e1", "e0"}));
        const std::string blocks =
            "User: turn 3\nScore: 4\n\nUser: turn 2\nScore: 3\n\nUser: turn 1\nScore: 2\n\nUser: turn 0\nScore: 1\n\n";
        EXPECT_EQ(got.text, oracle_render(read_template_file(std::string(to_string(kind))), blocks,
                                          corpus::serialize_dialogue(kTarget)));
        // The best match sits immediately before the instruction.
        EXPECT_LT(got.text.find("turn 1"), got.text.find("turn 0"));
        EXPECT_LT(got.text.find("turn 0"), got.text.find("Instruction:"));
    }
}

TEST(FewShot, EmptyExampleListEqualsZeroShot) {
    for (auto kind : kAllKinds) {
        const auto few = render_few_shot(kind, kTarget, {});
        EXPECT_EQ(few.text, render_zero_shot(kind, kTarget).text);
        EXPECT_TRUE(few.example_ids.empty());
    }
}

TEST(FewShot, ZeroShotIsSuffix) {
    const auto pool = testing::synthetic_dialogues(12, 4);
    std::mt19937_64 rng(2);
    for (int t = 0; t < 50; ++t) {
        std::vector<InContextExample> ex;
        const auto k = rng() % 6;
        for (std::size_t i = 0; i < k; ++i) ex.push_back(InContextExample::from(pool[rng() % pool.size()]));
        for (auto kind : kAllKinds) {
            const auto few = render_few_shot(kind, pool[0], ex).text;
            ASSERT_TRUE(few.ends_with(render_zero_shot(kind, pool[0]).text));
        }
    }
}

TEST(FewShot, ExampleWithoutGoldRejected) {
    EXPECT_THROW(InContextExample::from(make("u", {"hi"})), DataError);
}

TEST(FewShot, TargetGoldNeverRendered) {
    const auto target = make("t", {"hello"}, 5);
    const auto text = render_zero_shot(TemplateKind::logits, target).text;
    EXPECT_EQ(text.find("Score: 5"), std::string::npos);
}

AssembledPrompt four_shot(TemplateKind kind = TemplateKind::logits) {
    std::vector<InContextExample> ranked;
    for (int i = 0; i < 4; ++i) {
        ranked.push_back(InContextExample::from(
            make("e" + std::to_string(i), {"example number " + std::to_string(i) + " text"}, 3)));
    }
    return render_few_shot(kind, kTarget, ranked);
}

TEST(FitToBudget, UnderBudgetUnchanged) {
    const auto p = four_shot();
    const auto fitted = fit_to_budget(p, p.char_count());
    EXPECT_EQ(fitted.text, p.text);
    EXPECT_FALSE(fitted.truncated);
}

TEST(FitToBudget, DropsLeastSimilarFirst) {
    const auto p = four_shot();
    const auto fitted = fit_to_budget(p, p.char_count() - 1);
    EXPECT_TRUE(fitted.truncated);
    EXPECT_EQ(fitted.example_ids, (std::vector<std::string>{"e2", "e1", "e0"}));
    std::vector<InContextExample> keep;
    for (int i = 0; i < 3; ++i) {
        keep.push_back(InContextExample::from(
            make("e" + std::to_string(i), {"example number " + std::to_string(i) + " text"}, 3)));
    }
    EXPECT_EQ(fitted.text, render_few_shot(TemplateKind::logits, kTarget, keep).text);
    EXPECT_LE(fitted.char_count(), p.char_count() - 1);
}

TEST(FitToBudget, AllExamplesDroppedLeavesZeroShot) {
    for (auto kind : kAllKinds) {
        const auto p = four_shot(kind);
        const auto zero = render_zero_shot(kind, kTarget);
        const auto fitted = fit_to_budget(p, zero.char_count());
        EXPECT_EQ(fitted.text, zero.text);
        EXPECT_TRUE(fitted.example_ids.empty());
        EXPECT_TRUE(fitted.truncated);
    }
}

TEST(FitToBudget, BelowZeroShotThrows) {
    const auto p = four_shot();
    EXPECT_THROW(fit_to_budget(p, render_zero_shot(TemplateKind::logits, kTarget).char_count() - 1), DataError);
}

TEST(FitToBudget, CountsCodePoints) {
    auto d = make("t", {"caf\xc3\xa9 cr\xc3\xa8me"});
    const auto p = render_zero_shot(TemplateKind::logits, d);
    EXPECT_EQ(p.char_count(), p.text.size() - 2);
    EXPECT_NO_THROW(fit_to_budget(p, p.text.size() - 2));
}

TEST(FitToBudget, Idempotent) {
    const auto p = four_shot();
    for (std::size_t budget = render_zero_shot(TemplateKind::logits, kTarget).char_count(); budget <= p.char_count();
         budget += 7) {
        const auto once = fit_to_budget(p, budget);
        const auto twice = fit_to_budget(once, budget);
        ASSERT_EQ(once.text, twice.text);
        ASSERT_EQ(once.example_ids, twice.example_ids);
        ASSERT_LE(once.char_count(), budget);
    }
}

TEST(ZeroShot, Deterministic) {
    for (auto kind : kAllKinds) EXPECT_EQ(render_zero_shot(kind, kTarget).text, render_zero_shot(kind, kTarget).text);
}

TEST(FitToBudget, TwoMostSimilarSurvive) {
    const auto p = four_shot();
    // Budget between the sizes with two and with three examples left.
    const std::size_t two = p.char_count() - p.example_block_sizes[0] - p.example_block_sizes[1];
    const auto fitted = fit_to_budget(p, two + p.example_block_sizes[2] - 1);
    EXPECT_EQ(fitted.example_ids, (std::vector<std::string>{"e1", "e0"}));
    EXPECT_TRUE(fitted.truncated);
    EXPECT_EQ(fitted.char_count(), two);
}

}  // namespace
}  // namespace dialoscope::prompting
